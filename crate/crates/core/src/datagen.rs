//! Synthetic tri-modal world: scenes rendered as images, token sequences,
//! and mel-like audio grids.
//!
//! Two disjoint corpora are drawn from it — A pairs (image, text), B pairs
//! (text, audio) — with a controllable vocabulary overlap between them.
//! The audio code is exactly invertible, so anything generated back into
//! audio can be decoded and scored without an external recognizer.

use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ensure_arg;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scene descriptions always render to this many tokens: color, shape,
/// position — in that order.
pub const TEXT_LEN: usize = 3;

/// Lit cell value in rendered images. Kept well inside the open (0,1)
/// range that the squashed decoder outputs can reach: values at or near
/// the boundary would need unbounded pre-activations and learn slowly.
pub const IMG_ON: f32 = 0.85;
/// Background cell value in rendered images.
pub const IMG_OFF: f32 = 0.2;

/// Peak amplitude of a token's frequency band.
pub const AUDIO_PEAK: f32 = 1.0;
/// Upper bound of the off-band envelope; the decoding margin is
/// `AUDIO_PEAK - AUDIO_ENV_MAX` = 0.8.
pub const AUDIO_ENV_MAX: f32 = 0.2;

/// Number of bit slots per image band; caps renderable ids at 254.
const IMG_BITS: usize = 8;

/// One synthetic scene: a color, a shape, and a position, each an index
/// into its own vocabulary partition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scene {
    pub shape_id: usize,
    pub color_id: usize,
    pub position_id: usize,
}

/// Token vocabulary partitioned into colors, shapes, and positions.
/// Global token ids are laid out contiguously: colors first, then shapes,
/// then positions. One extra symbol id (`eos`) exists for sequence
/// decoding but never appears in rendered text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    vocab_size: usize,
    part_sizes: [usize; 3],
    part_offsets: [usize; 3],
}

impl Vocab {
    pub fn new(vocab_size: usize) -> Result<Vocab> {
        ensure_arg!(vocab_size >= 3, "vocab_size must be at least 3, got {}", vocab_size);
        let base = vocab_size / 3;
        let rem = vocab_size % 3;
        let mut part_sizes = [base; 3];
        for p in part_sizes.iter_mut().take(rem) {
            *p += 1;
        }
        ensure_arg!(
            part_sizes[0] <= 255,
            "vocab_size {} makes partitions too large to render",
            vocab_size
        );
        let part_offsets = [0, part_sizes[0], part_sizes[0] + part_sizes[1]];
        Ok(Vocab {
            vocab_size,
            part_sizes,
            part_offsets,
        })
    }

    pub fn size(&self) -> usize {
        self.vocab_size
    }

    pub fn part_sizes(&self) -> [usize; 3] {
        self.part_sizes
    }

    /// Global token id for a (partition, local index) pair.
    pub fn token(&self, part: usize, local: usize) -> u32 {
        assert!(part < 3 && local < self.part_sizes[part], "token out of partition");
        (self.part_offsets[part] + local) as u32
    }

    /// Inverse of [`Vocab::token`]: partition and local index of a global id.
    pub fn split(&self, token: u32) -> Option<(usize, usize)> {
        let t = token as usize;
        if t >= self.vocab_size {
            return None;
        }
        for part in (0..3).rev() {
            if t >= self.part_offsets[part] {
                return Some((part, t - self.part_offsets[part]));
            }
        }
        None
    }

    /// End-of-sequence symbol used by sequence decoding.
    pub fn eos(&self) -> u32 {
        self.vocab_size as u32
    }

    /// Symbol-table size for text models: all tokens plus the eos symbol.
    pub fn n_symbols(&self) -> usize {
        self.vocab_size + 1
    }
}

/// Everything needed to generate one world deterministically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_a: usize,
    pub n_b: usize,
    /// Held-out split drawn from A's scene distribution (for evaluation).
    pub n_eval_a: usize,
    /// Held-out split drawn from B's scene distribution (retrieval gallery).
    pub n_eval_b: usize,
    pub vocab_size: usize,
    /// Fraction of the vocabulary shared between A's and B's scene
    /// distributions; the shared token count is exactly
    /// `round(overlap_fraction * vocab_size)`.
    pub overlap_fraction: f64,
    pub image_h: usize,
    pub image_w: usize,
    /// Frequency bands F of the audio grid; must cover the vocabulary.
    pub bands: usize,
    pub frames_per_token: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_a: 64,
            n_b: 64,
            n_eval_a: 16,
            n_eval_b: 16,
            vocab_size: 12,
            overlap_fraction: 0.5,
            image_h: 16,
            image_w: 16,
            bands: 16,
            frames_per_token: 10,
            seed: 7,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        ensure_arg!(self.n_a >= 1 && self.n_b >= 1, "n_a and n_b must be at least 1");
        ensure_arg!(
            (0.0..=1.0).contains(&self.overlap_fraction),
            "overlap_fraction must lie in [0,1], got {}",
            self.overlap_fraction
        );
        ensure_arg!(
            self.image_h >= 8 && self.image_w >= 8,
            "image size {}x{} too small to render (minimum 8x8)",
            self.image_h,
            self.image_w
        );
        ensure_arg!(
            self.bands >= self.vocab_size,
            "bands {} cannot give every one of {} tokens its own band",
            self.bands,
            self.vocab_size
        );
        ensure_arg!(self.frames_per_token >= 1, "frames_per_token must be at least 1");
        Vocab::new(self.vocab_size)?;
        Ok(())
    }

    /// Audio rows per rendered sequence.
    pub fn audio_rows(&self) -> usize {
        self.frames_per_token * TEXT_LEN
    }
}

/// One scene in up to three modalities. Samples from dataset A carry no
/// audio; samples from dataset B carry no image.
#[derive(Clone, Debug)]
pub struct TriModalSample {
    pub scene: Scene,
    pub text: Vec<u32>,
    pub image: Option<Tensor<f32>>,
    pub audio: Option<Tensor<f32>>,
}

/// A generated world: the two training corpora, their held-out splits,
/// and the token sets each corpus draws from.
#[derive(Clone, Debug)]
pub struct World {
    pub spec: DatasetSpec,
    pub vocab: Vocab,
    pub a: Vec<TriModalSample>,
    pub b: Vec<TriModalSample>,
    pub eval_a: Vec<TriModalSample>,
    pub eval_b: Vec<TriModalSample>,
    pub a_tokens: BTreeSet<u32>,
    pub b_tokens: BTreeSet<u32>,
}

impl World {
    /// Tokens only A's distribution can produce (the zero-shot set).
    pub fn a_only_tokens(&self) -> BTreeSet<u32> {
        self.a_tokens.difference(&self.b_tokens).copied().collect()
    }
}

/// Fixed text template: color token, shape token, position token.
pub fn render_text(scene: &Scene, vocab: &Vocab) -> Vec<u32> {
    vec![
        vocab.token(0, scene.color_id),
        vocab.token(1, scene.shape_id),
        vocab.token(2, scene.position_id),
    ]
}

/// Inverse of [`render_text`].
pub fn scene_from_text(tokens: &[u32], vocab: &Vocab) -> Result<Scene> {
    ensure_arg!(
        tokens.len() == TEXT_LEN,
        "scene text must have {} tokens, got {}",
        TEXT_LEN,
        tokens.len()
    );
    let mut locals = [0usize; 3];
    for (slot, &tok) in tokens.iter().enumerate() {
        match vocab.split(tok) {
            Some((part, local)) if part == slot => locals[slot] = local,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "token {} is not a valid slot-{} token",
                    tok, slot
                )))
            }
        }
    }
    Ok(Scene {
        color_id: locals[0],
        shape_id: locals[1],
        position_id: locals[2],
    })
}

/// Slot pattern for one scene field: the eight bits of `(id + 1) * 73`
/// taken modulo 256. Multiplying by an odd constant is a bijection on
/// 8-bit values, so distinct ids give distinct patterns, and the results
/// light about half the slots instead of the one or two that raw binary
/// would. Dense patterns matter for training: a decoder facing mostly-dark
/// targets can hide in the background marginal, which starves the code it
/// conditions on of gradient.
fn slot_pattern(id: usize) -> u8 {
    (((id + 1) * 73) % (1 << IMG_BITS)) as u8
}

/// Deterministic image of a scene: the grid splits into three horizontal
/// bands (color, shape, position); each band shows its field's
/// [`slot_pattern`] across eight column slots, lit cells at [`IMG_ON`] over
/// an [`IMG_OFF`] background. Distinct scenes therefore always render
/// distinctly.
pub fn render_image(scene: &Scene, h: usize, w: usize) -> Result<Tensor<f32>> {
    ensure_arg!(h >= 8 && w >= 8, "image size {}x{} too small to render (minimum 8x8)", h, w);
    let fields = [scene.color_id, scene.shape_id, scene.position_id];
    for &id in &fields {
        ensure_arg!(id + 1 < (1 << IMG_BITS), "scene id {} too large to render", id);
    }
    let mut img = Tensor::full(&[h, w], IMG_OFF);
    let band_bounds = [0, h / 3, 2 * h / 3, h];
    let slot_w = w / IMG_BITS;
    for (band, &id) in fields.iter().enumerate() {
        let pattern = slot_pattern(id);
        for bit in 0..IMG_BITS {
            if pattern & (1 << bit) == 0 {
                continue;
            }
            for r in band_bounds[band]..band_bounds[band + 1] {
                for c in bit * slot_w..(bit + 1) * slot_w {
                    img.data_mut()[r * w + c] = IMG_ON;
                }
            }
        }
    }
    Ok(img)
}

/// Deterministic low-amplitude background for audio grids, always in
/// `[0.05, AUDIO_ENV_MAX)`: a gentle ramp across the bands. Low-frequency
/// on purpose — a cell-level dither here would put a floor under the audio
/// reconstruction loss without adding any information.
fn audio_envelope(bands: usize, col: usize) -> f32 {
    let frac = if bands > 1 { col as f32 / (bands - 1) as f32 } else { 0.0 };
    0.05 + 0.10 * frac
}

/// Mel-like audio for a token sequence: each token occupies
/// `frames_per_token` rows with full amplitude in its own frequency band
/// (band = token id) and the fixed low envelope elsewhere.
pub fn synth_audio(tokens: &[u32], frames_per_token: usize, bands: usize) -> Result<Tensor<f32>> {
    ensure_arg!(!tokens.is_empty(), "cannot synthesize audio for an empty token sequence");
    ensure_arg!(frames_per_token >= 1, "frames_per_token must be at least 1");
    for &t in tokens {
        ensure_arg!(
            (t as usize) < bands,
            "token {} outside the band mapping domain (bands = {})",
            t,
            bands
        );
    }
    let rows = tokens.len() * frames_per_token;
    let mut grid = Tensor::zeros(&[rows, bands]);
    for (block, &tok) in tokens.iter().enumerate() {
        for r in block * frames_per_token..(block + 1) * frames_per_token {
            for c in 0..bands {
                grid.data_mut()[r * bands + c] = if c == tok as usize {
                    AUDIO_PEAK
                } else {
                    audio_envelope(bands, c)
                };
            }
        }
    }
    Ok(grid)
}

/// Exact inverse of [`synth_audio`] on clean inputs; on arbitrary grids it
/// returns, per block, the band with the highest column-summed energy
/// (ties to the lowest band index).
pub fn oracle_decode_audio(audio: &Tensor<f32>, frames_per_token: usize) -> Result<Vec<u32>> {
    ensure_arg!(frames_per_token >= 1, "frames_per_token must be at least 1");
    ensure_arg!(audio.rank() == 2, "audio must be a 2-D grid, got rank {}", audio.rank());
    let (rows, bands) = (audio.dims()[0], audio.dims()[1]);
    ensure_arg!(
        rows % frames_per_token == 0,
        "audio row count {} not divisible by frames_per_token {}",
        rows,
        frames_per_token
    );
    let n_blocks = rows / frames_per_token;
    let mut out = Vec::with_capacity(n_blocks);
    for block in 0..n_blocks {
        let mut best_band = 0usize;
        let mut best_energy = f32::NEG_INFINITY;
        for c in 0..bands {
            let mut energy = 0.0f32;
            for r in block * frames_per_token..(block + 1) * frames_per_token {
                energy += audio.data()[r * bands + c];
            }
            if energy > best_energy {
                best_energy = energy;
                best_band = c;
            }
        }
        out.push(best_band as u32);
    }
    Ok(out)
}

/// Which local indices of each partition a corpus draws from.
#[derive(Clone, Debug)]
struct PartitionAllocation {
    /// A uses locals `[0, a_len)`.
    a_len: usize,
    /// B uses locals `[b_start, b_start + b_len)`.
    b_start: usize,
    b_len: usize,
}

/// Distribute the shared-token budget `round(f * vocab_size)` across the
/// three partitions proportionally to their sizes (largest-remainder
/// rounding, ties to the lower partition), then slice each partition so A
/// takes a prefix, B takes a suffix, they overlap in exactly the allotted
/// tokens, and together they cover the whole partition.
fn allocate_partitions(vocab: &Vocab, overlap_fraction: f64) -> Result<[PartitionAllocation; 3]> {
    let total = vocab.size();
    let shared_total = (overlap_fraction * total as f64).round() as usize;
    ensure_arg!(
        overlap_fraction == 0.0 || shared_total >= 1,
        "overlap_fraction {} too small to permit any shared token at vocab_size {}",
        overlap_fraction,
        total
    );
    let sizes = vocab.part_sizes();
    let quotas: Vec<f64> = sizes
        .iter()
        .map(|&s| shared_total as f64 * s as f64 / total as f64)
        .collect();
    let mut shared: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut leftover = shared_total - shared.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&i, &j| {
        let (ri, rj) = (quotas[i] - quotas[i].floor(), quotas[j] - quotas[j].floor());
        rj.partial_cmp(&ri).unwrap().then(i.cmp(&j))
    });
    for &p in &order {
        if leftover == 0 {
            break;
        }
        shared[p] += 1;
        leftover -= 1;
    }
    let mut out = Vec::with_capacity(3);
    for p in 0..3 {
        let (s, k) = (sizes[p], shared[p]);
        debug_assert!(k <= s);
        let a_len = (s + k).div_ceil(2);
        let b_len = s + k - a_len;
        let b_start = a_len - k;
        ensure_arg!(
            b_len >= 1,
            "partition {} (size {}) cannot give both corpora a token at overlap {}",
            p,
            s,
            overlap_fraction
        );
        out.push(PartitionAllocation { a_len, b_start, b_len });
    }
    Ok(out.try_into().expect("exactly three partitions"))
}

fn sample_scene<R: Rng>(alloc: &[PartitionAllocation; 3], for_a: bool, rng: &mut R) -> Scene {
    let mut locals = [0usize; 3];
    for (p, local) in locals.iter_mut().enumerate() {
        let al = &alloc[p];
        *local = if for_a {
            rng.gen_range(0..al.a_len)
        } else {
            al.b_start + rng.gen_range(0..al.b_len)
        };
    }
    Scene {
        color_id: locals[0],
        shape_id: locals[1],
        position_id: locals[2],
    }
}

fn corpus_tokens(vocab: &Vocab, alloc: &[PartitionAllocation; 3], for_a: bool) -> BTreeSet<u32> {
    let mut set = BTreeSet::new();
    for (p, al) in alloc.iter().enumerate() {
        let range = if for_a {
            0..al.a_len
        } else {
            al.b_start..al.b_start + al.b_len
        };
        for local in range {
            set.insert(vocab.token(p, local));
        }
    }
    set
}

/// Generate the full world for a spec: corpora A (image+text) and B
/// (text+audio) plus held-out splits from each distribution. Everything is
/// a pure function of the spec (including its seed).
pub fn generate_datasets(spec: &DatasetSpec) -> Result<World> {
    spec.validate()?;
    let vocab = Vocab::new(spec.vocab_size)?;
    let alloc = allocate_partitions(&vocab, spec.overlap_fraction)?;

    // One independent RNG stream per split, so split sizes don't couple.
    let make_split = |stream: u64, n: usize, for_a: bool| -> Result<Vec<TriModalSample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        (0..n)
            .map(|_| {
                let scene = sample_scene(&alloc, for_a, &mut rng);
                let text = render_text(&scene, &vocab);
                let (image, audio) = if for_a {
                    (Some(render_image(&scene, spec.image_h, spec.image_w)?), None)
                } else {
                    (None, Some(synth_audio(&text, spec.frames_per_token, spec.bands)?))
                };
                Ok(TriModalSample { scene, text, image, audio })
            })
            .collect()
    };

    let a = make_split(0, spec.n_a, true)?;
    let b = make_split(1, spec.n_b, false)?;
    let eval_a = make_split(2, spec.n_eval_a, true)?;
    let eval_b = make_split(3, spec.n_eval_b, false)?;

    Ok(World {
        spec: spec.clone(),
        vocab: vocab.clone(),
        a,
        b,
        eval_a,
        eval_b,
        a_tokens: corpus_tokens(&vocab, &alloc, true),
        b_tokens: corpus_tokens(&vocab, &alloc, false),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_partitions_are_near_equal_and_cover() {
        let v = Vocab::new(20).unwrap();
        assert_eq!(v.part_sizes(), [7, 7, 6]);
        let v = Vocab::new(12).unwrap();
        assert_eq!(v.part_sizes(), [4, 4, 4]);
        assert!(Vocab::new(2).is_err());
    }

    #[test]
    fn vocab_token_split_round_trip() {
        let v = Vocab::new(20).unwrap();
        for part in 0..3 {
            for local in 0..v.part_sizes()[part] {
                let t = v.token(part, local);
                assert_eq!(v.split(t), Some((part, local)));
            }
        }
        assert_eq!(v.split(20), None);
        assert_eq!(v.eos(), 20);
        assert_eq!(v.n_symbols(), 21);
    }

    #[test]
    fn render_text_template_and_inverse() {
        let v = Vocab::new(12).unwrap();
        let scene = Scene { shape_id: 0, color_id: 0, position_id: 0 };
        let text = render_text(&scene, &v);
        assert_eq!(text, vec![v.token(0, 0), v.token(1, 0), v.token(2, 0)]);
        assert_eq!(scene_from_text(&text, &v).unwrap(), scene);

        let scene2 = Scene { shape_id: 3, color_id: 1, position_id: 2 };
        assert_eq!(scene_from_text(&render_text(&scene2, &v), &v).unwrap(), scene2);
    }

    #[test]
    fn render_text_is_injective_over_a_small_world() {
        let v = Vocab::new(12).unwrap();
        let mut seen = std::collections::HashSet::new();
        for c in 0..4 {
            for s in 0..4 {
                for p in 0..4 {
                    let text = render_text(
                        &Scene { shape_id: s, color_id: c, position_id: p },
                        &v,
                    );
                    assert!(seen.insert(text), "duplicate text for ({},{},{})", c, s, p);
                }
            }
        }
    }

    #[test]
    fn render_image_is_deterministic_and_distinct_across_fields() {
        let base = Scene { shape_id: 1, color_id: 2, position_id: 3 };
        let img1 = render_image(&base, 16, 16).unwrap();
        let img2 = render_image(&base, 16, 16).unwrap();
        assert!(img1.bit_eq(&img2));

        for other in [
            Scene { position_id: 4, ..base },
            Scene { shape_id: 0, ..base },
            Scene { color_id: 0, ..base },
        ] {
            let img3 = render_image(&other, 16, 16).unwrap();
            assert!(!img1.bit_eq(&img3), "scene {:?} rendered identically", other);
        }
    }

    #[test]
    fn render_image_matches_frozen_fixture() {
        // Frozen output of render_image for scene (0,0,0) at 16x16: every
        // band encodes slot_pattern(0) = 73 = 0b01001001, so bit slots 0,
        // 3, and 6 (columns 0-1, 6-7, 12-13) are lit in all three bands.
        // '#' = IMG_ON, '.' = IMG_OFF.
        let fixture = [
            "##....##....##..",
            "##....##....##..",
            "##....##....##..",
            "##....##....##..",
            "##....##....##..",
            "##....##....##..",
            "##....##....##..",
            "##....##....##..",
            "##....##....##..",
            "##....##....##..",
            "##....##....##..",
            "##....##....##..",
            "##....##....##..",
            "##....##....##..",
            "##....##....##..",
            "##....##....##..",
        ];
        let img = render_image(&Scene { shape_id: 0, color_id: 0, position_id: 0 }, 16, 16).unwrap();
        for (r, row) in fixture.iter().enumerate() {
            for (c, ch) in row.chars().enumerate() {
                let expected = if ch == '#' { IMG_ON } else { IMG_OFF };
                assert_eq!(
                    img.data()[r * 16 + c],
                    expected,
                    "cell ({},{}) diverged from fixture",
                    r,
                    c
                );
            }
        }
    }

    #[test]
    fn render_image_rejects_tiny_grids() {
        let scene = Scene { shape_id: 0, color_id: 0, position_id: 0 };
        assert!(render_image(&scene, 7, 16).is_err());
        assert!(render_image(&scene, 16, 7).is_err());
        assert!(render_image(&scene, 8, 8).is_ok());
    }

    #[test]
    fn render_image_values_stay_in_unit_range() {
        let img = render_image(&Scene { shape_id: 5, color_id: 6, position_id: 4 }, 17, 19).unwrap();
        assert!(img.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn synth_audio_shape_is_tokens_times_frames() {
        let grid = synth_audio(&[1, 2, 3], 5, 16).unwrap();
        assert_eq!(grid.dims(), &[15, 16]);
    }

    #[test]
    fn synth_audio_every_row_peaks_at_the_token_band() {
        let grid = synth_audio(&[9], 4, 12).unwrap();
        for r in 0..4 {
            let row = &grid.data()[r * 12..(r + 1) * 12];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, 9);
        }
    }

    #[test]
    fn synth_audio_margin_exceeds_declared_bound() {
        let grid = synth_audio(&[5], 10, 16).unwrap();
        let mut max_off = 0.0f32;
        for r in 0..10 {
            for c in 0..16 {
                if c != 5 {
                    max_off = max_off.max(grid.data()[r * 16 + c]);
                }
            }
        }
        assert!(AUDIO_PEAK - max_off >= 0.8, "margin {} too small", AUDIO_PEAK - max_off);
    }

    #[test]
    fn synth_audio_rejects_bad_inputs() {
        assert!(synth_audio(&[], 5, 16).is_err());
        assert!(synth_audio(&[1], 0, 16).is_err());
        assert!(synth_audio(&[16], 5, 16).is_err());
    }

    #[test]
    fn decode_inverts_synth_on_simple_sequence() {
        let grid = synth_audio(&[3, 7, 1], 5, 16).unwrap();
        assert_eq!(oracle_decode_audio(&grid, 5).unwrap(), vec![3, 7, 1]);
    }

    #[test]
    fn decode_round_trip_exhaustive_single_tokens_and_random_sequences() {
        let bands = 16;
        for t in 0..bands as u32 {
            let grid = synth_audio(&[t], 10, bands).unwrap();
            assert_eq!(oracle_decode_audio(&grid, 10).unwrap(), vec![t]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let len = rng.gen_range(1..=6);
            let tokens: Vec<u32> = (0..len).map(|_| rng.gen_range(0..bands as u32)).collect();
            let grid = synth_audio(&tokens, 7, bands).unwrap();
            assert_eq!(oracle_decode_audio(&grid, 7).unwrap(), tokens);
        }
    }

    #[test]
    fn decode_all_zero_block_ties_to_band_zero() {
        let audio = Tensor::zeros(&[5, 12]);
        assert_eq!(oracle_decode_audio(&audio, 5).unwrap(), vec![0]);
    }

    #[test]
    fn decode_survives_uniform_noise_below_the_margin() {
        let mut grid = synth_audio(&[5], 10, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for v in grid.data_mut() {
            *v += 0.1 * rng.gen::<f32>();
        }
        assert_eq!(oracle_decode_audio(&grid, 10).unwrap(), vec![5]);
    }

    #[test]
    fn decode_rejects_indivisible_rows() {
        let audio = Tensor::zeros(&[7, 12]);
        assert!(oracle_decode_audio(&audio, 5).is_err());
    }

    #[test]
    fn full_overlap_gives_identical_corpus_vocabularies() {
        let spec = DatasetSpec { overlap_fraction: 1.0, ..DatasetSpec::default() };
        let w = generate_datasets(&spec).unwrap();
        assert_eq!(w.a_tokens, w.b_tokens);
        assert_eq!(w.a_tokens.len(), spec.vocab_size);
    }

    #[test]
    fn quarter_overlap_on_vocab_100_shares_exactly_26_tokens() {
        let spec = DatasetSpec {
            vocab_size: 100,
            bands: 100,
            overlap_fraction: 0.26,
            ..DatasetSpec::default()
        };
        let w = generate_datasets(&spec).unwrap();
        let shared: Vec<u32> = w.a_tokens.intersection(&w.b_tokens).copied().collect();
        assert_eq!(shared.len(), 26);
    }

    #[test]
    fn half_overlap_on_vocab_20_shares_exactly_10_tokens() {
        let spec = DatasetSpec {
            vocab_size: 20,
            bands: 20,
            overlap_fraction: 0.5,
            ..DatasetSpec::default()
        };
        let w = generate_datasets(&spec).unwrap();
        assert_eq!(w.a_tokens.intersection(&w.b_tokens).count(), 10);
        // Both corpora still cover the whole vocabulary together.
        let union: BTreeSet<u32> = w.a_tokens.union(&w.b_tokens).copied().collect();
        assert_eq!(union.len(), 20);
    }

    #[test]
    fn tiny_positive_overlap_with_no_possible_shared_token_is_rejected() {
        let spec = DatasetSpec { overlap_fraction: 0.01, ..DatasetSpec::default() };
        match generate_datasets(&spec) {
            Err(Error::InvalidArgument(msg)) => assert!(msg.contains("shared token")),
            other => panic!("expected invalid-argument, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn out_of_range_overlap_is_rejected() {
        let spec = DatasetSpec { overlap_fraction: 1.5, ..DatasetSpec::default() };
        assert!(generate_datasets(&spec).is_err());
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let spec = DatasetSpec::default();
        let w1 = generate_datasets(&spec).unwrap();
        let w2 = generate_datasets(&spec).unwrap();
        assert_eq!(w1.a.len(), w2.a.len());
        for (s1, s2) in w1.a.iter().zip(&w2.a) {
            assert_eq!(s1.scene, s2.scene);
            assert_eq!(s1.text, s2.text);
            assert!(s1.image.as_ref().unwrap().bit_eq(s2.image.as_ref().unwrap()));
        }
        for (s1, s2) in w1.b.iter().zip(&w2.b) {
            assert_eq!(s1.text, s2.text);
            assert!(s1.audio.as_ref().unwrap().bit_eq(s2.audio.as_ref().unwrap()));
        }

        let w3 = generate_datasets(&DatasetSpec { seed: 8, ..spec }).unwrap();
        let same = w1.a.iter().zip(&w3.a).all(|(x, y)| x.scene == y.scene);
        assert!(!same, "different seeds produced identical scene streams");
    }

    #[test]
    fn corpora_carry_only_their_modalities_and_unit_range_arrays() {
        let w = generate_datasets(&DatasetSpec::default()).unwrap();
        for s in &w.a {
            assert!(s.image.is_some() && s.audio.is_none());
            assert!(s.image.as_ref().unwrap().data().iter().all(|&x| (0.0..=1.0).contains(&x)));
            assert_eq!(s.text.len(), TEXT_LEN);
        }
        for s in &w.b {
            assert!(s.audio.is_some() && s.image.is_none());
            let audio = s.audio.as_ref().unwrap();
            assert_eq!(audio.dims(), &[w.spec.audio_rows(), w.spec.bands]);
            assert!(audio.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn b_samples_decode_back_to_their_text() {
        let w = generate_datasets(&DatasetSpec::default()).unwrap();
        for s in &w.b {
            let decoded =
                oracle_decode_audio(s.audio.as_ref().unwrap(), w.spec.frames_per_token).unwrap();
            assert_eq!(decoded, s.text);
        }
    }
}
