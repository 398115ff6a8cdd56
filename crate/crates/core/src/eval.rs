//! Skip-modal generation and its evaluation: decode audio straight from an
//! image through the shared code, score the result against the scene's
//! ground-truth tokens, embed any modality for cross-modal retrieval, and
//! drive the ablation and memory-sensitivity harnesses.
//!
//! All scoring goes through the synthetic world's exact decoder, so the
//! error rates here are analogs of recognition-based scores, not comparable
//! numbers. Reports carry no timestamps: the same model and data give the
//! same bytes.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::codecs::{decode_audio_free, encode_audio, encode_image, encode_text};
use crate::datagen::{oracle_decode_audio, render_text, Scene, TriModalSample, Vocab, World, TEXT_LEN};
use crate::ensure_arg;
use crate::error::{Error, Result};
use crate::mib::{transform, transform_bypass, unified, AblationFlags};
use crate::model::ModelConfig;
use crate::params::{ParamStore, Session};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;
use crate::training::{train_loop, TrainConfig};

/// One image-to-audio generation, scored against the scene's tokens.
#[derive(Clone, Debug, Serialize)]
pub struct SkipResult {
    pub input_index: usize,
    /// The generated band-energy grid (rows × bands).
    #[serde(skip)]
    pub audio: Tensor<f32>,
    /// What the exact decoder heard in the generated audio.
    pub decoded: Vec<u32>,
    /// The scene's ground-truth tokens.
    pub reference: Vec<u32>,
    pub token_error_rate: f64,
}

/// Which encoder to run when embedding a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Image,
    Text,
    Audio,
}

/// Refuse to run generation paths on a store that clearly never saw
/// `init_params` (or a checkpoint load): better a clean invalid-state error
/// than a panic on the first missing parameter.
fn require_params<S: Scalar>(store: &ParamStore<S>, names: &[&str]) -> Result<()> {
    for name in names {
        if !store.contains(name) {
            return Err(Error::InvalidState(format!(
                "model parameter {name} is missing; initialize or load a checkpoint first"
            )));
        }
    }
    Ok(())
}

fn encoder_sentinel(flags: &AblationFlags) -> &'static str {
    if flags.no_m {
        "t.l0.w" // memory unused; the transform (or its bypass) must exist
    } else if flags.m_to_fc {
        "mfc.f1.w"
    } else {
        "mem.m"
    }
}

/// Shared code for one sample in one modality, as the memory's query.
fn code_for<S: Scalar>(
    sess: &mut Session<S>,
    cfg: &ModelConfig,
    flags: &AblationFlags,
    sample: &TriModalSample,
    modality: Modality,
) -> Result<Var> {
    let e = match modality {
        Modality::Image => {
            let img = sample
                .image
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("sample carries no image".into()))?;
            encode_image(sess, cfg, &img.cast::<S>())?
        }
        Modality::Text => encode_text(sess, cfg, &sample.text)?,
        Modality::Audio => {
            let audio = sample
                .audio
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("sample carries no audio".into()))?;
            encode_audio(sess, cfg, &audio.cast::<S>())?
        }
    };
    if flags.no_t {
        transform_bypass(sess, cfg, e)
    } else {
        transform(sess, cfg, e)
    }
}

/// Generate audio directly from a sample's image and score it against the
/// scene. Never touches the sample's audio (A-side samples carry none).
pub fn skip_generate<S: Scalar>(
    store: &ParamStore<S>,
    cfg: &ModelConfig,
    flags: &AblationFlags,
    sample: &TriModalSample,
    vocab: &Vocab,
    frames_per_token: usize,
    input_index: usize,
) -> Result<SkipResult> {
    require_params(store, &["enc_img.c0.k", "t.l0.w", "dec_spch.gru0.wx", encoder_sentinel(flags)])?;
    let rows = frames_per_token * TEXT_LEN;
    ensure_arg!(
        rows % cfg.rows_per_step() == 0,
        "audio rows {} not divisible by decoder group {}",
        rows,
        cfg.rows_per_step()
    );

    let mut sess = Session::new(store);
    let z = code_for(&mut sess, cfg, flags, sample, Modality::Image)?;
    let u = unified(&mut sess, cfg, flags, z, None)?;
    let audio = decode_audio_free(&mut sess, cfg, u, rows / cfg.rows_per_step())?.cast::<f32>();

    let decoded = oracle_decode_audio(&audio, frames_per_token)?;
    let reference = render_text(&sample.scene, vocab);
    let ter = token_error_rate(&decoded, &reference)?;
    Ok(SkipResult {
        input_index,
        audio,
        decoded,
        reference,
        token_error_rate: ter,
    })
}

/// Levenshtein edit distance (unit costs) divided by the reference length.
pub fn token_error_rate(hyp: &[u32], reference: &[u32]) -> Result<f64> {
    ensure_arg!(!reference.is_empty(), "token error rate needs a nonempty reference");
    let (n, m) = (hyp.len(), reference.len());
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let sub = prev[j - 1] + usize::from(hyp[i - 1] != reference[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m] as f64 / m as f64)
}

/// Clipped unigram matches over the hypothesis length; an empty hypothesis
/// scores 0 by definition.
pub fn unigram_precision(hyp: &[u32], reference: &[u32]) -> f64 {
    if hyp.is_empty() {
        return 0.0;
    }
    let mut ref_counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &t in reference {
        *ref_counts.entry(t).or_insert(0) += 1;
    }
    let mut matched = 0usize;
    for &t in hyp {
        if let Some(c) = ref_counts.get_mut(&t) {
            if *c > 0 {
                *c -= 1;
                matched += 1;
            }
        }
    }
    matched as f64 / hyp.len() as f64
}

/// Fraction of reference positions the hypothesis got right in place.
pub fn token_accuracy(hyp: &[u32], reference: &[u32]) -> Result<f64> {
    ensure_arg!(!reference.is_empty(), "token accuracy needs a nonempty reference");
    let hits = hyp
        .iter()
        .zip(reference)
        .filter(|(h, r)| h == r)
        .count();
    Ok(hits as f64 / reference.len() as f64)
}

/// Number of distinct tokens across all decoded outputs.
pub fn vocab_expressivity(results: &[SkipResult]) -> Result<usize> {
    ensure_arg!(!results.is_empty(), "expressivity needs at least one result");
    let set: BTreeSet<u32> = results.iter().flat_map(|r| r.decoded.iter().copied()).collect();
    Ok(set.len())
}

/// How much of the vocabulary exclusive to the image-text corpus showed up
/// in generated audio: (seen, total exclusive tokens).
pub fn exclusive_coverage(
    results: &[SkipResult],
    a_tokens: &BTreeSet<u32>,
    b_tokens: &BTreeSet<u32>,
) -> (usize, usize) {
    let exclusive: BTreeSet<u32> = a_tokens.difference(b_tokens).copied().collect();
    let decoded: BTreeSet<u32> = results.iter().flat_map(|r| r.decoded.iter().copied()).collect();
    let seen = exclusive.intersection(&decoded).count();
    (seen, exclusive.len())
}

/// Cosine similarity; either vector with zero norm gives 0 by definition.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine needs equal widths");
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// The unified representation for one sample in one modality, as plain
/// numbers (evaluation is read-only).
pub fn embed<S: Scalar>(
    store: &ParamStore<S>,
    cfg: &ModelConfig,
    flags: &AblationFlags,
    sample: &TriModalSample,
    modality: Modality,
) -> Result<Vec<f64>> {
    let sentinel = match modality {
        Modality::Image => "enc_img.c0.k",
        Modality::Text => "enc_txt.emb",
        Modality::Audio => "enc_spch.c0.k",
    };
    require_params(store, &[sentinel, "t.l0.w", encoder_sentinel(flags)])?;
    let mut sess = Session::new(store);
    let z = code_for(&mut sess, cfg, flags, sample, modality)?;
    let u = unified(&mut sess, cfg, flags, z, None)?;
    Ok(sess.tape.value(u).data().iter().map(|x| x.as_f64()).collect())
}

/// A full gallery ranking for one query: `ranked` is a permutation of the
/// gallery indices by nonincreasing similarity (ties keep gallery order),
/// with `sims` and `matched` aligned to it.
#[derive(Clone, Debug, Serialize)]
pub struct RetrievalResult {
    pub ranked: Vec<usize>,
    pub sims: Vec<f64>,
    pub matched: Vec<bool>,
}

/// Rank a gallery of embeddings against a query embedding.
pub fn rank_gallery(
    query_u: &[f64],
    query_scene: &Scene,
    gallery: &[(Vec<f64>, Scene)],
) -> Result<RetrievalResult> {
    ensure_arg!(!gallery.is_empty(), "retrieval needs a nonempty gallery");
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    let sims: Vec<f64> = gallery.iter().map(|(u, _)| cosine(query_u, u)).collect();
    order.sort_by(|&i, &j| sims[j].partial_cmp(&sims[i]).expect("finite sims").then(i.cmp(&j)));
    Ok(RetrievalResult {
        sims: order.iter().map(|&i| sims[i]).collect(),
        matched: order.iter().map(|&i| gallery[i].1 == *query_scene).collect(),
        ranked: order,
    })
}

/// Matches found in the top k over all matches in the gallery; 0 when the
/// gallery holds no match at all.
pub fn recall_at_k(result: &RetrievalResult, k: usize) -> f64 {
    let total = result.matched.iter().filter(|&&m| m).count();
    if total == 0 {
        return 0.0;
    }
    let hit = result.matched.iter().take(k).filter(|&&m| m).count();
    hit as f64 / total as f64
}

/// Mean recall@k, querying each sample in one modality against the whole
/// set embedded in another.
pub fn cross_modal_recall<S: Scalar>(
    store: &ParamStore<S>,
    cfg: &ModelConfig,
    flags: &AblationFlags,
    samples: &[TriModalSample],
    query_modality: Modality,
    gallery_modality: Modality,
    k: usize,
) -> Result<f64> {
    ensure_arg!(!samples.is_empty(), "retrieval needs samples");
    ensure_arg!(k >= 1, "k must be at least 1");
    let gallery: Vec<(Vec<f64>, Scene)> = samples
        .iter()
        .map(|s| Ok((embed(store, cfg, flags, s, gallery_modality)?, s.scene)))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    for s in samples {
        let q = embed(store, cfg, flags, s, query_modality)?;
        total += recall_at_k(&rank_gallery(&q, &s.scene, &gallery)?, k);
    }
    Ok(total / samples.len() as f64)
}

/// Per-sample scores and corpus-level aggregates for one evaluation split.
#[derive(Clone, Debug, Serialize)]
pub struct EvalSummary {
    pub n: usize,
    pub median_accuracy: f64,
    pub mean_token_error_rate: f64,
    pub mean_precision: f64,
    pub vocab_unique: usize,
    pub exclusive_seen: usize,
    pub exclusive_total: usize,
    pub per_sample: Vec<PerSample>,
}

#[derive(Clone, Debug, Serialize)]
pub struct PerSample {
    pub index: usize,
    pub decoded: Vec<u32>,
    pub reference: Vec<u32>,
    pub token_error_rate: f64,
    pub accuracy: f64,
    pub precision: f64,
}

/// Middle element (or mean of the middle two) of an unsorted list.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Run skip-modal generation over the image-side evaluation split and score
/// everything.
pub fn evaluate_world<S: Scalar>(
    store: &ParamStore<S>,
    cfg: &ModelConfig,
    flags: &AblationFlags,
    world: &World,
) -> Result<EvalSummary> {
    ensure_arg!(!world.eval_a.is_empty(), "evaluation split is empty");
    let mut results = Vec::with_capacity(world.eval_a.len());
    for (i, s) in world.eval_a.iter().enumerate() {
        results.push(skip_generate(
            store,
            cfg,
            flags,
            s,
            &world.vocab,
            world.spec.frames_per_token,
            i,
        )?);
    }

    let mut accuracies = Vec::new();
    let mut per_sample = Vec::new();
    let mut ter_sum = 0.0;
    let mut prec_sum = 0.0;
    for r in &results {
        let accuracy = token_accuracy(&r.decoded, &r.reference)?;
        let precision = unigram_precision(&r.decoded, &r.reference);
        ter_sum += r.token_error_rate;
        prec_sum += precision;
        accuracies.push(accuracy);
        per_sample.push(PerSample {
            index: r.input_index,
            decoded: r.decoded.clone(),
            reference: r.reference.clone(),
            token_error_rate: r.token_error_rate,
            accuracy,
            precision,
        });
    }
    let (exclusive_seen, exclusive_total) =
        exclusive_coverage(&results, &world.a_tokens, &world.b_tokens);
    Ok(EvalSummary {
        n: results.len(),
        median_accuracy: median(&accuracies),
        mean_token_error_rate: ter_sum / results.len() as f64,
        mean_precision: prec_sum / results.len() as f64,
        vocab_unique: vocab_expressivity(&results)?,
        exclusive_seen,
        exclusive_total,
        per_sample,
    })
}

/// The ablation grid: the full model plus the four wiring variants.
pub const ABLATION_VARIANTS: [(&str, AblationFlags); 5] = [
    ("full", AblationFlags { no_m: false, m_to_fc: false, no_t: false, no_ladv: false }),
    ("no_M", AblationFlags { no_m: true, m_to_fc: false, no_t: false, no_ladv: false }),
    ("M_to_FC", AblationFlags { no_m: false, m_to_fc: true, no_t: false, no_ladv: false }),
    ("no_T", AblationFlags { no_m: false, m_to_fc: false, no_t: true, no_ladv: false }),
    ("no_Ladv", AblationFlags { no_m: false, m_to_fc: false, no_t: false, no_ladv: true }),
];

#[derive(Clone, Debug, Serialize)]
pub struct VariantRow {
    pub variant: String,
    pub seed: u64,
    pub median_accuracy: f64,
    pub mean_token_error_rate: f64,
    pub mean_precision: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct VariantMedian {
    pub variant: String,
    pub median_accuracy: f64,
    pub median_token_error_rate: f64,
    pub median_precision: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub rows: Vec<VariantRow>,
    pub medians: Vec<VariantMedian>,
}

/// Run `n` independent jobs on up to `threads` workers and collect results
/// in job order, so the output never depends on scheduling. The first error
/// wins and the rest of the batch is abandoned.
pub fn parallel_map<T, F>(n: usize, threads: usize, job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    if threads <= 1 || n <= 1 {
        return (0..n).map(job).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<Result<T>>>> =
        (0..n).map(|_| std::sync::Mutex::new(None)).collect();
    let failed = std::sync::atomic::AtomicBool::new(false);
    std::thread::scope(|scope| {
        for _ in 0..threads.min(n) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= n || failed.load(std::sync::atomic::Ordering::Relaxed) {
                    break;
                }
                let out = job(i);
                if out.is_err() {
                    failed.store(true, std::sync::atomic::Ordering::Relaxed);
                }
                *slots[i].lock().expect("job slot") = Some(out);
            });
        }
    });
    let mut results = Vec::with_capacity(n);
    for slot in slots {
        match slot.into_inner().expect("job slot") {
            Some(Ok(v)) => results.push(v),
            Some(Err(e)) => return Err(e),
            // A job skipped because an earlier one failed: surface the error
            // found above instead.
            None => return Err(Error::InvalidState("parallel batch abandoned".into())),
        }
    }
    Ok(results)
}

/// Train and evaluate every ablation variant on every seed, with identical
/// budgets. Rows come out variant-major in the table's order regardless of
/// `threads`.
pub fn run_ablations<S: Scalar>(
    world: &World,
    cfg: &ModelConfig,
    base: &TrainConfig,
    seeds: &[u64],
    threads: usize,
) -> Result<AblationReport> {
    ensure_arg!(!seeds.is_empty(), "ablations need at least one seed");
    let jobs: Vec<(&str, AblationFlags, u64)> = ABLATION_VARIANTS
        .iter()
        .flat_map(|&(name, flags)| seeds.iter().map(move |&s| (name, flags, s)))
        .collect();
    let rows = parallel_map(jobs.len(), threads, |i| {
        let (name, flags, seed) = jobs[i];
        let tcfg = TrainConfig { seed, flags, ..base.clone() };
        let (store, _) = train_loop::<S>(world, cfg, &tcfg, None)?;
        let summary = evaluate_world(&store, cfg, &flags, world)?;
        Ok(VariantRow {
            variant: name.to_string(),
            seed,
            median_accuracy: summary.median_accuracy,
            mean_token_error_rate: summary.mean_token_error_rate,
            mean_precision: summary.mean_precision,
        })
    })?;

    let medians = ABLATION_VARIANTS
        .iter()
        .map(|&(name, _)| {
            let of = |f: fn(&VariantRow) -> f64| {
                let vals: Vec<f64> = rows.iter().filter(|r| r.variant == name).map(f).collect();
                median(&vals)
            };
            VariantMedian {
                variant: name.to_string(),
                median_accuracy: of(|r| r.median_accuracy),
                median_token_error_rate: of(|r| r.mean_token_error_rate),
                median_precision: of(|r| r.mean_precision),
            }
        })
        .collect();
    Ok(AblationReport { rows, medians })
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepCell {
    pub n_k: usize,
    pub d_k: usize,
    pub median_accuracy: f64,
    pub mean_token_error_rate: f64,
    pub mean_precision: f64,
}

/// Train one full model per (n_k, d_k) setting with the same seed and
/// budget; cells come out n_k-major regardless of `threads`.
pub fn sweep_memory<S: Scalar>(
    world: &World,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    n_k_list: &[usize],
    d_k_list: &[usize],
    threads: usize,
) -> Result<Vec<SweepCell>> {
    ensure_arg!(
        !n_k_list.is_empty() && !d_k_list.is_empty(),
        "sweep needs nonempty axis lists"
    );
    let grid: Vec<(usize, usize)> = n_k_list
        .iter()
        .flat_map(|&n_k| d_k_list.iter().map(move |&d_k| (n_k, d_k)))
        .collect();
    parallel_map(grid.len(), threads, |i| {
        let (n_k, d_k) = grid[i];
        let cfg2 = ModelConfig { n_k, d_k, ..cfg.clone() };
        cfg2.validate()?;
        let (store, _) = train_loop::<S>(world, &cfg2, tcfg, None)?;
        let summary = evaluate_world(&store, &cfg2, &tcfg.flags, world)?;
        Ok(SweepCell {
            n_k,
            d_k,
            median_accuracy: summary.median_accuracy,
            mean_token_error_rate: summary.mean_token_error_rate,
            mean_precision: summary.mean_precision,
        })
    })
}
