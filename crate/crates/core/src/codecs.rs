//! Modality-specific encoders and decoders.
//!
//! Encoders map raw instances to embeddings `e` of width `d_e`; decoders map
//! unified representations `u` of width `d_k` back to instances. All run on
//! a [`Session`] so the same code serves training (gradients) and inference
//! (values only). Shapes follow [`ModelConfig`]:
//!
//! * image encoder — four kernel-4 stride-2 convolutions with ReLU, then a
//!   global max pool over the remaining grid;
//! * text encoder — token embedding, two per-token affine+ReLU layers, a GRU
//!   over the sequence, average pool over time, affine + tanh;
//! * audio encoder — per chunk of `chunk_rows` rows: two strided
//!   convolutions + ReLU and a flattening affine; a GRU consumes the chunk
//!   features and its last state is projected with affine + tanh;
//! * image decoder — affine to a coarse grid, four transposed convolutions,
//!   output squashed to [0,1];
//! * text decoder — two stacked GRUs whose initial states come from `u`,
//!   fed the previous token's embedding (zero vector to start), affine to
//!   per-symbol scores; teacher-forced or greedy;
//! * audio decoder — two stacked GRUs initialized from `u`, emitting
//!   `r * chunk_rows` rows per step, teacher-forced on the previous row
//!   group (zero group to start), squashed to [0,1].

use crate::ensure_arg;
use crate::error::Result;
use crate::model::ModelConfig;
use crate::params::Session;
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

/// `W·x + b` with parameters `{name}.w`, `{name}.b`.
pub(crate) fn affine<S: Scalar>(sess: &mut Session<S>, name: &str, x: Var) -> Var {
    let w = sess.p(&format!("{name}.w"));
    let b = sess.p(&format!("{name}.b"));
    let wx = sess.tape.matvec(w, x);
    sess.tape.add(wx, b)
}

/// Standard GRU cell over stacked gate tensors (`[reset; update; candidate]`):
/// `r = σ(..)`, `z = σ(..)`, `n = tanh(W_in·x + b_in + r ⊙ (W_hn·h + b_hn))`,
/// `h' = (1−z)⊙n + z⊙h`.
pub(crate) fn gru_cell<S: Scalar>(sess: &mut Session<S>, prefix: &str, x: Var, h: Var) -> Var {
    let wx = sess.p(&format!("{prefix}.wx"));
    let wh = sess.p(&format!("{prefix}.wh"));
    let bx = sess.p(&format!("{prefix}.bx"));
    let bh = sess.p(&format!("{prefix}.bh"));
    let hidden = sess.tape.value(h).len();

    let gx = {
        let t = sess.tape.matvec(wx, x);
        sess.tape.add(t, bx)
    };
    let gh = {
        let t = sess.tape.matvec(wh, h);
        sess.tape.add(t, bh)
    };

    let rx = sess.tape.slice(gx, 0, hidden);
    let rh = sess.tape.slice(gh, 0, hidden);
    let r = {
        let s = sess.tape.add(rx, rh);
        sess.tape.sigmoid(s)
    };
    let zx = sess.tape.slice(gx, hidden, hidden);
    let zh = sess.tape.slice(gh, hidden, hidden);
    let z = {
        let s = sess.tape.add(zx, zh);
        sess.tape.sigmoid(s)
    };
    let nx = sess.tape.slice(gx, 2 * hidden, hidden);
    let nh = sess.tape.slice(gh, 2 * hidden, hidden);
    let n = {
        let rnh = sess.tape.mul(r, nh);
        let s = sess.tape.add(nx, rnh);
        sess.tape.tanh(s)
    };

    let zn = sess.tape.mul(z, n);
    let zh2 = sess.tape.mul(z, h);
    let keep = sess.tape.sub(n, zn);
    sess.tape.add(keep, zh2)
}

/// `(tanh(x) + 1) / 2`, mapping anything into [0,1].
fn squash<S: Scalar>(sess: &mut Session<S>, x: Var) -> Var {
    let t = sess.tape.tanh(x);
    sess.tape.affine_scalar(t, S::of(0.5), S::of(0.5))
}

fn check_u_width<S: Scalar>(sess: &Session<S>, cfg: &ModelConfig, u: Var) -> Result<()> {
    let w = sess.tape.value(u).len();
    ensure_arg!(w == cfg.d_k, "unified representation width {} != d_k {}", w, cfg.d_k);
    Ok(())
}

pub fn encode_image<S: Scalar>(sess: &mut Session<S>, cfg: &ModelConfig, x: &Tensor<S>) -> Result<Var> {
    ensure_arg!(
        x.dims() == [cfg.image_h, cfg.image_w],
        "image shape {:?} does not match configured {}x{}",
        x.dims(),
        cfg.image_h,
        cfg.image_w
    );
    let mut cur = sess
        .tape
        .constant(x.clone().reshaped(&[1, cfg.image_h, cfg.image_w]));
    for i in 0..4 {
        let k = sess.p(&format!("enc_img.c{i}.k"));
        let b = sess.p(&format!("enc_img.c{i}.b"));
        cur = sess.tape.conv2d(cur, k, b, 2, 1);
        cur = sess.tape.relu(cur);
    }
    Ok(sess.tape.global_max_pool(cur))
}

pub fn encode_text<S: Scalar>(sess: &mut Session<S>, cfg: &ModelConfig, tokens: &[u32]) -> Result<Var> {
    ensure_arg!(!tokens.is_empty(), "cannot encode an empty token sequence");
    for &t in tokens {
        ensure_arg!(
            (t as usize) < cfg.vocab_size,
            "token {} outside vocabulary of size {}",
            t,
            cfg.vocab_size
        );
    }
    let emb = sess.p("enc_txt.emb");
    let mut h = sess.tape.constant(Tensor::zeros(&[cfg.d_e]));
    let mut states = Vec::with_capacity(tokens.len());
    for &t in tokens {
        let e = sess.tape.take_row(emb, t as usize);
        let f0 = affine(sess, "enc_txt.f0", e);
        let f0 = sess.tape.relu(f0);
        let f1 = affine(sess, "enc_txt.f1", f0);
        let f1 = sess.tape.relu(f1);
        h = gru_cell(sess, "enc_txt.gru", f1, h);
        states.push(h);
    }
    let sum = sess.tape.add_n(&states);
    let avg = sess.tape.scale(sum, S::of(1.0 / states.len() as f64));
    let o = affine(sess, "enc_txt.out", avg);
    Ok(sess.tape.tanh(o))
}

pub fn encode_audio<S: Scalar>(sess: &mut Session<S>, cfg: &ModelConfig, mel: &Tensor<S>) -> Result<Var> {
    ensure_arg!(
        mel.rank() == 2 && mel.dims()[1] == cfg.bands,
        "audio shape {:?} does not match {} bands",
        mel.dims(),
        cfg.bands
    );
    let rows = mel.dims()[0];
    ensure_arg!(
        rows >= cfg.chunk_rows && rows % cfg.chunk_rows == 0,
        "audio rows {} not divisible by chunk_rows {}",
        rows,
        cfg.chunk_rows
    );
    let per = cfg.chunk_rows * cfg.bands;
    let mut h = sess.tape.constant(Tensor::zeros(&[cfg.d_e]));
    for c in 0..rows / cfg.chunk_rows {
        let chunk = Tensor::from_vec(
            &[1, cfg.chunk_rows, cfg.bands],
            mel.data()[c * per..(c + 1) * per].to_vec(),
        );
        let mut cur = sess.tape.constant(chunk);
        for i in 0..2 {
            let k = sess.p(&format!("enc_spch.c{i}.k"));
            let b = sess.p(&format!("enc_spch.c{i}.b"));
            cur = sess.tape.conv2d(cur, k, b, 2, 1);
            cur = sess.tape.relu(cur);
        }
        let flat = sess.tape.reshape(cur, &[cfg.spch_flat()]);
        let feat = affine(sess, "enc_spch.fc", flat);
        h = gru_cell(sess, "enc_spch.gru", feat, h);
    }
    let o = affine(sess, "enc_spch.out", h);
    Ok(sess.tape.tanh(o))
}

pub fn decode_image<S: Scalar>(sess: &mut Session<S>, cfg: &ModelConfig, u: Var) -> Result<Var> {
    check_u_width(sess, cfg, u)?;
    let [_, _, _, c4] = cfg.img_channels();
    let (h16, w16) = (cfg.image_h / 16, cfg.image_w / 16);
    let fc = affine(sess, "dec_img.fc", u);
    let mut cur = sess.tape.reshape(fc, &[c4, h16, w16]);
    for i in 0..4 {
        let k = sess.p(&format!("dec_img.d{i}.k"));
        let b = sess.p(&format!("dec_img.d{i}.b"));
        cur = sess.tape.conv2d_transpose(cur, k, b, 2, 1);
        if i < 3 {
            cur = sess.tape.relu(cur);
        }
    }
    let sq = squash(sess, cur);
    Ok(sess.tape.reshape(sq, &[cfg.image_h, cfg.image_w]))
}

fn text_decoder_init<S: Scalar>(sess: &mut Session<S>, which: &str, u: Var) -> (Var, Var) {
    let i0 = affine(sess, &format!("{which}.init0"), u);
    let h0 = sess.tape.tanh(i0);
    let i1 = affine(sess, &format!("{which}.init1"), u);
    let h1 = sess.tape.tanh(i1);
    (h0, h1)
}

/// Teacher-forced text decoding: one per-symbol score vector per target
/// position (position `i` is predicted from the embedded target `i-1`, with
/// a zero vector standing in before the first token).
pub fn decode_text_tf<S: Scalar>(
    sess: &mut Session<S>,
    cfg: &ModelConfig,
    u: Var,
    targets: &[u32],
) -> Result<Vec<Var>> {
    check_u_width(sess, cfg, u)?;
    ensure_arg!(!targets.is_empty(), "teacher forcing needs at least one target");
    for &t in targets {
        ensure_arg!(
            (t as usize) < cfg.n_symbols(),
            "target symbol {} outside table of size {}",
            t,
            cfg.n_symbols()
        );
    }
    let (mut h0, mut h1) = text_decoder_init(sess, "dec_txt", u);
    let emb = sess.p("dec_txt.emb");
    let mut logits = Vec::with_capacity(targets.len());
    for i in 0..targets.len() {
        let x = if i == 0 {
            sess.tape.constant(Tensor::zeros(&[cfg.d_emb]))
        } else {
            sess.tape.take_row(emb, targets[i - 1] as usize)
        };
        h0 = gru_cell(sess, "dec_txt.gru0", x, h0);
        h1 = gru_cell(sess, "dec_txt.gru1", h0, h1);
        logits.push(affine(sess, "dec_txt.out", h1));
    }
    Ok(logits)
}

/// Greedy text decoding: repeatedly pick the highest-scoring symbol (lowest
/// index wins ties), feed it back, stop at the end token or `max_len`.
/// Returns the emitted tokens, end token excluded.
pub fn decode_text_greedy<S: Scalar>(
    sess: &mut Session<S>,
    cfg: &ModelConfig,
    u: Var,
    max_len: usize,
) -> Result<Vec<u32>> {
    check_u_width(sess, cfg, u)?;
    ensure_arg!(max_len >= 1, "max_len must be >= 1");
    let (mut h0, mut h1) = text_decoder_init(sess, "dec_txt", u);
    let emb = sess.p("dec_txt.emb");
    let mut out = Vec::new();
    let mut prev: Option<u32> = None;
    for _ in 0..max_len {
        let x = match prev {
            None => sess.tape.constant(Tensor::zeros(&[cfg.d_emb])),
            Some(t) => sess.tape.take_row(emb, t as usize),
        };
        h0 = gru_cell(sess, "dec_txt.gru0", x, h0);
        h1 = gru_cell(sess, "dec_txt.gru1", h0, h1);
        let lv = affine(sess, "dec_txt.out", h1);
        let scores = sess.tape.value(lv).data();
        let mut best = 0usize;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        let tok = best as u32;
        if tok == cfg.eos() {
            break;
        }
        out.push(tok);
        prev = Some(tok);
    }
    Ok(out)
}

/// Teacher-forced audio decoding against a `(rows, bands)` target grid.
/// Returns one squashed row-group prediction (width `r * chunk_rows * bands`)
/// per step; step `i` predicts target rows `[i*g, (i+1)*g)` for group height
/// `g`, fed rows `[(i-1)*g, i*g)` (zeros before the first group).
pub fn decode_audio_tf<S: Scalar>(
    sess: &mut Session<S>,
    cfg: &ModelConfig,
    u: Var,
    target: &Tensor<S>,
) -> Result<Vec<Var>> {
    check_u_width(sess, cfg, u)?;
    ensure_arg!(
        target.rank() == 2 && target.dims()[1] == cfg.bands,
        "audio target shape {:?} does not match {} bands",
        target.dims(),
        cfg.bands
    );
    let rows = target.dims()[0];
    let group = cfg.rows_per_step();
    ensure_arg!(
        rows >= group && rows % group == 0,
        "audio target rows {} not divisible by rows-per-step {}",
        rows,
        group
    );
    let n_steps = rows / group;
    let width = cfg.audio_group();
    let (mut h0, mut h1) = text_decoder_init(sess, "dec_spch", u);
    let mut outs = Vec::with_capacity(n_steps);
    for i in 0..n_steps {
        let x = if i == 0 {
            sess.tape.constant(Tensor::zeros(&[width]))
        } else {
            let lo = (i - 1) * width;
            sess.tape
                .constant(Tensor::from_vec(&[width], target.data()[lo..lo + width].to_vec()))
        };
        h0 = gru_cell(sess, "dec_spch.gru0", x, h0);
        h1 = gru_cell(sess, "dec_spch.gru1", h0, h1);
        let o = affine(sess, "dec_spch.out", h1);
        outs.push(squash(sess, o));
    }
    Ok(outs)
}

/// Free-running audio generation: each step is fed the previous step's own
/// output. Returns the assembled `(n_steps * r * chunk_rows, bands)` grid.
pub fn decode_audio_free<S: Scalar>(
    sess: &mut Session<S>,
    cfg: &ModelConfig,
    u: Var,
    n_steps: usize,
) -> Result<Tensor<S>> {
    check_u_width(sess, cfg, u)?;
    ensure_arg!(n_steps >= 1, "n_steps must be >= 1");
    let width = cfg.audio_group();
    let (mut h0, mut h1) = text_decoder_init(sess, "dec_spch", u);
    let mut rows = Vec::with_capacity(n_steps * width);
    let mut prev: Option<Var> = None;
    for _ in 0..n_steps {
        let x = match prev {
            None => sess.tape.constant(Tensor::zeros(&[width])),
            Some(v) => v,
        };
        h0 = gru_cell(sess, "dec_spch.gru0", x, h0);
        h1 = gru_cell(sess, "dec_spch.gru1", h0, h1);
        let o = affine(sess, "dec_spch.out", h1);
        let sq = squash(sess, o);
        rows.extend_from_slice(sess.tape.value(sq).data());
        prev = Some(sq);
    }
    Ok(Tensor::from_vec(&[n_steps * cfg.rows_per_step(), cfg.bands], rows))
}
