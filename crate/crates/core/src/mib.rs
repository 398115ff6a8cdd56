//! The multimodal information bottleneck: modality transformer, shared
//! external memory with multi-head attention, modality classifier, and the
//! adversarial objective that pushes every code toward the text region of
//! the shared space.
//!
//! Data flow per sample: encoder output `e` (width `d_e`) → [`transform`] →
//! shared code `z` (width `d_z`) → attention over the memory ([`build_keys`]
//! + [`memory_attend`]) → unified representation `u` (width `d_k`) → a
//! decoder. The classifier sees `z` through a gradient-reversal node, so a
//! single backward pass trains the classifier to separate modalities while
//! pushing the transformer (and encoders) the opposite way.

use crate::codecs::affine;
use crate::ensure_arg;
use crate::error::Result;
use crate::model::ModelConfig;
use crate::params::Session;
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

pub const MOD_IMG: usize = 0;
pub const MOD_TXT: usize = 1;
pub const MOD_SPCH: usize = 2;

/// Which parts of the model the forward pass bypasses. All parameters exist
/// in every variant; a bypassed group simply never binds to the tape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Bypass the memory: `u` is `z` zero-padded or truncated to width `d_k`.
    pub no_m: bool,
    /// Replace the memory path with two affine+ReLU layers of matched
    /// parameter count.
    pub m_to_fc: bool,
    /// Replace the transformer with a single affine+tanh projection and turn
    /// the adversarial objective off with it.
    pub no_t: bool,
    /// Keep the full forward path but drop the adversarial objective.
    pub no_ladv: bool,
}

impl AblationFlags {
    pub fn validate(&self) -> Result<()> {
        ensure_arg!(
            !(self.no_m && self.m_to_fc),
            "no_m and m_to_fc both replace the memory path; pick one"
        );
        Ok(())
    }

    /// The adversarial terms exist only when the transformer does and the
    /// loss is enabled.
    pub fn adversarial_on(&self) -> bool {
        !self.no_t && !self.no_ladv
    }
}

/// Unified representation plus the attention weights that produced it,
/// laid out `(n_heads, n_k)`, kept for diagnostics.
pub struct UnifiedRepr<S: Scalar> {
    pub u: Var,
    pub weights: Tensor<S>,
}

/// Modality transformer: affine+ReLU into the shared width, a two-layer
/// residual block, tanh. One instance serves all three modalities.
pub fn transform<S: Scalar>(sess: &mut Session<S>, cfg: &ModelConfig, e: Var) -> Result<Var> {
    let w = sess.tape.value(e).len();
    ensure_arg!(w == cfg.d_e, "embedding width {} != d_e {}", w, cfg.d_e);
    let l0 = affine(sess, "t.l0", e);
    let h = sess.tape.relu(l0);
    let r1 = affine(sess, "t.r1", h);
    let r1 = sess.tape.relu(r1);
    let r2 = affine(sess, "t.r2", r1);
    let r2 = sess.tape.relu(r2);
    let res = sess.tape.add(h, r2);
    Ok(sess.tape.tanh(res))
}

/// Transformer bypass used by the `no_t` ablation: a single affine+tanh
/// projection (reusing the first transformer layer's parameters).
pub fn transform_bypass<S: Scalar>(sess: &mut Session<S>, cfg: &ModelConfig, e: Var) -> Result<Var> {
    let w = sess.tape.value(e).len();
    ensure_arg!(w == cfg.d_e, "embedding width {} != d_e {}", w, cfg.d_e);
    let l0 = affine(sess, "t.l0", e);
    Ok(sess.tape.tanh(l0))
}

/// Key and value matrices for attention: `V = tanh(M)` (n_k × d_k) and
/// `K = V · Wᵀ` (n_k × d_z), a bias-free width-1 convolution over slots.
/// Build once per step; every sample in the batch shares the result.
pub fn build_keys<S: Scalar>(sess: &mut Session<S>) -> (Var, Var) {
    let m = sess.p("mem.m");
    let v = sess.tape.tanh(m);
    let w = sess.p("mem.key.w");
    let n_k = sess.tape.value(m).dims()[0];
    let d_z = sess.tape.value(w).dims()[0];
    let mut rows = Vec::with_capacity(n_k);
    for i in 0..n_k {
        let vi = sess.tape.take_row(v, i);
        rows.push(sess.tape.matvec(w, vi));
    }
    let flat = sess.tape.concat(&rows);
    let k = sess.tape.reshape(flat, &[n_k, d_z]);
    (k, v)
}

/// Multi-head scaled dot-product attention over the memory. Heads split the
/// query and key columns into `n_heads` equal spans, score each slot by
/// `q_h·k_h / sqrt(d_k/n_heads)`, and mix the matching span of `V`; the
/// concatenated result has `V`'s width.
pub fn memory_attend<S: Scalar>(
    sess: &mut Session<S>,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
) -> Result<UnifiedRepr<S>> {
    ensure_arg!(n_heads >= 1, "n_heads must be >= 1");
    let (kd, vd) = (sess.tape.value(k).dims().to_vec(), sess.tape.value(v).dims().to_vec());
    ensure_arg!(kd.len() == 2 && vd.len() == 2, "K and V must be matrices");
    let (n_k, d_z) = (kd[0], kd[1]);
    let d_k = vd[1];
    ensure_arg!(vd[0] == n_k, "K has {} slots but V has {}", n_k, vd[0]);
    let qw = sess.tape.value(q).len();
    ensure_arg!(qw == d_z, "query width {} != key width {}", qw, d_z);
    ensure_arg!(
        d_z % n_heads == 0 && d_k % n_heads == 0,
        "widths (d_z {}, d_k {}) not divisible by {} heads",
        d_z,
        d_k,
        n_heads
    );

    let dzh = d_z / n_heads;
    let dkh = d_k / n_heads;
    let scale = S::of(1.0 / (dkh as f64).sqrt());
    let mut weights = Tensor::zeros(&[n_heads, n_k]);
    let mut parts = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = sess.tape.slice(q, h * dzh, dzh);
        let kh = sess.tape.slice_cols(k, h * dzh, dzh);
        let logits = sess.tape.matvec(kh, qh);
        let scaled = sess.tape.scale(logits, scale);
        let w = sess.tape.softmax(scaled);
        for (i, &x) in sess.tape.value(w).data().iter().enumerate() {
            weights.data_mut()[h * n_k + i] = x;
        }
        let vh = sess.tape.slice_cols(v, h * dkh, dkh);
        parts.push(sess.tape.matvec_t(vh, w));
    }
    let u = sess.tape.concat(&parts);
    Ok(UnifiedRepr { u, weights })
}

/// Memory bypass used by the `no_m` ablation: zero-pad or truncate `z` to
/// the unified width.
pub fn pad_or_trim<S: Scalar>(sess: &mut Session<S>, z: Var, width: usize) -> Var {
    let have = sess.tape.value(z).len();
    if have == width {
        z
    } else if have > width {
        sess.tape.slice(z, 0, width)
    } else {
        let pad = sess.tape.constant(Tensor::zeros(&[width - have]));
        sess.tape.concat(&[z, pad])
    }
}

/// FC replacement for the memory path (`m_to_fc` ablation): two affine+ReLU
/// layers whose hidden width is chosen to match the memory parameter count.
pub fn memory_fc<S: Scalar>(sess: &mut Session<S>, z: Var) -> Var {
    let a = affine(sess, "mfc.f1", z);
    let a = sess.tape.relu(a);
    let b = affine(sess, "mfc.f2", a);
    sess.tape.relu(b)
}

/// Shared-code → unified-representation dispatch across ablation variants.
/// `keys` must be provided (from [`build_keys`]) unless the memory path is
/// bypassed.
pub fn unified<S: Scalar>(
    sess: &mut Session<S>,
    cfg: &ModelConfig,
    flags: &AblationFlags,
    z: Var,
    keys: Option<(Var, Var)>,
) -> Result<Var> {
    if flags.no_m {
        Ok(pad_or_trim(sess, z, cfg.d_k))
    } else if flags.m_to_fc {
        Ok(memory_fc(sess, z))
    } else {
        let (k, v) = match keys {
            Some(kv) => kv,
            None => build_keys(sess),
        };
        Ok(memory_attend(sess, z, k, v, cfg.n_heads)?.u)
    }
}

/// Classifier scores over (image, text, audio), pre-softmax.
pub fn classify_logits<S: Scalar>(sess: &mut Session<S>, z: Var) -> Var {
    let f0 = affine(sess, "cls.f0", z);
    let f0 = sess.tape.relu(f0);
    affine(sess, "cls.f1", f0)
}

/// Probability triple (image, text, audio) for a shared code.
pub fn classify_modality<S: Scalar>(sess: &mut Session<S>, z: Var) -> Var {
    let logits = classify_logits(sess, z);
    sess.tape.softmax(logits)
}

/// Numerically stable `-log softmax(logits)[target]` on plain values.
fn ce_value<S: Scalar>(logits: &[S], target: usize) -> f64 {
    let vals: Vec<f64> = logits.iter().map(|x| x.as_f64()).collect();
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + vals.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    lse - vals[target]
}

/// The two adversarial terms over a batch of shared codes.
///
/// `l_c` (returned as a tape node) is the classifier's objective: for each
/// nonempty code group, the mean cross-entropy against its true modality,
/// summed over groups. Each code enters through a gradient-reversal node, so
/// one backward pass sends `+∂l_c` into the classifier and `-lambda·∂l_c`
/// into the transformer and encoders — the classifier learns to separate
/// modalities while everything upstream learns to blur them.
///
/// `l_t` (returned as a plain number) is the transformer's textward loss,
/// `-E[log C(z_img)_txt] - E[log C(z_spch)_txt]`, reported for diagnostics.
/// It is intentionally not a gradient path: the reversal of `l_c` already
/// carries the adversarial pressure, and adding `l_t`'s gradient would break
/// the contract that the transformer's received gradient equals exactly
/// `-lambda` times the classifier objective's.
pub fn adversarial_losses<S: Scalar>(
    sess: &mut Session<S>,
    lambda: f64,
    z_img_a: &[Var],
    z_spch_b: &[Var],
    z_txt_a: &[Var],
    z_txt_b: &[Var],
) -> Result<(f64, Var)> {
    ensure_arg!(
        !(z_img_a.is_empty() && z_spch_b.is_empty() && z_txt_a.is_empty() && z_txt_b.is_empty()),
        "adversarial losses need at least one shared code"
    );
    let lam = S::of(lambda);
    let mut group_means = Vec::new();
    for (codes, label) in [
        (z_img_a, MOD_IMG),
        (z_spch_b, MOD_SPCH),
        (z_txt_a, MOD_TXT),
        (z_txt_b, MOD_TXT),
    ] {
        if codes.is_empty() {
            continue;
        }
        let mut ces = Vec::with_capacity(codes.len());
        for &z in codes {
            let rev = sess.tape.grad_reverse(z, lam);
            let logits = classify_logits(sess, rev);
            ces.push(sess.tape.ce_logits(logits, label));
        }
        let sum = sess.tape.add_n(&ces);
        group_means.push(sess.tape.scale(sum, S::of(1.0 / ces.len() as f64)));
    }
    let l_c = sess.tape.add_n(&group_means);

    // Diagnostic value: evaluated through classifier nodes that are never
    // ancestors of the optimized loss, so no gradient flows from them.
    let mut l_t = 0.0;
    for codes in [z_img_a, z_spch_b] {
        if codes.is_empty() {
            continue;
        }
        let mut acc = 0.0;
        for &z in codes {
            let logits = classify_logits(sess, z);
            acc += ce_value(sess.tape.value(logits).data(), MOD_TXT);
        }
        l_t += acc / codes.len() as f64;
    }
    Ok((l_t, l_c))
}
