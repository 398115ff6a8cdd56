//! End-to-end training: batch sampling, the cross-modal reconstruction
//! objective, the adversarial term, a lazily-stepped Adam optimizer, and the
//! epoch loop with checkpoints and a metrics log.
//!
//! Each step builds a fresh tape over the whole batch (samples are
//! independent subgraphs sharing one set of bound parameters and one key
//! matrix), runs a single backward pass, and applies Adam to exactly the
//! parameters that were bound as trainable this step. Parameters a variant
//! never touches (for example the memory under `no_m`) therefore keep both
//! their values and their optimizer state untouched, which is what the
//! ablation no-leak checks assert.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::codecs::{decode_audio_tf, decode_image, decode_text_tf, encode_audio, encode_image, encode_text};
use crate::datagen::{TriModalSample, World};
use crate::ensure_arg;
use crate::error::{Error, Result};
use crate::mib::{adversarial_losses, build_keys, transform, transform_bypass, unified, AblationFlags};
use crate::model::{init_params, ModelConfig};
use crate::params::{ParamStore, Session};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

/// RNG stream ids, offsetting the user seed so dataset generation (streams
/// 0-3) never collides with training draws.
const STREAM_INIT: u64 = 1000;
const STREAM_BATCH: u64 = 1001;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Every step takes a full batch from one dataset, switching each step
    /// (even global steps draw from A, odd from B).
    Alternate,
    /// Every step takes half the batch from each dataset.
    Mixing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha_adv: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub strategy: Strategy,
    pub seed: u64,
    #[serde(default)]
    pub flags: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha_adv: 0.1,
            lr: 0.002,
            batch_size: 8,
            epochs: 30,
            strategy: Strategy::Mixing,
            seed: 0,
            flags: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_arg!(self.alpha_adv >= 0.0, "alpha_adv must be >= 0");
        ensure_arg!(self.lr > 0.0, "learning rate must be positive");
        ensure_arg!(self.batch_size >= 2, "batch size must be >= 2");
        if self.strategy == Strategy::Mixing {
            ensure_arg!(
                self.batch_size % 2 == 0,
                "mixing splits the batch in half; batch size {} is odd",
                self.batch_size
            );
        }
        self.flags.validate()
    }
}

/// Per-step loss report. `total` is the declared weighted sum
/// `l_img_a + l_spch_b + l_txt_ab + alpha_adv * (l_t + l_c)`.
///
/// The optimizer descends `l_img_a + l_spch_b + l_txt_ab + alpha_adv * l_c`,
/// where `l_c` reaches the transformer and encoders through gradient
/// reversal. `l_t` appears in the report (and in `total`) as the adversarial
/// diagnostic but contributes no gradient of its own — the reversed `l_c` is
/// the entire adversarial pressure, which keeps the transformer's received
/// gradient at exactly `-lambda` times the classifier objective's.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_img_a: f64,
    pub l_spch_b: f64,
    pub l_txt_ab: f64,
    pub l_t: f64,
    pub l_c: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn assemble(alpha_adv: f64, l_img_a: f64, l_spch_b: f64, l_txt_ab: f64, l_t: f64, l_c: f64) -> Self {
        Self {
            l_img_a,
            l_spch_b,
            l_txt_ab,
            l_t,
            l_c,
            total: l_img_a + l_spch_b + l_txt_ab + alpha_adv * (l_t + l_c),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_img_a, self.l_spch_b, self.l_txt_ab, self.l_t, self.l_c, self.total]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// Indices drawn for one step. Which vector is populated records the batch's
/// provenance: mixing fills both halves, alternate fills exactly one.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchIndices {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
}

/// Draw one step's sample indices. Draws are independent uniform picks, so a
/// batch larger than the dataset simply samples with replacement.
pub fn sample_batch(
    rng: &mut ChaCha8Rng,
    n_a: usize,
    n_b: usize,
    strategy: Strategy,
    batch_size: usize,
    step: u64,
) -> Result<BatchIndices> {
    ensure_arg!(n_a >= 1 && n_b >= 1, "both datasets must be nonempty");
    ensure_arg!(batch_size >= 2, "batch size must be >= 2");
    let draw = |rng: &mut ChaCha8Rng, n: usize, k: usize| -> Vec<usize> {
        (0..k).map(|_| rng.gen_range(0..n)).collect()
    };
    Ok(match strategy {
        Strategy::Mixing => BatchIndices {
            a: draw(rng, n_a, batch_size / 2),
            b: draw(rng, n_b, batch_size / 2),
        },
        Strategy::Alternate => {
            if step % 2 == 0 {
                BatchIndices { a: draw(rng, n_a, batch_size), b: Vec::new() }
            } else {
                BatchIndices { a: Vec::new(), b: draw(rng, n_b, batch_size) }
            }
        }
    })
}

/// Mean of a nonempty list of scalar nodes.
fn mean_of<S: Scalar>(sess: &mut Session<S>, terms: &[Var]) -> Var {
    let sum = sess.tape.add_n(terms);
    sess.tape.scale(sum, S::of(1.0 / terms.len() as f64))
}

/// Mean per-position cross-entropy of one teacher-forced text decode against
/// the sample's tokens followed by the end token.
fn text_ce<S: Scalar>(sess: &mut Session<S>, cfg: &ModelConfig, u: Var, text: &[u32]) -> Result<Var> {
    let mut targets = text.to_vec();
    targets.push(cfg.eos());
    let logits = decode_text_tf(sess, cfg, u, &targets)?;
    let ces: Vec<Var> = logits
        .iter()
        .zip(&targets)
        .map(|(&lv, &t)| sess.tape.ce_logits(lv, t as usize))
        .collect();
    Ok(mean_of(sess, &ces))
}

/// Everything one optimization step needs from the forward pass.
pub struct ForwardLosses {
    /// The node the backward pass runs on.
    pub optimized: Var,
    pub breakdown: LossBreakdown,
}

/// Build the batch's full forward graph: per-sample reconstruction paths plus
/// the (optional) adversarial terms over the collected shared codes. Exposed
/// so diagnostics (finite-difference probes in particular) can inspect the
/// same graph the optimizer steps on.
pub fn forward_batch<S: Scalar>(
    sess: &mut Session<S>,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    batch_a: &[&TriModalSample],
    batch_b: &[&TriModalSample],
) -> Result<ForwardLosses> {
    ensure_arg!(
        !batch_a.is_empty() || !batch_b.is_empty(),
        "a training step needs at least one sample"
    );
    let flags = &tcfg.flags;
    let keys = if flags.no_m || flags.m_to_fc { None } else { Some(build_keys(sess)) };
    let to_z = |sess: &mut Session<S>, cfg: &ModelConfig, e: Var| -> Result<Var> {
        if flags.no_t {
            transform_bypass(sess, cfg, e)
        } else {
            transform(sess, cfg, e)
        }
    };

    let mut z_img_a = Vec::new();
    let mut z_spch_b = Vec::new();
    let mut z_txt_a = Vec::new();
    let mut z_txt_b = Vec::new();
    let mut img_l1 = Vec::new();
    let mut spch_l1 = Vec::new();
    let mut txt_ce_a = Vec::new();
    let mut txt_ce_b = Vec::new();

    for s in batch_a {
        let image = s.image.as_ref().expect("A-side sample carries an image").cast::<S>();
        let e_img = encode_image(sess, cfg, &image)?;
        let z_i = to_z(sess, cfg, e_img)?;
        let u_i = unified(sess, cfg, flags, z_i, keys)?;
        let e_txt = encode_text(sess, cfg, &s.text)?;
        let z_t = to_z(sess, cfg, e_txt)?;
        let u_t = unified(sess, cfg, flags, z_t, keys)?;

        let y_img = decode_image(sess, cfg, u_t)?;
        let target = sess.tape.constant(image);
        img_l1.push(sess.tape.mean_abs_diff(y_img, target));
        txt_ce_a.push(text_ce(sess, cfg, u_i, &s.text)?);

        z_img_a.push(z_i);
        z_txt_a.push(z_t);
    }

    for s in batch_b {
        let audio = s.audio.as_ref().expect("B-side sample carries audio").cast::<S>();
        let e_spch = encode_audio(sess, cfg, &audio)?;
        let z_s = to_z(sess, cfg, e_spch)?;
        let u_s = unified(sess, cfg, flags, z_s, keys)?;
        let e_txt = encode_text(sess, cfg, &s.text)?;
        let z_t = to_z(sess, cfg, e_txt)?;
        let u_t = unified(sess, cfg, flags, z_t, keys)?;

        let steps = decode_audio_tf(sess, cfg, u_t, &audio)?;
        let pred = sess.tape.concat(&steps);
        let target = sess.tape.constant(Tensor::from_vec(&[audio.len()], audio.data().to_vec()));
        spch_l1.push(sess.tape.mean_abs_diff(pred, target));
        txt_ce_b.push(text_ce(sess, cfg, u_s, &s.text)?);

        z_spch_b.push(z_s);
        z_txt_b.push(z_t);
    }

    let mut optimized_terms = Vec::new();
    let mut l_img_a = 0.0;
    let mut l_spch_b = 0.0;
    let mut l_txt_ab = 0.0;
    if !img_l1.is_empty() {
        let v = mean_of(sess, &img_l1);
        l_img_a = sess.tape.value(v).item().as_f64();
        optimized_terms.push(v);
    }
    if !spch_l1.is_empty() {
        let v = mean_of(sess, &spch_l1);
        l_spch_b = sess.tape.value(v).item().as_f64();
        optimized_terms.push(v);
    }
    for ces in [&txt_ce_a, &txt_ce_b] {
        if !ces.is_empty() {
            let v = mean_of(sess, ces);
            l_txt_ab += sess.tape.value(v).item().as_f64();
            optimized_terms.push(v);
        }
    }

    let mut l_t = 0.0;
    let mut l_c = 0.0;
    if flags.adversarial_on() && tcfg.alpha_adv > 0.0 {
        let (lt, lc) = adversarial_losses(sess, cfg.grl_lambda, &z_img_a, &z_spch_b, &z_txt_a, &z_txt_b)?;
        l_t = lt;
        l_c = sess.tape.value(lc).item().as_f64();
        optimized_terms.push(sess.tape.scale(lc, S::of(tcfg.alpha_adv)));
    }

    let optimized = sess.tape.add_n(&optimized_terms);
    let breakdown = LossBreakdown::assemble(tcfg.alpha_adv, l_img_a, l_spch_b, l_txt_ab, l_t, l_c);
    Ok(ForwardLosses { optimized, breakdown })
}

/// Reconstruction-term evaluation used by tests and diagnostics: the three
/// reconstruction means of [`LossBreakdown`] without the adversarial parts.
pub fn recon_losses<S: Scalar>(
    store: &ParamStore<S>,
    cfg: &ModelConfig,
    flags: &AblationFlags,
    batch_a: &[&TriModalSample],
    batch_b: &[&TriModalSample],
) -> Result<(f64, f64, f64)> {
    ensure_arg!(
        !batch_a.is_empty() || !batch_b.is_empty(),
        "reconstruction losses need at least one sample"
    );
    let tcfg = TrainConfig {
        alpha_adv: 0.0,
        flags: *flags,
        ..TrainConfig::default()
    };
    let mut sess = Session::new(store);
    let f = forward_batch(&mut sess, cfg, &tcfg, batch_a, batch_b)?;
    Ok((f.breakdown.l_img_a, f.breakdown.l_spch_b, f.breakdown.l_txt_ab))
}

/// Adam with per-parameter step counters. A parameter's moments and counter
/// advance only on steps where it was bound as trainable, so variants that
/// never touch a group leave its optimizer state untouched as well.
#[derive(Clone, Debug)]
pub struct AdamState<S: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: BTreeMap<String, Tensor<S>>,
    pub v: BTreeMap<String, Tensor<S>>,
    pub t: BTreeMap<String, u64>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: BTreeMap::new(),
        }
    }

    /// Apply one update from named gradients.
    pub fn apply(&mut self, store: &mut ParamStore<S>, grads: &[(String, Tensor<S>)]) {
        for (name, g) in grads {
            let p = store.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.dims()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.dims()));
            let t = self.t.entry(name.clone()).or_insert(0);
            *t += 1;
            let bc1 = 1.0 - self.beta1.powi(*t as i32);
            let bc2 = 1.0 - self.beta2.powi(*t as i32);
            let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
            let one_m_b1 = S::of(1.0 - self.beta1);
            let one_m_b2 = S::of(1.0 - self.beta2);
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + one_m_b1 * gi;
                let vi = b2 * v.data()[i] + one_m_b2 * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi.as_f64() / bc1;
                let v_hat = vi.as_f64() / bc2;
                let delta = self.lr * m_hat / (v_hat.sqrt() + self.eps);
                p.data_mut()[i] = S::of(p.data()[i].as_f64() - delta);
            }
        }
    }
}

/// One optimization step: forward, single backward, Adam on the bound
/// trainable parameters. Returns the pre-step loss report.
pub fn train_step<S: Scalar>(
    store: &mut ParamStore<S>,
    opt: &mut AdamState<S>,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    batch_a: &[&TriModalSample],
    batch_b: &[&TriModalSample],
    step: u64,
) -> Result<LossBreakdown> {
    let grads;
    let breakdown;
    {
        let mut sess = Session::new(store);
        let f = forward_batch(&mut sess, cfg, tcfg, batch_a, batch_b)?;
        breakdown = f.breakdown;
        if !breakdown.is_finite() {
            return Err(Error::NonFinite {
                step: step as usize,
                detail: format!("loss breakdown {breakdown:?}"),
            });
        }
        sess.tape.backward(f.optimized);
        grads = sess
            .trainable()
            .map(|(n, v)| (n.to_string(), sess.tape.grad(v).clone()))
            .collect::<Vec<_>>();
    }
    for (name, g) in &grads {
        if !g.all_finite() {
            return Err(Error::NonFinite {
                step: step as usize,
                detail: format!("gradient of {name} is not finite; losses were {breakdown:?}"),
            });
        }
    }
    opt.apply(store, &grads);
    Ok(breakdown)
}

/// One metrics-log line.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub wall_ms: u64,
}

/// Steps that make one epoch: a full pass over A plus a full pass over B.
pub fn steps_per_epoch(n_a: usize, n_b: usize, tcfg: &TrainConfig) -> usize {
    let bs = tcfg.batch_size;
    match tcfg.strategy {
        Strategy::Mixing => n_a.max(n_b).div_ceil(bs / 2),
        Strategy::Alternate => n_a.div_ceil(bs) + n_b.div_ceil(bs),
    }
}

fn check_world_fits(world: &World, cfg: &ModelConfig) -> Result<()> {
    let spec = &world.spec;
    ensure_arg!(
        spec.vocab_size == cfg.vocab_size,
        "dataset vocabulary {} != model vocabulary {}",
        spec.vocab_size,
        cfg.vocab_size
    );
    ensure_arg!(
        spec.image_h == cfg.image_h && spec.image_w == cfg.image_w,
        "dataset image {}x{} != model {}x{}",
        spec.image_h,
        spec.image_w,
        cfg.image_h,
        cfg.image_w
    );
    ensure_arg!(
        spec.bands == cfg.bands,
        "dataset bands {} != model bands {}",
        spec.bands,
        cfg.bands
    );
    let rows = spec.audio_rows();
    ensure_arg!(
        rows % cfg.chunk_rows == 0,
        "audio rows {} not divisible by encoder chunk_rows {}",
        rows,
        cfg.chunk_rows
    );
    ensure_arg!(
        rows % cfg.rows_per_step() == 0,
        "audio rows {} not divisible by decoder group {}",
        rows,
        cfg.rows_per_step()
    );
    Ok(())
}

/// Run the full training loop. With an output directory, writes
/// `metrics.ndjson`, a rolling `latest.smck` each epoch, and `final.smck`.
pub fn train_loop<S: Scalar>(
    world: &World,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(ParamStore<S>, Vec<StepRecord>)> {
    cfg.validate()?;
    tcfg.validate()?;
    check_world_fits(world, cfg)?;
    ensure_arg!(!world.a.is_empty() && !world.b.is_empty(), "training needs nonempty splits");

    let mut init_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    init_rng.set_stream(STREAM_INIT);
    let mut store: ParamStore<S> = init_params(cfg, &mut init_rng)?;
    let mut opt = AdamState::new(tcfg.lr);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    batch_rng.set_stream(STREAM_BATCH);

    let mut metrics_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(fs::File::create(dir.join("metrics.ndjson"))?)
        }
        None => None,
    };

    let per_epoch = steps_per_epoch(world.a.len(), world.b.len(), tcfg);
    let mut records = Vec::new();
    let mut step: u64 = 0;
    let started = Instant::now();

    for epoch in 0..tcfg.epochs {
        for _ in 0..per_epoch {
            let idx = sample_batch(
                &mut batch_rng,
                world.a.len(),
                world.b.len(),
                tcfg.strategy,
                tcfg.batch_size,
                step,
            )?;
            let batch_a: Vec<&TriModalSample> = idx.a.iter().map(|&i| &world.a[i]).collect();
            let batch_b: Vec<&TriModalSample> = idx.b.iter().map(|&i| &world.b[i]).collect();
            let loss = train_step(&mut store, &mut opt, cfg, tcfg, &batch_a, &batch_b, step)?;
            let rec = StepRecord {
                step,
                epoch,
                loss,
                wall_ms: started.elapsed().as_millis() as u64,
            };
            if let Some(f) = metrics_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&rec)?)?;
            }
            records.push(rec);
            step += 1;
        }
        if let Some(dir) = out_dir {
            checkpoint::save(&dir.join("latest.smck"), cfg, tcfg, &store, &opt, &batch_rng)?;
        }
    }

    if let Some(dir) = out_dir {
        checkpoint::save(&dir.join("final.smck"), cfg, tcfg, &store, &opt, &batch_rng)?;
    }
    Ok((store, records))
}
