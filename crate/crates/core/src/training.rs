//! Loss, optimizer, schedule, training loop, and checkpointing.
//!
//! The loss is winner-takes-all: per predicted actor, the hypothesis with the
//! smallest final-displacement error on valid steps is regressed with smooth
//! L1 while the mode classifier is trained toward that winner's index with
//! cross-entropy, summed with unit weights.
//!
//! Every random draw in the loop (sample order, theta fractions, per-actor
//! beta) is derived from (seed, sample counter, scene id), so a run is fully
//! determined by its configs and resuming from a checkpoint reproduces the
//! uninterrupted run bit for bit.

use crate::autodiff::{AdError, AdResult, NodeId, Scalar, Tape, Tensor};
use crate::coop::{apply_assignment, sample_betas, sample_roles, AugmentedScene};
use crate::graph::{build_bundle, GraphBundle};
use crate::metrics::{evaluate, MetricsError};
use crate::network::{
    bind_params, full_forward, init_params, ForwardOutput, ModelConfig, ModelParams, NetError,
};
use crate::scene::{normalize_frame, Dataset, EvalConfig, Scene};
use crate::util::SeedMixer;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;
use thiserror::Error;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// 1cycle shape: warmup fraction, initial divisor, final divisor.
pub const ONECYCLE_WARMUP: f64 = 0.3;
pub const ONECYCLE_DIV: f64 = 25.0;
pub const ONECYCLE_FINAL_DIV: f64 = 1e4;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"COOPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("unsupported checkpoint format version {found} (expected {CHECKPOINT_VERSION})")]
    FormatVersion { found: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corruption(String),
    #[error("checkpoint precision {found} does not match requested {expected}")]
    PrecisionMismatch {
        expected: &'static str,
        found: String,
    },
    #[error("no predicted actor has a valid ground-truth future")]
    NoValidGt,
    #[error("dataset has no training scenes")]
    EmptyDataset,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type TrainResult<T> = Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaSampling {
    /// theta_gt and theta_type drawn uniformly per training item.
    UniformPerItem,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    /// Only 1cycle is implemented; kept in the config for visibility.
    pub schedule: String,
    pub seed: u64,
    pub precision: Precision,
    pub theta_sampling: ThetaSampling,
    pub beta_min: f64,
    pub beta_max: f64,
    pub checkpoint_every: usize,
    pub eval_every: usize,
    /// Data-parallel batch preparation width; results are identical for any
    /// value.
    pub workers: usize,
}

impl TrainConfig {
    pub fn full() -> Self {
        Self {
            iterations: 150_000,
            batch_size: 64,
            max_lr: 1e-3,
            schedule: "1cycle".into(),
            seed: 0,
            precision: Precision::F32,
            theta_sampling: ThetaSampling::UniformPerItem,
            beta_min: crate::coop::BETA_MIN,
            beta_max: crate::coop::BETA_MAX,
            checkpoint_every: 5000,
            eval_every: 5000,
            workers: 1,
        }
    }

    pub fn desk() -> Self {
        Self {
            iterations: 20_000,
            batch_size: 16,
            checkpoint_every: 2000,
            eval_every: 2000,
            ..Self::full()
        }
    }
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Ground-truth targets for the predicted actors that have at least one
/// valid future state.
#[derive(Debug, Clone)]
pub struct LossTargets {
    /// Row indices into the prediction output (not scene actor indices).
    pub pred_rows: Vec<usize>,
    /// [n, horizon*2] target positions, zero where invalid.
    pub target: Vec<f64>,
    /// [n, horizon*2] validity per coordinate.
    pub mask: Vec<f64>,
    /// Last valid step index per target row.
    pub last_step: Vec<usize>,
    pub horizon: usize,
}

impl LossTargets {
    pub fn is_empty(&self) -> bool {
        self.pred_rows.is_empty()
    }
}

/// Collect targets for every predicted actor with usable ground truth.
pub fn build_targets(scene: &Scene, predict_actors: &[usize]) -> LossTargets {
    let h = scene.horizon;
    let mut out = LossTargets {
        pred_rows: Vec::new(),
        target: Vec::new(),
        mask: Vec::new(),
        last_step: Vec::new(),
        horizon: h,
    };
    for (row, &ai) in predict_actors.iter().enumerate() {
        let Some(fut) = scene.actors[ai].future_gt.as_ref() else {
            continue;
        };
        let mut target = vec![0.0; h * 2];
        let mut mask = vec![0.0; h * 2];
        let mut last = None;
        for s in fut.valid_states() {
            if s.t < 1 || s.t > h as i32 {
                continue;
            }
            let step = s.t as usize - 1;
            target[step * 2] = s.pos.x;
            target[step * 2 + 1] = s.pos.y;
            mask[step * 2] = 1.0;
            mask[step * 2 + 1] = 1.0;
            last = Some(step);
        }
        let Some(last) = last else { continue };
        out.pred_rows.push(row);
        out.target.extend_from_slice(&target);
        out.mask.extend_from_slice(&mask);
        out.last_step.push(last);
    }
    out
}

pub struct LossNodes {
    pub total: NodeId,
    pub l_pos: NodeId,
    pub l_class: NodeId,
    /// Winning mode per target row.
    pub winners: Vec<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub l_pos: f64,
    pub l_class: f64,
}

/// Winner-takes-all loss over one scene's predictions.
///
/// The winner per actor is the mode with the lowest final-displacement error
/// at the last valid step (ties to the lower index). Position loss is smooth
/// L1 over valid coordinates of the winning mode, averaged within and then
/// across actors; classification is mean cross-entropy toward the winner.
pub fn compute_loss<F: Scalar>(
    tape: &mut Tape<F>,
    out: &ForwardOutput,
    targets: &LossTargets,
    modes: usize,
) -> AdResult<LossNodes> {
    let winners = select_winners(tape, out, targets, modes);
    loss_with_winners(tape, out, targets, modes, winners)
}

/// Winning mode per target row: lowest final-displacement error at the last
/// valid step, ties to the lower index.
pub fn select_winners<F: Scalar>(
    tape: &Tape<F>,
    out: &ForwardOutput,
    targets: &LossTargets,
    modes: usize,
) -> Vec<usize> {
    let h2 = targets.horizon * 2;
    let pos = tape.value(out.positions);
    let mut winners = Vec::with_capacity(targets.pred_rows.len());
    for (i, &row) in targets.pred_rows.iter().enumerate() {
        let last = targets.last_step[i];
        let gx = targets.target[i * h2 + last * 2];
        let gy = targets.target[i * h2 + last * 2 + 1];
        let mut best = (f64::INFINITY, 0usize);
        for m in 0..modes {
            let r = pos.row(row * modes + m);
            let dx = Scalar::to_f64(r[last * 2]) - gx;
            let dy = Scalar::to_f64(r[last * 2 + 1]) - gy;
            let err = dx.hypot(dy);
            if err < best.0 {
                best = (err, m);
            }
        }
        winners.push(best.1);
    }
    winners
}

/// Loss with the winning modes pinned; gradient checks use this to keep the
/// objective differentiable under perturbation.
pub fn loss_with_winners<F: Scalar>(
    tape: &mut Tape<F>,
    out: &ForwardOutput,
    targets: &LossTargets,
    modes: usize,
    winners: Vec<usize>,
) -> AdResult<LossNodes> {
    assert!(!targets.is_empty(), "caller guarantees a nonempty loss set");
    let h2 = targets.horizon * 2;
    let n = targets.pred_rows.len();

    // Regress the winning rows.
    let winner_rows: Rc<Vec<usize>> = Rc::new(
        targets
            .pred_rows
            .iter()
            .zip(winners.iter())
            .map(|(&row, &m)| row * modes + m)
            .collect(),
    );
    let picked = tape.gather_rows(out.positions, winner_rows)?;
    let target = Tensor::from_f64s(vec![n, h2], &targets.target);
    let mut weight = vec![0.0f64; n * h2];
    for i in 0..n {
        let valid: f64 = targets.mask[i * h2..(i + 1) * h2].iter().sum();
        if valid > 0.0 {
            let w = 1.0 / (valid * n as f64);
            for c in 0..h2 {
                weight[i * h2 + c] = targets.mask[i * h2 + c] * w;
            }
        }
    }
    let weight = Tensor::from_f64s(vec![n, h2], &weight);
    let l_pos = tape.smooth_l1(picked, Rc::new(target), Rc::new(weight))?;

    // Classify toward the winner.
    let logit_rows: Rc<Vec<usize>> = Rc::new(targets.pred_rows.clone());
    let picked_logits = tape.gather_rows(out.logits, logit_rows)?;
    let l_class = tape.cross_entropy_logits(picked_logits, Rc::new(winners.clone()))?;

    let total = tape.add(l_pos, l_class)?;
    Ok(LossNodes {
        total,
        l_pos,
        l_class,
        winners,
    })
}

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

/// Standard Adam with bias correction. Parameters without a gradient this
/// step are left untouched.
pub fn adam_step<F: Scalar>(
    params: &mut ModelParams<F>,
    grads: &[Option<Tensor<F>>],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let b1 = F::from_f64(beta1);
    let b2 = F::from_f64(beta2);
    let one = F::one();
    let lr = F::from_f64(lr);
    let eps = F::from_f64(eps);
    for (p, g) in params.params.iter_mut().zip(grads.iter()) {
        let Some(g) = g else { continue };
        p.step += 1;
        let bc1 = one - b1.powi(p.step as i32);
        let bc2 = one - b2.powi(p.step as i32);
        for i in 0..p.tensor.data.len() {
            let gi = g.data[i];
            p.adam_m[i] = b1 * p.adam_m[i] + (one - b1) * gi;
            p.adam_v[i] = b2 * p.adam_v[i] + (one - b2) * gi * gi;
            let mhat = p.adam_m[i] / bc1;
            let vhat = p.adam_v[i] / bc2;
            p.tensor.data[i] = p.tensor.data[i] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Cosine 1cycle: warmup from max_lr/25 to max_lr over the first 30% of
/// iterations, then decay to max_lr/1e4.
pub fn onecycle_lr(iter: usize, total: usize, max_lr: f64) -> f64 {
    assert!(total > 0);
    let frac = (iter as f64 / total as f64).clamp(0.0, 1.0);
    let cos_interp = |from: f64, to: f64, t: f64| -> f64 {
        from + (to - from) * (1.0 - (std::f64::consts::PI * t).cos()) / 2.0
    };
    if frac <= ONECYCLE_WARMUP {
        cos_interp(max_lr / ONECYCLE_DIV, max_lr, frac / ONECYCLE_WARMUP)
    } else {
        cos_interp(
            max_lr,
            max_lr / ONECYCLE_FINAL_DIV,
            (frac - ONECYCLE_WARMUP) / (1.0 - ONECYCLE_WARMUP),
        )
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub lr: f64,
    pub total: f64,
    pub l_pos: f64,
    pub l_class: f64,
}

pub const LOSS_CURVE_HEADER: &str = "iteration,lr,total,l_pos,l_class";

pub fn loss_curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from(LOSS_CURVE_HEADER);
    out.push('\n');
    for p in points {
        out.push_str(&format!(
            "{},{:.8e},{:.8e},{:.8e},{:.8e}\n",
            p.iteration, p.lr, p.total, p.l_pos, p.l_class
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BestVal {
    pub iteration: usize,
    pub min_fde: f64,
}

pub struct TrainOutput<F: Scalar> {
    pub checkpoint: Checkpoint<F>,
    pub curve: Vec<CurvePoint>,
    pub skipped_items: usize,
    pub best: Option<BestVal>,
}

/// Sampled cooperative setup plus targets for one training item.
fn prepare_item(
    scene: &Scene,
    tcfg: &TrainConfig,
    sample_index: u64,
) -> Result<(AugmentedScene, LossTargets), crate::coop::CoopError> {
    let (norm, _) = normalize_frame(scene);
    let mut rng = SeedMixer::new(tcfg.seed)
        .mix_str("item")
        .mix_u64(sample_index)
        .mix_str(&scene.id)
        .rng();
    let theta_gt: f64 = rng.gen_range(0.0..=1.0);
    let theta_type: f64 = rng.gen_range(0.0..=1.0);
    let mut assignment = sample_roles(&norm, theta_gt, theta_type, false, &mut rng);
    // Per-actor speed factors in [beta_min, beta_max].
    {
        let span_ok = tcfg.beta_min >= crate::coop::BETA_MIN - 1e-12
            && tcfg.beta_max <= crate::coop::BETA_MAX + 1e-12;
        debug_assert!(span_ok);
        sample_betas(&mut assignment, &mut rng);
    }
    let aug = apply_assignment(&norm, &assignment)?;
    let targets = build_targets(&norm, &aug.predict_set);
    Ok((aug, targets))
}

/// Forward + backward for one prepared item; gradients come back aligned
/// with parameter registration order, scaled by `scale`.
fn item_grads<F: Scalar>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    bundle: &GraphBundle,
    targets: &LossTargets,
    scale: f64,
) -> TrainResult<(LossParts, Vec<Option<Tensor<F>>>)> {
    let mut tape = Tape::new();
    let binding = bind_params(&mut tape, params, true);
    let out = full_forward(&mut tape, params, &binding, cfg, bundle)?;
    let loss = compute_loss(&mut tape, &out, targets, cfg.modes)?;
    let scaled = tape.scale(loss.total, scale);
    let grads = tape.backward(scaled)?;
    let parts = LossParts {
        total: Scalar::to_f64(tape.value(loss.total).item()),
        l_pos: Scalar::to_f64(tape.value(loss.l_pos).item()),
        l_class: Scalar::to_f64(tape.value(loss.l_class).item()),
    };
    let out_grads = binding
        .ids
        .iter()
        .map(|&id| grads.get(id).cloned())
        .collect();
    Ok((parts, out_grads))
}

fn accumulate_grads<F: Scalar>(
    acc: &mut Vec<Option<Tensor<F>>>,
    item: Vec<Option<Tensor<F>>>,
) {
    if acc.is_empty() {
        *acc = item;
        return;
    }
    for (a, g) in acc.iter_mut().zip(item.into_iter()) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => {
                for (x, y) in a.data.iter_mut().zip(g.data.iter()) {
                    *x += *y;
                }
            }
            (None, Some(g)) => *a = Some(g),
            _ => {}
        }
    }
}

/// Shuffled scene order for one epoch, derived from the seed.
fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut rng = SeedMixer::new(seed)
        .mix_str("order")
        .mix_u64(epoch)
        .rng();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Quick validation metric used for best-checkpoint tracking.
fn val_min_fde<F: Scalar>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    val: &[Scene],
    seed: u64,
) -> TrainResult<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let ecfg = EvalConfig {
        theta_gt: 0.0,
        theta_type: 0.0,
        theta_aoi: false,
        beta: 1.0,
        k: cfg.modes,
        seed,
    };
    let report = evaluate(params, cfg, val, &ecfg, "val")?;
    Ok(report.row(cfg.modes).map(|r| r.min_fde))
}

/// Run (or resume) training. When `out_dir` is set, the latest and best
/// checkpoints and the loss curve are written there as the run progresses.
pub fn train<F: Scalar>(
    dataset: &Dataset,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    resume: Option<Checkpoint<F>>,
    out_dir: Option<&Path>,
) -> TrainResult<TrainOutput<F>> {
    train_session(dataset, cfg, tcfg, resume, out_dir, None)
}

/// Like [`train`], but stopping after `stop_at` iterations while keeping the
/// full schedule; models a run interrupted mid-way. The returned checkpoint
/// resumes exactly where an uninterrupted run would have been.
pub fn train_session<F: Scalar>(
    dataset: &Dataset,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    resume: Option<Checkpoint<F>>,
    out_dir: Option<&Path>,
    stop_at: Option<usize>,
) -> TrainResult<TrainOutput<F>> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let end_iter = stop_at.unwrap_or(tcfg.iterations).min(tcfg.iterations);
    let n_train = dataset.train.len();
    let (mut params, start_iter, mut best): (ModelParams<F>, usize, Option<BestVal>) =
        match resume {
            Some(ckpt) => {
                let best = ckpt.best_val.map(|(iteration, min_fde)| BestVal {
                    iteration,
                    min_fde,
                });
                (ckpt.params, ckpt.iteration, best)
            }
            None => (init_params(cfg, tcfg.seed), 0, None),
        };

    let mut curve = Vec::with_capacity(end_iter.saturating_sub(start_iter));
    let mut skipped = 0usize;
    let mut cached_epoch: Option<(u64, Vec<usize>)> = None;

    for it in start_iter..end_iter {
        let lr = onecycle_lr(it, tcfg.iterations, tcfg.max_lr);
        // Deterministic batch item list.
        let items: Vec<(u64, usize)> = (0..tcfg.batch_size)
            .map(|k| {
                let s = (it * tcfg.batch_size + k) as u64;
                let epoch = s / n_train as u64;
                let pos = (s % n_train as u64) as usize;
                if cached_epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
                    cached_epoch = Some((epoch, epoch_order(tcfg.seed, epoch, n_train)));
                }
                (s, cached_epoch.as_ref().unwrap().1[pos])
            })
            .collect();

        let scale = 1.0 / tcfg.batch_size as f64;
        let work = |&(s, scene_idx): &(u64, usize)| -> Option<(LossParts, Vec<Option<Tensor<F>>>)> {
            let scene = &dataset.train[scene_idx];
            let (aug, targets) = match prepare_item(scene, tcfg, s) {
                Ok(v) => v,
                Err(e) => {
                    log::warn!("skipping item {s} (scene {}): {e}", scene.id);
                    return None;
                }
            };
            if targets.is_empty() {
                log::warn!("skipping item {s} (scene {}): no usable ground truth", scene.id);
                return None;
            }
            let bundle = build_bundle(&aug, &cfg.graph);
            match item_grads(&params, cfg, &bundle, &targets, scale) {
                Ok(v) => Some(v),
                Err(e) => {
                    log::warn!("skipping item {s} (scene {}): {e}", scene.id);
                    None
                }
            }
        };
        let results: Vec<Option<(LossParts, Vec<Option<Tensor<F>>>)>> = if tcfg.workers > 1 {
            items.par_iter().map(work).collect()
        } else {
            items.iter().map(work).collect()
        };

        let mut grads: Vec<Option<Tensor<F>>> = Vec::new();
        let mut parts = LossParts::default();
        let mut n_ok = 0usize;
        for r in results {
            match r {
                Some((p, g)) => {
                    parts.total += p.total;
                    parts.l_pos += p.l_pos;
                    parts.l_class += p.l_class;
                    accumulate_grads(&mut grads, g);
                    n_ok += 1;
                }
                None => skipped += 1,
            }
        }
        if n_ok > 0 {
            let inv = 1.0 / n_ok as f64;
            parts.total *= inv;
            parts.l_pos *= inv;
            parts.l_class *= inv;
            adam_step(&mut params, &grads, lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS);
        }
        curve.push(CurvePoint {
            iteration: it,
            lr,
            total: parts.total,
            l_pos: parts.l_pos,
            l_class: parts.l_class,
        });

        let done = it + 1 == end_iter;
        if tcfg.eval_every > 0 && ((it + 1) % tcfg.eval_every == 0 || done) {
            if let Some(fde) = val_min_fde(&params, cfg, &dataset.val, tcfg.seed)? {
                log::info!("iter {}: val minFDE@{} = {:.4}", it + 1, cfg.modes, fde);
                let improved = best.map(|b| fde < b.min_fde).unwrap_or(true);
                if improved {
                    best = Some(BestVal {
                        iteration: it + 1,
                        min_fde: fde,
                    });
                    if let Some(dir) = out_dir {
                        let ckpt = make_checkpoint(cfg, tcfg, it + 1, &params, best);
                        save_checkpoint(&ckpt, &dir.join("checkpoint_best.ckpt"))?;
                    }
                }
            }
        }
        if let Some(dir) = out_dir {
            if tcfg.checkpoint_every > 0 && ((it + 1) % tcfg.checkpoint_every == 0 || done) {
                let ckpt = make_checkpoint(cfg, tcfg, it + 1, &params, best);
                save_checkpoint(&ckpt, &dir.join("checkpoint_latest.ckpt"))?;
                std::fs::write(dir.join("loss_curve.csv"), loss_curve_csv(&curve))?;
            }
        }
    }

    let checkpoint = make_checkpoint(cfg, tcfg, end_iter, &params, best);
    if let Some(dir) = out_dir {
        save_checkpoint(&checkpoint, &dir.join("checkpoint_latest.ckpt"))?;
        std::fs::write(dir.join("loss_curve.csv"), loss_curve_csv(&curve))?;
    }
    Ok(TrainOutput {
        checkpoint,
        curve,
        skipped_items: skipped,
        best,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// In-memory checkpoint: everything needed to resume or evaluate.
#[derive(Debug, Clone)]
pub struct Checkpoint<F: Scalar> {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub iteration: usize,
    pub params: ModelParams<F>,
    /// (iteration, min_fde) of the best validation result so far.
    pub best_val: Option<(usize, f64)>,
}

fn make_checkpoint<F: Scalar>(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    iteration: usize,
    params: &ModelParams<F>,
    best: Option<BestVal>,
) -> Checkpoint<F> {
    Checkpoint {
        model_config: cfg.clone(),
        train_config: tcfg.clone(),
        iteration,
        params: params.clone(),
        best_val: best.map(|b| (b.iteration, b.min_fde)),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset of the tensor block; adam m/v follow contiguously.
    pub offset: usize,
    pub count: usize,
    pub step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Next global sample counter (iteration * batch_size); all random
    /// streams are derived from (seed, counter).
    pub next_sample: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub dtype: String,
    pub iteration: usize,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub rng: RngState,
    pub best_val: Option<(usize, f64)>,
    pub params: Vec<ParamEntry>,
    pub payload_len: usize,
    pub payload_sha256: String,
}

/// Serialize: magic, version, manifest length, manifest JSON, raw
/// little-endian payload (per parameter: tensor, adam m, adam v).
pub fn save_checkpoint<F: Scalar>(ckpt: &Checkpoint<F>, path: &Path) -> TrainResult<()> {
    let mut payload: Vec<u8> = Vec::new();
    let mut entries = Vec::new();
    let mut offset = 0usize;
    for p in &ckpt.params.params {
        let count = p.tensor.numel();
        entries.push(ParamEntry {
            name: p.name.clone(),
            shape: p.tensor.shape.clone(),
            offset,
            count,
            step: p.step,
        });
        for &v in p.tensor.data.iter().chain(p.adam_m.iter()).chain(p.adam_v.iter()) {
            payload.extend_from_slice(&v.to_le_bytes_vec());
        }
        offset += 3 * count;
    }
    let digest = hex_digest(&payload);
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        dtype: F::DTYPE.to_string(),
        iteration: ckpt.iteration,
        model_config: ckpt.model_config.clone(),
        train_config: ckpt.train_config.clone(),
        rng: RngState {
            seed: ckpt.train_config.seed,
            next_sample: (ckpt.iteration * ckpt.train_config.batch_size) as u64,
        },
        best_val: ckpt.best_val,
        params: entries,
        payload_len: payload.len(),
        payload_sha256: digest,
    };
    let manifest_json =
        serde_json::to_vec(&manifest).map_err(|e| TrainError::Manifest(e.to_string()))?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(CHECKPOINT_MAGIC)?;
    file.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    file.write_all(&(manifest_json.len() as u64).to_le_bytes())?;
    file.write_all(&manifest_json)?;
    file.write_all(&payload)?;
    Ok(())
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Read just the manifest, for precision/config dispatch.
pub fn peek_checkpoint(path: &Path) -> TrainResult<CheckpointManifest> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|_| TrainError::Corruption("file shorter than header".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(TrainError::Corruption("bad magic".into()));
    }
    let mut v = [0u8; 4];
    file.read_exact(&mut v)
        .map_err(|_| TrainError::Corruption("missing version".into()))?;
    let found = u32::from_le_bytes(v);
    if found != CHECKPOINT_VERSION {
        return Err(TrainError::FormatVersion { found });
    }
    let mut len = [0u8; 8];
    file.read_exact(&mut len)
        .map_err(|_| TrainError::Corruption("missing manifest length".into()))?;
    let mut manifest_json = vec![0u8; u64::from_le_bytes(len) as usize];
    file.read_exact(&mut manifest_json)
        .map_err(|_| TrainError::Corruption("truncated manifest".into()))?;
    serde_json::from_slice(&manifest_json).map_err(|e| TrainError::Manifest(e.to_string()))
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> TrainResult<Checkpoint<F>> {
    let manifest = peek_checkpoint(path)?;
    if manifest.dtype != F::DTYPE {
        return Err(TrainError::PrecisionMismatch {
            expected: F::DTYPE,
            found: manifest.dtype,
        });
    }
    let bytes = std::fs::read(path)?;
    let header = 8 + 4 + 8;
    let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let payload = &bytes[header + manifest_len..];
    if payload.len() != manifest.payload_len {
        return Err(TrainError::Corruption(format!(
            "payload length {} does not match manifest {}",
            payload.len(),
            manifest.payload_len
        )));
    }
    if hex_digest(payload) != manifest.payload_sha256 {
        return Err(TrainError::Corruption("payload checksum mismatch".into()));
    }
    let mut params = ModelParams::new();
    for e in &manifest.params {
        let read_block = |block: usize| -> Vec<F> {
            let start = (e.offset + block * e.count) * F::BYTES;
            (0..e.count)
                .map(|i| F::from_le_slice(&payload[start + i * F::BYTES..start + (i + 1) * F::BYTES]))
                .collect()
        };
        let tensor = Tensor::new(e.shape.clone(), read_block(0));
        params.register(e.name.clone(), tensor);
        let idx = params.params.len() - 1;
        params.params[idx].adam_m = read_block(1);
        params.params[idx].adam_v = read_block(2);
        params.params[idx].step = e.step;
    }
    Ok(Checkpoint {
        model_config: manifest.model_config,
        train_config: manifest.train_config,
        iteration: manifest.iteration,
        params,
        best_val: manifest.best_val,
    })
}
