//! Displacement metrics and cooperative-configuration evaluation.
//!
//! minADE and minFDE pick their best hypothesis independently (each metric
//! minimizes itself) over the K most probable modes; the miss rate counts
//! scenes whose minFDE exceeds 2 m, with exactly 2 m still a hit. Reported
//! metrics cover only the actor of interest.

use crate::autodiff::Scalar;
use crate::coop::{apply_assignment, fixed_betas, sample_roles, CoopRole};
use crate::graph::build_bundle;
use crate::network::{predict_bundle, ModelConfig, ModelParams, NetError, PredictionSet};
use crate::scene::{normalize_frame, EvalConfig, Scene, Trajectory, Vec2};
use crate::util::SeedMixer;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MISS_THRESHOLD: f64 = 2.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("k must be in [1, {modes}], got {k}")]
    InvalidK { k: usize, modes: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("actor {0:?} has no valid ground-truth future")]
    NoValidGt(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Coop(#[from] crate::coop::CoopError),
}

pub type MetricsResult<T> = Result<T, MetricsError>;

/// Indices of the k most probable modes, ties broken by lower index.
pub fn top_k_modes(probs: &[f64], k: usize) -> MetricsResult<Vec<usize>> {
    if k == 0 || k > probs.len() {
        return Err(MetricsError::InvalidK {
            k,
            modes: probs.len(),
        });
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    Ok(order)
}

/// Final-displacement error of the best of the top-k modes: distance between
/// predicted and ground-truth positions at the last valid ground-truth step.
pub fn min_fde(
    modes: &[Vec<Vec2>],
    probs: &[f64],
    gt: &Trajectory,
    k: usize,
) -> MetricsResult<f64> {
    let last = gt
        .last_valid()
        .ok_or_else(|| MetricsError::NoValidGt("gt".into()))?;
    let step = last.t as usize - 1;
    let picks = top_k_modes(probs, k)?;
    Ok(picks
        .iter()
        .map(|&m| modes[m][step].dist(last.pos))
        .fold(f64::INFINITY, f64::min))
}

/// Average-displacement error of the best of the top-k modes; the best mode
/// is the one minimizing this average.
pub fn min_ade(
    modes: &[Vec<Vec2>],
    probs: &[f64],
    gt: &Trajectory,
    k: usize,
) -> MetricsResult<f64> {
    let valid: Vec<(usize, Vec2)> = gt
        .valid_states()
        .filter(|s| s.t >= 1)
        .map(|s| (s.t as usize - 1, s.pos))
        .collect();
    if valid.is_empty() {
        return Err(MetricsError::NoValidGt("gt".into()));
    }
    let picks = top_k_modes(probs, k)?;
    Ok(picks
        .iter()
        .map(|&m| {
            valid
                .iter()
                .map(|&(step, pos)| modes[m][step].dist(pos))
                .sum::<f64>()
                / valid.len() as f64
        })
        .fold(f64::INFINITY, f64::min))
}

/// Fraction of scenes without any hypothesis within 2 m of the ground-truth
/// endpoint. Exactly 2 m counts as a hit.
pub fn miss_rate(min_fdes: &[f64], threshold: f64) -> MetricsResult<f64> {
    if min_fdes.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let misses = min_fdes.iter().filter(|&&v| v > threshold).count();
    Ok(misses as f64 / min_fdes.len() as f64)
}

/// AOI metrics of one prediction set at one K.
pub fn aoi_metrics(
    preds: &PredictionSet,
    aoi_idx: usize,
    gt: &Trajectory,
    k: usize,
) -> MetricsResult<(f64, f64)> {
    let row = preds
        .for_actor(aoi_idx)
        .ok_or_else(|| MetricsError::NoValidGt("aoi not predicted".into()))?;
    let ade = min_ade(&preds.trajectories[row], &preds.probabilities[row], gt, k)?;
    let fde = min_fde(&preds.trajectories[row], &preds.probabilities[row], gt, k)?;
    Ok((ade, fde))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub label: String,
    pub theta_gt: f64,
    pub theta_type: f64,
    pub theta_aoi: bool,
    pub beta: f64,
    pub k: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub n_scenes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneEval {
    pub scene_id: String,
    pub k: usize,
    pub min_ade: f64,
    pub min_fde: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub per_scene: Vec<SceneEval>,
}

impl MetricsReport {
    pub fn row(&self, k: usize) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.k == k)
    }
}

/// Deterministic per-scene cooperative assignment for evaluation: roles come
/// from (eval seed, scene id) so reports do not depend on dataset order; the
/// AOI is excluded from theta_gt sampling and gets a path exactly when
/// theta_aoi is set; beta is fixed.
pub fn eval_augment(scene: &Scene, ecfg: &EvalConfig) -> MetricsResult<crate::coop::AugmentedScene> {
    let mut rng = SeedMixer::new(ecfg.seed)
        .mix_str("eval")
        .mix_str(&scene.id)
        .rng();
    let mut assignment = sample_roles(scene, ecfg.theta_gt, ecfg.theta_type, true, &mut rng);
    if ecfg.theta_aoi {
        let eligible = crate::coop::eligible_actors(scene, false);
        if eligible.contains(&scene.aoi_index()) {
            assignment
                .roles
                .insert(scene.aoi_id.clone(), CoopRole::PathOnly);
        }
    }
    fixed_betas(&mut assignment, ecfg.beta);
    Ok(apply_assignment(scene, &assignment)?)
}

fn eval_scene<F: Scalar>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    scene: &Scene,
    ecfg: &EvalConfig,
    ks: &[usize],
) -> MetricsResult<Vec<SceneEval>> {
    let (norm, _) = normalize_frame(scene);
    let aug = eval_augment(&norm, ecfg)?;
    let bundle = build_bundle(&aug, &cfg.graph);
    let preds = predict_bundle(params, cfg, &bundle)?;
    let aoi_idx = norm.aoi_index();
    let gt = norm.actors[aoi_idx]
        .future_gt
        .as_ref()
        .ok_or_else(|| MetricsError::NoValidGt(norm.aoi_id.clone()))?;
    ks.iter()
        .map(|&k| {
            let (ade, fde) = aoi_metrics(&preds, aoi_idx, gt, k)?;
            Ok(SceneEval {
                scene_id: scene.id.clone(),
                k,
                min_ade: ade,
                min_fde: fde,
            })
        })
        .collect()
}

/// Evaluate a model over scenes under one cooperative configuration,
/// reporting at K=1 and K=ecfg.k.
pub fn evaluate<F: Scalar>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    scenes: &[Scene],
    ecfg: &EvalConfig,
    label: &str,
) -> MetricsResult<MetricsReport> {
    ecfg.validate(cfg.modes)
        .map_err(|_| MetricsError::InvalidK {
            k: ecfg.k,
            modes: cfg.modes,
        })?;
    if scenes.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut ks = vec![1usize, ecfg.k];
    ks.dedup();
    let mut per_scene: Vec<SceneEval> = scenes
        .par_iter()
        .map(|scene| eval_scene(params, cfg, scene, ecfg, &ks))
        .collect::<MetricsResult<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    per_scene.sort_by(|a, b| a.scene_id.cmp(&b.scene_id).then(a.k.cmp(&b.k)));

    let rows = ks
        .iter()
        .map(|&k| {
            let evals: Vec<&SceneEval> = per_scene.iter().filter(|e| e.k == k).collect();
            let n = evals.len();
            let fdes: Vec<f64> = evals.iter().map(|e| e.min_fde).collect();
            MetricsRow {
                label: label.to_string(),
                theta_gt: ecfg.theta_gt,
                theta_type: ecfg.theta_type,
                theta_aoi: ecfg.theta_aoi,
                beta: ecfg.beta,
                k,
                min_ade: evals.iter().map(|e| e.min_ade).sum::<f64>() / n as f64,
                min_fde: fdes.iter().sum::<f64>() / n as f64,
                miss_rate: miss_rate(&fdes, MISS_THRESHOLD).expect("nonempty"),
                n_scenes: n,
            }
        })
        .collect();
    Ok(MetricsReport {
        rows,
        per_scene,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    ThetaGt,
    Beta,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::ThetaGt => "theta_gt",
            SweepAxis::Beta => "beta",
        }
    }
}

/// One evaluation per grid value along the chosen axis.
pub fn sweep<F: Scalar>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    scenes: &[Scene],
    base: &EvalConfig,
    axis: SweepAxis,
    grid: &[f64],
) -> MetricsResult<Vec<(f64, MetricsReport)>> {
    grid.iter()
        .map(|&v| {
            let mut ecfg = *base;
            match axis {
                SweepAxis::ThetaGt => ecfg.theta_gt = v,
                SweepAxis::Beta => ecfg.beta = v,
            }
            let label = format!("{}={v}", axis.name());
            evaluate(params, cfg, scenes, &ecfg, &label).map(|r| (v, r))
        })
        .collect()
}

pub const CSV_HEADER: &str =
    "label,theta_gt,theta_type,theta_aoi,beta,k,min_ade,min_fde,miss_rate,n_scenes";

pub fn rows_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.6},{:.6},{:.6},{}\n",
            r.label,
            r.theta_gt,
            r.theta_type,
            if r.theta_aoi { "yes" } else { "no" },
            r.beta,
            r.k,
            r.min_ade,
            r.min_fde,
            r.miss_rate,
            r.n_scenes
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::ActorState;
    use rand::Rng;

    fn gt_line(h: usize) -> Trajectory {
        Trajectory {
            states: (1..=h as i32)
                .map(|t| ActorState::new(t, Vec2::new(t as f64, 0.0), true))
                .collect(),
        }
    }

    fn mode_line(h: usize, dx: f64, dy: f64) -> Vec<Vec2> {
        (1..=h as i32)
            .map(|t| Vec2::new(t as f64 + dx, dy))
            .collect()
    }

    #[test]
    fn perfect_mode_scores_zero() {
        let gt = gt_line(5);
        let modes = vec![mode_line(5, 0.0, 0.0), mode_line(5, 3.0, 4.0)];
        let probs = vec![0.5, 0.5];
        assert_eq!(min_fde(&modes, &probs, &gt, 2).unwrap(), 0.0);
        assert_eq!(min_ade(&modes, &probs, &gt, 2).unwrap(), 0.0);
    }

    #[test]
    fn top_k_restriction_changes_result() {
        // endpoints (0,0) and (3,4) vs gt endpoint (0,0)
        let gt = Trajectory {
            states: vec![ActorState::new(1, Vec2::new(0.0, 0.0), true)],
        };
        let modes = vec![vec![Vec2::new(3.0, 4.0)], vec![Vec2::new(0.0, 0.0)]];
        let probs = vec![0.9, 0.1]; // the (3,4) mode is more probable
        assert_eq!(min_fde(&modes, &probs, &gt, 2).unwrap(), 0.0);
        assert_eq!(min_fde(&modes, &probs, &gt, 1).unwrap(), 5.0);
    }

    #[test]
    fn constant_offset_gives_that_ade() {
        let gt = gt_line(6);
        let modes = vec![mode_line(6, 0.0, 1.0)];
        let probs = vec![1.0];
        assert!((min_ade(&modes, &probs, &gt, 1).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_match_brute_force_on_random_inputs() {
        let mut rng = SeedMixer::new(2024).rng();
        for _ in 0..1000 {
            let h = rng.gen_range(1..8);
            let m = rng.gen_range(1..6);
            let k = rng.gen_range(1..=m);
            let modes: Vec<Vec<Vec2>> = (0..m)
                .map(|_| {
                    (0..h)
                        .map(|_| Vec2::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)))
                        .collect()
                })
                .collect();
            let probs: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..1.0)).collect();
            let gt = Trajectory {
                states: (1..=h as i32)
                    .map(|t| {
                        ActorState::new(
                            t,
                            Vec2::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)),
                            rng.gen_bool(0.8) || t == h as i32,
                        )
                    })
                    .collect(),
            };

            // brute force: enumerate the k most probable (stable ties), then
            // loop over steps
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
            let picks = &order[..k];
            let last = gt.last_valid().unwrap();
            let bf_fde = picks
                .iter()
                .map(|&mi| modes[mi][last.t as usize - 1].dist(last.pos))
                .fold(f64::INFINITY, f64::min);
            let valid: Vec<&ActorState> = gt.valid_states().collect();
            let bf_ade = picks
                .iter()
                .map(|&mi| {
                    valid
                        .iter()
                        .map(|s| modes[mi][s.t as usize - 1].dist(s.pos))
                        .sum::<f64>()
                        / valid.len() as f64
                })
                .fold(f64::INFINITY, f64::min);

            assert_eq!(min_fde(&modes, &probs, &gt, k).unwrap(), bf_fde);
            assert_eq!(min_ade(&modes, &probs, &gt, k).unwrap(), bf_ade);
        }
    }

    #[test]
    fn metrics_are_monotone_in_k() {
        let mut rng = SeedMixer::new(31).rng();
        for _ in 0..200 {
            let h = 4;
            let m = 6;
            let modes: Vec<Vec<Vec2>> = (0..m)
                .map(|_| {
                    (0..h)
                        .map(|_| Vec2::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)))
                        .collect()
                })
                .collect();
            let probs: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..1.0)).collect();
            let gt = gt_line(h);
            let f1 = min_fde(&modes, &probs, &gt, 1).unwrap();
            let fm = min_fde(&modes, &probs, &gt, m).unwrap();
            assert!(fm <= f1);
            let a1 = min_ade(&modes, &probs, &gt, 1).unwrap();
            let am = min_ade(&modes, &probs, &gt, m).unwrap();
            assert!(am <= a1);
        }
    }

    #[test]
    fn miss_rate_boundary_and_values() {
        assert_eq!(miss_rate(&[0.0, 0.0], MISS_THRESHOLD).unwrap(), 0.0);
        assert_eq!(miss_rate(&[1.9, 2.1], MISS_THRESHOLD).unwrap(), 0.5);
        // exactly 2.0 is a hit
        assert_eq!(miss_rate(&[2.0], MISS_THRESHOLD).unwrap(), 0.0);
        assert!(matches!(
            miss_rate(&[], MISS_THRESHOLD),
            Err(MetricsError::EmptyInput)
        ));
    }

    #[test]
    fn invalid_k_is_rejected() {
        let gt = gt_line(3);
        let modes = vec![mode_line(3, 0.0, 0.0)];
        let probs = vec![1.0];
        assert!(matches!(
            min_fde(&modes, &probs, &gt, 2),
            Err(MetricsError::InvalidK { .. })
        ));
    }

    #[test]
    fn evaluation_is_deterministic() {
        use crate::network::init_params;
        let mut cfg = ModelConfig::micro();
        cfg.graph.t_hist = 4;
        let params: ModelParams<f32> = init_params(&cfg, 1);
        let scene = crate::testutil::straight_scene(4, 6);
        let ecfg = EvalConfig {
            theta_gt: 0.7,
            theta_type: 0.5,
            theta_aoi: true,
            beta: 1.0,
            k: 2,
            seed: 9,
        };
        let a = evaluate(&params, &cfg, &[scene.clone()], &ecfg, "x").unwrap();
        let b = evaluate(&params, &cfg, &[scene], &ecfg, "x").unwrap();
        assert_eq!(
            format!("{:?}", a.per_scene),
            format!("{:?}", b.per_scene)
        );
    }
}
