//! Layer-wise and end-to-end gradient verification.
//!
//! Runs every trainable layer type through central finite differences at
//! f64: the TCN convolution, the multi-scale graph convolution block, the
//! GATv2 fusion layer, layer norm, the prediction head, and both loss
//! terms, plus a sampled whole-network check on a micro scene.

use crate::autodiff::gradcheck::{gradcheck, gradcheck_sampled};
use crate::autodiff::{GradReport, NodeId, Tape, Tensor};
use crate::coop::{apply_assignment, CoopAssignment, CoopRole};
use crate::graph::{build_bundle, ConnectionType, TypedEdges};
use crate::network::{
    bind_params, full_forward, init_params, lane_conv_aggregate, FusionLayerParams, ModelConfig,
    ModelParams, ParamBinding,
};
use crate::scene::{Actor, ActorState, LaneSegment, Scene, Trajectory, Vec2};
use crate::training::build_targets;
use crate::util::SeedMixer;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
const EPS: f64 = 1e-5;

fn rand_t(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn tcn_conv_check(rng: &mut ChaCha8Rng) -> GradReport {
    let x = rand_t(rng, vec![2, 10, 3]);
    let w = rand_t(rng, vec![8, 3, 3]);
    let b = rand_t(rng, vec![8]);
    let probe = rand_t(rng, vec![20, 8]);
    gradcheck(
        "tcn-conv",
        |tape, ids| {
            let y = tape.conv1d(ids[0], ids[1], ids[2])?;
            let r = tape.relu(y);
            let flat = tape.reshape(r, vec![20, 8])?;
            let m = tape.mul(flat, ids[3])?;
            Ok(tape.sum_all(m))
        },
        &[x, w, b, probe],
        EPS,
        LAYER_TOLERANCE,
    )
}

fn lane_conv_block_check(rng: &mut ChaCha8Rng) -> GradReport {
    let n = 6;
    let d = 8;
    let mut edges = TypedEdges::default();
    edges
        .sets
        .push((ConnectionType::SelfLoop, (0..n).map(|i| (i, i)).collect()));
    edges
        .sets
        .push((ConnectionType::Succ, (0..n - 1).map(|i| (i, i + 1)).collect()));
    edges
        .sets
        .push((ConnectionType::Dilated(2), (0..n - 2).map(|i| (i, i + 2)).collect()));
    let x = rand_t(rng, vec![n, d]);
    let w_self = rand_t(rng, vec![d, d]);
    let w_succ = rand_t(rng, vec![d, d]);
    let w_d2 = rand_t(rng, vec![d, d]);
    let gamma = rand_t(rng, vec![d]);
    let beta = rand_t(rng, vec![d]);
    let probe = rand_t(rng, vec![n, d]);
    gradcheck(
        "lane-conv-block",
        move |tape, ids| {
            let weights = vec![
                (ConnectionType::SelfLoop, ids[1]),
                (ConnectionType::Succ, ids[2]),
                (ConnectionType::Dilated(2), ids[3]),
            ];
            let agg = lane_conv_aggregate(tape, ids[0], &edges, &weights)?;
            let norm = tape.layer_norm(agg, ids[4], ids[5], 1e-5)?;
            let act = tape.relu(norm);
            let out = tape.add(ids[0], act)?;
            let m = tape.mul(out, ids[6])?;
            Ok(tape.sum_all(m))
        },
        &[x, w_self, w_succ, w_d2, gamma, beta, probe],
        EPS,
        LAYER_TOLERANCE,
    )
}

fn gatv2_check(rng: &mut ChaCha8Rng) -> GradReport {
    let (n_src, n_dst, d, heads) = (5, 4, 8, 2);
    let pairs: Vec<(usize, usize)> = (0..n_src)
        .flat_map(|s| (0..n_dst).filter(move |_| true).map(move |t| (s, t)))
        .filter(|&(s, t)| (s + t) % 2 == 0)
        .collect();
    let feats = rand_t(rng, vec![pairs.len(), 4]);
    let x_dst = rand_t(rng, vec![n_dst, d]);
    let x_src = rand_t(rng, vec![n_src, d]);
    let inputs = vec![
        x_dst,
        x_src,
        rand_t(rng, vec![d, d]),     // w_src
        rand_t(rng, vec![d, d]),     // w_dst
        rand_t(rng, vec![4, d]),     // w_edge
        rand_t(rng, vec![d]),        // bias
        rand_t(rng, vec![1, d]),     // attn
        rand_t(rng, vec![d, d]),     // w_out
        rand_t(rng, vec![d]),        // b_out
        rand_t(rng, vec![d]),        // ln gamma
        rand_t(rng, vec![d]),        // ln beta
        rand_t(rng, vec![n_dst, d]), // probe
    ];
    gradcheck(
        "gatv2-fusion",
        move |tape, ids| {
            let p = FusionLayerParams {
                w_src: ids[2],
                w_dst: ids[3],
                w_edge: ids[4],
                bias: ids[5],
                attn: ids[6],
                w_out: ids[7],
                b_out: ids[8],
                ln_g: ids[9],
                ln_b: ids[10],
            };
            let feats_t = tape.value(ids[1]).clone(); // placeholder, replaced below
            let _ = feats_t;
            let (out, _) =
                crate::network::gatv2_layer(tape, ids[0], ids[1], &pairs, &feats, heads, &p)?;
            let m = tape.mul(out, ids[11])?;
            Ok(tape.sum_all(m))
        },
        &inputs,
        EPS,
        LAYER_TOLERANCE,
    )
}

fn layer_norm_check(rng: &mut ChaCha8Rng) -> GradReport {
    let x = rand_t(rng, vec![5, 8]);
    let g = rand_t(rng, vec![8]);
    let b = rand_t(rng, vec![8]);
    let probe = rand_t(rng, vec![5, 8]);
    gradcheck(
        "layer-norm",
        |tape, ids| {
            let y = tape.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
            let m = tape.mul(y, ids[3])?;
            Ok(tape.sum_all(m))
        },
        &[x, g, b, probe],
        EPS,
        LAYER_TOLERANCE,
    )
}

fn head_mlp_check(rng: &mut ChaCha8Rng) -> GradReport {
    let (p, d, hidden, out) = (3, 8, 16, 10);
    let x = rand_t(rng, vec![p, d]);
    let w0 = rand_t(rng, vec![d, hidden]);
    let b0 = rand_t(rng, vec![hidden]);
    let w1 = rand_t(rng, vec![hidden, out]);
    let b1 = rand_t(rng, vec![out]);
    let probe = rand_t(rng, vec![p, out]);
    gradcheck(
        "head-mlp",
        |tape, ids| {
            let h = tape.matmul(ids[0], ids[1])?;
            let h = tape.add_bias(h, ids[2])?;
            let h = tape.relu(h);
            let o = tape.matmul(h, ids[3])?;
            let o = tape.add_bias(o, ids[4])?;
            let m = tape.mul(o, ids[5])?;
            Ok(tape.sum_all(m))
        },
        &[x, w0, b0, w1, b1, probe],
        EPS,
        LAYER_TOLERANCE,
    )
}

fn smooth_l1_check(rng: &mut ChaCha8Rng) -> GradReport {
    // keep |pred - target| away from the curvature switch at 1
    let data: Vec<f64> = (0..12)
        .map(|_| loop {
            let v: f64 = rng.gen_range(-2.0..2.0);
            if (v.abs() - 1.0).abs() > 1e-2 {
                break v;
            }
        })
        .collect();
    let pred = Tensor::new(vec![3, 4], data);
    let target = Rc::new(Tensor::zeros(vec![3, 4]));
    let weight = Rc::new(rand_t(rng, vec![3, 4]));
    gradcheck(
        "smooth-l1",
        move |tape, ids| tape.smooth_l1(ids[0], target.clone(), weight.clone()),
        &[pred],
        EPS,
        LAYER_TOLERANCE,
    )
}

fn cross_entropy_check(rng: &mut ChaCha8Rng) -> GradReport {
    let logits = rand_t(rng, vec![4, 6]);
    let targets = Rc::new(vec![0usize, 5, 2, 2]);
    gradcheck(
        "cross-entropy",
        move |tape, ids| tape.cross_entropy_logits(ids[0], targets.clone()),
        &[logits],
        EPS,
        LAYER_TOLERANCE,
    )
}

fn softmax_checks(rng: &mut ChaCha8Rng) -> Vec<GradReport> {
    let x = rand_t(rng, vec![4, 6]);
    let probe = rand_t(rng, vec![4, 6]);
    let r1 = gradcheck(
        "softmax-rows",
        |tape, ids| {
            let y = tape.softmax_rows(ids[0])?;
            let m = tape.mul(y, ids[1])?;
            Ok(tape.sum_all(m))
        },
        &[x, probe],
        EPS,
        LAYER_TOLERANCE,
    );
    let x = rand_t(rng, vec![6, 2]);
    let probe = rand_t(rng, vec![6, 2]);
    let seg = Rc::new(vec![0usize, 1, 0, 2, 1, 2]);
    let r2 = gradcheck(
        "segment-softmax",
        move |tape, ids| {
            let y = tape.segment_softmax(ids[0], seg.clone(), 3)?;
            let m = tape.mul(y, ids[1])?;
            Ok(tape.sum_all(m))
        },
        &[x, probe],
        EPS,
        LAYER_TOLERANCE,
    );
    vec![r1, r2]
}

/// Two actors, one lane, one cooperative trajectory and one path: every
/// module of the network participates.
pub fn micro_scene_for_checks() -> (Scene, CoopAssignment) {
    let horizon = 6;
    let mk = |id: &str, y: f64, vx: f64| Actor {
        id: id.into(),
        history: Trajectory {
            states: (-3..=0)
                .map(|t| ActorState::new(t, Vec2::new(t as f64 * vx, y), true))
                .collect(),
        },
        future_gt: Some(Trajectory {
            states: (1..=horizon as i32)
                .map(|t| ActorState::new(t, Vec2::new(t as f64 * vx, y + 0.1 * t as f64), true))
                .collect(),
        }),
    };
    let scene = Scene {
        id: "check".into(),
        dt: 0.1,
        horizon,
        aoi_id: "a0".into(),
        actors: vec![mk("a0", 0.0, 1.0), mk("a1", 3.0, 1.2), mk("a2", -3.0, 0.8)],
        lanes: vec![LaneSegment {
            id: "l0".into(),
            centerline: (0..6)
                .map(|k| Vec2::new(-4.0 + k as f64 * 2.5, 0.0))
                .collect(),
            predecessors: vec![],
            successors: vec![],
            left: vec![],
            right: vec![],
        }],
    };
    let mut assignment = CoopAssignment::all_none(&scene);
    assignment.roles.insert("a1".into(), CoopRole::FullTrajectory);
    assignment.beta.insert("a1".into(), 1.0);
    assignment.roles.insert("a2".into(), CoopRole::PathOnly);
    assignment.beta.insert("a2".into(), 1.3);
    (scene, assignment)
}

/// Sampled finite-difference check of the whole network plus loss.
pub fn end_to_end_check() -> GradReport {
    let mut cfg = ModelConfig::micro();
    cfg.graph.t_hist = 4;
    let (scene, assignment) = micro_scene_for_checks();
    let aug = apply_assignment(&scene, &assignment).expect("augment");
    let bundle = build_bundle(&aug, &cfg.graph);
    let targets = build_targets(&scene, &aug.predict_set);
    let mut params: ModelParams<f64> = init_params(&cfg, 17);
    // Jitter every tensor: fresh zero biases park pre-activations exactly on
    // the relu kink (zero-padded inputs), where finite differences and the
    // subgradient legitimately disagree.
    {
        let mut rng = SeedMixer::new(18).mix_str("jitter").rng();
        for p in params.params.iter_mut() {
            for v in p.tensor.data.iter_mut() {
                *v += rng.gen_range(-0.05..0.05);
            }
        }
    }
    let inputs: Vec<Tensor<f64>> = params.params.iter().map(|p| p.tensor.clone()).collect();
    let modes = cfg.modes;

    // Pin the winning modes once: the argmin itself is not differentiable,
    // and perturbations must not flip it mid-check.
    let winners = {
        let mut tape = Tape::new();
        let binding = bind_params(&mut tape, &params, false);
        let out = full_forward(&mut tape, &params, &binding, &cfg, &bundle).expect("forward");
        crate::training::select_winners(&tape, &out, &targets, modes)
    };

    gradcheck_sampled(
        "end-to-end-micro",
        move |tape: &mut Tape<f64>, ids: &[NodeId]| {
            let binding = ParamBinding { ids: ids.to_vec() };
            let out = full_forward(tape, &params, &binding, &cfg, &bundle)
                .map_err(|e| match e {
                    crate::network::NetError::Ad(a) => a,
                    other => crate::autodiff::AdError::ShapeMismatch(other.to_string()),
                })?;
            let loss =
                crate::training::loss_with_winners(tape, &out, &targets, modes, winners.clone())?;
            Ok(loss.total)
        },
        &inputs,
        EPS,
        END_TO_END_TOLERANCE,
        2,
        991,
    )
}

/// Deliberately corrupted gradients; the comparison must flag them.
pub fn negative_control_report() -> GradReport {
    crate::autodiff::negative_control()
}

/// The full verification suite; every report must pass.
pub fn gradient_check_suite() -> Vec<GradReport> {
    let mut rng = SeedMixer::new(4242).mix_str("checks").rng();
    let mut reports = vec![
        tcn_conv_check(&mut rng),
        lane_conv_block_check(&mut rng),
        gatv2_check(&mut rng),
        layer_norm_check(&mut rng),
        head_mlp_check(&mut rng),
        smooth_l1_check(&mut rng),
        cross_entropy_check(&mut rng),
    ];
    reports.extend(softmax_checks(&mut rng));
    reports.push(end_to_end_check());
    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_suite_passes() {
        for report in gradient_check_suite() {
            assert!(report.passed(), "{report}");
        }
    }
}
