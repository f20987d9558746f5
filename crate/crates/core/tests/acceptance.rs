//! Acceptance suite, fast criteria (1-7). Each test prints one PASS line;
//! the end-to-end training criteria (8-10) live in the CLI crate's
//! acceptance_e2e test.

use coop_predict_core::autodiff::{NodeId, Tape, Tensor};
use coop_predict_core::checks;
use coop_predict_core::coop::{
    n_traj, sample_roles, scale_trajectory, trajectory_to_path, CoopRole,
};
use coop_predict_core::graph::{
    build_lane_graph, build_path_graph, ConnectionType, GraphConfig,
};
use coop_predict_core::metrics::{min_ade, min_fde, miss_rate, MISS_THRESHOLD};
use coop_predict_core::network::{gatv2_layer, lane_conv_aggregate, FusionLayerParams};
use coop_predict_core::scene::{
    Actor, ActorState, LaneSegment, Path, Scene, Trajectory, Vec2,
};
use coop_predict_core::training::{train, TrainConfig, TrainOutput};
use coop_predict_core::util::SeedMixer;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let reports = checks::gradient_check_suite();
    for r in &reports {
        assert!(r.passed(), "{r}");
    }
    let control = checks::negative_control_report();
    assert!(!control.passed(), "harness must catch corrupted gradients");
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "suite took {elapsed:.1}s, budget 120s");
    println!(
        "criterion 1 PASS: {} layer checks < 1e-4 rel err (worst {:.2e}), negative control caught, {:.1}s",
        reports.len(),
        reports
            .iter()
            .map(|r| r.max_rel_err)
            .fold(0.0f64, f64::max),
        elapsed
    );
}

#[test]
fn criterion_2_laneconv_dense_oracle() {
    let mut rng = SeedMixer::new(2).mix_str("acc2").rng();
    let types = [
        ConnectionType::SelfLoop,
        ConnectionType::Pred,
        ConnectionType::Succ,
        ConnectionType::Left,
        ConnectionType::Right,
        ConnectionType::Dilated(2),
        ConnectionType::Dilated(4),
        ConnectionType::Dilated(8),
        ConnectionType::Dilated(16),
        ConnectionType::Dilated(32),
    ];
    let mut worst = 0.0f64;
    for round in 0..50 {
        let n = rng.gen_range(1..=20usize);
        let d = 6;
        let mut edges = coop_predict_core::graph::TypedEdges::default();
        let mut adj: Vec<Vec<f64>> = Vec::new();
        for &c in &types {
            let mut pairs = Vec::new();
            let mut a = vec![0.0; n * n];
            if c == ConnectionType::SelfLoop {
                for i in 0..n {
                    pairs.push((i, i));
                    a[i * n + i] = 1.0;
                }
            } else {
                for _ in 0..rng.gen_range(0..2 * n) {
                    let s = rng.gen_range(0..n);
                    let t = rng.gen_range(0..n);
                    if a[s * n + t] == 0.0 {
                        pairs.push((s, t));
                        a[s * n + t] = 1.0;
                    }
                }
            }
            edges.sets.push((c, pairs));
            adj.push(a);
        }
        let xs: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ws: Vec<Vec<f64>> = (0..types.len())
            .map(|_| (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64s(vec![n, d], &xs), false);
        let weights: Vec<(ConnectionType, NodeId)> = types
            .iter()
            .zip(ws.iter())
            .map(|(&c, w)| (c, tape.leaf(Tensor::from_f64s(vec![d, d], w), false)))
            .collect();
        let agg = lane_conv_aggregate(&mut tape, x, &edges, &weights).unwrap();

        let mut expect = vec![0.0f64; n * d];
        for (ci, a) in adj.iter().enumerate() {
            let w = &ws[ci];
            let mut xw = vec![0.0; n * d];
            for i in 0..n {
                for k in 0..d {
                    for j in 0..d {
                        xw[i * d + j] += xs[i * d + k] * w[k * d + j];
                    }
                }
            }
            for s in 0..n {
                for t in 0..n {
                    if a[s * n + t] != 0.0 {
                        for j in 0..d {
                            expect[t * d + j] += xw[s * d + j];
                        }
                    }
                }
            }
        }
        for (got, want) in tape.value(agg).data.iter().zip(expect.iter()) {
            let err = (got - want).abs();
            worst = worst.max(err);
            assert!(err <= 1e-6, "round {round}: {got} vs {want}");
        }
    }
    println!("criterion 2 PASS: 50 random graphs match the dense sum (worst abs err {worst:.2e})");
}

fn lane_walk_oracle(lanes: &[LaneSegment]) -> (usize, BTreeSet<(usize, usize)>, Vec<Vec<usize>>) {
    // Independent reconstruction: node ids are assigned lane by lane,
    // segment by segment, exactly as documented for the builder.
    let mut first_node = Vec::new();
    let mut count = 0usize;
    let idx: BTreeMap<&str, usize> = lanes
        .iter()
        .enumerate()
        .map(|(i, l)| (l.id.as_str(), i))
        .collect();
    for l in lanes {
        first_node.push(count);
        count += l.centerline.len() - 1;
    }
    let mut next = BTreeSet::new();
    let mut fwd = vec![Vec::new(); count];
    let mut add = |from: usize, to: usize, fwd: &mut Vec<Vec<usize>>| {
        if next.insert((from, to)) {
            fwd[from].push(to);
        }
    };
    for (li, l) in lanes.iter().enumerate() {
        let segs = l.centerline.len() - 1;
        for k in 0..segs.saturating_sub(1) {
            add(first_node[li] + k, first_node[li] + k + 1, &mut fwd);
        }
        for s in &l.successors {
            let sj = idx[s.as_str()];
            let s_segs = lanes[sj].centerline.len() - 1;
            if segs > 0 && s_segs > 0 {
                add(first_node[li] + segs - 1, first_node[sj], &mut fwd);
            }
        }
        for p in &l.predecessors {
            let pj = idx[p.as_str()];
            let p_segs = lanes[pj].centerline.len() - 1;
            if segs > 0 && p_segs > 0 {
                add(first_node[pj] + p_segs - 1, first_node[li], &mut fwd);
            }
        }
    }
    (count, next, fwd)
}

fn walk_set(fwd: &[Vec<usize>], start: usize, hops: usize) -> BTreeSet<usize> {
    let mut frontier = BTreeSet::from([start]);
    for _ in 0..hops {
        let mut nx = BTreeSet::new();
        for &x in &frontier {
            for &y in &fwd[x] {
                nx.insert(y);
            }
        }
        frontier = nx;
        if frontier.is_empty() {
            break;
        }
    }
    frontier
}

#[test]
fn criterion_3_dilated_edges_match_bfs_oracle() {
    let mut rng = SeedMixer::new(3).mix_str("acc3").rng();
    let cfg = GraphConfig::default();
    let mut checked = 0;
    // 60 random lane maps
    for _ in 0..60 {
        let n_lanes = rng.gen_range(1..=4usize);
        let mut lanes: Vec<LaneSegment> = (0..n_lanes)
            .map(|i| LaneSegment {
                id: format!("l{i}"),
                centerline: {
                    let len = rng.gen_range(2..=7usize);
                    (0..len)
                        .map(|k| Vec2::new(i as f64 * 40.0 + k as f64 * 2.5, 0.0))
                        .collect()
                },
                predecessors: vec![],
                successors: vec![],
                left: vec![],
                right: vec![],
            })
            .collect();
        for i in 0..n_lanes {
            for j in 0..n_lanes {
                if i != j && rng.gen_bool(0.3) {
                    let jid = format!("l{j}");
                    lanes[i].successors.push(jid);
                }
            }
        }
        let (nodes, edges) = build_lane_graph(&lanes, &cfg.lane_dilations);
        let (count, _, fwd) = lane_walk_oracle(&lanes);
        assert_eq!(nodes.len(), count);
        for &d in &[2usize, 4, 8, 16, 32] {
            let mut expect = BTreeSet::new();
            for start in 0..count {
                for t in walk_set(&fwd, start, d) {
                    expect.insert((start, t));
                    expect.insert((t, start));
                }
            }
            let got: BTreeSet<(usize, usize)> = edges
                .pairs(ConnectionType::Dilated(d))
                .iter()
                .copied()
                .collect();
            assert_eq!(got, expect, "lane map dilation {d}");
        }
        checked += 1;
    }
    // 40 random path graphs
    for round in 0..40 {
        let mut paths = BTreeMap::new();
        let mut index = BTreeMap::new();
        let n_paths = rng.gen_range(1..=3usize);
        let mut lens = Vec::new();
        for p in 0..n_paths {
            let len = rng.gen_range(1..=12usize);
            lens.push(len);
            paths.insert(
                format!("a{p}"),
                Path::new(
                    (0..len)
                        .map(|k| Vec2::new(k as f64 * 2.0, p as f64 * 30.0))
                        .collect(),
                ),
            );
            index.insert(format!("a{p}"), p);
        }
        let (nodes, edges) = build_path_graph(&paths, &index, &cfg.path_dilations);
        // chain oracle per path
        let mut fwd: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
        let mut base = 0;
        for len in &lens {
            for k in 0..len.saturating_sub(1) {
                fwd[base + k].push(base + k + 1);
            }
            base += len;
        }
        for &d in &[2usize, 4, 8] {
            let mut expect = BTreeSet::new();
            for start in 0..nodes.len() {
                for t in walk_set(&fwd, start, d) {
                    expect.insert((start, t));
                    expect.insert((t, start));
                }
            }
            let got: BTreeSet<(usize, usize)> = edges
                .pairs(ConnectionType::Dilated(d))
                .iter()
                .copied()
                .collect();
            assert_eq!(got, expect, "path graph {round} dilation {d}");
        }
        checked += 1;
    }
    println!("criterion 3 PASS: dilated edges equal exact-k-hop walk sets on {checked} random graphs");
}

#[test]
fn criterion_4_attention_normalization() {
    let mut rng = SeedMixer::new(4).mix_str("acc4").rng();
    let d = 8;
    let heads = 4;
    let mut worst = 0.0f64;
    let mut graphs = 0;
    while graphs < 50 {
        let n_src = rng.gen_range(1..8);
        let n_dst = rng.gen_range(1..8);
        let mut pairs = Vec::new();
        for s in 0..n_src {
            for t in 0..n_dst {
                if rng.gen_bool(0.5) {
                    pairs.push((s, t));
                }
            }
        }
        if pairs.is_empty() {
            continue;
        }
        graphs += 1;
        let mut tape = Tape::<f64>::new();
        let mk = |tape: &mut Tape<f64>, r: usize, c: usize, rng: &mut ChaCha8Rng| {
            let data: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            tape.leaf(Tensor::from_f64s(vec![r, c], &data), false)
        };
        let x_dst = mk(&mut tape, n_dst, d, &mut rng);
        let x_src = mk(&mut tape, n_src, d, &mut rng);
        let p = FusionLayerParams {
            w_src: mk(&mut tape, d, d, &mut rng),
            w_dst: mk(&mut tape, d, d, &mut rng),
            w_edge: mk(&mut tape, 3, d, &mut rng),
            bias: mk(&mut tape, 1, d, &mut rng),
            attn: mk(&mut tape, 1, d, &mut rng),
            w_out: mk(&mut tape, d, d, &mut rng),
            b_out: mk(&mut tape, 1, d, &mut rng),
            ln_g: mk(&mut tape, 1, d, &mut rng),
            ln_b: mk(&mut tape, 1, d, &mut rng),
        };
        // reshape vectors to [d]
        let p = FusionLayerParams {
            bias: tape.reshape(p.bias, vec![d]).unwrap(),
            b_out: tape.reshape(p.b_out, vec![d]).unwrap(),
            ln_g: tape.reshape(p.ln_g, vec![d]).unwrap(),
            ln_b: tape.reshape(p.ln_b, vec![d]).unwrap(),
            ..p
        };
        let fdata: Vec<f64> = (0..pairs.len() * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let feats = Tensor::from_f64s(vec![pairs.len(), 3], &fdata);
        let (_, alpha) = gatv2_layer(&mut tape, x_dst, x_src, &pairs, &feats, heads, &p).unwrap();
        let a = tape.value(alpha.unwrap());
        for t in 0..n_dst {
            for h in 0..heads {
                let sum: f64 = pairs
                    .iter()
                    .enumerate()
                    .filter(|(_, pr)| pr.1 == t)
                    .map(|(e, _)| a.data[e * heads + h])
                    .sum();
                if pairs.iter().any(|pr| pr.1 == t) {
                    worst = worst.max((sum - 1.0).abs());
                    assert!((sum - 1.0).abs() <= 1e-6, "dst {t} head {h}: {sum}");
                }
            }
        }
    }
    println!("criterion 4 PASS: attention weights sum to 1 per destination/head on 50 graphs (worst dev {worst:.2e})");
}

#[test]
fn criterion_5_augmentation() {
    // beta = 1 identity, exact
    let anchor = ActorState::new(0, Vec2::new(0.3, -0.7), true);
    let fut = Trajectory {
        states: (1..=12)
            .map(|t| ActorState::new(t, Vec2::new(t as f64 * 0.9, (t as f64).sin()), true))
            .collect(),
    };
    let scaled = scale_trajectory(&fut, &anchor, 1.0).unwrap();
    assert_eq!(scaled, fut, "beta=1 must be the identity");

    // 2 m resampling spacing
    let mut rng = SeedMixer::new(5).mix_str("acc5").rng();
    for _ in 0..200 {
        let n = rng.gen_range(2..15usize);
        let mut pts = Vec::new();
        let mut p = Vec2::new(0.0, 0.0);
        for t in 1..=n as i32 {
            p = p.add(Vec2::new(rng.gen_range(0.1..1.8), rng.gen_range(-0.5..0.5)));
            pts.push(ActorState::new(t, p, true));
        }
        let fut = Trajectory { states: pts };
        let path = trajectory_to_path(&fut, &anchor, 2.0);
        assert!(path.spacing_ok(2.0, 1e-6), "spacing violated");
    }

    // N_traj formula, exhaustive for N <= 10 on a 0.01 grid
    for n in 0..=10usize {
        let scene = exhaustive_scene(n + 1);
        for step in 0..=100usize {
            let theta_type = step as f64 / 100.0;
            let mut rng = SeedMixer::new(99)
                .mix_u64(n as u64)
                .mix_u64(step as u64)
                .rng();
            let a = sample_roles(&scene, 1.0, theta_type, true, &mut rng);
            let coop = a.count(CoopRole::PathOnly) + a.count(CoopRole::FullTrajectory);
            assert_eq!(coop, n, "all eligible actors cooperative at theta_gt=1");
            assert_eq!(
                a.count(CoopRole::FullTrajectory),
                n_traj(n, theta_type),
                "N={n} theta_type={theta_type}"
            );
        }
    }
    println!("criterion 5 PASS: beta=1 identity exact, 2 m spacing within 1e-6, N_traj formula exhaustive (N<=10, 0.01 grid)");
}

fn exhaustive_scene(n_actors: usize) -> Scene {
    let horizon = 4;
    let actors = (0..n_actors)
        .map(|i| Actor {
            id: format!("a{i}"),
            history: Trajectory {
                states: vec![
                    ActorState::new(-1, Vec2::new(-1.0, i as f64), true),
                    ActorState::new(0, Vec2::new(0.0, i as f64), true),
                ],
            },
            future_gt: Some(Trajectory {
                states: (1..=horizon as i32)
                    .map(|t| ActorState::new(t, Vec2::new(t as f64, i as f64), true))
                    .collect(),
            }),
        })
        .collect();
    Scene {
        id: "x".into(),
        dt: 0.1,
        horizon,
        aoi_id: "a0".into(),
        actors,
        lanes: vec![],
    }
}

#[test]
fn criterion_6_metric_oracles() {
    let mut rng = SeedMixer::new(6).mix_str("acc6").rng();
    for round in 0..1000 {
        let h = rng.gen_range(1..10usize);
        let m = rng.gen_range(1..7usize);
        let k = rng.gen_range(1..=m);
        let modes: Vec<Vec<Vec2>> = (0..m)
            .map(|_| {
                (0..h)
                    .map(|_| Vec2::new(rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0)))
                    .collect()
            })
            .collect();
        let probs: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..1.0)).collect();
        let gt = Trajectory {
            states: (1..=h as i32)
                .map(|t| {
                    ActorState::new(
                        t,
                        Vec2::new(rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0)),
                        rng.gen_bool(0.8) || t == h as i32,
                    )
                })
                .collect(),
        };
        // brute force
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
        assert_eq!(
            min_fde(&modes, &probs, &gt, k).unwrap(),
            bf_fde,
            "round {round}"
        );
        assert_eq!(
            min_ade(&modes, &probs, &gt, k).unwrap(),
            bf_ade,
            "round {round}"
        );
    }
    assert_eq!(miss_rate(&[2.0], MISS_THRESHOLD).unwrap(), 0.0);
    assert_eq!(miss_rate(&[2.0 + 1e-9], MISS_THRESHOLD).unwrap(), 1.0);
    println!("criterion 6 PASS: minADE/minFDE/MR equal brute force on 1000 random pairs; 2.0 m exactly is a hit");
}

#[test]
fn criterion_7_overfit_micro_scene() {
    let cfg = coop_predict_core::network::ModelConfig::desk();
    let scene = overfit_scene(cfg.horizon);
    let dataset = coop_predict_core::scene::Dataset {
        train: vec![scene],
        val: vec![],
    };
    let tcfg = TrainConfig {
        iterations: 500,
        batch_size: 16,
        max_lr: 5e-3,
        eval_every: 0,
        checkpoint_every: 0,
        seed: 7,
        ..TrainConfig::desk()
    };
    let out: TrainOutput<f32> = train(&dataset, &cfg, &tcfg, None, None).unwrap();
    let min_loss = out
        .curve
        .iter()
        .map(|c| c.total)
        .fold(f64::INFINITY, f64::min);
    let final_loss = out.curve.last().unwrap().total;
    assert!(
        final_loss < 0.05,
        "single-batch overfit must reach < 0.05 within 500 iterations (final {final_loss:.4}, best {min_loss:.4})"
    );
    println!(
        "criterion 7 PASS: micro-scene overfit, total loss {final_loss:.4} after 500 iterations (best {min_loss:.4})"
    );
}

fn overfit_scene(horizon: usize) -> Scene {
    let mk = |id: &str, y: f64, vx: f64| Actor {
        id: id.into(),
        history: Trajectory {
            states: (-19..=0)
                .map(|t| ActorState::new(t, Vec2::new(t as f64 * vx * 0.1, y), true))
                .collect(),
        },
        future_gt: Some(Trajectory {
            states: (1..=horizon as i32)
                .map(|t| {
                    ActorState::new(
                        t,
                        Vec2::new(t as f64 * vx * 0.1, y + 0.02 * t as f64),
                        true,
                    )
                })
                .collect(),
        }),
    };
    Scene {
        id: "overfit".into(),
        dt: 0.1,
        horizon,
        aoi_id: "a0".into(),
        actors: vec![mk("a0", 0.0, 8.0), mk("a1", 3.5, 6.0)],
        lanes: vec![LaneSegment {
            id: "l0".into(),
            centerline: (0..14)
                .map(|k| Vec2::new(-5.0 + k as f64 * 2.5, 0.0))
                .collect(),
            predecessors: vec![],
            successors: vec![],
            left: vec![],
            right: vec![],
        }],
    }
}
