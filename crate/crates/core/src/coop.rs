//! Cooperative-role sampling and ground-truth augmentation.
//!
//! Per training item, a random fraction theta_gt of eligible actors is marked
//! cooperative; a fraction theta_type of those provide full planned
//! trajectories, the rest only an intended path. Cooperative ground truth is
//! never fed in verbatim: it is sped up or slowed down by a per-actor factor
//! beta, and paths are resampled from the scaled trajectory at fixed 2 m
//! spacing, so path length varies with beta.

use crate::scene::{ActorState, Path, Scene, Trajectory, Vec2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use thiserror::Error;

/// Spacing used when resampling trajectories into paths, in meters.
pub const PATH_INTERVAL: f64 = 2.0;
/// Lower clamp for the speed-scaling factor; zero would collapse the future.
pub const BETA_MIN: f64 = 0.05;
pub const BETA_MAX: f64 = 2.0;

#[derive(Debug, Error)]
pub enum CoopError {
    #[error("trajectory has no valid future state")]
    EmptyFuture,
    #[error("cooperative actor {0:?} lacks a ground-truth future")]
    MissingFuture(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoopRole {
    None,
    /// Intended path transmitted; the actor is still predicted.
    PathOnly,
    /// Complete planned trajectory transmitted; the actor is not predicted.
    FullTrajectory,
}

/// Per-scene cooperative role assignment.
#[derive(Debug, Clone)]
pub struct CoopAssignment {
    /// Role per actor id. Keyed by id so it survives actor reordering.
    pub roles: BTreeMap<String, CoopRole>,
    /// Speed-scaling factor per cooperative actor id.
    pub beta: BTreeMap<String, f64>,
    pub theta_gt_used: f64,
    pub theta_type_used: f64,
}

impl CoopAssignment {
    pub fn all_none(scene: &Scene) -> Self {
        Self {
            roles: scene
                .actors
                .iter()
                .map(|a| (a.id.clone(), CoopRole::None))
                .collect(),
            beta: BTreeMap::new(),
            theta_gt_used: 0.0,
            theta_type_used: 0.0,
        }
    }

    pub fn role(&self, id: &str) -> CoopRole {
        self.roles.get(id).copied().unwrap_or(CoopRole::None)
    }

    pub fn count(&self, role: CoopRole) -> usize {
        self.roles.values().filter(|r| **r == role).count()
    }
}

/// Scene plus sampled cooperative inputs.
#[derive(Debug, Clone)]
pub struct AugmentedScene {
    pub base: Scene,
    pub assignment: CoopAssignment,
    /// Scaled planned trajectories, keyed by actor id (FullTrajectory roles).
    pub coop_trajectories: BTreeMap<String, Trajectory>,
    /// Resampled intended paths, keyed by actor id (PathOnly roles).
    pub coop_paths: BTreeMap<String, Path>,
    /// Indices (into base.actors) of actors the network must predict.
    pub predict_set: Vec<usize>,
}

/// Actors whose ground truth is complete over the horizon. Only those may be
/// made cooperative; fabricating cooperative data across gaps is worse than
/// leaving the actor conventional.
pub fn eligible_actors(scene: &Scene, exclude_aoi: bool) -> Vec<usize> {
    scene
        .actors
        .iter()
        .enumerate()
        .filter(|(_, a)| !(exclude_aoi && a.id == scene.aoi_id))
        .filter(|(_, a)| {
            a.future_gt
                .as_ref()
                .map(|f| f.valid_future_count(scene.horizon) == scene.horizon)
                .unwrap_or(false)
        })
        .map(|(i, _)| i)
        .collect()
}

/// Number of full-trajectory actors among `n_coop` cooperative ones.
pub fn n_traj(n_coop: usize, theta_type: f64) -> usize {
    ((n_coop as f64) * theta_type + 0.5).floor() as usize
}

/// Sample cooperative roles for one training/eval item.
///
/// `round(|eligible| * theta_gt)` actors become cooperative, chosen uniformly
/// without replacement; `floor(N * theta_type + 1/2)` of those provide full
/// trajectories. The AOI is only ever assigned a path role: full-trajectory
/// actors drop out of the prediction set, and the AOI must stay predictable.
pub fn sample_roles(
    scene: &Scene,
    theta_gt: f64,
    theta_type: f64,
    exclude_aoi: bool,
    rng: &mut ChaCha8Rng,
) -> CoopAssignment {
    let mut assignment = CoopAssignment::all_none(scene);
    assignment.theta_gt_used = theta_gt;
    assignment.theta_type_used = theta_type;
    let eligible = eligible_actors(scene, exclude_aoi);
    let n_coop = ((eligible.len() as f64) * theta_gt).round() as usize;
    if n_coop == 0 {
        return assignment;
    }
    let mut pool = eligible;
    pool.shuffle(rng);
    let mut coop: Vec<usize> = pool[..n_coop].to_vec();
    coop.sort_unstable();

    let aoi_idx = scene.aoi_index();
    let mut traj_pool: Vec<usize> = coop.iter().copied().filter(|&i| i != aoi_idx).collect();
    let want_traj = n_traj(coop.len(), theta_type).min(traj_pool.len());
    traj_pool.shuffle(rng);
    let traj_set: Vec<usize> = traj_pool[..want_traj].to_vec();

    for &i in &coop {
        let role = if traj_set.contains(&i) {
            CoopRole::FullTrajectory
        } else {
            CoopRole::PathOnly
        };
        assignment.roles.insert(scene.actors[i].id.clone(), role);
    }
    assignment
}

/// Draw per-actor beta factors for every cooperative actor in `assignment`.
pub fn sample_betas(assignment: &mut CoopAssignment, rng: &mut ChaCha8Rng) {
    let coop_ids: Vec<String> = assignment
        .roles
        .iter()
        .filter(|(_, r)| **r != CoopRole::None)
        .map(|(id, _)| id.clone())
        .collect();
    for id in coop_ids {
        let beta = rng.gen_range(BETA_MIN..=BETA_MAX);
        assignment.beta.insert(id, beta);
    }
}

/// Set a single fixed beta for every cooperative actor (evaluation).
pub fn fixed_betas(assignment: &mut CoopAssignment, beta: f64) {
    let coop_ids: Vec<String> = assignment
        .roles
        .iter()
        .filter(|(_, r)| **r != CoopRole::None)
        .map(|(id, _)| id.clone())
        .collect();
    for id in coop_ids {
        assignment.beta.insert(id, beta);
    }
}

/// Speed-scale a ground-truth future by `beta`.
///
/// Output step j carries the position at continuous time beta*j, read off the
/// polyline through [anchor, future...] by linear interpolation; times past
/// the last state extrapolate along the final non-degenerate segment at that
/// segment's per-step displacement.
pub fn scale_trajectory(
    future: &Trajectory,
    anchor: &ActorState,
    beta: f64,
) -> Result<Trajectory, CoopError> {
    assert!(beta > 0.0 && beta <= BETA_MAX, "beta out of range: {beta}");
    let pts: Vec<(f64, Vec2)> = std::iter::once((0.0, anchor.pos))
        .chain(future.valid_states().map(|s| (s.t as f64, s.pos)))
        .collect();
    if pts.len() < 2 {
        return Err(CoopError::EmptyFuture);
    }
    let horizon = future.states.last().map(|s| s.t).expect("nonempty future");
    // Per-step displacement of the last non-degenerate segment, for
    // extrapolation beyond the recorded future.
    let mut ext_dir = Vec2::default();
    for w in pts.windows(2).rev() {
        let dt = w[1].0 - w[0].0;
        let d = w[1].1.sub(w[0].1);
        if d.norm() >= 1e-12 && dt > 0.0 {
            ext_dir = d.scale(1.0 / dt);
            break;
        }
    }
    let last = *pts.last().unwrap();
    let sample = |time: f64| -> Vec2 {
        if time >= last.0 {
            return last.1.add(ext_dir.scale(time - last.0));
        }
        let mut k = 0;
        while k + 1 < pts.len() && pts[k + 1].0 < time {
            k += 1;
        }
        // pts[k].0 <= time <= pts[k+1].0 up to fp noise
        let (t0, p0) = pts[k];
        let (t1, p1) = pts[k + 1];
        if t1 <= t0 || time <= t0 {
            return p0;
        }
        if time >= t1 {
            return p1; // exact breakpoint: no interpolation round-off
        }
        let w = (time - t0) / (t1 - t0);
        p0.add(p1.sub(p0).scale(w))
    };
    let states = (1..=horizon)
        .map(|j| ActorState::new(j, sample(beta * j as f64), true))
        .collect();
    Ok(Trajectory { states })
}

/// Resample a scaled future into a timeless path with fixed point spacing.
///
/// Points are placed by marching along the polyline anchor -> states so that
/// each point sits exactly `interval` meters (euclidean) from the previous
/// one; the anchor itself is excluded. When the remaining tail cannot reach
/// the spacing, the polyline endpoint becomes the final point. Total arc
/// length below 1e-9 yields an empty path.
pub fn trajectory_to_path(scaled_future: &Trajectory, anchor: &ActorState, interval: f64) -> Path {
    let pts: Vec<Vec2> = std::iter::once(anchor.pos)
        .chain(scaled_future.valid_states().map(|s| s.pos))
        .collect();
    let total: f64 = pts.windows(2).map(|w| w[0].dist(w[1])).sum();
    if total < 1e-9 {
        return Path::default();
    }
    let mut out = Vec::new();
    let mut prev = pts[0];
    let mut seg = 0usize;
    let mut u = 0.0f64;
    loop {
        // March forward from (seg, u) to the first polyline point exactly
        // `interval` away from `prev` (the exit of the circle around it).
        let mut found = None;
        let mut s = seg;
        let mut low = u;
        while s + 1 < pts.len() {
            let a = pts[s];
            let b = pts[s + 1];
            if b.dist(prev) >= interval - 1e-12 {
                let d = b.sub(a);
                let qa = d.x * d.x + d.y * d.y;
                if qa < 1e-18 {
                    s += 1;
                    low = 0.0;
                    continue;
                }
                let ap = a.sub(prev);
                let qb = 2.0 * (ap.x * d.x + ap.y * d.y);
                let qc = ap.x * ap.x + ap.y * ap.y - interval * interval;
                let disc = (qb * qb - 4.0 * qa * qc).max(0.0);
                let root = (-qb + disc.sqrt()) / (2.0 * qa);
                found = Some((s, root.clamp(low, 1.0)));
                break;
            }
            s += 1;
            low = 0.0;
        }
        match found {
            Some((s, r)) => {
                let p = pts[s].add(pts[s + 1].sub(pts[s]).scale(r));
                out.push(p);
                prev = p;
                seg = s;
                u = r;
            }
            None => {
                // Tail shorter than the spacing: close with the endpoint.
                let end = *pts.last().unwrap();
                if prev.dist(end) > 1e-9 {
                    out.push(end);
                }
                break;
            }
        }
    }
    Path::new(out)
}

/// Materialize cooperative inputs for a sampled assignment.
pub fn apply_assignment(
    scene: &Scene,
    assignment: &CoopAssignment,
) -> Result<AugmentedScene, CoopError> {
    let mut coop_trajectories = BTreeMap::new();
    let mut coop_paths = BTreeMap::new();
    let mut predict_set = Vec::new();
    for (i, actor) in scene.actors.iter().enumerate() {
        let role = assignment.role(&actor.id);
        if role != CoopRole::FullTrajectory {
            predict_set.push(i);
        }
        if role == CoopRole::None {
            continue;
        }
        let future = actor
            .future_gt
            .as_ref()
            .ok_or_else(|| CoopError::MissingFuture(actor.id.clone()))?;
        let beta = assignment.beta.get(&actor.id).copied().unwrap_or(1.0);
        let scaled = scale_trajectory(future, actor.current(), beta)
            .map_err(|_| CoopError::MissingFuture(actor.id.clone()))?;
        match role {
            CoopRole::FullTrajectory => {
                coop_trajectories.insert(actor.id.clone(), scaled);
            }
            CoopRole::PathOnly => {
                let path = trajectory_to_path(&scaled, actor.current(), PATH_INTERVAL);
                coop_paths.insert(actor.id.clone(), path);
            }
            CoopRole::None => unreachable!(),
        }
    }
    Ok(AugmentedScene {
        base: scene.clone(),
        assignment: assignment.clone(),
        coop_trajectories,
        coop_paths,
        predict_set,
    })
}
