//! Scene data model: actors with timestamped states, lane map, file format.
//!
//! Time lives on an integer grid; `t = 0` is the current step, negative
//! indices are history, positive indices are future. The step length in
//! seconds (`dt`) is stored once per scene. Missing observations are kept as
//! states with `valid = false` rather than dropped, so consumers always see
//! fixed-length sequences with availability flags.

use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::path::{Path as FsPath, PathBuf};
use thiserror::Error;

/// Default step length in seconds.
pub const DEFAULT_DT: f64 = 0.1;
/// Default number of historic steps (t in (-T_HIST, 0]).
pub const DEFAULT_T_HIST: usize = 20;
/// Default prediction horizon in steps.
pub const DEFAULT_HORIZON: usize = 30;

#[derive(Debug, Error)]
pub enum SceneError {
    /// Document does not match the scene schema (missing field, wrong type).
    #[error("schema error: {0}")]
    Schema(String),
    /// An id reference does not resolve (lane neighbor, aoi).
    #[error("reference error: {0}")]
    Reference(String),
    /// A value violates an invariant (time order, ranges, finiteness).
    #[error("value error: {0}")]
    Value(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type SceneResult<T> = Result<T, SceneError>;

/// 2-d position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }

    pub fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }

    pub fn scale(self, f: f64) -> Vec2 {
        Vec2::new(self.x * f, self.y * f)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, o: Vec2) -> f64 {
        self.sub(o).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// One observation of an actor on the time grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActorState {
    pub t: i32,
    pub pos: Vec2,
    /// When false the position carries no information and is ignored.
    pub valid: bool,
}

impl ActorState {
    pub fn new(t: i32, pos: Vec2, valid: bool) -> Self {
        Self { t, pos, valid }
    }
}

/// Ordered state sequence with strictly increasing time indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub states: Vec<ActorState>,
}

impl Trajectory {
    pub fn new(states: Vec<ActorState>) -> SceneResult<Self> {
        let traj = Self { states };
        traj.validate()?;
        Ok(traj)
    }

    pub fn validate(&self) -> SceneResult<()> {
        for w in self.states.windows(2) {
            if w[1].t <= w[0].t {
                return Err(SceneError::Value(format!(
                    "time indices not strictly increasing: {} then {}",
                    w[0].t, w[1].t
                )));
            }
        }
        for s in &self.states {
            if s.valid && !s.pos.is_finite() {
                return Err(SceneError::Value(format!(
                    "non-finite position at t={}",
                    s.t
                )));
            }
        }
        if !self.states.iter().any(|s| s.valid) {
            return Err(SceneError::Value("trajectory has no valid state".into()));
        }
        Ok(())
    }

    pub fn state_at(&self, t: i32) -> Option<&ActorState> {
        self.states.iter().find(|s| s.t == t)
    }

    pub fn valid_states(&self) -> impl Iterator<Item = &ActorState> {
        self.states.iter().filter(|s| s.valid)
    }

    /// Number of valid states with t in [1, horizon].
    pub fn valid_future_count(&self, horizon: usize) -> usize {
        self.states
            .iter()
            .filter(|s| s.valid && s.t >= 1 && s.t <= horizon as i32)
            .count()
    }

    pub fn last_valid(&self) -> Option<&ActorState> {
        self.states.iter().rev().find(|s| s.valid)
    }
}

/// Timeless sequence of positions, nominally spaced every 2 m.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Path {
    pub points: Vec<Vec2>,
}

impl Path {
    pub fn new(points: Vec<Vec2>) -> Self {
        Self { points }
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// True when all consecutive gaps equal `interval` within `tol`, except
    /// possibly a shorter final segment.
    pub fn spacing_ok(&self, interval: f64, tol: f64) -> bool {
        if self.points.len() < 2 {
            return true;
        }
        let n = self.points.len() - 1;
        for (i, w) in self.points.windows(2).enumerate() {
            let d = w[0].dist(w[1]);
            if i + 1 < n {
                if (d - interval).abs() > tol {
                    return false;
                }
            } else if d > interval + tol {
                return false;
            }
        }
        true
    }
}

/// A mapped lane piece: centerline polyline plus topological neighbors.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneSegment {
    pub id: String,
    pub centerline: Vec<Vec2>,
    pub predecessors: Vec<String>,
    pub successors: Vec<String>,
    pub left: Vec<String>,
    pub right: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Actor {
    pub id: String,
    /// States with t <= 0; must contain a valid state at t = 0.
    pub history: Trajectory,
    /// States with t >= 1. Present in training/eval data, absent at inference.
    pub future_gt: Option<Trajectory>,
}

impl Actor {
    pub fn current(&self) -> &ActorState {
        self.history
            .state_at(0)
            .expect("validated actor has a state at t=0")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub dt: f64,
    pub horizon: usize,
    pub aoi_id: String,
    pub actors: Vec<Actor>,
    pub lanes: Vec<LaneSegment>,
}

impl Scene {
    pub fn actor(&self, id: &str) -> Option<&Actor> {
        self.actors.iter().find(|a| a.id == id)
    }

    pub fn aoi(&self) -> &Actor {
        self.actor(&self.aoi_id).expect("validated aoi id")
    }

    pub fn aoi_index(&self) -> usize {
        self.actors
            .iter()
            .position(|a| a.id == self.aoi_id)
            .expect("validated aoi id")
    }

    pub fn validate(&self) -> SceneResult<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(SceneError::Value(format!("dt must be positive, got {}", self.dt)));
        }
        if self.horizon < 1 {
            return Err(SceneError::Value("horizon must be >= 1".into()));
        }
        if self.actors.is_empty() {
            return Err(SceneError::Value("scene has no actors".into()));
        }
        let mut actor_ids = HashSet::new();
        for a in &self.actors {
            if !actor_ids.insert(a.id.as_str()) {
                return Err(SceneError::Value(format!("duplicate actor id {:?}", a.id)));
            }
            a.history.validate()?;
            match a.history.state_at(0) {
                Some(s) if s.valid => {}
                _ => {
                    return Err(SceneError::Value(format!(
                        "actor {:?} has no valid state at t=0",
                        a.id
                    )))
                }
            }
            if a.history.states.iter().any(|s| s.t > 0) {
                return Err(SceneError::Value(format!(
                    "actor {:?} history contains future indices",
                    a.id
                )));
            }
            if let Some(fut) = &a.future_gt {
                fut.validate()?;
                if fut.states.iter().any(|s| s.t < 1) {
                    return Err(SceneError::Value(format!(
                        "actor {:?} future contains non-positive indices",
                        a.id
                    )));
                }
                if fut.states.iter().any(|s| s.t > self.horizon as i32) {
                    return Err(SceneError::Value(format!(
                        "actor {:?} future extends beyond horizon {}",
                        a.id, self.horizon
                    )));
                }
            }
        }
        if !actor_ids.contains(self.aoi_id.as_str()) {
            return Err(SceneError::Reference(format!(
                "aoi id {:?} not among actors",
                self.aoi_id
            )));
        }
        let lane_ids: HashSet<&str> = self.lanes.iter().map(|l| l.id.as_str()).collect();
        if lane_ids.len() != self.lanes.len() {
            return Err(SceneError::Value("duplicate lane id".into()));
        }
        for lane in &self.lanes {
            if lane.centerline.len() < 2 {
                return Err(SceneError::Value(format!(
                    "lane {:?} centerline has fewer than 2 points",
                    lane.id
                )));
            }
            if lane.centerline.iter().any(|p| !p.is_finite()) {
                return Err(SceneError::Value(format!(
                    "lane {:?} has non-finite centerline point",
                    lane.id
                )));
            }
            for (kind, ids) in [
                ("pred", &lane.predecessors),
                ("succ", &lane.successors),
                ("left", &lane.left),
                ("right", &lane.right),
            ] {
                for id in ids {
                    if !lane_ids.contains(id.as_str()) {
                        return Err(SceneError::Reference(format!(
                            "lane {:?} {} reference {:?} does not resolve",
                            lane.id, kind, id
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Evaluation-time cooperative configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Fraction of eligible non-AOI actors made cooperative.
    pub theta_gt: f64,
    /// Fraction of cooperative actors providing full trajectories.
    pub theta_type: f64,
    /// Whether the AOI itself provides a cooperative path.
    pub theta_aoi: bool,
    /// Speed-scaling factor applied to cooperative ground truth.
    pub beta: f64,
    /// Top-K restriction for metrics.
    pub k: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            theta_gt: 0.0,
            theta_type: 0.0,
            theta_aoi: false,
            beta: 1.0,
            k: 6,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self, modes: usize) -> SceneResult<()> {
        if !(0.0..=1.0).contains(&self.theta_gt) {
            return Err(SceneError::Value("theta_gt must be in [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.theta_type) {
            return Err(SceneError::Value("theta_type must be in [0,1]".into()));
        }
        if !(0.0..=2.0).contains(&self.beta) || self.beta <= 0.0 {
            return Err(SceneError::Value("beta must be in (0,2]".into()));
        }
        if self.k < 1 || self.k > modes {
            return Err(SceneError::Value(format!(
                "k must be in [1,{}], got {}",
                modes, self.k
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateFile {
    t: i32,
    x: f64,
    y: f64,
    valid: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ActorFile {
    id: String,
    states: Vec<StateFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LaneFile {
    id: String,
    centerline: Vec<[f64; 2]>,
    #[serde(default)]
    pred: Vec<String>,
    #[serde(default)]
    succ: Vec<String>,
    #[serde(default)]
    left: Vec<String>,
    #[serde(default)]
    right: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    id: String,
    dt: f64,
    horizon: usize,
    aoi_id: String,
    actors: Vec<ActorFile>,
    lanes: Vec<LaneFile>,
}

/// Parse and validate a scene document.
pub fn parse_scene(document: &str) -> SceneResult<Scene> {
    let file: SceneFile =
        serde_json::from_str(document).map_err(|e| SceneError::Schema(e.to_string()))?;
    let mut actors = Vec::with_capacity(file.actors.len());
    for a in file.actors {
        let mut history = Vec::new();
        let mut future = Vec::new();
        for s in a.states {
            let state = ActorState::new(s.t, Vec2::new(s.x, s.y), s.valid);
            if s.t <= 0 {
                history.push(state);
            } else {
                future.push(state);
            }
        }
        let history = Trajectory { states: history };
        let future_gt = if future.is_empty() {
            None
        } else {
            Some(Trajectory { states: future })
        };
        actors.push(Actor {
            id: a.id,
            history,
            future_gt,
        });
    }
    let lanes = file
        .lanes
        .into_iter()
        .map(|l| LaneSegment {
            id: l.id,
            centerline: l.centerline.iter().map(|p| Vec2::new(p[0], p[1])).collect(),
            predecessors: l.pred,
            successors: l.succ,
            left: l.left,
            right: l.right,
        })
        .collect();
    let scene = Scene {
        id: file.id,
        dt: file.dt,
        horizon: file.horizon,
        aoi_id: file.aoi_id,
        actors,
        lanes,
    };
    scene.validate()?;
    Ok(scene)
}

/// Serialize a scene; the result parses back to an equal value.
pub fn serialize_scene(scene: &Scene) -> SceneResult<String> {
    scene.validate()?;
    let file = SceneFile {
        id: scene.id.clone(),
        dt: scene.dt,
        horizon: scene.horizon,
        aoi_id: scene.aoi_id.clone(),
        actors: scene
            .actors
            .iter()
            .map(|a| {
                let mut states: Vec<StateFile> = a
                    .history
                    .states
                    .iter()
                    .chain(a.future_gt.iter().flat_map(|f| f.states.iter()))
                    .map(|s| StateFile {
                        t: s.t,
                        x: s.pos.x,
                        y: s.pos.y,
                        valid: s.valid,
                    })
                    .collect();
                states.sort_by_key(|s| s.t);
                ActorFile {
                    id: a.id.clone(),
                    states,
                }
            })
            .collect(),
        lanes: scene
            .lanes
            .iter()
            .map(|l| LaneFile {
                id: l.id.clone(),
                centerline: l.centerline.iter().map(|p| [p.x, p.y]).collect(),
                pred: l.predecessors.clone(),
                succ: l.successors.clone(),
                left: l.left.clone(),
                right: l.right.clone(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).map_err(|e| SceneError::Schema(e.to_string()))
}

// ---------------------------------------------------------------------------
// Frame normalization
// ---------------------------------------------------------------------------

/// Rigid transform p' = R (p - origin), with R a rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub origin: Vec2,
    pub cos: f64,
    pub sin: f64,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            origin: Vec2::default(),
            cos: 1.0,
            sin: 0.0,
        }
    }

    pub fn apply(&self, p: Vec2) -> Vec2 {
        let d = p.sub(self.origin);
        Vec2::new(self.cos * d.x + self.sin * d.y, -self.sin * d.x + self.cos * d.y)
    }

    pub fn apply_trajectory(&self, traj: &Trajectory) -> Trajectory {
        Trajectory {
            states: traj
                .states
                .iter()
                .map(|s| ActorState ::new(s.t, self.apply(s.pos), s.valid))
                .collect(),
        }
    }

    pub fn apply_path(&self, path: &Path) -> Path {
        Path::new(path.points.iter().map(|p| self.apply(*p)).collect())
    }
}

/// Transform that moves the AOI's t=0 position to the origin and rotates its
/// heading (direction of the most recent non-degenerate history displacement)
/// onto +x. Falls back to identity rotation when every displacement is
/// degenerate.
pub fn aoi_frame(scene: &Scene) -> RigidTransform {
    let aoi = scene.aoi();
    let origin = aoi.current().pos;
    let valid: Vec<&ActorState> = aoi.history.valid_states().collect();
    let mut heading = None;
    for w in valid.windows(2).rev() {
        let d = w[1].pos.sub(w[0].pos);
        if d.norm() >= 1e-9 {
            heading = Some(d);
            break;
        }
    }
    match heading {
        Some(d) => {
            let n = d.norm();
            RigidTransform {
                origin,
                cos: d.x / n,
                sin: d.y / n,
            }
        }
        None => RigidTransform {
            origin,
            ..RigidTransform::identity()
        },
    }
}

/// Rigidly re-express the whole scene in the AOI frame.
pub fn normalize_frame(scene: &Scene) -> (Scene, RigidTransform) {
    let tf = aoi_frame(scene);
    let mut out = scene.clone();
    for a in &mut out.actors {
        a.history = tf.apply_trajectory(&a.history);
        if let Some(f) = &a.future_gt {
            a.future_gt = Some(tf.apply_trajectory(f));
        }
    }
    for lane in &mut out.lanes {
        for p in &mut lane.centerline {
            *p = tf.apply(*p);
        }
    }
    (out, tf)
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub scenes: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub world_spec: Option<serde_json::Value>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Scene] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }
}

/// Load every scene listed in a dataset directory's manifest.
pub fn load_dataset(dir: &FsPath) -> SceneResult<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest_path)?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| SceneError::Schema(e.to_string()))?;
    let mut out = Dataset::default();
    for entry in &manifest.scenes {
        let doc = std::fs::read_to_string(dir.join(&entry.file))?;
        let scene = parse_scene(&doc)
            .map_err(|e| SceneError::Value(format!("{}: {}", entry.file, e)))?;
        match entry.split {
            Split::Train => out.train.push(scene),
            Split::Val => out.val.push(scene),
        }
    }
    Ok(out)
}

/// Write scenes plus a manifest into `dir`. Returns the written file names.
pub fn write_dataset(
    dir: &FsPath,
    scenes: &[(Scene, Split)],
    world_spec: Option<serde_json::Value>,
) -> SceneResult<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut written = Vec::new();
    for (i, (scene, split)) in scenes.iter().enumerate() {
        let file = format!("scene_{i:05}.json");
        let path = dir.join(&file);
        std::fs::write(&path, serialize_scene(scene)?)?;
        written.push(path);
        entries.push(ManifestEntry {
            file,
            split: *split,
        });
    }
    let manifest = DatasetManifest {
        scenes: entries,
        world_spec,
    };
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&manifest).map_err(|e| SceneError::Schema(e.to_string()))?,
    )?;
    written.push(path);
    Ok(written)
}

/// Build a map from actor id to index, for resolving role assignments.
pub fn actor_index(scene: &Scene) -> HashMap<&str, usize> {
    scene
        .actors
        .iter()
        .enumerate()
        .map(|(i, a)| (a.id.as_str(), i))
        .collect()
}
