//! Heterogeneous graph construction.
//!
//! Four node sets are built per scene: actor nodes (one per actor at its
//! current position), lane nodes (one per centerline segment), trajectory
//! nodes (subsampled future points of cooperative trajectories, no intra
//! edges), and path nodes (points of cooperative paths). Lane and path graphs
//! carry successor/predecessor edges plus n-dilated shortcuts; information
//! flows between the graphs over typed cross edges thresholded by euclidean
//! distance.
//!
//! Edge lists are sorted by stable (owner id, sub-index) keys rather than by
//! node index, so reordering actors in the input permutes node indices but
//! leaves every reduction order intact.

use crate::coop::AugmentedScene;
use crate::scene::{Actor, LaneSegment, Path, Trajectory, Vec2};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Actor,
    Lane,
    Trajectory,
    Path,
}

/// One of the four node sets.
#[derive(Debug, Clone)]
pub struct GraphNodes {
    pub kind: NodeKind,
    pub positions: Vec<Vec2>,
    /// Geometric input features (lane/path nodes): [pos.x, pos.y, dir.x, dir.y].
    pub raw_features: Vec<[f64; 4]>,
    /// Owning entity id (actor id or lane id).
    pub owner: Vec<String>,
    /// Index within the owner (segment / point / future slot).
    pub sub: Vec<usize>,
    /// Future time index, trajectory nodes only.
    pub time_index: Vec<usize>,
    /// Index of the owning actor in the scene, for actor-owned node sets.
    pub owner_actor: Vec<usize>,
    /// Rank of each node in (owner, sub) order; canonical sort key.
    key_rank: Vec<usize>,
}

impl GraphNodes {
    fn empty(kind: NodeKind) -> Self {
        Self {
            kind,
            positions: Vec::new(),
            raw_features: Vec::new(),
            owner: Vec::new(),
            sub: Vec::new(),
            time_index: Vec::new(),
            owner_actor: Vec::new(),
            key_rank: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn finish_keys(&mut self) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            (self.owner[a].as_str(), self.sub[a]).cmp(&(self.owner[b].as_str(), self.sub[b]))
        });
        self.key_rank = vec![0; self.len()];
        for (rank, &idx) in order.iter().enumerate() {
            self.key_rank[idx] = rank;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ConnectionType {
    SelfLoop,
    Pred,
    Succ,
    Left,
    Right,
    /// Nodes reachable by a walk of exactly `n` successor (or predecessor)
    /// hops.
    Dilated(usize),
    /// Proximity supplement (actor graph, and the 6 m lane-to-lane edges).
    Proximity,
}

/// Directed intra-graph edges grouped by connection type.
#[derive(Debug, Clone, Default)]
pub struct TypedEdges {
    pub sets: Vec<(ConnectionType, Vec<(usize, usize)>)>,
}

impl TypedEdges {
    pub fn pairs(&self, c: ConnectionType) -> &[(usize, usize)] {
        self.sets
            .iter()
            .find(|(t, _)| *t == c)
            .map(|(_, p)| p.as_slice())
            .unwrap_or(&[])
    }

    pub fn total_edges(&self) -> usize {
        self.sets.iter().map(|(_, p)| p.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CrossRelation {
    L2A,
    A2L,
    L2L,
    A2A,
    L2P,
    P2A,
    P2P,
    T2L,
    T2A,
}

impl CrossRelation {
    pub fn name(self) -> &'static str {
        match self {
            CrossRelation::L2A => "l2a",
            CrossRelation::A2L => "a2l",
            CrossRelation::L2L => "l2l",
            CrossRelation::A2A => "a2a",
            CrossRelation::L2P => "l2p",
            CrossRelation::P2A => "p2a",
            CrossRelation::P2P => "p2p",
            CrossRelation::T2L => "t2l",
            CrossRelation::T2A => "t2a",
        }
    }

    /// Trajectory-sourced relations carry the time fraction as a 4th feature.
    pub fn feature_dim(self) -> usize {
        match self {
            CrossRelation::T2L | CrossRelation::T2A => 4,
            _ => 3,
        }
    }
}

/// Directed src -> dst edges between two node sets with per-edge features
/// [dx, dy, dist] (plus t/H for trajectory sources).
#[derive(Debug, Clone)]
pub struct CrossEdges {
    pub relation: CrossRelation,
    pub pairs: Vec<(usize, usize)>,
    pub features: Vec<[f64; 4]>,
}

impl CrossEdges {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Geometry/encoding parameters for graph construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    /// Dilation sizes for the lane graph; 1 means the plain pred/succ edges.
    pub lane_dilations: Vec<usize>,
    pub path_dilations: Vec<usize>,
    /// Keep every n-th future point as a trajectory node.
    pub traj_subsample: usize,
    /// Historic steps encoded per actor (t in (-t_hist, 0]).
    pub t_hist: usize,
    pub threshold_l2a: f64,
    pub threshold_a2l: f64,
    pub threshold_l2p: f64,
    pub threshold_p2a: f64,
    pub threshold_t2l: f64,
    pub threshold_l2l: f64,
    pub threshold_a2a: f64,
    pub threshold_t2a: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            lane_dilations: vec![1, 2, 4, 8, 16, 32],
            path_dilations: vec![1, 2, 4, 8],
            traj_subsample: 3,
            t_hist: crate::scene::DEFAULT_T_HIST,
            threshold_l2a: 7.0,
            threshold_a2l: 7.0,
            threshold_l2p: 7.0,
            threshold_p2a: 7.0,
            threshold_t2l: 7.0,
            threshold_l2l: 6.0,
            threshold_a2a: 100.0,
            threshold_t2a: 100.0,
        }
    }
}

impl GraphConfig {
    pub fn threshold(&self, rel: CrossRelation) -> f64 {
        match rel {
            CrossRelation::L2A => self.threshold_l2a,
            CrossRelation::A2L => self.threshold_a2l,
            CrossRelation::L2P => self.threshold_l2p,
            CrossRelation::P2A => self.threshold_p2a,
            CrossRelation::T2L => self.threshold_t2l,
            CrossRelation::L2L => self.threshold_l2l,
            CrossRelation::A2A => self.threshold_a2a,
            CrossRelation::T2A => self.threshold_t2a,
            CrossRelation::P2P => 0.0,
        }
    }
}

fn canonical_sort(pairs: &mut Vec<(usize, usize)>, src: &GraphNodes, dst: &GraphNodes) {
    pairs.sort_by_key(|&(s, d)| (dst.key_rank[d], src.key_rank[s]));
}

// ---------------------------------------------------------------------------
// Lane graph
// ---------------------------------------------------------------------------

/// One node per centerline segment; pred/succ/left/right from map relations,
/// plus exact-n-hop dilated shortcuts.
pub fn build_lane_graph(lanes: &[LaneSegment], dilations: &[usize]) -> (GraphNodes, TypedEdges) {
    let mut nodes = GraphNodes::empty(NodeKind::Lane);
    // (lane idx) -> [node idx per segment]
    let mut seg_nodes: Vec<Vec<usize>> = Vec::with_capacity(lanes.len());
    let lane_index: BTreeMap<&str, usize> =
        lanes.iter().enumerate().map(|(i, l)| (l.id.as_str(), i)).collect();
    for lane in lanes {
        let mut ids = Vec::new();
        for (k, w) in lane.centerline.windows(2).enumerate() {
            let mid = w[0].add(w[1]).scale(0.5);
            let dir = w[1].sub(w[0]);
            ids.push(nodes.len());
            nodes.positions.push(mid);
            nodes.raw_features.push([mid.x, mid.y, dir.x, dir.y]);
            nodes.owner.push(lane.id.clone());
            nodes.sub.push(k);
            nodes.owner_actor.push(usize::MAX);
        }
        seg_nodes.push(ids);
    }
    nodes.finish_keys();

    // Directed "next" adjacency in travel direction, deduplicated across the
    // succ and (inverted) pred listings.
    let mut next: BTreeSet<(usize, usize)> = BTreeSet::new();
    for (li, lane) in lanes.iter().enumerate() {
        let segs = &seg_nodes[li];
        for w in segs.windows(2) {
            next.insert((w[0], w[1]));
        }
        for succ in &lane.successors {
            let sj = lane_index[succ.as_str()];
            if let (Some(&a), Some(&b)) = (segs.last(), seg_nodes[sj].first()) {
                next.insert((a, b));
            }
        }
        for pred in &lane.predecessors {
            let pj = lane_index[pred.as_str()];
            if let (Some(&a), Some(&b)) = (seg_nodes[pj].last(), segs.first()) {
                next.insert((a, b));
            }
        }
    }
    let mut edges = relational_edges(&nodes, &next, dilations);

    // Left/right edges pair segments of related lanes by index.
    let mut left_pairs = Vec::new();
    let mut right_pairs = Vec::new();
    for (li, lane) in lanes.iter().enumerate() {
        for (ids, out) in [(&lane.left, &mut left_pairs), (&lane.right, &mut right_pairs)] {
            for nb in ids {
                let nj = lane_index[nb.as_str()];
                let n = seg_nodes[li].len().min(seg_nodes[nj].len());
                for k in 0..n {
                    out.push((seg_nodes[nj][k], seg_nodes[li][k]));
                }
            }
        }
    }
    canonical_sort(&mut left_pairs, &nodes, &nodes);
    canonical_sort(&mut right_pairs, &nodes, &nodes);
    insert_set(&mut edges, ConnectionType::Left, left_pairs);
    insert_set(&mut edges, ConnectionType::Right, right_pairs);
    sort_sets(&mut edges);
    (nodes, edges)
}

fn insert_set(edges: &mut TypedEdges, c: ConnectionType, pairs: Vec<(usize, usize)>) {
    if let Some(slot) = edges.sets.iter_mut().find(|(t, _)| *t == c) {
        slot.1 = pairs;
    } else {
        edges.sets.push((c, pairs));
    }
}

fn sort_sets(edges: &mut TypedEdges) {
    edges.sets.sort_by(|a, b| a.0.cmp(&b.0));
}

/// Self, pred/succ, and dilated edge sets over a directed successor relation.
fn relational_edges(
    nodes: &GraphNodes,
    next: &BTreeSet<(usize, usize)>,
    dilations: &[usize],
) -> TypedEdges {
    let n = nodes.len();
    let mut fwd: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(a, b) in next {
        fwd[a].push(b);
    }
    let mut edges = TypedEdges::default();
    let mut selfs: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    canonical_sort(&mut selfs, nodes, nodes);
    insert_set(&mut edges, ConnectionType::SelfLoop, selfs);

    let mut succ: Vec<(usize, usize)> = next.iter().copied().collect();
    let mut pred: Vec<(usize, usize)> = next.iter().map(|&(a, b)| (b, a)).collect();
    canonical_sort(&mut succ, nodes, nodes);
    canonical_sort(&mut pred, nodes, nodes);
    insert_set(&mut edges, ConnectionType::Succ, succ);
    insert_set(&mut edges, ConnectionType::Pred, pred);

    for &d in dilations {
        if d <= 1 {
            continue; // dilation 1 is the plain pred/succ pair above
        }
        let mut pairs = Vec::new();
        for start in 0..n {
            for target in walk_exactly(&fwd, start, d) {
                pairs.push((start, target)); // forward d-hop
                pairs.push((target, start)); // backward d-hop
            }
        }
        pairs.sort_unstable();
        pairs.dedup();
        canonical_sort(&mut pairs, nodes, nodes);
        insert_set(&mut edges, ConnectionType::Dilated(d), pairs);
    }
    edges
}

/// Nodes admitting a walk of exactly `hops` steps from `start`.
fn walk_exactly(fwd: &[Vec<usize>], start: usize, hops: usize) -> Vec<usize> {
    let mut frontier: BTreeSet<usize> = BTreeSet::new();
    frontier.insert(start);
    for _ in 0..hops {
        let mut nxt = BTreeSet::new();
        for &x in &frontier {
            for &y in &fwd[x] {
                nxt.insert(y);
            }
        }
        frontier = nxt;
        if frontier.is_empty() {
            break;
        }
    }
    frontier.into_iter().collect()
}

// ---------------------------------------------------------------------------
// Path graph
// ---------------------------------------------------------------------------

/// One node per path point; pred/succ/dilated connections stay within each
/// path, never across paths.
pub fn build_path_graph(
    coop_paths: &BTreeMap<String, Path>,
    actor_index: &BTreeMap<String, usize>,
    dilations: &[usize],
) -> (GraphNodes, TypedEdges) {
    let mut nodes = GraphNodes::empty(NodeKind::Path);
    let mut next = BTreeSet::new();
    for (actor_id, path) in coop_paths {
        let base = nodes.len();
        let pts = &path.points;
        for (k, p) in pts.iter().enumerate() {
            let dir = if k + 1 < pts.len() {
                pts[k + 1].sub(*p)
            } else {
                Vec2::default()
            };
            nodes.positions.push(*p);
            nodes.raw_features.push([p.x, p.y, dir.x, dir.y]);
            nodes.owner.push(actor_id.clone());
            nodes.sub.push(k);
            nodes.owner_actor.push(actor_index[actor_id]);
        }
        for k in 0..pts.len().saturating_sub(1) {
            next.insert((base + k, base + k + 1));
        }
    }
    nodes.finish_keys();
    let mut edges = relational_edges(&nodes, &next, dilations);
    sort_sets(&mut edges);
    (nodes, edges)
}

// ---------------------------------------------------------------------------
// Trajectory nodes
// ---------------------------------------------------------------------------

/// Subsampled future points of cooperative trajectories. No intra edges:
/// trajectory nodes only talk to other graphs.
pub fn build_trajectory_nodes(
    coop_trajectories: &BTreeMap<String, Trajectory>,
    actor_index: &BTreeMap<String, usize>,
    subsample: usize,
    horizon: usize,
) -> GraphNodes {
    assert!(subsample >= 1);
    let mut nodes = GraphNodes::empty(NodeKind::Trajectory);
    for (actor_id, traj) in coop_trajectories {
        let mut slot = 0;
        let mut j = subsample;
        while j <= horizon {
            if let Some(s) = traj.state_at(j as i32) {
                if s.valid {
                    nodes.positions.push(s.pos);
                    nodes.raw_features.push([0.0; 4]);
                    nodes.owner.push(actor_id.clone());
                    nodes.sub.push(slot);
                    nodes.time_index.push(j);
                    nodes.owner_actor.push(actor_index[actor_id]);
                    slot += 1;
                }
            }
            j += subsample;
        }
    }
    nodes.finish_keys();
    nodes
}

// ---------------------------------------------------------------------------
// Actor graph
// ---------------------------------------------------------------------------

/// One node per actor at its t=0 position; bidirectional proximity edges
/// below `threshold`, plus self loops.
pub fn build_actor_graph(actors: &[Actor], threshold: f64) -> (GraphNodes, TypedEdges) {
    let mut nodes = GraphNodes::empty(NodeKind::Actor);
    for (i, a) in actors.iter().enumerate() {
        let pos = a.current().pos;
        nodes.positions.push(pos);
        nodes.raw_features.push([0.0; 4]);
        nodes.owner.push(a.id.clone());
        nodes.sub.push(0);
        nodes.owner_actor.push(i);
    }
    nodes.finish_keys();
    let mut edges = TypedEdges::default();
    let mut selfs: Vec<(usize, usize)> = (0..nodes.len()).map(|i| (i, i)).collect();
    canonical_sort(&mut selfs, &nodes, &nodes);
    insert_set(&mut edges, ConnectionType::SelfLoop, selfs);
    let mut prox = Vec::new();
    for i in 0..nodes.len() {
        for j in 0..nodes.len() {
            if i != j && nodes.positions[i].dist(nodes.positions[j]) < threshold {
                prox.push((i, j));
            }
        }
    }
    canonical_sort(&mut prox, &nodes, &nodes);
    insert_set(&mut edges, ConnectionType::Proximity, prox);
    sort_sets(&mut edges);
    (nodes, edges)
}

// ---------------------------------------------------------------------------
// Cross edges
// ---------------------------------------------------------------------------

/// Directed src -> dst edges below `threshold`, with [dx, dy, dist] features
/// (dst minus src). Trajectory sources append their time fraction t/H.
/// Same-set relations skip the identical node. P2A ignores the threshold and
/// connects every path point to its owning actor node.
pub fn build_cross_edges(
    src: &GraphNodes,
    dst: &GraphNodes,
    relation: CrossRelation,
    threshold: f64,
    horizon: usize,
) -> CrossEdges {
    let same_set = src.kind == dst.kind;
    let mut pairs = Vec::new();
    if relation == CrossRelation::P2A {
        for (s, &owner) in src.owner_actor.iter().enumerate() {
            let d = dst
                .owner_actor
                .iter()
                .position(|&a| a == owner)
                .expect("path owner has an actor node");
            pairs.push((s, d));
        }
    } else {
        for s in 0..src.len() {
            for d in 0..dst.len() {
                if same_set && s == d {
                    continue;
                }
                if src.positions[s].dist(dst.positions[d]) < threshold {
                    pairs.push((s, d));
                }
            }
        }
    }
    canonical_sort(&mut pairs, src, dst);
    let features = pairs
        .iter()
        .map(|&(s, d)| {
            let delta = dst.positions[d].sub(src.positions[s]);
            let mut f = [delta.x, delta.y, delta.norm(), 0.0];
            if relation.feature_dim() == 4 {
                f[3] = src.time_index[s] as f64 / horizon as f64;
            }
            f
        })
        .collect();
    CrossEdges {
        relation,
        pairs,
        features,
    }
}

// ---------------------------------------------------------------------------
// Sequence encoding
// ---------------------------------------------------------------------------

/// Per-step rows [dx, dy, avail] over t in (-t_hist, horizon].
///
/// A row is available when both its own and the previous position are known;
/// future rows are taken from the cooperative trajectory when one is given
/// and are zero otherwise (path-only actors get no future rows either, since
/// paths carry no timing).
pub fn encode_actor_sequence(
    actor: &Actor,
    coop_future: Option<&Trajectory>,
    t_hist: usize,
    horizon: usize,
) -> Vec<[f64; 3]> {
    let mut rows = Vec::with_capacity(t_hist + horizon);
    let hist_pos = |t: i32| -> Option<Vec2> {
        actor
            .history
            .state_at(t)
            .and_then(|s| s.valid.then_some(s.pos))
    };
    for k in 0..t_hist {
        let t = -(t_hist as i32) + 1 + k as i32;
        match (hist_pos(t), hist_pos(t - 1)) {
            (Some(cur), Some(prev)) => {
                let d = cur.sub(prev);
                rows.push([d.x, d.y, 1.0]);
            }
            _ => rows.push([0.0, 0.0, 0.0]),
        }
    }
    match coop_future {
        Some(fut) => {
            let mut prev = actor.current().pos;
            for t in 1..=horizon as i32 {
                match fut.state_at(t).filter(|s| s.valid) {
                    Some(s) => {
                        let d = s.pos.sub(prev);
                        rows.push([d.x, d.y, 1.0]);
                        prev = s.pos;
                    }
                    None => rows.push([0.0, 0.0, 0.0]),
                }
            }
        }
        None => rows.extend(std::iter::repeat([0.0, 0.0, 0.0]).take(horizon)),
    }
    rows
}

// ---------------------------------------------------------------------------
// Bundle
// ---------------------------------------------------------------------------

/// Everything the network consumes for one scene.
#[derive(Debug, Clone)]
pub struct GraphBundle {
    pub scene_id: String,
    pub horizon: usize,
    pub t_hist: usize,
    pub actors: GraphNodes,
    pub lanes: GraphNodes,
    pub trajs: GraphNodes,
    pub paths: GraphNodes,
    pub lane_edges: TypedEdges,
    pub path_edges: TypedEdges,
    pub actor_edges: TypedEdges,
    /// Fusion cross-edge sets, in processing order:
    /// L2P, P2A, A2L, L2L, T2L, L2A, A2A, T2A.
    pub cross: Vec<CrossEdges>,
    /// Indices of actors to predict.
    pub predict_set: Vec<usize>,
    /// Per-actor encoded input rows, aligned with scene actor order.
    pub sequences: Vec<Vec<[f64; 3]>>,
    pub actor_ids: Vec<String>,
    /// t=0 position per actor.
    pub anchors: Vec<Vec2>,
}

impl GraphBundle {
    pub fn cross_edges(&self, rel: CrossRelation) -> &CrossEdges {
        self.cross
            .iter()
            .find(|c| c.relation == rel)
            .expect("relation present in bundle")
    }
}

/// Build the full bundle for an augmented scene.
pub fn build_bundle(aug: &AugmentedScene, cfg: &GraphConfig) -> GraphBundle {
    let scene = &aug.base;
    let horizon = scene.horizon;
    let actor_idx: BTreeMap<String, usize> = scene
        .actors
        .iter()
        .enumerate()
        .map(|(i, a)| (a.id.clone(), i))
        .collect();

    let (lanes, lane_edges) = build_lane_graph(&scene.lanes, &cfg.lane_dilations);
    let (paths, path_edges) = build_path_graph(&aug.coop_paths, &actor_idx, &cfg.path_dilations);
    let trajs = build_trajectory_nodes(
        &aug.coop_trajectories,
        &actor_idx,
        cfg.traj_subsample,
        horizon,
    );
    let (actors, actor_edges) = build_actor_graph(&scene.actors, cfg.threshold_a2a);

    let cross = vec![
        build_cross_edges(&lanes, &paths, CrossRelation::L2P, cfg.threshold_l2p, horizon),
        build_cross_edges(&paths, &actors, CrossRelation::P2A, cfg.threshold_p2a, horizon),
        build_cross_edges(&actors, &lanes, CrossRelation::A2L, cfg.threshold_a2l, horizon),
        build_cross_edges(&lanes, &lanes, CrossRelation::L2L, cfg.threshold_l2l, horizon),
        build_cross_edges(&trajs, &lanes, CrossRelation::T2L, cfg.threshold_t2l, horizon),
        build_cross_edges(&lanes, &actors, CrossRelation::L2A, cfg.threshold_l2a, horizon),
        build_cross_edges(&actors, &actors, CrossRelation::A2A, cfg.threshold_a2a, horizon),
        build_cross_edges(&trajs, &actors, CrossRelation::T2A, cfg.threshold_t2a, horizon),
    ];

    let sequences = scene
        .actors
        .iter()
        .map(|a| {
            let coop = aug.coop_trajectories.get(&a.id);
            encode_actor_sequence(a, coop, cfg.t_hist, horizon)
        })
        .collect();

    GraphBundle {
        scene_id: scene.id.clone(),
        horizon,
        t_hist: cfg.t_hist,
        actors,
        lanes,
        trajs,
        paths,
        lane_edges,
        path_edges,
        actor_edges,
        cross,
        predict_set: aug.predict_set.clone(),
        sequences,
        actor_ids: scene.actors.iter().map(|a| a.id.clone()).collect(),
        anchors: scene.actors.iter().map(|a| a.current().pos).collect(),
    }
}

/// Structured dump of a bundle for external visualization.
pub fn bundle_debug_json(bundle: &GraphBundle) -> serde_json::Value {
    let nodes_json = |n: &GraphNodes| {
        serde_json::json!(n
            .positions
            .iter()
            .enumerate()
            .map(|(i, p)| {
                serde_json::json!({
                    "owner": n.owner[i],
                    "sub": n.sub[i],
                    "pos": [p.x, p.y],
                })
            })
            .collect::<Vec<_>>())
    };
    let typed_json = |e: &TypedEdges| {
        serde_json::json!(e
            .sets
            .iter()
            .map(|(c, pairs)| {
                serde_json::json!({
                    "type": format!("{c:?}"),
                    "pairs": pairs,
                })
            })
            .collect::<Vec<_>>())
    };
    serde_json::json!({
        "scene_id": bundle.scene_id,
        "actor_nodes": nodes_json(&bundle.actors),
        "lane_nodes": nodes_json(&bundle.lanes),
        "trajectory_nodes": nodes_json(&bundle.trajs),
        "path_nodes": nodes_json(&bundle.paths),
        "lane_edges": typed_json(&bundle.lane_edges),
        "path_edges": typed_json(&bundle.path_edges),
        "actor_edges": typed_json(&bundle.actor_edges),
        "cross_edges": bundle.cross.iter().map(|c| serde_json::json!({
            "relation": c.relation.name(),
            "pairs": c.pairs,
        })).collect::<Vec<_>>(),
        "predict_set": bundle.predict_set,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{ActorState, Scene};
    use crate::util::SeedMixer;
    use rand::Rng;

    fn lane(id: &str, pts: &[(f64, f64)]) -> LaneSegment {
        LaneSegment {
            id: id.into(),
            centerline: pts.iter().map(|p| Vec2::new(p.0, p.1)).collect(),
            predecessors: vec![],
            successors: vec![],
            left: vec![],
            right: vec![],
        }
    }

    #[test]
    fn single_lane_three_points() {
        let lanes = vec![lane("l0", &[(0.0, 0.0), (2.0, 0.0), (4.0, 0.0)])];
        let (nodes, edges) = build_lane_graph(&lanes, &[1, 2]);
        assert_eq!(nodes.len(), 2);
        assert_eq!(edges.pairs(ConnectionType::Succ), &[(0, 1)]);
        assert_eq!(edges.pairs(ConnectionType::Pred), &[(1, 0)]);
        assert_eq!(edges.pairs(ConnectionType::SelfLoop).len(), 2);
        assert_eq!(nodes.positions[0], Vec2::new(1.0, 0.0));
        assert_eq!(nodes.raw_features[0], [1.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn chain_dilated_four() {
        // 11 points -> 10 segments in a chain.
        let pts: Vec<(f64, f64)> = (0..11).map(|i| (i as f64 * 2.0, 0.0)).collect();
        let lanes = vec![lane("l0", &pts)];
        let (_, edges) = build_lane_graph(&lanes, &[1, 4]);
        let d4 = edges.pairs(ConnectionType::Dilated(4));
        let fwd: Vec<_> = d4.iter().filter(|(s, d)| d > s).collect();
        assert_eq!(fwd.len(), 6);
        for (s, d) in &fwd {
            assert_eq!(*d, s + 4);
        }
        // backward pairs mirror the forward ones
        assert_eq!(d4.len(), 12);
    }

    #[test]
    fn parallel_lanes_left_right_align_by_index() {
        let mut a = lane("a", &[(0.0, 0.0), (2.0, 0.0), (4.0, 0.0)]);
        let mut b = lane("b", &[(0.0, 3.0), (2.0, 3.0), (4.0, 3.0)]);
        a.left = vec!["b".into()];
        b.right = vec!["a".into()];
        let (nodes, edges) = build_lane_graph(&[a, b], &[1]);
        assert_eq!(nodes.len(), 4);
        // a segments are nodes 0,1; b segments are 2,3.
        assert_eq!(edges.pairs(ConnectionType::Left), &[(2, 0), (3, 1)]);
        assert_eq!(edges.pairs(ConnectionType::Right), &[(0, 2), (1, 3)]);
    }

    #[test]
    fn lane_succ_relation_links_boundary_segments() {
        let mut a = lane("a", &[(0.0, 0.0), (2.0, 0.0)]);
        a.successors = vec!["b".into()];
        let mut b = lane("b", &[(2.0, 0.0), (4.0, 0.0)]);
        b.predecessors = vec!["a".into()];
        let (_, edges) = build_lane_graph(&[a, b], &[1]);
        assert_eq!(edges.pairs(ConnectionType::Succ), &[(0, 1)]);
        assert_eq!(edges.pairs(ConnectionType::Pred), &[(1, 0)]);
    }

    #[test]
    fn empty_map_yields_empty_graph() {
        let (nodes, edges) = build_lane_graph(&[], &[1, 2]);
        assert!(nodes.is_empty());
        assert_eq!(edges.total_edges(), 0);
    }

    fn path_of(n: usize) -> BTreeMap<String, Path> {
        let mut m = BTreeMap::new();
        m.insert(
            "a0".into(),
            Path::new((0..n).map(|i| Vec2::new(i as f64 * 2.0, 0.0)).collect()),
        );
        m
    }

    fn idx_map(ids: &[&str]) -> BTreeMap<String, usize> {
        ids.iter().enumerate().map(|(i, s)| (s.to_string(), i)).collect()
    }

    #[test]
    fn single_point_path_has_only_self_edge() {
        let (nodes, edges) = build_path_graph(&path_of(1), &idx_map(&["a0"]), &[1, 2, 4, 8]);
        assert_eq!(nodes.len(), 1);
        assert_eq!(edges.pairs(ConnectionType::SelfLoop), &[(0, 0)]);
        assert_eq!(edges.total_edges(), 1);
    }

    #[test]
    fn nine_point_path_dilated_eight() {
        let (_, edges) = build_path_graph(&path_of(9), &idx_map(&["a0"]), &[1, 2, 4, 8]);
        let d8 = edges.pairs(ConnectionType::Dilated(8));
        // sorted by destination key: the backward 8-hop lands on point 0 first
        assert_eq!(d8, &[(8, 0), (0, 8)]);
    }

    #[test]
    fn disjoint_paths_are_not_connected() {
        let mut m = path_of(4);
        m.insert(
            "a1".into(),
            Path::new((0..4).map(|i| Vec2::new(i as f64 * 2.0, 50.0)).collect()),
        );
        let (nodes, edges) = build_path_graph(&m, &idx_map(&["a0", "a1"]), &[1, 2]);
        assert_eq!(nodes.len(), 8);
        for (_, pairs) in &edges.sets {
            for &(s, d) in pairs {
                assert_eq!(nodes.owner[s], nodes.owner[d]);
            }
        }
    }

    fn traj(h: usize, y: f64) -> Trajectory {
        Trajectory {
            states: (1..=h as i32)
                .map(|t| ActorState::new(t, Vec2::new(t as f64, y), true))
                .collect(),
        }
    }

    #[test]
    fn trajectory_nodes_subsample_every_third() {
        let mut m = BTreeMap::new();
        m.insert("a0".to_string(), traj(30, 0.0));
        let nodes = build_trajectory_nodes(&m, &idx_map(&["a0"]), 3, 30);
        assert_eq!(nodes.len(), 10);
        assert_eq!(nodes.time_index, (1..=10).map(|k| k * 3).collect::<Vec<_>>());
    }

    #[test]
    fn trajectory_nodes_subsample_one_keeps_all() {
        let mut m = BTreeMap::new();
        m.insert("a0".to_string(), traj(7, 0.0));
        let nodes = build_trajectory_nodes(&m, &idx_map(&["a0"]), 1, 7);
        assert_eq!(nodes.len(), 7);
        assert_eq!(nodes.time_index, (1..=7).collect::<Vec<_>>());
    }

    #[test]
    fn no_cooperative_trajectories_no_nodes() {
        let nodes = build_trajectory_nodes(&BTreeMap::new(), &BTreeMap::new(), 3, 30);
        assert!(nodes.is_empty());
    }

    fn actor_at(id: &str, x: f64, y: f64) -> Actor {
        Actor {
            id: id.into(),
            history: Trajectory {
                states: vec![ActorState::new(0, Vec2::new(x, y), true)],
            },
            future_gt: None,
        }
    }

    #[test]
    fn actor_graph_threshold() {
        let (_, edges) = build_actor_graph(&[actor_at("a", 0.0, 0.0), actor_at("b", 50.0, 0.0)], 100.0);
        assert_eq!(edges.pairs(ConnectionType::Proximity).len(), 2);
        let (_, edges) =
            build_actor_graph(&[actor_at("a", 0.0, 0.0), actor_at("b", 150.0, 0.0)], 100.0);
        assert_eq!(edges.pairs(ConnectionType::Proximity).len(), 0);
    }

    #[test]
    fn actor_graph_matches_brute_force() {
        let mut rng = SeedMixer::new(4).rng();
        for _ in 0..20 {
            let n = rng.gen_range(1..12);
            let actors: Vec<Actor> = (0..n)
                .map(|i| {
                    actor_at(
                        &format!("a{i}"),
                        rng.gen_range(-120.0..120.0),
                        rng.gen_range(-120.0..120.0),
                    )
                })
                .collect();
            let (nodes, edges) = build_actor_graph(&actors, 100.0);
            let mut expect = Vec::new();
            for i in 0..n {
                for j in 0..n {
                    if i != j && nodes.positions[i].dist(nodes.positions[j]) < 100.0 {
                        expect.push((i, j));
                    }
                }
            }
            let mut got: Vec<_> = edges.pairs(ConnectionType::Proximity).to_vec();
            got.sort_unstable();
            expect.sort_unstable();
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn cross_edge_three_four_five() {
        let mut src = GraphNodes::empty(NodeKind::Lane);
        src.positions.push(Vec2::new(0.0, 0.0));
        src.raw_features.push([0.0; 4]);
        src.owner.push("l".into());
        src.sub.push(0);
        src.owner_actor.push(usize::MAX);
        src.finish_keys();
        let mut dst = GraphNodes::empty(NodeKind::Actor);
        dst.positions.push(Vec2::new(3.0, 4.0));
        dst.raw_features.push([0.0; 4]);
        dst.owner.push("a".into());
        dst.sub.push(0);
        dst.owner_actor.push(0);
        dst.finish_keys();
        let e = build_cross_edges(&src, &dst, CrossRelation::L2A, 7.0, 30);
        assert_eq!(e.pairs, vec![(0, 0)]);
        assert_eq!(e.features[0][..3], [3.0, 4.0, 5.0]);
        let none = build_cross_edges(&src, &dst, CrossRelation::L2A, 4.0, 30);
        assert!(none.is_empty());
    }

    #[test]
    fn trajectory_edges_carry_time_fraction() {
        let mut m = BTreeMap::new();
        m.insert("a0".to_string(), traj(30, 0.0));
        let trajs = build_trajectory_nodes(&m, &idx_map(&["a0"]), 15, 30);
        let (actors, _) = build_actor_graph(&[actor_at("a0", 14.0, 0.0)], 100.0);
        let e = build_cross_edges(&trajs, &actors, CrossRelation::T2A, 100.0, 30);
        assert_eq!(e.pairs.len(), 2);
        let t15 = e
            .features
            .iter()
            .find(|f| (f[3] - 0.5).abs() < 1e-12)
            .expect("node at t=15 has fraction 0.5");
        assert!((t15[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn p2a_connects_all_points_to_owner_only() {
        let mut paths = path_of(5);
        paths.insert(
            "a1".into(),
            Path::new((0..2).map(|i| Vec2::new(i as f64 * 2.0, 40.0)).collect()),
        );
        let (pn, _) = build_path_graph(&paths, &idx_map(&["a0", "a1"]), &[1]);
        let (an, _) = build_actor_graph(
            &[actor_at("a0", 0.0, 0.0), actor_at("a1", 0.0, 40.0)],
            100.0,
        );
        let e = build_cross_edges(&pn, &an, CrossRelation::P2A, 7.0, 30);
        assert_eq!(e.len(), 7);
        for &(s, d) in &e.pairs {
            assert_eq!(pn.owner[s], an.owner[d]);
        }
    }

    #[test]
    fn cross_edges_match_brute_force_and_hypotenuse() {
        let mut rng = SeedMixer::new(8).rng();
        for _ in 0..20 {
            let n = rng.gen_range(1..15);
            let m = rng.gen_range(1..15);
            let mk = |count: usize, kind: NodeKind, rng: &mut rand_chacha::ChaCha8Rng| {
                let mut nodes = GraphNodes::empty(kind);
                for i in 0..count {
                    nodes.positions.push(Vec2::new(
                        rng.gen_range(-12.0..12.0),
                        rng.gen_range(-12.0..12.0),
                    ));
                    nodes.raw_features.push([0.0; 4]);
                    nodes.owner.push(format!("o{i}"));
                    nodes.sub.push(0);
                    nodes.owner_actor.push(i);
                }
                nodes.finish_keys();
                nodes
            };
            let src = mk(n, NodeKind::Lane, &mut rng);
            let dst = mk(m, NodeKind::Actor, &mut rng);
            let e = build_cross_edges(&src, &dst, CrossRelation::L2A, 7.0, 30);
            let mut expect = Vec::new();
            for s in 0..n {
                for d in 0..m {
                    if src.positions[s].dist(dst.positions[d]) < 7.0 {
                        expect.push((s, d));
                    }
                }
            }
            let mut got = e.pairs.clone();
            got.sort_unstable();
            expect.sort_unstable();
            assert_eq!(got, expect);
            for f in &e.features {
                assert!((f[2] - f[0].hypot(f[1])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dilated_edges_match_walk_oracle() {
        // Random branching successor structures, both lane-style chains and
        // merges; oracle expands frontier sets step by step.
        let mut rng = SeedMixer::new(21).rng();
        for round in 0..100 {
            let n = rng.gen_range(2..30usize);
            let mut fwd: Vec<Vec<usize>> = vec![Vec::new(); n];
            let mut next = BTreeSet::new();
            for i in 0..n {
                for _ in 0..rng.gen_range(0..3) {
                    let j = rng.gen_range(0..n);
                    if j != i && next.insert((i, j)) {
                        fwd[i].push(j);
                    }
                }
            }
            let mut nodes = GraphNodes::empty(NodeKind::Lane);
            for i in 0..n {
                nodes.positions.push(Vec2::new(i as f64, 0.0));
                nodes.raw_features.push([0.0; 4]);
                nodes.owner.push(format!("l{i:03}"));
                nodes.sub.push(0);
                nodes.owner_actor.push(usize::MAX);
            }
            nodes.finish_keys();
            let edges = relational_edges(&nodes, &next, &[1, 2, 4, 8]);
            for d in [2usize, 4, 8] {
                let mut expect = BTreeSet::new();
                for start in 0..n {
                    let mut frontier: BTreeSet<usize> = BTreeSet::new();
                    frontier.insert(start);
                    for _ in 0..d {
                        let mut nx = BTreeSet::new();
                        for &x in &frontier {
                            for &y in &fwd[x] {
                                nx.insert(y);
                            }
                        }
                        frontier = nx;
                    }
                    for t in frontier {
                        expect.insert((start, t));
                        expect.insert((t, start));
                    }
                }
                let got: BTreeSet<(usize, usize)> =
                    edges.pairs(ConnectionType::Dilated(d)).iter().copied().collect();
                assert_eq!(got, expect, "round {round} dilation {d}");
            }
        }
    }

    #[test]
    fn encode_sequence_stationary() {
        let mut a = actor_at("a", 5.0, 5.0);
        a.history = Trajectory {
            states: (-3..=0)
                .map(|t| ActorState::new(t, Vec2::new(5.0, 5.0), true))
                .collect(),
        };
        let rows = encode_actor_sequence(&a, None, 4, 3);
        assert_eq!(rows.len(), 7);
        assert_eq!(rows[0], [0.0, 0.0, 0.0]); // previous step unknown
        for r in &rows[1..4] {
            assert_eq!(*r, [0.0, 0.0, 1.0]);
        }
        for r in &rows[4..] {
            assert_eq!(*r, [0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn encode_sequence_unit_speed() {
        let mut a = actor_at("a", 0.0, 0.0);
        a.history = Trajectory {
            states: (-3..=0)
                .map(|t| ActorState::new(t, Vec2::new(t as f64, 0.0), true))
                .collect(),
        };
        let rows = encode_actor_sequence(&a, None, 4, 2);
        for r in &rows[1..4] {
            assert_eq!(*r, [1.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn encode_sequence_cooperative_future_diffs() {
        let mut a = actor_at("a", 0.0, 0.0);
        a.history = Trajectory {
            states: vec![
                ActorState::new(-1, Vec2::new(-1.0, 0.0), true),
                ActorState::new(0, Vec2::new(0.0, 0.0), true),
            ],
        };
        let fut = Trajectory {
            states: (1..=3)
                .map(|t| ActorState::new(t, Vec2::new(2.0 * t as f64, 0.0), true))
                .collect(),
        };
        let rows = encode_actor_sequence(&a, Some(&fut), 2, 3);
        assert_eq!(rows[2], [2.0, 0.0, 1.0]);
        assert_eq!(rows[3], [2.0, 0.0, 1.0]);
        assert_eq!(rows[4], [2.0, 0.0, 1.0]);
    }

    fn micro_scene() -> Scene {
        let mk_actor = |id: &str, y: f64| Actor {
            id: id.into(),
            history: Trajectory {
                states: (-3..=0)
                    .map(|t| ActorState::new(t, Vec2::new(t as f64, y), true))
                    .collect(),
            },
            future_gt: Some(Trajectory {
                states: (1..=6)
                    .map(|t| ActorState::new(t, Vec2::new(t as f64, y), true))
                    .collect(),
            }),
        };
        Scene {
            id: "m".into(),
            dt: 0.1,
            horizon: 6,
            aoi_id: "a0".into(),
            actors: vec![mk_actor("a0", 0.0), mk_actor("a1", 3.0)],
            lanes: vec![lane("l0", &[(-4.0, 0.0), (0.0, 0.0), (4.0, 0.0), (8.0, 0.0)])],
        }
    }

    #[test]
    fn bundle_is_deterministic() {
        use crate::coop::{apply_assignment, sample_roles, CoopAssignment};
        let scene = micro_scene();
        let mut rng = SeedMixer::new(3).rng();
        let mut a = sample_roles(&scene, 1.0, 0.5, true, &mut rng);
        crate::coop::fixed_betas(&mut a, 1.0);
        let aug = apply_assignment(&scene, &a).unwrap();
        let cfg = GraphConfig::default();
        let b1 = build_bundle(&aug, &cfg);
        let b2 = build_bundle(&aug, &cfg);
        assert_eq!(format!("{:?}", b1.lane_edges), format!("{:?}", b2.lane_edges));
        assert_eq!(b1.cross.len(), 8);
        let _ = CoopAssignment::all_none(&scene);
        // trajectory graph never has intra edges by construction; check the
        // debug dump exposes everything.
        let dump = bundle_debug_json(&b1);
        assert!(dump.get("trajectory_nodes").is_some());
    }
}
