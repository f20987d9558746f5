//! The prediction network.
//!
//! Pipeline per scene: a TCN encodes each actor's differenced state sequence;
//! its features at the current step seed actor nodes, and at subsampled
//! future steps seed trajectory nodes. Lane and path node features come from
//! small input MLPs. A stack of graph modules then runs in a fixed order --
//! MapNet, L2P, P2P, P2A, A2L, L2L, T2L, L2A, A2A, T2A -- where MapNet, L2L
//! and P2P are multi-scale graph convolutions over typed edges and the rest
//! are 8-head GATv2 attention over cross edges. A shared two-layer MLP head
//! finally decodes, for every predicted actor, M trajectory hypotheses as
//! cumulative offsets from its current position, plus mode logits.

use crate::autodiff::{AdError, AdResult, NodeId, Scalar, Tape, Tensor};
use crate::graph::{ConnectionType, CrossRelation, GraphBundle, GraphConfig, TypedEdges};
use crate::scene::Vec2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("missing weight {0}")]
    MissingWeight(String),
    #[error("feature dim {0} not divisible by {1} heads")]
    HeadDivisibility(usize, usize),
    #[error(transparent)]
    Ad(#[from] AdError),
}

pub type NetResult<T> = Result<T, NetError>;

/// Architecture hyperparameters. `full()` is the reference configuration;
/// `desk()` is the same network at laptop-friendly widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub modes: usize,
    pub heads: usize,
    pub tcn_layers: usize,
    pub tcn_kernel: usize,
    pub laneconv_stack: usize,
    pub fusion_stack: usize,
    pub mlp_hidden: usize,
    pub horizon: usize,
    pub graph: GraphConfig,
}

impl ModelConfig {
    pub fn full() -> Self {
        Self {
            feature_dim: 256,
            modes: 6,
            heads: 8,
            tcn_layers: 3,
            tcn_kernel: 3,
            laneconv_stack: 4,
            fusion_stack: 2,
            mlp_hidden: 4096,
            horizon: crate::scene::DEFAULT_HORIZON,
            graph: GraphConfig::default(),
        }
    }

    /// Same architecture, small dims; trainable on a desktop CPU.
    pub fn desk() -> Self {
        Self {
            feature_dim: 32,
            heads: 4,
            mlp_hidden: 256,
            ..Self::full()
        }
    }

    /// Tiny widths for gradient checks.
    pub fn micro() -> Self {
        Self {
            feature_dim: 8,
            heads: 2,
            mlp_hidden: 16,
            modes: 2,
            horizon: 6,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> NetResult<()> {
        if self.feature_dim == 0 || self.heads == 0 || self.feature_dim % self.heads != 0 {
            return Err(NetError::HeadDivisibility(self.feature_dim, self.heads));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.feature_dim / self.heads
    }

    /// Input rows per actor sequence.
    pub fn seq_len(&self) -> usize {
        self.graph.t_hist + self.horizon
    }

    pub fn lane_conn_types(&self) -> Vec<ConnectionType> {
        let mut c = vec![
            ConnectionType::SelfLoop,
            ConnectionType::Pred,
            ConnectionType::Succ,
            ConnectionType::Left,
            ConnectionType::Right,
        ];
        c.extend(self.graph.lane_dilations.iter().filter(|&&n| n > 1).map(|&n| ConnectionType::Dilated(n)));
        c
    }

    pub fn l2l_conn_types(&self) -> Vec<ConnectionType> {
        let mut c = self.lane_conn_types();
        c.push(ConnectionType::Proximity);
        c
    }

    pub fn path_conn_types(&self) -> Vec<ConnectionType> {
        let mut c = vec![
            ConnectionType::SelfLoop,
            ConnectionType::Pred,
            ConnectionType::Succ,
        ];
        c.extend(self.graph.path_dilations.iter().filter(|&&n| n > 1).map(|&n| ConnectionType::Dilated(n)));
        c
    }
}

pub fn conn_name(c: ConnectionType) -> String {
    match c {
        ConnectionType::SelfLoop => "self".into(),
        ConnectionType::Pred => "pred".into(),
        ConnectionType::Succ => "succ".into(),
        ConnectionType::Left => "left".into(),
        ConnectionType::Right => "right".into(),
        ConnectionType::Dilated(n) => format!("d{n}"),
        ConnectionType::Proximity => "prox".into(),
    }
}

/// GATv2 fusion relations, in processing order (L2L runs as a graph
/// convolution and is not in this list).
pub const FUSION_RELATIONS: [CrossRelation; 7] = [
    CrossRelation::L2P,
    CrossRelation::P2A,
    CrossRelation::A2L,
    CrossRelation::T2L,
    CrossRelation::L2A,
    CrossRelation::A2A,
    CrossRelation::T2A,
];

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// One named trainable tensor plus its optimizer state.
#[derive(Debug, Clone)]
pub struct Parameter<F> {
    pub name: String,
    pub tensor: Tensor<F>,
    pub adam_m: Vec<F>,
    pub adam_v: Vec<F>,
    pub step: u64,
}

/// All trainable tensors, addressable by hierarchical name.
#[derive(Debug, Clone)]
pub struct ModelParams<F> {
    pub params: Vec<Parameter<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> Default for ModelParams<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ModelParams<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: String, tensor: Tensor<F>) {
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        let n = tensor.numel();
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            tensor,
            adam_m: vec![F::zero(); n],
            adam_v: vec![F::zero(); n],
            step: 0,
        });
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<F>> {
        self.id(name).map(|i| &self.params[i])
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        let mut out = ModelParams::new();
        for p in &self.params {
            out.register(p.name.clone(), p.tensor.map_into());
        }
        out
    }
}

/// Fan-in scaled uniform init, biases zero, deterministic per seed.
pub fn init_params<F: Scalar>(cfg: &ModelConfig, seed: u64) -> ModelParams<F> {
    let mut rng = crate::util::SeedMixer::new(seed).mix_str("init").rng();
    let mut params = ModelParams::new();
    let d = cfg.feature_dim;

    let mat = |params: &mut ModelParams<F>, name: String, rows: usize, cols: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        let limit = 1.0 / (rows as f64).sqrt();
        let data: Vec<F> = (0..rows * cols)
            .map(|_| F::from_f64(rng.gen_range(-limit..limit)))
            .collect();
        params.register(name, Tensor::new(vec![rows, cols], data));
    };
    let zero_vec = |params: &mut ModelParams<F>, name: String, n: usize| {
        params.register(name, Tensor::zeros(vec![n]));
    };
    let ones_vec = |params: &mut ModelParams<F>, name: String, n: usize| {
        params.register(name, Tensor::new(vec![n], vec![F::one(); n]));
    };

    // TCN: first layer reads [dx, dy, avail].
    for i in 0..cfg.tcn_layers {
        let cin = if i == 0 { 3 } else { d };
        let fan_in = cin * cfg.tcn_kernel;
        let limit = 1.0 / (fan_in as f64).sqrt();
        let data: Vec<F> = (0..d * cfg.tcn_kernel * cin)
            .map(|_| F::from_f64(rng.gen_range(-limit..limit)))
            .collect();
        params.register(
            format!("tcn.{i}.w"),
            Tensor::new(vec![d, cfg.tcn_kernel, cin], data),
        );
        zero_vec(&mut params, format!("tcn.{i}.b"), d);
    }

    // Lane / path input encoders: 4 geometric features -> d.
    for enc in ["lane", "path"] {
        mat(&mut params, format!("enc.{enc}.0.w"), 4, d, &mut rng);
        zero_vec(&mut params, format!("enc.{enc}.0.b"), d);
        mat(&mut params, format!("enc.{enc}.1.w"), d, d, &mut rng);
        zero_vec(&mut params, format!("enc.{enc}.1.b"), d);
    }

    // Graph convolution stacks.
    let stacks: [(&str, Vec<ConnectionType>); 3] = [
        ("mapnet", cfg.lane_conn_types()),
        ("l2l", cfg.l2l_conn_types()),
        ("p2p", cfg.path_conn_types()),
    ];
    for (stack, conns) in &stacks {
        for layer in 0..cfg.laneconv_stack {
            for &c in conns {
                mat(
                    &mut params,
                    format!("{stack}.{layer}.w.{}", conn_name(c)),
                    d,
                    d,
                    &mut rng,
                );
            }
            ones_vec(&mut params, format!("{stack}.{layer}.ln.g"), d);
            zero_vec(&mut params, format!("{stack}.{layer}.ln.b"), d);
        }
    }

    // GATv2 fusion modules.
    for rel in FUSION_RELATIONS {
        let fdim = rel.feature_dim();
        for layer in 0..cfg.fusion_stack {
            let p = format!("fuse.{}.{layer}", rel.name());
            mat(&mut params, format!("{p}.w_src"), d, d, &mut rng);
            mat(&mut params, format!("{p}.w_dst"), d, d, &mut rng);
            mat(&mut params, format!("{p}.w_edge"), fdim, d, &mut rng);
            zero_vec(&mut params, format!("{p}.b"), d);
            mat(&mut params, format!("{p}.attn"), 1, d, &mut rng);
            mat(&mut params, format!("{p}.w_out"), d, d, &mut rng);
            zero_vec(&mut params, format!("{p}.b_out"), d);
            ones_vec(&mut params, format!("{p}.ln.g"), d);
            zero_vec(&mut params, format!("{p}.ln.b"), d);
        }
    }

    // Prediction head.
    let out_dim = cfg.modes * (cfg.horizon * 2 + 1);
    mat(&mut params, "head.0.w".into(), d, cfg.mlp_hidden, &mut rng);
    zero_vec(&mut params, "head.0.b".into(), cfg.mlp_hidden);
    mat(&mut params, "head.1.w".into(), cfg.mlp_hidden, out_dim, &mut rng);
    zero_vec(&mut params, "head.1.b".into(), out_dim);

    params
}

/// Tape leaves for every parameter, in registration order.
pub struct ParamBinding {
    pub ids: Vec<NodeId>,
}

pub fn bind_params<F: Scalar>(
    tape: &mut Tape<F>,
    params: &ModelParams<F>,
    requires_grad: bool,
) -> ParamBinding {
    let ids = params
        .params
        .iter()
        .map(|p| tape.leaf(p.tensor.clone(), requires_grad))
        .collect();
    ParamBinding { ids }
}

impl ParamBinding {
    pub fn get<F: Scalar>(&self, params: &ModelParams<F>, name: &str) -> NetResult<NodeId> {
        params
            .id(name)
            .map(|i| self.ids[i])
            .ok_or_else(|| NetError::MissingWeight(name.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// Multi-scale graph convolution: sum over connection types of summed
/// transformed neighbor features, x_i' = sum_c sum_{j in N_c(i)} x_j W_c.
/// Connection types without edges contribute nothing.
pub fn lane_conv_aggregate<F: Scalar>(
    tape: &mut Tape<F>,
    x: NodeId,
    edges: &TypedEdges,
    weights: &[(ConnectionType, NodeId)],
) -> AdResult<NodeId> {
    let n = tape.value(x).rows();
    let mut acc: Option<NodeId> = None;
    for (c, w) in weights {
        let pairs = edges.pairs(*c);
        if pairs.is_empty() {
            continue;
        }
        let src: Rc<Vec<usize>> = Rc::new(pairs.iter().map(|p| p.0).collect());
        let dst: Rc<Vec<usize>> = Rc::new(pairs.iter().map(|p| p.1).collect());
        // Transform-then-route when edges outnumber nodes, else route the
        // few source rows first.
        let summed = if pairs.len() >= n {
            let transformed = tape.matmul(x, *w)?;
            tape.edge_sum(transformed, src, dst, n)?
        } else {
            let gathered = tape.gather_rows(x, src)?;
            let transformed = tape.matmul(gathered, *w)?;
            tape.scatter_sum_rows(transformed, dst, n)?
        };
        acc = Some(match acc {
            Some(a) => tape.add(a, summed)?,
            None => summed,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => {
            let d = tape.value(x).cols();
            Ok(tape.constant(Tensor::zeros(vec![n, d])))
        }
    }
}

/// One residual block: x + relu(layer_norm(aggregate)).
#[allow(clippy::too_many_arguments)]
fn lane_conv_block<F: Scalar>(
    tape: &mut Tape<F>,
    x: NodeId,
    edges: &TypedEdges,
    weights: &[(ConnectionType, NodeId)],
    ln_g: NodeId,
    ln_b: NodeId,
) -> AdResult<NodeId> {
    let agg = lane_conv_aggregate(tape, x, edges, weights)?;
    let norm = tape.layer_norm(agg, ln_g, ln_b, 1e-5)?;
    let act = tape.relu(norm);
    tape.add(x, act)
}

fn lane_conv_stack<F: Scalar>(
    tape: &mut Tape<F>,
    params: &ModelParams<F>,
    binding: &ParamBinding,
    cfg: &ModelConfig,
    stack: &str,
    conns: &[ConnectionType],
    mut x: NodeId,
    edges: &TypedEdges,
) -> NetResult<NodeId> {
    if tape.value(x).rows() == 0 {
        return Ok(x);
    }
    for layer in 0..cfg.laneconv_stack {
        let weights: Vec<(ConnectionType, NodeId)> = conns
            .iter()
            .map(|&c| {
                binding
                    .get(params, &format!("{stack}.{layer}.w.{}", conn_name(c)))
                    .map(|id| (c, id))
            })
            .collect::<NetResult<_>>()?;
        let g = binding.get(params, &format!("{stack}.{layer}.ln.g"))?;
        let b = binding.get(params, &format!("{stack}.{layer}.ln.b"))?;
        x = lane_conv_block(tape, x, edges, &weights, g, b)?;
    }
    Ok(x)
}

/// Parameter ids for one GATv2 layer.
pub struct FusionLayerParams {
    pub w_src: NodeId,
    pub w_dst: NodeId,
    pub w_edge: NodeId,
    pub bias: NodeId,
    pub attn: NodeId,
    pub w_out: NodeId,
    pub b_out: NodeId,
    pub ln_g: NodeId,
    pub ln_b: NodeId,
}

impl FusionLayerParams {
    pub fn resolve<F: Scalar>(
        params: &ModelParams<F>,
        binding: &ParamBinding,
        prefix: &str,
    ) -> NetResult<Self> {
        Ok(Self {
            w_src: binding.get(params, &format!("{prefix}.w_src"))?,
            w_dst: binding.get(params, &format!("{prefix}.w_dst"))?,
            w_edge: binding.get(params, &format!("{prefix}.w_edge"))?,
            bias: binding.get(params, &format!("{prefix}.b"))?,
            attn: binding.get(params, &format!("{prefix}.attn"))?,
            w_out: binding.get(params, &format!("{prefix}.w_out"))?,
            b_out: binding.get(params, &format!("{prefix}.b_out"))?,
            ln_g: binding.get(params, &format!("{prefix}.ln.g"))?,
            ln_b: binding.get(params, &format!("{prefix}.ln.b"))?,
        })
    }
}

/// One GATv2 attention layer with residual update of the destination nodes.
///
/// Per edge the score is attn . leaky_relu(W_src x_src + W_dst x_dst + W_e e
/// + b), normalized per (destination, head); messages are the transformed
/// source features. Destinations without incoming edges keep their features
/// (the residual branch is masked out, so the update is exactly zero there).
///
/// Returns the updated destination features and the attention weights
/// [edges, heads].
pub fn gatv2_layer<F: Scalar>(
    tape: &mut Tape<F>,
    x_dst: NodeId,
    x_src: NodeId,
    pairs: &[(usize, usize)],
    edge_feats: &Tensor<F>,
    heads: usize,
    p: &FusionLayerParams,
) -> AdResult<(NodeId, Option<NodeId>)> {
    let n_dst = tape.value(x_dst).rows();
    if pairs.is_empty() || n_dst == 0 {
        return Ok((x_dst, None));
    }
    let d = tape.value(x_dst).cols();
    let dh = d / heads;
    let src: Rc<Vec<usize>> = Rc::new(pairs.iter().map(|p| p.0).collect());
    let dst: Rc<Vec<usize>> = Rc::new(pairs.iter().map(|p| p.1).collect());

    let s = tape.matmul(x_src, p.w_src)?;
    let t = tape.matmul(x_dst, p.w_dst)?;
    let ef = tape.constant(edge_feats.clone());
    let e = tape.matmul(ef, p.w_edge)?;
    let se = tape.gather_rows(s, src)?;
    let te = tape.gather_rows(t, dst.clone())?;
    let st = tape.add(se, te)?;
    let z = tape.add(st, e)?;
    let attn_row = tape.reshape(p.attn, vec![d])?;
    let zb = {
        let bias_row = tape.reshape(p.bias, vec![d])?;
        // add_bias expects [d]; z is [E, d]
        tape.add_bias(z, bias_row)?
    };
    let zl = tape.leaky_relu(zb, 0.2);
    let scored = tape.mul_rowvec(zl, attn_row)?;
    let scores = tape.block_sum_cols(scored, dh)?; // [E, heads]
    let alpha = tape.segment_softmax(scores, dst.clone(), n_dst)?;
    let alpha_wide = tape.block_repeat_cols(alpha, dh)?;
    let msg = tape.mul(alpha_wide, se)?;
    let agg = tape.scatter_sum_rows(msg, dst.clone(), n_dst)?;
    let proj = tape.matmul(agg, p.w_out)?;
    let proj = tape.add_bias(proj, p.b_out)?;
    let norm = tape.layer_norm(proj, p.ln_g, p.ln_b, 1e-5)?;
    let act = tape.relu(norm);
    // Zero the update for destinations with no incoming edges.
    let mut mask = Tensor::zeros(vec![n_dst, d]);
    for &di in dst.iter() {
        for c in 0..d {
            mask.data[di * d + c] = F::one();
        }
    }
    let mask = tape.constant(mask);
    let masked = tape.mul(act, mask)?;
    let out = tape.add(x_dst, masked)?;
    Ok((out, Some(alpha)))
}

fn fusion_module<F: Scalar>(
    tape: &mut Tape<F>,
    params: &ModelParams<F>,
    binding: &ParamBinding,
    cfg: &ModelConfig,
    rel: CrossRelation,
    mut x_dst: NodeId,
    x_src: NodeId,
    pairs: &[(usize, usize)],
    edge_feats: &Tensor<F>,
    attention_out: &mut Vec<(String, NodeId)>,
) -> NetResult<NodeId> {
    for layer in 0..cfg.fusion_stack {
        let prefix = format!("fuse.{}.{layer}", rel.name());
        let p = FusionLayerParams::resolve(params, binding, &prefix)?;
        let (out, alpha) = gatv2_layer(tape, x_dst, x_src, pairs, edge_feats, cfg.heads, &p)?;
        x_dst = out;
        if let Some(a) = alpha {
            attention_out.push((prefix, a));
        }
    }
    Ok(x_dst)
}

fn input_mlp<F: Scalar>(
    tape: &mut Tape<F>,
    params: &ModelParams<F>,
    binding: &ParamBinding,
    prefix: &str,
    x: NodeId,
) -> NetResult<NodeId> {
    let w0 = binding.get(params, &format!("{prefix}.0.w"))?;
    let b0 = binding.get(params, &format!("{prefix}.0.b"))?;
    let w1 = binding.get(params, &format!("{prefix}.1.w"))?;
    let b1 = binding.get(params, &format!("{prefix}.1.b"))?;
    let h = tape.matmul(x, w0)?;
    let h = tape.add_bias(h, b0)?;
    let h = tape.relu(h);
    let h = tape.matmul(h, w1)?;
    let h = tape.add_bias(h, b1)?;
    Ok(tape.relu(h))
}

/// TCN over encoded sequences: stacked same-length 1-d convolutions with
/// relu. Input [A, T, 3], output [A, T, d].
pub fn tcn_forward<F: Scalar>(
    tape: &mut Tape<F>,
    params: &ModelParams<F>,
    binding: &ParamBinding,
    cfg: &ModelConfig,
    seqs: NodeId,
) -> NetResult<NodeId> {
    let mut x = seqs;
    for i in 0..cfg.tcn_layers {
        let w = binding.get(params, &format!("tcn.{i}.w"))?;
        let b = binding.get(params, &format!("tcn.{i}.b"))?;
        let y = tape.conv1d(x, w, b)?;
        x = tape.relu(y);
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// Full forward
// ---------------------------------------------------------------------------

pub struct ForwardOutput {
    /// Absolute positions [P*M, H*2]; row p*M+m is hypothesis m of predicted
    /// actor p, laid out (x1, y1, x2, y2, ...).
    pub positions: NodeId,
    /// Mode logits [P, M].
    pub logits: NodeId,
    /// Softmax probabilities [P, M].
    pub probs: NodeId,
    /// Actor indices (into the scene) aligned with prediction rows.
    pub predict_actors: Vec<usize>,
    /// Attention weight nodes per fusion layer, for diagnostics.
    pub attention: Vec<(String, NodeId)>,
}

pub fn full_forward<F: Scalar>(
    tape: &mut Tape<F>,
    params: &ModelParams<F>,
    binding: &ParamBinding,
    cfg: &ModelConfig,
    bundle: &GraphBundle,
) -> NetResult<ForwardOutput> {
    cfg.validate()?;
    let d = cfg.feature_dim;
    let n_actors = bundle.actors.len();
    let t = cfg.seq_len();
    let horizon = cfg.horizon;
    let mut attention = Vec::new();

    // Actor sequences -> TCN features.
    let mut seq_data = Vec::with_capacity(n_actors * t * 3);
    for rows in &bundle.sequences {
        debug_assert_eq!(rows.len(), t);
        for r in rows {
            seq_data.extend(r.iter().map(|&v| F::from_f64(v)));
        }
    }
    let seqs = tape.constant(Tensor::new(vec![n_actors, t, 3], seq_data));
    let tcn = tcn_forward(tape, params, binding, cfg, seqs)?;
    let tcn_rows = tape.reshape(tcn, vec![n_actors * t, d])?;

    // Features at the current step become actor node features.
    let cur = bundle.t_hist - 1;
    let actor_rows: Rc<Vec<usize>> = Rc::new((0..n_actors).map(|a| a * t + cur).collect());
    let mut actor_feats = tape.gather_rows(tcn_rows, actor_rows)?;

    // Features at subsampled future steps become trajectory node features.
    let traj_rows: Rc<Vec<usize>> = Rc::new(
        (0..bundle.trajs.len())
            .map(|i| bundle.trajs.owner_actor[i] * t + cur + bundle.trajs.time_index[i])
            .collect(),
    );
    let traj_feats = tape.gather_rows(tcn_rows, traj_rows)?;

    // Lane / path geometric features -> input MLPs.
    let raw = |tape: &mut Tape<F>, nodes: &crate::graph::GraphNodes| {
        let mut data = Vec::with_capacity(nodes.len() * 4);
        for f in &nodes.raw_features {
            data.extend(f.iter().map(|&v| F::from_f64(v)));
        }
        tape.constant(Tensor::new(vec![nodes.len(), 4], data))
    };
    let lane_raw = raw(tape, &bundle.lanes);
    let mut lane_feats = input_mlp(tape, params, binding, "enc.lane", lane_raw)?;
    let path_raw = raw(tape, &bundle.paths);
    let mut path_feats = input_mlp(tape, params, binding, "enc.path", path_raw)?;

    let edge_t = |tape: &mut Tape<F>, rel: CrossRelation| -> (Vec<(usize, usize)>, Tensor<F>) {
        let ce = bundle.cross_edges(rel);
        let fdim = rel.feature_dim();
        let mut data = Vec::with_capacity(ce.len() * fdim);
        for f in &ce.features {
            data.extend(f[..fdim].iter().map(|&v| F::from_f64(v)));
        }
        let _ = tape;
        (ce.pairs.clone(), Tensor::new(vec![ce.len(), fdim], data))
    };

    // MapNet over the lane graph.
    lane_feats = lane_conv_stack(
        tape, params, binding, cfg, "mapnet", &cfg.lane_conn_types(), lane_feats,
        &bundle.lane_edges,
    )?;

    // L2P: lanes seed the path nodes.
    let (pairs, feats) = edge_t(tape, CrossRelation::L2P);
    path_feats = fusion_module(
        tape, params, binding, cfg, CrossRelation::L2P, path_feats, lane_feats, &pairs, &feats,
        &mut attention,
    )?;

    // P2P: propagate along each path.
    path_feats = lane_conv_stack(
        tape, params, binding, cfg, "p2p", &cfg.path_conn_types(), path_feats,
        &bundle.path_edges,
    )?;

    // P2A: each path updates its own actor.
    let (pairs, feats) = edge_t(tape, CrossRelation::P2A);
    actor_feats = fusion_module(
        tape, params, binding, cfg, CrossRelation::P2A, actor_feats, path_feats, &pairs, &feats,
        &mut attention,
    )?;

    // A2L: lane nodes learn about nearby actors.
    let (pairs, feats) = edge_t(tape, CrossRelation::A2L);
    lane_feats = fusion_module(
        tape, params, binding, cfg, CrossRelation::A2L, lane_feats, actor_feats, &pairs, &feats,
        &mut attention,
    )?;

    // L2L: propagate along lanes (relational edges plus 6 m proximity).
    let mut l2l_edges = bundle.lane_edges.clone();
    l2l_edges.sets.push((
        ConnectionType::Proximity,
        bundle.cross_edges(CrossRelation::L2L).pairs.clone(),
    ));
    lane_feats = lane_conv_stack(
        tape, params, binding, cfg, "l2l", &cfg.l2l_conn_types(), lane_feats, &l2l_edges,
    )?;

    // T2L: future positions of cooperative actors reach lane nodes.
    let (pairs, feats) = edge_t(tape, CrossRelation::T2L);
    lane_feats = fusion_module(
        tape, params, binding, cfg, CrossRelation::T2L, lane_feats, traj_feats, &pairs, &feats,
        &mut attention,
    )?;

    // L2A: map context back to the actors.
    let (pairs, feats) = edge_t(tape, CrossRelation::L2A);
    actor_feats = fusion_module(
        tape, params, binding, cfg, CrossRelation::L2A, actor_feats, lane_feats, &pairs, &feats,
        &mut attention,
    )?;

    // A2A: actor interactions.
    let (pairs, feats) = edge_t(tape, CrossRelation::A2A);
    actor_feats = fusion_module(
        tape, params, binding, cfg, CrossRelation::A2A, actor_feats, actor_feats, &pairs, &feats,
        &mut attention,
    )?;

    // T2A: cooperative futures directly reach the actors.
    let (pairs, feats) = edge_t(tape, CrossRelation::T2A);
    actor_feats = fusion_module(
        tape, params, binding, cfg, CrossRelation::T2A, actor_feats, traj_feats, &pairs, &feats,
        &mut attention,
    )?;

    // Shared MLP head over predicted actors.
    let predict_actors = bundle.predict_set.clone();
    let pred_rows: Rc<Vec<usize>> = Rc::new(predict_actors.clone());
    let pred_feats = tape.gather_rows(actor_feats, pred_rows)?;
    let w0 = binding.get(params, "head.0.w")?;
    let b0 = binding.get(params, "head.0.b")?;
    let w1 = binding.get(params, "head.1.w")?;
    let b1 = binding.get(params, "head.1.b")?;
    let h = tape.matmul(pred_feats, w0)?;
    let h = tape.add_bias(h, b0)?;
    let h = tape.relu(h);
    let out = tape.matmul(h, w1)?;
    let out = tape.add_bias(out, b1)?; // [P, M*(H*2+1)]

    let p = predict_actors.len();
    let m = cfg.modes;
    let offsets = tape.slice_cols(out, 0, m * horizon * 2)?;
    let logits = tape.slice_cols(out, m * horizon * 2, m * (horizon * 2 + 1))?;
    let offsets = tape.reshape(offsets, vec![p * m, horizon * 2])?;
    let curled = tape.cumsum_steps(offsets, 2)?;
    // Absolute positions: cumulative offsets from each actor's t=0 position.
    let mut anchor_data = Vec::with_capacity(p * m * horizon * 2);
    for &a in &predict_actors {
        let pos = bundle.anchors[a];
        for _ in 0..m {
            for _ in 0..horizon {
                anchor_data.push(F::from_f64(pos.x));
                anchor_data.push(F::from_f64(pos.y));
            }
        }
    }
    let anchors = tape.constant(Tensor::new(vec![p * m, horizon * 2], anchor_data));
    let positions = tape.add(curled, anchors)?;
    let probs = tape.softmax_rows(logits)?;

    Ok(ForwardOutput {
        positions,
        logits,
        probs,
        predict_actors,
        attention,
    })
}

// ---------------------------------------------------------------------------
// Prediction sets
// ---------------------------------------------------------------------------

/// Decoded predictions for the predicted actors of one scene.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    pub actor_indices: Vec<usize>,
    pub actor_ids: Vec<String>,
    /// [actor][mode][step] absolute positions.
    pub trajectories: Vec<Vec<Vec<Vec2>>>,
    /// [actor][mode] mode probabilities, summing to one.
    pub probabilities: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
}

impl PredictionSet {
    pub fn modes(&self) -> usize {
        self.probabilities.first().map(|p| p.len()).unwrap_or(0)
    }

    pub fn for_actor(&self, scene_actor_idx: usize) -> Option<usize> {
        self.actor_indices.iter().position(|&a| a == scene_actor_idx)
    }
}

/// Read a forward pass back into plain floats.
pub fn extract_predictions<F: Scalar>(
    tape: &Tape<F>,
    out: &ForwardOutput,
    bundle: &GraphBundle,
    cfg: &ModelConfig,
) -> PredictionSet {
    let m = cfg.modes;
    let h = cfg.horizon;
    let pos = tape.value(out.positions);
    let probs = tape.value(out.probs);
    let logits = tape.value(out.logits);
    let p = out.predict_actors.len();
    let mut trajectories = Vec::with_capacity(p);
    let mut probabilities = Vec::with_capacity(p);
    let mut logit_rows = Vec::with_capacity(p);
    for pi in 0..p {
        let mut actor_modes = Vec::with_capacity(m);
        for mi in 0..m {
            let row = pos.row(pi * m + mi);
            let traj: Vec<Vec2> = (0..h)
                .map(|s| {
                    Vec2::new(
                        Scalar::to_f64(row[s * 2]),
                        Scalar::to_f64(row[s * 2 + 1]),
                    )
                })
                .collect();
            actor_modes.push(traj);
        }
        trajectories.push(actor_modes);
        probabilities.push(probs.row(pi).iter().map(|&v| Scalar::to_f64(v)).collect());
        logit_rows.push(logits.row(pi).iter().map(|&v| Scalar::to_f64(v)).collect());
    }
    PredictionSet {
        actor_indices: out.predict_actors.clone(),
        actor_ids: out
            .predict_actors
            .iter()
            .map(|&a| bundle.actor_ids[a].clone())
            .collect(),
        trajectories,
        probabilities,
        logits: logit_rows,
    }
}

/// Inference convenience: forward one bundle without gradients.
pub fn predict_bundle<F: Scalar>(
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    bundle: &GraphBundle,
) -> NetResult<PredictionSet> {
    let mut tape = Tape::new();
    let binding = bind_params(&mut tape, params, false);
    let out = full_forward(&mut tape, params, &binding, cfg, bundle)?;
    Ok(extract_predictions(&tape, &out, bundle, cfg))
}
