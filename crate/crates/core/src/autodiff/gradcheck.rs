//! Central finite-difference verification of tape gradients.
//!
//! Checks always run at f64; finite differences are too noisy at f32 to
//! separate implementation bugs from roundoff.

use super::tape::{AdResult, NodeId, Tape};
use super::tensor::Tensor;

/// Builds a scalar loss on the tape from leaf nodes (one per input tensor).
pub trait LossBuilder: Fn(&mut Tape<f64>, &[NodeId]) -> AdResult<NodeId> {}
impl<T: Fn(&mut Tape<f64>, &[NodeId]) -> AdResult<NodeId>> LossBuilder for T {}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
    /// (input index, element index) of the worst entry.
    pub worst: (usize, usize),
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max rel err {:.3e} (tol {:.1e}) at input {} elem {} -> {}",
            self.name,
            self.max_rel_err,
            self.tolerance,
            self.worst.0,
            self.worst.1,
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

fn run_loss<B: LossBuilder>(build: &B, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), false))
        .collect();
    let loss = build(&mut tape, &ids).expect("loss construction");
    tape.value(loss).item()
}

/// Tape gradients of the loss with respect to every input.
pub fn analytic_grads<B: LossBuilder>(
    build: &B,
    inputs: &[Tensor<f64>],
) -> (f64, Vec<Tensor<f64>>) {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &ids).expect("loss construction");
    let grads = tape.backward(loss).expect("backward");
    let out = ids
        .iter()
        .zip(inputs.iter())
        .map(|(&id, t)| grads.get_or_zeros(id, &t.shape))
        .collect();
    (tape.value(loss).item(), out)
}

/// Central-difference gradients, one forward pair per element.
pub fn numeric_grads<B: LossBuilder>(
    build: &B,
    inputs: &[Tensor<f64>],
    eps: f64,
) -> Vec<Tensor<f64>> {
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].shape.clone());
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data[j] += eps;
            let mut minus = inputs.to_vec();
            minus[i].data[j] -= eps;
            grad.data[j] = (run_loss(build, &plus) - run_loss(build, &minus)) / (2.0 * eps);
        }
        out.push(grad);
    }
    out
}

/// Worst relative discrepancy between two gradient sets. Entries where both
/// magnitudes are tiny compare absolutely.
pub fn compare_grads(
    analytic: &[Tensor<f64>],
    numeric: &[Tensor<f64>],
) -> (f64, (usize, usize)) {
    let mut max_err = 0.0;
    let mut worst = (0, 0);
    for (i, (a, n)) in analytic.iter().zip(numeric.iter()).enumerate() {
        for (j, (&av, &nv)) in a.data.iter().zip(n.data.iter()).enumerate() {
            let scale = av.abs().max(nv.abs());
            let err = if scale > 1e-7 {
                (av - nv).abs() / scale
            } else {
                (av - nv).abs()
            };
            if err > max_err {
                max_err = err;
                worst = (i, j);
            }
        }
    }
    (max_err, worst)
}

/// Full check: analytic vs central differences at step `eps`.
pub fn gradcheck<B: LossBuilder>(
    name: &str,
    build: B,
    inputs: &[Tensor<f64>],
    eps: f64,
    tolerance: f64,
) -> GradReport {
    let (_, analytic) = analytic_grads(&build, inputs);
    let numeric = numeric_grads(&build, inputs, eps);
    let (max_rel_err, worst) = compare_grads(&analytic, &numeric);
    GradReport {
        name: name.to_string(),
        max_rel_err,
        worst,
        tolerance,
    }
}

/// Like [`gradcheck`], but differencing only a deterministic random sample of
/// elements per input. Needed where the input count makes a full sweep
/// impractical (whole-network checks).
pub fn gradcheck_sampled<B: LossBuilder>(
    name: &str,
    build: B,
    inputs: &[Tensor<f64>],
    eps: f64,
    tolerance: f64,
    per_input: usize,
    seed: u64,
) -> GradReport {
    use rand::Rng;
    let (_, analytic) = analytic_grads(&build, inputs);
    let mut rng = crate::util::SeedMixer::new(seed).mix_str(name).rng();
    let mut max_rel_err = 0.0;
    let mut worst = (0, 0);
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let picks: Vec<usize> = if n <= per_input {
            (0..n).collect()
        } else {
            (0..per_input).map(|_| rng.gen_range(0..n)).collect()
        };
        for j in picks {
            let mut plus = inputs.to_vec();
            plus[i].data[j] += eps;
            let mut minus = inputs.to_vec();
            minus[i].data[j] -= eps;
            let nv = (run_loss(&build, &plus) - run_loss(&build, &minus)) / (2.0 * eps);
            let av = analytic[i].data[j];
            let scale = av.abs().max(nv.abs());
            let err = if scale > 1e-7 {
                (av - nv).abs() / scale
            } else {
                (av - nv).abs()
            };
            if err > max_rel_err {
                max_rel_err = err;
                worst = (i, j);
            }
        }
    }
    GradReport {
        name: name.to_string(),
        max_rel_err,
        worst,
        tolerance,
    }
}

/// Negative control: corrupt the analytic gradients and confirm the
/// comparison catches it. Keeps the harness itself honest.
pub fn negative_control() -> GradReport {
    let inputs = vec![Tensor::from_f64s(vec![2, 2], &[0.4, -1.3, 2.0, 0.7])];
    let build = |tape: &mut Tape<f64>, ids: &[NodeId]| -> AdResult<NodeId> {
        let sq = tape.mul(ids[0], ids[0])?;
        Ok(tape.sum_all(sq))
    };
    let (_, mut analytic) = analytic_grads(&build, &inputs);
    analytic[0].data[1] += 0.05; // injected bug
    let numeric = numeric_grads(&build, &inputs, 1e-5);
    let (max_rel_err, worst) = compare_grads(&analytic, &numeric);
    GradReport {
        name: "negative-control".into(),
        max_rel_err,
        worst,
        tolerance: 1e-6,
    }
}
