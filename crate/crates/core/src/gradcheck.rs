//! Central finite-difference checks for analytic gradients.
//!
//! Errors are reported normwise per input, `‖analytic − numeric‖ /
//! max(‖analytic‖, ‖numeric‖, GRAD_FLOOR)`, and the worst input wins. The
//! floor keeps exactly-zero gradients (softmax-invariant biases, say) from
//! turning finite-difference round-off into a unit error.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-6;
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
}

pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn = numeric.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / na.max(nn).max(GRAD_FLOOR)
}

/// Numeric gradient of `f` at `x` by central differences.
pub fn numeric_gradient(x: &Tensor, f: &mut impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut grad = Tensor::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let up = f(&probe);
        probe.data_mut()[i] = orig - FD_STEP;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * FD_STEP);
    }
    grad
}

/// Checks a function that returns its own analytic gradient.
pub fn check_scalar_fn(x: &Tensor, f: impl Fn(&Tensor) -> (f64, Tensor)) -> f64 {
    let (_, analytic) = f(x);
    let numeric = numeric_gradient(x, &mut |t| f(t).0);
    relative_error(&analytic, &numeric)
}

/// Builds the graph with `inputs` as differentiable leaves and compares
/// tape gradients against finite differences for every input.
pub fn check_graph_fn(inputs: &[Tensor], build: &impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let eval = |ins: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let root = build(&mut g, &vars);
        g.value(root).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let root = build(&mut g, &vars);
    let analytic = g.backward_to(root, &vars);
    let mut worst: f64 = 0.0;
    for (k, a) in analytic.iter().enumerate() {
        let mut probe: Vec<Tensor> = inputs.to_vec();
        let numeric = numeric_gradient(&inputs[k], &mut |t| {
            probe[k] = t.clone();
            eval(&probe)
        });
        worst = worst.max(relative_error(a, &numeric));
    }
    worst
}

/// Compares tape gradients of every parameter in `store` against finite
/// differences of the scalar produced by `build`. The parameters are treated
/// as one flattened vector for the normwise error.
pub fn check_param_fn(store: &ParamStore, build: &impl Fn(&mut Graph, &ParamStore) -> Var) -> f64 {
    let mut g = Graph::new();
    let root = build(&mut g, store);
    let grads = g.backward(root, store.len());
    let mut probe = store.clone();
    let (mut all_a, mut all_n) = (Vec::new(), Vec::new());
    for k in 0..store.len() {
        let id = ParamId(k);
        let analytic = grads
            .get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).rows(), store.get(id).cols()));
        let numeric = numeric_gradient(store.get(id), &mut |t| {
            *probe.get_mut(id) = t.clone();
            let mut g = Graph::new();
            let root = build(&mut g, &probe);
            g.value(root).item()
        });
        *probe.get_mut(id) = store.get(id).clone();
        all_a.extend_from_slice(analytic.data());
        all_n.extend_from_slice(numeric.data());
    }
    let n = all_a.len();
    relative_error(&Tensor::from_vec(1, n, all_a), &Tensor::from_vec(1, n, all_n))
}
