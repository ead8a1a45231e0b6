//! Central finite-difference oracle for gradient verification. Runs at f64;
//! finite differences are unreliable at f32.

use super::graph::{Graph, VarId};
use super::tensor::Tensor;

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the analytic gradient of a scalar function against central
/// differences `(f(x+eps e) - f(x-eps e)) / 2 eps`, per coordinate.
/// Returns the maximum relative error.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, analytic: &Tensor<f64>, eps: f64) -> f64
where
    F: Fn(&Tensor<f64>) -> f64,
{
    assert_eq!(x.shape, analytic.shape, "analytic gradient shape mismatch");
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let fp = f(&probe);
        probe.data[i] = orig - eps;
        let fm = f(&probe);
        probe.data[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        worst = worst.max(rel_err(analytic.data[i], numeric));
    }
    worst
}

/// Gradient check for a graph-building function of several inputs: the
/// analytic gradients come from one backward pass, the numeric ones from
/// central differences on each input coordinate. Returns the max relative
/// error over all inputs.
pub fn grad_check_multi<B>(build: B, inputs: &[Tensor<f64>], eps: f64) -> f64
where
    B: Fn(&mut Graph<f64>, &[VarId]) -> VarId,
{
    let eval = |tensors: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<VarId> = tensors.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, &ids);
        g.value(loss).item()
    };

    let mut g = Graph::new();
    let ids: Vec<VarId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = build(&mut g, &ids);
    let grads = g.backward(loss);

    let mut worst = 0.0f64;
    let mut probes: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(ids[which], &input.shape);
        for i in 0..input.numel() {
            let orig = probes[which].data[i];
            probes[which].data[i] = orig + eps;
            let fp = eval(&probes);
            probes[which].data[i] = orig - eps;
            let fm = eval(&probes);
            probes[which].data[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            worst = worst.max(rel_err(analytic.data[i], numeric));
        }
    }
    worst
}

/// Single-input convenience wrapper around [`grad_check_multi`].
pub fn grad_check<B>(build: B, x: &Tensor<f64>, eps: f64) -> f64
where
    B: Fn(&mut Graph<f64>, VarId) -> VarId,
{
    grad_check_multi(|g, ids| build(g, ids[0]), std::slice::from_ref(x), eps)
}
