//! Gradient verification suite: every differentiable block is checked
//! against central finite differences at 64-bit, covering both its inputs
//! and its parameters. Shared by the `gradcheck` subcommand and the
//! acceptance tests.

use crate::autodiff::{grad_check_multi, rel_err, Graph, Tensor, VarId};
use crate::fgtr::{DeformConfig, Refiner};
use crate::geometry::GridSpec;
use crate::nn::{BoundParams, MultiHeadAttention, ParamStore};
use crate::scene::SceneEncoder;
use crate::world::{WorldModel, WorldVariant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Maximum relative error allowed for any block.
pub const GRAD_TOL: f64 = 1e-4;

const EPS: f64 = 1e-5;

fn rand_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_vec(shape, data)
}

/// Like [`grad_check_multi`], but also differentiates with respect to every
/// parameter in the store. Returns the worst relative error over all input
/// and parameter coordinates.
pub fn check_module<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    build: F,
) -> f64
where
    F: Fn(&mut Graph<f64>, &BoundParams, &[VarId]) -> VarId,
{
    let eval = |s: &ParamStore<f64>, ins: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let p = BoundParams::bind(&mut g, s);
        let ids: Vec<VarId> = ins.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, &p, &ids);
        g.value(loss).item()
    };

    let mut g = Graph::new();
    let p = BoundParams::bind(&mut g, store);
    let ids: Vec<VarId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = build(&mut g, &p, &ids);
    let grads = g.backward(loss);

    let mut worst = 0.0f64;
    let mut probes = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(ids[which], &input.shape);
        for i in 0..input.numel() {
            let orig = probes[which].data[i];
            probes[which].data[i] = orig + EPS;
            let fp = eval(store, &probes);
            probes[which].data[i] = orig - EPS;
            let fm = eval(store, &probes);
            probes[which].data[i] = orig;
            worst = worst.max(rel_err(analytic.data[i], (fp - fm) / (2.0 * EPS)));
        }
    }
    let names: Vec<String> = store.names().cloned().collect();
    let mut probe_store = store.clone();
    for name in &names {
        let shape = store.get(name).shape.clone();
        let analytic = grads.get_or_zeros(p.var(name), &shape);
        for i in 0..analytic.numel() {
            let orig = probe_store.get(name).data[i];
            probe_store.get_mut(name).data[i] = orig + EPS;
            let fp = eval(&probe_store, inputs);
            probe_store.get_mut(name).data[i] = orig - EPS;
            let fm = eval(&probe_store, inputs);
            probe_store.get_mut(name).data[i] = orig;
            worst = worst.max(rel_err(analytic.data[i], (fp - fm) / (2.0 * EPS)));
        }
    }
    worst
}

fn check_conv() -> f64 {
    let x = rand_tensor(&[2, 25], 10, 1.0);
    let w = rand_tensor(&[3, 2 * 9], 11, 0.5);
    let target = rand_tensor(&[3, 25], 12, 1.0);
    grad_check_multi(
        |g, ids| {
            let y = g.conv2d(ids[0], ids[1], 5, 5, 3);
            let t = g.constant(target.clone());
            g.mse_mean(y, t)
        },
        &[x, w],
        EPS,
    )
}

fn check_softmax() -> f64 {
    let x = rand_tensor(&[3, 6], 20, 2.0);
    let target = rand_tensor(&[3, 6], 21, 1.0);
    grad_check_multi(
        |g, ids| {
            let s = g.softmax_rows(ids[0]);
            let t = g.constant(target.clone());
            g.mse_mean(s, t)
        },
        &[x],
        EPS,
    )
}

fn check_attention() -> f64 {
    let attn = MultiHeadAttention::new("attn", 4, 2, true);
    let mut store = ParamStore::<f64>::new();
    attn.init(&mut store, 30);
    let x = rand_tensor(&[3, 4], 31, 1.0);
    let target = rand_tensor(&[3, 4], 32, 1.0);
    check_module(&store, &[x], |g, p, ids| {
        let y = attn.forward(g, p, ids[0], ids[0], ids[0]);
        let t = g.constant(target.clone());
        g.mse_mean(y, t)
    })
}

fn check_bilinear() -> f64 {
    let feat = rand_tensor(&[2, 25], 40, 1.0);
    // fractional sample points, well away from integer cell boundaries
    let pts = Tensor::from_vec(&[4, 2], vec![0.3, 0.7, 1.4, 2.6, 3.25, 0.55, 2.8, 3.4]);
    let target = rand_tensor(&[4, 2], 41, 1.0);
    grad_check_multi(
        |g, ids| {
            let s = g.bilinear_sample(ids[0], ids[1], 5, 5);
            let t = g.constant(target.clone());
            g.mse_mean(s, t)
        },
        &[feat, pts],
        EPS,
    )
}

fn check_token_learner() -> f64 {
    let spec = GridSpec::new(5, 5, 1.0);
    let enc = SceneEncoder::new(4, 3, 3, 1, spec);
    let mut store = ParamStore::<f64>::new();
    enc.init(&mut store, 50);
    let r0 = rand_tensor(&[3, 25], 51, 1.0);
    let r1 = rand_tensor(&[3, 25], 52, 1.0);
    let target = rand_tensor(&[3, 4], 53, 1.0);
    check_module(&store, &[r0, r1], |g, p, ids| {
        let f0 = enc.encode_raster(g, p, ids[0], 0);
        let f1 = enc.encode_raster(g, p, ids[1], 0);
        let fused = enc.fuse_temporal(g, p, &[f0, f1]);
        let (s_fuse, _) = enc.token_learner(g, p, fused);
        let t = g.constant(target.clone());
        g.mse_mean(s_fuse, t)
    })
}

fn check_token_fuser() -> f64 {
    let wm = WorldModel::new(4, 3, 1, 2, WorldVariant::Residual, false);
    let mut store = ParamStore::<f64>::new();
    // only the fuser parameters participate in this block
    crate::nn::Linear::new("world.fuser", 4, 3, true).init(&mut store, 60);
    let r_hat = rand_tensor(&[3, 4], 61, 1.0);
    let b_fuse = rand_tensor(&[4, 25], 62, 1.0);
    let target = rand_tensor(&[4, 25], 63, 1.0);
    check_module(&store, &[r_hat, b_fuse], |g, p, ids| {
        let y = wm.token_fuser(g, p, ids[0], ids[1]);
        let t = g.constant(target.clone());
        g.mse_mean(y, t)
    })
}

fn check_deformable() -> f64 {
    let spec = GridSpec::new(5, 5, 1.0);
    let refiner = Refiner::new(2, DeformConfig::new(2, 2, 4));
    let mut store = ParamStore::<f64>::new();
    refiner.init(&mut store, 70);
    // the offset, output, and decode heads start at zero; give them small
    // nonzero values so every gradient path is exercised
    for name in ["refine.offset.weight", "refine.out_proj.weight", "refine.decode.l2.weight"] {
        let t = store.get_mut(name);
        let filled = rand_tensor(&t.shape, 71, 0.2);
        t.data.copy_from_slice(&filled.data);
    }
    let w = rand_tensor(&[2, 4], 72, 1.0);
    let b_future = rand_tensor(&[4, 25], 73, 1.0);
    let t_prior = Tensor::from_vec(&[2, 2], vec![0.31, -0.57, 0.72, 0.13]);
    let target = rand_tensor(&[2, 2], 74, 1.0);
    check_module(&store, &[w, b_future, t_prior], |g, p, ids| {
        let refined = refiner.refine(g, p, ids[0], ids[1], ids[2], &spec);
        let t_final = refiner.decode_final(g, p, refined, ids[2]);
        let t = g.constant(target.clone());
        g.mse_mean(t_final, t)
    })
}

fn check_l1() -> f64 {
    // keep |a - b| away from zero: the L1 kink breaks finite differences
    let a = rand_tensor(&[3, 4], 80, 1.0);
    let b = a.map(|v| v + 0.5);
    grad_check_multi(|g, ids| g.l1_mean(ids[0], ids[1]), &[a, b], EPS)
}

/// Runs every block check; returns (block name, max relative error).
pub fn run_gradient_suite() -> Vec<(&'static str, f64)> {
    vec![
        ("conv3x3", check_conv()),
        ("softmax", check_softmax()),
        ("attention", check_attention()),
        ("bilinear_sampling", check_bilinear()),
        ("token_learner", check_token_learner()),
        ("token_fuser", check_token_fuser()),
        ("deformable_refinement", check_deformable()),
        ("l1_loss", check_l1()),
    ]
}
