//! Trajectory refinement against the predicted future BEV feature. Each
//! waypoint query samples the feature at its prior waypoint plus learned
//! offsets (deformable attention) and is residually updated; the refined
//! queries decode a correction added to the prior trajectory.
//!
//! Gradients flow into the feature through the sampled values and into the
//! prior trajectory through the sample coordinates, so planning losses
//! supervise the predicted future feature sparsely.

use crate::autodiff::{Graph, Scalar, VarId};
use crate::geometry::GridSpec;
use crate::nn::{BoundParams, Linear, Mlp2, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct DeformConfig {
    pub heads: usize,
    pub points_per_head: usize,
    pub c: usize,
}

impl DeformConfig {
    pub fn new(heads: usize, points_per_head: usize, c: usize) -> Self {
        assert!(c % heads == 0, "channel count {c} not divisible by {heads} heads");
        assert!(points_per_head >= 1, "need at least one sample point per head");
        DeformConfig { heads, points_per_head, c }
    }
}

#[derive(Clone, Debug)]
pub struct Refiner {
    pub cfg: DeformConfig,
    pub n_t: usize,
    value_proj: Linear,
    offset: Linear,
    weight: Linear,
    out_proj: Linear,
    decode: Mlp2,
}

impl Refiner {
    pub fn new(n_t: usize, cfg: DeformConfig) -> Self {
        let c = cfg.c;
        let hp = cfg.heads * cfg.points_per_head;
        Refiner {
            cfg,
            n_t,
            value_proj: Linear::new("refine.value_proj", c, c, false),
            // offsets and output start at zero: the module is transparent
            // until training moves it
            offset: Linear::new("refine.offset", c, hp * 2, true),
            weight: Linear::new("refine.weight", c, hp, true),
            out_proj: Linear::new("refine.out_proj", c, c, true),
            decode: Mlp2::new("refine.decode", c, c, 2, true),
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        self.value_proj.init(store, seed);
        self.offset.init_zero(store);
        self.weight.init(store, seed);
        self.out_proj.init_zero(store);
        self.decode.init(store, seed);
    }

    /// Deformable update of the waypoint queries. `t_prior` is [N_t, 2] in
    /// meters (ego frame); `b_future` is [C, H*W]. Returns refined queries
    /// [N_t, C].
    pub fn refine<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        w: VarId,
        b_future: VarId,
        t_prior: VarId,
        spec: &GridSpec,
    ) -> VarId {
        assert_eq!(g.value(w).shape, vec![self.n_t, self.cfg.c]);
        assert_eq!(g.value(t_prior).shape, vec![self.n_t, 2]);
        assert_eq!(g.value(b_future).rows(), self.cfg.c);
        let (heads, pts_per_head, c) = (self.cfg.heads, self.cfg.points_per_head, self.cfg.c);
        let hd = c / heads;
        let hp = heads * pts_per_head;
        let clamp = T::from_f64(spec.h as f64 / 2.0);

        // project channels once, per spatial cell
        let bt = g.transpose(b_future); // [HW, C]
        let vt = self.value_proj.forward(g, p, bt);
        let values = g.transpose(vt); // [C, HW]

        let refs = spec.world_to_grid_var(g, t_prior); // [N_t, 2] grid coords

        let mut rows = Vec::with_capacity(self.n_t);
        for i in 0..self.n_t {
            let wi = g.slice_rows(w, i, 1); // [1, C]
            let refi = g.slice_rows(refs, i, 1); // [1, 2]

            let off = self.offset.forward(g, p, wi); // [1, HP*2]
            let off = g.reshape(off, &[hp, 2]);
            let off = g.clamp(off, -clamp, clamp);
            let pts = g.add_row_broadcast(off, refi); // [HP, 2]

            let sampled = g.bilinear_sample(values, pts, spec.h, spec.w); // [HP, C]

            let wts = self.weight.forward(g, p, wi); // [1, HP]
            let wts = g.reshape(wts, &[heads, pts_per_head]);
            let wts = g.softmax_rows(wts); // per-head distribution over points

            let mut head_outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let vals_h = g.slice_rows(sampled, h * pts_per_head, pts_per_head); // [P, C]
                let vals_h = g.slice_cols(vals_h, h * hd, hd); // [P, hd]
                let w_h = g.slice_rows(wts, h, 1); // [1, P]
                head_outs.push(g.matmul(w_h, vals_h)); // [1, hd]
            }
            let concat = g.concat_cols(&head_outs); // [1, C]
            let update = self.out_proj.forward(g, p, concat);
            rows.push(g.add(wi, update));
        }
        g.concat_rows(&rows)
    }

    /// T_final = T_prior + MLP(w_refined); an exact pass-through of the
    /// prior at initialization.
    pub fn decode_final<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        w_refined: VarId,
        t_prior: VarId,
    ) -> VarId {
        let delta = self.decode.forward(g, p, w_refined);
        g.add(t_prior, delta)
    }
}
