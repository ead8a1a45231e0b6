//! Full pipeline assembly: raster encoding and temporal fusion, prior
//! trajectory decoding, dynamics prediction, and trajectory refinement,
//! with per-component switches for the ablation arms.
//!
//! Parameter initialization is derived from the parameter name, so two
//! configurations that share a block initialize it identically under the
//! same seed — comparisons between arms are paired.

use crate::autodiff::{Graph, Scalar, VarId};
use crate::fgtr::{DeformConfig, Refiner};
use crate::geometry::{warp_feature, GridSpec, Pose2};
use crate::nn::{BoundParams, ParamStore};
use crate::planner::{EgoStatus, PriorPlanner};
use crate::scene::{temporal_residuals, BevFeature, SceneEncoder};
use crate::world::{future_supervision_loss, WorldModel, WorldVariant};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub c: usize,
    /// hidden width of the raster encoder convs
    pub hidden: usize,
    pub n_s: usize,
    pub n_t: usize,
    /// past frames
    pub k: usize,
    /// attention heads in the planner and dynamics blocks
    pub heads: usize,
    pub deform_heads: usize,
    pub deform_points: usize,
    /// refinement passes; >1 reuses the same parameters
    pub fgtr_layers: usize,
    pub spec: GridSpec,
    pub world_variant: WorldVariant,
    /// one shared dynamics attention block, or one per step
    pub per_step_world_blocks: bool,
    pub use_world: bool,
    pub use_fgtr: bool,
    pub use_ego_status: bool,
    pub future_supervision: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            c: 32,
            hidden: 8,
            n_s: 16,
            n_t: 6,
            k: 2,
            heads: 4,
            deform_heads: 4,
            deform_points: 4,
            fgtr_layers: 1,
            spec: GridSpec::new(48, 48, 1.0),
            world_variant: WorldVariant::Residual,
            per_step_world_blocks: false,
            use_world: true,
            use_fgtr: true,
            use_ego_status: false,
            future_supervision: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) {
        assert!(self.c > 0 && self.n_s > 0 && self.n_t > 0 && self.k >= 1);
        assert!(self.fgtr_layers >= 1, "need at least one refinement pass");
        assert!(
            !self.future_supervision || self.use_world,
            "future supervision requires the world model"
        );
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: SceneEncoder,
    pub planner: PriorPlanner,
    pub world: WorldModel,
    pub refiner: Refiner,
}

/// Graph inputs for one sample. Rasters and poses are ordered oldest to
/// newest; `rel_poses[i]` is the pose of past frame i expressed in the
/// current frame (one entry per past frame, none for the current).
pub struct ForwardInputs<'a> {
    pub rasters: &'a [VarId],
    pub rel_poses: &'a [Pose2],
    pub ego: Option<&'a EgoStatus>,
}

pub struct ForwardOut {
    pub t_prior: VarId,
    pub t_final: VarId,
    pub b_fuse: VarId,
    pub b_future: Option<VarId>,
    pub s_fuse: VarId,
    /// per-timestep scene queries, oldest -> newest
    pub queries: Vec<VarId>,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Self {
        cfg.validate();
        Model {
            cfg,
            encoder: SceneEncoder::new(cfg.c, cfg.hidden, cfg.n_s, cfg.k, cfg.spec),
            planner: PriorPlanner::new(cfg.n_t, cfg.c, cfg.heads),
            world: WorldModel::new(
                cfg.c,
                cfg.n_s,
                cfg.k,
                cfg.heads,
                cfg.world_variant,
                cfg.per_step_world_blocks,
            ),
            refiner: Refiner::new(cfg.n_t, DeformConfig::new(cfg.deform_heads, cfg.deform_points, cfg.c)),
        }
    }

    /// Initializes exactly the parameters the configuration uses.
    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        self.encoder.init(store, seed);
        self.planner.init(store, seed);
        if self.cfg.use_world {
            self.world.init(store, seed);
        }
        if self.cfg.use_fgtr {
            self.refiner.init(store, seed);
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        inputs: &ForwardInputs,
    ) -> ForwardOut {
        let cfg = &self.cfg;
        assert_eq!(inputs.rasters.len(), cfg.k + 1, "need k+1 raster frames");
        assert_eq!(inputs.rel_poses.len(), cfg.k, "need one relative pose per past frame");

        // encode each frame in its own ego frame, then align the past ones
        let mut aligned: Vec<BevFeature> = Vec::with_capacity(cfg.k + 1);
        for (i, &raster) in inputs.rasters.iter().enumerate() {
            let age = cfg.k - i;
            let feat = self.encoder.encode_raster(g, p, raster, age);
            if age == 0 {
                aligned.push(feat);
            } else {
                let warped = warp_feature(g, feat.var, inputs.rel_poses[i], &cfg.spec);
                aligned.push(BevFeature { var: warped, age, aligned: true });
            }
        }

        // fusion takes frames newest-first
        let mut newest_first = aligned.clone();
        newest_first.reverse();
        let b_fuse = self.encoder.fuse_temporal(g, p, &newest_first);

        let (s_fuse, maps) = self.encoder.token_learner(g, p, b_fuse);
        let queries: Vec<VarId> = aligned
            .iter()
            .map(|f| self.encoder.per_timestep_queries(g, maps, *f))
            .collect();

        let s = self.planner.scene_self_attention(g, p, s_fuse);
        let ego = if cfg.use_ego_status { inputs.ego } else { None };
        let w = self.planner.waypoint_queries(g, p, ego);
        let (t_prior, w_out) = self.planner.decode_prior(g, p, w, s);

        let b_future = if cfg.use_world {
            let residuals = temporal_residuals(g, &queries);
            let steps = self.world.select_steps(&queries, &residuals);
            let r_hat = self.world.forward(g, p, &steps);
            Some(self.world.token_fuser(g, p, r_hat, b_fuse.var))
        } else {
            None
        };

        let t_final = if cfg.use_fgtr {
            // without the world model the refinement target is the fused
            // present-time feature
            let target = b_future.unwrap_or(b_fuse.var);
            let mut w_ref = w_out;
            for _ in 0..cfg.fgtr_layers {
                w_ref = self.refiner.refine(g, p, w_ref, target, t_prior, &cfg.spec);
            }
            self.refiner.decode_final(g, p, w_ref, t_prior)
        } else {
            t_prior
        };

        ForwardOut { t_prior, t_final, b_fuse: b_fuse.var, b_future, s_fuse, queries }
    }

    /// Auxiliary loss pulling the predicted future feature toward the
    /// encoded real next frame (ablation arm only).
    pub fn supervision_loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        out: &ForwardOut,
        raster_next: VarId,
        rel_next: Pose2,
    ) -> VarId {
        let b_future = out
            .b_future
            .expect("future supervision needs the world model enabled");
        future_supervision_loss(g, p, &self.encoder, b_future, raster_next, rel_next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_cfg() -> ModelConfig {
        ModelConfig {
            c: 8,
            hidden: 4,
            n_s: 4,
            n_t: 3,
            k: 2,
            heads: 2,
            deform_heads: 2,
            deform_points: 2,
            fgtr_layers: 1,
            spec: GridSpec::new(12, 12, 1.0),
            ..ModelConfig::default()
        }
    }

    fn rand_raster(seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[3, 144], (0..3 * 144).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    fn run_forward(cfg: ModelConfig, raster_seeds: [u64; 3]) -> (Graph<f64>, ForwardOut) {
        let model = Model::new(cfg);
        let mut store = ParamStore::<f64>::new();
        model.init(&mut store, 11);
        let mut g = Graph::new();
        let p = BoundParams::bind(&mut g, &store);
        let rasters: Vec<VarId> = raster_seeds
            .iter()
            .map(|&s| g.constant(rand_raster(s)))
            .collect();
        let rel = vec![Pose2::new(-1.0, 0.0, 0.0), Pose2::new(-0.5, 0.0, 0.0)];
        let out = model.forward(&mut g, &p, &ForwardInputs { rasters: &rasters, rel_poses: &rel, ego: None });
        (g, out)
    }

    #[test]
    fn forward_shapes_and_finiteness() {
        let (g, out) = run_forward(toy_cfg(), [1, 2, 3]);
        assert_eq!(g.value(out.t_prior).shape, vec![3, 2]);
        assert_eq!(g.value(out.t_final).shape, vec![3, 2]);
        assert_eq!(g.value(out.b_fuse).shape, vec![8, 144]);
        assert_eq!(g.value(out.b_future.unwrap()).shape, vec![8, 144]);
        assert_eq!(g.value(out.s_fuse).shape, vec![4, 8]);
        assert_eq!(out.queries.len(), 3);
        assert!(g.value(out.t_final).all_finite());
    }

    #[test]
    fn initialization_decodes_zero_prior_and_passthrough_final() {
        let (g, out) = run_forward(toy_cfg(), [4, 5, 6]);
        assert!(g.value(out.t_prior).data.iter().all(|&v| v == 0.0));
        assert_eq!(g.value(out.t_final).data, g.value(out.t_prior).data);
    }

    #[test]
    fn static_scene_future_equals_present_bit_exact() {
        let cfg = toy_cfg();
        let model = Model::new(cfg);
        let mut store = ParamStore::<f64>::new();
        model.init(&mut store, 12);
        let mut g = Graph::new();
        let p = BoundParams::bind(&mut g, &store);
        let data = rand_raster(7);
        let rasters: Vec<VarId> = (0..3).map(|_| g.constant(data.clone())).collect();
        let rel = vec![Pose2::identity(), Pose2::identity()];
        let out = model.forward(&mut g, &p, &ForwardInputs { rasters: &rasters, rel_poses: &rel, ego: None });
        assert_eq!(g.value(out.b_future.unwrap()).data, g.value(out.b_fuse).data);
    }

    #[test]
    fn normal_variant_differs_on_static_scene() {
        let cfg = ModelConfig { world_variant: WorldVariant::Normal, ..toy_cfg() };
        let model = Model::new(cfg);
        let mut store = ParamStore::<f64>::new();
        model.init(&mut store, 12);
        let mut g = Graph::new();
        let p = BoundParams::bind(&mut g, &store);
        let data = rand_raster(7);
        let rasters: Vec<VarId> = (0..3).map(|_| g.constant(data.clone())).collect();
        let rel = vec![Pose2::identity(), Pose2::identity()];
        let out = model.forward(&mut g, &p, &ForwardInputs { rasters: &rasters, rel_poses: &rel, ego: None });
        let bf = g.value(out.b_future.unwrap());
        let bp = g.value(out.b_fuse);
        let max_diff = bf
            .data
            .iter()
            .zip(bp.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff > 1e-6, "normal variant unexpectedly inert: {max_diff}");
    }

    #[test]
    fn shared_blocks_share_initialization_across_arms() {
        let full = Model::new(toy_cfg());
        let baseline = Model::new(ModelConfig { use_world: false, use_fgtr: false, ..toy_cfg() });
        let mut s_full = ParamStore::<f64>::new();
        let mut s_base = ParamStore::<f64>::new();
        full.init(&mut s_full, 21);
        baseline.init(&mut s_base, 21);
        assert!(s_base.len() < s_full.len());
        for (name, t) in s_base.iter() {
            assert_eq!(t, s_full.get(name), "shared block {name} initialized differently");
        }
    }

    #[test]
    fn baseline_final_equals_prior() {
        let cfg = ModelConfig { use_world: false, use_fgtr: false, ..toy_cfg() };
        let (g, out) = run_forward(cfg, [8, 9, 10]);
        assert!(out.b_future.is_none());
        assert_eq!(out.t_final, out.t_prior);
        let _ = g;
    }

    #[test]
    fn gradient_reaches_every_enabled_block() {
        let model = Model::new(toy_cfg());
        let mut store = ParamStore::<f64>::new();
        model.init(&mut store, 13);
        let mut g = Graph::new();
        let p = BoundParams::bind(&mut g, &store);
        let rasters: Vec<VarId> = [14u64, 15, 16].iter().map(|&s| g.constant(rand_raster(s))).collect();
        let rel = vec![Pose2::new(-1.0, 0.2, 0.05), Pose2::new(-0.5, 0.1, 0.02)];
        let out = model.forward(&mut g, &p, &ForwardInputs { rasters: &rasters, rel_poses: &rel, ego: None });
        let gt = g.constant(Tensor::from_f64_slice(
            &[3, 2],
            &[1.0, 0.0, 2.0, 0.1, 3.0, 0.2],
        ));
        let l_prior = g.l1_mean(out.t_prior, gt);
        let l_final = g.l1_mean(out.t_final, gt);
        let loss = g.add(l_prior, l_final);
        let grads = g.backward(loss);
        for name in [
            "encoder.conv1.weight",
            "encoder.fuse.weight",
            "encoder.sa.weight",
            "planner.waypoints",
            "planner.decode.l2.weight",
            "world.attn0.q_proj.weight",
            "world.fuser.weight",
            "refine.value_proj.weight",
            "refine.decode.l2.weight",
        ] {
            assert!(grads.get(p.var(name)).is_some(), "no gradient for {name}");
        }
    }

    #[test]
    fn ego_status_changes_prior_only_when_enabled() {
        let data: [u64; 3] = [17, 18, 19];
        let ego = EgoStatus { vx: 3.0, vy: 0.0, yaw_rate: 0.1, command: [0.0, 1.0, 0.0] };
        let run = |use_ego: bool, pass_ego: bool| {
            let cfg = ModelConfig { use_ego_status: use_ego, ..toy_cfg() };
            let model = Model::new(cfg);
            let mut store = ParamStore::<f64>::new();
            model.init(&mut store, 14);
            // non-zero decode head so ego conditioning can show up
            let mut rng = ChaCha8Rng::seed_from_u64(123);
            for v in store.get_mut("planner.decode.l2.weight").data.iter_mut() {
                *v = rng.gen_range(-0.1..0.1);
            }
            let mut g = Graph::new();
            let p = BoundParams::bind(&mut g, &store);
            let rasters: Vec<VarId> = data.iter().map(|&s| g.constant(rand_raster(s))).collect();
            let rel = vec![Pose2::identity(), Pose2::identity()];
            let inputs = ForwardInputs {
                rasters: &rasters,
                rel_poses: &rel,
                ego: if pass_ego { Some(&ego) } else { None },
            };
            let out = model.forward(&mut g, &p, &inputs);
            g.value(out.t_prior).clone()
        };
        let off = run(false, true);
        let off_none = run(false, false);
        assert_eq!(off.data, off_none.data, "ego must be inert when disabled");
        let on = run(true, true);
        assert!(on.data.iter().zip(off.data.iter()).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    #[should_panic(expected = "future supervision requires the world model")]
    fn supervision_without_world_is_rejected() {
        let cfg = ModelConfig { use_world: false, future_supervision: true, ..toy_cfg() };
        let _ = Model::new(cfg);
    }
}
