//! Prior trajectory prediction: learned waypoint queries cross-attend to the
//! fused scene queries and are decoded to metric waypoints. Ego status is an
//! optional additive conditioning of the waypoint queries.

use crate::autodiff::{Graph, Scalar, Tensor, VarId};
use crate::nn::{BoundParams, Linear, Mlp2, MultiHeadAttention, ParamStore};

pub const EGO_STATUS_DIM: usize = 6;

/// Ego kinematic state plus navigation command, fed to the planner when the
/// ego-status configuration is enabled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EgoStatus {
    /// velocity in the ego frame, m/s
    pub vx: f64,
    pub vy: f64,
    /// rad/s
    pub yaw_rate: f64,
    /// one-hot {left, straight, right}
    pub command: [f64; 3],
}

impl EgoStatus {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.vx,
            self.vy,
            self.yaw_rate,
            self.command[0],
            self.command[1],
            self.command[2],
        ]
    }

    pub fn validate(&self) {
        let active: usize = self.command.iter().filter(|&&c| c != 0.0).count();
        assert_eq!(active, 1, "ego command must be one-hot, got {:?}", self.command);
    }
}

#[derive(Clone, Debug)]
pub struct PriorPlanner {
    pub n_t: usize,
    pub c: usize,
    self_attn: MultiHeadAttention,
    cross_attn: MultiHeadAttention,
    ego_proj: Linear,
    decode: Mlp2,
}

impl PriorPlanner {
    pub fn new(n_t: usize, c: usize, heads: usize) -> Self {
        PriorPlanner {
            n_t,
            c,
            self_attn: MultiHeadAttention::new("planner.self_attn", c, heads, true),
            cross_attn: MultiHeadAttention::new("planner.cross_attn", c, heads, true),
            // bias-free so a zero ego vector leaves the queries untouched
            ego_proj: Linear::new("planner.ego_proj", EGO_STATUS_DIM, c, false),
            // final layer zero-initialized: training starts from "stay put"
            decode: Mlp2::new("planner.decode", c, c, 2, true),
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        self.self_attn.init(store, seed);
        self.cross_attn.init(store, seed);
        self.ego_proj.init(store, seed);
        self.decode.init(store, seed);
        let wq = crate::nn::rng_for(seed, "planner.waypoints");
        let mut rng = wq;
        use rand::Rng;
        let bound = 1.0 / (self.c as f64).sqrt();
        let data = (0..self.n_t * self.c)
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        store.insert("planner.waypoints", Tensor::from_vec(&[self.n_t, self.c], data));
    }

    /// One residual self-attention block over the scene queries.
    pub fn scene_self_attention<T: Scalar>(&self, g: &mut Graph<T>, p: &BoundParams, s_fuse: VarId) -> VarId {
        let attended = self.self_attn.forward(g, p, s_fuse, s_fuse, s_fuse);
        g.add(s_fuse, attended)
    }

    /// Learned waypoint queries, optionally conditioned on ego status.
    pub fn waypoint_queries<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        ego: Option<&EgoStatus>,
    ) -> VarId {
        let w = p.var("planner.waypoints");
        match ego {
            None => w,
            Some(status) => {
                status.validate();
                let ego_vec = g.constant(Tensor::from_f64_slice(&[1, EGO_STATUS_DIM], &status.to_vec()));
                let proj = self.ego_proj.forward(g, p, ego_vec); // [1, C]
                g.add_row_broadcast(w, proj)
            }
        }
    }

    /// Cross-attention of waypoint queries over scene queries, then a
    /// per-row MLP decode to metric waypoints [N_t, 2].
    pub fn decode_prior<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        w: VarId,
        s: VarId,
    ) -> (VarId, VarId) {
        let attended = self.cross_attn.forward(g, p, w, s, s);
        let w_out = g.add(w, attended);
        let prior = self.decode.forward(g, p, w_out);
        (prior, w_out)
    }
}
