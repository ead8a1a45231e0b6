//! Scene dynamics from temporal residuals: attention over the per-step
//! residuals predicts the next-step dynamics, which are expanded back onto
//! the BEV grid around the fused feature. A same-capacity baseline consumes
//! the full per-timestep queries instead of residuals, and an optional loss
//! supervises the predicted future feature with the real next frame.

use crate::autodiff::{Graph, Scalar, VarId};
use crate::geometry::{warp_feature, Pose2};
use crate::nn::{BoundParams, Linear, MultiHeadAttention, ParamStore};
use crate::scene::SceneEncoder;

/// Which inputs the dynamics attention consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WorldVariant {
    /// attention over temporal residuals of the scene queries
    Residual,
    /// attention over the full scene queries (no static/dynamic separation)
    Normal,
}

#[derive(Clone, Debug)]
pub struct WorldModel {
    pub c: usize,
    pub n_s: usize,
    pub k: usize,
    pub variant: WorldVariant,
    /// one attention block shared across the k steps, or one per step
    pub per_step_blocks: bool,
    blocks: Vec<MultiHeadAttention>,
    fuser: Linear,
}

impl WorldModel {
    pub fn new(c: usize, n_s: usize, k: usize, heads: usize, variant: WorldVariant, per_step_blocks: bool) -> Self {
        assert!(k >= 1, "world model needs at least one step, got k={k}");
        let n_blocks = if per_step_blocks { k } else { 1 };
        // bias-free, normalization-free: a zero input maps to an exact zero,
        // which is what makes the static-scene identity hold bit-exact
        let blocks = (0..n_blocks)
            .map(|i| MultiHeadAttention::new(&format!("world.attn{i}"), c, heads, false))
            .collect();
        WorldModel {
            c,
            n_s,
            k,
            variant,
            per_step_blocks,
            blocks,
            fuser: Linear::new("world.fuser", c, n_s, true),
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        for b in &self.blocks {
            b.init(store, seed);
        }
        self.fuser.init(store, seed);
    }

    fn block(&self, i: usize) -> &MultiHeadAttention {
        if self.per_step_blocks {
            &self.blocks[i]
        } else {
            &self.blocks[0]
        }
    }

    /// Predicted dynamics [N_s, C] as the sum of k per-step self-attention
    /// outputs. For the residual variant `steps` are the k residuals; for
    /// the normal variant they are the k most recent full query sets, so
    /// both variants run the identical parameter set.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &BoundParams, steps: &[VarId]) -> VarId {
        assert!(!steps.is_empty(), "world model forward needs at least one step input");
        assert_eq!(
            steps.len(),
            self.k,
            "world model configured for k={} steps, got {}",
            self.k,
            steps.len()
        );
        let mut acc: Option<VarId> = None;
        for (i, &s) in steps.iter().enumerate() {
            let out = self.block(i).forward(g, p, s, s, s);
            acc = Some(match acc {
                None => out,
                Some(a) => g.add(a, out),
            });
        }
        acc.unwrap()
    }

    /// Picks the variant's inputs from the k+1 per-timestep queries
    /// (ordered oldest -> newest) and their k residuals.
    pub fn select_steps(&self, queries: &[VarId], residuals: &[VarId]) -> Vec<VarId> {
        assert_eq!(queries.len(), self.k + 1);
        assert_eq!(residuals.len(), self.k);
        match self.variant {
            WorldVariant::Residual => residuals.to_vec(),
            WorldVariant::Normal => queries[1..].to_vec(),
        }
    }

    /// Expands the predicted dynamics onto the grid around the fused
    /// feature: per-cell mixing weights M = linear(b_fuse) in R^{N_s x HW},
    /// output = r_hat^T M + b_fuse. Linear in r_hat, exact identity at
    /// r_hat = 0.
    pub fn token_fuser<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        r_hat: VarId,
        b_fuse: VarId,
    ) -> VarId {
        assert_eq!(g.value(r_hat).shape, vec![self.n_s, self.c]);
        assert_eq!(g.value(b_fuse).rows(), self.c);
        let w = p.var("world.fuser.weight"); // [N_s, C]
        let m = g.matmul(w, b_fuse); // [N_s, HW]
        let bias = p.var("world.fuser.bias");
        let m = g.add_col_broadcast(m, bias);
        let rt = g.transpose(r_hat); // [C, N_s]
        let dyn_part = g.matmul(rt, m); // [C, HW]
        g.add(dyn_part, b_fuse)
    }

    /// Number of trainable values in this model's parameter set.
    pub fn param_count<T: Scalar>(&self, seed: u64) -> usize
    where
        T: Scalar,
    {
        let mut store = ParamStore::<T>::new();
        self.init(&mut store, seed);
        store.num_values()
    }
}

/// Mean squared error between the predicted future feature and the encoded
/// real next-frame raster, warped into the current ego frame. The target
/// branch is gradient-detached so only the prediction is pulled toward it.
///
/// `rel_next` is the pose of the next frame expressed in the current frame,
/// i.e. the same convention as aligning past frames.
pub fn future_supervision_loss<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    encoder: &SceneEncoder,
    b_future: VarId,
    raster_next: VarId,
    rel_next: Pose2,
) -> VarId {
    let feat = encoder.encode_raster(g, p, raster_next, 0);
    let aligned = warp_feature(g, feat.var, rel_next, &encoder.spec);
    let target = g.detach(aligned);
    g.mse_mean(b_future, target)
}
