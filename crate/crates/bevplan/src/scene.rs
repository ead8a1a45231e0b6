//! Scene encoding: raster -> BEV feature, temporal fusion of aligned
//! frames, sparse scene-query extraction through a learned spatial
//! attention mask, and temporal residuals of the per-timestep queries.
//!
//! BEV features are [C, H*W] matrices; scene queries are [N_s, C]. The
//! spatial attention maps are softmax-normalized over the H*W positions,
//! so every query row is a convex combination of spatial feature vectors.

use crate::autodiff::{Graph, Scalar, Tensor, VarId};
use crate::geometry::GridSpec;
use crate::nn::{rng_for, BoundParams, ParamStore};
use rand::Rng;

pub const RASTER_CHANNELS: usize = 3;

/// A BEV feature with its frame bookkeeping. Temporal fusion refuses
/// features that were not aligned into the current ego frame.
#[derive(Clone, Copy, Debug)]
pub struct BevFeature {
    pub var: VarId,
    /// timestamp offset into the past (0 = current tick)
    pub age: usize,
    /// true once the feature is expressed in the current ego frame
    pub aligned: bool,
}

fn conv_init<T: Scalar>(store: &mut ParamStore<T>, name: &str, c_out: usize, c_in: usize, k: usize, bias: bool, seed: u64) {
    let wname = format!("{name}.weight");
    let fan_in = c_in * k * k;
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut rng = rng_for(seed, &wname);
    let data = (0..c_out * fan_in)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    store.insert(&wname, Tensor::from_vec(&[c_out, fan_in], data));
    if bias {
        store.insert(&format!("{name}.bias"), Tensor::zeros(&[c_out]));
    }
}

/// Raster encoder, temporal fusion conv, and spatial-attention head.
#[derive(Clone, Debug)]
pub struct SceneEncoder {
    pub c: usize,
    pub hidden: usize,
    pub n_s: usize,
    pub k: usize,
    pub spec: GridSpec,
    pub encoder_bias: bool,
}

impl SceneEncoder {
    pub fn new(c: usize, hidden: usize, n_s: usize, k: usize, spec: GridSpec) -> Self {
        SceneEncoder { c, hidden, n_s, k, spec, encoder_bias: true }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        conv_init(store, "encoder.conv1", self.hidden, RASTER_CHANNELS, 3, self.encoder_bias, seed);
        conv_init(store, "encoder.conv2", self.c, self.hidden, 3, self.encoder_bias, seed);
        conv_init(store, "encoder.fuse", self.c, (self.k + 1) * self.c, 1, self.encoder_bias, seed);
        conv_init(store, "encoder.sa", self.n_s, self.c, 1, self.encoder_bias, seed);
    }

    fn conv<T: Scalar>(&self, g: &mut Graph<T>, p: &BoundParams, name: &str, x: VarId, k: usize) -> VarId {
        let w = p.var(&format!("{name}.weight"));
        let y = g.conv2d(x, w, self.spec.h, self.spec.w, k);
        if self.encoder_bias {
            let b = p.var(&format!("{name}.bias"));
            g.add_col_broadcast(y, b)
        } else {
            y
        }
    }

    /// Raster [3, H*W] in its own ego frame -> BEV feature [C, H*W].
    pub fn encode_raster<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        raster: VarId,
        age: usize,
    ) -> BevFeature {
        let v = g.value(raster);
        assert_eq!(
            v.rows(),
            RASTER_CHANNELS,
            "raster must have {} channels, got {}",
            RASTER_CHANNELS,
            v.rows()
        );
        let h1 = self.conv(g, p, "encoder.conv1", raster, 3);
        let h1 = g.relu(h1);
        let feat = self.conv(g, p, "encoder.conv2", h1, 3);
        BevFeature { var: feat, age, aligned: age == 0 }
    }

    /// Channel-concatenates the aligned frames (ordered current, t-1, ...,
    /// t-k) and fuses them back to C channels with a 1x1 convolution.
    pub fn fuse_temporal<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        aligned: &[BevFeature],
    ) -> BevFeature {
        assert_eq!(
            aligned.len(),
            self.k + 1,
            "fuse_temporal expects {} frames, got {}",
            self.k + 1,
            aligned.len()
        );
        for f in aligned {
            assert!(f.aligned, "fuse_temporal: frame with age {} is not aligned to the current ego frame", f.age);
        }
        let parts: Vec<VarId> = aligned.iter().map(|f| f.var).collect();
        let stacked = g.concat_rows(&parts); // [(k+1)C, H*W]
        let fused = self.conv(g, p, "encoder.fuse", stacked, 1);
        BevFeature { var: fused, age: 0, aligned: true }
    }

    /// Spatial attention maps of the fused feature: [N_s, H*W], each row a
    /// probability distribution over positions.
    pub fn attention_maps<T: Scalar>(&self, g: &mut Graph<T>, p: &BoundParams, b_fuse: BevFeature) -> VarId {
        let scores = self.conv(g, p, "encoder.sa", b_fuse.var, 1); // [N_s, H*W]
        g.softmax_rows(scores)
    }

    /// Sparse queries of one feature under the given maps:
    /// S[n] = sum_{h,w} map[n,h,w] * feature[:,h,w].
    pub fn per_timestep_queries<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        maps: VarId,
        feature: BevFeature,
    ) -> VarId {
        assert!(feature.aligned, "queries require a feature aligned to the current frame");
        let ft = g.transpose(feature.var); // [H*W, C]
        g.matmul(maps, ft) // [N_s, C]
    }

    /// TokenLearner: fused feature -> (S_fuse, attention maps). The maps are
    /// returned so the same mask can weight every per-timestep feature.
    pub fn token_learner<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        b_fuse: BevFeature,
    ) -> (VarId, VarId) {
        let maps = self.attention_maps(g, p, b_fuse);
        let s_fuse = self.per_timestep_queries(g, maps, b_fuse);
        (s_fuse, maps)
    }
}

/// R_i = S_i - S_{i-1} for queries ordered oldest -> newest. Returns k
/// residuals for k+1 query sets.
pub fn temporal_residuals<T: Scalar>(g: &mut Graph<T>, queries: &[VarId]) -> Vec<VarId> {
    assert!(
        queries.len() >= 2,
        "temporal residuals need at least 2 timestamps, got {}",
        queries.len()
    );
    queries
        .windows(2)
        .map(|pair| g.sub(pair[1], pair[0]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_encoder() -> SceneEncoder {
        SceneEncoder::new(8, 4, 4, 2, GridSpec::new(6, 6, 1.0))
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn zero_raster_bias_free_encoder_gives_zero_feature() {
        let mut enc = toy_encoder();
        enc.encoder_bias = false;
        let mut store = ParamStore::<f64>::new();
        enc.init(&mut store, 1);
        let mut g = Graph::new();
        let p = BoundParams::bind(&mut g, &store);
        let raster = g.constant(Tensor::zeros(&[3, 36]));
        let feat = enc.encode_raster(&mut g, &p, raster, 0);
        assert!(g.value(feat.var).data.iter().all(|&v| v == 0.0));
        assert_eq!(g.value(feat.var).shape, vec![8, 36]);
    }

    #[test]
    fn encoder_gradient_check() {
        let enc = toy_encoder();
        let mut store = ParamStore::<f64>::new();
        enc.init(&mut store, 2);
        let raster = rand_tensor(&[3, 36], 3).map(f64::abs);
        let err = crate::autodiff::grad_check_multi(
            |g, ids| {
                let mut s = ParamStore::<f64>::new();
                toy_encoder().init(&mut s, 2);
                let p = BoundParams::bind(g, &s);
                let feat = toy_encoder().encode_raster(g, &p, ids[0], 0);
                let sq = g.mul(feat.var, feat.var);
                g.sum(sq)
            },
            &[raster],
            1e-5,
        );
        assert!(err <= 1e-4, "encoder grad rel err {err}");
    }

    #[test]
    fn fuse_rejects_misaligned_frames() {
        let enc = toy_encoder();
        let mut store = ParamStore::<f64>::new();
        enc.init(&mut store, 4);
        let mut g = Graph::new();
        let p = BoundParams::bind(&mut g, &store);
        let raster = g.constant(Tensor::zeros(&[3, 36]));
        let past = enc.encode_raster(&mut g, &p, raster, 1); // not aligned
        let cur = enc.encode_raster(&mut g, &p, raster, 0);
        let frames = vec![cur, past, past];
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            let mut g2 = Graph::new();
            let p2 = BoundParams::bind(&mut g2, &store);
            let raster2 = g2.constant(Tensor::zeros(&[3, 36]));
            let past2 = enc.encode_raster(&mut g2, &p2, raster2, 1);
            let cur2 = enc.encode_raster(&mut g2, &p2, raster2, 0);
            enc.fuse_temporal(&mut g2, &p2, &[cur2, past2, past2])
        }));
        assert!(result.is_err());
        let _ = (g, frames);
    }

    #[test]
    fn fuse_wrong_frame_count_is_error() {
        let enc = toy_encoder();
        let mut store = ParamStore::<f64>::new();
        enc.init(&mut store, 4);
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            let mut g = Graph::new();
            let p = BoundParams::bind(&mut g, &store);
            let raster = g.constant(Tensor::zeros(&[3, 36]));
            let cur = enc.encode_raster(&mut g, &p, raster, 0);
            enc.fuse_temporal(&mut g, &p, &[cur])
        }));
        assert!(result.is_err());
    }

    #[test]
    fn fuse_is_order_sensitive() {
        let enc = toy_encoder();
        let mut store = ParamStore::<f64>::new();
        enc.init(&mut store, 5);
        let run = |order: [u64; 3]| {
            let mut g = Graph::new();
            let p = BoundParams::bind(&mut g, &store);
            let frames: Vec<BevFeature> = order
                .iter()
                .map(|&s| {
                    let r = g.constant(rand_tensor(&[3, 36], s).map(f64::abs));
                    let f = enc.encode_raster(&mut g, &p, r, 0);
                    f
                })
                .collect();
            let fused = enc.fuse_temporal(&mut g, &p, &frames);
            g.value(fused.var).clone()
        };
        let a = run([10, 11, 12]);
        let b = run([12, 11, 10]);
        assert_ne!(a.data, b.data);
    }

    #[test]
    fn attention_maps_are_distributions() {
        let enc = toy_encoder();
        let mut store = ParamStore::<f64>::new();
        enc.init(&mut store, 6);
        let mut g = Graph::new();
        let p = BoundParams::bind(&mut g, &store);
        let r = g.constant(rand_tensor(&[3, 36], 20).map(f64::abs));
        let feat = enc.encode_raster(&mut g, &p, r, 0);
        let maps = enc.attention_maps(&mut g, &p, feat);
        let m = g.value(maps);
        for row in 0..m.rows() {
            let mut sum = 0.0;
            for col in 0..m.cols() {
                let v = m.get2(row, col);
                assert!(v >= 0.0);
                sum += v;
            }
            assert!((sum - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn token_learner_constant_field_returns_constant_rows() {
        let enc = toy_encoder();
        let mut store = ParamStore::<f64>::new();
        enc.init(&mut store, 7);
        let mut g = Graph::new();
        let p = BoundParams::bind(&mut g, &store);
        // constant feature: every cell carries the same channel vector v
        let mut feat = Tensor::zeros(&[8, 36]);
        for ch in 0..8 {
            for cell in 0..36 {
                feat.data[ch * 36 + cell] = ch as f64 * 0.5 - 1.0;
            }
        }
        let f = g.constant(feat);
        let bev = BevFeature { var: f, age: 0, aligned: true };
        let (s_fuse, _maps) = enc.token_learner(&mut g, &p, bev);
        let s = g.value(s_fuse);
        for row in 0..4 {
            for ch in 0..8 {
                assert!((s.get2(row, ch) - (ch as f64 * 0.5 - 1.0)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn token_learner_uniform_maps_give_spatial_mean() {
        let enc = toy_encoder();
        let mut g = Graph::<f64>::new();
        let feat = rand_tensor(&[8, 36], 30);
        let f = g.constant(feat.clone());
        let bev = BevFeature { var: f, age: 0, aligned: true };
        let maps = g.constant(Tensor::full(&[4, 36], 1.0 / 36.0));
        let s = enc.per_timestep_queries(&mut g, maps, bev);
        for row in 0..4 {
            for ch in 0..8 {
                let mean: f64 = (0..36).map(|c| feat.data[ch * 36 + c]).sum::<f64>() / 36.0;
                assert!((g.value(s).get2(row, ch) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn token_learner_matches_double_loop_oracle() {
        let enc = toy_encoder();
        let mut store = ParamStore::<f64>::new();
        enc.init(&mut store, 8);
        let mut g = Graph::new();
        let p = BoundParams::bind(&mut g, &store);
        let r = g.constant(rand_tensor(&[3, 36], 40).map(f64::abs));
        let feat = enc.encode_raster(&mut g, &p, r, 0);
        let (s_fuse, maps) = enc.token_learner(&mut g, &p, feat);

        // explicit double-loop weighted sum
        let m = g.value(maps).clone();
        let fv = g.value(feat.var).clone();
        let s = g.value(s_fuse).clone();
        for n in 0..4 {
            for ch in 0..8 {
                let mut acc = 0.0;
                for cell in 0..36 {
                    acc += m.get2(n, cell) * fv.get2(ch, cell);
                }
                assert!((s.get2(n, ch) - acc).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn eq5_consistency_same_input_same_queries() {
        // queries of b_fuse under the shared mask == token_learner output
        let enc = toy_encoder();
        let mut store = ParamStore::<f64>::new();
        enc.init(&mut store, 9);
        let mut g = Graph::new();
        let p = BoundParams::bind(&mut g, &store);
        let r = g.constant(rand_tensor(&[3, 36], 50).map(f64::abs));
        let feat = enc.encode_raster(&mut g, &p, r, 0);
        let (s_fuse, maps) = enc.token_learner(&mut g, &p, feat);
        let s_again = enc.per_timestep_queries(&mut g, maps, feat);
        assert_eq!(g.value(s_fuse).data, g.value(s_again).data);
    }

    #[test]
    fn query_extraction_is_linear_in_feature() {
        let enc = toy_encoder();
        let mut g = Graph::<f64>::new();
        let maps_t = {
            let scores = rand_tensor(&[4, 36], 60);
            let v = g.constant(scores);
            g.softmax_rows(v)
        };
        let fx = rand_tensor(&[8, 36], 61);
        let fy = rand_tensor(&[8, 36], 62);
        let (a, b) = (2.0, -0.7);
        let x = g.constant(fx.clone());
        let y = g.constant(fy.clone());
        let mixed_data: Vec<f64> = fx
            .data
            .iter()
            .zip(fy.data.iter())
            .map(|(&u, &v)| a * u + b * v)
            .collect();
        let mixed = g.constant(Tensor::from_vec(&[8, 36], mixed_data));
        let wrap = |v| BevFeature { var: v, age: 0, aligned: true };
        let sx = enc.per_timestep_queries(&mut g, maps_t, wrap(x));
        let sy = enc.per_timestep_queries(&mut g, maps_t, wrap(y));
        let sm = enc.per_timestep_queries(&mut g, maps_t, wrap(mixed));
        for i in 0..g.value(sm).numel() {
            let expect = a * g.value(sx).data[i] + b * g.value(sy).data[i];
            assert!((g.value(sm).data[i] - expect).abs() <= 1e-10);
        }
    }

    #[test]
    fn residuals_of_static_scene_are_exactly_zero() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(rand_tensor(&[4, 8], 70));
        let rs = temporal_residuals(&mut g, &[q, q, q]);
        assert_eq!(rs.len(), 2);
        for r in rs {
            assert!(g.value(r).data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn residual_of_step_is_the_step() {
        let mut g = Graph::<f64>::new();
        let zero = g.constant(Tensor::zeros(&[4, 8]));
        let x = g.constant(rand_tensor(&[4, 8], 71));
        let rs = temporal_residuals(&mut g, &[zero, x]);
        assert_eq!(rs.len(), 1);
        assert_eq!(g.value(rs[0]).data, g.value(x).data);
    }

    #[test]
    fn residuals_telescope() {
        let mut g = Graph::<f64>::new();
        let qs: Vec<VarId> = (0..4).map(|i| g.constant(rand_tensor(&[4, 8], 80 + i))).collect();
        let rs = temporal_residuals(&mut g, &qs);
        let first = g.value(qs[0]).clone();
        let last = g.value(qs[3]).clone();
        let mut acc = Tensor::<f64>::zeros(&[4, 8]);
        for r in rs {
            acc.add_assign(g.value(r));
        }
        for i in 0..acc.numel() {
            assert_eq!(acc.data[i], last.data[i] - first.data[i]);
        }
    }

    #[test]
    fn residuals_need_two_timestamps() {
        let result = std::panic::catch_unwind(|| {
            let mut g = Graph::<f64>::new();
            let q = g.constant(Tensor::zeros(&[4, 8]));
            temporal_residuals(&mut g, &[q])
        });
        assert!(result.is_err());
    }
}
