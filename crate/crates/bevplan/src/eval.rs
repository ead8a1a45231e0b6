//! Open-loop evaluation: displacement errors in both endpoint and
//! temporal-average styles, box-based cumulative collision rate, and the
//! representation-diversity diagnostic for predicted future features.

use crate::autodiff::{Graph, Tensor};
use crate::collision::{rects_intersect, Rect};
use crate::model::Model;
use crate::nn::{BoundParams, ParamStore};
use crate::sim::{Sample, EGO_HALF_LEN, EGO_HALF_WID, TICK};
use crate::train::forward_sample;

/// Evaluation horizons in seconds.
pub const HORIZONS: [f64; 3] = [1.0, 2.0, 3.0];

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    /// endpoint L2 at each horizon (meters)
    pub l2: [f64; 3],
    /// mean of the endpoint errors
    pub l2_avg_uniad: f64,
    /// temporal mean of per-step L2 up to each horizon
    pub l2_vad: [f64; 3],
    pub l2_avg_vad: f64,
    /// cumulative collision rate at each horizon (fraction)
    pub cr: [f64; 3],
    pub cr_avg: f64,
}

/// Waypoint index whose timestamp is closest to the horizon.
pub fn horizon_index(horizon_s: f64, n_t: usize) -> usize {
    (((horizon_s / TICK).round() as usize).saturating_sub(1)).min(n_t - 1)
}

/// Column names matching [`metric_values`], for CSV reports.
pub const METRIC_COLUMNS: [&str; 12] = [
    "l2_1s", "l2_2s", "l2_3s", "l2_avg_uniad",
    "l2_vad_1s", "l2_vad_2s", "l2_vad_3s", "l2_avg_vad",
    "cr_1s", "cr_2s", "cr_3s", "cr_avg",
];

pub fn metric_values(m: &Metrics) -> [f64; 12] {
    [
        m.l2[0], m.l2[1], m.l2[2], m.l2_avg_uniad,
        m.l2_vad[0], m.l2_vad[1], m.l2_vad[2], m.l2_avg_vad,
        m.cr[0], m.cr[1], m.cr[2], m.cr_avg,
    ]
}

pub fn metrics_from_values(v: [f64; 12]) -> Metrics {
    Metrics {
        l2: [v[0], v[1], v[2]],
        l2_avg_uniad: v[3],
        l2_vad: [v[4], v[5], v[6]],
        l2_avg_vad: v[7],
        cr: [v[8], v[9], v[10]],
        cr_avg: v[11],
    }
}

pub struct Prediction {
    pub prior: Vec<[f64; 2]>,
    pub fin: Vec<[f64; 2]>,
}

pub fn predict(model: &Model, store: &ParamStore<f32>, sample: &Sample) -> Prediction {
    let mut g = Graph::new();
    let p = BoundParams::bind(&mut g, store);
    let out = forward_sample(&mut g, &p, model, sample);
    let to_points = |t: &Tensor<f32>| {
        (0..t.rows())
            .map(|i| [t.get2(i, 0) as f64, t.get2(i, 1) as f64])
            .collect::<Vec<_>>()
    };
    Prediction { prior: to_points(g.value(out.t_prior)), fin: to_points(g.value(out.t_final)) }
}

/// Displacement metrics of a set of predicted trajectories.
pub fn l2_metrics(preds: &[Vec<[f64; 2]>], gts: &[Vec<[f64; 2]>]) -> Metrics {
    assert_eq!(preds.len(), gts.len());
    assert!(!preds.is_empty(), "empty evaluation set");
    let n_t = gts[0].len();
    let mut m = Metrics::default();
    for (pred, gt) in preds.iter().zip(gts.iter()) {
        assert_eq!(pred.len(), n_t, "trajectory length mismatch");
        let step_err: Vec<f64> = pred
            .iter()
            .zip(gt.iter())
            .map(|(p, g)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt())
            .collect();
        for (hi, &h) in HORIZONS.iter().enumerate() {
            let idx = horizon_index(h, n_t);
            m.l2[hi] += step_err[idx];
            m.l2_vad[hi] += step_err[..=idx].iter().sum::<f64>() / (idx + 1) as f64;
        }
    }
    let n = preds.len() as f64;
    for hi in 0..3 {
        m.l2[hi] /= n;
        m.l2_vad[hi] /= n;
    }
    m.l2_avg_uniad = m.l2.iter().sum::<f64>() / 3.0;
    m.l2_avg_vad = m.l2_vad.iter().sum::<f64>() / 3.0;
    m
}

/// Ego heading per waypoint from consecutive differences; the first leg
/// starts at the origin, and coincident waypoints inherit the previous
/// heading.
pub fn waypoint_headings(pred: &[[f64; 2]]) -> Vec<f64> {
    let mut headings = Vec::with_capacity(pred.len());
    let mut prev = [0.0, 0.0];
    let mut last_heading = 0.0;
    for wp in pred {
        let (dx, dy) = (wp[0] - prev[0], wp[1] - prev[1]);
        if dx.abs() > 1e-9 || dy.abs() > 1e-9 {
            last_heading = dy.atan2(dx);
        }
        headings.push(last_heading);
        prev = *wp;
    }
    headings
}

/// Steps at which the ego rectangle placed along the prediction intersects
/// an agent footprint of that future tick or a static obstacle.
pub fn collision_steps(pred: &[[f64; 2]], sample: &Sample) -> Vec<bool> {
    let headings = waypoint_headings(pred);
    pred.iter()
        .enumerate()
        .map(|(j, wp)| {
            let ego = Rect::new(wp[0], wp[1], headings[j], EGO_HALF_LEN, EGO_HALF_WID);
            sample.future_agents[j].iter().any(|a| rects_intersect(&ego, a))
                || sample.obstacles.iter().any(|o| rects_intersect(&ego, o))
        })
        .collect()
}

/// Cumulative collision rates over the evaluation set.
pub fn collision_metrics(preds: &[Vec<[f64; 2]>], samples: &[Sample]) -> [f64; 3] {
    assert_eq!(preds.len(), samples.len());
    let n_t = samples[0].gt_trajectory.len();
    let mut counts = [0usize; 3];
    for (pred, sample) in preds.iter().zip(samples.iter()) {
        let steps = collision_steps(pred, sample);
        for (hi, &h) in HORIZONS.iter().enumerate() {
            let idx = horizon_index(h, n_t);
            if steps[..=idx].iter().any(|&c| c) {
                counts[hi] += 1;
            }
        }
    }
    let n = preds.len() as f64;
    [counts[0] as f64 / n, counts[1] as f64 / n, counts[2] as f64 / n]
}

/// Full metrics for one set of trajectories against a sample set.
pub fn evaluate_trajectories(preds: &[Vec<[f64; 2]>], samples: &[Sample]) -> Metrics {
    let gts: Vec<Vec<[f64; 2]>> = samples.iter().map(|s| s.gt_trajectory.clone()).collect();
    let mut m = l2_metrics(preds, &gts);
    m.cr = collision_metrics(preds, samples);
    m.cr_avg = m.cr.iter().sum::<f64>() / 3.0;
    m
}

/// Predicts every sample and scores prior and final trajectories from the
/// same parameters.
pub fn evaluate(model: &Model, store: &ParamStore<f32>, samples: &[Sample]) -> (Metrics, Metrics) {
    let preds: Vec<Prediction> = samples.iter().map(|s| predict(model, store, s)).collect();
    let priors: Vec<Vec<[f64; 2]>> = preds.iter().map(|p| p.prior.clone()).collect();
    let finals: Vec<Vec<[f64; 2]>> = preds.iter().map(|p| p.fin.clone()).collect();
    (evaluate_trajectories(&priors, samples), evaluate_trajectories(&finals, samples))
}

// ------------------------------------------------------- collapse diagnostic

/// Predicted future feature of each sample, for the diversity diagnostic.
pub fn future_features(model: &Model, store: &ParamStore<f32>, samples: &[Sample]) -> Vec<Tensor<f32>> {
    samples
        .iter()
        .map(|s| {
            let mut g = Graph::new();
            let p = BoundParams::bind(&mut g, store);
            let out = forward_sample(&mut g, &p, model, s);
            let var = out.b_future.unwrap_or(out.b_fuse);
            g.value(var).clone()
        })
        .collect()
}

fn unit_rms(t: &Tensor<f32>) -> Vec<f64> {
    let v: Vec<f64> = t.data.iter().map(|&x| x as f64).collect();
    let rms = (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    if rms == 0.0 {
        v
    } else {
        v.iter().map(|x| x / rms).collect()
    }
}

/// Mean pairwise RMS distance between unit-RMS-normalized feature arrays.
/// Zero iff all features are identical up to scale; higher means the model
/// maps distinct scenes to distinct futures.
pub fn diversity_score(features: &[Tensor<f32>]) -> f64 {
    assert!(features.len() >= 2, "diversity needs at least 2 scenes");
    let normed: Vec<Vec<f64>> = features.iter().map(unit_rms).collect();
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..normed.len() {
        for j in i + 1..normed.len() {
            let d2: f64 = normed[i]
                .iter()
                .zip(normed[j].iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / normed[i].len() as f64;
            sum += d2.sqrt();
            pairs += 1;
        }
    }
    sum / pairs as f64
}

/// Channel-mean heatmap of a feature array, for image dumps.
pub fn channel_mean(feature: &Tensor<f32>) -> Vec<f64> {
    let (c, hw) = (feature.rows(), feature.cols());
    (0..hw)
        .map(|cell| (0..c).map(|ch| feature.data[ch * hw + cell] as f64).sum::<f64>() / c as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::geometry::GridSpec;
    use crate::sim::dataset::Dataset;
    use crate::sim::{generate_scenario, make_sample, sample_indices};

    fn eval_samples(n_scenarios: u64) -> (Config, Vec<Sample>) {
        let cfg = Config { grid_h: 16, grid_w: 16, c: 8, hidden: 4, n_s: 4, heads: 2,
            deform_heads: 2, deform_points: 2, ..Config::default() };
        let gen = cfg.gen();
        let mut samples = Vec::new();
        for seed in 0..n_scenarios {
            let s = generate_scenario(seed, &gen).unwrap();
            for &t in sample_indices(&s, &gen).iter().take(2) {
                samples.push(make_sample(&s, t, &gen).unwrap());
            }
        }
        (cfg, samples)
    }

    #[test]
    fn perfect_predictor_scores_zero_everywhere() {
        let (_, samples) = eval_samples(6);
        let preds: Vec<Vec<[f64; 2]>> = samples.iter().map(|s| s.gt_trajectory.clone()).collect();
        let m = evaluate_trajectories(&preds, &samples);
        assert_eq!(m.l2, [0.0; 3]);
        assert_eq!(m.l2_vad, [0.0; 3]);
        assert_eq!(m.l2_avg_uniad, 0.0);
        assert_eq!(m.cr, [0.0; 3], "expert trajectory must be collision-free");
    }

    #[test]
    fn unit_lateral_shift_scores_one_meter_both_styles() {
        let (_, samples) = eval_samples(3);
        let preds: Vec<Vec<[f64; 2]>> = samples
            .iter()
            .map(|s| s.gt_trajectory.iter().map(|wp| [wp[0], wp[1] + 1.0]).collect())
            .collect();
        let gts: Vec<Vec<[f64; 2]>> = samples.iter().map(|s| s.gt_trajectory.clone()).collect();
        let m = l2_metrics(&preds, &gts);
        for hi in 0..3 {
            assert!((m.l2[hi] - 1.0).abs() <= 1e-9);
            assert!((m.l2_vad[hi] - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn l2_matches_independent_recomputation() {
        let (_, samples) = eval_samples(4);
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let preds: Vec<Vec<[f64; 2]>> = samples
            .iter()
            .map(|s| {
                s.gt_trajectory
                    .iter()
                    .map(|wp| [wp[0] + rng.gen_range(-1.0..1.0), wp[1] + rng.gen_range(-1.0..1.0)])
                    .collect()
            })
            .collect();
        let gts: Vec<Vec<[f64; 2]>> = samples.iter().map(|s| s.gt_trajectory.clone()).collect();
        let m = l2_metrics(&preds, &gts);

        // recomputation with a flat accumulation order
        let n_t = gts[0].len();
        for (hi, h) in [(0usize, 1.0f64), (1, 2.0), (2, 3.0)] {
            let idx = ((h / TICK).round() as usize) - 1;
            let mut endpoint = 0.0;
            let mut temporal = 0.0;
            for (p, g) in preds.iter().zip(gts.iter()) {
                let d = |j: usize| {
                    ((p[j][0] - g[j][0]).powi(2) + (p[j][1] - g[j][1]).powi(2)).sqrt()
                };
                endpoint += d(idx);
                let mut acc = 0.0;
                for j in 0..=idx {
                    acc += d(j);
                }
                temporal += acc / (idx + 1) as f64;
            }
            assert!((m.l2[hi] - endpoint / preds.len() as f64).abs() <= 1e-9);
            assert!((m.l2_vad[hi] - temporal / preds.len() as f64).abs() <= 1e-9);
            let _ = n_t;
        }
    }

    #[test]
    fn driving_into_an_obstacle_collides() {
        let (_, mut samples) = eval_samples(1);
        let sample = &mut samples[0];
        // plant an obstacle 3 m ahead and steer the prediction into it
        sample.obstacles.push(Rect::axis_aligned(3.0, 0.0, 1.0, 1.0));
        let pred: Vec<[f64; 2]> = (1..=sample.gt_trajectory.len())
            .map(|j| [j as f64 * 1.0, 0.0])
            .collect();
        let steps = collision_steps(&pred, sample);
        assert!(steps.iter().any(|&c| c));
        let cr = collision_metrics(&[pred], &samples[..1]);
        assert_eq!(cr[2], 1.0);
    }

    #[test]
    fn coincident_waypoints_inherit_heading() {
        let pred = vec![[1.0, 0.0], [1.0, 0.0], [2.0, 1.0]];
        let h = waypoint_headings(&pred);
        assert_eq!(h[0], 0.0);
        assert_eq!(h[1], h[0]);
        assert!((h[2] - (1.0f64).atan2(1.0)).abs() <= 1e-12);
    }

    #[test]
    fn duplicated_scenes_have_zero_diversity() {
        let t = Tensor::<f32>::from_vec(&[2, 4], vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0, 1.0, -1.0]);
        assert_eq!(diversity_score(&[t.clone(), t.clone(), t]), 0.0);
    }

    #[test]
    fn untrained_model_has_positive_diversity_on_distinct_scenes() {
        let (cfg, samples) = eval_samples(4);
        let model = Model::new(cfg.model());
        let mut store = ParamStore::<f32>::new();
        model.init(&mut store, 3);
        let feats = future_features(&model, &store, &samples[..4]);
        assert!(diversity_score(&feats) > 0.0);
    }

    #[test]
    fn evaluate_runs_end_to_end_on_untrained_model() {
        let (cfg, samples) = eval_samples(2);
        let ds = Dataset::new(GridSpec::new(16, 16, 1.0), cfg.k, cfg.n_t, samples);
        let model = Model::new(cfg.model());
        let mut store = ParamStore::<f32>::new();
        model.init(&mut store, 1);
        let (prior, fin) = evaluate(&model, &store, &ds.samples);
        // untrained model decodes the zero trajectory everywhere
        assert!(prior.l2_avg_uniad > 0.0);
        assert_eq!(prior.l2_avg_uniad, fin.l2_avg_uniad);
    }
}
