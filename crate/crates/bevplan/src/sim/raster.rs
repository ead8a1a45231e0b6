//! BEV rasterization of a scenario tick into a 3-channel occupancy grid in
//! the ego frame at that tick: drivable corridor, static obstacles, dynamic
//! agents. Cell values are supersampled coverage fractions in [0, 1].

use crate::autodiff::Tensor;
use crate::collision::Rect;
use crate::geometry::GridSpec;
use crate::scene::RASTER_CHANNELS;

use super::Scenario;

/// Subsamples per cell edge (9 samples per cell).
const SS: usize = 3;

pub fn rasterize(scenario: &Scenario, tick: usize, spec: &GridSpec) -> Tensor<f32> {
    let ego = scenario.ego[tick].pose;
    let agents: Vec<Rect> = scenario.agent_rects(tick);
    let hw = spec.h * spec.w;
    let mut out = Tensor::<f32>::zeros(&[RASTER_CHANNELS, hw]);
    let inv_ss = 1.0 / (SS * SS) as f64;
    for i in 0..spec.h {
        for j in 0..spec.w {
            let (mut road, mut obst, mut dynm) = (0.0f64, 0.0f64, 0.0f64);
            for a in 0..SS {
                for b in 0..SS {
                    let dr = (a as f64 + 0.5) / SS as f64 - 0.5;
                    let dc = (b as f64 + 0.5) / SS as f64 - 0.5;
                    let (lx, ly) = spec.grid_to_world(i as f64 + dr, j as f64 + dc);
                    let (wx, wy) = ego.transform_point(lx, ly);
                    if scenario.centerline_distance(wx, wy) <= scenario.half_width {
                        road += 1.0;
                    }
                    if scenario.obstacles.iter().any(|o| o.contains(wx, wy)) {
                        obst += 1.0;
                    }
                    if agents.iter().any(|r| r.contains(wx, wy)) {
                        dynm += 1.0;
                    }
                }
            }
            let cell = i * spec.w + j;
            out.data[cell] = (road * inv_ss) as f32;
            out.data[hw + cell] = (obst * inv_ss) as f32;
            out.data[2 * hw + cell] = (dynm * inv_ss) as f32;
        }
    }
    out
}
