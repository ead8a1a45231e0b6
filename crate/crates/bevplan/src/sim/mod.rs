//! Procedural driving scenarios on a 2D plane: road corridor, static
//! obstacles, scripted dynamic agents, and a rule-based expert that supplies
//! the ground-truth trajectories. Scenario generation is deterministic in
//! the seed and regenerates until the expert rollout is collision-free.

pub mod dataset;
pub mod raster;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::collision::{rects_intersect, Rect};
use crate::geometry::{GridSpec, Pose2};
use crate::planner::EgoStatus;

pub const TICK: f64 = 0.5;
pub const EGO_HALF_LEN: f64 = 2.0;
pub const EGO_HALF_WID: f64 = 1.0;

const HEADWAY_S: f64 = 2.0;
const STANDOFF_M: f64 = 6.0;
const ACCEL_MAX: f64 = 2.0;
const DECEL_MAX: f64 = 3.5;
const YAW_RATE_MAX: f64 = 1.0;
/// command dead-band: net heading change below 15 degrees reads "straight"
const COMMAND_DEADBAND: f64 = 15.0 * std::f64::consts::PI / 180.0;

#[derive(thiserror::Error, Debug)]
pub enum SimError {
    #[error("scenario generation failed for seed {seed}: retry budget {retries} exhausted")]
    GenerationFailed { seed: u64, retries: usize },
    #[error("sample at tick {t_index} needs {k} past and {n_t}+1 future ticks, scenario has {len}")]
    SampleRange { t_index: usize, k: usize, n_t: usize, len: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScenarioKind {
    Straight,
    LeftTurn,
    RightTurn,
    LeadSlow,
    Crossing,
}

#[derive(Clone, Copy, Debug)]
pub enum MotionModel {
    ConstVel,
    /// rad/s
    ConstTurn(f64),
}

#[derive(Clone, Debug)]
pub struct AgentTrack {
    pub half_len: f64,
    pub half_wid: f64,
    pub speed: f64,
    pub model: MotionModel,
    pub states: Vec<Pose2>,
}

impl AgentTrack {
    /// Rolls the motion model forward for `ticks` states from `start`.
    pub fn rollout(start: Pose2, speed: f64, model: MotionModel, half_len: f64, half_wid: f64, ticks: usize) -> Self {
        let mut states = Vec::with_capacity(ticks);
        let mut pose = start;
        for _ in 0..ticks {
            states.push(pose);
            pose = step_motion(pose, speed, model);
        }
        AgentTrack { half_len, half_wid, speed, model, states }
    }

    pub fn rect_at(&self, tick: usize) -> Rect {
        let p = self.states[tick];
        Rect::new(p.x, p.y, p.yaw, self.half_len, self.half_wid)
    }
}

fn step_motion(pose: Pose2, speed: f64, model: MotionModel) -> Pose2 {
    let yaw = match model {
        MotionModel::ConstVel => pose.yaw,
        MotionModel::ConstTurn(rate) => pose.yaw + rate * TICK,
    };
    Pose2::new(pose.x + speed * yaw.cos() * TICK, pose.y + speed * yaw.sin() * TICK, yaw)
}

#[derive(Clone, Copy, Debug)]
pub struct EgoState {
    pub pose: Pose2,
    pub speed: f64,
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub kind: ScenarioKind,
    /// road centerline vertices, ~1 m spacing
    pub centerline: Vec<[f64; 2]>,
    pub half_width: f64,
    pub obstacles: Vec<Rect>,
    pub agents: Vec<AgentTrack>,
    pub ego: Vec<EgoState>,
}

impl Scenario {
    pub fn len(&self) -> usize {
        self.ego.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ego.is_empty()
    }

    pub fn ego_rect(&self, tick: usize) -> Rect {
        let p = self.ego[tick].pose;
        Rect::new(p.x, p.y, p.yaw, EGO_HALF_LEN, EGO_HALF_WID)
    }

    pub fn agent_rects(&self, tick: usize) -> Vec<Rect> {
        self.agents.iter().map(|a| a.rect_at(tick)).collect()
    }

    /// Minimum distance from a point to the centerline polyline.
    pub fn centerline_distance(&self, x: f64, y: f64) -> f64 {
        polyline_distance(&self.centerline, x, y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenConfig {
    pub spec: GridSpec,
    pub k: usize,
    pub n_t: usize,
    /// total ticks per scenario
    pub ticks: usize,
    pub agents_min: usize,
    pub agents_max: usize,
    pub cruise_min: f64,
    pub cruise_max: f64,
    pub agent_speed_min: f64,
    pub agent_speed_max: f64,
    pub half_width: f64,
    pub retries: usize,
    /// weights of {straight, left, right, slow lead, crossing}
    pub kind_weights: [f64; 5],
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            spec: GridSpec::new(48, 48, 1.0),
            k: 2,
            n_t: 6,
            ticks: 16,
            agents_min: 1,
            agents_max: 4,
            cruise_min: 4.0,
            cruise_max: 7.0,
            agent_speed_min: 2.0,
            agent_speed_max: 5.0,
            half_width: 4.0,
            retries: 30,
            kind_weights: [1.0, 1.0, 1.0, 1.0, 1.0],
        }
    }
}

impl GenConfig {
    pub fn validate(&self) {
        assert!(self.ticks >= self.k + 2 + self.n_t, "scenario too short for k and N_t");
        assert!(self.agents_max >= self.agents_min);
        assert!(self.kind_weights.iter().all(|&w| w >= 0.0));
        assert!(self.kind_weights.iter().sum::<f64>() > 0.0);
    }
}

// ---------------------------------------------------------------- polyline

fn polyline_distance(line: &[[f64; 2]], x: f64, y: f64) -> f64 {
    let mut best = f64::INFINITY;
    for seg in line.windows(2) {
        best = best.min(segment_distance(seg[0], seg[1], x, y));
    }
    best
}

fn segment_distance(a: [f64; 2], b: [f64; 2], x: f64, y: f64) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((x - a[0]) * dx + (y - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (px, py) = (a[0] + t * dx, a[1] + t * dy);
    ((x - px).powi(2) + (y - py).powi(2)).sqrt()
}

/// Arc-length position of the closest point on the polyline.
fn polyline_project(line: &[[f64; 2]], x: f64, y: f64) -> f64 {
    let mut best = f64::INFINITY;
    let mut best_s = 0.0;
    let mut s = 0.0;
    for seg in line.windows(2) {
        let (dx, dy) = (seg[1][0] - seg[0][0], seg[1][1] - seg[0][1]);
        let len = (dx * dx + dy * dy).sqrt();
        let len2 = len * len;
        let t = if len2 == 0.0 {
            0.0
        } else {
            (((x - seg[0][0]) * dx + (y - seg[0][1]) * dy) / len2).clamp(0.0, 1.0)
        };
        let (px, py) = (seg[0][0] + t * dx, seg[0][1] + t * dy);
        let d = ((x - px).powi(2) + (y - py).powi(2)).sqrt();
        if d < best {
            best = d;
            best_s = s + t * len;
        }
        s += len;
    }
    best_s
}

/// Point on the polyline at arc length `s` (clamped to the ends).
fn polyline_point(line: &[[f64; 2]], s: f64) -> [f64; 2] {
    if s <= 0.0 {
        return line[0];
    }
    let mut acc = 0.0;
    for seg in line.windows(2) {
        let (dx, dy) = (seg[1][0] - seg[0][0], seg[1][1] - seg[0][1]);
        let len = (dx * dx + dy * dy).sqrt();
        if acc + len >= s {
            let t = (s - acc) / len;
            return [seg[0][0] + t * dx, seg[0][1] + t * dy];
        }
        acc += len;
    }
    *line.last().unwrap()
}

fn polyline_heading(line: &[[f64; 2]], s: f64) -> f64 {
    let a = polyline_point(line, s);
    let b = polyline_point(line, s + 0.5);
    (b[1] - a[1]).atan2(b[0] - a[0])
}

// ----------------------------------------------------------------- expert

/// One expert step: pure-pursuit steering toward a lookahead point on the
/// centerline, speed governed by a 2-second headway rule against agents in
/// the forward corridor, acceleration bounded.
pub fn expert_step(
    state: EgoState,
    centerline: &[[f64; 2]],
    agent_rects: &[Rect],
    cruise: f64,
) -> EgoState {
    let pose = state.pose;

    // headway: nearest agent ahead of us inside the corridor
    let mut gap = f64::INFINITY;
    let inv = pose.invert();
    for r in agent_rects {
        let (lx, ly) = inv.transform_point(r.cx, r.cy);
        if lx > 0.0 && ly.abs() < 3.0 && lx < 40.0 {
            gap = gap.min(lx - STANDOFF_M);
        }
    }
    let allowed = if gap.is_finite() { (gap / HEADWAY_S).max(0.0) } else { cruise };
    let target = cruise.min(allowed);
    let speed = target
        .min(state.speed + ACCEL_MAX * TICK)
        .max(state.speed - DECEL_MAX * TICK)
        .max(0.0);

    // pure pursuit
    let s0 = polyline_project(centerline, pose.x, pose.y);
    let lookahead = (speed * 1.2).clamp(4.0, 10.0);
    let goal = polyline_point(centerline, s0 + lookahead);
    let (gx, gy) = inv.transform_point(goal[0], goal[1]);
    let dist = (gx * gx + gy * gy).sqrt().max(1e-6);
    let alpha = gy.atan2(gx);
    let curvature = 2.0 * alpha.sin() / dist;
    let yaw_rate = (speed * curvature).clamp(-YAW_RATE_MAX, YAW_RATE_MAX);

    let yaw = pose.yaw + yaw_rate * TICK;
    let next = Pose2::new(pose.x + speed * yaw.cos() * TICK, pose.y + speed * yaw.sin() * TICK, yaw);
    EgoState { pose: next, speed }
}

// -------------------------------------------------------------- generation

fn make_centerline(kind: ScenarioKind, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    match kind {
        ScenarioKind::Straight | ScenarioKind::LeadSlow | ScenarioKind::Crossing => {
            (0..=80).map(|i| [i as f64, 0.0]).collect()
        }
        ScenarioKind::LeftTurn | ScenarioKind::RightTurn => {
            let sign = if kind == ScenarioKind::LeftTurn { 1.0 } else { -1.0 };
            let radius: f64 = rng.gen_range(12.0..20.0);
            let total_angle: f64 = rng.gen_range(1.1..1.5); // 63..86 degrees
            let straight = 14.0;
            let mut pts: Vec<[f64; 2]> = (0..=straight as usize).map(|i| [i as f64, 0.0]).collect();
            let steps = (radius * total_angle).ceil() as usize;
            for i in 1..=steps {
                let a = total_angle * i as f64 / steps as f64;
                pts.push([
                    straight + radius * a.sin(),
                    sign * radius * (1.0 - a.cos()),
                ]);
            }
            // continue straight after the arc
            let end_heading = sign * total_angle;
            let last = *pts.last().unwrap();
            for i in 1..=25 {
                pts.push([
                    last[0] + i as f64 * end_heading.cos(),
                    last[1] + i as f64 * end_heading.sin(),
                ]);
            }
            pts
        }
    }
}

fn pick_kind(weights: &[f64; 5], rng: &mut ChaCha8Rng) -> ScenarioKind {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen_range(0.0..total);
    let kinds = [
        ScenarioKind::Straight,
        ScenarioKind::LeftTurn,
        ScenarioKind::RightTurn,
        ScenarioKind::LeadSlow,
        ScenarioKind::Crossing,
    ];
    for (i, &w) in weights.iter().enumerate() {
        if x < w {
            return kinds[i];
        }
        x -= w;
    }
    kinds[4]
}

/// `gen_range` that tolerates a degenerate `min == max` interval.
fn range_or_const(rng: &mut ChaCha8Rng, min: f64, max: f64) -> f64 {
    if min == max {
        min
    } else {
        rng.gen_range(min..max)
    }
}

fn try_generate(seed: u64, attempt: u64, cfg: &GenConfig) -> Option<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ attempt.wrapping_mul(0x9E3779B97F4A7C15));
    let kind = pick_kind(&cfg.kind_weights, &mut rng);
    let centerline = make_centerline(kind, &mut rng);
    let ticks = cfg.ticks;
    let hw = cfg.half_width;

    // static obstacles beside the road
    let n_obs = rng.gen_range(0..=3);
    let mut obstacles: Vec<Rect> = Vec::new();
    for _ in 0..n_obs {
        let s = rng.gen_range(5.0..60.0);
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let lat = side * rng.gen_range(hw + 2.0..hw + 7.0);
        let c = polyline_point(&centerline, s);
        let heading = polyline_heading(&centerline, s);
        let (sn, cs) = heading.sin_cos();
        let (ox, oy) = (c[0] - sn * lat, c[1] + cs * lat);
        obstacles.push(Rect::axis_aligned(
            ox,
            oy,
            rng.gen_range(0.5..2.0),
            rng.gen_range(0.5..2.0),
        ));
    }

    let ego_start = EgoState {
        pose: Pose2::new(0.0, rng.gen_range(-0.5..0.5), 0.0),
        speed: range_or_const(&mut rng, cfg.cruise_min, cfg.cruise_max) * 0.8,
    };
    let cruise = range_or_const(&mut rng, cfg.cruise_min, cfg.cruise_max);
    let ego_rect0 = Rect::new(ego_start.pose.x, ego_start.pose.y, 0.0, EGO_HALF_LEN, EGO_HALF_WID);

    // dynamic agents
    let mut agents: Vec<AgentTrack> = Vec::new();
    let n_agents = rng.gen_range(cfg.agents_min..=cfg.agents_max);
    if kind == ScenarioKind::LeadSlow {
        // slow lead vehicle in the ego lane
        let s = rng.gen_range(14.0..22.0);
        let c = polyline_point(&centerline, s);
        let heading = polyline_heading(&centerline, s);
        let speed = rng.gen_range(0.5..2.0);
        agents.push(AgentTrack::rollout(
            Pose2::new(c[0], c[1], heading),
            speed,
            MotionModel::ConstVel,
            rng.gen_range(1.75..2.5),
            rng.gen_range(0.8..1.1),
            ticks,
        ));
    }
    if kind == ScenarioKind::Crossing {
        // agent crossing the corridor ahead of the ego
        let s = rng.gen_range(16.0..30.0);
        let c = polyline_point(&centerline, s);
        let heading = polyline_heading(&centerline, s);
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let offset = hw + 3.0;
        let (sn, cs) = heading.sin_cos();
        let start = Pose2::new(
            c[0] - sn * side * offset,
            c[1] + cs * side * offset,
            heading + side * std::f64::consts::FRAC_PI_2 * -1.0,
        );
        let speed = rng.gen_range(1.0..2.0);
        let pedestrian = rng.gen_bool(0.5);
        let (hl, hwd) = if pedestrian { (0.3, 0.3) } else { (rng.gen_range(1.75..2.5), 1.0) };
        agents.push(AgentTrack::rollout(start, speed, MotionModel::ConstVel, hl, hwd, ticks));
    }
    for _ in agents.len()..n_agents {
        // generic traffic: along-road vehicles and wandering pedestrians
        let mut placed = false;
        for _ in 0..20 {
            let s = rng.gen_range(12.0..60.0);
            let lat = rng.gen_range(-(hw - 1.0)..hw - 1.0);
            let c = polyline_point(&centerline, s);
            let heading = polyline_heading(&centerline, s);
            let (sn, cs) = heading.sin_cos();
            let pose = Pose2::new(c[0] - sn * lat, c[1] + cs * lat, heading + rng.gen_range(-0.1..0.1));
            let pedestrian = rng.gen_bool(0.25);
            let (hl, hwd, speed) = if pedestrian {
                (0.3, 0.3, rng.gen_range(0.5..1.5))
            } else {
                (
                    rng.gen_range(1.75..2.5),
                    rng.gen_range(0.8..1.1),
                    range_or_const(&mut rng, cfg.agent_speed_min, cfg.agent_speed_max),
                )
            };
            let model = if rng.gen_bool(0.3) {
                MotionModel::ConstTurn(rng.gen_range(-0.15..0.15))
            } else {
                MotionModel::ConstVel
            };
            let cand = Rect::new(pose.x, pose.y, pose.yaw, hl + 1.0, hwd + 1.0);
            let clear = !rects_intersect(&cand, &ego_rect0)
                && agents.iter().all(|a| !rects_intersect(&cand, &a.rect_at(0)))
                && obstacles.iter().all(|o| !rects_intersect(&cand, o));
            if clear {
                agents.push(AgentTrack::rollout(pose, speed, model, hl, hwd, ticks));
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }

    // expert rollout with per-tick collision screening
    let mut ego = Vec::with_capacity(ticks);
    let mut state = ego_start;
    for t in 0..ticks {
        if t > 0 {
            let rects = agents.iter().map(|a| a.rect_at(t - 1)).collect::<Vec<_>>();
            state = expert_step(state, &centerline, &rects, cruise);
        }
        ego.push(state);
        let er = Rect::new(state.pose.x, state.pose.y, state.pose.yaw, EGO_HALF_LEN, EGO_HALF_WID);
        let hit = agents.iter().any(|a| rects_intersect(&er, &a.rect_at(t)))
            || obstacles.iter().any(|o| rects_intersect(&er, o));
        if hit {
            return None;
        }
    }

    Some(Scenario { kind, centerline, half_width: hw, obstacles, agents, ego })
}

/// Deterministic in `seed`; regenerates with fresh draws until the expert
/// rollout is collision-free or the retry budget runs out.
pub fn generate_scenario(seed: u64, cfg: &GenConfig) -> Result<Scenario, SimError> {
    cfg.validate();
    for attempt in 0..cfg.retries as u64 {
        if let Some(s) = try_generate(seed, attempt, cfg) {
            return Ok(s);
        }
    }
    Err(SimError::GenerationFailed { seed, retries: cfg.retries })
}

// ----------------------------------------------------------------- samples

/// One training/eval record. All values are quantized to f32 precision at
/// assembly time so dataset round-trips are bit-identical.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// k+1 frames, oldest -> newest, each [3, H*W], rendered in its own frame
    pub rasters: Vec<Tensor<f32>>,
    /// pose of each past frame in the current frame, oldest -> newest (k)
    pub rel_poses: Vec<Pose2>,
    /// next-frame raster in its own frame (future-supervision ablation)
    pub raster_next: Tensor<f32>,
    /// pose of the next frame in the current frame
    pub rel_next: Pose2,
    /// N_t future positions, current-frame meters
    pub gt_trajectory: Vec<[f64; 2]>,
    /// agent footprints per future tick (N_t entries), current-frame coords
    pub future_agents: Vec<Vec<Rect>>,
    /// static obstacles, current-frame coords
    pub obstacles: Vec<Rect>,
    pub ego_status: EgoStatus,
}

fn q(v: f64) -> f64 {
    v as f32 as f64
}

fn q_pose(p: Pose2) -> Pose2 {
    Pose2 { x: q(p.x), y: q(p.y), yaw: q(p.yaw) }
}

fn q_rect(r: Rect) -> Rect {
    Rect { cx: q(r.cx), cy: q(r.cy), yaw: q(r.yaw), half_len: q(r.half_len), half_wid: q(r.half_wid) }
}

fn rel_pose(current: Pose2, other: Pose2) -> Pose2 {
    let p = current.invert().compose(&other);
    // composing p^-1 with p leaves ~1e-17 rounding residue; a stationary
    // ego must read as an exact identity so the feature warp is a no-op
    if p.x.abs() < 1e-9 && p.y.abs() < 1e-9 && p.yaw.abs() < 1e-9 {
        Pose2::identity()
    } else {
        p
    }
}

/// Assembles the model inputs and ground truth around tick `t_index`.
pub fn make_sample(scenario: &Scenario, t_index: usize, cfg: &GenConfig) -> Result<Sample, SimError> {
    let (k, n_t) = (cfg.k, cfg.n_t);
    if t_index < k || t_index + n_t >= scenario.len() {
        return Err(SimError::SampleRange { t_index, k, n_t, len: scenario.len() });
    }
    let cur = scenario.ego[t_index].pose;

    let rasters: Vec<Tensor<f32>> = (t_index - k..=t_index)
        .map(|t| raster::rasterize(scenario, t, &cfg.spec))
        .collect();
    let rel_poses: Vec<Pose2> = (t_index - k..t_index)
        .map(|t| q_pose(rel_pose(cur, scenario.ego[t].pose)))
        .collect();
    let raster_next = raster::rasterize(scenario, t_index + 1, &cfg.spec);
    let rel_next = q_pose(rel_pose(cur, scenario.ego[t_index + 1].pose));

    let gt_trajectory: Vec<[f64; 2]> = (1..=n_t)
        .map(|j| {
            let p = rel_pose(cur, scenario.ego[t_index + j].pose);
            [q(p.x), q(p.y)]
        })
        .collect();

    let inv = cur.invert();
    let to_local = |r: &Rect| {
        let local = inv.compose(&Pose2::new(r.cx, r.cy, r.yaw));
        q_rect(Rect::new(local.x, local.y, local.yaw, r.half_len, r.half_wid))
    };
    let future_agents: Vec<Vec<Rect>> = (1..=n_t)
        .map(|j| scenario.agent_rects(t_index + j).iter().map(to_local).collect())
        .collect();
    let obstacles: Vec<Rect> = scenario.obstacles.iter().map(to_local).collect();

    // command from net heading change over the horizon
    let net_turn = crate::geometry::normalize_angle(
        scenario.ego[t_index + n_t].pose.yaw - cur.yaw,
    );
    let command = if net_turn > COMMAND_DEADBAND {
        [1.0, 0.0, 0.0]
    } else if net_turn < -COMMAND_DEADBAND {
        [0.0, 0.0, 1.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    let yaw_rate = crate::geometry::normalize_angle(cur.yaw - scenario.ego[t_index - 1].pose.yaw) / TICK;
    let ego_status = EgoStatus {
        vx: q(scenario.ego[t_index].speed),
        vy: 0.0,
        yaw_rate: q(yaw_rate),
        command,
    };

    Ok(Sample {
        rasters,
        rel_poses,
        raster_next,
        rel_next,
        gt_trajectory,
        future_agents,
        obstacles,
        ego_status,
    })
}

/// Every valid sample index of a scenario under the config.
pub fn sample_indices(scenario: &Scenario, cfg: &GenConfig) -> Vec<usize> {
    (cfg.k..scenario.len().saturating_sub(cfg.n_t))
        .filter(|&t| t + cfg.n_t < scenario.len())
        .collect()
}
