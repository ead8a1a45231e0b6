//! Plain-text configuration: one `key = value` per line, `#` comments,
//! unknown keys rejected. The canonical serialization round-trips and is
//! echoed into checkpoints.

use std::path::Path;

use crate::geometry::GridSpec;
use crate::model::ModelConfig;
use crate::sim::GenConfig;
use crate::world::WorldVariant;

#[derive(thiserror::Error, Debug)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value `{value}` for key `{key}`: {reason}")]
    BadValue { line: usize, key: String, value: String, reason: String },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    BadLine { line: usize, text: String },
}

/// Everything the CLI needs: grid, model, training, and generation knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    // grid
    pub grid_h: usize,
    pub grid_w: usize,
    pub resolution: f64,
    // model
    pub c: usize,
    pub hidden: usize,
    pub n_s: usize,
    pub n_t: usize,
    pub k: usize,
    pub heads: usize,
    pub deform_heads: usize,
    pub deform_points: usize,
    pub fgtr_layers: usize,
    pub world_variant: WorldVariant,
    pub per_step_world_blocks: bool,
    pub use_world: bool,
    pub use_fgtr: bool,
    pub use_ego_status: bool,
    pub future_supervision: bool,
    // training
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub supervision_weight: f64,
    pub val_frac: f64,
    // generation
    pub train_samples: usize,
    pub eval_samples: usize,
    pub agents_min: usize,
    pub agents_max: usize,
    pub cruise_min: f64,
    pub cruise_max: f64,
    pub agent_speed_min: f64,
    pub agent_speed_max: f64,
    pub half_width: f64,
    pub ticks: usize,
    pub retries: usize,
    pub kind_weights: [f64; 5],
}

impl Default for Config {
    fn default() -> Self {
        let m = ModelConfig::default();
        let g = GenConfig::default();
        Config {
            grid_h: m.spec.h,
            grid_w: m.spec.w,
            resolution: m.spec.resolution,
            c: m.c,
            hidden: m.hidden,
            n_s: m.n_s,
            n_t: m.n_t,
            k: m.k,
            heads: m.heads,
            deform_heads: m.deform_heads,
            deform_points: m.deform_points,
            fgtr_layers: m.fgtr_layers,
            world_variant: m.world_variant,
            per_step_world_blocks: m.per_step_world_blocks,
            use_world: m.use_world,
            use_fgtr: m.use_fgtr,
            use_ego_status: m.use_ego_status,
            future_supervision: m.future_supervision,
            lr: 1e-4,
            weight_decay: 0.01,
            epochs: 12,
            batch_size: 8,
            seed: 0,
            supervision_weight: 1.0,
            val_frac: 0.1,
            train_samples: 2000,
            eval_samples: 500,
            agents_min: g.agents_min,
            agents_max: g.agents_max,
            cruise_min: g.cruise_min,
            cruise_max: g.cruise_max,
            agent_speed_min: g.agent_speed_min,
            agent_speed_max: g.agent_speed_max,
            half_width: g.half_width,
            ticks: g.ticks,
            retries: g.retries,
            kind_weights: g.kind_weights,
        }
    }
}

fn variant_name(v: WorldVariant) -> &'static str {
    match v {
        WorldVariant::Residual => "residual",
        WorldVariant::Normal => "normal",
    }
}

impl Config {
    pub fn spec(&self) -> GridSpec {
        GridSpec::new(self.grid_h, self.grid_w, self.resolution)
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            c: self.c,
            hidden: self.hidden,
            n_s: self.n_s,
            n_t: self.n_t,
            k: self.k,
            heads: self.heads,
            deform_heads: self.deform_heads,
            deform_points: self.deform_points,
            fgtr_layers: self.fgtr_layers,
            spec: self.spec(),
            world_variant: self.world_variant,
            per_step_world_blocks: self.per_step_world_blocks,
            use_world: self.use_world,
            use_fgtr: self.use_fgtr,
            use_ego_status: self.use_ego_status,
            future_supervision: self.future_supervision,
        }
    }

    pub fn gen(&self) -> GenConfig {
        GenConfig {
            spec: self.spec(),
            k: self.k,
            n_t: self.n_t,
            ticks: self.ticks,
            agents_min: self.agents_min,
            agents_max: self.agents_max,
            cruise_min: self.cruise_min,
            cruise_max: self.cruise_max,
            agent_speed_min: self.agent_speed_min,
            agent_speed_max: self.agent_speed_max,
            half_width: self.half_width,
            retries: self.retries,
            kind_weights: self.kind_weights,
        }
    }

    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = match line.split_once('=') {
                Some((k, v)) => (k.trim(), v.trim()),
                None => {
                    return Err(ConfigError::BadLine { line: line_no, text: raw.to_string() })
                }
            };
            cfg.set(key, value, line_no)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Config, ConfigError> {
        Config::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        let bad = |reason: &str| ConfigError::BadValue {
            line,
            key: key.to_string(),
            value: value.to_string(),
            reason: reason.to_string(),
        };
        macro_rules! num {
            ($field:expr) => {
                $field = value.parse().map_err(|e| bad(&format!("{e}")))?
            };
        }
        macro_rules! flag {
            ($field:expr) => {
                $field = match value {
                    "true" | "1" | "on" => true,
                    "false" | "0" | "off" => false,
                    _ => return Err(bad("expected true/false")),
                }
            };
        }
        match key {
            "grid_h" => num!(self.grid_h),
            "grid_w" => num!(self.grid_w),
            "resolution" => num!(self.resolution),
            "c" => num!(self.c),
            "hidden" => num!(self.hidden),
            "n_s" => num!(self.n_s),
            "n_t" => num!(self.n_t),
            "k" => num!(self.k),
            "heads" => num!(self.heads),
            "deform_heads" => num!(self.deform_heads),
            "deform_points" => num!(self.deform_points),
            "fgtr_layers" => num!(self.fgtr_layers),
            "world_variant" => {
                self.world_variant = match value {
                    "residual" => WorldVariant::Residual,
                    "normal" => WorldVariant::Normal,
                    _ => return Err(bad("expected residual/normal")),
                }
            }
            "per_step_world_blocks" => flag!(self.per_step_world_blocks),
            "use_world" => flag!(self.use_world),
            "use_fgtr" => flag!(self.use_fgtr),
            "use_ego_status" => flag!(self.use_ego_status),
            "future_supervision" => flag!(self.future_supervision),
            "lr" => num!(self.lr),
            "weight_decay" => num!(self.weight_decay),
            "epochs" => num!(self.epochs),
            "batch_size" => num!(self.batch_size),
            "seed" => num!(self.seed),
            "supervision_weight" => num!(self.supervision_weight),
            "val_frac" => num!(self.val_frac),
            "train_samples" => num!(self.train_samples),
            "eval_samples" => num!(self.eval_samples),
            "agents_min" => num!(self.agents_min),
            "agents_max" => num!(self.agents_max),
            "cruise_min" => num!(self.cruise_min),
            "cruise_max" => num!(self.cruise_max),
            "agent_speed_min" => num!(self.agent_speed_min),
            "agent_speed_max" => num!(self.agent_speed_max),
            "half_width" => num!(self.half_width),
            "ticks" => num!(self.ticks),
            "retries" => num!(self.retries),
            "kind_weights" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 5 {
                    return Err(bad("expected 5 comma-separated weights"));
                }
                for (i, p) in parts.iter().enumerate() {
                    self.kind_weights[i] = p.parse().map_err(|e| bad(&format!("{e}")))?;
                }
            }
            _ => return Err(ConfigError::UnknownKey { line, key: key.to_string() }),
        }
        Ok(())
    }

    /// Canonical serialization; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let kw = self
            .kind_weights
            .iter()
            .map(|w| format!("{w}"))
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "grid_h = {}\ngrid_w = {}\nresolution = {}\n\
             c = {}\nhidden = {}\nn_s = {}\nn_t = {}\nk = {}\nheads = {}\n\
             deform_heads = {}\ndeform_points = {}\nfgtr_layers = {}\n\
             world_variant = {}\nper_step_world_blocks = {}\n\
             use_world = {}\nuse_fgtr = {}\nuse_ego_status = {}\nfuture_supervision = {}\n\
             lr = {}\nweight_decay = {}\nepochs = {}\nbatch_size = {}\nseed = {}\n\
             supervision_weight = {}\nval_frac = {}\n\
             train_samples = {}\neval_samples = {}\n\
             agents_min = {}\nagents_max = {}\ncruise_min = {}\ncruise_max = {}\n\
             agent_speed_min = {}\nagent_speed_max = {}\nhalf_width = {}\n\
             ticks = {}\nretries = {}\nkind_weights = {}\n",
            self.grid_h,
            self.grid_w,
            self.resolution,
            self.c,
            self.hidden,
            self.n_s,
            self.n_t,
            self.k,
            self.heads,
            self.deform_heads,
            self.deform_points,
            self.fgtr_layers,
            variant_name(self.world_variant),
            self.per_step_world_blocks,
            self.use_world,
            self.use_fgtr,
            self.use_ego_status,
            self.future_supervision,
            self.lr,
            self.weight_decay,
            self.epochs,
            self.batch_size,
            self.seed,
            self.supervision_weight,
            self.val_frac,
            self.train_samples,
            self.eval_samples,
            self.agents_min,
            self.agents_max,
            self.cruise_min,
            self.cruise_max,
            self.agent_speed_min,
            self.agent_speed_max,
            self.half_width,
            self.ticks,
            self.retries,
            kw,
        )
    }
}
