//! Training: L1 trajectory loss on prior and final outputs, decoupled
//! weight-decay adaptive-moment optimizer, deterministic epoch loop, and
//! checkpoint persistence (magic "RSCK").

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Scalar, Tensor, VarId};
use crate::config::Config;
use crate::model::{ForwardInputs, ForwardOut, Model};
use crate::nn::{BoundParams, ParamStore};
use crate::sim::dataset::Dataset;
use crate::sim::Sample;

pub const CKPT_MAGIC: [u8; 4] = *b"RSCK";
pub const CKPT_VERSION: u32 = 1;

#[derive(thiserror::Error, Debug)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("empty dataset")]
    EmptyDataset,
}

#[derive(thiserror::Error, Debug)]
pub enum CkptError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint magic: expected \"RSCK\", got {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("config in checkpoint failed to parse: {0}")]
    Config(#[from] crate::config::ConfigError),
}

/// Sum of the mean-absolute errors of the prior and final trajectories
/// against the ground truth (plus, in the ablation arm, a supervision term
/// added by the caller).
pub fn planning_loss<T: Scalar>(g: &mut Graph<T>, t_prior: VarId, t_final: VarId, t_gt: VarId) -> VarId {
    let lp = g.l1_mean(t_prior, t_gt);
    let lf = g.l1_mean(t_final, t_gt);
    g.add(lp, lf)
}

// ---------------------------------------------------------------- optimizer

/// Adaptive-moment gradient descent with decoupled weight decay. Moments
/// are kept per parameter name; the update is applied in f32 so repeated
/// runs are bit-identical.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub t: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr: lr as f32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: weight_decay as f32,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &BTreeMap<String, Tensor<f32>>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in store.iter_mut() {
            let Some(gr) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.numel()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.numel()]);
            for i in 0..p.numel() {
                let g = gr.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.data[i] -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * p.data[i]);
            }
        }
    }
}

// ------------------------------------------------------------ forward glue

/// Binds one sample into a fresh graph and runs the model.
pub fn forward_sample<'a>(
    g: &mut Graph<f32>,
    p: &BoundParams,
    model: &Model,
    sample: &'a Sample,
) -> ForwardOut {
    let rasters: Vec<VarId> = sample.rasters.iter().map(|r| g.constant(r.clone())).collect();
    let inputs = ForwardInputs {
        rasters: &rasters,
        rel_poses: &sample.rel_poses,
        ego: Some(&sample.ego_status),
    };
    model.forward(g, p, &inputs)
}

fn gt_tensor<T: Scalar>(sample: &Sample) -> Tensor<T> {
    let flat: Vec<f64> = sample.gt_trajectory.iter().flatten().copied().collect();
    Tensor::from_f64_slice(&[sample.gt_trajectory.len(), 2], &flat)
}

/// Loss of one sample, including the future-supervision term when enabled.
fn sample_loss(g: &mut Graph<f32>, p: &BoundParams, model: &Model, sample: &Sample, sup_weight: f32) -> VarId {
    let out = forward_sample(g, p, model, sample);
    let gt = g.constant(gt_tensor(sample));
    let mut loss = planning_loss(g, out.t_prior, out.t_final, gt);
    if model.cfg.future_supervision {
        let next = g.constant(sample.raster_next.clone());
        let sup = model.supervision_loss(g, p, &out, next, sample.rel_next);
        let sup = g.scale(sup, sup_weight);
        loss = g.add(loss, sup);
    }
    loss
}

// ------------------------------------------------------------ training loop

pub struct TrainOutput {
    pub params: ParamStore<f32>,
    pub opt: AdamW,
    /// mean training loss per epoch
    pub epoch_losses: Vec<f64>,
    /// validation loss per epoch
    pub val_losses: Vec<f64>,
    pub best_epoch: usize,
}

/// Deterministic training: fixed shuffle order from the seed, sequential
/// gradient accumulation over each batch, best-by-validation parameters
/// returned. Aborts on a non-finite loss.
pub fn train(cfg: &Config, dataset: &Dataset) -> Result<TrainOutput, TrainError> {
    if dataset.samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let model = Model::new(cfg.model());
    let mut store = ParamStore::<f32>::new();
    model.init(&mut store, cfg.seed);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);

    let n = dataset.samples.len();
    let n_val = if n >= 10 { ((n as f64 * cfg.val_frac) as usize).max(1) } else { 0 };
    let n_train = n - n_val;
    let train_set = &dataset.samples[..n_train];
    let val_set = &dataset.samples[n_train..];

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut val_losses = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::INFINITY, store.clone(), opt.clone(), 0usize);

    let mut order: Vec<usize> = (0..n_train).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1 + epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0f64;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
            let mut batch_sum = 0.0f64;
            for &si in batch {
                let mut g = Graph::new();
                let p = BoundParams::bind(&mut g, &store);
                let loss = sample_loss(&mut g, &p, &model, &train_set[si], cfg.supervision_weight as f32);
                let lv = g.value(loss).item() as f64;
                if !lv.is_finite() {
                    return Err(TrainError::NonFinite { epoch, batch: batch_idx });
                }
                batch_sum += lv;
                let grads = g.backward(loss);
                for (name, var) in p.iter() {
                    if let Some(gt) = grads.get(*var) {
                        match acc.get_mut(name) {
                            Some(t) => t.add_assign(gt),
                            None => {
                                acc.insert(name.clone(), gt.clone());
                            }
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f32;
            for t in acc.values_mut() {
                for x in t.data.iter_mut() {
                    *x *= scale;
                }
            }
            opt.step(&mut store, &acc);
            epoch_sum += batch_sum;
        }
        let train_loss = epoch_sum / n_train as f64;
        epoch_losses.push(train_loss);

        let val_loss = if val_set.is_empty() {
            train_loss
        } else {
            let mut s = 0.0;
            for sample in val_set {
                let mut g = Graph::new();
                let p = BoundParams::bind(&mut g, &store);
                let loss = sample_loss(&mut g, &p, &model, sample, cfg.supervision_weight as f32);
                s += g.value(loss).item() as f64;
            }
            s / val_set.len() as f64
        };
        val_losses.push(val_loss);
        if val_loss < best.0 {
            best = (val_loss, store.clone(), opt.clone(), epoch);
        }
    }

    Ok(TrainOutput {
        params: best.1,
        opt: best.2,
        epoch_losses,
        val_losses,
        best_epoch: best.3,
    })
}

// --------------------------------------------------------------- checkpoint

pub struct Checkpoint {
    pub config: Config,
    pub params: ParamStore<f32>,
    pub opt: Option<AdamW>,
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_f32s(w: &mut impl Write, data: &[f32]) -> std::io::Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CkptError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CKPT_MAGIC)?;
    write_u32(&mut w, CKPT_VERSION)?;
    let cfg_text = ckpt.config.to_text();
    write_u32(&mut w, cfg_text.len() as u32)?;
    w.write_all(cfg_text.as_bytes())?;
    write_u32(&mut w, ckpt.params.len() as u32)?;
    for (name, t) in ckpt.params.iter() {
        write_u32(&mut w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        write_u32(&mut w, t.shape.len() as u32)?;
        for &d in &t.shape {
            write_u32(&mut w, d as u32)?;
        }
        write_f32s(&mut w, &t.data)?;
    }
    match &ckpt.opt {
        None => w.write_all(&[0u8])?,
        Some(opt) => {
            w.write_all(&[1u8])?;
            w.write_all(&opt.t.to_le_bytes())?;
            write_f32s(&mut w, &[opt.lr, opt.beta1, opt.beta2, opt.eps, opt.weight_decay])?;
            // moments follow parameter order; absent moments are empty
            for (name, t) in ckpt.params.iter() {
                let zeros = vec![0.0f32; t.numel()];
                write_f32s(&mut w, opt.m.get(name).unwrap_or(&zeros))?;
                write_f32s(&mut w, opt.v.get(name).unwrap_or(&zeros))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, CkptError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>, CkptError> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CkptError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != CKPT_MAGIC {
        return Err(CkptError::BadMagic(magic));
    }
    let version = read_u32(&mut r)?;
    if version != CKPT_VERSION {
        return Err(CkptError::BadVersion(version));
    }
    let cfg_len = read_u32(&mut r)? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes)?;
    let cfg_text =
        String::from_utf8(cfg_bytes).map_err(|e| CkptError::Malformed(format!("config: {e}")))?;
    let config = Config::parse(&cfg_text)?;

    let n_params = read_u32(&mut r)? as usize;
    let mut params = ParamStore::<f32>::new();
    for _ in 0..n_params {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| CkptError::Malformed(format!("param name: {e}")))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = read_f32s(&mut r, numel)?;
        params.insert(&name, Tensor::from_vec(&shape, data));
    }

    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let opt = if flag[0] == 1 {
        let mut tb = [0u8; 8];
        r.read_exact(&mut tb)?;
        let t = u64::from_le_bytes(tb);
        let hp = read_f32s(&mut r, 5)?;
        let mut opt = AdamW {
            lr: hp[0],
            beta1: hp[1],
            beta2: hp[2],
            eps: hp[3],
            weight_decay: hp[4],
            t,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        };
        for (name, tens) in params.iter() {
            opt.m.insert(name.clone(), read_f32s(&mut r, tens.numel())?);
            opt.v.insert(name.clone(), read_f32s(&mut r, tens.numel())?);
        }
        Some(opt)
    } else {
        None
    };

    Ok(Checkpoint { config, params, opt })
}
