//! Binary dataset persistence: little-endian, magic "RSWD", version 1,
//! fixed-size records (implicit index). All arrays are 32-bit floats in
//! row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::collision::Rect;
use crate::geometry::{GridSpec, Pose2};
use crate::planner::EgoStatus;
use crate::scene::RASTER_CHANNELS;

use super::{generate_scenario, make_sample, sample_indices, GenConfig, Sample, SimError};

pub const MAGIC: [u8; 4] = *b"RSWD";
pub const VERSION: u32 = 1;

#[derive(thiserror::Error, Debug)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic at byte 0: expected \"RSWD\", got {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0} at byte 4")]
    BadVersion(u32),
    #[error("truncated file: expected {expected} bytes, found {found} (offset {offset})")]
    Truncated { expected: u64, found: u64, offset: u64 },
    #[error("inconsistent header: {0}")]
    BadHeader(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: GridSpec,
    pub k: usize,
    pub n_t: usize,
    pub max_agents: usize,
    pub max_obstacles: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(spec: GridSpec, k: usize, n_t: usize, samples: Vec<Sample>) -> Self {
        let max_agents = samples
            .iter()
            .flat_map(|s| s.future_agents.iter().map(|v| v.len()))
            .max()
            .unwrap_or(0);
        let max_obstacles = samples.iter().map(|s| s.obstacles.len()).max().unwrap_or(0);
        Dataset { spec, k, n_t, max_agents, max_obstacles, samples }
    }

    fn record_floats(&self) -> usize {
        let hw = self.spec.h * self.spec.w;
        (self.k + 2) * RASTER_CHANNELS * hw     // k+1 frames + next frame
            + (self.k + 1) * 3                   // k rel poses + rel_next
            + self.n_t * 2                       // gt trajectory
            + 6                                  // ego status
            + self.n_t * self.max_agents * 6     // future agent rects + valid flag
            + self.max_obstacles * 6 // obstacle rects + valid flag
    }

    pub fn record_size(&self) -> u64 {
        4 * self.record_floats() as u64
    }
}

/// Generates a deterministic dataset split. Scenario seeds come from the
/// disjoint stream `(2*base_seed + split) << 32 | i`, so the train and eval
/// splits of one benchmark never share a scenario.
pub fn generate_dataset(
    gen: &GenConfig,
    base_seed: u64,
    split: u64,
    count: usize,
) -> Result<Dataset, SimError> {
    let mut samples: Vec<Sample> = Vec::with_capacity(count);
    let mut i = 0u64;
    while samples.len() < count {
        let seed = base_seed.wrapping_mul(2).wrapping_add(split).wrapping_shl(32).wrapping_add(i);
        let scenario = generate_scenario(seed, gen)?;
        for t in sample_indices(&scenario, gen) {
            if samples.len() == count {
                break;
            }
            samples.push(make_sample(&scenario, t, gen)?);
        }
        i += 1;
    }
    Ok(Dataset::new(gen.spec, gen.k, gen.n_t, samples))
}

fn push_rect(buf: &mut Vec<f32>, r: &Rect) {
    buf.extend_from_slice(&[r.cx as f32, r.cy as f32, r.yaw as f32, r.half_len as f32, r.half_wid as f32, 1.0]);
}

fn push_pose(buf: &mut Vec<f32>, p: &Pose2) {
    buf.extend_from_slice(&[p.x as f32, p.y as f32, p.yaw as f32]);
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for v in [ds.spec.h as u32, ds.spec.w as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(ds.spec.resolution as f32).to_le_bytes())?;
    for v in [
        ds.k as u32,
        ds.n_t as u32,
        ds.max_agents as u32,
        ds.max_obstacles as u32,
        ds.samples.len() as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&ds.record_size().to_le_bytes())?;

    let floats = ds.record_floats();
    for s in &ds.samples {
        let mut buf: Vec<f32> = Vec::with_capacity(floats);
        for r in &s.rasters {
            buf.extend_from_slice(&r.data);
        }
        buf.extend_from_slice(&s.raster_next.data);
        for p in &s.rel_poses {
            push_pose(&mut buf, p);
        }
        push_pose(&mut buf, &s.rel_next);
        for wp in &s.gt_trajectory {
            buf.push(wp[0] as f32);
            buf.push(wp[1] as f32);
        }
        let e = &s.ego_status;
        buf.extend_from_slice(&[
            e.vx as f32,
            e.vy as f32,
            e.yaw_rate as f32,
            e.command[0] as f32,
            e.command[1] as f32,
            e.command[2] as f32,
        ]);
        for tickset in &s.future_agents {
            for r in tickset {
                push_rect(&mut buf, r);
            }
            for _ in tickset.len()..ds.max_agents {
                buf.extend_from_slice(&[0.0; 6]);
            }
        }
        for r in &s.obstacles {
            push_rect(&mut buf, r);
        }
        for _ in s.obstacles.len()..ds.max_obstacles {
            buf.extend_from_slice(&[0.0; 6]);
        }
        assert_eq!(buf.len(), floats, "record layout drifted from header");
        let mut bytes = Vec::with_capacity(buf.len() * 4);
        for v in &buf {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [f32],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> &'a [f32] {
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        s
    }
    fn pose(&mut self) -> Pose2 {
        let s = self.take(3);
        Pose2::new(s[0] as f64, s[1] as f64, s[2] as f64)
    }
    fn rects(&mut self, n: usize) -> Vec<Rect> {
        let mut out = Vec::new();
        for _ in 0..n {
            let s = self.take(6);
            if s[5] != 0.0 {
                out.push(Rect::new(s[0] as f64, s[1] as f64, s[2] as f64, s[3] as f64, s[4] as f64));
            }
        }
        out
    }
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(DatasetError::BadMagic(magic));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32, DatasetError> {
        r.read_exact(&mut u32buf)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(DatasetError::BadVersion(version));
    }
    let h = read_u32(&mut r)? as usize;
    let w = read_u32(&mut r)? as usize;
    let mut f32buf = [0u8; 4];
    r.read_exact(&mut f32buf)?;
    let resolution = f32::from_le_bytes(f32buf) as f64;
    let k = read_u32(&mut r)? as usize;
    let n_t = read_u32(&mut r)? as usize;
    let max_agents = read_u32(&mut r)? as usize;
    let max_obstacles = read_u32(&mut r)? as usize;
    let count = read_u32(&mut r)? as usize;
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)?;
    let record_size = u64::from_le_bytes(u64buf);

    if h == 0 || w == 0 || resolution <= 0.0 {
        return Err(DatasetError::BadHeader(format!("grid {h}x{w} @ {resolution}")));
    }
    let mut ds = Dataset {
        spec: GridSpec::new(h, w, resolution),
        k,
        n_t,
        max_agents,
        max_obstacles,
        samples: Vec::new(),
    };
    if record_size != ds.record_size() {
        return Err(DatasetError::BadHeader(format!(
            "record size {record_size} does not match layout {}",
            ds.record_size()
        )));
    }

    // validate total length before materializing any sample
    const HEADER_BYTES: u64 = 4 + 4 + 4 + 4 + 4 + 5 * 4 + 8;
    let file_len = r.get_ref().metadata()?.len();
    let expected = HEADER_BYTES + count as u64 * record_size;
    if file_len != expected {
        return Err(DatasetError::Truncated {
            expected,
            found: file_len,
            offset: file_len.min(expected),
        });
    }

    let floats = ds.record_floats();
    let hw = h * w;
    let mut raw = vec![0u8; floats * 4];
    ds.samples.reserve(count);
    for _ in 0..count {
        r.read_exact(&mut raw)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut cur = Cursor { data: &data, pos: 0 };
        let rasters: Vec<Tensor<f32>> = (0..=k)
            .map(|_| Tensor::from_vec(&[RASTER_CHANNELS, hw], cur.take(RASTER_CHANNELS * hw).to_vec()))
            .collect();
        let raster_next = Tensor::from_vec(&[RASTER_CHANNELS, hw], cur.take(RASTER_CHANNELS * hw).to_vec());
        let rel_poses: Vec<Pose2> = (0..k).map(|_| cur.pose()).collect();
        let rel_next = cur.pose();
        let gt_trajectory: Vec<[f64; 2]> = (0..n_t)
            .map(|_| {
                let s = cur.take(2);
                [s[0] as f64, s[1] as f64]
            })
            .collect();
        let e = cur.take(6);
        let ego_status = EgoStatus {
            vx: e[0] as f64,
            vy: e[1] as f64,
            yaw_rate: e[2] as f64,
            command: [e[3] as f64, e[4] as f64, e[5] as f64],
        };
        let future_agents: Vec<Vec<Rect>> = (0..n_t).map(|_| cur.rects(max_agents)).collect();
        let obstacles = cur.rects(max_obstacles);
        assert_eq!(cur.pos, floats);
        ds.samples.push(Sample {
            rasters,
            rel_poses,
            raster_next,
            rel_next,
            gt_trajectory,
            future_agents,
            obstacles,
            ego_status,
        });
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_scenario, make_sample, sample_indices, GenConfig};

    fn small_dataset() -> Dataset {
        let cfg = GenConfig { spec: GridSpec::new(16, 16, 1.0), ..GenConfig::default() };
        let mut samples = Vec::new();
        for seed in 0..4u64 {
            let s = generate_scenario(seed, &cfg).unwrap();
            for &t in sample_indices(&s, &cfg).iter().take(3) {
                samples.push(make_sample(&s, t, &cfg).unwrap());
            }
        }
        Dataset::new(cfg.spec, cfg.k, cfg.n_t, samples)
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let ds = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.rswd");
        write_dataset(&ds, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn bad_magic_rejected() {
        let ds = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.rswd");
        write_dataset(&ds, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_dataset(&path), Err(DatasetError::BadMagic(_))));
    }

    #[test]
    fn truncated_file_rejected_without_partial_samples() {
        let ds = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.rswd");
        write_dataset(&ds, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        match read_dataset(&path) {
            Err(DatasetError::Truncated { expected, found, .. }) => {
                assert_eq!(found, bytes.len() as u64 - 100);
                assert_eq!(expected, bytes.len() as u64);
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_version_rejected() {
        let ds = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.rswd");
        write_dataset(&ds, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_dataset(&path), Err(DatasetError::BadVersion(9))));
    }

    #[test]
    fn identical_seed_writes_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.rswd");
        let p2 = dir.path().join("b.rswd");
        write_dataset(&small_dataset(), &p1).unwrap();
        write_dataset(&small_dataset(), &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
