//! On-disk formats: binary maps, trajectory text files, key-value manifests
//! and simulated sequences.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DVector, Vector3};

use crate::camera::Camera;
use crate::depth::DepthPrior;
use crate::error::{Error, Result};
use crate::eval::Trajectory;
use crate::frame::Frame;
use crate::geometry::Pose;
use crate::map::DenseMap;
use crate::sim::Sequence;

pub const MAP_MAGIC: &[u8; 4] = b"SGDM";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const GT_TRAJECTORY_FILE: &str = "gt_trajectory.txt";
pub const INIT_TRAJECTORY_FILE: &str = "init_trajectory.txt";
const SEQUENCE_FORMAT: &str = "fgslam-sequence-1";

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Channel data as `f32` little endian; the mask is not stored.
pub fn encode_map(map: &DenseMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * map.data().len());
    out.extend_from_slice(MAP_MAGIC);
    for d in [map.channels(), map.height(), map.width()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in map.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

/// Decodes a map with every pixel valid.
pub fn decode_map(bytes: &[u8], path: &Path) -> Result<DenseMap> {
    if bytes.len() < 16 || &bytes[..4] != MAP_MAGIC {
        return Err(Error::format(path, "missing SGDM header"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let n = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::format(path, "dimensions overflow"))?;
    if bytes.len() != 16 + 4 * n {
        return Err(Error::format(
            path,
            format!("expected {} payload bytes, found {}", 4 * n, bytes.len() - 16),
        ));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    DenseMap::new(c, h, w, data, vec![true; h * w])
}

pub fn write_map(path: &Path, map: &DenseMap) -> Result<()> {
    write_bytes(path, &encode_map(map))
}

pub fn read_map(path: &Path) -> Result<DenseMap> {
    decode_map(&read_bytes(path)?, path)
}

/// A mask as a one-channel map of zeros and ones.
pub fn write_mask(path: &Path, mask: &[bool], height: usize, width: usize) -> Result<()> {
    let data = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    write_map(
        path,
        &DenseMap::new(1, height, width, data, vec![true; height * width])?,
    )
}

pub fn read_mask(path: &Path) -> Result<Vec<bool>> {
    let m = read_map(path)?;
    if m.channels() != 1 {
        return Err(Error::format(path, "mask must have one channel"));
    }
    m.data()
        .iter()
        .map(|&v| match v {
            0.0 => Ok(false),
            1.0 => Ok(true),
            _ => Err(Error::format(path, format!("mask value {v} is not 0 or 1"))),
        })
        .collect()
}

/// `id tx ty tz qx qy qz qw` with 17 significant digits.
pub fn format_trajectory(t: &Trajectory) -> String {
    let mut s = String::new();
    for (id, p) in t.entries() {
        let q = p.quaternion();
        let v = [
            p.translation.x,
            p.translation.y,
            p.translation.z,
            q[0],
            q[1],
            q[2],
            q[3],
        ];
        s.push_str(&id.to_string());
        for x in v {
            s.push_str(&format!(" {x:.16e}"));
        }
        s.push('\n');
    }
    s
}

pub fn parse_trajectory(text: &str, path: &Path) -> Result<Trajectory> {
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: &str| Error::format(path, format!("line {}: {m}", n + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 8 {
            return Err(bad("expected `id tx ty tz qx qy qz qw`"));
        }
        let id: usize = f[0].parse().map_err(|_| bad("invalid id"))?;
        let mut v = [0.0f64; 7];
        for (slot, s) in v.iter_mut().zip(&f[1..]) {
            *slot = s.parse().map_err(|_| bad("invalid number"))?;
        }
        let qn = (v[3] * v[3] + v[4] * v[4] + v[5] * v[5] + v[6] * v[6]).sqrt();
        if !(qn > 0.0 && qn.is_finite()) {
            return Err(bad("degenerate quaternion"));
        }
        entries.push((
            id,
            Pose::from_quaternion(Vector3::new(v[0], v[1], v[2]), [v[3], v[4], v[5], v[6]]),
        ));
    }
    Trajectory::new(entries).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_trajectory(path: &Path, t: &Trajectory) -> Result<()> {
    write_bytes(path, format_trajectory(t).as_bytes())
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    parse_trajectory(&read_text(path)?, path)
}

/// Ordered `key = value` lines; `#` starts a comment line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    entries: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::format(path, format!("line {}: expected `key = value`", n + 1)));
            };
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::format(path, format!("line {}: empty key", n + 1)));
            }
            if entries.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::format(path, format!("line {}: duplicate key `{k}`", n + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, self.to_text().as_bytes())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn require<T: std::str::FromStr>(&self, key: &str, path: &Path) -> Result<T> {
        let v = self
            .get(key)
            .ok_or_else(|| Error::format(path, format!("missing key `{key}`")))?;
        v.parse()
            .map_err(|_| Error::format(path, format!("invalid value `{v}` for `{key}`")))
    }
}

/// One frame read back from a sequence directory.
#[derive(Clone, Debug)]
pub struct StoredFrame {
    pub id: usize,
    pub prior: DepthPrior,
    pub features: DenseMap,
    pub descriptors: DenseMap,
    pub gt_depth: Option<DenseMap>,
}

/// A sequence as stored on disk.
#[derive(Clone, Debug)]
pub struct StoredSequence {
    pub dir: PathBuf,
    pub camera: Camera,
    pub levels: usize,
    pub frames: Vec<StoredFrame>,
    pub gt: Option<Trajectory>,
    pub init: Option<Trajectory>,
}

impl StoredSequence {
    pub fn frame(&self, i: usize) -> Result<Frame> {
        let f = &self.frames[i];
        Frame::new(
            f.id,
            self.camera,
            f.prior.clone(),
            f.features.clone(),
            f.descriptors.clone(),
            self.levels,
        )
    }
}

fn frame_file(i: usize, what: &str) -> String {
    format!("frame_{i:05}_{what}.sgdm")
}

const FRAME_PARTS: [&str; 6] = ["average", "bases", "features", "descriptors", "mask", "gt_depth"];

/// Writes the manifest, per-frame maps and the ground-truth and initial
/// trajectories of a simulated sequence.
pub fn write_sequence(dir: &Path, seq: &Sequence) -> Result<()> {
    create_dir(dir)?;
    let c = &seq.camera;
    let cfg = &seq.config;
    let mut m = Manifest::new();
    m.set("format", SEQUENCE_FORMAT);
    m.set("frames", seq.frames.len());
    m.set("height", c.height);
    m.set("width", c.width);
    m.set("fx", c.fx);
    m.set("fy", c.fy);
    m.set("cx", c.cx);
    m.set("cy", c.cy);
    m.set("levels", cfg.levels);
    m.set("gt_trajectory", GT_TRAJECTORY_FILE);
    m.set("init_trajectory", INIT_TRAJECTORY_FILE);
    for (i, f) in seq.frames.iter().enumerate() {
        m.set(format!("frame.{i:05}.id"), f.id);
        for part in FRAME_PARTS {
            m.set(format!("frame.{i:05}.{part}"), frame_file(i, part));
        }
        let (h, w) = (c.height, c.width);
        write_map(&dir.join(frame_file(i, "average")), f.prior.average())?;
        write_map(&dir.join(frame_file(i, "bases")), f.prior.bases())?;
        write_map(&dir.join(frame_file(i, "features")), &f.features)?;
        write_map(&dir.join(frame_file(i, "descriptors")), &f.descriptors)?;
        write_mask(&dir.join(frame_file(i, "mask")), f.mask(), h, w)?;
        write_map(&dir.join(frame_file(i, "gt_depth")), &f.gt_depth)?;
    }
    m.write(&dir.join(MANIFEST_FILE))?;
    let gt = Trajectory::new(seq.frames.iter().map(|f| (f.id, f.gt_pose)).collect())?;
    let init = Trajectory::new(seq.frames.iter().map(|f| (f.id, f.init_pose)).collect())?;
    write_trajectory(&dir.join(GT_TRAJECTORY_FILE), &gt)?;
    write_trajectory(&dir.join(INIT_TRAJECTORY_FILE), &init)?;
    Ok(())
}

pub fn read_sequence(dir: &Path) -> Result<StoredSequence> {
    let mpath = dir.join(MANIFEST_FILE);
    let m = Manifest::read(&mpath)?;
    if m.get("format") != Some(SEQUENCE_FORMAT) {
        return Err(Error::format(&mpath, "not a sequence manifest"));
    }
    let n: usize = m.require("frames", &mpath)?;
    let (h, w): (usize, usize) = (m.require("height", &mpath)?, m.require("width", &mpath)?);
    let camera = Camera::new(
        m.require("fx", &mpath)?,
        m.require("fy", &mpath)?,
        m.require("cx", &mpath)?,
        m.require("cy", &mpath)?,
        w,
        h,
    )?;
    let levels: usize = m.require("levels", &mpath)?;
    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        let file = |part: &str| -> Result<PathBuf> {
            let name: String = m.require(&format!("frame.{i:05}.{part}"), &mpath)?;
            Ok(dir.join(name))
        };
        let check = |map: &DenseMap, path: &Path| -> Result<()> {
            if map.height() != h || map.width() != w {
                return Err(Error::format(
                    path,
                    format!("expected {h}x{w}, found {}x{}", map.height(), map.width()),
                ));
            }
            Ok(())
        };
        let mask = read_mask(&file("mask")?)?;
        let mut maps = Vec::new();
        for part in ["average", "bases", "features", "descriptors"] {
            let p = file(part)?;
            let map = read_map(&p)?;
            check(&map, &p)?;
            maps.push(map.with_mask(mask.clone())?);
        }
        let descriptors = maps.pop().unwrap();
        let features = maps.pop().unwrap();
        let bases = maps.pop().unwrap();
        let average = maps.pop().unwrap();
        let code = DVector::zeros(bases.channels());
        let prior = DepthPrior::new(average, bases, code, 1.0)?;
        let gt_depth = match m.get(&format!("frame.{i:05}.gt_depth")) {
            Some(name) => {
                let p = dir.join(name);
                let map = read_map(&p)?;
                check(&map, &p)?;
                Some(map.with_mask(mask.clone())?)
            }
            None => None,
        };
        frames.push(StoredFrame {
            id: m.require(&format!("frame.{i:05}.id"), &mpath)?,
            prior,
            features,
            descriptors,
            gt_depth,
        });
    }
    let traj = |key: &str| -> Result<Option<Trajectory>> {
        match m.get(key) {
            Some(name) => read_trajectory(&dir.join(name)).map(Some),
            None => Ok(None),
        }
    };
    Ok(StoredSequence {
        dir: dir.to_path_buf(),
        camera,
        levels,
        frames,
        gt: traj("gt_trajectory")?,
        init: traj("init_trajectory")?,
    })
}
