//! Synthetic dataset generation and the `DRPZ` binary container.
//!
//! Layout (little-endian): magic `DRPZ`, `u32` version, `u32` joint count,
//! `u64` sample count, camera as five `f64` (fx, fy, cx, cy, root depth),
//! `u64` generator seed, then per sample the `N×3` ground truth, `N×2` clean
//! projection and `N×2` noisy projection as contiguous `f64` arrays.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{mix, RngStream};
use crate::skeleton::{generate_pose, perturb2d, project, Camera, Pose2D, Pose3D, PoseGenConfig, SkeletonGraph};

pub const MAGIC: &[u8; 4] = b"DRPZ";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8 + 5 * 8 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub gt: Pose3D,
    pub clean: Pose2D,
    pub noisy: Pose2D,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub num_joints: usize,
    pub camera: Camera,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

/// Which split a sample belongs to; each split draws from its own streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Generates `count` samples; sample `i` uses its own stream, so the output
/// does not depend on how generation is scheduled.
pub fn generate_samples(
    seed: u64,
    split: Split,
    count: usize,
    skeleton: &SkeletonGraph,
    pose_cfg: &PoseGenConfig,
    camera: &Camera,
    sigma: f64,
) -> Result<Vec<Sample>> {
    camera.validate()?;
    pose_cfg.validate(skeleton)?;
    (0..count)
        .map(|i| {
            let mut stream = RngStream::new(seed, mix(&[split.tag(), i as u64]));
            let gt = generate_pose(&mut stream, skeleton, pose_cfg)?;
            let clean = project(&gt, camera)?;
            let noisy = perturb2d(&clean, sigma, &mut stream)?;
            Ok(Sample { gt, clean, noisy })
        })
        .collect()
}

pub fn encode(d: &DatasetFile) -> Result<Vec<u8>> {
    let n = d.num_joints;
    let mut buf = Vec::with_capacity(HEADER_LEN + d.samples.len() * n * 7 * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(d.samples.len() as u64).to_le_bytes());
    for v in d.camera.to_array() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&d.seed.to_le_bytes());
    for (i, s) in d.samples.iter().enumerate() {
        if s.gt.num_joints() != n || s.clean.num_joints() != n || s.noisy.num_joints() != n {
            return Err(Error::Format(format!("sample {i} does not have {n} joints")));
        }
        for v in s.gt.joints().iter().flatten() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in s.clean.joints().iter().chain(s.noisy.joints()).flatten() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated: needed {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<DatasetFile> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic bytes {magic:?}, expected {MAGIC:?}")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}, expected {VERSION}")));
    }
    let n = r.u32()? as usize;
    if n == 0 {
        return Err(Error::Format("joint count is zero".into()));
    }
    let count = r.u64()? as usize;
    let mut cam = [0.0; 5];
    for c in cam.iter_mut() {
        *c = r.f64()?;
    }
    let camera = Camera::from_array(cam);
    camera.validate().map_err(|e| Error::Format(format!("header camera: {e}")))?;
    let seed = r.u64()?;
    let expected = count
        .checked_mul(n * 7 * 8)
        .ok_or_else(|| Error::Format("sample count overflows".into()))?;
    if bytes.len() - r.pos != expected {
        return Err(Error::Format(format!(
            "header announces {count} samples ({expected} bytes), body has {} bytes",
            bytes.len() - r.pos
        )));
    }
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let mut gt = Vec::with_capacity(n);
        for _ in 0..n {
            gt.push([r.f64()?, r.f64()?, r.f64()?]);
        }
        let mut read2 = || -> Result<Vec<[f64; 2]>> { (0..n).map(|_| Ok([r.f64()?, r.f64()?])).collect() };
        let clean = read2()?;
        let noisy = read2()?;
        let wrap = |e: Error| Error::Format(format!("sample {i}: {e}"));
        samples.push(Sample {
            gt: Pose3D::new(gt).map_err(wrap)?,
            clean: Pose2D::new(clean).map_err(wrap)?,
            noisy: Pose2D::new(noisy).map_err(wrap)?,
        });
    }
    Ok(DatasetFile { num_joints: n, camera, seed, samples })
}

pub fn dataset_write(path: impl AsRef<Path>, samples: &[Sample], camera: &Camera, seed: u64) -> Result<()> {
    let num_joints = samples.first().map(|s| s.gt.num_joints()).unwrap_or(crate::skeleton::NUM_JOINTS);
    let d = DatasetFile { num_joints, camera: *camera, seed, samples: samples.to_vec() };
    write_file(path, &d)
}

pub fn write_file(path: impl AsRef<Path>, d: &DatasetFile) -> Result<()> {
    let bytes = encode(d)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn dataset_read(path: impl AsRef<Path>) -> Result<DatasetFile> {
    decode(&fs::read(path)?)
}

#[derive(Serialize)]
struct JsonHeader<'a> {
    magic: &'a str,
    version: u32,
    n: usize,
    sample_count: usize,
    camera: [f64; 5],
    seed: u64,
    samples: &'a [Sample],
}

/// Debug export mirroring the binary layout.
pub fn to_json(d: &DatasetFile) -> Result<String> {
    Ok(serde_json::to_string_pretty(&JsonHeader {
        magic: "DRPZ",
        version: VERSION,
        n: d.num_joints,
        sample_count: d.samples.len(),
        camera: d.camera.to_array(),
        seed: d.seed,
        samples: &d.samples,
    })?)
}
