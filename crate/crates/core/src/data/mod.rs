//! Synthetic pose datasets on disk: generation, loading and per-sample
//! preprocessing.
//!
//! Layout of a dataset root:
//!
//! ```text
//! root/scene.txt        scene description (key = value)
//! root/poses.csv        id,px,py,pz,qw,qx,qy,qz   (canonical quaternions)
//! root/images/<id>.ppm  binary P6 images
//! ```

pub mod augment;
pub mod ppm;
pub mod scene;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use augment::{
    apply_jitter, center_crop, color_jitter, random_crop, to_tensor, JitterFactors, JitterStrengths,
};
pub use ppm::RgbImage;
pub use scene::{Landmark, SceneSpec};

use crate::error::{Error, Result};
use crate::geometry::{canonicalize, Pose, UnitQuaternion};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MANIFEST_HEADER: &str = "id,px,py,pz,qw,qx,qy,qz";
pub const MANIFEST_FILE: &str = "poses.csv";
pub const SCENE_FILE: &str = "scene.txt";
pub const IMAGE_DIR: &str = "images";

/// Manifest quaternions may deviate from unit norm by at most this much.
pub const MANIFEST_NORM_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// 80/10/10 assignment from a hash of `(seed, index)`.
pub fn split_of(seed: u64, index: u64) -> Split {
    match splitmix64(splitmix64(seed) ^ index) % 10 {
        0..=7 => Split::Train,
        8 => Split::Val,
        _ => Split::Test,
    }
}

pub fn sample_id(index: usize) -> String {
    format!("{index:06}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub pose: Pose<f64>,
}

pub fn write_manifest(rows: &[ManifestRow]) -> String {
    let mut s = String::from(MANIFEST_HEADER);
    s.push('\n');
    for r in rows {
        let (p, q) = (r.pose.p, r.pose.q);
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.id, p[0], p[1], p[2], q.u, q.v[0], q.v[1], q.v[2]
        );
    }
    s
}

/// Parses `poses.csv`; quaternions are checked and canonicalized.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end_matches('\r') == MANIFEST_HEADER => {}
        other => {
            return Err(Error::Data(format!(
                "manifest header must be '{MANIFEST_HEADER}', got {:?}",
                other.unwrap_or("")
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let lineno = i + 2;
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 8 {
            return Err(Error::Data(format!("manifest line {lineno}: expected 8 columns, got {}", cols.len())));
        }
        let mut v = [0.0; 7];
        for (k, c) in cols[1..].iter().enumerate() {
            v[k] = c
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::Data(format!("manifest line {lineno}: invalid number '{c}'")))?;
        }
        let q = UnitQuaternion { u: v[3], v: [v[4], v[5], v[6]] };
        let norm = q.norm_squared().sqrt();
        if (norm - 1.0).abs() > MANIFEST_NORM_TOLERANCE {
            return Err(Error::Data(format!(
                "manifest line {lineno}: quaternion norm {norm} is not unit"
            )));
        }
        let q = if (norm - 1.0).abs() > 1e-12 {
            UnitQuaternion::normalize(q.u, q.v)?
        } else {
            q
        };
        rows.push(ManifestRow {
            id: cols[0].to_string(),
            pose: Pose {
                p: [v[0], v[1], v[2]],
                q: canonicalize(&q),
            },
        });
    }
    Ok(rows)
}

/// One stored sample with its raw (uncropped) image.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSample {
    pub id: String,
    pub index: usize,
    pub pose: Pose<f64>,
    pub image: RgbImage,
    pub split: Split,
}

/// Model-ready sample: cropped image in `[−1, 1]`, shape `[3, R, R]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSample<T> {
    pub image: Tensor<T>,
    pub pose: Pose<f64>,
    pub id: String,
}

impl RawSample {
    /// Central crop, no augmentation.
    pub fn eval_sample<T: Scalar>(&self, crop: usize) -> Result<PoseSample<T>> {
        let img = center_crop(&self.image, crop)?;
        Ok(PoseSample {
            image: to_tensor(&img),
            pose: self.pose,
            id: self.id.clone(),
        })
    }

    /// Random crop followed by colour jitter.
    pub fn train_sample<T: Scalar, R: Rng + ?Sized>(
        &self,
        crop: usize,
        jitter: &JitterStrengths,
        rng: &mut R,
    ) -> Result<PoseSample<T>> {
        let img = random_crop(&self.image, crop, rng)?;
        let image = color_jitter(&to_tensor::<T>(&img), jitter, rng)?;
        Ok(PoseSample {
            image,
            pose: self.pose,
            id: self.id.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub scene: SceneSpec,
    pub samples: Vec<RawSample>,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == split).collect()
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenerateSummary {
    pub count: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Samples `count` poses from `seed`, renders them and writes the dataset
/// tree under `root` (created if needed).
pub fn generate_dataset(root: &Path, scene: &SceneSpec, count: usize, seed: u64) -> Result<GenerateSummary> {
    if count == 0 {
        return Err(Error::Config("dataset count must be at least 1".into()));
    }
    scene.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<ManifestRow> = (0..count)
        .map(|i| ManifestRow {
            id: sample_id(i),
            pose: scene.sample_pose(&mut rng),
        })
        .collect();

    let img_dir = root.join(IMAGE_DIR);
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    rows.par_iter().try_for_each(|r| {
        let img = scene.render(&r.pose)?;
        write_file(&img_dir.join(format!("{}.ppm", r.id)), &ppm::encode(&img))
    })?;
    write_file(&root.join(MANIFEST_FILE), write_manifest(&rows).as_bytes())?;
    write_file(&root.join(SCENE_FILE), scene.to_kv().as_bytes())?;

    let splits: Vec<Split> = (0..count).map(|i| split_of(scene.seed, i as u64)).collect();
    let n = |s: Split| splits.iter().filter(|&&x| x == s).count();
    Ok(GenerateSummary {
        count,
        train: n(Split::Train),
        val: n(Split::Val),
        test: n(Split::Test),
    })
}

/// Reads a dataset tree. Images are kept as 8-bit; cropping and
/// normalization happen per use.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let scene_path = root.join(SCENE_FILE);
    let scene_text = String::from_utf8(read_file(&scene_path)?)
        .map_err(|_| Error::Data(format!("{}: not UTF-8", scene_path.display())))?;
    let scene = SceneSpec::from_kv(&scene_text)
        .map_err(|e| Error::Data(format!("{}: {e}", scene_path.display())))?;
    let manifest_path = root.join(MANIFEST_FILE);
    let manifest = String::from_utf8(read_file(&manifest_path)?)
        .map_err(|_| Error::Data(format!("{}: not UTF-8", manifest_path.display())))?;
    let rows = parse_manifest(&manifest).map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no samples", manifest_path.display())));
    }

    let samples = rows
        .into_par_iter()
        .enumerate()
        .map(|(index, row)| {
            let path = root.join(IMAGE_DIR).join(format!("{}.ppm", row.id));
            let image = ppm::decode(&read_file(&path)?)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            if image.width != scene.resolution || image.height != scene.resolution {
                return Err(Error::Data(format!(
                    "{}: image is {}x{}, scene declares {}",
                    path.display(),
                    image.width,
                    image.height,
                    scene.resolution
                )));
            }
            Ok(RawSample {
                split: split_of(scene.seed, index as u64),
                id: row.id,
                index,
                pose: row.pose,
                image,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        root: root.to_path_buf(),
        scene,
        samples,
    })
}
