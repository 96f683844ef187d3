//! Synthetic landmark scene and its pinhole renderer.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ppm::RgbImage;
use crate::error::{Error, Result};
use crate::geometry::{canonicalize, Pose, UnitQuaternion, Vec3};
use crate::model::parse_kv;

pub const SCENE_FORMAT_VERSION: u32 = 1;

/// Points closer than this along the optical axis are not drawn.
const NEAR_PLANE: f64 = 0.1;
/// Sub-pixel samples per axis for disc coverage.
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Landmark {
    pub position: Vec3<f64>,
    pub color: [u8; 3],
}

/// Everything needed to sample poses and render images deterministically.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub landmarks: Vec<Landmark>,
    pub focal: f64,
    pub principal: [f64; 2],
    pub box_min: Vec3<f64>,
    pub box_max: Vec3<f64>,
    /// Largest rotation away from the reference orientation, in degrees.
    pub max_rotation_deg: f64,
    /// Rendered image side length.
    pub resolution: usize,
    /// Side length of the crop fed to the model.
    pub crop: usize,
    /// World-space landmark radius.
    pub landmark_radius: f64,
    pub background: [u8; 3],
    /// Seed of the train/val/test split hash.
    pub seed: u64,
}

impl SceneSpec {
    /// Random landmark field in front of the sampling box. Every landmark is
    /// visible from every box position at the reference orientation.
    pub fn synthetic(seed: u64, n_landmarks: usize, resolution: usize, crop: usize) -> Result<Self> {
        if n_landmarks < 4 {
            return Err(Error::Config(format!("need at least 4 landmarks, got {n_landmarks}")));
        }
        if crop == 0 || crop > resolution {
            return Err(Error::Config(format!("crop {crop} must lie in 1..={resolution}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce0_e5ce_0000_0001);
        let focal = 0.55 * resolution as f64;
        let c = resolution as f64 / 2.0;
        let box_min = [-1.0, -1.0, -1.0];
        let box_max = [1.0, 1.0, 1.0];
        // half-extent of the view at depth z, seen from the worst box corner
        let half_view = |z: f64| (z - box_max[2]) * (c / focal) * 0.9 - box_max[0];
        let landmarks = (0..n_landmarks)
            .map(|_| {
                let z = rng.gen_range(4.0..12.0);
                let h = half_view(z);
                let position = [rng.gen_range(-h..h), rng.gen_range(-h..h), z];
                // saturated, distinct colours: one channel high, one low
                let hi = rng.gen_range(0..3);
                let mut color = [0u8; 3];
                for (k, ch) in color.iter_mut().enumerate() {
                    *ch = if k == hi { rng.gen_range(200..=255) } else { rng.gen_range(30..=230) };
                }
                Landmark { position, color }
            })
            .collect();
        let spec = Self {
            landmarks,
            focal,
            principal: [c, c],
            box_min,
            box_max,
            max_rotation_deg: 30.0,
            resolution,
            crop,
            landmark_radius: 0.6,
            background: [40, 40, 40],
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Largest side of the position sampling box.
    pub fn extent(&self) -> f64 {
        (0..3).map(|k| self.box_max[k] - self.box_min[k]).fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        if self.landmarks.len() < 4 {
            return Err(Error::Config("a scene needs at least 4 landmarks".into()));
        }
        if self.resolution == 0 || self.crop == 0 || self.crop > self.resolution {
            return Err(Error::Config(format!(
                "invalid resolution {} / crop {}",
                self.resolution, self.crop
            )));
        }
        if (0..3).any(|k| !(self.box_min[k] <= self.box_max[k])) {
            return Err(Error::Config("position box min exceeds max".into()));
        }
        if !(self.focal > 0.0) || !(self.landmark_radius > 0.0) || !(0.0..=180.0).contains(&self.max_rotation_deg) {
            return Err(Error::Config("focal, radius and rotation range must be positive and finite".into()));
        }
        Ok(())
    }

    /// Pinhole projection of a world point; `None` behind the near plane.
    /// Returns image coordinates `(u, v)` and camera-frame depth.
    pub fn project(&self, pose: &Pose<f64>, x: &Vec3<f64>) -> Option<(f64, f64, f64)> {
        let d = [x[0] - pose.p[0], x[1] - pose.p[1], x[2] - pose.p[2]];
        let cam = pose.q.conjugate().rotate(&d);
        if cam[2] < NEAR_PLANE {
            return None;
        }
        Some((
            self.focal * cam[0] / cam[2] + self.principal[0],
            self.focal * cam[1] / cam[2] + self.principal[1],
            cam[2],
        ))
    }

    /// Uniform position in the box and a rotation about a uniformly random
    /// axis by an angle uniform in `[0, max_rotation_deg]`; canonical form.
    pub fn sample_pose<R: Rng + ?Sized>(&self, rng: &mut R) -> Pose<f64> {
        let p = std::array::from_fn(|k| {
            if self.box_max[k] > self.box_min[k] {
                rng.gen_range(self.box_min[k]..self.box_max[k])
            } else {
                self.box_min[k]
            }
        });
        let axis = loop {
            let a: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let n2 = a[0] * a[0] + a[1] * a[1] + a[2] * a[2];
            if n2 > 1e-6 && n2 <= 1.0 {
                break a;
            }
        };
        let angle = rng.gen_range(0.0..=self.max_rotation_deg).to_radians();
        let q = UnitQuaternion::from_axis_angle(axis, angle).expect("non-zero axis");
        Pose {
            p,
            q: canonicalize(&q),
        }
    }

    /// Draws landmarks far to near as anti-aliased discs whose radius falls
    /// off with depth.
    pub fn render(&self, pose: &Pose<f64>) -> Result<RgbImage> {
        let r = self.resolution;
        let mut visible: Vec<(f64, f64, f64, [u8; 3])> = self
            .landmarks
            .iter()
            .filter_map(|l| self.project(pose, &l.position).map(|(u, v, z)| (u, v, z, l.color)))
            .collect();
        if visible.is_empty() {
            return Err(Error::Render(format!(
                "every landmark is behind the camera at position {:?}",
                pose.p
            )));
        }
        visible.sort_by(|a, b| b.2.total_cmp(&a.2));

        let mut acc: Vec<f64> = (0..r * r).flat_map(|_| self.background.map(f64::from)).collect();
        let step = 1.0 / SUPERSAMPLE as f64;
        let samples = (SUPERSAMPLE * SUPERSAMPLE) as f64;
        for (u, v, z, color) in visible {
            let rad = self.landmark_radius * self.focal / z;
            let x0 = (u - rad).floor().max(0.0);
            let x1 = (u + rad).ceil().min(r as f64);
            let y0 = (v - rad).floor().max(0.0);
            let y1 = (v + rad).ceil().min(r as f64);
            if x0 >= x1 || y0 >= y1 {
                continue;
            }
            for py in y0 as usize..y1 as usize {
                for px in x0 as usize..x1 as usize {
                    let mut hits = 0usize;
                    for sy in 0..SUPERSAMPLE {
                        for sx in 0..SUPERSAMPLE {
                            let dx = px as f64 + (sx as f64 + 0.5) * step - u;
                            let dy = py as f64 + (sy as f64 + 0.5) * step - v;
                            if dx * dx + dy * dy <= rad * rad {
                                hits += 1;
                            }
                        }
                    }
                    if hits == 0 {
                        continue;
                    }
                    let a = hits as f64 / samples;
                    let i = 3 * (py * r + px);
                    for k in 0..3 {
                        acc[i + k] = acc[i + k] * (1.0 - a) + f64::from(color[k]) * a;
                    }
                }
            }
        }
        Ok(RgbImage {
            width: r,
            height: r,
            data: acc.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect(),
        })
    }

    pub fn to_kv(&self) -> String {
        let v3 = |v: &Vec3<f64>| format!("{},{},{}", v[0], v[1], v[2]);
        let mut s = String::new();
        let _ = writeln!(s, "version = {SCENE_FORMAT_VERSION}");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "resolution = {}", self.resolution);
        let _ = writeln!(s, "crop = {}", self.crop);
        let _ = writeln!(s, "focal = {}", self.focal);
        let _ = writeln!(s, "principal = {},{}", self.principal[0], self.principal[1]);
        let _ = writeln!(s, "box_min = {}", v3(&self.box_min));
        let _ = writeln!(s, "box_max = {}", v3(&self.box_max));
        let _ = writeln!(s, "max_rotation_deg = {}", self.max_rotation_deg);
        let _ = writeln!(s, "landmark_radius = {}", self.landmark_radius);
        let b = self.background;
        let _ = writeln!(s, "background = {},{},{}", b[0], b[1], b[2]);
        let _ = writeln!(s, "landmarks = {}", self.landmarks.len());
        for (i, l) in self.landmarks.iter().enumerate() {
            let c = l.color;
            let _ = writeln!(s, "landmark.{i} = {},{},{},{}", v3(&l.position), c[0], c[1], c[2]);
        }
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let pairs = parse_kv(text)?;
        let get = |k: &str| {
            pairs
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Data(format!("scene description lacks '{k}'")))
        };
        let bad = |k: &str, v: &str| Error::Data(format!("invalid scene value '{v}' for '{k}'"));
        let num = |k: &str| -> Result<f64> {
            let v = get(k)?;
            v.parse().map_err(|_| bad(k, v))
        };
        let int = |k: &str| -> Result<u64> {
            let v = get(k)?;
            v.parse().map_err(|_| bad(k, v))
        };
        let floats = |k: &str, v: &str, n: usize| -> Result<Vec<f64>> {
            let out: Vec<f64> = v.split(',').map(|p| p.trim().parse().map_err(|_| bad(k, v))).collect::<Result<_>>()?;
            if out.len() != n {
                return Err(bad(k, v));
            }
            Ok(out)
        };
        let vec3 = |k: &str| -> Result<Vec3<f64>> {
            let f = floats(k, get(k)?, 3)?;
            Ok([f[0], f[1], f[2]])
        };
        let byte = |k: &str, x: f64| -> Result<u8> {
            if (0.0..=255.0).contains(&x) && x.fract() == 0.0 {
                Ok(x as u8)
            } else {
                Err(bad(k, &x.to_string()))
            }
        };

        let version = int("version")?;
        if version != u64::from(SCENE_FORMAT_VERSION) {
            return Err(Error::Data(format!("unsupported scene format version {version}")));
        }
        let n = int("landmarks")? as usize;
        let mut landmarks = Vec::with_capacity(n);
        for i in 0..n {
            let k = format!("landmark.{i}");
            let f = floats(&k, get(&k)?, 6)?;
            landmarks.push(Landmark {
                position: [f[0], f[1], f[2]],
                color: [byte(&k, f[3])?, byte(&k, f[4])?, byte(&k, f[5])?],
            });
        }
        let pr = floats("principal", get("principal")?, 2)?;
        let bg = floats("background", get("background")?, 3)?;
        let spec = Self {
            landmarks,
            focal: num("focal")?,
            principal: [pr[0], pr[1]],
            box_min: vec3("box_min")?,
            box_max: vec3("box_max")?,
            max_rotation_deg: num("max_rotation_deg")?,
            resolution: int("resolution")? as usize,
            crop: int("crop")? as usize,
            landmark_radius: num("landmark_radius")?,
            background: [byte("background", bg[0])?, byte("background", bg[1])?, byte("background", bg[2])?],
            seed: int("seed")?,
        };
        spec.validate().map_err(|e| Error::Data(e.to_string()))?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::UnitQuaternion;

    fn scene() -> SceneSpec {
        SceneSpec::synthetic(3, 24, 72, 64).unwrap()
    }

    fn at(p: Vec3<f64>) -> Pose<f64> {
        Pose {
            p,
            q: UnitQuaternion::identity(),
        }
    }

    #[test]
    fn render_is_deterministic() {
        let s = scene();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pose = s.sample_pose(&mut rng);
        assert_eq!(s.render(&pose).unwrap(), s.render(&pose).unwrap());
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let s = scene();
        for z in [1.0, 5.0, 40.0] {
            let (u, v, _) = s.project(&at([0.3, -0.2, 0.0]), &[0.3, -0.2, z]).unwrap();
            assert_eq!((u, v), (36.0, 36.0));
        }
    }

    #[test]
    fn moving_right_shifts_image_left() {
        let s = scene();
        let a = at([0.0, 0.0, 0.0]);
        let b = at([0.5, 0.0, 0.0]);
        for l in &s.landmarks {
            let (ua, ..) = s.project(&a, &l.position).unwrap();
            let (ub, ..) = s.project(&b, &l.position).unwrap();
            assert!(ub < ua);
        }
    }

    #[test]
    fn landmarks_visible_from_box_corners() {
        let s = scene();
        for corner in 0..8 {
            let p = std::array::from_fn(|k| if corner >> k & 1 == 1 { s.box_max[k] } else { s.box_min[k] });
            for l in &s.landmarks {
                let (u, v, _) = s.project(&at(p), &l.position).unwrap();
                assert!((0.0..72.0).contains(&u) && (0.0..72.0).contains(&v));
            }
        }
    }

    #[test]
    fn distinct_poses_give_distinct_images() {
        let s = scene();
        let base = at([0.0, 0.0, 0.0]);
        let shifted = at([0.03, 0.0, 0.0]);
        assert_ne!(s.render(&base).unwrap(), s.render(&shifted).unwrap());
        let turned = Pose {
            p: [0.0; 3],
            q: UnitQuaternion::from_axis_angle([0.0, 1.0, 0.0], 1.5_f64.to_radians()).unwrap(),
        };
        assert_ne!(s.render(&base).unwrap(), s.render(&turned).unwrap());
    }

    #[test]
    fn behind_camera_is_error() {
        let s = scene();
        let back = Pose {
            p: [0.0; 3],
            q: UnitQuaternion::from_axis_angle([0.0, 1.0, 0.0], std::f64::consts::PI).unwrap(),
        };
        assert!(matches!(s.render(&back), Err(Error::Render(_))));
    }

    #[test]
    fn sampled_poses_respect_ranges() {
        let s = scene();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let pose = s.sample_pose(&mut rng);
            assert!(pose.q.u >= 0.0);
            assert!(pose.p.iter().all(|c| (-1.0..=1.0).contains(c)));
            let deg = crate::geometry::rotation_error_deg(&pose.q, &UnitQuaternion::identity());
            assert!(deg <= 30.0 + 1e-9);
        }
    }

    #[test]
    fn kv_round_trip() {
        let s = scene();
        assert_eq!(SceneSpec::from_kv(&s.to_kv()).unwrap(), s);
        assert!(SceneSpec::from_kv("version = 9\n").is_err());
        assert_eq!(s.extent(), 2.0);
    }
}
