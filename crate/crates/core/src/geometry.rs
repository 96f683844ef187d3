//! Unit quaternions, their log/exp maps, hemisphere canonicalization and the
//! trajectory error statistics used for evaluation.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type Vec3<T> = [T; 3];

/// Tolerance on `u² + ‖v‖²` accepted by the checked constructors.
pub const NORM_TOLERANCE: f64 = 1e-6;

/// Below this imaginary-part norm the log map returns the zero vector.
pub const LOG_ZERO_EPS: f64 = 1e-12;

/// Rotation quaternion `q = (u, v)`: real part `u`, imaginary part `v`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitQuaternion<T> {
    pub u: T,
    pub v: Vec3<T>,
}

fn norm3<T: Scalar>(v: &Vec3<T>) -> T {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn cross<T: Scalar>(a: &Vec3<T>, b: &Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

impl<T: Scalar> UnitQuaternion<T> {
    pub fn identity() -> Self {
        Self {
            u: T::one(),
            v: [T::zero(); 3],
        }
    }

    /// Checked constructor: rejects inputs whose norm is off by more than
    /// [`NORM_TOLERANCE`].
    pub fn new(u: T, v: Vec3<T>) -> Result<Self> {
        let q = Self { u, v };
        q.check_normalized()?;
        Ok(q)
    }

    /// Normalizes an arbitrary non-zero 4-vector.
    pub fn normalize(u: T, v: Vec3<T>) -> Result<Self> {
        let n = (u * u + v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if !(n > T::zero()) || !n.is_finite() {
            return Err(Error::Contract("cannot normalize a zero or non-finite quaternion".into()));
        }
        Ok(Self {
            u: u / n,
            v: [v[0] / n, v[1] / n, v[2] / n],
        })
    }

    /// Rotation by `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Vec3<T>, angle: T) -> Result<Self> {
        let n = norm3(&axis);
        if !(n > T::zero()) {
            return Err(Error::Contract("rotation axis must be non-zero".into()));
        }
        let half = angle * T::lit(0.5);
        let s = half.sin() / n;
        Ok(Self {
            u: half.cos(),
            v: [axis[0] * s, axis[1] * s, axis[2] * s],
        })
    }

    pub fn norm_squared(&self) -> T {
        self.u * self.u + self.v[0] * self.v[0] + self.v[1] * self.v[1] + self.v[2] * self.v[2]
    }

    pub fn check_normalized(&self) -> Result<()> {
        let n = self.norm_squared().sqrt();
        if !((n - T::one()).abs() <= T::lit(NORM_TOLERANCE)) {
            return Err(Error::Contract(format!(
                "quaternion ({}, {:?}) has norm {n}, expected 1",
                self.u, self.v
            )));
        }
        Ok(())
    }

    pub fn neg(&self) -> Self {
        Self {
            u: -self.u,
            v: [-self.v[0], -self.v[1], -self.v[2]],
        }
    }

    pub fn conjugate(&self) -> Self {
        Self {
            u: self.u,
            v: [-self.v[0], -self.v[1], -self.v[2]],
        }
    }

    pub fn dot(&self, other: &Self) -> T {
        self.u * other.u + self.v[0] * other.v[0] + self.v[1] * other.v[1] + self.v[2] * other.v[2]
    }

    /// Hamilton product `self ⊗ other`.
    pub fn mul(&self, other: &Self) -> Self {
        let c = cross(&self.v, &other.v);
        let dot = self.v[0] * other.v[0] + self.v[1] * other.v[1] + self.v[2] * other.v[2];
        Self {
            u: self.u * other.u - dot,
            v: [
                self.u * other.v[0] + other.u * self.v[0] + c[0],
                self.u * other.v[1] + other.u * self.v[1] + c[1],
                self.u * other.v[2] + other.u * self.v[2] + c[2],
            ],
        }
    }

    /// Rotates `x` by this quaternion (`q x q*`).
    pub fn rotate(&self, x: &Vec3<T>) -> Vec3<T> {
        let two = T::lit(2.0);
        let t = cross(&self.v, x);
        let t = [two * t[0], two * t[1], two * t[2]];
        let c = cross(&self.v, &t);
        [
            x[0] + self.u * t[0] + c[0],
            x[1] + self.u * t[1] + c[1],
            x[2] + self.u * t[2] + c[2],
        ]
    }

    pub fn to_array(&self) -> [T; 4] {
        [self.u, self.v[0], self.v[1], self.v[2]]
    }
}

/// Log map: `(v / ‖v‖) · arccos(u)`, zero when `‖v‖ < 1e-12`.
///
/// The angle is evaluated as `atan2(‖v‖, u)`, which equals `arccos(u)` on unit
/// quaternions and stays well conditioned near `u = ±1`.
pub fn quat_log<T: Scalar>(q: &UnitQuaternion<T>) -> Result<Vec3<T>> {
    q.check_normalized()?;
    let vn = norm3(&q.v);
    if vn < T::lit(LOG_ZERO_EPS) {
        return Ok([T::zero(); 3]);
    }
    let u = q.u.max(-T::one()).min(T::one());
    let angle = vn.atan2(u);
    let s = angle / vn;
    Ok([q.v[0] * s, q.v[1] * s, q.v[2] * s])
}

/// Inverse of [`quat_log`]. Vectors longer than π are clamped to length π.
pub fn quat_exp<T: Scalar>(w: &Vec3<T>) -> UnitQuaternion<T> {
    let n = norm3(w);
    if n < T::lit(LOG_ZERO_EPS) {
        return UnitQuaternion::identity();
    }
    let pi = T::lit(std::f64::consts::PI);
    let theta = n.min(pi);
    let s = theta.sin() / n;
    UnitQuaternion {
        u: theta.cos(),
        v: [w[0] * s, w[1] * s, w[2] * s],
    }
}

/// Maps `q` and `−q` to the same representative with `u ≥ 0`.
///
/// On the `u = 0` boundary the sign is chosen so that the first non-zero
/// component of `v` is positive.
pub fn canonicalize<T: Scalar>(q: &UnitQuaternion<T>) -> UnitQuaternion<T> {
    let flip = if q.u < T::zero() {
        true
    } else if q.u > T::zero() {
        false
    } else {
        q.v.iter()
            .find(|c| **c != T::zero())
            .is_some_and(|c| *c < T::zero())
    };
    let mut out = if flip { q.neg() } else { *q };
    // normalize -0.0 so canonical forms compare bit-equal
    if out.u == T::zero() {
        out.u = T::zero();
    }
    out
}

/// Angle between two orientations in degrees, in `[0, 180]`.
///
/// Equal to `2·arccos(min(1, |⟨a, b⟩|))`; evaluated through the relative
/// rotation `a* ⊗ b` with `atan2` so that nearly identical orientations do not
/// suffer from the flat slope of `arccos` near 1.
pub fn rotation_error_deg<T: Scalar>(a: &UnitQuaternion<T>, b: &UnitQuaternion<T>) -> T {
    let r = a.conjugate().mul(b);
    let half = norm3(&r.v).atan2(r.u.abs());
    T::lit(2.0) * half * T::lit(180.0 / std::f64::consts::PI)
}

/// Camera pose: position in scene units and orientation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose<T> {
    pub p: Vec3<T>,
    pub q: UnitQuaternion<T>,
}

impl<T: Scalar> Pose<T> {
    pub fn new(p: Vec3<T>, q: UnitQuaternion<T>) -> Result<Self> {
        q.check_normalized()?;
        Ok(Self { p, q })
    }

    pub fn position_error(&self, other: &Self) -> T {
        let d = [self.p[0] - other.p[0], self.p[1] - other.p[1], self.p[2] - other.p[2]];
        norm3(&d)
    }

    pub fn rotation_error_deg(&self, other: &Self) -> T {
        rotation_error_deg(&self.q, &other.q)
    }
}

/// Median and mean position / rotation error over a trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryStats<T> {
    pub median_position: T,
    pub mean_position: T,
    pub median_rotation_deg: T,
    pub mean_rotation_deg: T,
}

/// Lower median: the element at index `(n - 1) / 2` after sorting.
pub fn lower_median<T: Scalar>(values: &[T]) -> T {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
    v[(v.len() - 1) / 2]
}

pub fn trajectory_stats<T: Scalar>(pred: &[Pose<T>], truth: &[Pose<T>]) -> Result<TrajectoryStats<T>> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::Contract(format!(
            "trajectory_stats needs equal non-empty lists, got {} predictions and {} ground truths",
            pred.len(),
            truth.len()
        )));
    }
    let pos: Vec<T> = pred.iter().zip(truth).map(|(a, b)| a.position_error(b)).collect();
    let rot: Vec<T> = pred.iter().zip(truth).map(|(a, b)| a.rotation_error_deg(b)).collect();
    let n = T::lit(pos.len() as f64);
    Ok(TrajectoryStats {
        median_position: lower_median(&pos),
        mean_position: pos.iter().copied().sum::<T>() / n,
        median_rotation_deg: lower_median(&rot),
        mean_rotation_deg: rot.iter().copied().sum::<T>() / n,
    })
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, FRAC_PI_4, PI};

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    type Q = UnitQuaternion<f64>;

    fn random_q(rng: &mut impl Rng) -> Q {
        loop {
            let c: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            if let Ok(q) = Q::normalize(c[0], [c[1], c[2], c[3]]) {
                return q;
            }
        }
    }

    #[test]
    fn log_examples() {
        assert_eq!(quat_log(&Q::identity()).unwrap(), [0.0; 3]);
        let q = Q::new(0.0, [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(quat_log(&q).unwrap(), [FRAC_PI_2, 0.0, 0.0]);
        let q = Q::new(FRAC_1_SQRT_2, [0.0, 0.0, FRAC_1_SQRT_2]).unwrap();
        let l = quat_log(&q).unwrap();
        assert!(l[0] == 0.0 && l[1] == 0.0 && (l[2] - FRAC_PI_4).abs() < 1e-15);
    }

    #[test]
    fn log_rejects_unnormalized() {
        let q = UnitQuaternion { u: 1.1, v: [0.0; 3] };
        assert!(matches!(quat_log(&q), Err(Error::Contract(_))));
    }

    #[test]
    fn exp_examples() {
        assert_eq!(quat_exp(&[0.0; 3]), Q::identity());
        let q = quat_exp(&[FRAC_PI_2, 0.0, 0.0]);
        assert!(q.u.abs() < 1e-16 && (q.v[0] - 1.0).abs() < 1e-16);
        // clamped beyond pi
        let q = quat_exp(&[4.0, 0.0, 0.0]);
        assert!((q.u - PI.cos()).abs() < 1e-15);
    }

    #[test]
    fn exp_log_round_trip_on_random_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..1000 {
            let dir = random_q(&mut rng).v;
            let n = norm3(&dir);
            let len = rng.gen_range(1e-6..PI);
            let w = [dir[0] / n * len, dir[1] / n * len, dir[2] / n * len];
            let back = quat_log(&quat_exp(&w)).unwrap();
            for k in 0..3 {
                assert!((back[k] - w[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn canonicalize_examples() {
        let q = Q::new(-FRAC_1_SQRT_2, [0.0, 0.0, FRAC_1_SQRT_2]).unwrap();
        assert_eq!(canonicalize(&q), Q::new(FRAC_1_SQRT_2, [0.0, 0.0, -FRAC_1_SQRT_2]).unwrap());
        let q = Q::new(0.6, [0.0, 0.8, 0.0]).unwrap();
        assert_eq!(canonicalize(&q), q);
        // boundary tie-break
        let q = Q::new(0.0, [0.0, -0.6, 0.8]).unwrap();
        assert_eq!(canonicalize(&q).v, [0.0, 0.6, -0.8]);
        assert_eq!(canonicalize(&q), canonicalize(&q.neg()));
    }

    #[test]
    fn rotation_error_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let q = random_q(&mut rng);
        assert_eq!(rotation_error_deg(&q, &q), 0.0);
        assert_eq!(rotation_error_deg(&q, &q.neg()), 0.0);
        let z90 = Q::from_axis_angle([0.0, 0.0, 1.0], FRAC_PI_2).unwrap();
        assert!((rotation_error_deg(&Q::identity(), &z90) - 90.0).abs() < 1e-12);
    }

    #[test]
    fn rotate_matches_hamilton_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let q = random_q(&mut rng);
        let x = [0.3, -1.2, 2.0];
        let xq = Q { u: 0.0, v: x };
        let r = q.mul(&xq).mul(&q.conjugate());
        let fast = q.rotate(&x);
        for k in 0..3 {
            assert!((r.v[k] - fast[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn trajectory_examples() {
        let id = Q::identity();
        let poses: Vec<Pose<f64>> = (0..3).map(|i| Pose { p: [i as f64, 0.0, 0.0], q: id }).collect();
        let s = trajectory_stats(&poses, &poses).unwrap();
        assert_eq!((s.median_position, s.mean_position, s.median_rotation_deg, s.mean_rotation_deg), (0.0, 0.0, 0.0, 0.0));

        let truth = vec![Pose { p: [0.0; 3], q: id }; 3];
        let pred: Vec<Pose<f64>> = [1.0, 2.0, 3.0].iter().map(|&d| Pose { p: [0.0, d, 0.0], q: id }).collect();
        let s = trajectory_stats(&pred, &truth).unwrap();
        assert_eq!(s.median_position, 2.0);
        assert_eq!(s.mean_position, 2.0);

        // even count takes the lower middle
        assert_eq!(lower_median(&[4.0, 1.0, 3.0, 2.0]), 2.0);
    }

    #[test]
    fn trajectory_rejects_empty_and_mismatched() {
        let p = Pose { p: [0.0; 3], q: Q::identity() };
        assert!(trajectory_stats::<f64>(&[], &[]).is_err());
        assert!(trajectory_stats(&[p], &[p, p]).is_err());
    }

    #[test]
    fn trajectory_matches_independent_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mk = |rng: &mut ChaCha8Rng| Pose {
            p: std::array::from_fn(|_| rng.gen_range(-10.0..10.0)),
            q: random_q(rng),
        };
        let pred: Vec<Pose<f64>> = (0..100).map(|_| mk(&mut rng)).collect();
        let truth: Vec<Pose<f64>> = (0..100).map(|_| mk(&mut rng)).collect();
        let s = trajectory_stats(&pred, &truth).unwrap();

        // recompute with plain formulas: distance, 2*acos|<q1,q2>|
        let mut pos = Vec::new();
        let mut rot = Vec::new();
        for (a, b) in pred.iter().zip(&truth) {
            let d: f64 = (0..3).map(|k| (a.p[k] - b.p[k]).powi(2)).sum();
            pos.push(d.sqrt());
            let dot = a.q.u * b.q.u + (0..3).map(|k| a.q.v[k] * b.q.v[k]).sum::<f64>();
            rot.push(2.0 * dot.abs().min(1.0).acos().to_degrees());
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        pos.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rot.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((s.median_position - pos[49]).abs() < 1e-12);
        assert!((s.median_rotation_deg - rot[49]).abs() < 1e-12);
        assert!((s.mean_position - mean(&pos)).abs() < 1e-12);
        assert!((s.mean_rotation_deg - mean(&rot)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn canonicalize_is_idempotent_and_hemisphere_invariant(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_q(&mut rng);
            let c = canonicalize(&q);
            prop_assert!(c.u >= 0.0);
            prop_assert_eq!(canonicalize(&c), c);
            prop_assert_eq!(quat_log(&canonicalize(&q)).unwrap(), quat_log(&canonicalize(&q.neg())).unwrap());
            prop_assert!(rotation_error_deg(&q, &c) < 1e-6);
        }

        #[test]
        fn log_norm_is_half_angle(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = canonicalize(&random_q(&mut rng));
            let l = quat_log(&q).unwrap();
            let half = norm3(&l);
            prop_assert!((2.0 * half.to_degrees() - rotation_error_deg(&Q::identity(), &q)).abs() < 1e-6);
        }

        #[test]
        fn rotation_error_symmetric_and_triangle(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b, c) = (random_q(&mut rng), random_q(&mut rng), random_q(&mut rng));
            let ab = rotation_error_deg(&a, &b);
            prop_assert_eq!(ab, rotation_error_deg(&b, &a));
            prop_assert!(ab <= rotation_error_deg(&a, &c) + rotation_error_deg(&c, &b) + 1e-9);
            prop_assert!((0.0..=180.0).contains(&ab));
        }

        #[test]
        fn log_exp_inverse_on_canonical(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = canonicalize(&random_q(&mut rng));
            let back = quat_exp(&quat_log(&q).unwrap());
            prop_assert!((back.u - q.u).abs() < 1e-9);
            for k in 0..3 {
                prop_assert!((back.v[k] - q.v[k]).abs() < 1e-9);
            }
        }
    }
}
