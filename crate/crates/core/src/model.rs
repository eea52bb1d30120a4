//! Skeleton and pose types plus the quaternion math shared by the codec
//! and the rhythmic correctives.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid quaternion: {0}")]
    InvalidQuaternion(String),
    #[error("empty input")]
    EmptyInput,
    #[error("geodesic mean did not converge after {0} iterations")]
    Convergence(usize),
    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),
    #[error("shape mismatch: expected {expected} joints, got {actual}")]
    Shape { expected: usize, actual: usize },
}

/// Coarse body region a joint belongs to; drives per-zone stylization gains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BodyZone {
    Hips,
    Shoulders,
    Hands,
    Head,
    Legs,
    Spine,
    #[default]
    Other,
}

impl BodyZone {
    pub const ALL: [BodyZone; 7] = [
        BodyZone::Hips,
        BodyZone::Shoulders,
        BodyZone::Hands,
        BodyZone::Head,
        BodyZone::Legs,
        BodyZone::Spine,
        BodyZone::Other,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            BodyZone::Hips => "hips",
            BodyZone::Shoulders => "shoulders",
            BodyZone::Hands => "hands",
            BodyZone::Head => "head",
            BodyZone::Legs => "legs",
            BodyZone::Spine => "spine",
            BodyZone::Other => "other",
        }
    }

    pub fn from_name(name: &str) -> Option<BodyZone> {
        BodyZone::ALL
            .into_iter()
            .find(|z| z.name().eq_ignore_ascii_case(name))
    }
}

const BODY34: [(&str, BodyZone); 34] = [
    ("pelvis", BodyZone::Hips),
    ("naval_spine", BodyZone::Spine),
    ("chest_spine", BodyZone::Spine),
    ("neck", BodyZone::Head),
    ("left_clavicle", BodyZone::Shoulders),
    ("left_shoulder", BodyZone::Shoulders),
    ("left_elbow", BodyZone::Other),
    ("left_wrist", BodyZone::Hands),
    ("left_hand", BodyZone::Hands),
    ("left_handtip", BodyZone::Hands),
    ("left_thumb", BodyZone::Hands),
    ("right_clavicle", BodyZone::Shoulders),
    ("right_shoulder", BodyZone::Shoulders),
    ("right_elbow", BodyZone::Other),
    ("right_wrist", BodyZone::Hands),
    ("right_hand", BodyZone::Hands),
    ("right_handtip", BodyZone::Hands),
    ("right_thumb", BodyZone::Hands),
    ("left_hip", BodyZone::Hips),
    ("left_knee", BodyZone::Legs),
    ("left_ankle", BodyZone::Legs),
    ("left_foot", BodyZone::Legs),
    ("right_hip", BodyZone::Hips),
    ("right_knee", BodyZone::Legs),
    ("right_ankle", BodyZone::Legs),
    ("right_foot", BodyZone::Legs),
    ("head", BodyZone::Head),
    ("nose", BodyZone::Head),
    ("left_eye", BodyZone::Head),
    ("left_ear", BodyZone::Head),
    ("right_eye", BodyZone::Head),
    ("right_ear", BodyZone::Head),
    ("left_heel", BodyZone::Legs),
    ("right_heel", BodyZone::Legs),
];

/// A flat joint list. No parent links: nothing downstream needs the
/// hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    names: Vec<String>,
    zones: Vec<BodyZone>,
}

impl Skeleton {
    pub const DEFAULT_JOINT_COUNT: usize = 34;

    /// Builds a skeleton from joint names and the zone of each joint (by index).
    pub fn new(names: Vec<String>, zones: Vec<BodyZone>) -> Result<Self, ModelError> {
        if names.is_empty() {
            return Err(ModelError::InvalidSkeleton("no joints".into()));
        }
        if zones.len() != names.len() {
            return Err(ModelError::InvalidSkeleton(format!(
                "{} names but {} zone entries",
                names.len(),
                zones.len()
            )));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(ModelError::InvalidSkeleton(format!("duplicate joint name {n:?}")));
            }
        }
        Ok(Skeleton { names, zones })
    }

    /// The 34-joint body-tracking rig.
    pub fn body34() -> Self {
        let (names, zones) = BODY34.iter().map(|(n, z)| (n.to_string(), *z)).unzip();
        Skeleton { names, zones }
    }

    /// `body34` when `joint_count` is 34, otherwise `joint_0..` with joint 0
    /// as the hips root and everything else in [`BodyZone::Other`].
    pub fn with_joint_count(joint_count: usize) -> Result<Self, ModelError> {
        if joint_count == Self::DEFAULT_JOINT_COUNT {
            return Ok(Self::body34());
        }
        let names = (0..joint_count).map(|i| format!("joint_{i}")).collect();
        let zones = (0..joint_count)
            .map(|i| if i == 0 { BodyZone::Hips } else { BodyZone::Other })
            .collect();
        Skeleton::new(names, zones)
    }

    pub fn joint_count(&self) -> usize {
        self.names.len()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.names
    }

    pub fn zone(&self, joint: usize) -> BodyZone {
        self.zones[joint]
    }

    pub fn joints_in(&self, zone: BodyZone) -> impl Iterator<Item = usize> + '_ {
        self.zones
            .iter()
            .enumerate()
            .filter(move |(_, z)| **z == zone)
            .map(|(i, _)| i)
    }

    pub fn set_zone(&mut self, joint: usize, zone: BodyZone) {
        self.zones[joint] = zone;
    }
}

impl Default for Skeleton {
    fn default() -> Self {
        Skeleton::body34()
    }
}

/// Rotation quaternion stored as (x, y, z, w).
///
/// Values produced by [`UnitQuat::canonicalize`] are unit-norm with `w >= 0`;
/// the raw constructor does not enforce either.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitQuat {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
}

/// Result of [`scale_rotation`]. `degenerate_axis` is set when the offset
/// from the reference was a half-turn and the log axis had to be picked.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaledRotation {
    pub rotation: UnitQuat,
    pub degenerate_axis: bool,
}

// Norm-squared slack under which a quaternion counts as already unit.
const UNIT_SLACK: f64 = 1e-12;
// |w| below this makes the relative rotation a half-turn for log purposes.
const HALF_TURN_EPS: f64 = 1e-12;

impl UnitQuat {
    pub const IDENTITY: UnitQuat = UnitQuat {
        x: 0.0,
        y: 0.0,
        z: 0.0,
        w: 1.0,
    };

    pub const fn new(x: f64, y: f64, z: f64, w: f64) -> Self {
        UnitQuat { x, y, z, w }
    }

    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Self {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if n == 0.0 {
            return Self::IDENTITY;
        }
        let (s, c) = (angle * 0.5).sin_cos();
        UnitQuat::new(axis[0] / n * s, axis[1] / n * s, axis[2] / n * s, c)
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::from_axis_angle([1.0, 0.0, 0.0], angle)
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::from_axis_angle([0.0, 1.0, 0.0], angle)
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle([0.0, 0.0, 1.0], angle)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x, self.y, self.z, self.w]
    }

    pub fn norm_sq(&self) -> f64 {
        self.x * self.x + self.y * self.y + self.z * self.z + self.w * self.w
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dot(&self, o: &UnitQuat) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z + self.w * o.w
    }

    fn neg(self) -> Self {
        UnitQuat::new(-self.x, -self.y, -self.z, -self.w)
    }

    pub fn conjugate(&self) -> Self {
        UnitQuat::new(-self.x, -self.y, -self.z, self.w)
    }

    /// Hamilton product `self ∘ rhs` (apply `rhs` first).
    pub fn mul(&self, r: &UnitQuat) -> Self {
        let (a, b) = (self, r);
        UnitQuat::new(
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
        )
    }

    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        let p = UnitQuat::new(v[0], v[1], v[2], 0.0);
        let r = self.mul(&p).mul(&self.conjugate());
        [r.x, r.y, r.z]
    }

    /// Unit-norm, same rotation, `w >= 0`; when `w == 0` the first nonzero
    /// of (x, y, z) is made non-negative.
    ///
    /// Inputs whose norm is already within 1e-12 of one are not rescaled, so
    /// the operation is bit-for-bit idempotent.
    pub fn canonicalize(&self) -> Result<UnitQuat, ModelError> {
        let n2 = self.norm_sq();
        if !n2.is_finite() || n2 == 0.0 {
            return Err(ModelError::InvalidQuaternion(format!("norm² = {n2}")));
        }
        let q = if (n2 - 1.0).abs() <= UNIT_SLACK {
            *self
        } else {
            let n = n2.sqrt();
            UnitQuat::new(self.x / n, self.y / n, self.z / n, self.w / n)
        };
        let flip = if q.w != 0.0 {
            q.w < 0.0
        } else {
            [q.x, q.y, q.z]
                .into_iter()
                .find(|c| *c != 0.0)
                .is_some_and(|c| c < 0.0)
        };
        Ok(if flip { q.neg() } else { q })
    }

    /// Rotation angle between two orientations, in `[0, π]`.
    pub fn angle_to(&self, o: &UnitQuat) -> f64 {
        let d = self.conjugate().mul(o);
        let v = (d.x * d.x + d.y * d.y + d.z * d.z).sqrt();
        2.0 * v.atan2(d.w.abs())
    }

    /// Rotation vector (axis · angle) of this rotation, taking the short
    /// way round. The flag reports a half-turn, where the axis sign is
    /// arbitrary and is taken from the vector part as given.
    pub fn log(&self) -> ([f64; 3], bool) {
        let q = if self.w < 0.0 { self.neg() } else { *self };
        let v = (q.x * q.x + q.y * q.y + q.z * q.z).sqrt();
        if v < 1e-300 {
            return ([0.0; 3], false);
        }
        let angle = 2.0 * v.atan2(q.w);
        let degenerate = q.w.abs() < HALF_TURN_EPS;
        let (x, y, z) = if degenerate {
            (self.x, self.y, self.z)
        } else {
            (q.x, q.y, q.z)
        };
        let s = angle / v;
        ([x * s, y * s, z * s], degenerate)
    }

    /// Inverse of [`UnitQuat::log`].
    pub fn exp(rv: [f64; 3]) -> UnitQuat {
        let angle = (rv[0] * rv[0] + rv[1] * rv[1] + rv[2] * rv[2]).sqrt();
        if angle < 1e-300 {
            return UnitQuat::IDENTITY;
        }
        let (s, c) = (angle * 0.5).sin_cos();
        let k = s / angle;
        UnitQuat::new(rv[0] * k, rv[1] * k, rv[2] * k, c)
    }

    /// Spherical-linear interpolation along the shorter arc. `t` outside
    /// `[0, 1]` extrapolates along the same great circle.
    pub fn slerp(&self, o: &UnitQuat, t: f64) -> UnitQuat {
        if t == 0.0 {
            return *self;
        }
        if t == 1.0 {
            return *o;
        }
        let mut b = *o;
        let mut d = self.dot(&b);
        if d < 0.0 {
            b = b.neg();
            d = -d;
        }
        let out = if d > 0.9995 {
            UnitQuat::new(
                self.x + t * (b.x - self.x),
                self.y + t * (b.y - self.y),
                self.z + t * (b.z - self.z),
                self.w + t * (b.w - self.w),
            )
        } else {
            let theta = d.min(1.0).acos();
            let s = theta.sin();
            let wa = ((1.0 - t) * theta).sin() / s;
            let wb = (t * theta).sin() / s;
            UnitQuat::new(
                wa * self.x + wb * b.x,
                wa * self.y + wb * b.y,
                wa * self.z + wb * b.z,
                wa * self.w + wb * b.w,
            )
        };
        out.canonicalize().unwrap_or(*self)
    }
}

impl Default for UnitQuat {
    fn default() -> Self {
        UnitQuat::IDENTITY
    }
}

impl fmt::Display for UnitQuat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.6}, {:.6}, {:.6}, {:.6})", self.x, self.y, self.z, self.w)
    }
}

/// Orientation minimizing the summed squared geodesic distance to `quats`.
///
/// Iterative tangent-space averaging: log-map every sample around the
/// current estimate, average, exp-map back. Stops once the update rotates
/// by less than `tolerance` radians.
pub fn geodesic_mean(quats: &[UnitQuat], tolerance: f64) -> Result<UnitQuat, ModelError> {
    const MAX_ITERS: usize = 64;
    let first = quats.first().ok_or(ModelError::EmptyInput)?;
    let mut mean = first.canonicalize()?;
    if quats.len() == 1 {
        return Ok(mean);
    }
    let inv_n = 1.0 / quats.len() as f64;
    for _ in 0..MAX_ITERS {
        let inv = mean.conjugate();
        let mut acc = [0.0f64; 3];
        for q in quats {
            let (rv, _) = inv.mul(q).log();
            acc[0] += rv[0];
            acc[1] += rv[1];
            acc[2] += rv[2];
        }
        let step = [acc[0] * inv_n, acc[1] * inv_n, acc[2] * inv_n];
        mean = mean.mul(&UnitQuat::exp(step)).canonicalize()?;
        let step_angle = (step[0] * step[0] + step[1] * step[1] + step[2] * step[2]).sqrt();
        if step_angle < tolerance {
            return Ok(mean);
        }
    }
    Err(ModelError::Convergence(MAX_ITERS))
}

/// `reference ∘ exp(gain · log(reference⁻¹ ∘ q))`: pushes `q` away from
/// (gain > 1) or toward (gain < 1) `reference` along the connecting geodesic.
pub fn scale_rotation(reference: &UnitQuat, q: &UnitQuat, gain: f64) -> ScaledRotation {
    if gain == 1.0 {
        return ScaledRotation {
            rotation: *q,
            degenerate_axis: false,
        };
    }
    let offset = reference.conjugate().mul(q);
    let (rv, degenerate_axis) = offset.log();
    let scaled = UnitQuat::exp([rv[0] * gain, rv[1] * gain, rv[2] * gain]);
    let rotation = reference
        .mul(&scaled)
        .canonicalize()
        .unwrap_or(*reference);
    ScaledRotation {
        rotation,
        degenerate_axis,
    }
}

/// One timestamped skeleton pose.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseFrame {
    pub timestamp_us: u64,
    /// Meters.
    pub root_translation: [f32; 3],
    pub rotations: Vec<UnitQuat>,
}

impl PoseFrame {
    pub fn identity(timestamp_us: u64, joint_count: usize) -> Self {
        PoseFrame {
            timestamp_us,
            root_translation: [0.0; 3],
            rotations: vec![UnitQuat::IDENTITY; joint_count],
        }
    }

    pub fn joint_count(&self) -> usize {
        self.rotations.len()
    }

    /// Canonicalizes every rotation in place. Applied once at ingestion;
    /// downstream stages assume `w >= 0`.
    pub fn canonicalize(&mut self) -> Result<(), ModelError> {
        for r in &mut self.rotations {
            *r = r.canonicalize()?;
        }
        Ok(())
    }

    pub fn check_shape(&self, skeleton: &Skeleton) -> Result<(), ModelError> {
        if self.rotations.len() != skeleton.joint_count() {
            return Err(ModelError::Shape {
                expected: skeleton.joint_count(),
                actual: self.rotations.len(),
            });
        }
        Ok(())
    }
}

/// Wraps an angle into `[0, 2π)`.
pub fn wrap_two_pi(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r >= 2.0 * PI {
        0.0
    } else {
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &UnitQuat, b: &UnitQuat, tol: f64) -> bool {
        a.angle_to(b) < tol
    }

    #[test]
    fn canonicalize_examples() {
        let q = UnitQuat::new(0.0, 0.0, 0.0, -1.0).canonicalize().unwrap();
        assert_eq!(q, UnitQuat::IDENTITY);
        let q = UnitQuat::IDENTITY.canonicalize().unwrap();
        assert_eq!(q, UnitQuat::IDENTITY);
        let q = UnitQuat::new(0.6, 0.0, 0.0, -0.8).canonicalize().unwrap();
        assert!((q.x + 0.6).abs() < 1e-15 && (q.w - 0.8).abs() < 1e-15);
    }

    #[test]
    fn canonicalize_w_zero_tiebreak() {
        let q = UnitQuat::new(0.0, -1.0, 0.0, 0.0).canonicalize().unwrap();
        assert_eq!(q, UnitQuat::new(0.0, 1.0, 0.0, 0.0));
        let q = UnitQuat::new(0.0, 0.6, -0.8, 0.0).canonicalize().unwrap();
        assert_eq!(q, UnitQuat::new(0.0, 0.6, -0.8, 0.0));
    }

    #[test]
    fn canonicalize_rejects_zero() {
        assert!(matches!(
            UnitQuat::new(0.0, 0.0, 0.0, 0.0).canonicalize(),
            Err(ModelError::InvalidQuaternion(_))
        ));
        assert!(UnitQuat::new(f64::NAN, 0.0, 0.0, 1.0).canonicalize().is_err());
    }

    #[test]
    fn canonicalize_normalizes() {
        let q = UnitQuat::new(0.0, 0.0, 3.0, -4.0).canonicalize().unwrap();
        assert!((q.norm() - 1.0).abs() < 1e-15);
        assert!((q.z + 0.6).abs() < 1e-15);
    }

    #[test]
    fn geodesic_mean_examples() {
        let m = geodesic_mean(&[UnitQuat::IDENTITY, UnitQuat::IDENTITY], 1e-9).unwrap();
        assert!(close(&m, &UnitQuat::IDENTITY, 1e-12));

        let m = geodesic_mean(&[UnitQuat::rot_x(0.2), UnitQuat::rot_x(-0.2)], 1e-9).unwrap();
        assert!(close(&m, &UnitQuat::IDENTITY, 1e-9));

        let angles: Vec<f64> = (0..100).map(|k| 0.3 + 0.05 * (k as f64).sin()).collect();
        let quats: Vec<UnitQuat> = angles.iter().map(|a| UnitQuat::rot_y(*a)).collect();
        // Single shared axis: the mean rotation is the mean angle.
        let oracle = angles.iter().sum::<f64>() / angles.len() as f64;
        let m = geodesic_mean(&quats, 1e-10).unwrap();
        assert!(close(&m, &UnitQuat::rot_y(oracle), 1e-8), "{m} vs rot_y({oracle})");
    }

    #[test]
    fn geodesic_mean_empty() {
        assert_eq!(geodesic_mean(&[], 1e-6), Err(ModelError::EmptyInput));
    }

    #[test]
    fn geodesic_mean_mixed_hemispheres() {
        let a = UnitQuat::rot_z(0.1);
        let b = UnitQuat::rot_z(-0.1);
        let b_neg = UnitQuat::new(-b.x, -b.y, -b.z, -b.w);
        let m = geodesic_mean(&[a, b_neg], 1e-10).unwrap();
        assert!(close(&m, &UnitQuat::IDENTITY, 1e-9));
    }

    #[test]
    fn scale_rotation_examples() {
        let r = UnitQuat::rot_x(0.3);
        let q = UnitQuat::from_axis_angle([0.2, 1.0, -0.4], 0.7);
        assert_eq!(scale_rotation(&r, &q, 1.0).rotation, q);
        assert!(close(&scale_rotation(&r, &q, 0.0).rotation, &r, 1e-12));

        // Axis-angle doubling about a single axis.
        let out = scale_rotation(&UnitQuat::IDENTITY, &UnitQuat::rot_z(0.4), 2.0);
        assert!(close(&out.rotation, &UnitQuat::rot_z(0.8), 1e-12));
        assert!(!out.degenerate_axis);
    }

    #[test]
    fn scale_rotation_half_turn_flags() {
        let q = UnitQuat::rot_y(PI);
        let out = scale_rotation(&UnitQuat::IDENTITY, &q, 0.5);
        assert!(out.degenerate_axis);
        assert!(close(&out.rotation, &UnitQuat::rot_y(PI / 2.0), 1e-9));
        assert!((out.rotation.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn skeleton_validation() {
        assert!(Skeleton::new(vec![], vec![]).is_err());
        assert!(Skeleton::new(vec!["a".into(), "a".into()], vec![BodyZone::Other; 2]).is_err());
        assert!(Skeleton::new(vec!["a".into()], vec![]).is_err());
        let s = Skeleton::body34();
        assert_eq!(s.joint_count(), 34);
        assert_eq!(s.zone(0), BodyZone::Hips);
        assert_eq!(s.joints_in(BodyZone::Hips).count(), 3);
        let g = Skeleton::with_joint_count(5).unwrap();
        assert_eq!(g.zone(0), BodyZone::Hips);
        assert_eq!(g.zone(4), BodyZone::Other);
    }

    #[test]
    fn zone_names_round_trip() {
        for z in BodyZone::ALL {
            assert_eq!(BodyZone::from_name(z.name()), Some(z));
        }
        assert_eq!(BodyZone::default(), BodyZone::Other);
    }

    fn arb_quat() -> impl Strategy<Value = UnitQuat> {
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
            .prop_filter("non-degenerate", |(x, y, z, w)| x * x + y * y + z * z + w * w > 1e-3)
            .prop_map(|(x, y, z, w)| UnitQuat::new(x, y, z, w).canonicalize().unwrap())
    }

    proptest! {
        #[test]
        fn canonicalize_idempotent(x in -2.0f64..2.0, y in -2.0f64..2.0, z in -2.0f64..2.0, w in -2.0f64..2.0) {
            prop_assume!(x * x + y * y + z * z + w * w > 1e-6);
            let once = UnitQuat::new(x, y, z, w).canonicalize().unwrap();
            let twice = once.canonicalize().unwrap();
            prop_assert_eq!(once.as_array().map(f64::to_bits), twice.as_array().map(f64::to_bits));
            prop_assert!(once.w >= 0.0);
            prop_assert!((once.norm() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn canonicalize_preserves_rotation(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0, w in -1.0f64..1.0,
                                           v in prop::array::uniform3(-5.0f64..5.0)) {
            prop_assume!(x * x + y * y + z * z + w * w > 1e-3);
            let raw = UnitQuat::new(x, y, z, w);
            let n = raw.norm();
            let unit = UnitQuat::new(x / n, y / n, z / n, w / n);
            let a = unit.rotate(v);
            let b = raw.canonicalize().unwrap().rotate(v);
            for i in 0..3 {
                prop_assert!((a[i] - b[i]).abs() < 1e-6);
            }
        }

        #[test]
        fn unit_gain_is_identity(r in arb_quat(), q in arb_quat()) {
            prop_assume!(r.angle_to(&q) < PI - 0.1);
            let out = scale_rotation(&r, &q, 1.0).rotation;
            prop_assert!(out.angle_to(&q) < 1e-6);
        }

        #[test]
        fn scaled_rotations_are_unit(r in arb_quat(), q in arb_quat(), gain in 0.0f64..4.0) {
            let out = scale_rotation(&r, &q, gain).rotation;
            prop_assert!((out.norm() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn geodesic_mean_permutation_invariant(base in arb_quat(),
                                               offsets in prop::collection::vec(prop::array::uniform3(-0.4f64..0.4), 2..20),
                                               seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let quats: Vec<UnitQuat> = offsets.iter().map(|o| base.mul(&UnitQuat::exp(*o))).collect();
            let mut shuffled = quats.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let tol = 1e-6;
            let a = geodesic_mean(&quats, tol).unwrap();
            let b = geodesic_mean(&shuffled, tol).unwrap();
            prop_assert!(a.angle_to(&b) < tol, "{} vs {}", a, b);
        }
    }
}
