//! Kinematic, timing and static-load model of the 5-DoF arm.
//!
//! The chain is base yaw, three pitch joints (shoulder, elbow, wrist pitch)
//! and a wrist roll, followed by a two-finger gripper. With every angle at
//! zero the arm points straight up; pitches are measured from vertical and
//! accumulate along the chain. The shoulder axis sits at the origin.
//!
//! Defaults describe the physical build: 6.5 cm / 10 cm / 4.5 cm links,
//! MG995 servos (±60°, 10 kgf·cm at 6 V, two of them on the shoulder), micro
//! servos on wrist roll and gripper (180° travel, 0.18 s/60°), and a gripper
//! that opens to 2 inches.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{fixed6, fixed6_or_null};

#[derive(Debug, Error)]
pub enum ArmError {
    #[error("non-finite or out-of-domain input: {0}")]
    Domain(String),
    #[error("configuration outside joint limits: {}", display_violations(.0))]
    Limit(Vec<Violation>),
    #[error("invalid arm profile: {0}")]
    Profile(String),
    #[error("cannot read profile {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn display_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

/// The five actuated axes, in chain order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Joint {
    Base,
    Shoulder,
    Elbow,
    WristPitch,
    WristRoll,
}

impl Joint {
    pub const ALL: [Joint; 5] = [
        Joint::Base,
        Joint::Shoulder,
        Joint::Elbow,
        Joint::WristPitch,
        Joint::WristRoll,
    ];

    /// Wire field name carrying this joint's angle.
    pub fn field(self) -> &'static str {
        match self {
            Joint::Base => "base_deg",
            Joint::Shoulder => "shoulder_deg",
            Joint::Elbow => "elbow_deg",
            Joint::WristPitch => "wrist_pitch_deg",
            Joint::WristRoll => "wrist_roll_deg",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Joint angles in degrees plus gripper aperture in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct JointConfig {
    #[serde(serialize_with = "fixed6")]
    pub base_deg: f64,
    #[serde(serialize_with = "fixed6")]
    pub shoulder_deg: f64,
    #[serde(serialize_with = "fixed6")]
    pub elbow_deg: f64,
    #[serde(serialize_with = "fixed6")]
    pub wrist_pitch_deg: f64,
    #[serde(serialize_with = "fixed6")]
    pub wrist_roll_deg: f64,
    #[serde(serialize_with = "fixed6")]
    pub gripper_mm: f64,
}

impl JointConfig {
    pub fn new(angles_deg: [f64; 5], gripper_mm: f64) -> Self {
        let [base_deg, shoulder_deg, elbow_deg, wrist_pitch_deg, wrist_roll_deg] = angles_deg;
        Self {
            base_deg,
            shoulder_deg,
            elbow_deg,
            wrist_pitch_deg,
            wrist_roll_deg,
            gripper_mm,
        }
    }

    pub fn angles(&self) -> [f64; 5] {
        [
            self.base_deg,
            self.shoulder_deg,
            self.elbow_deg,
            self.wrist_pitch_deg,
            self.wrist_roll_deg,
        ]
    }

    pub fn angle(&self, joint: Joint) -> f64 {
        self.angles()[joint.index()]
    }

    pub fn is_finite(&self) -> bool {
        self.angles().iter().all(|a| a.is_finite()) && self.gripper_mm.is_finite()
    }
}

/// End-effector position in centimetres, with wrist roll and gripper passed through.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartesianPose {
    #[serde(serialize_with = "fixed6")]
    pub x_cm: f64,
    #[serde(serialize_with = "fixed6")]
    pub y_cm: f64,
    #[serde(serialize_with = "fixed6")]
    pub z_cm: f64,
    #[serde(serialize_with = "fixed6")]
    pub roll_deg: f64,
    #[serde(serialize_with = "fixed6")]
    pub gripper_mm: f64,
}

impl CartesianPose {
    pub fn reach(&self) -> f64 {
        (self.x_cm * self.x_cm + self.y_cm * self.y_cm + self.z_cm * self.z_cm).sqrt()
    }
}

/// One field outside its allowed interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub field: String,
    #[serde(serialize_with = "fixed6_or_null")]
    pub value: f64,
    #[serde(serialize_with = "fixed6")]
    pub min: f64,
    #[serde(serialize_with = "fixed6")]
    pub max: f64,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} = {} outside [{}, {}]",
            self.field, self.value, self.min, self.max
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSpec {
    pub min_deg: f64,
    pub max_deg: f64,
    /// Seconds the servo needs to sweep 60 degrees.
    pub speed_s_per_60deg: f64,
}

impl JointSpec {
    fn max_rate_deg_per_s(&self) -> f64 {
        60.0 / self.speed_s_per_60deg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointTable {
    pub base: JointSpec,
    pub shoulder: JointSpec,
    pub elbow: JointSpec,
    pub wrist_pitch: JointSpec,
    pub wrist_roll: JointSpec,
}

impl JointTable {
    pub fn get(&self, joint: Joint) -> &JointSpec {
        match joint {
            Joint::Base => &self.base,
            Joint::Shoulder => &self.shoulder,
            Joint::Elbow => &self.elbow,
            Joint::WristPitch => &self.wrist_pitch,
            Joint::WristRoll => &self.wrist_roll,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkLengths {
    /// Shoulder joint to elbow joint.
    pub shoulder_cm: f64,
    /// Elbow joint to wrist-pitch joint.
    pub arm_cm: f64,
    /// Wrist-pitch joint to the gripper tip.
    pub wrist_cm: f64,
}

impl LinkLengths {
    pub fn total(&self) -> f64 {
        self.shoulder_cm + self.arm_cm + self.wrist_cm
    }

    fn as_array(&self) -> [f64; 3] {
        [self.shoulder_cm, self.arm_cm, self.wrist_cm]
    }
}

/// Point on the chain a mass is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attachment {
    Elbow,
    WristPitch,
    Effector,
}

/// Point mass carried by the arm. `offset_cm` is measured from the
/// attachment point along the next distal link (along the last link for
/// the effector).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MassPoint {
    pub mass_g: f64,
    pub at: Attachment,
    #[serde(default)]
    pub offset_cm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GripperRange {
    pub min_mm: f64,
    pub max_mm: f64,
}

/// Immutable physical description of one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmProfile {
    pub name: String,
    pub shoulder_stall_torque_kgfcm: f64,
    pub links: LinkLengths,
    pub gripper: GripperRange,
    pub joints: JointTable,
    #[serde(default, rename = "mass_point")]
    pub mass_points: Vec<MassPoint>,
}

const MG995_RANGE_DEG: f64 = 60.0;
// MG995 sweep time is not in the build notes; 0.20 s/60° is typical for the class.
const MG995_SPEED_S_PER_60: f64 = 0.20;
const MICRO_SERVO_SPEED_S_PER_60: f64 = 0.18;
const MG995_MASS_G: f64 = 55.0;
const MICRO_SERVO_MASS_G: f64 = 20.0;
const MG995_STALL_6V_KGFCM: f64 = 10.0;
/// 2 inches.
pub const GRIPPER_MAX_MM: f64 = 50.8;

impl Default for ArmProfile {
    fn default() -> Self {
        let mg995 = JointSpec {
            min_deg: -MG995_RANGE_DEG,
            max_deg: MG995_RANGE_DEG,
            speed_s_per_60deg: MG995_SPEED_S_PER_60,
        };
        Self {
            name: "iort-5dof".to_string(),
            shoulder_stall_torque_kgfcm: 2.0 * MG995_STALL_6V_KGFCM,
            links: LinkLengths {
                shoulder_cm: 6.5,
                arm_cm: 10.0,
                wrist_cm: 4.5,
            },
            gripper: GripperRange {
                min_mm: 0.0,
                max_mm: GRIPPER_MAX_MM,
            },
            joints: JointTable {
                base: mg995,
                shoulder: mg995,
                elbow: mg995,
                wrist_pitch: mg995,
                wrist_roll: JointSpec {
                    min_deg: -90.0,
                    max_deg: 90.0,
                    speed_s_per_60deg: MICRO_SERVO_SPEED_S_PER_60,
                },
            },
            mass_points: vec![
                MassPoint {
                    mass_g: MG995_MASS_G,
                    at: Attachment::Elbow,
                    offset_cm: 0.0,
                },
                MassPoint {
                    mass_g: MG995_MASS_G,
                    at: Attachment::WristPitch,
                    offset_cm: 0.0,
                },
                MassPoint {
                    mass_g: 2.0 * MICRO_SERVO_MASS_G,
                    at: Attachment::Effector,
                    offset_cm: 0.0,
                },
            ],
        }
    }
}

impl ArmProfile {
    pub fn from_toml_str(text: &str) -> Result<Self, ArmError> {
        let profile: ArmProfile =
            toml::from_str(text).map_err(|e| ArmError::Profile(e.to_string()))?;
        profile.check()?;
        Ok(profile)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ArmError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ArmError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("profile serializes to TOML")
    }

    /// Checks the structural invariants: positive lengths and speeds,
    /// non-degenerate ranges, non-negative masses.
    pub fn check(&self) -> Result<(), ArmError> {
        let bad = |msg: String| Err(ArmError::Profile(msg));
        for (name, len) in [
            ("links.shoulder_cm", self.links.shoulder_cm),
            ("links.arm_cm", self.links.arm_cm),
            ("links.wrist_cm", self.links.wrist_cm),
        ] {
            if !(len.is_finite() && len > 0.0) {
                return bad(format!("{name} must be > 0, got {len}"));
            }
        }
        for joint in Joint::ALL {
            let spec = self.joints.get(joint);
            if !(spec.min_deg.is_finite() && spec.max_deg.is_finite() && spec.min_deg < spec.max_deg)
            {
                return bad(format!("{} range is degenerate", joint.field()));
            }
            if !(spec.speed_s_per_60deg.is_finite() && spec.speed_s_per_60deg > 0.0) {
                return bad(format!("{} speed must be > 0", joint.field()));
            }
        }
        if !(self.gripper.min_mm.is_finite()
            && self.gripper.max_mm.is_finite()
            && self.gripper.min_mm < self.gripper.max_mm)
        {
            return bad("gripper range is degenerate".into());
        }
        if !(self.shoulder_stall_torque_kgfcm.is_finite() && self.shoulder_stall_torque_kgfcm > 0.0)
        {
            return bad("shoulder_stall_torque_kgfcm must be > 0".into());
        }
        for (i, m) in self.mass_points.iter().enumerate() {
            if !(m.mass_g.is_finite() && m.mass_g >= 0.0 && m.offset_cm.is_finite()) {
                return bad(format!("mass_point[{i}] must have finite mass >= 0"));
            }
        }
        Ok(())
    }

    /// Every field of `q` outside this profile's limits. Limits are closed
    /// intervals; NaN is always a violation.
    pub fn violations(&self, q: &JointConfig) -> Vec<Violation> {
        let mut out = Vec::new();
        for joint in Joint::ALL {
            let spec = self.joints.get(joint);
            let value = q.angle(joint);
            if !(spec.min_deg..=spec.max_deg).contains(&value) {
                out.push(Violation {
                    field: joint.field().to_string(),
                    value,
                    min: spec.min_deg,
                    max: spec.max_deg,
                });
            }
        }
        if !(self.gripper.min_mm..=self.gripper.max_mm).contains(&q.gripper_mm) {
            out.push(Violation {
                field: "gripper_mm".to_string(),
                value: q.gripper_mm,
                min: self.gripper.min_mm,
                max: self.gripper.max_mm,
            });
        }
        out
    }

    pub fn within_limits(&self, q: &JointConfig) -> bool {
        self.violations(q).is_empty()
    }
}

/// Positions of the chain points in the arm's vertical plane and in space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainPoint {
    /// Horizontal distance from the vertical axis through the shoulder (signed).
    pub radial_cm: f64,
    pub z_cm: f64,
}

/// Elbow, wrist-pitch and tip positions in the (radial, z) plane, plus the
/// absolute pitch of each link measured from vertical, in radians.
fn planar_chain(q: &JointConfig, links: &LinkLengths) -> ([ChainPoint; 3], [f64; 3]) {
    let pitches = [
        q.shoulder_deg.to_radians(),
        (q.shoulder_deg + q.elbow_deg).to_radians(),
        (q.shoulder_deg + q.elbow_deg + q.wrist_pitch_deg).to_radians(),
    ];
    let lengths = links.as_array();
    let mut radial = 0.0;
    let mut z = 0.0;
    let mut points = [ChainPoint {
        radial_cm: 0.0,
        z_cm: 0.0,
    }; 3];
    for k in 0..3 {
        radial += lengths[k] * pitches[k].sin();
        z += lengths[k] * pitches[k].cos();
        points[k] = ChainPoint {
            radial_cm: radial,
            z_cm: z,
        };
    }
    (points, pitches)
}

/// End-effector pose. Total over finite inputs; joint limits are not checked.
pub fn forward_kinematics(q: &JointConfig, p: &ArmProfile) -> Result<CartesianPose, ArmError> {
    if !q.is_finite() {
        return Err(ArmError::Domain(format!("joint config {q:?}")));
    }
    let (points, _) = planar_chain(q, &p.links);
    let tip = points[2];
    let yaw = q.base_deg.to_radians();
    Ok(CartesianPose {
        x_cm: tip.radial_cm * yaw.cos(),
        y_cm: tip.radial_cm * yaw.sin(),
        z_cm: tip.z_cm,
        roll_deg: q.wrist_roll_deg,
        gripper_mm: q.gripper_mm,
    })
}

/// Elbow, wrist-pitch and tip positions in the arm's vertical plane.
pub fn chain_points(q: &JointConfig, p: &ArmProfile) -> Result<[ChainPoint; 3], ArmError> {
    if !q.is_finite() {
        return Err(ArmError::Domain(format!("joint config {q:?}")));
    }
    Ok(planar_chain(q, &p.links).0)
}

/// Synchronised point-to-point move: every joint starts together and
/// arrives together, the slowest joint running at its servo's full rate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MotionPlan {
    pub start: JointConfig,
    pub target: JointConfig,
    pub duration_s: f64,
    /// `duration_s` rounded to whole microseconds of clock time.
    pub duration_us: u64,
    /// Angular rate of each joint in degrees per second, base to wrist roll.
    pub rates_deg_per_s: [f64; 5],
}

pub fn plan_motion(
    start: &JointConfig,
    target: &JointConfig,
    p: &ArmProfile,
) -> Result<MotionPlan, ArmError> {
    let mut violations = p.violations(start);
    violations.extend(p.violations(target));
    if !violations.is_empty() {
        return Err(ArmError::Limit(violations));
    }
    let deltas: Vec<f64> = Joint::ALL
        .iter()
        .map(|&j| (target.angle(j) - start.angle(j)).abs())
        .collect();
    let duration_s = Joint::ALL
        .iter()
        .zip(&deltas)
        .map(|(&j, d)| d / 60.0 * p.joints.get(j).speed_s_per_60deg)
        .fold(0.0, f64::max);
    let mut rates_deg_per_s = [0.0; 5];
    if duration_s > 0.0 {
        for (k, &j) in Joint::ALL.iter().enumerate() {
            // Never above the servo's own maximum, even after rounding.
            rates_deg_per_s[k] = (deltas[k] / duration_s).min(p.joints.get(j).max_rate_deg_per_s());
        }
    }
    Ok(MotionPlan {
        start: *start,
        target: *target,
        duration_s,
        duration_us: (duration_s * 1e6).round() as u64,
        rates_deg_per_s,
    })
}

/// Configuration `t_s` seconds into `plan`, linearly interpolated. Returns
/// exactly `start` at 0 and exactly `target` from `duration_s` on.
pub fn config_at(plan: &MotionPlan, t_s: f64) -> Result<JointConfig, ArmError> {
    if !(t_s >= 0.0) {
        return Err(ArmError::Domain(format!("sample time {t_s}")));
    }
    if t_s >= plan.duration_s {
        return Ok(plan.target);
    }
    if t_s == 0.0 {
        return Ok(plan.start);
    }
    let f = t_s / plan.duration_s;
    let lerp = |a: f64, b: f64| a + (b - a) * f;
    let (s, e) = (&plan.start, &plan.target);
    Ok(JointConfig {
        base_deg: lerp(s.base_deg, e.base_deg),
        shoulder_deg: lerp(s.shoulder_deg, e.shoulder_deg),
        elbow_deg: lerp(s.elbow_deg, e.elbow_deg),
        wrist_pitch_deg: lerp(s.wrist_pitch_deg, e.wrist_pitch_deg),
        wrist_roll_deg: lerp(s.wrist_roll_deg, e.wrist_roll_deg),
        gripper_mm: lerp(s.gripper_mm, e.gripper_mm),
    })
}

/// Static holding torque on the shoulder in kgf·cm: every mass point plus
/// the payload (held at the tip) times its horizontal distance from the
/// shoulder axis.
pub fn shoulder_torque(q: &JointConfig, payload_g: f64, p: &ArmProfile) -> Result<f64, ArmError> {
    if !(payload_g.is_finite() && payload_g >= 0.0) {
        return Err(ArmError::Domain(format!("payload {payload_g} g")));
    }
    let (points, pitches) = {
        if !q.is_finite() {
            return Err(ArmError::Domain(format!("joint config {q:?}")));
        }
        planar_chain(q, &p.links)
    };
    let arm_of = |m: &MassPoint| {
        let (base, dir) = match m.at {
            Attachment::Elbow => (points[0], pitches[1]),
            Attachment::WristPitch => (points[1], pitches[2]),
            Attachment::Effector => (points[2], pitches[2]),
        };
        (base.radial_cm + m.offset_cm * dir.sin()).abs()
    };
    let gram_cm: f64 = p.mass_points.iter().map(|m| m.mass_g * arm_of(m)).sum::<f64>()
        + payload_g * points[2].radial_cm.abs();
    Ok(gram_cm / 1000.0)
}

pub fn is_liftable(q: &JointConfig, payload_g: f64, p: &ArmProfile) -> Result<bool, ArmError> {
    Ok(shoulder_torque(q, payload_g, p)? <= p.shoulder_stall_torque_kgfcm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(angles: [f64; 5]) -> JointConfig {
        JointConfig::new(angles, 0.0)
    }

    #[test]
    fn zero_config_points_straight_up() {
        let pose = forward_kinematics(&q([0.0; 5]), &ArmProfile::default()).unwrap();
        assert_eq!((pose.x_cm, pose.y_cm, pose.z_cm), (0.0, 0.0, 21.0));
    }

    #[test]
    fn tilted_collinear_chain_rotated_into_y() {
        let pose =
            forward_kinematics(&q([90.0, 60.0, 0.0, 0.0, 0.0]), &ArmProfile::default()).unwrap();
        assert!(pose.x_cm.abs() < 1e-12);
        assert!((pose.y_cm - 18.1865).abs() < 1e-4);
        assert!((pose.z_cm - 10.5).abs() < 1e-12);
    }

    #[test]
    fn mixed_pose_matches_reference_values() {
        let pose =
            forward_kinematics(&q([30.0, 45.0, -30.0, 15.0, 0.0]), &ArmProfile::default()).unwrap();
        assert!((pose.x_cm - 8.170417).abs() < 1e-6);
        assert!((pose.y_cm - 4.717192).abs() < 1e-6);
        assert!((pose.z_cm - 18.152567).abs() < 1e-6);
    }

    #[test]
    fn fk_rejects_non_finite_but_not_out_of_range() {
        let p = ArmProfile::default();
        assert!(matches!(
            forward_kinematics(&q([f64::NAN, 0.0, 0.0, 0.0, 0.0]), &p),
            Err(ArmError::Domain(_))
        ));
        assert!(forward_kinematics(&q([170.0, 120.0, -300.0, 0.0, 400.0]), &p).is_ok());
    }

    #[test]
    fn wrist_roll_timing_uses_micro_servo_rate() {
        let p = ArmProfile::default();
        let start = q([0.0; 5]);
        let plan = plan_motion(&start, &q([0.0, 0.0, 0.0, 0.0, 60.0]), &p).unwrap();
        assert_eq!(plan.duration_us, 180_000);
        assert!((plan.duration_s - 0.18).abs() < 1e-12);
        let plan = plan_motion(&start, &q([0.0, 0.0, 0.0, 0.0, 90.0]), &p).unwrap();
        assert_eq!(plan.duration_us, 270_000);
        let plan = plan_motion(&start, &start, &p).unwrap();
        assert_eq!(plan.duration_us, 0);
        assert_eq!(config_at(&plan, 0.0).unwrap(), start);
    }

    #[test]
    fn plan_rejects_out_of_limit_configs() {
        let p = ArmProfile::default();
        let err = plan_motion(&q([0.0; 5]), &q([0.0, 0.0, 75.0, 0.0, 0.0]), &p).unwrap_err();
        match err {
            ArmError::Limit(v) => assert_eq!(v[0].field, "elbow_deg"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn config_at_midpoint_and_clamp() {
        let p = ArmProfile::default();
        let plan = plan_motion(&q([0.0; 5]), &q([40.0, 0.0, 0.0, 0.0, 0.0]), &p).unwrap();
        let mid = config_at(&plan, plan.duration_s / 2.0).unwrap();
        assert!((mid.base_deg - 20.0).abs() < 1e-12);
        assert_eq!(config_at(&plan, plan.duration_s * 3.0).unwrap(), plan.target);
        assert!(config_at(&plan, -0.1).is_err());
    }

    #[test]
    fn vertical_arm_has_no_shoulder_moment() {
        let p = ArmProfile::default();
        for payload in [0.0, 500.0, 10_000.0] {
            assert_eq!(shoulder_torque(&q([25.0, 0.0, 0.0, 0.0, 0.0]), payload, &p).unwrap(), 0.0);
        }
        assert!(is_liftable(&q([0.0; 5]), 0.0, &p).unwrap());
    }

    #[test]
    fn ten_kilograms_overloads_any_real_reach() {
        let p = ArmProfile::default();
        // tip radial reach 21·sin(6°) ≈ 2.195 cm
        let pose = q([0.0, 6.0, 0.0, 0.0, 0.0]);
        assert!(!is_liftable(&pose, 10_000.0, &p).unwrap());
    }

    #[test]
    fn negative_payload_is_a_domain_error() {
        assert!(shoulder_torque(&q([0.0; 5]), -1.0, &ArmProfile::default()).is_err());
    }

    #[test]
    fn default_profile_round_trips_through_toml() {
        let p = ArmProfile::default();
        let text = p.to_toml_string();
        assert_eq!(ArmProfile::from_toml_str(&text).unwrap(), p);
    }

    #[test]
    fn profile_check_rejects_degenerate_values() {
        let mut p = ArmProfile::default();
        p.links.arm_cm = 0.0;
        assert!(p.check().is_err());
        let mut p = ArmProfile::default();
        p.joints.elbow.min_deg = 60.0;
        assert!(p.check().is_err());
        let mut p = ArmProfile::default();
        p.mass_points[0].mass_g = -1.0;
        assert!(p.check().is_err());
    }
}
