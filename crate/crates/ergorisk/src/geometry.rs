//! Joint angles and vertical inclinations from 2D skeletons.
//!
//! Two angle primitives cover everything downstream scoring needs: the
//! interior angle at a joint B formed by segments B→A and B→C (cosine law,
//! clamped), and the inclination of a segment against the image vertical
//! (arctangent with a small stabilizer so near-vertical segments stay
//! finite). Both operate on normalized coordinates: the joint angle is
//! scale-invariant anyway, and the inclination form uses raw coordinate
//! differences, so mixing in pixel aspect ratios would change its value.

use std::ops::Sub;

use crate::error::{Error, Result};
use crate::pose::{CoordSpace, LandmarkIndexMap, Skeleton};

/// 2D point or displacement in image coordinates (y grows downward).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

/// Arithmetic midpoint of two points.
pub fn midpoint(a: Vec2, b: Vec2) -> Vec2 {
    Vec2::new((a.x + b.x) / 2.0, (a.y + b.y) / 2.0)
}

/// Interior angle at `b` between segments b→a and b→c, in degrees `[0,180]`.
///
/// The cosine is clamped to `[-1,1]` before the arccosine so collinear
/// configurations cannot drift into NaN. `joint` labels the degenerate-input
/// error when either segment has zero length.
pub fn joint_angle(a: Vec2, b: Vec2, c: Vec2, joint: &str) -> Result<f64> {
    let u = a - b;
    let v = c - b;
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateJoint { joint: joint.to_string() });
    }
    let cos = (u.dot(v) / (nu * nv)).clamp(-1.0, 1.0);
    Ok(cos.acos().to_degrees())
}

/// Inclination of the segment `bottom→top` against the vertical axis,
/// in degrees `[0,90]`.
///
/// Computed as `arctan((|Δx| + ε) / |Δy|)`; a perfectly horizontal segment
/// (`|Δy| = 0`) returns exactly 90. The ε stabilizer is added to the
/// numerator, which biases every inclination very slightly upward — kept as
/// is so results match the closed form exactly.
pub fn inclination_angle(top: Vec2, bottom: Vec2, epsilon: f64) -> f64 {
    let dx = (top.x - bottom.x).abs();
    let dy = (top.y - bottom.y).abs();
    if dy == 0.0 {
        return 90.0;
    }
    ((dx + epsilon) / dy).atan().to_degrees()
}

/// Parameters for angle extraction.
#[derive(Debug, Clone)]
pub struct GeometryConfig {
    /// Stabilizer for near-vertical inclinations; must be positive.
    pub epsilon: f64,
    /// Topology aliases for the landmark slots.
    pub index_map: LandmarkIndexMap,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            epsilon: 1e-6,
            index_map: LandmarkIndexMap::default(),
        }
    }
}

impl GeometryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!(
                "geometry epsilon must be a positive finite number, got {}",
                self.epsilon
            )));
        }
        self.index_map.validate()
    }
}

/// Left/right values of a bilateral region angle, in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SidePair {
    pub left: f64,
    pub right: f64,
}

/// All region angles a posture assessment consumes, in degrees.
///
/// Bilateral regions carry both sides; picking the risk-dominant side is a
/// scoring concern (band tables live there), so it happens in the scoring
/// module, not here.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionAngles {
    /// Trunk inclination from vertical: shoulder midpoint over hip midpoint.
    pub trunk_deg: f64,
    /// Neck flexion relative to the trunk: |ear-midline inclination − trunk|.
    pub neck_deg: f64,
    /// Knee flexion per side: 180° minus the hip–knee–ankle interior angle.
    pub leg_deg: SidePair,
    /// Upper-arm raise per side: hip–shoulder–elbow interior angle.
    pub upper_arm_deg: SidePair,
    /// Elbow interior angle per side: shoulder–elbow–wrist.
    pub lower_arm_deg: SidePair,
    /// Wrist deviation from straight per side: |180° − elbow–wrist–index|.
    pub wrist_deg: SidePair,
}

impl RegionAngles {
    /// All ten angle values, for range checks.
    pub fn values(&self) -> [f64; 10] {
        [
            self.trunk_deg,
            self.neck_deg,
            self.leg_deg.left,
            self.leg_deg.right,
            self.upper_arm_deg.left,
            self.upper_arm_deg.right,
            self.lower_arm_deg.left,
            self.lower_arm_deg.right,
            self.wrist_deg.left,
            self.wrist_deg.right,
        ]
    }
}

/// Landmarks each region requires, used for the rejection error message.
fn region_requirements(m: &LandmarkIndexMap) -> [(&'static str, Vec<usize>); 6] {
    [
        ("trunk", vec![m.left_shoulder, m.right_shoulder, m.left_hip, m.right_hip]),
        ("neck", vec![m.left_ear, m.right_ear, m.left_shoulder, m.right_shoulder]),
        (
            "legs",
            vec![m.left_hip, m.right_hip, m.left_knee, m.right_knee, m.left_ankle, m.right_ankle],
        ),
        (
            "upper_arm",
            vec![m.left_hip, m.right_hip, m.left_shoulder, m.right_shoulder, m.left_elbow, m.right_elbow],
        ),
        (
            "lower_arm",
            vec![m.left_shoulder, m.right_shoulder, m.left_elbow, m.right_elbow, m.left_wrist, m.right_wrist],
        ),
        (
            "wrist",
            vec![m.left_elbow, m.right_elbow, m.left_wrist, m.right_wrist, m.left_index, m.right_index],
        ),
    ]
}

/// Extract every region angle from a skeleton.
///
/// Fails with a missing-landmark error (naming the first affected region
/// and its absent slot indices) when the skeleton cannot support the full
/// set of measurements; callers reject such samples rather than imputing.
pub fn region_angles(s: &Skeleton, cfg: &GeometryConfig) -> Result<RegionAngles> {
    if s.space != CoordSpace::Normalized {
        return Err(Error::Value(format!(
            "skeleton {:?}: region angles are defined on normalized coordinates",
            s.id
        )));
    }
    let m = &cfg.index_map;
    for (region, indices) in region_requirements(m) {
        let absent: Vec<usize> = indices.into_iter().filter(|&i| s.get(i).is_none()).collect();
        if !absent.is_empty() {
            return Err(Error::MissingLandmarks { region: region.to_string(), indices: absent });
        }
    }
    let pt = |idx: usize| -> Vec2 {
        let lm = s.get(idx).expect("presence checked above");
        Vec2::new(lm.x, lm.y)
    };

    let shoulder_mid = midpoint(pt(m.left_shoulder), pt(m.right_shoulder));
    let hip_mid = midpoint(pt(m.left_hip), pt(m.right_hip));
    let ear_mid = midpoint(pt(m.left_ear), pt(m.right_ear));

    let trunk = inclination_angle(shoulder_mid, hip_mid, cfg.epsilon);
    let neck = (inclination_angle(ear_mid, shoulder_mid, cfg.epsilon) - trunk).abs();

    let side = |hip, knee, ankle, shoulder, elbow, wrist, index, tag: &str| -> Result<[f64; 4]> {
        let leg = 180.0 - joint_angle(pt(hip), pt(knee), pt(ankle), &format!("{tag}_knee"))?;
        let upper = joint_angle(pt(hip), pt(shoulder), pt(elbow), &format!("{tag}_shoulder"))?;
        let lower = joint_angle(pt(shoulder), pt(elbow), pt(wrist), &format!("{tag}_elbow"))?;
        let wrist_dev =
            (180.0 - joint_angle(pt(elbow), pt(wrist), pt(index), &format!("{tag}_wrist"))?).abs();
        Ok([leg, upper, lower, wrist_dev])
    };
    let l = side(m.left_hip, m.left_knee, m.left_ankle, m.left_shoulder, m.left_elbow, m.left_wrist, m.left_index, "left")?;
    let r = side(m.right_hip, m.right_knee, m.right_ankle, m.right_shoulder, m.right_elbow, m.right_wrist, m.right_index, "right")?;

    Ok(RegionAngles {
        trunk_deg: trunk,
        neck_deg: neck,
        leg_deg: SidePair { left: l[0], right: r[0] },
        upper_arm_deg: SidePair { left: l[1], right: r[1] },
        lower_arm_deg: SidePair { left: l[2], right: r[2] },
        wrist_deg: SidePair { left: l[3], right: r[3] },
    })
}

/// Skeletal edges drawn in overlays, as landmark index pairs.
pub const EDGES: [(usize, usize); 16] = [
    (7, 11),  // left ear – left shoulder
    (8, 12),  // right ear – right shoulder
    (11, 12), // shoulder line
    (23, 24), // hip line
    (11, 23), // left flank
    (12, 24), // right flank
    (11, 13), // left upper arm
    (13, 15), // left forearm
    (15, 19), // left hand
    (12, 14), // right upper arm
    (14, 16), // right forearm
    (16, 20), // right hand
    (23, 25), // left thigh
    (25, 27), // left shin
    (24, 26), // right thigh
    (26, 28), // right shin
];

/// Render a skeleton as an SVG overlay sized to its source frame.
///
/// Output is byte-deterministic: coordinates are formatted with fixed
/// three-decimal precision, and edges/landmarks are emitted in fixed order.
pub fn render_svg(s: &Skeleton) -> Result<String> {
    let px = match s.space {
        CoordSpace::Pixel => s.clone(),
        CoordSpace::Normalized => s.rescale_to_pixels()?,
    };
    let (w, h) = (px.image_width, px.image_height);
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    for &(i, j) in EDGES.iter() {
        if let (Some(a), Some(b)) = (px.get(i), px.get(j)) {
            out.push_str(&format!(
                "  <line x1=\"{:.3}\" y1=\"{:.3}\" x2=\"{:.3}\" y2=\"{:.3}\" stroke=\"#00c853\" stroke-width=\"2\"/>\n",
                a.x, a.y, b.x, b.y
            ));
        }
    }
    for (idx, slot) in px.landmarks.iter().enumerate() {
        if let Some(lm) = slot {
            out.push_str(&format!(
                "  <circle cx=\"{:.3}\" cy=\"{:.3}\" r=\"3\" fill=\"#d50000\"><title>{idx}</title></circle>\n",
                lm.x, lm.y
            ));
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::{Landmark, LANDMARK_COUNT};
    use proptest::prelude::*;

    fn skeleton_with(points: &[(usize, f64, f64)]) -> Skeleton {
        let mut landmarks = [None; LANDMARK_COUNT];
        for &(i, x, y) in points {
            landmarks[i] = Some(Landmark { x, y, v: 1.0 });
        }
        Skeleton {
            id: "test".into(),
            image_width: 640,
            image_height: 480,
            space: CoordSpace::Normalized,
            landmarks,
        }
    }

    /// Straight-standing figure: every segment vertical, arms at the sides.
    fn upright_skeleton() -> Skeleton {
        let mut pts = Vec::new();
        for (left, x) in [(true, 0.45), (false, 0.55)] {
            let m = LandmarkIndexMap::default();
            let (ear, sh, el, wr, ix, hip, kn, an) = if left {
                (m.left_ear, m.left_shoulder, m.left_elbow, m.left_wrist, m.left_index, m.left_hip, m.left_knee, m.left_ankle)
            } else {
                (m.right_ear, m.right_shoulder, m.right_elbow, m.right_wrist, m.right_index, m.right_hip, m.right_knee, m.right_ankle)
            };
            pts.extend([
                (ear, x, 0.10),
                (sh, x, 0.30),
                (el, x, 0.42),
                (wr, x, 0.54),
                (ix, x, 0.60),
                (hip, x, 0.58),
                (kn, x, 0.76),
                (an, x, 0.94),
            ]);
        }
        skeleton_with(&pts)
    }

    #[test]
    fn joint_angle_examples() {
        let b = Vec2::new(0.0, 0.0);
        let a = Vec2::new(1.0, 0.0);
        assert!((joint_angle(a, b, Vec2::new(0.0, 1.0), "j").unwrap() - 90.0).abs() < 1e-12);
        assert!((joint_angle(a, b, Vec2::new(-1.0, 0.0), "j").unwrap() - 180.0).abs() < 1e-12);
        let c = Vec2::new(60f64.to_radians().cos(), 60f64.to_radians().sin());
        assert!((joint_angle(a, b, c, "j").unwrap() - 60.0).abs() < 1e-12);
    }

    #[test]
    fn joint_angle_degenerate_names_joint() {
        let p = Vec2::new(0.3, 0.3);
        let err = joint_angle(p, p, Vec2::new(1.0, 0.0), "left_knee").unwrap_err();
        assert!(err.to_string().contains("left_knee"), "{err}");
    }

    #[test]
    fn inclination_examples() {
        let a = inclination_angle(Vec2::new(0.5, 0.2), Vec2::new(0.5, 0.6), 1e-6);
        assert!(a.abs() < 1e-3, "near-vertical should be ~0, got {a}");
        let b = inclination_angle(Vec2::new(0.4, 0.2), Vec2::new(0.5, 0.3), 1e-6);
        assert!((b - 45.0).abs() < 1e-3, "unit slope should be ~45, got {b}");
        let c = inclination_angle(Vec2::new(0.2, 0.5), Vec2::new(0.6, 0.5), 1e-6);
        assert_eq!(c, 90.0);
    }

    #[test]
    fn midpoint_examples() {
        assert_eq!(midpoint(Vec2::new(0.0, 0.0), Vec2::new(1.0, 1.0)), Vec2::new(0.5, 0.5));
        let p = Vec2::new(0.2, 0.7);
        assert_eq!(midpoint(p, p), p);
        let m = midpoint(Vec2::new(0.2, 0.4), Vec2::new(0.4, 0.4));
        assert!((m.x - 0.3).abs() < 1e-12 && m.y == 0.4);
    }

    #[test]
    fn upright_skeleton_angles() {
        let angles = region_angles(&upright_skeleton(), &GeometryConfig::default()).unwrap();
        assert!(angles.trunk_deg < 0.1);
        assert!(angles.neck_deg < 0.1);
        // Straight knees and elbows: zero knee flexion, 180-degree elbows.
        assert!(angles.leg_deg.left.abs() < 0.1 && angles.leg_deg.right.abs() < 0.1);
        assert!((angles.lower_arm_deg.left - 180.0).abs() < 0.1);
        assert!((angles.lower_arm_deg.right - 180.0).abs() < 0.1);
        assert!(angles.upper_arm_deg.left < 0.1 && angles.upper_arm_deg.right < 0.1);
        assert!(angles.wrist_deg.left < 0.1 && angles.wrist_deg.right < 0.1);
        for v in angles.values() {
            assert!(v.is_finite() && (0.0..=180.0).contains(&v));
        }
    }

    #[test]
    fn bent_right_elbow_reads_ninety() {
        let mut s = upright_skeleton();
        let m = LandmarkIndexMap::default();
        // Forearm horizontal: shoulder->elbow points down, elbow->wrist right.
        s.landmarks[m.right_wrist] = Some(Landmark { x: 0.67, y: 0.42, v: 1.0 });
        s.landmarks[m.right_index] = Some(Landmark { x: 0.73, y: 0.42, v: 1.0 });
        let angles = region_angles(&s, &GeometryConfig::default()).unwrap();
        assert!((angles.lower_arm_deg.right - 90.0).abs() < 1e-6);
        assert!((angles.lower_arm_deg.left - 180.0).abs() < 0.1, "left side untouched");
    }

    #[test]
    fn missing_hips_reject_with_indices() {
        let mut s = upright_skeleton();
        s.landmarks[23] = None;
        s.landmarks[24] = None;
        let err = region_angles(&s, &GeometryConfig::default()).unwrap_err();
        match err {
            Error::MissingLandmarks { region, indices } => {
                assert_eq!(region, "trunk");
                assert_eq!(indices, vec![23, 24]);
            }
            other => panic!("expected missing-landmark error, got {other}"),
        }
    }

    #[test]
    fn pixel_space_skeleton_is_rejected() {
        let s = upright_skeleton().rescale_to_pixels().unwrap();
        assert!(region_angles(&s, &GeometryConfig::default()).is_err());
    }

    #[test]
    fn svg_golden_bytes() {
        let s = skeleton_with(&[(11, 0.25, 0.5), (12, 0.75, 0.5)]);
        let svg = render_svg(&s).unwrap();
        let expected = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"480\" viewBox=\"0 0 640 480\">\n  <line x1=\"160.000\" y1=\"240.000\" x2=\"480.000\" y2=\"240.000\" stroke=\"#00c853\" stroke-width=\"2\"/>\n  <circle cx=\"160.000\" cy=\"240.000\" r=\"3\" fill=\"#d50000\"><title>11</title></circle>\n  <circle cx=\"480.000\" cy=\"240.000\" r=\"3\" fill=\"#d50000\"><title>12</title></circle>\n</svg>\n";
        assert_eq!(svg, expected);
        // Determinism across repeated renders.
        assert_eq!(render_svg(&s).unwrap(), svg);
    }

    /// Second opinion on the joint angle via atan2 direction differences.
    fn joint_angle_oracle(a: Vec2, b: Vec2, c: Vec2) -> f64 {
        let ta = (a.y - b.y).atan2(a.x - b.x);
        let tc = (c.y - b.y).atan2(c.x - b.x);
        let mut d = (ta - tc).abs();
        if d > std::f64::consts::PI {
            d = 2.0 * std::f64::consts::PI - d;
        }
        d.to_degrees()
    }

    /// Second opinion on the inclination via atan2 on absolute differences.
    fn inclination_oracle(top: Vec2, bottom: Vec2, epsilon: f64) -> f64 {
        let dx = (top.x - bottom.x).abs();
        let dy = (top.y - bottom.y).abs();
        if dy == 0.0 {
            return 90.0;
        }
        (dx + epsilon).atan2(dy).to_degrees()
    }

    proptest! {
        /// Cosine-law angle agrees with the direction-difference oracle and
        /// is symmetric in its outer arguments.
        #[test]
        fn joint_angle_matches_oracle(
            bx in -1.0f64..1.0, by in -1.0f64..1.0,
            t1 in 0.0f64..360.0, sep in 1.0f64..179.0,
            r1 in 0.1f64..1.0, r2 in 0.1f64..1.0,
        ) {
            let b = Vec2::new(bx, by);
            let t2 = t1 + sep;
            let a = Vec2::new(b.x + r1 * t1.to_radians().cos(), b.y + r1 * t1.to_radians().sin());
            let c = Vec2::new(b.x + r2 * t2.to_radians().cos(), b.y + r2 * t2.to_radians().sin());
            let got = joint_angle(a, b, c, "j").unwrap();
            prop_assert!((got - joint_angle_oracle(a, b, c)).abs() < 1e-9);
            prop_assert!((got - joint_angle(c, b, a, "j").unwrap()).abs() < 1e-12);
        }

        /// Rotating and uniformly scaling all three points leaves the joint
        /// angle unchanged to 1e-9 degrees.
        #[test]
        fn joint_angle_similarity_invariant(
            bx in -1.0f64..1.0, by in -1.0f64..1.0,
            t1 in 0.0f64..360.0, sep in 1.0f64..179.0,
            r1 in 0.1f64..1.0, r2 in 0.1f64..1.0,
            rot in 0.0f64..360.0, scale in 0.1f64..10.0,
        ) {
            let b = Vec2::new(bx, by);
            let t2 = t1 + sep;
            let a = Vec2::new(b.x + r1 * t1.to_radians().cos(), b.y + r1 * t1.to_radians().sin());
            let c = Vec2::new(b.x + r2 * t2.to_radians().cos(), b.y + r2 * t2.to_radians().sin());
            let xf = |p: Vec2| {
                let (s, co) = rot.to_radians().sin_cos();
                Vec2::new(scale * (co * p.x - s * p.y), scale * (s * p.x + co * p.y))
            };
            let base = joint_angle(a, b, c, "j").unwrap();
            let moved = joint_angle(xf(a), xf(b), xf(c), "j").unwrap();
            prop_assert!((base - moved).abs() < 1e-9, "base {base} moved {moved}");
        }

        /// Inclination agrees with the atan2 oracle, ignores translation,
        /// and grows with |Δx| at fixed |Δy|.
        #[test]
        fn inclination_matches_oracle(
            x1 in -2.0f64..2.0, y1 in -2.0f64..2.0,
            dx in 0.0f64..2.0, dy in 0.1f64..2.0,
            tx in -5.0f64..5.0, ty in -5.0f64..5.0,
        ) {
            let top = Vec2::new(x1, y1);
            let bottom = Vec2::new(x1 + dx, y1 + dy);
            let got = inclination_angle(top, bottom, 1e-6);
            prop_assert!((got - inclination_oracle(top, bottom, 1e-6)).abs() < 1e-9);
            let shifted = inclination_angle(
                Vec2::new(top.x + tx, top.y + ty),
                Vec2::new(bottom.x + tx, bottom.y + ty),
                1e-6,
            );
            prop_assert!((got - shifted).abs() < 1e-9);
            let wider = inclination_angle(Vec2::new(x1 - 1e-3, y1), bottom, 1e-6);
            prop_assert!(wider >= got);
        }
    }
}
