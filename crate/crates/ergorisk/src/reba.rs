//! Rule-based posture scoring: angle bands to region scores, region scores
//! through the Group A/B/C lookup tables, and the final 8-class risk label.
//!
//! Table values and angle bands are data, not code. The shipped defaults are
//! transcribed from the published assessment protocol; alternative configs
//! load from a single JSON document and are validated for shape, coverage,
//! and value ranges before use. Load/force, coupling, and activity modifiers
//! are fixed at zero throughout, so a posture's label is a pure function of
//! its region angles.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{region_angles, GeometryConfig, RegionAngles, SidePair};
use crate::pose::Skeleton;

/// The six scored body regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Trunk,
    Neck,
    Legs,
    UpperArm,
    LowerArm,
    Wrist,
}

impl Region {
    pub const ALL: [Region; 6] = [
        Region::Trunk,
        Region::Neck,
        Region::Legs,
        Region::UpperArm,
        Region::LowerArm,
        Region::Wrist,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Region::Trunk => "trunk",
            Region::Neck => "neck",
            Region::Legs => "legs",
            Region::UpperArm => "upper_arm",
            Region::LowerArm => "lower_arm",
            Region::Wrist => "wrist",
        }
    }

    /// Score values this region may take.
    pub fn score_domain(self) -> std::ops::RangeInclusive<u8> {
        match self {
            Region::Trunk => 1..=4,
            Region::Neck => 1..=2,
            Region::Legs => 1..=3,
            Region::UpperArm => 1..=4,
            Region::LowerArm => 1..=2,
            Region::Wrist => 1..=2,
        }
    }
}

/// One angle band: scores apply on `[lo, hi)`, except the final band of a
/// region which closes at `hi` so 180° is covered.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub lo: f64,
    pub hi: f64,
    pub score: u8,
}

/// Angle-to-score bands for all six regions.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreThresholds {
    bands: [Vec<Band>; 6],
}

impl ScoreThresholds {
    pub fn bands(&self, region: Region) -> &[Band] {
        &self.bands[Region::ALL.iter().position(|r| *r == region).unwrap()]
    }

    fn validate(&self) -> Result<()> {
        for region in Region::ALL {
            let bands = self.bands(region);
            let name = region.name();
            if bands.is_empty() {
                return Err(Error::Config(format!("{name}: no bands configured")));
            }
            if bands[0].lo != 0.0 {
                return Err(Error::Config(format!(
                    "{name}: first band must start at 0°, starts at {}",
                    bands[0].lo
                )));
            }
            if bands[bands.len() - 1].hi != 180.0 {
                return Err(Error::Config(format!(
                    "{name}: last band must end at 180°, ends at {}",
                    bands[bands.len() - 1].hi
                )));
            }
            for (i, b) in bands.iter().enumerate() {
                if !(b.lo.is_finite() && b.hi.is_finite() && b.lo < b.hi) {
                    return Err(Error::Config(format!(
                        "{name}: band {} has invalid range [{}, {})",
                        i, b.lo, b.hi
                    )));
                }
                if i > 0 && bands[i - 1].hi != b.lo {
                    return Err(Error::Config(format!(
                        "{name}: bands must tile [0,180] without gaps or overlaps; band {} starts at {} but previous ends at {}",
                        i, b.lo, bands[i - 1].hi
                    )));
                }
                if !region.score_domain().contains(&b.score) {
                    return Err(Error::Config(format!(
                        "{name}: band {} score {} outside domain {:?}",
                        i,
                        b.score,
                        region.score_domain()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The three lookup tables, fully populated and range-checked at load time.
///
/// Indexing is 1-based at the API (`group_a(1,1,1)` is the minimum posture)
/// to match how the published tables are written.
#[derive(Debug, Clone, PartialEq)]
pub struct RebaTables {
    /// `[trunk 1..=5][neck 1..=3][legs 1..=4]`, values 1..=9.
    pub table_a: [[[u8; 4]; 3]; 5],
    /// `[upper_arm 1..=6][lower_arm 1..=2][wrist 1..=3]`, values 1..=9.
    pub table_b: [[[u8; 3]; 2]; 6],
    /// `[g_a 1..=12][g_b 1..=12]`, values 1..=12.
    pub table_c: [[u8; 12]; 12],
}

impl RebaTables {
    fn validate(&self) -> Result<()> {
        for (t, row) in self.table_a.iter().enumerate() {
            for (n, cells) in row.iter().enumerate() {
                for (l, &v) in cells.iter().enumerate() {
                    if !(1..=9).contains(&v) {
                        return Err(Error::Config(format!(
                            "table_a[{}][{}][{}]={v} outside 1..=9",
                            t + 1,
                            n + 1,
                            l + 1
                        )));
                    }
                }
            }
        }
        for (u, row) in self.table_b.iter().enumerate() {
            for (lo, cells) in row.iter().enumerate() {
                for (w, &v) in cells.iter().enumerate() {
                    if !(1..=9).contains(&v) {
                        return Err(Error::Config(format!(
                            "table_b[{}][{}][{}]={v} outside 1..=9",
                            u + 1,
                            lo + 1,
                            w + 1
                        )));
                    }
                }
            }
        }
        for (a, row) in self.table_c.iter().enumerate() {
            for (b, &v) in row.iter().enumerate() {
                if !(1..=12).contains(&v) {
                    return Err(Error::Config(format!(
                        "table_c[{}][{}]={v} outside 1..=12",
                        a + 1,
                        b + 1
                    )));
                }
            }
        }
        if self.table_a[0][0][0] != 1 || self.table_b[0][0][0] != 1 || self.table_c[0][0] != 1 {
            return Err(Error::Config(
                "minimum posture must map to score 1 in every table".to_string(),
            ));
        }
        Ok(())
    }
}

/// Combined scoring configuration: the three tables plus the angle bands.
#[derive(Debug, Clone, PartialEq)]
pub struct RebaConfig {
    pub tables: RebaTables,
    pub thresholds: ScoreThresholds,
}

/// Wire form of the JSON config document.
#[derive(Deserialize)]
struct RawConfig {
    table_a: Vec<Vec<Vec<u8>>>,
    table_b: Vec<Vec<Vec<u8>>>,
    table_c: Vec<Vec<u8>>,
    thresholds: BTreeMap<String, Vec<(f64, f64, u8)>>,
}

fn shape_err(what: &str, expected: usize, got: usize) -> Error {
    Error::Config(format!("{what}: expected {expected} entries, got {got}"))
}

fn to_fixed<const N: usize, T: Copy>(what: &str, v: &[T]) -> Result<[T; N]> {
    <[T; N]>::try_from(v).map_err(|_| shape_err(what, N, v.len()))
}

impl RebaConfig {
    /// Parse and validate a JSON config document.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("cannot parse tables config: {e}")))?;

        if raw.table_a.len() != 5 {
            return Err(shape_err("table_a", 5, raw.table_a.len()));
        }
        let mut table_a = [[[0u8; 4]; 3]; 5];
        for (t, row) in raw.table_a.iter().enumerate() {
            if row.len() != 3 {
                return Err(shape_err(&format!("table_a[{}]", t + 1), 3, row.len()));
            }
            for (n, cells) in row.iter().enumerate() {
                table_a[t][n] = to_fixed(&format!("table_a[{}][{}]", t + 1, n + 1), cells)?;
            }
        }
        if raw.table_b.len() != 6 {
            return Err(shape_err("table_b", 6, raw.table_b.len()));
        }
        let mut table_b = [[[0u8; 3]; 2]; 6];
        for (u, row) in raw.table_b.iter().enumerate() {
            if row.len() != 2 {
                return Err(shape_err(&format!("table_b[{}]", u + 1), 2, row.len()));
            }
            for (l, cells) in row.iter().enumerate() {
                table_b[u][l] = to_fixed(&format!("table_b[{}][{}]", u + 1, l + 1), cells)?;
            }
        }
        if raw.table_c.len() != 12 {
            return Err(shape_err("table_c", 12, raw.table_c.len()));
        }
        let mut table_c = [[0u8; 12]; 12];
        for (a, row) in raw.table_c.iter().enumerate() {
            table_c[a] = to_fixed(&format!("table_c[{}]", a + 1), row)?;
        }
        let tables = RebaTables { table_a, table_b, table_c };
        tables.validate()?;

        let mut bands: [Vec<Band>; 6] = Default::default();
        for (i, region) in Region::ALL.iter().enumerate() {
            let raw_bands = raw.thresholds.get(region.name()).ok_or_else(|| {
                Error::Config(format!("thresholds: missing region {:?}", region.name()))
            })?;
            bands[i] = raw_bands
                .iter()
                .map(|&(lo, hi, score)| Band { lo, hi, score })
                .collect();
        }
        if raw.thresholds.len() != 6 {
            let known: Vec<&str> = Region::ALL.iter().map(|r| r.name()).collect();
            let extra: Vec<&String> = raw
                .thresholds
                .keys()
                .filter(|k| !known.contains(&k.as_str()))
                .collect();
            return Err(Error::Config(format!("thresholds: unknown regions {extra:?}")));
        }
        let thresholds = ScoreThresholds { bands };
        thresholds.validate()?;

        Ok(RebaConfig { tables, thresholds })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// The built-in default tables and bands.
    pub fn builtin() -> Self {
        Self::from_json(include_str!("default_tables.json"))
            .expect("embedded default tables are valid")
    }
}

/// Score one region angle against its bands.
pub fn score_region(angle_deg: f64, region: Region, th: &ScoreThresholds) -> Result<u8> {
    if !angle_deg.is_finite() || !(0.0..=180.0).contains(&angle_deg) {
        return Err(Error::Value(format!(
            "{} angle {angle_deg}° outside [0,180]",
            region.name()
        )));
    }
    let bands = th.bands(region);
    for (i, b) in bands.iter().enumerate() {
        let last = i + 1 == bands.len();
        if angle_deg >= b.lo && (angle_deg < b.hi || (last && angle_deg <= b.hi)) {
            return Ok(b.score);
        }
    }
    Err(Error::Config(format!(
        "{}: no band covers {angle_deg}°",
        region.name()
    )))
}

fn check_domain(what: &str, value: u8, max: u8) -> Result<usize> {
    if (1..=max).contains(&value) {
        Ok(usize::from(value) - 1)
    } else {
        Err(Error::Value(format!("{what}={value} outside 1..={max}")))
    }
}

/// Group A lookup over trunk, neck, and legs scores (no load modifier).
pub fn group_a(s_trunk: u8, s_neck: u8, s_leg: u8, t: &RebaTables) -> Result<u8> {
    let ti = check_domain("s_trunk", s_trunk, 5)?;
    let ni = check_domain("s_neck", s_neck, 3)?;
    let li = check_domain("s_leg", s_leg, 4)?;
    Ok(t.table_a[ti][ni][li])
}

/// Group B lookup over upper-arm, lower-arm, and wrist scores (no coupling modifier).
pub fn group_b(s_upper: u8, s_lower: u8, s_wrist: u8, t: &RebaTables) -> Result<u8> {
    let ui = check_domain("s_upper", s_upper, 6)?;
    let li = check_domain("s_lower", s_lower, 2)?;
    let wi = check_domain("s_wrist", s_wrist, 3)?;
    Ok(t.table_b[ui][li][wi])
}

/// Table C lookup combining the group scores (no activity modifier).
pub fn group_c(g_a: u8, g_b: u8, t: &RebaTables) -> Result<u8> {
    let ai = check_domain("g_a", g_a, 12)?;
    let bi = check_domain("g_b", g_b, 12)?;
    Ok(t.table_c[ai][bi])
}

/// Per-region integer scores, in label-record serialization order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionScores {
    pub neck: u8,
    pub trunk: u8,
    pub legs: u8,
    pub upper_arm: u8,
    pub lower_arm: u8,
    pub wrist: u8,
}

/// Full outcome of one posture assessment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RebaResult {
    pub scores: RegionScores,
    pub g_a: u8,
    pub g_b: u8,
    /// Final table score in 1..=12.
    pub s_reba: u8,
    /// Classifier label in 1..=8: the final score clamped at 8.
    pub class_label: u8,
}

/// Score a bilateral region by its worst side.
///
/// Both sides are banded and the higher score wins; on ties the left side
/// is kept. Deciding on scores rather than raw angles matters for regions
/// whose bands are not monotone in the angle (the elbow scores best in a
/// mid-range band).
fn worst_side(pair: SidePair, region: Region, th: &ScoreThresholds) -> Result<u8> {
    let left = score_region(pair.left, region, th)?;
    let right = score_region(pair.right, region, th)?;
    Ok(if right > left { right } else { left })
}

/// Score a full set of region angles.
pub fn assess_angles(angles: &RegionAngles, cfg: &RebaConfig) -> Result<RebaResult> {
    let th = &cfg.thresholds;
    let scores = RegionScores {
        neck: score_region(angles.neck_deg, Region::Neck, th)?,
        trunk: score_region(angles.trunk_deg, Region::Trunk, th)?,
        legs: worst_side(angles.leg_deg, Region::Legs, th)?,
        upper_arm: worst_side(angles.upper_arm_deg, Region::UpperArm, th)?,
        lower_arm: worst_side(angles.lower_arm_deg, Region::LowerArm, th)?,
        wrist: worst_side(angles.wrist_deg, Region::Wrist, th)?,
    };
    let g_a = group_a(scores.trunk, scores.neck, scores.legs, &cfg.tables)?;
    let g_b = group_b(scores.upper_arm, scores.lower_arm, scores.wrist, &cfg.tables)?;
    let s_reba = group_c(g_a, g_b, &cfg.tables)?;
    Ok(RebaResult {
        scores,
        g_a,
        g_b,
        s_reba,
        class_label: s_reba.min(8),
    })
}

/// Assess one skeleton end to end: geometry, banding, table lookups, label.
///
/// Missing-landmark and degenerate-joint failures propagate so callers can
/// reject the sample; nothing is imputed.
pub fn assess(s: &Skeleton, geo: &GeometryConfig, cfg: &RebaConfig) -> Result<RebaResult> {
    let angles = region_angles(s, geo)?;
    assess_angles(&angles, cfg)
}

/// One output line of an annotated dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub id: String,
    pub scores: RegionScores,
    #[serde(rename = "gA")]
    pub g_a: u8,
    #[serde(rename = "gB")]
    pub g_b: u8,
    pub reba: u8,
    pub class: u8,
}

impl LabelRecord {
    pub fn new(id: &str, r: &RebaResult) -> Self {
        LabelRecord {
            id: id.to_string(),
            scores: r.scores,
            g_a: r.g_a,
            g_b: r.g_b,
            reba: r.s_reba,
            class: r.class_label,
        }
    }
}

/// Outcome counts from annotating a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AnnotateSummary {
    pub total: usize,
    pub accepted: usize,
    /// Accepted samples per class label; index 0 is class 1.
    pub class_counts: [usize; 8],
    /// `(id, reason)` for each rejected sample, in input order.
    pub rejects: Vec<(String, String)>,
}

/// Annotate parsed skeletons: filter visibility, assess, and write one JSON
/// label line per accepted sample, in input order.
///
/// Samples failing geometry preconditions are rejected with a reason and do
/// not appear in the output; any other error aborts the run. Assessment runs
/// in parallel, but output order and bytes are deterministic.
pub fn annotate_dataset(
    skeletons: &[Skeleton],
    geo: &GeometryConfig,
    cfg: &RebaConfig,
    vis_threshold: f64,
    mut out: impl Write,
) -> Result<AnnotateSummary> {
    let results: Vec<Result<RebaResult>> = skeletons
        .par_iter()
        .map(|s| assess(&s.filter_visibility(vis_threshold), geo, cfg))
        .collect();

    let mut summary = AnnotateSummary {
        total: skeletons.len(),
        ..AnnotateSummary::default()
    };
    for (s, res) in skeletons.iter().zip(results) {
        match res {
            Ok(r) => {
                let line = serde_json::to_string(&LabelRecord::new(&s.id, &r))
                    .expect("label serialization cannot fail");
                out.write_all(line.as_bytes()).map_err(|e| Error::io("<writer>", e))?;
                out.write_all(b"\n").map_err(|e| Error::io("<writer>", e))?;
                summary.accepted += 1;
                summary.class_counts[usize::from(r.class_label) - 1] += 1;
            }
            Err(e @ (Error::MissingLandmarks { .. } | Error::DegenerateJoint { .. })) => {
                summary.rejects.push((s.id.clone(), e.to_string()));
            }
            Err(other) => return Err(other),
        }
    }
    Ok(summary)
}
