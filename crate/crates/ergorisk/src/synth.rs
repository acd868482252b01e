//! Deterministic generator of paired (stick-figure image, skeleton, risk
//! label) samples. Figures are posed by forward kinematics from target
//! region angles, so the geometry module recovers those angles on the way
//! back and the scoring tables produce a known class — every pipeline
//! stage becomes testable without any external dataset.
//!
//! Angles are drawn band-first: each region picks one of its score bands
//! uniformly, then an angle inside it. That keeps rare band combinations
//! (and therefore rare classes) frequent enough to appear in a few
//! thousand samples.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{GeometryConfig, RegionAngles, SidePair, EDGES};
use crate::pose::{self, CoordSpace, Landmark, LandmarkIndexMap, Skeleton, LANDMARK_COUNT};
use crate::reba::{self, Band, RebaConfig, RebaResult, Region};
use crate::tensor::{ErgRng, Tensor};

fn builtin_cfg() -> &'static RebaConfig {
    static CFG: OnceLock<RebaConfig> = OnceLock::new();
    CFG.get_or_init(RebaConfig::builtin)
}

/// Segment lengths of the kinematic chain, in normalized canvas units.
///
/// The sampling ranges are capped so that a figure rooted anywhere in the
/// sampled root window stays inside the unit square for every reachable
/// pose (worst case: 0.48 above the root, 0.27 below, 0.57 toward the
/// lean side — trunk lean plus a stretched arm — and 0.36 away from it).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentLengths {
    pub trunk: f64,
    pub neck: f64,
    pub nose: f64,
    /// Shoulder and hip half-width share one value so the flank segments
    /// stay parallel to the trunk midline and side angles come out exact.
    pub half_width: f64,
    pub ear_half_width: f64,
    pub upper_arm: f64,
    pub forearm: f64,
    pub hand: f64,
    pub thigh: f64,
    pub shin: f64,
}

impl SegmentLengths {
    fn all(&self) -> [f64; 10] {
        [
            self.trunk,
            self.neck,
            self.nose,
            self.half_width,
            self.ear_half_width,
            self.upper_arm,
            self.forearm,
            self.hand,
            self.thigh,
            self.shin,
        ]
    }
}

impl Default for SegmentLengths {
    fn default() -> Self {
        SegmentLengths {
            trunk: 0.20,
            neck: 0.06,
            nose: 0.025,
            half_width: 0.065,
            ear_half_width: 0.03,
            upper_arm: 0.11,
            forearm: 0.10,
            hand: 0.04,
            thigh: 0.13,
            shin: 0.12,
        }
    }
}

/// Right-minus-left deltas applied to the bilateral base angles.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SideOffsets {
    pub knee: f64,
    pub shoulder: f64,
    pub elbow: f64,
    pub wrist: f64,
}

/// Complete description of one figure: target angles in degrees (left-side
/// base values plus right-side offsets), segment lengths, hip-midpoint
/// root position, and render parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FigureSpec {
    /// Trunk inclination from vertical.
    pub trunk_deg: f64,
    /// Neck flexion relative to the trunk.
    pub neck_deg: f64,
    /// Knee flexion (0 = straight leg), left side.
    pub knee_deg: f64,
    /// Upper-arm raise away from the trunk line, left side.
    pub shoulder_deg: f64,
    /// Elbow interior angle (180 = straight arm), left side.
    pub elbow_deg: f64,
    /// Wrist deviation from straight, left side.
    pub wrist_deg: f64,
    pub offsets: SideOffsets,
    pub lengths: SegmentLengths,
    /// Hip midpoint in normalized coordinates.
    pub root: [f64; 2],
    /// Reference canvas size the stroke width is expressed against.
    pub canvas: usize,
    /// Stroke thickness in pixels at the reference canvas size.
    pub stroke: f64,
}

impl FigureSpec {
    /// Neutral standing pose: everything vertical, arms straight down.
    pub fn upright() -> Self {
        FigureSpec {
            trunk_deg: 0.0,
            neck_deg: 0.0,
            knee_deg: 0.0,
            shoulder_deg: 0.0,
            elbow_deg: 180.0,
            wrist_deg: 0.0,
            offsets: SideOffsets::default(),
            lengths: SegmentLengths::default(),
            root: [0.5, 0.54],
            canvas: 64,
            stroke: 1.5,
        }
    }

    /// The angles the geometry module should recover from the posed figure.
    pub fn target_angles(&self) -> RegionAngles {
        RegionAngles {
            trunk_deg: self.trunk_deg,
            neck_deg: self.neck_deg,
            leg_deg: SidePair {
                left: self.knee_deg,
                right: self.knee_deg + self.offsets.knee,
            },
            upper_arm_deg: SidePair {
                left: self.shoulder_deg,
                right: self.shoulder_deg + self.offsets.shoulder,
            },
            lower_arm_deg: SidePair {
                left: self.elbow_deg,
                right: self.elbow_deg + self.offsets.elbow,
            },
            wrist_deg: SidePair {
                left: self.wrist_deg,
                right: self.wrist_deg + self.offsets.wrist,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (value, name) in self.lengths.all().iter().zip([
            "trunk", "neck", "nose", "half_width", "ear_half_width", "upper_arm", "forearm",
            "hand", "thigh", "shin",
        ]) {
            if !(*value > 0.0) || !value.is_finite() {
                return Err(Error::Value(format!(
                    "segment length {name} must be positive and finite, got {value}"
                )));
            }
        }
        let angles = self.target_angles();
        for a in angles.values() {
            if !a.is_finite() {
                return Err(Error::Value("non-finite target angle".into()));
            }
        }
        if !self.root.iter().all(|c| c.is_finite() && (0.0..=1.0).contains(c)) {
            return Err(Error::Value(format!("root {:?} outside the unit square", self.root)));
        }
        if self.canvas < 16 {
            return Err(Error::Value(format!("canvas size {} too small", self.canvas)));
        }
        if !(self.stroke >= 0.5) {
            return Err(Error::Value(format!("stroke width {} too thin", self.stroke)));
        }
        Ok(())
    }
}

/// Pick one score band uniformly, then an angle uniformly inside it.
/// Bands are first intersected with `[lo_cap, hi_cap)` (the kinematically
/// representable window); empty intersections are skipped.
fn sample_banded(rng: &mut ErgRng, bands: &[Band], lo_cap: f64, hi_cap: f64) -> f64 {
    let feasible: Vec<(f64, f64)> = bands
        .iter()
        .map(|b| (b.lo.max(lo_cap), b.hi.min(hi_cap)))
        .filter(|(lo, hi)| hi - lo > 1e-9)
        .collect();
    let (lo, hi) = feasible[rng.gen_range(0..feasible.len())];
    rng.gen_range(lo..hi)
}

/// Jitter `base` by up to `±delta` without leaving its score band (or the
/// representable window), so the opposite side keeps the same band score.
fn jitter_within_band(
    rng: &mut ErgRng,
    bands: &[Band],
    base: f64,
    delta: f64,
    lo_cap: f64,
    hi_cap: f64,
) -> f64 {
    let band = bands
        .iter()
        .find(|b| base >= b.lo && base < b.hi)
        .expect("base angle was sampled from a band");
    let lo = band.lo.max(lo_cap);
    let hi = (band.hi.min(hi_cap) - 1e-3).max(lo);
    (base + rng.gen_range(-delta..=delta)).clamp(lo, hi)
}

/// Draw a random figure whose region angles cover every score band of the
/// shipped thresholds (band-first sampling; bilateral sides stay in the
/// same band so class coverage is not diluted by side mixing).
pub fn sample_figure(rng: &mut ErgRng) -> FigureSpec {
    let th = &builtin_cfg().thresholds;
    let trunk = sample_banded(rng, th.bands(Region::Trunk), 0.0, 70.0);
    // Keep trunk + neck clearly under 90 degrees so the ear midline stays
    // above the shoulders and the inclination reading stays monotone.
    let neck = sample_banded(rng, th.bands(Region::Neck), 0.0, (88.0 - trunk).min(40.0));
    let knee = sample_banded(rng, th.bands(Region::Legs), 0.0, 90.0);
    let shoulder = sample_banded(rng, th.bands(Region::UpperArm), 0.0, 140.0);
    let elbow = sample_banded(rng, th.bands(Region::LowerArm), 25.0, 180.0);
    let wrist = sample_banded(rng, th.bands(Region::Wrist), 0.0, 50.0);
    let offsets = SideOffsets {
        knee: jitter_within_band(rng, th.bands(Region::Legs), knee, 6.0, 0.0, 90.0) - knee,
        shoulder: jitter_within_band(rng, th.bands(Region::UpperArm), shoulder, 8.0, 0.0, 140.0)
            - shoulder,
        elbow: jitter_within_band(rng, th.bands(Region::LowerArm), elbow, 8.0, 25.0, 180.0)
            - elbow,
        wrist: jitter_within_band(rng, th.bands(Region::Wrist), wrist, 4.0, 0.0, 50.0) - wrist,
    };
    let d = SegmentLengths::default();
    let lengths = SegmentLengths {
        trunk: rng.gen_range(0.16..0.22),
        neck: rng.gen_range(0.05..0.07),
        nose: rng.gen_range(0.02..0.03),
        half_width: rng.gen_range(0.05..0.08),
        ear_half_width: rng.gen_range(0.025..0.04),
        upper_arm: rng.gen_range(0.09..0.12),
        forearm: rng.gen_range(0.08..0.11),
        hand: rng.gen_range(0.035..0.05),
        thigh: rng.gen_range(0.11..0.14),
        shin: rng.gen_range(0.10..0.13),
    };
    debug_assert!(lengths.all().iter().zip(d.all()).all(|(s, d)| (s - d).abs() < 0.1));
    FigureSpec {
        trunk_deg: trunk,
        neck_deg: neck,
        knee_deg: knee,
        shoulder_deg: shoulder,
        elbow_deg: elbow,
        wrist_deg: wrist,
        offsets,
        lengths,
        root: [rng.gen_range(0.37..0.43), rng.gen_range(0.50..0.58)],
        canvas: 64,
        stroke: 1.5,
    }
}

/// Unit vector at `beta` radians from straight-down, rotating toward +x
/// (y axis points down, image convention).
fn from_down(beta: f64) -> (f64, f64) {
    (beta.sin(), beta.cos())
}

/// Pose the figure by forward kinematics and emit the 17 mapped landmarks
/// (visibility 1.0); the other 16 indices stay absent.
pub fn figure_to_skeleton(spec: &FigureSpec) -> Result<Skeleton> {
    spec.validate()?;
    let l = &spec.lengths;
    let map = LandmarkIndexMap::default();
    let [rx, ry] = spec.root;
    let t = spec.trunk_deg.to_radians();

    let shoulder_mid = (rx + l.trunk * t.sin(), ry - l.trunk * t.cos());
    let neck_dir = (spec.trunk_deg + spec.neck_deg).to_radians();
    let ear_mid = (
        shoulder_mid.0 + l.neck * neck_dir.sin(),
        shoulder_mid.1 - l.neck * neck_dir.cos(),
    );
    let nose = (
        ear_mid.0 + l.nose * neck_dir.sin(),
        ear_mid.1 - l.nose * neck_dir.cos(),
    );

    let mut points: Vec<(usize, (f64, f64))> = vec![
        (map.nose, nose),
        (map.left_ear, (ear_mid.0 + l.ear_half_width, ear_mid.1)),
        (map.right_ear, (ear_mid.0 - l.ear_half_width, ear_mid.1)),
        (map.left_shoulder, (shoulder_mid.0 + l.half_width, shoulder_mid.1)),
        (map.right_shoulder, (shoulder_mid.0 - l.half_width, shoulder_mid.1)),
        (map.left_hip, (rx + l.half_width, ry)),
        (map.right_hip, (rx - l.half_width, ry)),
    ];

    let angles = spec.target_angles();
    let sides = [
        (
            1.0,
            angles.upper_arm_deg.left,
            angles.lower_arm_deg.left,
            angles.wrist_deg.left,
            angles.leg_deg.left,
            [map.left_shoulder, map.left_elbow, map.left_wrist, map.left_index],
            [map.left_hip, map.left_knee, map.left_ankle],
        ),
        (
            -1.0,
            angles.upper_arm_deg.right,
            angles.lower_arm_deg.right,
            angles.wrist_deg.right,
            angles.leg_deg.right,
            [map.right_shoulder, map.right_elbow, map.right_wrist, map.right_index],
            [map.right_hip, map.right_knee, map.right_ankle],
        ),
    ];
    for (sign, upper_deg, elbow_deg, wrist_deg, knee_deg, arm_idx, leg_idx) in sides {
        let shoulder = (shoulder_mid.0 + sign * l.half_width, shoulder_mid.1);
        // The same-side hip sits at the same lateral offset, so the
        // shoulder-to-hip direction is exactly the reversed trunk direction
        // and the raise angle below is recovered exactly.
        let beta_arm = -t + upper_deg.to_radians();
        let du = from_down(beta_arm);
        let elbow = (shoulder.0 + l.upper_arm * du.0, shoulder.1 + l.upper_arm * du.1);
        let beta_fore = beta_arm + std::f64::consts::PI - elbow_deg.to_radians();
        let df = from_down(beta_fore);
        let wrist = (elbow.0 + l.forearm * df.0, elbow.1 + l.forearm * df.1);
        let beta_hand = beta_fore + wrist_deg.to_radians();
        let dh = from_down(beta_hand);
        let index = (wrist.0 + l.hand * dh.0, wrist.1 + l.hand * dh.1);
        points.push((arm_idx[1], elbow));
        points.push((arm_idx[2], wrist));
        points.push((arm_idx[3], index));

        let hip = (rx + sign * l.half_width, ry);
        let beta_thigh = sign * 3f64.to_radians();
        let dt = from_down(beta_thigh);
        let knee = (hip.0 + l.thigh * dt.0, hip.1 + l.thigh * dt.1);
        // Shin bends backward; the interior knee angle is 180 - knee_deg
        // either way since the angle reading is unsigned.
        let beta_shin = beta_thigh - knee_deg.to_radians();
        let ds = from_down(beta_shin);
        let ankle = (knee.0 + l.shin * ds.0, knee.1 + l.shin * ds.1);
        points.push((leg_idx[1], knee));
        points.push((leg_idx[2], ankle));
    }

    let mut landmarks = [None; LANDMARK_COUNT];
    for (idx, (x, y)) in points {
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(Error::Value(format!(
                "landmark {idx} at ({x:.4},{y:.4}) falls outside the unit square"
            )));
        }
        landmarks[idx] = Some(Landmark { x, y, v: 1.0 });
    }
    Ok(Skeleton {
        id: String::new(),
        image_width: spec.canvas as u32,
        image_height: spec.canvas as u32,
        space: CoordSpace::Normalized,
        landmarks,
    })
}

/// Skeletal edges to rasterize: the assessment edges plus two nose-ear
/// links so the nose landmark also lies on a stroke.
fn render_edges(map: &LandmarkIndexMap) -> Vec<(usize, usize)> {
    let mut edges: Vec<(usize, usize)> = EDGES.to_vec();
    edges.push((map.nose, map.left_ear));
    edges.push((map.nose, map.right_ear));
    edges
}

fn paint(buf: &mut [f32], size: i64, x: i64, y: i64, radius: i64) {
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let (px, py) = (x + dx, y + dy);
            if (0..size).contains(&px) && (0..size).contains(&py) {
                buf[(py * size + px) as usize] = 0.0;
            }
        }
    }
}

/// Integer line walk (no anti-aliasing) stamping a square brush.
fn draw_line(buf: &mut [f32], size: i64, a: (i64, i64), b: (i64, i64), radius: i64) {
    let (mut x, mut y) = a;
    let dx = (b.0 - a.0).abs();
    let dy = -(b.1 - a.1).abs();
    let sx = if a.0 < b.0 { 1 } else { -1 };
    let sy = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        paint(buf, size, x, y, radius);
        if x == b.0 && y == b.1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Rasterize the figure as black strokes on a white background and
/// replicate the gray channel into `[3, size, size]`. Deterministic: same
/// spec and size give identical pixels.
pub fn render_stick_figure(spec: &FigureSpec, size: usize) -> Result<Tensor<f32>> {
    if size < 16 {
        return Err(Error::Value(format!("render size {size} too small")));
    }
    let skeleton = figure_to_skeleton(spec)?;
    let map = LandmarkIndexMap::default();
    let n = size as i64;
    let mut gray = vec![1.0f32; size * size];
    let radius = ((spec.stroke * size as f64 / spec.canvas as f64) / 2.0).round().max(0.0) as i64;
    let to_px = |l: Landmark| -> (i64, i64) {
        (
            (l.x * (size as f64 - 1.0)).round() as i64,
            (l.y * (size as f64 - 1.0)).round() as i64,
        )
    };
    for (i, j) in render_edges(&map) {
        let (a, b) = match (skeleton.get(i), skeleton.get(j)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Value(format!(
                    "cannot render: segment {i}-{j} endpoint missing"
                )))
            }
        };
        draw_line(&mut gray, n, to_px(a), to_px(b), radius);
    }
    let mut data = Vec::with_capacity(3 * size * size);
    for _ in 0..3 {
        data.extend_from_slice(&gray);
    }
    Ok(Tensor::new(vec![3, size, size], data))
}

/// Write an image tensor `[3, h, w]` with values in `[0,1]` as a binary
/// P6 portable pixmap.
pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    if image.shape().len() != 3 || image.shape()[0] != 3 {
        return Err(Error::Value(format!(
            "expected a [3,h,w] image tensor, got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header = format!("P6\n{w} {h}\n255\n");
    out.write_all(header.as_bytes()).map_err(|e| Error::io(path, e))?;
    let data = image.data();
    let plane = h * w;
    let mut bytes = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            bytes.push((data[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Read a binary P6 portable pixmap into a `[3, h, w]` tensor in `[0,1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    // Header tokens separated by whitespace; '#' starts a comment to EOL.
    let mut next_token = |raw: &[u8]| -> Result<String> {
        loop {
            while pos < raw.len() && raw[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < raw.len() && raw[pos] == b'#' {
                while pos < raw.len() && raw[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Schema(format!("{}: truncated pixmap header", path.display())));
        }
        Ok(String::from_utf8_lossy(&raw[start..pos]).into_owned())
    };
    let magic = next_token(&raw)?;
    if magic != "P6" {
        return Err(Error::Schema(format!(
            "{}: expected P6 pixmap, found {magic:?}",
            path.display()
        )));
    }
    let dims: Vec<usize> = (0..3)
        .map(|_| {
            next_token(&raw)?.parse::<usize>().map_err(|e| {
                Error::Schema(format!("{}: bad pixmap header field: {e}", path.display()))
            })
        })
        .collect::<Result<_>>()?;
    let (w, h, maxval) = (dims[0], dims[1], dims[2]);
    if maxval != 255 {
        return Err(Error::Schema(format!(
            "{}: only maxval 255 supported, got {maxval}",
            path.display()
        )));
    }
    pos += 1; // single whitespace byte after the header
    let plane = w * h;
    if raw.len() < pos + 3 * plane {
        return Err(Error::Schema(format!(
            "{}: pixel data truncated ({} of {} bytes)",
            path.display(),
            raw.len() - pos,
            3 * plane
        )));
    }
    let mut data = vec![0.0f32; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            data[c * plane + p] = raw[pos + 3 * p + c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data))
}

/// One generated sample as recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub id: String,
    /// Image file name relative to the dataset directory.
    pub image: String,
    /// Risk class in 1..=8.
    pub class: u8,
    /// Uncapped assessment score.
    pub reba: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ManifestSummary {
    total: usize,
    histogram: [u64; 8],
}

/// Dataset manifest: per-sample entries plus the class histogram.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub histogram: [u64; 8],
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SKELETON_FILE: &str = "skeletons.jsonl";

/// Generate `n` samples under `out_dir`: one pixmap per sample,
/// `skeletons.jsonl` with the posed landmarks, and `manifest.jsonl` with
/// ids, labels, and the class histogram (summary line last). Output bytes
/// depend only on `(n, seed, size)`.
pub fn gen_dataset(n: usize, seed: u64, size: usize, out_dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let geo = GeometryConfig::default();
    let samples: Vec<(Skeleton, Tensor<f32>, RebaResult)> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<_> {
            let mut rng = ErgRng::seed(seed).stream(1 + i as u64);
            let spec = sample_figure(&mut rng);
            let mut skeleton = figure_to_skeleton(&spec)?;
            skeleton.id = format!("synth-{i:05}");
            skeleton.image_width = size as u32;
            skeleton.image_height = size as u32;
            let result = reba::assess(&skeleton, &geo, builtin_cfg())?;
            let image = render_stick_figure(&spec, size)?;
            Ok((skeleton, image, result))
        })
        .collect::<Result<_>>()?;

    let mut entries = Vec::with_capacity(n);
    let mut histogram = [0u64; 8];
    for (i, (skeleton, image, result)) in samples.iter().enumerate() {
        let image_name = format!("{}.ppm", skeleton.id);
        write_ppm(&out_dir.join(&image_name), image)?;
        histogram[(result.class_label - 1) as usize] += 1;
        entries.push(ManifestEntry {
            index: i,
            id: skeleton.id.clone(),
            image: image_name,
            class: result.class_label,
            reba: result.s_reba,
        });
    }

    let skel_path = out_dir.join(SKELETON_FILE);
    let file = File::create(&skel_path).map_err(|e| Error::io(&skel_path, e))?;
    let skeletons: Vec<Skeleton> = samples.iter().map(|(s, _, _)| s.clone()).collect();
    pose::write_jsonl(BufWriter::new(file), &skeletons)?;

    let manifest_path = out_dir.join(MANIFEST_FILE);
    let file = File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut out = BufWriter::new(file);
    for entry in &entries {
        let line = serde_json::to_string(entry)
            .map_err(|e| Error::Value(format!("manifest serialization failed: {e}")))?;
        writeln!(out, "{line}").map_err(|e| Error::io(&manifest_path, e))?;
    }
    let summary = ManifestSummary { total: n, histogram };
    let line = serde_json::to_string(&summary)
        .map_err(|e| Error::Value(format!("manifest serialization failed: {e}")))?;
    writeln!(out, "{line}").map_err(|e| Error::io(&manifest_path, e))?;
    out.flush().map_err(|e| Error::io(&manifest_path, e))?;

    Ok(Manifest { entries, histogram })
}

/// Parse a manifest written by [`gen_dataset`], checking the summary line
/// against the entries.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    BufReader::new(file)
        .read_to_string(&mut text)
        .map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    let mut summary: Option<ManifestSummary> = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if summary.is_some() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: "content after the summary line".into(),
            });
        }
        if let Ok(entry) = serde_json::from_str::<ManifestEntry>(line) {
            entries.push(entry);
        } else {
            summary = Some(serde_json::from_str::<ManifestSummary>(line).map_err(|e| {
                Error::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    msg: format!("neither a sample entry nor a summary: {e}"),
                }
            })?);
        }
    }
    let summary = summary.ok_or_else(|| Error::Schema(format!(
        "{}: missing summary line",
        path.display()
    )))?;
    if summary.total != entries.len() {
        return Err(Error::Schema(format!(
            "{}: summary says {} samples, found {}",
            path.display(),
            summary.total,
            entries.len()
        )));
    }
    let mut histogram = [0u64; 8];
    for e in &entries {
        if !(1..=8).contains(&e.class) {
            return Err(Error::Schema(format!(
                "{}: entry {} has class {} outside 1..=8",
                path.display(),
                e.id,
                e.class
            )));
        }
        histogram[(e.class - 1) as usize] += 1;
    }
    if histogram != summary.histogram {
        return Err(Error::Schema(format!(
            "{}: histogram {:?} does not match entries {:?}",
            path.display(),
            summary.histogram,
            histogram
        )));
    }
    Ok(Manifest { entries, histogram })
}

/// Load a generated dataset into training samples (labels shifted to
/// `0..8`), in manifest order.
pub fn load_dataset(dir: &Path) -> Result<Vec<crate::train::Sample>> {
    let manifest = read_manifest(&dir.join(MANIFEST_FILE))?;
    let skel_path = dir.join(SKELETON_FILE);
    let file = File::open(&skel_path).map_err(|e| Error::io(&skel_path, e))?;
    let skeletons = pose::parse_jsonl(BufReader::new(file), &skel_path.display().to_string())?;
    let by_id: std::collections::HashMap<&str, &Skeleton> =
        skeletons.iter().map(|s| (s.id.as_str(), s)).collect();
    manifest
        .entries
        .iter()
        .map(|entry| {
            let skeleton = by_id.get(entry.id.as_str()).ok_or_else(|| {
                Error::Schema(format!("{}: no skeleton record for {}", dir.display(), entry.id))
            })?;
            let image = read_ppm(&dir.join(&entry.image))?;
            Ok(crate::train::Sample {
                id: entry.id.clone(),
                image,
                pose: crate::model::pose_input(skeleton),
                label: (entry.class - 1) as usize,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::region_angles;

    #[test]
    fn same_seed_same_figure() {
        let a = sample_figure(&mut ErgRng::seed(9));
        let b = sample_figure(&mut ErgRng::seed(9));
        assert_eq!(a, b);
        let c = sample_figure(&mut ErgRng::seed(10));
        assert_ne!(a, c);
    }

    #[test]
    fn sampled_angles_stay_in_declared_ranges() {
        let mut rng = ErgRng::seed(11);
        for _ in 0..300 {
            let spec = sample_figure(&mut rng);
            let a = spec.target_angles();
            assert!((0.0..70.0).contains(&a.trunk_deg));
            assert!((0.0..40.0).contains(&a.neck_deg));
            assert!(a.trunk_deg + a.neck_deg < 88.0);
            for v in [a.leg_deg.left, a.leg_deg.right] {
                assert!((0.0..=90.0).contains(&v));
            }
            for v in [a.upper_arm_deg.left, a.upper_arm_deg.right] {
                assert!((0.0..=140.0).contains(&v));
            }
            for v in [a.lower_arm_deg.left, a.lower_arm_deg.right] {
                assert!((25.0..=180.0).contains(&v));
            }
            for v in [a.wrist_deg.left, a.wrist_deg.right] {
                assert!((0.0..=50.0).contains(&v));
            }
            spec.validate().unwrap();
        }
    }

    #[test]
    fn ten_thousand_samples_cover_every_class() {
        let geo = GeometryConfig::default();
        let mut seen = [0u32; 8];
        let mut rng = ErgRng::seed(12);
        for _ in 0..10_000 {
            let spec = sample_figure(&mut rng);
            let skeleton = figure_to_skeleton(&spec).unwrap();
            let result = reba::assess(&skeleton, &geo, builtin_cfg()).unwrap();
            seen[(result.class_label - 1) as usize] += 1;
        }
        for (c, count) in seen.iter().enumerate() {
            assert!(*count > 0, "class {} never generated: {seen:?}", c + 1);
        }
    }

    #[test]
    fn upright_figure_reads_as_neutral() {
        let skeleton = figure_to_skeleton(&FigureSpec::upright()).unwrap();
        let a = region_angles(&skeleton, &GeometryConfig::default()).unwrap();
        assert!(a.trunk_deg < 0.5, "trunk {}", a.trunk_deg);
        assert!(a.neck_deg < 0.5);
        // Straight legs: interior knee angle 180, i.e. zero flexion.
        assert!(a.leg_deg.left.abs() < 0.5 && a.leg_deg.right.abs() < 0.5);
        assert!((a.lower_arm_deg.left - 180.0).abs() < 0.5);
    }

    #[test]
    fn geometry_round_trip_recovers_target_angles() {
        let geo = GeometryConfig::default();
        let mut rng = ErgRng::seed(13);
        for _ in 0..60 {
            let spec = sample_figure(&mut rng);
            let skeleton = figure_to_skeleton(&spec).unwrap();
            let got = region_angles(&skeleton, &geo).unwrap();
            let want = spec.target_angles();
            for (g, w) in got.values().iter().zip(want.values()) {
                assert!((g - w).abs() < 1.0, "angle {g} vs target {w}");
            }
        }
    }

    #[test]
    fn landmarks_stay_inside_unit_square() {
        let mut rng = ErgRng::seed(14);
        for _ in 0..300 {
            let skeleton = figure_to_skeleton(&sample_figure(&mut rng)).unwrap();
            assert_eq!(skeleton.present_count(), 17);
            for lm in skeleton.landmarks.iter().flatten() {
                assert!((0.0..=1.0).contains(&lm.x) && (0.0..=1.0).contains(&lm.y));
                assert_eq!(lm.v, 1.0);
            }
        }
    }

    #[test]
    fn rendering_is_deterministic_with_identical_channels() {
        let spec = sample_figure(&mut ErgRng::seed(15));
        let a = render_stick_figure(&spec, 64).unwrap();
        let b = render_stick_figure(&spec, 64).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.shape(), &[3, 64, 64]);
        let plane = 64 * 64;
        for p in 0..plane {
            assert_eq!(a.data()[p], a.data()[plane + p]);
            assert_eq!(a.data()[p], a.data()[2 * plane + p]);
        }
    }

    #[test]
    fn every_segment_leaves_ink() {
        let spec = sample_figure(&mut ErgRng::seed(16));
        let image = render_stick_figure(&spec, 64).unwrap();
        let skeleton = figure_to_skeleton(&spec).unwrap();
        let map = LandmarkIndexMap::default();
        for (i, j) in render_edges(&map) {
            let a = skeleton.get(i).unwrap();
            let b = skeleton.get(j).unwrap();
            let mid = ((a.x + b.x) / 2.0, (a.y + b.y) / 2.0);
            let (px, py) = ((mid.0 * 63.0).round() as usize, (mid.1 * 63.0).round() as usize);
            // Search a small window around the segment midpoint for ink.
            let mut found = false;
            for dy in 0..5 {
                for dx in 0..5 {
                    let (x, y) = (
                        (px + dx).saturating_sub(2).min(63),
                        (py + dy).saturating_sub(2).min(63),
                    );
                    if image.data()[y * 64 + x] < 0.5 {
                        found = true;
                    }
                }
            }
            assert!(found, "segment {i}-{j} left no ink near its midpoint");
        }
    }

    #[test]
    fn degenerate_spec_is_rejected() {
        let mut spec = FigureSpec::upright();
        spec.lengths.forearm = 0.0;
        assert!(figure_to_skeleton(&spec).is_err());
        assert!(render_stick_figure(&spec, 64).is_err());
        let mut spec = FigureSpec::upright();
        spec.root = [1.4, 0.5];
        assert!(figure_to_skeleton(&spec).is_err());
    }

    #[test]
    fn landmarks_lie_on_rendered_strokes() {
        let mut rng = ErgRng::seed(17);
        for _ in 0..20 {
            let spec = sample_figure(&mut rng);
            let image = render_stick_figure(&spec, 64).unwrap();
            let skeleton = figure_to_skeleton(&spec).unwrap();
            for lm in skeleton.landmarks.iter().flatten() {
                let (px, py) = (
                    (lm.x * 63.0).round() as i64,
                    (lm.y * 63.0).round() as i64,
                );
                let mut on_stroke = false;
                for dy in -2i64..=2 {
                    for dx in -2i64..=2 {
                        let (x, y) = (px + dx, py + dy);
                        if (0..64).contains(&x)
                            && (0..64).contains(&y)
                            && image.data()[(y * 64 + x) as usize] < 0.5
                        {
                            on_stroke = true;
                        }
                    }
                }
                assert!(on_stroke, "landmark at ({},{}) is off-stroke", lm.x, lm.y);
            }
        }
    }

    #[test]
    fn ppm_round_trip_preserves_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let spec = sample_figure(&mut ErgRng::seed(18));
        let image = render_stick_figure(&spec, 32).unwrap();
        let path = dir.path().join("img.ppm");
        write_ppm(&path, &image).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.shape(), image.shape());
        assert_eq!(back.data(), image.data());
        assert!(read_ppm(&dir.path().join("missing.ppm")).is_err());
    }

    #[test]
    fn empty_dataset_gets_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = gen_dataset(0, 5, 32, dir.path()).unwrap();
        assert!(manifest.entries.is_empty());
        assert_eq!(manifest.histogram, [0; 8]);
        let back = read_manifest(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(back, manifest);
    }

    #[test]
    fn same_seed_gives_identical_manifest_bytes() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        gen_dataset(12, 77, 32, dir_a.path()).unwrap();
        gen_dataset(12, 77, 32, dir_b.path()).unwrap();
        for name in [MANIFEST_FILE, SKELETON_FILE, "synth-00003.ppm"] {
            let a = std::fs::read(dir_a.path().join(name)).unwrap();
            let b = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between runs");
        }
        let dir_c = tempfile::tempdir().unwrap();
        gen_dataset(12, 78, 32, dir_c.path()).unwrap();
        let a = std::fs::read(dir_a.path().join(MANIFEST_FILE)).unwrap();
        let c = std::fs::read(dir_c.path().join(MANIFEST_FILE)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn manifest_labels_match_reassessment_of_stored_skeletons() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = gen_dataset(16, 21, 32, dir.path()).unwrap();
        let file = File::open(dir.path().join(SKELETON_FILE)).unwrap();
        let skeletons = pose::parse_jsonl(BufReader::new(file), "skeletons.jsonl").unwrap();
        assert_eq!(skeletons.len(), 16);
        let geo = GeometryConfig::default();
        for (entry, skeleton) in manifest.entries.iter().zip(&skeletons) {
            assert_eq!(entry.id, skeleton.id);
            let result = reba::assess(skeleton, &geo, builtin_cfg()).unwrap();
            assert_eq!(result.class_label, entry.class);
            assert_eq!(result.s_reba, entry.reba);
        }
        assert_eq!(manifest.histogram.iter().sum::<u64>(), 16);
    }

    #[test]
    fn load_dataset_produces_training_samples() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = gen_dataset(10, 31, 32, dir.path()).unwrap();
        let samples = load_dataset(dir.path()).unwrap();
        assert_eq!(samples.len(), 10);
        for (sample, entry) in samples.iter().zip(&manifest.entries) {
            assert_eq!(sample.id, entry.id);
            assert_eq!(sample.label, (entry.class - 1) as usize);
            assert_eq!(sample.image.shape(), &[3, 32, 32]);
            assert_eq!(sample.pose.shape(), &[33, 2]);
        }
    }
}
