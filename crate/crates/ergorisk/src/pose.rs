//! 33-landmark skeleton records: parsing, validation, visibility filtering,
//! pixel rescaling, and serialization.
//!
//! A record is one subject in one frame. Landmarks follow the standard
//! 33-point full-body topology of the upstream pose estimator; slots are
//! explicitly present or absent so downstream geometry can fail loudly
//! instead of silently consuming sentinel coordinates.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of landmark slots per skeleton.
pub const LANDMARK_COUNT: usize = 33;

/// One pose landmark in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    /// Horizontal coordinate in `[0,1]` (or pixels after rescaling).
    pub x: f64,
    /// Vertical coordinate in `[0,1]` (or pixels after rescaling), y-down.
    pub y: f64,
    /// Visibility confidence in `[0,1]`.
    pub v: f64,
}

/// Which coordinate space a skeleton's landmarks currently live in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordSpace {
    /// Coordinates in `[0,1]` relative to the image frame.
    Normalized,
    /// Coordinates multiplied out to pixel units.
    Pixel,
}

/// A single 33-slot pose record.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    /// Opaque sample identifier from the source file.
    pub id: String,
    /// Source image width in pixels.
    pub image_width: u32,
    /// Source image height in pixels.
    pub image_height: u32,
    /// Coordinate space of the landmark values.
    pub space: CoordSpace,
    /// Exactly 33 slots, indexed by the standard topology.
    pub landmarks: [Option<Landmark>; LANDMARK_COUNT],
}

impl Skeleton {
    /// Landmark at `idx`, if present.
    pub fn get(&self, idx: usize) -> Option<Landmark> {
        self.landmarks.get(idx).copied().flatten()
    }

    /// Number of present slots.
    pub fn present_count(&self) -> usize {
        self.landmarks.iter().filter(|l| l.is_some()).count()
    }

    /// Drop every landmark whose visibility is below `threshold`.
    ///
    /// Idempotent: surviving landmarks all satisfy `v >= threshold`, so a
    /// second pass removes nothing.
    pub fn filter_visibility(&self, threshold: f64) -> Skeleton {
        let mut out = self.clone();
        for slot in out.landmarks.iter_mut() {
            if let Some(lm) = slot {
                if lm.v < threshold {
                    *slot = None;
                }
            }
        }
        out
    }

    /// Multiply normalized coordinates out to pixel units.
    ///
    /// Provided for annotation overlays only; angle computation stays in
    /// normalized space (see the geometry module).
    pub fn rescale_to_pixels(&self) -> Result<Skeleton> {
        if self.image_width == 0 || self.image_height == 0 {
            return Err(Error::Value(format!(
                "skeleton {:?}: cannot rescale with zero image dimensions {}x{}",
                self.id, self.image_width, self.image_height
            )));
        }
        let mut out = self.clone();
        for slot in out.landmarks.iter_mut() {
            if let Some(lm) = slot {
                lm.x *= f64::from(self.image_width);
                lm.y *= f64::from(self.image_height);
            }
        }
        out.space = CoordSpace::Pixel;
        Ok(out)
    }
}

/// Named aliases for the landmark indices the geometry code needs.
///
/// Defaults match the 33-point topology emitted by the upstream estimator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LandmarkIndexMap {
    pub nose: usize,
    pub left_ear: usize,
    pub right_ear: usize,
    pub left_shoulder: usize,
    pub right_shoulder: usize,
    pub left_elbow: usize,
    pub right_elbow: usize,
    pub left_wrist: usize,
    pub right_wrist: usize,
    pub left_index: usize,
    pub right_index: usize,
    pub left_hip: usize,
    pub right_hip: usize,
    pub left_knee: usize,
    pub right_knee: usize,
    pub left_ankle: usize,
    pub right_ankle: usize,
}

impl Default for LandmarkIndexMap {
    fn default() -> Self {
        LandmarkIndexMap {
            nose: 0,
            left_ear: 7,
            right_ear: 8,
            left_shoulder: 11,
            right_shoulder: 12,
            left_elbow: 13,
            right_elbow: 14,
            left_wrist: 15,
            right_wrist: 16,
            left_index: 19,
            right_index: 20,
            left_hip: 23,
            right_hip: 24,
            left_knee: 25,
            right_knee: 26,
            left_ankle: 27,
            right_ankle: 28,
        }
    }
}

impl LandmarkIndexMap {
    /// All `(alias, index)` pairs, in declaration order.
    pub fn entries(&self) -> [(&'static str, usize); 17] {
        [
            ("nose", self.nose),
            ("left_ear", self.left_ear),
            ("right_ear", self.right_ear),
            ("left_shoulder", self.left_shoulder),
            ("right_shoulder", self.right_shoulder),
            ("left_elbow", self.left_elbow),
            ("right_elbow", self.right_elbow),
            ("left_wrist", self.left_wrist),
            ("right_wrist", self.right_wrist),
            ("left_index", self.left_index),
            ("right_index", self.right_index),
            ("left_hip", self.left_hip),
            ("right_hip", self.right_hip),
            ("left_knee", self.left_knee),
            ("right_knee", self.right_knee),
            ("left_ankle", self.left_ankle),
            ("right_ankle", self.right_ankle),
        ]
    }

    /// Check that all indices are distinct and within `0..33`.
    pub fn validate(&self) -> Result<()> {
        let mut seen = [false; LANDMARK_COUNT];
        for (name, idx) in self.entries() {
            if idx >= LANDMARK_COUNT {
                return Err(Error::Config(format!(
                    "landmark index map: {name}={idx} out of range 0..{LANDMARK_COUNT}"
                )));
            }
            if seen[idx] {
                return Err(Error::Config(format!(
                    "landmark index map: index {idx} assigned to more than one alias ({name})"
                )));
            }
            seen[idx] = true;
        }
        Ok(())
    }
}

/// On-disk formats for landmark files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    Jsonl,
    Csv,
}

impl InputFormat {
    /// Infer the format from a file extension (`.jsonl`/`.json` or `.csv`).
    pub fn from_path(path: &Path) -> Option<InputFormat> {
        match path.extension()?.to_str()? {
            "jsonl" | "json" => Some(InputFormat::Jsonl),
            "csv" => Some(InputFormat::Csv),
            _ => None,
        }
    }
}

/// Wire form of one JSONL record: `{"id", "w", "h", "lm": [[x,y,v]|null; 33]}`.
#[derive(Serialize, Deserialize)]
struct RawRecord {
    id: String,
    w: u32,
    h: u32,
    lm: Vec<Option<[f64; 3]>>,
}

fn skeleton_from_raw(raw: RawRecord, path: &str, line: usize) -> Result<Skeleton> {
    if raw.lm.len() != LANDMARK_COUNT {
        return Err(Error::Schema(format!(
            "{path}:{line}: expected {LANDMARK_COUNT} landmark slots, got {}",
            raw.lm.len()
        )));
    }
    if raw.w == 0 || raw.h == 0 {
        return Err(Error::Value(format!(
            "{path}:{line}: image dimensions must be positive, got {}x{}",
            raw.w, raw.h
        )));
    }
    let mut landmarks = [None; LANDMARK_COUNT];
    for (i, slot) in raw.lm.into_iter().enumerate() {
        let Some([x, y, v]) = slot else { continue };
        for (field, val) in [("x", x), ("y", y), ("v", v)] {
            if !val.is_finite() {
                return Err(Error::Value(format!(
                    "{path}:{line}: landmark {i} has non-finite {field}"
                )));
            }
            if !(0.0..=1.0).contains(&val) {
                return Err(Error::Value(format!(
                    "{path}:{line}: landmark {i} {field}={val} outside [0,1]"
                )));
            }
        }
        landmarks[i] = Some(Landmark { x, y, v });
    }
    Ok(Skeleton {
        id: raw.id,
        image_width: raw.w,
        image_height: raw.h,
        space: CoordSpace::Normalized,
        landmarks,
    })
}

/// Parse a JSONL landmark stream; `path` labels error messages only.
pub fn parse_jsonl(reader: impl Read, path: &str) -> Result<Vec<Skeleton>> {
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_string(),
            line: lineno,
            msg: e.to_string(),
        })?;
        out.push(skeleton_from_raw(raw, path, lineno)?);
    }
    Ok(out)
}

/// Expected CSV header: `id,w,h,x0,y0,v0,...,x32,y32,v32`.
fn expected_csv_header() -> Vec<String> {
    let mut h = vec!["id".to_string(), "w".to_string(), "h".to_string()];
    for i in 0..LANDMARK_COUNT {
        h.push(format!("x{i}"));
        h.push(format!("y{i}"));
        h.push(format!("v{i}"));
    }
    h
}

/// Parse a CSV landmark table; absent landmarks leave all three cells empty.
pub fn parse_csv(reader: impl Read, path: &str) -> Result<Vec<Skeleton>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Schema(format!("{path}: cannot read CSV header: {e}")))?;
    let expected = expected_csv_header();
    let got: Vec<&str> = header.iter().collect();
    if got != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::Schema(format!(
            "{path}: CSV header mismatch: expected {} columns starting `id,w,h,x0,y0,v0`",
            expected.len()
        )));
    }

    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Schema(format!("{path}: CSV error: {e}")))?;
        let lineno = record
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or(0);
        if record.len() != expected.len() {
            return Err(Error::Schema(format!(
                "{path}:{lineno}: expected {} fields, got {}",
                expected.len(),
                record.len()
            )));
        }
        let parse_num = |field: &str, what: &str| -> Result<f64> {
            field.trim().parse::<f64>().map_err(|_| Error::Parse {
                path: path.to_string(),
                line: lineno,
                msg: format!("cannot parse {what} from {field:?}"),
            })
        };
        let id = record[0].to_string();
        let w = record[1].trim().parse::<u32>().map_err(|_| Error::Parse {
            path: path.to_string(),
            line: lineno,
            msg: format!("cannot parse image width from {:?}", &record[1]),
        })?;
        let h = record[2].trim().parse::<u32>().map_err(|_| Error::Parse {
            path: path.to_string(),
            line: lineno,
            msg: format!("cannot parse image height from {:?}", &record[2]),
        })?;
        let mut lm = Vec::with_capacity(LANDMARK_COUNT);
        for i in 0..LANDMARK_COUNT {
            let cells = [&record[3 + 3 * i], &record[4 + 3 * i], &record[5 + 3 * i]];
            let empties = cells.iter().filter(|c| c.trim().is_empty()).count();
            match empties {
                3 => lm.push(None),
                0 => lm.push(Some([
                    parse_num(cells[0], &format!("x{i}"))?,
                    parse_num(cells[1], &format!("y{i}"))?,
                    parse_num(cells[2], &format!("v{i}"))?,
                ])),
                _ => {
                    return Err(Error::Parse {
                        path: path.to_string(),
                        line: lineno,
                        msg: format!("landmark {i} is partially empty; clear or fill all of x{i},y{i},v{i}"),
                    })
                }
            }
        }
        out.push(skeleton_from_raw(RawRecord { id, w, h, lm }, path, lineno)?);
    }
    Ok(out)
}

/// Parse a landmark file, dispatching on `format`.
///
/// Records come back in file order with no visibility filtering applied.
pub fn parse_landmark_file(path: &Path, format: InputFormat) -> Result<Vec<Skeleton>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let label = path.display().to_string();
    match format {
        InputFormat::Jsonl => parse_jsonl(file, &label),
        InputFormat::Csv => parse_csv(file, &label),
    }
}

/// Serialize skeletons to the JSONL wire format, one record per line.
///
/// Only normalized-space skeletons are serializable; the record schema has no
/// coordinate-space marker, so writing pixel coordinates would corrupt
/// round-trips.
pub fn write_jsonl(mut writer: impl Write, skeletons: &[Skeleton]) -> Result<()> {
    for s in skeletons {
        if s.space != CoordSpace::Normalized {
            return Err(Error::Value(format!(
                "skeleton {:?}: only normalized-space records can be serialized",
                s.id
            )));
        }
        let raw = RawRecord {
            id: s.id.clone(),
            w: s.image_width,
            h: s.image_height,
            lm: s
                .landmarks
                .iter()
                .map(|slot| slot.map(|l| [l.x, l.y, l.v]))
                .collect(),
        };
        // serde_json prints the shortest decimal that round-trips exactly,
        // so re-parsing restores bit-identical coordinates.
        let line = serde_json::to_string(&raw).expect("record serialization cannot fail");
        writer.write_all(line.as_bytes()).map_err(|e| Error::io("<writer>", e))?;
        writer.write_all(b"\n").map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}
