//! Skeleton and sequence types, joint layout, and temporal resampling.
//!
//! Joints follow the 18-keypoint COCO/OpenPose order:
//!
//! | idx | joint      | idx | joint   | idx | joint   |
//! |-----|------------|-----|---------|-----|---------|
//! | 0   | nose       | 6   | L-elbow | 12  | L-knee  |
//! | 1   | neck       | 7   | L-wrist | 13  | L-ankle |
//! | 2   | R-shoulder | 8   | R-hip   | 14  | R-eye   |
//! | 3   | R-elbow    | 9   | R-knee  | 15  | L-eye   |
//! | 4   | R-wrist    | 10  | R-ankle | 16  | R-ear   |
//! | 5   | L-shoulder | 11  | L-hip   | 17  | L-ear   |
//!
//! Image coordinates: y grows downwards.

use std::collections::BTreeMap;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const NUM_JOINTS: usize = 18;

pub mod joint {
    pub const NOSE: usize = 0;
    pub const NECK: usize = 1;
    pub const R_SHOULDER: usize = 2;
    pub const R_ELBOW: usize = 3;
    pub const R_WRIST: usize = 4;
    pub const L_SHOULDER: usize = 5;
    pub const L_ELBOW: usize = 6;
    pub const L_WRIST: usize = 7;
    pub const R_HIP: usize = 8;
    pub const R_KNEE: usize = 9;
    pub const R_ANKLE: usize = 10;
    pub const L_HIP: usize = 11;
    pub const L_KNEE: usize = 12;
    pub const L_ANKLE: usize = 13;
    pub const R_EYE: usize = 14;
    pub const L_EYE: usize = 15;
    pub const R_EAR: usize = 16;
    pub const L_EAR: usize = 17;

    pub const NAMES: [&str; super::NUM_JOINTS] = [
        "nose", "neck", "r_shoulder", "r_elbow", "r_wrist", "l_shoulder", "l_elbow", "l_wrist", "r_hip", "r_knee",
        "r_ankle", "l_hip", "l_knee", "l_ankle", "r_eye", "l_eye", "r_ear", "l_ear",
    ];
}

/// One 2D skeleton. Every coordinate is finite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Pose([[f64; 2]; NUM_JOINTS]);

impl Pose {
    pub fn new(joints: [[f64; 2]; NUM_JOINTS]) -> Result<Self> {
        if let Some(joint) = joints.iter().position(|j| !j[0].is_finite() || !j[1].is_finite()) {
            return Err(Error::NonFiniteCoordinate { joint });
        }
        Ok(Self(joints))
    }

    pub fn from_slice(joints: &[[f64; 2]]) -> Result<Self> {
        let arr: [[f64; 2]; NUM_JOINTS] = joints.try_into().map_err(|_| Error::JointCount(joints.len()))?;
        Self::new(arr)
    }

    pub fn joints(&self) -> &[[f64; 2]; NUM_JOINTS] {
        &self.0
    }

    pub fn joint(&self, i: usize) -> [f64; 2] {
        self.0[i]
    }

    /// Row-major `[x0, y0, x1, y1, ...]`.
    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.iter().flat_map(|j| j.iter().copied())
    }

    /// Applies `f` to every joint. Callers must keep coordinates finite.
    pub(crate) fn map(&self, mut f: impl FnMut(usize, [f64; 2]) -> [f64; 2]) -> Pose {
        let mut out = self.0;
        for (i, j) in out.iter_mut().enumerate() {
            *j = f(i, *j);
        }
        Pose(out)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Pose {
        self.map(|_, [x, y]| [x + dx, y + dy])
    }

    pub fn scaled(&self, s: f64) -> Pose {
        self.map(|_, [x, y]| [x * s, y * s])
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let joints = Vec::<[f64; 2]>::deserialize(d)?;
        Pose::from_slice(&joints).map_err(serde::de::Error::custom)
    }
}

/// Bounding-box height: max y minus min y over all joints.
pub fn height(pose: &Pose) -> f64 {
    let (lo, hi) = pose
        .joints()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), j| (lo.min(j[1]), hi.max(j[1])));
    hi - lo
}

/// Hip midpoint; the 18-joint layout has no dedicated pelvis keypoint.
pub fn pelvis(pose: &Pose) -> [f64; 2] {
    let r = pose.joint(joint::R_HIP);
    let l = pose.joint(joint::L_HIP);
    [(r[0] + l[0]) / 2.0, (r[1] + l[1]) / 2.0]
}

/// An ordered walk of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SequenceRecord", into = "SequenceRecord")]
pub struct GaitSequence {
    pub subject_id: String,
    pub sequence_id: String,
    pub tags: BTreeMap<String, String>,
    poses: Vec<Pose>,
}

#[derive(Serialize, Deserialize)]
struct SequenceRecord {
    subject_id: String,
    sequence_id: String,
    #[serde(default)]
    tags: BTreeMap<String, String>,
    frames: Vec<Pose>,
}

impl TryFrom<SequenceRecord> for GaitSequence {
    type Error = Error;

    fn try_from(r: SequenceRecord) -> Result<Self> {
        let mut s = GaitSequence::new(r.subject_id, r.sequence_id, r.frames)?;
        s.tags = r.tags;
        Ok(s)
    }
}

impl From<GaitSequence> for SequenceRecord {
    fn from(s: GaitSequence) -> Self {
        SequenceRecord {
            subject_id: s.subject_id,
            sequence_id: s.sequence_id,
            tags: s.tags,
            frames: s.poses,
        }
    }
}

impl GaitSequence {
    pub fn new(subject_id: impl Into<String>, sequence_id: impl Into<String>, poses: Vec<Pose>) -> Result<Self> {
        if poses.is_empty() {
            return Err(Error::EmptySequence);
        }
        Ok(Self {
            subject_id: subject_id.into(),
            sequence_id: sequence_id.into(),
            tags: BTreeMap::new(),
            poses,
        })
    }

    pub fn with_tag(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.tags.insert(key.into(), value.into());
        self
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Index of the middle frame, `floor(N / 2)`.
    pub fn middle_index(&self) -> usize {
        self.poses.len() / 2
    }

    /// Same metadata, new frames.
    pub fn with_poses(&self, poses: Vec<Pose>) -> Result<Self> {
        if poses.is_empty() {
            return Err(Error::EmptySequence);
        }
        Ok(Self {
            subject_id: self.subject_id.clone(),
            sequence_id: self.sequence_id.clone(),
            tags: self.tags.clone(),
            poses,
        })
    }

    /// Per-frame map; frame order and metadata are preserved.
    pub fn map_poses(&self, f: impl FnMut(&Pose) -> Pose) -> Self {
        Self {
            subject_id: self.subject_id.clone(),
            sequence_id: self.sequence_id.clone(),
            tags: self.tags.clone(),
            poses: self.poses.iter().map(f).collect(),
        }
    }
}

/// Video frame size in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameGeometry {
    pub width: f64,
    pub height: f64,
}

impl FrameGeometry {
    pub fn new(width: f64, height: f64) -> Result<Self> {
        let g = Self { width, height };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width > 0.0 && self.height > 0.0 && self.width.is_finite() && self.height.is_finite() {
            Ok(())
        } else {
            Err(Error::BadGeometry {
                width: self.width,
                height: self.height,
            })
        }
    }
}

pub enum ResampleMode<'a> {
    Interpolate,
    RandomCrop(&'a mut dyn RngCore),
    MiddleCrop,
}

pub fn resample(seq: &GaitSequence, target_len: usize, mode: ResampleMode<'_>) -> Result<GaitSequence> {
    match mode {
        ResampleMode::Interpolate => interpolate(seq, target_len),
        ResampleMode::RandomCrop(rng) => random_crop(seq, target_len, rng),
        ResampleMode::MiddleCrop => middle_crop(seq, target_len),
    }
}

/// Linear interpolation at `target_len` evenly spaced positions over
/// `[0, N-1]`; both endpoints are reproduced exactly. A single-frame target
/// takes the first frame.
pub fn interpolate(seq: &GaitSequence, target_len: usize) -> Result<GaitSequence> {
    if target_len == 0 {
        return Err(Error::EmptyTarget);
    }
    let src = seq.poses();
    let n = src.len();
    if target_len == n {
        return Ok(seq.clone());
    }
    let last = (n - 1) as f64;
    let poses = (0..target_len)
        .map(|i| {
            let t = if target_len == 1 {
                0.0
            } else {
                i as f64 * last / (target_len - 1) as f64
            };
            let lo = (t.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            let frac = t - lo as f64;
            if frac == 0.0 || lo == hi {
                return src[lo];
            }
            let (a, b) = (&src[lo], &src[hi]);
            a.map(|j, [x, y]| {
                let [bx, by] = b.joint(j);
                [x + (bx - x) * frac, y + (by - y) * frac]
            })
        })
        .collect();
    seq.with_poses(poses)
}

fn crop_at(seq: &GaitSequence, start: usize, target_len: usize) -> Result<GaitSequence> {
    seq.with_poses(seq.poses()[start..start + target_len].to_vec())
}

fn check_crop(seq: &GaitSequence, target_len: usize) -> Result<()> {
    if target_len == 0 {
        return Err(Error::EmptyTarget);
    }
    if seq.len() < target_len {
        return Err(Error::SequenceTooShort {
            len: seq.len(),
            target: target_len,
        });
    }
    Ok(())
}

/// Contiguous window with a uniformly drawn start.
pub fn random_crop(seq: &GaitSequence, target_len: usize, rng: &mut dyn RngCore) -> Result<GaitSequence> {
    check_crop(seq, target_len)?;
    let start = rng.random_range(0..=seq.len() - target_len);
    crop_at(seq, start, target_len)
}

/// Contiguous window starting at `floor((N - target_len) / 2)`.
pub fn middle_crop(seq: &GaitSequence, target_len: usize) -> Result<GaitSequence> {
    check_crop(seq, target_len)?;
    crop_at(seq, (seq.len() - target_len) / 2, target_len)
}

/// Brings a sequence to exactly `target_len` frames for evaluation: middle
/// crop when long enough, interpolation otherwise.
pub fn fit_length(seq: &GaitSequence, target_len: usize) -> Result<GaitSequence> {
    if seq.len() >= target_len {
        middle_crop(seq, target_len)
    } else {
        interpolate(seq, target_len)
    }
}

pub const GROUP_LABELS: [&str; 6] = ["left head", "right head", "left arm", "right arm", "left leg", "right leg"];
pub const AREA_LABELS: [&str; 3] = ["head", "upper body", "lower body"];

/// Maps model-input slots to joint indices. Slots `3g..3g+3` form group `g`
/// of [`GROUP_LABELS`]; group pairs (0,1), (2,3), (4,5) form the areas.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct AnatomyMap {
    permutation: [usize; NUM_JOINTS],
}

impl Default for AnatomyMap {
    fn default() -> Self {
        use joint::*;
        Self {
            permutation: [
                L_EYE, L_EAR, NOSE, // left head
                R_EYE, R_EAR, NECK, // right head
                L_SHOULDER, L_ELBOW, L_WRIST, // left arm
                R_SHOULDER, R_ELBOW, R_WRIST, // right arm
                L_HIP, L_KNEE, L_ANKLE, // left leg
                R_HIP, R_KNEE, R_ANKLE, // right leg
            ],
        }
    }
}

impl TryFrom<Vec<usize>> for AnatomyMap {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        let permutation: [usize; NUM_JOINTS] = v
            .as_slice()
            .try_into()
            .map_err(|_| Error::InvalidAnatomyMap(format!("expected 18 entries, got {}", v.len())))?;
        Self::new(permutation)
    }
}

impl From<AnatomyMap> for Vec<usize> {
    fn from(m: AnatomyMap) -> Self {
        m.permutation.to_vec()
    }
}

impl AnatomyMap {
    pub fn new(permutation: [usize; NUM_JOINTS]) -> Result<Self> {
        let mut seen = [false; NUM_JOINTS];
        for &j in &permutation {
            if j >= NUM_JOINTS || seen[j] {
                return Err(Error::InvalidAnatomyMap(format!("{permutation:?} is not a permutation of 0..18")));
            }
            seen[j] = true;
        }
        Ok(Self { permutation })
    }

    pub fn identity() -> Self {
        Self {
            permutation: std::array::from_fn(|i| i),
        }
    }

    pub fn permutation(&self) -> &[usize; NUM_JOINTS] {
        &self.permutation
    }

    /// Slot that receives joint `j`.
    pub fn slot_of(&self, j: usize) -> usize {
        self.permutation.iter().position(|&p| p == j).expect("bijection")
    }

    pub fn inverse(&self) -> AnatomyMap {
        let mut inv = [0; NUM_JOINTS];
        for (slot, &j) in self.permutation.iter().enumerate() {
            inv[j] = slot;
        }
        AnatomyMap { permutation: inv }
    }
}

/// Slot `i` of the result holds joint `map.permutation()[i]`.
pub fn reorder(pose: &Pose, map: &AnatomyMap) -> Pose {
    Pose(std::array::from_fn(|i| pose.0[map.permutation[i]]))
}
