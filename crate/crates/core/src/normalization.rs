//! Sequence normalizations that control how much height and screen-position
//! information survives into the model input.
//!
//! Three families:
//!
//! * keep height and position: frame scale, learned batch norm, global
//!   average skeleton, global per-coordinate standardization;
//! * remove screen position: skeleton-level and sequence-level translation
//!   to the pelvis;
//! * remove height: skeleton-level and sequence-level scaling by skeleton
//!   height.
//!
//! Schemes compose left to right. Translation and scaling do not commute
//! (scaling moves the pelvis), so `skeleton-translate,skeleton-scale` and
//! `skeleton-scale,skeleton-translate` are different transforms.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::pose::{height, pelvis, FrameGeometry, GaitSequence, NUM_JOINTS};
use crate::{Error, Result};

/// Smallest height accepted as a divisor.
pub const MIN_HEIGHT: f64 = 1e-6;
/// Per-coordinate standard deviations are clamped below at this value.
pub const STD_FLOOR: f64 = 1e-6;

/// Training-set constants for the global normalizations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub mean_pelvis: [f64; 2],
    pub mean_height: f64,
    pub per_joint_mean: [[f64; 2]; NUM_JOINTS],
    pub per_joint_std: [[f64; 2]; NUM_JOINTS],
    pub frame_width: f64,
    pub fingerprint: String,
}

/// Welford accumulator.
#[derive(Default, Clone, Copy)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    fn population_std(&self) -> f64 {
        (self.m2 / self.n).max(0.0).sqrt()
    }
}

/// Means and population standard deviations over every pose of every
/// training sequence.
pub fn compute_stats(train_set: &[GaitSequence], geom: &FrameGeometry) -> Result<DatasetStats> {
    geom.validate()?;
    let mut pel = [Moments::default(); 2];
    let mut h = Moments::default();
    let mut joints = [[Moments::default(); 2]; NUM_JOINTS];
    for pose in train_set.iter().flat_map(|s| s.poses()) {
        let p = pelvis(pose);
        pel[0].push(p[0]);
        pel[1].push(p[1]);
        h.push(height(pose));
        for (acc, j) in joints.iter_mut().zip(pose.joints()) {
            acc[0].push(j[0]);
            acc[1].push(j[1]);
        }
    }
    if h.n == 0.0 {
        return Err(Error::EmptyDataset);
    }
    if !(h.mean >= MIN_HEIGHT) {
        return Err(Error::DegenerateStats { mean_height: h.mean });
    }
    Ok(DatasetStats {
        mean_pelvis: [pel[0].mean, pel[1].mean],
        mean_height: h.mean,
        per_joint_mean: std::array::from_fn(|i| [joints[i][0].mean, joints[i][1].mean]),
        per_joint_std: std::array::from_fn(|i| [joints[i][0].population_std(), joints[i][1].population_std()]),
        frame_width: geom.width,
        fingerprint: crate::dataset::fingerprint(train_set),
    })
}

impl DatasetStats {
    pub fn validate(&self) -> Result<()> {
        if !(self.mean_height >= MIN_HEIGHT) {
            return Err(Error::DegenerateStats {
                mean_height: self.mean_height,
            });
        }
        if self.per_joint_std.iter().flatten().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("per-joint std must be non-negative".into()));
        }
        Ok(())
    }
}

pub fn frame_scale(seq: &GaitSequence, geom: &FrameGeometry) -> Result<GaitSequence> {
    geom.validate()?;
    let w = geom.width;
    Ok(seq.map_poses(|p| p.map(|_, [x, y]| [x / w, y / w])))
}

pub fn global_average_skeleton(seq: &GaitSequence, stats: &DatasetStats) -> Result<GaitSequence> {
    if !(stats.mean_height >= MIN_HEIGHT) {
        return Err(Error::DegenerateStats {
            mean_height: stats.mean_height,
        });
    }
    let [px, py] = stats.mean_pelvis;
    let h = stats.mean_height;
    Ok(seq.map_poses(|p| p.map(|_, [x, y]| [(x - px) / h, (y - py) / h])))
}

pub fn global_coord_standardize(seq: &GaitSequence, stats: &DatasetStats) -> GaitSequence {
    seq.map_poses(|p| {
        p.map(|i, [x, y]| {
            let [mx, my] = stats.per_joint_mean[i];
            let [sx, sy] = stats.per_joint_std[i];
            [(x - mx) / sx.max(STD_FLOOR), (y - my) / sy.max(STD_FLOOR)]
        })
    })
}

pub fn skeleton_translate(seq: &GaitSequence) -> GaitSequence {
    seq.map_poses(|p| {
        let [px, py] = pelvis(p);
        p.translated(-px, -py)
    })
}

pub fn sequence_translate(seq: &GaitSequence) -> GaitSequence {
    let [px, py] = pelvis(&seq.poses()[seq.middle_index()]);
    seq.map_poses(|p| p.translated(-px, -py))
}

pub fn skeleton_scale(seq: &GaitSequence) -> Result<GaitSequence> {
    let poses = seq
        .poses()
        .iter()
        .enumerate()
        .map(|(frame, p)| {
            let h = height(p);
            if !(h >= MIN_HEIGHT) {
                return Err(Error::DegenerateHeight { frame, height: h });
            }
            Ok(p.scaled(1.0 / h))
        })
        .collect::<Result<Vec<_>>>()?;
    seq.with_poses(poses)
}

pub fn sequence_scale(seq: &GaitSequence) -> Result<GaitSequence> {
    let frame = seq.middle_index();
    let h = height(&seq.poses()[frame]);
    if !(h >= MIN_HEIGHT) {
        return Err(Error::DegenerateHeight { frame, height: h });
    }
    Ok(seq.map_poses(|p| p.scaled(1.0 / h)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormStep {
    None,
    FrameScale,
    /// Learned input normalization; a no-op on data, realized by the model.
    BatchNorm,
    GlobalAverageSkeleton,
    GlobalCoordStandardize,
    SkeletonTranslate,
    SequenceTranslate,
    SkeletonScale,
    SequenceScale,
}

impl NormStep {
    pub const ALL: [NormStep; 9] = [
        NormStep::None,
        NormStep::FrameScale,
        NormStep::BatchNorm,
        NormStep::GlobalAverageSkeleton,
        NormStep::GlobalCoordStandardize,
        NormStep::SkeletonTranslate,
        NormStep::SequenceTranslate,
        NormStep::SkeletonScale,
        NormStep::SequenceScale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NormStep::None => "none",
            NormStep::FrameScale => "frame-scale",
            NormStep::BatchNorm => "batch-norm",
            NormStep::GlobalAverageSkeleton => "global-avg-skeleton",
            NormStep::GlobalCoordStandardize => "global-coord-std",
            NormStep::SkeletonTranslate => "skeleton-translate",
            NormStep::SequenceTranslate => "sequence-translate",
            NormStep::SkeletonScale => "skeleton-scale",
            NormStep::SequenceScale => "sequence-scale",
        }
    }

    pub fn needs_stats(self) -> bool {
        matches!(self, NormStep::GlobalAverageSkeleton | NormStep::GlobalCoordStandardize)
    }
}

impl FromStr for NormStep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        NormStep::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownScheme(s.to_string()))
    }
}

/// A non-empty list of steps applied left to right.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NormScheme(Vec<NormStep>);

impl NormScheme {
    pub fn new(steps: Vec<NormStep>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::UnknownScheme(String::new()));
        }
        Ok(Self(steps))
    }

    pub fn single(step: NormStep) -> Self {
        Self(vec![step])
    }

    pub fn none() -> Self {
        Self::single(NormStep::None)
    }

    pub fn steps(&self) -> &[NormStep] {
        &self.0
    }

    pub fn uses_batchnorm(&self) -> bool {
        self.0.contains(&NormStep::BatchNorm)
    }

    pub fn needs_stats(&self) -> bool {
        self.0.iter().any(|s| s.needs_stats())
    }

    pub fn needs_geometry(&self) -> bool {
        self.0.contains(&NormStep::FrameScale)
    }
}

impl Default for NormScheme {
    fn default() -> Self {
        Self::none()
    }
}

impl fmt::Display for NormScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.0.iter().map(|s| s.name()).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for NormScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let steps = s.split(',').map(str::parse).collect::<Result<Vec<_>>>()?;
        Self::new(steps)
    }
}

impl Serialize for NormScheme {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NormScheme {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Applies `scheme` to one sequence. Frame scale reads the width from
/// `geom`, falling back to the stats' recorded frame width.
pub fn apply(
    scheme: &NormScheme,
    seq: &GaitSequence,
    stats: Option<&DatasetStats>,
    geom: Option<&FrameGeometry>,
) -> Result<GaitSequence> {
    let missing = |needs| Error::MissingContext {
        scheme: scheme.to_string(),
        needs,
    };
    let mut cur = seq.clone();
    for step in scheme.steps() {
        cur = match step {
            NormStep::None | NormStep::BatchNorm => cur,
            NormStep::FrameScale => {
                let g = match (geom, stats) {
                    (Some(g), _) => *g,
                    (None, Some(s)) => FrameGeometry {
                        width: s.frame_width,
                        height: s.frame_width,
                    },
                    (None, None) => return Err(missing("frame geometry")),
                };
                frame_scale(&cur, &g)?
            }
            NormStep::GlobalAverageSkeleton => global_average_skeleton(&cur, stats.ok_or_else(|| missing("dataset stats"))?)?,
            NormStep::GlobalCoordStandardize => global_coord_standardize(&cur, stats.ok_or_else(|| missing("dataset stats"))?),
            NormStep::SkeletonTranslate => skeleton_translate(&cur),
            NormStep::SequenceTranslate => sequence_translate(&cur),
            NormStep::SkeletonScale => skeleton_scale(&cur)?,
            NormStep::SequenceScale => sequence_scale(&cur)?,
        };
    }
    Ok(cur)
}
