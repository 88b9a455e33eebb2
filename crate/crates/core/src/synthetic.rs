//! Procedural side-view walker with independently controllable identity cues.
//!
//! A canonical skeleton (proportions of total body height, see
//! [`PROPORTIONS`]) is posed per frame: shoulder and elbow angles are
//! sinusoids of the gait phase, and hip and knee angles follow from a
//! sinusoidal ankle path by two-link inverse kinematics. The stance foot
//! stays on a ground line and the pelvis moves forward at a speed tied to
//! stride length and cadence. Each identity owns a
//! [`WalkerIdentity`]; each sequence adds a screen placement and i.i.d.
//! gaussian coordinate noise.
//!
//! Frequencies are whole numbers of cycles per sequence (`c / frames`). A
//! sequence then visits every gait phase equally often regardless of where it
//! starts, so the unordered set of poses carries no trace of frequency or
//! starting phase; only their order does.

use std::collections::BTreeSet;
use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::pose::{joint, FrameGeometry, GaitSequence, Pose, NUM_JOINTS};
use crate::{Error, Result};

/// Segment lengths as fractions of total body height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proportions {
    pub head: f64,
    pub neck: f64,
    pub torso: f64,
    pub upper_arm: f64,
    pub forearm: f64,
    pub thigh: f64,
    pub shin: f64,
}

/// head 0.13, torso 0.30, arm 0.34, leg 0.48; the remaining 0.09 is the neck.
pub const PROPORTIONS: Proportions = Proportions {
    head: 0.13,
    neck: 0.09,
    torso: 0.30,
    upper_arm: 0.18,
    forearm: 0.16,
    thigh: 0.245,
    shin: 0.235,
};

/// Minimum pairwise height ratio between identities in height-only sets.
pub const HEIGHT_STEP: f64 = 1.021;
/// Minimum frequency ratio between distinct frequency levels.
pub const MIN_FREQUENCY_RATIO: f64 = 1.1;
/// Minimum starting-phase separation between identities sharing a frequency.
pub const MIN_PHASE_STEP: f64 = PI / 8.0;
/// Body height of a `height_scale = 1` walker, as a fraction of frame height.
pub const BASE_HEIGHT_FRACTION: f64 = 0.35;

const MAX_PHASES: usize = 16;
// Mixed-mode identities draw their cadence from this many slowest levels.
const MIXED_CADENCE_LEVELS: usize = 2;
const HEIGHT_RANGE: (f64, f64) = (0.5, 2.0);
// Horizontal start jitter of unclustered walks, fraction of frame width.
const CORRIDOR_JITTER: f64 = 0.0025;
// Mean ground line of unclustered walks, fraction of frame height.
const GROUND_LINE: f64 = 0.9;
// Half-width of the depth offset that separates left and right joints.
const DEPTH: f64 = 0.015;

/// Per-segment length multipliers on [`PROPORTIONS`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimbRatios {
    pub head: f64,
    pub torso: f64,
    pub upper_arm: f64,
    pub forearm: f64,
    pub thigh: f64,
    pub shin: f64,
}

impl Default for LimbRatios {
    fn default() -> Self {
        Self {
            head: 1.0,
            torso: 1.0,
            upper_arm: 1.0,
            forearm: 1.0,
            thigh: 1.0,
            shin: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkerIdentity {
    pub subject_id: String,
    pub height_scale: f64,
    pub limb_ratios: LimbRatios,
    /// Cycles per frame.
    pub gait_frequency: f64,
    /// Peak hip flexion, radians.
    pub stride_amplitude: f64,
    /// Gait phase at frame 0 of every sequence, radians.
    pub phase_offset: f64,
    /// Peak shoulder swing, radians.
    pub arm_swing: f64,
    /// Screen-position cluster centre `[x0, ground_y]` in pixels, when the
    /// identity owns one.
    pub position: Option<[f64; 2]>,
}

impl WalkerIdentity {
    pub fn canonical(subject_id: impl Into<String>, gait_frequency: f64) -> Self {
        Self {
            subject_id: subject_id.into(),
            height_scale: 1.0,
            limb_ratios: LimbRatios::default(),
            gait_frequency,
            stride_amplitude: 0.40,
            phase_offset: 0.0,
            arm_swing: 0.45,
            position: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.limb_ratios;
        let ratios = [r.head, r.torso, r.upper_arm, r.forearm, r.thigh, r.shin];
        let ok = self.height_scale > 0.0
            && self.gait_frequency > 0.0
            && self.gait_frequency < 0.5
            && self.stride_amplitude >= 0.0
            && self.arm_swing >= 0.0
            && self.phase_offset.is_finite()
            && ratios.iter().all(|&x| x > 0.0 && x.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid walker identity `{}`", self.subject_id)))
        }
    }

    fn leg_length(&self) -> f64 {
        PROPORTIONS.thigh * self.limb_ratios.thigh + PROPORTIONS.shin * self.limb_ratios.shin
    }

    /// Half the fore-aft ankle excursion relative to the hip, body heights.
    fn half_stride(&self) -> f64 {
        STRIDE_REACH * self.leg_length() * self.stride_amplitude.sin()
    }

    /// Depth of the stance ankle below the hip. The leg reaches
    /// [`LEG_REACH`] of its length at the ends of the stride.
    fn stance_depth(&self) -> f64 {
        let l = LEG_REACH * self.leg_length();
        let s = self.half_stride();
        (l * l - s * s).max(0.0).sqrt()
    }

    /// Forward speed in body heights per frame: the stance ankle sweeps one
    /// full stride backwards every half cycle.
    pub fn speed(&self) -> f64 {
        4.0 * self.half_stride() * self.gait_frequency
    }

    pub fn phase(&self, t: f64) -> f64 {
        TAU * self.gait_frequency * t + self.phase_offset
    }

    /// Right-knee flexion at frame `t`, radians.
    pub fn knee_angle(&self, t: f64) -> f64 {
        leg_angles(self, self.phase(t)).1
    }
}

// Fraction of the hip-amplitude chord used as the ankle excursion.
const STRIDE_REACH: f64 = 0.8;
// Hip-to-ankle distance at the ends of the stride, as a fraction of leg length.
const LEG_REACH: f64 = 0.99;
// Peak swing-foot clearance as a fraction of leg length.
const SWING_LIFT: f64 = 0.15;

/// Ankle position relative to the hip (x forward, y up). The ankle moves
/// fore and aft sinusoidally; it stays at the stance depth while moving
/// back and lifts during the forward swing.
fn ankle_path(id: &WalkerIdentity, phase: f64) -> [f64; 2] {
    let lift = SWING_LIFT * id.leg_length() * phase.cos().max(0.0);
    [id.half_stride() * phase.sin(), -id.stance_depth() + lift]
}

/// Two-link inverse kinematics with the knee in front of the hip-ankle line.
/// Returns (thigh angle from the downward vertical, knee flexion).
fn leg_angles(id: &WalkerIdentity, phase: f64) -> (f64, f64) {
    let t = PROPORTIONS.thigh * id.limb_ratios.thigh;
    let s = PROPORTIONS.shin * id.limb_ratios.shin;
    let [x, y] = ankle_path(id, phase);
    let r = x.hypot(y).clamp((t - s).abs() + 1e-9, t + s - 1e-9);
    let flex = ((t * t + s * s - r * r) / (2.0 * t * s)).clamp(-1.0, 1.0).acos();
    let flex = PI - flex;
    let toward = x.atan2(-y);
    let offset = ((t * t + r * r - s * s) / (2.0 * t * r)).clamp(-1.0, 1.0).acos();
    (toward + offset, flex)
}

/// Where a sequence sits on screen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    /// Pelvis x at frame 0, pixels.
    pub x0: f64,
    /// Ground line y, pixels (image y grows downwards).
    pub ground_y: f64,
    /// Pixels per body height for a `height_scale = 1` walker.
    pub pixels_per_height: f64,
    /// Whether the pelvis advances horizontally; off gives walking in place.
    pub travel: bool,
}

/// Body-frame joints (y up, x forward, pelvis at origin) in units of body
/// height, plus the pelvis height above the ground. One ankle is always at
/// the stance depth, so the pelvis stays level and the skeleton's height is
/// the same at every phase.
fn body_joints(id: &WalkerIdentity, phase: f64) -> ([[f64; 2]; NUM_JOINTS], f64) {
    let r = &id.limb_ratios;
    let p = PROPORTIONS;
    let thigh = p.thigh * r.thigh;
    let shin = p.shin * r.shin;
    let torso = p.torso * r.torso;
    let head = p.head * r.head;
    let upper = p.upper_arm * r.upper_arm;
    let fore = p.forearm * r.forearm;

    let mut j = [[0.0; 2]; NUM_JOINTS];
    let down = |a: f64| [a.sin(), -a.cos()];
    let add = |o: [f64; 2], len: f64, d: [f64; 2]| [o[0] + len * d[0], o[1] + len * d[1]];

    for (hip, knee, ankle, side, ph) in [
        (joint::R_HIP, joint::R_KNEE, joint::R_ANKLE, 1.0, phase),
        (joint::L_HIP, joint::L_KNEE, joint::L_ANKLE, -1.0, phase + PI),
    ] {
        let (hip_angle, flex) = leg_angles(id, ph);
        j[hip] = [side * DEPTH, 0.0];
        j[knee] = add(j[hip], thigh, down(hip_angle));
        j[ankle] = add(j[knee], shin, down(hip_angle - flex));
    }

    let neck = [0.02, torso];
    j[joint::NECK] = neck;
    for (sh, el, wr, side, ph) in [
        (joint::R_SHOULDER, joint::R_ELBOW, joint::R_WRIST, 1.0, phase + PI),
        (joint::L_SHOULDER, joint::L_ELBOW, joint::L_WRIST, -1.0, phase),
    ] {
        let swing = id.arm_swing * ph.sin();
        let bend = 0.15 + 0.5 * id.arm_swing * (1.0 + ph.sin()) / 2.0;
        j[sh] = [neck[0] + side * DEPTH, neck[1] - 0.02];
        j[el] = add(j[sh], upper, down(swing));
        j[wr] = add(j[el], fore, down(swing + bend));
    }

    let skull = [neck[0], neck[1] + p.neck];
    j[joint::NOSE] = [skull[0] + 0.05, skull[1] + 0.35 * head];
    j[joint::R_EYE] = [skull[0] + 0.04 + DEPTH * 0.5, skull[1] + 0.55 * head];
    j[joint::L_EYE] = [skull[0] + 0.04 - DEPTH * 0.5, skull[1] + 0.55 * head];
    j[joint::R_EAR] = [skull[0] - 0.02 + DEPTH, skull[1] + 0.45 * head];
    j[joint::L_EAR] = [skull[0] - 0.02 - DEPTH, skull[1] + 0.45 * head];
    (j, id.stance_depth())
}

/// Noise-free pose of `id` at frame `t`.
pub fn walker_pose(id: &WalkerIdentity, t: f64, place: &Placement) -> Pose {
    let (body, lift) = body_joints(id, id.phase(t));
    let s = place.pixels_per_height * id.height_scale;
    let dx = if place.travel { id.speed() * t } else { 0.0 };
    let joints = body.map(|[x, y]| [place.x0 + s * (x + dx), place.ground_y - s * (y + lift)]);
    Pose::new(joints).expect("walker coordinates are finite")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConfoundMode {
    HeightOnly,
    MotionOnly,
    PositionOnly,
    Mixed,
}

impl ConfoundMode {
    pub fn name(self) -> &'static str {
        match self {
            ConfoundMode::HeightOnly => "height-only",
            ConfoundMode::MotionOnly => "motion-only",
            ConfoundMode::PositionOnly => "position-only",
            ConfoundMode::Mixed => "mixed",
        }
    }
}

impl fmt::Display for ConfoundMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConfoundMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            ConfoundMode::HeightOnly,
            ConfoundMode::MotionOnly,
            ConfoundMode::PositionOnly,
            ConfoundMode::Mixed,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown confound mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfoundSpec {
    pub mode: ConfoundMode,
    pub n_identities: usize,
    pub sequences_per_identity: usize,
    pub frames: usize,
    pub geometry: FrameGeometry,
    /// Coordinate noise standard deviation as a fraction of frame width, for a
    /// walker at height scale 1. Taller walkers get proportionally more.
    pub noise_std: f64,
    pub seed: u64,
}

impl ConfoundSpec {
    pub fn new(mode: ConfoundMode, n_identities: usize, sequences_per_identity: usize, frames: usize, seed: u64) -> Self {
        Self {
            mode,
            n_identities,
            sequences_per_identity,
            frames,
            geometry: FrameGeometry {
                width: 640.0,
                height: 480.0,
            },
            noise_std: 0.005,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.n_identities < 2 {
            return Err(Error::Config("at least 2 identities are required".into()));
        }
        if self.sequences_per_identity == 0 || self.frames == 0 {
            return Err(Error::Config("sequences per identity and frames must be positive".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise std must be a non-negative number".into()));
        }
        Ok(())
    }

    fn pixels_per_height(&self) -> f64 {
        BASE_HEIGHT_FRACTION * self.geometry.height
    }

    /// One cycle per 60 frames, rounded to a whole number of cycles.
    fn canonical_frequency(&self) -> f64 {
        ((self.frames as f64 / 60.0).round().max(1.0)) / self.frames as f64
    }
}

/// Separations actually enforced by a generated set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Separations {
    pub min_height_ratio: Option<f64>,
    pub min_frequency_ratio: Option<f64>,
    pub min_phase_step: Option<f64>,
    pub min_position_gap_px: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceInfo {
    pub subject_id: String,
    pub sequence_id: String,
    pub placement: Placement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: ConfoundSpec,
    pub proportions: Proportions,
    pub separations: Separations,
    pub identities: Vec<WalkerIdentity>,
    pub sequences: Vec<SequenceInfo>,
}

/// Integer cycle counts whose consecutive ratios are at least
/// [`MIN_FREQUENCY_RATIO`]: 1, 2, ..., 10, 11.
fn cycle_levels(frames: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    let mut c = 1;
    while 2 * c < frames {
        if out.last().is_none_or(|&prev| c as f64 >= prev as f64 * MIN_FREQUENCY_RATIO - 1e-12) {
            out.push(c);
        }
        c += 1;
    }
    out
}

fn height_ladder(n: usize) -> Result<Vec<f64>> {
    let mid = (n as f64 - 1.0) / 2.0;
    let ladder: Vec<f64> = (0..n).map(|i| HEIGHT_STEP.powf(i as f64 - mid)).collect();
    let (lo, hi) = (ladder[0], ladder[n - 1]);
    if lo < HEIGHT_RANGE.0 || hi > HEIGHT_RANGE.1 {
        return Err(Error::ConfoundInfeasible(format!(
            "{n} heights at {:.1}% spacing span [{lo:.3}, {hi:.3}], outside [{}, {}]",
            (HEIGHT_STEP - 1.0) * 100.0,
            HEIGHT_RANGE.0,
            HEIGHT_RANGE.1
        )));
    }
    Ok(ladder)
}

/// Grid of `[x0, ground_y]` centres with columns spaced wider than one
/// sequence of travel, so clusters stay apart for the whole walk.
fn position_grid(spec: &ConfoundSpec, travel_px: f64, max_body_px: f64) -> Result<(Vec<[f64; 2]>, f64)> {
    let g = spec.geometry;
    let n = spec.n_identities;
    let col_gap = travel_px + 0.05 * g.width;
    let x_lo = 0.05 * g.width;
    let x_hi = 0.95 * g.width - travel_px;
    let cols = (((x_hi - x_lo) / col_gap).floor() as usize + 1).max(1);
    let rows = n.div_ceil(cols);
    let y_lo = max_body_px + 0.02 * g.height;
    let y_hi = 0.98 * g.height;
    let row_gap = if rows > 1 { (y_hi - y_lo) / (rows - 1) as f64 } else { y_hi - y_lo };
    // noise and jitter must stay well below the grid spacing
    let min_gap = row_gap.min(if cols > 1 { col_gap } else { f64::INFINITY });
    if x_hi < x_lo || !(min_gap >= 6.0 * spec.noise_std * g.width) || row_gap < 2.0 {
        return Err(Error::ConfoundInfeasible(format!(
            "{n} position clusters do not fit a {}x{} frame",
            g.width, g.height
        )));
    }
    let centres = (0..n)
        .map(|i| {
            let (r, c) = (i / cols, i % cols);
            [x_lo + c as f64 * col_gap, y_lo + r as f64 * row_gap]
        })
        .collect();
    Ok((centres, min_gap))
}

fn subject_name(i: usize) -> String {
    format!("id{i:03}")
}

fn identities(spec: &ConfoundSpec, rng: &mut ChaCha8Rng) -> Result<(Vec<WalkerIdentity>, Separations)> {
    let n = spec.n_identities;
    let f0 = spec.canonical_frequency();
    let base = |i: usize| WalkerIdentity::canonical(subject_name(i), f0);
    let mut sep = Separations {
        min_height_ratio: None,
        min_frequency_ratio: None,
        min_phase_step: None,
        min_position_gap_px: None,
    };
    let ids = match spec.mode {
        ConfoundMode::HeightOnly => {
            let mut ladder = height_ladder(n)?;
            ladder.shuffle(rng);
            sep.min_height_ratio = Some(HEIGHT_STEP);
            ladder
                .into_iter()
                .enumerate()
                .map(|(i, h)| WalkerIdentity {
                    height_scale: h,
                    ..base(i)
                })
                .collect()
        }
        ConfoundMode::MotionOnly => {
            let levels = cycle_levels(spec.frames);
            let n_freq = (1..=levels.len()).find(|&l| l * MAX_PHASES >= n).ok_or_else(|| {
                Error::ConfoundInfeasible(format!(
                    "{n} identities need more than {} frequency levels x {MAX_PHASES} phases",
                    levels.len()
                ))
            })?;
            let n_phase = n.div_ceil(n_freq);
            let step = TAU / n_phase as f64;
            sep.min_frequency_ratio = Some(if n_freq > 1 {
                levels.windows(2).take(n_freq - 1).map(|w| w[1] as f64 / w[0] as f64).fold(f64::INFINITY, f64::min)
            } else {
                f64::INFINITY
            });
            sep.min_phase_step = Some(step);
            (0..n)
                .map(|i| WalkerIdentity {
                    gait_frequency: levels[i / n_phase] as f64 / spec.frames as f64,
                    phase_offset: (i % n_phase) as f64 * step,
                    ..base(i)
                })
                .collect()
        }
        ConfoundMode::PositionOnly => {
            let probe = base(0);
            let travel = probe.speed() * spec.frames as f64 * spec.pixels_per_height();
            let (centres, gap) = position_grid(spec, travel, spec.pixels_per_height())?;
            sep.min_position_gap_px = Some(gap);
            centres
                .into_iter()
                .enumerate()
                .map(|(i, c)| WalkerIdentity {
                    position: Some(c),
                    ..base(i)
                })
                .collect()
        }
        ConfoundMode::Mixed => {
            let mut ladder = height_ladder(n)?;
            ladder.shuffle(rng);
            let levels = cycle_levels(spec.frames);
            let fast = levels.len().min(MIXED_CADENCE_LEVELS);
            let ids = ladder
                .into_iter()
                .enumerate()
                .map(|(i, h)| {
                    let mut jitter = || rng.random_range(0.95..1.05);
                    let limb_ratios = LimbRatios {
                        head: jitter(),
                        torso: jitter(),
                        upper_arm: jitter(),
                        forearm: jitter(),
                        thigh: jitter(),
                        shin: jitter(),
                    };
                    WalkerIdentity {
                        height_scale: h,
                        limb_ratios,
                        gait_frequency: levels[rng.random_range(0..fast)] as f64 / spec.frames as f64,
                        stride_amplitude: rng.random_range(0.32..0.48),
                        phase_offset: rng.random_range(0.0..TAU),
                        arm_swing: rng.random_range(0.30..0.60),
                        ..base(i)
                    }
                })
                .collect::<Vec<_>>();
            sep.min_height_ratio = Some(HEIGHT_STEP);
            ids
        }
    };
    Ok((ids, sep))
}

fn placement(spec: &ConfoundSpec, id: &WalkerIdentity, rng: &mut ChaCha8Rng) -> Placement {
    let g = spec.geometry;
    let pph = spec.pixels_per_height();
    let body = pph * id.height_scale;
    let travel = id.speed() * spec.frames as f64 * body;
    let (x0, ground_y) = match id.position {
        Some([cx, cy]) => {
            let jitter = Normal::new(0.0, 0.002 * g.width).expect("positive std");
            (cx + jitter.sample(rng), cy + jitter.sample(rng))
        }
        // a fixed camera over a walkway: the walk is centred with a small
        // random shift, and the ground line varies slightly
        None => {
            let centre = (g.width - travel) / 2.0;
            let x0 = centre + rng.random_range(-CORRIDOR_JITTER..CORRIDOR_JITTER) * g.width;
            let ground = (GROUND_LINE + rng.random_range(-0.0025..0.0025)) * g.height;
            (x0, ground.max(body + 1.0))
        }
    };
    Placement {
        x0,
        ground_y,
        pixels_per_height: pph,
        travel: true,
    }
}

/// Generates the dataset and its ground-truth manifest. Each sequence draws
/// from its own RNG stream, so output does not depend on generation order.
pub fn generate(spec: &ConfoundSpec) -> Result<(Vec<GaitSequence>, Manifest)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (ids, separations) = identities(spec, &mut rng)?;
    for id in &ids {
        id.validate()?;
    }
    let mut seqs = Vec::with_capacity(ids.len() * spec.sequences_per_identity);
    let mut infos = Vec::with_capacity(seqs.capacity());
    for (i, id) in ids.iter().enumerate() {
        for k in 0..spec.sequences_per_identity {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(1 + (i * spec.sequences_per_identity + k) as u64);
            let place = placement(spec, id, &mut rng);
            // keypoint error grows with the walker's size on screen
            let noise_std = spec.noise_std * spec.geometry.width * id.height_scale;
            let noise = Normal::new(0.0, noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
            let poses = (0..spec.frames)
                .map(|t| {
                    let clean = walker_pose(id, t as f64, &place);
                    if noise_std == 0.0 {
                        return clean;
                    }
                    let j = clean.joints().map(|[x, y]| [x + noise.sample(&mut rng), y + noise.sample(&mut rng)]);
                    Pose::new(j).expect("finite noise")
                })
                .collect();
            let sequence_id = format!("{}-{k:02}", id.subject_id);
            let seq = GaitSequence::new(id.subject_id.clone(), sequence_id.clone(), poses)?
                .with_tag("confound", spec.mode.name())
                .with_tag("height_scale", format!("{:.4}", id.height_scale));
            seqs.push(seq);
            infos.push(SequenceInfo {
                subject_id: id.subject_id.clone(),
                sequence_id,
                placement: place,
            });
        }
    }
    Ok((
        seqs,
        Manifest {
            spec: spec.clone(),
            proportions: PROPORTIONS,
            separations,
            identities: ids,
            sequences: infos,
        },
    ))
}

/// One row of the covariate report: how many distinct values a cue takes
/// and whether it alone tells every identity apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CueSummary {
    pub cue: String,
    pub distinct_values: usize,
    pub separates_all: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateReport {
    pub mode: ConfoundMode,
    pub identities: Vec<WalkerIdentity>,
    pub cues: Vec<CueSummary>,
}

fn cue_values(id: &WalkerIdentity) -> Vec<(&'static str, String)> {
    let r = &id.limb_ratios;
    let freq = format!("{:.12}", id.gait_frequency);
    let phase = format!("{:.12}", id.phase_offset);
    let amps = format!("{:.12},{:.12}", id.stride_amplitude, id.arm_swing);
    vec![
        ("height_scale", format!("{:.12}", id.height_scale)),
        (
            "limb_ratios",
            format!(
                "{:.12},{:.12},{:.12},{:.12},{:.12},{:.12}",
                r.head, r.torso, r.upper_arm, r.forearm, r.thigh, r.shin
            ),
        ),
        ("motion", format!("{freq}/{phase}/{amps}")),
        ("gait_frequency", freq),
        ("phase_offset", phase),
        ("amplitudes", amps),
        ("position", format!("{:?}", id.position.map(|[x, y]| [(x * 1e6).round(), (y * 1e6).round()]))),
    ]
}

/// Exact parameter table plus, per cue, the number of distinct values and
/// whether the cue alone separates every identity. `motion` is the joint
/// frequency/phase/amplitude tuple.
pub fn describe(manifest: &Manifest) -> CovariateReport {
    let n = manifest.identities.len();
    let rows: Vec<_> = manifest.identities.iter().map(cue_values).collect();
    let width = rows.first().map_or(0, Vec::len);
    let cues = (0..width)
        .map(|c| {
            let distinct: BTreeSet<&str> = rows.iter().map(|r| r[c].1.as_str()).collect();
            CueSummary {
                cue: rows[0][c].0.to_string(),
                distinct_values: distinct.len(),
                separates_all: distinct.len() == n,
            }
        })
        .collect();
    CovariateReport {
        mode: manifest.spec.mode,
        identities: manifest.identities.clone(),
        cues,
    }
}

impl fmt::Display for CovariateReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mode: {}", self.mode)?;
        writeln!(
            f,
            "{:<8} {:>8} {:>10} {:>8} {:>7} {:>6} {:>18}",
            "subject", "height", "freq", "phase", "stride", "arm", "position"
        )?;
        for id in &self.identities {
            let pos = id.position.map_or("-".to_string(), |[x, y]| format!("({x:.1}, {y:.1})"));
            writeln!(
                f,
                "{:<8} {:>8.4} {:>10.5} {:>8.4} {:>7.3} {:>6.3} {:>18}",
                id.subject_id, id.height_scale, id.gait_frequency, id.phase_offset, id.stride_amplitude, id.arm_swing, pos
            )?;
        }
        writeln!(f)?;
        writeln!(f, "{:<16} {:>9} {:>14}", "cue", "distinct", "separates all")?;
        for c in &self.cues {
            writeln!(f, "{:<16} {:>9} {:>14}", c.cue, c.distinct_values, c.separates_all)?;
        }
        Ok(())
    }
}
