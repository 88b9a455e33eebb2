//! Embedding models.
//!
//! [`SinglePoseEncoder`] is the hierarchical spatial transformer over one
//! skeleton: joints are embedded and attend to each other, then groups of
//! three joints (left/right head, arms, legs) are fused into six limb tokens,
//! pairs of limbs into three body-area tokens (head, upper body, lower body),
//! and the three areas into a single embedding.
//!
//! ```text
//! [18, 2] -proj-> [18, c1] -attn-> -merge 3->1-> [6, c2] -attn->
//!         -merge 2->1-> [3, c3] -attn-> -concat-> [3·c3] -proj-> [c_emb] -> L2
//! ```
//!
//! [`TemporalEncoder`] flattens each frame, adds a learned positional
//! embedding and runs self-attention across frames, ignoring the spatial
//! structure of the skeleton.

use gaitlab_autodiff::layers::{AttentionBlock, BatchNorm2ch, Linear};
use gaitlab_autodiff::{Graph, Mode, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::pose::{reorder, AnatomyMap, GaitSequence, Pose, NUM_JOINTS};
use crate::{Error, Result};

const GROUP: usize = 3;
const LIMBS: usize = NUM_JOINTS / GROUP;
const AREAS: usize = LIMBS / 2;

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeConfig {
    pub c1: usize,
    pub c2: usize,
    pub c3: usize,
    pub c_emb: usize,
    /// Attention heads for the joint, limb and area stages.
    pub n_heads: [usize; 3],
    #[serde(default = "default_true")]
    pub use_residual_ln: bool,
    #[serde(default)]
    pub input_batchnorm: bool,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub anatomy: AnatomyMap,
}

impl Default for SpeConfig {
    fn default() -> Self {
        Self {
            c1: 32,
            c2: 64,
            c3: 128,
            c_emb: 128,
            n_heads: [4; 3],
            use_residual_ln: true,
            input_batchnorm: false,
            dropout: 0.0,
            anatomy: AnatomyMap::default(),
        }
    }
}

impl SpeConfig {
    pub fn validate(&self) -> Result<()> {
        for (w, h) in [self.c1, self.c2, self.c3].into_iter().zip(self.n_heads) {
            if w == 0 || h == 0 || w % h != 0 {
                return Err(Error::Config(format!("width {w} is not divisible by {h} heads")));
            }
        }
        if self.c_emb == 0 {
            return Err(Error::Config("embedding width must be positive".into()));
        }
        check_dropout(self.dropout)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub seq_len: usize,
    pub c_emb: usize,
    #[serde(default = "default_true")]
    pub use_residual_ln: bool,
    #[serde(default)]
    pub input_batchnorm: bool,
    #[serde(default)]
    pub dropout: f64,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            seq_len: 60,
            c_emb: 128,
            use_residual_ln: true,
            input_batchnorm: false,
            dropout: 0.0,
        }
    }
}

impl TemporalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.seq_len == 0 || self.c_emb == 0 {
            return Err(Error::Config("sequence length and embedding width must be positive".into()));
        }
        check_dropout(self.dropout)
    }
}

fn check_dropout(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("dropout {p} outside [0, 1)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelConfig {
    Spe(SpeConfig),
    Temporal(TemporalConfig),
}

impl ModelConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelConfig::Spe(_) => "spe",
            ModelConfig::Temporal(_) => "temporal",
        }
    }

    pub fn input_batchnorm(&self) -> bool {
        match self {
            ModelConfig::Spe(c) => c.input_batchnorm,
            ModelConfig::Temporal(c) => c.input_batchnorm,
        }
    }

    pub fn set_input_batchnorm(&mut self, on: bool) {
        match self {
            ModelConfig::Spe(c) => c.input_batchnorm = on,
            ModelConfig::Temporal(c) => c.input_batchnorm = on,
        }
    }
}

/// How a forward pass treats batch normalization and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Eval,
    /// Batch statistics, and dropout masks drawn from `dropout_seed`.
    Train { dropout_seed: u64 },
}

impl RunMode {
    fn norm_mode(self) -> Mode {
        match self {
            RunMode::Eval => Mode::Eval,
            RunMode::Train { .. } => Mode::Train,
        }
    }
}

/// Inverted dropout with a deterministic mask.
struct Dropout {
    p: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    fn new(p: f64, mode: RunMode) -> Self {
        let rng = match mode {
            RunMode::Train { dropout_seed } if p > 0.0 => Some(ChaCha8Rng::seed_from_u64(dropout_seed)),
            _ => None,
        };
        Self { p, rng }
    }

    fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        let shape = g.shape(x).to_vec();
        let keep = 1.0 / (1.0 - self.p);
        let n = shape.iter().product();
        let mask: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < self.p { 0.0 } else { keep }).collect();
        let m = g.constant(Tensor::new(&shape, mask)?);
        Ok(g.mul(x, m)?)
    }
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Shapes seen by one forward pass, for architecture checks.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ShapeTrace {
    pub stages: Vec<(String, Vec<usize>)>,
}

impl ShapeTrace {
    fn record(&mut self, name: &str, shape: &[usize]) {
        self.stages.push((name.to_string(), shape.to_vec()));
    }

    /// Token counts of the `[batch, tokens, width]` stages, with the final
    /// embedding counted as one token.
    pub fn tokens(&self) -> Vec<usize> {
        self.stages
            .iter()
            .skip(1)
            .filter(|(name, _)| name != "concat")
            .map(|(_, s)| if s.len() == 3 { s[1] } else { 1 })
            .collect()
    }

    /// Width of the last axis at every recorded stage.
    pub fn channels(&self) -> Vec<usize> {
        self.stages
            .iter()
            .filter(|(name, _)| name != "concat")
            .map(|(_, s)| *s.last().unwrap_or(&0))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SinglePoseEncoder {
    pub config: SpeConfig,
    pub store: ParamStore,
    input_bn: Option<BatchNorm2ch>,
    proj: Linear,
    attn1: AttentionBlock,
    merge2: Linear,
    attn2: AttentionBlock,
    merge3: Linear,
    attn3: AttentionBlock,
    head: Linear,
}

impl SinglePoseEncoder {
    pub fn new(config: SpeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let ln = c.use_residual_ln;
        let input_bn = if c.input_batchnorm {
            Some(BatchNorm2ch::new(&mut store, "input_bn")?)
        } else {
            None
        };
        let proj = Linear::new(&mut store, "stage1.proj", 2, c.c1, true, &mut rng)?;
        let attn1 = AttentionBlock::new(&mut store, "stage1.attn", c.c1, c.n_heads[0], ln, &mut rng)?;
        let merge2 = Linear::new(&mut store, "stage2.merge", GROUP * c.c1, c.c2, true, &mut rng)?;
        let attn2 = AttentionBlock::new(&mut store, "stage2.attn", c.c2, c.n_heads[1], ln, &mut rng)?;
        let merge3 = Linear::new(&mut store, "stage3.merge", 2 * c.c2, c.c3, true, &mut rng)?;
        let attn3 = AttentionBlock::new(&mut store, "stage3.attn", c.c3, c.n_heads[2], ln, &mut rng)?;
        let head = Linear::new(&mut store, "head.proj", AREAS * c.c3, c.c_emb, true, &mut rng)?;
        Ok(Self {
            config,
            store,
            input_bn,
            proj,
            attn1,
            merge2,
            attn2,
            merge3,
            attn3,
            head,
        })
    }

    /// `[batch, 18, 2]` input in model slot order.
    pub fn input_tensor(&self, poses: &[Pose]) -> Result<Tensor> {
        let data = poses.iter().flat_map(|p| reorder(p, &self.config.anatomy).flat().collect::<Vec<_>>()).collect();
        Ok(Tensor::new(&[poses.len(), NUM_JOINTS, 2], data)?)
    }

    /// Unit-norm embeddings `[batch, c_emb]`.
    pub fn forward(&self, g: &mut Graph, poses: &[Pose], mode: RunMode) -> Result<Var> {
        self.forward_traced(g, poses, mode, &mut ShapeTrace::default())
    }

    pub fn forward_traced(&self, g: &mut Graph, poses: &[Pose], mode: RunMode, trace: &mut ShapeTrace) -> Result<Var> {
        if poses.is_empty() {
            return Err(gaitlab_autodiff::Error::EmptyBatch.into());
        }
        let b = poses.len();
        let c = &self.config;
        let s = &self.store;
        let mut drop = Dropout::new(c.dropout, mode);
        let mut x = g.constant(self.input_tensor(poses)?);
        trace.record("input", g.shape(x));
        if let Some(bn) = &self.input_bn {
            x = bn.forward(g, s, x, mode.norm_mode())?;
        }

        let x = self.proj.forward(g, s, x)?;
        let x = self.attn1.forward(g, s, x)?;
        let x = drop.apply(g, x)?;
        trace.record("joints", g.shape(x));
        debug_assert_eq!(g.shape(x)[1], NUM_JOINTS);

        // concatenating three consecutive joint tokens is a reshape
        let x = g.reshape(x, &[b, LIMBS, GROUP * c.c1])?;
        let x = self.merge2.forward(g, s, x)?;
        let x = self.attn2.forward(g, s, x)?;
        let x = drop.apply(g, x)?;
        trace.record("limbs", g.shape(x));
        debug_assert_eq!(g.shape(x)[1], LIMBS);

        let x = g.reshape(x, &[b, AREAS, 2 * c.c2])?;
        let x = self.merge3.forward(g, s, x)?;
        let x = self.attn3.forward(g, s, x)?;
        let x = drop.apply(g, x)?;
        trace.record("areas", g.shape(x));
        debug_assert_eq!(g.shape(x)[1], AREAS);

        let x = g.reshape(x, &[b, AREAS * c.c3])?;
        trace.record("concat", g.shape(x));
        let x = self.head.forward(g, s, x)?;
        let x = g.l2_normalize(x)?;
        trace.record("embedding", g.shape(x));
        Ok(x)
    }

    /// Eval-mode embeddings, one row per pose.
    pub fn embed_poses(&self, poses: &[Pose]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let e = self.forward(&mut g, poses, RunMode::Eval)?;
        Ok(rows(g.value(e)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    Mean,
    PerFrame,
}

/// Sequence-level use of the single-pose model: per-frame embeddings, or
/// their mean re-normalized to unit length.
pub fn embed_sequence_with_spe(seq: &GaitSequence, model: &SinglePoseEncoder, pooling: Pooling) -> Result<Vec<Vec<f64>>> {
    let frames = model.embed_poses(seq.poses())?;
    match pooling {
        Pooling::PerFrame => Ok(frames),
        Pooling::Mean => Ok(vec![mean_unit(&frames)?]),
    }
}

fn mean_unit(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let d = rows[0].len();
    let mut m = vec![0.0; d];
    for r in rows {
        m.iter_mut().zip(r).for_each(|(a, b)| *a += b);
    }
    let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm >= 1e-12) {
        return Err(gaitlab_autodiff::Error::DegenerateEmbedding { norm }.into());
    }
    Ok(m.into_iter().map(|v| v / norm).collect())
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.last_dim()).map(<[f64]>::to_vec).collect()
}

#[derive(Debug, Clone)]
pub struct TemporalEncoder {
    pub config: TemporalConfig,
    pub store: ParamStore,
    input_bn: Option<BatchNorm2ch>,
    embed: Linear,
    pub positional: ParamId,
    blocks: Vec<AttentionBlock>,
    head: Linear,
}

impl TemporalEncoder {
    pub fn new(config: TemporalConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let input_bn = if c.input_batchnorm {
            Some(BatchNorm2ch::new(&mut store, "input_bn")?)
        } else {
            None
        };
        let embed = Linear::new(&mut store, "frame.proj", 2 * NUM_JOINTS, c.d_model, true, &mut rng)?;
        let pos: Vec<f64> = (0..c.seq_len * c.d_model).map(|_| rng.random_range(-0.1..0.1)).collect();
        let positional = store.add("frame.positional", Tensor::new(&[c.seq_len, c.d_model], pos)?)?;
        let blocks = (0..c.n_layers)
            .map(|i| AttentionBlock::new(&mut store, &format!("layer{i}.attn"), c.d_model, c.n_heads, c.use_residual_ln, &mut rng))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let head = Linear::new(&mut store, "head.proj", c.d_model, c.c_emb, true, &mut rng)?;
        Ok(Self {
            config,
            store,
            input_bn,
            embed,
            positional,
            blocks,
            head,
        })
    }

    /// `[batch, N, 36]` input, joints in BODY-18 order.
    pub fn input_tensor(&self, seqs: &[GaitSequence]) -> Result<Tensor> {
        let n = self.config.seq_len;
        let mut data = Vec::with_capacity(seqs.len() * n * 2 * NUM_JOINTS);
        for s in seqs {
            if s.len() != n {
                return Err(Error::SequenceLength { expected: n, got: s.len() });
            }
            data.extend(s.poses().iter().flat_map(|p| p.flat()));
        }
        Ok(Tensor::new(&[seqs.len(), n, 2 * NUM_JOINTS], data)?)
    }

    pub fn forward(&self, g: &mut Graph, seqs: &[GaitSequence], mode: RunMode) -> Result<Var> {
        if seqs.is_empty() {
            return Err(gaitlab_autodiff::Error::EmptyBatch.into());
        }
        let (b, n) = (seqs.len(), self.config.seq_len);
        let s = &self.store;
        let mut drop = Dropout::new(self.config.dropout, mode);
        let mut x = g.constant(self.input_tensor(seqs)?);
        if let Some(bn) = &self.input_bn {
            let flat = g.reshape(x, &[b, n * NUM_JOINTS, 2])?;
            let y = bn.forward(g, s, flat, mode.norm_mode())?;
            x = g.reshape(y, &[b, n, 2 * NUM_JOINTS])?;
        }
        let x = self.embed.forward(g, s, x)?;
        let pos = g.param(s, self.positional);
        let mut x = g.add_trailing(x, pos)?;
        for block in &self.blocks {
            x = block.forward(g, s, x)?;
            x = drop.apply(g, x)?;
        }
        let x = g.mean_tokens(x)?;
        let x = self.head.forward(g, s, x)?;
        Ok(g.l2_normalize(x)?)
    }

    pub fn embed_sequences(&self, seqs: &[GaitSequence]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let e = self.forward(&mut g, seqs, RunMode::Eval)?;
        Ok(rows(g.value(e)))
    }
}

/// A training batch in the form the model consumes.
pub enum Batch<'a> {
    Poses(&'a [Pose]),
    Sequences(&'a [GaitSequence]),
}

#[derive(Debug, Clone)]
pub enum Encoder {
    Spe(SinglePoseEncoder),
    Temporal(TemporalEncoder),
}

impl Encoder {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(match config {
            ModelConfig::Spe(c) => Encoder::Spe(SinglePoseEncoder::new(c.clone(), seed)?),
            ModelConfig::Temporal(c) => Encoder::Temporal(TemporalEncoder::new(c.clone(), seed)?),
        })
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            Encoder::Spe(m) => ModelConfig::Spe(m.config.clone()),
            Encoder::Temporal(m) => ModelConfig::Temporal(m.config.clone()),
        }
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            Encoder::Spe(m) => &m.store,
            Encoder::Temporal(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            Encoder::Spe(m) => &mut m.store,
            Encoder::Temporal(m) => &mut m.store,
        }
    }

    pub fn forward(&self, g: &mut Graph, batch: Batch<'_>, mode: RunMode) -> Result<Var> {
        match (self, batch) {
            (Encoder::Spe(m), Batch::Poses(p)) => m.forward(g, p, mode),
            (Encoder::Temporal(m), Batch::Sequences(s)) => m.forward(g, s, mode),
            _ => Err(Error::Config("batch kind does not match the model".into())),
        }
    }

    /// Sequence length the model consumes per sample: 1 for single poses.
    pub fn frames_per_sample(&self) -> usize {
        match self {
            Encoder::Spe(_) => 1,
            Encoder::Temporal(m) => m.config.seq_len,
        }
    }

    /// One unit-norm embedding per (already length-fitted) sequence; the
    /// single-pose model mean-pools its frames.
    pub fn embed_sequences(&self, seqs: &[GaitSequence]) -> Result<Vec<Vec<f64>>> {
        match self {
            Encoder::Spe(m) => seqs
                .iter()
                .map(|s| embed_sequence_with_spe(s, m, Pooling::Mean).map(|mut v| v.remove(0)))
                .collect(),
            Encoder::Temporal(m) => {
                let mut out = Vec::with_capacity(seqs.len());
                for chunk in seqs.chunks(64) {
                    out.extend(m.embed_sequences(chunk)?);
                }
                Ok(out)
            }
        }
    }
}
