//! Triplet-loss metric learning.
//!
//! Every step draws a P×K batch (P identities, K samples each), crops and
//! normalizes each sample, adds gaussian joint noise, embeds the batch and
//! minimizes a triplet loss with AdamW under a triangular cyclical learning
//! rate. All randomness derives from the configured seed: the sampler uses
//! one stream and every sample in every step gets its own derived stream,
//! so results do not depend on how batch assembly is scheduled.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use gaitlab_autodiff::{Graph, ParamStore, Var};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::evaluation::{self, EvalContext};
use crate::models::{Batch, Encoder, RunMode};
use crate::normalization::{self, DatasetStats, NormScheme};
use crate::pose::{interpolate, random_crop, FrameGeometry, GaitSequence, Pose};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mining {
    BatchHard,
    BatchAll,
}

impl fmt::Display for Mining {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mining::BatchHard => "batch-hard",
            Mining::BatchAll => "batch-all",
        })
    }
}

impl FromStr for Mining {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch-hard" => Ok(Mining::BatchHard),
            "batch-all" => Ok(Mining::BatchAll),
            _ => Err(Error::Config(format!("unknown mining strategy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub margin: f64,
    pub mining: Mining,
    /// Identities per batch.
    pub p: usize,
    /// Samples per identity per batch.
    pub k: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub max_lr: f64,
    /// Cyclical learning-rate period, in epochs' worth of steps.
    pub cycle_epochs: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Joint noise std in the units of the normalized input.
    pub noise_sigma: f64,
    /// Frames per model input sequence.
    pub seq_len: usize,
    /// Samples drawn from every training sequence per epoch.
    pub samples_per_sequence: usize,
    /// Held-out rank-1 every this many epochs; 0 disables it.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            mining: Mining::BatchHard,
            p: 8,
            k: 4,
            epochs: 30,
            base_lr: 1e-5,
            max_lr: 1e-3,
            cycle_epochs: 10.0,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            noise_sigma: 0.01,
            seq_len: 60,
            samples_per_sequence: 1,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults with the epoch budget for the model kind: 30 for the
    /// single-pose model, 300 for sequence models.
    pub fn for_model(kind: &str) -> Self {
        Self {
            epochs: if kind == "spe" { 30 } else { 300 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.base_lr >= 0.0 && self.base_lr <= self.max_lr && self.max_lr.is_finite()) {
            return bad("learning rates must satisfy 0 <= base_lr <= max_lr");
        }
        if self.p < 2 || self.k < 2 {
            return bad("batches need p >= 2 identities and k >= 2 samples");
        }
        if !(self.margin > 0.0) {
            return bad("margin must be positive");
        }
        if !(self.cycle_epochs > 0.0) {
            return bad("cycle_epochs must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("betas must lie in [0, 1) and eps must be positive");
        }
        if !(self.noise_sigma >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("noise_sigma and weight_decay must be non-negative");
        }
        if self.seq_len == 0 || self.samples_per_sequence == 0 {
            return bad("seq_len and samples_per_sequence must be positive");
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 17] = [
        "margin",
        "mining",
        "p",
        "k",
        "epochs",
        "base_lr",
        "max_lr",
        "cycle_epochs",
        "weight_decay",
        "beta1",
        "beta2",
        "eps",
        "seed",
        "noise_sigma",
        "seq_len",
        "samples_per_sequence",
        "eval_every",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
        }
        let v = value.trim();
        match key.trim() {
            "margin" => self.margin = num(key, v)?,
            "mining" => self.mining = v.parse()?,
            "p" => self.p = num(key, v)?,
            "k" => self.k = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "base_lr" => self.base_lr = num(key, v)?,
            "max_lr" => self.max_lr = num(key, v)?,
            "cycle_epochs" => self.cycle_epochs = num(key, v)?,
            "weight_decay" => self.weight_decay = num(key, v)?,
            "beta1" => self.beta1 = num(key, v)?,
            "beta2" => self.beta2 = num(key, v)?,
            "eps" => self.eps = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "noise_sigma" => self.noise_sigma = num(key, v)?,
            "seq_len" => self.seq_len = num(key, v)?,
            "samples_per_sequence" => self.samples_per_sequence = num(key, v)?,
            "eval_every" => self.eval_every = num(key, v)?,
            other => return Err(Error::Config(format!("unknown training key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "margin" => self.margin.to_string(),
            "mining" => self.mining.to_string(),
            "p" => self.p.to_string(),
            "k" => self.k.to_string(),
            "epochs" => self.epochs.to_string(),
            "base_lr" => self.base_lr.to_string(),
            "max_lr" => self.max_lr.to_string(),
            "cycle_epochs" => self.cycle_epochs.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "eps" => self.eps.to_string(),
            "seed" => self.seed.to_string(),
            "noise_sigma" => self.noise_sigma.to_string(),
            "seq_len" => self.seq_len.to_string(),
            "samples_per_sequence" => self.samples_per_sequence.to_string(),
            "eval_every" => self.eval_every.to_string(),
            _ => return None,
        })
    }

    /// Flat `key = value` document, one line per field.
    pub fn to_kv(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    /// Applies every `key = value` line of `text` on top of `self`. Blank
    /// lines and `#` comments are skipped.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (pairs_key, value) in parse_kv(text)? {
            self.set(&pairs_key, &value)?;
        }
        Ok(())
    }
}

/// Parses a flat `key = value` document, keeping line order.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Triangular cyclical learning rate: `base_lr` at step 0, `max_lr` half a
/// cycle later, back to `base_lr` after a full cycle.
pub fn cyclical_lr(step: usize, base_lr: f64, max_lr: f64, cycle_len: usize) -> f64 {
    let cycle = cycle_len.max(2) as f64;
    let half = cycle / 2.0;
    let pos = (step as f64) % cycle;
    let frac = if pos <= half { pos / half } else { (cycle - pos) / half };
    base_lr + (max_lr - base_lr) * frac
}

/// Per-anchor choice of batch-hard mining: hardest positive and hardest
/// negative under the given distance matrix. Ties go to the lower index.
pub fn batch_hard_pairs(dist: &[f64], labels: &[usize]) -> Vec<Option<(usize, usize)>> {
    let b = labels.len();
    (0..b)
        .map(|a| {
            let row = &dist[a * b..(a + 1) * b];
            let mut pos: Option<usize> = None;
            let mut neg: Option<usize> = None;
            for j in 0..b {
                if j == a {
                    continue;
                }
                if labels[j] == labels[a] {
                    if pos.is_none_or(|p| row[j] > row[p]) {
                        pos = Some(j);
                    }
                } else if neg.is_none_or(|n| row[j] < row[n]) {
                    neg = Some(j);
                }
            }
            pos.zip(neg)
        })
        .collect()
}

/// Loss value plus the number of anchors or triplets it averages over.
pub struct TripletOutput {
    pub loss: Var,
    pub active: usize,
}

/// Triplet loss on unit-norm embeddings `[b, d]` with squared Euclidean
/// distances. Batch-hard averages the hinge over anchors that have both a
/// positive and a negative; batch-all averages over the triplets whose hinge
/// is nonzero (at least one).
pub fn triplet_loss(g: &mut Graph, emb: Var, labels: &[usize], margin: f64, mining: Mining) -> Result<TripletOutput> {
    let b = labels.len();
    if g.shape(emb).first() != Some(&b) {
        return Err(Error::Config("label count does not match the batch".into()));
    }
    let dist = g.pairwise_sq_dist(emb)?;
    let d = g.value(dist).data().to_vec();
    let (ap, an): (Vec<usize>, Vec<usize>) = match mining {
        Mining::BatchHard => batch_hard_pairs(&d, labels)
            .into_iter()
            .enumerate()
            .filter_map(|(a, pn)| pn.map(|(p, n)| (a * b + p, a * b + n)))
            .unzip(),
        Mining::BatchAll => {
            let mut pairs = Vec::new();
            for a in 0..b {
                for p in (0..b).filter(|&p| p != a && labels[p] == labels[a]) {
                    for n in (0..b).filter(|&n| labels[n] != labels[a]) {
                        pairs.push((a * b + p, a * b + n));
                    }
                }
            }
            pairs.into_iter().unzip()
        }
    };
    if ap.is_empty() {
        return Err(Error::NoValidTriplets);
    }
    let dp = g.gather(dist, &ap)?;
    let dn = g.gather(dist, &an)?;
    let diff = g.sub(dp, dn)?;
    let hinge = g.add_scalar(diff, margin);
    let hinge = g.relu(hinge);
    let (loss, active) = match mining {
        Mining::BatchHard => (g.mean(hinge), ap.len()),
        Mining::BatchAll => {
            let nonzero = g.value(hinge).data().iter().filter(|&&h| h > 0.0).count();
            let total = g.sum(hinge);
            (g.scale(total, 1.0 / nonzero.max(1) as f64), nonzero)
        }
    };
    Ok(TripletOutput { loss, active })
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.params().iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn from_config(store: &ParamStore, cfg: &TrainConfig) -> Self {
        Self::new(store, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    }

    /// `θ ← θ − lr·(m̂/(√v̂ + eps) + weight_decay·θ)` with bias-corrected
    /// moments. Rejects non-finite gradients before touching any state.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if let Some(p) = store.params().iter().find(|p| p.grad.iter().any(|g| !g.is_finite())) {
            return Err(Error::NonFiniteGradient { name: p.name.clone() });
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in store.params_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let theta = p.value.data_mut();
            for i in 0..theta.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                theta[i] -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * theta[i]);
            }
        }
        Ok(())
    }
}

/// Random crop to `target_len` (interpolation when the sequence is shorter),
/// then i.i.d. gaussian noise on every coordinate.
pub fn augment(seq: &GaitSequence, rng: &mut dyn RngCore, noise_sigma: f64, target_len: usize) -> Result<GaitSequence> {
    let cropped = crop_or_stretch(seq, target_len, rng)?;
    add_noise(&cropped, noise_sigma, rng)
}

pub fn crop_or_stretch(seq: &GaitSequence, target_len: usize, rng: &mut dyn RngCore) -> Result<GaitSequence> {
    if seq.len() >= target_len {
        random_crop(seq, target_len, rng)
    } else {
        interpolate(seq, target_len)
    }
}

pub fn add_noise(seq: &GaitSequence, sigma: f64, rng: &mut dyn RngCore) -> Result<GaitSequence> {
    if sigma == 0.0 {
        return Ok(seq.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let poses = seq
        .poses()
        .iter()
        .map(|p| Pose::new(p.joints().map(|[x, y]| [x + normal.sample(rng), y + normal.sample(rng)])))
        .collect::<Result<Vec<_>>>()?;
    seq.with_poses(poses)
}

/// Draws P×K batches of sample indices. Each identity's samples are shuffled
/// and cut into chunks of K; chunks are shuffled and packed P at a time with
/// distinct identities. Identities therefore appear in proportion to how many
/// samples they have.
#[derive(Debug, Clone)]
pub struct PkSampler {
    by_identity: Vec<Vec<usize>>,
    p: usize,
    k: usize,
}

impl PkSampler {
    /// `labels[i]` is the identity of sample `i`.
    pub fn new(labels: &[usize], p: usize, k: usize) -> Result<Self> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            groups.entry(l).or_default().push(i);
        }
        let by_identity: Vec<Vec<usize>> = groups.into_values().filter(|v| v.len() >= k).collect();
        if by_identity.len() < p || p < 2 || k < 2 {
            return Err(Error::InsufficientIdentities {
                needed: p.max(2),
                min_samples: k,
                available: by_identity.len(),
            });
        }
        Ok(Self { by_identity, p, k })
    }

    pub fn epoch(&self, rng: &mut dyn RngCore) -> Vec<Vec<usize>> {
        let mut chunks: Vec<(usize, Vec<usize>)> = Vec::new();
        for (id, samples) in self.by_identity.iter().enumerate() {
            let mut s = samples.clone();
            s.shuffle(rng);
            for c in s.chunks_exact(self.k) {
                chunks.push((id, c.to_vec()));
            }
        }
        chunks.shuffle(rng);
        let mut batches = Vec::new();
        let mut pending: Vec<(usize, Vec<usize>)> = Vec::new();
        let mut queue = chunks.into_iter();
        loop {
            let mut batch: Vec<(usize, Vec<usize>)> = Vec::with_capacity(self.p);
            let mut deferred = Vec::new();
            for c in pending.drain(..).chain(queue.by_ref()) {
                if batch.iter().any(|(id, _)| *id == c.0) {
                    deferred.push(c);
                } else {
                    batch.push(c);
                    if batch.len() == self.p {
                        break;
                    }
                }
            }
            pending = deferred;
            if batch.len() < self.p {
                break;
            }
            batches.push(batch.into_iter().flat_map(|(_, s)| s).collect());
        }
        batches
    }
}

/// splitmix64 over the combined inputs; gives independent per-sample seeds.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Normalization inputs shared by training and evaluation.
#[derive(Debug, Clone, Default)]
pub struct NormContext {
    pub scheme: NormScheme,
    pub stats: Option<DatasetStats>,
    pub geometry: Option<FrameGeometry>,
}

impl NormContext {
    pub fn apply(&self, seq: &GaitSequence) -> Result<GaitSequence> {
        normalization::apply(&self.scheme, seq, self.stats.as_ref(), self.geometry.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub rank1_heldout: Option<f64>,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from("step,epoch,lr,loss,rank1_heldout\n");
    for r in rows {
        let rank1 = r.rank1_heldout.map_or(String::new(), |v| v.to_string());
        s.push_str(&format!("{},{},{},{},{}\n", r.step, r.epoch, r.lr, r.loss, rank1));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub metrics: Vec<MetricsRow>,
    /// Mean loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub optimizer: AdamW,
    pub steps: usize,
}

/// Held-out split for periodic rank-1 monitoring.
pub struct Heldout<'a> {
    pub gallery: &'a [GaitSequence],
    pub probe: &'a [GaitSequence],
}

fn subject_labels(seqs: &[GaitSequence]) -> Vec<usize> {
    let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
    for s in seqs {
        let next = ids.len();
        ids.entry(s.subject_id.as_str()).or_insert(next);
    }
    seqs.iter().map(|s| ids[s.subject_id.as_str()]).collect()
}

/// Builds the model input for one sample: crop, normalize, noise, and for
/// the single-pose model a random frame of the normalized window.
fn prepare_sample(
    seq: &GaitSequence,
    model: &Encoder,
    ctx: &NormContext,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GaitSequence> {
    let window = crop_or_stretch(seq, cfg.seq_len, rng)?;
    let normed = ctx.apply(&window)?;
    let picked = if model.frames_per_sample() == 1 {
        let i = rng.random_range(0..normed.len());
        normed.with_poses(vec![normed.poses()[i]])?
    } else {
        normed
    };
    add_noise(&picked, cfg.noise_sigma, rng)
}

/// Runs the epoch loop, mutating `model` in place. `on_row` sees every
/// metrics row as it is produced.
pub fn train(
    model: &mut Encoder,
    train_set: &[GaitSequence],
    ctx: &NormContext,
    cfg: &TrainConfig,
    heldout: Option<Heldout<'_>>,
    on_row: &mut dyn FnMut(&MetricsRow),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Encoder::Temporal(m) = model {
        if m.config.seq_len != cfg.seq_len {
            return Err(Error::SequenceLength {
                expected: m.config.seq_len,
                got: cfg.seq_len,
            });
        }
    }
    let seq_labels = subject_labels(train_set);
    // sample i draws from sequence i / samples_per_sequence
    let spp = cfg.samples_per_sequence;
    let labels: Vec<usize> = seq_labels.iter().flat_map(|&l| std::iter::repeat_n(l, spp)).collect();
    let sampler = PkSampler::new(&labels, cfg.p, cfg.k)?;
    let mut sampler_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5A3D, 0));
    let mut opt = AdamW::from_config(model.store(), cfg);

    let mut metrics = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut step = 0usize;
    let mut cycle_len = None;
    for epoch in 0..cfg.epochs {
        let batches = sampler.epoch(&mut sampler_rng);
        let cycle = *cycle_len.get_or_insert_with(|| ((batches.len() as f64 * cfg.cycle_epochs).round() as usize).max(2));
        let mut sum = 0.0;
        for batch in &batches {
            let mut inputs = Vec::with_capacity(batch.len());
            for (j, &sample) in batch.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, step as u64 + 1, j as u64));
                inputs.push(prepare_sample(&train_set[sample / spp], model, ctx, cfg, &mut rng)?);
            }
            let batch_labels: Vec<usize> = batch.iter().map(|&s| labels[s]).collect();
            let lr = cyclical_lr(step, cfg.base_lr, cfg.max_lr, cycle);
            let loss = train_step(model, &mut opt, &inputs, &batch_labels, cfg, lr, derive_seed(cfg.seed, step as u64 + 1, u64::MAX))?;
            sum += loss;
            let row = MetricsRow {
                step,
                epoch,
                lr,
                loss,
                rank1_heldout: None,
            };
            on_row(&row);
            metrics.push(row);
            step += 1;
        }
        epoch_losses.push(if batches.is_empty() { 0.0 } else { sum / batches.len() as f64 });
        if let Some(h) = &heldout {
            if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 {
                let eval = EvalContext {
                    norm: ctx.clone(),
                    seq_len: cfg.seq_len,
                };
                let rank1 = evaluation::evaluate(model, h.gallery, h.probe, &eval)?.rank1;
                if let Some(last) = metrics.last_mut() {
                    last.rank1_heldout = Some(rank1);
                    on_row(last);
                }
            }
        }
    }
    Ok(TrainReport {
        metrics,
        epoch_losses,
        optimizer: opt,
        steps: step,
    })
}

/// One optimization step; returns the loss value.
pub fn train_step(
    model: &mut Encoder,
    opt: &mut AdamW,
    inputs: &[GaitSequence],
    labels: &[usize],
    cfg: &TrainConfig,
    lr: f64,
    dropout_seed: u64,
) -> Result<f64> {
    let mut g = Graph::new();
    let mode = RunMode::Train { dropout_seed };
    let emb = if model.frames_per_sample() == 1 {
        let poses: Vec<Pose> = inputs.iter().map(|s| s.poses()[0]).collect();
        model.forward(&mut g, Batch::Poses(&poses), mode)?
    } else {
        model.forward(&mut g, Batch::Sequences(inputs), mode)?
    };
    let out = triplet_loss(&mut g, emb, labels, cfg.margin, cfg.mining)?;
    let loss = g.value(out.loss).data()[0];
    let store = model.store_mut();
    store.zero_grad();
    g.backward(out.loss)?;
    g.accumulate_param_grads(store);
    store.apply_buffer_updates(g.take_buffer_updates());
    opt.step(store, lr)?;
    Ok(loss)
}
