//! Gallery/probe identification and the normalization ablation runner.
//!
//! Identification is closed-set nearest neighbour in embedding space:
//! gallery samples are sorted by Euclidean distance to the probe (ties by
//! subject id), and each subject is ranked by its nearest sample. Rank-k
//! counts distinct subjects.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{fingerprint, sha256_hex, write_atomic};
use crate::models::{Encoder, ModelConfig};
use crate::normalization::{compute_stats, NormScheme};
use crate::pose::{fit_length, FrameGeometry, GaitSequence};
use crate::training::{self, NormContext, TrainConfig};
use crate::{Error, Result};

const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub subject_id: String,
    pub sequence_id: String,
    pub embedding: Vec<f64>,
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
}

impl EmbeddingRecord {
    /// Rejects embeddings whose norm is not 1 ± 1e-6.
    pub fn new(subject_id: impl Into<String>, sequence_id: impl Into<String>, embedding: Vec<f64>) -> Result<Self> {
        let norm = embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() <= UNIT_TOLERANCE) {
            return Err(gaitlab_autodiff::Error::DegenerateEmbedding { norm }.into());
        }
        Ok(Self {
            subject_id: subject_id.into(),
            sequence_id: sequence_id.into(),
            embedding,
            tags: BTreeMap::new(),
        })
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedSubject {
    pub subject_id: String,
    /// Distance to the subject's nearest gallery sample.
    pub distance: f64,
}

/// Gallery subjects ordered by their nearest sample's distance to `probe`,
/// ties broken by subject id.
pub fn identify(probe: &[f64], gallery: &[EmbeddingRecord]) -> Result<Vec<RankedSubject>> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let mut scored: Vec<(f64, &str)> = gallery
        .iter()
        .map(|r| (distance(probe, &r.embedding), r.subject_id.as_str()))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    let mut seen = BTreeSet::new();
    Ok(scored
        .into_iter()
        .filter(|(_, s)| seen.insert(*s))
        .map(|(d, s)| RankedSubject {
            subject_id: s.to_string(),
            distance: d,
        })
        .collect())
}

fn check_closed_set(probes: &[EmbeddingRecord], gallery: &[EmbeddingRecord]) -> Result<()> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let known: BTreeSet<&str> = gallery.iter().map(|r| r.subject_id.as_str()).collect();
    let missing: BTreeSet<String> = probes
        .iter()
        .filter(|p| !known.contains(p.subject_id.as_str()))
        .map(|p| p.subject_id.clone())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::OpenSetProbe(missing.into_iter().collect()))
    }
}

/// 1-based rank of each probe's true subject.
pub fn probe_ranks(probes: &[EmbeddingRecord], gallery: &[EmbeddingRecord]) -> Result<Vec<usize>> {
    check_closed_set(probes, gallery)?;
    probes
        .iter()
        .map(|p| {
            let ranked = identify(&p.embedding, gallery)?;
            Ok(1 + ranked.iter().position(|r| r.subject_id == p.subject_id).expect("closed set"))
        })
        .collect()
}

/// Fraction of probes whose subject is among the `k` nearest distinct
/// gallery subjects.
pub fn rank_k_accuracy(probes: &[EmbeddingRecord], gallery: &[EmbeddingRecord], k: usize) -> Result<f64> {
    Ok(cmc(probes, gallery, k)?.last().copied().unwrap_or(0.0))
}

/// Cumulative match curve: entry `i` is the rank-`i+1` accuracy.
pub fn cmc(probes: &[EmbeddingRecord], gallery: &[EmbeddingRecord], max_k: usize) -> Result<Vec<f64>> {
    let ranks = probe_ranks(probes, gallery)?;
    if ranks.is_empty() {
        return Ok(vec![0.0; max_k]);
    }
    let n = ranks.len() as f64;
    Ok((1..=max_k).map(|k| ranks.iter().filter(|&&r| r <= k).count() as f64 / n).collect())
}

/// How sequences become model input at evaluation time.
#[derive(Debug, Clone, Default)]
pub struct EvalContext {
    pub norm: NormContext,
    /// Frames kept per sequence (middle crop, or interpolation when short).
    pub seq_len: usize,
}

/// Fits each sequence to the evaluation length, normalizes and embeds it.
pub fn embed(model: &Encoder, seqs: &[GaitSequence], ctx: &EvalContext) -> Result<Vec<EmbeddingRecord>> {
    let prepared = seqs
        .iter()
        .map(|s| ctx.norm.apply(&fit_length(s, ctx.seq_len)?))
        .collect::<Result<Vec<_>>>()?;
    let embeddings = model.embed_sequences(&prepared)?;
    seqs.iter()
        .zip(embeddings)
        .map(|(s, e)| {
            let mut r = EmbeddingRecord::new(s.subject_id.clone(), s.sequence_id.clone(), e)?;
            r.tags = s.tags.clone();
            Ok(r)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rank1: f64,
    pub rank5: f64,
    pub probes: usize,
    pub gallery_subjects: usize,
}

pub fn evaluate(model: &Encoder, gallery: &[GaitSequence], probe: &[GaitSequence], ctx: &EvalContext) -> Result<EvalReport> {
    let g = embed(model, gallery, ctx)?;
    let p = embed(model, probe, ctx)?;
    let curve = cmc(&p, &g, 5)?;
    Ok(EvalReport {
        rank1: curve[0],
        rank5: curve[4],
        probes: p.len(),
        gallery_subjects: g.iter().map(|r| &r.subject_id).collect::<BTreeSet<_>>().len(),
    })
}

/// One trained-and-evaluated configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub model: ModelConfig,
    pub scheme: NormScheme,
    pub seed: u64,
}

/// The batch-norm scheme is realized by the model's input layer, so it
/// switches that layer on.
fn effective_model(cell: &AblationCell) -> ModelConfig {
    let mut m = cell.model.clone();
    if cell.scheme.uses_batchnorm() {
        m.set_input_batchnorm(true);
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub cells: Vec<AblationCell>,
    /// Shared training settings; each cell overrides the seed.
    pub train: TrainConfig,
}

impl AblationGrid {
    /// Every (model, scheme, seed) combination in that nesting order.
    pub fn product(models: &[ModelConfig], schemes: &[NormScheme], seeds: &[u64], train: TrainConfig) -> Self {
        let mut cells = Vec::new();
        for m in models {
            for s in schemes {
                for &seed in seeds {
                    cells.push(AblationCell {
                        model: m.clone(),
                        scheme: s.clone(),
                        seed,
                    });
                }
            }
        }
        Self { cells, train }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::Config("ablation grid has no cells".into()));
        }
        self.train.validate()
    }
}

/// Train, gallery and probe splits shared by every cell.
#[derive(Debug, Clone)]
pub struct AblationData {
    pub train: Vec<GaitSequence>,
    pub gallery: Vec<GaitSequence>,
    pub probe: Vec<GaitSequence>,
    pub geometry: FrameGeometry,
}

impl AblationData {
    fn fingerprint(&self) -> String {
        let parts = [fingerprint(&self.train), fingerprint(&self.gallery), fingerprint(&self.probe)];
        sha256_hex(format!("{}|{}|{}|{}x{}", parts[0], parts[1], parts[2], self.geometry.width, self.geometry.height).as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub model: String,
    pub scheme: String,
    pub seed: u64,
    pub rank1: Option<f64>,
    pub rank5: Option<f64>,
    pub final_loss: Option<f64>,
    pub error: Option<String>,
    pub config_hash: String,
}

#[derive(Debug, Clone, Default)]
pub struct AblationOptions {
    /// Finished cells are stored here as `<config hash>.json` and reused.
    pub cache_dir: Option<PathBuf>,
    /// Worker threads for cells; 0 or 1 runs serially.
    pub jobs: usize,
}

/// Hash of everything a cell's result depends on.
pub fn cell_hash(cell: &AblationCell, train: &TrainConfig, data_fingerprint: &str) -> String {
    let cfg = TrainConfig {
        seed: cell.seed,
        ..train.clone()
    };
    let doc = serde_json::json!({
        "model": effective_model(cell),
        "scheme": cell.scheme,
        "train": cfg,
        "data": data_fingerprint,
    });
    sha256_hex(doc.to_string().as_bytes())
}

/// Trains and evaluates one cell. Training seed and model initialization
/// both come from the cell seed.
pub fn run_cell(cell: &AblationCell, train: &TrainConfig, data: &AblationData) -> Result<(EvalReport, f64)> {
    let cfg = TrainConfig {
        seed: cell.seed,
        ..train.clone()
    };
    let stats = if cell.scheme.needs_stats() {
        Some(compute_stats(&data.train, &data.geometry)?)
    } else {
        None
    };
    let norm = NormContext {
        scheme: cell.scheme.clone(),
        stats,
        geometry: Some(data.geometry),
    };
    let mut model = Encoder::new(&effective_model(cell), cell.seed)?;
    let report = training::train(&mut model, &data.train, &norm, &cfg, None, &mut |_| {})?;
    let ctx = EvalContext {
        norm,
        seq_len: cfg.seq_len,
    };
    let eval = evaluate(&model, &data.gallery, &data.probe, &ctx)?;
    Ok((eval, report.epoch_losses.last().copied().unwrap_or(f64::NAN)))
}

fn cell_result(cell: &AblationCell, grid: &AblationGrid, data: &AblationData, hash: String) -> CellResult {
    let mut r = CellResult {
        model: cell.model.kind().to_string(),
        scheme: cell.scheme.to_string(),
        seed: cell.seed,
        rank1: None,
        rank5: None,
        final_loss: None,
        error: None,
        config_hash: hash,
    };
    match run_cell(cell, &grid.train, data) {
        Ok((eval, loss)) => {
            r.rank1 = Some(eval.rank1);
            r.rank5 = Some(eval.rank5);
            r.final_loss = Some(loss);
        }
        Err(e) => r.error = Some(e.to_string()),
    }
    r
}

/// Runs every cell, reusing cached results. A failing cell is recorded
/// with its error and the run continues.
pub fn run_ablation(grid: &AblationGrid, data: &AblationData, opts: &AblationOptions) -> Result<AblationTable> {
    grid.validate()?;
    let fp = data.fingerprint();
    if let Some(dir) = &opts.cache_dir {
        std::fs::create_dir_all(dir)?;
    }
    let run_one = |cell: &AblationCell| -> Result<CellResult> {
        let hash = cell_hash(cell, &grid.train, &fp);
        let path = opts.cache_dir.as_ref().map(|d| d.join(format!("{hash}.json")));
        if let Some(p) = &path {
            if let Ok(text) = std::fs::read_to_string(p) {
                // failed cells are retried on the next run
                if let Ok(cached) = serde_json::from_str::<CellResult>(&text) {
                    if cached.error.is_none() {
                        return Ok(cached);
                    }
                }
            }
        }
        let r = cell_result(cell, grid, data, hash);
        if let Some(p) = &path {
            write_atomic(p, serde_json::to_string_pretty(&r)?.as_bytes())?;
        }
        Ok(r)
    };
    let rows = if opts.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| grid.cells.par_iter().map(run_one).collect::<Result<Vec<_>>>())?
    } else {
        grid.cells.iter().map(run_one).collect::<Result<Vec<_>>>()?
    };
    Ok(AblationTable { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub scheme: String,
    pub seeds: usize,
    pub failed: usize,
    pub rank1_mean: f64,
    pub rank1_std: f64,
    pub rank5_mean: f64,
    pub rank5_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<CellResult>,
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

impl AblationTable {
    pub fn is_partial(&self) -> bool {
        self.rows.iter().any(|r| r.error.is_some())
    }

    /// One row per (model, scheme) in first-appearance order; failed cells
    /// are counted but left out of the statistics.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut keys: Vec<(&str, &str)> = Vec::new();
        for r in &self.rows {
            let k = (r.model.as_str(), r.scheme.as_str());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        keys.into_iter()
            .map(|(model, scheme)| {
                let cells: Vec<&CellResult> = self.rows.iter().filter(|r| r.model == model && r.scheme == scheme).collect();
                let r1: Vec<f64> = cells.iter().filter_map(|r| r.rank1).collect();
                let r5: Vec<f64> = cells.iter().filter_map(|r| r.rank5).collect();
                let (rank1_mean, rank1_std) = mean_std(&r1);
                let (rank5_mean, rank5_std) = mean_std(&r5);
                SummaryRow {
                    model: model.to_string(),
                    scheme: scheme.to_string(),
                    seeds: cells.len(),
                    failed: cells.iter().filter(|r| r.error.is_some()).count(),
                    rank1_mean,
                    rank1_std,
                    rank5_mean,
                    rank5_std,
                }
            })
            .collect()
    }

    pub fn summary_for(&self, model: &str, scheme: &str) -> Option<SummaryRow> {
        self.summary().into_iter().find(|s| s.model == model && s.scheme == scheme)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,scheme,seed,rank1,rank5,final_loss,error\n");
        for r in &self.rows {
            let err = r.error.as_deref().unwrap_or("").replace('"', "'");
            let _ = writeln!(
                s,
                "{},\"{}\",{},{},{},{},\"{}\"",
                r.model,
                r.scheme,
                r.seed,
                fmt_opt(r.rank1),
                fmt_opt(r.rank5),
                fmt_opt(r.final_loss),
                err
            );
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| model | scheme | seed | rank-1 | rank-5 |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            let cell = |v: Option<f64>| v.map_or_else(|| "failed".to_string(), |x| format!("{x:.4}"));
            let _ = writeln!(s, "| {} | {} | {} | {} | {} |", r.model, r.scheme, r.seed, cell(r.rank1), cell(r.rank5));
        }
        s.push_str("\n| model | scheme | seeds | rank-1 | rank-5 |\n|---|---|---|---|---|\n");
        for m in self.summary() {
            let flag = if m.failed > 0 { format!(" ({} failed)", m.failed) } else { String::new() };
            let _ = writeln!(
                s,
                "| {} | {} | {}{} | {:.4} ± {:.4} | {:.4} ± {:.4} |",
                m.model, m.scheme, m.seeds, flag, m.rank1_mean, m.rank1_std, m.rank5_mean, m.rank5_std
            );
        }
        s
    }
}
