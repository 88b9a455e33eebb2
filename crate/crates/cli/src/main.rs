//! `gaitlab` command-line front end.
//!
//! Exit codes: 0 success, 1 a check ran and failed, 2 bad input, 3 degenerate
//! data, 64 usage error. Every command that gets past argument parsing writes
//! a run manifest, on failure too.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use clap::{error::ErrorKind, Args, Parser, Subcommand};
use gaitlab_autodiff::gradcheck::{grad_check, GradCheckOptions};
use gaitlab_autodiff::Graph;
use gaitlab_core::checkpoint::Checkpoint;
use gaitlab_core::dataset::{read_id_list, read_jsonl, sha256_hex, to_jsonl, write_atomic, Split};
use gaitlab_core::evaluation::{
    cmc, embed, run_ablation, AblationData, AblationGrid, AblationOptions, EvalContext,
};
use gaitlab_core::models::{Encoder, ModelConfig, RunMode, SinglePoseEncoder, SpeConfig, TemporalConfig, TemporalEncoder};
use gaitlab_core::normalization::{self, compute_stats, DatasetStats, NormScheme};
use gaitlab_core::pose::{height, joint, pelvis, FrameGeometry, GaitSequence, Pose};
use gaitlab_core::synthetic::{describe, generate, ConfoundMode, ConfoundSpec};
use gaitlab_core::training::{metrics_csv, parse_kv, train, triplet_loss, Heldout, Mining, NormContext, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

const SEED_ENV: &str = "GAITLAB_SEED";

#[derive(Parser, Debug)]
#[command(name = "gaitlab", version, about = "Gait-recognition normalization and confound experiments")]
struct Cli {
    /// Write the run manifest to this path instead of next to the outputs.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic walker dataset with controlled identity cues.
    Generate(GenerateArgs),
    /// Compute training-set statistics for the global normalizations.
    Stats(StatsArgs),
    /// Apply a normalization scheme to a dataset.
    Normalize(NormalizeArgs),
    /// Train an encoder with triplet loss.
    Train(TrainArgs),
    /// Gallery/probe identification with a trained checkpoint.
    Evaluate(EvaluateArgs),
    /// Run a (model x scheme x seed) grid and tabulate rank-1/rank-5.
    Ablate(AblateArgs),
    /// Compare encoder gradients against finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
struct Geometry {
    /// Frame width in pixels.
    #[arg(long, default_value_t = 640.0)]
    frame_width: f64,
    /// Frame height in pixels.
    #[arg(long, default_value_t = 480.0)]
    frame_height: f64,
}

impl Geometry {
    fn get(&self) -> Result<FrameGeometry> {
        Ok(FrameGeometry::new(self.frame_width, self.frame_height)?)
    }
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    mode: ConfoundMode,
    #[arg(long, default_value_t = 50)]
    identities: usize,
    /// Sequences per identity.
    #[arg(long, default_value_t = 6)]
    seqs: usize,
    #[arg(long, default_value_t = 60)]
    frames: usize,
    /// Coordinate noise std as a fraction of frame width.
    #[arg(long, default_value_t = 0.005)]
    noise: f64,
    #[command(flatten)]
    geometry: Geometry,
    /// Falls back to $GAITLAB_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Training sequences per identity in the emitted split.
    #[arg(long, default_value_t = 4)]
    train_per_identity: usize,
    /// Gallery sequences per identity; the rest become probes.
    #[arg(long, default_value_t = 1)]
    gallery_per_identity: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Restrict to these sequence ids (JSON list), normally the training split.
    #[arg(long)]
    ids: Option<PathBuf>,
    #[command(flatten)]
    geometry: Geometry,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct NormalizeArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Scheme name or comma-joined composition.
    #[arg(long)]
    scheme: NormScheme,
    #[arg(long)]
    stats: Option<PathBuf>,
    #[command(flatten)]
    geometry: Geometry,
    /// Print the first sequence's first frame before and after.
    #[arg(long)]
    preview: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SplitArgs {
    /// JSON list of training sequence ids; all sequences when omitted.
    #[arg(long)]
    train_ids: Option<PathBuf>,
    #[arg(long)]
    gallery_ids: Option<PathBuf>,
    #[arg(long)]
    probe_ids: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Flat `key = value` file. Keys starting with `model.` configure the
    /// encoder, the rest are training keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set max_lr=1e-4 --set model.c_emb=64`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Falls back to the config file, then $GAITLAB_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long, default_value = "spe")]
    model: String,
    #[arg(long, default_value = "none")]
    scheme: NormScheme,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    geometry: Geometry,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    gallery: PathBuf,
    #[arg(long)]
    probe: PathBuf,
    /// Evaluate under a different scheme than the checkpoint was trained with.
    #[arg(long)]
    scheme: Option<NormScheme>,
    /// Stats for schemes the checkpoint carries none for.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Length of the reported match curve.
    #[arg(long, default_value_t = 10)]
    cmc: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    train_ids: PathBuf,
    #[arg(long)]
    gallery_ids: PathBuf,
    #[arg(long)]
    probe_ids: PathBuf,
    /// Model kinds, repeatable or comma-separated.
    #[arg(long = "model", value_delimiter = ',', default_value = "spe")]
    models: Vec<String>,
    /// Schemes, one per flag (compositions use commas).
    #[arg(long = "scheme", required = true)]
    schemes: Vec<NormScheme>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    geometry: Geometry,
    /// Parallel cells.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Recompute every cell even when a cached result exists.
    #[arg(long)]
    no_cache: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, default_value = "spe")]
    model: String,
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Coordinates checked per parameter tensor.
    #[arg(long, default_value_t = 8)]
    coords: usize,
    #[arg(long, default_value = "grad_check.json")]
    out: PathBuf,
}

/// A check that ran to completion and did not pass.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

#[derive(Serialize)]
struct RunManifest {
    command: Vec<String>,
    tool_version: &'static str,
    seed: Option<u64>,
    config: Value,
    /// Input path -> SHA-256 of its bytes.
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    status: &'static str,
    exit_code: u8,
    error: Option<String>,
    started_unix: u64,
    wall_clock_secs: f64,
}

/// Bookkeeping shared by every command.
struct Run {
    seed: Option<u64>,
    config: Value,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl Run {
    fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    fn read_dataset(&mut self, path: &Path) -> Result<Vec<GaitSequence>> {
        self.input(path)?;
        read_jsonl(path).with_context(|| format!("reading dataset {}", path.display()))
    }

    fn read_ids(&mut self, path: &Path) -> Result<Vec<String>> {
        self.input(path)?;
        read_id_list(path).with_context(|| format!("reading id list {}", path.display()))
    }

    fn read_stats(&mut self, path: &Path) -> Result<DatasetStats> {
        self.input(path)?;
        let stats: DatasetStats = serde_json::from_slice(&std::fs::read(path)?).with_context(|| format!("parsing stats {}", path.display()))?;
        stats.validate()?;
        Ok(stats)
    }

    /// Writes an output file, refusing to overwrite any input.
    fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        let key = path.display().to_string();
        if self.inputs.contains_key(&key) || same_file(path, self.inputs.keys()) {
            bail!(gaitlab_core::Error::Config(format!("refusing to overwrite input file {key}")));
        }
        write_atomic(path, bytes)?;
        self.outputs.push(key);
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, path: &Path, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(path, text.as_bytes())
    }
}

fn same_file<'a>(path: &Path, inputs: impl Iterator<Item = &'a String>) -> bool {
    let Ok(target) = path.canonicalize() else {
        return false;
    };
    inputs.filter_map(|p| Path::new(p).canonicalize().ok()).any(|p| p == target)
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(
            v.trim()
                .parse()
                .map_err(|_| gaitlab_core::Error::Config(format!("{SEED_ENV} must be an unsigned integer, got `{v}`")))?,
        )),
        Err(_) => Ok(None),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return 1;
    }
    match err.downcast_ref::<gaitlab_core::Error>() {
        Some(e) if e.is_degenerate_data() => 3,
        _ => 2,
    }
}

fn manifest_path(cli: &Cli) -> PathBuf {
    if let Some(p) = &cli.manifest {
        return p.clone();
    }
    match &cli.command {
        Command::Generate(a) => a.out.join("run.json"),
        Command::Train(a) => a.out.join("run.json"),
        Command::Ablate(a) => a.out.join("run.json"),
        Command::Stats(a) => a.out.with_extension("run.json"),
        Command::Normalize(a) => a.out.with_extension("run.json"),
        Command::Evaluate(a) => a.out.with_extension("run.json"),
        Command::GradCheck(a) => a.out.with_extension("run.json"),
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 64,
            });
        }
    };
    let started = Instant::now();
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let mut run = Run {
        seed: None,
        config: Value::Null,
        inputs: BTreeMap::new(),
        outputs: Vec::new(),
    };
    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(a, &mut run),
        Command::Stats(a) => cmd_stats(a, &mut run),
        Command::Normalize(a) => cmd_normalize(a, &mut run),
        Command::Train(a) => cmd_train(a, &mut run),
        Command::Evaluate(a) => cmd_evaluate(a, &mut run),
        Command::Ablate(a) => cmd_ablate(a, &mut run),
        Command::GradCheck(a) => cmd_grad_check(a, &mut run),
    };
    let code = match &result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(e)
        }
    };
    let manifest = RunManifest {
        command: argv,
        tool_version: env!("CARGO_PKG_VERSION"),
        seed: run.seed,
        config: run.config,
        inputs: run.inputs,
        outputs: run.outputs,
        status: if code == 0 { "ok" } else { "error" },
        exit_code: code,
        error: result.err().map(|e| format!("{e:#}")),
        started_unix,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    let path = manifest_path(&cli);
    let written = serde_json::to_string_pretty(&manifest)
        .map_err(anyhow::Error::from)
        .and_then(|text| Ok(write_atomic(&path, format!("{text}\n").as_bytes())?));
    if let Err(e) = written {
        eprintln!("error: could not write run manifest {}: {e:#}", path.display());
        return ExitCode::from(if code == 0 { 2 } else { code });
    }
    ExitCode::from(code)
}

// ---------------------------------------------------------------- generate

fn cmd_generate(a: &GenerateArgs, run: &mut Run) -> Result<()> {
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    run.seed = Some(seed);
    let spec = ConfoundSpec {
        noise_std: a.noise,
        geometry: a.geometry.get()?,
        ..ConfoundSpec::new(a.mode, a.identities, a.seqs, a.frames, seed)
    };
    run.config = serde_json::to_value(&spec)?;
    let (seqs, manifest) = generate(&spec)?;
    let split = Split::by_sequence(&seqs, a.train_per_identity, a.gallery_per_identity);

    run.write(&a.out.join("dataset.jsonl"), to_jsonl(&seqs)?.as_bytes())?;
    run.write_json(&a.out.join("manifest.json"), &manifest)?;
    run.write_json(&a.out.join("train_ids.json"), &split.train)?;
    run.write_json(&a.out.join("gallery_ids.json"), &split.gallery)?;
    run.write_json(&a.out.join("probe_ids.json"), &split.probe)?;
    let report = describe(&manifest);
    run.write(&a.out.join("covariates.txt"), report.to_string().as_bytes())?;
    print!("{report}");
    println!(
        "wrote {} sequences ({} train / {} gallery / {} probe) to {}",
        seqs.len(),
        split.train.len(),
        split.gallery.len(),
        split.probe.len(),
        a.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- stats

fn select_ids(run: &mut Run, seqs: &[GaitSequence], ids: Option<&PathBuf>) -> Result<Vec<GaitSequence>> {
    match ids {
        Some(p) => {
            let ids = run.read_ids(p)?;
            Ok(Split::select(seqs, &ids)?)
        }
        None => Ok(seqs.to_vec()),
    }
}

fn cmd_stats(a: &StatsArgs, run: &mut Run) -> Result<()> {
    let geom = a.geometry.get()?;
    run.config = json!({ "geometry": geom, "ids": a.ids });
    let all = run.read_dataset(&a.dataset)?;
    let seqs = select_ids(run, &all, a.ids.as_ref())?;
    let stats = compute_stats(&seqs, &geom)?;
    run.write_json(&a.out, &stats)?;
    println!("sequences      {}", seqs.len());
    println!("poses          {}", seqs.iter().map(GaitSequence::len).sum::<usize>());
    println!("mean pelvis    ({:.4}, {:.4})", stats.mean_pelvis[0], stats.mean_pelvis[1]);
    println!("mean height    {:.4}", stats.mean_height);
    println!("frame width    {}", stats.frame_width);
    println!("fingerprint    {}", stats.fingerprint);
    Ok(())
}

// ---------------------------------------------------------------- normalize

fn with_sequence(seq: &GaitSequence, e: gaitlab_core::Error) -> anyhow::Error {
    anyhow::Error::from(e).context(format!("sequence `{}`", seq.sequence_id))
}

fn print_preview(before: &Pose, after: &Pose, scheme: &NormScheme) {
    println!("first frame, scheme {scheme}");
    println!("{:<12} {:>12} {:>12}   {:>12} {:>12}", "joint", "x", "y", "x'", "y'");
    for (j, name) in joint::NAMES.iter().enumerate() {
        let (b, n) = (before.joint(j), after.joint(j));
        println!("{name:<12} {:>12.4} {:>12.4}   {:>12.6} {:>12.6}", b[0], b[1], n[0], n[1]);
    }
    let (pb, pa) = (pelvis(before), pelvis(after));
    println!("{:<12} {:>12.4} {:>12.4}   {:>12.6} {:>12.6}", "pelvis", pb[0], pb[1], pa[0], pa[1]);
    println!("{:<12} {:>25.4}   {:>25.6}", "height", height(before), height(after));
}

fn cmd_normalize(a: &NormalizeArgs, run: &mut Run) -> Result<()> {
    let geom = a.geometry.get()?;
    run.config = json!({ "scheme": a.scheme.to_string(), "geometry": geom, "stats": a.stats });
    let seqs = run.read_dataset(&a.dataset)?;
    let stats = a.stats.as_ref().map(|p| run.read_stats(p)).transpose()?;
    if a.scheme.uses_batchnorm() {
        eprintln!("note: batch-norm is applied inside the model; it leaves the data unchanged here");
    }
    let out = seqs
        .iter()
        .map(|s| normalization::apply(&a.scheme, s, stats.as_ref(), Some(&geom)).map_err(|e| with_sequence(s, e)))
        .collect::<Result<Vec<_>>>()?;
    if a.preview {
        if let (Some(b), Some(n)) = (seqs.first(), out.first()) {
            println!("sequence {}", b.sequence_id);
            print_preview(&b.poses()[0], &n.poses()[0], &a.scheme);
        }
    }
    run.write(&a.out, to_jsonl(&out)?.as_bytes())?;
    println!("normalized {} sequences with {}", out.len(), a.scheme);
    Ok(())
}

// ---------------------------------------------------------------- config

struct Effective {
    train: TrainConfig,
    model_overrides: Vec<(String, String)>,
}

/// Precedence: built-ins < $GAITLAB_SEED < config file < --set < --seed/--epochs.
fn effective_config(c: &ConfigArgs, kind: &str, run: &mut Run) -> Result<Effective> {
    let mut train = TrainConfig::for_model(kind);
    if let Some(s) = env_seed()? {
        train.seed = s;
    }
    let mut pairs = Vec::new();
    if let Some(p) = &c.config {
        run.input(p)?;
        pairs.extend(parse_kv(&std::fs::read_to_string(p)?)?);
    }
    for s in &c.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| gaitlab_core::Error::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut model_overrides = Vec::new();
    for (k, v) in pairs {
        match k.strip_prefix("model.") {
            Some(mk) => model_overrides.push((mk.to_string(), v)),
            None => train.set(&k, &v)?,
        }
    }
    if let Some(s) = c.seed {
        train.seed = s;
    }
    if let Some(e) = c.epochs {
        train.epochs = e;
    }
    train.validate()?;
    Ok(Effective { train, model_overrides })
}

/// Builds a model config from defaults plus `model.*` overrides. Values are
/// read as JSON where possible (numbers, booleans, arrays), else as strings.
fn model_config(kind: &str, overrides: &[(String, String)], seq_len: usize) -> Result<ModelConfig> {
    let mut base = match kind {
        "spe" => serde_json::to_value(ModelConfig::Spe(SpeConfig::default()))?,
        "temporal" => serde_json::to_value(ModelConfig::Temporal(TemporalConfig {
            seq_len,
            ..TemporalConfig::default()
        }))?,
        other => bail!(gaitlab_core::Error::Config(format!("unknown model `{other}` (expected spe or temporal)"))),
    };
    let obj = base.as_object_mut().expect("config is an object");
    for (k, v) in overrides {
        if k == "kind" || !obj.contains_key(k) {
            bail!(gaitlab_core::Error::Config(format!("unknown model key `model.{k}` for {kind}")));
        }
        obj.insert(k.clone(), serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.clone())));
    }
    let cfg: ModelConfig =
        serde_json::from_value(base).map_err(|e| gaitlab_core::Error::Config(format!("bad model override: {e}")))?;
    if let ModelConfig::Temporal(t) = &cfg {
        if t.seq_len != seq_len {
            bail!(gaitlab_core::Error::Config(format!(
                "model.seq_len {} differs from training seq_len {seq_len}",
                t.seq_len
            )));
        }
    }
    Ok(cfg)
}

fn config_echo(train: &TrainConfig, model: &ModelConfig, scheme: &NormScheme) -> Result<String> {
    let mut out = format!("model = {}\nscheme = {scheme}\n", model.kind());
    out.push_str(&train.to_kv());
    if let Value::Object(m) = serde_json::to_value(model)? {
        for (k, v) in m {
            if k != "kind" {
                out.push_str(&format!("model.{k} = {v}\n"));
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- train

fn cmd_train(a: &TrainArgs, run: &mut Run) -> Result<()> {
    let eff = effective_config(&a.config, &a.model, run)?;
    let cfg = eff.train;
    let mut model_cfg = model_config(&a.model, &eff.model_overrides, cfg.seq_len)?;
    if a.scheme.uses_batchnorm() {
        model_cfg.set_input_batchnorm(true);
    }
    let geom = a.geometry.get()?;
    run.seed = Some(cfg.seed);
    run.config = json!({
        "model": model_cfg,
        "train": cfg,
        "scheme": a.scheme.to_string(),
        "geometry": geom,
    });
    let echo = config_echo(&cfg, &model_cfg, &a.scheme)?;
    print!("{echo}");

    let all = run.read_dataset(&a.dataset)?;
    let train_set = select_ids(run, &all, a.split.train_ids.as_ref())?;
    let gallery = a.split.gallery_ids.as_ref().map(|p| select_ids(run, &all, Some(p))).transpose()?;
    let probe = a.split.probe_ids.as_ref().map(|p| select_ids(run, &all, Some(p))).transpose()?;
    let stats = if a.scheme.needs_stats() {
        Some(compute_stats(&train_set, &geom)?)
    } else {
        None
    };
    let norm = NormContext {
        scheme: a.scheme.clone(),
        stats,
        geometry: Some(geom),
    };
    let heldout = match (&gallery, &probe) {
        (Some(g), Some(p)) => Some(Heldout { gallery: g, probe: p }),
        (None, None) => None,
        _ => bail!(gaitlab_core::Error::Config("--gallery-ids and --probe-ids go together".into())),
    };

    let mut encoder = Encoder::new(&model_cfg, cfg.seed)?;
    let mut last_epoch = usize::MAX;
    let report = train(&mut encoder, &train_set, &norm, &cfg, heldout, &mut |row| {
        if let Some(r1) = row.rank1_heldout {
            eprintln!("epoch {:>4} step {:>6} loss {:.5} held-out rank-1 {r1:.3}", row.epoch + 1, row.step, row.loss);
        } else if row.epoch != last_epoch {
            last_epoch = row.epoch;
            eprintln!("epoch {:>4} step {:>6} lr {:.2e} loss {:.5}", row.epoch + 1, row.step, row.lr, row.loss);
        }
    })?;

    let final_eval = match (&gallery, &probe) {
        (Some(g), Some(p)) => {
            let ctx = EvalContext {
                norm: norm.clone(),
                seq_len: cfg.seq_len,
            };
            let r = gaitlab_core::evaluation::evaluate(&encoder, g, p, &ctx)?;
            println!("held-out rank-1 {:.4} rank-5 {:.4}", r.rank1, r.rank5);
            Some(r)
        }
        _ => None,
    };

    let ck = Checkpoint {
        encoder,
        train: cfg.clone(),
        norm,
        seed: cfg.seed,
        optimizer: Some(report.optimizer),
    };
    run.write(&a.out.join("checkpoint.gckpt"), &ck.to_bytes()?)?;
    run.write(&a.out.join("config.txt"), echo.as_bytes())?;
    run.write(&a.out.join("metrics.csv"), metrics_csv(&report.metrics).as_bytes())?;
    if let Some(r) = final_eval {
        run.write_json(&a.out.join("heldout.json"), &r)?;
    }
    if let Some(l) = report.epoch_losses.last() {
        println!("final epoch loss {l:.5} after {} steps", report.steps);
    }
    println!("checkpoint written to {}", a.out.join("checkpoint.gckpt").display());
    Ok(())
}

// ---------------------------------------------------------------- evaluate

#[derive(Serialize)]
struct EvalOutput {
    checkpoint: String,
    scheme: String,
    rank1: f64,
    rank5: f64,
    cmc: Vec<f64>,
    probes: usize,
    gallery_sequences: usize,
    gallery_subjects: usize,
}

fn cmd_evaluate(a: &EvaluateArgs, run: &mut Run) -> Result<()> {
    run.input(&a.checkpoint)?;
    let ck = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    run.seed = Some(ck.seed);
    let mut norm = ck.norm.clone();
    if let Some(s) = &a.scheme {
        if *s != norm.scheme {
            eprintln!("note: checkpoint was trained with `{}`, evaluating with `{s}`", norm.scheme);
        }
        norm.scheme = s.clone();
    }
    if let Some(p) = &a.stats {
        norm.stats = Some(run.read_stats(p)?);
    }
    run.config = json!({ "scheme": norm.scheme.to_string(), "seq_len": ck.train.seq_len, "cmc": a.cmc });
    let all = run.read_dataset(&a.dataset)?;
    let gallery = select_ids(run, &all, Some(&a.gallery))?;
    let probe = select_ids(run, &all, Some(&a.probe))?;
    let ctx = EvalContext {
        norm,
        seq_len: ck.train.seq_len,
    };
    let g = embed(&ck.encoder, &gallery, &ctx)?;
    let p = embed(&ck.encoder, &probe, &ctx)?;
    let curve = cmc(&p, &g, a.cmc.max(5))?;
    let subjects: std::collections::BTreeSet<&str> = g.iter().map(|r| r.subject_id.as_str()).collect();
    let out = EvalOutput {
        checkpoint: a.checkpoint.display().to_string(),
        scheme: ctx.norm.scheme.to_string(),
        rank1: curve[0],
        rank5: curve[4],
        cmc: curve[..a.cmc.max(1)].to_vec(),
        probes: p.len(),
        gallery_sequences: g.len(),
        gallery_subjects: subjects.len(),
    };
    println!(
        "rank-1 {:.4}  rank-5 {:.4}  ({} probes, {} gallery subjects)",
        out.rank1, out.rank5, out.probes, out.gallery_subjects
    );
    run.write_json(&a.out, &out)?;
    Ok(())
}

// ---------------------------------------------------------------- ablate

fn cmd_ablate(a: &AblateArgs, run: &mut Run) -> Result<()> {
    let kind = a.models.first().map(String::as_str).unwrap_or("spe");
    let eff = effective_config(&a.config, kind, run)?;
    if a.config.epochs.is_none() && a.models.iter().any(|m| m != kind) {
        eprintln!("note: all models share one epoch budget ({})", eff.train.epochs);
    }
    let models = a
        .models
        .iter()
        .map(|m| model_config(m, &eff.model_overrides, eff.train.seq_len))
        .collect::<Result<Vec<_>>>()?;
    let geom = a.geometry.get()?;
    let grid = AblationGrid::product(&models, &a.schemes, &a.seeds, eff.train.clone());
    run.seed = a.seeds.first().copied();
    run.config = json!({
        "models": models,
        "schemes": a.schemes.iter().map(ToString::to_string).collect::<Vec<_>>(),
        "seeds": a.seeds,
        "train": eff.train,
        "geometry": geom,
        "jobs": a.jobs,
    });
    let all = run.read_dataset(&a.dataset)?;
    let data = AblationData {
        train: select_ids(run, &all, Some(&a.train_ids))?,
        gallery: select_ids(run, &all, Some(&a.gallery_ids))?,
        probe: select_ids(run, &all, Some(&a.probe_ids))?,
        geometry: geom,
    };
    let opts = AblationOptions {
        cache_dir: (!a.no_cache).then(|| a.out.join("cells")),
        jobs: a.jobs.max(1),
    };
    eprintln!("running {} cells", grid.cells.len());
    let table = run_ablation(&grid, &data, &opts)?;
    run.write(&a.out.join("results.csv"), table.to_csv().as_bytes())?;
    let md = table.to_markdown();
    run.write(&a.out.join("results.md"), md.as_bytes())?;
    print!("{md}");
    if table.is_partial() {
        let failed = table.rows.iter().filter(|r| r.error.is_some()).count();
        eprintln!("warning: {failed} of {} cells failed; results are partial", table.rows.len());
    }
    Ok(())
}

// ---------------------------------------------------------------- grad-check

#[derive(Serialize)]
struct GradCheckRow {
    seed: u64,
    passed: bool,
    max_rel_error: f64,
    worst: String,
    coords_checked: usize,
}

// Model errors that are not autodiff errors cannot occur for the fixed,
// valid inputs built here.
fn to_ad(e: gaitlab_core::Error) -> gaitlab_autodiff::Error {
    match e {
        gaitlab_core::Error::Autodiff(inner) => inner,
        other => unreachable!("encoder forward failed: {other}"),
    }
}

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    Pose::new(std::array::from_fn(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])).expect("finite")
}

fn cmd_grad_check(a: &GradCheckArgs, run: &mut Run) -> Result<()> {
    let opts = GradCheckOptions {
        h: a.h,
        tolerance: a.tolerance,
        max_coords_per_param: Some(a.coords),
        ..GradCheckOptions::default()
    };
    run.config = json!({ "model": a.model, "seeds": a.seeds, "h": a.h, "tolerance": a.tolerance, "coords": a.coords });
    let mut rows = Vec::new();
    for seed in 0..a.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mining = if seed % 2 == 0 { Mining::BatchHard } else { Mining::BatchAll };
        let mode = RunMode::Train { dropout_seed: 0 };
        let report = match a.model.as_str() {
            "spe" => {
                let cfg = SpeConfig {
                    input_batchnorm: seed % 2 == 1,
                    ..SpeConfig::default()
                };
                let mut model = SinglePoseEncoder::new(cfg, seed)?;
                let poses: Vec<Pose> = (0..6).map(|_| random_pose(&mut rng)).collect();
                let template = model.clone();
                grad_check(
                    &mut model.store,
                    |g: &mut Graph, store| {
                        let mut m = template.clone();
                        m.store = store.clone();
                        let e = m.forward(g, &poses, mode).map_err(to_ad)?;
                        Ok(triplet_loss(g, e, &[0, 0, 1, 1, 2, 2], 1.5, mining).map_err(to_ad)?.loss)
                    },
                    &opts,
                    &mut rng,
                )?
            }
            "temporal" => {
                let cfg = TemporalConfig {
                    d_model: 16,
                    seq_len: 6,
                    c_emb: 16,
                    input_batchnorm: seed % 2 == 1,
                    ..TemporalConfig::default()
                };
                let mut model = TemporalEncoder::new(cfg, seed)?;
                let seqs = (0..4)
                    .map(|i| GaitSequence::new(format!("s{}", i / 2), format!("q{i}"), (0..6).map(|_| random_pose(&mut rng)).collect()))
                    .collect::<gaitlab_core::Result<Vec<_>>>()?;
                let template = model.clone();
                grad_check(
                    &mut model.store,
                    |g: &mut Graph, store| {
                        let mut m = template.clone();
                        m.store = store.clone();
                        let e = m.forward(g, &seqs, mode).map_err(to_ad)?;
                        Ok(triplet_loss(g, e, &[0, 0, 1, 1], 1.5, mining).map_err(to_ad)?.loss)
                    },
                    &opts,
                    &mut rng,
                )?
            }
            other => bail!(gaitlab_core::Error::Config(format!("unknown model `{other}` (expected spe or temporal)"))),
        };
        println!("seed {seed:>3}: {report}");
        rows.push(GradCheckRow {
            seed,
            passed: report.passed(),
            max_rel_error: report.max_rel_error,
            worst: format!("{}[{}]", report.worst_param, report.worst_index),
            coords_checked: report.coords_checked,
        });
    }
    run.write_json(&a.out, &rows)?;
    let failed = rows.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(anyhow!(CheckFailed(format!("{failed} of {} seeds exceeded tolerance {}", rows.len(), a.tolerance))));
    }
    println!("all {} seeds passed", rows.len());
    Ok(())
}
