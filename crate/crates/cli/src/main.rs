use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dmhsa::audio::{features, Waveform};
use dmhsa::data::{load_manifest, load_split, read_embeddings, synth_dataset, write_embeddings, RunConfig, Split, SyntheticSpeakerSpec};
use dmhsa::eval::{evaluate_predictions, join_scores, read_predictions, read_scores, read_trials, write_predictions, write_scores, MetricsReport};
use dmhsa::model::SpeakerNet;
use dmhsa::pipeline::{embed_all, label_map, predict_all, read_labels, score_embeddings, train_from_config, LABELS_FILE};
use dmhsa::tensor::read_checkpoint;

/// Speaker embeddings with double multi-head self-attention pooling.
#[derive(Parser)]
#[command(name = "dmhsa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic speaker corpus.
    Synth(SynthArgs),
    /// Train a network and write checkpoints and history.
    Train(TrainArgs),
    /// Write embeddings (and optionally predictions) for a manifest split.
    Extract(ExtractArgs),
    /// Cosine-score a trial list from an embeddings file.
    Score(ScoreArgs),
    /// Compute metrics from scores and trials, or from predictions.
    Eval(EvalArgs),
    /// Print the attention weights for one utterance.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory; defaults to `$DMHSA_OUT/synth`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    speakers: usize,
    #[arg(long, default_value_t = 20)]
    utts: usize,
    #[arg(long, default_value_t = 3.0)]
    duration: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    target_trials: usize,
    #[arg(long, default_value_t = 100)]
    nontarget_trials: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file (`section.key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Manifest; overrides `data.manifest`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory; overrides `output.dir` and `$DMHSA_OUT`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    pooling: Option<String>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    /// `ce` or `wce`.
    #[arg(long)]
    loss: Option<String>,
    /// Seconds, or `full` for uncropped utterances.
    #[arg(long)]
    crop_seconds: Option<String>,
    /// Any other config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Embeddings output file.
    #[arg(long)]
    out: PathBuf,
    /// Also write class predictions; needs the run's labels file next to
    /// the checkpoint.
    #[arg(long)]
    predictions_out: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    trials: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, requires = "trials", conflicts_with = "predictions")]
    scores: Option<PathBuf>,
    #[arg(long)]
    trials: Option<PathBuf>,
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Write `key=value` metrics here as well as printing them.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A WAV file, or an utterance id when `--manifest` is given.
    utterance: String,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

fn output_root() -> Option<PathBuf> {
    std::env::var_os("DMHSA_OUT").map(PathBuf::from)
}

fn synth(a: SynthArgs) -> Result<()> {
    let out = match (a.out, output_root()) {
        (Some(o), _) => o,
        (None, Some(root)) => root.join("synth"),
        (None, None) => bail!("no output directory: pass --out or set DMHSA_OUT"),
    };
    let spec = SyntheticSpeakerSpec {
        n_speakers: a.speakers,
        utts_per_speaker: a.utts,
        duration_s: a.duration,
        seed: a.seed,
        target_trials: a.target_trials,
        nontarget_trials: a.nontarget_trials,
    };
    let result = synth_dataset(&spec, &out)?;
    println!(
        "wrote {} utterances and {} trials to {}",
        result.rows.len(),
        result.trials.len(),
        out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let explicit_out = a.config.is_some() && cfg.out_dir != RunConfig::default().out_dir;
    let mut set = |k: &str, v: String| cfg.set(k, &v);
    if let Some(v) = a.seed {
        set("train.seed", v.to_string())?;
    }
    if let Some(v) = a.pooling {
        set("model.pooling", v)?;
    }
    if let Some(v) = a.heads {
        set("model.heads", v.to_string())?;
    }
    if let Some(v) = a.blocks {
        set("model.blocks", v.to_string())?;
    }
    if let Some(v) = a.loss {
        set("train.loss", v)?;
    }
    if let Some(v) = a.crop_seconds {
        set("train.crop_seconds", v)?;
    }
    for kv in &a.set {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects key=value, got '{kv}'"))?;
        set(k, v.to_string())?;
    }
    if let Some(m) = a.manifest {
        cfg.manifest = m;
    }
    match (a.out, output_root()) {
        (Some(o), _) => cfg.out_dir = o,
        (None, Some(root)) if !explicit_out => cfg.out_dir = root.join("run"),
        _ => {}
    }
    let run = train_from_config(&cfg)?;
    let o = &run.outcome;
    println!(
        "best epoch {} of {} (val {:.6}){}; outputs in {}",
        o.best_epoch,
        o.history.len(),
        o.best_metric,
        if o.stopped_early { ", stopped early" } else { "" },
        cfg.out_dir.display()
    );
    Ok(())
}

fn load_net(path: &Path) -> Result<SpeakerNet<f32>> {
    let ckpt = read_checkpoint::<f32>(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(SpeakerNet::from_checkpoint(&ckpt)?)
}

fn extract(a: ExtractArgs) -> Result<()> {
    let net = load_net(&a.checkpoint)?;
    let manifest = load_manifest(&a.manifest, None)?;
    let labels_path = a.checkpoint.parent().unwrap_or(Path::new(".")).join(LABELS_FILE);
    let labels = if a.predictions_out.is_some() {
        label_map(&read_labels(&labels_path).with_context(|| format!("reading {}", labels_path.display()))?)
    } else {
        // Embeddings do not need class indices, and verification speakers
        // may be unseen in training.
        manifest.rows.iter().map(|r| (r.label.clone(), 0)).collect()
    };
    let utts = load_split(&manifest, a.split, &labels)?;
    if utts.is_empty() {
        bail!("split {} of {} is empty", a.split, a.manifest.display());
    }
    write_embeddings(&a.out, &embed_all(&net, &utts)?)?;
    println!("wrote {} embeddings to {}", utts.len(), a.out.display());
    if let Some(p) = a.predictions_out {
        write_predictions(&p, &predict_all(&net, &utts)?)?;
        println!("wrote predictions to {}", p.display());
    }
    Ok(())
}

fn score(a: ScoreArgs) -> Result<()> {
    let records = read_embeddings(&a.embeddings)?;
    let trials = read_trials(&a.trials)?;
    let scores = score_embeddings(&records, &trials)?;
    write_scores(&a.out, &scores)?;
    println!("wrote {} scores to {}", scores.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let report = match (&a.scores, &a.trials, &a.predictions) {
        (Some(s), Some(t), None) => MetricsReport::verification(&join_scores(&read_trials(t)?, &read_scores(s)?)?)?,
        (None, _, Some(p)) => evaluate_predictions(&read_predictions(p)?)?,
        _ => bail!("pass --scores with --trials, or --predictions"),
    };
    print!("{}", report.to_text());
    if let Some(out) = a.out {
        report.write(&out, None)?;
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let net = load_net(&a.checkpoint)?;
    let spec = match &a.manifest {
        Some(m) => {
            let manifest = load_manifest(m, None)?;
            let row = manifest
                .rows
                .iter()
                .find(|r| r.utterance_id == a.utterance)
                .with_context(|| format!("utterance '{}' is not in {}", a.utterance, m.display()))?;
            dmhsa::data::row_features(&manifest, row)?
        }
        None => features(&Waveform::read_wav(Path::new(&a.utterance))?)?,
    };
    let maps = net.attention_maps(&spec)?;
    let (t, k) = (maps.time_steps, maps.heads);
    let mut out = String::new();
    writeln!(out, "# w: {k} heads x {t} time steps; each row sums to 1").unwrap();
    for j in 0..k {
        let row: Vec<String> = (0..t).map(|i| maps.weights[i * k + j].to_string()).collect();
        writeln!(out, "{}", row.join(" ")).unwrap();
    }
    if let Some(hw) = &maps.head_weights {
        writeln!(out, "# head weights: {k} values summing to 1").unwrap();
        let row: Vec<String> = hw.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", row.join(" ")).unwrap();
    }
    print!("{out}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Extract(a) => extract(a),
        Command::Score(a) => score(a),
        Command::Eval(a) => eval(a),
        Command::Inspect(a) => inspect(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
