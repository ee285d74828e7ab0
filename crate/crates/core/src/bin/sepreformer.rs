//! Command-line front end: data generation, training, separation,
//! evaluation, cost accounting and the similarity probe.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;

use clap::{Args, Parser, Subcommand};

use sepreformer::checkpoint;
use sepreformer::codec::Waveform;
use sepreformer::config::{self, ConfigSources, RunConfig, DATA_ROOT_ENV};
use sepreformer::evaluation::{self, SeparationMetrics};
use sepreformer::mixtures::{Corpus, CorpusConfig, Dataset, Manifest, MixtureExample, Source};
use sepreformer::objectives::LossConfig;
use sepreformer::separator::{DecoderMode, Separator};
use sepreformer::training::{TrainData, Trainer};
use sepreformer::{Error, ErrorKind, Result};

#[derive(Parser)]
#[command(name = "sepreformer", version, about = "Two-speaker time-domain speech separation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus: source WAVs plus train/val/test manifests.
    MakeData(MakeDataArgs),
    /// Train a model, writing checkpoints and a metrics log.
    Train(TrainArgs),
    /// Separate one WAV file into one file per speaker.
    Separate(SeparateArgs),
    /// Report SI-SNRi and SDRi over a manifest.
    Evaluate(EvaluateArgs),
    /// Report parameter and multiply-accumulate counts per module.
    Count(CountArgs),
    /// Emit per-frame speaker similarity at every decoder tap as CSV.
    Probe(ProbeArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model preset (T, S, B, M, L, tiny-desk).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    decoder_mode: Option<DecoderMode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Data root holding the manifests.
    #[arg(long, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
    /// Override any key, e.g. `--set model.f=48` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = Vec::new();
        if let Some(m) = self.decoder_mode {
            overrides.push(("model.decoder_mode".to_string(), m.to_string()));
        }
        if let Some(e) = self.epochs {
            overrides.push(("train.max_epochs".to_string(), e.to_string()));
        }
        if let Some(s) = self.seed {
            overrides.push(("train.seed".to_string(), s.to_string()));
        }
        for o in &self.overrides {
            overrides.push(config::parse_override(o)?);
        }
        let file = match &self.config {
            Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?),
            None => None,
        };
        RunConfig::resolve(&ConfigSources {
            file,
            preset: self.preset.clone(),
            data_root: self.data_root.clone(),
            overrides,
        })
    }
}

#[derive(Args)]
struct MakeDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    n_sources: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Length of every source in seconds.
    #[arg(long, default_value_t = 10.0)]
    source_seconds: f64,
    #[arg(long, default_value_t = 2000)]
    train_mixtures: usize,
    /// Mixtures in each of the validation and test manifests.
    #[arg(long, default_value_t = 200)]
    eval_mixtures: usize,
    /// Mixture length in samples.
    #[arg(long, default_value_t = 32000)]
    segment_samples: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Run directory for the resolved config, metrics log and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a training checkpoint; its configuration is kept
    /// except for `--epochs`.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct SeparateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Seed for manifest rows with random SNRs.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Directory for the report and key-value file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CountArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value_t = evaluation::MAC_WINDOW)]
    samples: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MakeData(a) => make_data(a),
        Command::Train(a) => train(a),
        Command::Separate(a) => separate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Count(a) => count(a),
        Command::Probe(a) => probe(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = match e.kind() {
                ErrorKind::Config => (2, "config"),
                ErrorKind::Data => (3, "data"),
                ErrorKind::Numeric => (4, "numeric"),
            };
            let reason = e.to_string().replace('\n', " ");
            eprintln!("error kind={kind} reason={reason}");
            ExitCode::from(code)
        }
    }
}

fn make_data(a: MakeDataArgs) -> Result<()> {
    let cfg = CorpusConfig {
        n_sources: a.n_sources,
        source_seconds: a.source_seconds,
        segment_samples: a.segment_samples,
        train_mixtures: a.train_mixtures,
        eval_mixtures: a.eval_mixtures,
        ..Default::default()
    };
    let corpus = Corpus::generate(cfg, a.seed)?;
    let written = corpus.write(&a.out, a.seed)?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn append(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Unique source files of a manifest, for dynamic mixing.
fn source_pool(manifest: &Path, rate: u32) -> Result<Vec<Source>> {
    let m = Manifest::load(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let paths: BTreeSet<&PathBuf> = m.rows.iter().flat_map(|r| r.sources.iter()).collect();
    paths
        .into_iter()
        .map(|p| {
            Ok(Source {
                id: p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                waveform: Waveform::read_wav(base.join(p), rate)?,
            })
        })
        .collect()
}

fn train(a: TrainArgs) -> Result<()> {
    let (mut trainer, run) = match &a.resume {
        Some(path) => {
            let mut t = checkpoint::load(path)?.into_trainer()?;
            let mut run = a.cfg.resolve()?;
            if let Some(e) = a.cfg.epochs {
                t.cfg.max_epochs = e;
            }
            run.model = t.model.config.clone();
            run.train = t.cfg.clone();
            (t, run)
        }
        None => {
            let run = a.cfg.resolve()?;
            let aux = run.train.loss.multi_loss.then_some(run.train.loss.aux_domain);
            let model = Separator::new(run.model.clone(), aux, run.train.seed)?;
            (Trainer::new(model, run.train.clone())?, run)
        }
    };
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.toml"), run.to_toml()?)?;
    let rate = run.model.sample_rate;
    let train_path = run.data.path(&run.data.train_manifest);
    let data = if trainer.cfg.dm {
        TrainData::Dynamic {
            pool: source_pool(&train_path, rate)?,
            per_epoch: trainer.cfg.dm_examples_per_epoch,
        }
    } else {
        TrainData::Fixed(Dataset::from_manifest(&train_path, rate, trainer.cfg.seed)?.examples)
    };
    let mut val = Dataset::from_manifest(&run.data.path(&run.data.val_manifest), rate, trainer.cfg.seed)?.examples;
    if run.data.val_limit > 0 {
        val.truncate(run.data.val_limit);
    }
    let log_path = a.out.join("metrics.log");
    while trainer.state.epoch < trainer.cfg.max_epochs {
        let best_before = trainer.state.best_val;
        let mut log = String::new();
        let s = trainer.run_epoch(&data, &val, &mut log)?;
        append(&log_path, &log)?;
        log::info!(
            "epoch {} train {:.3} val {:.3} lr {:.3e}",
            s.epoch,
            s.train_loss,
            s.val_loss,
            s.lr
        );
        checkpoint::save_trainer(&a.out.join("last.ckpt"), &trainer)?;
        if trainer.state.best_val < best_before {
            checkpoint::save_model(&a.out.join("best.ckpt"), &trainer.model)?;
        }
    }
    Ok(())
}

fn separate(a: SeparateArgs) -> Result<()> {
    let model = checkpoint::load(&a.checkpoint)?.model;
    let x = Waveform::read_wav(&a.input, model.config.sample_rate)?;
    let ests = model.separate(&x)?;
    fs::create_dir_all(&a.out)?;
    let stem = a.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "input".into());
    for (j, e) in ests.iter().enumerate() {
        let p = a.out.join(format!("{stem}_spk{}.wav", j + 1));
        e.write_wav(&p)?;
        println!("{}", p.display());
    }
    Ok(())
}

fn score(model: &Separator, ex: &MixtureExample, loss: &LossConfig) -> Result<SeparationMetrics> {
    let ests = model.separate(&ex.mixture)?;
    evaluation::evaluate(&ex.mixture, &ex.sources, &ests, loss)
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    if a.workers == 0 {
        return Err(Error::Config("--workers must be at least 1".into()));
    }
    let model = checkpoint::load(&a.checkpoint)?.model;
    let examples = Dataset::from_manifest(&a.manifest, model.config.sample_rate, a.seed)?.examples;
    if examples.is_empty() {
        return Err(Error::Data("manifest has no rows".into()));
    }
    let loss = LossConfig::default();
    let chunk = examples.len().div_ceil(a.workers);
    let results: Vec<Result<SeparationMetrics>> = thread::scope(|s| {
        let handles: Vec<_> = examples
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(|ex| score(&model, ex, &loss)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let metrics: Vec<SeparationMetrics> = results.into_iter().collect::<Result<_>>()?;
    let mut report = String::from("index si_snri sdri permutation ridge\n");
    for (i, m) in metrics.iter().enumerate() {
        let perm: Vec<String> = m.permutation.iter().map(|p| p.to_string()).collect();
        report.push_str(&format!("{i} {:.4} {:.4} {} {}\n", m.si_snri, m.sdri, perm.join(","), m.ridge_used));
    }
    let n = metrics.len() as f64;
    let si = metrics.iter().map(|m| m.si_snri).sum::<f64>() / n;
    let sd = metrics.iter().map(|m| m.sdri).sum::<f64>() / n;
    let ridge = metrics.iter().filter(|m| m.ridge_used).count();
    report.push_str(&format!("mean si_snri={si:.4} sdri={sd:.4} mixtures={} ridge={ridge}\n", metrics.len()));
    print!("{report}");
    if let Some(dir) = a.out {
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("metrics.txt"), &report)?;
        fs::write(
            dir.join("metrics.kv"),
            format!("si_snri={si}\nsdri={sd}\nmixtures={}\nridge_used={ridge}\n", metrics.len()),
        )?;
    }
    Ok(())
}

fn count(a: CountArgs) -> Result<()> {
    let run = a.cfg.resolve()?;
    let report = evaluation::count_macs(&run.model, a.samples)?;
    println!("{report}");
    if let Some(dir) = a.out {
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("config.toml"), run.to_toml()?)?;
        fs::write(dir.join("cost.txt"), format!("{report}\n"))?;
        fs::write(dir.join("cost.kv"), report.to_kv())?;
    }
    Ok(())
}

fn probe(a: ProbeArgs) -> Result<()> {
    let model = checkpoint::load(&a.checkpoint)?.model;
    let x = Waveform::read_wav(&a.input, model.config.sample_rate)?;
    let table = evaluation::cosine_probe(&model, &x)?;
    match a.out {
        Some(p) => fs::write(p, table.to_csv())?,
        None => print!("{}", table.to_csv()),
    }
    for tap in 1..=4 {
        eprintln!("Z{tap} mean={:.4}", table.tap_mean(tap));
    }
    Ok(())
}
