//! Command-line front end. Usage errors exit with 2, runtime failures with 1.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use actionguide::checkpoint::{
    diffusion_checkpoint, embedder_checkpoint, embedder_from_checkpoint, vae_checkpoint, vae_from_checkpoint, Checkpoint, DIFFUSION_FILE, EMBEDDER_FILE, VAE_FILE,
};
use actionguide::corpus::{generate_corpus, load_corpus, save_corpus, GrammarConfig};
use actionguide::embedding::train_contrastive;
use actionguide::graph::Lexicon;
use actionguide::evaluation::{evaluate, EvalConfig};
use actionguide::pipeline::{build_exemplars, train_denoisers, Models, PipelineConfig, Precision, SamplingPlan};
use actionguide::vae::{train_vae_set, LatentEmbedding};
use actionguide::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::app::{self, ErrorBody, ErrorEnvelope, GenerateRequest};
use crate::service;

#[derive(Parser, Debug)]
#[command(name = "actionguide", version, about = "Text-to-motion generation with local-action guidance")]
pub struct Cli {
    /// Floating-point precision for sampling (default 64; `serve` defaults to 32).
    #[arg(long, global = true, value_parser = ["32", "64"])]
    pub precision: Option<String>,
    /// Machine-readable JSON on stdout and stderr.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Embedder,
    Vae,
    Diffusion,
    /// Embedder, VAEs and diffusion in sequence.
    All,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus.
    GenCorpus {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        /// Grammar configuration JSON.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one model stage into a checkpoint directory.
    Train {
        #[arg(value_enum)]
        stage: Stage,
        #[arg(long)]
        corpus: PathBuf,
        /// Pipeline configuration JSON; missing keys take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint directory. `diffusion` reads the embedder and VAE from it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Parse a description into its semantic graph.
    Parse {
        #[arg(long)]
        text: String,
        /// Add attention coefficients and guiding weights from these models.
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        rho: Option<f64>,
    },
    /// Sample candidate local actions for every action in a description.
    SampleAction {
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_parser = parse_steps)]
        steps: Option<[usize; 3]>,
        #[arg(long)]
        models: PathBuf,
        /// Write the selected candidate latents as a references file.
        #[arg(long)]
        refs_out: Option<PathBuf>,
        /// Candidate index per action for `--refs-out` (default 0 for all).
        #[arg(long, value_delimiter = ',')]
        select: Option<Vec<usize>>,
    },
    /// Generate a motion.
    Generate {
        #[arg(long)]
        text: String,
        /// Guiding-weight multipliers as `action=value`, keyed by 0-based index or verb.
        #[arg(long, value_parser = parse_weights)]
        weights: Option<Weights>,
        #[arg(long)]
        rho: Option<f64>,
        /// DDIM steps for the motion, action and specific stages.
        #[arg(long, value_parser = parse_steps)]
        steps: Option<[usize; 3]>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON array of action-level latents, one per action.
        #[arg(long)]
        refs: Option<PathBuf>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        models: PathBuf,
        /// Motion document path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score generated motions against a corpus split.
    Evaluate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        models: PathBuf,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
        #[arg(long, value_parser = parse_steps)]
        steps: Option<[usize; 3]>,
        #[arg(long)]
        max_entries: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Evaluation configuration JSON; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long, default_value_t = service::DEFAULT_QUEUE_CAPACITY)]
        queue: usize,
    },
}

fn parse_steps(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<usize> = s.split(',').map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}"))).collect::<std::result::Result<_, _>>()?;
    match parts.as_slice() {
        [n] => Ok([*n; 3]),
        [m, a, s] => Ok([*m, *a, *s]),
        _ => Err("expected one count or three comma-separated counts".into()),
    }
}

/// `key=value` multiplier pairs from `--weights`.
#[derive(Clone, Debug)]
pub struct Weights(pub Vec<(String, f64)>);

fn parse_weights(s: &str) -> std::result::Result<Weights, String> {
    s.split(',')
        .map(|pair| {
            let (k, v) = pair.split_once('=').ok_or_else(|| format!("{pair:?} is not key=value"))?;
            let v: f64 = v.trim().parse().map_err(|e| format!("{v:?}: {e}"))?;
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("multiplier {v} must be finite and non-negative"));
            }
            Ok((k.trim().to_string(), v))
        })
        .collect::<std::result::Result<_, _>>()
        .map(Weights)
}

struct Output {
    json: bool,
}

impl Output {
    fn emit<T: Serialize>(&self, value: &T, human: impl FnOnce() -> String) -> Result<()> {
        let text = if self.json { serde_json::to_string(value)? } else { human() };
        let mut out = std::io::stdout().lock();
        writeln!(out, "{text}")?;
        Ok(())
    }
}

fn with_path(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(with_path(path))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn precision(cli: &Cli, default: Precision) -> Precision {
    match cli.precision.as_deref() {
        Some("32") => Precision::F32,
        Some("64") => Precision::F64,
        _ => default,
    }
}

fn load_models(dir: &Path, precision: Precision) -> Result<Models> {
    if !dir.is_dir() {
        return Err(with_path(dir)(std::io::Error::new(std::io::ErrorKind::NotFound, "model directory not found")));
    }
    Ok(Models::load_dir(dir)?.with_precision(precision))
}

fn read_corpus(path: &Path) -> Result<Vec<actionguide::corpus::CorpusEntry>> {
    fs::metadata(path).map_err(with_path(path))?;
    load_corpus(path)
}

fn pipeline_config(path: Option<&Path>) -> Result<PipelineConfig> {
    path.map_or_else(|| Ok(PipelineConfig::default()), read_json)
}

fn train(stage: Stage, corpus: &Path, config: Option<&Path>, out_dir: &Path, out: &Output) -> Result<()> {
    let corpus = read_corpus(corpus)?;
    let config = pipeline_config(config)?;
    fs::create_dir_all(out_dir)?;
    let mut report = serde_json::Map::new();
    if matches!(stage, Stage::Embedder | Stage::All) {
        let (embedder, r) = train_contrastive(&corpus, &config.embedder)?;
        embedder_checkpoint(&embedder)?.save(out_dir.join(EMBEDDER_FILE))?;
        eprintln!("embedder: validation top-1 {:.3} over {} entries", r.validation_top1, r.validation_size);
        report.insert("embedder".into(), serde_json::to_value(&r)?);
    }
    if matches!(stage, Stage::Vae | Stage::All) {
        let (vaes, r) = train_vae_set(&corpus, &config.vae)?;
        vae_checkpoint(&vaes)?.save(out_dir.join(VAE_FILE))?;
        for v in &r {
            eprintln!("vae {}: final reconstruction {:.4}", v.level, v.final_reconstruction);
        }
        report.insert("vae".into(), serde_json::to_value(&r)?);
    }
    if matches!(stage, Stage::Diffusion | Stage::All) {
        let embedder = embedder_from_checkpoint(&Checkpoint::load(out_dir.join(EMBEDDER_FILE))?)?;
        let vaes = vae_from_checkpoint(&Checkpoint::load(out_dir.join(VAE_FILE))?)?;
        let (den, r) = train_denoisers(&corpus, &embedder, &vaes, &config.denoiser, config.embedder.validation_fraction)?;
        let exemplars = build_exemplars(&corpus, &embedder, &vaes)?;
        diffusion_checkpoint(&den, &exemplars, &Lexicon::default())?.save(out_dir.join(DIFFUSION_FILE))?;
        eprintln!("diffusion: loss {:.4} -> {:.4}", r.epoch_losses.first().unwrap_or(&f64::NAN), r.epoch_losses.last().unwrap_or(&f64::NAN));
        report.insert("diffusion".into(), serde_json::to_value(&r)?);
    }
    out.emit(&report, || format!("checkpoints written to {}", out_dir.display()))
}

fn execute(cli: &Cli) -> Result<()> {
    let out = Output { json: cli.json };
    // Input checks come before the costlier model loading.
    if let Command::Parse { text, .. } | Command::SampleAction { text, .. } | Command::Generate { text, .. } = &cli.command {
        if text.trim().is_empty() {
            return Err(Error::EmptyText);
        }
    }
    match &cli.command {
        Command::GenCorpus { seed, size, out: path, config } => {
            let grammar: GrammarConfig = config.as_deref().map_or_else(|| Ok(GrammarConfig::default()), read_json)?;
            let corpus = generate_corpus(*seed, *size, &grammar)?;
            save_corpus(&corpus, path)?;
            out.emit(&serde_json::json!({ "entries": corpus.len(), "path": path }), || format!("wrote {} entries to {}", corpus.len(), path.display()))
        }
        Command::Train { stage, corpus, config, out: dir } => train(*stage, corpus, config.as_deref(), dir, &out),
        Command::Parse { text, models, rho } => {
            let models = models.as_deref().map(|d| load_models(d, precision(cli, Precision::F64))).transpose()?;
            let parsed = app::parse_text(models.as_ref(), text, rho.unwrap_or(actionguide::pipeline::DEFAULT_RHO), None)?;
            out.emit(&parsed, || serde_json::to_string_pretty(&parsed).unwrap_or_default())
        }
        Command::SampleAction { text, seeds, seed, steps, models, refs_out, select } => {
            let p = precision(cli, Precision::F64);
            let models = load_models(models, p)?;
            let mut counter = 0;
            let actions = app::sample_actions(&models, text, *seeds, *seed, *steps, p, || {
                counter += 1;
                format!("cand-{counter}")
            })?;
            if let Some(path) = refs_out {
                let picks = select.clone().unwrap_or_else(|| vec![0; actions.len()]);
                if picks.len() != actions.len() {
                    return Err(Error::InvalidArgument(format!("{} selections for {} actions", picks.len(), actions.len())));
                }
                let refs: Vec<&LatentEmbedding> = actions
                    .iter()
                    .zip(&picks)
                    .map(|(a, &k)| a.candidates.get(k).map(|c| &c.latent).ok_or_else(|| Error::InvalidArgument(format!("no candidate {k} for action {}", a.index))))
                    .collect::<Result<_>>()?;
                write_json(path, &refs)?;
            }
            out.emit(&serde_json::json!({ "actions": actions }), || {
                actions
                    .iter()
                    .flat_map(|a| a.candidates.iter().map(move |c| format!("{}\t{}\tseed {}\t{} frames", c.id, a.description, c.seed, c.preview.positions.len())))
                    .collect::<Vec<_>>()
                    .join("\n")
            })
        }
        Command::Generate { text, weights, rho, steps, seed, refs, frames, models, out: path } => {
            let p = precision(cli, Precision::F64);
            let models = load_models(models, p)?;
            let refs: Option<Vec<LatentEmbedding>> = refs.as_deref().map(read_json).transpose()?;
            let weight_multipliers = weights.as_ref().map(|w| app::resolve_weights(&models.parse(text)?, &w.0)).transpose()?;
            let request = GenerateRequest { text: text.clone(), weight_multipliers, rho: *rho, steps: *steps, seed: *seed, frames: *frames, ..Default::default() };
            let doc = app::generate(&models, &request, refs.as_deref(), p)?;
            match path {
                Some(path) => {
                    write_json(path, &doc)?;
                    let lambda = doc.diagnostics.as_ref().map(|d| d.lambda.clone()).unwrap_or_default();
                    out.emit(&serde_json::json!({ "path": path, "frames": doc.frames.len(), "lambda": lambda }), || {
                        format!("wrote {} frames to {} (lambda {lambda:?})", doc.frames.len(), path.display())
                    })
                }
                None => out.emit(&doc, || serde_json::to_string_pretty(&doc).unwrap_or_default()),
            }
        }
        Command::Evaluate { corpus, models, repeats, steps, max_entries, seed, config, out: path } => {
            let p = precision(cli, Precision::F64);
            let models = load_models(models, p)?;
            let corpus = read_corpus(corpus)?;
            let mut cfg: EvalConfig = config.as_deref().map_or_else(|| Ok(EvalConfig::default()), read_json)?;
            cfg.repeats = *repeats;
            cfg.seed = *seed;
            cfg.max_entries = max_entries.or(cfg.max_entries);
            cfg.plan = SamplingPlan { steps: steps.unwrap_or(cfg.plan.steps), precision: p, ..cfg.plan };
            let report = evaluate(&models, &corpus, &cfg)?;
            if let Some(path) = path {
                write_json(path, &report)?;
            }
            out.emit(&report, || {
                format!(
                    "{} entries, {} repeats\n\ngenerated\n{}\n\nground truth\n{}",
                    report.entries,
                    report.repeats,
                    report.generated.table(),
                    report.ground_truth.table()
                )
            })
        }
        Command::Serve { port, host, models, queue } => {
            let p = precision(cli, Precision::F32);
            let loaded = match models {
                Some(dir) => match Models::load_dir(dir) {
                    Ok(m) => Some(m),
                    Err(e) => {
                        eprintln!("warning: models not loaded from {}: {e}", dir.display());
                        None
                    }
                },
                None => None,
            };
            let state = service::AppState::new(loaded, p, *queue);
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::bind((host.as_str(), *port)).await?;
                eprintln!("listening on {}", listener.local_addr()?);
                axum::serve(listener, service::router(state)).await
            })?;
            Ok(())
        }
    }
}

fn report_error(e: &Error, json: bool) {
    let body = ErrorBody::from(e);
    if json {
        eprintln!("{}", serde_json::to_string(&ErrorEnvelope { error: &body }).unwrap_or_default());
    } else {
        eprintln!("error[{}]: {}", body.code, body.message);
    }
}

pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(&e, cli.json);
            ExitCode::from(1)
        }
    }
}
