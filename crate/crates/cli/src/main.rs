use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use signbridge::describe::{
    read_corpus, run_pipeline, write_records, Generator, HttpBackend, KnowledgeBase, MockBackend, PipelineConfig,
};
use signbridge::train::{
    ablation_csv, evaluate, fuse_streams, grad_check_config, load_model, objective_grad_check, prepare_stream,
    run_ablation, save_model, train, Experiment, TrainConfig,
};

#[derive(Parser)]
#[command(name = "signbridge", version, about = "Skeleton sign recognition with description alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML config file; keys not given keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// `key=value` config overrides, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn config(&self) -> Result<TrainConfig> {
        let base = match &self.config {
            Some(path) => TrainConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => TrainConfig::default(),
        };
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        Ok(base.with_overrides(&overrides)?)
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out_dir).with_context(|| format!("creating {}", self.out_dir.display()))?;
        Ok(&self.out_dir)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BackendKind {
    Mock,
    Http,
}

#[derive(Subcommand)]
enum Command {
    /// Trains one stream; writes metrics.csv, model.bin and config.toml.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluates a saved model on the test split regenerated from its config.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Runs the five ablation rows; writes ablation.csv.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Sums the softmax scores of several saved models and reports top-1.
    Fuse {
        #[command(flatten)]
        common: Common,
        #[arg(long, num_args = 1.., required = true)]
        models: Vec<PathBuf>,
    },
    /// Writes the synthetic dataset as dataset.jsonl.
    GenerateData {
        #[command(flatten)]
        common: Common,
    },
    /// Runs the description pipeline over a corpus of signs.
    GenerateDescriptions {
        #[command(flatten)]
        common: Common,
        /// JSONL of `{"class_id", "gloss"}`.
        #[arg(long)]
        corpus: PathBuf,
        /// JSONL of `{"key", "text"}`; the built-in reference passages if omitted.
        #[arg(long)]
        kb: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "mock")]
        backend: BackendKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long, default_value_t = 30)]
        timeout_secs: u64,
        #[arg(long, default_value_t = 2)]
        retries: u32,
        #[arg(long, default_value_t = 2)]
        synonyms: usize,
    },
    /// Compares backward against central differences on the composite objective.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(common: &Common) -> Result<()> {
    let config = common.config()?;
    let out = common.out_dir()?;
    let exp = Experiment::from_config(&config)?;
    let outcome = train(&config, &exp.data, &exp.texts)?;
    write_file(&out.join("metrics.csv"), outcome.metrics.to_csv()?.as_bytes())?;
    write_file(&out.join("config.toml"), config.to_toml()?.as_bytes())?;
    save_model(&out.join("model.bin"), &config, &outcome.model)?;
    println!(
        "stream={} top1={:.4} top5={:.4}",
        config.stream.as_str(),
        outcome.evaluation.top1,
        outcome.evaluation.top5
    );
    Ok(())
}

fn cmd_evaluate(model: &Path) -> Result<()> {
    let (config, model) = load_model(model).with_context(|| format!("loading {}", model.display()))?;
    let exp = Experiment::from_config(&config)?;
    let test = prepare_stream(&exp.data.test, config.stream, &exp.data)?;
    let eval = evaluate(&model, &test)?;
    println!("stream={} top1={:.4} top5={:.4}", config.stream.as_str(), eval.top1, eval.top5);
    Ok(())
}

fn cmd_ablate(common: &Common) -> Result<()> {
    let config = common.config()?;
    let out = common.out_dir()?;
    let exp = Experiment::from_config(&config)?;
    let rows = run_ablation(&config, &exp.data, &exp.texts)?;
    write_file(&out.join("ablation.csv"), ablation_csv(&rows)?.as_bytes())?;
    for row in &rows {
        let last = row.metrics.last().context("ablation row has no epochs")?;
        println!("{} top1={:.4} top5={:.4}", row.name, last.eval_top1, last.eval_top5);
    }
    Ok(())
}

/// Config fields that determine the generated dataset.
fn data_key(c: &TrainConfig) -> (u64, usize, usize, usize, u64, u64) {
    (c.seed, c.num_classes, c.samples_per_class, c.frames, c.train_fraction.to_bits(), c.noise.to_bits())
}

fn cmd_fuse(models: &[PathBuf]) -> Result<()> {
    let mut scores = Vec::new();
    let mut labels: Option<Vec<usize>> = None;
    let mut key = None;
    for path in models {
        let (config, model) = load_model(path).with_context(|| format!("loading {}", path.display()))?;
        if *key.get_or_insert(data_key(&config)) != data_key(&config) {
            bail!("{} was trained on a different dataset", path.display());
        }
        let exp = Experiment::from_config(&config)?;
        let test = prepare_stream(&exp.data.test, config.stream, &exp.data)?;
        let eval = evaluate(&model, &test)?;
        println!("{} stream={} top1={:.4}", path.display(), config.stream.as_str(), eval.top1);
        scores.push(eval.scores()?);
        labels.get_or_insert(eval.labels);
    }
    let fusion = fuse_streams(&scores, labels.as_deref().unwrap_or_default())?;
    println!("fused streams={} top1={:.4}", models.len(), fusion.top1);
    Ok(())
}

fn cmd_generate_data(common: &Common) -> Result<()> {
    let config = common.config()?;
    let out = common.out_dir()?.join("dataset.jsonl");
    let exp = Experiment::from_config(&config)?;
    exp.data.write_jsonl(BufWriter::new(File::create(&out)?))?;
    println!("wrote {} train and {} test sequences to {}", exp.data.train.len(), exp.data.test.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate_descriptions(
    common: &Common,
    corpus: &Path,
    kb: Option<&Path>,
    backend: BackendKind,
    out: &Path,
    endpoint: Option<&str>,
    timeout: Duration,
    retries: u32,
    synonyms: usize,
) -> Result<()> {
    let seed = common.seed.unwrap_or(0);
    let corpus = read_corpus(BufReader::new(File::open(corpus).with_context(|| format!("opening {}", corpus.display()))?))?;
    let kb = match kb {
        Some(path) => KnowledgeBase::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => KnowledgeBase::reference(),
    };
    let generator: Box<dyn Generator> = match backend {
        BackendKind::Mock => Box::new(MockBackend::new(seed)),
        BackendKind::Http => {
            let endpoint = endpoint.context("--endpoint is required with --backend http")?;
            Box::new(HttpBackend::new(endpoint, timeout, retries))
        }
    };
    let config = PipelineConfig {
        synonyms,
        ..Default::default()
    };
    let output = run_pipeline(&corpus, &kb, generator.as_ref(), &config)?;
    let mut writer = BufWriter::new(File::create(out).with_context(|| format!("creating {}", out.display()))?);
    write_records(&output.records, &mut writer)?;
    writer.flush()?;
    for w in &output.warnings {
        eprintln!("warning: class {}: {}", w.class_id, w.message);
    }
    println!("wrote {} records for {} signs to {}", output.records.len(), corpus.len(), out.display());
    Ok(())
}

fn cmd_grad_check(common: &Common, eps: f64, tolerance: f64) -> Result<bool> {
    let seed = common.seed.unwrap_or(1);
    let base = match &common.config {
        Some(path) => TrainConfig::load(path)?,
        None => grad_check_config(seed),
    };
    let config = base.with_overrides(&common.overrides)?;
    let report = objective_grad_check(&config, eps)?;
    for (i, e) in report.per_param.iter().enumerate() {
        println!("param {i}: max relative error {e:.3e}");
    }
    let pass = report.max_rel_error < tolerance;
    println!(
        "{} max relative error {:.3e} over {} coordinates (tolerance {tolerance:e})",
        if pass { "PASS" } else { "FAIL" },
        report.max_rel_error,
        report.coordinates
    );
    Ok(pass)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { common } => cmd_train(&common)?,
        Command::Evaluate { model, .. } => cmd_evaluate(&model)?,
        Command::Ablate { common } => cmd_ablate(&common)?,
        Command::Fuse { models, .. } => cmd_fuse(&models)?,
        Command::GenerateData { common } => cmd_generate_data(&common)?,
        Command::GenerateDescriptions {
            common,
            corpus,
            kb,
            backend,
            out,
            endpoint,
            timeout_secs,
            retries,
            synonyms,
        } => cmd_generate_descriptions(
            &common,
            &corpus,
            kb.as_deref(),
            backend,
            &out,
            endpoint.as_deref(),
            Duration::from_secs(timeout_secs),
            retries,
            synonyms,
        )?,
        Command::GradCheck { common, eps, tolerance } => return cmd_grad_check(&common, eps, tolerance),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
