//! `scoretok`: train, evaluate and inspect learned-boundary byte models.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use scoretok::checkpoint::Checkpoint;
use scoretok::config::RunConfig;
use scoretok::data::{self, SyntheticSpec};
use scoretok::eval::{self, EvalBoundaries, ParamCensus, RenderFormat};
use scoretok::objective::StepMetrics;
use scoretok::policy::{uniform_baseline_mask, Mode};
use scoretok::train::{StopReason, Trainer};

#[derive(Parser)]
#[command(name = "scoretok", version, about = "Byte-level language models with learned token boundaries")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Corpus preparation.
    #[command(subcommand)]
    Data(DataCommand),
    /// Bits-per-byte and boundary statistics of a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Evenly spaced boundary mask.
    Baseline {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        rate: f64,
    },
    /// Training FLOPs per sequence of `n` bytes and `m` tokens.
    Flops {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        n: u64,
        #[arg(long)]
        m: u64,
    },
}

#[derive(Subcommand)]
enum DataCommand {
    /// Generate a Zipf-word corpus with ground-truth word starts.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Filter, truncate and shuffle a corpus.
    Ingest {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        min_len: usize,
        #[arg(long)]
        target_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file (binary corpus format); defaults to `<in>.ingested`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Train,
    Eval,
}

#[derive(Clone, Copy, ValueEnum)]
enum BoundaryArg {
    Sample,
    Threshold,
    Uniform,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Ground-truth word starts, one line of offsets per document.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Eval)]
    mode: ModeArg,
    #[arg(long, value_enum, default_value_t = BoundaryArg::Sample)]
    boundaries: BoundaryArg,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the first document colored by boundary probability; `.html`
    /// selects HTML, anything else ANSI.
    #[arg(long)]
    render: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, resume } => train(&config, resume.as_deref()),
        Command::Data(DataCommand::Synth { spec, out }) => synth(&spec, &out),
        Command::Data(DataCommand::Ingest {
            input,
            min_len,
            target_len,
            seed,
            out,
        }) => ingest(&input, min_len, target_len, seed, out),
        Command::Eval(args) => evaluate(&args),
        Command::Baseline { n, rate } => baseline(n, rate),
        Command::Flops { config, n, m } => flops(&config, n, m),
    }
}

fn train(config_path: &Path, resume: Option<&Path>) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.config != config {
                bail!("checkpoint {} was written with a different configuration", path.display());
            }
            Trainer::from_checkpoint(ckpt)?
        }
        None => Trainer::new(config.clone())?,
    };
    let data_path = resolve(config_path, &config.train.data);
    let out_dir = resolve(config_path, &config.train.out_dir);
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let seqs = data::read_corpus(&data_path)?;
    let mut batcher = trainer.batcher(seqs)?;

    let metrics_path = out_dir.join("metrics.csv");
    let fresh = resume.is_none() || !metrics_path.exists();
    if !fresh {
        keep_rows_through(&metrics_path, trainer.step)?;
    }
    let mut metrics = OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(&metrics_path)?;
    if fresh {
        writeln!(metrics, "{}", StepMetrics::CSV_HEADER)?;
    }
    let every = config.train.checkpoint_every.max(1);
    let stop = trainer.run(&mut batcher, |m, t| {
        writeln!(metrics, "{}", m.csv_row()).map_err(|e| scoretok::Error::Io {
            path: metrics_path.clone(),
            source: e,
        })?;
        if m.step % every == 0 {
            t.checkpoint().save(&out_dir.join(format!("ckpt-{:06}.bin", m.step)))?;
        }
        Ok(())
    })?;
    trainer.checkpoint().save(&out_dir.join("last.bin"))?;
    match stop {
        StopReason::Budget => println!("finished {} steps, {} bytes", trainer.step, trainer.bytes_seen),
        StopReason::DataExhausted => println!(
            "data exhausted after {} steps, {} of {} bytes",
            trainer.step, trainer.bytes_seen, config.train.training_bytes
        ),
    }
    Ok(())
}

/// Drops metrics rows written after `step`, left over from the run being
/// resumed.
fn keep_rows_through(path: &Path, step: u64) -> Result<()> {
    let text = fs::read_to_string(path)?;
    let mut kept = String::new();
    for (i, line) in text.lines().enumerate() {
        let row_step = line.split(',').next().and_then(|f| f.parse::<u64>().ok());
        if i == 0 || row_step.is_some_and(|s| s <= step) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

/// Paths in a config file are relative to the file.
fn resolve(config_path: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn synth(spec_path: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(spec_path).with_context(|| format!("reading {}", spec_path.display()))?;
    let spec: SyntheticSpec = toml::from_str(&text)?;
    let corpus = data::gen_synthetic(&spec, spec.n_docs + spec.heldout_docs, spec.doc_len)?;
    fs::create_dir_all(out)?;
    let total = corpus.docs.len();
    for (name, part) in [
        ("train", corpus.slice(0..spec.n_docs)),
        ("heldout", corpus.slice(spec.n_docs..total)),
    ] {
        data::write_text_corpus(&out.join(format!("{name}.txt")), &part.docs)?;
        fs::write(out.join(format!("{name}.boundaries")), part.boundaries_text())?;
    }
    let words: Vec<String> = spec.words()?.iter().map(|w| String::from_utf8_lossy(w).into_owned()).collect();
    fs::write(out.join("lexicon.txt"), words.join("\n") + "\n")?;
    fs::write(
        out.join("manifest.toml"),
        format!(
            "# documents 0..{n} are train.txt, {n}..{total} are heldout.txt\n{}",
            toml::to_string(&spec)?,
            n = spec.n_docs
        ),
    )?;
    println!("wrote {} train and {} held-out documents to {}", spec.n_docs, spec.heldout_docs, out.display());
    Ok(())
}

fn ingest(input: &Path, min_len: usize, target_len: usize, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let docs = data::read_corpus(input)?;
    let total = docs.len();
    let kept = data::ingest(docs, min_len, target_len, seed)?;
    let out = out.unwrap_or_else(|| input.with_extension("ingested"));
    data::write_binary_corpus(&out, &kept)?;
    let bytes: usize = kept.iter().map(Vec::len).sum();
    println!("kept {} of {total} documents, {bytes} bytes -> {}", kept.len(), out.display());
    Ok(())
}

fn evaluate(args: &EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let model = ckpt.model()?;
    let docs = data::read_corpus(&args.data)?;
    let labels = match &args.labels {
        Some(path) => {
            let lens: Vec<usize> = docs.iter().map(Vec::len).collect();
            Some(data::parse_boundaries(&fs::read_to_string(path)?, &lens)?)
        }
        None => None,
    };
    let mode = match args.mode {
        ModeArg::Train => Mode::Train,
        ModeArg::Eval => Mode::Eval,
    };
    let boundaries = match args.boundaries {
        BoundaryArg::Sample => EvalBoundaries::Sample(args.seed),
        BoundaryArg::Threshold => EvalBoundaries::Threshold(args.threshold),
        BoundaryArg::Uniform => EvalBoundaries::Uniform,
    };
    let report = eval::evaluate(&model, &docs, labels.as_deref(), mode, boundaries)?;
    println!("{}", eval::EvalReport::CSV_HEADER);
    println!("{}", report.csv_row());
    if let Some(path) = &args.render {
        let Some(doc) = docs.iter().find(|d| !d.is_empty()) else {
            bail!("nothing to render");
        };
        let probs = eval::boundary_probabilities(&model, doc, mode, boundaries)?;
        let format = if path.extension().is_some_and(|e| e == "html") {
            RenderFormat::Html
        } else {
            RenderFormat::Ansi
        };
        fs::write(path, eval::render_boundaries(doc, &probs, format)?)?;
    }
    Ok(())
}

fn baseline(n: usize, rate: f64) -> Result<()> {
    if n == 0 || !(rate > 0.0 && rate <= 1.0) {
        bail!("need n > 0 and 0 < rate <= 1");
    }
    let mask = uniform_baseline_mask(n, rate);
    let positions: Vec<String> = (0..n).filter(|&i| mask[i]).map(|i| i.to_string()).collect();
    println!("{}", positions.len());
    println!("{}", positions.join(","));
    Ok(())
}

fn flops(config_path: &Path, n: u64, m: u64) -> Result<()> {
    if m > n {
        bail!("m must not exceed n");
    }
    let config = RunConfig::load(config_path)?;
    let census = ParamCensus::of_config(&config.model)?;
    println!("p_byte,p_token,n,m,flops");
    println!("{},{},{n},{m},{}", census.byte, census.token, census.flops_per_sequence(n, m));
    Ok(())
}
