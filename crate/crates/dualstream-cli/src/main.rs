//! Command-line front end for the dualstream codec. Five batch commands:
//! `train` fits a model on synthetic or on-disk audio, `encode`/`decode`
//! move between WAV files and packed token streams, `eval` reports
//! reconstruction metrics with real-time factors, and `info` inspects
//! checkpoints or does bitrate arithmetic.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data or format
//! error, 4 numeric failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use dualstream::bitstream;
use dualstream::codec::checkpoint::{load_checkpoint, save_checkpoint};
use dualstream::codec::corpus::synth_corpus;
use dualstream::codec::train::{TrainConfig, Trainer};
use dualstream::codec::{Codec, CodecConfig, Variant};
use dualstream::dsp::wav::{read_wav, write_wav};
use dualstream::dsp::AudioBuffer;
use dualstream::metrics::{mcd, measure_rtf, mel_distance, si_snr, MetricReport};
use dualstream::{CodecError, Result};

// ── Argument definitions ────────────────────────────────────────────────────

#[derive(Parser)]
#[command(
    name = "dualstream",
    version,
    about = "Dual-stream neural audio codec: train, encode, decode, eval, info"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a codec and write a checkpoint.
    Train(TrainArgs),
    /// Encode a WAV file into a packed token stream.
    Encode(EncodeArgs),
    /// Decode a packed token stream back into a WAV file.
    Decode(DecodeArgs),
    /// Measure reconstruction metrics and real-time factors over a corpus.
    Eval(EvalArgs),
    /// Inspect a checkpoint, or compute bitrate for a layer layout.
    Info(InfoArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Optional TOML config file; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Codec frame rate: "25hz" or "12.5hz".
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Optimizer steps to run (0 writes the initialized model).
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output checkpoint path (required here or in the config file).
    #[arg(long)]
    out: Option<PathBuf>,
    /// "synthetic" or a directory of WAV files.
    #[arg(long)]
    corpus: Option<String>,
    /// Semantic-layer codebook size.
    #[arg(long)]
    rvq1_size: Option<usize>,
    /// Residual-layer codebook size.
    #[arg(long)]
    rest_size: Option<usize>,
    /// Total codebook layers including the semantic layer.
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Write a checkpoint every this many steps (and always at the end).
    #[arg(long)]
    ckpt_every: Option<u64>,
    /// Synthetic corpus size (utterances), when --corpus is "synthetic".
    #[arg(long)]
    synth_utts: Option<usize>,
    /// Synthetic utterance length in seconds.
    #[arg(long)]
    synth_seconds: Option<f64>,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Token layers to emit (default: all the model has).
    #[arg(long)]
    layers: Option<usize>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// "synthetic" or a directory of WAV files.
    #[arg(long, default_value = "synthetic")]
    corpus: String,
    /// Token layers to evaluate at (default: all the model has).
    #[arg(long)]
    layers: Option<usize>,
    /// Also write the report as JSON to this path.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Seed for the synthetic corpus.
    #[arg(long, default_value_t = 1234)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    synth_utts: usize,
    #[arg(long, default_value_t = 1.0)]
    synth_seconds: f64,
}

#[derive(Args)]
struct InfoArgs {
    /// Checkpoint to describe.
    #[arg(long, conflicts_with = "bitrate")]
    model: Option<PathBuf>,
    /// Bitrate arithmetic: frame rate followed by per-layer codebook sizes.
    #[arg(long, num_args = 2.., value_name = "RATE SIZES...")]
    bitrate: Option<Vec<String>>,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    match s {
        "25hz" => Ok(Variant::Hz25),
        "12.5hz" => Ok(Variant::Hz12_5),
        other => Err(format!("unknown variant {other:?}, expected \"25hz\" or \"12.5hz\"")),
    }
}

// ── Config file ─────────────────────────────────────────────────────────────

/// TOML keys mirror the train flags; unknown keys are rejected by name.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    variant: Option<Variant>,
    steps: Option<u64>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    corpus: Option<String>,
    rvq1_size: Option<usize>,
    rest_size: Option<usize>,
    n_layers: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    ckpt_every: Option<u64>,
    synth_utts: Option<usize>,
    synth_seconds: Option<f64>,
}

/// Fully resolved training options: flags beat file keys beat defaults.
struct TrainOpts {
    variant: Variant,
    steps: u64,
    seed: u64,
    out: PathBuf,
    corpus: String,
    rvq1_size: usize,
    rest_size: usize,
    n_layers: usize,
    batch_size: usize,
    lr: f64,
    ckpt_every: u64,
    synth_utts: usize,
    synth_seconds: f64,
}

impl TrainOpts {
    fn resolve(args: &TrainArgs) -> Result<TrainOpts> {
        let file: FileConfig = match &args.config {
            Some(p) => {
                let text = fs::read_to_string(p)?;
                toml::from_str(&text).map_err(|e| {
                    CodecError::config(format!("config file {}: {e}", p.display()))
                })?
            }
            None => FileConfig::default(),
        };
        let out = args
            .out
            .clone()
            .or(file.out)
            .ok_or_else(|| CodecError::config("no output checkpoint path (--out or `out` key)"))?;
        Ok(TrainOpts {
            variant: args.variant.or(file.variant).unwrap_or(Variant::Hz25),
            steps: args.steps.or(file.steps).unwrap_or(1000),
            seed: args.seed.or(file.seed).unwrap_or(0),
            out,
            corpus: args.corpus.clone().or(file.corpus).unwrap_or_else(|| "synthetic".into()),
            rvq1_size: args.rvq1_size.or(file.rvq1_size).unwrap_or(1024),
            rest_size: args.rest_size.or(file.rest_size).unwrap_or(1024),
            n_layers: args.n_layers.or(file.n_layers).unwrap_or(8),
            batch_size: args.batch_size.or(file.batch_size).unwrap_or(4),
            lr: args.lr.or(file.lr).unwrap_or(1e-4),
            ckpt_every: args.ckpt_every.or(file.ckpt_every).unwrap_or(500),
            synth_utts: args.synth_utts.or(file.synth_utts).unwrap_or(16),
            synth_seconds: args.synth_seconds.or(file.synth_seconds).unwrap_or(1.0),
        })
    }

    fn echo(&self) {
        println!("resolved train config:");
        println!("  variant = {}", self.variant);
        println!("  steps = {}", self.steps);
        println!("  seed = {}", self.seed);
        println!("  out = {}", self.out.display());
        println!("  corpus = {}", self.corpus);
        println!("  rvq1_size = {}", self.rvq1_size);
        println!("  rest_size = {}", self.rest_size);
        println!("  n_layers = {}", self.n_layers);
        println!("  batch_size = {}", self.batch_size);
        println!("  lr = {}", self.lr);
        println!("  ckpt_every = {}", self.ckpt_every);
        println!("  synth_utts = {}", self.synth_utts);
        println!("  synth_seconds = {}", self.synth_seconds);
    }
}

// ── Corpus loading ──────────────────────────────────────────────────────────

/// "synthetic" makes a deterministic corpus; anything else is read as a
/// directory scanned recursively for WAV files, sorted for determinism.
fn load_corpus(
    spec: &str,
    seed: u64,
    n_utts: usize,
    seconds: f64,
    sample_rate: u32,
) -> Result<Vec<AudioBuffer>> {
    if spec == "synthetic" {
        return Ok(synth_corpus(seed, n_utts, seconds, sample_rate));
    }
    let dir = Path::new(spec);
    if !dir.is_dir() {
        return Err(CodecError::config(format!(
            "corpus {spec:?} is neither \"synthetic\" nor a directory"
        )));
    }
    let mut paths: Vec<PathBuf> = walkdir::WalkDir::new(dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| {
            p.extension().and_then(|s| s.to_str()).is_some_and(|s| s.eq_ignore_ascii_case("wav"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CodecError::config(format!("no WAV files under {}", dir.display())));
    }
    paths.iter().map(|p| read_wav(p)).collect()
}

// ── Commands ────────────────────────────────────────────────────────────────

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let opts = TrainOpts::resolve(args)?;
    opts.echo();

    let mut config = CodecConfig::with_variant(opts.variant);
    config.n_layers = opts.n_layers;
    config.rvq1_size = opts.rvq1_size;
    config.rest_size = opts.rest_size;

    let corpus = load_corpus(
        &opts.corpus,
        opts.seed,
        opts.synth_utts,
        opts.synth_seconds,
        config.sample_rate,
    )?;
    println!("corpus: {} utterances", corpus.len());

    let model = Codec::new(config, opts.seed)?;
    println!("model: {} parameters", model.store.total_params());

    let train_cfg = TrainConfig {
        batch_size: opts.batch_size,
        lr: opts.lr,
        seed: opts.seed,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, &corpus, train_cfg)?;
    println!("segments: {}", trainer.n_segments());

    let log_path = PathBuf::from(format!("{}.losses.log", opts.out.display()));
    let mut log = fs::OpenOptions::new().create(true).append(true).open(&log_path)?;

    for step in 1..=opts.steps {
        let report = trainer.step()?;
        writeln!(log, "{}", report.format_line())?;
        if step == 1 || step % 100 == 0 || step == opts.steps {
            println!("{}", report.format_line());
        }
        if opts.ckpt_every > 0 && step % opts.ckpt_every == 0 {
            save_checkpoint(&opts.out, &trainer.model)?;
        }
    }
    log.flush()?;
    save_checkpoint(&opts.out, &trainer.model)?;
    println!("checkpoint written to {}", opts.out.display());
    println!("loss log written to {}", log_path.display());
    Ok(())
}

fn cmd_encode(args: &EncodeArgs) -> Result<()> {
    let model = load_checkpoint(&args.model)?;
    let audio = read_wav(&args.input)?;
    let layers = args.layers.unwrap_or(model.config.n_layers);
    let tokens = model.encode(&audio, layers)?;
    let bytes = bitstream::serialize(&tokens)?;
    fs::write(&args.out, &bytes)?;

    let bps = bitstream::bitrate_bps(tokens.frame_rate, &tokens.layer_sizes)?;
    println!(
        "encoded {} frames x {} layers ({} bytes, {:.2} kbps, {} tok/s) to {}",
        tokens.frames(),
        tokens.n_layers(),
        bytes.len(),
        bitstream::kbps_rounded(bps),
        bitstream::tokens_per_second(tokens.frame_rate, tokens.n_layers()),
        args.out.display()
    );
    Ok(())
}

fn cmd_decode(args: &DecodeArgs) -> Result<()> {
    let model = load_checkpoint(&args.model)?;
    let bytes = fs::read(&args.input)?;
    let tokens = bitstream::deserialize(&bytes)?;
    let audio = model.decode(&tokens)?;
    write_wav(&args.out, &audio)?;
    println!(
        "decoded {} frames to {:.3} s of audio at {}",
        tokens.frames(),
        audio.duration_secs(),
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let model = load_checkpoint(&args.model)?;
    let corpus = load_corpus(
        &args.corpus,
        args.seed,
        args.synth_utts,
        args.synth_seconds,
        model.config.sample_rate,
    )?;
    let layers = args.layers.unwrap_or(model.config.n_layers);
    println!("eval: {} files at {} layers", corpus.len(), layers);

    let mut sum_mcd = 0.0;
    let mut sum_mel = 0.0;
    let mut sum_si = 0.0;
    let mut all_tokens = Vec::with_capacity(corpus.len());
    for audio in &corpus {
        let tokens = model.encode(audio, layers)?;
        let decoded = model.decode(&tokens)?;
        sum_mcd += mcd(audio, &decoded)?;
        sum_mel += mel_distance(audio, &decoded, &model.config.mel_loss_scales)?;
        sum_si += si_snr(audio, &decoded)?;
        all_tokens.push(tokens);
    }
    let n = corpus.len() as f64;

    let rtf_encode = measure_rtf(
        |a| {
            let _ = model.encode(a, layers);
        },
        &corpus,
    );
    let mut idx = 0;
    let rtf_decode = measure_rtf(
        |_| {
            let _ = model.decode(&all_tokens[idx]);
            idx += 1;
        },
        &corpus,
    );

    let report = MetricReport {
        mcd: sum_mcd / n,
        mel_distance: sum_mel / n,
        si_snr: sum_si / n,
        rtf_encode,
        rtf_decode,
        n_files: corpus.len(),
    };
    report.validate()?;
    print!("{}", report.key_value_lines());
    if let Some(path) = &args.report {
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| CodecError::format(format!("could not serialize report: {e}")))?;
        fs::write(path, json)?;
        println!("report written to {}", path.display());
    }
    Ok(())
}

fn cmd_info(args: &InfoArgs) -> Result<()> {
    match (&args.model, &args.bitrate) {
        (Some(path), None) => {
            let model = load_checkpoint(path)?;
            let c = &model.config;
            let sizes = c.layer_sizes(c.n_layers);
            let bps = bitstream::bitrate_bps(c.frame_rate(), &sizes)?;
            println!("variant = {}", c.variant);
            println!("n_layers = {}", c.n_layers);
            println!("rvq1_size = {}", c.rvq1_size);
            println!("rest_size = {}", c.rest_size);
            println!("h = {}", c.h);
            println!("d = {}", c.d);
            println!("sample_rate = {}", c.sample_rate);
            println!("frame_rate = {}", c.frame_rate());
            println!("total_params = {}", model.store.total_params());
            println!("bitrate_bps = {bps}");
            println!("kbps = {:.2}", bitstream::kbps_rounded(bps));
            println!(
                "tokens_per_second = {}",
                bitstream::tokens_per_second(c.frame_rate(), c.n_layers)
            );
            Ok(())
        }
        (None, Some(values)) => {
            let rate: f64 = values[0]
                .parse()
                .map_err(|_| CodecError::config(format!("bad frame rate {:?}", values[0])))?;
            let sizes: Vec<u32> = values[1..]
                .iter()
                .map(|v| {
                    v.parse().map_err(|_| CodecError::config(format!("bad codebook size {v:?}")))
                })
                .collect::<Result<_>>()?;
            let bps = bitstream::bitrate_bps(rate, &sizes)?;
            println!(
                "{:.2} kbps, {} tok/s",
                bitstream::kbps_rounded(bps),
                bitstream::tokens_per_second(rate, sizes.len())
            );
            Ok(())
        }
        _ => Err(CodecError::config("info needs exactly one of --model or --bitrate")),
    }
}

// ── Entry point ─────────────────────────────────────────────────────────────

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Encode(args) => cmd_encode(args),
        Command::Decode(args) => cmd_decode(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Info(args) => cmd_info(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                CodecError::Config(_) => 2,
                CodecError::Io(_) | CodecError::Format(_) => 3,
                CodecError::Numeric(_) => 4,
            };
            ExitCode::from(code)
        }
    }
}
