use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use volsynth::io;
use volsynth::mcdpm::ModeProbabilities;
use volsynth::pipeline::{self, PipelineConfig, Stage};

/// Paired 3-D mask and image volume synthesis.
#[derive(Parser)]
#[command(name = "volsynth", version)]
struct Cli {
    /// JSON pipeline config; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Start from the small smoke-test preset instead of the defaults.
    #[arg(long, global = true)]
    tiny: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoints: Option<PathBuf>,
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the phantom dataset and its manifest.
    MakeData {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train one stage.
    Train(TrainArgs),
    /// Generate refined mask/image pairs.
    Synthesize(SynthArgs),
    /// Score synthetic pairs against the real data.
    Evaluate {
        /// Skip the downstream segmentation study.
        #[arg(long)]
        no_downstream: bool,
    },
    /// Write PNG slice grids for a stored volume pair.
    ExportSlices {
        /// Volume stem, e.g. `output/synth_0`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Print the effective config as JSON.
    PrintConfig,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Mask,
    Image,
    Refiner,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    stage: StageArg,
    /// Total optimizer steps (per view for the refiner).
    #[arg(long)]
    steps: Option<usize>,
    /// Continue from an existing checkpoint.
    #[arg(long)]
    resume: bool,
    /// Forward, backward and unconditional probabilities, e.g. `0.4,0.4,0.2`.
    #[arg(long, value_parser = parse_probs)]
    mode_probs: Option<ModeProbabilities>,
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long)]
    guidance_scale: Option<f64>,
    #[arg(long)]
    refine_steps: Option<usize>,
    /// Output depth in slices.
    #[arg(long)]
    depth: Option<usize>,
}

fn parse_probs(s: &str) -> std::result::Result<ModeProbabilities, String> {
    let v: Vec<f64> = s.split(',').map(|x| x.trim().parse::<f64>().map_err(|e| e.to_string())).collect::<std::result::Result<_, _>>()?;
    match v.as_slice() {
        [f, b, u] => ModeProbabilities::new(*f, *b, *u).map_err(|e| e.to_string()),
        _ => Err("expected three comma-separated probabilities".into()),
    }
}

fn effective_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => io::read_json(p).with_context(|| format!("reading config {}", p.display()))?,
        None if cli.tiny => PipelineConfig::tiny(),
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(p) = &cli.data {
        cfg.paths.data = p.clone();
    }
    if let Some(p) = &cli.checkpoints {
        cfg.paths.checkpoints = p.clone();
    }
    if let Some(p) = &cli.output {
        cfg.paths.output = p.clone();
    }
    match &cli.cmd {
        Cmd::MakeData { count: Some(c) } => cfg.count = *c,
        Cmd::Train(a) => {
            if let Some(p) = a.mode_probs {
                cfg.mask.mode_probs = p;
            }
            match a.stage {
                StageArg::Mask => {
                    cfg.mask.steps = a.steps.unwrap_or(cfg.mask.steps);
                    cfg.mask.batch = a.batch.unwrap_or(cfg.mask.batch);
                }
                StageArg::Image => {
                    cfg.image.steps = a.steps.unwrap_or(cfg.image.steps);
                    cfg.image.batch = a.batch.unwrap_or(cfg.image.batch);
                }
                StageArg::Refiner => {
                    cfg.refiner.steps = a.steps.unwrap_or(cfg.refiner.steps);
                    cfg.refiner.batch = a.batch.unwrap_or(cfg.refiner.batch);
                }
            }
        }
        Cmd::Synthesize(a) => {
            if let Some(s) = a.guidance_scale {
                cfg.mask.guidance = s;
            }
            if let Some(k) = a.refine_steps {
                cfg.refiner.k = k;
            }
            if a.depth.is_some() {
                cfg.mask.depth = a.depth;
            }
        }
        Cmd::Evaluate { no_downstream: true } => cfg.eval.downstream = false,
        _ => {}
    }
    cfg.validate().context("invalid configuration")?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Cmd::ExportSlices { input, out_dir } = &cli.cmd {
        let mask = io::read_mask(input).ok().map(|m| m.0);
        let image = io::read_image(input).ok().map(|i| i.0);
        if mask.is_none() && image.is_none() {
            bail!("no mask or image volume found at {}", input.display());
        }
        let prefix = input.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "volume".into());
        for f in volsynth::export::export_slices(out_dir, &prefix, mask.as_ref(), image.as_ref())? {
            println!("{}", f.display());
        }
        return Ok(());
    }
    let cfg = effective_config(&cli)?;
    match &cli.cmd {
        Cmd::PrintConfig => println!("{}", serde_json::to_string_pretty(&cfg)?),
        Cmd::MakeData { .. } => {
            let m = pipeline::cmd_make_data(&cfg)?;
            println!("wrote {} train and {} val pairs to {}", m.train.len(), m.val.len(), cfg.paths.data.display());
        }
        Cmd::Train(a) => {
            let stage = match a.stage {
                StageArg::Mask => Stage::Mask,
                StageArg::Image => Stage::Image,
                StageArg::Refiner => Stage::Refiner,
            };
            let s = pipeline::cmd_train(&cfg, stage, a.resume)?;
            for (kind, from, to) in &s.models {
                println!("{kind}: steps {from} -> {to}");
            }
            if let Some(l) = s.final_loss {
                println!("final loss {l:.6}");
            }
        }
        Cmd::Synthesize(a) => {
            let seeds: Vec<u64> = (0..a.count as u64).map(|i| cfg.seed + i).collect();
            let p = pipeline::cmd_synthesize(&cfg, &seeds)?;
            for v in &p.volumes {
                println!("{} (seed {})", cfg.paths.output.join(&v.stem).display(), v.seed);
            }
        }
        Cmd::Evaluate { .. } => {
            let r = pipeline::cmd_evaluate(&cfg)?;
            print!("{}", r.to_text());
        }
        Cmd::ExportSlices { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
