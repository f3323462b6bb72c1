//! `wg`: command-line front end of the weight-generation pipeline.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use weightgen::codec::FlatWeights;
use weightgen::data::DATA_DIR_ENV;
use weightgen::diffusion::{self, SamplerConfig, SigmaPolicy};
use weightgen::pipeline::{self, Experiment, ExperimentConfig, Stage};
use weightgen::refine::{self, CandidateGenerator, DiffusionGenerator, LayerOrder, NoiseGenerator};
use weightgen::spectrum::{self, SelectConfig, SpectrumReport};
use weightgen::vae::ReconReport;
use weightgen::zoo::{self, Zoo};

#[derive(Parser)]
#[command(name = "wg", version, about = "Dataset-conditioned neural weight generation")]
struct Cli {
    /// Dataset root used when a config names neither `data_dir` nor synthetic data.
    #[arg(long, global = true, env = DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct StageArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ZooCmd {
    /// Train the configured zoo.
    Build(StageArgs),
    /// Mean eval accuracy per dataset of an existing zoo.
    Eval {
        #[arg(long)]
        zoo: PathBuf,
    },
}

#[derive(Subcommand)]
enum VaeCmd {
    /// Train the autoencoder on the experiment's zoo.
    Train(StageArgs),
    /// Median accuracy drop of reconstructed checkpoints.
    ReconReport {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum EncoderCmd {
    /// Contrastively align the set encoder with the weight latents.
    Align(StageArgs),
}

#[derive(Subcommand)]
enum DiffuseCmd {
    /// Train the latent diffusion model.
    Train(StageArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Sigma {
    Posterior,
    Zero,
}

#[derive(Clone, Copy, ValueEnum)]
enum Order {
    Snr,
    Manifest,
}

#[derive(Clone, Copy, ValueEnum)]
enum Generator {
    Diffusion,
    Noise,
}

#[derive(Subcommand)]
enum Command {
    #[command(subcommand)]
    Zoo(ZooCmd),
    #[command(subcommand)]
    Vae(VaeCmd),
    #[command(subcommand)]
    Encoder(EncoderCmd),
    #[command(subcommand)]
    Diffuse(DiffuseCmd),
    /// Sample weights for a dataset and report their accuracy.
    Sample {
        /// Experiment directory with trained models.
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        dataset: String,
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long, value_enum, default_value_t = Sigma::Posterior)]
        sigma: Sigma,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Reverse steps; all timesteps when omitted.
        #[arg(long)]
        steps: Option<usize>,
        /// Directory to write the sampled checkpoints to.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Rank the layers of a checkpoint by spectral SNR.
    Spectrum {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        fraction: f64,
        #[arg(long)]
        json: Option<PathBuf>,
        /// Fixed noise scale instead of the per-layer entry deviation.
        #[arg(long)]
        sigma: Option<f64>,
        /// Keep the first and last matrices eligible.
        #[arg(long)]
        all_layers: bool,
    },
    /// Greedy per-layer refinement of a checkpoint.
    Refine {
        #[arg(long)]
        init: PathBuf,
        /// Spectrum report whose selection is refined.
        #[arg(long)]
        layers: PathBuf,
        #[arg(long = "K", default_value_t = 10)]
        k: usize,
        /// Dataset whose validation split scores candidates.
        #[arg(long)]
        val: String,
        /// Experiment directory with trained models and data.
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Order::Snr)]
        order: Order,
        #[arg(long, value_enum, default_value_t = Generator::Diffusion)]
        generator: Generator,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write the log; stdout otherwise.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Where to write the refined weights.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run every configured stage.
    Run(StageArgs),
    /// Rebuild report.json / report.md from an experiment directory.
    Report { dir: PathBuf },
}

fn load_config(args: &StageArgs, data_dir: &Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_json_file(&args.config)
        .with_context(|| format!("reading config {}", args.config.display()))?;
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if cfg.data_dir.is_none() && cfg.synthetic.is_empty() {
        cfg.data_dir = data_dir.clone();
    }
    Ok(cfg)
}

fn run_stage(args: &StageArgs, data_dir: &Option<PathBuf>, stage: Stage) -> Result<()> {
    let exp = pipeline::prepare(&load_config(args, data_dir)?)?;
    exp.run_stage(stage)?;
    pipeline::write_hashes(&exp.dir)?;
    println!("{} stage done: {}", stage.name(), exp.dir.display());
    Ok(())
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn zoo_eval(dir: &Path) -> Result<()> {
    let zoo = Zoo::load(dir)?;
    let mut accs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in zoo.manifest.valid_records() {
        accs.entry(r.dataset_id.clone()).or_default().push(r.metrics.eval_acc);
    }
    let summary: BTreeMap<_, _> = accs
        .iter()
        .map(|(id, a)| (id.clone(), json!({ "records": a.len(), "mean_eval_acc": a.iter().sum::<f64>() / a.len() as f64 })))
        .collect();
    print_json(&json!(summary))
}

fn sample(dir: &Path, dataset: &str, n: usize, sigma: Sigma, seed: u64, steps: Option<usize>, save: Option<&Path>) -> Result<()> {
    let exp = Experiment::open(dir)?;
    let tasks = exp.tasks()?;
    let Some(task) = tasks.get(dataset) else {
        bail!("unknown dataset `{dataset}`; known: {:?}", tasks.keys().collect::<Vec<_>>());
    };
    let zoo = exp.zoo()?;
    let arch = &zoo.manifest.architecture;
    let (vae, model) = (exp.vae()?, exp.diffusion()?);
    let cond = if exp.cfg.conditional {
        Some(exp.dataset_embedding(&exp.encoder()?, task, seed)?)
    } else {
        None
    };
    let sampler = SamplerConfig {
        steps,
        sigma: match sigma {
            Sigma::Posterior => SigmaPolicy::DdpmPosterior,
            Sigma::Zero => SigmaPolicy::Zero,
        },
        seed,
    };
    let weights = diffusion::sample_weights(&vae, &model, cond.as_deref(), n, &sampler, &arch.shared_manifest())?;
    let accs = weights
        .iter()
        .map(|w| zoo::evaluate(w, arch, task))
        .collect::<weightgen::error::Result<Vec<f64>>>()?;
    if let Some(out) = save {
        for (i, w) in weights.iter().enumerate() {
            w.write(&out.join(format!("{dataset}-{i:03}.bin")), Some(&json!({ "dataset_id": dataset, "seed": seed, "index": i })))?;
        }
    }
    print_json(&json!({ "dataset": dataset, "seed": seed, "eval_acc": accs }))
}

fn spectrum_cmd(checkpoint: &Path, fraction: f64, json_out: Option<&Path>, sigma: Option<f64>, all_layers: bool) -> Result<()> {
    let (weights, _) = FlatWeights::read(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let cfg = SelectConfig {
        fraction,
        sigma: sigma.map_or(spectrum::SigmaPolicy::EntryStd, spectrum::SigmaPolicy::Fixed),
        exclude_embedding: !all_layers,
        exclude_output: !all_layers,
        ..Default::default()
    };
    let report = spectrum::rank_and_select(&weights, &cfg)?;
    for l in &report.layers {
        let mark = if report.selected.contains(&l.layer) { "*" } else { " " };
        println!("{mark} {:<32} {:>4}x{:<4} snr {:.4}", l.layer, l.shape.0, l.shape.1, l.snr);
    }
    if let Some(path) = json_out {
        report.write_json(path)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn refine_cmd(
    init: &Path,
    layers: &Path,
    k: usize,
    val: &str,
    dir: &Path,
    order: Order,
    generator: Generator,
    seed: u64,
    log: Option<&Path>,
    output: Option<&Path>,
) -> Result<()> {
    let exp = Experiment::open(dir)?;
    let (weights, _) = FlatWeights::read(init)?;
    let report = SpectrumReport::read_json(layers)?;
    let order = match order {
        Order::Snr => LayerOrder::Snr,
        Order::Manifest => LayerOrder::Manifest,
    };
    let names = refine::layer_order(&report, &weights, order);
    let tasks = exp.tasks()?;
    let Some(task) = tasks.get(val) else {
        bail!("unknown dataset `{val}`");
    };
    if task.splits.val.is_empty() {
        bail!("dataset `{val}` has no validation split (samples_per_class_val = 0)");
    }
    let arch = exp.zoo()?.manifest.architecture;
    let mut evaluator = |w: &FlatWeights| arch.accuracy(w, &task.splits.val);
    let (vae, model);
    let mut gen: Box<dyn CandidateGenerator + '_> = match generator {
        Generator::Noise => Box::new(NoiseGenerator::new(0.5, seed)),
        Generator::Diffusion => {
            vae = exp.vae()?;
            model = exp.diffusion()?;
            let cond = if exp.cfg.conditional {
                Some(exp.dataset_embedding(&exp.encoder()?, task, seed)?)
            } else {
                None
            };
            let sampler = SamplerConfig {
                seed,
                ..exp.cfg.sampler.clone()
            };
            Box::new(DiffusionGenerator::new(&vae, &model, cond, sampler))
        }
    };
    let state = refine::sequential_refine(&weights, &names, gen.as_mut(), &mut evaluator, k)?;
    match log {
        Some(path) => state.log.write_json(path)?,
        None => println!("{}", serde_json::to_string_pretty(&state.log)?),
    }
    if let Some(path) = output {
        state.weights.write(path, Some(&json!({ "refined_from": init.display().to_string(), "val_acc": state.log.current_accuracy })))?;
    }
    eprintln!(
        "validation accuracy {:.4} -> {:.4}",
        state.log.initial_accuracy, state.log.current_accuracy
    );
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let data_dir = cli.data_dir;
    match cli.command {
        Command::Zoo(ZooCmd::Build(a)) => run_stage(&a, &data_dir, Stage::Zoo),
        Command::Zoo(ZooCmd::Eval { zoo }) => zoo_eval(&zoo),
        Command::Vae(VaeCmd::Train(a)) => run_stage(&a, &data_dir, Stage::Vae),
        Command::Vae(VaeCmd::ReconReport { dir }) => {
            let path = dir.join("vae/recon.json");
            let report: ReconReport = serde_json::from_slice(
                &std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?,
            )?;
            print_json(&json!({
                "median_drop_points": report.median_drop_points,
                "overall_median_drop": report.overall_median_drop(),
                "records": report.entries.len(),
            }))
        }
        Command::Encoder(EncoderCmd::Align(a)) => run_stage(&a, &data_dir, Stage::Encoder),
        Command::Diffuse(DiffuseCmd::Train(a)) => run_stage(&a, &data_dir, Stage::Diffusion),
        Command::Sample {
            dir,
            dataset,
            n,
            sigma,
            seed,
            steps,
            save,
        } => sample(&dir, &dataset, n, sigma, seed, steps, save.as_deref()),
        Command::Spectrum {
            checkpoint,
            fraction,
            json,
            sigma,
            all_layers,
        } => spectrum_cmd(&checkpoint, fraction, json.as_deref(), sigma, all_layers),
        Command::Refine {
            init,
            layers,
            k,
            val,
            dir,
            order,
            generator,
            seed,
            log,
            output,
        } => refine_cmd(&init, &layers, k, &val, &dir, order, generator, seed, log.as_deref(), output.as_deref()),
        Command::Run(a) => {
            let dir = pipeline::run_pipeline(&load_config(&a, &data_dir)?)?;
            println!("experiment written to {}", dir.display());
            Ok(())
        }
        Command::Report { dir } => {
            let report = pipeline::report(&dir)?;
            println!("{}", pipeline::render_markdown(&report));
            Ok(())
        }
    }
}
