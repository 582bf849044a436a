//! `defdr`: command-line front end for the patch-attack and defense toolkit.
//!
//! Exit codes: 0 on success, 2 on a configuration or usage error, 3 when a
//! pipeline stage fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use defdr_core::attacks::{EotParams, PatchOptimizer, PatchTrainConfig, TrainedPatch};
use defdr_core::classifier::{accuracy, load_checkpoint, save_checkpoint, train, ClassifierModel, TrainConfig};
use defdr_core::defense::{DefenseMethod, DEFAULT_BLOCK};
use defdr_core::harness::{
    run_experiment, train_patch_for, AttackConfig, AttackKind, ExperimentConfig, DEFAULT_TARGET_CLASS,
};
use defdr_core::manifest::{load_manifest, write_dataset};
use defdr_core::ppm::{read_ppm_file, write_ppm_file};
use defdr_core::report::{
    render_published_comparison, EvalReport, ReportFormat, PUBLISHED_GOOGLEAP_CSV, PUBLISHED_LAVAN_CSV,
};
use defdr_core::shapes::gen_shapes_dataset;
use defdr_core::svd::MassMode;
use defdr_core::tsne::{Kernel, TsneConfig};
use defdr_core::tuning::{parse_grid, tune_info, TuneConfig};
use defdr_core::{Error, LabeledDataset, Prng};

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "defdr", version, about = "Adversarial patch attacks and dimensionality-reduction defenses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic shapes dataset as PPM files plus manifest.csv.
    GenData {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        side: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the classifier and write a checkpoint.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, default_value_t = 42)]
        train_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a universal patch against a checkpoint.
    Attack {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value_t = AttackArg::Googleap)]
        kind: AttackArg,
        #[arg(long, default_value_t = 8)]
        size: usize,
        #[arg(long, default_value_t = DEFAULT_TARGET_CLASS)]
        target: usize,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 0.02)]
        lr: f64,
        #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
        optimizer: OptimizerArg,
        #[arg(long, default_value_t = 0)]
        attack_seed: u64,
        /// Directory receiving `<stem>.ppm` and `<stem>.json`.
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "patch")]
        stem: String,
    },
    /// Apply a defense to one PPM image.
    Defend {
        #[command(flatten)]
        method: MethodArgs,
        #[arg(long)]
        info: f64,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Sweep the information fraction and print the tuning table as CSV.
    Tune {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Patch PPM; its sidecar is the same path with a .json extension.
        #[arg(long)]
        patch: PathBuf,
        #[command(flatten)]
        method: MethodArgs,
        #[arg(long, default_value = "0.90:0.99:0.01")]
        grid: String,
        #[arg(long, default_value_t = 0.02)]
        tolerance: f64,
        /// Fine-tune the model on defended images before the sweep.
        #[arg(long)]
        fine_tune: bool,
        #[arg(long, default_value_t = 0)]
        tune_seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a full experiment from a JSON config.
    Run {
        /// Experiment config; the built-in desk config is used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a report CSV as markdown, CSV or SVG.
    Report {
        /// Report CSV written by `run`.
        #[arg(long, conflicts_with = "published", required_unless_present = "published")]
        input: Option<PathBuf>,
        /// Render one of the bundled published tables instead.
        #[arg(long, value_enum)]
        published: Option<PublishedArg>,
        #[arg(long, value_enum, default_value_t = FormatArg::Markdown)]
        format: FormatArg,
        /// Config the report must have been produced with.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Render even when config hashes do not match.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset manifest (`path,label` CSV); generated from the options below
    /// when omitted.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    data_seed: u64,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 32)]
    side: usize,
}

#[derive(Args, Debug)]
struct MethodArgs {
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long, value_enum, default_value_t = MassArg::Sigma)]
    mass: MassArg,
    #[arg(long, default_value_t = DEFAULT_BLOCK)]
    block: usize,
    #[arg(long, default_value_t = 10.0)]
    perplexity: f64,
    #[arg(long, default_value_t = 2)]
    embed_dim: usize,
    #[arg(long, value_enum, default_value_t = KernelArg::StudentT)]
    kernel: KernelArg,
    #[arg(long, default_value_t = 0)]
    tsne_seed: u64,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum AttackArg {
    Lavan,
    Googleap,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum OptimizerArg {
    Gradient,
    Adam,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum MethodArg {
    Svd,
    Tsne,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum MassArg {
    Sigma,
    Energy,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum KernelArg {
    StudentT,
    Gaussian,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum FormatArg {
    Markdown,
    Csv,
    Svg,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum PublishedArg {
    Googleap,
    Lavan,
}

impl MethodArgs {
    fn to_method(&self) -> DefenseMethod {
        match self.method {
            MethodArg::Svd => DefenseMethod::Svd {
                mode: match self.mass {
                    MassArg::Sigma => MassMode::Sigma,
                    MassArg::Energy => MassMode::Energy,
                },
            },
            MethodArg::Tsne => DefenseMethod::Tsne {
                tsne: TsneConfig {
                    perplexity: self.perplexity,
                    embed_dim: self.embed_dim,
                    kernel: match self.kernel {
                        KernelArg::StudentT => Kernel::StudentT,
                        KernelArg::Gaussian => Kernel::Gaussian,
                    },
                    seed: self.tsne_seed,
                    ..TsneConfig::default()
                },
                block: self.block,
            },
        }
    }
}

impl DataArgs {
    fn load(&self) -> defdr_core::Result<LabeledDataset> {
        match &self.manifest {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.clone(), source })?;
                load_manifest(&text, path.parent().unwrap_or(Path::new(".")))
            }
            None => gen_shapes_dataset(self.data_seed, self.count, self.side),
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn load_model(path: &Path) -> Result<ClassifierModel> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(load_checkpoint(&bytes)?)
}

fn emit(text: &str, output: Option<&Path>) -> Result<()> {
    match output {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { seed, count, side, out } => {
            let ds = gen_shapes_dataset(seed, count, side).map_err(|e| e.in_stage("generate"))?;
            write_dataset(&ds, &out).map_err(|e| e.in_stage("write"))?;
            println!("wrote {count} images to {}", out.display());
        }
        Command::Train { data, epochs, batch_size, lr, momentum, train_seed, out } => {
            let cfg = TrainConfig { epochs, batch_size, learning_rate: lr, momentum, seed: train_seed };
            cfg.validate().map_err(|e| config_err(e.to_string()))?;
            let ds = data.load().map_err(|e| e.in_stage("load"))?;
            let (model, history) = train(&ds, &cfg).map_err(|e| e.in_stage("train"))?;
            fs::write(&out, save_checkpoint(&model)).with_context(|| format!("writing {}", out.display()))?;
            let acc = accuracy(&model, &ds)?;
            println!(
                "final loss {:.4}, train accuracy {:.3}, checkpoint {}",
                history.last().copied().unwrap_or(f64::NAN),
                acc,
                out.display()
            );
        }
        Command::Attack { model, data, kind, size, target, epochs, lr, optimizer, attack_seed, out_dir, stem } => {
            let model = load_model(&model)?;
            let ds = data.load().map_err(|e| e.in_stage("load"))?;
            let attack = AttackConfig {
                kind: match kind {
                    AttackArg::Lavan => AttackKind::Lavan,
                    AttackArg::Googleap => AttackKind::Googleap,
                },
                target_class: target,
                train_images: ds.len(),
                eot: EotParams::default(),
                training: PatchTrainConfig {
                    epochs,
                    learning_rate: lr,
                    optimizer: match optimizer {
                        OptimizerArg::Gradient => PatchOptimizer::Gradient,
                        OptimizerArg::Adam => PatchOptimizer::Adam,
                    },
                },
            };
            let side = model.image_side();
            let patch = train_patch_for(&model, &ds, &attack, size, side, &mut Prng::new(attack_seed))
                .map_err(|e| e.in_stage("attack"))?;
            patch.save(&out_dir, &stem, attack_seed).map_err(|e| e.in_stage("write"))?;
            println!("targeted success on training images {:.3}", patch.final_success_rate);
        }
        Command::Defend { method, info, input, output } => {
            let method = method.to_method();
            let img = read_ppm_file(&input).map_err(|e| e.in_stage("read"))?;
            if img.height() != img.width() {
                bail!(config_err("defend expects a square image"));
            }
            method.validate(img.height()).map_err(|e| config_err(e.to_string()))?;
            let out = method.apply(&img, info).map_err(|e| match e {
                Error::InvalidArgument(m) => config_err(m),
                other => other.in_stage("defend"),
            })?;
            write_ppm_file(&output, &out).map_err(|e| e.in_stage("write"))?;
        }
        Command::Tune { model, data, patch, method, grid, tolerance, fine_tune, tune_seed, out } => {
            let model = load_model(&model)?;
            let ds = data.load().map_err(|e| e.in_stage("load"))?;
            let (patch, _) =
                TrainedPatch::load(&patch, &patch.with_extension("json")).map_err(|e| e.in_stage("load"))?;
            let method = method.to_method();
            method.validate(model.image_side()).map_err(|e| config_err(e.to_string()))?;
            let cfg = TuneConfig {
                grid: parse_grid(&grid)?,
                tolerance,
                fine_tune: fine_tune.then(|| defdr_core::tuning::default_fine_tune(tune_seed)),
            };
            cfg.validate().map_err(|e| config_err(e.to_string()))?;
            let result = tune_info(&model, &ds, &patch, &method, &cfg, &mut Prng::new(tune_seed))
                .map_err(|e| e.in_stage("tune"))?;
            emit(&result.to_csv(), out.as_deref())?;
            eprintln!(
                "chosen I = {} (constraint {})",
                result.chosen_info,
                if result.constraint_satisfied { "satisfied" } else { "not satisfied" }
            );
        }
        Command::Run { config, out } => {
            let mut cfg = match &config {
                Some(path) => ExperimentConfig::load(path).map_err(|e| match e {
                    Error::Io { .. } => config_err(e.to_string()),
                    other => other,
                })?,
                None => {
                    let mut cfg = ExperimentConfig::default();
                    cfg.apply_seed_override(std::env::var(defdr_core::harness::SEED_ENV).ok().as_deref())?;
                    cfg
                }
            };
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            let result = run_experiment(&cfg)?;
            print!("{}", result.report.render(ReportFormat::Markdown)?);
            println!("artifacts written to {}", cfg.output_dir.display());
        }
        Command::Report { input, published, format, config, force, output } => {
            let text = match (&input, published) {
                (Some(path), _) => fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
                (None, Some(PublishedArg::Googleap)) => PUBLISHED_GOOGLEAP_CSV.to_string(),
                (None, Some(PublishedArg::Lavan)) => PUBLISHED_LAVAN_CSV.to_string(),
                (None, None) => bail!(config_err("either --input or --published is required")),
            };
            let report = EvalReport::from_csv(&text)?;
            if let Some(path) = &config {
                let cfg = ExperimentConfig::load(path)?;
                report.check_config_hash(&cfg.hash(), force).map_err(|e| config_err(e.to_string()))?;
            } else if !force {
                report.config_hash().map_err(|e| config_err(e.to_string()))?;
            }
            let rendered = match format {
                FormatArg::Markdown => {
                    format!("{}\n{}", report.render(ReportFormat::Markdown)?, render_published_comparison()?)
                }
                FormatArg::Csv => report.render(ReportFormat::Csv)?,
                FormatArg::Svg => report.render(ReportFormat::Svg)?,
            };
            emit(&rendered, output.as_deref())?;
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_config_error() => EXIT_CONFIG,
        _ => EXIT_STAGE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            // Library errors already include their causes in their message.
            if err.downcast_ref::<Error>().is_some() {
                eprintln!("error: {err}");
            } else {
                eprintln!("error: {err:#}");
            }
            ExitCode::from(exit_code(&err))
        }
    }
}
