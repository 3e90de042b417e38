use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use diffmark::codec::{train_codec, CodecConfig, WatermarkCodec};
use diffmark::dataset::{load_any, synthetic, Dataset, SyntheticSpec};
use diffmark::detection::classifier::{train_attribute_classifier, AttributeClassifier};
use diffmark::detection::report::TestReport;
use diffmark::detection::stats::{ChiSquaredOptions, NullReference};
use diffmark::detection::PredictionMode;
use diffmark::diffusion::train::{save_denoiser, train_denoiser, DiffusionConfig, TrainOptions};
use diffmark::pipeline::{
    analyze, class_targets, generate_to, run_pipeline, AnalysisOptions, ClassTarget, ClassifierSettings,
    ExperimentConfig, PRESETS,
};
use diffmark::provenance::{apply_marking, resolve_plan, CodecBinding, Manifest, MarkOptions, MarkingPlan};
use diffmark::Error;

#[derive(Parser)]
#[command(name = "diffmark", version, about = "Group watermarks for tracing training data through diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural labelled dataset.
    Synth(SynthArgs),
    /// Ingest a PNG directory (with labels.csv / attributes.csv) into a packed dataset.
    Ingest {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a watermark generator/decoder pair.
    TrainCodec(TrainCodecArgs),
    /// Resolve a marking plan and watermark the selected images.
    Mark(MarkArgs),
    /// Train a restoration diffusion model.
    TrainDiffusion(TrainDiffusionArgs),
    /// Sample images from a trained diffusion model.
    Generate(GenerateArgs),
    /// Train the class/attribute classifier used for analysis.
    TrainClassifier(TrainClassifierArgs),
    /// Decode and classify generated images and run the statistical tests.
    Analyze(AnalyzeArgs),
    /// Run the full pipeline from a config file or preset.
    Run(RunArgs),
    /// Re-render figures and the summary of an existing report.
    Report {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also export PNGs and label tables to this directory.
    #[arg(long)]
    png_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainCodecArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// YAML/JSON codec config; defaults to the desk preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    num_watermarks: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MarkArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    codec: PathBuf,
    /// YAML/JSON marking plan (`rules: [...]`).
    #[arg(long)]
    plan: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep marked pixels in full precision instead of 8-bit levels.
    #[arg(long)]
    no_quantize: bool,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainDiffusionArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// YAML/JSON diffusion config; defaults to the desk preset for the dataset's shape.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Training state file; resumed from when it exists.
    #[arg(long)]
    state: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write PNGs into `<out>/png`.
    #[arg(long)]
    png: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainClassifierArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// `label`, or `attribute:<name>`.
    #[arg(long, default_value = "label")]
    target: String,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum NullArg {
    Calibrated,
    Classic,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Sample,
    Argmax,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Generated samples: packed file or PNG directory.
    #[arg(long)]
    samples: PathBuf,
    #[arg(long)]
    codec: PathBuf,
    #[arg(long)]
    classifier: PathBuf,
    /// Clean reference dataset; with `--manifest` enables Fisher and FID results.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "label")]
    target: String,
    #[arg(long, value_enum, default_value_t = ModeArg::Sample)]
    mode: ModeArg,
    #[arg(long, value_enum, default_value_t = NullArg::Calibrated)]
    null: NullArg,
    #[arg(long, default_value_t = 1.0)]
    min_expected: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    /// Output directory; overrides the config's.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reuse this trained codec instead of training one.
    #[arg(long)]
    codec: Option<PathBuf>,
    /// Print the resolved config as YAML and exit.
    #[arg(long)]
    print_config: bool,
}

enum Failure {
    Usage(String),
    Stage(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Stage(e)
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn read_config<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        serde_yaml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
}

fn parse_target(s: &str) -> CliResult<ClassTarget> {
    match s.split_once(':') {
        None if s == "label" => Ok(ClassTarget::Label),
        Some(("attribute", name)) if !name.is_empty() => Ok(ClassTarget::Attribute { name: name.into() }),
        _ => Err(usage(format!("target must be `label` or `attribute:<name>`, got `{s}`"))),
    }
}

fn log(msg: &str) {
    eprintln!("{msg}");
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> CliResult {
    let body = serde_json::to_string_pretty(v).map_err(Error::from)?;
    fs::write(path, body).map_err(|e| Failure::Stage(Error::Io {
        path: path.into(),
        source: e,
    }))
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Synth(a) => {
            let spec = SyntheticSpec {
                num_classes: a.classes,
                per_class: a.per_class,
                size: a.size,
                ..SyntheticSpec::default()
            };
            let ds = synthetic(&spec, a.seed).map_err(|e| usage(e.to_string()))?;
            ds.save_packed(&a.out)?;
            if let Some(dir) = a.png_dir {
                ds.export_dir(&dir)?;
            }
            println!("{} images, fingerprint {}", ds.len(), ds.fingerprint());
        }
        Command::Ingest { source, out } => {
            let ds = load_any(&source)?;
            ds.save_packed(&out)?;
            println!("{} images of {}, {} classes, fingerprint {}", ds.len(), ds.shape(), ds.num_classes(), ds.fingerprint());
        }
        Command::TrainCodec(a) => {
            let ds = load_any(&a.dataset)?;
            let mut cfg: CodecConfig = match &a.config {
                Some(p) => read_config(p)?,
                None => CodecConfig {
                    image_shape: ds.shape(),
                    ..CodecConfig::desk(a.num_watermarks.unwrap_or(16))
                },
            };
            if let Some(c) = a.num_watermarks {
                cfg.num_watermarks = c;
            }
            if let Some(e) = a.epochs {
                cfg.epochs = e;
            }
            cfg.validate().map_err(|e| usage(e.to_string()))?;
            let out = train_codec(ds.images(), &cfg, a.seed, |m| {
                log(&serde_json::to_string(m).unwrap_or_default());
            })?;
            out.codec.save(&a.out)?;
            write_json(&a.out.with_extension("metrics.json"), &out.metrics)?;
            println!("codec {}", out.codec.fingerprint()?);
        }
        Command::Mark(a) => {
            let ds = load_any(&a.dataset)?;
            let codec = WatermarkCodec::load(&a.codec)?;
            let plan: MarkingPlan = read_config(&a.plan)?;
            let manifest = resolve_plan(&plan, &ds, &CodecBinding::of(&codec)?, a.seed)?;
            let marked = apply_marking(&ds, &manifest, &codec, MarkOptions { quantize: !a.no_quantize })?;
            manifest.save(&a.manifest)?;
            marked.save_packed(&a.out)?;
            for r in &manifest.rules {
                println!(
                    "rule {}: watermark {} lambda {} marked {} ({:.2}%)",
                    r.rule,
                    r.watermark_index,
                    r.lambda,
                    r.marked,
                    100.0 * r.fraction
                );
            }
        }
        Command::TrainDiffusion(a) => {
            let ds = load_any(&a.dataset)?;
            let mut cfg: DiffusionConfig = match &a.config {
                Some(p) => read_config(p)?,
                None => DiffusionConfig::desk(ds.shape()),
            };
            if let Some(e) = a.epochs {
                cfg.epochs = e;
            }
            cfg.validate().map_err(|e| usage(e.to_string()))?;
            let opts = TrainOptions { checkpoint: a.state };
            let d = train_denoiser(ds.images(), &cfg, &opts, |p| log(&format!("epoch {} loss {:.5}", p.epoch, p.loss)))?;
            save_denoiser(&d, &a.out)?;
            println!("{} parameters, final loss {:?}", d.num_parameters(), d.loss_curve().last().map(|p| p.loss));
        }
        Command::Generate(a) => {
            let fp = generate_to(&a.model, a.n, a.seed, &a.out, &mut |m| log(m))?;
            if a.png {
                Dataset::load_packed(&a.out.join("samples.safetensors"))?.export_dir(&a.out.join("png"))?;
            }
            println!("{} samples, fingerprint {fp}", a.n);
        }
        Command::TrainClassifier(a) => {
            let ds = load_any(&a.dataset)?;
            let target = parse_target(&a.target)?;
            let (labels, names) = class_targets(&ds, &target)?;
            let mut settings = ClassifierSettings::default();
            if let Some(e) = a.epochs {
                settings.epochs = e;
            }
            let cfg = settings.config(ds.shape(), names.len().max(2));
            let clf = train_attribute_classifier(ds.images(), &labels, &cfg, a.seed, |e, l| {
                log(&format!("epoch {e} loss {l:.4}"))
            })?;
            clf.save(&a.out)?;
            println!("classes {names:?}, held-out accuracy {:?}", clf.holdout_accuracy());
        }
        Command::Analyze(a) => {
            let options = AnalysisOptions {
                prediction_mode: match a.mode {
                    ModeArg::Sample => PredictionMode::Sample,
                    ModeArg::Argmax => PredictionMode::Argmax,
                },
                chi_squared: ChiSquaredOptions {
                    null: match a.null {
                        NullArg::Calibrated => NullReference::Calibrated,
                        NullArg::Classic => NullReference::Classic,
                    },
                    min_expected: a.min_expected,
                },
                target: parse_target(&a.target)?,
                fid_min_samples: Some(10),
            };
            let samples = load_any(&a.samples)?;
            let codec = WatermarkCodec::load(&a.codec)?;
            let clf = AttributeClassifier::load(&a.classifier)?;
            let report = match (&a.reference, &a.manifest) {
                (Some(r), Some(m)) => {
                    let reference = load_any(r)?;
                    analyze(&samples, &reference, &codec, &clf, &Manifest::load(m)?, &options, a.seed)?
                }
                (None, None) => analyze_plain(&samples, &codec, &clf, &options, a.seed)?,
                _ => return Err(usage("--reference and --manifest go together")),
            };
            report.write_dir(&a.out)?;
            print!("{}", report.summary());
        }
        Command::Run(a) => {
            let mut cfg = match (&a.config, &a.preset) {
                (Some(p), None) => ExperimentConfig::from_file(p).map_err(|e| usage(e.to_string()))?,
                (None, Some(name)) => {
                    ExperimentConfig::preset(name, a.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(name)))
                        .map_err(|e| usage(e.to_string()))?
                }
                _ => return Err(usage(format!("give --config or --preset (one of {})", PRESETS.join(", ")))),
            };
            if let Some(o) = a.out {
                cfg.output_dir = o;
            }
            if a.codec.is_some() {
                cfg.codec_checkpoint = a.codec;
            }
            if a.print_config {
                print!("{}", cfg.to_yaml()?);
                return Ok(());
            }
            cfg.validate().map_err(|e| usage(e.to_string()))?;
            let outcome = run_pipeline(&cfg, &mut |m| log(m))?;
            print!("{}", outcome.report.summary());
            println!("report {} ({})", outcome.report_dir.display(), outcome.report_hash);
        }
        Command::Report { report, out } => {
            let text = fs::read_to_string(&report).map_err(|e| usage(format!("cannot read {}: {e}", report.display())))?;
            let r = TestReport::from_json(&text).map_err(|e| usage(e.to_string()))?;
            if let Some(dir) = out {
                r.write_dir(&dir)?;
            }
            print!("{}", r.summary());
        }
    }
    Ok(())
}

/// Histogram and per-watermark tests without a reference set or manifest.
fn analyze_plain(
    samples: &Dataset,
    codec: &WatermarkCodec,
    clf: &AttributeClassifier,
    options: &AnalysisOptions,
    seed: u64,
) -> CliResult<TestReport> {
    use diffmark::detection::{build_histogram, chi_squared_testable};
    let h = build_histogram(samples.images(), codec, clf, options.prediction_mode, seed)?;
    let (chi_squared, untested) = chi_squared_testable(&h, &options.chi_squared)?;
    Ok(TestReport {
        seed,
        n_generated: samples.len(),
        prediction_mode: options.prediction_mode,
        chi_squared_options: options.chi_squared,
        marking: vec![],
        classifier_accuracy: clf.holdout_accuracy(),
        class_names: vec![],
        chi_squared,
        untested,
        fisher: vec![],
        fid: None,
        histogram: h,
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
