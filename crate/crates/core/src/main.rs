//! Command-line front end: orchestrates dataset synthesis, fingerprinting,
//! planning, preprocessing, cross-validation with toy predictors, single-case
//! prediction, evaluation, postprocessing, and report rendering.
//!
//! Exit codes: 0 success, 2 validation error, 3 I/O error. Errors are a
//! single machine-parsable line on stderr.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use segplan::cv::{
    self, evaluate_trees, fit_models, predict_case_with_model, run_cv, CvOptions,
};
use segplan::descriptor::DatasetDescriptor;
use segplan::error::{Error, Result};
use segplan::fingerprint::{fingerprint_dataset, DatasetFingerprint};
use segplan::inference::argmax_labels;
use segplan::planner::{make_plan, ModelId, PipelinePlan};
use segplan::postprocess::apply_postprocessing;
use segplan::predictors::PredictorKind;
use segplan::preprocess::{preprocess_dataset, PreprocessedCase, Resolution};
use segplan::report::{
    render_dice_csv, render_dice_table, render_topology_csv, render_topology_table,
};
use segplan::synth::{generate_dataset, SynthSpec};
use segplan::volume::Volume;

#[derive(Parser)]
#[command(
    name = "segplan",
    version,
    about = "Self-configuring segmentation pipeline: fingerprint, plan, preprocess, \
             cross-validate, and report"
)]
struct Cli {
    /// Worker threads for case-level parallelism (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    /// 10-case anisotropic two-organ dataset exercising every pipeline stage.
    Standard,
    /// Small single-organ dataset with a planted decoy component.
    RiggedMini,
}

#[derive(Clone, Copy, ValueEnum)]
enum PredictorArg {
    Oracle,
    Constant,
    Threshold,
}

impl From<PredictorArg> for PredictorKind {
    fn from(p: PredictorArg) -> Self {
        match p {
            PredictorArg::Oracle => PredictorKind::Oracle,
            PredictorArg::Constant => PredictorKind::Constant,
            PredictorArg::Threshold => PredictorKind::Threshold,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    #[value(name = "2d")]
    TwoD,
    #[value(name = "3d")]
    ThreeD,
    Cascade,
    /// The 3D model when available, otherwise 2D.
    Auto,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportKind {
    /// Patch/batch/pooling table from plan files.
    Topology,
    /// Per-class dice matrix from metrics files.
    Dice,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Text,
    Csv,
}

#[derive(Args)]
struct PredictorOpts {
    /// Stand-in predictor fitted in place of network training.
    #[arg(long, value_enum, default_value_t = PredictorArg::Threshold)]
    predictor: PredictorArg,

    /// Disable mirror test-time augmentation.
    #[arg(long)]
    no_tta: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a bundled synthetic dataset tree.
    Synth {
        /// Which bundled dataset to generate.
        #[arg(long, value_enum, default_value_t = SynthKind::Standard)]
        spec: SynthKind,
        /// Generation seed.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Output dataset directory.
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Scan a dataset tree and write its fingerprint.
    Fingerprint {
        /// Dataset directory (with dataset.json).
        dataset: PathBuf,
        /// Output fingerprint path.
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Derive the full pipeline plan from a fingerprint.
    Plan {
        /// Fingerprint file written by `fingerprint`.
        fingerprint: PathBuf,
        /// Output plan path.
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Crop, resample, and normalize every training case per the plan.
    Preprocess {
        /// Dataset directory.
        dataset: PathBuf,
        /// Plan file written by `plan`.
        #[arg(long)]
        plan: PathBuf,
        /// Reuse an existing fingerprint instead of re-scanning.
        #[arg(long)]
        fingerprint: Option<PathBuf>,
        /// Output directory for the preprocessed tree.
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Run the five-fold cross-validation protocol with toy predictors.
    RunCv {
        /// Dataset directory.
        dataset: PathBuf,
        /// Plan file.
        #[arg(long)]
        plan: PathBuf,
        /// Preprocessed tree from `preprocess`.
        #[arg(long)]
        preprocessed: PathBuf,
        /// Fold-assignment and simulation seed.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[command(flatten)]
        predictor: PredictorOpts,
        /// Skip the simulated-epoch scheduler replay.
        #[arg(long)]
        no_scheduler_sim: bool,
        /// Output run directory.
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Predict one preprocessed case with a single model.
    Predict {
        /// Case id (as listed in the dataset descriptor).
        case: String,
        /// Dataset directory.
        #[arg(long)]
        dataset: PathBuf,
        /// Plan file.
        #[arg(long)]
        plan: PathBuf,
        /// Preprocessed tree.
        #[arg(long)]
        preprocessed: PathBuf,
        /// Model to predict with.
        #[arg(long, value_enum, default_value_t = ModelArg::Auto)]
        model: ModelArg,
        #[command(flatten)]
        predictor: PredictorOpts,
        /// Output directory for the softmax and labelmap volumes.
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Dice between same-named labelmaps in two directories.
    Evaluate {
        /// Directory of predicted labelmaps (*.mvox).
        pred_dir: PathBuf,
        /// Directory of reference labelmaps (*.mvox).
        gt_dir: PathBuf,
        /// Output metrics path (stdout if omitted).
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Largest-component filtering of labelmaps (a file or a directory).
    Postprocess {
        /// Labelmap file or directory of *.mvox labelmaps.
        input: PathBuf,
        /// Classes to filter, comma-separated (e.g. "1,2").
        #[arg(long, value_delimiter = ',', conflicts_with = "plan")]
        classes: Option<Vec<u8>>,
        /// Take the classes from a plan file instead.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Output file or directory (mirrors the input form).
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Render diff-friendly tables from plan or metrics files.
    Report {
        /// Which table to render.
        #[arg(long, value_enum)]
        kind: ReportKind,
        /// Input files: plan.json for topology, metrics.json for dice.
        #[arg(required = false)]
        inputs: Vec<PathBuf>,
        /// Output format.
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        format: ReportFormat,
        /// Output path (stdout if omitted).
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        let threads = jobs.max(1);
        if let Err(e) =
            rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()
        {
            eprintln!("error: validation: --jobs: {e}");
            std::process::exit(2);
        }
    }
    match run(cli.command) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn write_or_print(output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(path) => fs::write(path, text).map_err(|e| Error::io_at(path, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { spec, seed, output } => {
            let spec = match spec {
                SynthKind::Standard => SynthSpec::standard(seed),
                SynthKind::RiggedMini => SynthSpec::rigged_mini(seed),
            };
            let ids = generate_dataset(&spec, &output)?;
            println!("wrote {} cases to {}", ids.len(), output.display());
            Ok(())
        }
        Command::Fingerprint { dataset, output } => {
            let desc = DatasetDescriptor::read(&dataset)?;
            let fp = fingerprint_dataset(&desc)?;
            fp.write_json(&output)?;
            println!("wrote {}", output.display());
            Ok(())
        }
        Command::Plan { fingerprint, output } => {
            let fp = DatasetFingerprint::read_json(&fingerprint)?;
            let plan = make_plan(&fp)?;
            plan.write_json(&output)?;
            println!("wrote {}", output.display());
            Ok(())
        }
        Command::Preprocess { dataset, plan, fingerprint, output } => {
            let desc = DatasetDescriptor::read(&dataset)?;
            let plan = PipelinePlan::read_json(&plan)?;
            let fp = match fingerprint {
                Some(path) => DatasetFingerprint::read_json(&path)?,
                None => fingerprint_dataset(&desc)?,
            };
            let ids = preprocess_dataset(&desc, &fp, &plan, &output)?;
            println!("preprocessed {} cases into {}", ids.len(), output.display());
            Ok(())
        }
        Command::RunCv {
            dataset,
            plan,
            preprocessed,
            seed,
            predictor,
            no_scheduler_sim,
            output,
        } => {
            let options = CvOptions {
                seed,
                predictor: PredictorKind::from(predictor.predictor),
                tta: !predictor.no_tta,
                simulate_scheduler: !no_scheduler_sim,
            };
            let metrics = run_cv(&dataset, &preprocessed, &plan, &output, &options)?;
            println!(
                "selected {} (mean foreground dice {:.4}); metrics in {}",
                metrics.selected,
                metrics.selected_mean_foreground_dice,
                output.join("metrics.json").display()
            );
            Ok(())
        }
        Command::Predict {
            case,
            dataset,
            plan,
            preprocessed,
            model,
            predictor,
            output,
        } => cmd_predict(
            &case,
            &dataset,
            &plan,
            &preprocessed,
            model,
            PredictorKind::from(predictor.predictor),
            !predictor.no_tta,
            &output,
        ),
        Command::Evaluate { pred_dir, gt_dir, output } => {
            let report = evaluate_trees(&pred_dir, &gt_dir)?;
            let text = serde_json::to_string_pretty(&report)
                .map_err(|e| Error::validation(format!("report serialization: {e}")))?
                + "\n";
            write_or_print(output.as_deref(), &text)
        }
        Command::Postprocess { input, classes, plan, output } => {
            let classes = match (classes, plan) {
                (Some(c), _) => c,
                (None, Some(plan_path)) => {
                    PipelinePlan::read_json(&plan_path)?.postprocess_classes
                }
                (None, None) => {
                    return Err(Error::validation(
                        "postprocess needs --classes or --plan to know which classes to filter",
                    ))
                }
            };
            cmd_postprocess(&input, &classes, &output)
        }
        Command::Report { kind, inputs, format, output } => {
            let text = match kind {
                ReportKind::Topology => {
                    let plans = inputs
                        .iter()
                        .map(|p| PipelinePlan::read_json(p))
                        .collect::<Result<Vec<_>>>()?;
                    match format {
                        ReportFormat::Text => render_topology_table(&plans),
                        ReportFormat::Csv => render_topology_csv(&plans),
                    }
                }
                ReportKind::Dice => {
                    let runs = inputs
                        .iter()
                        .map(|p| read_metrics(p))
                        .collect::<Result<Vec<_>>>()?;
                    match format {
                        ReportFormat::Text => render_dice_table(&runs),
                        ReportFormat::Csv => render_dice_csv(&runs),
                    }
                }
            };
            write_or_print(output.as_deref(), &text)
        }
    }
}

fn read_metrics(path: &Path) -> Result<cv::Metrics> {
    let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::validation(format!("{}: not a metrics file: {e}", path.display())))
}

#[allow(clippy::too_many_arguments)]
fn cmd_predict(
    case: &str,
    dataset: &Path,
    plan_path: &Path,
    preprocessed: &Path,
    model: ModelArg,
    predictor: PredictorKind,
    tta: bool,
    output: &Path,
) -> Result<()> {
    let desc = DatasetDescriptor::read(dataset)?;
    let plan = PipelinePlan::read_json(plan_path)?;
    let num_classes = desc.num_classes();
    let model = match model {
        ModelArg::TwoD => ModelId::U2d,
        ModelArg::ThreeD => ModelId::U3d,
        ModelArg::Cascade => ModelId::Cascade,
        ModelArg::Auto => {
            if plan.models.contains(&ModelId::U3d) {
                ModelId::U3d
            } else {
                ModelId::U2d
            }
        }
    };
    if !plan.models.contains(&model) {
        return Err(Error::validation(format!(
            "model {model} is not part of this plan (available: {})",
            plan.models.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(", ")
        )));
    }
    let need_lowres = model == ModelId::Cascade;

    // fit the toy predictors on all training cases, then predict the target
    let fullres_dir = preprocessed.join(Resolution::Fullres.dir_name());
    let lowres_dir = preprocessed.join(Resolution::Lowres.dir_name());
    let mut ids: Vec<String> = desc.training.iter().map(DatasetDescriptor::case_id).collect();
    ids.sort();
    if !ids.iter().any(|id| id == case) {
        return Err(Error::validation(format!(
            "case {case} is not in the dataset descriptor"
        )));
    }
    let mut fullres_cases = Vec::with_capacity(ids.len());
    let mut lowres_cases = Vec::with_capacity(ids.len());
    for id in &ids {
        fullres_cases.push(PreprocessedCase::read_from(&fullres_dir, id)?);
        if need_lowres {
            lowres_cases.push(PreprocessedCase::read_from(&lowres_dir, id)?);
        }
    }
    let fullres_train: Vec<(&Volume, &Volume)> = fullres_cases
        .iter()
        .map(|c| {
            let label = c.label.as_ref().ok_or_else(|| {
                Error::validation(format!(
                    "case {}: predictor fitting requires preprocessed labels",
                    c.record.case_id
                ))
            })?;
            Ok((&c.image, label))
        })
        .collect::<Result<Vec<_>>>()?;
    let lowres_train: Option<Vec<(&Volume, &Volume)>> = if need_lowres {
        Some(
            lowres_cases
                .iter()
                .map(|c| {
                    let label = c.label.as_ref().ok_or_else(|| {
                        Error::validation(format!(
                            "case {}: the coarse tree is missing labels",
                            c.record.case_id
                        ))
                    })?;
                    Ok((&c.image, label))
                })
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let set = fit_models(
        predictor,
        &plan,
        &fullres_train,
        lowres_train.as_deref(),
        num_classes,
    )?;

    let idx = ids.iter().position(|id| id == case).expect("checked above");
    let target = &fullres_cases[idx];
    let target_lowres = need_lowres.then(|| &lowres_cases[idx]);
    let softmax =
        predict_case_with_model(model, &plan, &set, target, target_lowres, num_classes, tta)?;
    let labels = argmax_labels(&softmax);

    fs::create_dir_all(output).map_err(|e| Error::io_at(output, e))?;
    let softmax_path = output.join(format!("{case}_softmax.mvox"));
    let label_path = output.join(format!("{case}_pred.mvox"));
    softmax.write_mvox(&softmax_path)?;
    labels.write_mvox(&label_path)?;
    println!("wrote {} and {}", softmax_path.display(), label_path.display());
    Ok(())
}

fn cmd_postprocess(input: &Path, classes: &[u8], output: &Path) -> Result<()> {
    let process_one = |src: &Path, dst: &Path| -> Result<()> {
        let vol = Volume::read_mvox(src)?;
        let post = apply_postprocessing(&vol, classes)?;
        post.write_mvox(dst)
    };
    if input.is_dir() {
        fs::create_dir_all(output).map_err(|e| Error::io_at(output, e))?;
        let mut names: Vec<String> = Vec::new();
        for entry in fs::read_dir(input).map_err(|e| Error::io_at(input, e))? {
            let entry = entry.map_err(|e| Error::io_at(input, e))?;
            let path = entry.path();
            if path.extension().is_some_and(|e| e == "mvox") {
                names.push(
                    path.file_name()
                        .expect("file entries have names")
                        .to_string_lossy()
                        .into_owned(),
                );
            }
        }
        names.sort();
        if names.is_empty() {
            return Err(Error::validation(format!(
                "no labelmaps (*.mvox) in {}",
                input.display()
            )));
        }
        for name in &names {
            process_one(&input.join(name), &output.join(name))?;
        }
        println!("postprocessed {} labelmaps into {}", names.len(), output.display());
    } else {
        if let Some(parent) = output.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io_at(parent, e))?;
            }
        }
        process_one(input, output)?;
        println!("wrote {}", output.display());
    }
    Ok(())
}
