use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use amcee::dataset::{generate_dataset, load_dataset, persist_dataset, DatasetConfig, Split};
use amcee::evaluation::{emit_report, monte_carlo_aggregate, ReportFormat, RunRecords};
use amcee::exit_policy::ExitCriterion;
use amcee::flops::{flop_report, model_flops, ModelFlops};
use amcee::inference::{evaluate_baseline, evaluate_dataset, read_records, write_records};
use amcee::models::{
    build_baseline, build_composite, load_checkpoint, save_checkpoint, AnyModel, Checkpoint, CompositeSpec,
    ModelSpec, TrainingMeta,
};
use amcee::pipeline::{read_json, run_pipeline, PipelineConfig, Stage, StageError};
use amcee::training::{train_model, two_phase_train, TrainConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "amcee", version, about = "Width-wise early-exit modulation classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesise or inspect IQ datasets.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Train the baseline or the composite model.
    Train(TrainArgs),
    /// Classify one split with a checkpoint and write per-frame records.
    Infer(InferArgs),
    /// FLOP and parameter accounting.
    #[command(subcommand)]
    Model(ModelCmd),
    /// Aggregate record files into report tables.
    Report(ReportArgs),
    /// End-to-end experiment.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
}

#[derive(Subcommand)]
enum DatasetCmd {
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    Inspect {
        dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    Baseline,
    Composite,
}

#[derive(Args)]
struct TrainArgs {
    kind: ModelKind,
    #[arg(long)]
    dataset: PathBuf,
    /// Training configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Composite spec (JSON); the baseline uses its single-path counterpart.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the training configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Output records CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum ModelCmd {
    /// FLOP table for a checkpoint or a composite spec file.
    Flops { source: PathBuf },
    /// Layer-by-layer description.
    Describe { source: PathBuf },
}

#[derive(Args)]
struct ReportArgs {
    /// Composite record files, one per run.
    #[arg(long, num_args = 1.., required = true)]
    records: Vec<PathBuf>,
    /// Supplies the baseline FLOP count.
    #[arg(long)]
    baseline_ckpt: PathBuf,
    /// Baseline record files, paired with `--records` by position.
    #[arg(long, num_args = 1..)]
    baseline_records: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "csv,json,plot-data")]
    format: Vec<String>,
}

#[derive(Subcommand)]
enum PipelineCmd {
    Run { config: PathBuf },
}

type CliResult<T> = Result<T, StageError>;

trait AtStage<T> {
    fn at(self, stage: Stage) -> CliResult<T>;
}

impl<T> AtStage<T> for amcee::Result<T> {
    fn at(self, stage: Stage) -> CliResult<T> {
        self.map_err(|source| StageError { stage, source })
    }
}

fn write_text(path: &Path, body: &str) -> amcee::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| amcee::Error::Io { path: dir.to_path_buf(), source: e })?;
    }
    fs::write(path, body).map_err(|e| amcee::Error::Io { path: path.to_path_buf(), source: e })
}

fn dataset_cmd(cmd: DatasetCmd) -> CliResult<()> {
    match cmd {
        DatasetCmd::Generate { config, out } => {
            let cfg: DatasetConfig = read_json(&config).at(Stage::Config)?;
            let bundle = generate_dataset(&cfg).at(Stage::Dataset)?;
            persist_dataset(&bundle, &out).at(Stage::Dataset)?;
            println!("wrote {} frames to {} (digest {})", bundle.frames.len(), out.display(), cfg.digest());
        }
        DatasetCmd::Inspect { dir } => {
            let b = load_dataset(&dir).at(Stage::Dataset)?;
            let c = &b.config;
            println!("digest       {}", c.digest());
            println!("frames       {}", b.frames.len());
            println!("frame_len    {}", c.frame_len);
            println!("modulations  {}", c.modulations.iter().map(|m| m.name()).collect::<Vec<_>>().join(" "));
            println!("snr_db       {:?}", c.snr_grid_db);
            println!("fading       {:?}", c.fading);
            for s in [Split::Train, Split::Val, Split::Test] {
                println!("{:<12} {}", format!("{s:?}").to_lowercase(), b.indices(s).len());
            }
        }
    }
    Ok(())
}

fn train_cmd(args: TrainArgs) -> CliResult<()> {
    let mut cfg: TrainConfig = read_json(&args.config).at(Stage::Config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let spec: CompositeSpec = match &args.model {
        Some(p) => read_json(p).at(Stage::Config)?,
        None => CompositeSpec::default(),
    };
    let data = load_dataset(&args.dataset).at(Stage::Dataset)?;
    let stage = match args.kind {
        ModelKind::Baseline => Stage::Baseline,
        ModelKind::Composite => Stage::Composite,
    };
    let len = spec.model_input_len;
    let train = data.windowed_samples(Split::Train, len, cfg.train_windows_per_frame).at(stage)?;
    let val = data.samples(Split::Val, 0, len).at(stage)?;
    fs::create_dir_all(&args.out)
        .map_err(|e| amcee::Error::Io { path: args.out.clone(), source: e })
        .at(stage)?;
    let digest = data.config.digest();
    let ckpt = match args.kind {
        ModelKind::Baseline => {
            let mut model = build_baseline(&spec.baseline_spec(), cfg.seed).at(stage)?;
            let tr: Vec<_> = train.iter().collect();
            let va: Vec<_> = val.iter().collect();
            let hist = train_model(&mut model, &tr, &va, &cfg).at(stage)?;
            write_text(&args.out.join("history.csv"), &hist.to_csv()).at(stage)?;
            Checkpoint {
                model: AnyModel::Baseline(model),
                criteria: Vec::new(),
                meta: TrainingMeta {
                    epochs: hist.epochs.len(),
                    seed: cfg.seed,
                    phase: format!("baseline dataset={digest}"),
                },
            }
        }
        ModelKind::Composite => {
            let mut model = build_composite(&spec, cfg.seed).at(stage)?;
            let report = two_phase_train(&mut model, &train, &val, &cfg).at(stage)?;
            write_text(&args.out.join("history.csv"), &report.joint.to_csv()).at(stage)?;
            for step in &report.steps {
                write_text(
                    &args.out.join(format!("expert{}_history.csv", step.expert)),
                    &step.history.to_csv(),
                )
                .at(stage)?;
            }
            let json = serde_json::to_string_pretty(&report).expect("report serialises");
            write_text(&args.out.join("training_report.json"), &json).at(stage)?;
            Checkpoint {
                criteria: report.criteria(),
                model: AnyModel::Composite(model),
                meta: TrainingMeta {
                    epochs: report.joint.epochs.len(),
                    seed: cfg.seed,
                    phase: format!("two-phase dataset={digest}"),
                },
            }
        }
    };
    let path = args.out.join("model.ckpt");
    save_checkpoint(&ckpt, &path).at(stage)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn infer_cmd(args: InferArgs) -> CliResult<()> {
    let ckpt = load_checkpoint(&args.ckpt).at(Stage::Inference)?;
    let data = load_dataset(&args.dataset).at(Stage::Dataset)?;
    let records = match &ckpt.model {
        AnyModel::Baseline(m) => {
            let samples = data.samples(args.split.into(), 0, m.spec().input_len).at(Stage::Inference)?;
            evaluate_baseline(m, &samples).at(Stage::Inference)?
        }
        AnyModel::Composite(m) => {
            let samples =
                data.samples(args.split.into(), 0, m.spec().model_input_len).at(Stage::Inference)?;
            evaluate_dataset(m, &ckpt.criteria, &samples).at(Stage::Inference)?
        }
    };
    write_records(&records, &args.out).at(Stage::Inference)?;
    let acc = records.iter().filter(|r| r.correct()).count() as f64 / records.len() as f64;
    println!("{} frames, accuracy {:.4}, wrote {}", records.len(), acc, args.out.display());
    Ok(())
}

enum ModelSource {
    Baseline(ModelSpec),
    Composite(CompositeSpec, Vec<ExitCriterion>),
}

/// `.json` files are read as composite specs, anything else as a checkpoint.
fn model_source(path: &Path) -> amcee::Result<ModelSource> {
    if path.extension().is_some_and(|e| e == "json") {
        let spec: CompositeSpec = read_json(path)?;
        spec.validate()?;
        return Ok(ModelSource::Composite(spec, Vec::new()));
    }
    let ckpt = load_checkpoint(path)?;
    Ok(match ckpt.model {
        AnyModel::Baseline(m) => ModelSource::Baseline(m.spec().clone()),
        AnyModel::Composite(m) => ModelSource::Composite(m.spec().clone(), ckpt.criteria),
    })
}

fn layer_table(name: &str, m: &ModelFlops) -> String {
    let mut s = format!("{name}\n{:<12} {:<28} {:>12} {:>10}\n", "layer", "shape", "flops", "params");
    for l in &m.layers {
        s.push_str(&format!("{:<12} {:<28} {:>12} {:>10}\n", l.kind, l.shape, l.flops, l.params));
    }
    s.push_str(&format!(
        "total: {} FLOPs ({} feature extraction, {} decision), {} params\n",
        m.total, m.feature_extraction, m.decision, m.params
    ));
    s
}

fn model_cmd(cmd: ModelCmd) -> CliResult<()> {
    let (source, describe) = match cmd {
        ModelCmd::Flops { source } => (source, false),
        ModelCmd::Describe { source } => (source, true),
    };
    match model_source(&source).at(Stage::Config)? {
        ModelSource::Baseline(spec) => {
            print!("{}", layer_table("baseline", &model_flops(&spec).at(Stage::Config)?));
        }
        ModelSource::Composite(spec, criteria) => {
            let report = flop_report(&spec).at(Stage::Config)?;
            if describe {
                for (e, m) in report.experts.iter().enumerate() {
                    print!("{}", layer_table(&format!("expert{e} (segment {:?})", spec.segment(e)), m));
                    println!();
                }
                for (e, c) in criteria.iter().enumerate() {
                    println!(
                        "exit {e}: h_th {:.6} (h_acc {:.6}, h_exits {:.6}, accuracy target met: {})",
                        c.h_th, c.h_acc, c.h_exits, c.acc_target_met
                    );
                }
            } else {
                print!("{}", report.to_table());
            }
        }
    }
    Ok(())
}

fn report_cmd(args: ReportArgs) -> CliResult<()> {
    let formats = args
        .format
        .iter()
        .map(|f| f.parse::<ReportFormat>())
        .collect::<amcee::Result<Vec<_>>>()
        .at(Stage::Config)?;
    if !args.baseline_records.is_empty() && args.baseline_records.len() != args.records.len() {
        return Err(amcee::Error::InvalidArgument(format!(
            "{} baseline record files for {} composite record files",
            args.baseline_records.len(),
            args.records.len()
        )))
        .at(Stage::Config);
    }
    let baseline = match load_checkpoint(&args.baseline_ckpt).at(Stage::Report)?.model {
        AnyModel::Baseline(m) => m,
        AnyModel::Composite(_) => {
            return Err(amcee::Error::InvalidArgument(format!(
                "{} holds a composite model, expected the baseline",
                args.baseline_ckpt.display()
            )))
            .at(Stage::Report)
        }
    };
    let baseline_flops = model_flops(baseline.spec()).at(Stage::Report)?.total;
    let mut runs = Vec::with_capacity(args.records.len());
    for (i, path) in args.records.iter().enumerate() {
        let composite = read_records(path).at(Stage::Report)?;
        let base = match args.baseline_records.get(i) {
            Some(p) => read_records(p).at(Stage::Report)?,
            None => Vec::new(),
        };
        runs.push(RunRecords {
            seed: i as u64,
            composite,
            baseline: base,
            baseline_flops,
            criteria: Vec::new(),
        });
    }
    let report = monte_carlo_aggregate("records", &runs).at(Stage::Report)?;
    for f in emit_report(&report, &formats, &args.out).at(Stage::Report)? {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn pipeline_cmd(cmd: PipelineCmd) -> CliResult<()> {
    let PipelineCmd::Run { config } = cmd;
    let resolved = PipelineConfig::load(&config)?;
    let outcome = run_pipeline(&resolved)?;
    println!(
        "dataset {} ({}), {} runs",
        outcome.report.config_digest,
        if outcome.dataset_reused { "reused" } else { "generated" },
        outcome.report.runs.len()
    );
    if let Some(o) = outcome.report.pooled.composite_by_snr.overall() {
        println!(
            "composite accuracy {:.4}, mean FLOP reduction {:.2}%",
            o.accuracy,
            100.0 * o.reduction.unwrap_or_default()
        );
    }
    for f in &outcome.report_files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Dataset(c) => dataset_cmd(c),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Model(c) => model_cmd(c),
        Command::Report(a) => report_cmd(a),
        Command::Pipeline(c) => pipeline_cmd(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
