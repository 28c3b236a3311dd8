//! `amtkd`: data generation, teacher training, distillation, evaluation and
//! weight inspection from the command line.
//!
//! Exit codes: 0 success, 2 usage or validation error, 3 numeric failure.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use amtkd::adapter::{inspect_weights, mean_weight_by_class, weights_csv};
use amtkd::data::{gen_blobs, gen_tiny_images, noise_labels, read_dataset, write_dataset};
use amtkd::io::{
    adapter_from_checkpoint, adapter_to_checkpoint, model_from_checkpoint, model_to_checkpoint, Checkpoint,
};
use amtkd::trainer::TeacherTraining;
use amtkd::{
    distill, evaluate, train_teacher, Dataset, DistillConfig, Error, MappingStrategy, Method, Model,
    TeacherBundle,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "amtkd",
    version,
    about = "Multi-teacher knowledge distillation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    #[command(args_override_self = true)]
    GenData(GenDataArgs),
    /// Train a teacher with cross-entropy and write its checkpoint.
    #[command(args_override_self = true)]
    TrainTeacher(TrainTeacherArgs),
    /// Distill a student from teacher checkpoints.
    #[command(args_override_self = true)]
    Distill(DistillArgs),
    /// Print top-1 accuracy of a checkpoint on a dataset.
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Dump per-example teacher weights of a trained adapter.
    #[command(args_override_self = true)]
    InspectWeights(InspectArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Flat `key=value` file; explicit flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Blobs,
    Images,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "blobs")]
    kind: Kind,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    /// Also write this many extra examples per class to `--test-out`.
    #[arg(long, default_value_t = 0)]
    test_per_class: usize,
    #[arg(long)]
    test_out: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 3.0)]
    separation: f64,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 8)]
    height: usize,
    #[arg(long, default_value_t = 8)]
    width: usize,
}

#[derive(Args)]
struct TrainTeacherArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    arch: String,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// Keep labels of these classes and randomize the rest.
    #[arg(long)]
    keep_classes: Option<String>,
}

#[derive(Args)]
struct DistillArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "amtml")]
    method: String,
    /// Comma-separated teacher checkpoints.
    #[arg(long, default_value = "")]
    teachers: String,
    #[arg(long)]
    student_arch: String,
    #[arg(long)]
    train: PathBuf,
    /// Evaluation set; defaults to the training set.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, default_value_t = 5.0)]
    temp: f64,
    #[arg(long, default_value_t = 0.7)]
    lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 2.0)]
    beta: f64,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value = "best_to_high")]
    mapping: String,
    #[arg(long, default_value_t = 256)]
    triplet_budget: usize,
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    detach_delta: bool,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    /// Comma-separated epochs at which the learning rate decays.
    #[arg(long, default_value = "100,150")]
    lr_decay_epochs: String,
    #[arg(long, default_value_t = 0.1)]
    lr_decay_factor: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, num_args = 0..=1, default_value_t = true, default_missing_value = "true")]
    t2_scaling: bool,
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    angle_unit_temp: bool,
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    freeze_adapter: bool,
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    tie_thetas: bool,
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    cache_teachers: bool,
    /// Report path; defaults to `<out>.report.csv`.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Adapter checkpoint path; defaults to `<out>.adapter`.
    #[arg(long)]
    adapter_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    adapter: PathBuf,
    #[arg(long)]
    student: PathBuf,
    #[arg(long)]
    teachers: String,
    #[arg(long)]
    data: PathBuf,
    /// Print mean weight per (class, teacher).
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true")]
    summary: bool,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Numeric { .. } | Error::NonFinite { .. } => Failure::Numeric(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn echo(pairs: &[(&str, String)]) {
    println!("resolved config:");
    for (k, v) in pairs {
        println!("  {k}={v}");
    }
}

fn show(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map_or_else(|| "-".to_string(), |p| p.display().to_string())
}

fn required_out(common: &Common) -> Result<&Path, Failure> {
    common.out.as_deref().ok_or_else(|| usage("--out is required"))
}

fn parse_list(s: &str, what: &str) -> Result<Vec<usize>, Failure> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|_| usage(format!("invalid {what} entry {t:?}")))
        })
        .collect()
}

fn load_model(path: &Path) -> Result<(Model, Option<f64>), Failure> {
    let ckpt = Checkpoint::read(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Ok(model_from_checkpoint(&ckpt)?)
}

fn load_data(path: &Path) -> Result<Dataset, Failure> {
    read_dataset(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn load_teachers(list: &str) -> Result<Option<TeacherBundle>, Failure> {
    let paths: Vec<&str> = list.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if paths.is_empty() {
        return Ok(None);
    }
    let mut models = Vec::new();
    let mut accs = Vec::new();
    for p in paths {
        let (m, acc) = load_model(Path::new(p))?;
        models.push(m);
        accs.push(acc.unwrap_or(0.0));
    }
    Ok(Some(TeacherBundle::new(models, accs)?))
}

fn shape_str(ds: &Dataset) -> String {
    let dims: Vec<String> = ds.example_shape().iter().map(ToString::to_string).collect();
    format!("[{}]", dims.join(","))
}

fn gen_data(a: &GenDataArgs) -> CmdResult {
    let out = required_out(&a.common)?;
    let kind = match a.kind {
        Kind::Blobs => "blobs",
        Kind::Images => "images",
    };
    echo(&[
        ("kind", kind.into()),
        ("classes", a.classes.to_string()),
        ("per_class", a.per_class.to_string()),
        ("test_per_class", a.test_per_class.to_string()),
        ("dim", a.dim.to_string()),
        ("separation", a.separation.to_string()),
        ("noise", a.noise.to_string()),
        ("channels", a.channels.to_string()),
        ("height", a.height.to_string()),
        ("width", a.width.to_string()),
        ("seed", a.common.seed.to_string()),
        ("out", out.display().to_string()),
        ("test_out", show(&a.test_out)),
    ]);
    if a.classes < 2 {
        return Err(usage(format!("need at least 2 classes, got {}", a.classes)));
    }
    if a.test_per_class > 0 && a.test_out.is_none() {
        return Err(usage("--test-per-class needs --test-out"));
    }
    let per = a.per_class + a.test_per_class;
    let full = match a.kind {
        Kind::Blobs => gen_blobs(a.classes, per, a.dim, a.separation, a.noise, a.common.seed)?,
        Kind::Images => gen_tiny_images(a.classes, per, a.channels, a.height, a.width, a.common.seed)?,
    };
    let (train, test) = full.split_per_class(a.per_class);
    write_dataset(out, &train)?;
    println!(
        "wrote {}: N={} K={} shape={}",
        out.display(),
        train.len(),
        train.num_classes(),
        shape_str(&train)
    );
    if let Some(p) = &a.test_out {
        write_dataset(p, &test)?;
        println!(
            "wrote {}: N={} K={} shape={}",
            p.display(),
            test.len(),
            test.num_classes(),
            shape_str(&test)
        );
    }
    Ok(())
}

fn train_teacher_cmd(a: &TrainTeacherArgs) -> CmdResult {
    let out = required_out(&a.common)?;
    echo(&[
        ("data", a.data.display().to_string()),
        ("arch", a.arch.clone()),
        ("epochs", a.epochs.to_string()),
        ("batch", a.batch.to_string()),
        ("lr", a.lr.to_string()),
        ("momentum", a.momentum.to_string()),
        (
            "keep_classes",
            a.keep_classes.clone().unwrap_or_else(|| "all".into()),
        ),
        ("val_fraction", "0.1".into()),
        ("seed", a.common.seed.to_string()),
        ("out", out.display().to_string()),
    ]);
    let data = load_data(&a.data)?;
    let train_on = match &a.keep_classes {
        Some(list) => noise_labels(&data, &parse_list(list, "class")?, a.common.seed ^ 0x5eed)?,
        None => data.clone(),
    };
    let training = TeacherTraining {
        epochs: a.epochs,
        batch_size: a.batch,
        lr: a.lr,
        momentum: a.momentum,
        ..TeacherTraining::default()
    };
    let (model, val_acc) = train_teacher(&a.arch, &train_on, &training, a.common.seed)?;
    model_to_checkpoint(&model, Some(val_acc)).write(out)?;
    // report what the stored f32 weights actually do
    let (stored, _) = load_model(out)?;
    let acc = evaluate(&stored, &data)?;
    println!("val_accuracy={val_acc:.4}");
    println!("accuracy={acc:.4}");
    Ok(())
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn distill_cmd(a: &DistillArgs) -> CmdResult {
    let out = required_out(&a.common)?;
    let method: Method = a.method.parse()?;
    let config = DistillConfig {
        method,
        temperature: a.temp,
        lambda: a.lambda,
        alpha: a.alpha,
        beta: a.beta,
        batch_size: a.batch,
        epochs: a.epochs,
        mapping: a.mapping.parse::<MappingStrategy>()?,
        triplet_budget: a.triplet_budget,
        seed: a.common.seed,
        detach_delta: a.detach_delta,
        lr: a.lr,
        decay_epochs: parse_list(&a.lr_decay_epochs, "lr-decay-epochs")?,
        decay_factor: a.lr_decay_factor,
        momentum: a.momentum,
        t2_scaling: a.t2_scaling,
        angle_unit_temperature: a.angle_unit_temp,
        freeze_adapter: a.freeze_adapter,
        tie_thetas: a.tie_thetas,
        cache_teacher_outputs: a.cache_teachers,
    };
    let report_path = a
        .report
        .clone()
        .unwrap_or_else(|| with_suffix(out, ".report.csv"));
    let adapter_path = a
        .adapter_out
        .clone()
        .unwrap_or_else(|| with_suffix(out, ".adapter"));

    let mut pairs: Vec<(&str, String)> = vec![
        ("teachers", a.teachers.clone()),
        ("student_arch", a.student_arch.clone()),
        ("train", a.train.display().to_string()),
        ("test", show(&a.test)),
        ("out", out.display().to_string()),
        ("report", report_path.display().to_string()),
    ];
    if method == Method::Amtml {
        pairs.push(("adapter_out", adapter_path.display().to_string()));
    }
    let echoed = config.echo();
    pairs.extend(echoed.iter().map(|(k, v)| (k.as_str(), v.clone())));
    echo(&pairs);
    config.validate()?;

    let teachers = load_teachers(&a.teachers)?;
    let m = teachers.as_ref().map_or(0, TeacherBundle::len);
    let ok = match method {
        Method::Indep => true,
        Method::Okd | Method::Fitnet => m == 1,
        Method::Avgmkd | Method::Amtml => m >= 2,
    };
    if !ok {
        let need = match method {
            Method::Okd | Method::Fitnet => "exactly one teacher",
            _ => "at least two teachers",
        };
        return Err(usage(format!("method {method} needs {need}, got {m}")));
    }

    let train = load_data(&a.train)?;
    let test = match &a.test {
        Some(p) => load_data(p)?,
        None => train.clone(),
    };
    let outcome = distill(&config, teachers.as_ref(), &a.student_arch, &train, &test)?;
    model_to_checkpoint(&outcome.student, None).write(out)?;
    if let Some(adapter) = &outcome.adapter {
        adapter_to_checkpoint(adapter).write(&adapter_path)?;
    }
    std::fs::write(&report_path, outcome.report.to_csv()).map_err(Error::from)?;
    for r in &outcome.report.epochs {
        println!(
            "epoch {:>3}  total={:.5}  ce={:.5}  kd_kl={:.5}  angle={:.5}  hint={:.5}  train_acc={:.4}  test_acc={:.4}",
            r.epoch, r.terms.total, r.terms.ce, r.terms.kd_kl, r.terms.angle, r.terms.hint, r.train_acc, r.test_acc
        );
    }
    println!("final_test_acc={:.4}", outcome.report.final_test_acc);
    println!("wall_clock_seconds={:.2}", outcome.report.wall_clock_seconds);
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> CmdResult {
    let (model, _) = load_model(&a.model)?;
    let data = load_data(&a.data)?;
    let acc = evaluate(&model, &data)?;
    println!("accuracy={acc:.4}");
    if let Some(out) = &a.common.out {
        std::fs::write(out, format!("{acc:.4}\n")).map_err(Error::from)?;
    }
    Ok(())
}

fn inspect_cmd(a: &InspectArgs) -> CmdResult {
    let adapter_ckpt =
        Checkpoint::read(&a.adapter).map_err(|e| usage(format!("{}: {e}", a.adapter.display())))?;
    let adapter = adapter_from_checkpoint(&adapter_ckpt)?;
    let (student, _) = load_model(&a.student)?;
    let teachers = load_teachers(&a.teachers)?.ok_or_else(|| usage("--teachers is empty"))?;
    let data = load_data(&a.data)?;
    let rows = inspect_weights(&adapter, &student, &teachers, &data)?;
    let csv = weights_csv(&rows, teachers.len());
    match &a.common.out {
        Some(p) => std::fs::write(p, csv).map_err(Error::from)?,
        None => print!("{csv}"),
    }
    if a.summary {
        let means = mean_weight_by_class(&rows, data.num_classes(), teachers.len());
        println!("# mean weight per class");
        for (c, row) in means.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|w| format!("{w:.4}")).collect();
            println!("# class {c}: {}", cells.join(" "));
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainTeacher(a) => train_teacher_cmd(a),
        Command::Distill(a) => distill_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::InspectWeights(a) => inspect_cmd(a),
    }
}

fn main() -> ExitCode {
    let args = match config::expand(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("numeric failure: {msg}");
            ExitCode::from(3)
        }
    }
}
