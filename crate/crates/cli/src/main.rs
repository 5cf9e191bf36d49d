//! `mrt`: dataset generation, training, sampling, distillation, evaluation
//! and cost benchmarking for masked region transformers.
//!
//! Exit codes: 0 success, 2 configuration error, 3 input error, 4 numeric
//! abort. Failures print one JSON object on stderr.

mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mrt::bundle::{load_design, read_json, read_png, save_design, write_json, MANIFEST};
use mrt::canvas::LayeredDesign;
use mrt::distill::{distill, dmd_log_csv};
use mrt::eval::{cost_csv, cost_model, evaluate_pairs, summarize, MetricReport};
use mrt::pack::TaskKind;
use mrt::sampler::{run_task, TaskInput, TaskOutput};
use mrt::synth::{derive_layout, gen_dataset, gen_design, load_dataset, restyle, sample_seed, write_dataset, Layout};
use mrt::train::{loss_log_csv, Checkpoint, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use config::{Invocation, RunConfig};

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError { code: 2, kind: "config", message: msg.into() }
    }

    pub fn input(err: impl std::fmt::Display) -> Self {
        CliError { code: 3, kind: "input", message: format!("{err:#}") }
    }
}

impl From<mrt::Error> for CliError {
    fn from(e: mrt::Error) -> Self {
        use mrt::Error::*;
        let (code, kind) = match &e {
            Config(_) => (2, "config"),
            NonFinite(_) => (4, "numeric"),
            Dimension(_) | OutOfBounds(_) | InvalidDesign(_) | InvalidTask(_) | Format { .. } | Io { .. } => (3, "input"),
        };
        CliError { code, kind, message: e.to_string() }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "mrt", version, about = "Layered design generation with masked region transformers")]
struct Cli {
    /// TOML (or .json) run configuration; every field has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic layered-design dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a model on a dataset directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        /// Resume from a checkpoint instead of initializing.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Text-to-layers generation for a layout.
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: SampleArgs,
        /// Layout JSON (canvas size, rects, z, captions).
        #[arg(long)]
        layout: PathBuf,
        #[arg(long, default_value = "")]
        caption: String,
    },
    /// Image-to-layers decomposition of a visible composite.
    Decompose {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: SampleArgs,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        layout: PathBuf,
        #[arg(long, default_value = "")]
        caption: String,
        /// Ground-truth bundle; adds per-layer metrics to report.json.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Layers-to-layers editing: regenerate or restyle chosen layers.
    Edit {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: SampleArgs,
        /// Input design bundle.
        #[arg(long)]
        design: PathBuf,
        /// Comma-separated foreground indices (1-based).
        #[arg(long, value_delimiter = ',')]
        targets: Vec<usize>,
        /// Directory of `ref_<i>.png` restyle references; procedural when absent.
        #[arg(long)]
        references: Option<PathBuf>,
    },
    /// Distill a checkpoint into a few-step student.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Distillation iterations.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Reconstruction metrics: predictions against ground truth, or a
    /// checkpoint's image-to-layers output on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, required_unless_present = "ckpt")]
        pred: Option<PathBuf>,
        #[arg(long, conflicts_with = "pred")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Analytic token/FLOP/memory comparison against full-canvas layers.
    BenchEfficiency {
        /// Layer counts, `a..b` (exclusive) or `a..=b`.
        #[arg(long, default_value = "1..32")]
        layers: String,
        /// Source of layer areas; only `synth` is available.
        #[arg(long, default_value = "synth")]
        area_dist: String,
        /// Layouts sampled per layer count.
        #[arg(long, default_value_t = 32)]
        samples: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// CSV report path.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug, Clone)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    guidance: Option<f64>,
    #[arg(long)]
    task: Option<TaskKind>,
}

fn inputs(pairs: &[(&str, &Path)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, p)| (k.to_string(), p.display().to_string())).collect()
}

fn mkdir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::input(format!("creating {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::input(format!("writing {}: {e}", path.display())))
}

fn echo_config(dir: &Path, cfg: &RunConfig, command: &str, inputs: BTreeMap<String, String>) -> CliResult<()> {
    let mut resolved = cfg.clone();
    resolved.invocation = Some(Invocation { command: command.into(), inputs });
    write_json(&dir.join("config.resolved.json"), &resolved)?;
    Ok(())
}

fn check_task(given: Option<TaskKind>, allowed: &[TaskKind]) -> CliResult<TaskKind> {
    match given {
        None => Ok(allowed[0]),
        Some(t) if allowed.contains(&t) => Ok(t),
        Some(t) => Err(CliError::config(format!(
            "--task {} is not valid here (expected one of {})",
            t.name(),
            allowed.iter().map(|k| k.name()).collect::<Vec<_>>().join(", ")
        ))),
    }
}

fn apply_sample_args(cfg: &mut RunConfig, common: &Common, run: &SampleArgs) {
    if let Some(s) = common.seed {
        cfg.sample.seed = s;
    }
    if let Some(s) = run.steps {
        cfg.sample.steps = s;
    }
    if let Some(g) = run.guidance {
        cfg.sample.guidance = g;
    }
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}

#[derive(Serialize)]
struct SampleReport<'a> {
    task: &'a str,
    clamp_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    merged: Option<mrt::sampler::MergedReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    metrics: Option<MetricReport>,
}

fn write_output(dir: &Path, task: TaskKind, out: &TaskOutput, truth: Option<&LayeredDesign>) -> CliResult<()> {
    save_design(&out.design, &dir.join("design"))?;
    let metrics = truth.map(|t| evaluate_pairs(std::slice::from_ref(t), std::slice::from_ref(&out.design))).transpose()?;
    let report = SampleReport { task: task.name(), clamp_fraction: out.clamp_fraction, merged: out.merged, metrics };
    write_json(&dir.join("report.json"), &report)?;
    Ok(())
}

fn parse_layers(spec: &str) -> CliResult<Vec<usize>> {
    let bad = || CliError::config(format!("--layers {spec:?}: expected a..b or a..=b"));
    let (lo, hi, inclusive) = if let Some((a, b)) = spec.split_once("..=") {
        (a, b, true)
    } else if let Some((a, b)) = spec.split_once("..") {
        (a, b, false)
    } else {
        let k: usize = spec.trim().parse().map_err(|_| bad())?;
        return Ok(vec![k]);
    };
    let lo: usize = lo.trim().parse().map_err(|_| bad())?;
    let hi: usize = hi.trim().parse().map_err(|_| bad())?;
    let v: Vec<usize> = if inclusive { (lo..=hi).collect() } else { (lo..hi).collect() };
    if v.is_empty() || lo == 0 {
        return Err(bad());
    }
    Ok(v)
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.invocation = None;
    let s = cfg.train.patch;
    match cli.command {
        Command::GenData { common, count } => {
            if let Some(c) = count {
                cfg.data.count = c;
            }
            if let Some(sd) = common.seed {
                cfg.data.seed = sd;
            }
            cfg.validate()?;
            let designs = gen_dataset(cfg.data.seed, cfg.data.count, &cfg.data.gen)?;
            write_dataset(&common.out, cfg.data.seed, &designs, &cfg.data.gen)?;
            echo_config(&common.out, &cfg, "gen-data", BTreeMap::new())?;
        }
        Command::Train { common, data, steps, resume } => {
            if let Some(sd) = common.seed {
                cfg.train.seed = sd;
            }
            if let Some(n) = steps {
                cfg.train.steps = n;
            }
            cfg.validate()?;
            let dataset = load_dataset(&data)?;
            let mut trainer = match &resume {
                Some(p) => {
                    let ckpt = load_checkpoint(p)?;
                    cfg.model = ckpt.header.model.clone();
                    let mut tr = Trainer::from_checkpoint(ckpt)?;
                    tr.config.steps = cfg.train.steps;
                    cfg.train = tr.config.clone();
                    tr
                }
                None => Trainer::new(cfg.model.clone(), cfg.train.clone())?,
            };
            trainer.run(&dataset)?;
            mkdir(&common.out)?;
            trainer.checkpoint().save(&common.out.join("model.ckpt"))?;
            write_text(&common.out.join("loss.csv"), &loss_log_csv(&trainer.log))?;
            let mut ins = inputs(&[("data", &data)]);
            if let Some(p) = &resume {
                ins.insert("resume".into(), p.display().to_string());
            }
            echo_config(&common.out, &cfg, "train", ins)?;
        }
        Command::Sample { common, run, layout, caption } => {
            check_task(run.task, &[TaskKind::T2l])?;
            apply_sample_args(&mut cfg, &common, &run);
            let ckpt = load_checkpoint(&run.ckpt)?;
            adopt(&mut cfg, &ckpt);
            cfg.validate()?;
            let lay: Layout = read_json(&layout)?;
            let out = run_task(&ckpt.model()?, &TaskInput::T2l { layout: lay, caption }, &cfg.sample, s_of(&ckpt))?;
            mkdir(&common.out)?;
            write_output(&common.out, TaskKind::T2l, &out, None)?;
            echo_config(&common.out, &cfg, "sample", inputs(&[("ckpt", &run.ckpt), ("layout", &layout)]))?;
        }
        Command::Decompose { common, run, image, layout, caption, truth } => {
            check_task(run.task, &[TaskKind::I2l])?;
            apply_sample_args(&mut cfg, &common, &run);
            let ckpt = load_checkpoint(&run.ckpt)?;
            adopt(&mut cfg, &ckpt);
            cfg.validate()?;
            let img = read_png(&image)?;
            let lay: Layout = read_json(&layout)?;
            let truth_design = truth.as_deref().map(load_design).transpose()?;
            let out = run_task(&ckpt.model()?, &TaskInput::I2l { image: img, layout: lay, caption }, &cfg.sample, s_of(&ckpt))?;
            mkdir(&common.out)?;
            write_output(&common.out, TaskKind::I2l, &out, truth_design.as_ref())?;
            let mut ins = inputs(&[("ckpt", &run.ckpt), ("image", &image), ("layout", &layout)]);
            if let Some(t) = &truth {
                ins.insert("truth".into(), t.display().to_string());
            }
            echo_config(&common.out, &cfg, "decompose", ins)?;
        }
        Command::Edit { common, run, design, targets, references } => {
            let task = check_task(run.task, &[TaskKind::L2lAdd, TaskKind::L2lRestyle])?;
            apply_sample_args(&mut cfg, &common, &run);
            let ckpt = load_checkpoint(&run.ckpt)?;
            adopt(&mut cfg, &ckpt);
            cfg.validate()?;
            let d = load_design(&design)?;
            let targets: BTreeSet<usize> = targets.into_iter().collect();
            if targets.is_empty() {
                return Err(CliError::config("--targets needs at least one layer index"));
            }
            let input = match task {
                TaskKind::L2lAdd => TaskInput::L2lAdd { design: d, targets },
                _ => {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sample.seed);
                    let mut refs = BTreeMap::new();
                    for &i in &targets {
                        let layer = d
                            .layers
                            .get(i)
                            .filter(|_| i >= 1)
                            .ok_or_else(|| CliError::input(format!("target {i} outside 1..={}", d.k())))?;
                        let img = match &references {
                            Some(dir) => read_png(&dir.join(format!("ref_{i}.png")))?,
                            None => restyle(&layer.image, &mut rng),
                        };
                        refs.insert(i, img);
                    }
                    TaskInput::L2lRestyle { design: d, references: refs }
                }
            };
            let out = run_task(&ckpt.model()?, &input, &cfg.sample, s_of(&ckpt))?;
            mkdir(&common.out)?;
            write_output(&common.out, task, &out, None)?;
            let mut ins = inputs(&[("ckpt", &run.ckpt), ("design", &design)]);
            ins.insert("task".into(), task.name().into());
            ins.insert("targets".into(), format!("{:?}", input_targets(&input)));
            if let Some(r) = &references {
                ins.insert("references".into(), r.display().to_string());
            }
            echo_config(&common.out, &cfg, "edit", ins)?;
        }
        Command::Distill { common, ckpt, data, steps } => {
            if let Some(sd) = common.seed {
                cfg.distill.seed = sd;
            }
            if let Some(n) = steps {
                cfg.distill.iterations = n;
            }
            let teacher = load_checkpoint(&ckpt)?;
            adopt(&mut cfg, &teacher);
            cfg.validate()?;
            let dataset = load_dataset(&data)?;
            let (student, log) = distill(&teacher, &dataset, &cfg.distill)?;
            mkdir(&common.out)?;
            student.save(&common.out.join("student.ckpt"))?;
            write_text(&common.out.join("distill.csv"), &dmd_log_csv(&log))?;
            echo_config(&common.out, &cfg, "distill", inputs(&[("ckpt", &ckpt), ("data", &data)]))?;
        }
        Command::Eval { common, truth, pred, ckpt, steps } => {
            if let Some(sd) = common.seed {
                cfg.sample.seed = sd;
            }
            if let Some(n) = steps {
                cfg.sample.steps = n;
            }
            let truth_set = load_designs(&truth)?;
            let (report, mut ins) = match (&pred, &ckpt) {
                (Some(p), _) => {
                    cfg.validate()?;
                    let preds = load_designs(p)?;
                    (evaluate_pairs(&truth_set, &preds)?, inputs(&[("truth", &truth), ("pred", p)]))
                }
                (None, Some(c)) => {
                    let ck = load_checkpoint(c)?;
                    adopt(&mut cfg, &ck);
                    cfg.validate()?;
                    let model = ck.model()?;
                    let r = mrt::eval::evaluate_i2l(&model, &truth_set, &cfg.sample, s_of(&ck))?;
                    (r, inputs(&[("truth", &truth), ("ckpt", c)]))
                }
                (None, None) => return Err(CliError::config("eval needs --pred or --ckpt")),
            };
            mkdir(&common.out)?;
            write_json(&common.out.join("report.json"), &report)?;
            write_text(&common.out.join("report.csv"), &report.to_csv())?;
            ins.insert("mode".into(), if pred.is_some() { "pairs" } else { "i2l" }.into());
            echo_config(&common.out, &cfg, "eval", ins)?;
        }
        Command::BenchEfficiency { layers, area_dist, samples, seed, out } => {
            if area_dist != "synth" {
                return Err(CliError::config(format!("--area-dist {area_dist:?}: only \"synth\" is available")));
            }
            if let Some(sd) = seed {
                cfg.data.seed = sd;
            }
            cfg.validate()?;
            let ks = parse_layers(&layers)?;
            let rows = ks
                .iter()
                .map(|&k| {
                    let params = cfg.data.gen.clone().with_layers(k as u32, k as u32);
                    let reports = mrt::exec::try_map(samples, |i| {
                        let d = gen_design(sample_seed(cfg.data.seed ^ k as u64, i as u64), &params)?;
                        cost_model(&derive_layout(&d), s, &cfg.model, &[])
                    })?;
                    Ok(summarize(k, &reports, &cfg.model))
                })
                .collect::<CliResult<Vec<_>>>()?;
            let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
            mkdir(&dir)?;
            write_text(&out, &cost_csv(&rows))?;
            let mut ins = inputs(&[("out", &out)]);
            ins.insert("layers".into(), layers);
            ins.insert("area_dist".into(), area_dist);
            ins.insert("samples".into(), samples.to_string());
            echo_config(&dir, &cfg, "bench-efficiency", ins)?;
        }
    }
    Ok(())
}

fn input_targets(input: &TaskInput) -> Vec<usize> {
    match input {
        TaskInput::L2lAdd { targets, .. } => targets.iter().copied().collect(),
        TaskInput::L2lRestyle { references, .. } => references.keys().copied().collect(),
        _ => Vec::new(),
    }
}

/// Model and patch size always come from the checkpoint being used.
fn adopt(cfg: &mut RunConfig, ckpt: &Checkpoint) {
    cfg.model = ckpt.header.model.clone();
    cfg.train = ckpt.header.train.clone();
}

fn s_of(ckpt: &Checkpoint) -> u32 {
    ckpt.header.train.patch
}

/// A dataset directory, or a single bundle.
fn load_designs(path: &Path) -> CliResult<Vec<LayeredDesign>> {
    if path.join(MANIFEST).exists() {
        Ok(vec![load_design(path)?])
    } else {
        Ok(load_dataset(path)?)
    }
}

fn init_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("MRT_THREADS") {
        let n: usize = v.parse().map_err(|_| CliError::config(format!("MRT_THREADS={v:?} is not a thread count")))?;
        if n == 0 {
            return Err(CliError::config("MRT_THREADS must be at least 1"));
        }
        mrt::exec::set_threads(n).map_err(CliError::config)?;
    }
    Ok(())
}

fn fail(e: CliError) -> ExitCode {
    let doc = serde_json::json!({ "error": e.kind, "code": e.code, "message": e.message });
    eprintln!("{doc}");
    ExitCode::from(e.code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(CliError::config(e.to_string().trim().to_string())),
    };
    if let Err(e) = init_threads() {
        return fail(e);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}
