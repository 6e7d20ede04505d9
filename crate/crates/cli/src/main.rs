use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};

use symode::baseline::{run_baseline, BaselineConfig, BASELINE_MODEL};
use symode::corpus::{
    create_writer, load_corpus, manifest_path, save_corpus, system_to_strings, ArtifactManifest, Manifest,
};
use symode::datagen::{build_corpus, select_first_n_instances, CorpusConfig, CountSpec, Generator, SystemRecord};
use symode::eval::{evaluate_predictions, read_results_csv, summarize, write_results_csv, write_summary_csv, StlsqConfig};
use symode::exec::Exec;
use symode::infer::{predict_many, read_predictions, write_predictions, BeamConfig, PredictConfig, PredictionLine, ScaleConvention};
use symode::integrate::SolverConfig;
use symode::model::{AggregatorKind, ModelConfig};
use symode::report::write_report;
use symode::train::{train, AdamConfig, CosineConfig, NoamConfig, Schedule, TrainConfig, TrainOutputs, TrainState};

mod selftest;

/// Failure classes, each with its own exit code.
#[derive(Debug)]
enum Failure {
    Config(anyhow::Error),
    Data(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Runtime(_) => 4,
        }
    }
}

trait Classify<T> {
    fn cfg(self) -> Result<T, Failure>;
    fn data(self) -> Result<T, Failure>;
    fn run(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn cfg(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Config(e.into()))
    }
    fn data(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Data(e.into()))
    }
    fn run(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

#[derive(Parser, Debug)]
#[command(name = "symode", version, about = "Symbolic regression of ODE systems from multiple trajectories")]
struct Cli {
    /// Plain-text `key = value` file; `[subcommand]` sections apply to one subcommand only.
    #[arg(long, global = true, env = "SYMODE_CONFIG")]
    config: Option<PathBuf>,
    /// Worker threads for generation, prediction and scoring (1 = sequential, 0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Regime {
    /// Dimension and instance count both uniform in 1..4, polynomial systems.
    Exp1,
    /// Fixed dimension, four instances, operator trees, noise 0.05.
    Exp2,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModelSize {
    Toy,
    Full,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScheduleKind {
    Cosine,
    Noam,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a corpus of simulated systems.
    Datagen(DatagenArgs),
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Decode predictions for every system in a corpus.
    Predict(PredictArgs),
    /// Score predictions (or ground truth, or the STLSQ baseline) on both tasks.
    Eval(EvalArgs),
    /// Plots and summary tables from results files.
    Report(ReportArgs),
    /// Run the quick invariant checks.
    Selftest,
}

#[derive(clap::Args, Debug)]
struct DatagenArgs {
    #[arg(long, env = "SYMODE_CORPUS")]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, value_enum)]
    regime: Option<Regime>,
    /// `poly` or `tree`.
    #[arg(long)]
    generator: Option<Generator>,
    /// A single value (`2`) or an inclusive range (`1-4`).
    #[arg(long)]
    dims: Option<String>,
    #[arg(long)]
    instances: Option<String>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    points: Option<usize>,
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    #[arg(long, env = "SYMODE_CORPUS")]
    corpus: PathBuf,
    /// Checkpoint path; the log goes to `<out>.log.csv`.
    #[arg(long, env = "SYMODE_CHECKPOINT")]
    out: PathBuf,
    #[arg(long, default_value = "mean", value_parser = parse_aggregator)]
    aggregator: AggregatorKind,
    #[arg(long, value_enum, default_value = "toy")]
    model: ModelSize,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, value_enum, default_value = "cosine")]
    schedule: ScheduleKind,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Continue from the checkpoint at `--out`.
    #[arg(long)]
    resume: bool,
    #[arg(long, default_value_t = 500)]
    checkpoint_every: usize,
    #[arg(long, default_value_t = 10)]
    log_every: usize,
    /// Input noise; defaults to each record's own level.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    no_rescale: bool,
}

#[derive(clap::Args, Debug)]
struct PredictArgs {
    #[arg(long, env = "SYMODE_CORPUS")]
    corpus: PathBuf,
    #[arg(long, env = "SYMODE_CHECKPOINT")]
    checkpoint: PathBuf,
    #[arg(long, env = "SYMODE_PREDICTIONS")]
    out: PathBuf,
    /// Instance counts, e.g. `1,2,3,4`; defaults to all of each record's instances.
    #[arg(long, value_delimiter = ',')]
    instances: Vec<usize>,
    /// Noise levels, e.g. `0,0.05`; defaults to each record's own level.
    #[arg(long, value_delimiter = ',')]
    sigmas: Vec<f64>,
    #[arg(long, default_value_t = 20)]
    beam_size: usize,
    #[arg(long, default_value_t = 0.1)]
    temperature: f64,
    #[arg(long, default_value_t = 200)]
    max_len: usize,
    #[arg(long)]
    sample_seed: Option<u64>,
    #[arg(long)]
    no_rescale: bool,
}

#[derive(clap::Args, Debug)]
struct EvalArgs {
    #[arg(long, env = "SYMODE_CORPUS")]
    corpus: PathBuf,
    /// Predictions file to score.
    #[arg(long, env = "SYMODE_PREDICTIONS", conflicts_with_all = ["truth", "baseline"])]
    predictions: Option<PathBuf>,
    /// Score the ground-truth systems themselves.
    #[arg(long, conflicts_with = "baseline")]
    truth: bool,
    /// Fit and score the STLSQ baseline.
    #[arg(long)]
    baseline: bool,
    /// Results CSV; the summary goes to `<out>.summary.csv`.
    #[arg(long, env = "SYMODE_RESULTS")]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Label in the results; defaults to `model`, `truth` or `stlsq`.
    #[arg(long)]
    label: Option<String>,
    /// Instance counts for `--truth` and `--baseline`.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    instances: Vec<usize>,
    /// Noise grid for `--truth` and `--baseline`.
    #[arg(long, value_delimiter = ',', default_value = "0,0.01,0.05,0.1")]
    sigmas: Vec<f64>,
    #[arg(long, default_value_t = 0.1)]
    threshold: f64,
    #[arg(long, default_value_t = 400)]
    max_iter: usize,
}

#[derive(clap::Args, Debug)]
struct ReportArgs {
    #[arg(long, required = true, num_args = 1..)]
    results: Vec<PathBuf>,
    #[arg(long, env = "SYMODE_REPORT")]
    out: PathBuf,
}

fn parse_aggregator(s: &str) -> Result<AggregatorKind, String> {
    s.parse()
}

fn parse_count(s: &str) -> anyhow::Result<CountSpec> {
    match s.split_once('-') {
        Some((a, b)) => Ok(CountSpec::Uniform(a.trim().parse()?, b.trim().parse()?)),
        None => Ok(CountSpec::Fixed(s.trim().parse()?)),
    }
}

/// Parses `key = value` lines with optional `[section]` headers.
fn parse_config_file(text: &str) -> anyhow::Result<BTreeMap<Option<String>, Vec<(String, String)>>> {
    let mut out: BTreeMap<Option<String>, Vec<(String, String)>> = BTreeMap::new();
    let mut section = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = Some(name.trim().to_string());
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("config line {}: expected key = value", i + 1))?;
        out.entry(section.clone()).or_default().push((k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(out)
}

/// Inserts config-file values as flags after the subcommand name, unless the
/// flag is already on the command line or its environment variable is set.
fn apply_config_file(args: Vec<OsString>) -> Result<Vec<OsString>, Failure> {
    let strs: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut path = strs
        .iter()
        .enumerate()
        .find_map(|(i, a)| a.strip_prefix("--config=").map(PathBuf::from).or_else(|| (a == "--config").then(|| strs.get(i + 1).map(PathBuf::from)).flatten()));
    if path.is_none() {
        path = std::env::var_os("SYMODE_CONFIG").map(PathBuf::from);
    }
    let Some(path) = path else { return Ok(args) };
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading config {}", path.display())).cfg()?;
    let sections = parse_config_file(&text).cfg()?;
    let cmd = Cli::command();
    let Some((pos, sub)) = strs.iter().enumerate().skip(1).find_map(|(i, a)| cmd.find_subcommand(a).map(|s| (i, s))) else {
        return Ok(args);
    };
    let known: BTreeMap<String, (bool, Option<String>)> = sub
        .get_arguments()
        .chain(cmd.get_arguments())
        .filter_map(|a| {
            let takes = a.get_num_args().map(|n| n.takes_values()).unwrap_or(true);
            a.get_long().map(|l| (l.to_string(), (takes, a.get_env().map(|e| e.to_string_lossy().into_owned()))))
        })
        .collect();
    let mut inject = Vec::new();
    for (section, entries) in &sections {
        let scoped = section.is_some();
        if section.as_deref().is_some_and(|s| s != sub.get_name()) {
            continue;
        }
        for (k, v) in entries {
            if k == "config" {
                continue;
            }
            let Some((takes, env)) = known.get(k) else {
                if scoped {
                    return Err(Failure::Config(anyhow!("unknown key `{k}` in [{}]", sub.get_name())));
                }
                continue;
            };
            let flag = format!("--{k}");
            let on_cli = strs.iter().any(|a| *a == flag || a.starts_with(&format!("{flag}=")));
            let in_env = env.as_ref().is_some_and(|e| std::env::var_os(e).is_some());
            if on_cli || in_env {
                continue;
            }
            if *takes {
                inject.push(OsString::from(format!("{flag}={v}")));
            } else if matches!(v.as_str(), "true" | "1" | "yes") {
                inject.push(OsString::from(flag));
            }
        }
    }
    let mut out = args;
    for (i, a) in inject.into_iter().enumerate() {
        out.insert(pos + 1 + i, a);
    }
    Ok(out)
}

fn exec_for(workers: usize) -> Result<Exec, Failure> {
    #[cfg(feature = "parallel")]
    if workers > 1 {
        rayon::ThreadPoolBuilder::new().num_threads(workers).build_global().run()?;
    }
    Ok(Exec::from_workers(workers))
}

fn load_records(path: &Path) -> Result<Vec<SystemRecord>, Failure> {
    let recs = load_corpus(path).with_context(|| format!("loading corpus {}", path.display())).data()?;
    if recs.is_empty() {
        return Err(Failure::Data(anyhow!("corpus {} is empty", path.display())));
    }
    Ok(recs)
}

fn save_manifest(out: &Path, m: &ArtifactManifest) -> Result<(), Failure> {
    m.save(&manifest_path(out)).run()
}

fn cmd_datagen(a: DatagenArgs, exec: Exec) -> Result<(), Failure> {
    let mut cfg = match a.regime {
        Some(Regime::Exp2) => {
            let dim = match a.dims.as_deref().map(parse_count).transpose().cfg()? {
                Some(CountSpec::Fixed(d)) => d,
                Some(_) => return Err(Failure::Config(anyhow!("exp2 needs a single --dims value"))),
                None => 2,
            };
            CorpusConfig::fixed_dim_tree(dim, a.count, a.sigma.unwrap_or(0.05), a.seed)
        }
        _ => CorpusConfig::mixed_polynomial(a.count, a.seed),
    };
    if let Some(g) = a.generator {
        cfg.generator = g;
    }
    if let Some(d) = &a.dims {
        cfg.dims = parse_count(d).context("--dims").cfg()?;
    }
    if let Some(n) = &a.instances {
        cfg.instances = parse_count(n).context("--instances").cfg()?;
    }
    if let Some(s) = a.sigma {
        cfg.sigma = s;
    }
    if let Some(p) = a.points {
        cfg.points = p;
    }
    cfg.validate().cfg()?;
    let (records, stats) = build_corpus(&cfg, exec).run()?;
    save_corpus(&a.out, &records).run()?;
    Manifest::new(&cfg, &stats).save(&manifest_path(&a.out)).run()?;
    eprintln!(
        "wrote {} systems to {} (rejected {}, rate {:.3})",
        records.len(),
        a.out.display(),
        stats.rejected,
        stats.rejection_rate()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs, exec: Exec) -> Result<(), Failure> {
    let records = load_records(&a.corpus)?;
    let schedule = match a.schedule {
        ScheduleKind::Cosine => {
            let d = CosineConfig::default();
            Schedule::Cosine(CosineConfig { warmup: a.warmup.unwrap_or(d.warmup), lr_max: a.lr_max.unwrap_or(d.lr_max), ..d })
        }
        ScheduleKind::Noam => {
            let d = NoamConfig::default();
            Schedule::Noam(NoamConfig { warmup: a.warmup.unwrap_or(d.warmup), lr_max: a.lr_max.unwrap_or(d.lr_max) })
        }
    };
    let adam = match a.schedule {
        ScheduleKind::Cosine => AdamConfig::default(),
        ScheduleKind::Noam => AdamConfig::for_noam(),
    };
    let tc = TrainConfig {
        batch_size: a.batch_size,
        steps: a.steps,
        schedule,
        adam: adam.clone(),
        seed: a.seed,
        checkpoint_every: a.checkpoint_every,
        log_every: a.log_every,
        sigma: a.sigma,
        rescale: !a.no_rescale,
        convention: ScaleConvention::DivideByRms,
    };
    tc.validate().cfg()?;
    let mc = match a.model {
        ModelSize::Toy => ModelConfig::toy(a.aggregator),
        ModelSize::Full => ModelConfig { aggregator: a.aggregator, ..ModelConfig::default() },
    };
    mc.validate().cfg()?;
    let mut state = if a.resume {
        TrainState::load(&a.out, Some(&mc), adam).with_context(|| format!("resuming from {}", a.out.display())).data()?
    } else {
        TrainState::new(mc.clone(), &tc).cfg()?
    };
    let mut log_path = a.out.clone().into_os_string();
    log_path.push(".log.csv");
    let log_file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(a.resume)
        .truncate(!a.resume)
        .open(&log_path)
        .run()?;
    let mut log = BufWriter::new(log_file);
    let start = state.step;
    let stats = train(&mut state, &records, &tc, exec, TrainOutputs { log: Some(&mut log), checkpoint: Some(a.out.clone()) }).run()?;
    log.flush().run()?;
    if stats.is_empty() {
        state.save(&a.out, &tc).run()?;
    }
    let config = serde_json::json!({ "model": mc, "train": tc });
    save_manifest(&a.out, &ArtifactManifest::new("checkpoint", Some(a.seed), config, &[&a.corpus]).run()?)?;
    if let Some(last) = stats.last() {
        eprintln!("trained steps {}..{} final loss {:.4}", start, last.step, last.loss);
    }
    Ok(())
}

fn cmd_predict(a: PredictArgs, exec: Exec) -> Result<(), Failure> {
    let records = load_records(&a.corpus)?;
    let model = symode::model::Model::<f32>::load(&a.checkpoint, None)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))
        .data()?;
    let cfg = PredictConfig {
        beam: BeamConfig { beam_size: a.beam_size, temperature: a.temperature, max_len: a.max_len, sample_seed: a.sample_seed },
        rescale: !a.no_rescale,
        convention: ScaleConvention::DivideByRms,
    };
    cfg.beam.validate().cfg()?;
    let mut jobs = Vec::new();
    for r in &records {
        let counts = if a.instances.is_empty() { vec![r.instances.len()] } else { a.instances.clone() };
        let sigmas = if a.sigmas.is_empty() { vec![r.sigma] } else { a.sigmas.clone() };
        for &n in counts.iter().filter(|&&n| n >= 1 && n <= r.instances.len()) {
            let sub = select_first_n_instances(r, n).data()?;
            for &s in &sigmas {
                jobs.push((r.id, s, sub.observed(s)));
            }
        }
    }
    let lines = predict_many(&jobs, &model, &cfg, exec);
    let mut w = create_writer(&a.out).run()?;
    write_predictions(&mut w, &lines).run()?;
    let failed = lines.iter().filter(|l| l.expressions.is_none()).count();
    let config = serde_json::json!({
        "beam_size": a.beam_size, "temperature": a.temperature, "max_len": a.max_len,
        "sample_seed": a.sample_seed, "rescale": !a.no_rescale, "instances": a.instances, "sigmas": a.sigmas,
    });
    save_manifest(&a.out, &ArtifactManifest::new("predictions", a.sample_seed, config, &[&a.corpus, &a.checkpoint]).run()?)?;
    eprintln!("wrote {} predictions ({} without a parse) to {}", lines.len(), failed, a.out.display());
    Ok(())
}

/// The ground-truth systems as prediction lines for every `(n, σ)`.
fn truth_predictions(records: &[SystemRecord], counts: &[usize], sigmas: &[f64]) -> Vec<PredictionLine> {
    let mut out = Vec::new();
    for r in records {
        for &n in counts.iter().filter(|&&n| n >= 1 && n <= r.instances.len()) {
            for &sigma in sigmas {
                out.push(PredictionLine {
                    id: r.id,
                    instances: n,
                    sigma,
                    expressions: Some(system_to_strings(&r.system)),
                    infix: Some(r.system.render_inline()),
                    tokens: Vec::new(),
                    r: 1.0,
                    scores: Vec::new(),
                    error: None,
                });
            }
        }
    }
    out
}

fn cmd_eval(a: EvalArgs, exec: Exec) -> Result<(), Failure> {
    let records = load_records(&a.corpus)?;
    let solver = SolverConfig::default();
    let mut inputs: Vec<&Path> = vec![&a.corpus];
    let (label, rows) = if a.baseline {
        let cfg = BaselineConfig {
            stlsq: StlsqConfig { threshold: a.threshold, max_iter: a.max_iter, ..StlsqConfig::default() },
            instance_counts: a.instances.clone(),
            sigmas: a.sigmas.clone(),
            seed: a.seed,
            solver,
        };
        let (lines, mut rows) = run_baseline(&records, &cfg, exec);
        let label = a.label.clone().unwrap_or_else(|| BASELINE_MODEL.to_string());
        rows.iter_mut().for_each(|r| r.model = label.clone());
        let mut p = a.out.clone().into_os_string();
        p.push(".predictions.jsonl");
        let mut w = create_writer(Path::new(&p)).run()?;
        write_predictions(&mut w, &lines).run()?;
        (label, rows)
    } else {
        let (label, preds) = if a.truth {
            ("truth".to_string(), truth_predictions(&records, &a.instances, &a.sigmas))
        } else {
            let p = a.predictions.as_ref().ok_or_else(|| Failure::Config(anyhow!("one of --predictions, --truth or --baseline is required")))?;
            inputs.push(p);
            let r = symode::corpus::open_reader(p).with_context(|| format!("opening {}", p.display())).data()?;
            ("model".to_string(), read_predictions(r).map_err(|e| anyhow!(e)).data()?)
        };
        let label = a.label.clone().unwrap_or(label);
        let rows = evaluate_predictions(&label, &records, &preds, a.seed, &solver, exec).map_err(|e| anyhow!(e)).data()?;
        (label, rows)
    };
    let mut w = BufWriter::new(File::create(&a.out).run()?);
    write_results_csv(&mut w, &rows).run()?;
    let summary = summarize(&rows);
    let mut sp = a.out.clone().into_os_string();
    sp.push(".summary.csv");
    let mut sw = BufWriter::new(File::create(&sp).run()?);
    write_summary_csv(&mut sw, &summary).run()?;
    let config = serde_json::json!({
        "label": label, "truth": a.truth, "baseline": a.baseline, "instances": a.instances,
        "sigmas": a.sigmas, "threshold": a.threshold, "max_iter": a.max_iter, "solver": solver,
    });
    save_manifest(&a.out, &ArtifactManifest::new("results", Some(a.seed), config, &inputs).run()?)?;
    for s in &summary {
        println!(
            "{} D={} n={} sigma={} {}: {:.3} ({} systems, {} excluded)",
            s.model,
            s.dim,
            s.instances,
            s.sigma,
            s.task.name(),
            s.accuracy,
            s.systems,
            s.excluded
        );
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<(), Failure> {
    let mut rows = Vec::new();
    for p in &a.results {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).data()?;
        rows.extend(read_results_csv(&text).map_err(|e| anyhow!("{}: {e}", p.display())).data()?);
    }
    let written = write_report(&rows, &a.out).map_err(|e| match e {
        symode::report::ReportError::Empty => Failure::Data(anyhow!("no results to report")),
        other => Failure::Runtime(other.into()),
    })?;
    let inputs: Vec<&Path> = a.results.iter().map(|p| p.as_path()).collect();
    let m = ArtifactManifest::new("report", None, serde_json::json!({ "files": written }), &inputs).run()?;
    m.save(&a.out.join("manifest.json")).run()?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn real_main() -> Result<(), Failure> {
    let args = apply_config_file(std::env::args_os().collect())?;
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            e.print().ok();
            return Ok(());
        }
        Err(e) => {
            e.print().ok();
            return Err(Failure::Config(anyhow!("invalid arguments")));
        }
    };
    let exec = exec_for(cli.workers)?;
    match cli.cmd {
        Cmd::Datagen(a) => cmd_datagen(a, exec),
        Cmd::Train(a) => cmd_train(a, exec),
        Cmd::Predict(a) => cmd_predict(a, exec),
        Cmd::Eval(a) => cmd_eval(a, exec),
        Cmd::Report(a) => cmd_report(a),
        Cmd::Selftest => {
            if selftest::run(exec) {
                Ok(())
            } else {
                Err(Failure::Runtime(anyhow!("selftest failed")))
            }
        }
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let code = f.code();
            match f {
                Failure::Config(e) | Failure::Data(e) | Failure::Runtime(e) => eprintln!("error: {e:#}"),
            }
            ExitCode::from(code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_sections() {
        let m = parse_config_file("seed = 3 # c\n[train]\nbatch_size = 4\n\n[eval]\nseed=9\n").unwrap();
        assert_eq!(m[&None], vec![("seed".to_string(), "3".to_string())]);
        assert_eq!(m[&Some("train".into())], vec![("batch-size".to_string(), "4".to_string())]);
        assert!(parse_config_file("oops").is_err());
    }

    #[test]
    fn count_specs() {
        assert_eq!(parse_count("2").unwrap(), CountSpec::Fixed(2));
        assert_eq!(parse_count("1-4").unwrap(), CountSpec::Uniform(1, 4));
        assert!(parse_count("x").is_err());
    }
}
