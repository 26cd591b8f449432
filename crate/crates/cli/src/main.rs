mod config;
mod manifest;
mod replay;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use lap_core::data::{act_dim, load_dataset, obs_dim, save_dataset};
use lap_core::dynamics::RobotModel;
use lap_core::experiment::{run_experiment, throw_grid};
use lap_core::model::{Decoder, Normalizer};
use lap_core::regen::{regenerate, RegenConfig, SceneTrace};
use lap_core::replan::{read_step_log, write_step_log};
use lap_core::sim::{
    check_widths, evaluate, load_throws, save_throws, summarize, summary_csv, synth_demos, write_results, write_summary, DemoConfig, LearnedKind, LearnedPolicy, ModelBasedConfig,
    ModelBasedPolicy, Policy,
};
use lap_core::vb::{model_path, resume, train};
use lap_core::Error;

use config::RunConfig;
use manifest::Run;

#[derive(Parser)]
#[command(name = "lap", version, about = "Latent adaptive planner: demonstrations to catching policies")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Method {
    ModelBased,
    Bc,
    Lap,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render synthetic catching demonstrations to scene traces.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value = "robot_a")]
        robot: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Regenerate torque-labeled trajectories from scene traces.
    Regen {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long, default_value = "robot_a")]
        robot: String,
        #[arg(long)]
        out: PathBuf,
        /// exit nonzero if any trace is rejected
        #[arg(long)]
        strict: bool,
        /// low-pass cutoff before differencing; 0 disables smoothing
        #[arg(long, default_value_t = 6.0)]
        cutoff_hz: f64,
    },
    /// Train the latent-plan decoder with variational Bayes.
    Train(TrainArgs),
    /// Train the same decoder with z fixed at zero.
    TrainBc(TrainArgs),
    /// Sample a throw set over the three box profiles.
    Throws {
        #[arg(long, default_value_t = 30)]
        per_profile: usize,
        #[arg(long, default_value = "robot_a")]
        robot: String,
        #[arg(long, default_value_t = 99)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a method on a throw set.
    Eval {
        #[arg(long, value_enum)]
        method: Method,
        /// training directory or checkpoint file (learned methods)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        throws: PathBuf,
        #[arg(long, default_value = "robot_a")]
        robot: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// also write per-episode policy step logs
        #[arg(long)]
        logs: bool,
    },
    /// Turn a policy step log into plot-ready CSVs.
    Replay {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value = "robot_a")]
        robot: String,
        #[arg(long)]
        out: PathBuf,
        /// policy period (s)
        #[arg(long, default_value_t = 1.0 / 30.0)]
        dt: f64,
    },
    /// Run the desk-scale comparison end to end.
    Experiment {
        #[arg(long, default_value = "robot_a")]
        robot: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
    },
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    /// continue from the state saved in --out
    #[arg(long)]
    resume: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Synth { n, robot, seed, out } => synth(n, &robot, seed, &out),
        Cmd::Regen { traces, robot, out, strict, cutoff_hz } => regen(&traces, &robot, &out, strict, cutoff_hz),
        Cmd::Train(a) => train_cmd(a, false),
        Cmd::TrainBc(a) => train_cmd(a, true),
        Cmd::Throws { per_profile, robot, seed, out } => throws(per_profile, &robot, seed, &out),
        Cmd::Eval { method, checkpoint, throws, robot, config, out, seed, jobs, logs } => eval(method, checkpoint.as_deref(), &throws, &robot, config.as_deref(), &out, seed, jobs, logs),
        Cmd::Replay { log, robot, out, dt } => {
            let steps = read_step_log(&log)?;
            let mut run = Run::start("");
            run.input(&log)?;
            replay::write_csvs(&steps, &RobotModel::resolve(&robot)?, dt, &out)?;
            replay::FILES.iter().for_each(|f| run.entry(*f));
            run.finish(&out.join("manifest.json"))?;
            println!("{} steps -> {}", steps.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Experiment { robot, config, out, jobs } => experiment(&robot, config.as_deref(), &out, jobs),
    }
}

fn synth(n: usize, robot: &str, seed: u64, out: &Path) -> Result<ExitCode> {
    let model = RobotModel::resolve(robot)?;
    let demos = synth_demos(n, &model, &DemoConfig::default(), seed)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut run = Run::start("");
    for (i, d) in demos.iter().enumerate() {
        let name = format!("trace_{i:04}.json");
        std::fs::write(out.join(&name), d.trace.to_json())?;
        std::fs::write(out.join(format!("truth_{i:04}.json")), serde_json::to_string(&d.truth)?)?;
        run.entry(name);
    }
    println!("{}", run.finish(&out.join("manifest.json"))?);
    Ok(ExitCode::SUCCESS)
}

fn trace_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|s| s.to_str()).unwrap_or("");
            name.ends_with(".json") && !name.starts_with("truth_") && name != "manifest.json"
        })
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no traces in {}", dir.display());
    }
    Ok(files)
}

fn regen(traces: &Path, robot: &str, out: &Path, strict: bool, cutoff_hz: f64) -> Result<ExitCode> {
    let model = RobotModel::resolve(robot)?;
    let cfg = RegenConfig { cutoff_hz: (cutoff_hz > 0.0).then_some(cutoff_hz), ..RegenConfig::default() };
    let mut run = Run::start("");
    run.input_bytes(robot, model.to_kv().to_text().as_bytes());
    let mut data = Vec::new();
    let mut rejected = 0;
    for path in trace_files(traces)? {
        run.input(&path)?;
        let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("?").to_string();
        let trace = SceneTrace::load(&path)?;
        match regenerate(&trace, &model, &cfg, &name) {
            Ok((t, st)) => {
                eprintln!("{name}: frames {} steps {} skipped {} clamped {} contact {} scale {:.4}", st.frames, st.steps, st.skipped, st.clamped, st.contact_steps, st.scale);
                data.push(t);
                run.entry(name);
            }
            Err(Error::Rejected(msg)) => {
                eprintln!("rejected {msg}");
                rejected += 1;
            }
            Err(e) => return Err(e.into()),
        }
    }
    if data.is_empty() {
        bail!("every trace was rejected");
    }
    save_dataset(out, &data)?;
    run.finish(&sidecar(out, "manifest.json"))?;
    eprintln!("{} trajectories, {rejected} rejected -> {}", data.len(), out.display());
    Ok(if strict && rejected > 0 { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn train_cmd(a: TrainArgs, fixed_z: bool) -> Result<ExitCode> {
    let rc = RunConfig::load(a.config.as_deref())?;
    let tc = rc.train(fixed_z, a.seed, a.jobs)?;
    let data = load_dataset(&a.dataset)?;
    let first = data.first().context("dataset is empty")?;
    let mut run = Run::start(&rc.hash);
    run.input(&a.dataset)?;
    let out = if a.resume {
        resume(&a.out, &data, &tc)?
    } else {
        let dof = first.dof();
        let mc = rc.model(obs_dim(dof), act_dim(dof))?;
        let dec = Decoder::new(mc, Normalizer::fit(&data)?, tc.seed)?;
        train(dec, &data, &tc, Some(&a.out))?
    };
    if let Some(last) = out.log.last() {
        println!("epoch {} elbo {:.4} kl {:.4} nll {:.4}", last.epoch, last.elbo, last.kl, last.nll);
    }
    run.entry("model.ckpt");
    run.finish(&a.out.join("manifest.json"))?;
    Ok(ExitCode::SUCCESS)
}

fn throws(per_profile: usize, robot: &str, seed: u64, out: &Path) -> Result<ExitCode> {
    let model = RobotModel::resolve(robot)?;
    let mut cfg = lap_core::experiment::ExperimentConfig::desk();
    cfg.throws_per_profile = per_profile;
    cfg.throw_seed = seed;
    let set = throw_grid(&model, &cfg);
    save_throws(out, &set)?;
    println!("{} throws -> {}", set.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn eval(method: Method, checkpoint: Option<&Path>, throws: &Path, robot: &str, config: Option<&Path>, out: &Path, seed: u64, jobs: usize, logs: bool) -> Result<ExitCode> {
    let model = RobotModel::resolve(robot)?;
    let rc = RunConfig::load(config)?;
    let env = rc.env()?;
    let set = load_throws(throws)?;
    let mut run = Run::start(&rc.hash);
    run.input(throws)?;
    std::fs::create_dir_all(out)?;
    let (rows, results) = match method {
        Method::ModelBased => evaluate("model-based", &model, &env, &set, || Ok(Box::new(ModelBasedPolicy::new(ModelBasedConfig::default())) as Box<dyn Policy>), seed, jobs)?,
        Method::Bc | Method::Lap => {
            let ck = checkpoint.context("learned methods need --checkpoint")?;
            let file = if ck.is_dir() { model_path(ck) } else { ck.to_path_buf() };
            run.input(&file)?;
            let dec = Arc::new(Decoder::load(&file)?);
            check_widths(&dec, &model)?;
            let kind = if matches!(method, Method::Lap) { LearnedKind::Lap } else { LearnedKind::Bc };
            let lc = rc.learned()?;
            evaluate(kind.name(), &model, &env, &set, || Ok(Box::new(LearnedPolicy::new(kind, dec.clone(), lc.clone())?) as Box<dyn Policy>), seed, jobs)?
        }
    };
    write_results(&out.join("results.csv"), &rows)?;
    let summary = summarize(&rows);
    write_summary(&out.join("summary.csv"), &summary)?;
    run.entry("results.csv");
    run.entry("summary.csv");
    if logs {
        let dir = out.join("logs");
        std::fs::create_dir_all(&dir)?;
        for (row, r) in rows.iter().zip(&results) {
            if !r.steps.is_empty() {
                let name = format!("{}_{:03}.jsonl", row.method, row.episode);
                write_step_log(&dir.join(&name), &r.steps)?;
                run.entry(format!("logs/{name}"));
            }
        }
    }
    run.finish(&out.join("manifest.json"))?;
    print!("{}", summary_csv(&summary));
    Ok(ExitCode::SUCCESS)
}

fn experiment(robot: &str, config: Option<&Path>, out: &Path, jobs: Option<usize>) -> Result<ExitCode> {
    let model = RobotModel::resolve(robot)?;
    let rc = RunConfig::load(config)?;
    let mut cfg = rc.experiment()?;
    if let Some(j) = jobs {
        cfg.jobs = j;
    }
    let run = Run::start(&rc.hash);
    let res = run_experiment(&model, &cfg, Some(out))?;
    run.finish(&out.join("manifest.json"))?;
    print!("{}", summary_csv(&res.summary));
    Ok(ExitCode::SUCCESS)
}
