//! The `prefdyn` experiment runner.
//!
//! Exit codes: 0 success, 1 property failure (`verify`), 2 configuration or
//! input error.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};

use crate::config::{Overrides, RunConfig, SweepParam};
use crate::csvio::{fmt_f64, write_dynamics, write_train, CsvFile};
use crate::data::{
    build_probe_task, generate_displacement_prone, generate_probe_dataset, load_sft_pairs, load_triples,
    DisplacementParams, GeneratorSpec, PreferenceTriple, ProbeParams, SftPair, SyntheticTask,
};
use crate::dynamics::probe_trajectory;
use crate::error::{Error, Result};
use crate::par::{instance_rng, map_indexed};
use crate::policy::{OutputSpace, SplitPolicy};
use crate::trainer::{mean_preferred_prob, train_run, warm_start, Datasets, Method, SpoConfig};
use crate::verify::run_suite;

pub const EXIT_OK: i32 = 0;
pub const EXIT_PROPERTY_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Verify,
    Dynamics,
    MassShift,
    Train,
    Sweep,
}

#[derive(Debug, Parser)]
#[command(name = "prefdyn", version, about = "DPO/SPO dynamics lab on toy policies")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (overrides the config file and PREFDYN_OUT).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// sft, dpo or spo.
    #[arg(long)]
    pub method: Option<Method>,
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("prefdyn: {e}");
            EXIT_CONFIG
        }
    }
}

pub fn run(cli: &Cli) -> Result<i32> {
    let ov = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        method: cli.method,
    };
    let cfg = RunConfig::load(&cli.config, &ov)?;
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    match cli.command {
        Command::Verify => cmd_verify(&cfg, &out),
        Command::Dynamics => cmd_dynamics(&cfg, &out).map(|_| EXIT_OK),
        Command::MassShift => cmd_mass_shift(&cfg, &out).map(|_| EXIT_OK),
        Command::Train => cmd_train(&cfg, &out).map(|_| EXIT_OK),
        Command::Sweep => cmd_sweep(&cfg, &out).map(|_| EXIT_OK),
    }
}

/// Everything a training-style command needs, built from the task spec.
#[derive(Debug, Clone)]
pub struct Workload {
    pub space: OutputSpace,
    pub policy: SplitPolicy,
    pub triples: Vec<PreferenceTriple>,
    pub sft_pairs: Vec<SftPair>,
    /// Tracked preferred and dispreferred (x, y).
    pub d_w: Vec<(usize, usize)>,
    pub d_l: Vec<(usize, usize)>,
    pub ystar: (usize, usize),
}

impl Workload {
    pub fn datasets(&self) -> Datasets<'_> {
        Datasets {
            space: &self.space,
            triples: &self.triples,
            sft_pairs: &self.sft_pairs,
        }
    }
}

pub fn build_workload(cfg: &RunConfig) -> Result<Workload> {
    let mut rng = instance_rng(cfg.spo.seed, 0);
    match cfg.task.generator {
        GeneratorSpec::Probe => {
            let probe = build_probe_task(&ProbeParams::default(), &mut rng)?;
            let ds = generate_probe_dataset(
                &probe.policy,
                &probe.task.space,
                cfg.n_samples,
                cfg.top_k,
                &mut rng,
            )?;
            let set = &ds.sets[0];
            Ok(Workload {
                space: probe.task.space,
                policy: probe.policy,
                d_w: set.d_w.iter().map(|&y| (set.x, y)).collect(),
                d_l: set.d_l.iter().map(|&y| (set.x, y)).collect(),
                ystar: (set.x, set.ystar),
                triples: ds.triples,
                sft_pairs: ds.sft_pairs,
            })
        }
        GeneratorSpec::DisplacementProne => {
            let d = generate_displacement_prone(&DisplacementParams::default(), &mut rng)?;
            let t = d.triple;
            Ok(Workload {
                space: d.task.space,
                policy: d.policy,
                triples: vec![t],
                sft_pairs: vec![SftPair { x: t.x, y_w: t.y_w }],
                d_w: vec![(t.x, t.y_w)],
                d_l: vec![(t.x, t.y_l)],
                ystar: (t.x, d.ystar),
            })
        }
        GeneratorSpec::File => file_workload(cfg),
        GeneratorSpec::Random => Err(Error::Config("generator \"random\" has no workload".into())),
    }
}

fn file_workload(cfg: &RunConfig) -> Result<Workload> {
    let path = cfg.task.path.as_deref().expect("validated");
    let task = SyntheticTask::load(path)?;
    let policy = match &cfg.task.policy {
        Some(p) => SplitPolicy::load(p)?,
        None => task.zero_policy()?,
    };
    let triples = match &cfg.task.triples {
        Some(p) => load_triples(p, Some(&task.space))?,
        None => Vec::new(),
    };
    let sft_pairs = match &cfg.task.sft {
        Some(p) => load_sft_pairs(p, Some(&task.space))?,
        None => Vec::new(),
    };
    let d_w: Vec<(usize, usize)> = triples
        .iter()
        .map(|t| (t.x, t.y_w))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let d_l: Vec<(usize, usize)> = triples
        .iter()
        .map(|t| (t.x, t.y_l))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let x = triples.first().map_or(0, |t| t.x);
    let exclude: Vec<usize> = d_w.iter().chain(&d_l).filter(|p| p.0 == x).map(|p| p.1).collect();
    let ystar = (x, policy.argmax_output(x, &exclude)?);
    Ok(Workload {
        space: task.space,
        policy,
        triples,
        sft_pairs,
        d_w,
        d_l,
        ystar,
    })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value)?;
    std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
}

pub fn cmd_verify(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let report = run_suite(&cfg.verify_options())?;
    for p in &report.properties {
        let stat = p
            .statistic
            .map(|s| format!(" statistic={s:.4}"))
            .unwrap_or_default();
        println!(
            "{} {:<26} instances={:<6} worst_slack={:.3e}{}",
            if p.passed { "PASS" } else { "FAIL" },
            p.property,
            p.instances,
            p.worst_slack,
            stat
        );
    }
    write_json(&out.join("verify_report.json"), &report)?;
    Ok(if report.passed {
        EXIT_OK
    } else {
        EXIT_PROPERTY_FAILURE
    })
}

pub fn cmd_dynamics(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let w = build_workload(cfg)?;
    let t = *w
        .triples
        .first()
        .ok_or_else(|| Error::Config("dynamics needs at least one preference triple".into()))?;
    let (start, reference) = warm_start(&w.policy, &w.sft_pairs, &cfg.spo)?;
    let steps = cfg.steps.unwrap_or(cfg.spo.t);
    let reports = probe_trajectory(&start, &reference, &t, cfg.spo.eta_theta, cfg.spo.beta, steps)?;
    let path = out.join("dynamics.csv");
    write_dynamics(&path, &reports)?;
    Ok(path)
}

/// Per-step `(mean log pi(D_w), mean log pi(D_l), log pi(y*))`.
pub fn mass_shift_series(cfg: &RunConfig, w: &Workload, method: Method) -> Result<Vec<[f64; 3]>> {
    let mut series = Vec::with_capacity(cfg.spo.t + 1);
    let mut failure = None;
    let mean_lp = |pol: &SplitPolicy, set: &[(usize, usize)]| -> Result<f64> {
        let mut s = 0.0;
        for &(x, y) in set {
            s += pol.log_prob(x, y)?;
        }
        Ok(s / set.len().max(1) as f64)
    };
    train_run(method, &w.policy, w.datasets(), &cfg.spo, |_, pol| {
        let row = (|| {
            Ok::<_, Error>([
                mean_lp(pol, &w.d_w)?,
                mean_lp(pol, &w.d_l)?,
                pol.log_prob(w.ystar.0, w.ystar.1)?,
            ])
        })();
        match row {
            Ok(r) => series.push(r),
            Err(e) => failure = failure.take().or(Some(e)),
        }
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(series),
    }
}

pub fn cmd_mass_shift(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let w = build_workload(cfg)?;
    let series = mass_shift_series(cfg, &w, cfg.method)?;
    let path = out.join("mass_shift.csv");
    let mut f = CsvFile::create(&path, &["step", "mean_logp_dw", "mean_logp_dl", "logp_ystar"])?;
    for (step, r) in series.iter().enumerate() {
        f.row(&[step.to_string(), fmt_f64(r[0]), fmt_f64(r[1]), fmt_f64(r[2])])?;
    }
    f.finish()?;
    Ok(path)
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let w = build_workload(cfg)?;
    let report = train_run(cfg.method, &w.policy, w.datasets(), &cfg.spo, |_, _| {})?;
    let path = out.join("train.csv");
    write_train(&path, &report.rows)?;
    report.final_policy.save(&out.join("final_policy.json"))?;
    println!(
        "{} {}: {} steps, final accuracy {}",
        cfg.name,
        cfg.method.as_str(),
        report.rows.len(),
        report.final_accuracy
    );
    Ok(path)
}

pub fn cmd_sweep(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let spec = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("sweep needs a \"sweep\" section".into()))?;
    let w = build_workload(cfg)?;
    let results = map_indexed(spec.values.len(), |i| {
        let v = spec.values[i];
        let spo = SpoConfig {
            lambda: if spec.param == SweepParam::Lambda {
                v
            } else {
                cfg.spo.lambda
            },
            gamma: if spec.param == SweepParam::Gamma {
                v
            } else {
                cfg.spo.gamma
            },
            ..cfg.spo.clone()
        };
        let r = train_run(cfg.method, &w.policy, w.datasets(), &spo, |_, _| {})?;
        Ok::<_, Error>((
            r.final_accuracy,
            mean_preferred_prob(&r.final_policy, &w.triples)?,
        ))
    });
    let path = out.join("sweep.csv");
    let mut f = CsvFile::create(
        &path,
        &["param_name", "param_value", "final_accuracy", "final_pi_w_mean"],
    )?;
    for (v, r) in spec.values.iter().zip(results) {
        let (acc, pw) = r?;
        f.row(&[
            spec.param.as_str().to_string(),
            fmt_f64(*v),
            fmt_f64(acc),
            fmt_f64(pw),
        ])?;
    }
    f.finish()?;
    Ok(path)
}
