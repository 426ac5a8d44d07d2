use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use parsim_core::collectives::Topology;
use parsim_core::simulator::{
    calibrate, simulate_iteration, simulate_run_traced, Calibration, CalibrationTarget, CostParams,
    IterationProfile, SimReport, TimelineRecord,
};
use parsim_core::strategies::{DelayPattern, HyperParams};
use parsim_core::trainer::{
    chrono_split, evaluate_topk, generate_synthetic, load_dataset, train, ChronoSplit, EvalResult,
    LossPoint, RecModel, TrainSettings,
};
use serde::Serialize;

use crate::config::{DatasetSpec, ExperimentConfig, Format, RunSpec, TrainerSection};
use crate::report::{self, ReportRow};
use crate::{CliError, OutputOptions};

/// Reads a standalone costs file as written by `calibrate`.
pub fn load_costs(path: &Path) -> Result<CostParams, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let costs: CostParams =
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    costs
        .validate()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(costs)
}

fn topology(cfg: &ExperimentConfig) -> Result<&Topology, CliError> {
    cfg.topology
        .as_ref()
        .ok_or_else(|| CliError::Config("missing [topology] section".into()))
}

fn costs_or_override(cfg: &ExperimentConfig, file: Option<&Path>) -> Result<CostParams, CliError> {
    match file {
        Some(p) => load_costs(p),
        None => cfg
            .costs
            .clone()
            .ok_or_else(|| CliError::Config("missing [costs] section (or pass --costs)".into())),
    }
}

fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn slug(name: &str) -> String {
    let mut s = String::new();
    for c in name.chars() {
        if c.is_ascii_alphanumeric() {
            s.push(c.to_ascii_lowercase());
        } else if !s.ends_with('-') {
            s.push('-');
        }
    }
    s.trim_matches('-').to_string()
}

/// Result of simulating one `[[run]]`.
#[derive(Debug, Clone)]
pub struct SimRow {
    pub run: RunSpec,
    pub report: SimReport,
    pub profile: IterationProfile,
    pub timeline: Vec<TimelineRecord>,
}

pub fn simulate_rows(cfg: &ExperimentConfig, costs: &CostParams) -> Result<Vec<SimRow>, CliError> {
    let topo = topology(cfg)?;
    if cfg.runs.is_empty() {
        return Err(CliError::Config("no [[run]] entries to simulate".into()));
    }
    cfg.runs
        .iter()
        .map(|run| {
            let (report, timeline) = simulate_run_traced(
                &run.strategy,
                topo,
                costs,
                run.global_batch,
                cfg.simulation.iterations,
            )
            .map_err(|e| CliError::Runtime(format!("run {}: {e}", run.name)))?;
            let profile = simulate_iteration(&run.strategy, topo, costs, run.global_batch)?;
            info!(
                "{}: {:.1} samples/s, speedup {:.2}, comm share {:.1}%",
                run.name,
                report.throughput,
                report.speedup,
                100.0 * report.comm_share
            );
            Ok(SimRow {
                run: run.clone(),
                report,
                profile,
                timeline,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct TimelineLine<'a> {
    run: &'a str,
    iter: usize,
    device: usize,
    event_kind: &'static str,
    start_s: f64,
    end_s: f64,
}

pub fn cmd_simulate(
    cfg: &ExperimentConfig,
    costs_file: Option<&Path>,
    out: &OutputOptions,
) -> Result<Vec<SimRow>, CliError> {
    let costs = costs_or_override(cfg, costs_file)?;
    let rows = simulate_rows(cfg, &costs)?;
    prepare_dir(&out.dir)?;
    let table: Vec<ReportRow> = rows.iter().map(ReportRow::from_sim).collect();
    if out.wants(Format::Csv) {
        write_csv(&out.dir.join("report.csv"), &table)?;
    }
    if out.wants(Format::Md) {
        fs::write(out.dir.join("report.md"), report::simulation_markdown(&table))?;
    }
    if cfg.simulation.timeline {
        let mut w = csv::Writer::from_path(out.dir.join("timeline.csv"))?;
        for row in &rows {
            for r in &row.timeline {
                w.serialize(TimelineLine {
                    run: &row.run.name,
                    iter: r.iter,
                    device: r.device,
                    event_kind: r.event_kind.as_str(),
                    start_s: r.start_s,
                    end_s: r.end_s,
                })?;
            }
        }
        w.flush()?;
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub calibration: Calibration,
    pub targets: Vec<CalibrationTarget>,
}

#[derive(Serialize)]
struct ResidualLine<'a> {
    run: &'a str,
    target_throughput: f64,
    simulated_throughput: f64,
    residual: f64,
}

/// Fits the `[calibration] free` parameters to every run with a target.
pub fn fit_costs(cfg: &ExperimentConfig, initial: &CostParams) -> Result<FitOutcome, CliError> {
    let topo = topology(cfg)?;
    let cal = cfg
        .calibration
        .as_ref()
        .ok_or_else(|| CliError::Config("missing [calibration] section".into()))?;
    let targets: Vec<CalibrationTarget> = cfg
        .runs
        .iter()
        .filter_map(|r| {
            r.target_throughput.map(|t| CalibrationTarget {
                name: r.name.clone(),
                strategy: r.strategy.clone(),
                global_batch: r.global_batch,
                throughput: t,
            })
        })
        .collect();
    let calibration = calibrate(&targets, &cal.free, topo, initial)?;
    info!(
        "calibrated in {} iterations, max |residual| {:.3e}",
        calibration.iterations,
        calibration.max_abs_residual()
    );
    Ok(FitOutcome {
        calibration,
        targets,
    })
}

/// Writes `costs.toml` and `calibration.csv`; fails when the fit misses
/// `max_residual`, after writing both files.
pub fn cmd_calibrate(
    cfg: &ExperimentConfig,
    costs_file: Option<&Path>,
    out: &OutputOptions,
) -> Result<FitOutcome, CliError> {
    let initial = costs_or_override(cfg, costs_file)?;
    let fit = fit_costs(cfg, &initial)?;
    prepare_dir(&out.dir)?;
    let text = toml::to_string(&fit.calibration.params)
        .map_err(|e| CliError::Runtime(format!("serializing costs: {e}")))?;
    fs::write(out.dir.join("costs.toml"), text)?;
    let lines: Vec<ResidualLine> = fit
        .targets
        .iter()
        .zip(&fit.calibration.residuals)
        .map(|(t, r)| ResidualLine {
            run: &t.name,
            target_throughput: t.throughput,
            simulated_throughput: t.throughput * (1.0 + r),
            residual: *r,
        })
        .collect();
    write_csv(&out.dir.join("calibration.csv"), &lines)?;
    let limit = cfg.calibration.as_ref().map_or(0.0, |c| c.max_residual);
    let worst = fit.calibration.max_abs_residual();
    if worst > limit {
        let detail: Vec<String> = lines
            .iter()
            .map(|l| format!("{}: {:+.2}%", l.run, 100.0 * l.residual))
            .collect();
        return Err(CliError::Runtime(format!(
            "calibration could not match the targets within {:.2}% (worst {:.2}%): {}",
            100.0 * limit,
            100.0 * worst,
            detail.join(", ")
        )));
    }
    Ok(fit)
}

#[derive(Debug, Clone)]
pub struct VariantOutcome {
    pub name: String,
    pub model: RecModel,
    pub loss_curve: Vec<LossPoint>,
    pub eval: EvalResult,
}

fn load_split(tr: &TrainerSection, seed: u64) -> Result<ChronoSplit, CliError> {
    let data = match &tr.dataset {
        DatasetSpec::Synthetic {
            users,
            items,
            interactions,
            seed: data_seed,
        } => generate_synthetic(*users, *items, *interactions, data_seed.unwrap_or(seed))?,
        DatasetSpec::Csv { path } => load_dataset(path)
            .map_err(|e| CliError::Runtime(format!("dataset {}: {e}", path.display())))?,
    };
    if data.duplicates_dropped() > 0 {
        info!("dropped {} duplicate interactions", data.duplicates_dropped());
    }
    Ok(chrono_split(&data, (tr.split[0], tr.split[1], tr.split[2]))?)
}

fn trainer_section(cfg: &ExperimentConfig) -> Result<&TrainerSection, CliError> {
    cfg.trainer
        .as_ref()
        .ok_or_else(|| CliError::Config("missing [trainer] section".into()))
}

fn model_path(dir: &Path, variant: &str) -> PathBuf {
    dir.join(format!("model_{}.psmf", slug(variant)))
}

/// Trains and evaluates every variant from the same initial model.
pub fn train_variants(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<VariantOutcome>, CliError> {
    let tr = trainer_section(cfg)?;
    let split = load_split(tr, seed)?;
    let init = RecModel::init(split.num_users, split.num_items, tr.dim, seed)?;
    let settings = TrainSettings {
        hyper: HyperParams {
            learning_rate: tr.learning_rate,
            batch_size: tr.batch_size,
            steps: tr.steps,
        },
        l2: tr.l2,
        log_every: tr.log_every,
        delays: DelayPattern {
            delays: tr.delays.clone(),
        },
    };
    tr.variants
        .iter()
        .map(|v| {
            let outcome = train(init.clone(), &split, &v.strategy, &settings, seed)
                .map_err(|e| CliError::Runtime(format!("variant {}: {e}", v.name)))?;
            let eval = evaluate_topk(&outcome.model, &split, tr.eval, seed)?;
            info!(
                "{}: HR@{} {:.4}, NDCG@{} {:.4}",
                v.name, tr.eval.k, eval.hr_at_k, tr.eval.k, eval.ndcg_at_k
            );
            Ok(VariantOutcome {
                name: v.name.clone(),
                model: outcome.model,
                loss_curve: outcome.loss_curve,
                eval,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct LossLine<'a> {
    variant: &'a str,
    step: usize,
    loss: f64,
}

/// Trains (or with `eval_only`, reloads) every variant and writes the loss
/// curves, evaluation table and model files.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    seed: u64,
    eval_only: bool,
    out: &OutputOptions,
) -> Result<Vec<report::EvalLine>, CliError> {
    let tr = trainer_section(cfg)?;
    let evals: Vec<(String, EvalResult)> = if eval_only {
        let split = load_split(tr, seed)?;
        tr.variants
            .iter()
            .map(|v| {
                let path = model_path(&out.dir, &v.name);
                let model = RecModel::load(&path)
                    .map_err(|e| CliError::Runtime(format!("model {}: {e}", path.display())))?;
                Ok((v.name.clone(), evaluate_topk(&model, &split, tr.eval, seed)?))
            })
            .collect::<Result<_, CliError>>()?
    } else {
        let outcomes = train_variants(cfg, seed)?;
        prepare_dir(&out.dir)?;
        let mut losses = Vec::new();
        for o in &outcomes {
            o.model.save(&model_path(&out.dir, &o.name))?;
            losses.extend(o.loss_curve.iter().map(|p| LossLine {
                variant: &o.name,
                step: p.step,
                loss: p.loss,
            }));
        }
        write_csv(&out.dir.join("loss_curve.csv"), &losses)?;
        outcomes.into_iter().map(|o| (o.name, o.eval)).collect()
    };
    let lines = report::eval_lines(&evals, tr.eval.k);
    prepare_dir(&out.dir)?;
    write_csv(&out.dir.join("eval.csv"), &lines)?;
    if out.wants(Format::Md) && !eval_only {
        fs::write(out.dir.join("eval.md"), report::quality_markdown(&lines))?;
    }
    Ok(lines)
}

/// Combined Markdown report over earlier output directories.
pub fn cmd_report(dirs: &[PathBuf]) -> Result<String, CliError> {
    if dirs.is_empty() {
        return Err(CliError::Runtime("no run directories given".into()));
    }
    let mut sims = Vec::new();
    let mut evals = Vec::new();
    for dir in dirs {
        if !dir.is_dir() {
            return Err(CliError::Runtime(format!("{} is not a directory", dir.display())));
        }
        let sim = dir.join("report.csv");
        let eval = dir.join("eval.csv");
        if !sim.is_file() && !eval.is_file() {
            return Err(CliError::Runtime(format!(
                "{} holds neither report.csv nor eval.csv",
                dir.display()
            )));
        }
        if sim.is_file() {
            sims.extend(read_csv::<ReportRow>(&sim)?);
        }
        if eval.is_file() {
            evals.extend(read_csv::<report::EvalLine>(&eval)?);
        }
    }
    Ok(report::combined_markdown(&sims, &evals))
}

fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    if rows.is_empty() {
        return Err(CliError::Runtime(format!("{} has no rows", path.display())));
    }
    Ok(rows)
}
