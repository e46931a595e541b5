//! The four pipeline stages behind the CLI subcommands.

use std::fs;
use std::path::Path;

use nalgebra::DVector;

use koopman_ptc::analysis::build_report;
use koopman_ptc::dictionary::Dictionary;
use koopman_ptc::error::Error as CoreError;
use koopman_ptc::simulator::{collect_data, run_closed_loop_with_escape, RunResult};
use koopman_ptc::sysid::{fit_edmdc, to_companion, KoopmanModel, SplitTag};
use koopman_ptc::uncertainty::{compute_residuals, fit_bound};

use crate::config::ExperimentConfig;
use crate::dataio::{
    read_dataset_csv, read_json, write_dataset_csv, write_json, AggregateReport, Manifest,
    ModelFile, RunReport,
};

pub const TRAIN_CSV: &str = "train.csv";
pub const VALIDATION_CSV: &str = "validation.csv";
pub const MANIFEST_JSON: &str = "manifest.json";
pub const MODEL_JSON: &str = "model.json";
pub const RESIDUALS_CSV: &str = "residuals.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

/// Stable process exit codes.
pub mod exit_code {
    pub const SUCCESS: i32 = 0;
    pub const CONFIG: i32 = 1;
    pub const NUMERIC: i32 = 2;
    pub const NOT_SETTLED: i32 = 3;
}

/// Classifies an error chain for the exit code: numerical aborts are
/// distinguished from configuration and I/O problems.
pub fn classify(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(core) = cause.downcast_ref::<CoreError>() {
            if matches!(core, CoreError::Escape { .. } | CoreError::NonFinite { .. }) {
                return exit_code::NUMERIC;
            }
        }
    }
    exit_code::CONFIG
}

/// Excites the plant and writes the train/validation records.
pub fn cmd_collect(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out)?;
    let plant = cfg.plant.build();
    let sig = cfg.excitation.signal(cfg.seed);
    let x0 = DVector::from_vec(cfg.excitation.x0.clone());
    let full = collect_data(
        &plant,
        &sig,
        cfg.excitation.horizon,
        cfg.excitation.dt,
        &x0,
        cfg.plant.escape_radius,
    )?;
    let (train, validation) = full.split(cfg.identify.split)?;

    write_dataset_csv(&out.join(TRAIN_CSV), &train, 0.0)?;
    let val_t0 = train.states.len() as f64 * train.dt;
    write_dataset_csv(&out.join(VALIDATION_CSV), &validation, val_t0)?;
    write_json(
        &out.join(MANIFEST_JSON),
        &Manifest {
            dt: full.dt,
            seed: cfg.seed,
            split_fraction: cfg.identify.split,
            state_dim: full.state_dim(),
            train_states: train.states.len(),
            train_pairs: train.num_pairs(),
            validation_states: validation.states.len(),
            validation_pairs: validation.num_pairs(),
        },
    )?;
    println!(
        "collected {} states ({} train + {} validation) at dt = {}",
        full.states.len(),
        train.states.len(),
        validation.states.len(),
        full.dt
    );
    Ok(())
}

/// Fits the lifted model from the collected records and writes it with its
/// companion realization and uncertainty bound.
pub fn cmd_identify(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<()> {
    let manifest: Manifest = read_json(&out.join(MANIFEST_JSON))?;
    let train = read_dataset_csv(&out.join(TRAIN_CSV), manifest.dt, SplitTag::Train)?;
    let validation =
        read_dataset_csv(&out.join(VALIDATION_CSV), manifest.dt, SplitTag::Validation)?;

    let spec = cfg.dictionary.spec(train.state_dim(), cfg.seed);
    let dict = Dictionary::build(&spec, Some(&train.states))?;
    let fit = fit_edmdc(&train, &dict, cfg.identify.ridge)?;

    // one-step prediction quality on the validation record
    let mut model_sq = 0.0;
    let mut zero_sq = 0.0;
    let mut z_prev = dict.lift(&validation.states[0])?;
    for k in 0..validation.num_pairs() {
        let z_next = dict.lift(&validation.states[k + 1])?;
        let pred = &fit.a_d * &z_prev + &fit.b_d * validation.inputs[k];
        model_sq += (&z_next - pred).norm_squared();
        zero_sq += z_next.norm_squared();
        z_prev = z_next;
    }
    let pairs = validation.num_pairs() as f64;
    let rmse = (model_sq / pairs).sqrt();
    let zero_rmse = (zero_sq / pairs).sqrt();

    let mut model = KoopmanModel::assemble(fit, dict, train.dt);
    let residuals = compute_residuals(&model, &validation)?;
    let (delta0, delta1) = fit_bound(&residuals);
    model.set_uncertainty_bound(delta0, delta1)?;
    let companion = to_companion(&model.a, &model.b)?;

    println!(
        "one-step validation RMSE {rmse:.6e} (zero-model baseline {zero_rmse:.6e})"
    );
    println!(
        "uncertainty bound: |delta| <= {delta0:.6} + {delta1:.6} |z|  ({} samples, conversion {:?})",
        residuals.len(),
        model.conversion_path
    );

    let mut residual_rows = String::from("k,norm_z,norm_delta\n");
    for (k, s) in residuals.iter().enumerate() {
        residual_rows.push_str(&format!("{k},{},{}\n", s.norm_z, s.norm_delta));
    }
    fs::write(out.join(RESIDUALS_CSV), residual_rows)?;

    write_json(&out.join(MODEL_JSON), &ModelFile { koopman: model, companion })?;
    Ok(())
}

pub struct SimulateOutcome {
    pub report: AggregateReport,
}

impl SimulateOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.report.any_aborted {
            exit_code::NUMERIC
        } else if !self.report.all_stayed {
            exit_code::NOT_SETTLED
        } else {
            exit_code::SUCCESS
        }
    }
}

/// Runs the closed loop for every configured initial condition, writing one
/// trajectory CSV per run and the aggregate report. Runs execute
/// concurrently; files are written afterwards in initial-condition order.
pub fn cmd_simulate(
    cfg: &ExperimentConfig,
    out: &Path,
    threads: usize,
) -> anyhow::Result<SimulateOutcome> {
    fs::create_dir_all(out)?;
    let model_file: ModelFile = read_json(&out.join(MODEL_JSON))?;
    let model = &model_file.koopman;
    let companion = &model_file.companion;
    let plant = cfg.plant.build();
    let controller = cfg.ptab.build(companion.dim())?;

    let ics: Vec<DVector<f64>> = cfg
        .simulate
        .initial_conditions
        .iter()
        .map(|ic| DVector::from_vec(ic.clone()))
        .collect();

    let mut results: Vec<Option<anyhow::Result<RunResult>>> = Vec::new();
    results.resize_with(ics.len(), || None);
    let threads = threads.max(1);
    for batch in (0..ics.len()).collect::<Vec<_>>().chunks(threads) {
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for &idx in batch {
                let x0 = &ics[idx];
                let plant = &plant;
                let controller = &controller;
                handles.push((
                    idx,
                    scope.spawn(move || {
                        run_closed_loop_with_escape(
                            plant,
                            model,
                            companion,
                            controller,
                            x0,
                            cfg.simulate.t_end,
                            cfg.simulate.dt,
                            cfg.plant.escape_radius,
                        )
                        .map_err(anyhow::Error::from)
                    }),
                ));
            }
            for (idx, handle) in handles {
                results[idx] = Some(handle.join().expect("simulation worker panicked"));
            }
        });
    }

    let mut runs = Vec::with_capacity(ics.len());
    let mut all_stayed = true;
    let mut any_aborted = false;
    for (idx, slot) in results.into_iter().enumerate() {
        let tag = format!("ic{idx}");
        let run = slot.expect("every run produces a result")?;
        let record = &run.record;
        let mut file = fs::File::create(out.join(format!("traj_{tag}.csv")))?;
        record.write_csv(&mut file)?;

        let stability = build_report(
            record,
            model,
            companion,
            &controller,
            &plant.theta_true,
            cfg.simulate.radius,
        );
        if let Some(abort) = &run.abort {
            any_aborted = true;
            all_stayed = false;
            println!("{tag}: aborted at t = {:.4}: {}", abort.t, abort.reason);
        } else {
            println!(
                "{tag}: settled at {:?}, residual radius {:.3e}, max |u| {:.3}",
                stability.settling_time,
                stability.residual_radius,
                record.max_abs_u()
            );
            if !stability.stayed {
                all_stayed = false;
            }
        }
        runs.push(RunReport {
            tag,
            initial_condition: ics[idx].iter().copied().collect(),
            aborted: run.abort.as_ref().map(|a| a.reason.clone()),
            stability,
            max_abs_u: record.max_abs_u(),
            max_theta_norm: record.max_theta_norm(),
            max_x_norm: record.max_x_norm(),
            clamped_from: record.clamped_from,
        });
    }

    let report = AggregateReport {
        seed: cfg.seed,
        prescribed_time: cfg.ptab.prescribed_time,
        dt: cfg.simulate.dt,
        radius: cfg.simulate.radius,
        all_stayed,
        any_aborted,
        runs,
    };
    write_json(&out.join(REPORT_JSON), &report)?;
    Ok(SimulateOutcome { report })
}

/// Prints the aggregate report as a table and consolidates the per-run
/// trajectory series into one wide CSV.
pub fn cmd_report(out: &Path) -> anyhow::Result<()> {
    let report: AggregateReport = read_json(&out.join(REPORT_JSON))?;
    println!(
        "prescribed time T = {} s, dt = {}, residual radius {}",
        report.prescribed_time, report.dt, report.radius
    );
    println!(
        "{:<6} {:>18} {:>10} {:>12} {:>10} {:>10} {:>10} {:>8}",
        "run", "x0", "settle", "resid", "vdot", "max|u|", "max|th|", "stayed"
    );
    for run in &report.runs {
        let x0 = format!(
            "({})",
            run.initial_condition
                .iter()
                .map(|v| format!("{v:.2}"))
                .collect::<Vec<_>>()
                .join(", ")
        );
        println!(
            "{:<6} {:>18} {:>10} {:>12.3e} {:>10.4} {:>10.3} {:>10.3} {:>8}",
            run.tag,
            x0,
            run.stability
                .settling_time
                .map_or("-".into(), |t| format!("{t:.3}")),
            run.stability.residual_radius,
            run.stability.vdot_violation_rate,
            run.max_abs_u,
            run.max_theta_norm,
            if run.aborted.is_some() {
                "abort"
            } else if run.stability.stayed {
                "yes"
            } else {
                "no"
            }
        );
    }
    println!(
        "all stayed: {}, any aborted: {}",
        report.all_stayed, report.any_aborted
    );

    // consolidated wide CSV over the common time grid
    let mut tables = Vec::new();
    for run in &report.runs {
        let path = out.join(format!("traj_{}.csv", run.tag));
        let text = fs::read_to_string(&path)
            .map_err(|e| anyhow::anyhow!("cannot read {}: {e}", path.display()))?;
        let mut rows = Vec::new();
        for line in text.lines().skip(1) {
            let cells: Vec<String> = line.split(',').map(str::to_owned).collect();
            rows.push(cells);
        }
        tables.push(rows);
    }
    if let Some(first) = tables.first() {
        let mut outfile = String::from("t");
        for run in &report.runs {
            for col in ["x1", "x2", "u", "e_norm", "V"] {
                outfile.push_str(&format!(",{}_{}", run.tag, col));
            }
        }
        outfile.push('\n');
        for row_idx in 0..first.len() {
            if tables.iter().any(|t| t.len() <= row_idx) {
                break;
            }
            outfile.push_str(&first[row_idx][0]);
            for table in &tables {
                let row = &table[row_idx];
                // t, x1, x2, u, e_norm, V, theta..., clamped
                for cell in &row[1..6] {
                    outfile.push_str(&format!(",{cell}"));
                }
            }
            outfile.push('\n');
        }
        fs::write(out.join(REPORT_CSV), outfile)?;
    }
    Ok(())
}

/// Convenience wrapper used by tests: collect, identify, then simulate.
pub fn run_pipeline(
    cfg: &ExperimentConfig,
    out: &Path,
    threads: usize,
) -> anyhow::Result<SimulateOutcome> {
    cmd_collect(cfg, out)?;
    cmd_identify(cfg, out)?;
    cmd_simulate(cfg, out, threads)
}
