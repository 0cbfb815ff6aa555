use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use serde::Serialize;

use popflow::config::{run_validation, MasterInitial, RunConfig};
use popflow::harness::{
    auto_cap, dirac_initial_law, reference_path, run_sweep_with, write_sweep_csv, InitialState,
};
use popflow::master::{
    build_generator, check_reversibility, edb_residual_n, integrate_fke, poisson_reference,
    product_poisson, scaled_entropy, stationarity_residual, write_diagnostics_csv, FkeOptions,
    MasterDistribution, PathPoint, StateSpaceIndex,
};
use popflow::meanfield::{
    chain_rule_check, edb_residual_mf, integrate_meanfield, write_meanfield_csv,
};
use popflow::measure::DensityField;
use popflow::ode::DtPolicy;
use popflow::ssa::{
    run_ensemble, w1_to_dirac, write_snapshots_csv, EnsembleOptions, EnsembleSummary, EventKind,
};

use crate::manifest::{sha256_hex, Manifest, Status};

/// Reads and checks the configuration, applying the seed override.
pub fn load(path: &Path, seed: Option<u64>, manifest: &mut Manifest) -> anyhow::Result<RunConfig> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    manifest.config_path = Some(path.display().to_string());
    manifest.config_sha256 = Some(sha256_hex(&bytes));
    let text = String::from_utf8(bytes).context("config is not UTF-8")?;
    let mut config = RunConfig::from_json(&text)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    manifest.seed = Some(config.seed);
    manifest.config = Some(serde_json::to_value(&config)?);
    Ok(config)
}

enum Fail {
    /// A solver or a check failed.
    Run(String),
    /// Configuration or I/O problem.
    Setup(String),
}

impl From<popflow::Error> for Fail {
    fn from(e: popflow::Error) -> Self {
        Fail::Run(e.to_string())
    }
}

impl From<std::io::Error> for Fail {
    fn from(e: std::io::Error) -> Self {
        Fail::Setup(format!("i/o: {e}"))
    }
}

impl From<serde_json::Error> for Fail {
    fn from(e: serde_json::Error) -> Self {
        Fail::Setup(format!("json: {e}"))
    }
}

type Outcome = Result<Status, Fail>;

pub fn run(name: &str, config: &RunConfig, out: &Path, manifest: &mut Manifest) -> Status {
    let result = fs::create_dir_all(out)
        .map_err(Fail::from)
        .and_then(|()| match name {
            "validate" => validate(config, out, manifest),
            "ssa" => ssa(config, out, manifest),
            "master" => master(config, out, manifest),
            "meanfield" => meanfield(config, out, manifest),
            "sweep" => sweep(config, out, manifest),
            other => Err(Fail::Setup(format!("unknown subcommand {other}"))),
        });
    match result {
        Ok(status) => status,
        Err(Fail::Run(m)) => Status::Failed(m),
        Err(Fail::Setup(m)) => Status::Error(m),
    }
}

fn create(out: &Path, name: &str, manifest: &mut Manifest) -> Result<BufWriter<File>, Fail> {
    manifest.output(name);
    Ok(BufWriter::new(File::create(out.join(name))?))
}

fn write_json<T: Serialize>(
    out: &Path,
    name: &str,
    value: &T,
    manifest: &mut Manifest,
) -> Result<(), Fail> {
    let mut w = create(out, name, manifest)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn section<'a, T>(s: &'a Option<T>, name: &str) -> Result<&'a T, Fail> {
    s.as_ref()
        .ok_or_else(|| Fail::Setup(format!("config has no {name} block")))
}

fn validate(config: &RunConfig, out: &Path, manifest: &mut Manifest) -> Outcome {
    let report = run_validation(config)?;
    for e in &report.entries {
        println!(
            "n = {:>3}  detailed balance {:.3e}  reversibility {:.3e}",
            e.n, e.db.max_rel, e.reversibility.max_rel
        );
    }
    write_json(out, "validate.json", &report, manifest)?;
    if report.passed {
        Ok(Status::Ok)
    } else {
        Ok(Status::Failed(format!(
            "detailed-balance violation {:.3e}, reversibility violation {:.3e}, tolerance {:.1e}",
            report.max_db_violation, report.max_reversibility_violation, report.tolerance
        )))
    }
}

#[derive(Serialize)]
struct SsaOutput {
    rounding_error: f64,
    summary: EnsembleSummary,
    /// Estimated `∫‖ν − u_t π‖ dP^n_t` at each snapshot time.
    w1_to_meanfield: Vec<popflow::ssa::Estimate>,
}

fn ssa(config: &RunConfig, out: &Path, manifest: &mut Manifest) -> Outcome {
    let s = section(&config.ssa, "ssa")?;
    let model = config.build_model()?;
    let space = &config.space;
    let u0 = DensityField::new(s.u0.clone())?;
    let times = s.snapshot_times();
    let initial = dirac_initial_law(&u0, s.n, space, None)?;
    let InitialState::Configuration(c0) = initial.state else {
        unreachable!("no cap given")
    };
    let ensemble = run_ensemble(
        &c0,
        &*model,
        s.horizon,
        &times,
        &EnsembleOptions {
            trajectories: s.trajectories,
            base_seed: config.seed,
            record_events: s.record_events,
        },
    )?;
    let mut grid = vec![0.0];
    grid.extend(times.iter().cloned().filter(|&t| t > 0.0));
    let reference = integrate_meanfield(&u0, &*model, &grid, DtPolicy::adaptive(1e-10))?;
    let w1 = times
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let j = grid.iter().position(|g| g == t).expect("time on grid");
            w1_to_dirac(&ensemble, i, &reference.states[j], space)
        })
        .collect::<popflow::Result<Vec<_>>>()?;

    let mut w = create(out, "snapshots.csv", manifest)?;
    write_snapshots_csv(&ensemble, &mut w)?;
    w.flush()?;

    let mut w = create(out, "ssa_mean.csv", manifest)?;
    writeln!(w, "t,site,mean_count,std_err,w1,w1_std_err")?;
    for (i, t) in times.iter().enumerate() {
        for (site, e) in ensemble.mean_counts(i)?.iter().enumerate() {
            writeln!(
                w,
                "{t},{site},{:e},{:e},{:e},{:e}",
                e.mean, e.std_err, w1[i].mean, w1[i].std_err
            )?;
        }
    }
    w.flush()?;

    if s.record_events {
        let mut w = create(out, "events.csv", manifest)?;
        writeln!(w, "trajectory,time,kind,site,to")?;
        for tr in &ensemble.trajectories {
            for ev in tr.events.iter().flatten() {
                match ev.kind {
                    EventKind::Birth { site } => {
                        writeln!(w, "{},{},birth,{site},", tr.index, ev.time)?
                    }
                    EventKind::Death { site } => {
                        writeln!(w, "{},{},death,{site},", tr.index, ev.time)?
                    }
                    EventKind::Hop { from, to } => {
                        writeln!(w, "{},{},hop,{from},{to}", tr.index, ev.time)?
                    }
                }
            }
        }
        w.flush()?;
    }

    let summary = EnsembleSummary::new(&ensemble);
    println!(
        "{} trajectories, n = {}, mean events: {:.1} births, {:.1} deaths, {:.1} hops",
        summary.trajectories,
        summary.n,
        summary.mean_births,
        summary.mean_deaths,
        summary.mean_hops
    );
    if let Some(last) = w1.last() {
        println!(
            "distance to mean field at t = {}: {:.4e} ± {:.1e}",
            s.horizon, last.mean, last.std_err
        );
    }
    write_json(
        out,
        "ssa_summary.json",
        &SsaOutput {
            rounding_error: initial.rounding_error,
            summary,
            w1_to_meanfield: w1,
        },
        manifest,
    )?;
    Ok(Status::Ok)
}

#[derive(Serialize)]
struct MasterOutput {
    n: u32,
    k_max: u32,
    states: usize,
    reference_deficit: f64,
    reversibility_max_rel: f64,
    stationarity_residual: f64,
    initial_entropy: f64,
    edb_start: f64,
    edb_residual: f64,
    final_outflow: f64,
    ode: popflow::ode::OdeStats,
}

fn master(config: &RunConfig, out: &Path, manifest: &mut Manifest) -> Outcome {
    let m = section(&config.master, "master")?;
    let model = config.build_model()?;
    let space = &config.space;
    let u0 = match &m.u0 {
        Some(u) => DensityField::new(u.clone())?,
        None => DensityField::constant(space.len(), 1.0)?,
    };
    let cap = m.k_max.unwrap_or_else(|| auto_cap(&u0, space, m.n));
    let index = StateSpaceIndex::new(space.len(), cap)?;
    let reference = poisson_reference(m.n, space, cap, m.outflow_tolerance)?;
    let p0: MasterDistribution = match m.initial {
        MasterInitial::Dirac => match dirac_initial_law(&u0, m.n, space, Some(cap))?.state {
            InitialState::Law(p) => p,
            InitialState::Configuration(_) => unreachable!("cap given"),
        },
        MasterInitial::ProductPoisson => {
            let means: Vec<f64> = u0
                .to_measure(space)
                .iter()
                .map(|x| f64::from(m.n) * x)
                .collect();
            let p = product_poisson(&index, &means)?;
            if p.deficit() > m.outflow_tolerance {
                return Err(popflow::Error::Truncation {
                    deficit: p.deficit(),
                    tolerance: m.outflow_tolerance,
                }
                .into());
            }
            p
        }
        MasterInitial::Stationary => reference.clone(),
    };
    let gen = build_generator(&*model, m.n, &index)?;
    if m.export_generator {
        let mut w = create(out, "generator.mtx", manifest)?;
        gen.write_coo(&mut w)?;
        w.flush()?;
    }
    let times = m.output_times();
    let path = integrate_fke(
        &p0,
        &gen,
        &times,
        m.dt,
        FkeOptions {
            outflow_tolerance: m.outflow_tolerance,
        },
    )?;

    let nf = f64::from(m.n);
    let mut w = create(out, "master_timeseries.csv", manifest)?;
    write!(w, "t,mass,deficit,outflow")?;
    for s in 1..=space.len() {
        write!(w, ",nu_{s}")?;
    }
    writeln!(w)?;
    for ((t, p), outflow) in path.times.iter().zip(&path.dists).zip(&path.outflow) {
        write!(w, "{t},{:e},{:e},{:e}", p.total(), p.deficit(), outflow)?;
        for c in p.mean_counts() {
            write!(w, ",{:e}", c / nf)?;
        }
        writeln!(w)?;
    }
    w.flush()?;

    let points = path
        .times
        .iter()
        .zip(&path.dists)
        .map(|(t, p)| PathPoint::optimal(*t, p.clone(), &gen))
        .collect::<popflow::Result<Vec<_>>>()?;
    // A Dirac start has infinite dissipation at t = 0; the balance is then
    // evaluated from the first time with a finite integrand.
    let mut start = 0;
    let edb = loop {
        match edb_residual_n(&points[start..], &gen, &reference) {
            Err(popflow::Error::AbsoluteContinuity(_)) if start + 2 < points.len() => start += 1,
            other => break other?,
        }
    };
    let mut w = create(out, "master_diagnostics.csv", manifest)?;
    write_diagnostics_csv(&edb, &mut w)?;
    w.flush()?;

    let last = path.dists.last().expect("nonempty path");
    let mut w = create(out, "master_final.csv", manifest)?;
    for s in 1..=space.len() {
        write!(w, "k_{s},")?;
    }
    writeln!(w, "prob")?;
    for (i, p) in last.probs().iter().enumerate() {
        for k in index.state(i) {
            write!(w, "{k},")?;
        }
        writeln!(w, "{p:e}")?;
    }
    w.flush()?;

    let summary = MasterOutput {
        n: m.n,
        k_max: cap,
        states: index.len(),
        reference_deficit: reference.deficit(),
        reversibility_max_rel: check_reversibility(&gen, &reference)?.max_rel,
        stationarity_residual: stationarity_residual(&gen, &reference),
        initial_entropy: scaled_entropy(&p0, &reference, m.n)?,
        edb_start: points[start].time,
        edb_residual: edb.residual,
        final_outflow: *path.outflow.last().expect("nonempty path"),
        ode: path.stats,
    };
    println!(
        "{} states, EDB residual {:.3e}, final outflow {:.3e}",
        summary.states, summary.edb_residual, summary.final_outflow
    );
    write_json(out, "master_summary.json", &summary, manifest)?;
    Ok(Status::Ok)
}

#[derive(Serialize)]
struct MeanfieldOutput {
    edb_residual: f64,
    chain_rule: popflow::meanfield::ChainRuleReport,
    final_density: Vec<f64>,
    ode: popflow::ode::OdeStats,
}

fn meanfield(config: &RunConfig, out: &Path, manifest: &mut Manifest) -> Outcome {
    let s = section(&config.meanfield, "meanfield")?;
    let model = config.build_model()?;
    let u0 = DensityField::new(s.u0.clone())?;
    let path = integrate_meanfield(&u0, &*model, &s.output_times(), s.dt)?;
    let edb = edb_residual_mf(&path, &*model)?;
    let chain = chain_rule_check(&path, &*model)?;
    let mut w = create(out, "meanfield.csv", manifest)?;
    write_meanfield_csv(&path, &edb, &mut w)?;
    w.flush()?;
    let summary = MeanfieldOutput {
        edb_residual: edb.residual,
        chain_rule: chain,
        final_density: path.states.last().expect("nonempty path").values().to_vec(),
        ode: path.stats,
    };
    println!(
        "EDB residual {:.3e}, chain-rule deviation {:.3e} ({} checked, {} skipped)",
        summary.edb_residual, chain.max_deviation, chain.checked, chain.skipped
    );
    write_json(out, "meanfield_summary.json", &summary, manifest)?;
    Ok(Status::Ok)
}

fn sweep(config: &RunConfig, out: &Path, manifest: &mut Manifest) -> Outcome {
    let plan = config.sweep_plan()?;
    let model = config.build_model()?;
    let reference = reference_path(&plan, &*model)?;
    let edb = edb_residual_mf(&reference, &*model)?;
    let mut w = create(out, "reference.csv", manifest)?;
    write_meanfield_csv(&reference, &edb, &mut w)?;
    w.flush()?;

    let report = run_sweep_with(&plan, &*model)?;
    let mut w = create(out, "sweep.csv", manifest)?;
    write_sweep_csv(&report, &mut w)?;
    w.flush()?;
    write_json(out, "sweep.json", &report, manifest)?;

    for c in report.failed_cells() {
        println!("n = {}: {}", c.n, c.error.as_deref().unwrap_or(""));
    }
    for t in &report.trends {
        println!(
            "{:<12} t = {:<6} {}",
            serde_json::to_value(t.quantity)?.as_str().unwrap_or(""),
            t.t,
            if t.passed { "pass" } else { "FAIL" }
        );
    }
    if let Some(l) = report.lipschitz {
        println!(
            "lipschitz estimate {:.3} (bound {:.3})",
            l.max_estimate, l.bound
        );
    }
    if report.passed() {
        Ok(Status::Ok)
    } else {
        Ok(Status::Failed("sweep checks failed; see sweep.json".into()))
    }
}
