use std::fs::File;
use std::io::BufWriter;

use anyhow::{bail, Context, Result};
use log::info;
use serde_json::json;

use koopman_uq::basis::Quadrature;
use koopman_uq::dynamics::{generate_snapshots, Duffing};
use koopman_uq::koopman::{write_eigenvalues_csv, KoopmanModel};
use koopman_uq::reduce::{reduce_between_legs, RecursionPlan};
use koopman_uq::updf::{
    evaluate_on_grid, log_gaussian, GaussianPdf, GridEvaluation, GridFunction, InverseMapDensity,
    InverseMapLogDensity, PolyLogPdf,
};
use koopman_uq::validate::{
    density_estimate, eigenvalue_report, harmonic_push_forward, mc_propagate, state_error_series,
    write_error_series, Bandwidth, ComparisonReport, DensityComparison, McEnsemble,
    StateErrorSummary,
};

use crate::config::{ExperimentConfig, Source};
use crate::run::RunDir;

pub const GRID_SCHEMA: &str = "grid csv: x1,x2,density + meta.json sidecar";
const REPORT_SCHEMA: &str = "comparison report json";

/// Command-specific requirements on an otherwise valid config.
pub fn check(command: &str, cfg: &ExperimentConfig) -> Result<()> {
    match command {
        "propagate-pdf" if cfg.schedule.legs.len() != 1 => {
            bail!(
                "propagate-pdf needs a single-leg schedule, got {} legs",
                cfg.schedule.legs.len()
            )
        }
        "recursive" if cfg.schedule.legs.len() < 2 => {
            bail!("recursive needs at least two legs in the schedule")
        }
        "recursive" => cfg.validate_reduction(),
        _ => Ok(()),
    }
}

fn galerkin(cfg: &ExperimentConfig, sys: &Duffing) -> Result<KoopmanModel> {
    let basis = cfg.basis_set()?;
    info!(
        "Galerkin projection, α = {}, η = {}",
        basis.order(),
        basis.size()
    );
    let quad = Quadrature::for_basis(&basis);
    Ok(KoopmanModel::galerkin(sys, basis, &quad)?)
}

fn edmd(cfg: &ExperimentConfig, sys: &Duffing) -> Result<KoopmanModel> {
    let basis = cfg.basis_set()?;
    let e = &cfg.edmd;
    info!(
        "EDMD from {} snapshots, Δt = {}, seed {}",
        e.samples, e.dt, e.seed
    );
    let snap = generate_snapshots(sys, &basis, e.samples, e.dt, e.seed)?;
    Ok(KoopmanModel::edmd(&snap, basis)?)
}

fn model(cfg: &ExperimentConfig, sys: &Duffing) -> Result<KoopmanModel> {
    match cfg.koopman.source {
        Source::Galerkin => galerkin(cfg, sys),
        Source::Edmd => edmd(cfg, sys),
    }
}

fn save_grid(
    run: &mut RunDir,
    file: &str,
    grid: &GridEvaluation,
    provenance: &str,
    dt: f64,
) -> Result<()> {
    let path = run.path(file, GRID_SCHEMA);
    grid.save(&path, provenance, Some(dt))
        .with_context(|| format!("writing {file}"))?;
    let sidecar = GridEvaluation::sidecar_path(&path);
    run.note(
        &sidecar.file_name().unwrap().to_string_lossy(),
        "grid metadata json",
    );
    Ok(())
}

/// Relative L2 and normalized max-pointwise distance of `a` from `reference`.
fn compare(a: &GridEvaluation, reference: &GridEvaluation) -> Result<DensityComparison> {
    Ok(DensityComparison::between(
        &a.clone().normalized()?,
        &reference.clone().normalized()?,
    )?)
}

fn analytic(cfg: &ExperimentConfig, prior: &GaussianPdf, t: f64) -> Result<Option<GridEvaluation>> {
    if !cfg.system.is_harmonic() {
        return Ok(None);
    }
    let exact = harmonic_push_forward(prior, &cfg.system.dynamics(), t)?;
    Ok(Some(evaluate_on_grid(
        GridFunction::Density(&exact),
        cfg.grid_axes()?,
        cfg.grid.normalize,
    )?))
}

pub fn eigen(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<()> {
    let sys = cfg.system.dynamics();
    let g = galerkin(cfg, &sys)?;
    let e = edmd(cfg, &sys)?;
    for (file, label, m) in [
        ("eigenvalues_galerkin.csv", "galerkin", &g),
        ("eigenvalues_edmd.csv", "edmd", &e),
    ] {
        let path = run.path(file, "eigenvalue csv: re,im,source");
        write_eigenvalues_csv(
            BufWriter::new(File::create(&path)?),
            &[(label, m.eigenvalues())],
        )?;
    }
    let report = eigenvalue_report(g.eigenvalues(), e.eigenvalues())?;
    info!(
        "max |Re λ|: Galerkin {:.3e}, EDMD {:.3e}; max paired distance {:.3e}",
        report.max_abs_re_galerkin, report.max_abs_re_edmd, report.max_distance
    );
    let report = ComparisonReport {
        eigenvalues: Some(report),
        metadata: [
            ("eta".to_string(), json!(g.basis().size())),
            (
                "eigenvector_condition_galerkin".to_string(),
                json!(g.spectrum().condition),
            ),
            (
                "eigenvector_condition_edmd".to_string(),
                json!(e.spectrum().condition),
            ),
        ]
        .into(),
        ..Default::default()
    };
    report.check()?;
    run.write_json("eigen_report.json", REPORT_SCHEMA, &report)
}

pub fn propagate_state(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<()> {
    let sys = cfg.system.dynamics();
    let g = galerkin(cfg, &sys)?;
    let e = edmd(cfg, &sys)?;
    let x0 = cfg
        .state
        .initial
        .clone()
        .expect("resolved config has an initial state");
    let times = cfg.state.times(cfg.schedule.total());
    info!(
        "state error series at {} times from x0 = {x0:?}",
        times.len()
    );
    let err_g = state_error_series(&g, &sys, &x0, &times, cfg.state.tol)?;
    let err_e = state_error_series(&e, &sys, &x0, &times, cfg.state.tol)?;
    let path = run.path(
        "state_error.csv",
        "error series csv: t,err_galerkin,err_edmd",
    );
    write_error_series(BufWriter::new(File::create(&path)?), &times, &err_g, &err_e)?;
    let report = ComparisonReport {
        state_error: StateErrorSummary::from_series(&times, &err_g, &err_e),
        metadata: [("initial_state".to_string(), json!(x0))].into(),
        ..Default::default()
    };
    report.check()?;
    run.write_json("state_report.json", REPORT_SCHEMA, &report)
}

fn write_samples(run: &mut RunDir, ens: &McEnsemble) -> Result<()> {
    let path = run.path("mc_samples.csv", "sample csv: x1,x2");
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&path)?));
    let header: Vec<String> = (1..=ens.dim()).map(|i| format!("x{i}")).collect();
    w.write_record(&header)?;
    for col in ens.samples.column_iter() {
        w.write_record(col.iter().map(|v| format!("{v:e}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn propagate_pdf(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<()> {
    let sys = cfg.system.dynamics();
    let m = model(cfg, &sys)?;
    let prior = cfg.prior()?;
    let dt = cfg.schedule.legs[0];
    let axes = cfg.grid_axes()?;
    let norm = cfg.grid.normalize;

    let p0 = evaluate_on_grid(GridFunction::Density(&prior), axes.clone(), norm)?;
    save_grid(run, "density_prior.csv", &p0, "prior", 0.0)?;
    info!("inverse-map density at Δt = {dt}");
    let ko = InverseMapDensity::new(&m, &prior, dt)?;
    let ko = evaluate_on_grid(GridFunction::Density(&ko), axes.clone(), norm)?;
    save_grid(run, "density_ko.csv", &ko, m.provenance().label(), dt)?;

    let mut report = ComparisonReport::default();
    report.metadata.insert("dt".into(), json!(dt));
    let mc = &cfg.monte_carlo;
    if mc.samples > 0 {
        info!("Monte Carlo with {} samples, seed {}", mc.samples, mc.seed);
        let ens = mc_propagate(&prior, &sys, dt, mc.samples, mc.seed, mc.tol)?;
        write_samples(run, &ens)?;
        let (kde, h) = density_estimate(&ens, axes, &Bandwidth::Silverman)?;
        save_grid(run, "density_mc.csv", &kde, "monte_carlo", dt)?;
        let d = compare(&ko, &kde)?;
        info!(
            "KO vs MC: relative L2 {:.4}, max-pointwise {:.4}",
            d.grid_l2, d.max_pointwise
        );
        report.density = Some(d);
        report.metadata.insert("bandwidth".into(), json!(h));
        report.metadata.insert(
            "inside_basis_box".into(),
            json!(ens.fraction_inside(m.basis().domain())),
        );
    }
    if let Some(exact) = analytic(cfg, &prior, dt)? {
        save_grid(run, "density_exact.csv", &exact, "analytic", dt)?;
        let d = compare(&ko, &exact)?;
        info!("KO vs analytic: relative L2 {:.3e}", d.grid_l2);
        report
            .metadata
            .insert("analytic".into(), serde_json::to_value(d)?);
    }
    report.check()?;
    run.write_json("pdf_report.json", REPORT_SCHEMA, &report)
}

pub fn recursive(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<()> {
    let sys = cfg.system.dynamics();
    let m = model(cfg, &sys)?;
    let prior = cfg.prior()?;
    let z0 = log_gaussian(&prior)?;
    let axes = cfg.grid_axes()?;
    let norm = cfg.grid.normalize;
    let legs = &cfg.schedule.legs;
    let plan = RecursionPlan {
        legs: legs.clone(),
        order: cfg.reduction.order,
        samples: cfg.reduction.samples,
        seed: cfg.reduction.seed,
        resolution: cfg.reduction.resolution,
    };
    info!("{} legs, reduction order {}", legs.len(), plan.order);
    let starts = reduce_between_legs(&m, z0.clone(), &plan)?;

    let log_grid = |z: &PolyLogPdf, dt: f64| -> Result<GridEvaluation> {
        let leg = InverseMapLogDensity::new(&m, z, dt)?;
        Ok(evaluate_on_grid(
            GridFunction::LogDensity(&leg),
            axes.clone(),
            norm,
        )?)
    };
    save_grid(run, "density_leg0.csv", &log_grid(&z0, 0.0)?, "prior", 0.0)?;
    let mut t = 0.0;
    let mut reductions = Vec::new();
    let mut last = None;
    for (k, (start, &dt)) in starts.iter().zip(legs).enumerate() {
        if k > 0 {
            let file = format!("reduced_leg{k}.json");
            start.save_json(&run.path(&file, "reduced log-density json"))?;
            reductions.push(json!({ "leg": k, "t": t, "diagnostics": start.diagnostics() }));
        }
        t += dt;
        let grid = log_grid(start, dt)?;
        save_grid(
            run,
            &format!("density_leg{}.csv", k + 1),
            &grid,
            "recursive",
            t,
        )?;
        last = Some(grid);
    }
    let last = last.expect("schedule has legs");
    let single = log_grid(&z0, t)?;
    save_grid(run, "density_single.csv", &single, "single_leg", t)?;
    let d = compare(&last, &single)?;
    info!(
        "recursive vs single leg at {t} s: relative L2 {:.4}",
        d.grid_l2
    );

    let mut report = ComparisonReport {
        density: Some(d),
        ..Default::default()
    };
    report.metadata.insert("legs".into(), json!(legs));
    report
        .metadata
        .insert("reductions".into(), json!(reductions));
    if let Some(exact) = analytic(cfg, &prior, t)? {
        save_grid(run, "density_exact.csv", &exact, "analytic", t)?;
        report.metadata.insert(
            "analytic".into(),
            serde_json::to_value(compare(&last, &exact)?)?,
        );
    }
    report.check()?;
    run.write_json("recursive_report.json", REPORT_SCHEMA, &report)
}

pub fn snapshots(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<()> {
    let sys = cfg.system.dynamics();
    let basis = cfg.basis_set()?;
    let e = &cfg.edmd;
    let snap = generate_snapshots(&sys, &basis, e.samples, e.dt, e.seed)?;
    let path = run.path(
        "snapshots.csv",
        "snapshot csv: x1,x2,y1,y2 + meta.json sidecar",
    );
    snap.save(&path)?;
    run.note("snapshots.meta.json", "snapshot metadata json");
    Ok(())
}
