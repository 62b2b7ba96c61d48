//! The runner's subcommands. Each one produces tables; `execute` writes
//! them together with the manifest.

use std::path::{Path, PathBuf};

use kbzakai::acceptance;
use kbzakai::grid::GridGeometry;
use kbzakai::oracle::{compare_filters, particle_filter, CompareOptions, ParticleInit, ParticleOptions};
use kbzakai::riccati::{run_filter_with, FilterRun};
use kbzakai::sde::{brownian_increments, path_seed, simulate_with_increments};
use kbzakai::testbed::{
    apriori_ratio, residual_refinement, test_function, FreeTerm, GeneralCoefficients, ItoCorrection, ResidualKind,
    StudyConfig, TestbedSolver,
};
use kbzakai::zakai::{
    box_from_filter, closed_form_density, init_density, normalize, normalized_l1, reconstruct, run_reduced, run_zakai,
    DensityRun, InitSpec, RunOptions, SchemeOptions,
};
use kbzakai::{Error, PathBundle, QuadraticForm};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::config::{Equation, RunConfig, TestbedBlock, TestbedFamily, Validated};
use crate::export::{write_format, TableStore};
use crate::manifest::{now_unix, AcceptanceEntry, RunManifest};
use crate::table::{matrix_columns, vector_columns, Cell, Table};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Simulate,
    Filter,
    Zakai,
    Compare,
    Testbed,
    Check,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Filter => "filter",
            Command::Zakai => "zakai",
            Command::Compare => "compare",
            Command::Testbed => "testbed",
            Command::Check => "check",
        }
    }
}

/// What a finished run left on disk.
#[derive(Debug)]
pub struct Outcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

struct Produced {
    tables: Vec<Table>,
    acceptance: Option<Vec<AcceptanceEntry>>,
    failed: usize,
}

impl Produced {
    fn tables(tables: Vec<Table>) -> Self {
        Produced { tables, acceptance: None, failed: 0 }
    }
}

/// Runs `command`, writes its outputs under the configured directory and
/// returns the manifest. Acceptance failures are reported after the files
/// are written.
pub fn execute(command: Command, config: Option<RunConfig>, out: Option<&Path>, quiet: bool) -> Result<Outcome, CliError> {
    let validated = match config {
        Some(c) => Some(c.validate()?),
        None if command == Command::Check => None,
        None => return Err(CliError::Usage(format!("{} needs --config", command.name()))),
    };
    let path_seeds = validated.as_ref().map_or_else(Vec::new, |v| {
        (0..v.config.simulation.n_paths).map(|i| path_seed(v.config.simulation.seed, i)).collect()
    });
    let mut manifest = RunManifest::start(command.name(), validated.as_ref().map(|v| v.config.clone()), path_seeds);
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| validated.as_ref().map(|v| PathBuf::from(&v.config.output.dir)))
        .unwrap_or_else(|| PathBuf::from("out"));
    let produced = match (command, validated.as_ref()) {
        (Command::Check, _) => check(quiet)?,
        (_, None) => unreachable!("non-check commands require a configuration"),
        (Command::Simulate, Some(v)) => Produced::tables(vec![paths_table(v, &simulate(v)?)]),
        (Command::Filter, Some(v)) => Produced::tables(filter(v)?),
        (Command::Zakai, Some(v)) => Produced::tables(zakai(v, quiet)?),
        (Command::Compare, Some(v)) => Produced::tables(compare(v, quiet)?),
        (Command::Testbed, Some(v)) => Produced::tables(testbed(v)?),
    };
    std::fs::create_dir_all(&dir)?;
    let formats = validated.as_ref().map_or_else(|| vec![crate::config::Format::Csv, crate::config::Format::Json], |v| {
        v.config.output.formats.clone()
    });
    let store = TableStore { manifest: manifest.manifest_id.clone(), tables: produced.tables };
    store.write(&dir)?;
    manifest.outputs.push(crate::export::TABLES_FILE.to_string());
    for f in formats {
        manifest.outputs.extend(write_format(&dir, &store.tables, &manifest.manifest_id, f)?);
    }
    manifest.acceptance = produced.acceptance;
    manifest.finished_unix = now_unix();
    manifest.write(&dir)?;
    if produced.failed > 0 {
        let total = manifest.acceptance.as_ref().map_or(0, Vec::len);
        return Err(CliError::Acceptance { failed: produced.failed, total });
    }
    Ok(Outcome { dir, manifest })
}

/// One path per configured seed: `x₀ ~ N(x0_mean, x0_cov)` is drawn first
/// from `ChaCha8(path_seed(seed, i))`, then the Wiener increments from the
/// same stream.
pub fn simulate(v: &Validated) -> Result<Vec<PathBundle>, CliError> {
    let sim = &v.config.simulation;
    let chol = v.x0_cov.clone().cholesky().expect("validated covariance is SPD");
    let spec = &v.spec;
    let results: Vec<Result<PathBundle, Error>> = (0..sim.n_paths)
        .into_par_iter()
        .map(|i| {
            let seed = path_seed(sim.seed, i);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = DVector::from_fn(spec.d, |_, _| StandardNormal.sample(&mut rng));
            let x0 = &v.x0_mean + chol.l() * z;
            let mut z0 = DVector::zeros(spec.d1());
            z0.rows_mut(0, spec.d).copy_from(&x0);
            let dw = brownian_increments(&mut rng, v.steps, spec.dw, sim.dt);
            simulate_with_increments(spec, &z0, sim.dt, dw, sim.blowup_bound, seed, i)
        })
        .collect();
    results.into_iter().map(|r| r.map_err(CliError::from)).collect()
}

fn paths_table(v: &Validated, paths: &[PathBundle]) -> Table {
    let (d, m) = (v.spec.d, v.spec.m);
    let mut cols = vec!["path".to_string(), "t".to_string()];
    cols.extend(vector_columns("x", d));
    cols.extend(vector_columns("y", m));
    cols.extend(vector_columns("ytilde", m));
    let mut t = Table::new("paths", cols);
    for p in paths {
        for k in 0..p.times.len() {
            let mut row: Vec<Cell> = vec![p.index.into(), p.times[k].into()];
            row.extend(p.z[k].iter().map(|x| Cell::from(*x)));
            row.extend(p.ytilde[k].iter().map(|x| Cell::from(*x)));
            t.push(row);
        }
    }
    t
}

fn prior_form(v: &Validated) -> Result<QuadraticForm, CliError> {
    Ok(QuadraticForm::gaussian_density(&v.prior_mean, &v.prior_cov)?)
}

fn filter_table(index: usize, run: &FilterRun, d: usize) -> Table {
    let mut cols = vec!["t".to_string()];
    cols.extend(matrix_columns("W", d));
    cols.extend(vector_columns("V", d));
    cols.push("U".into());
    cols.extend(vector_columns("xbar", d));
    cols.extend(matrix_columns("Sigma", d));
    let mut t = Table::new(format!("filter_{index:03}"), cols);
    for (s, e) in run.states.iter().zip(&run.estimates) {
        let mut row: Vec<Cell> = vec![s.t.into()];
        row.extend(s.w.transpose().iter().map(|x| Cell::from(*x)));
        row.extend(s.v.iter().map(|x| Cell::from(*x)));
        row.push(s.u.into());
        row.extend(e.xbar.iter().map(|x| Cell::from(*x)));
        row.extend(e.sigma.transpose().iter().map(|x| Cell::from(*x)));
        t.push(row);
    }
    t
}

fn filter(v: &Validated) -> Result<Vec<Table>, CliError> {
    let paths = simulate(v)?;
    let q0 = prior_form(v)?;
    let runs: Vec<Result<FilterRun, Error>> =
        paths.par_iter().map(|p| run_filter_with(&v.spec, p, &q0, v.config.filter.scheme)).collect();
    let mut tables = vec![paths_table(v, &paths)];
    for (i, r) in runs.into_iter().enumerate() {
        tables.push(filter_table(i, &r?, v.spec.d));
    }
    Ok(tables)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

fn snapshot_steps(v: &Validated, times: &[f64]) -> Vec<usize> {
    let dt = v.config.simulation.dt;
    let mut steps: Vec<usize> = times.iter().map(|t| (t / dt).round() as usize).collect();
    if steps.is_empty() {
        steps = vec![0, v.steps];
    }
    steps.sort_unstable();
    steps.dedup();
    steps
}

struct GridRun {
    geom: GridGeometry,
    filter: FilterRun,
    /// `π̄` on the snapshot steps, whichever equation was integrated.
    pibar: DensityRun,
    solver: DensityRun,
}

fn zakai_run(v: &Validated, path: &PathBundle, equation: Equation) -> Result<GridRun, CliError> {
    let z = v.config.zakai.as_ref().expect("zakai block present");
    let q0 = prior_form(v)?;
    let filter = run_filter_with(&v.spec, path, &q0, v.config.filter.scheme)?;
    let geom = box_from_filter(&filter, z.n_std, z.h)?;
    let steps = snapshot_steps(v, &z.snapshot_times);
    let store_every = steps.iter().fold(0, |g, s| gcd(g, *s));
    let opts = RunOptions { scheme: SchemeOptions { milstein: z.milstein }, store_every };
    let base = InitSpec::Gaussian { mean: v.prior_mean.clone(), cov: v.prior_cov.clone() };
    let solver = match equation {
        Equation::Direct => run_zakai(&v.spec, path, init_density(&geom, &base)?, &opts)?,
        Equation::Reduced => {
            let init = init_density(&geom, &InitSpec::Reduced { q: q0.clone(), base: Box::new(base) })?;
            run_reduced(&v.spec, path, &filter.states, init, &opts)?
        }
    };
    let mut pibar = solver.clone();
    pibar.snapshot_steps.clear();
    pibar.snapshots.clear();
    for s in steps {
        let snap = solver.snapshot_at(s).expect("snapshot steps are multiples of store_every");
        let g = match equation {
            Equation::Direct => snap.clone(),
            Equation::Reduced => reconstruct(snap, &filter.states[s].form())?,
        };
        pibar.snapshot_steps.push(s);
        pibar.snapshots.push(g);
    }
    Ok(GridRun { geom, filter, pibar, solver })
}

fn zakai(v: &Validated, quiet: bool) -> Result<Vec<Table>, CliError> {
    let z = v.config.zakai.as_ref().ok_or_else(|| CliError::Validation("zakai needs a [zakai] block".into()))?;
    let paths = simulate(v)?;
    let run = zakai_run(v, &paths[0], z.equation)?;
    if run.solver.cfl_violations > 0 && !quiet {
        eprintln!(
            "warning: {} steps exceeded the suggested time step {:.3e}",
            run.solver.cfl_violations, run.solver.dt_max
        );
    }
    let d = v.spec.d;
    let mut cols = vec!["t".to_string()];
    cols.extend(vector_columns("x", d));
    cols.extend(["density".to_string(), "closed_form".to_string()]);
    let mut dens = Table::new("densities", cols);
    let mut snap_cols = vec!["t".to_string(), "mass".to_string()];
    snap_cols.extend(vector_columns("mean", d));
    snap_cols.push("l1_closed_form".into());
    let mut snaps = Table::new("zakai_snapshots", snap_cols);
    for (s, g) in run.pibar.snapshot_steps.iter().zip(&run.pibar.snapshots) {
        let t = run.pibar.times[*s];
        let normalized = normalize(g)?;
        let exact = closed_form_density(&run.geom, &run.filter.estimates[*s])?;
        for p in 0..run.geom.len() {
            let x = run.geom.point(p);
            let mut row: Vec<Cell> = vec![t.into()];
            row.extend(x[..d].iter().map(|v| Cell::from(*v)));
            row.push(normalized.density.values[p].into());
            row.push(exact.values[p].into());
            dens.push(row);
        }
        let mom = normalized.density.moments()?;
        let mut row: Vec<Cell> = vec![t.into(), normalized.mass.into()];
        row.extend(mom.mean.iter().map(|v| Cell::from(*v)));
        row.push(normalized_l1(g, &exact)?.into());
        snaps.push(row);
    }
    let mut diag = Table::new("zakai_diagnostics", vec!["t".into(), "solver_mass".into(), "min_ratio".into()]);
    for k in 0..run.solver.times.len() {
        diag.push(vec![run.solver.times[k].into(), run.solver.mass[k].into(), run.solver.min_ratio[k].into()]);
    }
    Ok(vec![dens, snaps, diag, filter_table(0, &run.filter, d)])
}

fn compare(v: &Validated, quiet: bool) -> Result<Vec<Table>, CliError> {
    let o = v.config.oracle.as_ref().ok_or_else(|| CliError::Validation("compare needs an [oracle] block".into()))?;
    let paths = simulate(v)?;
    let path = &paths[0];
    let (filter, grid) = match v.config.zakai {
        Some(_) => {
            let r = zakai_run(v, path, Equation::Direct)?;
            (r.filter, Some(r.pibar))
        }
        None => (run_filter_with(&v.spec, path, &prior_form(v)?, v.config.filter.scheme)?, None),
    };
    let oracle_seed = path_seed(v.config.simulation.seed, v.config.simulation.n_paths);
    let mut popts = ParticleOptions::new(
        o.particles,
        oracle_seed,
        ParticleInit::Gaussian { mean: v.prior_mean.clone(), cov: v.prior_cov.clone() },
    );
    popts.threshold = o.threshold;
    popts.record_steps = snapshot_steps(v, &o.times);
    let particles = match particle_filter(&v.spec, path, &popts) {
        Ok(r) => Some(r),
        Err(Error::CorrelatedNoise { t, norm }) => {
            if !quiet {
                eprintln!("note: particle oracle skipped, signal and observation noise are correlated (|sigma| = {norm:.3} at t = {t})");
            }
            None
        }
        Err(e) => return Err(e.into()),
    };
    let copts = CompareOptions {
        particle_sigmas: 3.0,
        grid_mean_tol: o.grid_mean_tol,
        bootstrap_replicates: o.bootstrap,
        bootstrap_seed: oracle_seed,
    };
    let cmp = compare_filters(&v.spec, path, &filter, grid.as_ref(), particles.as_ref(), &o.times, &copts)?;
    if !cmp.all_within() && !quiet {
        eprintln!("warning: some rows of the comparison are outside their tolerance");
    }
    let d = cmp.d;
    let mut cols = vec!["t".to_string(), "method".to_string()];
    cols.extend(vector_columns("mean", d));
    cols.extend(matrix_columns("cov", d));
    cols.extend(vector_columns("gap", d));
    cols.extend(vector_columns("tol", d));
    cols.extend(["within".to_string(), "grid_particle_gap".to_string(), "l1_closed_form".to_string()]);
    cols.extend(vector_columns("stderr", d));
    let mut t = Table::new("comparison", cols);
    for r in &cmp.rows {
        let mut row: Vec<Cell> = vec![r.t.into(), serde_json::to_value(r.method)?.as_str().unwrap_or("").into()];
        for xs in [&r.mean, &r.cov, &r.mean_gap, &r.tolerance] {
            row.extend(xs.iter().map(|x| Cell::from(*x)));
        }
        row.extend([r.within.into(), r.grid_particle_gap.into(), r.l1_closed_form.into()]);
        match &r.stderr {
            Some(s) => row.extend(s.iter().map(|x| Cell::from(*x))),
            None => row.extend((0..d).map(|_| Cell::Missing)),
        }
        t.push(row);
    }
    Ok(vec![t, filter_table(0, &filter, d)])
}

/// Residual study inputs for a testbed family: bump test function at 0.3 of
/// radius 1.5, partner equation with an indicator free term.
pub fn testbed_config(tb: &TestbedBlock, seed: u64) -> Result<StudyConfig, CliError> {
    let geom = GridGeometry::symmetric(1, tb.half_width, tb.h)?;
    let coeffs = match tb.family {
        TestbedFamily::Heat => GeneralCoefficients::heat(1, 1),
        TestbedFamily::NoisyAffine => GeneralCoefficients::noisy_affine(),
    };
    let mut partner = coeffs.clone();
    partner.f[0] = FreeTerm::Indicator { lower: vec![-1.0], upper: vec![0.0], amplitude: 0.3 };
    partner.f[1] = FreeTerm::Zero;
    partner.g[0] = FreeTerm::Gaussian { center: vec![0.5], width: 0.5, amplitude: -0.3 };
    let u0 = geom.sample(|x| (-x[0] * x[0]).exp());
    let u0_partner = geom.sample(|x| (-(x[0] - 0.5).powi(2) / 0.6).exp());
    Ok(StudyConfig {
        phi: test_function(&geom, &[0.3], 1.5)?,
        geom,
        coeffs,
        u0,
        second: Some((partner, u0_partner)),
        horizon: tb.horizon,
        coarse_steps: tb.coarse_steps,
        levels: tb.levels,
        n_paths: tb.n_paths,
        seed,
    })
}

fn testbed(v: &Validated) -> Result<Vec<Table>, CliError> {
    let tb = v.config.testbed.as_ref().ok_or_else(|| CliError::Validation("testbed needs a [testbed] block".into()))?;
    let seed = v.config.simulation.seed;
    let cfg = testbed_config(tb, seed)?;
    let kinds = [
        ("weak", ResidualKind::Weak),
        ("product_realized", ResidualKind::Product { correction: ItoCorrection::Realized }),
        ("product_time", ResidualKind::Product { correction: ItoCorrection::Time }),
        ("product_omitted", ResidualKind::Product { correction: ItoCorrection::Omitted }),
    ];
    let mut res = Table::new("testbed_residuals", vec!["kind".into(), "dt".into(), "error".into()]);
    let mut orders = Table::new("testbed_orders", vec!["kind".into(), "order".into()]);
    for (name, kind) in kinds {
        let study = residual_refinement(&cfg, kind)?;
        for (dt, e) in study.dts.iter().zip(&study.errors) {
            res.push(vec![name.into(), (*dt).into(), (*e).into()]);
        }
        orders.push(vec![name.into(), study.order.into()]);
    }
    // The a-priori estimate concerns the equation without the λ·g term.
    let mut coeffs = cfg.coeffs.clone();
    coeffs.lambda = 0.0;
    let solver = TestbedSolver::new(&cfg.geom, &coeffs)?;
    let n = cfg.coarse_steps << (cfg.levels - 1);
    let dt = cfg.horizon / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(path_seed(seed, 0));
    let run = solver.run(&cfg.u0, brownian_increments(&mut rng, n, coeffs.m, dt), dt)?;
    let mut apriori = Table::new(
        "testbed_apriori",
        vec!["p".into(), "solution_norm_sq".into(), "data_norm_sq".into(), "ratio".into()],
    );
    for p in &tb.p {
        let r = apriori_ratio(&run, &coeffs, *p)?;
        apriori.push(vec![r.p.into(), r.solution_norm_sq.into(), r.data_norm_sq.into(), r.ratio.into()]);
    }
    Ok(vec![res, orders, apriori])
}

fn check(quiet: bool) -> Result<Produced, CliError> {
    let results = acceptance::run_all();
    let mut t = Table::new(
        "acceptance",
        vec!["id".into(), "name".into(), "passed".into(), "elapsed_secs".into(), "budget_secs".into(), "detail".into()],
    );
    for r in &results {
        if !quiet {
            println!("{r}");
        }
        t.push(vec![
            (r.id as usize).into(),
            r.name.as_str().into(),
            r.passed.into(),
            r.elapsed_secs.into(),
            r.budget_secs.into(),
            r.detail.as_str().into(),
        ]);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if !quiet {
        println!("{} of {} criteria passed", results.len() - failed, results.len());
    }
    let entries = results.iter().map(|r| AcceptanceEntry { id: r.id, name: r.name.clone(), passed: r.passed }).collect();
    Ok(Produced { tables: vec![t], acceptance: Some(entries), failed })
}
