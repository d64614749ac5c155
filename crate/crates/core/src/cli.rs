//! Command line front end: subcommands, artifact writers and exit codes.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::cell_solvers::{averaged_reactions, compute_effective_data, solve_potential, CellField, Diffusion};
use crate::config::{load_config, RunConfig};
use crate::error::{Error, Result};
use crate::geometry::{build_cell_grid, MaskedGrid, WallSide};
use crate::homog_solver::{picard_solve, HomogGrid, HomogSolution, CFL_LIMIT, SIDES};
use crate::layer_solvers::{solve_outlet_layers, solve_wall_corrector, StripField, StripKind, WallCorrector};
use crate::micro_solver::{solve_micro, MicroOptions, MicroSetup};
use crate::reactions::{validate_reactions, ReactionModel, ReactionSystem};
use crate::verify::{run_sweep, ErrorComponents, SweepReport};

/// Largest flux-balance residual a micro run may report.
pub const BALANCE_TOL: f64 = 1e-8;

#[derive(Debug, Parser)]
#[command(name = "fracture", version, about = "Reactive transport through a thin perforated fracture")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Effective velocity and diffusion from the cell problems.
    Cell(RunArgs),
    /// Wall and outlet boundary layer correctors.
    Layer(RunArgs),
    /// Homogenized interface and bulk problem.
    Homog(RunArgs),
    /// Resolved microscale problem for one ε.
    Micro(RunArgs),
    /// Error sweep over ε with rate fits.
    Verify(RunArgs),
    /// Collects existing CSV outputs into summary.csv.
    Report(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output.directory`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Single-threaded, bit-reproducible execution.
    #[arg(long)]
    pub serial: bool,
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn writer(dir: &Path, name: &str) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(dir.join(name))?)))
}

fn failure_kind(e: &Error) -> &'static str {
    match e {
        Error::Geometry(_) => "geometry",
        Error::Resolution(_) => "resolution",
        Error::UnsupportedGeometry(_) => "unsupported_geometry",
        Error::Assumption { .. } => "assumption",
        Error::Solver { .. } => "solver",
        Error::Consistency(_) => "consistency",
        Error::Invariant(_) => "invariant",
        Error::NonConvergence { .. } => "nonconvergence",
        Error::Config { .. } => "config",
        Error::Io(_) => "io",
    }
}

/// Prints one `failure,<code>,<kind>,<message>` line per error and returns
/// the largest exit code.
fn report_failures(errs: &[Error]) -> i32 {
    let mut stderr = std::io::stderr().lock();
    for e in errs {
        let msg = e.to_string().replace(['\n', ','], ";");
        let _ = writeln!(stderr, "failure,{},{},{}", e.exit_code(), failure_kind(e), msg);
    }
    errs.iter().map(Error::exit_code).max().unwrap_or(0)
}

/// Parses arguments, runs the subcommand and returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let (args, cmd) = match &cli.command {
        Command::Cell(a) => (a, "cell"),
        Command::Layer(a) => (a, "layer"),
        Command::Homog(a) => (a, "homog"),
        Command::Micro(a) => (a, "micro"),
        Command::Verify(a) => (a, "verify"),
        Command::Report(a) => (a, "report"),
    };
    let cfg = match load_config(&args.config) {
        Ok(c) => c,
        Err(errs) => return report_failures(&errs),
    };
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.directory));
    match dispatch(cmd, &cfg, &out, args.serial) {
        Ok(()) => 0,
        Err(errs) => report_failures(&errs),
    }
}

/// Runs one subcommand, writing its artifacts into `out`.
pub fn dispatch(cmd: &str, cfg: &RunConfig, out: &Path, serial: bool) -> std::result::Result<(), Vec<Error>> {
    let one = |e: Error| vec![e];
    fs::create_dir_all(out).map_err(|e| one(e.into()))?;
    if cmd != "report" {
        fs::write(out.join("effective_config.toml"), cfg.to_toml()).map_err(|e| one(e.into()))?;
    }
    match cmd {
        "cell" => run_cell(cfg, out, serial).map_err(one),
        "layer" => run_layer(cfg, out).map_err(one),
        "homog" => run_homog(cfg, out, serial).map(|_| ()).map_err(one),
        "micro" => run_micro(cfg, out, serial),
        "verify" => run_verify(cfg, out, serial),
        "report" => run_report(out).map_err(one),
        other => Err(one(Error::config("command", format!("unknown subcommand {other}")))),
    }
}

fn diffusions(sys: &ReactionSystem<f64>) -> Vec<Diffusion<f64>> {
    (0..sys.n_species()).map(|k| Diffusion::isotropic(sys.fracture_diffusion(k))).collect()
}

fn write_cell_field(dir: &Path, name: &str, grid: &MaskedGrid<f64>, f: &CellField<f64>) -> Result<()> {
    let mut w = writer(dir, name)?;
    w.write_record(["xi1", "xi2", "value"])?;
    for (i, j) in grid.fluid_cells() {
        w.write_record([num(grid.xc(i)), num(grid.yc(j)), num(f.at(grid, i, j))])?;
    }
    w.flush()?;
    Ok(())
}

fn run_cell(cfg: &RunConfig, out: &Path, serial: bool) -> Result<()> {
    let sys = cfg.reaction_system();
    let eff = compute_effective_data(&cfg.cell_geometry(), &cfg.inflow(), &diffusions(&sys), serial)?;
    let mut w = writer(out, "cell_coefficients.csv")?;
    w.write_record(["species", "v_hat", "d11_hat", "s_plus", "s_minus", "y0"])?;
    let m = &eff.measures;
    for (k, d) in eff.d11_hat.iter().enumerate() {
        w.write_record([k.to_string(), num(eff.v_hat), num(*d), num(m.s_plus), num(m.s_minus), num(m.y0)])?;
    }
    w.flush()?;
    if cfg.output.dump_fields {
        write_cell_field(out, "cell_potential.csv", &eff.grid, &eff.potential.p)?;
        for k in 0..eff.n1.len() {
            write_cell_field(out, &format!("cell_n1_species{k}.csv"), &eff.grid, &eff.n1[k])?;
            write_cell_field(out, &format!("cell_n2_species{k}.csv"), &eff.grid, &eff.n2[k])?;
        }
    }
    if cfg.output.dump_masks {
        eff.grid.write_mask_csv(File::create(out.join("cell_mask.csv"))?)?;
    }
    Ok(())
}

fn strip_label(s: &StripField<f64>, species: Option<usize>) -> String {
    match (s.kind, species) {
        (StripKind::Wall { side, which }, _) => {
            let w = match which {
                WallCorrector::Z1 => "z1",
                WallCorrector::Z2 => "z2",
            };
            format!("{w}_{}", side.label())
        }
        (StripKind::Outlet { order }, k) => {
            let o = match order {
                crate::layer_solvers::LayerOrder::Zero => "pi0",
                crate::layer_solvers::LayerOrder::One => "pi1",
            };
            format!("{o}_species{}", k.unwrap_or(0))
        }
    }
}

fn run_layer(cfg: &RunConfig, out: &Path) -> Result<()> {
    let geom = cfg.cell_geometry();
    let sys = cfg.reaction_system();
    let mut strips: Vec<(String, StripField<f64>)> = Vec::new();
    for side in SIDES {
        for which in [WallCorrector::Z1, WallCorrector::Z2] {
            let s = solve_wall_corrector(&geom, side, which, cfg.solver.wall_strip_height)?;
            strips.push((strip_label(&s, None), s));
        }
    }
    let grid = build_cell_grid(&geom)?;
    let pot = solve_potential(&grid, &cfg.inflow())?;
    for (k, d) in diffusions(&sys).into_iter().enumerate() {
        let layers = solve_outlet_layers(&grid, d, &pot.velocity, cfg.outlet_options())?;
        for s in [layers.pi0, layers.pi1] {
            strips.push((strip_label(&s, Some(k)), s));
        }
    }
    let mut decay = writer(out, "layer_decay.csv")?;
    decay.write_record(["layer", "m", "position", "a_m", "delta0", "gamma"])?;
    let mut summary = writer(out, "layer_summary.csv")?;
    summary.write_record([
        "layer",
        "max_abs",
        "truncation",
        "decay_slope",
        "fit_residual",
        "delta0",
        "gamma",
        "c0",
        "truncation_sensitivity",
        "oddness_defect",
    ])?;
    for (label, s) in &strips {
        for (m, (p, a)) in s.slice_pos.iter().zip(&s.slice_max).enumerate() {
            decay.write_record([label.clone(), m.to_string(), num(*p), num(*a), opt(s.delta0), opt(s.gamma)])?;
        }
        let odd = match s.kind {
            StripKind::Wall { which: WallCorrector::Z1, .. } => Some(s.oddness_defect()),
            _ => None,
        };
        summary.write_record([
            label.clone(),
            num(s.max_abs()),
            num(s.truncation),
            opt(s.decay_slope),
            num(s.fit_residual),
            opt(s.delta0),
            opt(s.gamma),
            opt(s.c0),
            opt(s.truncation_sensitivity),
            opt(odd),
        ])?;
        for warn in &s.warnings {
            eprintln!("warning,{label},{warn}");
        }
        if cfg.output.dump_fields {
            let mut w = writer(out, &format!("layer_{label}.csv"))?;
            w.write_record(["z1", "z2", "value"])?;
            for (i, j) in s.grid.fluid_cells() {
                w.write_record([num(s.grid.xc(i)), num(s.grid.yc(j)), num(s.values[s.grid.idx(i, j)])])?;
            }
            w.flush()?;
        }
    }
    decay.flush()?;
    summary.flush()?;
    Ok(())
}

/// Homogenized time step from the interface CFL limit.
pub fn homog_grid(cfg: &RunConfig, v_hat: f64) -> Result<HomogGrid<f64>> {
    let g = &cfg.geometry;
    let t = cfg.solver.t_end;
    let m = cfg.solver.homog_cells;
    let steps = (t * v_hat / (CFL_LIMIT * g.ell / m as f64)).ceil().max(1.0);
    HomogGrid::new(g.ell, g.height_plus, g.height_minus, m, t / steps, t)
}

fn run_homog(cfg: &RunConfig, out: &Path, serial: bool) -> Result<HomogSolution<f64>> {
    let sys = cfg.reaction_system();
    validate_reactions(&sys, cfg.solver.t_end)?;
    let eff = compute_effective_data(&cfg.cell_geometry(), &cfg.inflow(), &diffusions(&sys), serial)?;
    let grid = homog_grid(cfg, eff.v_hat)?;
    let avg = averaged_reactions(&eff.grid, &sys);
    let sol = picard_solve(&sys, &avg, eff.v_hat, &grid, &cfg.picard_options(serial))?;
    let stride = cfg.output.snapshot_stride;

    let mut w = writer(out, "homog_interface.csv")?;
    w.write_record(["species", "x1", "t", "w"])?;
    for n in (0..=grid.n_steps).filter(|n| n % stride == 0 || *n == grid.n_steps) {
        for k in 0..sol.n_species() {
            for (i, v) in sol.w_nodes(n, k).iter().enumerate() {
                w.write_record([k.to_string(), num(grid.x(i)), num(grid.time(n)), num(*v)])?;
            }
        }
    }
    w.flush()?;

    let mut p = writer(out, "homog_picard.csv")?;
    p.write_record(["window", "t_start", "t_end", "iteration", "w_metric", "contraction"])?;
    for (wi, win) in sol.windows.iter().enumerate() {
        let rho = win.contraction_factors();
        for (it, wm) in win.w_history.iter().enumerate() {
            let c = if it == 0 { String::new() } else { num(rho[it - 1]) };
            p.write_record([wi.to_string(), num(win.t_start), num(win.t_end), (it + 1).to_string(), num(*wm), c])?;
        }
    }
    p.flush()?;

    if cfg.output.dump_fields {
        let mut b = writer(out, "homog_bulk.csv")?;
        b.write_record(["side", "species", "x1", "x2", "t", "value"])?;
        for snap in &sol.snapshots {
            for side in SIDES {
                let sign = match side {
                    WallSide::Plus => 1.0,
                    WallSide::Minus => -1.0,
                };
                for k in 0..sol.n_species() {
                    let f = snap.field(side, k);
                    for j in 0..=grid.rows(side) {
                        for i in 0..=grid.m {
                            b.write_record([
                                side.label().to_string(),
                                k.to_string(),
                                num(grid.x(i)),
                                num(sign * j as f64 * grid.dy(side)),
                                num(snap.t),
                                num(f.at(&grid, i, j)),
                            ])?;
                        }
                    }
                }
            }
        }
        b.flush()?;
    }
    Ok(sol)
}

fn run_micro(cfg: &RunConfig, out: &Path, serial: bool) -> std::result::Result<(), Vec<Error>> {
    let inner = || -> Result<Vec<Error>> {
        let sys = cfg.reaction_system();
        let diag = validate_reactions(&sys, cfg.solver.t_end)?;
        let setup = MicroSetup::new(&cfg.micro_spec(), &cfg.cell_geometry(), &cfg.inflow())?;
        let t = cfg.solver.t_end;
        let dt = match cfg.solver.dt {
            Some(dt) => dt,
            None => t / (t / setup.max_stable_dt(diag.lipschitz)).ceil(),
        };
        let opts = MicroOptions {
            t_end: t,
            dt,
            sample_stride: cfg.output.snapshot_stride,
            serial,
            lipschitz: diag.lipschitz,
        };
        let sol = solve_micro(&setup, &sys, &opts)?;
        let g = &setup.grid;

        let mut w = writer(out, "micro_snapshots.csv")?;
        w.write_record(["species", "x1", "x2", "t", "value"])?;
        for s in &sol.samples {
            for (k, f) in s.fields.iter().enumerate() {
                for (i, j) in g.fluid_cells() {
                    w.write_record([k.to_string(), num(g.xc(i)), num(g.yc(j)), num(s.t), num(f[g.idx(i, j)])])?;
                }
            }
        }
        w.flush()?;

        let mut b = writer(out, "micro_balance.csv")?;
        b.write_record(["step", "t", "balance_residual"])?;
        for (n, r) in sol.balance_residual.iter().enumerate() {
            b.write_record([(n + 1).to_string(), num((n + 1) as f64 * dt), num(*r)])?;
        }
        b.flush()?;

        let mut m = writer(out, "micro_summary.csv")?;
        m.write_record(["eps", "dt", "n_steps", "courant", "max_balance_residual", "dirichlet_defect"])?;
        m.write_record([
            num(sol.eps()),
            num(sol.dt),
            sol.n_steps.to_string(),
            num(sol.courant),
            num(sol.max_balance_residual()),
            num(sol.dirichlet_defect),
        ])?;
        m.flush()?;
        if cfg.output.dump_masks {
            g.write_mask_csv(File::create(out.join("micro_mask.csv"))?)?;
        }

        let mut bad = Vec::new();
        if sol.max_balance_residual() > BALANCE_TOL {
            bad.push(Error::Invariant(format!("flux balance residual {:.3e} exceeds {BALANCE_TOL:.0e}", sol.max_balance_residual())));
        }
        if sol.dirichlet_defect != 0.0 {
            bad.push(Error::Invariant(format!("Dirichlet data not reproduced (defect {:.3e})", sol.dirichlet_defect)));
        }
        Ok(bad)
    };
    match inner() {
        Ok(bad) if bad.is_empty() => Ok(()),
        Ok(bad) => Err(bad),
        Err(e) => Err(vec![e]),
    }
}

const VERIFY_FOOTER: &str = "\
Slopes are least-squares fits of log E against log eps over the N list.
A slope of at least 0.35 is read as confirming a sqrt(eps) rate and a slope
of at least 0.7 as confirming an eps rate; the margins below 0.5 and 1 absorb
discretization error that does not vanish with eps at fixed cells per period.
Time maxima are taken over every sample_stride-th micro step.
A row is adequate when refining the micro grid twofold changes every solution
norm by at most a quarter of the measured error.
";

/// Writes the error table, slope table and text summary of a sweep.
pub fn write_verify_report(out: &Path, rep: &SweepReport) -> Result<()> {
    let mut e = writer(out, "verify_errors.csv")?;
    let mut head = vec!["N", "eps"];
    head.extend(ErrorComponents::NAMES);
    head.push("adequacy_flag");
    e.write_record(&head)?;
    for r in &rep.rows {
        let mut rec = vec![r.n.to_string(), num(r.eps)];
        rec.extend(r.errors.as_array().map(num));
        rec.push(match r.adequacy {
            Some(a) if a.passed => "pass".into(),
            Some(_) => "fail".into(),
            None => "unchecked".into(),
        });
        e.write_record(&rec)?;
    }
    e.flush()?;

    let mut s = writer(out, "verify_slopes.csv")?;
    s.write_record(["component", "slope", "residual"])?;
    for f in &rep.slopes {
        s.write_record([f.component.clone(), opt(f.slope), opt(f.residual)])?;
    }
    s.flush()?;

    let mut t = BufWriter::new(File::create(out.join("verify_summary.txt"))?);
    writeln!(t, "v_hat = {}", num(rep.v_hat))?;
    writeln!(t, "micro dt = {}", num(rep.dt))?;
    writeln!(t, "homogenized dt = {}", num(rep.homog_dt))?;
    writeln!(t, "sample stride = {}", rep.sample_stride)?;
    writeln!(t, "monotone in eps = {}", rep.monotone())?;
    writeln!(t, "valid = {}", rep.valid)?;
    for r in &rep.rows {
        writeln!(t, "N = {}: balance residual {:.3e}, Dirichlet defect {:.3e}", r.n, r.balance_residual, r.dirichlet_defect)?;
    }
    writeln!(t)?;
    t.write_all(VERIFY_FOOTER.as_bytes())?;
    t.flush()?;
    Ok(())
}

fn run_verify(cfg: &RunConfig, out: &Path, serial: bool) -> std::result::Result<(), Vec<Error>> {
    let rep = run_sweep(&cfg.reaction_system(), &cfg.sweep_config(serial)).map_err(|e| vec![e])?;
    write_verify_report(out, &rep).map_err(|e| vec![e])?;
    if rep.valid {
        Ok(())
    } else {
        Err(rep
            .failing_n
            .iter()
            .map(|n| Error::Invariant(format!("micro resolution inadequate at N = {n}; refine cells_per_period")))
            .collect())
    }
}

/// Known artifacts and the columns `report` requires of each.
const REPORT_SOURCES: &[(&str, &[&str])] = &[
    ("cell_coefficients.csv", &["species", "v_hat", "d11_hat"]),
    ("layer_summary.csv", &["layer", "max_abs", "delta0"]),
    ("homog_picard.csv", &["window", "iteration", "w_metric"]),
    ("micro_summary.csv", &["eps", "max_balance_residual", "dirichlet_defect"]),
    ("verify_errors.csv", &["N", "eps", "E_bulk_L2", "E_frac_L2", "E_avg", "adequacy_flag"]),
    ("verify_slopes.csv", &["component", "slope"]),
];

/// Concatenates every known CSV in `out` into `summary.csv` in long form
/// (source, row, column, value).
fn run_report(out: &Path) -> Result<()> {
    let mut rows: Vec<[String; 4]> = Vec::new();
    for (name, required) in REPORT_SOURCES {
        let path = out.join(name);
        if !path.exists() {
            continue;
        }
        let mut r = csv::Reader::from_path(&path)?;
        let head = r.headers()?.clone();
        for col in *required {
            if !head.iter().any(|h| h == *col) {
                return Err(Error::Io(format!("{name}: missing column {col}")));
            }
        }
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            for (h, v) in head.iter().zip(rec.iter()) {
                rows.push([name.to_string(), i.to_string(), h.to_string(), v.to_string()]);
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Io(format!("no result CSVs found in {}", out.display())));
    }
    let mut w = writer(out, "summary.csv")?;
    w.write_record(["source", "row", "column", "value"])?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}
