//! Corrector-augmented approximation of the micro solution, discrete energy
//! norms of the error and ε-sweeps with fitted convergence rates.

use rayon::prelude::*;

use crate::cell_solvers::{averaged_reactions, compute_effective_data, CellField, Diffusion, EffectiveData, InflowProfile};
use crate::error::{Error, Result};
use crate::geometry::{CellGeometry, FaceClass, MaskedGrid, MicroDomainSpec, Region, WallSide};
use crate::homog_solver::{picard_solve, HomogGrid, HomogSnapshot, HomogSolution, PicardOptions, CFL_LIMIT};
use crate::layer_solvers::{solve_outlet_layers, solve_wall_corrector, OutletLayerOptions, OutletLayers, StripField, WallCorrector};
use crate::micro_solver::{solve_micro, MicroOptions, MicroSample, MicroSetup, MicroSolution};
use crate::reactions::{validate_reactions, ReactionModel, ReactionSystem};
use crate::scalar::{cutoff, linear_fit, Real};

/// Cutoff widths, outlet scaling exponent and term toggles of the
/// approximation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApproximationConfig<T> {
    /// χ₀ width in x₂ for the wall correctors.
    pub theta0: T,
    /// χ₁ width for the outlet layer, in units of ε^γ.
    pub theta1: T,
    /// Width of the edge cutoffs of the Λ correction, in units of ε.
    pub theta2: T,
    pub gamma: T,
    pub wall_terms: bool,
    pub n1_term: bool,
    pub outlet_terms: bool,
    pub lambda: bool,
}

impl<T: Real> Default for ApproximationConfig<T> {
    fn default() -> Self {
        Self {
            theta0: T::lit(0.4),
            theta1: T::one(),
            theta2: T::lit(0.2),
            gamma: T::lit(0.8),
            wall_terms: true,
            n1_term: true,
            outlet_terms: true,
            lambda: true,
        }
    }
}

impl<T: Real> ApproximationConfig<T> {
    /// Checks the cutoff constraints for every ε up to `eps_max`.
    /// `support_gap` is the distance from the outlet to the reaction
    /// support, `obstacle_margin` the obstacle-free strip at both cell ends
    /// and `height` the smaller bulk height.
    pub fn validate(&self, eps_max: T, support_gap: T, obstacle_margin: T, height: T) -> Result<()> {
        let two_thirds = T::lit(2.0 / 3.0);
        if !(self.gamma > two_thirds && self.gamma < T::one()) {
            return Err(Error::config("verify.gamma", format!("gamma must lie in (2/3, 1), got {}", self.gamma)));
        }
        if !(self.theta0 > T::zero() && self.theta0 < height) {
            return Err(Error::config("verify.theta0", "theta0 must lie in (0, bulk height)"));
        }
        if !(self.theta1 > T::zero()) || self.theta1 * eps_max.powf(self.gamma) > support_gap {
            return Err(Error::config(
                "verify.theta1",
                "outlet cutoff must vanish on the support of the interface reactions",
            ));
        }
        if !(self.theta2 > T::zero()) || self.theta2 > obstacle_margin {
            return Err(Error::config("verify.theta2", "edge cutoff must stay inside the obstacle-free end strips of the cell"));
        }
        Ok(())
    }
}

/// Bulk boundary-layer correctors entering the approximation.
#[derive(Debug, Clone)]
pub enum WallTerms<T> {
    /// Flat walls: Z₁ = 0 and Z₂ = ξ₂, so the bulk corrector vanishes.
    Flat,
    /// Solved fields, indexed [plus, minus].
    Solved { z1: [StripField<T>; 2], z2: [StripField<T>; 2] },
}

impl<T: Real> WallTerms<T> {
    pub fn solve(geom: &CellGeometry<T>) -> Result<Self> {
        if geom.has_flat_walls() {
            return Ok(Self::Flat);
        }
        let s = |side, which| solve_wall_corrector(geom, side, which, None);
        Ok(Self::Solved {
            z1: [s(WallSide::Plus, WallCorrector::Z1)?, s(WallSide::Minus, WallCorrector::Z1)?],
            z2: [s(WallSide::Plus, WallCorrector::Z2)?, s(WallSide::Minus, WallCorrector::Z2)?],
        })
    }
}

/// Everything the approximation is built from.
pub struct ApproximationInputs<'a, T, R> {
    pub homog: &'a HomogSolution<T>,
    pub eff: &'a EffectiveData<T>,
    /// One entry per species.
    pub outlet: &'a [OutletLayers<T>],
    pub walls: &'a WallTerms<T>,
    pub model: &'a R,
}

/// Value of a cell field at ξ (ξ₁ taken modulo 1); zero in solid cells.
pub fn cell_value<T: Real>(grid: &MaskedGrid<T>, field: &CellField<T>, xi1: T, xi2: T) -> T {
    let x = xi1 - xi1.floor();
    let i = grid.x_edges.partition_point(|e| *e <= x).saturating_sub(1).min(grid.nx - 1);
    let y = xi2.max(grid.y_edges[0]).min(grid.y_edges[grid.ny]);
    let j = grid.y_edges.partition_point(|e| *e <= y).saturating_sub(1).min(grid.ny - 1);
    if grid.is_fluid(i, j) {
        field.values[grid.idx(i, j)]
    } else {
        T::zero()
    }
}

/// Bulk snapshots bracketing t with the linear weight of the later one.
fn bracket<T: Real>(homog: &HomogSolution<T>, t: T) -> (&HomogSnapshot<T>, &HomogSnapshot<T>, T) {
    let s = &homog.snapshots;
    let k = s.partition_point(|x| x.t <= t);
    if k == 0 {
        return (&s[0], &s[0], T::zero());
    }
    if k == s.len() {
        return (&s[k - 1], &s[k - 1], T::zero());
    }
    let (a, b) = (&s[k - 1], &s[k]);
    (a, b, ((t - a.t) / (b.t - a.t)).max(T::zero()).min(T::one()))
}

fn edge_cutoff<T: Real>(s: T, width: T) -> T {
    if s < T::zero() {
        T::one()
    } else {
        cutoff(s, width)
    }
}

impl<T: Real, R: ReactionModel<T>> ApproximationInputs<'_, T, R> {
    fn phi0(&self, k: usize, t: T) -> T {
        self.model.outlet_value(k, t) - self.homog.w_at(k, self.homog.grid.ell, t)
    }

    fn phi0_dt(&self, k: usize, t: T) -> T {
        let h = self.homog.grid.dt;
        let te = self.homog.grid.t_end();
        let a = (t - h).max(T::zero());
        let b = (t + h).min(te);
        (self.phi0(k, b) - self.phi0(k, a)) / (b - a)
    }

    /// Rᶠₖ at a fracture point.
    pub fn fracture_value(&self, cfg: &ApproximationConfig<T>, eps: T, k: usize, x1: T, x2: T, t: T) -> T {
        let ell = self.homog.grid.ell;
        let mut r = self.homog.w_at(k, x1, t);
        if cfg.outlet_terms {
            let chi = cutoff((x1 - ell) / eps.powf(cfg.gamma), cfg.theta1);
            if chi > T::zero() {
                let z = ((x1 - ell) / eps, x2 / eps);
                let l = &self.outlet[k];
                r += chi * (self.phi0(k, t) * l.pi0.eval_outlet(z.0, z.1) + eps * self.phi0_dt(k, t) * l.pi1.eval_outlet(z.0, z.1));
            }
        }
        if cfg.n1_term {
            let mut weight = T::one();
            if cfg.lambda {
                let w = cfg.theta2 * eps;
                weight -= edge_cutoff(x1, w) + edge_cutoff(ell - x1, w);
            }
            if weight != T::zero() {
                let n1 = cell_value(&self.eff.grid, &self.eff.n1[k], x1 / eps, x2 / eps);
                r += weight * eps * n1 * self.homog.dw_dx_at(k, x1, t);
            }
        }
        r
    }

    /// R±ₖ at a bulk point.
    pub fn bulk_value(&self, cfg: &ApproximationConfig<T>, eps: T, side: WallSide, k: usize, x1: T, x2: T, t: T) -> T {
        let (a, b, f) = bracket(self.homog, t);
        let h = self.homog;
        let mut r = h.u_at(a, side, k, x1, x2) * (T::one() - f) + h.u_at(b, side, k, x1, x2) * f;
        if let (true, WallTerms::Solved { z1, z2 }) = (cfg.wall_terms, self.walls) {
            let chi = cutoff(x2, cfg.theta0);
            if chi > T::zero() {
                let si = usize::from(side == WallSide::Minus);
                let xi1 = x1 / eps;
                let xi2 = (x2 - side.sign::<T>() * eps) / eps;
                let (ga1, ga2) = h.interface_gradient(a, side, k, x1);
                let (gb1, gb2) = h.interface_gradient(b, side, k, x1);
                let d1 = ga1 * (T::one() - f) + gb1 * f;
                let d2 = ga2 * (T::one() - f) + gb2 * f;
                let n = z1[si].eval_wall(xi1, xi2) * d1 + (z2[si].eval_wall(xi1, xi2) - xi2) * d2;
                r += eps * chi * n;
            }
        }
        r
    }

    /// R on every fluid cell of the micro grid at the sample times of `u`.
    pub fn assemble(&self, cfg: &ApproximationConfig<T>, setup: &MicroSetup<T>, times: &[(usize, T)]) -> Result<Vec<MicroSample<T>>> {
        check_compatible(self.homog, self.eff, &setup.spec)?;
        let g = &setup.grid;
        let eps = setup.spec.eps();
        let ns = self.model.n_species();
        let mut out = Vec::with_capacity(times.len());
        for &(step, t) in times {
            let mut fields = vec![vec![T::zero(); g.n_cells()]; ns];
            for (i, j) in g.fluid_cells() {
                let c = g.idx(i, j);
                let (x1, x2) = (g.xc(i), g.yc(j));
                for (k, f) in fields.iter_mut().enumerate() {
                    f[c] = match g.regions[c] {
                        Region::Fracture => self.fracture_value(cfg, eps, k, x1, x2, t),
                        Region::BulkPlus => self.bulk_value(cfg, eps, WallSide::Plus, k, x1, x2, t),
                        Region::BulkMinus => self.bulk_value(cfg, eps, WallSide::Minus, k, x1, x2, t),
                    };
                }
            }
            out.push(MicroSample { step, t, fields });
        }
        Ok(out)
    }

    /// w₀ at the micro column centres for each sample time: [sample][species][column].
    pub fn w_columns(&self, grid: &MaskedGrid<T>, times: &[(usize, T)]) -> Vec<Vec<Vec<T>>> {
        let ns = self.model.n_species();
        times
            .iter()
            .map(|&(_, t)| (0..ns).map(|k| (0..grid.nx).map(|i| self.homog.w_at(k, grid.xc(i), t)).collect()).collect())
            .collect()
    }
}

fn check_compatible<T: Real>(homog: &HomogSolution<T>, eff: &EffectiveData<T>, spec: &MicroDomainSpec<T>) -> Result<()> {
    let g = &homog.grid;
    let tol = T::lit(1e-12);
    if (g.ell - spec.ell).abs() > tol || (g.height_plus - spec.height_plus).abs() > tol || (g.height_minus - spec.height_minus).abs() > tol {
        return Err(Error::config("geometry", "homogenized and micro domains differ"));
    }
    if eff.grid.nx != spec.cells_per_period || eff.grid.ny != spec.cells_across {
        return Err(Error::config(
            "solver.micro",
            format!(
                "cell grid {}x{} does not match the micro period {}x{}",
                eff.grid.nx, eff.grid.ny, spec.cells_per_period, spec.cells_across
            ),
        ));
    }
    Ok(())
}

/// The five error components of one run.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ErrorComponents {
    pub e_bulk_l2: f64,
    pub e_bulk_grad: f64,
    pub e_frac_l2: f64,
    pub e_frac_grad: f64,
    pub e_avg: f64,
}

impl ErrorComponents {
    pub const NAMES: [&'static str; 5] = ["E_bulk_L2", "E_bulk_grad", "E_frac_L2", "E_frac_grad", "E_avg"];

    pub fn as_array(&self) -> [f64; 5] {
        [self.e_bulk_l2, self.e_bulk_grad, self.e_frac_l2, self.e_frac_grad, self.e_avg]
    }

    pub fn bulk_energy(&self) -> f64 {
        self.e_bulk_l2 + self.e_bulk_grad
    }

    pub fn frac_energy(&self) -> f64 {
        self.e_frac_l2 + self.e_frac_grad
    }
}

/// Discrete energy norms of u − R. Samples of `u` and `r` must share their
/// time levels; `w_cols` holds the homogenized w at the column centres
/// ([sample][species][column]) for the cross-section average error.
pub fn energy_norms<T: Real>(grid: &MaskedGrid<T>, eps: T, u: &[MicroSample<T>], r: &[MicroSample<T>], w_cols: &[Vec<Vec<T>>]) -> Result<ErrorComponents> {
    if u.len() != r.len() || u.len() != w_cols.len() || u.iter().zip(r).any(|(a, b)| a.step != b.step) {
        return Err(Error::config("verify", "micro and approximation samples are not aligned"));
    }
    let is_bulk = |c: usize| grid.regions[c] != Region::Fracture;
    let mut out = ErrorComponents::default();
    let mut grad_bulk = 0.0;
    let mut grad_frac = 0.0;
    let mut t_prev = 0.0;
    for (s, (us, rs)) in u.iter().zip(r).enumerate() {
        let mut l2_bulk = 0.0;
        let mut l2_frac = 0.0;
        let mut g_bulk = 0.0;
        let mut g_frac = 0.0;
        let mut avg = 0.0;
        for (uf, rf) in us.fields.iter().zip(&rs.fields) {
            let e = |c: usize| (uf[c] - rf[c]).to_f64_lossy();
            for (i, j) in grid.fluid_cells() {
                let c = grid.idx(i, j);
                let v = grid.area(i, j).to_f64_lossy() * e(c).powi(2);
                if is_bulk(c) {
                    l2_bulk += v;
                } else {
                    l2_frac += v;
                }
            }
            for j in 0..grid.ny {
                for i in 1..grid.nx {
                    if grid.xfaces[grid.xface(i, j)] == FaceClass::Interior {
                        let (a, b) = (grid.idx(i - 1, j), grid.idx(i, j));
                        let dist = ((grid.dx(i - 1) + grid.dx(i)) * T::lit(0.5)).to_f64_lossy();
                        let v = grid.dy(j).to_f64_lossy() / dist * (e(b) - e(a)).powi(2);
                        if is_bulk(a) {
                            g_bulk += v;
                        } else {
                            g_frac += v;
                        }
                    }
                }
            }
            for j in 1..grid.ny {
                for i in 0..grid.nx {
                    if grid.yfaces[grid.yface(i, j)] == FaceClass::Interior {
                        let (a, b) = (grid.idx(i, j - 1), grid.idx(i, j));
                        let dist = ((grid.dy(j - 1) + grid.dy(j)) * T::lit(0.5)).to_f64_lossy();
                        let v = grid.dx(i).to_f64_lossy() / dist * (e(b) - e(a)).powi(2);
                        if is_bulk(a) {
                            g_bulk += v;
                        } else {
                            g_frac += v;
                        }
                    }
                }
            }
        }
        for (k, uf) in us.fields.iter().enumerate() {
            for i in 0..grid.nx {
                let mut num = 0.0;
                let mut height = 0.0;
                for j in 0..grid.ny {
                    let c = grid.idx(i, j);
                    if grid.is_fluid(i, j) && grid.regions[c] == Region::Fracture {
                        let dy = grid.dy(j).to_f64_lossy();
                        num += dy * uf[c].to_f64_lossy();
                        height += dy;
                    }
                }
                if height > 0.0 {
                    let d = num / height - w_cols[s][k][i].to_f64_lossy();
                    avg += grid.dx(i).to_f64_lossy() * d * d;
                }
            }
        }
        out.e_bulk_l2 = out.e_bulk_l2.max(l2_bulk.sqrt());
        out.e_frac_l2 = out.e_frac_l2.max(l2_frac.sqrt());
        out.e_avg = out.e_avg.max(avg.sqrt());
        let t = us.t.to_f64_lossy();
        if s > 0 {
            grad_bulk += (t - t_prev) * g_bulk;
            grad_frac += (t - t_prev) * g_frac;
        }
        t_prev = t;
    }
    out.e_bulk_grad = grad_bulk.sqrt();
    out.e_frac_grad = eps.to_f64_lossy().sqrt() * grad_frac.sqrt();
    Ok(out)
}

/// Energy norms of the micro solution itself.
pub fn solution_norms<T: Real>(sol: &MicroSolution<T>) -> Result<ErrorComponents> {
    let zero: Vec<MicroSample<T>> = sol
        .samples
        .iter()
        .map(|s| MicroSample {
            step: s.step,
            t: s.t,
            fields: s.fields.iter().map(|f| vec![T::zero(); f.len()]).collect(),
        })
        .collect();
    let ns = sol.samples.first().map_or(0, |s| s.fields.len());
    let w = vec![vec![vec![T::zero(); sol.setup.grid.nx]; ns]; sol.samples.len()];
    energy_norms(&sol.setup.grid, sol.eps(), &sol.samples, &zero, &w)
}

/// Inputs of an ε-sweep.
#[derive(Debug, Clone)]
pub struct SweepConfig<T> {
    /// Cell shape; its resolution is replaced by the micro period resolution.
    pub geom: CellGeometry<T>,
    pub v0: InflowProfile<T>,
    pub t_end: T,
    pub cells_per_period: usize,
    pub cells_across: usize,
    pub n_list: Vec<usize>,
    /// Norms use every `sample_stride`-th micro step.
    pub sample_stride: usize,
    /// Micro time step; `None` takes the largest stable step of the finest run.
    pub dt: Option<T>,
    /// Nodes of the homogenized grid along the interface.
    pub homog_cells: usize,
    pub picard: PicardOptions<T>,
    pub approx: ApproximationConfig<T>,
    pub outlet: OutletLayerOptions,
    /// Values of N whose micro grid is refined 2× for the adequacy check.
    pub adequacy: Vec<usize>,
    pub serial: bool,
}

impl<T: Real> SweepConfig<T> {
    pub fn benchmark(geom: CellGeometry<T>) -> Self {
        let t_end = T::lit(0.5);
        let mut picard = PicardOptions::for_final_time(t_end);
        picard.snapshot_stride = 1;
        Self {
            geom,
            v0: InflowProfile::Constant(T::one()),
            t_end,
            cells_per_period: 8,
            cells_across: 16,
            n_list: vec![8, 16, 32],
            sample_stride: 10,
            dt: None,
            homog_cells: 128,
            picard,
            approx: ApproximationConfig::default(),
            outlet: OutletLayerOptions::default(),
            adequacy: vec![8],
            serial: false,
        }
    }
}

/// Result of the 2× refinement check at one N.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdequacyCheck {
    pub n: usize,
    /// |norm(fine) − norm(coarse)| per component.
    pub change: [f64; 5],
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub n: usize,
    pub eps: f64,
    pub errors: ErrorComponents,
    pub adequacy: Option<AdequacyCheck>,
    pub balance_residual: f64,
    pub dirichlet_defect: f64,
}

/// Least-squares slope of log(error) against log(ε).
#[derive(Debug, Clone, PartialEq)]
pub struct SlopeFit {
    pub component: String,
    pub slope: Option<f64>,
    pub residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub slopes: Vec<SlopeFit>,
    pub valid: bool,
    pub failing_n: Vec<usize>,
    pub dt: f64,
    pub homog_dt: f64,
    pub v_hat: f64,
    pub sample_stride: usize,
}

impl SweepReport {
    pub fn slope(&self, component: &str) -> Option<f64> {
        self.slopes.iter().find(|s| s.component == component).and_then(|s| s.slope)
    }

    /// True when every component decreases strictly from each N to the next.
    pub fn monotone(&self) -> bool {
        self.rows.windows(2).all(|w| {
            let a = w[0].errors.as_array();
            let b = w[1].errors.as_array();
            a.iter().zip(&b).all(|(x, y)| y < x)
        })
    }
}

pub fn fit_slopes(rows: &[SweepRow]) -> Vec<SlopeFit> {
    let mut comps: Vec<(String, Vec<f64>)> = ErrorComponents::NAMES
        .iter()
        .enumerate()
        .map(|(c, n)| (n.to_string(), rows.iter().map(|r| r.errors.as_array()[c]).collect()))
        .collect();
    comps.push(("E_bulk".into(), rows.iter().map(|r| r.errors.bulk_energy()).collect()));
    comps.push(("E_frac".into(), rows.iter().map(|r| r.errors.frac_energy()).collect()));
    let xs: Vec<f64> = rows.iter().map(|r| r.eps.ln()).collect();
    comps
        .into_iter()
        .map(|(component, ys)| {
            let fit = if ys.iter().all(|y| *y > 0.0 && y.is_finite()) {
                let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
                linear_fit(&xs, &ly)
            } else {
                None
            };
            SlopeFit {
                component,
                slope: fit.map(|f| f.0),
                residual: fit.map(|f| f.2),
            }
        })
        .collect()
}

/// Shared macroscopic data of a sweep.
pub struct SweepContext<T> {
    pub eff: EffectiveData<T>,
    pub outlet: Vec<OutletLayers<T>>,
    pub walls: WallTerms<T>,
    pub homog: HomogSolution<T>,
    pub dt: T,
    pub lipschitz: T,
}

fn spec_for<T: Real>(sys: &ReactionSystem<T>, cfg: &SweepConfig<T>, n: usize, refine: usize) -> MicroDomainSpec<T> {
    MicroDomainSpec::new(sys.ell, sys.height_plus, sys.height_minus, n, cfg.cells_per_period * refine, cfg.cells_across * refine)
}

/// Runs the cell, layer and homogenized solves shared by every N.
pub fn prepare_sweep<T: Real>(sys: &ReactionSystem<T>, cfg: &SweepConfig<T>) -> Result<SweepContext<T>> {
    if cfg.n_list.is_empty() || cfg.n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("verify.n_list", "N list must be nonempty and strictly ascending"));
    }
    let diag = validate_reactions(sys, cfg.t_end)?;
    let period = spec_for(sys, cfg, cfg.n_list[0], 1).period_geometry(&cfg.geom);
    let ns = sys.n_species();
    let diffs: Vec<Diffusion<T>> = (0..ns).map(|k| Diffusion::isotropic(sys.fracture_diffusion(k))).collect();
    let eff = compute_effective_data(&period, &cfg.v0, &diffs, cfg.serial)?;
    let eps_max = sys.ell / T::from_count(cfg.n_list[0]);
    let margin = cfg
        .geom
        .obstacles
        .iter()
        .fold(T::lit(0.5), |m, r| m.min(r.xi1_lo).min(T::one() - r.xi1_hi));
    cfg.approx.validate(eps_max, sys.ell - sys.x_b, margin, sys.height_plus.min(sys.height_minus))?;
    let outlet = diffs
        .iter()
        .map(|d| solve_outlet_layers(&eff.grid, *d, &eff.potential.velocity, cfg.outlet))
        .collect::<Result<Vec<_>>>()?;
    let walls = WallTerms::solve(&cfg.geom)?;

    // micro step shared by every run
    let dt = match cfg.dt {
        Some(dt) => dt,
        None => {
            let mut dt = T::infinity();
            let mut probe: Vec<(usize, usize)> = cfg.n_list.iter().map(|n| (*n, 1)).collect();
            probe.extend(cfg.adequacy.iter().map(|n| (*n, 2)));
            for (n, r) in probe {
                let setup = MicroSetup::new(&spec_for(sys, cfg, n, r), &cfg.geom, &cfg.v0)?;
                dt = dt.min(setup.max_stable_dt(diag.lipschitz));
            }
            let steps = (cfg.t_end / dt).ceil();
            cfg.t_end / steps
        }
    };
    let m = cfg.homog_cells.max(4);
    let dx = sys.ell / T::from_count(m);
    let steps_h = (cfg.t_end * eff.v_hat / (T::lit(CFL_LIMIT) * dx)).ceil().max(T::one());
    let dt_h = cfg.t_end / steps_h;
    let grid = HomogGrid::new(sys.ell, sys.height_plus, sys.height_minus, m, dt_h, cfg.t_end)?;
    let avg = averaged_reactions(&eff.grid, sys);
    let mut picard = cfg.picard;
    picard.snapshot_stride = 1;
    picard.serial = cfg.serial;
    let homog = picard_solve(sys, &avg, eff.v_hat, &grid, &picard)?;
    Ok(SweepContext {
        eff,
        outlet,
        walls,
        homog,
        dt,
        lipschitz: diag.lipschitz,
    })
}

/// Micro solve and error norms for one N.
pub fn run_single<T: Real>(sys: &ReactionSystem<T>, cfg: &SweepConfig<T>, ctx: &SweepContext<T>, n: usize) -> Result<SweepRow> {
    let spec = spec_for(sys, cfg, n, 1);
    let setup = MicroSetup::new(&spec, &cfg.geom, &cfg.v0)?;
    let opts = MicroOptions {
        t_end: cfg.t_end,
        dt: ctx.dt,
        sample_stride: cfg.sample_stride,
        serial: cfg.serial,
        lipschitz: ctx.lipschitz,
    };
    let micro = solve_micro(&setup, sys, &opts)?;
    let inputs = ApproximationInputs {
        homog: &ctx.homog,
        eff: &ctx.eff,
        outlet: &ctx.outlet,
        walls: &ctx.walls,
        model: sys,
    };
    let times: Vec<(usize, T)> = micro.samples.iter().map(|s| (s.step, s.t)).collect();
    let r = inputs.assemble(&cfg.approx, &setup, &times)?;
    let w = inputs.w_columns(&setup.grid, &times);
    let errors = energy_norms(&setup.grid, spec.eps(), &micro.samples, &r, &w)?;
    let adequacy = if cfg.adequacy.contains(&n) {
        let fine_setup = MicroSetup::new(&spec_for(sys, cfg, n, 2), &cfg.geom, &cfg.v0)?;
        let fine = solve_micro(&fine_setup, sys, &opts)?;
        let a = solution_norms(&micro)?.as_array();
        let b = solution_norms(&fine)?.as_array();
        let e = errors.as_array();
        let mut change = [0.0; 5];
        let mut passed = true;
        for c in 0..5 {
            change[c] = (b[c] - a[c]).abs();
            passed &= change[c] <= 0.25 * e[c];
        }
        Some(AdequacyCheck { n, change, passed })
    } else {
        None
    };
    Ok(SweepRow {
        n,
        eps: spec.eps().to_f64_lossy(),
        errors,
        adequacy,
        balance_residual: micro.max_balance_residual(),
        dirichlet_defect: micro.dirichlet_defect,
    })
}

/// Full ε-sweep over `cfg.n_list`.
pub fn run_sweep<T: Real>(sys: &ReactionSystem<T>, cfg: &SweepConfig<T>) -> Result<SweepReport> {
    let ctx = prepare_sweep(sys, cfg)?;
    let rows: Vec<Result<SweepRow>> = if cfg.serial {
        cfg.n_list.iter().map(|n| run_single(sys, cfg, &ctx, *n)).collect()
    } else {
        cfg.n_list.par_iter().map(|n| run_single(sys, cfg, &ctx, *n)).collect()
    };
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let failing_n: Vec<usize> = rows.iter().filter(|r| r.adequacy.is_some_and(|a| !a.passed)).map(|r| r.n).collect();
    Ok(SweepReport {
        slopes: fit_slopes(&rows),
        valid: failing_n.is_empty(),
        failing_n,
        rows,
        dt: ctx.dt.to_f64_lossy(),
        homog_dt: ctx.homog.grid.dt.to_f64_lossy(),
        v_hat: ctx.eff.v_hat.to_f64_lossy(),
        sample_stride: cfg.sample_stride,
    })
}
