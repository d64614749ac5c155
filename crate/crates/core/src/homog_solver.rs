//! Homogenized model: two bulk reaction–diffusion layers coupled through
//! averaged interface fluxes to a first-order hyperbolic interface system,
//! solved by windowed Picard iteration.

use rayon::prelude::*;

use crate::cell_solvers::AveragedReactions;
use crate::error::{Error, Result};
use crate::geometry::WallSide;
use crate::linalg::BandedCholesky;
use crate::reactions::ReactionModel;
use crate::scalar::{smooth_step, Real};

/// Largest admissible Courant number of the interface scheme.
pub const CFL_LIMIT: f64 = 0.95;

pub const SIDES: [WallSide; 2] = [WallSide::Plus, WallSide::Minus];

/// Node grids of the two bulk rectangles and the interface, with a uniform
/// time step. Bulk rows are indexed by η = |x₂| ∈ [0, 𝔥±]; the interface
/// nodes are the bulk x-nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct HomogGrid<T> {
    pub ell: T,
    pub height_plus: T,
    pub height_minus: T,
    /// Number of x-intervals.
    pub m: usize,
    pub j_plus: usize,
    pub j_minus: usize,
    pub dt: T,
    pub n_steps: usize,
}

impl<T: Real> HomogGrid<T> {
    /// Rows are chosen so that Δη ≈ Δx₁; `t_end` must be a multiple of `dt`
    /// up to rounding.
    pub fn new(ell: T, height_plus: T, height_minus: T, m: usize, dt: T, t_end: T) -> Result<Self> {
        if m < 4 {
            return Err(Error::config("solver.homog_cells", format!("need at least 4 intervals, got {m}")));
        }
        if !(dt > T::zero()) || !(t_end > T::zero()) {
            return Err(Error::config("solver.dt", "time step and final time must be positive"));
        }
        let dx = ell / T::from_count(m);
        let rows = |h: T| ((h / dx).round().to_usize().unwrap_or(2)).max(2);
        let steps = (t_end / dt).round();
        if ((steps * dt - t_end) / t_end).abs() > T::lit(1e-9).max(T::epsilon() * T::lit(100.0)) {
            return Err(Error::config("solver.dt", format!("final time {t_end} is not a multiple of dt {dt}")));
        }
        Ok(Self {
            ell,
            height_plus,
            height_minus,
            m,
            j_plus: rows(height_plus),
            j_minus: rows(height_minus),
            dt,
            n_steps: steps.to_usize().unwrap_or(0).max(1),
        })
    }

    pub fn dx(&self) -> T {
        self.ell / T::from_count(self.m)
    }

    pub fn rows(&self, side: WallSide) -> usize {
        match side {
            WallSide::Plus => self.j_plus,
            WallSide::Minus => self.j_minus,
        }
    }

    pub fn height(&self, side: WallSide) -> T {
        match side {
            WallSide::Plus => self.height_plus,
            WallSide::Minus => self.height_minus,
        }
    }

    pub fn dy(&self, side: WallSide) -> T {
        self.height(side) / T::from_count(self.rows(side))
    }

    pub fn x(&self, i: usize) -> T {
        T::from_count(i) * self.dx()
    }

    pub fn time(&self, n: usize) -> T {
        T::from_count(n) * self.dt
    }

    pub fn t_end(&self) -> T {
        self.time(self.n_steps)
    }

    pub fn courant(&self, v_hat: T) -> T {
        v_hat * self.dt / self.dx()
    }

    pub fn check_cfl(&self, v_hat: T) -> Result<()> {
        let nu = self.courant(v_hat);
        if nu > T::lit(CFL_LIMIT) {
            return Err(Error::config(
                "solver.dt",
                format!("interface Courant number {nu} exceeds {CFL_LIMIT}; reduce dt or coarsen the interface grid"),
            ));
        }
        Ok(())
    }

    /// Number of nodes of one bulk field.
    pub fn bulk_len(&self, side: WallSide) -> usize {
        (self.m + 1) * (self.rows(side) + 1)
    }
}

/// Nodal bulk field, node (i, j) at index j·(m+1) + i with j counted from
/// the interface.
#[derive(Debug, Clone, PartialEq)]
pub struct BulkField<T> {
    pub values: Vec<T>,
}

impl<T: Real> BulkField<T> {
    pub fn zeros(grid: &HomogGrid<T>, side: WallSide) -> Self {
        Self {
            values: vec![T::zero(); grid.bulk_len(side)],
        }
    }

    #[inline]
    pub fn at(&self, grid: &HomogGrid<T>, i: usize, j: usize) -> T {
        self.values[j * (grid.m + 1) + i]
    }

    /// Interface row u(x₁ᵢ, 0).
    pub fn trace(&self, grid: &HomogGrid<T>) -> &[T] {
        &self.values[..grid.m + 1]
    }
}

/// Backward-Euler diffusion operator of one bulk layer and species:
/// homogeneous Dirichlet on the three outer sides, prescribed outgoing flux
/// D∂_ηu = g on the interface.
#[derive(Debug, Clone)]
pub struct BulkOperator<T> {
    side: WallSide,
    m: usize,
    rows: usize,
    dx: T,
    dy: T,
    dt: T,
    d: T,
    chol: BandedCholesky<T>,
}

impl<T: Real> BulkOperator<T> {
    pub fn new(grid: &HomogGrid<T>, side: WallSide, d: T) -> Result<Self> {
        if !(d > T::zero()) {
            return Err(Error::assumption("A1", format!("bulk diffusion must be positive, got {d}")));
        }
        let m = grid.m;
        let rows = grid.rows(side);
        let (dx, dy, dt) = (grid.dx(), grid.dy(side), grid.dt);
        let nxu = m - 1;
        let n = nxu * rows;
        let half = T::lit(0.5);
        let two = T::lit(2.0);
        let entry = |p: usize, q: usize| -> T {
            let (i, j) = (p % nxu, p / nxu);
            let wj = if j == 0 { half } else { T::one() };
            if p == q {
                wj * dx * dy / dt + d * (wj * dy / dx * two + dx / dy * if j == 0 { T::one() } else { two })
            } else if q + 1 == p && i > 0 {
                -d * wj * dy / dx
            } else if q + nxu == p {
                -d * dx / dy
            } else {
                T::zero()
            }
        };
        let chol = BandedCholesky::factor(n, nxu, entry, "bulk diffusion")?;
        Ok(Self { side, m, rows, dx, dy, dt, d, chol })
    }

    pub fn side(&self) -> WallSide {
        self.side
    }

    fn weight(&self, j: usize) -> T {
        if j == 0 {
            T::lit(0.5) * self.dx * self.dy
        } else {
            self.dx * self.dy
        }
    }

    /// One step: `source` holds F + 𝔣 at the nodes, `flux` the outgoing
    /// interface flux g at the x-nodes, both at the new time level.
    pub fn step(&self, u: &BulkField<T>, source: &[T], flux: &[T]) -> BulkField<T> {
        let nxu = self.m - 1;
        let mut b = vec![T::zero(); nxu * self.rows];
        for j in 0..self.rows {
            for i in 1..self.m {
                let node = j * (self.m + 1) + i;
                let mut r = self.weight(j) * (u.values[node] / self.dt + source[node]);
                if j == 0 {
                    r -= self.dx * flux[i];
                }
                b[j * nxu + i - 1] = r;
            }
        }
        self.chol.solve(&mut b);
        let mut out = vec![T::zero(); u.values.len()];
        for j in 0..self.rows {
            for i in 1..self.m {
                out[j * (self.m + 1) + i] = b[j * nxu + i - 1];
            }
        }
        BulkField { values: out }
    }

    /// Discrete mass Σ wⱼ Δx Δη u over the unknown nodes.
    pub fn mass(&self, u: &BulkField<T>) -> T {
        let mut s = T::zero();
        for j in 0..self.rows {
            for i in 1..self.m {
                s += self.weight(j) * u.values[j * (self.m + 1) + i];
            }
        }
        s
    }

    /// Diffusive loss through the Dirichlet sides: D Σ (K u) over all rows.
    pub fn dirichlet_loss(&self, u: &BulkField<T>) -> T {
        let w = self.m + 1;
        let half = T::lit(0.5);
        let mut s = T::zero();
        for j in 0..self.rows {
            let wj = if j == 0 { half } else { T::one() };
            for i in 1..self.m {
                let c = u.values[j * w + i];
                let xl = u.values[j * w + i - 1];
                let xr = u.values[j * w + i + 1];
                let up = u.values[(j + 1) * w + i];
                let mut k = wj * self.dy / self.dx * (T::lit(2.0) * c - xl - xr);
                if j == 0 {
                    k += self.dx / self.dy * (c - up);
                } else {
                    let dn = u.values[(j - 1) * w + i];
                    k += self.dx / self.dy * (T::lit(2.0) * c - up - dn);
                }
                s += k;
            }
        }
        self.d * s
    }

    /// Interface flux ∫g dx₁ as weighted by the scheme.
    pub fn interface_flux(&self, flux: &[T]) -> T {
        (1..self.m).map(|i| self.dx * flux[i]).sum()
    }

    /// Σ wⱼ Δx Δη s over unknown nodes.
    pub fn source_total(&self, source: &[T]) -> T {
        let mut s = T::zero();
        for j in 0..self.rows {
            for i in 1..self.m {
                s += self.weight(j) * source[j * (self.m + 1) + i];
            }
        }
        s
    }
}

/// w(x₁, t) = ∫ F̂(x₁ + v̂(τ - t), τ) dτ over the backward characteristic,
/// from max(0, t - x₁/v̂) to t, by the composite trapezoid rule with step
/// at most `dtau`.
pub fn characteristics_eval<T: Real>(fhat: impl Fn(T, T) -> T, v_hat: T, x1: T, t: T, dtau: T) -> T {
    let tau0 = (t - x1 / v_hat).max(T::zero());
    let len = t - tau0;
    if !(len > T::zero()) {
        return T::zero();
    }
    let n = (len / dtau).ceil().to_usize().unwrap_or(1).max(1);
    let h = len / T::from_count(n);
    let f = |tau: T| fhat(x1 + v_hat * (tau - t), tau);
    let mut s = (f(tau0) + f(t)) * T::lit(0.5);
    for q in 1..n {
        s += f(tau0 + h * T::from_count(q));
    }
    s * h
}

/// Explicit upwind step w ← w - ν(wᵢ - wᵢ₋₁) + dt·F̂ with w₀ = 0.
pub fn interface_step<T: Real>(w: &[T], fhat: &[T], nu: T, dt: T) -> Result<Vec<T>> {
    if nu > T::one() + T::epsilon() * T::lit(8.0) || nu < T::zero() {
        return Err(Error::config("solver.dt", format!("interface Courant number {nu} outside [0, 1]")));
    }
    let mut out = vec![T::zero(); w.len()];
    for i in 1..w.len() {
        out[i] = w[i] - nu * (w[i] - w[i - 1]) + dt * fhat[i];
    }
    Ok(out)
}

/// Starting iterate of each Picard window beyond the frozen initial state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitialIterate<T> {
    /// The window's initial state held constant in time.
    Hold,
    /// Hold plus a smooth bump of the given amplitude in every unknown.
    Bump(T),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardOptions<T> {
    /// Window length T₀; a single time step gives per-step lagging.
    pub window: T,
    pub tol: T,
    pub max_iter: usize,
    pub initial: InitialIterate<T>,
    /// Bulk fields are kept every `snapshot_stride` steps and at the end.
    pub snapshot_stride: usize,
    pub serial: bool,
}

impl<T: Real> PicardOptions<T> {
    pub fn for_final_time(t_end: T) -> Self {
        Self {
            window: t_end * T::lit(0.25),
            tol: T::lit(1e-8),
            max_iter: 50,
            initial: InitialIterate::Hold,
            snapshot_stride: 10,
            serial: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowDiagnostics {
    pub t_start: f64,
    pub t_end: f64,
    pub iterations: usize,
    /// W_n for n = 1, 2, ...
    pub w_history: Vec<f64>,
}

impl WindowDiagnostics {
    /// W_n / W_{n-1} for n ≥ 2.
    pub fn contraction_factors(&self) -> Vec<f64> {
        self.w_history.windows(2).map(|p| if p[0] > 0.0 { p[1] / p[0] } else { 0.0 }).collect()
    }
}

/// Bulk fields of both layers at one time level, indexed [side][species].
#[derive(Debug, Clone, PartialEq)]
pub struct HomogSnapshot<T> {
    pub step: usize,
    pub t: T,
    pub plus: Vec<BulkField<T>>,
    pub minus: Vec<BulkField<T>>,
}

impl<T: Real> HomogSnapshot<T> {
    pub fn field(&self, side: WallSide, k: usize) -> &BulkField<T> {
        match side {
            WallSide::Plus => &self.plus[k],
            WallSide::Minus => &self.minus[k],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomogSolution<T> {
    pub grid: HomogGrid<T>,
    pub v_hat: T,
    /// w[step][species][node]
    pub w: Vec<Vec<Vec<T>>>,
    /// Interface traces u±(x₁, 0) per step, species and node.
    pub trace_plus: Vec<Vec<Vec<T>>>,
    pub trace_minus: Vec<Vec<Vec<T>>>,
    pub snapshots: Vec<HomogSnapshot<T>>,
    pub windows: Vec<WindowDiagnostics>,
}

fn interp_nodes<T: Real>(vals: &[T], dx: T, x: T) -> T {
    let m = vals.len() - 1;
    let s = (x / dx).max(T::zero()).min(T::from_count(m));
    let i = s.floor().to_usize().unwrap_or(0).min(m - 1);
    let f = s - T::from_count(i);
    vals[i] * (T::one() - f) + vals[i + 1] * f
}

fn node_derivative<T: Real>(vals: &[T], dx: T) -> Vec<T> {
    let m = vals.len() - 1;
    let two = T::lit(2.0);
    (0..=m)
        .map(|i| {
            if i == 0 {
                (-T::lit(3.0) * vals[0] + T::lit(4.0) * vals[1] - vals[2]) / (two * dx)
            } else if i == m {
                (T::lit(3.0) * vals[m] - T::lit(4.0) * vals[m - 1] + vals[m - 2]) / (two * dx)
            } else {
                (vals[i + 1] - vals[i - 1]) / (two * dx)
            }
        })
        .collect()
}

impl<T: Real> HomogSolution<T> {
    pub fn n_species(&self) -> usize {
        self.w[0].len()
    }

    fn time_weights(&self, t: T) -> (usize, usize, T) {
        let s = (t / self.grid.dt).max(T::zero()).min(T::from_count(self.grid.n_steps));
        let n = s.floor().to_usize().unwrap_or(0).min(self.grid.n_steps.saturating_sub(1));
        let f = s - T::from_count(n);
        (n, (n + 1).min(self.grid.n_steps), f)
    }

    /// w₀ₖ(x₁, t), linear in space and time.
    pub fn w_at(&self, k: usize, x1: T, t: T) -> T {
        let (a, b, f) = self.time_weights(t);
        let dx = self.grid.dx();
        interp_nodes(&self.w[a][k], dx, x1) * (T::one() - f) + interp_nodes(&self.w[b][k], dx, x1) * f
    }

    /// ∂x₁w₀ₖ(x₁, t) from centred node differences, linear in space and time.
    pub fn dw_dx_at(&self, k: usize, x1: T, t: T) -> T {
        let (a, b, f) = self.time_weights(t);
        let dx = self.grid.dx();
        let da = node_derivative(&self.w[a][k], dx);
        let db = node_derivative(&self.w[b][k], dx);
        interp_nodes(&da, dx, x1) * (T::one() - f) + interp_nodes(&db, dx, x1) * f
    }

    /// w at the nodes of step n.
    pub fn w_nodes(&self, n: usize, k: usize) -> &[T] {
        &self.w[n][k]
    }

    pub fn snapshot_at_step(&self, step: usize) -> Option<&HomogSnapshot<T>> {
        self.snapshots.iter().find(|s| s.step == step)
    }

    /// u±ₖ at a physical point (x₂ signed) by bilinear interpolation.
    pub fn u_at(&self, snap: &HomogSnapshot<T>, side: WallSide, k: usize, x1: T, x2: T) -> T {
        let g = &self.grid;
        let f = snap.field(side, k);
        let rows = g.rows(side);
        let eta = x2.abs().min(g.height(side));
        let sy = (eta / g.dy(side)).min(T::from_count(rows));
        let j = sy.floor().to_usize().unwrap_or(0).min(rows - 1);
        let fy = sy - T::from_count(j);
        let w = g.m + 1;
        let lo = interp_nodes(&f.values[j * w..(j + 1) * w], g.dx(), x1);
        let hi = interp_nodes(&f.values[(j + 1) * w..(j + 2) * w], g.dx(), x1);
        lo * (T::one() - fy) + hi * fy
    }

    /// (∂x₁u±, ∂x₂u±) at (x₁, 0): centred differences along the interface
    /// row and second-order one-sided differences across it.
    pub fn interface_gradient(&self, snap: &HomogSnapshot<T>, side: WallSide, k: usize, x1: T) -> (T, T) {
        let g = &self.grid;
        let f = snap.field(side, k);
        let w = g.m + 1;
        let dx = g.dx();
        let d1 = node_derivative(&f.values[..w], dx);
        let dy = g.dy(side);
        let de: Vec<T> = (0..w)
            .map(|i| (-T::lit(3.0) * f.values[i] + T::lit(4.0) * f.values[w + i] - f.values[2 * w + i]) / (T::lit(2.0) * dy))
            .collect();
        let d2 = interp_nodes(&de, dx, x1);
        (interp_nodes(&d1, dx, x1), side.sign::<T>() * d2)
    }

    /// Maximum over windows of the final W_n.
    pub fn total_iterations(&self) -> usize {
        self.windows.iter().map(|w| w.iterations).sum()
    }
}

/// Per-window storage: [step][species] interface values and [step][pair]
/// bulk fields with pair = side·S + species.
struct WindowState<T> {
    bulk: Vec<Vec<BulkField<T>>>,
    w: Vec<Vec<Vec<T>>>,
}

fn pair_side(p: usize, ns: usize) -> (WallSide, usize) {
    (if p < ns { WallSide::Plus } else { WallSide::Minus }, p % ns)
}

/// Solves the homogenized problem on [0, T] by Picard iteration on
/// consecutive windows of length T₀.
pub fn picard_solve<T: Real, R: ReactionModel<T>>(
    model: &R,
    avg: &AveragedReactions<'_, T, R>,
    v_hat: T,
    grid: &HomogGrid<T>,
    opts: &PicardOptions<T>,
) -> Result<HomogSolution<T>> {
    if !(v_hat > T::zero()) {
        return Err(Error::assumption("A2", format!("effective velocity must be positive, got {v_hat}")));
    }
    grid.check_cfl(v_hat)?;
    if opts.max_iter == 0 || !(opts.tol > T::zero()) || !(opts.window > T::zero()) {
        return Err(Error::config("solver.picard", "window, tolerance and iteration limit must be positive"));
    }
    let ns = model.n_species();
    let np = 2 * ns;
    let m = grid.m;
    let nu = grid.courant(v_hat);
    let dt = grid.dt;
    let ops: Vec<BulkOperator<T>> = (0..np)
        .map(|p| {
            let (side, k) = pair_side(p, ns);
            BulkOperator::new(grid, side, model.bulk_diffusion(side, k))
        })
        .collect::<Result<_>>()?;
    let s_len = |side: WallSide| avg.wall_length(side);
    let xs: Vec<T> = (0..=m).map(|i| grid.x(i)).collect();

    let mut sol = HomogSolution {
        grid: grid.clone(),
        v_hat,
        w: vec![vec![vec![T::zero(); m + 1]; ns]],
        trace_plus: vec![vec![vec![T::zero(); m + 1]; ns]],
        trace_minus: vec![vec![vec![T::zero(); m + 1]; ns]],
        snapshots: Vec::new(),
        windows: Vec::new(),
    };
    let mut current_bulk: Vec<BulkField<T>> = (0..np).map(|p| BulkField::zeros(grid, pair_side(p, ns).0)).collect();
    let mut current_w: Vec<Vec<T>> = vec![vec![T::zero(); m + 1]; ns];
    let push_snapshot = |sol: &mut HomogSolution<T>, step: usize, bulk: &[BulkField<T>]| {
        sol.snapshots.push(HomogSnapshot {
            step,
            t: grid.time(step),
            plus: bulk[..ns].to_vec(),
            minus: bulk[ns..].to_vec(),
        });
    };
    push_snapshot(&mut sol, 0, &current_bulk);

    let win_steps = ((opts.window / dt).round().to_usize().unwrap_or(1)).max(1);
    let mut n0 = 0usize;
    while n0 < grid.n_steps {
        let n1 = (n0 + win_steps).min(grid.n_steps);
        let len = n1 - n0;
        // starting iterate
        let bump = |i: usize, j: usize, rows: usize| -> T {
            match opts.initial {
                InitialIterate::Hold => T::zero(),
                InitialIterate::Bump(a) => {
                    let s = T::from_count(i) / T::from_count(m);
                    let r = T::from_count(j) / T::from_count(rows.max(1));
                    a * smooth_step(s * T::lit(4.0)) * smooth_step((T::one() - s) * T::lit(4.0)) * (T::one() - r)
                }
            }
        };
        let mut prev = WindowState {
            bulk: (0..=len)
                .map(|q| {
                    (0..np)
                        .map(|p| {
                            let mut f = current_bulk[p].clone();
                            if q > 0 {
                                let side = pair_side(p, ns).0;
                                let rows = grid.rows(side);
                                for j in 0..rows {
                                    for i in 1..m {
                                        f.values[j * (m + 1) + i] += bump(i, j, rows);
                                    }
                                }
                            }
                            f
                        })
                        .collect()
                })
                .collect(),
            w: (0..=len)
                .map(|q| {
                    (0..ns)
                        .map(|k| {
                            let mut w = current_w[k].clone();
                            if q > 0 {
                                for i in 1..=m {
                                    w[i] += bump(i, 0, 1);
                                }
                            }
                            w
                        })
                        .collect()
                })
                .collect(),
        };
        let mut diag = WindowDiagnostics {
            t_start: grid.time(n0).to_f64_lossy(),
            t_end: grid.time(n1).to_f64_lossy(),
            iterations: 0,
            w_history: Vec::new(),
        };
        let mut converged = false;
        for _iter in 0..opts.max_iter {
            // (i) bulk layers with lagged nonlinearities and interface fluxes
            let march = |p: usize| -> Vec<BulkField<T>> {
                let (side, k) = pair_side(p, ns);
                let op = &ops[p];
                let rows = grid.rows(side);
                let dy = grid.dy(side);
                let sgn = side.sign::<T>();
                let mut out = Vec::with_capacity(len + 1);
                out.push(current_bulk[p].clone());
                let mut uvec = vec![T::zero(); ns];
                let mut wvec = vec![T::zero(); ns];
                for q in 0..len {
                    let t = grid.time(n0 + q + 1);
                    let lag = &prev.bulk[q + 1];
                    let mut src = vec![T::zero(); grid.bulk_len(side)];
                    for j in 0..rows {
                        let x2 = sgn * T::from_count(j) * dy;
                        for i in 1..m {
                            let node = j * (m + 1) + i;
                            for (kk, u) in uvec.iter_mut().enumerate() {
                                *u = lag[if side == WallSide::Plus { kk } else { ns + kk }].values[node];
                            }
                            src[node] = model.bulk_rate(side, k, &uvec, xs[i], x2, t) + model.bulk_source(side, k, xs[i], x2, t);
                        }
                    }
                    let mut flux = vec![T::zero(); m + 1];
                    for i in 1..m {
                        for kk in 0..ns {
                            uvec[kk] = lag[if side == WallSide::Plus { kk } else { ns + kk }].values[i];
                            wvec[kk] = prev.w[q + 1][kk][i];
                        }
                        flux[i] = s_len(side) * avg.upsilon_tilde(side, k, &uvec, &wvec, xs[i], t);
                    }
                    let next = op.step(&out[q], &src, &flux);
                    out.push(next);
                }
                out
            };
            let by_pair: Vec<Vec<BulkField<T>>> = if opts.serial {
                (0..np).map(march).collect()
            } else {
                (0..np).into_par_iter().map(march).collect()
            };
            let mut bulk_new: Vec<Vec<BulkField<T>>> = (0..=len).map(|_| Vec::with_capacity(np)).collect();
            for series in by_pair {
                for (q, f) in series.into_iter().enumerate() {
                    bulk_new[q].push(f);
                }
            }
            // (ii) interface with the new traces and the previous w
            let mut w_new: Vec<Vec<Vec<T>>> = Vec::with_capacity(len + 1);
            w_new.push(current_w.clone());
            let mut up = vec![T::zero(); ns];
            let mut um = vec![T::zero(); ns];
            let mut wl = vec![T::zero(); ns];
            for q in 0..len {
                let t = grid.time(n0 + q);
                let mut next = Vec::with_capacity(ns);
                for k in 0..ns {
                    let mut fh = vec![T::zero(); m + 1];
                    for i in 1..=m {
                        for kk in 0..ns {
                            up[kk] = bulk_new[q][kk].values[i];
                            um[kk] = bulk_new[q][ns + kk].values[i];
                            wl[kk] = prev.w[q][kk][i];
                        }
                        fh[i] = avg.f_hat(k, &up, &um, &wl, xs[i], t);
                    }
                    next.push(interface_step(&w_new[q][k], &fh, nu, dt)?);
                }
                w_new.push(next);
            }
            // W metric
            let mut wm = T::zero();
            for q in 1..=len {
                for k in 0..ns {
                    for i in 0..=m {
                        let d = (w_new[q][k][i] - prev.w[q][k][i]).abs()
                            + (bulk_new[q][k].values[i] - prev.bulk[q][k].values[i]).abs()
                            + (bulk_new[q][ns + k].values[i] - prev.bulk[q][ns + k].values[i]).abs();
                        wm = wm.max(d);
                    }
                }
            }
            diag.iterations += 1;
            diag.w_history.push(wm.to_f64_lossy());
            prev = WindowState { bulk: bulk_new, w: w_new };
            if !wm.is_finite() {
                break;
            }
            if wm <= opts.tol {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NonConvergence {
                t_start: diag.t_start,
                t_end: diag.t_end,
                iterations: diag.iterations,
                w_metric: diag.w_history.last().copied().unwrap_or(f64::NAN),
            });
        }
        for q in 1..=len {
            let step = n0 + q;
            sol.w.push(prev.w[q].clone());
            sol.trace_plus.push((0..ns).map(|k| prev.bulk[q][k].trace(grid).to_vec()).collect());
            sol.trace_minus.push((0..ns).map(|k| prev.bulk[q][ns + k].trace(grid).to_vec()).collect());
            if step % opts.snapshot_stride.max(1) == 0 || step == grid.n_steps {
                push_snapshot(&mut sol, step, &prev.bulk[q]);
            }
        }
        current_bulk = prev.bulk[len].clone();
        current_w = prev.w[len].clone();
        sol.windows.push(diag);
        n0 = n1;
    }
    Ok(sol)
}

/// W-metric distance between two solutions on the same grid.
pub fn w_distance<T: Real>(a: &HomogSolution<T>, b: &HomogSolution<T>) -> T {
    let mut d = T::zero();
    for n in 0..a.w.len().min(b.w.len()) {
        for k in 0..a.n_species() {
            for i in 0..a.w[n][k].len() {
                let v = (a.w[n][k][i] - b.w[n][k][i]).abs()
                    + (a.trace_plus[n][k][i] - b.trace_plus[n][k][i]).abs()
                    + (a.trace_minus[n][k][i] - b.trace_minus[n][k][i]).abs();
                d = d.max(v);
            }
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn characteristics_closed_forms() {
        let v = 1.3f64;
        for &(x, t) in &[(0.2, 0.1), (0.5, 0.9), (1.0, 0.4)] {
            let c = characteristics_eval(|_, _| 2.0, v, x, t, 1e-2);
            assert!((c - 2.0 * f64::min(t, x / v)).abs() < 1e-12);
            let l = characteristics_eval(|y, _| y, v, x, t, 1e-2);
            let exact = if t < x / v { x * t - v * t * t / 2.0 } else { x * x / (2.0 * v) };
            assert!((l - exact).abs() < 1e-12, "{l} vs {exact}");
            assert_eq!(characteristics_eval(|_, _| 0.0, v, x, t, 1e-2), 0.0);
        }
    }

    #[test]
    fn upwind_unit_courant_is_exact_transport() {
        let w: Vec<f64> = (0..6).map(|i| i as f64 * 0.1).collect();
        let f = vec![0.5; 6];
        let out = interface_step(&w, &f, 1.0, 0.1).unwrap();
        for i in 1..6 {
            assert!((out[i] - (w[i - 1] + 0.05)).abs() < 1e-15);
        }
        assert_eq!(out[0], 0.0);
        assert!(interface_step(&w, &f, 1.2, 0.1).is_err());
    }

    #[test]
    fn bulk_step_conserves_discrete_mass() {
        let g = HomogGrid::new(1.0f64, 0.5, 0.5, 16, 0.01, 0.1).unwrap();
        let op = BulkOperator::new(&g, WallSide::Plus, 0.7).unwrap();
        let mut u = BulkField::zeros(&g, WallSide::Plus);
        let src = vec![0.3; g.bulk_len(WallSide::Plus)];
        let flux = vec![1.0; g.m + 1];
        for _ in 0..5 {
            let next = op.step(&u, &src, &flux);
            let dm = op.mass(&next) - op.mass(&u);
            let pred = g.dt * (op.source_total(&src) - op.interface_flux(&flux) - op.dirichlet_loss(&next));
            assert!((dm - pred).abs() < 1e-13, "{dm} vs {pred}");
            u = next;
        }
    }
}
