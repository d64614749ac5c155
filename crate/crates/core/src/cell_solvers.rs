//! Periodic cell problems on Y₀: convective potential, first and second
//! correctors, effective coefficients and averaged interface reactions.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{boundary_measures, build_cell_grid, BoundaryMeasures, CellGeometry, FaceClass, MaskedGrid, WallSide};
use crate::linalg::{bicgstab, cg, CsrBuilder, KrylovOptions, SolveStats};
use crate::reactions::ReactionModel;
use crate::scalar::Real;

/// Inflow profile v₀(ξ₂) on [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub enum InflowProfile<T> {
    Constant(T),
    /// base + amp·cos(πξ₂)
    Cosine { base: T, amp: T },
    /// Uniform samples on [-1, 1], linearly interpolated.
    Tabulated(Vec<T>),
}

impl<T: Real> InflowProfile<T> {
    pub fn eval(&self, xi2: T) -> T {
        match self {
            InflowProfile::Constant(c) => *c,
            InflowProfile::Cosine { base, amp } => *base + *amp * (T::PI() * xi2).cos(),
            InflowProfile::Tabulated(s) => {
                let m = s.len() - 1;
                let pos = ((xi2 + T::one()) * T::lit(0.5)).max(T::zero()).min(T::one()) * T::from_count(m);
                let k = pos.floor().to_usize().unwrap_or(0).min(m - 1);
                let f = pos - T::from_count(k);
                s[k] * (T::one() - f) + s[k + 1] * f
            }
        }
    }

    /// Exact integral over [-1, 1].
    pub fn integral(&self) -> T {
        match self {
            InflowProfile::Constant(c) => *c * T::lit(2.0),
            InflowProfile::Cosine { base, .. } => *base * T::lit(2.0),
            InflowProfile::Tabulated(s) => {
                let m = s.len() - 1;
                let h = T::lit(2.0) / T::from_count(m);
                let inner: T = s[1..m].iter().copied().sum();
                h * (inner + (s[0] + s[m]) * T::lit(0.5))
            }
        }
    }

    fn samples(&self) -> Vec<T> {
        (0..=400).map(|i| T::from_count(i) / T::lit(200.0) - T::one()).map(|x| self.eval(x)).collect()
    }

    /// True when the profile vanishes identically.
    pub fn is_zero(&self) -> bool {
        self.samples().iter().all(|v| *v == T::zero())
    }

    /// Positivity check; the identically zero profile is accepted here and
    /// rejected downstream by [`effective_velocity`].
    pub fn validate(&self) -> Result<()> {
        if let InflowProfile::Tabulated(s) = self {
            if s.len() < 2 {
                return Err(Error::config("physics.inflow.samples", "need at least two samples"));
            }
            if let Some(v) = s.iter().find(|v| !(**v > T::zero())) {
                if !self.is_zero() {
                    return Err(Error::assumption("A2", format!("inflow profile must be positive, found sample {v}")));
                }
            }
        }
        if self.is_zero() {
            return Ok(());
        }
        if let Some(v) = self.samples().into_iter().find(|v| !(*v > T::zero())) {
            return Err(Error::assumption("A2", format!("inflow profile must be positive, found value {v}")));
        }
        Ok(())
    }
}

/// One value per cell of a masked grid; non-fluid cells hold zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CellField<T> {
    pub values: Vec<T>,
}

impl<T: Real> CellField<T> {
    pub fn zeros(grid: &MaskedGrid<T>) -> Self {
        Self {
            values: vec![T::zero(); grid.n_cells()],
        }
    }

    #[inline]
    pub fn at(&self, grid: &MaskedGrid<T>, i: usize, j: usize) -> T {
        self.values[grid.idx(i, j)]
    }

    /// Area-weighted average over fluid cells.
    pub fn mean(&self, grid: &MaskedGrid<T>) -> T {
        let mut s = T::zero();
        let mut a = T::zero();
        for (i, j) in grid.fluid_cells() {
            s += self.at(grid, i, j) * grid.area(i, j);
            a += grid.area(i, j);
        }
        s / a
    }

    pub fn max_abs(&self) -> T {
        self.values.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    fn subtract_mean(&mut self, grid: &MaskedGrid<T>) {
        let m = self.mean(grid);
        for (i, j) in grid.fluid_cells() {
            let k = grid.idx(i, j);
            self.values[k] -= m;
        }
    }
}

/// Normal velocity (in +x resp. +y direction) at every face.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceField<T> {
    pub x: Vec<T>,
    pub y: Vec<T>,
}

impl<T: Real> FaceField<T> {
    pub fn zeros(grid: &MaskedGrid<T>) -> Self {
        Self {
            x: vec![T::zero(); (grid.nx + 1) * grid.ny],
            y: vec![T::zero(); grid.nx * (grid.ny + 1)],
        }
    }

    /// Net outward flux per unit area of each fluid cell.
    pub fn divergence(&self, grid: &MaskedGrid<T>) -> Vec<T> {
        let mut d = vec![T::zero(); grid.n_cells()];
        for (i, j) in grid.fluid_cells() {
            let f = (self.x[grid.xface(i + 1, j)] - self.x[grid.xface(i, j)]) * grid.dy(j)
                + (self.y[grid.yface(i, j + 1)] - self.y[grid.yface(i, j)]) * grid.dx(i);
            d[grid.idx(i, j)] = f / grid.area(i, j);
        }
        d
    }

    pub fn max_abs_divergence(&self, grid: &MaskedGrid<T>) -> T {
        self.divergence(grid).iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Volume flux through each vertical grid line x = x_edges[i].
    pub fn cut_fluxes(&self, grid: &MaskedGrid<T>) -> Vec<T> {
        (0..=grid.nx)
            .map(|i| (0..grid.ny).map(|j| self.x[grid.xface(i, j)] * grid.dy(j)).sum())
            .collect()
    }

    /// Cell-centred velocity (average of opposite faces).
    pub fn cell_velocity(&self, grid: &MaskedGrid<T>, i: usize, j: usize) -> (T, T) {
        let h = T::lit(0.5);
        (
            (self.x[grid.xface(i, j)] + self.x[grid.xface(i + 1, j)]) * h,
            (self.y[grid.yface(i, j)] + self.y[grid.yface(i, j + 1)]) * h,
        )
    }

    pub fn max_abs(&self) -> T {
        self.x.iter().chain(&self.y).fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

/// Connection between two fluid cells through a face.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Link<T> {
    pub(crate) a: usize,
    pub(crate) b: usize,
    /// true for x-faces
    pub(crate) horizontal: bool,
    pub(crate) face: usize,
    pub(crate) len: T,
    pub(crate) dist: T,
}

pub(crate) fn links<T: Real>(grid: &MaskedGrid<T>, periodic_x: bool) -> Vec<Link<T>> {
    let mut out = Vec::new();
    let h = T::lit(0.5);
    for j in 0..grid.ny {
        for i in 1..grid.nx {
            let f = grid.xface(i, j);
            if grid.xfaces[f] == FaceClass::Interior {
                out.push(Link {
                    a: grid.idx(i - 1, j),
                    b: grid.idx(i, j),
                    horizontal: true,
                    face: f,
                    len: grid.dy(j),
                    dist: (grid.dx(i - 1) + grid.dx(i)) * h,
                });
            }
        }
        if periodic_x && grid.is_fluid(0, j) && grid.is_fluid(grid.nx - 1, j) {
            out.push(Link {
                a: grid.idx(grid.nx - 1, j),
                b: grid.idx(0, j),
                horizontal: true,
                face: grid.xface(0, j),
                len: grid.dy(j),
                dist: (grid.dx(grid.nx - 1) + grid.dx(0)) * h,
            });
        }
    }
    for j in 1..grid.ny {
        for i in 0..grid.nx {
            let f = grid.yface(i, j);
            if grid.yfaces[f] == FaceClass::Interior {
                out.push(Link {
                    a: grid.idx(i, j - 1),
                    b: grid.idx(i, j),
                    horizontal: false,
                    face: f,
                    len: grid.dx(i),
                    dist: (grid.dy(j - 1) + grid.dy(j)) * h,
                });
            }
        }
    }
    out
}

/// Compact numbering of fluid cells.
pub(crate) struct Numbering {
    pub(crate) of_cell: Vec<usize>,
    pub(crate) cells: Vec<usize>,
}

impl Numbering {
    pub(crate) fn new<T: Real>(grid: &MaskedGrid<T>) -> Self {
        let mut of_cell = vec![usize::MAX; grid.n_cells()];
        let mut cells = Vec::new();
        for (i, j) in grid.fluid_cells() {
            let c = grid.idx(i, j);
            of_cell[c] = cells.len();
            cells.push(c);
        }
        Self { of_cell, cells }
    }
}

pub(crate) fn tight_tol<T: Real>() -> T {
    T::epsilon() * T::lit(500.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PotentialSolution<T> {
    pub p: CellField<T>,
    pub velocity: FaceField<T>,
    pub stats: SolveStats,
}

/// Solves Δp = 0 in Y₀ with ∂ξ₁p = v₀ on both vertical edges, zero flux on
/// walls and obstacles and zero mean; returns p and its face gradient.
pub fn solve_potential<T: Real>(grid: &MaskedGrid<T>, v0: &InflowProfile<T>) -> Result<PotentialSolution<T>> {
    v0.validate()?;
    let num = Numbering::new(grid);
    let n = num.cells.len();
    let lk = links(grid, false);
    let mut rhs = vec![T::zero(); n];
    for j in 0..grid.ny {
        let v = v0.eval(grid.yc(j));
        if grid.xfaces[grid.xface(0, j)] == FaceClass::Inlet {
            rhs[num.of_cell[grid.idx(0, j)]] -= v * grid.dy(j);
        }
        if grid.xfaces[grid.xface(grid.nx, j)] == FaceClass::Outlet {
            rhs[num.of_cell[grid.idx(grid.nx - 1, j)]] += v * grid.dy(j);
        }
    }
    let pin = 0usize;
    let mut b = CsrBuilder::new(n);
    for l in &lk {
        let (a, c) = (num.of_cell[l.a], num.of_cell[l.b]);
        let k = l.len / l.dist;
        if a != pin {
            b.add(a, a, k);
            if c != pin {
                b.add(a, c, -k);
            }
        }
        if c != pin {
            b.add(c, c, k);
            if a != pin {
                b.add(c, a, -k);
            }
        }
    }
    b.set_identity_row(pin);
    rhs[pin] = T::zero();
    let a = b.build();
    let mut x = vec![T::zero(); n];
    let opts = KrylovOptions {
        rel_tol: tight_tol::<T>(),
        max_iter: 50 * n + 1000,
    };
    let stats = cg(&a, &rhs, &mut x, opts, "potential")?;
    let mut p = CellField::zeros(grid);
    for (u, &c) in num.cells.iter().enumerate() {
        p.values[c] = x[u];
    }
    p.subtract_mean(grid);
    let mut vel = FaceField::zeros(grid);
    for l in &lk {
        let g = (p.values[l.b] - p.values[l.a]) / l.dist;
        if l.horizontal {
            vel.x[l.face] = g;
        } else {
            vel.y[l.face] = g;
        }
    }
    for j in 0..grid.ny {
        let v = v0.eval(grid.yc(j));
        for i in [0, grid.nx] {
            let f = grid.xface(i, j);
            if matches!(grid.xfaces[f], FaceClass::Inlet | FaceClass::Outlet) {
                vel.x[f] = v;
            }
        }
    }
    Ok(PotentialSolution { p, velocity: vel, stats })
}

/// ⟨v₁⟩ over Y₀ with cell velocities averaged from face values.
pub fn effective_velocity<T: Real>(vel: &FaceField<T>, grid: &MaskedGrid<T>) -> Result<T> {
    let mut s = T::zero();
    for (i, j) in grid.fluid_cells() {
        s += vel.cell_velocity(grid, i, j).0 * grid.area(i, j);
    }
    let v_hat = s / grid.fluid_area();
    if !(v_hat > T::zero()) {
        return Err(Error::assumption("A2", format!("effective velocity must be positive, got {v_hat}")));
    }
    Ok(v_hat)
}

/// Constant diagonal diffusion tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diffusion<T> {
    pub d11: T,
    pub d22: T,
}

impl<T: Real> Diffusion<T> {
    pub fn isotropic(d: T) -> Self {
        Self { d11: d, d22: d }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrectorOrder {
    First,
    Second,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectorSolution<T> {
    pub field: CellField<T>,
    /// Σ of the assembled right-hand side, which must vanish for the
    /// singular periodic problem to be solvable.
    pub solvability_residual: T,
    pub stats: SolveStats,
}

pub const SOLVABILITY_TOL: f64 = 1e-8;

/// Largest cell Péclet number max|V|·h/d over interior faces.
pub fn cell_peclet<T: Real>(grid: &MaskedGrid<T>, vel: &FaceField<T>, diff: Diffusion<T>) -> T {
    let mut pe = T::zero();
    for l in links(grid, true) {
        let (v, d) = if l.horizontal {
            (vel.x[l.face], diff.d11)
        } else {
            (vel.y[l.face], diff.d22)
        };
        pe = pe.max(v.abs() * l.dist / d);
    }
    pe
}

/// Green–Gauss ∂ξ₁ of a cell field; on non-periodic boundary faces the face
/// value is extrapolated with the prescribed outward normal derivative
/// `-(g_x(cell) · n₁)`.
fn x_gradient<T: Real>(field: &CellField<T>, grid: &MaskedGrid<T>, g_x: impl Fn(usize) -> T) -> Vec<T> {
    let h = T::lit(0.5);
    let mut out = vec![T::zero(); grid.n_cells()];
    let nx = grid.nx;
    for (i, j) in grid.fluid_cells() {
        let c = grid.idx(i, j);
        let dx = grid.dx(i);
        let face_val = |nb: Option<usize>, n1: T| match nb {
            Some(k) => (field.values[c] + field.values[k]) * h,
            None => field.values[c] + dx * h * (-g_x(c) * n1),
        };
        let left_nb = {
            let f = grid.xfaces[grid.xface(i, j)];
            if f == FaceClass::Interior {
                Some(grid.idx(i - 1, j))
            } else if f == FaceClass::Inlet && grid.is_fluid(nx - 1, j) {
                Some(grid.idx(nx - 1, j))
            } else {
                None
            }
        };
        let right_nb = {
            let f = grid.xfaces[grid.xface(i + 1, j)];
            if f == FaceClass::Interior {
                Some(grid.idx(i + 1, j))
            } else if f == FaceClass::Outlet && grid.is_fluid(0, j) {
                Some(grid.idx(0, j))
            } else {
                None
            }
        };
        out[c] = (face_val(right_nb, T::one()) - face_val(left_nb, -T::one())) / dx;
    }
    out
}

/// d̂₁₁ = ⟨d₁₁ (1 + ∂ξ₁N₁)⟩ over Y₀.
pub fn effective_diffusion<T: Real>(n1: &CellField<T>, diff: Diffusion<T>, grid: &MaskedGrid<T>) -> Result<T> {
    let g = x_gradient(n1, grid, |_| T::one());
    let mut s = T::zero();
    for (i, j) in grid.fluid_cells() {
        s += diff.d11 * (T::one() + g[grid.idx(i, j)]) * grid.area(i, j);
    }
    let d = s / grid.fluid_area();
    if !(d > T::zero()) {
        return Err(Error::Consistency(format!("effective diffusion not positive: {d}")));
    }
    Ok(d)
}

/// Solves -∇·(D∇N) + ∇·(VN) = -f₀ + ∇·G... in flux form: the total flux
/// D∇N + G has zero normal component on walls and obstacles, N is 1-periodic
/// in ξ₁ and has zero mean.
///
/// First order: f₀ = v₁ - v̂, G = (d₁₁, 0).
/// Second order: f₀ = d̂₁₁ - d₁₁ - d₁₁∂ξ₁N₁, G = (d₁₁N₁, 0).
pub fn solve_corrector<T: Real>(
    grid: &MaskedGrid<T>,
    diff: Diffusion<T>,
    vel: &FaceField<T>,
    order: CorrectorOrder,
    n1: Option<&CellField<T>>,
) -> Result<CorrectorSolution<T>> {
    if !(diff.d11 > T::zero() && diff.d22 > T::zero()) {
        return Err(Error::assumption("A1", "diffusion tensor must be positive definite"));
    }
    let pe = cell_peclet(grid, vel, diff);
    if pe > T::lit(2.0) {
        return Err(Error::Resolution(format!(
            "cell Peclet number {pe} exceeds 2; refine the cell grid"
        )));
    }
    let num = Numbering::new(grid);
    let n = num.cells.len();
    let lk = links(grid, true);
    let half = T::lit(0.5);

    // source f₀ per cell and G_x per link
    let mut f0 = vec![T::zero(); grid.n_cells()];
    let gx_link: Box<dyn Fn(&Link<T>) -> T> = match order {
        CorrectorOrder::First => {
            let v_hat = effective_velocity(vel, grid)?;
            for (i, j) in grid.fluid_cells() {
                f0[grid.idx(i, j)] = vel.cell_velocity(grid, i, j).0 - v_hat;
            }
            Box::new(move |_l: &Link<T>| diff.d11)
        }
        CorrectorOrder::Second => {
            let n1 = n1.ok_or_else(|| Error::Consistency("second corrector requires the first".into()))?;
            let d_hat = effective_diffusion(n1, diff, grid)?;
            let g = x_gradient(n1, grid, |_| T::one());
            for (i, j) in grid.fluid_cells() {
                let c = grid.idx(i, j);
                f0[c] = d_hat - diff.d11 - diff.d11 * g[c];
            }
            let vals = n1.values.clone();
            Box::new(move |l: &Link<T>| diff.d11 * (vals[l.a] + vals[l.b]) * half)
        }
    };

    let mut rhs = vec![T::zero(); n];
    for &c in &num.cells {
        let i = c % grid.nx;
        let j = c / grid.nx;
        rhs[num.of_cell[c]] = -f0[c] * grid.area(i, j);
    }
    let mut b = CsrBuilder::new(n);
    for l in &lk {
        let (a, c) = (num.of_cell[l.a], num.of_cell[l.b]);
        let (d, v) = if l.horizontal {
            (diff.d11, vel.x[l.face])
        } else {
            (diff.d22, vel.y[l.face])
        };
        let k = d * l.len / l.dist;
        let q = v * l.len * half;
        b.add(a, a, k + q);
        b.add(a, c, -k + q);
        b.add(c, c, k - q);
        b.add(c, a, -k - q);
        if l.horizontal {
            let g = gx_link(l) * l.len;
            rhs[a] += g;
            rhs[c] -= g;
        }
    }
    let solvability_residual: T = rhs.iter().copied().sum();
    if solvability_residual.abs().to_f64_lossy() > SOLVABILITY_TOL {
        return Err(Error::Consistency(format!(
            "corrector right-hand side violates the solvability condition (residual {solvability_residual:e})"
        )));
    }
    let pin = 0usize;
    b.set_identity_row(pin);
    rhs[pin] = T::zero();
    let a = b.build();
    let mut x = vec![T::zero(); n];
    let ctx = match order {
        CorrectorOrder::First => "first corrector",
        CorrectorOrder::Second => "second corrector",
    };
    let stats = bicgstab(&a, &rhs, &mut x, KrylovOptions { rel_tol: T::default_solver_tol(), max_iter: 20 * n + 1000 }, ctx)?;
    let mut field = CellField::zeros(grid);
    for (u, &c) in num.cells.iter().enumerate() {
        field.values[c] = x[u];
    }
    field.subtract_mean(grid);
    Ok(CorrectorSolution {
        field,
        solvability_residual,
        stats,
    })
}

/// Effective coefficients and cell correctors for every species.
#[derive(Debug, Clone)]
pub struct EffectiveData<T> {
    pub grid: MaskedGrid<T>,
    pub measures: BoundaryMeasures<T>,
    pub inflow: InflowProfile<T>,
    pub potential: PotentialSolution<T>,
    pub v_hat: T,
    pub d11_hat: Vec<T>,
    pub n1: Vec<CellField<T>>,
    pub n2: Vec<CellField<T>>,
}

/// Runs the full cell pipeline; species are solved concurrently unless
/// `serial` is set.
pub fn compute_effective_data<T: Real>(
    geom: &CellGeometry<T>,
    v0: &InflowProfile<T>,
    diffusions: &[Diffusion<T>],
    serial: bool,
) -> Result<EffectiveData<T>> {
    let grid = build_cell_grid(geom)?;
    let measures = boundary_measures(&grid);
    let potential = solve_potential(&grid, v0)?;
    let v_hat = effective_velocity(&potential.velocity, &grid)?;
    let solve_one = |d: &Diffusion<T>| -> Result<(T, CellField<T>, CellField<T>)> {
        let n1 = solve_corrector(&grid, *d, &potential.velocity, CorrectorOrder::First, None)?.field;
        let dh = effective_diffusion(&n1, *d, &grid)?;
        let n2 = solve_corrector(&grid, *d, &potential.velocity, CorrectorOrder::Second, Some(&n1))?.field;
        Ok((dh, n1, n2))
    };
    let results: Vec<Result<_>> = if serial {
        diffusions.iter().map(solve_one).collect()
    } else {
        diffusions.par_iter().map(solve_one).collect()
    };
    let mut d11_hat = Vec::new();
    let mut n1s = Vec::new();
    let mut n2s = Vec::new();
    for r in results {
        let (d, a, b) = r?;
        d11_hat.push(d);
        n1s.push(a);
        n2s.push(b);
    }
    Ok(EffectiveData {
        grid,
        measures,
        inflow: v0.clone(),
        potential,
        v_hat,
        d11_hat,
        n1: n1s,
        n2: n2s,
    })
}

/// Face-midpoint quadrature node on a boundary part of Y₀.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryNode<T> {
    pub xi: (T, T),
    pub len: T,
}

/// Averaged interface functionals Φ̂±, Ψ̂, Υ̃± and F̂ of a reaction model.
pub struct AveragedReactions<'a, T, R> {
    pub model: &'a R,
    pub measures: BoundaryMeasures<T>,
    pub s_plus: Vec<BoundaryNode<T>>,
    pub s_minus: Vec<BoundaryNode<T>>,
    pub obstacle: Vec<BoundaryNode<T>>,
}

/// Collects the quadrature nodes of the classified boundary faces.
pub fn averaged_reactions<'a, T: Real, R: ReactionModel<T>>(grid: &MaskedGrid<T>, model: &'a R) -> AveragedReactions<'a, T, R> {
    let mut s_plus = Vec::new();
    let mut s_minus = Vec::new();
    let mut obstacle = Vec::new();
    let mut push = |c: FaceClass, node: BoundaryNode<T>| match c {
        FaceClass::WallPlus => s_plus.push(node),
        FaceClass::WallMinus => s_minus.push(node),
        FaceClass::Obstacle => obstacle.push(node),
        _ => {}
    };
    for j in 0..grid.ny {
        for i in 0..=grid.nx {
            push(
                grid.xfaces[grid.xface(i, j)],
                BoundaryNode {
                    xi: (grid.x_edges[i], grid.yc(j)),
                    len: grid.dy(j),
                },
            );
        }
    }
    for j in 0..=grid.ny {
        for i in 0..grid.nx {
            push(
                grid.yfaces[grid.yface(i, j)],
                BoundaryNode {
                    xi: (grid.xc(i), grid.y_edges[j]),
                    len: grid.dx(i),
                },
            );
        }
    }
    AveragedReactions {
        model,
        measures: boundary_measures(grid),
        s_plus,
        s_minus,
        obstacle,
    }
}

impl<'a, T: Real, R: ReactionModel<T>> AveragedReactions<'a, T, R> {
    fn nodes(&self, side: WallSide) -> &[BoundaryNode<T>] {
        match side {
            WallSide::Plus => &self.s_plus,
            WallSide::Minus => &self.s_minus,
        }
    }

    pub fn wall_length(&self, side: WallSide) -> T {
        match side {
            WallSide::Plus => self.measures.s_plus,
            WallSide::Minus => self.measures.s_minus,
        }
    }

    /// Φ̂± = (1/|Y₀|) ∮_{S±} Φ± dl.
    pub fn phi_hat(&self, side: WallSide, k: usize, u: &[T], w: &[T], x1: T, t: T) -> T {
        let s: T = self
            .nodes(side)
            .iter()
            .map(|n| self.model.wall_frac_flux(side, k, u, w, n.xi, x1, t) * n.len)
            .sum();
        s / self.measures.y0
    }

    /// Ψ̂ = (1/|Y₀|) ∮_{∂T₀} Ψ dl.
    pub fn psi_hat(&self, k: usize, w: &[T], x1: T, t: T) -> T {
        let s: T = self
            .obstacle
            .iter()
            .map(|n| self.model.obstacle_flux(k, w, n.xi, x1, t) * n.len)
            .sum();
        s / self.measures.y0
    }

    /// Υ̃± = (1/|S±|) ∮_{S±} Υ± dl.
    pub fn upsilon_tilde(&self, side: WallSide, k: usize, u: &[T], w: &[T], x1: T, t: T) -> T {
        let s: T = self
            .nodes(side)
            .iter()
            .map(|n| self.model.wall_bulk_flux(side, k, u, w, n.xi, x1, t) * n.len)
            .sum();
        s / self.wall_length(side)
    }

    /// F̂ = -Φ̂⁺ - Φ̂⁻ - Ψ̂.
    pub fn f_hat(&self, k: usize, u_plus: &[T], u_minus: &[T], w: &[T], x1: T, t: T) -> T {
        -self.phi_hat(WallSide::Plus, k, u_plus, w, x1, t)
            - self.phi_hat(WallSide::Minus, k, u_minus, w, x1, t)
            - self.psi_hat(k, w, x1, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rect;

    fn flat(n: usize) -> MaskedGrid<f64> {
        build_cell_grid(&CellGeometry::flat(n, n)).unwrap()
    }

    #[test]
    fn shear_flow_potential() {
        let g = flat(16);
        let sol = solve_potential(&g, &InflowProfile::Constant(1.0)).unwrap();
        for (i, j) in g.fluid_cells() {
            let p = sol.p.at(&g, i, j);
            assert!((p - (g.xc(i) - 0.5)).abs() < 1e-10);
        }
        assert!(sol.velocity.x.iter().all(|v| (v - 1.0).abs() < 1e-10));
        assert!(sol.velocity.y.iter().all(|v| v.abs() < 1e-10));
        assert!((effective_velocity(&sol.velocity, &g).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_inflow_gives_zero_potential() {
        let g = flat(8);
        let sol = solve_potential(&g, &InflowProfile::Constant(0.0)).unwrap();
        assert_eq!(sol.p.max_abs(), 0.0);
        assert_eq!(sol.velocity.max_abs(), 0.0);
        assert!(matches!(
            effective_velocity(&sol.velocity, &g),
            Err(Error::Assumption { assumption: "A2", .. })
        ));
    }

    #[test]
    fn negative_inflow_rejected() {
        let g = flat(8);
        let v0 = InflowProfile::Cosine { base: 0.2, amp: 0.5 };
        assert!(matches!(solve_potential(&g, &v0), Err(Error::Assumption { .. })));
    }

    #[test]
    fn shear_flow_correctors_vanish() {
        let g = flat(16);
        let sol = solve_potential(&g, &InflowProfile::Constant(1.0)).unwrap();
        let d = Diffusion { d11: 0.7, d22: 0.4 };
        let n1 = solve_corrector(&g, d, &sol.velocity, CorrectorOrder::First, None).unwrap();
        assert!(n1.field.max_abs() < 1e-10);
        let n2 = solve_corrector(&g, d, &sol.velocity, CorrectorOrder::Second, Some(&n1.field)).unwrap();
        assert!(n2.field.max_abs() < 1e-10);
        assert!((effective_diffusion(&n1.field, d, &g).unwrap() - 0.7).abs() < 1e-10);
    }

    #[test]
    fn obstacle_corrector_is_mean_zero_and_solvable() {
        let geom = CellGeometry::<f64>::flat(16, 16).with_obstacle(Rect::new(0.25, 0.75, -0.25, 0.25));
        let g = build_cell_grid(&geom).unwrap();
        let sol = solve_potential(&g, &InflowProfile::Constant(1.0)).unwrap();
        let d = Diffusion::isotropic(1.0);
        let n1 = solve_corrector(&g, d, &sol.velocity, CorrectorOrder::First, None).unwrap();
        assert!(n1.solvability_residual.abs() < 1e-8);
        assert!(n1.field.mean(&g).abs() < 1e-12);
        assert!(n1.field.max_abs() > 1e-3);
        let n2 = solve_corrector(&g, d, &sol.velocity, CorrectorOrder::Second, Some(&n1.field)).unwrap();
        assert!(n2.solvability_residual.abs() < 1e-8);
        assert!(n2.field.mean(&g).abs() < 1e-12);
    }

    #[test]
    fn high_peclet_rejected() {
        let g = flat(8);
        let sol = solve_potential(&g, &InflowProfile::Constant(1.0)).unwrap();
        let r = solve_corrector(&g, Diffusion::isotropic(0.05), &sol.velocity, CorrectorOrder::First, None);
        assert!(matches!(r, Err(Error::Resolution(_))));
    }
}
