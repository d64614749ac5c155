//! ε-resolved model on the rasterized micro domain: bulk reaction–diffusion,
//! fracture advection–diffusion with ε-scaled diffusion, wall and obstacle
//! flux laws, Dirichlet data at both fracture ends.

use rayon::prelude::*;

use crate::cell_solvers::{links, solve_potential, tight_tol, FaceField, InflowProfile};
use crate::error::{Error, Result};
use crate::geometry::{build_cell_grid, rasterize_micro_domain, CellGeometry, FaceClass, MaskedGrid, MicroDomainSpec, Region, WallSide};
use crate::linalg::{cg, CsrBuilder, CsrMatrix, KrylovOptions};
use crate::reactions::ReactionModel;
use crate::scalar::Real;

/// Courant limit of the explicit fracture advection.
pub const MICRO_CFL_LIMIT: f64 = 0.9;
/// Limit of dt times the reaction Lipschitz constant.
pub const REACTION_STABILITY_LIMIT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MicroOptions<T> {
    pub t_end: T,
    pub dt: T,
    /// Fields are stored every `sample_stride` steps and at the end.
    pub sample_stride: usize,
    pub serial: bool,
    /// Lipschitz bound of the reactions, for the stability check.
    pub lipschitz: T,
}

/// Role of a cell in the time march.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellRole {
    Inactive,
    Unknown,
    /// Fixed at zero (fracture inlet column, bulk outer boundary).
    ZeroDirichlet,
    /// Fixed at qℓ(t) (fracture outlet column).
    OutletDirichlet,
}

#[derive(Debug, Clone, Copy)]
struct WallFace<T> {
    bulk: usize,
    frac: usize,
    side: WallSide,
    len: T,
    x1: T,
    xi: (T, T),
}

#[derive(Debug, Clone, Copy)]
struct ObstacleFace<T> {
    frac: usize,
    len: T,
    x1: T,
    xi: (T, T),
}

/// Discretization data shared by all species and steps.
#[derive(Debug, Clone)]
pub struct MicroSetup<T> {
    pub spec: MicroDomainSpec<T>,
    pub grid: MaskedGrid<T>,
    /// Face velocities V(x/ε), zero outside the fracture.
    pub velocity: FaceField<T>,
    pub roles: Vec<CellRole>,
    walls: Vec<WallFace<T>>,
    obstacles: Vec<ObstacleFace<T>>,
}

/// Tiles the cell-grid velocity over the fracture rows of the micro grid.
pub fn tile_velocity<T: Real>(micro: &MaskedGrid<T>, spec: &MicroDomainSpec<T>, cell: &MaskedGrid<T>, vel: &FaceField<T>) -> FaceField<T> {
    let cpp = spec.cells_per_period;
    let nbm = spec.bulk_rows_minus;
    let nf = spec.cells_across;
    let mut v = FaceField::zeros(micro);
    for jf in 0..nf {
        let j = nbm + jf;
        for i in 0..=micro.nx {
            let f = micro.xface(i, j);
            if matches!(micro.xfaces[f], FaceClass::Interior | FaceClass::Inlet | FaceClass::Outlet) {
                let ic = if i == micro.nx { cpp } else { i % cpp };
                v.x[f] = vel.x[cell.xface(ic, jf)];
            }
        }
    }
    for jf in 1..nf {
        let j = nbm + jf;
        for i in 0..micro.nx {
            let f = micro.yface(i, j);
            if micro.yfaces[f] == FaceClass::Interior {
                v.y[f] = vel.y[cell.yface(i % cpp, jf)];
            }
        }
    }
    v
}

impl<T: Real> MicroSetup<T> {
    pub fn new(spec: &MicroDomainSpec<T>, geom: &CellGeometry<T>, v0: &InflowProfile<T>) -> Result<Self> {
        let grid = rasterize_micro_domain(spec, geom)?;
        let cell = build_cell_grid(&spec.period_geometry(geom))?;
        let pot = solve_potential(&cell, v0)?;
        let velocity = tile_velocity(&grid, spec, &cell, &pot.velocity);
        let eps = spec.eps();
        let (nx, ny) = (grid.nx, grid.ny);
        let mut roles = vec![CellRole::Inactive; grid.n_cells()];
        for (i, j) in grid.fluid_cells() {
            let c = grid.idx(i, j);
            roles[c] = match grid.regions[c] {
                Region::Fracture if i == 0 => CellRole::ZeroDirichlet,
                Region::Fracture if i == nx - 1 => CellRole::OutletDirichlet,
                Region::Fracture => CellRole::Unknown,
                Region::BulkPlus if i == 0 || i == nx - 1 || j == ny - 1 => CellRole::ZeroDirichlet,
                Region::BulkMinus if i == 0 || i == nx - 1 || j == 0 => CellRole::ZeroDirichlet,
                _ => CellRole::Unknown,
            };
        }
        let mut walls = Vec::new();
        for j in 1..ny {
            for i in 0..nx {
                let f = grid.yface(i, j);
                let side = match grid.yfaces[f] {
                    FaceClass::WallPlus => WallSide::Plus,
                    FaceClass::WallMinus => WallSide::Minus,
                    _ => continue,
                };
                let (lo, hi) = (grid.idx(i, j - 1), grid.idx(i, j));
                let (bulk, frac) = if grid.regions[lo] == Region::Fracture { (hi, lo) } else { (lo, hi) };
                let x1 = grid.xc(i);
                walls.push(WallFace {
                    bulk,
                    frac,
                    side,
                    len: grid.dx(i),
                    x1,
                    xi: (x1 / eps, grid.y_edges[j] / eps),
                });
            }
        }
        let mut obstacles = Vec::new();
        for j in 0..ny {
            for i in 0..=nx {
                if grid.xfaces[grid.xface(i, j)] == FaceClass::Obstacle {
                    let c = if i > 0 && grid.is_fluid(i - 1, j) { grid.idx(i - 1, j) } else { grid.idx(i, j) };
                    let x1 = grid.x_edges[i];
                    obstacles.push(ObstacleFace { frac: c, len: grid.dy(j), x1, xi: (x1 / eps, grid.yc(j) / eps) });
                }
            }
        }
        for j in 0..=ny {
            for i in 0..nx {
                if grid.yfaces[grid.yface(i, j)] == FaceClass::Obstacle {
                    let c = if j > 0 && grid.is_fluid(i, j - 1) { grid.idx(i, j - 1) } else { grid.idx(i, j) };
                    let x1 = grid.xc(i);
                    obstacles.push(ObstacleFace { frac: c, len: grid.dx(i), x1, xi: (x1 / eps, grid.y_edges[j] / eps) });
                }
            }
        }
        Ok(Self {
            spec: spec.clone(),
            grid,
            velocity,
            roles,
            walls,
            obstacles,
        })
    }

    /// dt · max over fracture cells of (total advective outflow / area).
    pub fn courant(&self, dt: T) -> T {
        let g = &self.grid;
        let mut worst = T::zero();
        for (i, j) in g.fluid_cells() {
            let c = g.idx(i, j);
            if g.regions[c] != Region::Fracture {
                continue;
            }
            let v = &self.velocity;
            let out = (v.x[g.xface(i + 1, j)]).max(T::zero()) * g.dy(j)
                + (-v.x[g.xface(i, j)]).max(T::zero()) * g.dy(j)
                + (v.y[g.yface(i, j + 1)]).max(T::zero()) * g.dx(i)
                + (-v.y[g.yface(i, j)]).max(T::zero()) * g.dx(i);
            worst = worst.max(out / g.area(i, j));
        }
        worst * dt
    }

    /// Largest dt meeting the advection and reaction limits.
    pub fn max_stable_dt(&self, lipschitz: T) -> T {
        let c = self.courant(T::one());
        let mut dt = if c > T::zero() { T::lit(MICRO_CFL_LIMIT) / c } else { T::infinity() };
        if lipschitz > T::zero() {
            dt = dt.min(T::lit(REACTION_STABILITY_LIMIT) / lipschitz);
        }
        dt
    }

    /// Largest |div V| over fracture cells whose faces are all fluid.
    pub fn max_velocity_divergence(&self) -> T {
        let g = &self.grid;
        let d = self.velocity.divergence(g);
        let mut m = T::zero();
        for (i, j) in g.fluid_cells() {
            let c = g.idx(i, j);
            if g.regions[c] == Region::Fracture && self.roles[c] == CellRole::Unknown {
                m = m.max(d[c].abs());
            }
        }
        m
    }

    fn diffusion<R: ReactionModel<T>>(&self, model: &R, k: usize, region: Region) -> T {
        match region {
            Region::BulkPlus => model.bulk_diffusion(WallSide::Plus, k),
            Region::BulkMinus => model.bulk_diffusion(WallSide::Minus, k),
            Region::Fracture => self.spec.eps() * model.fracture_diffusion(k),
        }
    }

    /// Net rate (mass per unit time) of every explicit term per cell at time t.
    fn explicit_terms<R: ReactionModel<T>>(&self, model: &R, k: usize, u: &[Vec<T>], t: T) -> Vec<T> {
        let g = &self.grid;
        let ns = u.len();
        let eps = self.spec.eps();
        let mut e = vec![T::zero(); g.n_cells()];
        let mut buf = vec![T::zero(); ns];
        let mut buf2 = vec![T::zero(); ns];
        // advection between fracture cells
        for l in links(g, false) {
            if g.regions[l.a] != Region::Fracture {
                continue;
            }
            let q = if l.horizontal { self.velocity.x[l.face] } else { self.velocity.y[l.face] } * l.len;
            let flux = if q > T::zero() { q * u[k][l.a] } else { q * u[k][l.b] };
            e[l.a] -= flux;
            e[l.b] += flux;
        }
        // bulk reactions and sources
        for (i, j) in g.fluid_cells() {
            let c = g.idx(i, j);
            let side = match g.regions[c] {
                Region::BulkPlus => WallSide::Plus,
                Region::BulkMinus => WallSide::Minus,
                Region::Fracture => continue,
            };
            for (kk, b) in buf.iter_mut().enumerate() {
                *b = u[kk][c];
            }
            let (x1, x2) = (g.xc(i), g.yc(j));
            e[c] += (model.bulk_rate(side, k, &buf, x1, x2, t) + model.bulk_source(side, k, x1, x2, t)) * g.area(i, j);
        }
        for w in &self.walls {
            for kk in 0..ns {
                buf[kk] = u[kk][w.bulk];
                buf2[kk] = u[kk][w.frac];
            }
            e[w.bulk] -= model.wall_bulk_flux(w.side, k, &buf, &buf2, w.xi, w.x1, t) * w.len;
            e[w.frac] -= eps * model.wall_frac_flux(w.side, k, &buf, &buf2, w.xi, w.x1, t) * w.len;
        }
        for o in &self.obstacles {
            for kk in 0..ns {
                buf2[kk] = u[kk][o.frac];
            }
            e[o.frac] -= eps * model.obstacle_flux(k, &buf2, o.xi, o.x1, t) * o.len;
        }
        e
    }
}

/// Implicit operator M/dt + K of one species on the unknown cells, with the
/// couplings to Dirichlet cells kept for the right-hand side.
struct SpeciesSystem<T> {
    matrix: CsrMatrix<T>,
    /// (unknown index, Dirichlet cell, coefficient)
    boundary: Vec<(usize, usize, T)>,
}

/// Stored fields at one time level.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroSample<T> {
    pub step: usize,
    pub t: T,
    /// [species][cell]
    pub fields: Vec<Vec<T>>,
}

#[derive(Debug, Clone)]
pub struct MicroSolution<T> {
    pub setup: MicroSetup<T>,
    pub dt: T,
    pub n_steps: usize,
    pub sample_stride: usize,
    pub samples: Vec<MicroSample<T>>,
    /// Largest relative flux-balance residual over species, per step.
    pub balance_residual: Vec<f64>,
    /// Largest deviation of the Dirichlet columns from their data.
    pub dirichlet_defect: f64,
    pub courant: T,
}

impl<T: Real> MicroSolution<T> {
    pub fn eps(&self) -> T {
        self.setup.spec.eps()
    }

    pub fn max_balance_residual(&self) -> f64 {
        self.balance_residual.iter().copied().fold(0.0, f64::max)
    }

    pub fn final_sample(&self) -> &MicroSample<T> {
        self.samples.last().expect("at least the initial sample")
    }
}

/// Marches the micro model from zero initial data to `opts.t_end`.
pub fn solve_micro<T: Real, R: ReactionModel<T>>(setup: &MicroSetup<T>, model: &R, opts: &MicroOptions<T>) -> Result<MicroSolution<T>> {
    let g = &setup.grid;
    let ns = model.n_species();
    let dt = opts.dt;
    if !(dt > T::zero()) || !(opts.t_end > T::zero()) {
        return Err(Error::config("solver.dt", "time step and final time must be positive"));
    }
    let steps_f = (opts.t_end / dt).round();
    if ((steps_f * dt - opts.t_end) / opts.t_end).abs() > T::lit(1e-9).max(T::epsilon() * T::lit(100.0)) {
        return Err(Error::config("solver.dt", format!("final time {} is not a multiple of dt {dt}", opts.t_end)));
    }
    let n_steps = steps_f.to_usize().unwrap_or(1).max(1);
    let courant = setup.courant(dt);
    if courant > T::lit(MICRO_CFL_LIMIT) {
        return Err(Error::config("solver.dt", format!("micro Courant number {courant} exceeds {MICRO_CFL_LIMIT}")));
    }
    if dt * opts.lipschitz > T::lit(REACTION_STABILITY_LIMIT) {
        return Err(Error::config(
            "solver.dt",
            format!("dt·Lip = {} exceeds {REACTION_STABILITY_LIMIT}", dt * opts.lipschitz),
        ));
    }
    // unknown numbering
    let mut of_cell = vec![usize::MAX; g.n_cells()];
    let mut unknowns = Vec::new();
    for (c, r) in setup.roles.iter().enumerate() {
        if *r == CellRole::Unknown {
            of_cell[c] = unknowns.len();
            unknowns.push(c);
        }
    }
    let n = unknowns.len();
    let lk = links(g, false);
    let systems: Vec<SpeciesSystem<T>> = (0..ns)
        .map(|k| {
            let mut b = CsrBuilder::new(n);
            let mut boundary = Vec::new();
            for (u, &c) in unknowns.iter().enumerate() {
                b.add(u, u, g.area(c % g.nx, c / g.nx) / dt);
            }
            for l in &lk {
                let d = setup.diffusion(model, k, g.regions[l.a]);
                let coef = d * l.len / l.dist;
                match (of_cell[l.a], of_cell[l.b]) {
                    (usize::MAX, usize::MAX) => {}
                    (a, usize::MAX) => {
                        b.add(a, a, coef);
                        boundary.push((a, l.b, coef));
                    }
                    (usize::MAX, c) => {
                        b.add(c, c, coef);
                        boundary.push((c, l.a, coef));
                    }
                    (a, c) => {
                        b.add(a, a, coef);
                        b.add(c, c, coef);
                        b.add(a, c, -coef);
                        b.add(c, a, -coef);
                    }
                }
            }
            SpeciesSystem { matrix: b.build(), boundary }
        })
        .collect();

    let set_dirichlet = |u: &mut [Vec<T>], t: T| -> f64 {
        let mut defect: f64 = 0.0;
        for k in 0..ns {
            let q = model.outlet_value(k, t);
            for (c, r) in setup.roles.iter().enumerate() {
                match r {
                    CellRole::ZeroDirichlet => u[k][c] = T::zero(),
                    CellRole::OutletDirichlet => u[k][c] = q,
                    _ => {}
                }
            }
            for (c, r) in setup.roles.iter().enumerate() {
                let want = match r {
                    CellRole::ZeroDirichlet => T::zero(),
                    CellRole::OutletDirichlet => q,
                    _ => continue,
                };
                defect = defect.max((u[k][c] - want).abs().to_f64_lossy());
            }
        }
        defect
    };

    let mut u: Vec<Vec<T>> = vec![vec![T::zero(); g.n_cells()]; ns];
    let mut sol = MicroSolution {
        setup: setup.clone(),
        dt,
        n_steps,
        sample_stride: opts.sample_stride.max(1),
        samples: vec![MicroSample { step: 0, t: T::zero(), fields: u.clone() }],
        balance_residual: Vec::with_capacity(n_steps),
        dirichlet_defect: 0.0,
        courant,
    };
    let krylov = KrylovOptions {
        rel_tol: tight_tol::<T>(),
        max_iter: 20 * n + 1000,
    };
    for step in 0..n_steps {
        let t = T::from_count(step) * dt;
        let t_new = T::from_count(step + 1) * dt;
        let mut next: Vec<Vec<T>> = u.clone();
        sol.dirichlet_defect = sol.dirichlet_defect.max(set_dirichlet(&mut next, t_new));
        let solve_one = |k: usize| -> Result<(Vec<T>, f64)> {
            let sys = &systems[k];
            let e = setup.explicit_terms(model, k, &u, t);
            let mut rhs = vec![T::zero(); n];
            let mut terms_abs = T::zero();
            let mut boundary_total = T::zero();
            for (ui, &c) in unknowns.iter().enumerate() {
                let a = g.area(c % g.nx, c / g.nx);
                rhs[ui] = a * u[k][c] / dt + e[c];
                terms_abs += e[c].abs();
                boundary_total += e[c];
            }
            for &(ui, c, coef) in &sys.boundary {
                rhs[ui] += coef * next[k][c];
            }
            let mut x: Vec<T> = unknowns.iter().map(|&c| u[k][c]).collect();
            cg(&sys.matrix, &rhs, &mut x, krylov, "micro diffusion step")?;
            let mut field = next[k].clone();
            for (ui, &c) in unknowns.iter().enumerate() {
                field[c] = x[ui];
            }
            // flux balance over the unknown cells
            let mut m_old = T::zero();
            let mut m_new = T::zero();
            for &c in &unknowns {
                let a = g.area(c % g.nx, c / g.nx);
                m_old += a * u[k][c];
                m_new += a * field[c];
            }
            for &(ui, c, coef) in &sys.boundary {
                let f = coef * (next[k][c] - x[ui]);
                boundary_total += f;
                terms_abs += f.abs();
            }
            let res = (m_new - m_old - dt * boundary_total).abs();
            let scale = m_old.abs().max(m_new.abs()).max(dt * terms_abs);
            let rel = if scale > T::zero() { (res / scale).to_f64_lossy() } else { 0.0 };
            Ok((field, rel))
        };
        let results: Vec<Result<(Vec<T>, f64)>> = if opts.serial {
            (0..ns).map(solve_one).collect()
        } else {
            (0..ns).into_par_iter().map(solve_one).collect()
        };
        let mut worst: f64 = 0.0;
        for (k, r) in results.into_iter().enumerate() {
            let (f, rel) = r?;
            next[k] = f;
            worst = worst.max(rel);
        }
        sol.balance_residual.push(worst);
        u = next;
        if (step + 1) % sol.sample_stride == 0 || step + 1 == n_steps {
            sol.samples.push(MicroSample {
                step: step + 1,
                t: t_new,
                fields: u.clone(),
            });
        }
    }
    Ok(sol)
}
