//! Boundary-layer problems: wall correctors Z₁, Z₂ above a (possibly rough)
//! wall and the outlet layers Π₀, Π₁ on the perforated semi-strip.

use crate::cell_solvers::{links, tight_tol, Diffusion, FaceField, Numbering};
use crate::error::{Error, Result};
use crate::geometry::{build_wall_strip_grid, tile_cell_grid, CellGeometry, FaceClass, MaskedGrid, WallSide};
use crate::linalg::{bicgstab, cg, CsrBuilder, KrylovOptions, SolveStats};
use crate::scalar::{linear_fit, smooth_step, Real};

/// Tolerance of the maximum-principle and monotonicity checks.
pub const PRINCIPLE_TOL: f64 = 1e-8;
/// Truncation sensitivity above which a warning is recorded.
pub const TRUNCATION_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WallCorrector {
    Z1,
    Z2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerOrder {
    Zero,
    One,
}

/// Advective flux of the outlet layer discretization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Advection {
    #[default]
    Centered,
    Upwind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StripKind {
    Wall { side: WallSide, which: WallCorrector },
    Outlet { order: LayerOrder },
}

/// Solution of a boundary-layer problem on its truncated strip.
#[derive(Debug, Clone)]
pub struct StripField<T> {
    pub kind: StripKind,
    pub grid: MaskedGrid<T>,
    pub values: Vec<T>,
    /// Strip height (wall correctors) or number of periods (outlet layers).
    pub truncation: T,
    /// Far-field constant of Z₂ - ξ₂.
    pub c0: Option<T>,
    /// Slice positions (height above the wall, or m for ζ₁ = -m) and the
    /// slice maxima measured there.
    pub slice_pos: Vec<T>,
    pub slice_max: Vec<T>,
    /// Least-squares slope of ln(slice max) against slice position.
    pub decay_slope: Option<f64>,
    pub fit_residual: f64,
    /// a₁ and -ln of the fitted slope (outlet layers only).
    pub gamma: Option<T>,
    pub delta0: Option<f64>,
    /// max |value(L) - value(2L)| on the common domain.
    pub truncation_sensitivity: Option<T>,
    pub warnings: Vec<String>,
    pub stats: Option<SolveStats>,
}

impl<T: Real> StripField<T> {
    fn locate(&self, z1: T, z2: T) -> Option<usize> {
        let g = &self.grid;
        let find = |edges: &[T], v: T| -> Option<usize> {
            let n = edges.len() - 1;
            if v < edges[0] || v > edges[n] {
                return None;
            }
            let k = edges.partition_point(|e| *e <= v);
            Some(k.saturating_sub(1).min(n - 1))
        };
        let i = find(&g.x_edges, z1)?;
        let j = find(&g.y_edges, z2)?;
        Some(g.idx(i, j))
    }

    /// Piecewise-constant value in the strip's own coordinates; `None`
    /// outside the grid or in a non-fluid cell.
    pub fn lookup(&self, z1: T, z2: T) -> Option<T> {
        let c = self.locate(z1, z2)?;
        (self.grid.cells[c] == crate::geometry::CellClass::Fluid).then(|| self.values[c])
    }

    fn wall_value(&self, xi1: T, xi2_up: T) -> T {
        let which = match self.kind {
            StripKind::Wall { which, .. } => which,
            _ => unreachable!(),
        };
        let g = &self.grid;
        let top = g.y_edges[g.ny];
        if xi2_up >= top {
            return match which {
                WallCorrector::Z1 => T::zero(),
                WallCorrector::Z2 => xi2_up + self.c0.unwrap_or(T::zero()),
            };
        }
        let x = xi1 - xi1.floor();
        if let Some(v) = self.lookup(x, xi2_up) {
            return v;
        }
        // below the rasterized wall: nearest fluid cell of the column
        let i = (g.x_edges.partition_point(|e| *e <= x)).saturating_sub(1).min(g.nx - 1);
        for j in 0..g.ny {
            if g.is_fluid(i, j) {
                return self.values[g.idx(i, j)];
            }
        }
        T::zero()
    }

    /// Z±(ξ₁, ξ₂) with ξ₂ = (x₂ ∓ ε)/ε; the minus-side field is stored in
    /// reflected orientation.
    pub fn eval_wall(&self, xi1: T, xi2: T) -> T {
        match self.kind {
            StripKind::Wall { side: WallSide::Plus, .. } => self.wall_value(xi1, xi2),
            StripKind::Wall { side: WallSide::Minus, which } => {
                let v = self.wall_value(xi1, -xi2);
                match which {
                    WallCorrector::Z1 => v,
                    WallCorrector::Z2 => -v,
                }
            }
            _ => panic!("eval_wall on an outlet layer"),
        }
    }

    /// Π(ζ₁, ζ₂); zero left of the truncation and inside obstacles.
    pub fn eval_outlet(&self, z1: T, z2: T) -> T {
        let g = &self.grid;
        if z1 >= T::zero() {
            return match self.kind {
                StripKind::Outlet { order: LayerOrder::Zero } => T::one(),
                _ => T::zero(),
            };
        }
        if z1 < g.x_edges[0] {
            return T::zero();
        }
        let z2 = z2.max(g.y_edges[0]).min(g.y_edges[g.ny]);
        self.lookup(z1, z2).unwrap_or(T::zero())
    }

    pub fn max_abs(&self) -> T {
        self.values.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// max |Z(ξ₁, ξ₂) + Z(1 - ξ₁, ξ₂)| over mirrored fluid cell pairs.
    pub fn oddness_defect(&self) -> T {
        let g = &self.grid;
        let mut d = T::zero();
        for (i, j) in g.fluid_cells() {
            let m = g.nx - 1 - i;
            if g.is_fluid(m, j) {
                d = d.max((self.values[g.idx(i, j)] + self.values[g.idx(m, j)]).abs());
            }
        }
        d
    }
}

fn profile_for<T: Real>(geom: &CellGeometry<T>, side: WallSide) -> &crate::geometry::WallProfile<T> {
    match side {
        WallSide::Plus => &geom.h_plus,
        WallSide::Minus => &geom.h_minus,
    }
}

/// Outward x-normal of a wall x-face relative to its fluid cell, and that cell.
fn xface_owner<T: Real>(g: &MaskedGrid<T>, i: usize, j: usize) -> (usize, T) {
    if i > 0 && g.is_fluid(i - 1, j) {
        (g.idx(i - 1, j), T::one())
    } else {
        (g.idx(i, j), -T::one())
    }
}

fn yface_owner<T: Real>(g: &MaskedGrid<T>, i: usize, j: usize) -> (usize, T) {
    if j > 0 && g.is_fluid(i, j - 1) {
        (g.idx(i, j - 1), T::one())
    } else {
        (g.idx(i, j), -T::one())
    }
}

/// Wall faces as (owner cell, length, ν₁, half distance to the centre).
fn wall_faces<T: Real>(g: &MaskedGrid<T>) -> Vec<(usize, T, T, T)> {
    let mut out = Vec::new();
    let h = T::lit(0.5);
    for j in 0..g.ny {
        for i in 0..=g.nx {
            if g.xfaces[g.xface(i, j)] == FaceClass::WallPlus {
                let (c, n1) = xface_owner(g, i, j);
                out.push((c, g.dy(j), n1, g.dx(c % g.nx) * h));
            }
        }
    }
    for j in 0..=g.ny {
        for i in 0..g.nx {
            if g.yfaces[g.yface(i, j)] == FaceClass::WallPlus {
                let (c, _) = yface_owner(g, i, j);
                out.push((c, g.dx(i), T::zero(), g.dy(c / g.nx) * h));
            }
        }
    }
    out
}

fn wall_solve<T: Real>(geom: &CellGeometry<T>, side: WallSide, which: WallCorrector, height: T) -> Result<(MaskedGrid<T>, Vec<T>, Option<SolveStats>)> {
    let prof = profile_for(geom, side);
    let g = build_wall_strip_grid(geom, prof, height)?;
    if which == WallCorrector::Z1 && prof.is_flat() {
        let n = g.n_cells();
        return Ok((g, vec![T::zero(); n], None));
    }
    let num = Numbering::new(&g);
    let n = num.cells.len();
    let lk = links(&g, true);
    let walls = wall_faces(&g);
    let mut rhs = vec![T::zero(); n];
    let mut b = CsrBuilder::new(n);
    match which {
        WallCorrector::Z1 => {
            for l in &lk {
                let (a, c) = (num.of_cell[l.a], num.of_cell[l.b]);
                let k = l.len / l.dist;
                b.add(a, a, k);
                b.add(a, c, -k);
                b.add(c, c, k);
                b.add(c, a, -k);
            }
            for i in 0..g.nx {
                let f = g.yface(i, g.ny);
                if g.yfaces[f] == FaceClass::OuterDirichlet {
                    let c = num.of_cell[g.idx(i, g.ny - 1)];
                    b.add(c, c, g.dx(i) / (g.dy(g.ny - 1) * T::lit(0.5)));
                }
            }
            for &(c, len, n1, _) in &walls {
                rhs[num.of_cell[c]] += -n1 * len;
            }
            let a = b.build();
            let mut x = vec![T::zero(); n];
            let stats = cg(&a, &rhs, &mut x, KrylovOptions { rel_tol: tight_tol::<T>().max(T::default_solver_tol() * T::lit(1e-2)), max_iter: 50 * n + 1000 }, "wall corrector Z1")?;
            let mut vals = vec![T::zero(); g.n_cells()];
            for (u, &c) in num.cells.iter().enumerate() {
                vals[c] = x[u];
            }
            Ok((g, vals, Some(stats)))
        }
        WallCorrector::Z2 => {
            let s_len: T = walls.iter().map(|w| w.1).sum();
            let b2 = -T::one() / s_len;
            let hmax = prof.max();
            // lifted part ξ₂χ₊(ξ₂) of the linear growth
            let lift: Vec<T> = (0..g.n_cells())
                .map(|c| {
                    let y = g.yc(c / g.nx);
                    y * smooth_step((y - T::lit(2.0) * hmax) / hmax)
                })
                .collect();
            for &(c, len, _, _) in &walls {
                rhs[num.of_cell[c]] += b2 * len;
            }
            for i in 0..g.nx {
                if g.yfaces[g.yface(i, g.ny)] == FaceClass::OuterDirichlet {
                    rhs[num.of_cell[g.idx(i, g.ny - 1)]] += g.dx(i);
                }
            }
            let pin = 0usize;
            for l in &lk {
                let (a, c) = (num.of_cell[l.a], num.of_cell[l.b]);
                let k = l.len / l.dist;
                let flux = k * (lift[l.a] - lift[l.b]);
                rhs[a] -= flux;
                rhs[c] += flux;
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
            let resid: T = rhs.iter().copied().sum();
            if resid.abs().to_f64_lossy() > crate::cell_solvers::SOLVABILITY_TOL {
                return Err(Error::Consistency(format!("wall corrector Z2 data not compatible (residual {resid:e})")));
            }
            b.set_identity_row(pin);
            rhs[pin] = T::zero();
            let a = b.build();
            let mut x = vec![T::zero(); n];
            let stats = cg(&a, &rhs, &mut x, KrylovOptions { rel_tol: tight_tol::<T>().max(T::default_solver_tol() * T::lit(1e-2)), max_iter: 50 * n + 1000 }, "wall corrector Z2")?;
            let mut vals = vec![T::zero(); g.n_cells()];
            for (u, &c) in num.cells.iter().enumerate() {
                vals[c] = x[u] + lift[c];
            }
            // gauge: zero average of the face values on the wall
            let mut s = T::zero();
            for &(c, len, _, half) in &walls {
                s += (vals[c] + half * b2) * len;
            }
            let shift = s / s_len;
            for &c in &num.cells {
                vals[c] -= shift;
            }
            Ok((g, vals, Some(stats)))
        }
    }
}

/// Solves Z₁ or Z₂ above the `side` wall of `geom`, truncated at ξ₂ = L
/// (default 6·max h). Z₁ has zero value at the truncation edge; Z₂ has
/// unit normal derivative there and is normalized to zero wall average.
pub fn solve_wall_corrector<T: Real>(geom: &CellGeometry<T>, side: WallSide, which: WallCorrector, height: Option<T>) -> Result<StripField<T>> {
    let prof = profile_for(geom, side);
    let hmax = prof.max();
    let l = height.unwrap_or(T::lit(6.0) * hmax);
    if l < T::lit(4.0) * hmax {
        return Err(Error::config("layer.wall_height", format!("truncation height {l} below 4·max h = {}", T::lit(4.0) * hmax)));
    }
    let (g, vals, stats) = wall_solve(geom, side, which, l)?;
    let (g2, vals2, _) = wall_solve(geom, side, which, l * T::lit(2.0))?;
    let mut sens = T::zero();
    for (i, j) in g.fluid_cells() {
        sens = sens.max((vals[g.idx(i, j)] - vals2[g2.idx(i, j)]).abs());
    }
    let mut f = StripField {
        kind: StripKind::Wall { side, which },
        grid: g,
        values: vals,
        truncation: l,
        c0: None,
        slice_pos: Vec::new(),
        slice_max: Vec::new(),
        decay_slope: None,
        fit_residual: 0.0,
        gamma: None,
        delta0: None,
        truncation_sensitivity: Some(sens),
        warnings: Vec::new(),
        stats,
    };
    let g = &f.grid;
    let wall_top = hmax - T::one();
    if which == WallCorrector::Z2 {
        let rows = (g.ny / 8).max(1);
        let mut s = T::zero();
        let mut a = T::zero();
        for j in g.ny - rows..g.ny {
            for i in 0..g.nx {
                if g.is_fluid(i, j) {
                    s += (f.values[g.idx(i, j)] - g.yc(j)) * g.area(i, j);
                    a += g.area(i, j);
                }
            }
        }
        f.c0 = Some(s / a);
    }
    let c0 = f.c0.unwrap_or(T::zero());
    for j in 0..g.ny {
        let y = g.yc(j);
        if y <= wall_top {
            continue;
        }
        let m = (0..g.nx)
            .filter(|&i| g.is_fluid(i, j))
            .map(|i| match which {
                WallCorrector::Z1 => f.values[g.idx(i, j)].abs(),
                WallCorrector::Z2 => (f.values[g.idx(i, j)] - y - c0).abs(),
            })
            .fold(T::zero(), |a, b| a.max(b));
        f.slice_pos.push(y - wall_top);
        f.slice_max.push(m);
    }
    let mid = (l - wall_top) * T::lit(0.5);
    let (xs, ys): (Vec<f64>, Vec<f64>) = f
        .slice_pos
        .iter()
        .zip(&f.slice_max)
        .filter(|(p, m)| **p <= mid && m.to_f64_lossy() > 1e-13)
        .map(|(p, m)| (p.to_f64_lossy(), m.to_f64_lossy().ln()))
        .unzip();
    if let Some((b, _, r)) = linear_fit(&xs, &ys) {
        f.decay_slope = Some(b);
        f.fit_residual = r;
    }
    if sens.to_f64_lossy() > TRUNCATION_TOL {
        f.warnings.push(format!("wall corrector truncation sensitivity {sens:e} exceeds {TRUNCATION_TOL:e}"));
    }
    Ok(f)
}

/// Options of the outlet-layer solve.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OutletLayerOptions {
    /// Number of periods kept; `None` picks max(8, ⌈6/δ₀⌉) from a pre-solve.
    pub periods: Option<usize>,
    pub advection: Advection,
}

pub const MAX_OUTLET_PERIODS: usize = 64;

fn tiled_velocity<T: Real>(cell: &MaskedGrid<T>, vel: &FaceField<T>, g: &MaskedGrid<T>) -> FaceField<T> {
    let n1 = cell.nx;
    let mut v = FaceField::zeros(g);
    for j in 0..g.ny {
        for i in 0..=g.nx {
            let ic = if i == g.nx { n1 } else { i % n1 };
            v.x[g.xface(i, j)] = vel.x[cell.xface(ic, j)];
        }
    }
    for j in 0..=g.ny {
        for i in 0..g.nx {
            v.y[g.yface(i, j)] = vel.y[cell.yface(i % n1, j)];
        }
    }
    v
}

/// Solves L_ζΠ = f on `periods` periods with Π = `right` at ζ₁ = 0 and
/// Π = 0 at ζ₁ = -periods.
fn outlet_solve<T: Real>(
    cell: &MaskedGrid<T>,
    diff: Diffusion<T>,
    vel: &FaceField<T>,
    periods: usize,
    advection: Advection,
    source: Option<&[T]>,
    right: T,
) -> Result<(MaskedGrid<T>, Vec<T>, SolveStats)> {
    let g = tile_cell_grid(cell, periods);
    let v = tiled_velocity(cell, vel, &g);
    let num = Numbering::new(&g);
    let n = num.cells.len();
    let half = T::lit(0.5);
    let mut b = CsrBuilder::new(n);
    let mut rhs = vec![T::zero(); n];
    if let Some(f) = source {
        for &c in &num.cells {
            rhs[num.of_cell[c]] = f[c] * g.area(c % g.nx, c / g.nx);
        }
    }
    for l in links(&g, false) {
        let (a, c) = (num.of_cell[l.a], num.of_cell[l.b]);
        let (d, vn) = if l.horizontal { (diff.d11, v.x[l.face]) } else { (diff.d22, v.y[l.face]) };
        let k = d * l.len / l.dist;
        let q = vn * l.len;
        let (wa, wb) = match advection {
            Advection::Centered => (q * half, q * half),
            Advection::Upwind => {
                if q > T::zero() {
                    (q, T::zero())
                } else {
                    (T::zero(), q)
                }
            }
        };
        b.add(a, a, k + wa);
        b.add(a, c, -k + wb);
        b.add(c, c, k - wb);
        b.add(c, a, -k - wa);
    }
    for j in 0..g.ny {
        for (i, value, sign) in [(0usize, T::zero(), -T::one()), (g.nx, right, T::one())] {
            let f = g.xface(i, j);
            if !matches!(g.xfaces[f], FaceClass::Inlet | FaceClass::Outlet) {
                continue;
            }
            let ci = if i == 0 { 0 } else { g.nx - 1 };
            let c = num.of_cell[g.idx(ci, j)];
            let k = diff.d11 * g.dy(j) / (g.dx(ci) * half);
            let q = v.x[f] * sign * g.dy(j);
            b.add(c, c, k);
            rhs[c] += k * value;
            match advection {
                Advection::Centered => rhs[c] -= q * value,
                Advection::Upwind => {
                    if q > T::zero() {
                        b.add(c, c, q);
                    } else {
                        rhs[c] -= q * value;
                    }
                }
            }
        }
    }
    let a = b.build();
    let mut x = vec![T::zero(); n];
    let stats = bicgstab(&a, &rhs, &mut x, KrylovOptions { rel_tol: T::default_solver_tol(), max_iter: 20 * n + 1000 }, "outlet layer")?;
    let mut vals = vec![T::zero(); g.n_cells()];
    for (u, &c) in num.cells.iter().enumerate() {
        vals[c] = x[u];
    }
    Ok((g, vals, stats))
}

/// Maximum over the vertical line ζ₁ = -m of the face-interpolated values,
/// for m = 0..=periods.
fn slice_maxima<T: Real>(g: &MaskedGrid<T>, vals: &[T], periods: usize, right: T) -> Vec<T> {
    let n1 = g.nx / periods;
    let mut out = vec![right.abs()];
    for m in 1..periods {
        let k = (periods - m) * n1;
        let mut a = T::zero();
        for j in 0..g.ny {
            if g.is_fluid(k - 1, j) && g.is_fluid(k, j) {
                a = a.max(((vals[g.idx(k - 1, j)] + vals[g.idx(k, j)]) * T::lit(0.5)).abs());
            }
        }
        out.push(a);
    }
    out.push(T::zero());
    out
}

/// Solves the unit-datum outlet layer (order zero) or the order-one layer
/// with right side -Π₀ and zero datum, on the grid of `cell` tiled to the
/// left. Order zero also checks the maximum principle, slice monotonicity
/// and monotonicity in the truncation length.
pub fn solve_outlet_layer<T: Real>(
    cell: &MaskedGrid<T>,
    diff: Diffusion<T>,
    vel: &FaceField<T>,
    order: LayerOrder,
    opts: OutletLayerOptions,
    pi0: Option<&StripField<T>>,
) -> Result<StripField<T>> {
    if !(diff.d11 > T::zero() && diff.d22 > T::zero()) {
        return Err(Error::assumption("A1", "diffusion tensor must be positive definite"));
    }
    let pe = crate::cell_solvers::cell_peclet(cell, vel, diff);
    if opts.advection == Advection::Centered && pe > T::lit(2.0) {
        return Err(Error::Resolution(format!("cell Peclet number {pe} exceeds 2 in the outlet layer; refine or use upwind advection")));
    }
    let tol = T::lit(PRINCIPLE_TOL);
    let mut warnings = Vec::new();
    match order {
        LayerOrder::Zero => {
            let periods = match opts.periods {
                Some(p) if p >= 2 => p,
                Some(p) => return Err(Error::config("layer.periods", format!("need at least 2 periods, got {p}"))),
                None => {
                    let (g, v, _) = outlet_solve(cell, diff, vel, 8, opts.advection, None, T::one())?;
                    let a = slice_maxima(&g, &v, 8, T::one());
                    let d = fit_decay(&a, 8).map(|(d, _)| d).unwrap_or(1.0);
                    let want = (6.0 / d.max(1e-12)).ceil() as usize;
                    if want > MAX_OUTLET_PERIODS {
                        warnings.push(format!("outlet layer decays slowly (rate {d:.3e}); truncated at {MAX_OUTLET_PERIODS} periods"));
                    }
                    want.clamp(8, MAX_OUTLET_PERIODS)
                }
            };
            let (g, vals, stats) = outlet_solve(cell, diff, vel, periods, opts.advection, None, T::one())?;
            for (i, j) in g.fluid_cells() {
                let v = vals[g.idx(i, j)];
                if v < -tol || v > T::one() + tol {
                    return Err(Error::Invariant(format!(
                        "outlet layer violates the maximum principle: value {v:e} at cell ({i}, {j})"
                    )));
                }
            }
            let a = slice_maxima(&g, &vals, periods, T::one());
            for m in 0..periods {
                if a[m + 1] > a[m] + tol {
                    return Err(Error::Invariant(format!(
                        "outlet layer slice maxima increase: a_{} = {:e} > a_{} = {:e}",
                        m + 1,
                        a[m + 1],
                        m,
                        a[m]
                    )));
                }
            }
            // Π_N ≤ Π_{N+1} and the L vs 2L sensitivity, aligned at ζ₁ = 0
            let n1 = cell.nx;
            let compare = |p2: usize| -> Result<(T, T)> {
                let (g2, v2, _) = outlet_solve(cell, diff, vel, p2, opts.advection, None, T::one())?;
                let off = (p2 - periods) * n1;
                let mut worst_drop = T::zero();
                let mut diff_max = T::zero();
                for (i, j) in g.fluid_cells() {
                    let d = v2[g2.idx(i + off, j)] - vals[g.idx(i, j)];
                    worst_drop = worst_drop.max(-d);
                    diff_max = diff_max.max(d.abs());
                }
                Ok((worst_drop, diff_max))
            };
            let (drop, _) = compare(periods + 1)?;
            if drop > tol {
                return Err(Error::Invariant(format!("outlet layer not monotone in the truncation length (drop {drop:e})")));
            }
            let (_, sens) = compare(2 * periods)?;
            if sens.to_f64_lossy() > TRUNCATION_TOL {
                warnings.push(format!("outlet layer truncation sensitivity {sens:e} exceeds {TRUNCATION_TOL:e}"));
            }
            let gamma = a[1];
            let fit = fit_decay(&a, periods);
            let slope = decay_slope(&a, periods);
            Ok(StripField {
                kind: StripKind::Outlet { order },
                grid: g,
                values: vals,
                truncation: T::from_count(periods),
                c0: None,
                slice_pos: (0..=periods).map(T::from_count).collect(),
                slice_max: a,
                decay_slope: slope,
                fit_residual: fit.map(|f| f.1).unwrap_or(0.0),
                gamma: Some(gamma),
                delta0: fit.map(|f| f.0),
                truncation_sensitivity: Some(sens),
                warnings,
                stats: Some(stats),
            })
        }
        LayerOrder::One => {
            let pi0 = pi0.ok_or_else(|| Error::Consistency("order-one outlet layer requires the order-zero layer".into()))?;
            if pi0.kind != (StripKind::Outlet { order: LayerOrder::Zero }) || pi0.grid.nx % cell.nx != 0 || pi0.grid.ny != cell.ny {
                return Err(Error::Consistency("order-zero layer does not match the cell grid".into()));
            }
            let periods = pi0.grid.nx / cell.nx;
            let src: Vec<T> = pi0.values.iter().map(|v| -*v).collect();
            let (g, vals, stats) = outlet_solve(cell, diff, vel, periods, opts.advection, Some(&src), T::zero())?;
            let src2: Vec<T> = {
                // Π₀ padded with zeros on the extra periods
                let g2 = tile_cell_grid(cell, 2 * periods);
                let off = periods * cell.nx;
                let mut s = vec![T::zero(); g2.n_cells()];
                for (i, j) in g.fluid_cells() {
                    s[g2.idx(i + off, j)] = src[g.idx(i, j)];
                }
                s
            };
            let (g2, v2, _) = outlet_solve(cell, diff, vel, 2 * periods, opts.advection, Some(&src2), T::zero())?;
            let off = periods * cell.nx;
            let mut sens = T::zero();
            for (i, j) in g.fluid_cells() {
                sens = sens.max((v2[g2.idx(i + off, j)] - vals[g.idx(i, j)]).abs());
            }
            let a = slice_maxima(&g, &vals, periods, T::zero());
            let slope = decay_slope(&a, periods);
            Ok(StripField {
                kind: StripKind::Outlet { order },
                grid: g,
                values: vals,
                truncation: T::from_count(periods),
                c0: None,
                slice_pos: (0..=periods).map(T::from_count).collect(),
                slice_max: a,
                decay_slope: slope,
                fit_residual: 0.0,
                gamma: None,
                delta0: None,
                truncation_sensitivity: Some(sens),
                warnings,
                stats: Some(stats),
            })
        }
    }
}

/// δ₀ = -(slope of ln a_m) over m in 1..=max(2, N/2), with the rms residual.
fn fit_decay<T: Real>(a: &[T], periods: usize) -> Option<(f64, f64)> {
    let hi = (periods / 2).max(2);
    let (xs, ys): (Vec<f64>, Vec<f64>) = (1..=hi)
        .filter(|&m| a[m].to_f64_lossy() > 0.0)
        .map(|m| (m as f64, a[m].to_f64_lossy().ln()))
        .unzip();
    linear_fit(&xs, &ys).map(|(b, _, r)| (-b, r))
}

/// Slope of ln a_m over m in 2..=N-2.
fn decay_slope<T: Real>(a: &[T], periods: usize) -> Option<f64> {
    if periods < 4 {
        return None;
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = (2..=periods - 2)
        .filter(|&m| a[m].to_f64_lossy() > 0.0)
        .map(|m| (m as f64, a[m].to_f64_lossy().ln()))
        .unzip();
    linear_fit(&xs, &ys).map(|f| f.0)
}

/// Unit-datum outlet layers of one species.
#[derive(Debug, Clone)]
pub struct OutletLayers<T> {
    pub pi0: StripField<T>,
    pub pi1: StripField<T>,
}

pub fn solve_outlet_layers<T: Real>(cell: &MaskedGrid<T>, diff: Diffusion<T>, vel: &FaceField<T>, opts: OutletLayerOptions) -> Result<OutletLayers<T>> {
    let pi0 = solve_outlet_layer(cell, diff, vel, LayerOrder::Zero, opts, None)?;
    let pi1 = solve_outlet_layer(cell, diff, vel, LayerOrder::One, opts, Some(&pi0))?;
    Ok(OutletLayers { pi0, pi1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell_solvers::{solve_potential, InflowProfile};
    use crate::geometry::{build_cell_grid, WallProfile};

    #[test]
    fn flat_wall_correctors_closed_form() {
        let geom = CellGeometry::<f64>::flat(16, 16);
        let z1 = solve_wall_corrector(&geom, WallSide::Plus, WallCorrector::Z1, None).unwrap();
        assert_eq!(z1.max_abs(), 0.0);
        let z2 = solve_wall_corrector(&geom, WallSide::Plus, WallCorrector::Z2, None).unwrap();
        let g = &z2.grid;
        for (i, j) in g.fluid_cells() {
            assert!((z2.values[g.idx(i, j)] - g.yc(j)).abs() < 1e-9);
        }
        assert!(z2.c0.unwrap().abs() < 1e-9);
        assert!((z2.eval_wall(0.3, 20.0) - 20.0).abs() < 1e-9);
        let z2m = solve_wall_corrector(&geom, WallSide::Minus, WallCorrector::Z2, None).unwrap();
        assert!((z2m.eval_wall(0.4, -1.3) + 1.3).abs() < 1.0 / 32.0 + 1e-9);
    }

    #[test]
    fn wavy_wall_z1_is_odd_and_decays() {
        let mut s = vec![1.0; 33];
        for (i, v) in s.iter_mut().enumerate() {
            let x = i as f64 / 32.0;
            if (0.25..=0.75).contains(&x) {
                *v = 1.25;
            }
        }
        let mut geom = CellGeometry::<f64>::flat(32, 32);
        geom.h_plus = WallProfile::Tabulated(s);
        let z1 = solve_wall_corrector(&geom, WallSide::Plus, WallCorrector::Z1, None).unwrap();
        assert!(z1.max_abs() > 1e-3);
        assert!(z1.oddness_defect() < 1e-8);
        assert!(z1.decay_slope.unwrap() < 0.0);
    }

    #[test]
    fn shear_outlet_layer_is_exponential() {
        let geom = CellGeometry::<f64>::flat(32, 16);
        let cell = build_cell_grid(&geom).unwrap();
        let pot = solve_potential(&cell, &InflowProfile::Constant(1.0)).unwrap();
        let f = solve_outlet_layer(&cell, Diffusion::isotropic(1.0), &pot.velocity, LayerOrder::Zero, OutletLayerOptions::default(), None).unwrap();
        let g = &f.grid;
        let mut err: f64 = 0.0;
        for (i, j) in g.fluid_cells() {
            err = err.max((f.values[g.idx(i, j)] - g.xc(i).exp()).abs());
        }
        assert!(err < 1e-2, "err {err}");
        assert!((f.delta0.unwrap() - 1.0).abs() < 0.05);
        let p1 = solve_outlet_layer(&cell, Diffusion::isotropic(1.0), &pot.velocity, LayerOrder::One, OutletLayerOptions::default(), Some(&f)).unwrap();
        assert!(p1.values.iter().all(|v| *v <= 1e-12));
    }
}
