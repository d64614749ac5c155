//! Periodicity cell, corrector strips and the micro domain as masked
//! structured grids.

use std::io::Write;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Wall profile h(ξ₁) of the periodicity cell.
#[derive(Debug, Clone, PartialEq)]
pub enum WallProfile<T> {
    Flat,
    /// Samples at ξ₁ = i/(m-1), i = 0..m, linearly interpolated.
    Tabulated(Vec<T>),
}

impl<T: Real> WallProfile<T> {
    pub fn eval(&self, xi1: T) -> T {
        match self {
            WallProfile::Flat => T::one(),
            WallProfile::Tabulated(s) => {
                let m = s.len() - 1;
                let x = xi1 - xi1.floor();
                let pos = x * T::from_count(m);
                let k = pos.floor().to_usize().unwrap_or(0).min(m - 1);
                let frac = pos - T::from_count(k);
                s[k] * (T::one() - frac) + s[k + 1] * frac
            }
        }
    }

    pub fn is_flat(&self) -> bool {
        match self {
            WallProfile::Flat => true,
            WallProfile::Tabulated(s) => s.iter().all(|v| *v == T::one()),
        }
    }

    pub fn max(&self) -> T {
        match self {
            WallProfile::Flat => T::one(),
            WallProfile::Tabulated(s) => s.iter().fold(T::zero(), |a, b| a.max(*b)),
        }
    }
}

/// Axis-aligned rectangular obstacle in cell coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect<T> {
    pub xi1_lo: T,
    pub xi1_hi: T,
    pub xi2_lo: T,
    pub xi2_hi: T,
}

impl<T: Real> Rect<T> {
    pub fn new(xi1_lo: T, xi1_hi: T, xi2_lo: T, xi2_hi: T) -> Self {
        Self {
            xi1_lo,
            xi1_hi,
            xi2_lo,
            xi2_hi,
        }
    }

    pub fn area(&self) -> T {
        (self.xi1_hi - self.xi1_lo) * (self.xi2_hi - self.xi2_lo)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellGeometry<T> {
    pub h_plus: WallProfile<T>,
    pub h_minus: WallProfile<T>,
    pub obstacles: Vec<Rect<T>>,
    /// Cells per unit length in ξ₁ and ξ₂.
    pub n1: usize,
    pub n2: usize,
    /// Obstacle-free margin at both vertical cell edges, in grid cells.
    pub theta2_cells: usize,
}

impl<T: Real> CellGeometry<T> {
    pub fn flat(n1: usize, n2: usize) -> Self {
        Self {
            h_plus: WallProfile::Flat,
            h_minus: WallProfile::Flat,
            obstacles: Vec::new(),
            n1,
            n2,
            theta2_cells: 2,
        }
    }

    pub fn with_obstacle(mut self, r: Rect<T>) -> Self {
        self.obstacles.push(r);
        self
    }

    pub fn with_resolution(&self, n1: usize, n2: usize) -> Self {
        Self {
            n1,
            n2,
            ..self.clone()
        }
    }

    pub fn has_flat_walls(&self) -> bool {
        self.h_plus.is_flat() && self.h_minus.is_flat()
    }

    pub fn theta2(&self) -> T {
        T::from_count(self.theta2_cells) / T::from_count(self.n1)
    }

    /// Rasterized wall height of column `i`, in cells.
    pub(crate) fn column_height(&self, profile: &WallProfile<T>, i: usize) -> usize {
        let xc = (T::from_count(i) + T::lit(0.5)) / T::from_count(self.n1);
        let h = profile.eval(xc) * T::from_count(self.n2);
        h.round().to_usize().unwrap_or(0)
    }

    /// Checks the profile invariants (positivity, evenness, unit margins).
    pub fn validate_profiles(&self) -> Result<()> {
        let theta2 = self.theta2();
        for (name, prof) in [("h_plus", &self.h_plus), ("h_minus", &self.h_minus)] {
            if let WallProfile::Tabulated(s) = prof {
                if s.len() < 2 {
                    return Err(Error::Geometry(format!("{name}: need at least two samples")));
                }
                let m = s.len() - 1;
                for (i, v) in s.iter().enumerate() {
                    if *v <= T::zero() {
                        return Err(Error::Geometry(format!("{name}: non-positive sample {v} at index {i}")));
                    }
                    if (*v - s[m - i]).abs() > T::lit(1e-12) {
                        return Err(Error::Geometry(format!("{name}: profile not even about 1/2 at sample {i}")));
                    }
                    let x = T::from_count(i) / T::from_count(m);
                    let in_margin = x <= theta2 || x >= T::one() - theta2;
                    if in_margin && (*v - T::one()).abs() > T::lit(1e-12) {
                        return Err(Error::Geometry(format!(
                            "{name}: profile must equal 1 within the edge margin, sample {i} is {v}"
                        )));
                    }
                }
            }
            for i in (0..self.theta2_cells).chain(self.n1 - self.theta2_cells..self.n1) {
                if self.column_height(prof, i) != self.n2 {
                    return Err(Error::Geometry(format!(
                        "{name}: rasterized height in edge column {i} differs from 1"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Obstacle rectangle snapped to grid lines, as half-open cell ranges.
/// Row indices are signed, counted from ξ₂ = 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellRect {
    pub i0: usize,
    pub i1: usize,
    pub j0: i64,
    pub j1: i64,
}

fn snap_inward<T: Real>(lo: T, hi: T, n: usize, what: &str) -> Result<(i64, i64)> {
    let nn = T::from_count(n);
    let tol = T::lit(1e-9);
    let a = lo * nn;
    let b = hi * nn;
    let ia = (a - tol).ceil();
    let ib = (b + tol).floor();
    let half = T::lit(0.5);
    if (ia - a).abs() > half + tol || (ib - b).abs() > half + tol {
        return Err(Error::Geometry(format!(
            "{what}: snapping [{lo}, {hi}] to the grid moves an edge by more than half a cell"
        )));
    }
    Ok((ia.to_i64().unwrap_or(0), ib.to_i64().unwrap_or(0)))
}

/// Cell classes of a masked grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellClass {
    Fluid,
    Obstacle,
    Exterior,
}

/// Face classes of a masked grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FaceClass {
    /// Not adjacent to any fluid cell.
    Inactive,
    Interior,
    WallPlus,
    WallMinus,
    Obstacle,
    Inlet,
    Outlet,
    OuterDirichlet,
}

impl FaceClass {
    pub fn label(self) -> &'static str {
        match self {
            FaceClass::Inactive => "inactive",
            FaceClass::Interior => "interior",
            FaceClass::WallPlus => "wall_S+",
            FaceClass::WallMinus => "wall_S-",
            FaceClass::Obstacle => "obstacle_G",
            FaceClass::Inlet => "inlet_Gamma0",
            FaceClass::Outlet => "outlet_GammaL",
            FaceClass::OuterDirichlet => "outer_Dirichlet",
        }
    }
}

/// Upper (+) or lower (-) side of the fracture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WallSide {
    Plus,
    Minus,
}

impl WallSide {
    pub const BOTH: [WallSide; 2] = [WallSide::Plus, WallSide::Minus];

    pub fn sign<T: Real>(self) -> T {
        match self {
            WallSide::Plus => T::one(),
            WallSide::Minus => -T::one(),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            WallSide::Plus => "plus",
            WallSide::Minus => "minus",
        }
    }
}

/// Subdomain tag of a cell in the micro grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    BulkMinus,
    Fracture,
    BulkPlus,
}

/// Tensor-product grid with per-cell and per-face classification.
///
/// Cell `(i, j)` has index `j * nx + i`; x-face `(i, j)` (i in 0..=nx) sits
/// left of cell `(i, j)`; y-face `(i, j)` (j in 0..=ny) sits below it.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedGrid<T> {
    pub nx: usize,
    pub ny: usize,
    pub x_edges: Vec<T>,
    pub y_edges: Vec<T>,
    pub cells: Vec<CellClass>,
    pub regions: Vec<Region>,
    pub xfaces: Vec<FaceClass>,
    pub yfaces: Vec<FaceClass>,
}

impl<T: Real> MaskedGrid<T> {
    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn xface(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    #[inline]
    pub fn yface(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn dx(&self, i: usize) -> T {
        self.x_edges[i + 1] - self.x_edges[i]
    }

    #[inline]
    pub fn dy(&self, j: usize) -> T {
        self.y_edges[j + 1] - self.y_edges[j]
    }

    #[inline]
    pub fn xc(&self, i: usize) -> T {
        (self.x_edges[i] + self.x_edges[i + 1]) * T::lit(0.5)
    }

    #[inline]
    pub fn yc(&self, j: usize) -> T {
        (self.y_edges[j] + self.y_edges[j + 1]) * T::lit(0.5)
    }

    #[inline]
    pub fn area(&self, i: usize, j: usize) -> T {
        self.dx(i) * self.dy(j)
    }

    #[inline]
    pub fn is_fluid(&self, i: usize, j: usize) -> bool {
        self.cells[self.idx(i, j)] == CellClass::Fluid
    }

    pub fn fluid_area(&self) -> T {
        let mut a = T::zero();
        for j in 0..self.ny {
            for i in 0..self.nx {
                if self.is_fluid(i, j) {
                    a += self.area(i, j);
                }
            }
        }
        a
    }

    pub fn fluid_cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.ny).flat_map(move |j| (0..self.nx).map(move |i| (i, j))).filter(move |&(i, j)| self.is_fluid(i, j))
    }

    /// Length of faces of class `c` (both orientations).
    pub fn face_length(&self, c: FaceClass) -> T {
        let mut s = T::zero();
        for j in 0..self.ny {
            for i in 0..=self.nx {
                if self.xfaces[self.xface(i, j)] == c {
                    s += self.dy(j);
                }
            }
        }
        for j in 0..=self.ny {
            for i in 0..self.nx {
                if self.yfaces[self.yface(i, j)] == c {
                    s += self.dx(i);
                }
            }
        }
        s
    }

    /// Sum of (length x outward normal) over the boundary faces of the fluid
    /// cells selected by `member`.
    pub fn closure_defect(&self, member: impl Fn(usize, usize) -> bool) -> (T, T) {
        let mut sx = T::zero();
        let mut sy = T::zero();
        let inside = |i: isize, j: isize| {
            i >= 0 && j >= 0 && (i as usize) < self.nx && (j as usize) < self.ny && {
                let (a, b) = (i as usize, j as usize);
                self.is_fluid(a, b) && member(a, b)
            }
        };
        for j in 0..self.ny {
            for i in 0..self.nx {
                if !inside(i as isize, j as isize) {
                    continue;
                }
                let (ii, jj) = (i as isize, j as isize);
                if !inside(ii - 1, jj) {
                    sx -= self.dy(j);
                }
                if !inside(ii + 1, jj) {
                    sx += self.dy(j);
                }
                if !inside(ii, jj - 1) {
                    sy -= self.dx(i);
                }
                if !inside(ii, jj + 1) {
                    sy += self.dx(i);
                }
            }
        }
        (sx, sy)
    }

    /// Dump `(x-index, y-index, class)` rows.
    pub fn write_mask_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["x_index", "y_index", "class"])?;
        for j in 0..self.ny {
            for i in 0..self.nx {
                let c = match self.cells[self.idx(i, j)] {
                    CellClass::Fluid => "fluid",
                    CellClass::Obstacle => "obstacle",
                    CellClass::Exterior => "exterior",
                };
                wr.write_record([i.to_string(), j.to_string(), c.to_string()])?;
            }
        }
        wr.flush()?;
        Ok(())
    }

    /// Assigns face classes from the cell classes; `boundary` decides the
    /// class of a face between a fluid cell and a non-fluid neighbour or the
    /// grid edge.
    fn classify_faces(
        &mut self,
        boundary: impl Fn(&Self, Side, usize, usize, Option<CellClass>) -> FaceClass,
    ) {
        let (nx, ny) = (self.nx, self.ny);
        let mut xf = vec![FaceClass::Inactive; (nx + 1) * ny];
        let mut yf = vec![FaceClass::Inactive; nx * (ny + 1)];
        for j in 0..ny {
            for i in 0..=nx {
                let l = (i > 0).then(|| self.cells[self.idx(i - 1, j)]);
                let r = (i < nx).then(|| self.cells[self.idx(i, j)]);
                xf[j * (nx + 1) + i] = match (l, r) {
                    (Some(CellClass::Fluid), Some(CellClass::Fluid)) => {
                        if self.regions[self.idx(i - 1, j)] == self.regions[self.idx(i, j)] {
                            FaceClass::Interior
                        } else {
                            boundary(self, Side::Right, i - 1, j, r)
                        }
                    }
                    (Some(CellClass::Fluid), other) => boundary(self, Side::Right, i - 1, j, other),
                    (other, Some(CellClass::Fluid)) => boundary(self, Side::Left, i, j, other),
                    _ => FaceClass::Inactive,
                };
            }
        }
        for j in 0..=ny {
            for i in 0..nx {
                let b = (j > 0).then(|| self.cells[self.idx(i, j - 1)]);
                let t = (j < ny).then(|| self.cells[self.idx(i, j)]);
                yf[j * nx + i] = match (b, t) {
                    (Some(CellClass::Fluid), Some(CellClass::Fluid)) => {
                        if self.regions[self.idx(i, j - 1)] == self.regions[self.idx(i, j)] {
                            FaceClass::Interior
                        } else {
                            boundary(self, Side::Top, i, j - 1, t)
                        }
                    }
                    (Some(CellClass::Fluid), other) => boundary(self, Side::Top, i, j - 1, other),
                    (other, Some(CellClass::Fluid)) => boundary(self, Side::Bottom, i, j, other),
                    _ => FaceClass::Inactive,
                };
            }
        }
        self.xfaces = xf;
        self.yfaces = yf;
    }
}

/// Which side of the fluid cell a boundary face lies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
    Bottom,
    Top,
}

/// Obstacles of `geom` snapped to the grid, validated for containment,
/// clearance, size and separation.
pub fn snapped_obstacles<T: Real>(geom: &CellGeometry<T>) -> Result<Vec<CellRect>> {
    let mut out: Vec<CellRect> = Vec::new();
    for (k, r) in geom.obstacles.iter().enumerate() {
        if !(r.xi1_lo < r.xi1_hi && r.xi2_lo < r.xi2_hi) {
            return Err(Error::Geometry(format!("obstacle {k}: empty rectangle")));
        }
        let (i0, i1) = snap_inward(r.xi1_lo, r.xi1_hi, geom.n1, &format!("obstacle {k}"))?;
        let (j0, j1) = snap_inward(r.xi2_lo, r.xi2_hi, geom.n2, &format!("obstacle {k}"))?;
        if i1 - i0 < 4 || j1 - j0 < 4 {
            return Err(Error::Resolution(format!(
                "obstacle {k} spans {}x{} cells, at least 4 are required in each direction",
                i1 - i0,
                j1 - j0
            )));
        }
        let m = geom.theta2_cells as i64;
        if i0 < m || i1 > geom.n1 as i64 - m {
            return Err(Error::Geometry(format!(
                "obstacle {k} enters the obstacle-free edge margin of {m} cells"
            )));
        }
        for i in i0..i1 {
            let hp = geom.column_height(&geom.h_plus, i as usize) as i64;
            let hm = geom.column_height(&geom.h_minus, i as usize) as i64;
            if j1 > hp - 1 || j0 < -hm + 1 {
                return Err(Error::Geometry(format!(
                    "obstacle {k} touches or crosses a wall (clearance below one cell at column {i})"
                )));
            }
        }
        let cr = CellRect {
            i0: i0 as usize,
            i1: i1 as usize,
            j0,
            j1,
        };
        for (l, o) in out.iter().enumerate() {
            let gap_x = (cr.i0 as i64 - o.i1 as i64).max(o.i0 as i64 - cr.i1 as i64);
            let gap_y = (cr.j0 - o.j1).max(o.j0 - cr.j1);
            if gap_x < 1 && gap_y < 1 {
                return Err(Error::Geometry(format!(
                    "obstacles {l} and {k} overlap or touch"
                )));
            }
        }
        out.push(cr);
    }
    Ok(out)
}

/// Rasterizes the periodicity cell Y₀.
pub fn build_cell_grid<T: Real>(geom: &CellGeometry<T>) -> Result<MaskedGrid<T>> {
    if geom.n1 < 2 * geom.theta2_cells + 1 || geom.n2 < 1 {
        return Err(Error::Resolution(format!(
            "cell grid {}x{} too coarse",
            geom.n1, geom.n2
        )));
    }
    geom.validate_profiles()?;
    let obst = snapped_obstacles(geom)?;
    let hp: Vec<usize> = (0..geom.n1).map(|i| geom.column_height(&geom.h_plus, i)).collect();
    let hm: Vec<usize> = (0..geom.n1).map(|i| geom.column_height(&geom.h_minus, i)).collect();
    if hp.iter().chain(&hm).any(|&h| h == 0) {
        return Err(Error::Resolution("wall profile rasterizes to zero height".into()));
    }
    let top = *hp.iter().max().unwrap();
    let bot = *hm.iter().max().unwrap();
    let nx = geom.n1;
    let ny = top + bot;
    let d2 = T::one() / T::from_count(geom.n2);
    let x_edges: Vec<T> = (0..=nx).map(|i| T::from_count(i) / T::from_count(geom.n1)).collect();
    let y_edges: Vec<T> = (0..=ny)
        .map(|j| (T::from_count(j) - T::from_count(bot)) * d2)
        .collect();
    let mut cells = vec![CellClass::Exterior; nx * ny];
    for j in 0..ny {
        let jr = j as i64 - bot as i64;
        for i in 0..nx {
            let inside = jr < hp[i] as i64 && jr >= -(hm[i] as i64);
            if !inside {
                continue;
            }
            let in_obst = obst
                .iter()
                .any(|o| i >= o.i0 && i < o.i1 && jr >= o.j0 && jr < o.j1);
            cells[j * nx + i] = if in_obst {
                CellClass::Obstacle
            } else {
                CellClass::Fluid
            };
        }
    }
    let mut g = MaskedGrid {
        nx,
        ny,
        x_edges,
        y_edges,
        cells,
        regions: vec![Region::Fracture; nx * ny],
        xfaces: Vec::new(),
        yfaces: Vec::new(),
    };
    g.classify_faces(|g, side, _i, j, other| match other {
        Some(CellClass::Obstacle) => FaceClass::Obstacle,
        None if side == Side::Left => FaceClass::Inlet,
        None if side == Side::Right => FaceClass::Outlet,
        _ => match side {
            Side::Top => FaceClass::WallPlus,
            Side::Bottom => FaceClass::WallMinus,
            _ => {
                if g.yc(j) > T::zero() {
                    FaceClass::WallPlus
                } else {
                    FaceClass::WallMinus
                }
            }
        },
    });
    let y0 = g.fluid_area();
    if y0 <= T::zero() {
        return Err(Error::Geometry("cell has no fluid".into()));
    }
    Ok(g)
}

/// Boundary measures of the periodicity cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryMeasures<T> {
    pub s_plus: T,
    pub s_minus: T,
    pub obstacle: T,
    pub y0: T,
}

pub fn boundary_measures<T: Real>(grid: &MaskedGrid<T>) -> BoundaryMeasures<T> {
    BoundaryMeasures {
        s_plus: grid.face_length(FaceClass::WallPlus),
        s_minus: grid.face_length(FaceClass::WallMinus),
        obstacle: grid.face_length(FaceClass::Obstacle),
        y0: grid.fluid_area(),
    }
}

/// Tiles the periodicity cell `periods` times to the left of ζ₁ = 0.
///
/// Left and right grid edges are labelled `Inlet` and `Outlet`; wall and
/// obstacle faces keep their cell labels.
pub fn tile_cell_grid<T: Real>(cell: &MaskedGrid<T>, periods: usize) -> MaskedGrid<T> {
    let n1 = cell.nx;
    let nx = n1 * periods;
    let ny = cell.ny;
    let p0 = T::from_count(periods);
    let mut x_edges = Vec::with_capacity(nx + 1);
    for p in 0..periods {
        for i in 0..n1 {
            x_edges.push(T::from_count(p) - p0 + cell.x_edges[i]);
        }
    }
    x_edges.push(T::zero());
    let mut cells = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            cells.push(cell.cells[cell.idx(i % n1, j)]);
        }
    }
    let mut g = MaskedGrid {
        nx,
        ny,
        x_edges,
        y_edges: cell.y_edges.clone(),
        cells,
        regions: vec![Region::Fracture; nx * ny],
        xfaces: Vec::new(),
        yfaces: Vec::new(),
    };
    g.classify_faces(|g, side, _i, j, other| match other {
        Some(CellClass::Obstacle) => FaceClass::Obstacle,
        None if side == Side::Left => FaceClass::Inlet,
        None if side == Side::Right => FaceClass::Outlet,
        _ => match side {
            Side::Top => FaceClass::WallPlus,
            Side::Bottom => FaceClass::WallMinus,
            _ => {
                if g.yc(j) > T::zero() {
                    FaceClass::WallPlus
                } else {
                    FaceClass::WallMinus
                }
            }
        },
    });
    g
}

/// One period of the region above a wall with profile `h`, in coordinates
/// where the flat wall sits at ξ₂ = 0; truncated at ξ₂ = `height`.
///
/// Wall faces are labelled `WallPlus`, the truncation edge `OuterDirichlet`
/// and the vertical grid edges `Inlet`/`Outlet` (a periodic pair).
pub fn build_wall_strip_grid<T: Real>(geom: &CellGeometry<T>, h: &WallProfile<T>, height: T) -> Result<MaskedGrid<T>> {
    let probe = CellGeometry {
        h_plus: h.clone(),
        h_minus: h.clone(),
        obstacles: Vec::new(),
        ..geom.clone()
    };
    probe.validate_profiles()?;
    let cols: Vec<usize> = (0..geom.n1).map(|i| geom.column_height(h, i)).collect();
    let lo = *cols.iter().min().unwrap();
    if lo == 0 {
        return Err(Error::Resolution("wall profile rasterizes to zero height".into()));
    }
    let nn = T::from_count(geom.n2);
    let y_min = T::from_count(lo) / nn - T::one();
    if !(height > y_min + T::one() / nn) {
        return Err(Error::Geometry(format!("strip height {height} below the wall")));
    }
    let ny = ((height - y_min) * nn - T::lit(1e-9)).ceil().to_usize().unwrap_or(1).max(1);
    let nx = geom.n1;
    let x_edges: Vec<T> = (0..=nx).map(|i| T::from_count(i) / T::from_count(nx)).collect();
    let y_edges: Vec<T> = (0..=ny).map(|j| y_min + T::from_count(j) / nn).collect();
    let mut cells = vec![CellClass::Exterior; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            if j + lo >= cols[i] {
                cells[j * nx + i] = CellClass::Fluid;
            }
        }
    }
    let mut g = MaskedGrid {
        nx,
        ny,
        x_edges,
        y_edges,
        cells,
        regions: vec![Region::BulkPlus; nx * ny],
        xfaces: Vec::new(),
        yfaces: Vec::new(),
    };
    g.classify_faces(|_, side, _i, _j, other| match (side, other) {
        (Side::Top, None) => FaceClass::OuterDirichlet,
        (Side::Left, None) => FaceClass::Inlet,
        (Side::Right, None) => FaceClass::Outlet,
        _ => FaceClass::WallPlus,
    });
    Ok(g)
}

/// Resolution and extent of an ε-resolved micro domain.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroDomainSpec<T> {
    pub ell: T,
    pub height_plus: T,
    pub height_minus: T,
    /// Number of periods N; ε = ℓ/N.
    pub n_periods: usize,
    pub cells_per_period: usize,
    /// Rows across the fracture (must be even).
    pub cells_across: usize,
    pub bulk_rows_plus: usize,
    pub bulk_rows_minus: usize,
}

impl<T: Real> MicroDomainSpec<T> {
    /// Spec with bulk rows chosen so that bulk cells are roughly square.
    pub fn new(ell: T, height_plus: T, height_minus: T, n_periods: usize, cells_per_period: usize, cells_across: usize) -> Self {
        let mut s = Self {
            ell,
            height_plus,
            height_minus,
            n_periods,
            cells_per_period,
            cells_across,
            bulk_rows_plus: 1,
            bulk_rows_minus: 1,
        };
        let dx = s.dx1();
        let eps = s.eps();
        let rows = |h: T| ((h - eps) / dx).round().to_usize().unwrap_or(1).max(4);
        s.bulk_rows_plus = rows(height_plus);
        s.bulk_rows_minus = rows(height_minus);
        s
    }

    pub fn eps(&self) -> T {
        self.ell / T::from_count(self.n_periods)
    }

    pub fn dx1(&self) -> T {
        self.eps() / T::from_count(self.cells_per_period)
    }

    /// Cell geometry of one period at the matching resolution.
    pub fn period_geometry(&self, geom: &CellGeometry<T>) -> CellGeometry<T> {
        geom.with_resolution(self.cells_per_period, self.cells_across / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_periods < 2 {
            return Err(Error::Geometry(format!(
                "number of periods must be at least 2, got {}",
                self.n_periods
            )));
        }
        if self.cells_across < 2 || self.cells_across % 2 != 0 {
            return Err(Error::Resolution("cells across the fracture must be even and positive".into()));
        }
        if !(self.ell > T::zero() && self.height_plus > T::zero() && self.height_minus > T::zero()) {
            return Err(Error::Geometry("domain extents must be positive".into()));
        }
        let eps = self.eps();
        if eps * T::lit(2.0) >= self.height_plus.min(self.height_minus) {
            return Err(Error::Geometry("fracture thicker than the bulk layers".into()));
        }
        if self.bulk_rows_plus == 0 || self.bulk_rows_minus == 0 {
            return Err(Error::Resolution("bulk layers need at least one row".into()));
        }
        Ok(())
    }
}

/// Rasterizes Ω⁻ ∪ Ωᶠ_ε ∪ Ω⁺ on one grid (flat walls only).
pub fn rasterize_micro_domain<T: Real>(spec: &MicroDomainSpec<T>, geom: &CellGeometry<T>) -> Result<MaskedGrid<T>> {
    spec.validate()?;
    if !geom.has_flat_walls() {
        return Err(Error::UnsupportedGeometry(
            "micro runs require flat walls h+ = h- = 1".into(),
        ));
    }
    let cg = build_cell_grid(&spec.period_geometry(geom))?;
    let eps = spec.eps();
    let cpp = spec.cells_per_period;
    let nf = spec.cells_across;
    debug_assert_eq!(cg.ny, nf);
    let (nbm, nbp) = (spec.bulk_rows_minus, spec.bulk_rows_plus);
    let nx = spec.n_periods * cpp;
    let ny = nbm + nf + nbp;
    let x_edges: Vec<T> = (0..=nx)
        .map(|i| spec.ell * T::from_count(i) / T::from_count(nx))
        .collect();
    let mut y_edges = Vec::with_capacity(ny + 1);
    let bm = spec.height_minus - eps;
    for j in 0..nbm {
        y_edges.push(-spec.height_minus + bm * T::from_count(j) / T::from_count(nbm));
    }
    for j in 0..nf {
        y_edges.push(-eps + T::lit(2.0) * eps * T::from_count(j) / T::from_count(nf));
    }
    let bp = spec.height_plus - eps;
    for j in 0..nbp {
        y_edges.push(eps + bp * T::from_count(j) / T::from_count(nbp));
    }
    y_edges.push(spec.height_plus);
    let mut cells = vec![CellClass::Fluid; nx * ny];
    let mut regions = vec![Region::Fracture; nx * ny];
    for j in 0..ny {
        for ii in 0..nx {
            let k = j * nx + ii;
            if j < nbm {
                regions[k] = Region::BulkMinus;
            } else if j >= nbm + nf {
                regions[k] = Region::BulkPlus;
            } else {
                let jf = j - nbm;
                cells[k] = cg.cells[cg.idx(ii % cpp, jf)];
            }
        }
    }
    let mut g = MaskedGrid {
        nx,
        ny,
        x_edges,
        y_edges,
        cells,
        regions,
        xfaces: Vec::new(),
        yfaces: Vec::new(),
    };
    g.classify_faces(|g, side, ii, j, other| {
        let reg = g.regions[g.idx(ii, j)];
        match (reg, other) {
            (Region::Fracture, Some(CellClass::Obstacle)) => FaceClass::Obstacle,
            (Region::Fracture, Some(CellClass::Fluid)) => {
                if side == Side::Top {
                    FaceClass::WallPlus
                } else {
                    FaceClass::WallMinus
                }
            }
            (Region::Fracture, _) => match side {
                Side::Left => FaceClass::Inlet,
                Side::Right => FaceClass::Outlet,
                _ => FaceClass::OuterDirichlet,
            },
            (Region::BulkPlus, Some(CellClass::Fluid)) if side == Side::Bottom => FaceClass::WallPlus,
            (Region::BulkMinus, Some(CellClass::Fluid)) if side == Side::Top => FaceClass::WallMinus,
            _ => FaceClass::OuterDirichlet,
        }
    });
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn centered_obstacle(n: usize) -> CellGeometry<f64> {
        CellGeometry::flat(n, n).with_obstacle(Rect::new(0.25, 0.75, -0.25, 0.25))
    }

    #[test]
    fn flat_cell_is_all_fluid() {
        let g = build_cell_grid(&CellGeometry::<f64>::flat(16, 16)).unwrap();
        assert_eq!((g.nx, g.ny), (16, 32));
        assert!(g.cells.iter().all(|c| *c == CellClass::Fluid));
        assert_eq!(g.fluid_area(), 2.0);
        let m = boundary_measures(&g);
        assert_eq!((m.s_plus, m.s_minus, m.obstacle, m.y0), (1.0, 1.0, 0.0, 2.0));
    }

    #[test]
    fn obstacle_area_and_perimeter() {
        let g = build_cell_grid(&centered_obstacle(16)).unwrap();
        assert_eq!(g.fluid_area(), 1.75);
        let m = boundary_measures(&g);
        assert_eq!(m.obstacle, 2.0);
        assert_eq!(m.y0, 1.75);
    }

    #[test]
    fn obstacle_touching_wall_is_rejected() {
        let geom = CellGeometry::<f64>::flat(16, 16).with_obstacle(Rect::new(0.25, 0.75, 0.0, 1.0));
        assert!(matches!(build_cell_grid(&geom), Err(Error::Geometry(_))));
    }

    #[test]
    fn thin_obstacle_is_a_resolution_error() {
        let geom = CellGeometry::<f64>::flat(8, 8).with_obstacle(Rect::new(0.25, 0.5, -0.25, 0.25));
        assert!(matches!(build_cell_grid(&geom), Err(Error::Resolution(_))));
    }

    #[test]
    fn snapping_beyond_half_cell_is_an_error() {
        // 0.3 * 16 = 4.8: the inward snap moves the edge by 0.2 cells (fine),
        // 0.27 * 16 = 4.32 moves it by 0.68 cells (rejected).
        let ok = CellGeometry::<f64>::flat(16, 16).with_obstacle(Rect::new(0.3, 0.75, -0.25, 0.25));
        assert!(build_cell_grid(&ok).is_ok());
        let bad = CellGeometry::<f64>::flat(16, 16).with_obstacle(Rect::new(0.27, 0.75, -0.25, 0.25));
        assert!(matches!(build_cell_grid(&bad), Err(Error::Geometry(_))));
    }

    #[test]
    fn every_fluid_cell_face_is_classified() {
        let g = build_cell_grid(&centered_obstacle(16)).unwrap();
        for (i, j) in g.fluid_cells() {
            for f in [
                g.xfaces[g.xface(i, j)],
                g.xfaces[g.xface(i + 1, j)],
                g.yfaces[g.yface(i, j)],
                g.yfaces[g.yface(i, j + 1)],
            ] {
                assert_ne!(f, FaceClass::Inactive);
            }
        }
        assert_eq!(g.closure_defect(|_, _| true), (0.0, 0.0));
    }

    #[test]
    fn wavy_wall_staircase() {
        let samples: Vec<f64> = (0..=16)
            .map(|k| {
                let x = k as f64 / 16.0;
                if (0.375..=0.625).contains(&x) { 1.25 } else { 1.0 }
            })
            .collect();
        let geom = CellGeometry {
            h_plus: WallProfile::Tabulated(samples),
            ..CellGeometry::<f64>::flat(16, 16)
        };
        let g = build_cell_grid(&geom).unwrap();
        let m = boundary_measures(&g);
        // polyline: unit horizontal length plus two risers of 4 cells
        assert!((m.s_plus - 1.5).abs() < 1e-12);
        assert!(m.y0 > 2.0);
    }

    #[test]
    fn uneven_profile_rejected() {
        let geom = CellGeometry {
            h_plus: WallProfile::Tabulated(vec![1.0, 1.0, 1.2, 1.1, 1.0, 1.0]),
            ..CellGeometry::<f64>::flat(16, 16)
        };
        assert!(build_cell_grid(&geom).is_err());
    }

    #[test]
    fn micro_domain_without_obstacles() {
        let spec = MicroDomainSpec::new(1.0, 1.0, 1.0, 4, 8, 8);
        let g = rasterize_micro_domain(&spec, &CellGeometry::<f64>::flat(8, 4)).unwrap();
        assert_eq!(spec.eps(), 0.25);
        let frac: Vec<_> = g
            .fluid_cells()
            .filter(|&(i, j)| g.regions[g.idx(i, j)] == Region::Fracture)
            .collect();
        assert_eq!(frac.len(), 32 * 8);
        let ymin = frac.iter().map(|&(_, j)| g.y_edges[j]).fold(f64::INFINITY, f64::min);
        let ymax = frac.iter().map(|&(_, j)| g.y_edges[j + 1]).fold(f64::NEG_INFINITY, f64::max);
        assert!((ymin + 0.25).abs() < 1e-15 && (ymax - 0.25).abs() < 1e-15);
        assert_eq!(g.face_length(FaceClass::Inlet), 0.5);
    }

    #[test]
    fn micro_domain_counts_obstacles() {
        let spec = MicroDomainSpec::new(1.0, 0.5, 0.5, 8, 16, 16);
        let geom = centered_obstacle(16);
        let g = rasterize_micro_domain(&spec, &geom).unwrap();
        let n_obst = g.cells.iter().filter(|c| **c == CellClass::Obstacle).count();
        // each obstacle is 8 x 4 cells at this resolution
        assert_eq!(n_obst, 8 * 8 * 4);
        let eps = spec.eps();
        let expect = 8.0 * 2.0 * eps;
        assert!((g.face_length(FaceClass::Obstacle) - expect).abs() < 1e-12);
    }

    #[test]
    fn single_period_rejected() {
        let spec = MicroDomainSpec::new(1.0, 0.5, 0.5, 1, 8, 8);
        assert!(rasterize_micro_domain(&spec, &CellGeometry::<f64>::flat(8, 4)).is_err());
    }

    #[test]
    fn wavy_micro_domain_unsupported() {
        let spec = MicroDomainSpec::new(1.0, 0.5, 0.5, 8, 16, 16);
        let geom = CellGeometry {
            h_plus: WallProfile::Tabulated(vec![1.0, 1.0, 1.25, 1.0, 1.0]),
            ..CellGeometry::<f64>::flat(16, 8)
        };
        assert!(matches!(
            rasterize_micro_domain(&spec, &geom),
            Err(Error::UnsupportedGeometry(_))
        ));
    }
}
