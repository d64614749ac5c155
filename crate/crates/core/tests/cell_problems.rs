use fracture_homog::cell_solvers::{
    averaged_reactions, compute_effective_data, effective_velocity, solve_corrector, solve_potential, CorrectorOrder, Diffusion,
    InflowProfile,
};
use fracture_homog::geometry::{build_cell_grid, CellGeometry, Rect, WallSide};
use fracture_homog::reactions::ReactionModel;

fn obstacle_cell(n: usize) -> CellGeometry<f64> {
    CellGeometry::flat(n, n).with_obstacle(Rect::new(0.25, 0.75, -0.25, 0.25))
}

#[test]
fn shear_flow_velocity_is_one() {
    let grid = build_cell_grid(&CellGeometry::<f64>::flat(16, 16)).unwrap();
    let pot = solve_potential(&grid, &InflowProfile::Constant(1.0)).unwrap();
    let v = effective_velocity(&pot.velocity, &grid).unwrap();
    assert!((v - 1.0).abs() < 1e-10);
}

#[test]
fn obstacle_velocity_matches_formula_and_quadrature() {
    let grid = build_cell_grid(&obstacle_cell(32)).unwrap();
    let pot = solve_potential(&grid, &InflowProfile::Constant(1.0)).unwrap();
    let v = effective_velocity(&pot.velocity, &grid).unwrap();
    assert!((v - 2.0 / 1.75).abs() < 1e-3, "{v}");
    // direct quadrature of v1 over the fluid cells
    let mut q = 0.0;
    for (i, j) in grid.fluid_cells() {
        q += pot.velocity.cell_velocity(&grid, i, j).0 * grid.area(i, j);
    }
    assert!((q / grid.fluid_area() - v).abs() < 1e-8, "{q} {v}");
}

#[test]
fn cosine_inflow_velocity() {
    let v0 = InflowProfile::Cosine { base: 1.0, amp: 0.5 };
    for geom in [CellGeometry::flat(32, 32), obstacle_cell(32)] {
        let grid = build_cell_grid(&geom).unwrap();
        let pot = solve_potential(&grid, &v0).unwrap();
        let v = effective_velocity(&pot.velocity, &grid).unwrap();
        let expect = 2.0 / grid.fluid_area();
        assert!((v - expect).abs() < 1e-3, "{v} vs {expect}");
    }
}

#[test]
fn flux_through_every_cut_is_the_inflow() {
    let grid = build_cell_grid(&obstacle_cell(32)).unwrap();
    let pot = solve_potential(&grid, &InflowProfile::Constant(1.0)).unwrap();
    for (i, f) in pot.velocity.cut_fluxes(&grid).iter().enumerate() {
        assert!((f - 2.0).abs() < 1e-9, "cut {i}: {f}");
    }
    assert!(pot.velocity.max_abs_divergence(&grid) < 1e-10);
}

#[test]
fn obstacle_corrector_is_periodic_and_mean_zero() {
    let grid = build_cell_grid(&obstacle_cell(32)).unwrap();
    let pot = solve_potential(&grid, &InflowProfile::Constant(1.0)).unwrap();
    let sol = solve_corrector(&grid, Diffusion::isotropic(1.0), &pot.velocity, CorrectorOrder::First, None).unwrap();
    let n1 = &sol.field;
    assert!(n1.mean(&grid).abs() < 1e-10);
    assert!(n1.max_abs() > 1e-3);
    // near-boundary columns, compared through the periodic seam
    for j in 0..grid.ny {
        let left = n1.at(&grid, 0, j);
        let right = n1.at(&grid, grid.nx - 1, j);
        let inner_l = n1.at(&grid, 1, j);
        let inner_r = n1.at(&grid, grid.nx - 2, j);
        // seam difference matches the interior slope on either side
        let seam = left - right;
        assert!(seam.abs() <= 2.0 * (inner_l - left).abs().max((right - inner_r).abs()) + 1e-8, "row {j}");
    }
}

#[test]
fn effective_diffusion_richardson() {
    let d = [Diffusion::isotropic(1.0)];
    let v0 = InflowProfile::Constant(1.0);
    let a = compute_effective_data(&obstacle_cell(32), &v0, &d, true).unwrap().d11_hat[0];
    let b = compute_effective_data(&obstacle_cell(64), &v0, &d, true).unwrap().d11_hat[0];
    assert!(((a - b) / b).abs() < 0.02, "{a} {b}");
    assert!(b > 0.0);
}

#[test]
fn shear_flow_effective_diffusion_is_molecular() {
    let d = [Diffusion::isotropic(0.7), Diffusion::isotropic(0.7)];
    let eff = compute_effective_data(&CellGeometry::flat(16, 16), &InflowProfile::Constant(1.0f64), &d, false).unwrap();
    assert!((eff.d11_hat[0] - 0.7).abs() < 1e-10);
    assert_eq!(eff.d11_hat[0].to_bits(), eff.d11_hat[1].to_bits());
    assert!(eff.n1[0].max_abs() < 1e-10 && eff.n2[0].max_abs() < 1e-10);
}

#[test]
fn identical_species_are_bit_identical() {
    let d = [Diffusion::isotropic(0.8), Diffusion::isotropic(0.8)];
    let eff = compute_effective_data(&obstacle_cell(16), &InflowProfile::Constant(1.0), &d, false).unwrap();
    assert_eq!(eff.d11_hat[0].to_bits(), eff.d11_hat[1].to_bits());
    assert_eq!(eff.n1[0], eff.n1[1]);
}

/// Wall fluxes that depend only on ξ through a chosen weight.
struct WallOnly {
    base: f64,
    weighted: bool,
}

impl ReactionModel<f64> for WallOnly {
    fn n_species(&self) -> usize {
        1
    }
    fn bulk_diffusion(&self, _: WallSide, _: usize) -> f64 {
        1.0
    }
    fn fracture_diffusion(&self, _: usize) -> f64 {
        1.0
    }
    fn bulk_rate(&self, _: WallSide, _: usize, _: &[f64], _: f64, _: f64, _: f64) -> f64 {
        0.0
    }
    fn bulk_source(&self, _: WallSide, _: usize, _: f64, _: f64, _: f64) -> f64 {
        0.0
    }
    fn wall_bulk_flux(&self, _: WallSide, _: usize, _: &[f64], _: &[f64], _: (f64, f64), _: f64, _: f64) -> f64 {
        self.base
    }
    fn wall_frac_flux(&self, _: WallSide, _: usize, _: &[f64], _: &[f64], xi: (f64, f64), _: f64, _: f64) -> f64 {
        if self.weighted {
            self.base * (1.0 + 0.5 * (2.0 * std::f64::consts::PI * xi.0).cos())
        } else {
            self.base
        }
    }
    fn obstacle_flux(&self, _: usize, _: &[f64], _: (f64, f64), _: f64, _: f64) -> f64 {
        self.base
    }
    fn outlet_value(&self, _: usize, _: f64) -> f64 {
        0.0
    }
    fn outlet_rate(&self, _: usize, _: f64) -> f64 {
        0.0
    }
}

#[test]
fn averaged_wall_fluxes() {
    let grid = build_cell_grid(&obstacle_cell(16)).unwrap();
    let y0 = grid.fluid_area();
    let m = WallOnly { base: 0.3, weighted: false };
    let avg = averaged_reactions(&grid, &m);
    let u = [0.0];
    for side in [WallSide::Plus, WallSide::Minus] {
        assert!((avg.phi_hat(side, 0, &u, &u, 0.5, 1.0) - 0.3 / y0).abs() < 1e-12);
        assert!((avg.upsilon_tilde(side, 0, &u, &u, 0.5, 1.0) - 0.3).abs() < 1e-12);
    }
    // obstacle perimeter is 2
    assert!((avg.psi_hat(0, &u, 0.5, 1.0) - 0.3 * 2.0 / y0).abs() < 1e-12);

    let flat = build_cell_grid(&CellGeometry::<f64>::flat(16, 16)).unwrap();
    let w = WallOnly { base: 0.3, weighted: true };
    let avg = averaged_reactions(&flat, &w);
    assert!((avg.phi_hat(WallSide::Plus, 0, &u, &u, 0.5, 1.0) - 0.3 / 2.0).abs() < 1e-12);
}

#[test]
fn f32_cell_pipeline() {
    let geom = CellGeometry::<f32>::flat(8, 8).with_obstacle(Rect::new(0.25, 0.75, -0.25, 0.25));
    let grid = build_cell_grid(&geom).unwrap();
    assert_eq!(grid.fluid_area(), 1.75f32);
    let pot = solve_potential(&grid, &InflowProfile::Constant(1.0f32)).unwrap();
    let v = effective_velocity(&pot.velocity, &grid).unwrap();
    assert!((v - 2.0 / 1.75).abs() < 1e-3, "{v}");
}
