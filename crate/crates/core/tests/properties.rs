use fracture_homog::cell_solvers::{effective_velocity, solve_potential, InflowProfile};
use fracture_homog::config::{InflowConfig, RunConfig};
use fracture_homog::geometry::{boundary_measures, build_cell_grid, CellGeometry, Rect, WallSide};
use fracture_homog::homog_solver::{characteristics_eval, interface_step};
use fracture_homog::reactions::{ReactionModel, ReactionSystem};
use fracture_homog::scalar::{cutoff, smooth_step};
use proptest::prelude::*;

/// Grid-aligned obstacle in a 16×16-per-unit cell, at least two cells from
/// every edge and at least four cells wide.
fn obstacle() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (2usize..9, 4usize..6, 2usize..24, 4usize..7).prop_map(|(i0, w, j0, h)| (i0, i0 + w, j0, j0 + h))
}

fn rect((i0, i1, j0, j1): (usize, usize, usize, usize)) -> Rect<f64> {
    let n = 16.0;
    Rect::new(i0 as f64 / n, i1 as f64 / n, j0 as f64 / n - 1.0, j1 as f64 / n - 1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fluid_area_and_perimeter_are_exact(o in obstacle()) {
        let r = rect(o);
        let grid = build_cell_grid(&CellGeometry::flat(16, 16).with_obstacle(r)).unwrap();
        prop_assert_eq!(grid.fluid_area(), 2.0 - r.area());
        let m = boundary_measures(&grid);
        let perim = 2.0 * ((r.xi1_hi - r.xi1_lo) + (r.xi2_hi - r.xi2_lo));
        prop_assert!((m.obstacle - perim).abs() < 1e-14);
        prop_assert_eq!(m.s_plus, 1.0);
        let (sx, sy) = grid.closure_defect(|i, j| grid.is_fluid(i, j));
        prop_assert_eq!((sx, sy), (0.0, 0.0));
    }

    #[test]
    fn velocity_scales_with_inflow(o in obstacle(), v0 in 0.1f64..5.0) {
        let grid = build_cell_grid(&CellGeometry::flat(16, 16).with_obstacle(rect(o))).unwrap();
        let pot = solve_potential(&grid, &InflowProfile::Constant(v0)).unwrap();
        prop_assert!(pot.velocity.max_abs_divergence(&grid) < 1e-9 * v0.max(1.0));
        for f in pot.velocity.cut_fluxes(&grid) {
            prop_assert!((f - 2.0 * v0).abs() < 1e-8 * v0.max(1.0));
        }
        let v = effective_velocity(&pot.velocity, &grid).unwrap();
        prop_assert!(v > 0.0);
    }

    #[test]
    fn characteristics_are_linear(a in -3.0f64..3.0, x in 0.0f64..1.0, t in 0.0f64..1.0, v in 0.2f64..2.0) {
        let f = |y: f64, s: f64| (y * 3.0).sin() + s;
        let lhs = characteristics_eval(|y, s| a * f(y, s), v, x, t, 1e-2);
        let rhs = a * characteristics_eval(f, v, x, t, 1e-2);
        prop_assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn upwind_step_preserves_sign(nu in 0.0f64..1.0, w in prop::collection::vec(0.0f64..1.0, 9), f in prop::collection::vec(0.0f64..1.0, 9)) {
        let mut w = w;
        w[0] = 0.0;
        let out = interface_step(&w, &f, nu, 0.01).unwrap();
        prop_assert_eq!(out[0], 0.0);
        prop_assert!(out.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn cutoff_is_bounded_and_even(s in -2.0f64..2.0, width in 0.05f64..1.0) {
        let c = cutoff(s, width);
        prop_assert!((0.0..=1.0).contains(&c));
        prop_assert_eq!(c, cutoff(-s, width));
        prop_assert!(smooth_step(s) <= smooth_step(s + 0.01));
    }

    #[test]
    fn nothing_happens_before_the_onset(t in 0.0f64..0.05, u in -5.0f64..5.0, w in -5.0f64..5.0, x1 in 0.0f64..1.0, xi in 0.0f64..1.0) {
        let sys = ReactionSystem::benchmark();
        let uu = [u, -u];
        let ww = [w, 0.5 * w];
        for k in 0..2 {
            for side in [WallSide::Plus, WallSide::Minus] {
                prop_assert_eq!(sys.wall_bulk_flux(side, k, &uu, &ww, (xi, 0.0), x1, t), 0.0);
                prop_assert_eq!(sys.wall_frac_flux(side, k, &uu, &ww, (xi, 0.0), x1, t), 0.0);
            }
            prop_assert_eq!(sys.obstacle_flux(k, &ww, (xi, 0.0), x1, t), 0.0);
        }
    }

    #[test]
    fn config_echo_round_trips(t_end in 0.1f64..2.0, delay in 0.01f64..0.09, base in 0.5f64..2.0, amp in 0.0f64..0.4, n in 2usize..6) {
        let mut c = RunConfig::default();
        c.solver.t_end = t_end;
        c.physics.delay = delay;
        c.physics.inflow = InflowConfig::Cosine { base, amp };
        c.verify.n_list = (0..n).map(|p| 8 << p).collect();
        let back = RunConfig::from_toml_str(&c.to_toml()).unwrap();
        prop_assert_eq!(back, c);
    }
}
