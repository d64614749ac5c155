use fracture_homog::cell_solvers::{averaged_reactions, compute_effective_data, solve_potential, Diffusion, InflowProfile};
use fracture_homog::geometry::{build_cell_grid, CellGeometry, Rect, WallSide};
use fracture_homog::homog_solver::{
    characteristics_eval, interface_step, picard_solve, w_distance, BulkField, BulkOperator, HomogGrid, HomogSolution, InitialIterate,
    PicardOptions,
};
use fracture_homog::layer_solvers::{solve_outlet_layers, solve_wall_corrector, OutletLayerOptions, WallCorrector};
use fracture_homog::reactions::ReactionSystem;
use fracture_homog::scalar::linear_fit;

#[test]
fn fast_outlet_layer_decays_at_twice_the_rate() {
    let cell = build_cell_grid(&CellGeometry::<f64>::flat(32, 64)).unwrap();
    let pot = solve_potential(&cell, &InflowProfile::Constant(2.0)).unwrap();
    let l = solve_outlet_layers(&cell, Diffusion::isotropic(1.0), &pot.velocity, OutletLayerOptions::default()).unwrap();
    let d = l.pi0.delta0.unwrap();
    assert!((d - 2.0).abs() < 0.1, "delta0 {d}");
    let g = &l.pi0.grid;
    for (i, j) in g.fluid_cells() {
        let v = l.pi0.values[g.idx(i, j)];
        assert!((v - (2.0 * g.xc(i)).exp()).abs() < 2e-2);
    }
}

#[test]
fn obstacle_outlet_layer_principles() {
    let geom = CellGeometry::<f64>::flat(32, 32).with_obstacle(Rect::new(0.25, 0.75, -0.25, 0.25));
    let cell = build_cell_grid(&geom).unwrap();
    let pot = solve_potential(&cell, &InflowProfile::Constant(1.0)).unwrap();
    let l = solve_outlet_layers(&cell, Diffusion::isotropic(1.0), &pot.velocity, OutletLayerOptions::default()).unwrap();
    let p = &l.pi0;
    assert!(p.values.iter().all(|v| *v >= -1e-8 && *v <= 1.0 + 1e-8));
    let a = &p.slice_max;
    let g1 = p.gamma.unwrap();
    assert!(g1 < 1.0);
    for m in 1..a.len() - 1 {
        assert!(a[m + 1] <= g1 * a[m] + 1e-8, "slice {m}: {} > {g1} * {}", a[m + 1], a[m]);
    }
    assert!(p.decay_slope.unwrap() <= g1.ln() + 0.05);
}

#[test]
fn flat_wall_z2_far_field() {
    let geom = CellGeometry::<f64>::flat(16, 16);
    for side in [WallSide::Plus, WallSide::Minus] {
        let z1 = solve_wall_corrector(&geom, side, WallCorrector::Z1, None).unwrap();
        assert!(z1.max_abs() < 1e-10);
        let z2 = solve_wall_corrector(&geom, side, WallCorrector::Z2, None).unwrap();
        assert!(z2.c0.unwrap().abs() < 1e-10);
        assert!(z2.truncation_sensitivity.unwrap_or(0.0) < 1e-10);
    }
}

/// Max and mean absolute upwind errors against the characteristics
/// quadrature at t = 0.5, for m = 32, 64, 128, 256.
fn upwind_errors(fhat: impl Fn(f64, f64) -> f64 + Copy) -> Vec<(f64, f64)> {
    let (v, t_end, nu) = (1.0f64, 0.5, 0.8);
    let mut out = Vec::new();
    for m in [32usize, 64, 128, 256] {
        let dx = 1.0 / m as f64;
        let dt = nu * dx / v;
        let steps = (t_end / dt).round() as usize;
        let mut w = vec![0.0; m + 1];
        for n in 0..steps {
            let t = (n + 1) as f64 * dt;
            let f: Vec<f64> = (0..=m).map(|i| fhat(i as f64 * dx, t)).collect();
            w = interface_step(&w, &f, nu, dt).unwrap();
        }
        let t = steps as f64 * dt;
        let e: Vec<f64> = (0..=m).map(|i| (w[i] - characteristics_eval(fhat, v, i as f64 * dx, t, 1e-3)).abs()).collect();
        out.push((e.iter().copied().fold(0.0, f64::max), e.iter().sum::<f64>() * dx));
    }
    out
}

#[test]
fn upwind_converges_to_characteristics() {
    // smooth across the characteristic x = v t: first order in max norm
    let lin = upwind_errors(|x, _| x);
    for p in lin.windows(2) {
        assert!(p[0].0 / p[1].0 >= 1.8, "{lin:?}");
    }
    // a constant source leaves a kink at x = v t; first order in L1
    let cst = upwind_errors(|_, _| 0.7);
    for p in cst.windows(2) {
        assert!(p[0].1 / p[1].1 >= 1.8, "{cst:?}");
    }
    assert!(upwind_errors(|_, _| 0.0).iter().all(|e| e.0 == 0.0));
}

#[test]
fn linear_source_characteristics() {
    let v = 0.8f64;
    for &(x, t) in &[(0.1, 0.5), (0.9, 0.3), (0.4, 0.5)] {
        let w = characteristics_eval(|y, _| y, v, x, t, 1e-3);
        let exact = if t < x / v { x * t - v * t * t / 2.0 } else { x * x / (2.0 * v) };
        assert!((w - exact).abs() < 1e-12);
    }
}

/// (1 - e^{-t}) sin(πx) cos(πη/2h) on one bulk layer with zero interface flux.
fn mms_error(dt: f64) -> f64 {
    let (h, d, t_end, m) = (0.5, 0.8, 1.0, 128);
    let grid = HomogGrid::new(1.0, h, h, m, dt, t_end).unwrap();
    let op = BulkOperator::new(&grid, WallSide::Plus, d).unwrap();
    let pi = std::f64::consts::PI;
    let shape = |i: usize, j: usize| (pi * grid.x(i)).sin() * (pi * j as f64 * grid.dy(WallSide::Plus) / (2.0 * h)).cos();
    let lap = pi * pi + pi * pi / (4.0 * h * h);
    let rows = grid.rows(WallSide::Plus);
    let mut u = BulkField::zeros(&grid, WallSide::Plus);
    let flux = vec![0.0; m + 1];
    for n in 1..=grid.n_steps {
        let t = grid.time(n);
        let mut src = vec![0.0; grid.bulk_len(WallSide::Plus)];
        for j in 0..=rows {
            for i in 0..=m {
                src[j * (m + 1) + i] = ((-t).exp() + (1.0 - (-t).exp()) * d * lap) * shape(i, j);
            }
        }
        u = op.step(&u, &src, &flux);
    }
    let s = 1.0 - (-t_end).exp();
    let mut err: f64 = 0.0;
    for j in 0..=rows {
        for i in 0..=m {
            err = err.max((u.at(&grid, i, j) - s * shape(i, j)).abs());
        }
    }
    err
}

#[test]
fn bulk_step_is_first_order_in_time() {
    let e: Vec<f64> = [0.2, 0.1, 0.05].iter().map(|dt| mms_error(*dt)).collect();
    let xs: Vec<f64> = [0.2f64, 0.1, 0.05].iter().map(|v| v.ln()).collect();
    let ys: Vec<f64> = e.iter().map(|v| v.ln()).collect();
    let (order, _, _) = linear_fit(&xs, &ys).unwrap();
    assert!(order >= 0.9, "order {order}, errors {e:?}");
}

fn benchmark_homog(sys: &ReactionSystem<f64>, opts: &PicardOptions<f64>) -> HomogSolution<f64> {
    let d: Vec<Diffusion<f64>> = sys.d_frac.iter().map(|v| Diffusion::isotropic(*v)).collect();
    let eff = compute_effective_data(&CellGeometry::flat(16, 8), &InflowProfile::Constant(1.0), &d, true).unwrap();
    let m = 32;
    let dt = sys.ell / m as f64 * 0.9 / eff.v_hat;
    let steps = (0.5 / dt).ceil();
    let grid = HomogGrid::new(sys.ell, sys.height_plus, sys.height_minus, m, 0.5 / steps, 0.5).unwrap();
    let avg = averaged_reactions(&eff.grid, sys);
    picard_solve(sys, &avg, eff.v_hat, &grid, opts).unwrap()
}

#[test]
fn zero_data_converge_in_one_iteration() {
    let sys = ReactionSystem::benchmark().zero_like();
    let mut o = PicardOptions::for_final_time(0.5);
    o.serial = true;
    let sol = benchmark_homog(&sys, &o);
    assert!(sol.windows.iter().all(|w| w.iterations == 1));
    assert!(sol.w.iter().flatten().flatten().all(|v| *v == 0.0));
    assert!(sol.snapshots.iter().all(|s| s.plus.iter().chain(&s.minus).all(|f| f.values.iter().all(|v| *v == 0.0))));
}

#[test]
fn benchmark_picard_contracts_and_is_unique() {
    let sys = ReactionSystem::benchmark();
    let base = PicardOptions::for_final_time(0.5);
    let a = benchmark_homog(&sys, &base);
    for w in &a.windows {
        assert!(w.iterations <= 50);
        assert!(w.w_history.iter().all(|v| v.is_finite()));
        let rho = w.contraction_factors();
        assert!(rho.iter().skip(1).all(|r| *r < 1.0), "window {}: {rho:?}", w.t_start);
    }
    assert!(a.w.last().unwrap().iter().flatten().any(|v| v.abs() > 1e-6));

    let mut bumped = base;
    bumped.initial = InitialIterate::Bump(0.2);
    let b = benchmark_homog(&sys, &bumped);
    assert!(w_distance(&a, &b) <= 10.0 * base.tol);

    let mut halved = base;
    halved.window = base.window / 2.0;
    let c = benchmark_homog(&sys, &halved);
    assert!(w_distance(&a, &c) <= 10.0 * base.tol);
}

#[test]
fn boundary_and_initial_compatibility() {
    let sys = ReactionSystem::benchmark();
    let sol = benchmark_homog(&sys, &PicardOptions::for_final_time(0.5));
    for n in 0..sol.w.len() {
        for k in 0..sol.n_species() {
            assert_eq!(sol.w[n][k][0], 0.0);
        }
    }
    assert!(sol.w[0].iter().flatten().all(|v| *v == 0.0));
    let g = &sol.grid;
    for s in &sol.snapshots {
        for side in [WallSide::Plus, WallSide::Minus] {
            let f = s.field(side, 0);
            for i in 0..=g.m {
                assert_eq!(f.at(g, i, g.rows(side)), 0.0);
            }
            for j in 0..=g.rows(side) {
                assert_eq!(f.at(g, 0, j), 0.0);
                assert_eq!(f.at(g, g.m, j), 0.0);
            }
        }
    }
}
