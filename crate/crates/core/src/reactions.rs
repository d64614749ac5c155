//! Reaction and source terms shared by the micro and homogenized models.

use crate::error::{Error, Result};
use crate::geometry::WallSide;
use crate::scalar::{smooth_step, Real};

/// Nonlinear terms of the coupled system, evaluated pointwise.
///
/// Sign conventions: `wall_bulk_flux` (Υ) is the rate at which a bulk layer
/// loses mass through the fracture wall, `wall_frac_flux` (Φ) and
/// `obstacle_flux` (Ψ) the rates at which the fracture loses mass through
/// its walls and obstacle boundaries.
pub trait ReactionModel<T: Real>: Sync {
    fn n_species(&self) -> usize;
    fn bulk_diffusion(&self, side: WallSide, k: usize) -> T;
    fn fracture_diffusion(&self, k: usize) -> T;
    /// F±ₖ(u, x, t); `x2` is the signed vertical coordinate.
    fn bulk_rate(&self, side: WallSide, k: usize, u: &[T], x1: T, x2: T, t: T) -> T;
    /// 𝔣±ₖ(x, t).
    fn bulk_source(&self, side: WallSide, k: usize, x1: T, x2: T, t: T) -> T;
    /// Υ±ₖ(u±, w, ξ, x₁, t).
    fn wall_bulk_flux(&self, side: WallSide, k: usize, u: &[T], w: &[T], xi: (T, T), x1: T, t: T) -> T;
    /// Φ±ₖ(u±, w, ξ, x₁, t).
    fn wall_frac_flux(&self, side: WallSide, k: usize, u: &[T], w: &[T], xi: (T, T), x1: T, t: T) -> T;
    /// Ψₖ(w, ξ, x₁, t).
    fn obstacle_flux(&self, k: usize, w: &[T], xi: (T, T), x1: T, t: T) -> T;
    /// Outlet datum qℓₖ(t) and its time derivative.
    fn outlet_value(&self, k: usize, t: T) -> T;
    fn outlet_rate(&self, k: usize, t: T) -> T;
}

/// Smooth, bounded reaction family with an onset delay and compact support.
///
/// ```text
/// F±ₖ  = A_F[k] bump2(x) Σⱼ c[k][j] tanh(uⱼ)
/// 𝔣±ₖ  = A_src[k] bump2(x) (1 - e^{-t})
/// Υ±ₖ  = ramp(t) bump(x₁) (a[k] tanh(u±ₖ) + b[k] tanh(wₖ))
/// Φ±ₖ  = ramp(t) bump(x₁) ω(ξ₁) (p[k] tanh(u±ₖ) + r[k] tanh(wₖ))
/// Ψₖ   = ramp(t) bump(x₁) ω(ξ₁) s[k] tanh(wₖ)
/// qℓₖ  = Q[k] t² e^{-t}
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct ReactionSystem<T> {
    pub d_plus: Vec<T>,
    pub d_minus: Vec<T>,
    pub d_frac: Vec<T>,
    pub amp_bulk: Vec<T>,
    pub coupling: Vec<Vec<T>>,
    pub amp_source: Vec<T>,
    pub ups_a: Vec<T>,
    pub ups_b: Vec<T>,
    pub phi_p: Vec<T>,
    pub phi_r: Vec<T>,
    pub psi_s: Vec<T>,
    pub q_amp: Vec<T>,
    /// Onset delay δ of the interface chemistry.
    pub delay: T,
    /// Support [x_a, x_b] of every term in x₁.
    pub x_a: T,
    pub x_b: T,
    /// Support of the bulk terms in |x₂|, as fractions of the layer height.
    pub y_lo: T,
    pub y_hi: T,
    pub height_plus: T,
    pub height_minus: T,
    pub ell: T,
    /// Amplitude a_ω of ω(ξ₁) = 1 + a_ω cos 2πξ₁.
    pub omega_amp: T,
}

impl<T: Real> ReactionSystem<T> {
    /// Two-species benchmark on the unit fracture.
    pub fn benchmark() -> Self {
        let l = T::lit;
        Self {
            d_plus: vec![l(1.0), l(0.5)],
            d_minus: vec![l(0.8), l(0.6)],
            d_frac: vec![l(1.0), l(0.5)],
            amp_bulk: vec![l(0.5), l(0.5)],
            coupling: vec![vec![l(-1.0), l(0.5)], vec![l(0.3), l(-1.0)]],
            amp_source: vec![l(4.0), l(2.0)],
            ups_a: vec![l(1.0), l(0.5)],
            ups_b: vec![l(-0.5), l(-0.25)],
            phi_p: vec![l(-2.0), l(-1.0)],
            phi_r: vec![l(1.0), l(0.5)],
            psi_s: vec![l(0.5), l(0.25)],
            q_amp: vec![l(1.0), l(0.5)],
            delay: l(0.05),
            x_a: l(0.3),
            x_b: l(0.7),
            y_lo: l(0.3),
            y_hi: l(0.9),
            height_plus: l(0.5),
            height_minus: l(0.5),
            ell: l(1.0),
            omega_amp: l(0.5),
        }
    }

    /// Same diffusion constants with every reaction, source and outlet
    /// datum switched off.
    pub fn zero_like(&self) -> Self {
        let z = |v: &Vec<T>| vec![T::zero(); v.len()];
        Self {
            amp_bulk: z(&self.amp_bulk),
            coupling: self.coupling.iter().map(z).collect(),
            amp_source: z(&self.amp_source),
            ups_a: z(&self.ups_a),
            ups_b: z(&self.ups_b),
            phi_p: z(&self.phi_p),
            phi_r: z(&self.phi_r),
            psi_s: z(&self.psi_s),
            q_amp: z(&self.q_amp),
            ..self.clone()
        }
    }

    pub fn ramp(&self, t: T) -> T {
        smooth_step((t - self.delay) / self.delay)
    }

    pub fn bump(&self, x1: T) -> T {
        let w = (self.x_b - self.x_a) * T::lit(0.25);
        smooth_step((x1 - self.x_a) / w) * smooth_step((self.x_b - x1) / w)
    }

    fn bump_y(&self, side: WallSide, x2: T) -> T {
        let h = match side {
            WallSide::Plus => self.height_plus,
            WallSide::Minus => self.height_minus,
        };
        let s = x2.abs() / h;
        let w = (self.y_hi - self.y_lo) * T::lit(0.25);
        smooth_step((s - self.y_lo) / w) * smooth_step((self.y_hi - s) / w)
    }

    pub fn bump2(&self, side: WallSide, x1: T, x2: T) -> T {
        self.bump(x1) * self.bump_y(side, x2)
    }

    pub fn omega(&self, xi1: T) -> T {
        T::one() + self.omega_amp * (T::lit(2.0) * T::PI() * xi1).cos()
    }
}

impl<T: Real> ReactionModel<T> for ReactionSystem<T> {
    fn n_species(&self) -> usize {
        self.d_frac.len()
    }

    fn bulk_diffusion(&self, side: WallSide, k: usize) -> T {
        match side {
            WallSide::Plus => self.d_plus[k],
            WallSide::Minus => self.d_minus[k],
        }
    }

    fn fracture_diffusion(&self, k: usize) -> T {
        self.d_frac[k]
    }

    fn bulk_rate(&self, side: WallSide, k: usize, u: &[T], x1: T, x2: T, _t: T) -> T {
        if self.amp_bulk[k] == T::zero() {
            return T::zero();
        }
        let b = self.bump2(side, x1, x2);
        if b == T::zero() {
            return T::zero();
        }
        let s: T = self.coupling[k].iter().zip(u).map(|(c, v)| *c * v.tanh()).sum();
        self.amp_bulk[k] * b * s
    }

    fn bulk_source(&self, side: WallSide, k: usize, x1: T, x2: T, t: T) -> T {
        if self.amp_source[k] == T::zero() {
            return T::zero();
        }
        self.amp_source[k] * self.bump2(side, x1, x2) * (T::one() - (-t).exp())
    }

    fn wall_bulk_flux(&self, _side: WallSide, k: usize, u: &[T], w: &[T], _xi: (T, T), x1: T, t: T) -> T {
        let g = self.ramp(t) * self.bump(x1);
        if g == T::zero() {
            return T::zero();
        }
        g * (self.ups_a[k] * u[k].tanh() + self.ups_b[k] * w[k].tanh())
    }

    fn wall_frac_flux(&self, _side: WallSide, k: usize, u: &[T], w: &[T], xi: (T, T), x1: T, t: T) -> T {
        let g = self.ramp(t) * self.bump(x1);
        if g == T::zero() {
            return T::zero();
        }
        g * self.omega(xi.0) * (self.phi_p[k] * u[k].tanh() + self.phi_r[k] * w[k].tanh())
    }

    fn obstacle_flux(&self, k: usize, w: &[T], xi: (T, T), x1: T, t: T) -> T {
        let g = self.ramp(t) * self.bump(x1);
        if g == T::zero() {
            return T::zero();
        }
        g * self.omega(xi.0) * self.psi_s[k] * w[k].tanh()
    }

    fn outlet_value(&self, k: usize, t: T) -> T {
        self.q_amp[k] * t * t * (-t).exp()
    }

    fn outlet_rate(&self, k: usize, t: T) -> T {
        self.q_amp[k] * (T::lit(2.0) * t - t * t) * (-t).exp()
    }
}

/// Outcome of [`validate_reactions`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReactionDiagnostics<T> {
    /// Empirical Lipschitz constant of all terms in the concentration
    /// arguments over the sample lattice.
    pub lipschitz: T,
    pub samples: usize,
}

/// Checks the structural assumptions on a reaction system by direct
/// evaluation on a lattice of arguments.
pub fn validate_reactions<T: Real>(sys: &ReactionSystem<T>, t_end: T) -> Result<ReactionDiagnostics<T>> {
    let m = sys.n_species();
    let lens = [
        ("d_plus", sys.d_plus.len()),
        ("d_minus", sys.d_minus.len()),
        ("amp_bulk", sys.amp_bulk.len()),
        ("coupling", sys.coupling.len()),
        ("amp_source", sys.amp_source.len()),
        ("ups_a", sys.ups_a.len()),
        ("ups_b", sys.ups_b.len()),
        ("phi_p", sys.phi_p.len()),
        ("phi_r", sys.phi_r.len()),
        ("psi_s", sys.psi_s.len()),
        ("q_amp", sys.q_amp.len()),
    ];
    if m == 0 {
        return Err(Error::config("physics.species", "at least one species is required"));
    }
    for (name, n) in lens {
        if n != m {
            return Err(Error::config(format!("physics.{name}"), format!("expected {m} entries, found {n}")));
        }
    }
    if sys.coupling.iter().any(|r| r.len() != m) {
        return Err(Error::config("physics.coupling", "coupling matrix must be square"));
    }
    for (name, v) in [("d_plus", &sys.d_plus), ("d_minus", &sys.d_minus), ("d_frac", &sys.d_frac)] {
        if v.iter().any(|d| !(*d > T::zero())) {
            return Err(Error::assumption("A1", format!("diffusion constants `{name}` must be positive")));
        }
    }
    if !(sys.delay > T::zero()) {
        return Err(Error::assumption(
            "A3",
            "interface chemistry needs a positive onset delay (reactions must vanish near t = 0)",
        ));
    }
    if !(sys.x_a > T::zero() && sys.x_a < sys.x_b && sys.x_b < sys.ell) {
        return Err(Error::assumption("A3", "support window [x_a, x_b] must lie inside (0, l)"));
    }
    if !(sys.y_lo >= T::zero() && sys.y_lo < sys.y_hi && sys.y_hi <= T::one()) {
        return Err(Error::config("physics.bulk_window", "need 0 <= lo < hi <= 1"));
    }
    if sys.omega_amp.abs() >= T::one() {
        return Err(Error::config("physics.omega_amp", "|a_omega| must be below 1"));
    }
    if sys.q_amp.iter().any(|q| *q < T::zero()) {
        return Err(Error::assumption("A4", "outlet data must be nonnegative"));
    }

    let zero = vec![T::zero(); m];
    let l = T::lit;
    let us: Vec<T> = [-2.0, -0.5, 0.0, 0.3, 1.5].iter().map(|v| l(*v)).collect();
    let ts: Vec<T> = (0..=12).map(|i| t_end * T::from_count(i) / l(12.0)).chain([sys.delay * l(0.5), sys.delay]).collect();
    let xs: Vec<T> = (0..=20).map(|i| sys.ell * T::from_count(i) / l(20.0)).collect();
    let h = sys.height_plus.max(sys.height_minus);
    let ys: Vec<T> = (0..=8).map(|j| h * T::from_count(j) / l(8.0)).collect();
    let xis: Vec<(T, T)> = [(0.0, 1.0), (0.25, -1.0), (0.5, 0.3), (0.8, -0.2)].iter().map(|(a, b)| (l(*a), l(*b))).collect();
    let fail = |a: &'static str, what: String| Err(Error::assumption(a, what));
    let mut samples = 0usize;
    let mut lip = T::zero();
    let du = l(1e-4);

    for &t in &ts {
        for &x1 in &xs {
            let outside = x1 < sys.x_a || x1 > sys.x_b;
            for side in WallSide::BOTH {
                for &y in &ys {
                    let x2 = side.sign::<T>() * y;
                    for k in 0..m {
                        samples += 1;
                        if sys.bulk_rate(side, k, &zero, x1, x2, t) != T::zero() {
                            return fail("A3", format!("bulk reaction {k} nonzero at zero concentration"));
                        }
                        if t == T::zero() && sys.bulk_source(side, k, x1, x2, t) != T::zero() {
                            return fail("A3", format!("bulk source {k} nonzero at t = 0"));
                        }
                        if outside {
                            for &u in &us {
                                let uu = vec![u; m];
                                if sys.bulk_rate(side, k, &uu, x1, x2, t) != T::zero()
                                    || sys.bulk_source(side, k, x1, x2, t) != T::zero()
                                {
                                    return fail("A3", format!("bulk term {k} nonzero outside [x_a, x_b] at x1 = {x1}"));
                                }
                            }
                        }
                    }
                }
                for &xi in &xis {
                    for k in 0..m {
                        samples += 1;
                        if sys.wall_bulk_flux(side, k, &zero, &zero, xi, x1, t) != T::zero()
                            || sys.wall_frac_flux(side, k, &zero, &zero, xi, x1, t) != T::zero()
                            || sys.obstacle_flux(k, &zero, xi, x1, t) != T::zero()
                        {
                            return fail("A3", format!("interface flux {k} nonzero at zero concentration"));
                        }
                        for &u in &us {
                            for &w in &us {
                                let uu = vec![u; m];
                                let ww = vec![w; m];
                                let vals = [
                                    sys.wall_bulk_flux(side, k, &uu, &ww, xi, x1, t),
                                    sys.wall_frac_flux(side, k, &uu, &ww, xi, x1, t),
                                    sys.obstacle_flux(k, &ww, xi, x1, t),
                                ];
                                if (t <= sys.delay || outside) && vals.iter().any(|v| *v != T::zero()) {
                                    return fail(
                                        "A3",
                                        format!("interface flux {k} active at t = {t}, x1 = {x1} (onset delay or support violated)"),
                                    );
                                }
                                let up = vec![u + du; m];
                                let wp = vec![w + du; m];
                                let diffs = [
                                    (sys.wall_bulk_flux(side, k, &up, &ww, xi, x1, t) - vals[0]).abs()
                                        + (sys.wall_bulk_flux(side, k, &uu, &wp, xi, x1, t) - vals[0]).abs(),
                                    (sys.wall_frac_flux(side, k, &up, &ww, xi, x1, t) - vals[1]).abs()
                                        + (sys.wall_frac_flux(side, k, &uu, &wp, xi, x1, t) - vals[1]).abs(),
                                    (sys.obstacle_flux(k, &wp, xi, x1, t) - vals[2]).abs(),
                                ];
                                for d in diffs {
                                    lip = lip.max(d / du);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    for k in 0..m {
        let h = l(1e-6);
        if sys.outlet_value(k, T::zero()) != T::zero() || sys.outlet_rate(k, T::zero()) != T::zero() {
            return fail("A4", format!("outlet datum {k} must vanish with its derivative at t = 0"));
        }
        for &t in &ts {
            if sys.outlet_value(k, t) < T::zero() {
                return fail("A4", format!("outlet datum {k} negative at t = {t}"));
            }
            let fd = (sys.outlet_value(k, t + h) - sys.outlet_value(k, (t - h).max(T::zero()))) / (t + h - (t - h).max(T::zero()));
            if (fd - sys.outlet_rate(k, t)).abs() > l(1e-4) * (T::one() + fd.abs()) {
                return Err(Error::Consistency(format!("outlet rate {k} inconsistent with its datum at t = {t}")));
            }
        }
        let bulk_lip: T = sys.coupling[k].iter().map(|c| c.abs()).sum::<T>() * sys.amp_bulk[k].abs();
        lip = lip.max(bulk_lip);
    }
    Ok(ReactionDiagnostics { lipschitz: lip, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmark_is_valid() {
        let sys = ReactionSystem::<f64>::benchmark();
        let d = validate_reactions(&sys, 0.5).unwrap();
        assert!(d.lipschitz > 0.0 && d.lipschitz.is_finite());
        assert!(d.samples > 1000);
    }

    #[test]
    fn zero_arguments_give_zero() {
        let sys = ReactionSystem::<f64>::benchmark();
        let z = [0.0, 0.0];
        for side in WallSide::BOTH {
            for k in 0..2 {
                assert_eq!(sys.bulk_rate(side, k, &z, 0.5, 0.25 * side.sign::<f64>(), 0.3), 0.0);
                assert_eq!(sys.wall_bulk_flux(side, k, &z, &z, (0.3, 1.0), 0.5, 0.3), 0.0);
                assert_eq!(sys.wall_frac_flux(side, k, &z, &z, (0.3, 1.0), 0.5, 0.3), 0.0);
                assert_eq!(sys.obstacle_flux(k, &z, (0.3, 1.0), 0.5, 0.3), 0.0);
            }
        }
    }

    #[test]
    fn onset_delay_is_exact() {
        let sys = ReactionSystem::<f64>::benchmark();
        let t = sys.delay / 2.0;
        let u = [1.0, -1.0];
        for k in 0..2 {
            assert_eq!(sys.wall_bulk_flux(WallSide::Plus, k, &u, &u, (0.2, 1.0), 0.5, t), 0.0);
            assert_eq!(sys.wall_frac_flux(WallSide::Minus, k, &u, &u, (0.2, -1.0), 0.5, t), 0.0);
            assert_eq!(sys.obstacle_flux(k, &u, (0.2, 0.1), 0.5, t), 0.0);
        }
    }

    #[test]
    fn outlet_datum_matches_conditions() {
        let sys = ReactionSystem::<f64>::benchmark();
        assert_eq!(sys.outlet_value(0, 0.0), 0.0);
        assert_eq!(sys.outlet_rate(0, 0.0), 0.0);
        let t: f64 = 0.4;
        assert!((sys.outlet_value(0, t) - t * t * (-t).exp()).abs() < 1e-15);
    }

    #[test]
    fn zero_delay_rejected() {
        let mut sys = ReactionSystem::<f64>::benchmark();
        sys.delay = 0.0;
        match validate_reactions(&sys, 0.5) {
            Err(Error::Assumption { assumption, .. }) => assert_eq!(assumption, "A3"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn support_window_outside_domain_rejected() {
        let mut sys = ReactionSystem::<f64>::benchmark();
        sys.x_b = 1.2;
        assert!(validate_reactions(&sys, 0.5).is_err());
    }

    #[test]
    fn negative_outlet_amplitude_rejected() {
        let mut sys = ReactionSystem::<f64>::benchmark();
        sys.q_amp[1] = -0.1;
        match validate_reactions(&sys, 0.5) {
            Err(Error::Assumption { assumption, .. }) => assert_eq!(assumption, "A4"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bump_vanishes_outside_window() {
        let sys = ReactionSystem::<f64>::benchmark();
        assert_eq!(sys.bump(0.29), 0.0);
        assert_eq!(sys.bump(0.71), 0.0);
        assert_eq!(sys.bump(0.5), 1.0);
    }
}
