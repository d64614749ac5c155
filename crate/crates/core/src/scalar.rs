//! Scalar abstraction shared by every solver.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point type the solvers are generic over (`f32` or `f64`).
pub trait Real:
    Float
    + FloatConst
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Debug
    + Display
    + LowerExp
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    /// Conversion from a count.
    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Machine epsilon scaled default tolerance for iterative solves.
    fn default_solver_tol() -> Self;
}

impl Real for f32 {
    fn default_solver_tol() -> Self {
        1e-6
    }
}

impl Real for f64 {
    fn default_solver_tol() -> Self {
        1e-10
    }
}

/// Smooth step: 0 for s <= 0, 1 for s >= 1, C-infinity in between.
pub fn smooth_step<T: Real>(s: T) -> T {
    let zero = T::zero();
    let one = T::one();
    if s <= zero {
        return zero;
    }
    if s >= one {
        return one;
    }
    let f = |x: T| if x <= zero { zero } else { (-one / x).exp() };
    let a = f(s);
    let b = f(one - s);
    a / (a + b)
}

/// Derivative of [`smooth_step`].
pub fn smooth_step_deriv<T: Real>(s: T) -> T {
    let zero = T::zero();
    let one = T::one();
    if s <= zero || s >= one {
        return zero;
    }
    let a = (-one / s).exp();
    let b = (-one / (one - s)).exp();
    let da = a / (s * s);
    let db = -b / ((one - s) * (one - s));
    (da * (a + b) - a * (da + db)) / ((a + b) * (a + b))
}

/// Even cutoff: 1 for |s| <= width/2, 0 for |s| >= width.
pub fn cutoff<T: Real>(s: T, width: T) -> T {
    let half = width * T::lit(0.5);
    let r = s.abs();
    T::one() - smooth_step((r - half) / half)
}

/// Least-squares line y ≈ a + b x; returns (b, a, rms residual).
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<(f64, f64, f64)> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let rss: f64 = xs.iter().zip(ys).map(|(x, y)| (y - a - b * x).powi(2)).sum();
    Some((b, a, (rss / nf).sqrt()))
}
