use std::fmt;
use std::sync::Arc;

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UtilityKind {
    /// `U(x) = -w / x`.
    Alpha2,
    AlphaFair,
    Custom,
}

/// Strictly concave increasing utility with first and second derivatives.
#[derive(Clone)]
pub enum UtilityFunction {
    /// `w * x^(1-a) / (1-a)`, or `w * ln x` at `a = 1`.
    AlphaFair { alpha: f64, weight: f64 },
    Custom {
        name: String,
        value: ScalarFn,
        marginal: ScalarFn,
        curvature: ScalarFn,
    },
}

impl fmt::Debug for UtilityFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UtilityFunction::AlphaFair { alpha, weight } => f
                .debug_struct("AlphaFair")
                .field("alpha", alpha)
                .field("weight", weight)
                .finish(),
            UtilityFunction::Custom { name, .. } => f.debug_struct("Custom").field("name", name).finish(),
        }
    }
}

impl UtilityFunction {
    /// `U(x) = -1/x`.
    pub fn alpha2() -> Self {
        Self::alpha2_weighted(1.0)
    }

    pub fn alpha2_weighted(weight: f64) -> Self {
        assert!(weight > 0.0);
        UtilityFunction::AlphaFair { alpha: 2.0, weight }
    }

    pub fn alpha_fair(alpha: f64) -> Self {
        assert!(alpha > 0.0);
        UtilityFunction::AlphaFair { alpha, weight: 1.0 }
    }

    /// `value`, `marginal` and `curvature` are `U`, `U'` and `U''`; the
    /// caller vouches for `U' > 0` and `U'' < 0` on `x > 0`.
    pub fn custom(
        name: impl Into<String>,
        value: impl Fn(f64) -> f64 + Send + Sync + 'static,
        marginal: impl Fn(f64) -> f64 + Send + Sync + 'static,
        curvature: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        UtilityFunction::Custom {
            name: name.into(),
            value: Arc::new(value),
            marginal: Arc::new(marginal),
            curvature: Arc::new(curvature),
        }
    }

    pub fn kind(&self) -> UtilityKind {
        match self {
            UtilityFunction::AlphaFair { alpha, .. } if *alpha == 2.0 => UtilityKind::Alpha2,
            UtilityFunction::AlphaFair { .. } => UtilityKind::AlphaFair,
            UtilityFunction::Custom { .. } => UtilityKind::Custom,
        }
    }

    /// `-inf` at `x = 0` for the barrier-like members (`alpha >= 1`).
    pub fn value(&self, x: f64) -> f64 {
        match self {
            UtilityFunction::AlphaFair { alpha, weight } => {
                if *alpha == 1.0 {
                    weight * x.ln()
                } else if *alpha == 2.0 {
                    -weight / x
                } else {
                    weight * x.powf(1.0 - alpha) / (1.0 - alpha)
                }
            }
            UtilityFunction::Custom { value, .. } => value(x),
        }
    }

    pub fn marginal(&self, x: f64) -> f64 {
        match self {
            UtilityFunction::AlphaFair { alpha, weight } => {
                if *alpha == 2.0 {
                    weight / (x * x)
                } else {
                    weight * x.powf(-alpha)
                }
            }
            UtilityFunction::Custom { marginal, .. } => marginal(x),
        }
    }

    pub fn curvature(&self, x: f64) -> f64 {
        match self {
            UtilityFunction::AlphaFair { alpha, weight } => {
                if *alpha == 2.0 {
                    -2.0 * weight / (x * x * x)
                } else {
                    -alpha * weight * x.powf(-alpha - 1.0)
                }
            }
            UtilityFunction::Custom { curvature, .. } => curvature(x),
        }
    }

    /// Solves `U'(x) = price` for `x` within `[lo, hi]`.
    pub fn inverse_marginal(&self, price: f64, lo: f64, hi: f64) -> f64 {
        if price <= 0.0 {
            return hi;
        }
        match self {
            UtilityFunction::AlphaFair { alpha, weight } => {
                let x = if *alpha == 2.0 {
                    (weight / price).sqrt()
                } else {
                    (weight / price).powf(1.0 / alpha)
                };
                x.clamp(lo, hi)
            }
            UtilityFunction::Custom { marginal, .. } => {
                if marginal(hi) >= price {
                    return hi;
                }
                if marginal(lo) <= price {
                    return lo;
                }
                // U' is decreasing; bisect in log space
                let (mut a, mut b) = (lo.ln(), hi.ln());
                for _ in 0..200 {
                    let m = 0.5 * (a + b);
                    if marginal(m.exp()) > price {
                        a = m;
                    } else {
                        b = m;
                    }
                }
                (0.5 * (a + b)).exp()
            }
        }
    }

    /// True when `U(x) -> -inf` as `x -> 0`.
    pub fn is_barrier(&self) -> bool {
        match self {
            UtilityFunction::AlphaFair { alpha, .. } => *alpha >= 1.0,
            UtilityFunction::Custom { value, .. } => value(1e-300) == f64::NEG_INFINITY || value(1e-300) < -1e100,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn alpha2_is_minus_inverse() {
        let u = UtilityFunction::alpha2();
        assert_eq!(u.kind(), UtilityKind::Alpha2);
        assert_eq!(u.value(0.5), -2.0);
        assert_eq!(u.marginal(0.5), 4.0);
        assert_eq!(u.curvature(0.5), -16.0);
        assert_eq!(u.value(0.0), f64::NEG_INFINITY);
        assert_relative_eq!(u.inverse_marginal(4.0, 1e-9, 1e6), 0.5);
    }

    #[test]
    fn alpha_fair_family_matches_alpha2() {
        let general = UtilityFunction::AlphaFair { alpha: 2.0 + 1e-12, weight: 1.0 };
        let exact = UtilityFunction::alpha2();
        assert_eq!(general.kind(), UtilityKind::AlphaFair);
        assert_relative_eq!(general.value(0.3), exact.value(0.3), max_relative = 1e-9);
        let log = UtilityFunction::alpha_fair(1.0);
        assert_relative_eq!(log.value(2.0), 2f64.ln());
        assert_relative_eq!(log.inverse_marginal(0.25, 1e-9, 1e6), 4.0, max_relative = 1e-12);
    }

    #[test]
    fn custom_inverse_by_bisection() {
        let u = UtilityFunction::custom("sqrt", |x: f64| 2.0 * x.sqrt(), |x: f64| 1.0 / x.sqrt(), |x: f64| {
            -0.5 * x.powf(-1.5)
        });
        assert_eq!(u.kind(), UtilityKind::Custom);
        assert_relative_eq!(u.inverse_marginal(2.0, 1e-9, 1e6), 0.25, max_relative = 1e-10);
        assert!(!u.is_barrier());
        assert!(UtilityFunction::alpha2().is_barrier());
    }
}
