//! Globally adaptive Gauss–Kronrod (7/15) quadrature for complex-valued
//! integrands of a real variable.

use num_traits::Zero;

use crate::error::{DeomError, Result};
use crate::scalar::{Real, C};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

#[derive(Clone, Copy, Debug)]
pub struct QuadConfig<T> {
    pub abs_tol: T,
    pub rel_tol: T,
    pub max_intervals: usize,
}

impl<T: Real> Default for QuadConfig<T> {
    fn default() -> Self {
        Self {
            abs_tol: T::lit(1e-14),
            rel_tol: T::lit(1e-12),
            max_intervals: 20_000,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct QuadResult<T: Real> {
    pub value: C<T>,
    pub error: T,
    pub intervals: usize,
}

struct Segment<T: Real> {
    a: T,
    b: T,
    value: C<T>,
    error: T,
}

fn gk15<T: Real, F: Fn(T) -> C<T>>(f: &F, a: T, b: T) -> (C<T>, T) {
    let half = (b - a) * T::lit(0.5);
    let mid = (a + b) * T::lit(0.5);
    let fc = f(mid);
    let mut kronrod = fc * T::lit(WGK[7]);
    let mut gauss = fc * T::lit(WG[3]);
    for j in 0..7 {
        let dx = half * T::lit(XGK[j]);
        let s = f(mid - dx) + f(mid + dx);
        kronrod += s * T::lit(WGK[j]);
        if j % 2 == 1 {
            gauss += s * T::lit(WG[j / 2]);
        }
    }
    let value = kronrod * half;
    let error = ((kronrod - gauss) * half).norm();
    (value, error)
}

/// Integrates `f` over `[a, b]`, bisecting the worst segment until the summed
/// error estimate meets `max(abs_tol, rel_tol · |I|)`.
pub fn integrate<T: Real, F: Fn(T) -> C<T>>(f: F, a: T, b: T, cfg: &QuadConfig<T>) -> Result<QuadResult<T>> {
    if a == b {
        return Ok(QuadResult {
            value: C::zero(),
            error: T::zero(),
            intervals: 0,
        });
    }
    let (v, e) = gk15(&f, a, b);
    let mut segs = vec![Segment {
        a,
        b,
        value: v,
        error: e,
    }];
    loop {
        let total: C<T> = segs.iter().fold(C::zero(), |s, g| s + g.value);
        let err: T = segs.iter().fold(T::zero(), |s, g| s + g.error);
        if !total.re.is_finite() || !total.im.is_finite() {
            return Err(DeomError::NoConvergence {
                what: "quadrature".into(),
                detail: "non-finite integrand".into(),
            });
        }
        let target = cfg.abs_tol.max(cfg.rel_tol * total.norm());
        if err <= target {
            return Ok(QuadResult {
                value: total,
                error: err,
                intervals: segs.len(),
            });
        }
        if segs.len() >= cfg.max_intervals {
            return Err(DeomError::NoConvergence {
                what: "quadrature".into(),
                detail: format!(
                    "error estimate {err:e} above target {target:e} after {} segments",
                    segs.len()
                ),
            });
        }
        let worst = segs
            .iter()
            .enumerate()
            .fold(
                (0, T::neg_infinity()),
                |acc, (i, g)| {
                    if g.error > acc.1 {
                        (i, g.error)
                    } else {
                        acc
                    }
                },
            )
            .0;
        let seg = segs.swap_remove(worst);
        let m = (seg.a + seg.b) * T::lit(0.5);
        if m <= seg.a || m >= seg.b {
            return Err(DeomError::NoConvergence {
                what: "quadrature".into(),
                detail: "segment width below working precision".into(),
            });
        }
        let (v1, e1) = gk15(&f, seg.a, m);
        let (v2, e2) = gk15(&f, m, seg.b);
        segs.push(Segment {
            a: seg.a,
            b: m,
            value: v1,
            error: e1,
        });
        segs.push(Segment {
            a: m,
            b: seg.b,
            value: v2,
            error: e2,
        });
    }
}

/// Integrates over `[a, ∞)` through the substitution `x = a + scale·s/(1-s)`.
/// The integrand must decay faster than `1/x`.
pub fn integrate_semi_infinite<T: Real, F: Fn(T) -> C<T>>(
    f: F,
    a: T,
    scale: T,
    cfg: &QuadConfig<T>,
) -> Result<QuadResult<T>> {
    let one = T::one();
    integrate(
        |s: T| {
            let u = one - s;
            let x = a + scale * s / u;
            f(x) * (scale / (u * u))
        },
        T::zero(),
        one,
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_exact() {
        let r = integrate(
            |x: f64| C::new(x * x * x - 2.0 * x, 1.0),
            -1.0,
            2.0,
            &QuadConfig::default(),
        )
        .unwrap();
        assert!((r.value - C::new(0.75, 3.0)).norm() < 1e-14);
    }

    #[test]
    fn oscillatory_and_semi_infinite() {
        let cfg = QuadConfig::default();
        let r = integrate(|x: f64| C::new(x.cos(), x.sin()), 0.0, 40.0, &cfg).unwrap();
        let exact = C::new(40f64.sin(), 1.0 - 40f64.cos());
        assert!((r.value - exact).norm() < 1e-12);
        let r = integrate_semi_infinite(|x: f64| C::new(1.0 / (1.0 + x * x), 0.0), 0.0, 1.0, &cfg).unwrap();
        assert!((r.value.re - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn reports_non_convergence() {
        let cfg = QuadConfig {
            max_intervals: 50,
            ..QuadConfig::default()
        };
        let r = integrate(|x: f64| C::new(1.0 / x, 0.0), 0.0, 1.0, &cfg);
        assert!(matches!(r, Err(DeomError::NoConvergence { .. })));
    }
}
