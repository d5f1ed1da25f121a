//! Special functions: log-gamma, digamma, the normal CDF, and the regularized
//! incomplete beta function with its inverse.

use crate::error::{Error, Result};
use crate::scalar::Real;

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Continued-fraction iteration cap for the incomplete beta and erfc.
const CF_MAX_ITER: usize = 1000;
/// Newton/bisection iteration cap for the inverse incomplete beta.
pub const INVERSE_MAX_ITER: usize = 200;

/// Natural log of the gamma function (Lanczos, g = 7, n = 9).
pub fn ln_gamma<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    if x < half {
        // Reflection: Γ(x)Γ(1-x) = π / sin(πx)
        let pi = T::PI();
        return (pi / (pi * x).sin().abs()).ln() - ln_gamma(T::one() - x);
    }
    let x = x - T::one();
    let mut acc = T::lit(LANCZOS_COEF[0]);
    for (i, &c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        acc = acc + T::lit(c) / (x + T::from_count(i));
    }
    let t = x + T::lit(LANCZOS_G) + half;
    half * (T::TAU()).ln() + (x + half) * t.ln() - t + acc.ln()
}

/// ln B(a, b) = ln Γ(a) + ln Γ(b) − ln Γ(a + b).
pub fn ln_beta<T: Real>(a: T, b: T) -> T {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Digamma ψ(x) for x > 0.
pub fn digamma<T: Real>(x: T) -> T {
    let mut x = x;
    let mut acc = T::zero();
    let ten = T::lit(10.0);
    while x < ten {
        acc = acc - x.recip();
        x = x + T::one();
    }
    let inv2 = (x * x).recip();
    // Asymptotic series in 1/x² with Bernoulli coefficients.
    let tail = inv2
        * (T::lit(1.0 / 12.0)
            - inv2
                * (T::lit(1.0 / 120.0)
                    - inv2 * (T::lit(1.0 / 252.0) - inv2 * (T::lit(1.0 / 240.0) - inv2 * T::lit(1.0 / 132.0)))));
    acc + x.ln() - T::lit(0.5) / x - tail
}

/// Complementary error function.
pub fn erfc<T: Real>(x: T) -> T {
    let two = T::lit(2.0);
    if x < T::zero() {
        return two - erfc(-x);
    }
    if x < two {
        T::one() - erf_series(x)
    } else {
        erfc_cf(x)
    }
}

/// erf(x) = 2/√π · e^{−x²} · Σ 2ⁿ x^{2n+1} / (1·3·…·(2n+1)); all terms positive.
fn erf_series<T: Real>(x: T) -> T {
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut n = 0usize;
    while n < CF_MAX_ITER {
        n += 1;
        term = term * T::lit(2.0) * x2 / T::from_count(2 * n + 1);
        sum = sum + term;
        if term < sum * T::epsilon() {
            break;
        }
    }
    T::lit(2.0) / T::PI().sqrt() * (-x2).exp() * sum
}

/// erfc(x) = e^{−x²}/√π · 1/(x + ½/(x + 1/(x + 3⁄2/(x + …)))), modified Lentz.
fn erfc_cf<T: Real>(x: T) -> T {
    let tiny = T::min_positive_value() / T::epsilon();
    let mut f = x;
    let mut c = x;
    let mut d = T::zero();
    for n in 1..CF_MAX_ITER {
        let an = T::from_count(n) * T::lit(0.5);
        d = x + an * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = x + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = d.recip();
        let delta = c * d;
        f = f * delta;
        if (delta - T::one()).abs() < T::epsilon() {
            break;
        }
    }
    (-x * x).exp() / T::PI().sqrt() / f
}

/// Standard normal CDF Φ(x).
pub fn std_normal_cdf<T: Real>(x: T) -> T {
    T::lit(0.5) * erfc(-x / T::SQRT_2())
}

/// Beta density at `x` given a precomputed ln B(a, b).
#[inline]
pub(crate) fn beta_pdf_with_lbeta<T: Real>(x: T, a: T, b: T, lbeta: T) -> T {
    if x <= T::zero() || x >= T::one() {
        return T::zero();
    }
    ((a - T::one()) * x.ln() + (b - T::one()) * (-x).ln_1p() - lbeta).exp()
}

/// Beta(a, b) density.
pub fn beta_pdf<T: Real>(x: T, a: T, b: T) -> T {
    beta_pdf_with_lbeta(x, a, b, ln_beta(a, b))
}

fn check_shapes<T: Real>(a: T, b: T) -> Result<()> {
    if !(a > T::zero() && b > T::zero()) || !a.is_finite() || !b.is_finite() {
        return Err(Error::Domain(format!(
            "incomplete beta shapes must be positive and finite, got a={a}, b={b}"
        )));
    }
    Ok(())
}

/// Regularized incomplete beta I_x(a, b). Inputs outside [0, 1] clamp to the
/// nearest edge value.
pub fn reg_inc_beta<T: Real>(x: T, a: T, b: T) -> Result<T> {
    check_shapes(a, b)?;
    reg_inc_beta_with_lbeta(x, a, b, ln_beta(a, b))
}

pub(crate) fn reg_inc_beta_with_lbeta<T: Real>(x: T, a: T, b: T, lbeta: T) -> Result<T> {
    if x.is_nan() {
        return Err(Error::Domain("incomplete beta at NaN".into()));
    }
    if x <= T::zero() {
        return Ok(T::zero());
    }
    if x >= T::one() {
        return Ok(T::one());
    }
    let ln_front = a * x.ln() + b * (-x).ln_1p() - lbeta;
    // Symmetry switch keeps the continued fraction in its fast region.
    if x > (a + T::one()) / (a + b + T::lit(2.0)) {
        let cf = inc_beta_cf(T::one() - x, b, a)?;
        Ok((T::one() - ln_front.exp() * cf / b).max(T::zero()))
    } else {
        let cf = inc_beta_cf(x, a, b)?;
        Ok((ln_front.exp() * cf / a).min(T::one()))
    }
}

/// Continued fraction for I_x(a,b), modified Lentz.
fn inc_beta_cf<T: Real>(x: T, a: T, b: T) -> Result<T> {
    let one = T::one();
    let two = T::lit(2.0);
    let tiny = T::min_positive_value() / T::epsilon();
    let eps = T::epsilon();
    let qab = a + b;
    let qap = a + one;
    let qam = a - one;

    let mut c = one;
    let mut d = one - qab * x / qap;
    if d.abs() < tiny {
        d = tiny;
    }
    d = d.recip();
    let mut h = d;
    for m in 1..=CF_MAX_ITER {
        let m = T::from_count(m);
        let m2 = two * m;
        // even step
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = one + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = one + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = d.recip();
        h = h * d * c;
        // odd step
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = one + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = one + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = d.recip();
        let del = d * c;
        h = h * del;
        if (del - one).abs() <= eps {
            return Ok(h);
        }
    }
    Err(Error::Convergence {
        what: "incomplete beta continued fraction",
        iterations: CF_MAX_ITER,
    })
}

/// Inverse of the regularized incomplete beta: the x with I_x(a, b) = p.
///
/// Works on the lower tail (swapping to I_{1-x}(b, a) = 1 - p when p > 1/2)
/// and runs a safeguarded Newton iteration in t = ln x, falling back to
/// bisection in t whenever Newton leaves the bracket or stalls.
pub fn inverse_reg_inc_beta<T: Real>(p: T, a: T, b: T) -> Result<T> {
    check_shapes(a, b)?;
    if p.is_nan() || p < T::zero() || p > T::one() {
        return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
    }
    if p == T::zero() {
        return Ok(T::zero());
    }
    if p == T::one() {
        return Ok(T::one());
    }
    let half = T::lit(0.5);
    if p > half {
        let y = lower_tail_inverse(T::one() - p, b, a)?;
        return Ok(T::one() - y);
    }
    lower_tail_inverse(p, a, b)
}

fn lower_tail_inverse<T: Real>(p: T, a: T, b: T) -> Result<T> {
    let lbeta = ln_beta(a, b);
    let floor = T::min_positive_value();
    if reg_inc_beta_with_lbeta(floor, a, b, lbeta)? >= p {
        return Ok(floor);
    }
    let ln_p = p.ln();
    let mut t_lo = floor.ln();
    let mut t_hi = T::zero();
    let mut t = initial_guess(p, a, b).ln().max(t_lo).min(T::zero());
    let mut last_step = -t_lo;
    let f_tol = T::epsilon() * T::lit(4.0) * p;
    let t_tol = T::epsilon() * T::lit(4.0);

    for _ in 0..INVERSE_MAX_ITER {
        let x = t.exp();
        let cdf = reg_inc_beta_with_lbeta(x, a, b, lbeta)?;
        if (cdf - p).abs() <= f_tol {
            return Ok(x);
        }
        if cdf < p {
            t_lo = t;
        } else {
            t_hi = t;
        }
        let slope = x * beta_pdf_with_lbeta(x, a, b, lbeta) / cdf;
        let newton = if cdf > T::zero() && slope > T::zero() && slope.is_finite() {
            t - (cdf.ln() - ln_p) / slope
        } else {
            T::nan()
        };
        let next = if newton > t_lo && newton < t_hi && (newton - t).abs() * T::lit(2.0) <= last_step {
            newton
        } else {
            T::lit(0.5) * (t_lo + t_hi)
        };
        last_step = (next - t).abs();
        // no representable progress left
        if last_step <= t_tol || t_hi - t_lo <= t_tol {
            return Ok(next.exp());
        }
        t = next;
    }
    Err(Error::Convergence {
        what: "inverse incomplete beta",
        iterations: INVERSE_MAX_ITER,
    })
}

/// Starting point for the Newton iteration (tail approximations for small
/// shapes, a normal approximation otherwise).
fn initial_guess<T: Real>(p: T, a: T, b: T) -> T {
    let one = T::one();
    let guess = if a >= one && b >= one {
        let pp = if p < T::lit(0.5) { p } else { one - p };
        let t = (T::lit(-2.0) * pp.ln()).sqrt();
        let mut z = (T::lit(2.30753) + t * T::lit(0.27061)) / (one + t * (T::lit(0.99229) + t * T::lit(0.04481))) - t;
        if p < T::lit(0.5) {
            z = -z;
        }
        let al = (z * z - T::lit(3.0)) / T::lit(6.0);
        let h = T::lit(2.0) / ((a + a - one).recip() + (b + b - one).recip());
        let w = z * (al + h).sqrt() / h
            - ((b + b - one).recip() - (a + a - one).recip())
                * (al + T::lit(5.0 / 6.0) - T::lit(2.0) / (T::lit(3.0) * h));
        a / (a + b * (T::lit(2.0) * w).exp())
    } else {
        let lna = (a / (a + b)).ln();
        let lnb = (b / (a + b)).ln();
        let t = (a * lna).exp() / a;
        let u = (b * lnb).exp() / b;
        let w = t + u;
        if p < t / w {
            (a * w * p).powf(a.recip())
        } else {
            one - (b * w * (one - p)).powf(b.recip())
        }
    };
    let lo = T::lit(1e-300).max(T::min_positive_value());
    if guess.is_finite() && guess > lo && guess < one {
        guess
    } else {
        T::lit(0.5)
    }
}
