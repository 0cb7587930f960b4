//! Binomial confidence intervals for test-set accuracy.
//!
//! Two methods are provided: the Wilson score interval and the Jeffreys
//! (Beta(½, ½) prior) equal-tailed credible interval. Both are computed
//! without any statistics dependency; the special functions live in
//! [`special`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntervalMethod {
    Wilson,
    Bayesian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
    pub method: IntervalMethod,
    pub alpha: f64,
    pub n: u64,
    pub successes: u64,
}

impl ConfidenceInterval {
    pub fn point_estimate(&self) -> f64 {
        self.successes as f64 / self.n as f64
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, p: f64) -> bool {
        self.lower <= p && p <= self.upper
    }

    /// `"0.815 -- 0.948"`
    pub fn display_bounds(&self) -> String {
        format!("{:.3} -- {:.3}", self.lower, self.upper)
    }
}

fn validate(successes: u64, n: u64, alpha: f64) -> Result<()> {
    if n == 0 {
        return Err(Error::param("sample size must be at least 1"));
    }
    if successes > n {
        return Err(Error::param(format!("{successes} successes out of {n} trials")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::param(format!("alpha {alpha} not in (0, 1)")));
    }
    Ok(())
}

/// Wilson score interval at confidence `1 − alpha`.
pub fn wilson_interval(successes: u64, n: u64, alpha: f64) -> Result<ConfidenceInterval> {
    validate(successes, n, alpha)?;
    let z = special::normal_quantile(1.0 - alpha / 2.0);
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = p + z2 / (2.0 * nf);
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    let (mut lower, mut upper) = ((center - half) / denom, (center + half) / denom);
    if successes == 0 {
        lower = 0.0;
    }
    if successes == n {
        upper = 1.0;
    }
    Ok(ConfidenceInterval {
        lower: lower.clamp(0.0, p),
        upper: upper.clamp(p, 1.0),
        method: IntervalMethod::Wilson,
        alpha,
        n,
        successes,
    })
}

/// Jeffreys equal-tailed interval: the `alpha/2` and `1 − alpha/2` quantiles
/// of `Beta(successes + ½, n − successes + ½)`, with the bound pinned to 0
/// (or 1) when no failures (or no successes) make it one-sided.
pub fn bayesian_interval(successes: u64, n: u64, alpha: f64) -> Result<ConfidenceInterval> {
    validate(successes, n, alpha)?;
    let a = successes as f64 + 0.5;
    let b = (n - successes) as f64 + 0.5;
    let lower = if successes == 0 {
        0.0
    } else {
        special::beta_quantile(alpha / 2.0, a, b)?
    };
    let upper = if successes == n {
        1.0
    } else {
        special::beta_quantile(1.0 - alpha / 2.0, a, b)?
    };
    Ok(ConfidenceInterval {
        lower,
        upper,
        method: IntervalMethod::Bayesian,
        alpha,
        n,
        successes,
    })
}

/// Input row for [`interval_table`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalInput {
    pub study: String,
    pub model: String,
    pub successes: u64,
    pub n: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalRow {
    pub study: String,
    pub model: String,
    pub test_accuracy: f64,
    pub wilson: ConfidenceInterval,
    pub bayesian: ConfidenceInterval,
}

/// Column headers of the interval table CSV.
pub const INTERVAL_TABLE_HEADERS: [&str; 5] =
    ["Study", "Model", "Test accuracy", "Wilson Score", "Bayesian Interval"];

impl IntervalRow {
    pub fn csv_record(&self) -> [String; 5] {
        [
            self.study.clone(),
            self.model.clone(),
            format!("{:.2}", self.test_accuracy),
            self.wilson.display_bounds(),
            self.bayesian.display_bounds(),
        ]
    }
}

pub fn interval_table(records: &[IntervalInput], alpha: f64) -> Result<Vec<IntervalRow>> {
    records
        .iter()
        .map(|r| {
            Ok(IntervalRow {
                study: r.study.clone(),
                model: r.model.clone(),
                test_accuracy: r.successes as f64 / r.n.max(1) as f64,
                wilson: wilson_interval(r.successes, r.n, alpha)?,
                bayesian: bayesian_interval(r.successes, r.n, alpha)?,
            })
        })
        .collect()
}

pub fn write_interval_csv<W: std::io::Write>(rows: &[IntervalRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(INTERVAL_TABLE_HEADERS)?;
    for row in rows {
        w.write_record(row.csv_record())?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

pub mod special {
    //! Normal quantile, log-gamma, regularized incomplete beta and its inverse.

    use crate::error::{Error, Result};

    /// Maximum bisection steps for [`beta_quantile`].
    pub const MAX_BISECTION_STEPS: usize = 200;

    /// Standard normal quantile (Wichura's AS 241, about 1e-16 relative accuracy).
    #[allow(clippy::excessive_precision)]
    pub fn normal_quantile(p: f64) -> f64 {
        if p <= 0.0 {
            return f64::NEG_INFINITY;
        }
        if p >= 1.0 {
            return f64::INFINITY;
        }
        let q = p - 0.5;
        if q.abs() <= 0.425 {
            let r = 0.180625 - q * q;
            return q
                * (((((((r * 2509.0809287301226727 + 33430.575583588128105) * r
                    + 67265.770927008700853)
                    * r
                    + 45921.953931549871457)
                    * r
                    + 13731.693765509461125)
                    * r
                    + 1971.5909503065514427)
                    * r
                    + 133.14166789178437745)
                    * r
                    + 3.387132872796366608)
                / (((((((r * 5226.495278852545925 + 28729.085735721942674) * r
                    + 39307.89580009271061)
                    * r
                    + 21213.794301586595867)
                    * r
                    + 5394.1960214247511077)
                    * r
                    + 687.1870074920579083)
                    * r
                    + 42.313330701600911252)
                    * r
                    + 1.0);
        }
        let tail = if q < 0.0 { p } else { 1.0 - p };
        let mut r = (-tail.ln()).sqrt();
        let val = if r <= 5.0 {
            r -= 1.6;
            (((((((r * 7.7454501427834140764e-4 + 0.0227238449892691845833) * r
                + 0.24178072517745061177)
                * r
                + 1.27045825245236838258)
                * r
                + 3.64784832476320460504)
                * r
                + 5.7694972214606914055)
                * r
                + 4.6303378461565452959)
                * r
                + 1.42343711074968357734)
                / (((((((r * 1.05075007164441684324e-9 + 5.475938084995344946e-4) * r
                    + 0.0151986665636164571966)
                    * r
                    + 0.14810397642748007459)
                    * r
                    + 0.68976733498510000455)
                    * r
                    + 1.6763848301838038494)
                    * r
                    + 2.05319162663775882187)
                    * r
                    + 1.0)
        } else {
            r -= 5.0;
            (((((((r * 2.01033439929228813265e-7 + 2.71155556874348757815e-5) * r
                + 0.0012426609473880784386)
                * r
                + 0.026532189526576123093)
                * r
                + 0.29656057182850489123)
                * r
                + 1.7848265399172913358)
                * r
                + 5.4637849111641143699)
                * r
                + 6.6579046435011037772)
                / (((((((r * 2.04426310338993978564e-15 + 1.4215117583164458887e-7) * r
                    + 1.8463183175100546818e-5)
                    * r
                    + 7.868691311456132591e-4)
                    * r
                    + 0.0148753612908506148525)
                    * r
                    + 0.13692988092273580531)
                    * r
                    + 0.59983220655588793769)
                    * r
                    + 1.0)
        };
        if q < 0.0 {
            -val
        } else {
            val
        }
    }

    const LANCZOS: [f64; 9] = [
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

    /// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
    pub fn ln_gamma(x: f64) -> f64 {
        if x < 0.5 {
            // reflection
            let pi = std::f64::consts::PI;
            return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
        }
        let x = x - 1.0;
        let t = x + 7.5;
        let series = LANCZOS[1..]
            .iter()
            .enumerate()
            .fold(LANCZOS[0], |acc, (i, c)| acc + c / (x + i as f64 + 1.0));
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + series.ln()
    }

    /// Continued fraction for the incomplete beta (modified Lentz).
    fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
        const TINY: f64 = 1e-300;
        const EPS: f64 = 1e-16;
        let qab = a + b;
        let qap = a + 1.0;
        let qam = a - 1.0;
        let mut c = 1.0;
        let mut d = 1.0 - qab * x / qap;
        if d.abs() < TINY {
            d = TINY;
        }
        d = 1.0 / d;
        let mut h = d;
        for m in 1..=10_000 {
            let m = m as f64;
            let m2 = 2.0 * m;
            let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
            d = 1.0 + aa * d;
            if d.abs() < TINY {
                d = TINY;
            }
            c = 1.0 + aa / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            h *= d * c;
            let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
            d = 1.0 + aa * d;
            if d.abs() < TINY {
                d = TINY;
            }
            c = 1.0 + aa / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < EPS {
                break;
            }
        }
        h
    }

    /// Regularized incomplete beta `I_x(a, b)`.
    pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if x >= 1.0 {
            return 1.0;
        }
        let ln_front =
            ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
        let front = ln_front.exp();
        if x < (a + 1.0) / (a + b + 2.0) {
            front * beta_continued_fraction(x, a, b) / a
        } else {
            1.0 - front * beta_continued_fraction(1.0 - x, b, a) / b
        }
    }

    /// Inverse of [`regularized_incomplete_beta`] in `x`, by bisection.
    pub fn beta_quantile(p: f64, a: f64, b: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&p) || a <= 0.0 || b <= 0.0 {
            return Err(Error::param(format!("beta quantile of {p} for Beta({a}, {b})")));
        }
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..MAX_BISECTION_STEPS {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi || hi - lo < 1e-15 {
                return Ok(mid);
            }
            let cdf = regularized_incomplete_beta(mid, a, b);
            if !cdf.is_finite() {
                return Err(Error::NoConvergence {
                    steps: MAX_BISECTION_STEPS,
                });
            }
            if cdf < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Err(Error::NoConvergence {
            steps: MAX_BISECTION_STEPS,
        })
    }
}
