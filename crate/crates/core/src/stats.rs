//! Hypothesis tests for comparing runs (Welch t-test, one-way ANOVA) and
//! normal-approximation confidence intervals for proportions, together with
//! the special functions their p-values need.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_ITERATIONS: usize = 300;
/// Convergence target for continued fractions and series.
const TIGHT_TOLERANCE: f64 = 1e-15;
/// Largest acceptable residual when the iteration budget runs out.
const ABS_TOLERANCE: f64 = 1e-12;

const LANCZOS_G: f64 = 7.0;
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

/// Natural log of the gamma function for x > 0 (Lanczos approximation).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection: Gamma(x) Gamma(1 - x) = pi / sin(pi x)
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).abs().ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Modified Lentz evaluation of the incomplete-beta continued fraction.
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> Result<f64> {
    const TINY: f64 = 1e-300;
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
    let mut last_change = f64::INFINITY;
    for m in 1..=MAX_ITERATIONS {
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
        last_change = (del - 1.0).abs();
        if last_change < TIGHT_TOLERANCE {
            return Ok(h);
        }
    }
    if last_change < ABS_TOLERANCE {
        return Ok(h);
    }
    Err(Error::Numeric(format!(
        "incomplete beta did not converge for a={a}, b={b}, x={x}"
    )))
}

/// Regularized incomplete beta function I_x(a, b).
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
        return Err(Error::Stats(format!("incomplete beta needs a, b > 0 (got a={a}, b={b})")));
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Stats(format!("incomplete beta needs x in [0, 1], got {x}")));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    let value = if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x)? / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x)? / b
    };
    Ok(value.clamp(0.0, 1.0))
}

/// Regularized lower incomplete gamma P(a, x).
pub fn regularized_gamma_p(a: f64, x: f64) -> Result<f64> {
    if !(a > 0.0) || x < 0.0 {
        return Err(Error::Stats(format!("incomplete gamma needs a > 0, x >= 0 (a={a}, x={x})")));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    let ln_front = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..MAX_ITERATIONS * 10 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * TIGHT_TOLERANCE {
                return Ok((sum * ln_front.exp()).min(1.0));
            }
        }
        Err(Error::Numeric(format!("incomplete gamma series did not converge (a={a}, x={x})")))
    } else {
        Ok(1.0 - upper_gamma_continued_fraction(a, x, ln_front)?)
    }
}

fn upper_gamma_continued_fraction(a: f64, x: f64, ln_front: f64) -> Result<f64> {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..=MAX_ITERATIONS {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < TIGHT_TOLERANCE {
            return Ok(ln_front.exp() * h);
        }
    }
    Err(Error::Numeric(format!("incomplete gamma fraction did not converge (a={a}, x={x})")))
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    // Phi(x) = 1/2 * (1 + sign(x) * P(1/2, x^2 / 2))
    let p = regularized_gamma_p(0.5, x * x / 2.0).expect("valid gamma arguments");
    if x >= 0.0 {
        0.5 + 0.5 * p
    } else {
        0.5 - 0.5 * p
    }
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal quantile: rational initial guess refined by Newton steps
/// on [`normal_cdf`].
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Stats(format!("normal quantile needs p in (0, 1), got {p}")));
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let p_low = 0.024_25;
    let mut x = if p < p_low {
        tail((-2.0 * p.ln()).sqrt())
    } else if p > 1.0 - p_low {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    for _ in 0..3 {
        let density = normal_pdf(x);
        if density == 0.0 {
            break;
        }
        x -= (normal_cdf(x) - p) / density;
    }
    Ok(x)
}

/// CDF of Student's t distribution with `dof` degrees of freedom.
pub fn student_t_cdf(t: f64, dof: f64) -> Result<f64> {
    let tail = 0.5 * regularized_incomplete_beta(dof / 2.0, 0.5, dof / (dof + t * t))?;
    Ok(if t >= 0.0 { 1.0 - tail } else { tail })
}

/// Two-sided p-value of a t statistic.
pub fn student_t_two_sided_p(t: f64, dof: f64) -> Result<f64> {
    regularized_incomplete_beta(dof / 2.0, 0.5, dof / (dof + t * t))
}

/// Upper-tail probability of the F distribution.
pub fn f_survival(f: f64, df_num: f64, df_den: f64) -> Result<f64> {
    if f <= 0.0 {
        return Ok(1.0);
    }
    regularized_incomplete_beta(df_den / 2.0, df_num / 2.0, df_den / (df_den + df_num * f))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub statistic: f64,
    pub degrees_of_freedom: f64,
    pub p_value: f64,
}

fn mean_and_sample_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Welch's unequal-variance t-test (two-sided).
pub fn welch_t_test(sample_a: &[f64], sample_b: &[f64]) -> Result<TTestResult> {
    if sample_a.len() < 2 || sample_b.len() < 2 {
        return Err(Error::Stats("each sample needs at least two values".into()));
    }
    if sample_a.iter().chain(sample_b).any(|v| !v.is_finite()) {
        return Err(Error::Stats("samples contain non-finite values".into()));
    }
    let (mean_a, var_a) = mean_and_sample_variance(sample_a);
    let (mean_b, var_b) = mean_and_sample_variance(sample_b);
    let se_a = var_a / sample_a.len() as f64;
    let se_b = var_b / sample_b.len() as f64;
    let se2 = se_a + se_b;
    if se2 <= 0.0 {
        return Err(Error::Stats("both samples have zero variance".into()));
    }
    let statistic = (mean_a - mean_b) / se2.sqrt();
    let dof = se2 * se2
        / (se_a * se_a / (sample_a.len() as f64 - 1.0) + se_b * se_b / (sample_b.len() as f64 - 1.0));
    Ok(TTestResult {
        statistic,
        degrees_of_freedom: dof,
        p_value: student_t_two_sided_p(statistic, dof)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub f_statistic: f64,
    pub df_between: f64,
    pub df_within: f64,
    pub p_value: f64,
}

/// One-way ANOVA. Groups are put in a canonical order first so the result
/// does not depend on the order they are passed in.
pub fn one_way_anova(groups: &[Vec<f64>]) -> Result<AnovaResult> {
    if groups.len() < 2 || groups.iter().any(|g| g.len() < 2) {
        return Err(Error::Stats("ANOVA needs at least two groups of at least two values".into()));
    }
    if groups.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Stats("groups contain non-finite values".into()));
    }
    let mut ordered: Vec<&Vec<f64>> = groups.iter().collect();
    ordered.sort_by(|a, b| {
        a.len().cmp(&b.len()).then_with(|| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let total_n: usize = ordered.iter().map(|g| g.len()).sum();
    let grand = ordered.iter().flat_map(|g| g.iter()).sum::<f64>() / total_n as f64;
    let mut ss_between = 0.0;
    let mut ss_within = 0.0;
    for g in &ordered {
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        ss_between += g.len() as f64 * (mean - grand) * (mean - grand);
        ss_within += g.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>();
    }
    if ss_within <= 0.0 {
        return Err(Error::Stats("within-group variance is zero".into()));
    }
    let df_between = (ordered.len() - 1) as f64;
    let df_within = (total_n - ordered.len()) as f64;
    let f = (ss_between / df_between) / (ss_within / df_within);
    Ok(AnovaResult {
        f_statistic: f,
        df_between,
        df_within,
        p_value: f_survival(f, df_between, df_within)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub point_estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub confidence_level: f64,
}

impl ConfidenceInterval {
    /// Half-width before clamping to [0, 1] is not recoverable, so this is
    /// the larger distance from the estimate to either bound.
    pub fn half_width(&self) -> f64 {
        (self.point_estimate - self.lower).max(self.upper - self.point_estimate)
    }
}

/// Wald interval `p +- z * sqrt(p (1 - p) / n)` clamped to [0, 1].
pub fn proportion_ci_from_rate(rate: f64, n: u64, level: f64) -> Result<ConfidenceInterval> {
    if n == 0 || !(0.0..=1.0).contains(&rate) {
        return Err(Error::Stats(format!("need n >= 1 and a rate in [0, 1] (n={n}, rate={rate})")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Stats(format!("confidence level must be in (0, 1), got {level}")));
    }
    let z = normal_quantile(1.0 - (1.0 - level) / 2.0)?;
    let half = z * (rate * (1.0 - rate) / n as f64).sqrt();
    Ok(ConfidenceInterval {
        point_estimate: rate,
        lower: (rate - half).max(0.0),
        upper: (rate + half).min(1.0),
        confidence_level: level,
    })
}

pub fn proportion_ci(successes: u64, n: u64, level: f64) -> Result<ConfidenceInterval> {
    if successes > n {
        return Err(Error::Stats(format!("{successes} successes out of {n} trials")));
    }
    proportion_ci_from_rate(successes as f64 / n.max(1) as f64, n, level)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub significant: bool,
    pub alpha: f64,
    pub test: TTestResult,
}

/// Welch t-test between two sets of per-run metric values; significant when
/// `p <= alpha`, so `alpha = 1` accepts every comparison.
pub fn compare_models(runs_a: &[f64], runs_b: &[f64], alpha: f64) -> Result<Comparison> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Stats(format!("alpha must be in (0, 1], got {alpha}")));
    }
    let test = welch_t_test(runs_a, runs_b)?;
    Ok(Comparison {
        significant: test.p_value <= alpha,
        alpha,
        test,
    })
}
