//! Sample summaries shared by the warp significance analysis, posterior
//! prediction and scoring.

/// Linear-interpolation quantile of already sorted data (the common "type 7"
/// definition). `sorted` must be nonempty.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Equal-tailed interval holding `level` of the mass.
pub fn equal_tailed_interval(sorted: &[f64], level: f64) -> (f64, f64) {
    let tail = (1.0 - level) / 2.0;
    (quantile_sorted(sorted, tail), quantile_sorted(sorted, 1.0 - tail))
}

pub fn sort_floats(v: &mut [f64]) {
    v.sort_by(|a, b| a.total_cmp(b));
}

/// One-sample Kolmogorov-Smirnov distance between the empirical
/// distribution of `sorted` and a continuous `cdf`.
pub fn ks_statistic(sorted: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let n = sorted.len() as f64;
    sorted.iter().enumerate().fold(0.0, |d, (i, &x)| {
        let f = cdf(x);
        d.max(f - i as f64 / n).max((i + 1) as f64 / n - f)
    })
}

/// Mean, standard deviation, skewness and (Pearson, non-excess) kurtosis.
///
/// Standard deviation uses the `n` divisor so that a one-point sample has
/// zero spread; skewness and kurtosis are zero for constant samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub sd: f64,
    pub skewness: f64,
    pub kurtosis: f64,
}

pub fn moments(xs: &[f64]) -> Moments {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in xs {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let sd = m2.sqrt();
    if m2 <= 0.0 {
        return Moments { mean, sd: 0.0, skewness: 0.0, kurtosis: 0.0 };
    }
    Moments { mean, sd, skewness: m3 / m2.powf(1.5), kurtosis: m4 / (m2 * m2) }
}
