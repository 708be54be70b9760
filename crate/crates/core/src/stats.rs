//! Weighted sample statistics used to compare datasets.

/// Weighted mean.
pub fn weighted_mean(x: &[f64], w: &[f64]) -> f64 {
    let total: f64 = w.iter().sum();
    x.iter().zip(w).map(|(x, w)| x * w).sum::<f64>() / total
}

/// Weighted population variance.
pub fn weighted_variance(x: &[f64], w: &[f64]) -> f64 {
    let mean = weighted_mean(x, w);
    let total: f64 = w.iter().sum();
    x.iter()
        .zip(w)
        .map(|(x, w)| w * (x - mean).powi(2))
        .sum::<f64>()
        / total
}

/// Standard error of the weighted mean, `sqrt(sum w^2 (x - m)^2) / sum w`.
/// Reduces to `s / sqrt(n)` for equal weights.
pub fn weighted_mean_se(x: &[f64], w: &[f64]) -> f64 {
    let mean = weighted_mean(x, w);
    let total: f64 = w.iter().sum();
    x.iter()
        .zip(w)
        .map(|(x, w)| (w * (x - mean)).powi(2))
        .sum::<f64>()
        .sqrt()
        / total
}

/// Standard error of the weighted variance, by the same linearization
/// applied to the squared deviations.
pub fn weighted_variance_se(x: &[f64], w: &[f64]) -> f64 {
    let mean = weighted_mean(x, w);
    let dev: Vec<f64> = x.iter().map(|x| (x - mean).powi(2)).collect();
    weighted_mean_se(&dev, w)
}

/// Kish effective sample size `(sum w)^2 / sum w^2`.
pub fn kish_ess(w: &[f64]) -> f64 {
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|w| w * w).sum();
    s * s / s2
}

/// Largest gap between the weighted empirical distribution functions of two
/// samples.
pub fn weighted_ks(x1: &[f64], w1: &[f64], x2: &[f64], w2: &[f64]) -> f64 {
    let sorted = |x: &[f64], w: &[f64]| {
        let total: f64 = w.iter().sum();
        let mut v: Vec<(f64, f64)> = x.iter().zip(w).map(|(&x, &w)| (x, w / total)).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    };
    let (a, b) = (sorted(x1, w1), sorted(x2, w2));
    let (mut i, mut j) = (0, 0);
    let (mut fa, mut fb) = (0.0f64, 0.0f64);
    let mut d = 0.0f64;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(p), Some(q)) => p.0.min(q.0),
            (Some(p), None) => p.0,
            (None, Some(q)) => q.0,
            (None, None) => unreachable!(),
        };
        while i < a.len() && a[i].0 == next {
            fa += a[i].1;
            i += 1;
        }
        while j < b.len() && b[j].0 == next {
            fb += b[j].1;
            j += 1;
        }
        d = d.max((fa - fb).abs());
    }
    d
}

/// Asymptotic two-sample KS critical value at the 1 % level for effective
/// sizes `n1` and `n2`.
pub fn ks_critical_1pct(n1: f64, n2: f64) -> f64 {
    1.628 * ((n1 + n2) / (n1 * n2)).sqrt()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Sample mean and standard deviation (n - 1 denominator).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
