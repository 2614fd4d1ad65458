//! Paired Wilcoxon signed-rank test: exact sign-enumeration null for small
//! samples, normal approximation with tie correction and continuity
//! correction above.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest sample size for which the exact 2^n enumeration is used.
pub const EXACT_MAX_N: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alternative {
    TwoSided,
    /// a tends to exceed b.
    Greater,
    /// a tends to fall below b.
    Less,
}

/// Two-sided test; returns `(W+, p)` where `W+` is the positive-rank sum of
/// the differences `a - b`. Zero differences are dropped; at least five
/// nonzero pairs are required.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    wilcoxon_signed_rank_alt(a, b, Alternative::TwoSided)
}

pub fn wilcoxon_signed_rank_alt(a: &[f64], b: &[f64], alt: Alternative) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(Error::DegenerateSample(
            "all paired differences are zero".to_string(),
        ));
    }
    if diffs.len() < 5 {
        return Err(Error::Config(format!(
            "need >= 5 nonzero paired differences, got {}",
            diffs.len()
        )));
    }
    let n = diffs.len();
    let ranks = average_ranks(&diffs);
    let w_plus: f64 = diffs
        .iter()
        .zip(ranks.iter())
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();

    let p = if n <= EXACT_MAX_N {
        exact_p(&ranks, w_plus, alt)
    } else {
        normal_p(&ranks, w_plus, alt)
    };
    Ok((w_plus, p.min(1.0)))
}

/// Ranks of |d| with average ranks for ties.
fn average_ranks(diffs: &[f64]) -> Vec<f64> {
    let n = diffs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        diffs[i]
            .abs()
            .partial_cmp(&diffs[j].abs())
            .expect("finite differences")
    });
    let mut ranks = vec![0.0; n];
    let mut pos = 0;
    while pos < n {
        let mut end = pos;
        while end + 1 < n && diffs[order[end + 1]].abs() == diffs[order[pos]].abs() {
            end += 1;
        }
        // ranks are 1-based; ties share the average of their rank block
        let avg = (pos + 1 + end + 1) as f64 / 2.0;
        for &idx in &order[pos..=end] {
            ranks[idx] = avg;
        }
        pos = end + 1;
    }
    ranks
}

/// Exhaustive null distribution over all 2^n sign assignments of the ranks.
fn exact_p(ranks: &[f64], w_obs: f64, alt: Alternative) -> f64 {
    let n = ranks.len();
    let total = 1usize << n;
    let mut count_ge = 0usize;
    let mut count_le = 0usize;
    let tol = 1e-9;
    for signs in 0..total {
        let mut w = 0.0;
        for (bit, r) in ranks.iter().enumerate() {
            if signs & (1 << bit) != 0 {
                w += r;
            }
        }
        if w >= w_obs - tol {
            count_ge += 1;
        }
        if w <= w_obs + tol {
            count_le += 1;
        }
    }
    let p_greater = count_ge as f64 / total as f64;
    let p_less = count_le as f64 / total as f64;
    match alt {
        Alternative::Greater => p_greater,
        Alternative::Less => p_less,
        Alternative::TwoSided => (2.0 * p_greater.min(p_less)).min(1.0),
    }
}

/// Normal approximation with tie correction and continuity correction.
fn normal_p(ranks: &[f64], w_obs: f64, alt: Alternative) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    // tie correction: subtract sum(t^3 - t)/48 over tie groups
    let mut sorted = ranks.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite ranks"));
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    let sd = var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let p_greater = 1.0 - normal.cdf((w_obs - mean - 0.5) / sd);
    let p_less = normal.cdf((w_obs - mean + 0.5) / sd);
    match alt {
        Alternative::Greater => p_greater,
        Alternative::Less => p_less,
        Alternative::TwoSided => (2.0 * p_greater.min(p_less)).min(1.0),
    }
}
