//! Summary statistics and the two-sided Mann-Whitney U test.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest per-sample size for which the exact permutation distribution is used.
pub const EXACT_LIMIT: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MannWhitney {
    /// U of the first sample: the number of (a, b) pairs with a > b, ties counting 1/2.
    pub u: f64,
    pub p_value: f64,
    pub exact: bool,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator); 0 for fewer than two values.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Midranks (1-based) of the pooled sample. NaNs are rejected.
fn midranks(pooled: &[f64]) -> Result<Vec<f64>> {
    if pooled.iter().any(|x| x.is_nan()) {
        return Err(Error::Stats("sample contains NaN".into()));
    }
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&i, &j| pooled[i].total_cmp(&pooled[j]));
    let mut ranks = vec![0.0; pooled.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    Ok(ranks)
}

/// Two-sided Mann-Whitney U test of `a` against `b`.
///
/// Uses the exact permutation distribution of the midrank sum when both
/// samples have at most [`EXACT_LIMIT`] values, otherwise a normal
/// approximation with tie and continuity correction.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Stats("Mann-Whitney U needs two nonempty samples".into()));
    }
    let (n1, n2) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled)?;
    let r1: f64 = ranks[..n1].iter().sum();
    let u = r1 - (n1 * (n1 + 1)) as f64 / 2.0;
    let mu = (n1 * n2) as f64 / 2.0;

    if n1 <= EXACT_LIMIT && n2 <= EXACT_LIMIT {
        return Ok(MannWhitney { u, p_value: exact_p(&ranks, n1, r1), exact: true });
    }

    let n = (n1 + n2) as f64;
    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
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
    let var = (n1 * n2) as f64 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    let p_value = if var <= 0.0 {
        1.0
    } else {
        let z = ((u - mu).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).unwrap();
        (2.0 * normal.sf(z)).min(1.0)
    };
    Ok(MannWhitney { u, p_value, exact: false })
}

/// P(|R - E R| >= |r1 - E R|) where R is the rank sum of a uniformly random
/// size-`n1` subset of the pooled midranks.
fn exact_p(ranks: &[f64], n1: usize, r1: f64) -> f64 {
    // Doubled midranks are integers.
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max_sum: usize = doubled.iter().sum();
    // ways[k][s]: number of k-subsets with doubled rank sum s.
    let mut ways = vec![vec![0.0f64; max_sum + 1]; n1 + 1];
    ways[0][0] = 1.0;
    for &d in &doubled {
        for k in (1..=n1).rev() {
            let (lo, hi) = ways.split_at_mut(k);
            let (prev, cur) = (&lo[k - 1], &mut hi[0]);
            for s in (d..=max_sum).rev() {
                cur[s] += prev[s - d];
            }
        }
    }
    let total: f64 = ways[n1].iter().sum();
    let centre = n1 * (ranks.len() + 1); // twice the expected rank sum
    let observed = ((2.0 * r1).round() as usize).abs_diff(centre);
    let extreme: f64 = ways[n1]
        .iter()
        .enumerate()
        .filter(|(s, _)| s.abs_diff(centre) >= observed)
        .map(|(_, w)| w)
        .sum();
    (extreme / total).min(1.0)
}
