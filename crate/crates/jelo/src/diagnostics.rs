//! Convergence diagnostics and posterior summarization: rank-normalized
//! split R-hat, bulk effective sample size via Geyer's initial monotone
//! positive sequence, and mean/sd/percentile summaries.

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q2_5: f64,
    pub q97_5: f64,
    pub rhat: f64,
    pub ess_bulk: f64,
    /// Set when the draws carry no rank information (zero within-chain
    /// variance on every split); rhat is then the +inf sentinel and
    /// ess_bulk is 0.
    pub constant: bool,
}

/// Truncate each chain to even length (dropping the last draw if odd) and
/// split it in half. All resulting sequences share the common minimum
/// length so the pooled statistics are balanced.
fn split_chains(chains: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if chains.is_empty() {
        return Err(Error::Domain("no chains supplied".into()));
    }
    let half = chains
        .iter()
        .map(|c| (c.len() - c.len() % 2) / 2)
        .min()
        .unwrap();
    if half < 4 {
        return Err(Error::Domain(format!(
            "need at least 4 draws per split half, got {half}"
        )));
    }
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        out.push(c[..half].to_vec());
        out.push(c[half..2 * half].to_vec());
    }
    Ok(out)
}

/// Pooled average-rank transform followed by the inverse normal CDF with
/// the (r - 3/8)/(S + 1/4) offset.
fn rank_normalize(seqs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let total: usize = seqs.iter().map(|s| s.len()).sum();
    let mut tagged: Vec<(f64, usize, usize)> = Vec::with_capacity(total);
    for (si, s) in seqs.iter().enumerate() {
        for (i, v) in s.iter().enumerate() {
            tagged.push((*v, si, i));
        }
    }
    tagged.sort_by(|a, b| a.0.total_cmp(&b.0));

    let normal = Normal::new(0.0, 1.0).unwrap();
    let s_total = total as f64;
    let mut out: Vec<Vec<f64>> = seqs.iter().map(|s| vec![0.0; s.len()]).collect();
    let mut i = 0;
    while i < total {
        let mut j = i;
        while j + 1 < total && tagged[j + 1].0 == tagged[i].0 {
            j += 1;
        }
        // average 1-based rank across the tie run [i, j]
        let rank = (i + j) as f64 / 2.0 + 1.0;
        let z = normal.inverse_cdf((rank - 0.375) / (s_total + 0.25));
        for t in &tagged[i..=j] {
            out[t.1][t.2] = z;
        }
        i = j + 1;
    }
    out
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_var(xs: &[f64], m: f64) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

struct PooledVariance {
    w: f64,
    var_plus: f64,
    n: usize,
}

fn pooled_variance(seqs: &[Vec<f64>]) -> PooledVariance {
    let n = seqs[0].len();
    let means: Vec<f64> = seqs.iter().map(|s| mean(s)).collect();
    let vars: Vec<f64> = seqs
        .iter()
        .zip(&means)
        .map(|(s, m)| sample_var(s, *m))
        .collect();
    let w = mean(&vars);
    let b_over_n = sample_var(&means, mean(&means));
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b_over_n;
    PooledVariance { w, var_plus, n }
}

fn all_splits_constant(splits: &[Vec<f64>]) -> bool {
    splits.iter().all(|s| s.iter().all(|x| *x == s[0]))
}

/// Rank-normalized split R-hat. Returns the statistic and a constancy
/// flag; zero within-chain variance on all splits yields (+inf, true).
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<(f64, bool)> {
    let splits = split_chains(chains)?;
    if all_splits_constant(&splits) {
        return Ok((f64::INFINITY, true));
    }
    let seqs = rank_normalize(&splits);
    let pv = pooled_variance(&seqs);
    if !(pv.w > 0.0) || !pv.w.is_finite() {
        return Ok((f64::INFINITY, true));
    }
    Ok(((pv.var_plus / pv.w).sqrt(), false))
}

/// Biased (1/n) autocovariance of one centered sequence at the given lag.
fn autocov(centered: &[f64], lag: usize) -> f64 {
    let n = centered.len();
    if lag >= n {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n - lag {
        acc += centered[i] * centered[i + lag];
    }
    acc / n as f64
}

/// Rank-normalized bulk ESS using the truncated sum of paired
/// autocorrelations (initial monotone positive sequence).
pub fn ess_bulk(chains: &[Vec<f64>]) -> Result<(f64, bool)> {
    let splits = split_chains(chains)?;
    if all_splits_constant(&splits) {
        return Ok((0.0, true));
    }
    let seqs = rank_normalize(&splits);
    let pv = pooled_variance(&seqs);
    if !(pv.w > 0.0) || !pv.w.is_finite() {
        return Ok((0.0, true));
    }
    let n = pv.n;
    let m = seqs.len();
    let centered: Vec<Vec<f64>> = seqs
        .iter()
        .map(|s| {
            let mu = mean(s);
            s.iter().map(|x| x - mu).collect()
        })
        .collect();
    let rho = |lag: usize| -> f64 {
        let acov = centered.iter().map(|c| autocov(c, lag)).sum::<f64>() / m as f64;
        1.0 - (pv.w - acov) / pv.var_plus
    };

    let mut gammas: Vec<f64> = Vec::new();
    let max_pair = (n - 1) / 2;
    for k in 0..=max_pair {
        let g = rho(2 * k) + rho(2 * k + 1);
        if g <= 0.0 {
            break;
        }
        gammas.push(g);
    }
    // enforce monotone non-increasing pair sums
    for k in 1..gammas.len() {
        if gammas[k] > gammas[k - 1] {
            gammas[k] = gammas[k - 1];
        }
    }
    let tau = (-1.0 + 2.0 * gammas.iter().sum::<f64>()).max(f64::EPSILON);
    Ok(((m * n) as f64 / tau, false))
}

/// Quantile by linear interpolation between order statistics (type-7
/// convention): h = (n-1)p, value = x[floor(h)] + frac(h) * gap.
pub fn percentile_type7(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    debug_assert!((0.0..=1.0).contains(&p));
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n as f64 - 1.0) * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Summary of one parameter from per-chain draw series. Mean, sd, and
/// percentiles come from the merged draws; R-hat and ESS from the split
/// chains.
pub fn summarize_param(name: &str, chains: &[Vec<f64>]) -> Result<ParamSummary> {
    let total: usize = chains.iter().map(|c| c.len()).sum();
    if total == 0 {
        return Err(Error::Domain(format!("no draws for parameter {name}")));
    }
    let mut merged: Vec<f64> = Vec::with_capacity(total);
    for c in chains {
        merged.extend_from_slice(c);
    }
    let m = mean(&merged);
    let sd = sample_var(&merged, m).sqrt();
    merged.sort_by(f64::total_cmp);
    let q2_5 = percentile_type7(&merged, 0.025);
    let q97_5 = percentile_type7(&merged, 0.975);
    let (rhat, constant) = split_rhat(chains)?;
    let (ess, _) = ess_bulk(chains)?;
    Ok(ParamSummary {
        name: name.to_string(),
        mean: m,
        sd,
        q2_5,
        q97_5,
        rhat,
        ess_bulk: ess,
        constant,
    })
}

/// Summaries for every named column of per-chain draw matrices
/// (chain -> draw -> value per name).
pub fn summarize_all(names: &[String], chain_draws: &[Vec<Vec<f64>>]) -> Result<Vec<ParamSummary>> {
    for c in chain_draws {
        for row in c {
            if row.len() != names.len() {
                return Err(Error::Domain(format!(
                    "draw row has {} values but {} names were given",
                    row.len(),
                    names.len()
                )));
            }
        }
    }
    names
        .par_iter()
        .enumerate()
        .map(|(j, name)| {
            let chains: Vec<Vec<f64>> = chain_draws
                .iter()
                .map(|c| c.iter().map(|row| row[j]).collect())
                .collect();
            summarize_param(name, &chains)
        })
        .collect()
}

/// Summary for a single named parameter; unknown names are an error.
pub fn summarize_one(
    names: &[String],
    chain_draws: &[Vec<Vec<f64>>],
    name: &str,
) -> Result<ParamSummary> {
    let j = names
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| Error::Config(format!("unknown parameter name '{name}'")))?;
    let chains: Vec<Vec<f64>> = chain_draws
        .iter()
        .map(|c| c.iter().map(|row| row[j]).collect())
        .collect();
    summarize_param(name, &chains)
}
