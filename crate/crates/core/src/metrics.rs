//! Rank-based AUC and a user-level paired bootstrap for AUC differences.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredInstance {
    pub user_id: String,
    pub week: usize,
    pub score: f64,
    pub label: bool,
}

/// Average (1-based) ranks; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // Positions i+1 ..= j share rank (i + 1 + j) / 2.
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Mann–Whitney AUC from rank sums: `(#concordant + ½ #tied) / (#pos · #neg)`.
pub fn auc_scores(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Input(format!("non-finite score {s}")));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes; got {n_pos} positive and {n_neg} negative"
        )));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

pub fn auc(scored: &[ScoredInstance]) -> Result<f64> {
    let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
    let labels: Vec<bool> = scored.iter().map(|s| s.label).collect();
    auc_scores(&scores, &labels)
}

/// Spearman rank correlation; `None` when either input is constant or shorter than 2.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub auc_a: f64,
    pub auc_b: f64,
    /// `auc_b − auc_a`
    pub delta: f64,
    pub p_value: f64,
    pub replicates: usize,
}

/// Paired cluster bootstrap over users for `AUC(b) − AUC(a)`.
///
/// Both inputs must score the same `(user, week)` set with the same labels.
/// Each replicate resamples users with replacement, keeping all of a resampled
/// user's instances; replicates that draw a single class are redrawn. The
/// two-sided p-value is `min(1, (2·min(#δ ≤ 0, #δ ≥ 0) + 1) / (B + 1))`.
pub fn paired_bootstrap(
    scored_a: &[ScoredInstance],
    scored_b: &[ScoredInstance],
    replicates: usize,
    seed: u64,
) -> Result<ComparisonReport> {
    if replicates < 100 {
        return Err(Error::Input(format!("bootstrap needs at least 100 replicates, got {replicates}")));
    }
    let key = |s: &ScoredInstance| (s.user_id.clone(), s.week);
    let mut b_by_key: BTreeMap<(String, usize), &ScoredInstance> = BTreeMap::new();
    for s in scored_b {
        if b_by_key.insert(key(s), s).is_some() {
            return Err(Error::Input(format!("duplicate instance ({}, {}) in b", s.user_id, s.week)));
        }
    }
    if scored_a.len() != scored_b.len() {
        return Err(Error::Input("score sets cover different instances".into()));
    }
    // user -> list of (score_a, score_b, label)
    let mut clusters: BTreeMap<&str, Vec<(f64, f64, bool)>> = BTreeMap::new();
    for s in scored_a {
        let other = b_by_key
            .get(&key(s))
            .ok_or_else(|| Error::Input(format!("instance ({}, {}) missing from b", s.user_id, s.week)))?;
        if other.label != s.label {
            return Err(Error::Input(format!("label mismatch for ({}, {})", s.user_id, s.week)));
        }
        clusters.entry(s.user_id.as_str()).or_default().push((s.score, other.score, s.label));
    }
    let auc_a = auc(scored_a)?;
    let auc_b = {
        let ordered: Vec<ScoredInstance> =
            scored_a.iter().map(|s| b_by_key[&key(s)].clone()).collect();
        auc(&ordered)?
    };
    let clusters: Vec<&Vec<(f64, f64, bool)>> = clusters.values().collect();
    let (mut le, mut ge) = (0usize, 0usize);
    let (mut sa, mut sb, mut lab) = (Vec::new(), Vec::new(), Vec::new());
    for r in 0..replicates {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let delta = loop {
            sa.clear();
            sb.clear();
            lab.clear();
            for _ in 0..clusters.len() {
                for &(a, b, l) in clusters[rng.gen_range(0..clusters.len())] {
                    sa.push(a);
                    sb.push(b);
                    lab.push(l);
                }
            }
            match (auc_scores(&sa, &lab), auc_scores(&sb, &lab)) {
                (Ok(a), Ok(b)) => break b - a,
                (Err(Error::UndefinedMetric(_)), _) => continue,
                (Err(e), _) | (_, Err(e)) => return Err(e),
            }
        };
        le += usize::from(delta <= 0.0);
        ge += usize::from(delta >= 0.0);
    }
    let count = 2 * le.min(ge);
    let p_value = ((count + 1) as f64 / (replicates + 1) as f64).min(1.0);
    Ok(ComparisonReport { auc_a, auc_b, delta: auc_b - auc_a, p_value, replicates })
}
