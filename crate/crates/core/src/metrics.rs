//! Detection metrics with OOD as the positive class and OOD-high scores.

use crate::error::{Error, Result};

/// 1-based ranks with ties replaced by their mean rank.
pub fn midranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn check_sides(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::domain("metric needs nonempty ID and OOD score sets"));
    }
    if id.iter().chain(ood).any(|v| v.is_nan()) {
        return Err(Error::domain("NaN score"));
    }
    Ok(())
}

/// Mann–Whitney statistic: number of (OOD, ID) pairs with the OOD score
/// higher, ties counted one half.
pub fn mann_whitney_u(id: &[f64], ood: &[f64]) -> Result<f64> {
    check_sides(id, ood)?;
    let all: Vec<f64> = ood.iter().chain(id).copied().collect();
    let ranks = midranks(&all);
    let rank_sum: f64 = ranks[..ood.len()].iter().sum();
    let n_o = ood.len() as f64;
    Ok(rank_sum - n_o * (n_o + 1.0) / 2.0)
}

pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    let u = mann_whitney_u(id, ood)?;
    Ok(u / (id.len() as f64 * ood.len() as f64))
}

/// False-positive rate at the smallest threshold that flags at least 95 %
/// of OOD samples.
pub fn fpr_at_tpr95(id: &[f64], ood: &[f64]) -> Result<f64> {
    check_sides(id, ood)?;
    if ood.len() < 20 {
        log::warn!("FPR95 with only {} OOD scores is a coarse quantile", ood.len());
    }
    let mut sorted = ood.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = (95 * ood.len()).div_ceil(100);
    let threshold = sorted[k - 1];
    let fp = id.iter().filter(|&&s| s >= threshold).count();
    Ok(fp as f64 / id.len() as f64)
}

/// Average precision with OOD positive; tied scores form one threshold.
pub fn aupr(id: &[f64], ood: &[f64]) -> Result<f64> {
    check_sides(id, ood)?;
    let mut all: Vec<(f64, bool)> = ood
        .iter()
        .map(|&s| (s, true))
        .chain(id.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_pos = ood.len() as f64;
    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let mut new_tp = 0;
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                new_tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        tp += new_tp;
        if new_tp > 0 {
            ap += (new_tp as f64 / n_pos) * (tp as f64 / (tp + fp) as f64);
        }
        i = j;
    }
    Ok(ap)
}
