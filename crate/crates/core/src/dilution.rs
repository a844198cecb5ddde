//! Gradient-dilution metrics at the classification logits.
//!
//! * [`rho`]: positive gradient magnitude over the summed negative magnitude.
//! * [`eta`]: share of negative gradient mass carried by the hardest negatives.
//! * [`rho_generalized`]: sample-count weighted ratio separating class
//!   imbalance from vocabulary size.
//! * [`rebalance_factor`]: how much a category subset shrinks the negative mass.
//! * [`simulate_trace`]: gradient descent on a batch of logits, recording all
//!   of the above per iteration.

use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{element_grad, sigmoid, LabeledLogits, LossConfig};

pub const DEFAULT_HARD_FRACTION: f64 = 0.10;
pub const DEFAULT_DIVERGENCE_THRESHOLD: f64 = 1e4;

fn magnitudes(item: &LabeledLogits, loss: &LossConfig) -> Result<Vec<f64>> {
    loss.validate()?;
    Ok(item
        .logits()
        .iter()
        .zip(item.labels())
        .map(|(&z, &y)| element_grad(z, y, loss).abs())
        .collect())
}

/// Mean positive gradient magnitude divided by the summed negative magnitude.
///
/// Returns `f64::INFINITY` when the negatives carry no gradient at all.
pub fn rho(item: &LabeledLogits, loss: &LossConfig) -> Result<f64> {
    let mags = magnitudes(item, loss)?;
    let (mut pos, mut n_pos, mut neg) = (0.0, 0usize, 0.0);
    for (m, &y) in mags.iter().zip(item.labels()) {
        if y {
            pos += m;
            n_pos += 1;
        } else {
            neg += m;
        }
    }
    if n_pos == 0 {
        return Err(Error::invalid("item", "rho needs at least one positive label"));
    }
    let pos = pos / n_pos as f64;
    Ok(if neg == 0.0 { f64::INFINITY } else { pos / neg })
}

/// Negatives ordered hardest first: by activation, ties to the lower index.
fn ranked_negatives(item: &LabeledLogits) -> Vec<usize> {
    let mut neg: Vec<usize> = item.negatives().collect();
    let z = item.logits();
    neg.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    neg
}

/// Number of hard negatives among `negatives` for the given fraction.
pub fn hard_count(negatives: usize, hard_fraction: f64) -> usize {
    ((hard_fraction * negatives as f64).ceil() as usize).min(negatives)
}

/// Fraction of negative gradient mass carried by the top
/// `ceil(hard_fraction * #negatives)` negatives by activation.
pub fn eta(item: &LabeledLogits, loss: &LossConfig, hard_fraction: f64) -> Result<f64> {
    if !(hard_fraction > 0.0 && hard_fraction <= 1.0) {
        return Err(Error::invalid("hard_fraction", format!("{hard_fraction} not in (0, 1]")));
    }
    let mags = magnitudes(item, loss)?;
    let ranked = ranked_negatives(item);
    if ranked.is_empty() {
        return Err(Error::invalid("item", "eta needs at least one negative label"));
    }
    let k = hard_count(ranked.len(), hard_fraction);
    let total: f64 = ranked.iter().map(|&i| mags[i]).sum();
    let hard: f64 = ranked[..k].iter().map(|&i| mags[i]).sum();
    Ok(if total == 0.0 { 0.0 } else { (hard / total).clamp(0.0, 1.0) })
}

/// Sample-count weighted signal ratio `n+ eps+ / ((N - n+) eps-)`, with
/// `eps+`/`eps-` the mean positive/negative gradient magnitudes of `item`.
pub fn rho_generalized(cfg: &DilutionConfig, item: &LabeledLogits) -> Result<f64> {
    if cfg.n_pos == 0 {
        return Err(Error::invalid("n_pos", "must be at least 1"));
    }
    if cfg.n_total <= cfg.n_pos {
        return Err(Error::invalid(
            "n_total",
            format!("{} must exceed n_pos = {}", cfg.n_total, cfg.n_pos),
        ));
    }
    let mags = magnitudes(item, &cfg.loss)?;
    let mean = |want: bool| {
        let (s, n) = mags
            .iter()
            .zip(item.labels())
            .filter(|(_, &y)| y == want)
            .fold((0.0, 0usize), |(s, n), (m, _)| (s + m, n + 1));
        (n > 0).then(|| s / n as f64)
    };
    let eps_pos = mean(true).ok_or_else(|| Error::invalid("item", "needs a positive label"))?;
    let eps_neg = mean(false).ok_or_else(|| Error::invalid("item", "needs a negative label"))?;
    let den = (cfg.n_total - cfg.n_pos) as f64 * eps_neg;
    Ok(if den == 0.0 {
        f64::INFINITY
    } else {
        cfg.n_pos as f64 * eps_pos / den
    })
}

/// Total negative gradient mass over all categories divided by the mass over
/// the `selected` subset, i.e. the growth of `rho` caused by the selection.
pub fn rebalance_factor(full: &LabeledLogits, selected: &[usize], loss: &LossConfig) -> Result<f64> {
    let mut keep = vec![false; full.len()];
    for &i in selected {
        if i >= full.len() {
            return Err(Error::invalid(
                "selected",
                format!("category {i} out of range for {} categories", full.len()),
            ));
        }
        keep[i] = true;
    }
    let missing: Vec<usize> = full.positives().filter(|&i| !keep[i]).collect();
    if !missing.is_empty() {
        return Err(Error::SelectionMissedPositives { missing });
    }
    let mags = magnitudes(full, loss)?;
    let (mut all, mut kept) = (0.0, 0.0);
    for i in full.negatives() {
        all += mags[i];
        if keep[i] {
            kept += mags[i];
        }
    }
    Ok(if kept == 0.0 { f64::INFINITY } else { all / kept })
}

/// Settings for [`simulate_trace`] and [`rho_generalized`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DilutionConfig {
    pub categories: usize,
    /// Categories kept in the loss each iteration: the positives plus the
    /// highest-scoring negatives. Equal to `categories` means no selection.
    pub selected: usize,
    pub n_total: usize,
    pub n_pos: usize,
    pub hard_fraction: f64,
    pub loss: LossConfig,
    pub lr: f64,
    pub iters: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub positives_per_image: usize,
    pub init_mean: f64,
    pub init_std: f64,
    pub divergence_threshold: f64,
}

impl DilutionConfig {
    pub fn new(categories: usize, loss: LossConfig) -> Self {
        Self {
            categories,
            selected: categories,
            n_total: 1000,
            n_pos: 10,
            hard_fraction: DEFAULT_HARD_FRACTION,
            loss,
            lr: 0.1,
            iters: 2000,
            seed: 0,
            batch_size: 4,
            positives_per_image: 1,
            init_mean: -2.0,
            init_std: 1.0,
            divergence_threshold: DEFAULT_DIVERGENCE_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.positives_per_image == 0 {
            return Err(Error::invalid("positives_per_image", "must be at least 1"));
        }
        if self.categories <= self.positives_per_image {
            return Err(Error::invalid(
                "categories",
                format!("{} leaves no negatives", self.categories),
            ));
        }
        if self.selected > self.categories || self.selected <= self.positives_per_image {
            return Err(Error::invalid(
                "selected",
                format!(
                    "{} must be in ({}, {}]",
                    self.selected, self.positives_per_image, self.categories
                ),
            ));
        }
        if !(self.hard_fraction > 0.0 && self.hard_fraction <= 1.0) {
            return Err(Error::invalid("hard_fraction", format!("{} not in (0, 1]", self.hard_fraction)));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid("lr", format!("{} must be finite and >= 0", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if !(self.init_std >= 0.0) || !(self.divergence_threshold > 0.0) {
            return Err(Error::invalid("init_std", "init_std >= 0 and divergence_threshold > 0 required"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub rho: f64,
    pub eta: f64,
    pub pos_grad_norm: f64,
    pub neg_grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DilutionTrace {
    pub records: Vec<TraceRecord>,
    /// Iteration whose update pushed some logit past the divergence threshold.
    pub diverged_at: Option<usize>,
}

pub const TRACE_CSV_HEADER: &str = "iter,rho,eta,pos_grad_norm,neg_grad_norm";

impl DilutionTrace {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    /// Mean of `rho` over the first `n` records.
    pub fn mean_rho(&self, n: usize) -> f64 {
        let window = &self.records[..n.min(self.records.len())];
        if window.is_empty() {
            return f64::NAN;
        }
        window.iter().map(|r| r.rho).sum::<f64>() / window.len() as f64
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{TRACE_CSV_HEADER}")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.iter, r.rho, r.eta, r.pos_grad_norm, r.neg_grad_norm
            )?;
        }
        Ok(())
    }
}

/// Gradient descent directly on a batch of logits.
///
/// Each image starts with logits drawn from `N(init_mean, init_std)` and a
/// uniformly planted positive set. Every iteration computes the per-logit
/// loss gradient over the active categories (all of them, or the positives
/// plus the top-scoring negatives when `selected < categories`), records
/// batch-level `rho`, `eta` and gradient norms, then steps every active logit
/// by `-lr * grad`. Metrics aggregate over the batch: `rho` is the mean
/// positive magnitude over the mean per-image negative mass, `eta` is the
/// hard share of the pooled negative mass.
///
/// If an update leaves any logit non-finite or beyond
/// `divergence_threshold` in magnitude, the trace stops there and
/// `diverged_at` is set.
pub fn simulate_trace(cfg: &DilutionConfig) -> Result<DilutionTrace> {
    cfg.validate()?;
    let c = cfg.categories;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Normal::new(cfg.init_mean, cfg.init_std).map_err(|e| Error::invalid("init_std", e.to_string()))?;

    let mut logits: Vec<Vec<f64>> = Vec::with_capacity(cfg.batch_size);
    let mut labels: Vec<Vec<bool>> = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        logits.push((0..c).map(|_| init.sample(&mut rng)).collect());
        let mut y = vec![false; c];
        for i in sample(&mut rng, c, cfg.positives_per_image) {
            y[i] = true;
        }
        labels.push(y);
    }

    let mut trace = DilutionTrace {
        records: Vec::with_capacity(cfg.iters),
        diverged_at: None,
    };
    let mut negs: Vec<usize> = Vec::with_capacity(c);
    for iter in 0..cfg.iters {
        let (mut pos_sum, mut pos_n, mut pos_sq) = (0.0, 0usize, 0.0);
        let (mut neg_sum, mut neg_sq, mut hard_sum) = (0.0, 0.0, 0.0);
        let mut updates: Vec<Vec<(usize, f64)>> = Vec::with_capacity(cfg.batch_size);

        for (z, y) in logits.iter().zip(&labels) {
            negs.clear();
            negs.extend((0..c).filter(|&i| !y[i]));
            // Partitioning is enough: only set membership matters below.
            let harder = |a: &usize, b: &usize| z[*b].total_cmp(&z[*a]).then(a.cmp(b));
            let n_active_neg = cfg.selected - cfg.positives_per_image;
            if n_active_neg < negs.len() {
                negs.select_nth_unstable_by(n_active_neg - 1, harder);
                negs.truncate(n_active_neg);
            }

            let mut step = Vec::with_capacity(cfg.selected);
            for i in (0..c).filter(|&i| y[i]) {
                let g = element_grad(z[i], true, &cfg.loss);
                pos_sum += g.abs();
                pos_sq += g * g;
                pos_n += 1;
                step.push((i, g));
            }
            let hard = hard_count(negs.len(), cfg.hard_fraction);
            if hard > 0 && hard < negs.len() {
                negs.select_nth_unstable_by(hard - 1, harder);
            }
            for (rank, &i) in negs.iter().enumerate() {
                let g = element_grad(z[i], false, &cfg.loss);
                neg_sum += g.abs();
                neg_sq += g * g;
                if rank < hard {
                    hard_sum += g.abs();
                }
                step.push((i, g));
            }
            updates.push(step);
        }

        let mean_neg_mass = neg_sum / cfg.batch_size as f64;
        let mean_pos = pos_sum / pos_n as f64;
        trace.records.push(TraceRecord {
            iter,
            rho: if mean_neg_mass == 0.0 { f64::INFINITY } else { mean_pos / mean_neg_mass },
            eta: if neg_sum == 0.0 { 0.0 } else { (hard_sum / neg_sum).clamp(0.0, 1.0) },
            pos_grad_norm: pos_sq.sqrt(),
            neg_grad_norm: neg_sq.sqrt(),
        });

        let mut diverged = false;
        for (z, step) in logits.iter_mut().zip(&updates) {
            for &(i, g) in step {
                z[i] -= cfg.lr * g;
                if !z[i].is_finite() || z[i].abs() > cfg.divergence_threshold {
                    diverged = true;
                }
            }
        }
        if diverged {
            trace.diverged_at = Some(iter);
            break;
        }
    }
    Ok(trace)
}

/// Mean activation `E[sigma(z)]` over the listed categories.
pub fn mean_activation(item: &LabeledLogits, indices: impl IntoIterator<Item = usize>) -> f64 {
    let (s, n) = indices
        .into_iter()
        .fold((0.0, 0usize), |(s, n), i| (s + sigmoid(item.logits()[i]), n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(pos: &[f64], neg: &[f64]) -> LabeledLogits {
        let mut p: Vec<f64> = pos.to_vec();
        p.extend_from_slice(neg);
        let mut y = vec![true; pos.len()];
        y.extend(std::iter::repeat_n(false, neg.len()));
        LabeledLogits::from_probabilities(&p, y).unwrap()
    }

    #[test]
    fn rho_small_cases() {
        let ce = LossConfig::sigmoid_ce();
        let r = rho(&item(&[0.2], &[0.2; 4]), &ce).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        let r = rho(&item(&[0.5], &[0.5; 100]), &ce).unwrap();
        assert!((r - 0.01).abs() < 1e-15);
    }

    #[test]
    fn rho_without_positive_rejected() {
        assert!(rho(&item(&[], &[0.3, 0.4]), &LossConfig::sigmoid_ce()).is_err());
    }

    #[test]
    fn rho_with_silent_negatives_is_infinite() {
        let cfg = LossConfig::asymmetric(0.0, 4.0, 0.05);
        let r = rho(&item(&[0.4], &[0.01, 0.02]), &cfg).unwrap();
        assert!(r.is_infinite());
    }

    #[test]
    fn eta_small_cases() {
        let ce = LossConfig::sigmoid_ce();
        let mut neg = vec![0.9; 10];
        neg.extend(vec![0.1; 90]);
        let e = eta(&item(&[0.5], &neg), &ce, 0.1).unwrap();
        assert!((e - 0.5).abs() < 1e-12);
        let e = eta(&item(&[0.5], &[0.3; 50]), &ce, 0.1).unwrap();
        assert!((e - 0.1).abs() < 1e-12);
    }

    #[test]
    fn eta_requires_negatives() {
        assert!(eta(&item(&[0.5, 0.6], &[]), &LossConfig::sigmoid_ce(), 0.1).is_err());
    }

    #[test]
    fn generalized_rho_rejects_bad_counts() {
        let mut cfg = DilutionConfig::new(10, LossConfig::sigmoid_ce());
        cfg.n_pos = 5;
        cfg.n_total = 5;
        assert!(rho_generalized(&cfg, &item(&[0.5], &[0.5])).is_err());
        cfg.n_pos = 0;
        cfg.n_total = 5;
        assert!(rho_generalized(&cfg, &item(&[0.5], &[0.5])).is_err());
    }

    #[test]
    fn rebalance_uniform_selection() {
        let ce = LossConfig::sigmoid_ce();
        let full = item(&[0.5], &vec![0.5; 9999]);
        let keep: Vec<usize> = (0..100).collect();
        let f = rebalance_factor(&full, &keep, &ce).unwrap();
        assert!((f - 101.0).abs() < 1e-9);
        let all: Vec<usize> = (0..10000).collect();
        assert_eq!(rebalance_factor(&full, &all, &ce).unwrap(), 1.0);
    }

    #[test]
    fn rebalance_reports_missing_positive() {
        let full = item(&[0.5, 0.5], &[0.1, 0.2]);
        let err = rebalance_factor(&full, &[0, 2], &LossConfig::sigmoid_ce()).unwrap_err();
        assert!(matches!(err, Error::SelectionMissedPositives { missing } if missing == vec![1]));
    }

    #[test]
    fn frozen_dynamics_give_constant_trace() {
        let mut cfg = DilutionConfig::new(50, LossConfig::focal(0.25, 2.0));
        cfg.lr = 0.0;
        cfg.iters = 20;
        let t = simulate_trace(&cfg).unwrap();
        assert_eq!(t.records.len(), 20);
        for r in &t.records {
            assert_eq!((r.rho, r.eta, r.pos_grad_norm), (t.records[0].rho, t.records[0].eta, t.records[0].pos_grad_norm));
        }
    }

    #[test]
    fn zero_iterations_give_header_only_csv() {
        let mut cfg = DilutionConfig::new(10, LossConfig::sigmoid_ce());
        cfg.iters = 0;
        let mut buf = Vec::new();
        simulate_trace(&cfg).unwrap().write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{TRACE_CSV_HEADER}\n"));
    }

    #[test]
    fn config_validation() {
        let mut cfg = DilutionConfig::new(10, LossConfig::sigmoid_ce());
        cfg.selected = 11;
        assert!(simulate_trace(&cfg).is_err());
        cfg.selected = 1;
        assert!(simulate_trace(&cfg).is_err());
        let cfg = DilutionConfig::new(1, LossConfig::sigmoid_ce());
        assert!(simulate_trace(&cfg).is_err());
    }

    #[test]
    fn runaway_step_is_flagged() {
        let mut cfg = DilutionConfig::new(20, LossConfig::sigmoid_ce());
        cfg.lr = 1e6;
        let t = simulate_trace(&cfg).unwrap();
        assert_eq!(t.diverged_at, Some(0));
        assert_eq!(t.records.len(), 1);
    }
}
