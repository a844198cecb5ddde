//! Per-category sigmoid losses and their closed-form logit gradients.
//!
//! Every gradient is expressed as the cross-entropy gradient `sigma(z) - y`
//! times a modulating factor, so the degenerate settings (focal with
//! `gamma = 0`, asymmetric with zero exponents and no clip) reproduce the
//! cross-entropy values bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFamily {
    SigmoidCe,
    Focal,
    Asymmetric,
}

impl LossFamily {
    pub fn short_name(self) -> &'static str {
        match self {
            LossFamily::SigmoidCe => "ce",
            LossFamily::Focal => "focal",
            LossFamily::Asymmetric => "asl",
        }
    }
}

impl std::str::FromStr for LossFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" | "sigmoid_ce" => Ok(LossFamily::SigmoidCe),
            "focal" | "fl" => Ok(LossFamily::Focal),
            "asl" | "asymmetric" => Ok(LossFamily::Asymmetric),
            other => Err(Error::invalid("loss", format!("unknown loss family `{other}`"))),
        }
    }
}

/// Loss family plus the hyperparameters of every family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub family: LossFamily,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub asl_gamma_pos: f64,
    pub asl_gamma_neg: f64,
    pub asl_clip: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            family: LossFamily::SigmoidCe,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            asl_gamma_pos: 0.0,
            asl_gamma_neg: 4.0,
            asl_clip: 0.05,
        }
    }
}

impl LossConfig {
    pub fn sigmoid_ce() -> Self {
        Self::default()
    }

    pub fn focal(alpha: f64, gamma: f64) -> Self {
        Self {
            family: LossFamily::Focal,
            focal_alpha: alpha,
            focal_gamma: gamma,
            ..Self::default()
        }
    }

    pub fn asymmetric(gamma_pos: f64, gamma_neg: f64, clip: f64) -> Self {
        Self {
            family: LossFamily::Asymmetric,
            asl_gamma_pos: gamma_pos,
            asl_gamma_neg: gamma_neg,
            asl_clip: clip,
            ..Self::default()
        }
    }

    pub fn with_family(self, family: LossFamily) -> Self {
        Self { family, ..self }
    }

    /// Checks the hyperparameters of the active family.
    pub fn validate(&self) -> Result<()> {
        match self.family {
            LossFamily::SigmoidCe => Ok(()),
            LossFamily::Focal => {
                if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
                    return Err(Error::invalid("focal_alpha", format!("{} not in (0, 1)", self.focal_alpha)));
                }
                if !(self.focal_gamma >= 0.0) || !self.focal_gamma.is_finite() {
                    return Err(Error::invalid("focal_gamma", format!("{} must be >= 0", self.focal_gamma)));
                }
                Ok(())
            }
            LossFamily::Asymmetric => {
                for (name, g) in [("asl_gamma_pos", self.asl_gamma_pos), ("asl_gamma_neg", self.asl_gamma_neg)] {
                    if !(g >= 0.0) || !g.is_finite() {
                        return Err(Error::invalid(name, format!("{g} must be >= 0")));
                    }
                }
                if !(self.asl_clip >= 0.0 && self.asl_clip < 1.0) {
                    return Err(Error::invalid("asl_clip", format!("{} not in [0, 1)", self.asl_clip)));
                }
                Ok(())
            }
        }
    }

    fn require(&self, family: LossFamily) -> Result<()> {
        if self.family != family {
            return Err(Error::invalid(
                "family",
                format!("expected {:?}, config selects {:?}", family, self.family),
            ));
        }
        self.validate()
    }
}

/// Logits with binary labels for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledLogits {
    logits: Vec<f64>,
    labels: Vec<bool>,
}

impl LabeledLogits {
    pub fn new(logits: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if logits.len() != labels.len() {
            return Err(Error::invalid(
                "labels",
                format!("{} labels for {} logits", labels.len(), logits.len()),
            ));
        }
        if let Some(i) = logits.iter().position(|z| !z.is_finite()) {
            return Err(Error::invalid("logits", format!("logit {i} is not finite")));
        }
        Ok(Self { logits, labels })
    }

    /// Builds the item from activation probabilities instead of logits.
    pub fn from_probabilities(probs: &[f64], labels: Vec<bool>) -> Result<Self> {
        Self::new(probs.iter().map(|&p| logit(p)).collect(), labels)
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().enumerate().filter(|(_, &y)| y).map(|(i, _)| i)
    }

    pub fn negatives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().enumerate().filter(|(_, &y)| !y).map(|(i, _)| i)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Smallest argument passed to a logarithm.
const LOG_FLOOR: f64 = 1e-12;

/// Probability of the target outcome, its complement, and its log, all from
/// stable log-sigmoid forms.
#[derive(Clone, Copy)]
struct Target {
    q: f64,
    one_minus_q: f64,
    log_q: f64,
    /// `sigma(z) - y`
    ce_grad: f64,
}

impl Target {
    fn new(z: f64, y: bool) -> Self {
        if y {
            let om = sigmoid(-z);
            Target {
                q: sigmoid(z),
                one_minus_q: om,
                log_q: -softplus(-z),
                ce_grad: -om,
            }
        } else {
            let p = sigmoid(z);
            Target {
                q: sigmoid(-z),
                one_minus_q: p,
                log_q: -softplus(z),
                ce_grad: p,
            }
        }
    }

    /// `d/dz` of `-(1-q)^gamma log q` divided by the cross-entropy gradient.
    fn focusing_factor(&self, gamma: f64) -> f64 {
        if gamma == 0.0 {
            return 1.0;
        }
        let om = self.one_minus_q;
        let lead = om.powf(gamma);
        let tail = if om == 0.0 {
            0.0
        } else {
            gamma * self.q * om.powf(gamma - 1.0) * self.log_q
        };
        lead - tail
    }
}

/// Per-category loss value.
pub fn element_loss(z: f64, y: bool, cfg: &LossConfig) -> f64 {
    let t = Target::new(z, y);
    match cfg.family {
        LossFamily::SigmoidCe => -t.log_q,
        LossFamily::Focal => {
            let a = if y { cfg.focal_alpha } else { 1.0 - cfg.focal_alpha };
            -a * t.one_minus_q.powf(cfg.focal_gamma) * t.log_q
        }
        LossFamily::Asymmetric => {
            if y {
                -t.one_minus_q.powf(cfg.asl_gamma_pos) * t.log_q
            } else if cfg.asl_clip == 0.0 {
                -t.one_minus_q.powf(cfg.asl_gamma_neg) * t.log_q
            } else {
                let p = t.one_minus_q;
                if p <= cfg.asl_clip {
                    return 0.0;
                }
                let pm = p - cfg.asl_clip;
                let keep = (t.q + cfg.asl_clip).max(LOG_FLOOR);
                -pm.powf(cfg.asl_gamma_neg) * keep.ln()
            }
        }
    }
}

/// Per-category `d loss / d z`.
pub fn element_grad(z: f64, y: bool, cfg: &LossConfig) -> f64 {
    let t = Target::new(z, y);
    match cfg.family {
        LossFamily::SigmoidCe => t.ce_grad,
        LossFamily::Focal => {
            let a = if y { cfg.focal_alpha } else { 1.0 - cfg.focal_alpha };
            a * t.ce_grad * t.focusing_factor(cfg.focal_gamma)
        }
        LossFamily::Asymmetric => {
            if y {
                t.ce_grad * t.focusing_factor(cfg.asl_gamma_pos)
            } else if cfg.asl_clip == 0.0 {
                t.ce_grad * t.focusing_factor(cfg.asl_gamma_neg)
            } else {
                let p = t.one_minus_q;
                let m = cfg.asl_clip;
                if p <= m {
                    return 0.0;
                }
                let gamma = cfg.asl_gamma_neg;
                let pm = p - m;
                let keep = (t.q + m).max(LOG_FLOOR);
                let mut d_pm = pm.powf(gamma) / keep;
                if gamma > 0.0 {
                    d_pm -= gamma * pm.powf(gamma - 1.0) * keep.ln();
                }
                d_pm * p * t.q
            }
        }
    }
}

fn gradient_vector(item: &LabeledLogits, cfg: &LossConfig) -> Vec<f64> {
    item.logits
        .iter()
        .zip(&item.labels)
        .map(|(&z, &y)| element_grad(z, y, cfg))
        .collect()
}

/// `sigma(z_c) - y_c` for every category.
pub fn sigmoid_ce_grad(item: &LabeledLogits) -> Vec<f64> {
    gradient_vector(item, &LossConfig::sigmoid_ce())
}

pub fn focal_grad(item: &LabeledLogits, cfg: &LossConfig) -> Result<Vec<f64>> {
    cfg.require(LossFamily::Focal)?;
    Ok(gradient_vector(item, cfg))
}

pub fn asymmetric_grad(item: &LabeledLogits, cfg: &LossConfig) -> Result<Vec<f64>> {
    cfg.require(LossFamily::Asymmetric)?;
    Ok(gradient_vector(item, cfg))
}

/// Gradient under whichever family `cfg` selects.
pub fn loss_grad(item: &LabeledLogits, cfg: &LossConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    Ok(gradient_vector(item, cfg))
}

/// Summed (unreduced) loss over categories.
pub fn loss_sum(item: &LabeledLogits, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    Ok(item
        .logits
        .iter()
        .zip(&item.labels)
        .map(|(&z, &y)| element_loss(z, y, cfg))
        .sum())
}

/// Mean loss over the categories not marked `ignored`, and its gradient
/// (zero on ignored categories).
pub fn masked_mean_loss(
    logits: &[f64],
    labels: &[bool],
    ignored: Option<&[bool]>,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    cfg.validate()?;
    if labels.len() != logits.len() || ignored.is_some_and(|m| m.len() != logits.len()) {
        return Err(Error::invalid("labels", "logits, labels and mask must have equal length"));
    }
    let active = |i: usize| ignored.is_none_or(|m| !m[i]);
    let count = (0..logits.len()).filter(|&i| active(i)).count();
    if count == 0 {
        return Ok((0.0, vec![0.0; logits.len()]));
    }
    let scale = 1.0 / count as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for i in (0..logits.len()).filter(|&i| active(i)) {
        value += element_loss(logits[i], labels[i], cfg);
        grad[i] = element_grad(logits[i], labels[i], cfg) * scale;
    }
    Ok((value * scale, grad))
}

/// Records the masked mean loss of the matrix `logits` (labels in row-major
/// order) as a scalar objective on `tape`.
pub fn loss_on_tape(
    tape: &mut Tape,
    logits: Var,
    labels: &[bool],
    ignored: Option<&[bool]>,
    cfg: &LossConfig,
) -> Result<Var> {
    let m = tape.value(logits);
    let (rows, cols) = m.shape();
    let (value, grad) = masked_mean_loss(m.as_slice(), labels, ignored, cfg)?;
    tape.objective(logits, value, Matrix::new(rows, cols, grad)?)
}

/// Dot-product scores between object queries (rows) and category queries (rows).
pub fn contrastive_alignment(object_queries: &Matrix, category_queries: &Matrix) -> Result<Matrix> {
    if object_queries.cols() != category_queries.cols() {
        return Err(Error::Shape {
            op: "contrastive_alignment",
            lhs: object_queries.shape(),
            rhs: category_queries.shape(),
        });
    }
    object_queries.matmul(&category_queries.transpose())
}

/// Differentiable form of [`contrastive_alignment`].
pub fn contrastive_alignment_on_tape(tape: &mut Tape, object_queries: Var, category_queries: Var) -> Result<Var> {
    let (o, c) = (tape.value(object_queries).shape(), tape.value(category_queries).shape());
    if o.1 != c.1 {
        return Err(Error::Shape {
            op: "contrastive_alignment",
            lhs: o,
            rhs: c,
        });
    }
    let ct = tape.transpose(category_queries);
    tape.matmul(object_queries, ct)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(z: f64, y: bool) -> LabeledLogits {
        LabeledLogits::new(vec![z], vec![y]).unwrap()
    }

    fn fd(z: f64, y: bool, cfg: &LossConfig) -> f64 {
        let h = 1e-5;
        (element_loss(z + h, y, cfg) - element_loss(z - h, y, cfg)) / (2.0 * h)
    }

    #[test]
    fn ce_at_zero() {
        assert_eq!(sigmoid_ce_grad(&one(0.0, true)), vec![-0.5]);
        assert_eq!(sigmoid_ce_grad(&one(0.0, false)), vec![0.5]);
    }

    #[test]
    fn ce_saturated_positive() {
        // sigma(20) - 1 = -1/(1 + e^20), evaluated with 40-digit arithmetic.
        let expected = -2.061_153_618_190_203_6e-9;
        let g = sigmoid_ce_grad(&one(20.0, true))[0];
        assert!((g - expected).abs() < 1e-22, "{g}");
    }

    #[test]
    fn focal_reference_point() {
        // 40-digit central difference (h = 1e-5) of the focal loss: -0.0745716987862
        let g = focal_grad(&one(0.0, true), &LossConfig::focal(0.25, 2.0)).unwrap()[0];
        assert!((g + 0.074_571_698_786_2).abs() < 1e-9, "{g}");
    }

    #[test]
    fn focal_gamma_zero_half_alpha_is_half_ce() {
        let cfg = LossConfig::focal(0.5, 0.0);
        for &z in &[-3.0, -0.2, 0.0, 1.7, 9.0] {
            for &y in &[true, false] {
                let f = focal_grad(&one(z, y), &cfg).unwrap()[0];
                assert_eq!(f, 0.5 * sigmoid_ce_grad(&one(z, y))[0]);
            }
        }
    }

    #[test]
    fn focal_easy_negative_vanishes() {
        let g = focal_grad(&one(-20.0, false), &LossConfig::focal(0.25, 2.0)).unwrap()[0];
        assert!(g >= 0.0 && g < 1e-25);
    }

    #[test]
    fn focal_rejects_negative_gamma() {
        assert!(focal_grad(&one(0.0, true), &LossConfig::focal(0.25, -1.0)).is_err());
    }

    #[test]
    fn family_mismatch_rejected() {
        assert!(focal_grad(&one(0.0, true), &LossConfig::sigmoid_ce()).is_err());
        assert!(asymmetric_grad(&one(0.0, true), &LossConfig::focal(0.25, 2.0)).is_err());
    }

    #[test]
    fn degenerate_asl_is_ce() {
        let cfg = LossConfig::asymmetric(0.0, 0.0, 0.0);
        let item = LabeledLogits::new(vec![-4.0, -0.3, 0.0, 2.5, 7.0], vec![true, false, true, false, false]).unwrap();
        assert_eq!(asymmetric_grad(&item, &cfg).unwrap(), sigmoid_ce_grad(&item));
    }

    #[test]
    fn asl_clipped_negative_is_zero() {
        let cfg = LossConfig::asymmetric(0.0, 4.0, 0.05);
        let z = logit(0.03);
        assert_eq!(asymmetric_grad(&one(z, false), &cfg).unwrap()[0], 0.0);
        assert_eq!(element_loss(z, false, &cfg), 0.0);
    }

    #[test]
    fn asl_reference_point() {
        let cfg = LossConfig::asymmetric(0.0, 4.0, 0.05);
        let g = asymmetric_grad(&one(1.0, false), &cfg).unwrap()[0];
        assert!((g - fd(1.0, false, &cfg)).abs() < 1e-8);
        // 40-digit derivative of -(p - m)^4 ln(1 - p + m) at z = 1
        assert!((g - 0.416_533_900_052_139_8).abs() < 1e-12, "{g}");
    }

    #[test]
    fn asl_rejects_clip_of_one() {
        assert!(asymmetric_grad(&one(0.0, false), &LossConfig::asymmetric(0.0, 4.0, 1.0)).is_err());
    }

    #[test]
    fn mismatched_labels_rejected() {
        assert!(LabeledLogits::new(vec![0.0, 1.0], vec![true]).is_err());
        assert!(LabeledLogits::new(vec![f64::NAN], vec![true]).is_err());
    }

    #[test]
    fn masked_mean_ignores_masked_entries() {
        let cfg = LossConfig::sigmoid_ce();
        let (v, g) = masked_mean_loss(&[0.0, 3.0, -1.0], &[true, false, false], Some(&[false, true, false]), &cfg).unwrap();
        let expect = (softplus(0.0) + softplus(-1.0)) / 2.0;
        assert!((v - expect).abs() < 1e-15);
        assert_eq!(g[1], 0.0);
        assert!((g[0] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn alignment_identity_and_zero() {
        let eye = Matrix::identity(4);
        assert_eq!(contrastive_alignment(&eye, &eye).unwrap(), eye);
        let z = contrastive_alignment(&Matrix::zeros(2, 4), &eye).unwrap();
        assert!(z.as_slice().iter().all(|v| *v == 0.0));
        assert!(contrastive_alignment(&Matrix::zeros(2, 3), &eye).is_err());
    }
}
