//! Image-guided query selection.
//!
//! Category queries attend to image tokens through two enhancement layers
//! (cross-attention, residual + layer norm, feed-forward, residual + layer
//! norm), a linear map turns each enhanced query into one logit, and the top-K
//! categories per image are kept together with their enhanced queries.

use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{loss_on_tape, masked_mean_loss, LossConfig, LossFamily};
use crate::synth::{stream_rng, streams, SyntheticSample};
use crate::taxonomy::{ancestor_mask, CategoryRelations, CategoryTree};
use crate::tensor::{
    AttentionConfig, Bound, FeedForward, LayerNorm, Linear, Matrix, MultiHeadAttention, Optimizer,
    OptimizerKind, ParamId, ParamStore, RowMix, Tape, Var, DEFAULT_INIT_STD,
};

pub const ENHANCE_LAYERS: usize = 2;

/// 100 for vocabularies above ten thousand, 30 (or `C`) up to a hundred, and
/// a tenth of the vocabulary clamped to `[30, 100]` in between.
pub fn default_k(categories: usize) -> usize {
    if categories > 10_000 {
        100
    } else if categories <= 100 {
        categories.min(30)
    } else {
        (categories / 10).clamp(30, 100)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub categories: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub init_std: f64,
    pub query_init_std: f64,
    pub seed: u64,
}

impl SelectionConfig {
    pub fn new(categories: usize, dim: usize) -> Self {
        Self {
            categories,
            dim,
            heads: AttentionConfig::DEFAULT_HEADS,
            ffn_hidden: dim,
            init_std: DEFAULT_INIT_STD,
            query_init_std: 1.0,
            seed: 0,
        }
    }
}

/// How category queries are correlated before enhancement.
#[derive(Clone, Debug)]
pub enum QueryRelations {
    Independent,
    /// Bottom-up tree aggregation, recomputed from the raw queries every pass.
    Hierarchy(Arc<RowMix>),
    /// A learned self-attention block over all queries.
    SelfAttention,
}

#[derive(Clone, Debug)]
struct EnhanceLayer {
    cross: MultiHeadAttention,
    attn_norm: LayerNorm,
    ffn: FeedForward,
    ffn_norm: LayerNorm,
}

impl EnhanceLayer {
    fn forward(&self, tape: &mut Tape, params: &Bound, queries: Var, image: Var) -> Result<Var> {
        let attended = self.cross.forward(tape, params, queries, image, image)?;
        let x = tape.add(attended, queries)?;
        let x = self.attn_norm.forward(tape, params, x)?;
        let f = self.ffn.forward(tape, params, x)?;
        let y = tape.add(f, x)?;
        self.ffn_norm.forward(tape, params, y)
    }
}

#[derive(Clone, Debug)]
pub struct SelectionModule {
    cfg: SelectionConfig,
    params: ParamStore,
    queries: ParamId,
    hierarchy: Option<Arc<RowMix>>,
    relations: Option<CategoryRelations>,
    layers: Vec<EnhanceLayer>,
    projection: Linear,
}

/// Tape handles for one image.
#[derive(Clone, Copy, Debug)]
pub struct ScoredVars {
    /// `C x 1`.
    pub logits: Var,
    /// `C x D`.
    pub enhanced: Var,
}

impl SelectionModule {
    pub fn new(cfg: SelectionConfig, relations: QueryRelations) -> Result<Self> {
        if cfg.categories == 0 {
            return Err(Error::invalid("categories", "must be positive"));
        }
        let attn = AttentionConfig::new(cfg.heads, cfg.dim)?;
        let mut rng = stream_rng(cfg.seed, streams::PARAMS);
        let mut params = ParamStore::new();
        let queries = params.add(
            "category_queries",
            Matrix::random_normal(cfg.categories, cfg.dim, cfg.query_init_std, &mut rng),
        );
        let (hierarchy, relation_block) = match relations {
            QueryRelations::Independent => (None, None),
            QueryRelations::Hierarchy(mix) => {
                if mix.input_rows() != cfg.categories || mix.output_rows() != cfg.categories {
                    return Err(Error::invalid(
                        "relations",
                        format!(
                            "hierarchy over {} nodes for {} categories",
                            mix.input_rows(),
                            cfg.categories
                        ),
                    ));
                }
                (Some(mix), None)
            }
            QueryRelations::SelfAttention => (
                None,
                Some(CategoryRelations::new(&mut params, "relations", attn, cfg.init_std, &mut rng)),
            ),
        };
        let mut layers = Vec::with_capacity(ENHANCE_LAYERS);
        for l in 0..ENHANCE_LAYERS {
            let name = format!("enhance{l}");
            layers.push(EnhanceLayer {
                cross: MultiHeadAttention::new(&mut params, &format!("{name}.cross"), attn, cfg.init_std, &mut rng),
                attn_norm: LayerNorm::new(&mut params, &format!("{name}.attn_norm"), cfg.dim),
                ffn: FeedForward::new(&mut params, &format!("{name}.ffn"), cfg.dim, cfg.ffn_hidden, cfg.init_std, &mut rng)?,
                ffn_norm: LayerNorm::new(&mut params, &format!("{name}.ffn_norm"), cfg.dim),
            });
        }
        let projection = Linear::new(&mut params, "projection", cfg.dim, 1, cfg.init_std, &mut rng);
        Ok(Self {
            cfg,
            params,
            queries,
            hierarchy,
            relations: relation_block,
            layers,
            projection,
        })
    }

    pub fn config(&self) -> &SelectionConfig {
        &self.cfg
    }

    pub fn categories(&self) -> usize {
        self.cfg.categories
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn query_param(&self) -> ParamId {
        self.queries
    }

    /// Output projection of the cross-attention in layer `layer`.
    pub fn cross_output(&self, layer: usize) -> &Linear {
        &self.layers[layer].cross.output
    }

    pub fn projection(&self) -> &Linear {
        &self.projection
    }

    /// Raw category queries with the configured relations applied.
    pub fn correlated_queries(&self, tape: &mut Tape, params: &Bound) -> Result<Var> {
        let q = params.var(self.queries);
        let q = match &self.hierarchy {
            Some(mix) => tape.row_mix(q, Arc::clone(mix))?,
            None => q,
        };
        match &self.relations {
            Some(block) => block.forward(tape, params, q),
            None => Ok(q),
        }
    }

    /// Enhances `queries` (`C x D`) against one image's tokens (`T x D`).
    pub fn score_on_tape(&self, tape: &mut Tape, params: &Bound, queries: Var, image: Var) -> Result<ScoredVars> {
        let (q, f) = (tape.value(queries).shape(), tape.value(image).shape());
        if q.1 != self.cfg.dim || f.1 != self.cfg.dim || f.0 == 0 {
            return Err(Error::Shape {
                op: "enhance_and_score",
                lhs: q,
                rhs: f,
            });
        }
        let mut x = queries;
        for layer in &self.layers {
            x = layer.forward(tape, params, x, image)?;
        }
        let logits = self.projection.forward(tape, params, x)?;
        Ok(ScoredVars { logits, enhanced: x })
    }

    /// Per-category logits and enhanced queries for one image.
    pub fn enhance_and_score(&self, image_features: &Matrix) -> Result<(Vec<f64>, Matrix)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let q = self.correlated_queries(&mut tape, &bound)?;
        self.finish_scoring(tape, &bound, q, image_features)
    }

    /// Like [`Self::enhance_and_score`] but starting from caller-supplied
    /// (already correlated) queries.
    pub fn enhance_and_score_with(&self, queries: &Matrix, image_features: &Matrix) -> Result<(Vec<f64>, Matrix)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let q = tape.leaf(queries.clone());
        self.finish_scoring(tape, &bound, q, image_features)
    }

    fn finish_scoring(&self, mut tape: Tape, bound: &Bound, q: Var, image: &Matrix) -> Result<(Vec<f64>, Matrix)> {
        let f = tape.leaf(image.clone());
        let s = self.score_on_tape(&mut tape, bound, q, f)?;
        Ok((tape.value(s.logits).as_slice().to_vec(), tape.value(s.enhanced).clone()))
    }

    pub fn select(&self, image_features: &Matrix, k: usize) -> Result<SelectionResult> {
        let (logits, enhanced) = self.enhance_and_score(image_features)?;
        topk_select(&logits, &enhanced, k)
    }

    /// Selection for many images, sharing the query correlation pass.
    pub fn select_batch(&self, images: &[&Matrix], k: usize) -> Result<Vec<SelectionResult>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let q = self.correlated_queries(&mut tape, &bound)?;
        let queries = tape.value(q).clone();
        images
            .iter()
            .map(|img| {
                let (logits, enhanced) = self.enhance_and_score_with(&queries, img)?;
                topk_select(&logits, &enhanced, k)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult {
    /// Selected category indices, by decreasing logit.
    pub indices: Vec<usize>,
    pub logits: Vec<f64>,
    /// Row `i` is the enhanced query of `indices[i]`.
    pub selected_queries: Matrix,
}

/// Keeps the `k` largest logits; equal logits go to the lower index.
pub fn topk_select(logits: &[f64], enhanced: &Matrix, k: usize) -> Result<SelectionResult> {
    let c = logits.len();
    if enhanced.rows() != c {
        return Err(Error::Shape {
            op: "topk_select",
            lhs: (c, 1),
            rhs: enhanced.shape(),
        });
    }
    if k == 0 || k > c {
        return Err(Error::invalid("k", format!("need 1 <= k <= {c}, got {k}")));
    }
    if let Some(i) = logits.iter().position(|z| z.is_nan()) {
        return Err(Error::invalid("logits", format!("NaN logit at category {i}")));
    }
    let order = |a: &usize, b: &usize| logits[*b].total_cmp(&logits[*a]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..c).collect();
    if k < c {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    idx.sort_unstable_by(order);
    Ok(SelectionResult {
        logits: idx.iter().map(|&i| logits[i]).collect(),
        selected_queries: enhanced.gather_rows(&idx)?,
        indices: idx,
    })
}

/// `|selected ∩ GT| / |GT|` with each ground-truth category counted once;
/// `None` for an empty ground truth.
pub fn category_recall(selected: &SelectionResult, ground_truth: &[usize]) -> Option<f64> {
    let mut gt = ground_truth.to_vec();
    gt.sort_unstable();
    gt.dedup();
    if gt.is_empty() {
        return None;
    }
    let hits = gt.iter().filter(|g| selected.indices.contains(g)).count();
    Some(hits as f64 / gt.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RecallSummary {
    pub mean: f64,
    /// Standard error of the mean (sample standard deviation / sqrt(n)).
    pub std_error: f64,
    pub images: usize,
    /// Images left out because their ground truth was empty.
    pub skipped_empty: usize,
}

pub fn summarize_recall(per_image: impl IntoIterator<Item = Option<f64>>) -> RecallSummary {
    let mut values = Vec::new();
    let mut skipped = 0;
    for r in per_image {
        match r {
            Some(v) => values.push(v),
            None => skipped += 1,
        }
    }
    let n = values.len();
    let mean = if n == 0 { f64::NAN } else { values.iter().sum::<f64>() / n as f64 };
    let std_error = if n < 2 {
        0.0
    } else {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    };
    RecallSummary {
        mean,
        std_error,
        images: n,
        skipped_empty: skipped,
    }
}

/// Dataset-level AR^C at each of `ks` from a single scoring pass per image.
pub fn recall_at_ks(module: &SelectionModule, data: &[SyntheticSample], ks: &[usize]) -> Result<Vec<RecallSummary>> {
    let mut tape = Tape::new();
    let bound = module.params().bind(&mut tape);
    let q = module.correlated_queries(&mut tape, &bound)?;
    let queries = tape.value(q).clone();
    let mut per_k: Vec<Vec<Option<f64>>> = vec![Vec::with_capacity(data.len()); ks.len()];
    for s in data {
        let (logits, enhanced) = module.enhance_and_score_with(&queries, &s.image_features)?;
        for (slot, &k) in per_k.iter_mut().zip(ks) {
            let sel = topk_select(&logits, &enhanced, k)?;
            slot.push(category_recall(&sel, &s.ground_truth));
        }
    }
    Ok(per_k.into_iter().map(summarize_recall).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Cosine decay of the learning rate from `lr` towards zero over the run.
    pub cosine_decay: bool,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub k: usize,
    pub loss: LossConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(k: usize) -> Self {
        Self {
            epochs: 30,
            lr: 4e-3,
            cosine_decay: true,
            optimizer: OptimizerKind::Adam,
            batch_size: 8,
            k,
            loss: LossConfig::asymmetric(0.0, 4.0, 0.05),
            seed: 0,
        }
    }

    pub fn validate(&self, categories: usize) -> Result<()> {
        if self.loss.family != LossFamily::Asymmetric {
            return Err(Error::invalid("loss", "the selection stage is supervised with the asymmetric loss"));
        }
        self.loss.validate()?;
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid("lr", format!("must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if self.k == 0 || self.k > categories {
            return Err(Error::invalid("k", format!("need 1 <= k <= {categories}, got {}", self.k)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Epoch 0 is the untrained loss; later epochs average the batch losses.
    pub loss: f64,
    pub arc_recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Divergence {
    pub epoch: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainingReport {
    pub records: Vec<EpochRecord>,
    pub diverged: Option<Divergence>,
}

pub const REPORT_CSV_HEADER: &str = "epoch,loss,arc_recall";

impl TrainingReport {
    pub fn final_recall(&self) -> Option<f64> {
        self.records.last().map(|r| r.arc_recall)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{REPORT_CSV_HEADER}")?;
        for r in &self.records {
            writeln!(out, "{},{:e},{:e}", r.epoch, r.loss, r.arc_recall)?;
        }
        Ok(())
    }
}

fn labels_and_mask(sample: &SyntheticSample, categories: usize, tree: Option<&CategoryTree>) -> Result<(Vec<bool>, Option<Vec<bool>>)> {
    let mut labels = vec![false; categories];
    for &g in &sample.ground_truth {
        if g >= categories {
            return Err(Error::invalid("ground_truth", format!("category {g} out of range")));
        }
        labels[g] = true;
    }
    Ok((labels, tree.map(|t| ancestor_mask(t, &sample.ground_truth))))
}

/// Mean masked loss and AR^C at `k` over `data`, without updating anything.
/// Non-finite logits are reported as [`Error::Diverged`].
pub fn evaluate(
    module: &SelectionModule,
    data: &[SyntheticSample],
    k: usize,
    loss: &LossConfig,
    tree: Option<&CategoryTree>,
) -> Result<(f64, RecallSummary)> {
    let mut tape = Tape::new();
    let bound = module.params().bind(&mut tape);
    let q = module.correlated_queries(&mut tape, &bound)?;
    let queries = tape.value(q).clone();
    let mut total = 0.0;
    let mut recalls = Vec::with_capacity(data.len());
    for s in data {
        let (logits, enhanced) = module.enhance_and_score_with(&queries, &s.image_features)?;
        if let Some(c) = logits.iter().position(|z| !z.is_finite()) {
            return Err(Error::Diverged {
                epoch: 0,
                reason: format!("logit {} for category {c}", logits[c]),
            });
        }
        let (labels, mask) = labels_and_mask(s, module.categories(), tree)?;
        total += masked_mean_loss(&logits, &labels, mask.as_deref(), loss)?.0;
        recalls.push(category_recall(&topk_select(&logits, &enhanced, k)?, &s.ground_truth));
    }
    let mean = if data.is_empty() { 0.0 } else { total / data.len() as f64 };
    Ok((mean, summarize_recall(recalls)))
}

/// Loss of one minibatch and the gradient of every module parameter.
pub fn batch_gradients(
    module: &SelectionModule,
    batch: &[&SyntheticSample],
    loss: &LossConfig,
    tree: Option<&CategoryTree>,
) -> Result<(f64, Vec<Matrix>)> {
    if batch.is_empty() {
        return Err(Error::invalid("batch", "must not be empty"));
    }
    let mut tape = Tape::new();
    let bound = module.params().bind(&mut tape);
    let q = module.correlated_queries(&mut tape, &bound)?;
    let mut total: Option<Var> = None;
    for s in batch {
        let image = tape.leaf(s.image_features.clone());
        let scored = module.score_on_tape(&mut tape, &bound, q, image)?;
        let (labels, mask) = labels_and_mask(s, module.categories(), tree)?;
        let l = loss_on_tape(&mut tape, scored.logits, &labels, mask.as_deref(), loss)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    let out = tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64);
    let value = tape.value(out).get(0, 0);
    let grads = tape.backward(out)?;
    Ok((value, bound.gradients(module.params(), &grads)))
}

/// Trains every selection parameter, category queries included, against the
/// asymmetric loss over all `C` logits. With a tree, strict ancestors of the
/// ground truth are left out of the loss. Epoch 0 reports the untrained state.
/// A non-finite loss stops training, restores the last good parameters and is
/// reported in [`TrainingReport::diverged`].
pub fn train_selection_stage(
    module: &mut SelectionModule,
    data: &[SyntheticSample],
    cfg: &TrainConfig,
    tree: Option<&CategoryTree>,
) -> Result<TrainingReport> {
    cfg.validate(module.categories())?;
    if let Some(t) = tree {
        if t.len() != module.categories() {
            return Err(Error::invalid(
                "tree",
                format!("{} nodes for {} categories", t.len(), module.categories()),
            ));
        }
    }
    let mut report = TrainingReport::default();
    let (loss0, recall0) = evaluate(module, data, cfg.k, &cfg.loss, tree)?;
    report.records.push(EpochRecord {
        epoch: 0,
        loss: loss0,
        arc_recall: recall0.mean,
    });
    if data.is_empty() {
        return Ok(report);
    }

    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs {
        let snapshot = module.params().clone();
        if cfg.cosine_decay {
            let progress = (epoch - 1) as f64 / cfg.epochs as f64;
            opt.set_lr(cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        }
        let mut rng = stream_rng(cfg.seed, streams::SAMPLES ^ epoch as u64);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        let mut failure = None;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SyntheticSample> = chunk.iter().map(|&i| &data[i]).collect();
            let (value, grads) = batch_gradients(module, &batch, &cfg.loss, tree)?;
            if !value.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                failure = Some(format!("non-finite loss {value} in epoch {epoch}"));
                break;
            }
            sum += value;
            batches += 1;
            opt.step(module.params_mut(), &grads)?;
        }
        if failure.is_none() && module.params().iter().any(|(_, m)| !m.is_finite()) {
            failure = Some(format!("non-finite parameters after epoch {epoch}"));
        }
        let mut recall = None;
        if failure.is_none() {
            match evaluate(module, data, cfg.k, &cfg.loss, tree) {
                Ok((_, r)) => recall = Some(r),
                Err(Error::Diverged { reason, .. }) => failure = Some(format!("{reason} after epoch {epoch}")),
                Err(e) => return Err(e),
            }
        }
        if let Some(reason) = failure {
            *module.params_mut() = snapshot;
            report.diverged = Some(Divergence {
                epoch: epoch - 1,
                reason,
            });
            return Ok(report);
        }
        report.records.push(EpochRecord {
            epoch,
            loss: sum / batches as f64,
            arc_recall: recall.expect("evaluated when no failure").mean,
        });
    }
    Ok(report)
}
