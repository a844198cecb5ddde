//! Independent oracles shared by the integration tests. Nothing here calls the
//! library routine it is used to check.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vastvocab::losses::{loss_on_tape, LossConfig, LossFamily};
use vastvocab::taxonomy::{CategoryTree, NodeRecord, WeightForm};
use vastvocab::tensor::{
    AttentionConfig, Bound, FeedForward, LayerNorm, Linear, Matrix, MultiHeadAttention, ParamStore, RowMix, Tape, Var,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::random_normal(rows, cols, std, rng)
}

// ---------------------------------------------------------------- losses

fn p_of(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Per-category `dL/dz`, written directly in probability space.
pub fn grad_oracle(z: f64, y: bool, cfg: &LossConfig) -> f64 {
    let p = p_of(z);
    match (cfg.family, y) {
        (LossFamily::SigmoidCe, true) => p - 1.0,
        (LossFamily::SigmoidCe, false) => p,
        (LossFamily::Focal, true) => {
            let (a, g) = (cfg.focal_alpha, cfg.focal_gamma);
            a * (1.0 - p).powf(g) * (g * p * p.ln() - (1.0 - p))
        }
        (LossFamily::Focal, false) => {
            let (a, g) = (1.0 - cfg.focal_alpha, cfg.focal_gamma);
            a * p.powf(g) * (p - g * (1.0 - p) * (1.0 - p).ln())
        }
        (LossFamily::Asymmetric, true) => {
            let g = cfg.asl_gamma_pos;
            (1.0 - p).powf(g) * (g * p * p.ln() - (1.0 - p))
        }
        (LossFamily::Asymmetric, false) => {
            let g = cfg.asl_gamma_neg;
            let pm = (p - cfg.asl_clip).max(0.0);
            if pm == 0.0 {
                return 0.0;
            }
            let d_dp = pm.powf(g) / (1.0 - pm) - if g > 0.0 { g * pm.powf(g - 1.0) * (1.0 - pm).ln() } else { 0.0 };
            d_dp * p * (1.0 - p)
        }
    }
}

pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

// ---------------------------------------------------------------- dilution

pub fn magnitudes(z: &[f64], y: &[bool], cfg: &LossConfig) -> Vec<f64> {
    z.iter().zip(y).map(|(&z, &y)| grad_oracle(z, y, cfg).abs()).collect()
}

pub fn brute_rho(z: &[f64], y: &[bool], cfg: &LossConfig) -> f64 {
    let m = magnitudes(z, y, cfg);
    let mut pos = Vec::new();
    let mut neg = 0.0;
    for c in 0..z.len() {
        if y[c] {
            pos.push(m[c]);
        } else {
            neg += m[c];
        }
    }
    (pos.iter().sum::<f64>() / pos.len() as f64) / neg
}

/// Hard negatives: negatives listed as (logit, index) pairs, ordered by
/// larger logit then smaller index, first `ceil(fraction * #neg)` kept.
pub fn brute_hard_set(z: &[f64], y: &[bool], fraction: f64) -> Vec<usize> {
    let mut negs: Vec<(f64, usize)> = (0..z.len()).filter(|&c| !y[c]).map(|c| (z[c], c)).collect();
    let k = ((fraction * negs.len() as f64).ceil() as usize).min(negs.len());
    negs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    negs.into_iter().take(k).map(|(_, c)| c).collect()
}

pub fn brute_eta(z: &[f64], y: &[bool], cfg: &LossConfig, fraction: f64) -> f64 {
    let m = magnitudes(z, y, cfg);
    let hard = brute_hard_set(z, y, fraction);
    let mut total = 0.0;
    for c in 0..z.len() {
        if !y[c] {
            total += m[c];
        }
    }
    let mut in_hard = vec![false; z.len()];
    for &h in &hard {
        in_hard[h] = true;
    }
    let mut hard_mass = 0.0;
    for c in 0..z.len() {
        if in_hard[c] {
            hard_mass += m[c];
        }
    }
    hard_mass / total
}

pub fn brute_rho_generalized(z: &[f64], y: &[bool], cfg: &LossConfig, n_pos: usize, n_total: usize) -> f64 {
    let m = magnitudes(z, y, cfg);
    let (mut sp, mut np, mut sn, mut nn) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..z.len() {
        if y[c] {
            sp += m[c];
            np += 1.0;
        } else {
            sn += m[c];
            nn += 1.0;
        }
    }
    (n_pos as f64 * (sp / np)) / ((n_total - n_pos) as f64 * (sn / nn))
}

pub fn brute_rebalance(z: &[f64], y: &[bool], cfg: &LossConfig, keep: &[usize]) -> f64 {
    let m = magnitudes(z, y, cfg);
    let kept: BTreeSet<usize> = keep.iter().copied().collect();
    let mut all = 0.0;
    let mut sel = 0.0;
    for c in 0..z.len() {
        if !y[c] {
            all += m[c];
            if kept.contains(&c) {
                sel += m[c];
            }
        }
    }
    all / sel
}

/// `|a - b| <= tol * max(1, |b|)`.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

// ---------------------------------------------------------------- taxonomy

/// Random forest of `n` nodes no deeper than `max_depth` levels, ids
/// `100 + index`, listed in shuffled order.
pub fn random_tree_records(n: usize, max_depth: usize, rng: &mut ChaCha8Rng) -> Vec<NodeRecord> {
    let mut depth = vec![0usize; n];
    let mut parent: Vec<Option<usize>> = vec![None; n];
    for v in 1..n {
        if rng.random_bool(0.1) {
            continue;
        }
        let candidates: Vec<usize> = (0..v).filter(|&u| depth[u] + 1 < max_depth).collect();
        if candidates.is_empty() {
            continue;
        }
        let p = candidates[rng.random_range(0..candidates.len())];
        parent[v] = Some(p);
        depth[v] = depth[p] + 1;
    }
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    order
        .into_iter()
        .map(|v| NodeRecord {
            id: 100 + v as i64,
            name: format!("node{v}"),
            parent: parent[v].map(|p| 100 + p as i64),
        })
        .collect()
}

pub fn weight_oracle(n: usize, n_max: usize, form: WeightForm, w: f64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let r = (1.0 + n as f64).ln() / (1.0 + n_max as f64).ln();
    match form {
        WeightForm::Scaled => w * (1.0 + r),
        WeightForm::Additive => {
            let a = w + r;
            if a > 1.0 {
                1.0
            } else {
                a
            }
        }
    }
}

/// Parent-pointer view of a tree keyed by id.
pub struct IdForest {
    pub parent: BTreeMap<i64, Option<i64>>,
    pub children: BTreeMap<i64, Vec<i64>>,
}

impl IdForest {
    pub fn new(records: &[NodeRecord]) -> Self {
        let mut parent = BTreeMap::new();
        let mut children: BTreeMap<i64, Vec<i64>> = BTreeMap::new();
        for r in records {
            parent.insert(r.id, r.parent);
            children.entry(r.id).or_default();
        }
        for r in records {
            if let Some(p) = r.parent {
                children.get_mut(&p).unwrap().push(r.id);
            }
        }
        Self { parent, children }
    }

    pub fn max_children(&self) -> usize {
        self.children.values().map(Vec::len).max().unwrap_or(0)
    }

    pub fn strict_ancestors(&self, id: i64) -> Vec<i64> {
        let mut out = Vec::new();
        let mut cur = self.parent[&id];
        while let Some(p) = cur {
            out.push(p);
            cur = self.parent[&p];
        }
        out
    }
}

/// Recursive evaluation of the aggregated query of `id`.
pub fn aggregate_oracle(
    forest: &IdForest,
    queries: &BTreeMap<i64, Vec<f64>>,
    form: WeightForm,
    w: f64,
    id: i64,
) -> Vec<f64> {
    let kids = &forest.children[&id];
    let own = &queries[&id];
    if kids.is_empty() {
        return own.clone();
    }
    let a = weight_oracle(kids.len(), forest.max_children(), form, w);
    let mut mean = vec![0.0; own.len()];
    for &c in kids {
        let sub = aggregate_oracle(forest, queries, form, w, c);
        for (m, s) in mean.iter_mut().zip(sub) {
            *m += s / kids.len() as f64;
        }
    }
    own.iter().zip(mean).map(|(o, m)| (1.0 - a) * o + a * m).collect()
}

pub fn mask_oracle(forest: &IdForest, gt: &[i64]) -> BTreeSet<i64> {
    let gt_set: BTreeSet<i64> = gt.iter().copied().collect();
    let mut out = BTreeSet::new();
    for &g in gt {
        for a in forest.strict_ancestors(g) {
            if !gt_set.contains(&a) {
                out.insert(a);
            }
        }
    }
    out
}

pub fn tree_from(records: Vec<NodeRecord>) -> CategoryTree {
    CategoryTree::from_records(records).expect("generated forest is valid")
}

// ---------------------------------------------------------------- tensors

/// Norm-wise relative error between tape gradients and central differences
/// of the scalar `f`, worst over parameters. Norms below
/// `1e-5 * max(1, |f|)` are raised to that floor.
pub fn fd_check(store: &ParamStore, f: impl Fn(&mut Tape, &Bound) -> Var) -> f64 {
    let eval = |s: &ParamStore| {
        let mut t = Tape::new();
        let b = s.bind(&mut t);
        let out = f(&mut t, &b);
        t.value(out).get(0, 0)
    };
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let out = f(&mut tape, &bound);
    let value = tape.value(out).get(0, 0);
    let grads = tape.backward(out).unwrap();
    let analytic = bound.gradients(store, &grads);
    let floor = 1e-5 * value.abs().max(1.0);
    let h = 1e-5;

    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    for id in store.ids() {
        let (mut d2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for c in 0..store.get(id).len() {
            let x = work.get(id).as_slice()[c];
            work.get_mut(id).as_mut_slice()[c] = x + h;
            let up = eval(&work);
            work.get_mut(id).as_mut_slice()[c] = x - h;
            let down = eval(&work);
            work.get_mut(id).as_mut_slice()[c] = x;
            let num = (up - down) / (2.0 * h);
            let ana = analytic[id.index()].as_slice()[c];
            d2 += (num - ana) * (num - ana);
            a2 += ana * ana;
            n2 += num * num;
        }
        let rel = d2.sqrt() / a2.sqrt().max(n2.sqrt()).max(floor);
        worst = worst.max(rel);
    }
    worst
}

/// One small graph per differentiable op, reduced with a random probe.
pub fn op_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let mut store = ParamStore::new();
    let a = store.add("a", gaussian(4, 6, 1.0, &mut r));
    let b = store.add("b", gaussian(6, 3, 1.0, &mut r));
    let c = store.add("c", gaussian(4, 6, 1.0, &mut r));
    let row = store.add("row", gaussian(1, 6, 1.0, &mut r));
    let w46 = gaussian(4, 6, 1.0, &mut r);
    let w43 = gaussian(4, 3, 1.0, &mut r);
    let w64 = gaussian(6, 4, 1.0, &mut r);
    let w42 = gaussian(4, 2, 1.0, &mut r);
    let w4_9 = gaussian(4, 9, 1.0, &mut r);
    let w56 = gaussian(5, 6, 1.0, &mut r);
    let terms: Vec<Vec<(usize, f64)>> = (0..3)
        .map(|_| (0..2).map(|_| (r.random_range(0..4), r.random_range(-1.0..1.0))).collect())
        .collect();
    let mix = Arc::new(RowMix::new(4, terms).unwrap());
    let w36 = gaussian(3, 6, 1.0, &mut r);

    out.push(("matmul", fd_check(&store, |t, p| {
        let m = t.matmul(p.var(a), p.var(b)).unwrap();
        t.dot(m, w43.clone()).unwrap()
    })));
    out.push(("add", fd_check(&store, |t, p| {
        let m = t.add(p.var(a), p.var(c)).unwrap();
        let m = t.gelu(m);
        t.dot(m, w46.clone()).unwrap()
    })));
    out.push(("add_row", fd_check(&store, |t, p| {
        let m = t.add_row(p.var(a), p.var(row)).unwrap();
        let m = t.softmax_rows(m);
        t.dot(m, w46.clone()).unwrap()
    })));
    out.push(("mul_row", fd_check(&store, |t, p| {
        let m = t.mul_row(p.var(a), p.var(row)).unwrap();
        t.dot(m, w46.clone()).unwrap()
    })));
    out.push(("scale", fd_check(&store, |t, p| {
        let m = t.scale(p.var(a), -1.7);
        let m = t.gelu(m);
        t.dot(m, w46.clone()).unwrap()
    })));
    out.push(("softmax_rows", fd_check(&store, |t, p| {
        let m = t.softmax_rows(p.var(a));
        t.dot(m, w46.clone()).unwrap()
    })));
    out.push(("layer_norm", fd_check(&store, |t, p| {
        let m = t.layer_norm(p.var(a)).unwrap();
        t.dot(m, w46.clone()).unwrap()
    })));
    out.push(("gelu", fd_check(&store, |t, p| {
        let m = t.gelu(p.var(c));
        t.dot(m, w46.clone()).unwrap()
    })));
    out.push(("transpose", fd_check(&store, |t, p| {
        let m = t.transpose(p.var(a));
        let m = t.softmax_rows(m);
        t.dot(m, w64.clone()).unwrap()
    })));
    out.push(("slice_cols", fd_check(&store, |t, p| {
        let m = t.slice_cols(p.var(a), 3, 2).unwrap();
        let m = t.gelu(m);
        t.dot(m, w42.clone()).unwrap()
    })));
    out.push(("concat_cols", fd_check(&store, |t, p| {
        let m = t.matmul(p.var(a), p.var(b)).unwrap();
        let m = t.concat_cols(&[p.var(c), m]).unwrap();
        let m = t.softmax_rows(m);
        t.dot(m, w4_9.clone()).unwrap()
    })));
    out.push(("gather_rows", fd_check(&store, |t, p| {
        let m = t.gather_rows(p.var(a), &[3, 0, 3, 1, 2]).unwrap();
        let m = t.gelu(m);
        t.dot(m, w56.clone()).unwrap()
    })));
    out.push(("row_mix", fd_check(&store, |t, p| {
        let m = t.row_mix(p.var(c), mix.clone()).unwrap();
        let m = t.softmax_rows(m);
        t.dot(m, w36.clone()).unwrap()
    })));
    let labels: Vec<bool> = (0..12).map(|i| i % 5 == 0).collect();
    let loss = LossConfig::focal(0.3, 2.0);
    out.push(("objective", fd_check(&store, |t, p| {
        let m = t.matmul(p.var(a), p.var(b)).unwrap();
        loss_on_tape(t, m, &labels, None, &loss).unwrap()
    })));

    let mut layers = ParamStore::new();
    let dim = 8;
    let attn = MultiHeadAttention::new(&mut layers, "attn", AttentionConfig::new(2, dim).unwrap(), 0.5, &mut r);
    let ffn = FeedForward::new(&mut layers, "ffn", dim, 16, 0.5, &mut r).unwrap();
    let norm = LayerNorm::new(&mut layers, "norm", dim);
    let lin = Linear::new(&mut layers, "lin", dim, 1, 0.5, &mut r);
    let q = gaussian(4, dim, 1.0, &mut r);
    let mem = gaussian(9, dim, 1.0, &mut r);
    let probe = gaussian(4, 1, 1.0, &mut r);
    out.push(("attention_block", fd_check(&layers, |t, p| {
        let (qv, mv) = (t.leaf(q.clone()), t.leaf(mem.clone()));
        let x = attn.forward(t, p, qv, mv, mv).unwrap();
        let x = ffn.forward(t, p, x).unwrap();
        let x = norm.forward(t, p, x).unwrap();
        let x = lin.forward(t, p, x).unwrap();
        t.dot(x, probe.clone()).unwrap()
    })));
    out
}

/// Plain triple-loop product.
pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

// ---------------------------------------------------------------- selection

/// Indices of the `k` largest logits, ties to the lower index, by full sort.
pub fn sort_topk(logits: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn recall_oracle(selected: &[usize], gt: &[usize]) -> Option<f64> {
    let gt: BTreeSet<usize> = gt.iter().copied().collect();
    if gt.is_empty() {
        return None;
    }
    let sel: BTreeSet<usize> = selected.iter().copied().collect();
    Some(gt.intersection(&sel).count() as f64 / gt.len() as f64)
}
