//! Release-gate oracle suite: every check recomputes a library result by an
//! independent route (finite differences, brute-force loops, recursion,
//! full sorts) and reports the worst discrepancy.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use rand_chacha::ChaCha8Rng;

use crate::dilution::{eta, hard_count, rebalance_factor, rho, rho_generalized, DilutionConfig};
use crate::error::{Error, Result};
use crate::losses::{element_grad, element_loss, loss_on_tape, sigmoid, LabeledLogits, LossConfig, LossFamily};
use crate::selection::{topk_select, QueryRelations, SelectionConfig, SelectionModule};
use crate::synth::{generate_dataset, generate_prototypes, stream_rng, WorldConfig};
use crate::taxonomy::{
    ancestor_mask, build_hierarchical_queries, hierarchy_mix, mask_parent_labels, CategoryQuerySet,
    CategoryRelations, CategoryTree, NodeRecord, WeightForm, WeightPolicy,
};
use crate::tensor::gradcheck::{check_gradients, GradCheckOptions};
use crate::tensor::{AttentionConfig, Matrix, MultiHeadAttention, ParamStore, RowMix};

/// Deliberate defects used to prove that the suite can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Offsets every analytic loss gradient by 1e-3.
    LossGradient,
    /// Records a tape node whose backward rule is off by a factor of two.
    TapeGradient,
}

impl std::str::FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss-gradient" => Ok(Self::LossGradient),
            "tape-gradient" => Ok(Self::TapeGradient),
            other => Err(Error::invalid("fault", format!("unknown fault {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SelfCheckOptions {
    /// Smaller instances and fewer seeds.
    pub quick: bool,
    pub fault: Option<Fault>,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {:<28} {}", self.name, self.detail)
    }
}

#[derive(Clone, Debug, Default)]
pub struct SelfCheckReport {
    pub outcomes: Vec<CheckOutcome>,
}

impl SelfCheckReport {
    pub fn all_passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.outcomes.iter().filter(|o| !o.passed)
    }

    /// `check,passed,detail` lines, free of timings so reruns compare equal.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("check,passed,detail\n");
        for o in &self.outcomes {
            s.push_str(&format!("{},{},\"{}\"\n", o.name, o.passed, o.detail.replace('"', "'")));
        }
        s
    }
}

type Check = fn(&SelfCheckOptions, &mut ChaCha8Rng) -> Result<(bool, String)>;

pub const CHECKS: &[(&str, Check)] = &[
    ("loss.finite_difference", loss_finite_difference),
    ("tensor.matmul", tensor_matmul),
    ("tensor.tape_gradients", tensor_tape_gradients),
    ("attention.gradients", attention_gradients),
    ("dilution.brute_force", dilution_brute_force),
    ("taxonomy.recursive_oracle", taxonomy_recursive),
    ("taxonomy.parent_mask", taxonomy_mask),
    ("selection.topk_sort", selection_topk),
    ("selection.gradients", selection_gradients),
    ("synth.separability", synth_separability),
];

pub fn run_selfcheck(opts: &SelfCheckOptions) -> SelfCheckReport {
    let mut report = SelfCheckReport::default();
    for (i, &(name, check)) in CHECKS.iter().enumerate() {
        let mut rng = stream_rng(opts.seed, i as u64);
        let start = Instant::now();
        let (passed, detail) = match check(opts, &mut rng) {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        report.outcomes.push(CheckOutcome {
            name,
            passed,
            detail,
            elapsed: start.elapsed(),
        });
    }
    report
}

fn verdict(worst: f64, tol: f64, what: &str) -> (bool, String) {
    (worst <= tol, format!("max {what} {worst:.3e} (tol {tol:.0e})"))
}

/// Parent of node `i` is `None` or a uniformly chosen earlier node.
pub fn random_forest<R: Rng + ?Sized>(n: usize, root_prob: f64, rng: &mut R) -> CategoryTree {
    let records = (0..n)
        .map(|i| NodeRecord {
            id: i as i64,
            name: format!("n{i}"),
            parent: (i > 0 && !rng.random_bool(root_prob)).then(|| rng.random_range(0..i) as i64),
        })
        .collect();
    CategoryTree::from_records(records).expect("parents precede children")
}

fn loss_finite_difference(opts: &SelfCheckOptions, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let h = 1e-5;
    let configs = [
        LossConfig::sigmoid_ce(),
        LossConfig::focal(0.25, 2.0),
        LossConfig::asymmetric(0.0, 4.0, 0.05),
    ];
    let probes = if opts.quick { 30 } else { 100 };
    let mut worst = 0.0f64;
    for cfg in &configs {
        let mut done = 0;
        while done < probes {
            let z = rng.random_range(-8.0..8.0);
            let y = rng.random_bool(0.5);
            if !y && cfg.family == LossFamily::Asymmetric && (sigmoid(z) - cfg.asl_clip).abs() < 1e-3 {
                continue;
            }
            let numeric = (element_loss(z + h, y, cfg) - element_loss(z - h, y, cfg)) / (2.0 * h);
            let mut analytic = element_grad(z, y, cfg);
            if opts.fault == Some(Fault::LossGradient) {
                analytic += 1e-3;
            }
            worst = worst.max((analytic - numeric).abs());
            done += 1;
        }
    }
    Ok(verdict(worst, 1e-8, "abs error"))
}

fn tensor_matmul(opts: &SelfCheckOptions, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for _ in 0..if opts.quick { 5 } else { 20 } {
        let (m, k, n) = (rng.random_range(1..40), rng.random_range(1..40), rng.random_range(1..40));
        let a = Matrix::random_normal(m, k, 1.0, rng);
        let b = Matrix::random_normal(k, n, 1.0, rng);
        let c = a.matmul(&b)?;
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for t in 0..k {
                    s += a.get(i, t) * b.get(t, j);
                }
                worst = worst.max((c.get(i, j) - s).abs() / s.abs().max(1.0));
            }
        }
    }
    Ok(verdict(worst, 1e-12, "rel error"))
}

fn tensor_tape_gradients(opts: &SelfCheckOptions, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let seeds = if opts.quick { 3 } else { 20 };
    let fault = opts.fault == Some(Fault::TapeGradient);
    let mut worst = 0.0f64;
    for _ in 0..seeds {
        let mut store = ParamStore::new();
        let x = store.add("x", Matrix::random_normal(3, 4, 1.0, rng));
        let a = store.add("a", Matrix::random_normal(4, 5, 0.7, rng));
        let b = store.add("b", Matrix::random_normal(5, 6, 0.7, rng));
        let r = store.add("r", Matrix::random_normal(1, 6, 0.5, rng));
        let g = store.add("g", Matrix::random_normal(1, 6, 1.0, rng));
        let c = store.add("c", Matrix::random_normal(3, 6, 0.7, rng));
        let d = store.add("d", Matrix::random_normal(3, 5, 1.0, rng));
        let probe = Matrix::random_normal(3, 5, 1.0, rng);
        let mix = Arc::new(RowMix::new(4, vec![vec![(0, 0.5), (2, -1.5)], vec![(1, 1.0)], vec![(3, 0.3), (0, 0.2), (1, 2.0)]])?);
        let report = check_gradients(
            &store,
            |t, p| {
                let h = t.matmul(p.var(x), p.var(a))?;
                let h = t.matmul(h, p.var(b))?;
                let h = t.add_row(h, p.var(r))?;
                let h = t.mul_row(h, p.var(g))?;
                let h = t.gelu(h);
                let h = t.layer_norm(h)?;
                let h = t.scale(h, 0.7);
                let s = t.softmax_rows(h);
                let s = t.transpose(s);
                let s = t.matmul(s, p.var(c))?;
                let left = t.slice_cols(s, 1, 3)?;
                let right = t.slice_cols(s, 4, 2)?;
                let cat = t.concat_cols(&[right, left])?;
                let gat = t.gather_rows(cat, &[5, 0, 0, 3])?;
                let mixed = t.row_mix(gat, Arc::clone(&mix))?;
                let sum = t.add(mixed, p.var(d))?;
                if fault {
                    let v = t.value(sum);
                    let value = v.as_slice().iter().zip(probe.as_slice()).map(|(a, b)| a * b).sum();
                    t.objective(sum, value, probe.scale(2.0))
                } else {
                    t.dot(sum, probe.clone())
                }
            },
            GradCheckOptions::default(),
        )?;
        worst = worst.max(report.max_rel_error());
    }
    Ok(verdict(worst, 1e-4, "rel error"))
}

fn attention_gradients(opts: &SelfCheckOptions, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let (c, d, heads) = if opts.quick { (10, 16, 4) } else { (30, 16, 8) };
    let cfg = AttentionConfig::new(heads, d)?;
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "cross", cfg, 0.3, rng);
    let rel = CategoryRelations::new(&mut store, "self", cfg, 0.3, rng);
    let q = store.add("queries", Matrix::random_normal(c, d, 1.0, rng));
    let image = Matrix::random_normal(5, d, 1.0, rng);
    let probe = Matrix::random_normal(c, d, 1.0, rng);
    let report = check_gradients(
        &store,
        |t, p| {
            let corr = rel.forward(t, p, p.var(q))?;
            let f = t.leaf(image.clone());
            let out = mha.forward(t, p, corr, f, f)?;
            t.dot(out, probe.clone())
        },
        GradCheckOptions {
            max_coords_per_param: Some(if opts.quick { 8 } else { 24 }),
            ..GradCheckOptions::default()
        },
    )?;
    Ok(verdict(report.max_rel_error(), 1e-4, "rel error"))
}

fn dilution_brute_force(opts: &SelfCheckOptions, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let instances = if opts.quick { 10 } else { 50 };
    let max_c = if opts.quick { 2_000 } else { 20_000 };
    let losses = [
        LossConfig::sigmoid_ce(),
        LossConfig::focal(0.25, 2.0),
        LossConfig::asymmetric(0.0, 4.0, 0.05),
    ];
    let mut worst = 0.0f64;
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-300);
    for n in 0..instances {
        let c = if n == 0 { max_c } else { rng.random_range(4..=max_c) };
        let n_pos = rng.random_range(1..=(c / 4).clamp(1, 5));
        let logits: Vec<f64> = (0..c).map(|_| rng.random_range(-6.0..4.0)).collect();
        let mut labels = vec![false; c];
        for i in rand::seq::index::sample(rng, c, n_pos) {
            labels[i] = true;
        }
        let item = LabeledLogits::new(logits.clone(), labels.clone())?;
        let loss = &losses[n % losses.len()];
        let g: Vec<f64> = (0..c).map(|i| element_grad(logits[i], labels[i], loss).abs()).collect();

        let pos: Vec<usize> = (0..c).filter(|&i| labels[i]).collect();
        let neg: Vec<usize> = (0..c).filter(|&i| !labels[i]).collect();
        let mut pos_sum = 0.0;
        for &i in &pos {
            pos_sum += g[i];
        }
        let mut neg_sum = 0.0;
        for &i in &neg {
            neg_sum += g[i];
        }
        worst = worst.max(rel(rho(&item, loss)?, pos_sum / pos.len() as f64 / neg_sum));

        let mut by_score = neg.clone();
        by_score.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
        let k = hard_count(neg.len(), 0.1);
        let mut hard = 0.0;
        for &i in &by_score[..k] {
            hard += g[i];
        }
        worst = worst.max(rel(eta(&item, loss, 0.1)?, hard / neg_sum));

        let mut cfg = DilutionConfig::new(c, *loss);
        cfg.n_pos = rng.random_range(1..50);
        cfg.n_total = cfg.n_pos + rng.random_range(1..5000);
        let want = cfg.n_pos as f64 * (pos_sum / pos.len() as f64)
            / ((cfg.n_total - cfg.n_pos) as f64 * (neg_sum / neg.len() as f64));
        worst = worst.max(rel(rho_generalized(&cfg, &item)?, want));

        let extra = rng.random_range(1..=neg.len());
        let mut selected: Vec<usize> = pos.clone();
        selected.extend(rand::seq::index::sample(rng, neg.len(), extra).into_iter().map(|j| neg[j]));
        let chosen: BTreeSet<usize> = selected.iter().copied().collect();
        let mut kept = 0.0;
        for &i in &neg {
            if chosen.contains(&i) {
                kept += g[i];
            }
        }
        worst = worst.max(rel(rebalance_factor(&item, &selected, loss)?, neg_sum / kept));
    }
    Ok(verdict(worst, 1e-12, "rel error"))
}

fn recursive_query(tree: &CategoryTree, q: &Matrix, policy: &WeightPolicy, v: usize) -> Vec<f64> {
    let own = q.row(v).to_vec();
    let kids = tree.children(v);
    if kids.is_empty() {
        return own;
    }
    let mut mean = vec![0.0; own.len()];
    for &c in kids {
        for (m, x) in mean.iter_mut().zip(recursive_query(tree, q, policy, c)) {
            *m += x / kids.len() as f64;
        }
    }
    let n = kids.len() as f64;
    let big = tree.max_children() as f64;
    let share = (n + 1.0).ln() / (big + 1.0).ln();
    let alpha = match policy.form() {
        WeightForm::Scaled => policy.w() * (1.0 + share),
        WeightForm::Additive => (policy.w() + share).min(1.0),
    };
    own.iter().zip(&mean).map(|(o, m)| (1.0 - alpha) * o + alpha * m).collect()
}

fn taxonomy_recursive(opts: &SelfCheckOptions, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for trial in 0..if opts.quick { 2 } else { 6 } {
        let tree = random_forest(50, 0.1, rng);
        let q = Matrix::random_normal(50, 8, 1.0, rng);
        let policy = if trial % 2 == 0 {
            WeightPolicy::new(WeightForm::Scaled, 0.3)?
        } else {
            WeightPolicy::new(WeightForm::Additive, 0.4)?
        };
        let set = CategoryQuerySet::for_tree(&tree, q.clone())?;
        let built = build_hierarchical_queries(&tree, &set, &policy)?;
        let mixed = hierarchy_mix(&tree, &policy).apply(&q)?;
        for v in 0..tree.len() {
            let want = recursive_query(&tree, &q, &policy, v);
            for (j, w) in want.iter().enumerate() {
                worst = worst.max((built.embeddings().get(v, j) - w).abs());
                worst = worst.max((mixed.get(v, j) - w).abs());
            }
        }
    }
    Ok(verdict(worst, 1e-12, "abs error"))
}

fn taxonomy_mask(opts: &SelfCheckOptions, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut mismatches = 0usize;
    let pairs = if opts.quick { 20 } else { 100 };
    for _ in 0..pairs {
        let n = rng.random_range(1..80);
        let tree = random_forest(n, 0.2, rng);
        let count = rng.random_range(1..=n.min(4));
        let gt: Vec<usize> = rand::seq::index::sample(rng, n, count).into_vec();
        let gt_ids: Vec<i64> = gt.iter().map(|&g| tree.id(g)).collect();

        let parent_of = |id: i64| tree.records().iter().find(|r| r.id == id).and_then(|r| r.parent);
        let mut want = BTreeSet::new();
        for &id in &gt_ids {
            let mut cur = parent_of(id);
            while let Some(p) = cur {
                want.insert(p);
                cur = parent_of(p);
            }
        }
        for id in &gt_ids {
            want.remove(id);
        }
        let got = mask_parent_labels(&tree, &gt_ids)?;
        let flags = ancestor_mask(&tree, &gt);
        let from_flags: BTreeSet<i64> = (0..n).filter(|&i| flags[i]).map(|i| tree.id(i)).collect();
        if got != want || from_flags != want || gt_ids.iter().any(|g| got.contains(g)) {
            mismatches += 1;
        }
    }
    Ok((mismatches == 0, format!("{mismatches} of {pairs} (tree, ground truth) pairs differ")))
}

fn selection_topk(opts: &SelfCheckOptions, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut mismatches = 0usize;
    let trials = if opts.quick { 5 } else { 20 };
    for t in 0..trials {
        let c = rng.random_range(1..10_000);
        let k = rng.random_range(1..=c.min(200));
        // Coarse values force many ties.
        let logits: Vec<f64> = (0..c)
            .map(|_| if t % 2 == 0 { rng.random_range(0..20) as f64 } else { rng.random_range(-1.0..1.0) })
            .collect();
        let enhanced = Matrix::random_normal(c, 2, 1.0, rng);
        let got = topk_select(&logits, &enhanced, k)?;
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
        let rows_ok = got
            .indices
            .iter()
            .enumerate()
            .all(|(r, &i)| got.selected_queries.row(r) == enhanced.row(i));
        if got.indices != order[..k] || !rows_ok {
            mismatches += 1;
        }
    }
    Ok((mismatches == 0, format!("{mismatches} of {trials} selections differ from a full sort")))
}

fn selection_gradients(opts: &SelfCheckOptions, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let (c, d) = if opts.quick { (6, 8) } else { (12, 8) };
    let cfg = SelectionConfig {
        heads: 2,
        ffn_hidden: 6,
        init_std: 0.3,
        seed: rng.random(),
        ..SelectionConfig::new(c, d)
    };
    let tree = random_forest(c, 0.3, rng);
    let module = SelectionModule::new(cfg, QueryRelations::Hierarchy(hierarchy_mix(&tree, &WeightPolicy::default())))?;
    let image = Matrix::random_normal(4, d, 1.0, rng);
    let gt: Vec<usize> = vec![rng.random_range(0..c)];
    let mut labels = vec![false; c];
    labels[gt[0]] = true;
    let mask = ancestor_mask(&tree, &gt);
    let loss = LossConfig::asymmetric(1.0, 2.0, 0.0);
    let report = check_gradients(
        module.params(),
        |t, p| {
            let q = module.correlated_queries(t, p)?;
            let f = t.leaf(image.clone());
            let s = module.score_on_tape(t, p, q, f)?;
            loss_on_tape(t, s.logits, &labels, Some(&mask), &loss)
        },
        GradCheckOptions {
            max_coords_per_param: Some(if opts.quick { 6 } else { 16 }),
            ..GradCheckOptions::default()
        },
    )?;
    Ok(verdict(report.max_rel_error(), 1e-4, "rel error"))
}

fn synth_separability(opts: &SelfCheckOptions, rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut world = WorldConfig::new(40, 48);
    world.seed = rng.random();
    world.labels_per_image = (1, 4);
    let protos = generate_prototypes(&world)?;
    let n = if opts.quick { 20 } else { 100 };
    let data = generate_dataset(&world, &protos, 0, n, None)?;
    let again = generate_dataset(&world, &protos, 0, n, None)?;
    let scorer = protos.embeddings().transpose();
    let mut violations = 0usize;
    for s in &data {
        let scores = s.image_features.matmul(&scorer)?;
        let gt: BTreeSet<usize> = s.ground_truth.iter().copied().collect();
        let mut best_neg = f64::NEG_INFINITY;
        let mut worst_pos = f64::INFINITY;
        for cat in 0..world.categories {
            let total: f64 = (0..scores.rows()).map(|r| scores.get(r, cat)).sum();
            if gt.contains(&cat) {
                worst_pos = worst_pos.min(total);
            } else {
                best_neg = best_neg.max(total);
            }
        }
        if worst_pos <= best_neg {
            violations += 1;
        }
    }
    let deterministic = data == again;
    Ok((
        violations == 0 && deterministic,
        format!("{violations} of {n} images not separated; rerun identical: {deterministic}"),
    ))
}
