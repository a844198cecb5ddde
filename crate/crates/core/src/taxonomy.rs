//! Category trees and correlation encoding for category queries.
//!
//! Parents are re-expressed bottom-up as a convex mix of their own query and
//! the mean of their children's already-mixed queries. The mix weight grows
//! with the child count, in one of two published forms ([`WeightForm`]).

use std::collections::{BTreeSet, HashMap};
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, TaxonomyError};
use crate::tensor::{AttentionConfig, Bound, LayerNorm, Matrix, MultiHeadAttention, ParamStore, RowMix, Tape, Var};

/// One record of the taxonomy document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: i64,
    pub name: String,
    pub parent: Option<i64>,
}

/// Validated forest of categories. Node positions follow record order and
/// double as row indices into a [`CategoryQuerySet`].
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryTree {
    records: Vec<NodeRecord>,
    index: HashMap<i64, usize>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    bottom_up: Vec<usize>,
    max_children: usize,
}

impl CategoryTree {
    pub fn from_records(records: Vec<NodeRecord>) -> std::result::Result<Self, TaxonomyError> {
        let mut index = HashMap::with_capacity(records.len());
        for (pos, r) in records.iter().enumerate() {
            if index.insert(r.id, pos).is_some() {
                return Err(TaxonomyError::DuplicateId { id: r.id, record: pos });
            }
        }
        let mut parent = Vec::with_capacity(records.len());
        for (pos, r) in records.iter().enumerate() {
            parent.push(match r.parent {
                None => None,
                Some(p) => Some(*index.get(&p).ok_or(TaxonomyError::DanglingParent {
                    id: r.id,
                    parent: p,
                    record: pos,
                })?),
            });
        }
        check_acyclic(&records, &parent)?;

        let mut children = vec![Vec::new(); records.len()];
        for (pos, p) in parent.iter().enumerate() {
            if let Some(p) = p {
                children[*p].push(pos);
            }
        }
        let max_children = children.iter().map(Vec::len).max().unwrap_or(0);

        // Post-order DFS from each root puts every child before its parent.
        let mut bottom_up = Vec::with_capacity(records.len());
        let mut stack: Vec<(usize, bool)> = Vec::new();
        for root in (0..records.len()).filter(|&i| parent[i].is_none()) {
            stack.push((root, false));
            while let Some((node, expanded)) = stack.pop() {
                if expanded {
                    bottom_up.push(node);
                } else {
                    stack.push((node, true));
                    for &c in children[node].iter().rev() {
                        stack.push((c, false));
                    }
                }
            }
        }

        Ok(Self {
            records,
            index,
            parent,
            children,
            bottom_up,
            max_children,
        })
    }

    /// Parses a JSON array of `{ "id", "name", "parent" }` records.
    pub fn from_json(text: &str) -> Result<Self> {
        let records: Vec<NodeRecord> = serde_json::from_str(text)?;
        Ok(Self::from_records(records)?)
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let records: Vec<NodeRecord> = serde_json::from_reader(reader)?;
        Ok(Self::from_records(records)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.records)?)
    }

    pub fn records(&self) -> &[NodeRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn id(&self, node: usize) -> i64 {
        self.records[node].id
    }

    pub fn name(&self, node: usize) -> &str {
        &self.records[node].name
    }

    pub fn index_of(&self, id: i64) -> std::result::Result<usize, TaxonomyError> {
        self.index.get(&id).copied().ok_or(TaxonomyError::UnknownId(id))
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        self.parent[node]
    }

    pub fn children(&self, node: usize) -> &[usize] {
        &self.children[node]
    }

    pub fn child_count(&self, node: usize) -> usize {
        self.children[node].len()
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        self.children[node].is_empty()
    }

    /// Largest child count over the forest.
    pub fn max_children(&self) -> usize {
        self.max_children
    }

    pub fn roots(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| self.parent[i].is_none())
    }

    /// Every node, children before parents.
    pub fn bottom_up_order(&self) -> &[usize] {
        &self.bottom_up
    }

    /// Strict ancestors of `node`, nearest first.
    pub fn ancestors(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        std::iter::successors(self.parent[node], move |&p| self.parent[p])
    }

    pub fn depth(&self, node: usize) -> usize {
        self.ancestors(node).count()
    }
}

fn check_acyclic(records: &[NodeRecord], parent: &[Option<usize>]) -> std::result::Result<(), TaxonomyError> {
    // 0 = unvisited, 1 = on the current walk, 2 = known to reach a root
    let mut state = vec![0u8; records.len()];
    for start in 0..records.len() {
        let mut walk: Vec<usize> = Vec::new();
        let mut cur = Some(start);
        while let Some(n) = cur {
            match state[n] {
                2 => break,
                1 => {
                    let from = walk.iter().position(|&w| w == n).unwrap_or(0);
                    let mut chain: Vec<i64> = walk[from..].iter().map(|&w| records[w].id).collect();
                    chain.push(records[n].id);
                    return Err(TaxonomyError::Cycle { chain });
                }
                _ => {
                    state[n] = 1;
                    walk.push(n);
                    cur = parent[n];
                }
            }
        }
        for w in walk {
            state[w] = 2;
        }
    }
    Ok(())
}

/// Category query embeddings, one row per tree node (or per category).
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryQuerySet {
    embeddings: Matrix,
    ids: Vec<i64>,
    index: HashMap<i64, usize>,
}

impl CategoryQuerySet {
    pub fn new(ids: Vec<i64>, embeddings: Matrix) -> Result<Self> {
        if ids.len() != embeddings.rows() {
            return Err(Error::invalid(
                "embeddings",
                format!("{} rows for {} ids", embeddings.rows(), ids.len()),
            ));
        }
        if !embeddings.is_finite() {
            return Err(Error::invalid("embeddings", "entries must be finite"));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (row, &id) in ids.iter().enumerate() {
            if index.insert(id, row).is_some() {
                return Err(Error::invalid("ids", format!("duplicate id {id}")));
            }
        }
        Ok(Self { embeddings, ids, index })
    }

    /// Rows indexed `0..n` with ids equal to the row number.
    pub fn sequential(embeddings: Matrix) -> Self {
        let ids = (0..embeddings.rows() as i64).collect();
        Self::new(ids, embeddings).expect("sequential ids are unique")
    }

    pub fn for_tree(tree: &CategoryTree, embeddings: Matrix) -> Result<Self> {
        Self::new(tree.records().iter().map(|r| r.id).collect(), embeddings)
    }

    pub fn random_for_tree<R: Rng + ?Sized>(tree: &CategoryTree, dim: usize, std: f64, rng: &mut R) -> Self {
        Self::for_tree(tree, Matrix::random_normal(tree.len(), dim, std, rng)).expect("tree ids are unique")
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn into_embeddings(self) -> Matrix {
        self.embeddings
    }

    pub fn ids(&self) -> &[i64] {
        &self.ids
    }

    pub fn row_of(&self, id: i64) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    fn with_embeddings(&self, embeddings: Matrix) -> Self {
        Self {
            embeddings,
            ids: self.ids.clone(),
            index: self.index.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightForm {
    /// `w * (1 + ln(n+1)/ln(N+1))`, ranging over `[w, 2w]`.
    Scaled,
    /// `min(w + ln(n+1)/ln(N+1), 1)`.
    Additive,
}

impl std::str::FromStr for WeightForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "main" | "scaled" => Ok(WeightForm::Scaled),
            "appendix" | "additive" => Ok(WeightForm::Additive),
            other => Err(Error::invalid("policy", format!("unknown weight form `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightPolicy {
    form: WeightForm,
    w: f64,
}

impl WeightPolicy {
    pub const DEFAULT_W: f64 = 0.3;

    pub fn new(form: WeightForm, w: f64) -> Result<Self> {
        let max = match form {
            WeightForm::Scaled => 0.5,
            WeightForm::Additive => 1.0,
        };
        if !(0.0..=max).contains(&w) {
            return Err(Error::invalid(
                "w",
                format!("{w} outside [0, {max}] for the {form:?} weight form"),
            ));
        }
        Ok(Self { form, w })
    }

    pub fn form(&self) -> WeightForm {
        self.form
    }

    pub fn w(&self) -> f64 {
        self.w
    }
}

impl Default for WeightPolicy {
    fn default() -> Self {
        Self {
            form: WeightForm::Scaled,
            w: Self::DEFAULT_W,
        }
    }
}

/// Mixing weight for a node with `children` children in a tree whose largest
/// child count is `max_children`. Leaves get 0.
pub fn adaptive_weight(children: usize, max_children: usize, policy: &WeightPolicy) -> Result<f64> {
    if children == 0 {
        return Ok(0.0);
    }
    if children > max_children {
        return Err(Error::invalid(
            "children",
            format!("{children} exceeds the tree maximum {max_children}"),
        ));
    }
    let ratio = ((children + 1) as f64).ln() / ((max_children + 1) as f64).ln();
    Ok(match policy.form {
        WeightForm::Scaled => policy.w * (1.0 + ratio),
        WeightForm::Additive => (policy.w + ratio).min(1.0),
    })
}

impl CategoryTree {
    pub fn adaptive_weight(&self, node: usize, policy: &WeightPolicy) -> f64 {
        adaptive_weight(self.child_count(node), self.max_children, policy)
            .expect("child count never exceeds the tree maximum")
    }
}

fn check_rows(tree: &CategoryTree, rows: usize) -> Result<()> {
    if tree.len() != rows {
        return Err(Error::invalid(
            "queries",
            format!("{rows} query rows for a tree of {} nodes", tree.len()),
        ));
    }
    Ok(())
}

/// Bottom-up aggregation: leaves keep their query, each parent becomes
/// `(1 - a) * own + a * mean(children's aggregated queries)`.
pub fn build_hierarchical_queries(
    tree: &CategoryTree,
    queries: &CategoryQuerySet,
    policy: &WeightPolicy,
) -> Result<CategoryQuerySet> {
    check_rows(tree, queries.len())?;
    let original = queries.embeddings();
    let mut out = original.clone();
    let dim = original.cols();
    let mut mean = vec![0.0; dim];
    for &v in tree.bottom_up_order() {
        let kids = tree.children(v);
        if kids.is_empty() {
            continue;
        }
        let alpha = tree.adaptive_weight(v, policy);
        mean.iter_mut().for_each(|m| *m = 0.0);
        for &c in kids {
            for (m, x) in mean.iter_mut().zip(out.row(c)) {
                *m += x;
            }
        }
        let inv = 1.0 / kids.len() as f64;
        let own = original.row(v).to_vec();
        for ((dst, o), m) in out.row_mut(v).iter_mut().zip(own).zip(&mean) {
            *dst = (1.0 - alpha) * o + alpha * m * inv;
        }
    }
    Ok(queries.with_embeddings(out))
}

/// The same aggregation as a sparse linear map on query rows, so it can be
/// recomputed on a tape every forward pass.
pub fn hierarchy_mix(tree: &CategoryTree, policy: &WeightPolicy) -> Arc<RowMix> {
    let mut terms: Vec<Vec<(usize, f64)>> = (0..tree.len()).map(|i| vec![(i, 1.0)]).collect();
    for &v in tree.bottom_up_order() {
        let kids = tree.children(v);
        if kids.is_empty() {
            continue;
        }
        let alpha = tree.adaptive_weight(v, policy);
        let share = alpha / kids.len() as f64;
        let mut acc: HashMap<usize, f64> = HashMap::new();
        acc.insert(v, 1.0 - alpha);
        for &c in kids {
            for &(j, w) in &terms[c] {
                *acc.entry(j).or_insert(0.0) += share * w;
            }
        }
        let mut row: Vec<(usize, f64)> = acc.into_iter().collect();
        row.sort_by_key(|&(j, _)| j);
        terms[v] = row;
    }
    Arc::new(RowMix::new(tree.len(), terms).expect("indices come from the tree"))
}

/// Ids of every strict ancestor of any ground-truth id, except ids that are
/// ground truth themselves. These categories are left out of the
/// classification loss (neither positive nor negative).
pub fn mask_parent_labels(tree: &CategoryTree, ground_truth: &[i64]) -> Result<BTreeSet<i64>> {
    let mut masked = BTreeSet::new();
    for &id in ground_truth {
        let node = tree.index_of(id)?;
        masked.extend(tree.ancestors(node).map(|a| tree.id(a)));
    }
    for id in ground_truth {
        masked.remove(id);
    }
    Ok(masked)
}

/// Per-node ignore flags for ground truth given as node indices.
pub fn ancestor_mask(tree: &CategoryTree, ground_truth: &[usize]) -> Vec<bool> {
    let mut mask = vec![false; tree.len()];
    for &g in ground_truth {
        for a in tree.ancestors(g) {
            mask[a] = true;
        }
    }
    for &g in ground_truth {
        mask[g] = false;
    }
    mask
}

/// Self-attention block over category queries with a residual and layer norm.
#[derive(Clone, Debug)]
pub struct CategoryRelations {
    pub attention: MultiHeadAttention,
    pub norm: LayerNorm,
}

impl CategoryRelations {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: AttentionConfig, std: f64, rng: &mut R) -> Self {
        Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.attention"), cfg, std, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), cfg.model_dim()),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, queries: Var) -> Result<Var> {
        let attended = self.attention.forward(tape, params, queries, queries, queries)?;
        let residual = tape.add(attended, queries)?;
        self.norm.forward(tape, params, residual)
    }
}

/// Applies a [`CategoryRelations`] block to a query set (inference only).
pub fn self_attention_relations(
    block: &CategoryRelations,
    params: &ParamStore,
    queries: &CategoryQuerySet,
) -> Result<CategoryQuerySet> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let q = tape.leaf(queries.embeddings().clone());
    let out = block.forward(&mut tape, &bound, q)?;
    Ok(queries.with_embeddings(tape.value(out).clone()))
}
