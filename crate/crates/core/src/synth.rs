//! Seeded synthetic worlds: taxonomies, category prototypes and image samples
//! whose token features carry a planted copy of their ground-truth prototypes.
//!
//! Every generator draws from its own ChaCha stream, seeded by
//! [`stream_seed`]`(seed, stream)`, so samples can be produced independently
//! and in any order.

use std::io::{BufRead, Write};

use rand::seq::index::{sample, sample_weighted};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{decode_matrix, encode_matrix};
use crate::taxonomy::{CategoryQuerySet, CategoryTree, NodeRecord};
use crate::tensor::Matrix;

/// Stream ids used by the generators.
pub mod streams {
    pub const TAXONOMY: u64 = 1;
    pub const PROTOTYPES: u64 = 2;
    pub const PARAMS: u64 = 3;
    /// Sample `i` uses stream `SAMPLES + i`.
    pub const SAMPLES: u64 = 1 << 32;
}

/// SplitMix64 finalizer applied to `seed + (stream + 1) * golden`.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, stream))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeKind {
    /// Orthonormal rows (needs `dim >= categories`).
    Orthonormal,
    /// i.i.d. `N(0, 1/dim)` entries.
    Gaussian,
}

impl std::str::FromStr for PrototypeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orthonormal" => Ok(Self::Orthonormal),
            "gaussian" => Ok(Self::Gaussian),
            other => Err(Error::invalid("prototypes", format!("unknown prototype kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub categories: usize,
    pub dim: usize,
    pub tree_depth: usize,
    /// Inclusive child-count range for internal nodes.
    pub branching: (usize, usize),
    pub tokens_per_image: usize,
    /// Inclusive range for the ground-truth set size.
    pub labels_per_image: (usize, usize),
    pub signal_strength: f64,
    pub noise_std: f64,
    pub prototypes: PrototypeKind,
    /// Category `c` is drawn with weight `(c + 1)^-zipf_exponent`; 0 is uniform.
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl WorldConfig {
    pub fn new(categories: usize, dim: usize) -> Self {
        Self {
            categories,
            dim,
            tree_depth: 1,
            branching: (2, 4),
            tokens_per_image: 8,
            labels_per_image: (1, 3),
            signal_strength: 1.0,
            noise_std: 0.0,
            prototypes: PrototypeKind::Orthonormal,
            zipf_exponent: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.labels_per_image;
        if lo == 0 || lo > hi {
            return Err(Error::invalid("labels_per_image", format!("invalid range {lo}..={hi}")));
        }
        if hi > self.categories {
            return Err(Error::invalid(
                "labels_per_image",
                format!("up to {hi} labels but only {} categories", self.categories),
            ));
        }
        if self.tokens_per_image < hi {
            return Err(Error::invalid(
                "tokens_per_image",
                format!("{} tokens cannot carry {hi} labels", self.tokens_per_image),
            ));
        }
        if self.dim == 0 {
            return Err(Error::invalid("dim", "must be positive"));
        }
        if !(self.signal_strength >= 0.0) || !(self.noise_std >= 0.0) || !(self.zipf_exponent >= 0.0) {
            return Err(Error::invalid(
                "signal_strength",
                "signal_strength, noise_std and zipf_exponent must be >= 0",
            ));
        }
        if self.prototypes == PrototypeKind::Orthonormal && self.dim < self.categories {
            return Err(Error::invalid(
                "dim",
                format!("{} orthonormal prototypes need dim >= categories, got {}", self.categories, self.dim),
            ));
        }
        Ok(())
    }
}

fn subtree_size(levels: usize, branching: usize) -> usize {
    let mut total = 0usize;
    let mut width = 1usize;
    for _ in 0..levels {
        total = total.saturating_add(width);
        width = width.saturating_mul(branching);
    }
    total
}

/// Seeded forest of exactly `categories` nodes in which every root-to-leaf
/// path has `tree_depth` nodes and every internal node has a child count in
/// `branching`. Ids are `0..categories` in breadth-first order.
pub fn generate_taxonomy(cfg: &WorldConfig) -> Result<CategoryTree> {
    let depth = cfg.tree_depth;
    let c = cfg.categories;
    let (bmin, bmax) = cfg.branching;
    if depth == 0 {
        return Err(Error::invalid("tree_depth", "must be at least 1"));
    }
    if depth > 1 && (bmin == 0 || bmin > bmax) {
        return Err(Error::invalid("branching", format!("invalid range {bmin}..={bmax}")));
    }
    let mut rng = stream_rng(cfg.seed, streams::TAXONOMY);

    let feasible = |width: usize, levels: usize, total: usize| {
        width.saturating_mul(subtree_size(levels, bmin)) <= total
            && total <= width.saturating_mul(subtree_size(levels, bmax))
    };
    let roots = if depth == 1 {
        c
    } else {
        (1..=c)
            .find(|&r| feasible(r, depth, c))
            .ok_or_else(|| {
                Error::invalid(
                    "categories",
                    format!("no forest of depth {depth} with branching {bmin}..={bmax} has {c} nodes"),
                )
            })?
    };

    let mut records: Vec<NodeRecord> = (0..roots)
        .map(|i| NodeRecord {
            id: i as i64,
            name: format!("category_{i}"),
            parent: None,
        })
        .collect();
    let mut level: Vec<usize> = (0..roots).collect();
    for l in 1..depth {
        let remaining = c - records.len();
        let levels_left = depth - l;
        let lo = bmin * level.len();
        let hi = bmax * level.len();
        let choices: Vec<usize> = (lo..=hi).filter(|&w| feasible(w, levels_left, remaining)).collect();
        if choices.is_empty() {
            return Err(Error::invalid(
                "categories",
                format!("cannot place {remaining} nodes below level {l}"),
            ));
        }
        let width = choices[rng.random_range(0..choices.len())];

        let mut counts = vec![bmin; level.len()];
        let mut extra = width - lo;
        while extra > 0 {
            let p = rng.random_range(0..counts.len());
            if counts[p] < bmax {
                counts[p] += 1;
                extra -= 1;
            }
        }
        let mut next = Vec::with_capacity(width);
        for (&parent, &n) in level.iter().zip(&counts) {
            for _ in 0..n {
                let id = records.len();
                records.push(NodeRecord {
                    id: id as i64,
                    name: format!("category_{id}"),
                    parent: Some(parent as i64),
                });
                next.push(id);
            }
        }
        level = next;
    }
    if records.len() != c {
        return Err(Error::invalid(
            "categories",
            format!("generated {} nodes, wanted {c}", records.len()),
        ));
    }
    Ok(CategoryTree::from_records(records)?)
}

/// Orthonormalizes the rows of `m` in place (modified Gram-Schmidt, two passes).
fn orthonormalize_rows(m: &mut Matrix) -> Result<()> {
    for i in 0..m.rows() {
        for _pass in 0..2 {
            for j in 0..i {
                let dot: f64 = m.row(i).iter().zip(m.row(j)).map(|(a, b)| a * b).sum();
                let prev = m.row(j).to_vec();
                for (a, b) in m.row_mut(i).iter_mut().zip(prev) {
                    *a -= dot * b;
                }
            }
        }
        let norm = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-10 {
            return Err(Error::invalid("dim", "prototype rows are linearly dependent"));
        }
        m.row_mut(i).iter_mut().for_each(|v| *v /= norm);
    }
    Ok(())
}

/// One prototype embedding per category (row `c` for category `c`).
pub fn generate_prototypes(cfg: &WorldConfig) -> Result<CategoryQuerySet> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, streams::PROTOTYPES);
    let std = 1.0 / (cfg.dim as f64).sqrt();
    let mut m = Matrix::random_normal(cfg.categories, cfg.dim, std, &mut rng);
    if cfg.prototypes == PrototypeKind::Orthonormal {
        orthonormalize_rows(&mut m)?;
    }
    Ok(CategoryQuerySet::sequential(m))
}

/// Image tokens plus the ground-truth category indices (sorted).
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub image_features: Matrix,
    pub ground_truth: Vec<usize>,
}

/// Draws sample number `index` of the world.
///
/// The ground-truth set is drawn without replacement from `candidates` (all
/// categories when `None`), Zipf-weighted by category index. Token `j` is
/// `signal_strength * prototype[g_j] + N(0, noise_std^2)` where the first
/// tokens cycle through every ground-truth category once and the rest pick a
/// ground-truth category uniformly.
pub fn generate_sample(
    cfg: &WorldConfig,
    prototypes: &CategoryQuerySet,
    index: u64,
    candidates: Option<&[usize]>,
) -> Result<SyntheticSample> {
    cfg.validate()?;
    if prototypes.len() != cfg.categories || prototypes.dim() != cfg.dim {
        return Err(Error::invalid(
            "prototypes",
            format!(
                "{}x{} prototypes for a {}x{} world",
                prototypes.len(),
                prototypes.dim(),
                cfg.categories,
                cfg.dim
            ),
        ));
    }
    let all: Vec<usize>;
    let pool = match candidates {
        Some(p) => p,
        None => {
            all = (0..cfg.categories).collect();
            &all
        }
    };
    let (lo, hi) = cfg.labels_per_image;
    if pool.len() < hi {
        return Err(Error::invalid(
            "candidates",
            format!("{} candidate categories for up to {hi} labels", pool.len()),
        ));
    }

    let mut rng = stream_rng(cfg.seed, streams::SAMPLES.wrapping_add(index));
    let n_labels = rng.random_range(lo..=hi);
    let picks: Vec<usize> = if cfg.zipf_exponent == 0.0 {
        sample(&mut rng, pool.len(), n_labels).into_vec()
    } else {
        let s = cfg.zipf_exponent;
        sample_weighted(&mut rng, pool.len(), |i| ((pool[i] + 1) as f64).powf(-s), n_labels)
            .map_err(|e| Error::invalid("zipf_exponent", e.to_string()))?
            .into_vec()
    };
    let mut ground_truth: Vec<usize> = picks.into_iter().map(|i| pool[i]).collect();
    ground_truth.sort_unstable();

    let protos = prototypes.embeddings();
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::invalid("noise_std", e.to_string()))?;
    let mut features = Matrix::zeros(cfg.tokens_per_image, cfg.dim);
    for t in 0..cfg.tokens_per_image {
        let g = if t < ground_truth.len() {
            ground_truth[t]
        } else {
            ground_truth[rng.random_range(0..ground_truth.len())]
        };
        for (dst, p) in features.row_mut(t).iter_mut().zip(protos.row(g)) {
            *dst = cfg.signal_strength * p;
            if cfg.noise_std > 0.0 {
                *dst += noise.sample(&mut rng);
            }
        }
    }
    Ok(SyntheticSample {
        image_features: features,
        ground_truth,
    })
}

/// Samples `start..start + count`.
pub fn generate_dataset(
    cfg: &WorldConfig,
    prototypes: &CategoryQuerySet,
    start: u64,
    count: usize,
    candidates: Option<&[usize]>,
) -> Result<Vec<SyntheticSample>> {
    (0..count as u64)
        .map(|i| generate_sample(cfg, prototypes, start + i, candidates))
        .collect()
}

pub const DATASET_FORMAT: &str = "vastvocab-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    samples: usize,
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    rows: usize,
    cols: usize,
    /// Little-endian `f64` bytes, base64.
    features: String,
    ground_truth: Vec<usize>,
}

/// JSON-lines document: a header line, then one record per sample.
pub fn write_dataset<W: Write>(mut out: W, samples: &[SyntheticSample]) -> Result<()> {
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        samples: samples.len(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for s in samples {
        let rec = SampleRecord {
            rows: s.image_features.rows(),
            cols: s.image_features.cols(),
            features: encode_matrix(&s.image_features),
            ground_truth: s.ground_truth.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<Vec<SyntheticSample>> {
    let mut lines = input.lines();
    let first = lines.next().ok_or_else(|| Error::Format("empty dataset document".into()))??;
    let header: DatasetHeader = serde_json::from_str(&first)?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset header {} v{}",
            header.format, header.version
        )));
    }
    let mut samples = Vec::with_capacity(header.samples);
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("record {n}: {e}")))?;
        samples.push(SyntheticSample {
            image_features: decode_matrix(rec.rows, rec.cols, &rec.features)?,
            ground_truth: rec.ground_truth,
        });
    }
    if samples.len() != header.samples {
        return Err(Error::Format(format!(
            "header announces {} samples, found {}",
            header.samples,
            samples.len()
        )));
    }
    Ok(samples)
}
