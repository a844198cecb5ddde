//! Command-line front end.
//!
//! Every command writes its CSV/JSON outputs into `--out` (default taken from
//! `VASTVOCAB_OUT`, else `vastvocab-out`) together with a `manifest.json`
//! holding the fully resolved arguments. `replay` re-runs a manifest into a
//! fresh directory and byte-compares every output.
//!
//! Exit codes: 0 success, 1 usage, 2 validation, 3 numerical failure.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::dilution::{simulate_trace, DilutionConfig, DilutionTrace};
use crate::error::Error;
use crate::io::write_params;
use crate::losses::{LossConfig, LossFamily};
use crate::selection::{
    default_k, recall_at_ks, train_selection_stage, QueryRelations, SelectionConfig, SelectionModule, TrainConfig,
};
use crate::selfcheck::{run_selfcheck, Fault, SelfCheckOptions};
use crate::synth::{
    generate_dataset, generate_prototypes, generate_taxonomy, read_dataset, stream_rng, streams, write_dataset,
    PrototypeKind, SyntheticSample, WorldConfig,
};
use crate::taxonomy::{build_hierarchical_queries, hierarchy_mix, CategoryQuerySet, CategoryTree, WeightForm, WeightPolicy};
use crate::tensor::OptimizerKind;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub const OUT_ENV: &str = "VASTVOCAB_OUT";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_SEED: u64 = 0;
const TOOL: &str = "vastvocab";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Validation(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Validation(_) => EXIT_VALIDATION,
            Self::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Usage(m) => write!(f, "usage error: {m}"),
            Self::Validation(m) => write!(f, "invalid input: {m}"),
            Self::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Diverged { .. } => Self::Numerical(e.to_string()),
            other => Self::Validation(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Validation(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Validation(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "vastvocab", version, about = "Gradient dilution, hierarchical category queries and top-K category selection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Simulate logit-level training and trace rho, eta and gradient norms.
    Dilution(DilutionArgs),
    /// Build hierarchical category queries for a taxonomy file.
    Tree(TreeArgs),
    /// Generate a synthetic taxonomy and dataset.
    World(WorldArgs),
    /// Train the query-selection stage on a synthetic world.
    TrainSelect(TrainSelectArgs),
    /// Run the oracle suite.
    Selfcheck(SelfcheckArgs),
    /// Re-run a manifest and compare outputs byte for byte.
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct OutDir {
    /// Output directory.
    #[arg(long, env = OUT_ENV, default_value = "vastvocab-out")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct DilutionArgs {
    /// Vocabulary sizes (comma separated).
    #[arg(long, value_delimiter = ',', default_value = "80,13204")]
    pub categories: Vec<usize>,
    /// Loss families: ce, focal, asl (comma separated).
    #[arg(long, value_delimiter = ',', default_value = "ce")]
    pub loss: Vec<LossFamily>,
    /// Focal alpha values (swept for focal cells).
    #[arg(long, value_delimiter = ',', default_value = "0.25")]
    pub alpha: Vec<f64>,
    /// Focal gamma values (swept for focal cells).
    #[arg(long, value_delimiter = ',', default_value = "2")]
    pub gamma: Vec<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub gamma_pos: f64,
    #[arg(long, default_value_t = 4.0)]
    pub gamma_neg: f64,
    #[arg(long, default_value_t = 0.05)]
    pub clip: f64,
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1)]
    pub positives: usize,
    /// Keep only the positives plus the top negatives, this many categories in total.
    #[arg(long)]
    pub selected: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub hard_fraction: f64,
    #[arg(long, default_value_t = 1e4)]
    pub divergence_threshold: f64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Worker threads for sweep cells (default: available cores).
    #[arg(long)]
    #[serde(skip)]
    pub threads: Option<usize>,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TreeArgs {
    /// JSON list of {id, name, parent} records.
    #[arg(long)]
    pub taxonomy: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = WeightPolicy::DEFAULT_W)]
    pub w: f64,
    /// Adaptive weight form: main or appendix.
    #[arg(long, default_value = "main")]
    pub policy: WeightForm,
    /// Standard deviation of the seeded initial embeddings.
    #[arg(long, default_value_t = 1.0)]
    pub init_std: f64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct WorldFlags {
    #[arg(long, default_value_t = 200)]
    pub dim: usize,
    /// Tokens per image.
    #[arg(long, default_value_t = 8)]
    pub tokens: usize,
    /// Ground-truth set size range, `min,max`.
    #[arg(long, value_delimiter = ',', num_args = 2, default_value = "1,3")]
    pub labels: Vec<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub signal: f64,
    #[arg(long, default_value_t = 0.0)]
    pub noise_std: f64,
    /// orthonormal or gaussian.
    #[arg(long, default_value = "orthonormal")]
    pub prototypes: PrototypeKind,
    #[arg(long, default_value_t = 0.0)]
    pub zipf: f64,
    #[arg(long, default_value_t = 64)]
    pub images: usize,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct WorldArgs {
    #[arg(long, default_value_t = 200)]
    pub categories: usize,
    #[arg(long, default_value_t = 1)]
    pub depth: usize,
    /// Child-count range of internal nodes, `min,max`.
    #[arg(long, value_delimiter = ',', num_args = 2, default_value = "2,4")]
    pub branching: Vec<usize>,
    #[command(flatten)]
    pub world: WorldFlags,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(clap::ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationsArg {
    None,
    Tree,
    #[value(name = "self")]
    SelfAttention,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TrainSelectArgs {
    /// Vocabulary size (defaults to the taxonomy size, else 200).
    #[arg(long)]
    pub categories: Option<usize>,
    /// Selection sizes; training tracks the first, recall_by_k.csv covers all.
    #[arg(long, value_delimiter = ',')]
    pub k: Vec<usize>,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 4e-3)]
    pub lr: f64,
    #[arg(long, default_value = "adam")]
    pub optimizer: OptimizerKind,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Keep the learning rate constant instead of cosine decay.
    #[arg(long)]
    pub constant_lr: bool,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    /// Feed-forward width (default: dim).
    #[arg(long)]
    pub ffn_hidden: Option<usize>,
    /// Taxonomy file; enables parent masking and draws ground truth from leaves.
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    /// Query relations: none, tree or self (default: tree with a taxonomy).
    #[arg(long, value_enum)]
    pub relations: Option<RelationsArg>,
    /// Train on an exported dataset instead of generating one.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Held-out images for recall_by_k.csv (0: use the training images).
    #[arg(long, default_value_t = 0)]
    pub eval_images: usize,
    #[arg(long, default_value_t = 0.0)]
    pub gamma_pos: f64,
    #[arg(long, default_value_t = 4.0)]
    pub gamma_neg: f64,
    #[arg(long, default_value_t = 0.05)]
    pub clip: f64,
    #[command(flatten)]
    pub world: WorldFlags,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SelfcheckArgs {
    /// Smaller instances, finishes in a few seconds.
    #[arg(long)]
    pub quick: bool,
    #[arg(long, hide = true)]
    pub inject_fault: Option<Fault>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutDir,
}

#[derive(Args, Debug, Clone)]
pub struct ReplayArgs {
    /// Manifest written by an earlier run.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Where to re-create the outputs (default: `<manifest dir>/replay`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// What a run leaves behind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// File names relative to the output directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let m: RunManifest = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if m.tool != TOOL {
            return Err(CliError::Validation(format!("{} is not a {TOOL} manifest", path.display())));
        }
        Ok(m)
    }
}

/// Collects output files and finishes with the manifest.
struct OutputSet {
    dir: PathBuf,
    files: Vec<String>,
}

impl OutputSet {
    fn create(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write<F>(&mut self, name: &str, body: F) -> CliResult<PathBuf>
    where
        F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
    {
        if self.files.iter().any(|f| f == name) {
            return Err(CliError::Usage(format!("two sweep cells would both write {name}")));
        }
        let path = self.dir.join(name);
        let mut w = BufWriter::new(File::create(&path)?);
        body(&mut w)?;
        w.flush()?;
        self.files.push(name.to_string());
        Ok(path)
    }

    fn finish<C: Serialize>(self, command: &str, seed: u64, config: &C) -> CliResult<PathBuf> {
        let manifest = RunManifest {
            tool: TOOL.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            config: serde_json::to_value(config)?,
            outputs: self.files,
        };
        let path = self.dir.join(MANIFEST_FILE);
        let mut w = BufWriter::new(File::create(&path)?);
        serde_json::to_writer_pretty(&mut w, &manifest)?;
        writeln!(w)?;
        w.flush()?;
        Ok(path)
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn absolute(p: &Path) -> CliResult<PathBuf> {
    fs::canonicalize(p).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::Dilution(a) => cmd_dilution(a),
        Command::Tree(a) => cmd_tree(a),
        Command::World(a) => cmd_world(a),
        Command::TrainSelect(a) => cmd_train_select(a),
        Command::Selfcheck(a) => cmd_selfcheck(a),
        Command::Replay(a) => cmd_replay(a),
    }
}

#[derive(Clone, Debug)]
struct Cell {
    file: String,
    family: LossFamily,
    alpha: Option<f64>,
    gamma: Option<f64>,
    cfg: DilutionConfig,
}

fn dilution_cells(a: &DilutionArgs) -> CliResult<Vec<Cell>> {
    if a.categories.is_empty() || a.loss.is_empty() {
        return Err(CliError::Usage("--categories and --loss need at least one value".into()));
    }
    let mut cells = Vec::new();
    for &c in &a.categories {
        for &family in &a.loss {
            let variants: Vec<(LossConfig, Option<f64>, Option<f64>, String)> = match family {
                LossFamily::SigmoidCe => vec![(LossConfig::sigmoid_ce(), None, None, String::new())],
                LossFamily::Asymmetric => vec![(
                    LossConfig::asymmetric(a.gamma_pos, a.gamma_neg, a.clip),
                    None,
                    None,
                    String::new(),
                )],
                LossFamily::Focal => {
                    if a.alpha.is_empty() || a.gamma.is_empty() {
                        return Err(CliError::Usage("focal cells need --alpha and --gamma values".into()));
                    }
                    let mut v = Vec::new();
                    for &al in &a.alpha {
                        for &g in &a.gamma {
                            v.push((LossConfig::focal(al, g), Some(al), Some(g), format!("_a{al}_g{g}")));
                        }
                    }
                    v
                }
            };
            for (loss, alpha, gamma, suffix) in variants {
                let mut cfg = DilutionConfig::new(c, loss);
                cfg.selected = a.selected.unwrap_or(c);
                cfg.iters = a.iters;
                cfg.lr = a.lr;
                cfg.batch_size = a.batch_size;
                cfg.positives_per_image = a.positives;
                cfg.hard_fraction = a.hard_fraction;
                cfg.divergence_threshold = a.divergence_threshold;
                cfg.seed = a.seed;
                cfg.validate()?;
                cells.push(Cell {
                    file: format!("trace_{}_C{c}{suffix}.csv", family.short_name()),
                    family,
                    alpha,
                    gamma,
                    cfg,
                });
            }
        }
    }
    Ok(cells)
}

/// Runs `f` over `items` on up to `threads` workers, keeping input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

pub const STABILITY_CSV_HEADER: &str =
    "file,loss,categories,alpha,gamma,iterations,diverged,diverged_at,mean_rho_500,final_rho,final_eta";

fn cmd_dilution(a: DilutionArgs) -> CliResult<()> {
    let cells = dilution_cells(&a)?;
    let threads = a
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let traces: Vec<crate::Result<DilutionTrace>> = parallel_map(&cells, threads, |c| simulate_trace(&c.cfg));

    let mut out = OutputSet::create(&a.out.out)?;
    let mut rows = Vec::with_capacity(cells.len());
    for (cell, trace) in cells.iter().zip(traces) {
        let trace = trace?;
        out.write(&cell.file, |w| trace.write_csv(w))?;
        let last = trace.records.last();
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        rows.push(format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            cell.file,
            cell.family.short_name(),
            cell.cfg.categories,
            opt(cell.alpha),
            opt(cell.gamma),
            trace.records.len(),
            trace.diverged(),
            trace.diverged_at.map_or(String::new(), |i| i.to_string()),
            opt((!trace.records.is_empty()).then(|| trace.mean_rho(500))),
            opt(last.map(|r| r.rho)),
            opt(last.map(|r| r.eta)),
        ));
        let flag = match trace.diverged_at {
            Some(i) => format!("UNSTABLE (diverged at iteration {i})"),
            None => "stable".into(),
        };
        println!("{:<40} {flag}", cell.file);
    }
    out.write("stability.csv", |w| {
        writeln!(w, "{STABILITY_CSV_HEADER}")?;
        for r in &rows {
            writeln!(w, "{r}")?;
        }
        Ok(())
    })?;
    let seed = a.seed;
    out.finish("dilution", seed, &a)?;
    Ok(())
}

fn write_query_csv(w: &mut impl Write, tree: &CategoryTree, q: &crate::tensor::Matrix) -> std::io::Result<()> {
    write!(w, "id,name")?;
    for j in 0..q.cols() {
        write!(w, ",q{j}")?;
    }
    writeln!(w)?;
    for v in 0..tree.len() {
        write!(w, "{},{}", tree.id(v), csv_field(tree.name(v)))?;
        for x in q.row(v) {
            write!(w, ",{x}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

fn cmd_tree(mut a: TreeArgs) -> CliResult<()> {
    let policy = WeightPolicy::new(a.policy, a.w)?;
    if a.dim == 0 {
        return Err(CliError::Validation("--dim must be positive".into()));
    }
    a.taxonomy = absolute(&a.taxonomy)?;
    let tree = CategoryTree::load(&a.taxonomy)?;
    let mut rng = stream_rng(a.seed, streams::PROTOTYPES);
    let initial = CategoryQuerySet::random_for_tree(&tree, a.dim, a.init_std, &mut rng);
    let enhanced = build_hierarchical_queries(&tree, &initial, &policy)?;

    let mut out = OutputSet::create(&a.out.out)?;
    out.write("initial_queries.csv", |w| write_query_csv(w, &tree, initial.embeddings()))?;
    out.write("enhanced_queries.csv", |w| write_query_csv(w, &tree, enhanced.embeddings()))?;
    out.write("node_weights.csv", |w| {
        writeln!(w, "id,name,parent,children,alpha")?;
        for v in 0..tree.len() {
            let parent = tree.parent(v).map_or(String::new(), |p| tree.id(p).to_string());
            writeln!(
                w,
                "{},{},{},{},{}",
                tree.id(v),
                csv_field(tree.name(v)),
                parent,
                tree.child_count(v),
                tree.adaptive_weight(v, &policy)
            )?;
        }
        Ok(())
    })?;
    println!(
        "{} nodes, max children {}, {} roots",
        tree.len(),
        tree.max_children(),
        tree.roots().count()
    );
    let seed = a.seed;
    out.finish("tree", seed, &a)?;
    Ok(())
}

fn world_config(categories: usize, flags: &WorldFlags, seed: u64) -> CliResult<WorldConfig> {
    let mut w = WorldConfig::new(categories, flags.dim);
    w.tokens_per_image = flags.tokens;
    w.labels_per_image = match flags.labels.as_slice() {
        [lo, hi] => (*lo, *hi),
        _ => return Err(CliError::Usage("--labels takes min,max".into())),
    };
    w.signal_strength = flags.signal;
    w.noise_std = flags.noise_std;
    w.prototypes = flags.prototypes;
    w.zipf_exponent = flags.zipf;
    w.seed = seed;
    Ok(w)
}

fn leaves(tree: &CategoryTree) -> Vec<usize> {
    (0..tree.len()).filter(|&v| tree.is_leaf(v)).collect()
}

fn cmd_world(a: WorldArgs) -> CliResult<()> {
    let mut w = world_config(a.categories, &a.world, a.seed)?;
    w.tree_depth = a.depth;
    w.branching = match a.branching.as_slice() {
        [lo, hi] => (*lo, *hi),
        _ => return Err(CliError::Usage("--branching takes min,max".into())),
    };
    let tree = generate_taxonomy(&w)?;
    let protos = generate_prototypes(&w)?;
    let pool = leaves(&tree);
    let data = generate_dataset(&w, &protos, 0, a.world.images, Some(&pool))?;

    let mut out = OutputSet::create(&a.out.out)?;
    out.write("taxonomy.json", |f| {
        f.write_all(tree.to_json().map_err(std::io::Error::other)?.as_bytes())?;
        writeln!(f)
    })?;
    out.write("dataset.jsonl", |f| write_dataset(f, &data).map_err(std::io::Error::other))?;
    println!("{} categories ({} leaves), {} images", tree.len(), pool.len(), data.len());
    let seed = a.seed;
    out.finish("world", seed, &a)?;
    Ok(())
}

fn load_dataset(path: &Path) -> CliResult<Vec<SyntheticSample>> {
    Ok(read_dataset(BufReader::new(File::open(path)?))?)
}

fn cmd_train_select(mut a: TrainSelectArgs) -> CliResult<()> {
    if let Some(p) = &a.taxonomy {
        a.taxonomy = Some(absolute(p)?);
    }
    if let Some(p) = &a.dataset {
        a.dataset = Some(absolute(p)?);
    }
    let tree = a.taxonomy.as_deref().map(CategoryTree::load).transpose()?;
    let categories = match (&tree, a.categories) {
        (Some(t), Some(c)) if t.len() != c => {
            return Err(CliError::Validation(format!(
                "--categories {c} but the taxonomy has {} nodes",
                t.len()
            )))
        }
        (Some(t), _) => t.len(),
        (None, c) => c.unwrap_or(200),
    };
    a.categories = Some(categories);
    if a.k.is_empty() {
        a.k = vec![default_k(categories)];
    }
    let relations = a.relations.unwrap_or(if tree.is_some() { RelationsArg::Tree } else { RelationsArg::None });
    a.relations = Some(relations);

    let world = world_config(categories, &a.world, a.seed)?;
    let pool = tree.as_ref().map(leaves);
    let (train, eval) = match &a.dataset {
        Some(p) => {
            let data = load_dataset(p)?;
            let held = a.eval_images.min(data.len());
            let (t, e) = data.split_at(data.len() - held);
            (t.to_vec(), e.to_vec())
        }
        None => {
            let protos = generate_prototypes(&world)?;
            let t = generate_dataset(&world, &protos, 0, a.world.images, pool.as_deref())?;
            let e = generate_dataset(&world, &protos, a.world.images as u64, a.eval_images, pool.as_deref())?;
            (t, e)
        }
    };
    for s in train.iter().chain(&eval) {
        if s.image_features.cols() != a.world.dim || s.ground_truth.iter().any(|&g| g >= categories) {
            return Err(CliError::Validation(
                "dataset does not match --dim / --categories".into(),
            ));
        }
    }

    let sel_cfg = SelectionConfig {
        heads: a.heads,
        ffn_hidden: a.ffn_hidden.unwrap_or(a.world.dim),
        seed: a.seed,
        ..SelectionConfig::new(categories, a.world.dim)
    };
    let rel = match relations {
        RelationsArg::None => QueryRelations::Independent,
        RelationsArg::SelfAttention => QueryRelations::SelfAttention,
        RelationsArg::Tree => {
            let t = tree
                .as_ref()
                .ok_or_else(|| CliError::Usage("--relations tree needs --taxonomy".into()))?;
            QueryRelations::Hierarchy(hierarchy_mix(t, &WeightPolicy::default()))
        }
    };
    let mut module = SelectionModule::new(sel_cfg, rel)?;
    let train_cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        cosine_decay: !a.constant_lr,
        optimizer: a.optimizer,
        batch_size: a.batch_size,
        k: a.k[0],
        loss: LossConfig::asymmetric(a.gamma_pos, a.gamma_neg, a.clip),
        seed: a.seed,
    };
    for &k in &a.k {
        if k == 0 || k > categories {
            return Err(CliError::Validation(format!("k = {k} outside 1..={categories}")));
        }
    }
    let report = train_selection_stage(&mut module, &train, &train_cfg, tree.as_ref())?;

    let mut out = OutputSet::create(&a.out.out)?;
    out.write("training_report.csv", |w| report.write_csv(w))?;
    let seed = a.seed;
    if let Some(d) = &report.diverged {
        out.finish("train-select", seed, &a)?;
        return Err(CliError::Numerical(format!(
            "training diverged after epoch {}: {}",
            d.epoch, d.reason
        )));
    }
    let eval_set = if eval.is_empty() { &train } else { &eval };
    let mut ks = a.k.clone();
    ks.sort_unstable();
    ks.dedup();
    let recalls = recall_at_ks(&module, eval_set, &ks)?;
    out.write("recall_by_k.csv", |w| {
        writeln!(w, "k,arc_recall,std_error,images,skipped_empty")?;
        for (k, r) in ks.iter().zip(&recalls) {
            writeln!(w, "{k},{},{},{},{}", r.mean, r.std_error, r.images, r.skipped_empty)?;
        }
        Ok(())
    })?;
    out.write("params.json", |w| write_params(w, module.params()).map_err(std::io::Error::other))?;
    if let Some(r) = report.records.last() {
        println!("final AR^C at k={}: {} (epoch {}, loss {:e})", train_cfg.k, r.arc_recall, r.epoch, r.loss);
    }
    for (k, r) in ks.iter().zip(&recalls) {
        println!("  k={k:<5} AR^C {:.4} ± {:.4}", r.mean, r.std_error);
    }
    out.finish("train-select", seed, &a)?;
    Ok(())
}

fn cmd_selfcheck(a: SelfcheckArgs) -> CliResult<()> {
    let report = run_selfcheck(&SelfCheckOptions {
        quick: a.quick,
        fault: a.inject_fault,
        seed: a.seed,
    });
    for o in &report.outcomes {
        println!("{o}  [{:.2?}]", o.elapsed);
    }
    let mut out = OutputSet::create(&a.out.out)?;
    out.write("selfcheck.csv", |w| w.write_all(report.to_csv().as_bytes()))?;
    let seed = a.seed;
    out.finish("selfcheck", seed, &a)?;
    let failed: Vec<&str> = report.failures().map(|o| o.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("failed checks: {}", failed.join(", "))))
    }
}

/// Rebuilds the command recorded in `manifest`, writing into `out`.
pub fn command_from_manifest(manifest: &RunManifest, out: &Path) -> CliResult<Command> {
    let mut config = manifest.config.clone();
    config["out"] = serde_json::json!({ "out": out });
    let bad = |e: serde_json::Error| CliError::Validation(format!("manifest config: {e}"));
    Ok(match manifest.command.as_str() {
        "dilution" => Command::Dilution(serde_json::from_value(config).map_err(bad)?),
        "tree" => Command::Tree(serde_json::from_value(config).map_err(bad)?),
        "world" => Command::World(serde_json::from_value(config).map_err(bad)?),
        "train-select" => Command::TrainSelect(serde_json::from_value(config).map_err(bad)?),
        "selfcheck" => Command::Selfcheck(serde_json::from_value(config).map_err(bad)?),
        other => return Err(CliError::Validation(format!("cannot replay command {other:?}"))),
    })
}

fn same_bytes(a: &Path, b: &Path) -> CliResult<bool> {
    let (ra, rb) = (BufReader::new(File::open(a)?), BufReader::new(File::open(b)?));
    let (la, lb): (Vec<_>, Vec<_>) = (ra.split(b'\n').collect(), rb.split(b'\n').collect());
    if la.len() != lb.len() {
        return Ok(false);
    }
    for (x, y) in la.into_iter().zip(lb) {
        if x? != y? {
            return Ok(false);
        }
    }
    Ok(true)
}

fn cmd_replay(a: ReplayArgs) -> CliResult<()> {
    let manifest = RunManifest::load(&a.manifest)?;
    if manifest.version != env!("CARGO_PKG_VERSION") {
        eprintln!(
            "warning: manifest written by version {}, replaying with {}",
            manifest.version,
            env!("CARGO_PKG_VERSION")
        );
    }
    let source = a.manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let target = a.out.unwrap_or_else(|| source.join("replay"));
    if absolute(&source).ok() == fs::canonicalize(&target).ok() {
        return Err(CliError::Usage("replay output directory must differ from the original".into()));
    }
    let command = command_from_manifest(&manifest, &target)?;
    match execute(command) {
        Ok(()) | Err(CliError::Numerical(_)) => {}
        Err(e) => return Err(e),
    }
    let mut differing = Vec::new();
    for name in &manifest.outputs {
        let ok = same_bytes(&source.join(name), &target.join(name))?;
        println!("{} {name}", if ok { "identical" } else { "DIFFERS  " });
        if !ok {
            differing.push(name.as_str());
        }
    }
    if differing.is_empty() {
        println!("replay reproduced {} outputs bit for bit", manifest.outputs.len());
        Ok(())
    } else {
        Err(CliError::Numerical(format!("outputs differ: {}", differing.join(", "))))
    }
}
