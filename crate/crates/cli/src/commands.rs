use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::Args;
use fuzzycsg::compare::{compare, format_table, initial_tree, CompareConfig};
use fuzzycsg::document;
use fuzzycsg::io::{
    loss_history_csv, occupancy_csv, render_slice, OccupancyGrid, PointSampleDataset, SlicePlane,
};
use fuzzycsg::optimizer::{fit, BooleanMode, FitConfig};
use fuzzycsg::primitives::Point;
use fuzzycsg::prune::{prune, PruneConfig};
use fuzzycsg::target::{load_target, BoundingBox, TargetOracle};
use fuzzycsg::tree::CsgTree;
use fuzzycsg::{autodiff::loss_mse, Error};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{self, FileConfig};
use crate::{Cli, Command};

const EXIT_INPUT: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

/// Numerical aborts map to 3, every other failure to 2.
pub fn exit_code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Numerical { .. }) => EXIT_NUMERICAL,
        _ => EXIT_INPUT,
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// `bundled:<name>`, a tree document or a dataset file.
    pub target: String,
    /// Output directory for tree.json, loss.csv and manifest.json.
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// unified, fixed-product, fixed-godel or bilinear.
    #[arg(long)]
    pub mode: Option<String>,
    /// Depth of the initial full tree.
    #[arg(long)]
    pub depth: Option<usize>,
    /// quadric, sphere or plane.
    #[arg(long)]
    pub primitive: Option<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub holdout_points: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    pub tree: PathBuf,
    /// Draw evaluation points around this target instead of uniformly.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Number of evaluation points.
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(short, long)]
    pub out: PathBuf,
    /// JSON report path (default: next to the output tree).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub tree: PathBuf,
    /// Dataset whose points are evaluated and whose occupancies are the reference.
    #[arg(long, conflicts_with = "uniform")]
    pub points: Option<PathBuf>,
    /// Evaluate at this many uniform points in the unit box.
    #[arg(long)]
    pub uniform: Option<usize>,
    /// Reference target for the summary MSE.
    #[arg(long)]
    pub reference: Option<String>,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    pub tree: PathBuf,
    /// Slice axis for 3D trees (0, 1 or 2).
    #[arg(long, requires = "offset")]
    pub axis: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub offset: Option<f64>,
    #[arg(long, default_value_t = 512)]
    pub resolution: usize,
    /// Draw the 0.5 isoline.
    #[arg(long)]
    pub isoline: bool,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    pub tree: PathBuf,
    /// Cells per axis, comma separated, e.g. `128,128`.
    #[arg(long, value_delimiter = ',')]
    pub dims: Vec<usize>,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    pub target: String,
    /// Comma-separated boolean modes.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "unified,fixed-product,fixed-godel"
    )]
    pub modes: Vec<String>,
    /// Number of seeds, counting up from --seed.
    #[arg(long, default_value_t = 1)]
    pub runs: u64,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub primitive: Option<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// JSON report path; the table is printed to stdout.
    #[arg(short, long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let mut file = config::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        file.fit.seed = seed;
    }
    match cli.command {
        Command::Fit(a) => cmd_fit(a, file),
        Command::Prune(a) => cmd_prune(a, file),
        Command::Eval(a) => cmd_eval(a, file.fit.seed),
        Command::RenderSlice(a) => cmd_render_slice(a),
        Command::ExportGrid(a) => cmd_export_grid(a),
        Command::Compare(a) => cmd_compare(a, file),
    }
}

fn read_tree(path: &Path) -> anyhow::Result<CsgTree> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    document::deserialize(&text).with_context(|| format!("loading tree {}", path.display()))
}

fn open_target(spec: &str) -> anyhow::Result<Box<dyn TargetOracle>> {
    load_target(spec).with_context(|| format!("loading target {spec}"))
}

fn parse_mode(name: &str) -> anyhow::Result<BooleanMode> {
    BooleanMode::from_name(name).ok_or_else(|| {
        let known: Vec<_> = BooleanMode::ALL.iter().map(|m| m.name()).collect();
        anyhow!(
            "unknown mode '{name}' (expected one of {})",
            known.join(", ")
        )
    })
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Serialize)]
struct FitManifest<'a> {
    target: &'a str,
    seed: u64,
    model: &'a config::ModelConfig,
    config: &'a FitConfig,
    iterations_completed: usize,
    final_batch_loss: Option<f64>,
    holdout_mse: f64,
    aborted: Option<String>,
    tree_sha256: String,
}

fn apply_fit_overrides(
    file: &mut FileConfig,
    iterations: Option<usize>,
    depth: Option<usize>,
    primitive: Option<String>,
    batch_size: Option<usize>,
    lr: Option<f64>,
) {
    if let Some(n) = iterations {
        file.fit.iterations = n;
    }
    if let Some(d) = depth {
        file.model.depth = d;
    }
    if let Some(p) = primitive {
        file.model.primitive = p;
    }
    if let Some(b) = batch_size {
        file.fit.sampler.batch_size = b;
    }
    if let Some(lr) = lr {
        file.fit.adam.lr = lr;
    }
}

fn cmd_fit(a: FitArgs, mut file: FileConfig) -> anyhow::Result<ExitCode> {
    apply_fit_overrides(
        &mut file,
        a.iterations,
        a.depth,
        a.primitive,
        a.batch_size,
        a.lr,
    );
    if let Some(m) = &a.mode {
        file.fit.mode = parse_mode(m)?;
    }
    if let Some(h) = a.holdout_points {
        file.fit.holdout_points = h;
    }
    file.fit.validate()?;
    let kind = file.model.kind()?;
    let target = open_target(&a.target)?;
    let start = initial_tree(file.model.depth, kind, target.dim(), file.fit.seed)?;
    let out = fit(start, target.as_ref(), &file.fit)?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let doc = document::serialize(&out.tree);
    write_file(&a.out.join("tree.json"), &doc)?;
    write_file(&a.out.join("loss.csv"), loss_history_csv(&out.history))?;
    let manifest = FitManifest {
        target: &a.target,
        seed: file.fit.seed,
        model: &file.model,
        config: &file.fit,
        iterations_completed: out.history.len(),
        final_batch_loss: out.history.last().copied(),
        holdout_mse: out.holdout_mse,
        aborted: out.aborted.as_ref().map(ToString::to_string),
        tree_sha256: sha256_hex(doc.as_bytes()),
    };
    write_file(
        &a.out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    println!(
        "held-out MSE {:.6e} after {} iterations",
        out.holdout_mse,
        out.history.len()
    );
    match out.aborted {
        Some(e) => {
            eprintln!("error: fit aborted: {e}; last good tree written");
            Ok(ExitCode::from(EXIT_NUMERICAL))
        }
        None => Ok(ExitCode::SUCCESS),
    }
}

fn cmd_prune(a: PruneArgs, file: FileConfig) -> anyhow::Result<ExitCode> {
    let threshold = a.threshold.unwrap_or(file.prune.threshold);
    let count = a.points.unwrap_or(file.prune.points);
    let tree = read_tree(&a.tree)?;
    let seed = file.fit.seed;
    let cfg = match &a.target {
        Some(spec) => {
            let target = open_target(spec)?;
            if target.dim() != tree.dim() {
                bail!(
                    "{}D tree pruned against a {}D target",
                    tree.dim(),
                    target.dim()
                );
            }
            PruneConfig::from_target(threshold, target.as_ref(), count, seed)?
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            PruneConfig::new(
                threshold,
                BoundingBox::unit(tree.dim()).sample_n(count, &mut rng),
            )?
        }
    };
    let (pruned, report) = prune(&tree, &cfg)?;
    write_file(&a.out, document::serialize(&pruned))?;
    let report_path = a
        .report
        .unwrap_or_else(|| a.out.with_extension("report.json"));
    write_file(&report_path, serde_json::to_string_pretty(&report)? + "\n")?;
    println!(
        "{} deletions, {} -> {} nodes, output MSE {:.3e}",
        report.deletions.len(),
        report.before.total,
        report.after.total,
        report.output_mse
    );
    Ok(ExitCode::SUCCESS)
}

/// Batched evaluation for full trees, per-point stack sweeps otherwise.
fn evaluate(tree: &CsgTree, points: &[Point]) -> fuzzycsg::Result<Vec<f64>> {
    if tree.is_full() {
        tree.eval(points)
    } else {
        points.par_iter().map(|p| tree.eval_stack(p)).collect()
    }
}

fn cmd_eval(a: EvalArgs, seed: u64) -> anyhow::Result<ExitCode> {
    let tree = read_tree(&a.tree)?;
    let (points, mut reference) = match (&a.points, a.uniform) {
        (Some(path), _) => {
            let data = PointSampleDataset::read(path)
                .with_context(|| format!("reading {}", path.display()))?;
            (data.points, Some(data.occupancy))
        }
        (None, Some(n)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (BoundingBox::unit(tree.dim()).sample_n(n, &mut rng), None)
        }
        (None, None) => bail!("give either --points <dataset> or --uniform <count>"),
    };
    if let Some(p) = points.first() {
        if p.dim() != tree.dim() {
            bail!("{}D points for a {}D tree", p.dim(), tree.dim());
        }
    }
    if let Some(spec) = &a.reference {
        let target = open_target(spec)?;
        if target.dim() != tree.dim() {
            bail!("{}D reference for a {}D tree", target.dim(), tree.dim());
        }
        reference = Some(target.occupancy(&points)?);
    }
    let occ = evaluate(&tree, &points)?;
    write_file(&a.out, occupancy_csv(&points, &occ, reference.as_deref()))?;
    match reference {
        Some(r) => println!("points {}  mse {:.6e}", points.len(), loss_mse(&occ, &r)?),
        None => println!("points {}", points.len()),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_render_slice(a: RenderArgs) -> anyhow::Result<ExitCode> {
    let tree = read_tree(&a.tree)?;
    let plane = match (tree.dim(), a.axis, a.offset) {
        (2, None, None) => SlicePlane::Full,
        (2, ..) => bail!("2D trees are rendered over the full domain; drop --axis/--offset"),
        (_, Some(axis), Some(offset)) => SlicePlane::Axis { axis, offset },
        _ => bail!("3D trees need --axis and --offset"),
    };
    let image = render_slice(
        &tree,
        &BoundingBox::unit(tree.dim()),
        plane,
        a.resolution,
        a.isoline,
    )?;
    image
        .write(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_export_grid(a: GridArgs) -> anyhow::Result<ExitCode> {
    let tree = read_tree(&a.tree)?;
    if a.dims.len() != tree.dim() || a.dims.contains(&0) {
        bail!("--dims needs {} positive sizes", tree.dim());
    }
    let grid = OccupancyGrid::sample(&tree, &a.dims, &BoundingBox::unit(tree.dim()))?;
    grid.write(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_compare(a: CompareArgs, mut file: FileConfig) -> anyhow::Result<ExitCode> {
    apply_fit_overrides(
        &mut file,
        a.iterations,
        a.depth,
        a.primitive,
        a.batch_size,
        a.lr,
    );
    file.fit.validate()?;
    if a.runs == 0 {
        bail!("--runs must be at least 1");
    }
    let modes = a
        .modes
        .iter()
        .map(|m| parse_mode(m))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let target = open_target(&a.target)?;
    let base = file.fit.seed;
    let cfg = CompareConfig {
        modes,
        seeds: (base..base + a.runs).collect(),
        depth: file.model.depth,
        primitive: file.model.kind()?,
        fit: file.fit,
        prune_threshold: file.prune.threshold,
        prune_points: file.prune.points,
    };
    let rows = compare(target.as_ref(), &cfg)?;
    write_file(&a.out, serde_json::to_string_pretty(&rows)? + "\n")?;
    print!("{}", format_table(&rows));
    Ok(ExitCode::SUCCESS)
}
