//! Side-by-side fits of one target under several boolean modes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::optimizer::{fit, holdout_mse, BooleanMode, FitConfig};
use crate::primitives::PrimitiveKind;
use crate::prune::{
    prune, CountSummary, PruneConfig, DEFAULT_PRUNE_POINTS, DEFAULT_PRUNE_THRESHOLD,
};
use crate::target::TargetOracle;
use crate::tree::{build_full_tree, CsgTree};

/// Random full tree for `seed`. Every mode of a comparison starts from it.
pub fn initial_tree(depth: usize, kind: PrimitiveKind, dim: usize, seed: u64) -> Result<CsgTree> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build_full_tree(depth, kind, dim, &mut rng)
}

#[derive(Debug, Clone)]
pub struct CompareConfig {
    pub modes: Vec<BooleanMode>,
    pub seeds: Vec<u64>,
    pub depth: usize,
    pub primitive: PrimitiveKind,
    /// Shared settings; `mode` and `seed` are overridden per run.
    pub fit: FitConfig,
    pub prune_threshold: f64,
    pub prune_points: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            modes: vec![
                BooleanMode::Unified,
                BooleanMode::FixedProduct,
                BooleanMode::FixedGodel,
            ],
            seeds: vec![0],
            depth: 4,
            primitive: PrimitiveKind::Quadric,
            fit: FitConfig::default(),
            prune_threshold: DEFAULT_PRUNE_THRESHOLD,
            prune_points: DEFAULT_PRUNE_POINTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub mode: BooleanMode,
    pub seed: u64,
    pub holdout_mse: f64,
    pub pruned_holdout_mse: f64,
    pub nodes_before: CountSummary,
    pub nodes_after: CountSummary,
    pub aborted: bool,
}

/// Fits, prunes and scores every (seed, mode) pair in seed-major order.
pub fn compare(target: &dyn TargetOracle, cfg: &CompareConfig) -> Result<Vec<CompareRow>> {
    if cfg.modes.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::Argument(
            "compare needs at least one mode and one seed".into(),
        ));
    }
    let mut rows = Vec::with_capacity(cfg.modes.len() * cfg.seeds.len());
    for &seed in &cfg.seeds {
        let start = initial_tree(cfg.depth, cfg.primitive, target.dim(), seed)?;
        let prune_cfg =
            PruneConfig::from_target(cfg.prune_threshold, target, cfg.prune_points, seed)?;
        for &mode in &cfg.modes {
            let fit_cfg = FitConfig {
                mode,
                seed,
                ..cfg.fit.clone()
            };
            let out = fit(start.clone(), target, &fit_cfg)?;
            let (pruned, _) = prune(&out.tree, &prune_cfg)?;
            rows.push(CompareRow {
                mode,
                seed,
                holdout_mse: out.holdout_mse,
                pruned_holdout_mse: holdout_mse(&pruned, target, fit_cfg.holdout_points, seed)?,
                nodes_before: out.tree.node_count().into(),
                nodes_after: pruned.node_count().into(),
                aborted: out.aborted.is_some(),
            });
        }
    }
    Ok(rows)
}

/// Plain-text table, one line per row.
pub fn format_table(rows: &[CompareRow]) -> String {
    let mut out = format!(
        "{:<14} {:>6} {:>12} {:>12} {:>8} {:>8} {:>8}\n",
        "mode", "seed", "mse", "pruned_mse", "nodes", "pruned", "aborted"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<14} {:>6} {:>12.6e} {:>12.6e} {:>8} {:>8} {:>8}\n",
            r.mode.name(),
            r.seed,
            r.holdout_mse,
            r.pruned_holdout_mse,
            r.nodes_before.total,
            r.nodes_after.total,
            r.aborted
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizer::SamplerConfig;
    use crate::target::{bundled_target, TreeTarget};

    #[test]
    fn one_row_per_mode_and_seed() {
        let target = TreeTarget::new(bundled_target("two-circles").unwrap());
        let cfg = CompareConfig {
            modes: vec![BooleanMode::Unified, BooleanMode::FixedGodel],
            seeds: vec![3, 4],
            depth: 1,
            primitive: PrimitiveKind::Sphere,
            fit: FitConfig {
                iterations: 20,
                holdout_points: 1000,
                sampler: SamplerConfig {
                    batch_size: 256,
                    ..Default::default()
                },
                ..Default::default()
            },
            prune_points: 2000,
            ..Default::default()
        };
        let rows = compare(&target, &cfg).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[1].mode, BooleanMode::FixedGodel);
        assert_eq!(rows[2].seed, 4);
        assert!(rows
            .iter()
            .all(|r| r.nodes_after.total <= r.nodes_before.total));
        assert_eq!(format_table(&rows).lines().count(), 5);
        let single = compare(
            &target,
            &CompareConfig {
                modes: vec![BooleanMode::Unified],
                seeds: vec![3],
                ..cfg
            },
        )
        .unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0], rows[0]);
    }
}
