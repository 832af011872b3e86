//! Inverse-CSG fitting: batch sampling, Adam updates and the fit loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{forward_backward, loss_mse, GradientBuffer, ParamVector};
use crate::error::{Error, Result};
use crate::fuzzy::OpKind;
use crate::primitives::Point;
use crate::target::TargetOracle;
use crate::tree::{BooleanOp, CsgTree, Node};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Parameter(format!(
                "learning rate must be > 0, got {}",
                self.lr
            )));
        }
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::Parameter("Adam betas must lie in (0, 1)".into()));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Parameter("Adam eps must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-parameter moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step_count: 0,
            config,
        })
    }
}

/// One bias-corrected Adam update of `params` in place. A non-finite
/// gradient leaves both `params` and `state` untouched.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &GradientBuffer) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.values.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical {
            node: i,
            what: format!("gradient entry {i} is {}", grads.values[i]),
        });
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(&grads.values)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Training batch composition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub frac_surface: f64,
    pub frac_near: f64,
    pub frac_volume: f64,
    /// Half-width of the occupancy band around 0.5 counted as near the surface.
    pub near_band: f64,
    pub resample_every: usize,
    pub batch_size: usize,
    /// Rejection-sampling budget as a multiple of `batch_size`.
    pub candidate_factor: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            frac_surface: 0.4,
            frac_near: 0.4,
            frac_volume: 0.2,
            near_band: 0.4,
            resample_every: 10,
            batch_size: 4096,
            candidate_factor: 100,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let fr = [self.frac_surface, self.frac_near, self.frac_volume];
        if fr.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
            return Err(Error::Parameter(
                "sampling fractions must be nonnegative".into(),
            ));
        }
        if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!(
                "sampling fractions sum to {}, not 1",
                fr.iter().sum::<f64>()
            )));
        }
        if !(self.near_band > 0.0 && self.near_band <= 0.5) {
            return Err(Error::Parameter(format!(
                "near band half-width must lie in (0, 0.5], got {}",
                self.near_band
            )));
        }
        if self.resample_every == 0 || self.batch_size == 0 || self.candidate_factor == 0 {
            return Err(Error::Parameter(
                "resample_every, batch_size and candidate_factor must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Surface, near and volume counts for a batch of `n`.
    pub fn split(&self, n: usize) -> (usize, usize, usize) {
        let surface = ((self.frac_surface * n as f64).round() as usize).min(n);
        let near = ((self.frac_near * n as f64).round() as usize).min(n - surface);
        (surface, near, n - surface - near)
    }
}

/// Draws a training batch and its target occupancies. Without a surface
/// sampler the surface quota is drawn from the near-surface band instead.
pub fn sample_points<R: Rng>(
    target: &dyn TargetOracle,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<(Vec<Point>, Vec<f64>)> {
    cfg.validate()?;
    let (mut n_surface, mut n_near, n_volume) = cfg.split(cfg.batch_size);
    if n_surface > 0 && !target.has_surface_sampler() {
        log::info!(
            "target has no surface sampler; drawing {n_surface} surface points from the near band"
        );
        n_near += n_surface;
        n_surface = 0;
    }
    let mut points = Vec::with_capacity(cfg.batch_size);
    if n_surface > 0 {
        points.extend(target.sample_surface(n_surface, rng)?);
    }
    if n_near > 0 {
        points.extend(sample_band(target, cfg, n_near, rng)?);
    }
    points.extend(target.bbox().sample_n(n_volume, rng));
    let occ = target.occupancy(&points)?;
    Ok((points, occ))
}

fn sample_band<R: Rng>(
    target: &dyn TargetOracle,
    cfg: &SamplerConfig,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Point>> {
    let budget = cfg.batch_size.saturating_mul(cfg.candidate_factor);
    let (lo, hi) = (0.5 - cfg.near_band, 0.5 + cfg.near_band);
    let chunk = (4 * count).max(256);
    let mut out = Vec::with_capacity(count);
    let mut drawn = 0;
    while out.len() < count {
        if drawn >= budget {
            return Err(Error::Sampling(format!(
                "kept {} of {count} near-surface points after {budget} candidates; \
                 the occupancy band ({lo}, {hi}) may be too narrow for this target, try widening near_band",
                out.len()
            )));
        }
        let n = chunk.min(budget - drawn);
        drawn += n;
        let cand = target.bbox().sample_n(n, rng);
        let occ = target.band_occupancy(&cand)?;
        for (p, o) in cand.into_iter().zip(occ) {
            if out.len() < count && o > lo && o < hi {
                out.push(p);
            }
        }
    }
    Ok(out)
}

/// How boolean nodes are treated during a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BooleanMode {
    /// Trainable unified operators.
    Unified,
    /// Random fixed product-logic operations.
    FixedProduct,
    /// Random fixed min/max operations.
    FixedGodel,
    /// Trainable bilinear blends.
    Bilinear,
}

impl BooleanMode {
    pub const ALL: [BooleanMode; 4] = [
        BooleanMode::Unified,
        BooleanMode::FixedProduct,
        BooleanMode::FixedGodel,
        BooleanMode::Bilinear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BooleanMode::Unified => "unified",
            BooleanMode::FixedProduct => "fixed-product",
            BooleanMode::FixedGodel => "fixed-godel",
            BooleanMode::Bilinear => "bilinear",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }
}

/// Converts every boolean node of `tree` to `mode`. Unified nodes are kept
/// as they are in unified mode; fixed modes draw each node's operation
/// uniformly from the four operations.
pub fn apply_mode<R: Rng + ?Sized>(
    tree: &mut CsgTree,
    mode: BooleanMode,
    rng: &mut R,
) -> Result<()> {
    for id in 0..tree.len() {
        let Node::Boolean { op, .. } = &tree.nodes()[id] else {
            continue;
        };
        let new_op = match (mode, op) {
            (BooleanMode::Unified, BooleanOp::Unified { .. }) => continue,
            (BooleanMode::Bilinear, BooleanOp::Bilinear { .. }) => continue,
            (BooleanMode::Unified, _) => BooleanOp::Unified {
                c_raw: [(); 4].map(|_| rng.gen_range(-0.5..=0.5)),
            },
            (BooleanMode::Bilinear, _) => BooleanOp::Bilinear {
                uv_raw: [(); 2].map(|_| rng.gen_range(-0.5..=0.5)),
            },
            (BooleanMode::FixedProduct, _) => BooleanOp::Product(OpKind::ALL[rng.gen_range(0..4)]),
            (BooleanMode::FixedGodel, _) => BooleanOp::Godel(OpKind::ALL[rng.gen_range(0..4)]),
        };
        tree.set_op(id, new_op)?;
    }
    Ok(())
}

/// Everything a fit needs besides the tree and target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub iterations: usize,
    pub sampler: SamplerConfig,
    pub adam: AdamConfig,
    pub mode: BooleanMode,
    pub seed: u64,
    /// Uniform points used for the reported held-out MSE.
    pub holdout_points: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 5000,
            sampler: SamplerConfig::default(),
            adam: AdamConfig::default(),
            mode: BooleanMode::Unified,
            seed: 0,
            holdout_points: 200_000,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Parameter("iterations must be at least 1".into()));
        }
        if self.holdout_points == 0 {
            return Err(Error::Parameter("holdout_points must be at least 1".into()));
        }
        self.sampler.validate()?;
        self.adam.validate()
    }
}

/// Result of [`fit`].
#[derive(Debug)]
pub struct FitOutcome {
    /// Fitted tree, or the last tree that evaluated cleanly if the run aborted.
    pub tree: CsgTree,
    /// Batch loss at every completed iteration.
    pub history: Vec<f64>,
    /// MSE against the target on uniform held-out points.
    pub holdout_mse: f64,
    /// The error that stopped the run early, if any.
    pub aborted: Option<Error>,
}

/// RNG stream used for held-out points, distinct from the training stream.
const HOLDOUT_STREAM: u64 = 1;

/// MSE between `tree` and `target` on `n` uniform points from a stream
/// determined by `seed`.
pub fn holdout_mse(tree: &CsgTree, target: &dyn TargetOracle, n: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(HOLDOUT_STREAM);
    let pts = target.bbox().sample_n(n, &mut rng);
    loss_mse(&tree.eval(&pts)?, &target.occupancy(&pts)?)
}

/// Fits `tree` to `target` by Adam on the batch MSE.
///
/// Configuration and sampling errors are returned as `Err`. Numerical
/// failures during the loop end the run early and are reported in
/// [`FitOutcome::aborted`].
pub fn fit(tree: CsgTree, target: &dyn TargetOracle, cfg: &FitConfig) -> Result<FitOutcome> {
    cfg.validate()?;
    if tree.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "{}D tree fitted to a {}D target",
            tree.dim(),
            target.dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tree = tree;
    apply_mode(&mut tree, cfg.mode, &mut rng)?;
    let mut params = ParamVector::from_tree(&tree);
    let mut adam = AdamState::new(params.len(), cfg.adam)?;
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut batch = (Vec::new(), Vec::new());
    let mut last_good = tree.clone();
    let mut aborted = None;

    for it in 0..cfg.iterations {
        if it % cfg.sampler.resample_every == 0 {
            batch = sample_points(target, &cfg.sampler, &mut rng)?;
        }
        let step = forward_backward(&tree, &batch.0, &batch.1).and_then(|(loss, grads)| {
            let mut next = params.clone();
            adam_step(&mut adam, next.values_mut(), &grads)?;
            Ok((loss, next))
        });
        match step {
            Ok((loss, next)) => {
                history.push(loss);
                last_good = tree.clone();
                params = next;
                params.apply_to(&mut tree)?;
            }
            Err(e @ Error::Numerical { .. }) => {
                log::warn!("fit aborted at iteration {it}: {e}");
                tree = last_good.clone();
                aborted = Some(e);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let holdout = holdout_mse(&tree, target, cfg.holdout_points, cfg.seed)?;
    Ok(FitOutcome {
        tree,
        history,
        holdout_mse: holdout,
        aborted,
    })
}
