//! Tree construction from continuous models.
//!
//! Three builders with a shared forward skeleton:
//!
//! * `monte_carlo_tree` — children are i.i.d. draws from each node's
//!   conditional law, equal weights;
//! * `stagewise_optimal_tree` — each conditional law is quantized into its
//!   branch count of points (1-D by a deterministic fixed-point iteration on
//!   closed-form cell moments, multi-D by seeded competitive learning), with
//!   Voronoi-cell masses as child probabilities;
//! * `forward_backward` — starting from a given tree, a backward sweep
//!   t = T-1 … 1 runs a stochastic projected-gradient pass per stage-(t-1)
//!   subtree: draw a joint tail sample, find the nearest scenario, and pull
//!   that scenario's shared coordinates toward the sample with step
//!   `1/(n_s k^e)`, where `n_s` is the number of scenarios sharing the
//!   stage-s coordinate. Storing values on tree nodes makes the
//!   non-anticipativity projection exact by construction: one node update IS
//!   the class update.
//!
//! The backward pass descends the flattened-tail upper bound on the process
//! distance; with the two-stage variant only stages t and t+1 move, which
//! targets the two-stage block bound instead and skips rewriting the whole
//! future.

use crate::models::{ModelError, ProcessModel};
use crate::normal;
use crate::rng::stream_rng;
use crate::transport::euclidean;
use crate::tree::{ScenarioTree, TreeError, TreeNode};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QuantizeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("quantizer diverged at stage {stage}: objective rose {rises} sweeps in a row")]
    QuantizerDiverged { stage: usize, rises: usize },
    #[error("subtree under node {node} has no scenarios")]
    EmptySubtree { node: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Step-size schedule for the backward pass; `base(k)` multiplies the
/// per-stage class factor `1/n_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum StepRule {
    /// `k^{-exponent}`; not summable, square-summable for exponent > 1/2.
    Diminishing { exponent: f64 },
    /// `1/k`.
    SquareSummable,
    /// `1/(k * g_k^2)` with the sample's gradient-scale `g_k` (the nearest
    /// distance at iteration k).
    Polyak,
}

impl StepRule {
    fn base(&self, k: usize, grad_scale_sq: f64) -> f64 {
        match *self {
            StepRule::Diminishing { exponent } => (k as f64).powf(-exponent),
            StepRule::SquareSummable => 1.0 / k as f64,
            StepRule::Polyak => 1.0 / (k as f64 * grad_scale_sq.max(1e-12)),
        }
    }
}

/// Which coordinates a backward iteration is allowed to move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FbVariant {
    /// Update stages t..=T of the subtree (rewrites the whole future).
    Full,
    /// Update only stages t and t+1; the default, it descends the two-stage
    /// block bound and leaves later stages to their own passes.
    EfficientTwoStage,
}

#[derive(Debug, Clone, Serialize)]
pub struct QuantizeConfig {
    /// Sample budget K per subtree pass.
    pub iterations: usize,
    pub step: StepRule,
    /// Distance order: 2 pulls along raw residuals, 1 along normalized
    /// directions (zero-distance samples are skipped and counted).
    pub order: u32,
    pub variant: FbVariant,
    pub seed: u64,
    /// Floor for re-estimated conditional probabilities of children that no
    /// sample hit; 0 keeps them at zero mass (flagged either way).
    pub probability_floor: f64,
    /// Record the per-iteration objective trace.
    pub trace: bool,
    /// Sample count for Voronoi-mass estimation in the multi-dimensional
    /// stage-wise quantizer.
    pub mass_samples: usize,
    /// Lognormal models: optimize in demand space directly instead of
    /// optimizing the log-space core and exponentiating.
    pub lognormal_direct: bool,
}

impl Default for QuantizeConfig {
    fn default() -> Self {
        QuantizeConfig {
            iterations: 1000,
            step: StepRule::Diminishing { exponent: 0.75 },
            order: 2,
            variant: FbVariant::EfficientTwoStage,
            seed: 0,
            probability_floor: 0.0,
            trace: true,
            mass_samples: 8192,
            lognormal_direct: false,
        }
    }
}

impl QuantizeConfig {
    fn validate(&self) -> Result<(), QuantizeError> {
        if self.iterations == 0 {
            return Err(QuantizeError::Config("iteration budget must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.probability_floor) {
            return Err(QuantizeError::Config(format!(
                "probability floor {} outside [0, 1)",
                self.probability_floor
            )));
        }
        if self.order != 1 && self.order != 2 {
            return Err(QuantizeError::Config(format!(
                "order must be 1 or 2, got {}",
                self.order
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub stage: usize,
    pub subtree: usize,
    pub iteration: usize,
    /// Nearest-scenario cost of the drawn sample over the updated stage
    /// window, in the configured order (sum of stage norms for order 1, sum
    /// of squared stage norms for order 2).
    pub objective: f64,
    /// Cumulative zero-distance skips (order 1) in this subtree pass.
    pub skips: usize,
}

/// Backward-pass record: iteration objectives, the final nearest-sample
/// counts per scenario (from the last pass, whose single subtree covers the
/// whole tree), and re-estimation flags.
#[derive(Debug, Clone, Default, Serialize)]
pub struct FBTrace {
    pub rows: Vec<TraceRow>,
    /// Leaf id -> nearest-sample count from the final (stage-1) pass.
    pub final_counts: Vec<(usize, usize)>,
    /// Children that no sample hit (probability 0 or the configured floor).
    pub zero_mass_nodes: Vec<usize>,
    /// Parents whose whole child block went unsampled and kept its old
    /// conditional probabilities.
    pub unsampled_blocks: Vec<usize>,
}

// ---------------------------------------------------------------------------
// forward builders
// ---------------------------------------------------------------------------

fn check_branching(model: &ProcessModel, branching: &[usize]) -> Result<(), QuantizeError> {
    if branching.len() != model.stages() {
        return Err(QuantizeError::Config(format!(
            "branching list has {} entries for {} stages",
            branching.len(),
            model.stages()
        )));
    }
    if branching.iter().any(|&b| b == 0) {
        return Err(QuantizeError::Config("branch counts must be >= 1".into()));
    }
    Ok(())
}

/// Balanced tree whose children are i.i.d. draws from each node's
/// conditional law, with equal child probabilities.
pub fn monte_carlo_tree(
    model: &ProcessModel,
    branching: &[usize],
    seed: u64,
) -> Result<ScenarioTree, QuantizeError> {
    check_branching(model, branching)?;
    let mut rng = stream_rng(seed, 0x4D43);
    let mut nodes = vec![TreeNode {
        stage: 0,
        parent: None,
        children: Vec::new(),
        value: vec![],
        cond_prob: 1.0,
    }];
    let mut frontier: Vec<(usize, Vec<f64>)> = vec![(0, Vec::new())];
    for (t, &b) in branching.iter().enumerate() {
        let stage = t + 1;
        let p = 1.0 / b as f64;
        let mut next = Vec::new();
        for (id, history) in frontier {
            for _ in 0..b {
                let value = match model {
                    ProcessModel::Gaussian(g) => g.conditional(stage, &history)?.sample(&mut rng),
                    ProcessModel::Lognormal(l) => l
                        .conditional_log(stage, &history)?
                        .sample(&mut rng)
                        .into_iter()
                        .map(f64::exp)
                        .collect(),
                };
                let child = nodes.len();
                let mut child_history = history.clone();
                child_history.extend_from_slice(&value);
                nodes.push(TreeNode {
                    stage,
                    parent: Some(id),
                    children: Vec::new(),
                    value,
                    cond_prob: p,
                });
                next.push((child, child_history));
            }
        }
        frontier = next;
    }
    Ok(ScenarioTree::from_nodes(
        model.dim(),
        model.stages(),
        nodes,
    )?)
}

/// A b-point quantizer of one law: points and their Voronoi masses.
#[derive(Debug, Clone)]
struct PointQuantizer {
    points: Vec<Vec<f64>>,
    masses: Vec<f64>,
}

/// Mass of N(mean, sd^2) on (a, b).
fn cell_mass(mean: f64, sd: f64, a: f64, b: f64) -> f64 {
    normal::cdf((b - mean) / sd) - normal::cdf((a - mean) / sd)
}

/// First partial moment: E[X 1{a < X < b}] for X ~ N(mean, sd^2).
fn cell_first_moment(mean: f64, sd: f64, a: f64, b: f64) -> f64 {
    let alpha = (a - mean) / sd;
    let beta = (b - mean) / sd;
    mean * (normal::cdf(beta) - normal::cdf(alpha)) + sd * (normal::pdf(alpha) - normal::pdf(beta))
}

/// E[(X - z)^2 1{a < X < b}] for X ~ N(mean, sd^2).
fn cell_quad_cost(mean: f64, sd: f64, a: f64, b: f64, z: f64) -> f64 {
    let alpha = ((a - mean) / sd).max(-40.0);
    let beta = ((b - mean) / sd).min(40.0);
    let mass = normal::cdf(beta) - normal::cdf(alpha);
    let ez1 = (normal::cdf(beta) - beta * normal::pdf(beta))
        - (normal::cdf(alpha) - alpha * normal::pdf(alpha));
    let m1 = normal::pdf(alpha) - normal::pdf(beta);
    let d = mean - z;
    sd * sd * ez1 + 2.0 * sd * d * m1 + d * d * mass
}

/// E[|X - z| 1{a < X < b}] for X ~ N(mean, sd^2) and z inside (a, b).
fn cell_abs_cost(mean: f64, sd: f64, a: f64, b: f64, z: f64) -> f64 {
    let left = z * cell_mass(mean, sd, a, z) - cell_first_moment(mean, sd, a, z);
    let right = cell_first_moment(mean, sd, z, b) - z * cell_mass(mean, sd, z, b);
    left + right
}

/// Deterministic fixed-point quantizer of the standard normal: points start
/// at the quantiles (2i-1)/(2b) and are swept to their cell centroid (order
/// 2) or cell median (order 1) until the movement stalls.
fn standard_normal_quantizer(b: usize, r: u32) -> Result<PointQuantizer, QuantizeError> {
    let mut z: Vec<f64> = (0..b)
        .map(|i| normal::quantile((2 * i + 1) as f64 / (2 * b) as f64))
        .collect();
    let mut prev_obj = f64::INFINITY;
    let mut rises = 0usize;
    for _sweep in 0..500 {
        let mut bounds = vec![f64::NEG_INFINITY];
        for i in 1..b {
            bounds.push(0.5 * (z[i - 1] + z[i]));
        }
        bounds.push(f64::INFINITY);
        let mut next = Vec::with_capacity(b);
        let mut obj = 0.0;
        for i in 0..b {
            let (a, c) = (bounds[i], bounds[i + 1]);
            let mass = cell_mass(0.0, 1.0, a, c).max(1e-300);
            let point = if r == 2 {
                cell_first_moment(0.0, 1.0, a, c) / mass
            } else {
                // cell median: the quantile splitting the cell's mass
                let lo = normal::cdf(a.max(-40.0));
                let hi = normal::cdf(c.min(40.0));
                normal::quantile((0.5 * (lo + hi)).clamp(1e-300, 1.0 - 1e-16))
            };
            obj += if r == 2 {
                cell_quad_cost(0.0, 1.0, a, c, point)
            } else {
                cell_abs_cost(0.0, 1.0, a, c, point)
            };
            next.push(point);
        }
        if obj > prev_obj + 1e-12 {
            rises += 1;
            if rises >= 3 {
                return Err(QuantizeError::QuantizerDiverged { stage: 0, rises });
            }
        } else {
            rises = 0;
        }
        let moved: f64 = z
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        z = next;
        prev_obj = obj;
        if moved < 1e-12 {
            break;
        }
    }
    let mut bounds = vec![f64::NEG_INFINITY];
    for i in 1..b {
        bounds.push(0.5 * (z[i - 1] + z[i]));
    }
    bounds.push(f64::INFINITY);
    let masses: Vec<f64> = (0..b)
        .map(|i| cell_mass(0.0, 1.0, bounds[i], bounds[i + 1]))
        .collect();
    let total: f64 = masses.iter().sum();
    Ok(PointQuantizer {
        points: z.into_iter().map(|p| vec![p]).collect(),
        masses: masses.into_iter().map(|m| m / total).collect(),
    })
}

/// Competitive-learning quantizer of a zero-mean Gaussian with the given
/// conditional law (its covariance is history-independent, so one learned
/// codebook serves every node of the stage after a mean shift). Masses come
/// from a dedicated counting pass.
fn learned_quantizer(
    centered: &crate::models::ConditionalGaussian,
    b: usize,
    cfg: &QuantizeConfig,
    stream: u64,
) -> PointQuantizer {
    let mut rng = stream_rng(cfg.seed, stream);
    let mut points: Vec<Vec<f64>> = (0..b).map(|_| centered.sample(&mut rng)).collect();
    let iters = cfg.iterations.max(200 * b);
    for k in 1..=iters {
        let x = centered.sample(&mut rng);
        let nearest = (0..b)
            .min_by(|&i, &j| {
                euclidean(&points[i], &x)
                    .partial_cmp(&euclidean(&points[j], &x))
                    .unwrap()
            })
            .unwrap();
        let step = (k as f64).powf(-0.75);
        for (p, xv) in points[nearest].iter_mut().zip(&x) {
            *p -= step * (*p - xv);
        }
    }
    let mut counts = vec![0usize; b];
    for _ in 0..cfg.mass_samples.max(b * 50) {
        let x = centered.sample(&mut rng);
        let nearest = (0..b)
            .min_by(|&i, &j| {
                euclidean(&points[i], &x)
                    .partial_cmp(&euclidean(&points[j], &x))
                    .unwrap()
            })
            .unwrap();
        counts[nearest] += 1;
    }
    let total: usize = counts.iter().sum();
    let masses = counts
        .iter()
        .map(|&c| (c.max(1)) as f64 / total as f64)
        .collect::<Vec<_>>();
    let norm: f64 = masses.iter().sum();
    PointQuantizer {
        points,
        masses: masses.into_iter().map(|m| m / norm).collect(),
    }
}

/// Balanced tree whose children quantize each node's conditional law:
/// codebooks are computed once per (stage, branch count) on the centered
/// conditional and shifted by each node's conditional mean; lognormal models
/// are quantized in log space and exponentiated.
pub fn stagewise_optimal_tree(
    model: &ProcessModel,
    branching: &[usize],
    cfg: &QuantizeConfig,
) -> Result<ScenarioTree, QuantizeError> {
    cfg.validate()?;
    check_branching(model, branching)?;
    let core = model.gaussian_core();
    let dim = model.dim();
    let lognormal = model.is_lognormal();
    // per-stage codebooks on the centered conditional
    let mut codebooks: Vec<PointQuantizer> = Vec::with_capacity(branching.len());
    for (t, &b) in branching.iter().enumerate() {
        let stage = t + 1;
        if dim == 1 {
            let q = standard_normal_quantizer(b, cfg.order).map_err(|e| match e {
                QuantizeError::QuantizerDiverged { rises, .. } => {
                    QuantizeError::QuantizerDiverged { stage, rises }
                }
                other => other,
            })?;
            // scale by the conditional standard deviation (mean added per node)
            let zero_hist = vec![0.0; (stage - 1) * dim];
            let sd = core.conditional(stage, &zero_hist)?.covariance()[(0, 0)].sqrt();
            codebooks.push(PointQuantizer {
                points: q.points.iter().map(|p| vec![p[0] * sd]).collect(),
                masses: q.masses,
            });
        } else {
            // learn on the zero-history conditional, then recenter: the
            // conditional covariance is history-independent, so the centered
            // codebook is shareable across nodes
            let zero_hist = vec![0.0; (stage - 1) * dim];
            let zero_cond = core.conditional(stage, &zero_hist)?;
            let q = learned_quantizer(&zero_cond, b, cfg, 0x5157 + stage as u64);
            let mean0: Vec<f64> = zero_cond.mean().iter().cloned().collect();
            codebooks.push(PointQuantizer {
                points: q
                    .points
                    .iter()
                    .map(|p| p.iter().zip(&mean0).map(|(x, m)| x - m).collect())
                    .collect(),
                masses: q.masses,
            });
        }
    }
    let mut nodes = vec![TreeNode {
        stage: 0,
        parent: None,
        children: Vec::new(),
        value: vec![],
        cond_prob: 1.0,
    }];
    // log-space histories drive the conditioning; demand values are exp(log)
    let mut frontier: Vec<(usize, Vec<f64>)> = vec![(0, Vec::new())];
    for (t, &b) in branching.iter().enumerate() {
        let stage = t + 1;
        let book = &codebooks[t];
        let mut next = Vec::new();
        for (id, history) in frontier {
            let mean: Vec<f64> = {
                let c = core.conditional(stage, &history)?;
                c.mean().iter().cloned().collect()
            };
            for i in 0..b {
                let log_value: Vec<f64> = book.points[i]
                    .iter()
                    .zip(&mean)
                    .map(|(p, m)| p + m)
                    .collect();
                let value: Vec<f64> = if lognormal {
                    log_value.iter().map(|v| v.exp()).collect()
                } else {
                    log_value.clone()
                };
                let child = nodes.len();
                let mut child_history = history.clone();
                child_history.extend_from_slice(&log_value);
                nodes.push(TreeNode {
                    stage,
                    parent: Some(id),
                    children: Vec::new(),
                    value,
                    cond_prob: book.masses[i],
                });
                next.push((child, child_history));
            }
        }
        frontier = next;
    }
    Ok(ScenarioTree::from_nodes(dim, model.stages(), nodes)?)
}

// ---------------------------------------------------------------------------
// backward pass
// ---------------------------------------------------------------------------

///// One projected-gradient pull of a shared coordinate toward a sample stage:
/// order 2 moves along the raw residual, order 1 along the normalized
/// direction (returns false and leaves `z` alone on a zero residual).
pub fn pull_coordinate(z: &mut [f64], target: &[f64], factor: f64, r: u32) -> bool {
    if r == 2 {
        for (zi, ti) in z.iter_mut().zip(target) {
            *zi -= factor * (*zi - ti);
        }
        true
    } else {
        let norm = euclidean(z, target);
        if norm == 0.0 {
            return false;
        }
        for (zi, ti) in z.iter_mut().zip(target) {
            *zi -= factor * (*zi - ti) / norm;
        }
        true
    }
}

struct SubtreePass {
    new_values: Vec<(usize, Vec<f64>)>,
    new_probs: Vec<(usize, f64)>,
    rows: Vec<TraceRow>,
    leaf_counts: Vec<(usize, usize)>,
    zero_mass: Vec<usize>,
    unsampled: Vec<usize>,
}

/// Improve a tree's node values in place, backward stage by stage. Returns
/// the adjusted tree and the pass trace; the input tree fixes topology and
/// the initial quantizers.
pub fn forward_backward(
    model: &ProcessModel,
    initial: &ScenarioTree,
    cfg: &QuantizeConfig,
) -> Result<(ScenarioTree, FBTrace), QuantizeError> {
    cfg.validate()?;
    if model.stages() != initial.stages() || model.dim() != initial.dim() {
        return Err(QuantizeError::Config(format!(
            "model is {} stages x {} dims, tree is {} x {}",
            model.stages(),
            model.dim(),
            initial.stages(),
            initial.dim()
        )));
    }
    // lognormal default: optimize the log-space core against the log tree,
    // exponentiating at the end
    if let ProcessModel::Lognormal(l) = model {
        if !cfg.lognormal_direct {
            let log_tree = map_values(initial, f64::ln)?;
            let gauss = ProcessModel::Gaussian(l.core().clone());
            let (optimized, trace) = forward_backward(&gauss, &log_tree, cfg)?;
            return Ok((map_values(&optimized, f64::exp)?, trace));
        }
    }
    let mut tree = initial.clone();
    let stages = tree.stages();
    let mut trace = FBTrace::default();
    if stages < 2 {
        return Ok((tree, trace));
    }
    for t in (1..stages).rev() {
        let roots: Vec<usize> = tree.nodes_at_stage(t - 1).collect();
        let passes: Vec<Result<SubtreePass, QuantizeError>> = roots
            .par_iter()
            .enumerate()
            .map(|(idx, &root)| subtree_pass(model, &tree, t, idx, root, cfg))
            .collect();
        for pass in passes {
            let pass = pass?;
            for (id, v) in pass.new_values {
                tree.set_value(id, v);
            }
            for (id, p) in pass.new_probs {
                tree.set_cond_prob(id, p);
            }
            if cfg.trace {
                trace.rows.extend(pass.rows);
            }
            trace.zero_mass_nodes.extend(pass.zero_mass);
            trace.unsampled_blocks.extend(pass.unsampled);
            if t == 1 {
                trace.final_counts = pass.leaf_counts;
            }
        }
    }
    Ok((tree, trace))
}

fn map_values(tree: &ScenarioTree, f: fn(f64) -> f64) -> Result<ScenarioTree, QuantizeError> {
    let mut out = tree.clone();
    for id in 1..tree.node_count() {
        let mapped: Vec<f64> = tree.node(id).value.iter().map(|&v| f(v)).collect();
        if mapped.iter().any(|v| !v.is_finite()) {
            return Err(QuantizeError::Config(
                "lognormal trees need strictly positive values".into(),
            ));
        }
        out.set_value(id, mapped);
    }
    Ok(out)
}

/// Nearest scenario chain under the given working values, lowest index on
/// ties; returns the index and its path cost.
fn nearest_chain(
    chains: &[Vec<usize>],
    values: &std::collections::HashMap<usize, Vec<f64>>,
    sample: &[f64],
    dim: usize,
    order: u32,
) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_cost = f64::INFINITY;
    for (i, chain) in chains.iter().enumerate() {
        let cost: f64 = chain
            .iter()
            .enumerate()
            .map(|(s, id)| {
                let d = euclidean(&values[id], &sample[s * dim..(s + 1) * dim]);
                if order == 2 {
                    d * d
                } else {
                    d
                }
            })
            .sum();
        if cost < best_cost {
            best_cost = cost;
            best = i;
        }
    }
    (best, best_cost)
}

fn subtree_pass(
    model: &ProcessModel,
    tree: &ScenarioTree,
    t: usize,
    subtree_idx: usize,
    root: usize,
    cfg: &QuantizeConfig,
) -> Result<SubtreePass, QuantizeError> {
    let stages = tree.stages();
    let dim = tree.dim();
    let leaves = tree.leaves_under(root);
    if leaves.is_empty() {
        return Err(QuantizeError::EmptySubtree { node: root });
    }
    let history = tree.path_values(root);
    // node chains per scenario (stages t..=T) and shared-coordinate counts
    let span = stages - t + 1;
    let chains: Vec<Vec<usize>> = leaves
        .iter()
        .map(|&leaf| (t..=stages).map(|s| tree.ancestor(leaf, s)).collect())
        .collect();
    let mut ids: Vec<usize> = chains.iter().flatten().cloned().collect();
    ids.sort_unstable();
    ids.dedup();
    let n_of = |id: usize| tree.leaves_under(id).len();
    let counts: std::collections::HashMap<usize, usize> =
        ids.iter().map(|&id| (id, n_of(id))).collect();
    // working copies of the subtree's values
    let mut values: std::collections::HashMap<usize, Vec<f64>> = ids
        .iter()
        .map(|&id| (id, tree.node(id).value.clone()))
        .collect();
    let update_span = match cfg.variant {
        FbVariant::Full => span,
        FbVariant::EfficientTwoStage => span.min(2),
    };
    let mut rng = stream_rng(cfg.seed, 0xFB00_0000 + ((t as u64) << 20) + subtree_idx as u64);
    let mut drawn: Vec<Vec<f64>> = Vec::with_capacity(cfg.iterations);
    let mut skips = 0usize;
    let mut rows = Vec::new();
    // Polyak-Ruppert tail average over the nodes this pass updates: the
    // second half of the trajectory orbits the local optimum with step-sized
    // jitter, so its mean beats the last iterate. Untouched deeper nodes stay
    // bit-identical.
    let avg_from = cfg.iterations / 2 + 1;
    let updated: std::collections::HashSet<usize> = chains
        .iter()
        .flat_map(|c| c[..update_span].iter().cloned())
        .collect();
    let mut avg: std::collections::HashMap<usize, Vec<f64>> = updated
        .iter()
        .map(|&id| (id, vec![0.0; tree.node(id).value.len()]))
        .collect();
    let mut avg_n = 0usize;
    for k in 1..=cfg.iterations {
        let sample: Vec<f64> = match model {
            ProcessModel::Gaussian(g) => g.joint_tail_conditional(t, &history)?.sample(&mut rng),
            ProcessModel::Lognormal(l) => l.sample_tail(t, &history, &mut rng)?,
        };
        let (best, best_cost) = nearest_chain(&chains, &values, &sample, dim, cfg.order);
        // The schedule restarts at every pass on purpose: once a shallower
        // pass moves earlier stages, the deeper values must re-adapt to the
        // shifted assignment boundaries, which needs full-size steps again.
        let base = cfg.step.base(k, best_cost);
        let mut window_cost = 0.0;
        for s in 0..update_span {
            let id = chains[best][s];
            let target = &sample[s * dim..(s + 1) * dim];
            let z = values.get_mut(&id).expect("chain node");
            let d = euclidean(z, target);
            window_cost += if cfg.order == 2 { d * d } else { d };
            let factor = base / counts[&id] as f64;
            if !pull_coordinate(z, target, factor, cfg.order) {
                skips += 1;
            }
        }
        if cfg.trace {
            rows.push(TraceRow {
                stage: t,
                subtree: subtree_idx,
                iteration: k,
                objective: window_cost,
                skips,
            });
        }
        drawn.push(sample);
        if k >= avg_from {
            for (id, acc) in avg.iter_mut() {
                for (a, v) in acc.iter_mut().zip(&values[id]) {
                    *a += v;
                }
            }
            avg_n += 1;
        }
    }
    if avg_n > 0 {
        for (id, acc) in avg {
            let mean: Vec<f64> = acc.into_iter().map(|a| a / avg_n as f64).collect();
            values.insert(id, mean);
        }
    }
    // Count nearest-scenario assignments of the same K samples against the
    // settled values (as the stage-wise quantizer's mass pass does): counting
    // while values still drift misassigns the early samples and that bias
    // survives averaging.
    let mut leaf_hits = vec![0usize; leaves.len()];
    for sample in &drawn {
        let (best, _) = nearest_chain(&chains, &values, sample, dim, cfg.order);
        leaf_hits[best] += 1;
    }
    drop(drawn);
    // Conditional probabilities from nearest-sample path counts. A full pass
    // rewrites the whole future, so it re-estimates every stage it moved. A
    // two-stage pass owns only the stage of its root's children, where its K
    // samples are exactly conditioned and densest; its second window stage
    // keeps the estimate of that stage's own deeper pass (re-estimating it
    // here would spread K samples over b^2 grandchildren), except in the
    // deepest pass, which has no deeper neighbor and owns both stages.
    let mut node_hits: std::collections::HashMap<usize, usize> =
        ids.iter().map(|&id| (id, 0)).collect();
    for (i, &hits) in leaf_hits.iter().enumerate() {
        for &id in &chains[i] {
            *node_hits.get_mut(&id).unwrap() += hits;
        }
    }
    let prob_levels = match cfg.variant {
        FbVariant::Full => update_span,
        FbVariant::EfficientTwoStage if t == stages - 1 => update_span,
        FbVariant::EfficientTwoStage => 1,
    };
    let mut new_probs = Vec::new();
    let mut zero_mass = Vec::new();
    let mut unsampled = Vec::new();
    // walk parents level by level inside the owned window
    let mut parents: Vec<usize> = vec![root];
    for _level in 0..prob_levels {
        let mut next_parents = Vec::new();
        for &p in &parents {
            let children = &tree.node(p).children;
            let parent_hits = if p == root {
                cfg.iterations
            } else {
                node_hits[&p]
            };
            if parent_hits == 0 {
                unsampled.push(p);
            } else {
                let zero: Vec<usize> = children
                    .iter()
                    .cloned()
                    .filter(|c| node_hits[c] == 0)
                    .collect();
                let floor = cfg.probability_floor;
                if floor > 0.0 && (zero.len() as f64) * floor >= 1.0 {
                    return Err(QuantizeError::Config(format!(
                        "probability floor {floor} too large for {} zero-mass children",
                        zero.len()
                    )));
                }
                let scale = 1.0 - floor * zero.len() as f64;
                for &c in children {
                    let p_hat = if node_hits[&c] == 0 {
                        zero_mass.push(c);
                        floor
                    } else {
                        scale * node_hits[&c] as f64 / parent_hits as f64
                    };
                    new_probs.push((c, p_hat));
                }
            }
            next_parents.extend(children.iter().cloned());
        }
        parents = next_parents;
    }
    Ok(SubtreePass {
        new_values: values.into_iter().collect(),
        new_probs,
        rows,
        leaf_counts: leaves.iter().cloned().zip(leaf_hits).collect(),
        zero_mass,
        unsampled,
    })
}

/// Monte-Carlo estimate of the expected nearest-scenario path cost (the
/// quantity the backward pass descends): mean over sampled paths of
/// min over scenarios of the stage-additive cost in the given order.
pub fn objective_estimate(
    tree: &ScenarioTree,
    model: &ProcessModel,
    sample_count: usize,
    r: u32,
    seed: u64,
) -> Result<f64, QuantizeError> {
    let dim = tree.dim();
    let matrix = tree.scenario_matrix();
    let mut rng = stream_rng(seed, 0x0BE);
    let mut acc = 0.0;
    for _ in 0..sample_count {
        let path = model.sample_path(&mut rng);
        let mut best = f64::INFINITY;
        for leaf in 0..matrix.leaves() {
            let scenario = matrix.path(leaf);
            let mut cost = 0.0;
            for s in 0..tree.stages() {
                let span = s * dim..(s + 1) * dim;
                let d = euclidean(&scenario[span.clone()], &path[span]);
                cost += if r == 2 { d * d } else { d };
                if cost >= best {
                    break;
                }
            }
            best = best.min(cost);
        }
        acc += best;
    }
    Ok(acc / sample_count as f64)
}
