//! Process distance between finite scenario trees.
//!
//! The distance of order r between two trees A and B is computed by a
//! backward recursion over subtree pairs. Writing D(m, n) for the r-th power
//! of the distance between the subtrees rooted at node m of A and node n of
//! B:
//!
//! ```text
//! D(m, n) = 0                                     for leaves,
//! D(m, n) = min_π Σ_{i,j} π(i,j) [ ‖v_i − v_j‖^r + D(i, j) ]   otherwise,
//! ```
//!
//! where (i, j) ranges over child pairs and π has the conditional child
//! probabilities as marginals. The reported distance is D(root, root)^{1/r};
//! at the last stage the transport reduces to the plain Kantorovich distance
//! between the conditional child distributions. Root values never enter.
//!
//! For r = 1 the stage terms add; for general r they compose in the ℓr sense
//! (sum the r-th powers, root once at the end), which keeps every bound in
//! this module valid because the recursion accumulates r-th powers
//! stage-additively.
//!
//! The module also provides the flattened-filtration lower-bound chain and
//! two families of finite-tree upper bounds: the stage-wise sum of supremal
//! conditional Kantorovich distances, and the two-stage block decomposition.

use crate::models::{ModelError, ProcessModel};
use crate::normal;
use crate::rng::stream_rng;
use crate::transport::{
    kw_distance_with_cost, root, solve_transport, CostMatrix, TransportError, TransportPlan,
};
use crate::tree::{ScenarioTree, TreeError};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NestedError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("order r = {got} not supported here: {why}")]
    UnsupportedOrder { got: u32, why: String },
}

/// Distances between subtree pairs at one stage: `rows` nodes of the first
/// tree × `cols` nodes of the second, row-major, already rooted (not r-th
/// powers).
#[derive(Debug, Clone)]
pub struct StageTable {
    pub stage: usize,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl StageTable {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }
}

#[derive(Debug, Clone)]
pub struct NestedDistanceResult {
    pub value: f64,
    pub order: u32,
    /// `stage_tables[t]` holds distances between the subtrees rooted at
    /// stage-t node pairs; the t = 0 table is 1×1 and equals `value`.
    pub stage_tables: Vec<StageTable>,
    /// Transport plan over leaf pairs composed from the stage-wise optimal
    /// conditional plans; populated on request. Its stage-additive cost
    /// equals `value^r` and its marginals are the leaf probabilities.
    pub leaf_plan: Option<TransportPlan>,
}

fn check_shapes(a: &ScenarioTree, b: &ScenarioTree) -> Result<(), NestedError> {
    if a.stages() != b.stages() {
        return Err(NestedError::ShapeMismatch(format!(
            "stage counts differ: {} vs {}",
            a.stages(),
            b.stages()
        )));
    }
    if a.dim() != b.dim() {
        return Err(NestedError::ShapeMismatch(format!(
            "dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    if a.stages() == 0 {
        return Err(NestedError::ShapeMismatch("trees need at least one stage".into()));
    }
    Ok(())
}

fn pow_r(x: f64, r: u32) -> f64 {
    match r {
        1 => x,
        2 => x * x,
        _ => x.powi(r as i32),
    }
}

fn dist_pow(a: &[f64], b: &[f64], r: u32) -> f64 {
    let d = crate::transport::euclidean(a, b);
    match r {
        1 => d,
        2 => d * d,
        _ => d.powi(r as i32),
    }
}

pub fn nested_distance(
    a: &ScenarioTree,
    b: &ScenarioTree,
    r: u32,
) -> Result<NestedDistanceResult, NestedError> {
    nested_distance_full(a, b, r, false)
}

/// Backward recursion; `compose_plan` additionally multiplies the stage-wise
/// optimal conditional plans into a single plan over leaf pairs.
pub fn nested_distance_full(
    a: &ScenarioTree,
    b: &ScenarioTree,
    r: u32,
    compose_plan: bool,
) -> Result<NestedDistanceResult, NestedError> {
    check_shapes(a, b)?;
    let stages = a.stages();

    // D-values (r-th powers) for pairs at stage t+1 while processing stage t
    let mut next_pow: Vec<f64> = vec![0.0; a.leaf_count() * b.leaf_count()];
    let mut tables: Vec<StageTable> = Vec::with_capacity(stages);
    // per-stage conditional plans, kept only when composing
    let mut stage_plans: Vec<Vec<TransportPlan>> = Vec::new();

    for t in (0..stages).rev() {
        let a_nodes: Vec<usize> = a.nodes_at_stage(t).collect();
        let b_nodes: Vec<usize> = b.nodes_at_stage(t).collect();
        let a_child_start = a.nodes_at_stage(t + 1).start;
        let b_child_start = b.nodes_at_stage(t + 1).start;
        let b_child_count = b.nodes_at_stage(t + 1).len();

        let pairs: Vec<(usize, usize)> = a_nodes
            .iter()
            .flat_map(|&m| b_nodes.iter().map(move |&n| (m, n)))
            .collect();
        let solved: Vec<(f64, Option<TransportPlan>)> = pairs
            .par_iter()
            .map(|&(m, n)| -> Result<(f64, Option<TransportPlan>), NestedError> {
                let ca = &a.node(m).children;
                let cb = &b.node(n).children;
                let cost = CostMatrix::from_fn(ca.len(), cb.len(), |i, j| {
                    let ci = ca[i];
                    let cj = cb[j];
                    dist_pow(&a.node(ci).value, &b.node(cj).value, r)
                        + next_pow[(ci - a_child_start) * b_child_count + (cj - b_child_start)]
                });
                let supply: Vec<f64> = ca.iter().map(|&c| a.node(c).cond_prob).collect();
                let demand: Vec<f64> = cb.iter().map(|&c| b.node(c).cond_prob).collect();
                let sol = solve_transport(&cost, &supply, &demand)?;
                Ok((
                    sol.objective,
                    if compose_plan { Some(sol.plan) } else { None },
                ))
            })
            .collect::<Result<_, _>>()?;

        let cols = b_nodes.len();
        next_pow = solved.iter().map(|(v, _)| *v).collect();
        tables.push(StageTable {
            stage: t,
            rows: a_nodes.len(),
            cols,
            values: next_pow.iter().map(|&v| root(v, r)).collect(),
        });
        if compose_plan {
            stage_plans.push(solved.into_iter().map(|(_, p)| p.unwrap()).collect());
        }
    }
    tables.reverse();
    let value_pow = next_pow[0];

    let leaf_plan = if compose_plan {
        stage_plans.reverse(); // now indexed by stage t = 0..T-1
        Some(compose_leaf_plan(a, b, &stage_plans))
    } else {
        None
    };

    Ok(NestedDistanceResult {
        value: root(value_pow, r),
        order: r,
        stage_tables: tables,
        leaf_plan,
    })
}

/// Forward multiplication of the conditional plans: the mass sent from leaf
/// i to leaf j is the product of the conditional plan entries along the pair
/// of root-to-leaf paths.
fn compose_leaf_plan(
    a: &ScenarioTree,
    b: &ScenarioTree,
    stage_plans: &[Vec<TransportPlan>],
) -> TransportPlan {
    let stages = a.stages();
    let mut mass: Vec<f64> = vec![1.0];
    let mut a_prev: Vec<usize> = vec![0];
    let mut b_prev: Vec<usize> = vec![0];
    for t in 0..stages {
        let a_next: Vec<usize> = a.nodes_at_stage(t + 1).collect();
        let b_next: Vec<usize> = b.nodes_at_stage(t + 1).collect();
        let mut next = vec![0.0; a_next.len() * b_next.len()];
        let a_next_start = a_next[0];
        let b_next_start = b_next[0];
        for (pi, &m) in a_prev.iter().enumerate() {
            for (pj, &n) in b_prev.iter().enumerate() {
                let w = mass[pi * b_prev.len() + pj];
                if w == 0.0 {
                    continue;
                }
                let plan = &stage_plans[t][pi * b_prev.len() + pj];
                let ca = &a.node(m).children;
                let cb = &b.node(n).children;
                for (i, &ci) in ca.iter().enumerate() {
                    for (j, &cj) in cb.iter().enumerate() {
                        let p = plan.at(i, j);
                        if p != 0.0 {
                            next[(ci - a_next_start) * b_next.len() + (cj - b_next_start)] +=
                                w * p;
                        }
                    }
                }
            }
        }
        mass = next;
        a_prev = a_next;
        b_prev = b_next;
    }
    let mut plan = TransportPlan::zeros(a_prev.len(), b_prev.len());
    for i in 0..a_prev.len() {
        for j in 0..b_prev.len() {
            plan.set(i, j, mass[i * b_prev.len() + j]);
        }
    }
    plan
}

/// Kantorovich distance between the leaf-path distributions under the
/// stage-additive ground cost Σ_t ‖u_t − v_t‖^r. This relaxes all filtration
/// structure and is the floor of the lower-bound chain.
pub fn leaf_path_kw(a: &ScenarioTree, b: &ScenarioTree, r: u32) -> Result<f64, NestedError> {
    check_shapes(a, b)?;
    let am = a.scenario_matrix();
    let bm = b.scenario_matrix();
    let pa = a.leaf_probabilities()?;
    let pb = b.leaf_probabilities()?;
    let stages = a.stages();
    let cost = CostMatrix::from_fn(pa.len(), pb.len(), |i, j| {
        (1..=stages)
            .map(|t| dist_pow(am.value(i, t), bm.value(j, t), r))
            .sum()
    });
    Ok(kw_distance_with_cost(&cost, &pa, &pb, r)?)
}

/// The chain of flattened-filtration distances: entry t−1 is the distance
/// between the two trees made clairvoyant from stage t. The chain is
/// non-decreasing; its first entry equals `leaf_path_kw` and its last equals
/// the full distance.
pub fn lower_bound_chain(a: &ScenarioTree, b: &ScenarioTree, r: u32) -> Result<Vec<f64>, NestedError> {
    check_shapes(a, b)?;
    (1..=a.stages())
        .map(|t| {
            let ca = a.make_clairvoyant(t)?;
            let cb = b.make_clairvoyant(t)?;
            Ok(nested_distance(&ca, &cb, r)?.value)
        })
        .collect()
}

/// Largest Kantorovich distance between conditional child distributions over
/// all pairs of stage-(t−1) nodes; one stage term of the stage-wise bound.
fn stage_sup_kw(a: &ScenarioTree, b: &ScenarioTree, t: usize, r: u32) -> Result<f64, NestedError> {
    let a_nodes: Vec<usize> = a.nodes_at_stage(t - 1).collect();
    let b_nodes: Vec<usize> = b.nodes_at_stage(t - 1).collect();
    let pairs: Vec<(usize, usize)> = a_nodes
        .iter()
        .flat_map(|&m| b_nodes.iter().map(move |&n| (m, n)))
        .collect();
    let sups: Vec<f64> = pairs
        .par_iter()
        .map(|&(m, n)| -> Result<f64, NestedError> {
            let ca = &a.node(m).children;
            let cb = &b.node(n).children;
            let cost = CostMatrix::from_fn(ca.len(), cb.len(), |i, j| {
                dist_pow(&a.node(ca[i]).value, &b.node(cb[j]).value, r)
            });
            let supply: Vec<f64> = ca.iter().map(|&c| a.node(c).cond_prob).collect();
            let demand: Vec<f64> = cb.iter().map(|&c| b.node(c).cond_prob).collect();
            Ok(kw_distance_with_cost(&cost, &supply, &demand, r)?)
        })
        .collect::<Result<_, _>>()?;
    Ok(sups.into_iter().fold(0.0, f64::max))
}

/// Stage-wise upper bound: ℓr-composition over stages of the supremal
/// conditional Kantorovich distances. Ignores subtree structure entirely, so
/// it is the loosest — and cheapest — of the bounds.
pub fn upper_bound_stagewise(a: &ScenarioTree, b: &ScenarioTree, r: u32) -> Result<f64, NestedError> {
    check_shapes(a, b)?;
    let mut acc = 0.0;
    for t in 1..=a.stages() {
        let s = stage_sup_kw(a, b, t, r)?;
        acc += pow_r(s, r);
    }
    Ok(root(acc, r))
}

/// Two-stage block upper bound: stages are grouped in consecutive pairs
/// (1,2), (3,4), …; each block contributes the supremal two-stage distance
/// between the depth-2 subtrees hanging off the block's root stage. An odd
/// trailing stage contributes a supremal conditional Kantorovich term. For
/// T = 2 this is exactly the distance itself (single block, root history).
pub fn upper_bound_two_stage(a: &ScenarioTree, b: &ScenarioTree, r: u32) -> Result<f64, NestedError> {
    check_shapes(a, b)?;
    let stages = a.stages();
    let mut acc = 0.0;
    let mut j = 2;
    while j <= stages {
        let a_nodes: Vec<usize> = a.nodes_at_stage(j - 2).collect();
        let b_nodes: Vec<usize> = b.nodes_at_stage(j - 2).collect();
        let pairs: Vec<(usize, usize)> = a_nodes
            .iter()
            .flat_map(|&m| b_nodes.iter().map(move |&n| (m, n)))
            .collect();
        let sups: Vec<f64> = pairs
            .par_iter()
            .map(|&(m, n)| -> Result<f64, NestedError> {
                let sub_a = block_subtree(a, m)?;
                let sub_b = block_subtree(b, n)?;
                Ok(nested_distance(&sub_a, &sub_b, r)?.value)
            })
            .collect::<Result<_, _>>()?;
        let sup = sups.into_iter().fold(0.0, f64::max);
        acc += pow_r(sup, r);
        j += 2;
    }
    if stages % 2 == 1 {
        let s = stage_sup_kw(a, b, stages, r)?;
        acc += pow_r(s, r);
    }
    Ok(root(acc, r))
}

/// Depth-2 subtree rooted at `node` (depth-1 when the tree ends one stage
/// below it).
fn block_subtree(tree: &ScenarioTree, node: usize) -> Result<ScenarioTree, NestedError> {
    let sub = tree.subtree(node)?;
    if sub.stages() > 2 {
        Ok(sub.truncate(2)?)
    } else {
        Ok(sub)
    }
}

// ---------------------------------------------------------------------------
// bounds against a continuous model
// ---------------------------------------------------------------------------

/// How suprema over continuous histories and Kantorovich terms against
/// continuous conditionals are estimated: the supremum becomes a maximum over
/// the tree's own node histories plus `extra_histories` sampled model paths;
/// the continuous side of each Kantorovich term is discretized with
/// `scalar_atoms` quantile midpoints when one-dimensional, or with
/// `joint_samples` common-random-number draws otherwise. Everything is driven
/// by `seed`, which the report records.
#[derive(Debug, Clone, Serialize)]
pub struct SupEstimation {
    pub extra_histories: usize,
    pub scalar_atoms: usize,
    pub joint_samples: usize,
    pub seed: u64,
}

impl Default for SupEstimation {
    fn default() -> Self {
        SupEstimation {
            extra_histories: 256,
            scalar_atoms: 512,
            joint_samples: 4096,
            seed: 0,
        }
    }
}

/// One model-vs-tree upper bound: the total, the per-stage supremum
/// estimates, and the amplification factor each stage term was multiplied by.
#[derive(Debug, Clone, Serialize)]
pub struct ModelBound {
    pub value: f64,
    pub stage_terms: Vec<f64>,
    pub amplifiers: Vec<f64>,
}

fn require_order_one(r: u32, what: &str) -> Result<(), NestedError> {
    if r == 1 {
        Ok(())
    } else {
        Err(NestedError::UnsupportedOrder {
            got: r,
            why: format!("{what} is defined for the order-1 distance"),
        })
    }
}

fn check_model_tree(model: &ProcessModel, tree: &ScenarioTree) -> Result<(), NestedError> {
    if model.stages() != tree.stages() || model.dim() != tree.dim() {
        return Err(NestedError::ShapeMismatch(format!(
            "model is {} stages x {} dims, tree is {} x {}",
            model.stages(),
            model.dim(),
            tree.stages(),
            tree.dim()
        )));
    }
    if tree.stages() == 0 {
        return Err(NestedError::ShapeMismatch("tree needs at least one stage".into()));
    }
    Ok(())
}

/// Stage-additive path metric between stacked stage blocks.
fn stage_additive(a: &[f64], b: &[f64], dim: usize) -> f64 {
    a.chunks(dim)
        .zip(b.chunks(dim))
        .map(|(x, y)| crate::transport::euclidean(x, y))
        .sum()
}

/// Stacked value paths of every stage-t node (t = 0 gives one empty history).
fn tree_histories(tree: &ScenarioTree, t: usize) -> Vec<Vec<f64>> {
    tree.nodes_at_stage(t).map(|n| tree.path_values(n)).collect()
}

/// Stage-t tree node whose history is nearest to `history` under the
/// stage-additive metric (lowest id on ties).
fn nearest_node(tree: &ScenarioTree, t: usize, history: &[f64]) -> usize {
    let mut best = usize::MAX;
    let mut best_d = f64::INFINITY;
    for n in tree.nodes_at_stage(t) {
        let d = stage_additive(&tree.path_values(n), history, tree.dim());
        if d < best_d {
            best_d = d;
            best = n;
        }
    }
    best
}

fn sampled_paths(model: &ProcessModel, cfg: &SupEstimation) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(cfg.seed, 0xB0);
    (0..cfg.extra_histories)
        .map(|_| model.sample_path(&mut rng))
        .collect()
}

/// Model histories to maximize over at stage `t` (conditioning length
/// `(t-1)*D`): the tree's own stage-(t-1) value paths plus truncations of the
/// sampled paths.
fn history_candidates(
    tree: &ScenarioTree,
    sampled: &[Vec<f64>],
    t: usize,
) -> Vec<Vec<f64>> {
    let mut hist = tree_histories(tree, t - 1);
    if t > 1 {
        let cut = (t - 1) * tree.dim();
        hist.extend(sampled.iter().map(|p| p[..cut].to_vec()));
    }
    hist
}

/// Equal-weight atom cloud of the model's conditional law of one stage block
/// (stage `t` alone, or the whole tail `t..=T`), built from standard draws
/// shared across histories: a one-dimensional block uses quantile midpoints,
/// anything larger uses `joint_samples` Gaussian draws. Shared draws mean two
/// nearby histories produce consistently shifted clouds, which the pair-sup
/// search exploits for pruning.
struct BlockSampler<'m> {
    model: &'m ProcessModel,
    t: usize,
    full_tail: bool,
    z: Vec<Vec<f64>>,
}

impl<'m> BlockSampler<'m> {
    fn new(
        model: &'m ProcessModel,
        t: usize,
        full_tail: bool,
        cfg: &SupEstimation,
    ) -> BlockSampler<'m> {
        let block_dim = if full_tail {
            (model.stages() - t + 1) * model.dim()
        } else {
            model.dim()
        };
        let z = if block_dim == 1 {
            let n = cfg.scalar_atoms.max(1);
            (0..n)
                .map(|i| vec![normal::quantile((2 * i + 1) as f64 / (2 * n) as f64)])
                .collect()
        } else {
            let mut rng = stream_rng(cfg.seed, 0xC0 + t as u64);
            (0..cfg.joint_samples.max(1))
                .map(|_| {
                    (0..block_dim)
                        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                        .collect()
                })
                .collect()
        };
        BlockSampler { model, t, full_tail, z }
    }

    fn atoms(&self, history: &[f64]) -> Result<Vec<Vec<f64>>, NestedError> {
        let (cond, exp) = match self.model {
            ProcessModel::Gaussian(g) => (
                if self.full_tail {
                    g.joint_tail_conditional(self.t, history)?
                } else {
                    g.conditional(self.t, history)?
                },
                false,
            ),
            ProcessModel::Lognormal(l) => (
                if self.full_tail {
                    l.joint_tail_conditional_log(self.t, history)?
                } else {
                    l.conditional_log(self.t, history)?
                },
                true,
            ),
        };
        Ok(self
            .z
            .iter()
            .map(|zj| {
                let mut x = cond.push_standard(zj);
                if exp {
                    for v in &mut x {
                        *v = v.exp();
                    }
                }
                x
            })
            .collect())
    }

    /// Approximate per-coordinate mean of the cloud at `history`, without
    /// building it (Gaussian: exact conditional mean; lognormal: analytic
    /// `exp(m + s/2)`). Used only to order search candidates.
    fn rough_mean(&self, history: &[f64]) -> Result<Vec<f64>, NestedError> {
        let (cond, exp) = match self.model {
            ProcessModel::Gaussian(g) => (
                if self.full_tail {
                    g.joint_tail_conditional(self.t, history)?
                } else {
                    g.conditional(self.t, history)?
                },
                false,
            ),
            ProcessModel::Lognormal(l) => (
                if self.full_tail {
                    l.joint_tail_conditional_log(self.t, history)?
                } else {
                    l.conditional_log(self.t, history)?
                },
                true,
            ),
        };
        Ok((0..cond.dim())
            .map(|i| {
                let (m, v) = cond.marginal(i);
                if exp {
                    (m + 0.5 * v).exp()
                } else {
                    m
                }
            })
            .collect())
    }
}

/// Cost of the identity coupling between two equal-weight clouds built from
/// the same standard draws; an upper bound on the Kantorovich distance shift
/// when the conditioning history moves.
fn identity_coupling_cost(a: &[Vec<f64>], b: &[Vec<f64>], dim: usize) -> f64 {
    let n = a.len();
    a.iter()
        .zip(b)
        .map(|(x, y)| stage_additive(x, y, dim))
        .sum::<f64>()
        / n as f64
}

/// Kantorovich distance between an equal-weight cloud and a weighted discrete
/// law under the stage-additive metric.
fn cloud_kw(
    cloud: &[Vec<f64>],
    atoms: &[Vec<f64>],
    probs: &[f64],
    dim: usize,
) -> Result<f64, NestedError> {
    let n = cloud.len();
    let w = vec![1.0 / n as f64; n];
    let cost = CostMatrix::from_fn(n, atoms.len(), |i, j| {
        stage_additive(&cloud[i], &atoms[j], dim)
    });
    Ok(kw_distance_with_cost(&cost, &w, probs, 1)?)
}

/// Conditional child law of the tree at interior node `v`: child values and
/// conditional probabilities.
fn tree_child_law(tree: &ScenarioTree, v: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let children = &tree.node(v).children;
    let atoms = children.iter().map(|&c| tree.node(c).value.clone()).collect();
    let probs = children.iter().map(|&c| tree.node(c).cond_prob).collect();
    (atoms, probs)
}

/// Flattened tail law of the tree below node `v` at stage t-1: one atom per
/// leaf holding its stage `t..=T` values, weighted by the leaf's conditional
/// probability given `v`.
fn tree_tail_law(tree: &ScenarioTree, v: usize, t: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let node_probs = tree.node_probabilities();
    let leaves = tree.leaves_under(v);
    let skip = (t - 1) * tree.dim();
    let atoms = leaves
        .iter()
        .map(|&leaf| tree.path_values(leaf)[skip..].to_vec())
        .collect();
    let mass = node_probs[v];
    let probs = leaves.iter().map(|&leaf| node_probs[leaf] / mass).collect();
    (atoms, probs)
}

/// Per-stage amplification suffix products Π_{s>t}(K_s + 1) from the
/// constants for stages 2..=T.
fn suffix_amplifiers(k: &[f64], stages: usize) -> Vec<f64> {
    let mut amp = vec![1.0; stages];
    for t in (0..stages - 1).rev() {
        // k[t - 1 + 1 - 1] … constants are indexed from stage 2
        amp[t] = amp[t + 1] * (k[t] + 1.0);
    }
    amp
}

/// Stage-wise Lipschitz-amplified upper bound against a continuous model:
/// Σ_t (sup over histories of the stage-t conditional Kantorovich distance
/// between model and tree) · Π_{s>t}(K_s + 1). The same history drives both
/// sides; a sampled history is matched to the tree node whose value path is
/// nearest. Lognormal models amplify with their log-space constants.
pub fn upper_bound_lipschitz(
    model: &ProcessModel,
    tree: &ScenarioTree,
    r: u32,
    cfg: &SupEstimation,
) -> Result<ModelBound, NestedError> {
    require_order_one(r, "the Lipschitz stage bound")?;
    check_model_tree(model, tree)?;
    let stages = tree.stages();
    let dim = tree.dim();
    let amplifiers = suffix_amplifiers(&model.gaussian_core().lipschitz_constants(), stages);
    let sampled = sampled_paths(model, cfg);
    let mut stage_terms = Vec::with_capacity(stages);
    for t in 1..=stages {
        let sampler = BlockSampler::new(model, t, false, cfg);
        let hist = history_candidates(tree, &sampled, t);
        let sups: Vec<f64> = hist
            .par_iter()
            .map(|h| -> Result<f64, NestedError> {
                let v = nearest_node(tree, t - 1, h);
                let (atoms, probs) = tree_child_law(tree, v);
                cloud_kw(&sampler.atoms(h)?, &atoms, &probs, dim)
            })
            .collect::<Result<_, _>>()?;
        stage_terms.push(sups.into_iter().fold(0.0, f64::max));
    }
    let value = stage_terms
        .iter()
        .zip(&amplifiers)
        .map(|(s, a)| s * a)
        .sum();
    Ok(ModelBound { value, stage_terms, amplifiers })
}

/// Which flattened-tail bound to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointBoundVariant {
    /// Σ_t sup over independent history pairs (model u, tree v) of the
    /// Kantorovich distance between the joint tail laws; no amplification.
    PairSup,
    /// Σ_t (sup over a shared history) · Π_{s>t}(K_tail(s) + 1), with the
    /// joint-tail Lipschitz constants.
    SameHistoryAmplified,
}

/// Upper bound built from flattened (filtration-relaxed) tail laws: at every
/// stage the model's joint conditional law of stages `t..=T` is compared with
/// the tree's leaf-tail law. This is the quantity the forward-backward
/// quantizer descends.
pub fn upper_bound_joint_clairvoyant(
    model: &ProcessModel,
    tree: &ScenarioTree,
    r: u32,
    variant: JointBoundVariant,
    cfg: &SupEstimation,
) -> Result<ModelBound, NestedError> {
    require_order_one(r, "the flattened-tail bound")?;
    check_model_tree(model, tree)?;
    let stages = tree.stages();
    let dim = tree.dim();
    let amplifiers = match variant {
        JointBoundVariant::PairSup => vec![1.0; stages],
        JointBoundVariant::SameHistoryAmplified => {
            suffix_amplifiers(&model.gaussian_core().tail_lipschitz_constants(), stages)
        }
    };
    let sampled = sampled_paths(model, cfg);
    let mut stage_terms = Vec::with_capacity(stages);
    for t in 1..=stages {
        let sampler = BlockSampler::new(model, t, true, cfg);
        let hist = history_candidates(tree, &sampled, t);
        let term = match variant {
            JointBoundVariant::SameHistoryAmplified => {
                let sups: Vec<f64> = hist
                    .par_iter()
                    .map(|h| -> Result<f64, NestedError> {
                        let v = nearest_node(tree, t - 1, h);
                        let (atoms, probs) = tree_tail_law(tree, v, t);
                        cloud_kw(&sampler.atoms(h)?, &atoms, &probs, dim)
                    })
                    .collect::<Result<_, _>>()?;
                sups.into_iter().fold(0.0, f64::max)
            }
            JointBoundVariant::PairSup => {
                let nodes: Vec<usize> = tree.nodes_at_stage(t - 1).collect();
                let rough: Vec<Vec<f64>> = hist
                    .iter()
                    .map(|h| sampler.rough_mean(h))
                    .collect::<Result<_, _>>()?;
                let sups: Vec<f64> = nodes
                    .par_iter()
                    .map(|&v| -> Result<f64, NestedError> {
                        let (atoms, probs) = tree_tail_law(tree, v, t);
                        // order candidates by the mean-gap lower bound so the
                        // running maximum rises early, then skip any history
                        // whose shifted-cloud upper bound cannot beat it
                        let tail_mean: Vec<f64> = (0..atoms[0].len())
                            .map(|i| {
                                atoms.iter().zip(&probs).map(|(a, p)| a[i] * p).sum()
                            })
                            .collect();
                        let mut order: Vec<(f64, usize)> = rough
                            .iter()
                            .enumerate()
                            .map(|(i, m)| (stage_additive(m, &tail_mean, dim), i))
                            .collect();
                        order
                            .sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
                        let mut best = f64::NEG_INFINITY;
                        let mut anchor: Option<(Vec<Vec<f64>>, f64)> = None;
                        for &(_, i) in &order {
                            let cloud = sampler.atoms(&hist[i])?;
                            if let Some((ref a_cloud, a_val)) = anchor {
                                let ub = a_val + identity_coupling_cost(&cloud, a_cloud, dim);
                                if ub <= best {
                                    continue;
                                }
                            }
                            let val = cloud_kw(&cloud, &atoms, &probs, dim)?;
                            best = best.max(val);
                            if anchor.is_none() {
                                anchor = Some((cloud, val));
                            }
                        }
                        Ok(best)
                    })
                    .collect::<Result<_, _>>()?;
                sups.into_iter().fold(0.0, f64::max)
            }
        };
        stage_terms.push(term);
    }
    let value = stage_terms
        .iter()
        .zip(&amplifiers)
        .map(|(s, a)| s * a)
        .sum();
    Ok(ModelBound { value, stage_terms, amplifiers })
}

// ---------------------------------------------------------------------------
// bound reports
// ---------------------------------------------------------------------------

/// Collected lower and upper bounds with the estimation settings that
/// produced them. Upper bounds are keyed by the identifiers the CLI accepts
/// (`eq6`, `eq10`/`eq11`, `eq7`, `eq12`, `eq14`).
#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub order: u32,
    pub lower_chain: Vec<f64>,
    pub upper: BTreeMap<String, f64>,
    pub metadata: BoundMetadata,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct BoundMetadata {
    pub seed: Option<u64>,
    pub extra_histories: Option<usize>,
    pub scalar_atoms: Option<usize>,
    pub joint_samples: Option<usize>,
    pub lipschitz: Vec<f64>,
    pub tail_lipschitz: Vec<f64>,
    pub lipschitz_in_log_space: bool,
    pub stage_terms: BTreeMap<String, Vec<f64>>,
}

/// Exact finite-tree report: the flattened-filtration lower chain plus the
/// stage-wise and two-stage upper bounds.
pub fn bound_report_trees(
    a: &ScenarioTree,
    b: &ScenarioTree,
    r: u32,
) -> Result<BoundReport, NestedError> {
    let lower_chain = lower_bound_chain(a, b, r)?;
    let mut upper = BTreeMap::new();
    upper.insert("eq6".to_string(), upper_bound_stagewise(a, b, r)?);
    let two_stage_key = if a.stages() % 2 == 0 { "eq10" } else { "eq11" };
    upper.insert(two_stage_key.to_string(), upper_bound_two_stage(a, b, r)?);
    Ok(BoundReport {
        order: r,
        lower_chain,
        upper,
        metadata: BoundMetadata::default(),
    })
}

/// Estimated model-vs-tree report: the Lipschitz stage bound and both
/// flattened-tail bounds, with the estimation settings recorded.
pub fn bound_report_model(
    model: &ProcessModel,
    tree: &ScenarioTree,
    r: u32,
    cfg: &SupEstimation,
) -> Result<BoundReport, NestedError> {
    let mut upper = BTreeMap::new();
    let mut stage_terms = BTreeMap::new();
    let lip = upper_bound_lipschitz(model, tree, r, cfg)?;
    upper.insert("eq7".to_string(), lip.value);
    stage_terms.insert("eq7".to_string(), lip.stage_terms);
    let pair = upper_bound_joint_clairvoyant(model, tree, r, JointBoundVariant::PairSup, cfg)?;
    upper.insert("eq12".to_string(), pair.value);
    stage_terms.insert("eq12".to_string(), pair.stage_terms);
    let same = upper_bound_joint_clairvoyant(
        model,
        tree,
        r,
        JointBoundVariant::SameHistoryAmplified,
        cfg,
    )?;
    upper.insert("eq14".to_string(), same.value);
    stage_terms.insert("eq14".to_string(), same.stage_terms);
    let core = model.gaussian_core();
    Ok(BoundReport {
        order: r,
        lower_chain: Vec::new(),
        upper,
        metadata: BoundMetadata {
            seed: Some(cfg.seed),
            extra_histories: Some(cfg.extra_histories),
            scalar_atoms: Some(cfg.scalar_atoms),
            joint_samples: Some(cfg.joint_samples),
            lipschitz: core.lipschitz_constants(),
            tail_lipschitz: core.tail_lipschitz_constants(),
            lipschitz_in_log_space: model.is_lognormal(),
            stage_terms,
        },
    })
}
