//! Discrete optimal transport on dense cost matrices.
//!
//! `solve_transport` is a transportation-specialized network simplex
//! (northwest-corner start, spanning-tree basis, block pricing with a
//! Bland-rule fallback for degenerate marginals). `brute_force_transport`
//! enumerates every spanning-tree basic feasible solution and is the
//! independent oracle for small instances; the two must agree to 1e-9.
//!
//! Conventions: marginals are probability vectors (each sums to 1), costs are
//! finite and nonnegative for distance work, and the Kantorovich-Wasserstein
//! distance of order r is `(min_plan sum pi_ij * d_ij^r)^(1/r)` with the
//! Euclidean ground metric between atoms.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("marginal sums differ beyond 1e-9: supply {supply}, demand {demand}")]
    InfeasibleMarginals { supply: f64, demand: f64 },
    #[error("negative weight {weight} at index {index}")]
    NegativeWeight { index: usize, weight: f64 },
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("cost matrix contains a non-finite entry at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize },
    #[error("brute-force oracle limited to m*n <= {limit}, got {got}")]
    SizeLimitExceeded { limit: usize, got: usize },
    #[error("numerical breakdown: {0}")]
    NumericalBreakdown(String),
}

/// Finitely supported distribution with flat atom storage (`len` atoms of
/// dimension `dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistribution {
    dim: usize,
    atoms: Vec<f64>,
    weights: Vec<f64>,
}

impl DiscreteDistribution {
    /// Validating constructor: weights nonnegative and summing to 1 within
    /// 1e-12.
    pub fn new(dim: usize, atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self, TransportError> {
        if dim == 0 {
            return Err(TransportError::DegenerateInput("atom dimension 0".into()));
        }
        if atoms.len() != weights.len() * dim {
            return Err(TransportError::DimensionMismatch(format!(
                "{} coordinates for {} weights of dim {}",
                atoms.len(),
                weights.len(),
                dim
            )));
        }
        if weights.is_empty() {
            return Err(TransportError::DegenerateInput("no atoms".into()));
        }
        for (i, &w) in weights.iter().enumerate() {
            if w < 0.0 || !w.is_finite() {
                return Err(TransportError::NegativeWeight { index: i, weight: w });
            }
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(TransportError::InfeasibleMarginals {
                supply: total,
                demand: 1.0,
            });
        }
        Ok(Self { dim, atoms, weights })
    }

    /// Constructor that rescales arbitrary nonnegative weights to sum to 1.
    /// Used by estimators that build empirical measures from counts.
    pub fn normalized(dim: usize, atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self, TransportError> {
        let total: f64 = weights.iter().sum();
        if total <= 0.0 || !total.is_finite() {
            return Err(TransportError::DegenerateInput(format!(
                "weights sum to {total}"
            )));
        }
        let scaled = weights.iter().map(|w| w / total).collect();
        Self::new(dim, atoms, scaled)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.atoms[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn atoms_flat(&self) -> &[f64] {
        &self.atoms
    }
}

/// Dense row-major cost matrix.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Pairwise Euclidean distances raised to the power `r`.
    pub fn euclidean_pow(a: &DiscreteDistribution, b: &DiscreteDistribution, r: u32) -> Result<Self, TransportError> {
        if a.dim() != b.dim() {
            return Err(TransportError::DimensionMismatch(format!(
                "atom dims {} vs {}",
                a.dim(),
                b.dim()
            )));
        }
        Ok(Self::from_fn(a.len(), b.len(), |i, j| {
            let d = euclidean(a.atom(i), b.atom(j));
            match r {
                1 => d,
                2 => d * d,
                _ => d.powi(r as i32),
            }
        }))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    fn validate(&self) -> Result<(), TransportError> {
        for i in 0..self.rows {
            for j in 0..self.cols {
                if !self.at(i, j).is_finite() {
                    return Err(TransportError::NonFiniteCost { row: i, col: j });
                }
            }
        }
        Ok(())
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Coupling between two discrete marginals, dense row-major.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    rows: usize,
    cols: usize,
    mass: Vec<f64>,
}

impl TransportPlan {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            mass: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.mass[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.mass[i * self.cols + j] = v;
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.rows];
        for i in 0..self.rows {
            for j in 0..self.cols {
                s[i] += self.at(i, j);
            }
        }
        s
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for i in 0..self.rows {
            for j in 0..self.cols {
                s[j] += self.at(i, j);
            }
        }
        s
    }

    /// Largest marginal violation against the given supply/demand.
    pub fn marginal_residual(&self, supply: &[f64], demand: &[f64]) -> f64 {
        let mut worst = 0.0_f64;
        for (got, want) in self.row_sums().iter().zip(supply) {
            worst = worst.max((got - want).abs());
        }
        for (got, want) in self.col_sums().iter().zip(demand) {
            worst = worst.max((got - want).abs());
        }
        worst
    }
}

/// Optimal plan plus the simplex certificates.
#[derive(Debug, Clone)]
pub struct TransportSolution {
    pub plan: TransportPlan,
    pub objective: f64,
    /// Row potentials u_i with u_0 = 0; `u_i + v_j = c_ij` on basic arcs.
    pub row_duals: Vec<f64>,
    pub col_duals: Vec<f64>,
    pub pivots: usize,
}

impl TransportSolution {
    /// `objective - (u.s + v.d)`; should vanish at optimality.
    pub fn duality_gap(&self, supply: &[f64], demand: &[f64]) -> f64 {
        let dual: f64 = self
            .row_duals
            .iter()
            .zip(supply)
            .map(|(u, s)| u * s)
            .chain(self.col_duals.iter().zip(demand).map(|(v, d)| v * d))
            .sum();
        self.objective - dual
    }
}

fn check_marginals(supply: &[f64], demand: &[f64]) -> Result<(), TransportError> {
    for (idx, &w) in supply.iter().chain(demand.iter()).enumerate() {
        if w < 0.0 || !w.is_finite() {
            return Err(TransportError::NegativeWeight { index: idx, weight: w });
        }
    }
    let s: f64 = supply.iter().sum();
    let d: f64 = demand.iter().sum();
    if (s - d).abs() > 1e-9 {
        return Err(TransportError::InfeasibleMarginals { supply: s, demand: d });
    }
    if s <= 0.0 {
        return Err(TransportError::DegenerateInput("zero total mass".into()));
    }
    Ok(())
}

/// Minimize `sum pi_ij c_ij` subject to the given marginals.
///
/// Zero-weight atoms are dropped before the solve and the plan is re-expanded
/// afterwards. Demand is rescaled onto the supply total when the sums differ
/// within the 1e-9 acceptance band.
pub fn solve_transport(
    cost: &CostMatrix,
    supply: &[f64],
    demand: &[f64],
) -> Result<TransportSolution, TransportError> {
    if cost.rows() != supply.len() || cost.cols() != demand.len() {
        return Err(TransportError::DimensionMismatch(format!(
            "cost {}x{} vs marginals {}/{}",
            cost.rows(),
            cost.cols(),
            supply.len(),
            demand.len()
        )));
    }
    cost.validate()?;
    check_marginals(supply, demand)?;

    let rows_kept: Vec<usize> = (0..supply.len()).filter(|&i| supply[i] > 0.0).collect();
    let cols_kept: Vec<usize> = (0..demand.len()).filter(|&j| demand[j] > 0.0).collect();
    let s_total: f64 = supply.iter().sum();
    let d_total: f64 = demand.iter().sum();
    let rescale = s_total / d_total;
    let s: Vec<f64> = rows_kept.iter().map(|&i| supply[i]).collect();
    let d: Vec<f64> = cols_kept.iter().map(|&j| demand[j] * rescale).collect();
    let sub_cost = CostMatrix::from_fn(rows_kept.len(), cols_kept.len(), |i, j| {
        cost.at(rows_kept[i], cols_kept[j])
    });

    let core = simplex_core(&sub_cost, &s, &d)?;

    let mut plan = TransportPlan::zeros(supply.len(), demand.len());
    for (i, &oi) in rows_kept.iter().enumerate() {
        for (j, &oj) in cols_kept.iter().enumerate() {
            let f = core.plan.at(i, j);
            if f != 0.0 {
                plan.set(oi, oj, f);
            }
        }
    }
    let mut row_duals = vec![0.0; supply.len()];
    let mut col_duals = vec![0.0; demand.len()];
    for (i, &oi) in rows_kept.iter().enumerate() {
        row_duals[oi] = core.row_duals[i];
    }
    for (j, &oj) in cols_kept.iter().enumerate() {
        col_duals[oj] = core.col_duals[j];
    }
    Ok(TransportSolution {
        plan,
        objective: core.objective,
        row_duals,
        col_duals,
        pivots: core.pivots,
    })
}

// Network simplex on strictly positive marginals.
fn simplex_core(
    cost: &CostMatrix,
    supply: &[f64],
    demand: &[f64],
) -> Result<TransportSolution, TransportError> {
    let m = supply.len();
    let n = demand.len();
    if m == 0 || n == 0 {
        return Err(TransportError::DegenerateInput(
            "empty support after dropping zero-weight atoms".into(),
        ));
    }
    let nodes = m + n; // rows 0..m, cols m..m+n
    let arcs = m * n;
    let arc_row = |a: usize| a / n;
    let arc_col = |a: usize| a % n;

    let mut in_basis = vec![false; arcs];
    let mut flow = vec![0.0_f64; arcs];
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nodes]; // arcs incident to node

    // Northwest-corner start: exactly m + n - 1 basic arcs, degenerate zeros
    // where a supply and a demand are exhausted together.
    {
        let mut s = supply.to_vec();
        let mut d = demand.to_vec();
        let (mut i, mut j) = (0usize, 0usize);
        loop {
            let a = i * n + j;
            let f = s[i].min(d[j]);
            in_basis[a] = true;
            flow[a] = f;
            adj[i].push(a);
            adj[m + j].push(a);
            s[i] -= f;
            d[j] -= f;
            if i == m - 1 && j == n - 1 {
                break;
            }
            if s[i] <= 0.0 && i < m - 1 {
                i += 1;
            } else {
                j += 1;
            }
        }
    }

    let mut parent = vec![usize::MAX; nodes];
    let mut parent_arc = vec![usize::MAX; nodes];
    let mut depth = vec![0usize; nodes];
    let mut preorder = Vec::with_capacity(nodes);
    let mut u = vec![0.0_f64; m];
    let mut v = vec![0.0_f64; n];

    let rebuild_tree = |adj: &Vec<Vec<usize>>,
                        parent: &mut Vec<usize>,
                        parent_arc: &mut Vec<usize>,
                        depth: &mut Vec<usize>,
                        preorder: &mut Vec<usize>|
     -> Result<(), TransportError> {
        parent.iter_mut().for_each(|p| *p = usize::MAX);
        preorder.clear();
        let mut stack = vec![0usize];
        let mut seen = vec![false; nodes];
        seen[0] = true;
        depth[0] = 0;
        while let Some(x) = stack.pop() {
            preorder.push(x);
            for &a in &adj[x] {
                let other = if x < m { m + arc_col(a) } else { arc_row(a) };
                if !seen[other] {
                    seen[other] = true;
                    parent[other] = x;
                    parent_arc[other] = a;
                    depth[other] = depth[x] + 1;
                    stack.push(other);
                }
            }
        }
        if preorder.len() != nodes {
            return Err(TransportError::NumericalBreakdown(
                "basis lost spanning-tree structure".into(),
            ));
        }
        Ok(())
    };

    rebuild_tree(&adj, &mut parent, &mut parent_arc, &mut depth, &mut preorder)?;

    let cmax = (0..arcs).fold(0.0_f64, |acc, a| acc.max(cost.at(arc_row(a), arc_col(a)).abs()));
    let tol = 1e-11 * (1.0 + cmax);
    let block = ((arcs as f64).sqrt() as usize).clamp(16, 4096);
    let bland_after = 20 * nodes + 200;
    let pivot_cap = 1_000_000usize;

    let mut pivots = 0usize;
    let mut cursor = 0usize;
    loop {
        // Duals from the current tree (root potential 0).
        for &x in &preorder {
            if x == 0 {
                u[0] = 0.0;
                continue;
            }
            let a = parent_arc[x];
            let (i, j) = (arc_row(a), arc_col(a));
            if x < m {
                u[x] = cost.at(i, j) - v[j];
            } else {
                v[x - m] = cost.at(i, j) - u[i];
            }
        }

        // Pricing: block search normally, first-negative (Bland) when the
        // pivot count suggests degenerate stalling.
        let bland = pivots > bland_after;
        let mut entering = None;
        if bland {
            for a in 0..arcs {
                if in_basis[a] {
                    continue;
                }
                let rc = cost.at(arc_row(a), arc_col(a)) - u[arc_row(a)] - v[arc_col(a)];
                if rc < -tol {
                    entering = Some(a);
                    break;
                }
            }
        } else {
            let mut scanned = 0;
            let mut best = (0.0_f64, usize::MAX);
            while scanned < arcs {
                let stop = (cursor + block).min(cursor + arcs - scanned);
                let mut a = cursor;
                while a < stop {
                    let idx = if a >= arcs { a - arcs } else { a };
                    if !in_basis[idx] {
                        let rc = cost.at(arc_row(idx), arc_col(idx)) - u[arc_row(idx)] - v[arc_col(idx)];
                        if rc < best.0 {
                            best = (rc, idx);
                        }
                    }
                    a += 1;
                }
                scanned += stop - cursor;
                cursor = if stop >= arcs { stop - arcs } else { stop };
                if best.0 < -tol {
                    entering = Some(best.1);
                    break;
                }
            }
        }
        let Some(ent) = entering else { break };

        // Cycle: entering arc plus the tree path between its endpoints.
        // Signs alternate around the bipartite cycle starting with + on the
        // entering arc; arcs at odd traversal positions lose theta.
        let (p, q) = (arc_row(ent), m + arc_col(ent));
        let mut path_p = Vec::new(); // arcs from p up to the LCA
        let mut path_q = Vec::new();
        {
            let (mut x, mut y) = (p, q);
            while depth[x] > depth[y] {
                path_p.push(parent_arc[x]);
                x = parent[x];
            }
            while depth[y] > depth[x] {
                path_q.push(parent_arc[y]);
                y = parent[y];
            }
            while x != y {
                path_p.push(parent_arc[x]);
                path_q.push(parent_arc[y]);
                x = parent[x];
                y = parent[y];
            }
        }
        // Traversal order: entering, q-side up, then p-side down (reversed).
        let mut signed: Vec<(usize, bool)> = Vec::with_capacity(1 + path_p.len() + path_q.len());
        signed.push((ent, true));
        let mut pos = 1usize;
        for &a in &path_q {
            signed.push((a, pos % 2 == 0));
            pos += 1;
        }
        for &a in path_p.iter().rev() {
            signed.push((a, pos % 2 == 0));
            pos += 1;
        }

        let mut theta = f64::INFINITY;
        let mut leaving = usize::MAX;
        for &(a, plus) in &signed {
            if !plus {
                let f = flow[a];
                if f < theta - 1e-15 || (f <= theta + 1e-15 && a < leaving) {
                    theta = theta.min(f);
                    leaving = a;
                }
            }
        }
        if leaving == usize::MAX {
            return Err(TransportError::NumericalBreakdown(
                "no leaving arc on pivot cycle".into(),
            ));
        }
        for &(a, plus) in &signed {
            if plus {
                flow[a] += theta;
            } else {
                flow[a] -= theta;
            }
        }
        flow[ent] = theta;
        flow[leaving] = 0.0;
        in_basis[ent] = true;
        in_basis[leaving] = false;
        let detach = |adj: &mut Vec<Vec<usize>>, a: usize| {
            adj[arc_row(a)].retain(|&x| x != a);
            adj[m + arc_col(a)].retain(|&x| x != a);
        };
        detach(&mut adj, leaving);
        adj[arc_row(ent)].push(ent);
        adj[m + arc_col(ent)].push(ent);
        rebuild_tree(&adj, &mut parent, &mut parent_arc, &mut depth, &mut preorder)?;

        pivots += 1;
        if pivots > pivot_cap {
            return Err(TransportError::NumericalBreakdown(format!(
                "pivot cap {pivot_cap} exceeded"
            )));
        }
    }

    // Re-solve the basic flows exactly from the marginals by leaf stripping;
    // this removes accumulated +-theta roundoff and makes zero-cost optima
    // (identical marginals) exactly zero.
    let mut residual: Vec<f64> = supply.iter().chain(demand.iter()).copied().collect();
    let mut degree: Vec<usize> = adj.iter().map(|l| l.len()).collect();
    let mut alive: Vec<Vec<usize>> = adj.clone();
    let mut queue: Vec<usize> = (0..nodes).filter(|&x| degree[x] == 1).collect();
    let mut removed_arc = vec![false; arcs];
    let mut final_flow = vec![0.0_f64; arcs];
    while let Some(x) = queue.pop() {
        let Some(&a) = alive[x].iter().find(|&&a| !removed_arc[a]) else {
            continue;
        };
        let f = residual[x].max(0.0);
        final_flow[a] = f;
        removed_arc[a] = true;
        let other = if x < m { m + arc_col(a) } else { arc_row(a) };
        residual[other] -= f;
        residual[x] = 0.0;
        degree[other] -= 1;
        degree[x] -= 1;
        alive[x].retain(|&b| !removed_arc[b]);
        if degree[other] == 1 {
            queue.push(other);
        }
    }

    let mut objective = 0.0;
    let mut plan = TransportPlan::zeros(m, n);
    for a in 0..arcs {
        if in_basis[a] && final_flow[a] != 0.0 {
            plan.set(arc_row(a), arc_col(a), final_flow[a]);
            objective += final_flow[a] * cost.at(arc_row(a), arc_col(a));
        }
    }

    Ok(TransportSolution {
        plan,
        objective,
        row_duals: u,
        col_duals: v,
        pivots,
    })
}

/// Kantorovich-Wasserstein distance of order `r` (1 or 2) under the Euclidean
/// ground metric, computed through `solve_transport`.
pub fn kw_distance(
    a: &DiscreteDistribution,
    b: &DiscreteDistribution,
    r: u32,
) -> Result<f64, TransportError> {
    let cost = CostMatrix::euclidean_pow(a, b, r)?;
    let sol = solve_transport(&cost, a.weights(), b.weights())?;
    Ok(root(sol.objective.max(0.0), r))
}

/// KW distance under a caller-supplied `d^r` cost matrix (e.g. the
/// stage-additive path metric used by the nested recursion).
pub fn kw_distance_with_cost(
    cost: &CostMatrix,
    a_weights: &[f64],
    b_weights: &[f64],
    r: u32,
) -> Result<f64, TransportError> {
    let sol = solve_transport(cost, a_weights, b_weights)?;
    Ok(root(sol.objective.max(0.0), r))
}

pub(crate) fn root(x: f64, r: u32) -> f64 {
    match r {
        1 => x,
        2 => x.sqrt(),
        _ => x.powf(1.0 / r as f64),
    }
}

/// Exhaustive minimum over spanning-tree basic feasible solutions. Limited to
/// `m*n <= 20`; independent of the simplex above by construction.
pub fn brute_force_transport(
    cost: &CostMatrix,
    supply: &[f64],
    demand: &[f64],
) -> Result<(TransportPlan, f64), TransportError> {
    const LIMIT: usize = 20;
    let m = supply.len();
    let n = demand.len();
    if cost.rows() != m || cost.cols() != n {
        return Err(TransportError::DimensionMismatch(format!(
            "cost {}x{} vs marginals {}/{}",
            cost.rows(),
            cost.cols(),
            m,
            n
        )));
    }
    if m * n > LIMIT {
        return Err(TransportError::SizeLimitExceeded {
            limit: LIMIT,
            got: m * n,
        });
    }
    cost.validate()?;
    check_marginals(supply, demand)?;
    let d_total: f64 = demand.iter().sum();
    let s_total: f64 = supply.iter().sum();
    let demand: Vec<f64> = demand.iter().map(|d| d * s_total / d_total).collect();

    let arcs = m * n;
    let basis_size = m + n - 1;
    let mut best: Option<(TransportPlan, f64)> = None;

    // Enumerate arc subsets of size m + n - 1; keep those forming a spanning
    // tree with nonnegative leaf-stripped flows.
    let mut subset: Vec<usize> = (0..basis_size).collect();
    loop {
        if let Some((plan, obj)) = try_basis(cost, supply, &demand, m, n, &subset) {
            if best.as_ref().is_none_or(|(_, b)| obj < *b) {
                best = Some((plan, obj));
            }
        }
        // next combination
        let mut i = basis_size;
        loop {
            if i == 0 {
                return best.ok_or_else(|| {
                    TransportError::DegenerateInput("no feasible basis found".into())
                });
            }
            i -= 1;
            if subset[i] != i + arcs - basis_size {
                subset[i] += 1;
                for k in i + 1..basis_size {
                    subset[k] = subset[k - 1] + 1;
                }
                break;
            }
        }
    }
}

fn try_basis(
    cost: &CostMatrix,
    supply: &[f64],
    demand: &[f64],
    m: usize,
    n: usize,
    subset: &[usize],
) -> Option<(TransportPlan, f64)> {
    let nodes = m + n;
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nodes];
    for &a in subset {
        adj[a / n].push(a);
        adj[m + a % n].push(a);
    }
    // spanning check via leaf stripping (a tree strips completely)
    let mut residual: Vec<f64> = supply.iter().chain(demand.iter()).copied().collect();
    let mut degree: Vec<usize> = adj.iter().map(|l| l.len()).collect();
    if degree.iter().any(|&d| d == 0) {
        return None;
    }
    let mut removed = vec![false; subset.len()];
    let arc_pos: std::collections::HashMap<usize, usize> =
        subset.iter().enumerate().map(|(k, &a)| (a, k)).collect();
    let mut flows = vec![0.0_f64; subset.len()];
    let mut queue: Vec<usize> = (0..nodes).filter(|&x| degree[x] == 1).collect();
    let mut stripped = 0;
    while let Some(x) = queue.pop() {
        let Some(&a) = adj[x].iter().find(|&&a| !removed[arc_pos[&a]]) else {
            continue;
        };
        let k = arc_pos[&a];
        removed[k] = true;
        stripped += 1;
        let f = residual[x];
        flows[k] = f;
        let other = if x < m { m + a % n } else { a / n };
        residual[other] -= f;
        residual[x] = 0.0;
        degree[x] -= 1;
        degree[other] -= 1;
        if degree[other] == 1 {
            queue.push(other);
        }
    }
    if stripped != subset.len() {
        return None; // contained a cycle / was disconnected
    }
    if flows.iter().any(|&f| f < -1e-12) {
        return None;
    }
    let mut plan = TransportPlan::zeros(m, n);
    let mut obj = 0.0;
    for (k, &a) in subset.iter().enumerate() {
        let f = flows[k].max(0.0);
        if f != 0.0 {
            plan.set(a / n, a % n, f);
            obj += f * cost.at(a / n, a % n);
        }
    }
    Some((plan, obj))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn dist_1d(points: &[f64], weights: &[f64]) -> DiscreteDistribution {
        DiscreteDistribution::new(1, points.to_vec(), weights.to_vec()).unwrap()
    }

    /// 1-D discrete W_r by merging the two quantile step functions; exact, and
    /// independent of both LP routes.
    fn w_1d_quantile(a: &DiscreteDistribution, b: &DiscreteDistribution, r: u32) -> f64 {
        let sorted = |d: &DiscreteDistribution| {
            let mut idx: Vec<usize> = (0..d.len()).collect();
            idx.sort_by(|&i, &j| d.atom(i)[0].partial_cmp(&d.atom(j)[0]).unwrap());
            idx.into_iter()
                .map(|i| (d.atom(i)[0], d.weights()[i]))
                .collect::<Vec<_>>()
        };
        let pa = sorted(a);
        let pb = sorted(b);
        let (mut ia, mut ib) = (0usize, 0usize);
        let (mut ra, mut rb) = (pa[0].1, pb[0].1);
        let mut total = 0.0;
        loop {
            let step = ra.min(rb);
            let d = (pa[ia].0 - pb[ib].0).abs();
            total += step * if r == 1 { d } else { d * d };
            ra -= step;
            rb -= step;
            if ra <= 1e-15 {
                ia += 1;
                if ia == pa.len() {
                    break;
                }
                ra = pa[ia].1;
            }
            if rb <= 1e-15 {
                ib += 1;
                if ib == pb.len() {
                    break;
                }
                rb = pb[ib].1;
            }
        }
        root(total, r)
    }

    #[test]
    fn forced_plan_single_column() {
        let cost = CostMatrix::from_fn(2, 1, |i, _| if i == 0 { 0.0 } else { 1.0 });
        let sol = solve_transport(&cost, &[0.5, 0.5], &[1.0]).unwrap();
        assert_eq!(sol.objective, 0.5);
        assert_eq!(sol.plan.at(0, 0), 0.5);
        assert_eq!(sol.plan.at(1, 0), 0.5);
    }

    #[test]
    fn point_masses_give_ground_distance() {
        for r in [1u32, 2] {
            let a = DiscreteDistribution::new(2, vec![0.0, 0.0], vec![1.0]).unwrap();
            let b = DiscreteDistribution::new(2, vec![3.0, 4.0], vec![1.0]).unwrap();
            assert!((kw_distance(&a, &b, r).unwrap() - 5.0).abs() < 1e-12, "r={r}");
        }
    }

    #[test]
    fn identical_marginals_cost_exactly_zero() {
        // Northwest corner puts all mass on the zero-cost diagonal; no pivot
        // can improve, so the objective is exactly 0.0.
        let a = dist_1d(&[0.3, 1.7, 2.9], &[0.2, 0.5, 0.3]);
        assert_eq!(kw_distance(&a, &a, 1).unwrap(), 0.0);
        assert_eq!(kw_distance(&a, &a, 2).unwrap(), 0.0);
    }

    #[test]
    fn hand_checked_three_vs_two_atoms() {
        // uniform{0,1,2} vs uniform{0,2}: W_1 = 1/3 (CDF area).
        let a = dist_1d(&[0.0, 1.0, 2.0], &[1.0 / 3.0; 3]);
        let b = dist_1d(&[0.0, 2.0], &[0.5, 0.5]);
        let cost = CostMatrix::euclidean_pow(&a, &b, 1).unwrap();
        let (_, brute) = brute_force_transport(&cost, a.weights(), b.weights()).unwrap();
        let solved = kw_distance(&a, &b, 1).unwrap();
        assert!((brute - 1.0 / 3.0).abs() < 1e-12);
        assert!((solved - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_atoms_are_dropped_and_reexpanded() {
        let a = dist_1d(&[0.0, 5.0, 1.0], &[0.5, 0.0, 0.5]);
        let b = dist_1d(&[0.0, 1.0], &[0.5, 0.5]);
        let cost = CostMatrix::euclidean_pow(&a, &b, 1).unwrap();
        let sol = solve_transport(&cost, a.weights(), b.weights()).unwrap();
        assert_eq!(sol.objective, 0.0);
        assert_eq!(sol.plan.rows(), 3);
        let rs = sol.plan.row_sums();
        assert_eq!(rs[1], 0.0);
        assert!(sol.plan.marginal_residual(a.weights(), b.weights()) < 1e-12);
    }

    #[test]
    fn infeasible_and_degenerate_inputs_error() {
        let cost = CostMatrix::from_fn(1, 1, |_, _| 0.0);
        assert!(matches!(
            solve_transport(&cost, &[1.0], &[0.5]),
            Err(TransportError::InfeasibleMarginals { .. })
        ));
        assert!(matches!(
            solve_transport(&cost, &[0.0], &[0.0]),
            Err(TransportError::DegenerateInput(_))
        ));
        assert!(matches!(
            solve_transport(&cost, &[-0.1], &[-0.1]),
            Err(TransportError::NegativeWeight { .. })
        ));
        let big = CostMatrix::from_fn(5, 5, |_, _| 1.0);
        assert!(matches!(
            brute_force_transport(&big, &[0.2; 5], &[0.2; 5]),
            Err(TransportError::SizeLimitExceeded { .. })
        ));
    }

    #[test]
    fn simplex_matches_brute_force_on_random_instances() {
        let mut rng = stream_rng(2024, 0);
        for case in 0..60 {
            let m = rng.random_range(1..=4);
            let n = rng.random_range(1..=4);
            let cost = CostMatrix::from_fn(m, n, |_, _| rng.random_range(0.0..10.0));
            let mut s: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..1.0)).collect();
            let mut d: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
            let st: f64 = s.iter().sum();
            let dt: f64 = d.iter().sum();
            s.iter_mut().for_each(|x| *x /= st);
            d.iter_mut().for_each(|x| *x /= dt);
            let sol = solve_transport(&cost, &s, &d).unwrap();
            let (_, brute) = brute_force_transport(&cost, &s, &d).unwrap();
            assert!(
                (sol.objective - brute).abs() <= 1e-9,
                "case {case}: simplex {} vs brute {}",
                sol.objective,
                brute
            );
            assert!(sol.plan.marginal_residual(&s, &d) < 1e-9);
            assert!(sol.duality_gap(&s, &d).abs() <= 1e-9 * (1.0 + sol.objective.abs()));
        }
    }

    #[test]
    fn matches_quantile_formula_in_one_dimension() {
        let mut rng = stream_rng(99, 1);
        for _ in 0..40 {
            let na = rng.random_range(1..8);
            let nb = rng.random_range(1..8);
            let mk = |rng: &mut rand_chacha::ChaCha12Rng, k: usize| {
                let pts: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
                let mut w: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
                let t: f64 = w.iter().sum();
                w.iter_mut().for_each(|x| *x /= t);
                dist_1d(&pts, &w)
            };
            let a = mk(&mut rng, na);
            let b = mk(&mut rng, nb);
            for r in [1u32, 2] {
                let lp = kw_distance(&a, &b, r).unwrap();
                let q = w_1d_quantile(&a, &b, r);
                assert!((lp - q).abs() < 1e-9, "r={r} lp={lp} quantile={q}");
            }
        }
    }

    #[test]
    fn larger_rectangular_instance_stays_consistent() {
        // 60x7 with clustered columns; checks pricing/pivoting on a shape the
        // bound estimators use (many samples vs few tree atoms).
        let mut rng = stream_rng(5, 2);
        let pts_a: Vec<f64> = (0..60).map(|_| rng.random_range(-3.0..3.0)).collect();
        let pts_b: Vec<f64> = (0..7).map(|_| rng.random_range(-3.0..3.0)).collect();
        let a = dist_1d(&pts_a, &vec![1.0 / 60.0; 60]);
        let b = dist_1d(&pts_b, &vec![1.0 / 7.0; 7]);
        let lp = kw_distance(&a, &b, 1).unwrap();
        let q = w_1d_quantile(&a, &b, 1);
        assert!((lp - q).abs() < 1e-9, "lp={lp} quantile={q}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn triangle_inequality_order_one(
            seed in 0u64..1000,
            na in 1usize..5,
            nb in 1usize..5,
            nc in 1usize..5,
        ) {
            let mut rng = stream_rng(seed, 77);
            let mut mk = |k: usize| {
                let pts: Vec<f64> = (0..2 * k).map(|_| rng.random_range(-4.0..4.0)).collect();
                let mut w: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
                let t: f64 = w.iter().sum();
                w.iter_mut().for_each(|x| *x /= t);
                DiscreteDistribution::new(2, pts, w).unwrap()
            };
            let a = mk(na);
            let b = mk(nb);
            let c = mk(nc);
            let ab = kw_distance(&a, &b, 1).unwrap();
            let bc = kw_distance(&b, &c, 1).unwrap();
            let ac = kw_distance(&a, &c, 1).unwrap();
            prop_assert!(ac <= ab + bc + 1e-8, "ac={ac} ab+bc={}", ab + bc);
        }

        #[test]
        fn translation_invariance_and_scaling(
            seed in 0u64..1000,
            shift in -3.0f64..3.0,
            scale in 0.1f64..3.0,
        ) {
            let mut rng = stream_rng(seed, 78);
            let mut mk = || {
                let pts: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
                (pts, vec![0.25; 4])
            };
            let (pa, wa) = mk();
            let (pb, wb) = mk();
            let a = dist_1d(&pa, &wa);
            let b = dist_1d(&pb, &wb);
            let base = kw_distance(&a, &b, 1).unwrap();
            let at = dist_1d(&pa.iter().map(|x| scale * x + shift).collect::<Vec<_>>(), &wa);
            let bt = dist_1d(&pb.iter().map(|x| scale * x + shift).collect::<Vec<_>>(), &wb);
            let moved = kw_distance(&at, &bt, 1).unwrap();
            prop_assert!((moved - scale * base).abs() < 1e-8 * (1.0 + base));
        }
    }
}
