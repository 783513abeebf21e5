//! Dense linear programming in standard equality form.
//!
//! Minimize cᵀx subject to Ax = b, x ≥ 0, solved by a two-phase full-tableau
//! simplex with Bland's anti-cycling rule. Deliberately simple and exact-ish:
//! every pivot is a full tableau elimination, so the solver is O(m·n) per
//! pivot and intended for the moderate problem sizes that arise here — the
//! full leaf-pair formulation of process distances on small trees, and
//! capacity-coupled inventory problems. A size guard rejects anything that
//! would not fit that budget.
//!
//! Duals come from the artificial (identity) columns of the final tableau,
//! giving a certificate: cᵀx − bᵀy equals the duality gap, which callers can
//! assert against.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LpError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("problem infeasible (phase-1 objective {residual:.3e})")]
    Infeasible { residual: f64 },
    #[error("problem unbounded (column {column} can grow without bound)")]
    Unbounded { column: usize },
    #[error("tableau of {cells} cells exceeds limit {limit}")]
    SizeLimit { cells: usize, limit: usize },
    #[error("numerical breakdown: {0}")]
    Numerical(String),
}

/// min cᵀx  s.t.  Ax = b, x ≥ 0. Rows with negative b are flipped
/// internally; callers supply the program as stated.
#[derive(Debug, Clone)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    /// Row-major m×n constraint matrix.
    pub constraints: Vec<Vec<f64>>,
    pub rhs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    /// One multiplier per constraint row, in the caller's row order and sign
    /// convention (Ax = b as given).
    pub duals: Vec<f64>,
    pub pivots: usize,
}

impl LpSolution {
    /// cᵀx − bᵀy; near zero at an exact optimum.
    pub fn duality_gap(&self, lp: &LinearProgram) -> f64 {
        let dual_obj: f64 = lp.rhs.iter().zip(&self.duals).map(|(b, y)| b * y).sum();
        self.objective - dual_obj
    }
}

const DEFAULT_CELL_LIMIT: usize = 40_000_000;

pub fn solve_equality_form(lp: &LinearProgram) -> Result<LpSolution, LpError> {
    solve_equality_form_with_limit(lp, DEFAULT_CELL_LIMIT)
}

pub fn solve_equality_form_with_limit(
    lp: &LinearProgram,
    cell_limit: usize,
) -> Result<LpSolution, LpError> {
    let m = lp.constraints.len();
    let n = lp.objective.len();
    if m == 0 || n == 0 {
        return Err(LpError::Shape("empty program".into()));
    }
    if lp.rhs.len() != m {
        return Err(LpError::Shape(format!("{} rhs entries for {m} rows", lp.rhs.len())));
    }
    for (i, row) in lp.constraints.iter().enumerate() {
        if row.len() != n {
            return Err(LpError::Shape(format!(
                "row {i} has {} entries, expected {n}",
                row.len()
            )));
        }
    }
    let width = n + m + 1; // structural | artificial | rhs
    let cells = (m + 2) * width;
    if cells > cell_limit {
        return Err(LpError::SizeLimit {
            cells,
            limit: cell_limit,
        });
    }
    let bad = lp
        .constraints
        .iter()
        .flatten()
        .chain(lp.objective.iter())
        .chain(lp.rhs.iter())
        .any(|v| !v.is_finite());
    if bad {
        return Err(LpError::Numerical("non-finite coefficient".into()));
    }

    // tableau rows: m constraint rows; basis holds the basic column per row
    let mut t = vec![vec![0.0f64; width]; m];
    let mut flipped = vec![false; m];
    for i in 0..m {
        let flip = lp.rhs[i] < 0.0;
        flipped[i] = flip;
        let s = if flip { -1.0 } else { 1.0 };
        for j in 0..n {
            t[i][j] = s * lp.constraints[i][j];
        }
        t[i][n + i] = 1.0;
        t[i][width - 1] = s * lp.rhs[i];
    }
    let mut basis: Vec<usize> = (n..n + m).collect();

    let scale = 1.0 + lp
        .constraints
        .iter()
        .flatten()
        .fold(0.0f64, |a, v| a.max(v.abs()));
    let tol = 1e-10 * scale;

    // Phase 1: minimize sum of artificials. Reduced-cost row for that
    // objective is -(sum of constraint rows) on structural columns.
    let mut obj = vec![0.0f64; width];
    for row in t.iter() {
        for (o, v) in obj.iter_mut().zip(row.iter()) {
            *o -= v;
        }
    }
    for j in n..n + m {
        obj[j] = 0.0; // artificial reduced costs start at 0 (basic)
    }
    let mut pivots = 0usize;
    run_simplex(&mut t, &mut obj, &mut basis, n + m, tol, &mut pivots)?;
    let phase1 = -obj[width - 1];
    if phase1 > 1e-7 * scale.max(1.0) {
        return Err(LpError::Infeasible { residual: phase1 });
    }
    // Drive leftover artificial basics out; redundant rows get a harmless
    // basic artificial pinned at zero (blocked from re-entering in phase 2).
    for i in 0..m {
        if basis[i] >= n {
            if let Some(j) = (0..n).find(|&j| t[i][j].abs() > tol) {
                pivot(&mut t, &mut obj, i, j);
                basis[i] = j;
                pivots += 1;
            }
        }
    }

    // Phase 2: original objective, priced only on structural columns.
    let mut obj2 = vec![0.0f64; width];
    obj2[..n].copy_from_slice(&lp.objective);
    for i in 0..m {
        let b = basis[i];
        if b < n && lp.objective[b] != 0.0 {
            let coeff = lp.objective[b];
            for j in 0..width {
                obj2[j] -= coeff * t[i][j];
            }
        }
    }
    // Artificials cannot re-enter: pricing is restricted to the first n
    // columns. Their reduced-cost entries stay live — they carry the duals.
    run_simplex(&mut t, &mut obj2, &mut basis, n, tol, &mut pivots)?;

    let mut x = vec![0.0f64; n];
    for i in 0..m {
        if basis[i] < n {
            x[basis[i]] = t[i][width - 1];
        }
    }
    // Duals: the phase-2 reduced cost under artificial column i equals
    // -y·e_i for the flipped system; undo the row flip.
    let mut duals = vec![0.0f64; m];
    for i in 0..m {
        let y = -obj2[n + i];
        duals[i] = if flipped[i] { -y } else { y };
    }
    let objective = x.iter().zip(&lp.objective).map(|(a, b)| a * b).sum();
    Ok(LpSolution {
        x,
        objective,
        duals,
        pivots,
    })
}

/// Bland's rule: entering = lowest-index negative reduced cost, leaving =
/// min ratio with lowest basic index on ties. Finite termination guaranteed.
fn run_simplex(
    t: &mut [Vec<f64>],
    obj: &mut [f64],
    basis: &mut [usize],
    priced_cols: usize,
    tol: f64,
    pivots: &mut usize,
) -> Result<(), LpError> {
    let m = t.len();
    let width = obj.len();
    loop {
        let entering = (0..priced_cols).find(|&j| obj[j] < -tol);
        let Some(e) = entering else { return Ok(()) };
        let mut leave: Option<usize> = None;
        let mut best = f64::INFINITY;
        for i in 0..m {
            if t[i][e] > tol {
                let ratio = t[i][width - 1] / t[i][e];
                let better = ratio < best - 1e-15
                    || (ratio <= best + 1e-15 && leave.is_some_and(|l| basis[i] < basis[l]));
                if better {
                    best = ratio;
                    leave = Some(i);
                }
            }
        }
        let Some(l) = leave else {
            return Err(LpError::Unbounded { column: e });
        };
        pivot(t, obj, l, e);
        basis[l] = e;
        *pivots += 1;
        if *pivots > 200_000 + 50 * m * width {
            return Err(LpError::Numerical("pivot budget exhausted".into()));
        }
    }
}

fn pivot(t: &mut [Vec<f64>], obj: &mut [f64], row: usize, col: usize) {
    let width = obj.len();
    let p = t[row][col];
    for v in t[row].iter_mut() {
        *v /= p;
    }
    t[row][col] = 1.0;
    for i in 0..t.len() {
        if i != row {
            let f = t[i][col];
            if f != 0.0 {
                for j in 0..width {
                    t[i][j] -= f * t[row][j];
                }
                t[i][col] = 0.0;
            }
        }
    }
    let f = obj[col];
    if f != 0.0 {
        for j in 0..width {
            obj[j] -= f * t[row][j];
        }
        obj[col] = 0.0;
    }
}

/// Convenience wrapper for programs with inequality rows: each `Ax ≤ b` row
/// gets a slack variable appended. Returns the solution restricted to the
/// original variables; duals keep the caller's row order.
pub fn solve_with_inequalities(
    objective: &[f64],
    eq_rows: &[(Vec<f64>, f64)],
    le_rows: &[(Vec<f64>, f64)],
) -> Result<LpSolution, LpError> {
    let n = objective.len();
    let slacks = le_rows.len();
    let mut constraints = Vec::with_capacity(eq_rows.len() + slacks);
    let mut rhs = Vec::with_capacity(eq_rows.len() + slacks);
    for (row, b) in eq_rows {
        let mut r = row.clone();
        r.resize(n + slacks, 0.0);
        constraints.push(r);
        rhs.push(*b);
    }
    for (k, (row, b)) in le_rows.iter().enumerate() {
        let mut r = row.clone();
        r.resize(n + slacks, 0.0);
        r[n + k] = 1.0;
        constraints.push(r);
        rhs.push(*b);
    }
    let mut full_obj = objective.to_vec();
    full_obj.resize(n + slacks, 0.0);
    let sol = solve_equality_form(&LinearProgram {
        objective: full_obj,
        constraints,
        rhs,
    })?;
    Ok(LpSolution {
        x: sol.x[..n].to_vec(),
        objective: sol.objective,
        duals: sol.duals,
        pivots: sol.pivots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand::Rng;

    #[test]
    fn solves_textbook_diet_style_program() {
        // min -3x - 5y  s.t.  x + 2y + s1 = 4,  3x + y + s2 = 6
        let lp = LinearProgram {
            objective: vec![-3.0, -5.0, 0.0, 0.0],
            constraints: vec![vec![1.0, 2.0, 1.0, 0.0], vec![3.0, 1.0, 0.0, 1.0]],
            rhs: vec![4.0, 6.0],
        };
        let sol = solve_equality_form(&lp).unwrap();
        // optimum at x = 8/5, y = 6/5, value = -54/5
        assert!((sol.x[0] - 1.6).abs() < 1e-9, "x = {:?}", sol.x);
        assert!((sol.x[1] - 1.2).abs() < 1e-9);
        assert!((sol.objective + 10.8).abs() < 1e-9);
        assert!(sol.duality_gap(&lp).abs() < 1e-9);
    }

    #[test]
    fn handles_negative_rhs_and_redundant_rows() {
        // x - y = -1 with duplicated row, x + y = 3 → x = 1, y = 2
        let lp = LinearProgram {
            objective: vec![1.0, 1.0],
            constraints: vec![
                vec![1.0, -1.0],
                vec![1.0, 1.0],
                vec![2.0, -2.0], // redundant multiple
            ],
            rhs: vec![-1.0, 3.0, -2.0],
        };
        let sol = solve_equality_form(&lp).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-9 && (sol.x[1] - 2.0).abs() < 1e-9);
        assert!((sol.objective - 3.0).abs() < 1e-9);
    }

    #[test]
    fn reports_infeasible_and_unbounded() {
        let infeasible = LinearProgram {
            objective: vec![1.0],
            constraints: vec![vec![1.0], vec![1.0]],
            rhs: vec![1.0, 2.0],
        };
        assert!(matches!(
            solve_equality_form(&infeasible),
            Err(LpError::Infeasible { .. })
        ));
        // min -x s.t. x - y = 0: both can grow forever
        let unbounded = LinearProgram {
            objective: vec![-1.0, 0.0],
            constraints: vec![vec![1.0, -1.0]],
            rhs: vec![0.0],
        };
        assert!(matches!(
            solve_equality_form(&unbounded),
            Err(LpError::Unbounded { .. })
        ));
    }

    #[test]
    fn size_guard_rejects_oversized_tableaus() {
        let lp = LinearProgram {
            objective: vec![0.0; 10],
            constraints: vec![vec![0.0; 10]; 4],
            rhs: vec![0.0; 4],
        };
        assert!(matches!(
            solve_equality_form_with_limit(&lp, 10),
            Err(LpError::SizeLimit { .. })
        ));
    }

    #[test]
    fn matches_transport_solver_on_random_instances() {
        // The transportation problem in equality form is a stress test with a
        // known independent answer.
        use crate::transport::{solve_transport, CostMatrix};
        let mut rng = stream_rng(7, 2);
        for case in 0..25 {
            let m = rng.random_range(2..=4);
            let n = rng.random_range(2..=4);
            let cost = CostMatrix::from_fn(m, n, |_, _| rng.random_range(0.0..10.0));
            let mut supply: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
            let s: f64 = supply.iter().sum();
            supply.iter_mut().for_each(|v| *v /= s);
            let mut demand: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
            let d: f64 = demand.iter().sum();
            demand.iter_mut().for_each(|v| *v /= d);

            let net = solve_transport(&cost, &supply, &demand).unwrap();

            // variables x_ij row-major; constraints: row sums then col sums
            let nv = m * n;
            let mut constraints = Vec::new();
            let mut rhs = Vec::new();
            for i in 0..m {
                let mut row = vec![0.0; nv];
                for j in 0..n {
                    row[i * n + j] = 1.0;
                }
                constraints.push(row);
                rhs.push(supply[i]);
            }
            for j in 0..n {
                let mut row = vec![0.0; nv];
                for i in 0..m {
                    row[i * n + j] = 1.0;
                }
                constraints.push(row);
                rhs.push(demand[j]);
            }
            let lp = LinearProgram {
                objective: (0..nv).map(|k| cost.at(k / n, k % n)).collect(),
                constraints,
                rhs,
            };
            let sol = solve_equality_form(&lp).unwrap();
            assert!(
                (sol.objective - net.objective).abs() < 1e-9,
                "case {case}: dense {} vs network {}",
                sol.objective,
                net.objective
            );
            assert!(sol.duality_gap(&lp).abs() < 1e-8);
        }
        println!("25 transportation cross-checks agreed");
    }

    #[test]
    fn inequality_wrapper_adds_slacks() {
        // max x + y s.t. x ≤ 2, y ≤ 3, x + y ≤ 4  (as min of negative)
        let sol = solve_with_inequalities(
            &[-1.0, -1.0],
            &[],
            &[
                (vec![1.0, 0.0], 2.0),
                (vec![0.0, 1.0], 3.0),
                (vec![1.0, 1.0], 4.0),
            ],
        )
        .unwrap();
        assert!((sol.objective + 4.0).abs() < 1e-9);
        assert!(sol.x[0] + sol.x[1] <= 4.0 + 1e-9);
    }

    #[test]
    fn degenerate_programs_terminate() {
        // classic cycling-prone instance (Beale); Bland must terminate
        let lp = LinearProgram {
            objective: vec![-0.75, 150.0, -0.02, 6.0, 0.0, 0.0, 0.0],
            constraints: vec![
                vec![0.25, -60.0, -0.04, 9.0, 1.0, 0.0, 0.0],
                vec![0.5, -90.0, -0.02, 3.0, 0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            ],
            rhs: vec![0.0, 0.0, 1.0],
        };
        let sol = solve_equality_form(&lp).unwrap();
        assert!((sol.objective + 0.05).abs() < 1e-9, "objective {}", sol.objective);
    }
}
