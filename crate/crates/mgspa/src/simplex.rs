//! Dense two-phase simplex with Bland's rule, plus a zero-sum matrix game
//! solver built on it. Problem sizes here are tiny (tens of variables), so a
//! plain tableau is enough.

use crate::error::{Error, Result};

const PIVOT_TOL: f64 = 1e-10;
const FEAS_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rel {
    Le,
    Ge,
    Eq,
}

/// A small linear program: minimize `c . x` subject to linear rows, with
/// each variable either nonnegative (default) or free.
#[derive(Debug, Clone)]
pub struct LinProg {
    num_vars: usize,
    objective: Vec<f64>,
    rows: Vec<(Vec<f64>, Rel, f64)>,
    free: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub value: f64,
}

impl LinProg {
    pub fn minimize(objective: Vec<f64>) -> Self {
        let num_vars = objective.len();
        LinProg { num_vars, objective, rows: Vec::new(), free: vec![false; num_vars] }
    }

    pub fn mark_free(&mut self, var: usize) {
        self.free[var] = true;
    }

    pub fn add_row(&mut self, coeffs: Vec<f64>, rel: Rel, rhs: f64) {
        assert_eq!(coeffs.len(), self.num_vars);
        self.rows.push((coeffs, rel, rhs));
    }

    /// Two-phase simplex. Free variables are split into positive and
    /// negative parts; inequalities get slack columns.
    pub fn solve(&self) -> Result<LpSolution> {
        // column layout: [x+ for all vars][x- for free vars][slacks]
        let n = self.num_vars;
        let neg_offset = n;
        let free_idx: Vec<usize> = (0..n).filter(|&j| self.free[j]).collect();
        let num_free = free_idx.len();
        let num_slack = self.rows.iter().filter(|(_, rel, _)| *rel != Rel::Eq).count();
        let total = n + num_free + num_slack;
        let m = self.rows.len();

        let mut a = vec![vec![0.0; total]; m];
        let mut b = vec![0.0; m];
        let mut c = vec![0.0; total];
        for j in 0..n {
            c[j] = self.objective[j];
        }
        for (k, &j) in free_idx.iter().enumerate() {
            c[neg_offset + k] = -self.objective[j];
        }
        let mut slack_col = n + num_free;
        for (i, (coeffs, rel, rhs)) in self.rows.iter().enumerate() {
            for j in 0..n {
                a[i][j] = coeffs[j];
            }
            for (k, &j) in free_idx.iter().enumerate() {
                a[i][neg_offset + k] = -coeffs[j];
            }
            b[i] = *rhs;
            match rel {
                Rel::Le => {
                    a[i][slack_col] = 1.0;
                    slack_col += 1;
                }
                Rel::Ge => {
                    a[i][slack_col] = -1.0;
                    slack_col += 1;
                }
                Rel::Eq => {}
            }
        }
        // normalize to b >= 0
        for i in 0..m {
            if b[i] < 0.0 {
                b[i] = -b[i];
                for v in a[i].iter_mut() {
                    *v = -*v;
                }
            }
        }

        let x = simplex_standard(a, b, c, total)?;

        let mut out = vec![0.0; n];
        for j in 0..n {
            out[j] = x[j];
        }
        for (k, &j) in free_idx.iter().enumerate() {
            out[j] -= x[neg_offset + k];
        }
        let value = out
            .iter()
            .zip(&self.objective)
            .map(|(xi, ci)| xi * ci)
            .sum();
        Ok(LpSolution { x: out, value })
    }
}

/// Solve min c.x s.t. Ax = b, x >= 0, b >= 0 by two-phase simplex.
fn simplex_standard(
    mut a: Vec<Vec<f64>>,
    b: Vec<f64>,
    c: Vec<f64>,
    n: usize,
) -> Result<Vec<f64>> {
    let m = a.len();
    // extended matrix [A | I]: artificial columns double as the initial
    // basis and as the reference for exact refactorization later
    for (i, row) in a.iter_mut().enumerate() {
        row.extend((0..m).map(|k| if k == i { 1.0 } else { 0.0 }));
    }
    let a_ext = a;
    let mut basis: Vec<usize> = (n..n + m).collect();

    // phase 1: drive the artificials to zero
    let phase1_cost: Vec<f64> = (0..n + m)
        .map(|j| if j >= n { 1.0 } else { 0.0 })
        .collect();
    let (mut tab_a, tab_b) = solve_phase(&a_ext, &b, &phase1_cost, &mut basis, n + m)?;
    let phase1_value: f64 = basis
        .iter()
        .zip(&tab_b)
        .filter(|(&j, _)| j >= n)
        .map(|(_, &bi)| bi.max(0.0))
        .sum();
    if phase1_value > FEAS_TOL {
        return Err(Error::StageSolve(format!("infeasible LP (phase 1 value {phase1_value})")));
    }
    // pivot remaining artificials out of the basis where possible; a fully
    // zero row stays basic at zero level and is harmless
    let mut tab_b = tab_b;
    for i in 0..m {
        if basis[i] >= n {
            if let Some(j) = (0..n).find(|&j| tab_a[i][j].abs() > 1e-7) {
                pivot(&mut tab_a, &mut tab_b, &mut basis, i, j);
            }
        }
    }

    // phase 2 on the original cost; the entering loop is bounded by the
    // cost length, so the artificial columns can never re-enter
    let (_, final_b) = solve_phase(&a_ext, &b, &c, &mut basis, n)?;

    let mut x = vec![0.0; n];
    for (i, &j) in basis.iter().enumerate() {
        if j < n {
            x[j] = final_b[i].max(0.0);
        }
    }
    Ok(x)
}

/// Pivot until optimal for the given cost, refactorizing the tableau from
/// the untouched matrix between legs; optimality is only accepted when a
/// leg starting from an exact tableau performs zero pivots, so accumulated
/// roundoff can neither stop the iteration early nor leak into the result.
fn solve_phase(
    a_orig: &[Vec<f64>],
    b_orig: &[f64],
    cost: &[f64],
    basis: &mut [usize],
    ncols: usize,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    const LEG_PIVOTS: usize = 64;
    let max_legs = 200usize.max(8 * (a_orig.first().map_or(0, Vec::len) + b_orig.len()));
    let (mut a, mut b) = refactorize(a_orig, b_orig, basis)?;
    for _ in 0..max_legs {
        let pivots = run_simplex_leg(&mut a, &mut b, cost, basis, ncols, LEG_PIVOTS)?;
        let fresh = refactorize(a_orig, b_orig, basis)?;
        a = fresh.0;
        b = fresh.1;
        if pivots == 0 {
            return Ok((a, b));
        }
    }
    Err(Error::StageSolve("simplex pivot budget exhausted".into()))
}

/// Exact tableau `(B^-1 A, B^-1 b)` for the current basis, via Gaussian
/// elimination with partial pivoting on the original data.
fn refactorize(
    a_orig: &[Vec<f64>],
    b_orig: &[f64],
    basis: &[usize],
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let m = b_orig.len();
    let ncols = a_orig.first().map_or(0, Vec::len);
    // augmented system [B | A b] reduced to [I | B^-1 A  B^-1 b]
    let width = m + ncols + 1;
    let mut mat = vec![vec![0.0; width]; m];
    for r in 0..m {
        for (i, &j) in basis.iter().enumerate() {
            mat[r][i] = a_orig[r][j];
        }
        for j in 0..ncols {
            mat[r][m + j] = a_orig[r][j];
        }
        mat[r][width - 1] = b_orig[r];
    }
    for k in 0..m {
        let piv = (k..m)
            .max_by(|&i, &j| mat[i][k].abs().total_cmp(&mat[j][k].abs()))
            .expect("nonempty pivot range");
        if mat[piv][k].abs() < 1e-12 {
            return Err(Error::StageSolve("singular simplex basis".into()));
        }
        mat.swap(k, piv);
        let inv = 1.0 / mat[k][k];
        for col in k..width {
            mat[k][col] *= inv;
        }
        for r in 0..m {
            if r != k {
                let f = mat[r][k];
                if f != 0.0 {
                    for col in k..width {
                        mat[r][col] -= f * mat[k][col];
                    }
                }
            }
        }
    }
    let a = mat.iter().map(|row| row[m..m + ncols].to_vec()).collect();
    let b = mat.iter().map(|row| row[width - 1]).collect();
    Ok((a, b))
}

/// Runs at most `max_pivots` pivots; returns how many were performed.
/// Stopping short of optimality is fine — the caller refactorizes and
/// calls again until a leg performs none.
fn run_simplex_leg(
    a: &mut [Vec<f64>],
    b: &mut [f64],
    cost: &[f64],
    basis: &mut [usize],
    n: usize,
    max_pivots: usize,
) -> Result<usize> {
    let m = a.len();
    // Dantzig entering with largest-pivot ratio ties is numerically stable;
    // a long degenerate streak flips to Bland's rule, which cannot cycle.
    let mut degenerate_streak = 0usize;
    for performed in 0..max_pivots {
        let bland = degenerate_streak > 64;
        // reduced costs via basic multipliers: r_j = c_j - y . A_j with
        // y solving y_B = c_B through the current (already reduced) tableau,
        // which means r_j = c_j - sum_i c_{basis[i]} a[i][j]
        let mut entering: Option<(usize, f64)> = None;
        for j in 0..n {
            if basis.contains(&j) {
                continue;
            }
            let mut r = cost[j];
            for i in 0..m {
                if basis[i] < n {
                    r -= cost[basis[i]] * a[i][j];
                }
            }
            if r < -PIVOT_TOL {
                if bland {
                    entering = Some((j, r)); // smallest improving index
                    break;
                }
                if entering.map_or(true, |(_, best)| r < best) {
                    entering = Some((j, r));
                }
            }
        }
        let Some((j, _)) = entering else { return Ok(performed) };
        // ratio test; near-tied rows resolved by largest pivot magnitude
        // (stability) or by smallest basis index under Bland. Entries at
        // drift level are only eligible when no sizable pivot exists, so a
        // spurious near-zero cannot produce a dependent basis.
        let strong = 1e-7;
        let eligible = if (0..m).any(|i| a[i][j] > strong) { strong } else { PIVOT_TOL };
        let mut leave: Option<(usize, f64)> = None;
        for i in 0..m {
            if a[i][j] > eligible {
                let ratio = b[i].max(0.0) / a[i][j];
                match leave {
                    None => leave = Some((i, ratio)),
                    Some((li, lr)) => {
                        let tied = (ratio - lr).abs() <= 1e-9 * (1.0 + lr.abs());
                        let better = if tied {
                            if bland {
                                basis[i] < basis[li]
                            } else {
                                a[i][j] > a[li][j]
                            }
                        } else {
                            ratio < lr
                        };
                        if better {
                            leave = Some((i, ratio));
                        }
                    }
                }
            }
        }
        let Some((i, ratio)) = leave else {
            return Err(Error::StageSolve("unbounded LP".into()));
        };
        if ratio <= 1e-12 {
            degenerate_streak += 1;
        } else {
            degenerate_streak = 0;
        }
        pivot(a, b, basis, i, j);
    }
    Ok(max_pivots)
}

fn pivot(a: &mut [Vec<f64>], b: &mut [f64], basis: &mut [usize], row: usize, col: usize) {
    let m = a.len();
    let piv = a[row][col];
    for v in a[row].iter_mut() {
        *v /= piv;
    }
    b[row] /= piv;
    for i in 0..m {
        if i != row {
            let factor = a[i][col];
            if factor != 0.0 {
                for j in 0..a[i].len() {
                    let delta = factor * a[row][j];
                    a[i][j] -= delta;
                }
                b[i] -= factor * b[row];
            }
        }
    }
    basis[row] = col;
}

/// Value and optimal mixed strategies of a zero-sum matrix game where the
/// row player maximizes `payoff[row][col]` and the column player minimizes.
pub fn solve_matrix_game(payoff: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let rows = payoff.len();
    let cols = payoff.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Err(Error::StageSolve("empty payoff matrix".into()));
    }
    // max v s.t. sum_i x_i payoff[i][j] >= v for all j, x on the simplex
    // variables: [x_0..x_{rows-1}, v]
    let mut obj = vec![0.0; rows + 1];
    obj[rows] = -1.0; // minimize -v
    let mut lp = LinProg::minimize(obj);
    lp.mark_free(rows);
    for j in 0..cols {
        let mut coeffs = vec![0.0; rows + 1];
        for i in 0..rows {
            coeffs[i] = payoff[i][j];
        }
        coeffs[rows] = -1.0;
        lp.add_row(coeffs, Rel::Ge, 0.0);
    }
    let mut simplex_row = vec![0.0; rows + 1];
    simplex_row[..rows].fill(1.0);
    lp.add_row(simplex_row, Rel::Eq, 1.0);
    let sol = lp.solve()?;
    let row_strategy = sol.x[..rows].to_vec();
    let value = sol.x[rows];

    // column player by symmetry on the transposed, negated matrix
    let mut obj = vec![0.0; cols + 1];
    obj[cols] = 1.0; // minimize u with u >= payoff . y
    let mut lp = LinProg::minimize(obj);
    lp.mark_free(cols);
    for i in 0..rows {
        let mut coeffs = vec![0.0; cols + 1];
        for j in 0..cols {
            coeffs[j] = payoff[i][j];
        }
        coeffs[cols] = -1.0;
        lp.add_row(coeffs, Rel::Le, 0.0);
    }
    let mut simplex_row = vec![0.0; cols + 1];
    simplex_row[..cols].fill(1.0);
    lp.add_row(simplex_row, Rel::Eq, 1.0);
    let sol = lp.solve()?;
    let col_strategy = sol.x[..cols].to_vec();

    Ok((row_strategy, col_strategy, value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn matching_pennies() {
        let payoff = vec![vec![1.0, -1.0], vec![-1.0, 1.0]];
        let (x, y, v) = solve_matrix_game(&payoff).unwrap();
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(x[0], 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(y[0], 0.5, epsilon = 1e-9);
    }

    #[test]
    fn pure_saddle() {
        // exhaustive pure minimax scan gives value 2 at row 2
        let payoff = vec![vec![3.0, 1.0], vec![2.0, 2.0]];
        let (x, _, v) = solve_matrix_game(&payoff).unwrap();
        assert_abs_diff_eq!(v, 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(x[1], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn shifted_game_value() {
        // adding a constant shifts the value by the same constant
        let payoff = vec![vec![6.0, 4.0], vec![4.0, 6.0]];
        let (_, _, v) = solve_matrix_game(&payoff).unwrap();
        assert_abs_diff_eq!(v, 5.0, epsilon = 1e-9);
    }

    #[test]
    fn simple_lp() {
        // min -x - y s.t. x + y <= 1
        let mut lp = LinProg::minimize(vec![-1.0, -1.0]);
        lp.add_row(vec![1.0, 1.0], Rel::Le, 1.0);
        let sol = lp.solve().unwrap();
        assert_abs_diff_eq!(sol.value, -1.0, epsilon = 1e-9);
    }

    #[test]
    fn infeasible_lp() {
        let mut lp = LinProg::minimize(vec![1.0]);
        lp.add_row(vec![1.0], Rel::Le, 1.0);
        lp.add_row(vec![1.0], Rel::Ge, 2.0);
        assert!(lp.solve().is_err());
    }

    #[test]
    fn free_variable() {
        // min v s.t. v >= -3, v >= -5 -> v = -3
        let mut lp = LinProg::minimize(vec![1.0]);
        lp.mark_free(0);
        lp.add_row(vec![1.0], Rel::Ge, -3.0);
        lp.add_row(vec![1.0], Rel::Ge, -5.0);
        let sol = lp.solve().unwrap();
        assert_abs_diff_eq!(sol.value, -3.0, epsilon = 1e-9);
    }

    #[test]
    fn random_games_satisfy_saddle_bounds() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let rows = rng.gen_range(1..5);
            let cols = rng.gen_range(1..5);
            let payoff: Vec<Vec<f64>> = (0..rows)
                .map(|_| (0..cols).map(|_| rng.gen_range(-5.0..5.0)).collect())
                .collect();
            let (x, y, v) = solve_matrix_game(&payoff).unwrap();
            // row strategy guarantees at least v against any column
            for j in 0..cols {
                let got: f64 = (0..rows).map(|i| x[i] * payoff[i][j]).sum();
                assert!(got >= v - 1e-8, "row guarantee violated: {got} < {v}");
            }
            for i in 0..rows {
                let got: f64 = (0..cols).map(|j| y[j] * payoff[i][j]).sum();
                assert!(got <= v + 1e-8, "column guarantee violated: {got} > {v}");
            }
        }
    }
}
