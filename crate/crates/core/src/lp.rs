//! Dense two-phase simplex for small linear programs.
//!
//! Solves `max cᵀx` subject to `A_ub x ≤ b_ub`, `A_eq x = b_eq`, `x ≥ 0`.
//! Bland's rule is used for both entering and leaving variables, so the
//! method terminates without cycling and is fully deterministic.

const EPS: f64 = 1e-11;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    pub x: Vec<f64>,
    pub objective: f64,
}

#[derive(Clone, Debug, Default)]
pub struct LinearProgram {
    pub c: Vec<f64>,
    pub a_ub: Vec<Vec<f64>>,
    pub b_ub: Vec<f64>,
    pub a_eq: Vec<Vec<f64>>,
    pub b_eq: Vec<f64>,
}

struct Tableau {
    rows: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    basis: Vec<usize>,
}

impl Tableau {
    fn pivot(&mut self, r: usize, col: usize) {
        let p = self.rows[r][col];
        self.rows[r].iter_mut().for_each(|v| *v /= p);
        self.rhs[r] /= p;
        let pivot_row = self.rows[r].clone();
        let pivot_rhs = self.rhs[r];
        for i in 0..self.rows.len() {
            if i == r {
                continue;
            }
            let factor = self.rows[i][col];
            if factor != 0.0 {
                for (v, pv) in self.rows[i].iter_mut().zip(&pivot_row) {
                    *v -= factor * pv;
                }
                self.rhs[i] -= factor * pivot_rhs;
                self.rows[i][col] = 0.0;
            }
        }
        self.basis[r] = col;
    }

    /// Maximizes `cost · x` over columns `< allowed`. Returns false when unbounded.
    fn optimize(&mut self, cost: &[f64], allowed: usize) -> bool {
        loop {
            let entering = (0..allowed).find(|&j| {
                if self.basis.contains(&j) {
                    return false;
                }
                let z: f64 = self
                    .basis
                    .iter()
                    .zip(&self.rows)
                    .map(|(&b, row)| cost[b] * row[j])
                    .sum();
                cost[j] - z > EPS
            });
            let Some(col) = entering else { return true };
            let mut leave: Option<(usize, f64)> = None;
            for (i, row) in self.rows.iter().enumerate() {
                if row[col] > EPS {
                    let ratio = self.rhs[i] / row[col];
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((li, lr)) => {
                            if ratio < lr - EPS || (ratio <= lr + EPS && self.basis[i] < self.basis[li]) {
                                Some((i, ratio))
                            } else {
                                Some((li, lr))
                            }
                        }
                    };
                }
            }
            match leave {
                None => return false,
                Some((r, _)) => self.pivot(r, col),
            }
        }
    }
}

impl LinearProgram {
    pub fn solve(&self) -> LpSolution {
        let n = self.c.len();
        let m_ub = self.a_ub.len();
        let m = m_ub + self.a_eq.len();
        // Columns: originals, one slack/surplus per inequality, one artificial per row needing it.
        let n_slack = m_ub;
        let mut rows = Vec::with_capacity(m);
        let mut rhs = Vec::with_capacity(m);
        let mut needs_art = Vec::with_capacity(m);
        for (i, (a, &b)) in self.a_ub.iter().zip(&self.b_ub).enumerate() {
            let mut row = vec![0.0; n + n_slack];
            row[..n].copy_from_slice(a);
            row[n + i] = 1.0;
            if b < 0.0 {
                row.iter_mut().for_each(|v| *v = -*v);
                rhs.push(-b);
                needs_art.push(true);
            } else {
                rhs.push(b);
                needs_art.push(false);
            }
            rows.push(row);
        }
        for (a, &b) in self.a_eq.iter().zip(&self.b_eq) {
            let mut row = vec![0.0; n + n_slack];
            row[..n].copy_from_slice(a);
            if b < 0.0 {
                row.iter_mut().for_each(|v| *v = -*v);
            }
            rhs.push(b.abs());
            needs_art.push(true);
            rows.push(row);
        }
        let n_art = needs_art.iter().filter(|&&x| x).count();
        let total = n + n_slack + n_art;
        let mut basis = vec![0; m];
        let mut k = 0;
        for i in 0..m {
            rows[i].resize(total, 0.0);
            if needs_art[i] {
                rows[i][n + n_slack + k] = 1.0;
                basis[i] = n + n_slack + k;
                k += 1;
            } else {
                basis[i] = n + i;
            }
        }
        let mut tab = Tableau { rows, rhs, basis };

        if n_art > 0 {
            let mut phase1 = vec![0.0; total];
            phase1[n + n_slack..].iter_mut().for_each(|v| *v = -1.0);
            tab.optimize(&phase1, total);
            let infeasibility: f64 = tab
                .basis
                .iter()
                .zip(&tab.rhs)
                .filter(|(&b, _)| b >= n + n_slack)
                .map(|(_, &v)| v)
                .sum();
            if infeasibility > 1e-9 {
                return LpSolution {
                    status: LpStatus::Infeasible,
                    x: vec![0.0; n],
                    objective: f64::NAN,
                };
            }
            // Drive zero-valued artificials out of the basis where possible.
            for r in 0..m {
                if tab.basis[r] >= n + n_slack {
                    if let Some(col) = (0..n + n_slack).find(|&j| tab.rows[r][j].abs() > 1e-9) {
                        tab.pivot(r, col);
                    }
                }
            }
        }

        let mut cost = vec![0.0; total];
        cost[..n].copy_from_slice(&self.c);
        if !tab.optimize(&cost, n + n_slack) {
            return LpSolution {
                status: LpStatus::Unbounded,
                x: vec![0.0; n],
                objective: f64::INFINITY,
            };
        }
        let mut x = vec![0.0; n];
        for (r, &b) in tab.basis.iter().enumerate() {
            if b < n {
                x[b] = tab.rhs[r].max(0.0);
            }
        }
        let objective = x.iter().zip(&self.c).map(|(a, b)| a * b).sum();
        LpSolution {
            status: LpStatus::Optimal,
            x,
            objective,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textbook_maximum() {
        // max 3x + 5y, x ≤ 4, 2y ≤ 12, 3x + 2y ≤ 18 → (2, 6), 36.
        let lp = LinearProgram {
            c: vec![3.0, 5.0],
            a_ub: vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 2.0]],
            b_ub: vec![4.0, 12.0, 18.0],
            ..Default::default()
        };
        let s = lp.solve();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!((s.objective - 36.0).abs() < 1e-9);
        assert!((s.x[0] - 2.0).abs() < 1e-9 && (s.x[1] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn equality_and_negative_rhs() {
        // max -x - y, x + y = 2, -x ≤ -0.5 → objective -2 with x ≥ 0.5.
        let lp = LinearProgram {
            c: vec![-1.0, -1.0],
            a_ub: vec![vec![-1.0, 0.0]],
            b_ub: vec![-0.5],
            a_eq: vec![vec![1.0, 1.0]],
            b_eq: vec![2.0],
        };
        let s = lp.solve();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!((s.objective + 2.0).abs() < 1e-9 && s.x[0] >= 0.5 - 1e-9);
    }

    #[test]
    fn infeasible_and_unbounded() {
        let lp = LinearProgram {
            c: vec![1.0],
            a_ub: vec![vec![1.0]],
            b_ub: vec![1.0],
            a_eq: vec![vec![1.0]],
            b_eq: vec![2.0],
        };
        assert_eq!(lp.solve().status, LpStatus::Infeasible);
        let lp = LinearProgram {
            c: vec![1.0, 0.0],
            a_ub: vec![vec![-1.0, 1.0]],
            b_ub: vec![1.0],
            ..Default::default()
        };
        assert_eq!(lp.solve().status, LpStatus::Unbounded);
    }

    #[test]
    fn degenerate_problem_terminates() {
        // Classic cycling example under the largest-coefficient rule.
        let lp = LinearProgram {
            c: vec![10.0, -57.0, -9.0, -24.0],
            a_ub: vec![
                vec![0.5, -5.5, -2.5, 9.0],
                vec![0.5, -1.5, -0.5, 1.0],
                vec![1.0, 0.0, 0.0, 0.0],
            ],
            b_ub: vec![0.0, 0.0, 1.0],
            ..Default::default()
        };
        let s = lp.solve();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!((s.objective - 1.0).abs() < 1e-9);
    }

    #[test]
    fn matches_vertex_enumeration_on_random_programs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..300 {
            let a: Vec<Vec<f64>> = (0..3).map(|_| (0..2).map(|_| rng.gen_range(-1.0..2.0)).collect()).collect();
            let b: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..3.0)).collect();
            let c: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // Bound the region so the oracle can enumerate vertices.
            let mut a_ub = a.clone();
            a_ub.push(vec![1.0, 1.0]);
            let mut b_ub = b.clone();
            b_ub.push(10.0);
            let lp = LinearProgram {
                c: c.clone(),
                a_ub: a_ub.clone(),
                b_ub: b_ub.clone(),
                ..Default::default()
            };
            let s = lp.solve();
            // Oracle: every intersection of two active constraints (incl. axes).
            let mut lines: Vec<(f64, f64, f64)> = a_ub.iter().zip(&b_ub).map(|(r, &v)| (r[0], r[1], v)).collect();
            lines.push((1.0, 0.0, 0.0));
            lines.push((0.0, 1.0, 0.0));
            let mut best = f64::NEG_INFINITY;
            for i in 0..lines.len() {
                for j in i + 1..lines.len() {
                    let (a1, b1, c1) = lines[i];
                    let (a2, b2, c2) = lines[j];
                    let det = a1 * b2 - a2 * b1;
                    if det.abs() < 1e-12 {
                        continue;
                    }
                    let x = (c1 * b2 - c2 * b1) / det;
                    let y = (a1 * c2 - a2 * c1) / det;
                    let feasible = x >= -1e-9 && y >= -1e-9 && a_ub.iter().zip(&b_ub).all(|(r, &v)| r[0] * x + r[1] * y <= v + 1e-9);
                    if feasible {
                        best = best.max(c[0] * x + c[1] * y);
                    }
                }
            }
            assert_eq!(s.status, LpStatus::Optimal);
            assert!((s.objective - best).abs() < 1e-7, "{} vs {best}", s.objective);
        }
    }
}
