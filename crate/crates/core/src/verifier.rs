//! Consistency checks for candidate collections.
//!
//! Two notions are checked. The parametrized one asks whether some logit
//! expected-utility function reproduces the predicted probabilities. The
//! nonparametric one asks whether any strictly increasing utility, without
//! noise, rationalizes the implied binary choices. The latter is a linear
//! feasibility problem over utilities on the merged payoff grid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eut::{min_theory_loss, UtilityBasis};
use crate::lottery::{merged_payoff_grid, ExampleCollection, Lottery, Menu};
use crate::lp::{LinearProgram, LpStatus};

/// Margins at or below this are treated as infeasible strict inequalities.
pub const MARGIN_THRESHOLD: f64 = 1e-9;
/// Largest collection accepted by the subset search.
pub const MAX_MENUS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Consistent,
    Inconsistent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub status: Status,
    /// Optimal common slack of the strict inequalities.
    pub margin: f64,
    /// Utilities on `distinct_payoffs`, normalized to run from 0 to 1.
    pub witness_utility: Option<Vec<f64>>,
    pub distinct_payoffs: Vec<f64>,
}

impl VerificationResult {
    pub fn is_consistent(&self) -> bool {
        self.status == Status::Consistent
    }
}

/// Lottery 1 is the implied choice when its probability is at least one half.
pub fn implied_binary_choices(collection: &ExampleCollection) -> Vec<u8> {
    collection.examples.iter().map(|e| e.implied_choice()).collect()
}

fn chosen_pair(menu: &Menu, choice: u8) -> (&Lottery, &Lottery) {
    if choice == 1 {
        (&menu.lottery1, &menu.lottery0)
    } else {
        (&menu.lottery0, &menu.lottery1)
    }
}

/// Decides whether some strictly increasing utility makes every chosen
/// lottery strictly better than its alternative.
///
/// Utilities are normalized to `u_(1) = 0`, `u_(k) = 1` and the program
/// maximizes a common slack `t` on all strict inequalities. A menu whose two
/// lotteries coincide on the grid imposes no constraint.
pub fn verify_increasing_utility(menus: &[Menu], choices: &[u8]) -> Result<VerificationResult> {
    if menus.is_empty() {
        return Err(Error::Empty);
    }
    if menus.len() != choices.len() {
        return Err(Error::Dimension {
            expected: menus.len(),
            got: choices.len(),
        });
    }
    if menus.len() > MAX_MENUS {
        return Err(Error::invalid(format!("at most {MAX_MENUS} menus are supported")));
    }
    let grid = merged_payoff_grid(menus.iter().flat_map(|m| [&m.lottery0, &m.lottery1]));
    let k = grid.len();
    if k < 2 {
        return Ok(VerificationResult {
            status: Status::Consistent,
            margin: 1.0,
            witness_utility: Some(vec![0.0; k]),
            distinct_payoffs: grid,
        });
    }

    // Variables: d_1..d_{k-1} ≥ 0 and s = t + 1 ≥ 0, with increments
    // u_{j+1} − u_j = d_j + t.
    let nv = k;
    let mut lp = LinearProgram {
        c: {
            let mut c = vec![0.0; nv];
            c[k - 1] = 1.0;
            c
        },
        ..Default::default()
    };
    let mut eq = vec![1.0; nv];
    eq[k - 1] = (k - 1) as f64;
    lp.a_eq.push(eq);
    lp.b_eq.push(k as f64);
    for (menu, &choice) in menus.iter().zip(choices) {
        let (chosen, other) = chosen_pair(menu, choice);
        let pc = chosen.probs_on_grid(&grid);
        let po = other.probs_on_grid(&grid);
        let c: Vec<f64> = pc.iter().zip(&po).map(|(a, b)| a - b).collect();
        if c.iter().all(|v| v.abs() <= 1e-12) {
            continue;
        }
        // Σ_j c_j u_j ≥ t with u_j = Σ_{i<j} d_i + (j−1) t.
        let mut row = vec![0.0; nv];
        let mut tail = 0.0;
        for i in (0..k - 1).rev() {
            tail += c[i + 1];
            row[i] = -tail;
        }
        let m: f64 = c.iter().enumerate().map(|(j, v)| v * j as f64).sum();
        row[k - 1] = 1.0 - m;
        lp.a_ub.push(row);
        lp.b_ub.push(1.0 - m);
    }
    let sol = lp.solve();
    match sol.status {
        LpStatus::Optimal => {}
        LpStatus::Infeasible => return Err(Error::LinearProgram("normalization infeasible".into())),
        LpStatus::Unbounded => return Err(Error::LinearProgram("margin unbounded".into())),
    }
    let t = sol.x[k - 1] - 1.0;
    let mut u = vec![0.0; k];
    for j in 1..k {
        u[j] = u[j - 1] + sol.x[j - 1] + t;
    }
    let consistent = t > MARGIN_THRESHOLD;
    Ok(VerificationResult {
        status: if consistent {
            Status::Consistent
        } else {
            Status::Inconsistent
        },
        margin: t,
        witness_utility: consistent.then_some(u),
        distinct_payoffs: grid,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyCheck {
    pub anomaly: bool,
    /// Smallest inconsistent subset (menu indices) when the collection is not
    /// itself a minimal anomaly but contains one.
    pub failing_subset: Option<Vec<usize>>,
    pub full: VerificationResult,
}

/// Inconsistent collection whose every proper non-empty subset is consistent.
pub fn is_anomaly(menus: &[Menu], choices: &[u8]) -> Result<AnomalyCheck> {
    let full = verify_increasing_utility(menus, choices)?;
    let n = menus.len();
    if full.is_consistent() {
        return Ok(AnomalyCheck {
            anomaly: false,
            failing_subset: None,
            full,
        });
    }
    let full_mask = (1u32 << n) - 1;
    let mut masks: Vec<u32> = (1..full_mask).collect();
    masks.sort_by_key(|m| (m.count_ones(), *m));
    for mask in masks {
        let idx: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let sub_menus: Vec<Menu> = idx.iter().map(|&i| menus[i].clone()).collect();
        let sub_choices: Vec<u8> = idx.iter().map(|&i| choices[i]).collect();
        if !verify_increasing_utility(&sub_menus, &sub_choices)?.is_consistent() {
            return Ok(AnomalyCheck {
                anomaly: false,
                failing_subset: Some(idx),
                full,
            });
        }
    }
    Ok(AnomalyCheck {
        anomaly: true,
        failing_subset: None,
        full,
    })
}

/// Convenience wrapper using the collection's implied choices.
pub fn is_anomaly_collection(collection: &ExampleCollection) -> Result<AnomalyCheck> {
    is_anomaly(&collection.menus(), &implied_binary_choices(collection))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParametrizedVerdict {
    pub inconsistent: bool,
    pub min_kl: f64,
    pub on_boundary: bool,
    pub converged: bool,
}

/// Default threshold on the minimal mean KL divergence.
pub const DEFAULT_KL_THRESHOLD: f64 = 1e-5;

/// Inconsistent with the logit expected-utility class when the best mean KL
/// exceeds `tau`.
pub fn verify_parametrized<R: Rng + ?Sized>(
    basis: &UtilityBasis,
    collection: &ExampleCollection,
    tau: f64,
    restarts: usize,
    rng: &mut R,
) -> Result<ParametrizedVerdict> {
    let fit = min_theory_loss(basis, &collection.examples, restarts, rng)?;
    Ok(ParametrizedVerdict {
        inconsistent: fit.kl > tau,
        min_kl: fit.kl,
        on_boundary: fit.on_boundary,
        converged: fit.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lottery::{fosd_compare, sample_random_menu, Dominance, Example, Provenance};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lot(z: &[f64], p: &[f64]) -> Lottery {
        Lottery::new(z.to_vec(), p.to_vec()).unwrap()
    }

    fn allais() -> Vec<Menu> {
        vec![
            Menu::new(lot(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]), lot(&[1.0, 0.0, 5.0], &[0.89, 0.01, 0.10])).unwrap(),
            Menu::new(lot(&[1.0, 0.0, 0.0], &[0.11, 0.89, 0.0]), lot(&[5.0, 0.0, 0.0], &[0.10, 0.90, 0.0])).unwrap(),
        ]
    }

    #[test]
    fn allais_is_an_anomaly() {
        let menus = allais();
        let r = verify_increasing_utility(&menus, &[0, 1]).unwrap();
        assert_eq!(r.status, Status::Inconsistent);
        assert!(r.margin <= 0.0);
        let check = is_anomaly(&menus, &[0, 1]).unwrap();
        assert!(check.anomaly);
        assert!(verify_increasing_utility(&menus, &[0, 0]).unwrap().is_consistent());
    }

    #[test]
    fn witness_satisfies_constraints() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let menus: Vec<Menu> = (0..2).map(|_| sample_random_menu(&mut rng, 2, 0.0, 10.0).unwrap()).collect();
            let choices = [rand::Rng::gen_range(&mut rng, 0..2u8), rand::Rng::gen_range(&mut rng, 0..2u8)];
            let r = verify_increasing_utility(&menus, &choices).unwrap();
            if let Some(u) = &r.witness_utility {
                assert!(r.margin > 0.0);
                assert!(u[0].abs() < 1e-9 && (u[u.len() - 1] - 1.0).abs() < 1e-9);
                assert!(u.windows(2).all(|w| w[1] - w[0] >= r.margin - 1e-9));
                for (m, &c) in menus.iter().zip(&choices) {
                    let (a, b) = chosen_pair(m, c);
                    let diff: f64 = a.probs_on_grid(&r.distinct_payoffs).iter().zip(b.probs_on_grid(&r.distinct_payoffs)).zip(u).map(|((x, y), w)| (x - y) * w).sum();
                    assert!(diff >= r.margin - 1e-9);
                }
            }
        }
    }

    #[test]
    fn single_non_dominated_choice_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..300 {
            let m = sample_random_menu(&mut rng, 2, 0.0, 10.0).unwrap();
            for choice in [0u8, 1] {
                let (chosen, other) = chosen_pair(&m, choice);
                let dominated = fosd_compare(other, chosen) == Dominance::ADominates;
                let r = verify_increasing_utility(&[m.clone()], &[choice]).unwrap();
                assert_eq!(r.is_consistent(), !dominated);
            }
        }
    }

    #[test]
    fn dominated_singleton_is_the_failing_subset() {
        let good = Menu::new(lot(&[1.0, 2.0], &[0.5, 0.5]), lot(&[3.0, 4.0], &[0.5, 0.5])).unwrap();
        let bad = Menu::new(lot(&[5.0, 6.0], &[0.5, 0.5]), lot(&[1.0, 2.0], &[0.5, 0.5])).unwrap();
        let check = is_anomaly(&[good.clone(), bad], &[1, 1]).unwrap();
        assert!(!check.anomaly);
        assert_eq!(check.failing_subset, Some(vec![1]));
        let dup = is_anomaly(&[good.clone(), good], &[1, 1]).unwrap();
        assert!(!dup.anomaly && dup.failing_subset.is_none());
    }

    #[test]
    fn invariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let menus: Vec<Menu> = (0..3).map(|_| sample_random_menu(&mut rng, 2, 0.0, 10.0).unwrap()).collect();
            let choices: Vec<u8> = (0..3).map(|_| rand::Rng::gen_range(&mut rng, 0..2u8)).collect();
            let base = verify_increasing_utility(&menus, &choices).unwrap();
            let rev_m: Vec<Menu> = menus.iter().rev().cloned().collect();
            let rev_c: Vec<u8> = choices.iter().rev().copied().collect();
            assert_eq!(verify_increasing_utility(&rev_m, &rev_c).unwrap().status, base.status);
            let sw_m: Vec<Menu> = menus.iter().map(Menu::swapped).collect();
            let sw_c: Vec<u8> = choices.iter().map(|c| 1 - c).collect();
            assert_eq!(verify_increasing_utility(&sw_m, &sw_c).unwrap().status, base.status);
            let scaled: Vec<Menu> = menus
                .iter()
                .map(|m| {
                    let f = |l: &Lottery| lot(&l.payoffs().iter().map(|z| 3.0 * z + 7.0).collect::<Vec<_>>(), l.probs());
                    Menu::new(f(&m.lottery0), f(&m.lottery1)).unwrap()
                })
                .collect();
            assert_eq!(verify_increasing_utility(&scaled, &choices).unwrap().status, base.status);
        }
    }

    #[test]
    fn margin_shrinks_as_menus_are_added_on_a_fixed_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = [1.0, 3.0, 6.0, 9.0];
        let menu = |rng: &mut ChaCha8Rng| {
            let mut probs = || {
                let w: Vec<f64> = (0..4).map(|_| rand::Rng::gen_range(&mut *rng, 0.05..1.0)).collect();
                let s: f64 = w.iter().sum();
                w.into_iter().map(|v| v / s).collect::<Vec<_>>()
            };
            let (p0, p1) = (probs(), probs());
            Menu::new(lot(&z, &p0), lot(&z, &p1)).unwrap()
        };
        for _ in 0..200 {
            let menus: Vec<Menu> = (0..4).map(|_| menu(&mut rng)).collect();
            let choices: Vec<u8> = (0..4).map(|_| rand::Rng::gen_range(&mut rng, 0..2u8)).collect();
            let margins: Vec<f64> = (1..=4)
                .map(|n| verify_increasing_utility(&menus[..n], &choices[..n]).unwrap().margin)
                .collect();
            assert!(margins.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{margins:?}");
        }
    }

    #[test]
    fn implied_choices_and_ties() {
        let m = Menu::new(lot(&[1.0], &[1.0]), lot(&[2.0], &[1.0])).unwrap();
        let c = ExampleCollection::new(
            vec![Example::new(m.clone(), 0.311), Example::new(m.clone(), 0.5), Example::new(m, 0.8)],
            Provenance::default(),
        )
        .unwrap();
        assert_eq!(implied_binary_choices(&c), vec![0, 1, 1]);
    }

    #[test]
    fn parametrized_verdicts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let basis = UtilityBasis::polynomial(6, 0.0, 10.0).unwrap();
        let m = sample_random_menu(&mut rng, 2, 0.0, 10.0).unwrap();
        let single = ExampleCollection::new(vec![Example::new(m, 0.93)], Provenance::default()).unwrap();
        let v = verify_parametrized(&basis, &single, DEFAULT_KL_THRESHOLD, 5, &mut rng).unwrap();
        assert!(!v.inconsistent && v.min_kl < 1e-8);
    }
}
