//! Categorization of verified anomalies by the expected-utility violation
//! they exhibit, with certificates that can be rechecked from raw menus.
//!
//! Two-payoff anomalies are tested for a dominated choice first and then for
//! three compounding patterns. Each pattern writes one menu's lotteries as
//! mixtures of the other menu's lotteries with a degenerate lottery at an
//! extreme payoff:
//!
//! | pattern | anchor for ℓ₀ | anchor for ℓ₁ | extra conditions |
//! |---|---|---|---|
//! | dominated consequence | min | min | z̲₀ < z̲₁, α₁ ≥ α₀ |
//! | reverse dominated consequence | max | max | z̄₁ > z̄₀, α₀ ≥ α₁ |
//! | strict dominance | min | max | none |
//!
//! In every pattern ℓ₁ is chosen from the base menu and ℓ′₀ from the
//! compound menu. Patterns are tried in table order and the first match wins.
//!
//! Three-payoff anomalies are tested for a shared-component reversal: both
//! lottery families are mixtures of the same two components, and the mixing
//! weight on a dominating component moves against the choice switch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lottery::{fosd_compare_tol, merged_payoff_grid, Dominance, ExampleCollection, Lottery, Menu};

/// Matching tolerance for raw optimizer output.
pub const DEFAULT_TOL: f64 = 1e-6;
/// Matching tolerance for menus with probabilities rounded to whole percentages.
pub const TABLE_TOL: f64 = 0.02;

/// Which menu's implied choice is dominated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FosdCertificate {
    pub menu: usize,
    pub chosen: usize,
    pub tol: f64,
}

/// Labeling and mixing weights for a two-payoff compounding pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixCertificate {
    pub base_menu: usize,
    pub compound_menu: usize,
    /// Index within the base menu of ℓ₀ and ℓ₁.
    pub base_lotteries: [usize; 2],
    /// Index within the compound menu of ℓ′₀ and ℓ′₁.
    pub compound_lotteries: [usize; 2],
    pub anchors: [f64; 2],
    pub alphas: [f64; 2],
    /// Equal mixing weights under the dominated-consequence pattern.
    pub common_ratio: bool,
    pub tol: f64,
}

/// `ℓ_A = α_A·comp1 + (1−α_A)·comp2` and `ℓ_B = α_B·comp1 + (1−α_B)·comp2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharedDecomposition {
    pub comp1: Lottery,
    pub comp2: Lottery,
    pub alpha_a: f64,
    pub alpha_b: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharedComponentCertificate {
    /// `pairing[f]` is the lottery of the second menu in family `f`.
    pub pairing: [usize; 2],
    pub families: [SharedDecomposition; 2],
    pub dominating_family: usize,
    pub tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "snake_case")]
pub enum AnomalyCategory {
    Fosd(FosdCertificate),
    DominatedConsequence(MixCertificate),
    ReverseDominatedConsequence(MixCertificate),
    StrictDominance(MixCertificate),
    SharedComponentReversal(SharedComponentCertificate),
    Other,
}

impl AnomalyCategory {
    pub fn tag(&self) -> &'static str {
        match self {
            Self::Fosd(_) => "fosd",
            Self::DominatedConsequence(_) => "dominated_consequence",
            Self::ReverseDominatedConsequence(_) => "reverse_dominated_consequence",
            Self::StrictDominance(_) => "strict_dominance",
            Self::SharedComponentReversal(_) => "shared_component_reversal",
            Self::Other => "other",
        }
    }

    /// Every tag, in reporting order.
    pub const TAGS: [&'static str; 6] = [
        "fosd",
        "dominated_consequence",
        "reverse_dominated_consequence",
        "strict_dominance",
        "shared_component_reversal",
        "other",
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum MixPattern {
    Dominated,
    ReverseDominated,
    Strict,
}

impl MixPattern {
    const ALL: [MixPattern; 3] = [Self::Dominated, Self::ReverseDominated, Self::Strict];

    fn anchors(self, l0: &Lottery, l1: &Lottery) -> [f64; 2] {
        match self {
            Self::Dominated => [l0.min_payoff(), l1.min_payoff()],
            Self::ReverseDominated => [l0.max_payoff(), l1.max_payoff()],
            Self::Strict => [l0.min_payoff(), l1.max_payoff()],
        }
    }

    fn conditions_hold(self, l0: &Lottery, l1: &Lottery, alphas: [f64; 2], tol: f64) -> bool {
        match self {
            Self::Dominated => l1.min_payoff() - l0.min_payoff() > tol && alphas[1] >= alphas[0] - tol,
            Self::ReverseDominated => l1.max_payoff() - l0.max_payoff() > tol && alphas[0] >= alphas[1] - tol,
            Self::Strict => true,
        }
    }

    fn wrap(self, cert: MixCertificate) -> AnomalyCategory {
        match self {
            Self::Dominated => AnomalyCategory::DominatedConsequence(cert),
            Self::ReverseDominated => AnomalyCategory::ReverseDominatedConsequence(cert),
            Self::Strict => AnomalyCategory::StrictDominance(cert),
        }
    }
}

fn near(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// Solves `candidate = α·base + (1−α)·δ(anchor)` for α in [0, 1].
///
/// Payoffs are matched within `tol`, as are the implied probabilities.
/// Returns `None` when the lotteries have different supports, the anchor is
/// not a payoff of `base`, or no single α reproduces every probability.
///
/// ```
/// use anomgen::categorizer::solve_degenerate_mix;
/// use anomgen::Lottery;
/// let base = Lottery::new(vec![1.0, 3.0], vec![0.2, 0.8]).unwrap();
/// let mixed = Lottery::new(vec![1.0, 3.0], vec![0.6, 0.4]).unwrap();
/// assert!((solve_degenerate_mix(&base, &mixed, 1.0, 1e-9).unwrap() - 0.5).abs() < 1e-12);
/// assert_eq!(solve_degenerate_mix(&base, &mixed, 3.0, 1e-9), None);
/// ```
pub fn solve_degenerate_mix(base: &Lottery, candidate: &Lottery, anchor: f64, tol: f64) -> Option<f64> {
    let covered = |from: &Lottery, into: &Lottery| from.payoffs().iter().all(|z| into.payoffs().iter().any(|w| near(*z, *w, tol)));
    if !covered(base, candidate) || !covered(candidate, base) {
        return None;
    }
    if !base.payoffs().iter().any(|z| near(*z, anchor, tol)) {
        return None;
    }
    let grid: Vec<f64> = merged_payoff_grid([base])
        .into_iter()
        .filter(|z| !near(*z, anchor, tol))
        .collect();
    let mass = |l: &Lottery, z: f64| -> f64 {
        l.payoffs()
            .iter()
            .zip(l.probs())
            .filter(|(w, _)| near(**w, z, tol))
            .map(|(_, p)| p)
            .sum()
    };
    let base_mass: Vec<f64> = grid.iter().map(|&z| mass(base, z)).collect();
    let cand_mass: Vec<f64> = grid.iter().map(|&z| mass(candidate, z)).collect();
    let (bp, cp): (f64, f64) = (base_mass.iter().sum(), cand_mass.iter().sum());
    if bp <= tol {
        return (cp <= tol).then_some(1.0);
    }
    let alpha = cp / bp;
    if alpha > 1.0 + tol {
        return None;
    }
    let alpha = alpha.clamp(0.0, 1.0);
    base_mass
        .iter()
        .zip(&cand_mass)
        .all(|(b, c)| near(*c, alpha * b, tol))
        .then_some(alpha)
}

fn expect_pair(anomaly: &ExampleCollection) -> Result<()> {
    if anomaly.len() != 2 {
        return Err(Error::Arity {
            expected: 2,
            got: anomaly.len(),
        });
    }
    Ok(())
}

fn chosen(anomaly: &ExampleCollection, menu: usize) -> usize {
    usize::from(anomaly.examples[menu].implied_choice())
}

fn menu(anomaly: &ExampleCollection, index: usize) -> &Menu {
    &anomaly.examples[index].menu
}

/// The first menu whose implied choice is strictly dominated.
fn find_fosd(anomaly: &ExampleCollection, tol: f64) -> Option<AnomalyCategory> {
    (0..anomaly.len()).find_map(|m| {
        let c = chosen(anomaly, m);
        let (mine, other) = (menu(anomaly, m).lottery(c), menu(anomaly, m).lottery(1 - c));
        (fosd_compare_tol(other, mine, tol) == Dominance::ADominates).then(|| {
            AnomalyCategory::Fosd(FosdCertificate {
                menu: m,
                chosen: c,
                tol,
            })
        })
    })
}

fn try_labeling(
    anomaly: &ExampleCollection,
    pattern: MixPattern,
    (base_menu, i, k): (usize, usize, usize),
    tol: f64,
) -> Option<MixCertificate> {
    let compound_menu = 1 - base_menu;
    let base = menu(anomaly, base_menu);
    let compound = menu(anomaly, compound_menu);
    let base_lotteries = [i, 1 - i];
    let compound_lotteries = [k, 1 - k];
    if chosen(anomaly, base_menu) != base_lotteries[1] || chosen(anomaly, compound_menu) != compound_lotteries[0] {
        return None;
    }
    let (l0, l1) = (base.lottery(base_lotteries[0]), base.lottery(base_lotteries[1]));
    let anchors = pattern.anchors(l0, l1);
    let a0 = solve_degenerate_mix(l0, compound.lottery(compound_lotteries[0]), anchors[0], tol)?;
    let a1 = solve_degenerate_mix(l1, compound.lottery(compound_lotteries[1]), anchors[1], tol)?;
    let alphas = [a0, a1];
    if !pattern.conditions_hold(l0, l1, alphas, tol) {
        return None;
    }
    Some(MixCertificate {
        base_menu,
        compound_menu,
        base_lotteries,
        compound_lotteries,
        anchors,
        alphas,
        common_ratio: pattern == MixPattern::Dominated && near(a0, a1, tol),
        tol,
    })
}

/// Categorizes a two-menu anomaly over two-payoff lotteries.
pub fn categorize_two_payoff(anomaly: &ExampleCollection, tol: f64) -> Result<AnomalyCategory> {
    expect_pair(anomaly)?;
    if let Some(c) = find_fosd(anomaly, tol) {
        return Ok(c);
    }
    for pattern in MixPattern::ALL {
        for base_menu in 0..2 {
            for i in 0..2 {
                for k in 0..2 {
                    if let Some(cert) = try_labeling(anomaly, pattern, (base_menu, i, k), tol) {
                        return Ok(pattern.wrap(cert));
                    }
                }
            }
        }
    }
    Ok(AnomalyCategory::Other)
}

fn support_lottery(grid: &[f64], probs: &[f64]) -> Option<Lottery> {
    let (z, p): (Vec<f64>, Vec<f64>) = grid.iter().zip(probs).filter(|(_, &p)| p > 0.0).map(|(z, p)| (*z, *p)).unzip();
    Lottery::new(z, p).ok()
}

/// Writes two lotteries over at most three merged payoffs as mixtures of the
/// same two components, each supported on at most two payoffs.
///
/// The components are the points where the line through both lotteries
/// leaves the probability simplex. `comp1` is the component that dominates
/// the other, or the one with the higher expected value when neither does.
pub fn decompose_shared_components(a: &Lottery, b: &Lottery, tol: f64) -> Option<SharedDecomposition> {
    let grid = merged_payoff_grid([a, b]);
    if grid.len() > 3 {
        return None;
    }
    let pa = a.probs_on_grid(&grid);
    let pb = b.probs_on_grid(&grid);
    let d: Vec<f64> = pb.iter().zip(&pa).map(|(x, y)| x - y).collect();
    if d.iter().all(|v| v.abs() <= tol) {
        let comp = support_lottery(&grid, &pa)?;
        return Some(SharedDecomposition {
            comp1: comp.clone(),
            comp2: comp,
            alpha_a: 1.0,
            alpha_b: 1.0,
        });
    }
    // a + t·d stays in the simplex for t in [lo, hi], with lo ≤ 0 < 1 ≤ hi.
    let (mut lo, mut lo_at, mut hi, mut hi_at) = (f64::NEG_INFINITY, 0, f64::INFINITY, 0);
    for (i, (&p, &di)) in pa.iter().zip(&d).enumerate() {
        if di > 0.0 && -p / di > lo {
            (lo, lo_at) = (-p / di, i);
        } else if di < 0.0 && -p / di < hi {
            (hi, hi_at) = (-p / di, i);
        }
    }
    let endpoint = |t: f64, zero: usize| -> Vec<f64> {
        let mut v: Vec<f64> = pa.iter().zip(&d).map(|(p, di)| (p + t * di).max(0.0)).collect();
        v[zero] = 0.0;
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
        v
    };
    let mut comp1 = support_lottery(&grid, &endpoint(lo, lo_at))?;
    let mut comp2 = support_lottery(&grid, &endpoint(hi, hi_at))?;
    let mut alpha_a = hi / (hi - lo);
    let mut alpha_b = (hi - 1.0) / (hi - lo);
    let swap = match fosd_compare_tol(&comp1, &comp2, tol) {
        Dominance::ADominates => false,
        Dominance::BDominates => true,
        _ => comp2.expected_value() > comp1.expected_value(),
    };
    if swap {
        std::mem::swap(&mut comp1, &mut comp2);
        (alpha_a, alpha_b) = (1.0 - alpha_a, 1.0 - alpha_b);
    }
    Some(SharedDecomposition {
        comp1,
        comp2,
        alpha_a,
        alpha_b,
    })
}

/// Whether the choice moves against the change in weight on the dominating
/// component of family `f`.
fn is_reversal(anomaly: &ExampleCollection, pairing: [usize; 2], f: usize, dec: &SharedDecomposition, tol: f64) -> bool {
    let delta = dec.alpha_b - dec.alpha_a;
    let chose_f_in_a = chosen(anomaly, 0) == f;
    let chose_f_in_b = chosen(anomaly, 1) == pairing[f];
    (delta > tol && chose_f_in_a && !chose_f_in_b) || (delta < -tol && !chose_f_in_a && chose_f_in_b)
}

/// Categorizes a two-menu anomaly over three-payoff lotteries.
pub fn categorize_three_payoff(anomaly: &ExampleCollection, tol: f64) -> Result<AnomalyCategory> {
    expect_pair(anomaly)?;
    if let Some(c) = find_fosd(anomaly, tol) {
        return Ok(c);
    }
    let (ma, mb) = (menu(anomaly, 0), menu(anomaly, 1));
    for pairing in [[0, 1], [1, 0]] {
        let decs: Option<Vec<SharedDecomposition>> = (0..2)
            .map(|f| decompose_shared_components(ma.lottery(f), mb.lottery(pairing[f]), tol))
            .collect();
        let Some(decs) = decs else { continue };
        for (f, dec) in decs.iter().enumerate() {
            let ordered = fosd_compare_tol(&dec.comp1, &dec.comp2, tol) == Dominance::ADominates;
            if ordered && is_reversal(anomaly, pairing, f, dec, tol) {
                let families = [decs[0].clone(), decs[1].clone()];
                return Ok(AnomalyCategory::SharedComponentReversal(SharedComponentCertificate {
                    pairing,
                    families,
                    dominating_family: f,
                    tol,
                }));
            }
        }
    }
    Ok(AnomalyCategory::Other)
}

/// Dispatches on the payoff count of the anomaly's menus.
pub fn categorize(anomaly: &ExampleCollection, tol: f64) -> Result<AnomalyCategory> {
    expect_pair(anomaly)?;
    let counts = [menu(anomaly, 0).payoff_count(), menu(anomaly, 1).payoff_count()];
    match counts {
        [2, 2] => categorize_two_payoff(anomaly, tol),
        [3, 3] => categorize_three_payoff(anomaly, tol),
        _ => Ok(find_fosd(anomaly, tol).unwrap_or(AnomalyCategory::Other)),
    }
}

fn is_permutation(ix: [usize; 2]) -> bool {
    ix == [0, 1] || ix == [1, 0]
}

fn check_mix(pattern: MixPattern, cert: &MixCertificate, anomaly: &ExampleCollection) -> bool {
    let tol = cert.tol;
    if cert.base_menu > 1 || cert.compound_menu != 1 - cert.base_menu {
        return false;
    }
    if !is_permutation(cert.base_lotteries) || !is_permutation(cert.compound_lotteries) {
        return false;
    }
    if chosen(anomaly, cert.base_menu) != cert.base_lotteries[1]
        || chosen(anomaly, cert.compound_menu) != cert.compound_lotteries[0]
    {
        return false;
    }
    let base = menu(anomaly, cert.base_menu);
    let compound = menu(anomaly, cert.compound_menu);
    let (l0, l1) = (base.lottery(cert.base_lotteries[0]), base.lottery(cert.base_lotteries[1]));
    let expected = pattern.anchors(l0, l1);
    if !near(expected[0], cert.anchors[0], tol) || !near(expected[1], cert.anchors[1], tol) {
        return false;
    }
    for j in 0..2 {
        let l = base.lottery(cert.base_lotteries[j]);
        let c = compound.lottery(cert.compound_lotteries[j]);
        match solve_degenerate_mix(l, c, cert.anchors[j], tol) {
            Some(a) if near(a, cert.alphas[j], tol) => {}
            _ => return false,
        }
    }
    let ratio = pattern == MixPattern::Dominated && near(cert.alphas[0], cert.alphas[1], tol);
    pattern.conditions_hold(l0, l1, cert.alphas, tol) && cert.common_ratio == ratio
}

fn reproduces(dec: &SharedDecomposition, a: &Lottery, b: &Lottery, tol: f64) -> bool {
    let grid = merged_payoff_grid([a, b, &dec.comp1, &dec.comp2]);
    if grid.len() > 3 || dec.comp1.len() > 2 || dec.comp2.len() > 2 {
        return false;
    }
    let in_unit = |x: f64| (-tol..=1.0 + tol).contains(&x);
    if !in_unit(dec.alpha_a) || !in_unit(dec.alpha_b) {
        return false;
    }
    let c1 = dec.comp1.probs_on_grid(&grid);
    let c2 = dec.comp2.probs_on_grid(&grid);
    [(a, dec.alpha_a), (b, dec.alpha_b)].iter().all(|(l, alpha)| {
        l.probs_on_grid(&grid)
            .iter()
            .enumerate()
            .all(|(i, p)| near(*p, alpha * c1[i] + (1.0 - alpha) * c2[i], tol))
    })
}

fn check_shared(cert: &SharedComponentCertificate, anomaly: &ExampleCollection) -> bool {
    let tol = cert.tol;
    if !is_permutation(cert.pairing) || cert.dominating_family > 1 {
        return false;
    }
    let (ma, mb) = (menu(anomaly, 0), menu(anomaly, 1));
    let all_reproduce = (0..2).all(|f| reproduces(&cert.families[f], ma.lottery(f), mb.lottery(cert.pairing[f]), tol));
    let f = cert.dominating_family;
    let dec = &cert.families[f];
    all_reproduce
        && fosd_compare_tol(&dec.comp1, &dec.comp2, tol) == Dominance::ADominates
        && is_reversal(anomaly, cert.pairing, f, dec, tol)
}

/// Re-derives every condition in the certificate from the raw menus.
///
/// Fails with [`Error::MissingCertificate`] for [`AnomalyCategory::Other`].
pub fn check_certificate(category: &AnomalyCategory, anomaly: &ExampleCollection) -> Result<bool> {
    expect_pair(anomaly)?;
    Ok(match category {
        AnomalyCategory::Fosd(c) => {
            c.menu < 2
                && c.chosen < 2
                && chosen(anomaly, c.menu) == c.chosen
                && fosd_compare_tol(menu(anomaly, c.menu).lottery(1 - c.chosen), menu(anomaly, c.menu).lottery(c.chosen), c.tol)
                    == Dominance::ADominates
        }
        AnomalyCategory::DominatedConsequence(c) => check_mix(MixPattern::Dominated, c, anomaly),
        AnomalyCategory::ReverseDominatedConsequence(c) => check_mix(MixPattern::ReverseDominated, c, anomaly),
        AnomalyCategory::StrictDominance(c) => check_mix(MixPattern::Strict, c, anomaly),
        AnomalyCategory::SharedComponentReversal(c) => check_shared(c, anomaly),
        AnomalyCategory::Other => return Err(Error::MissingCertificate("other")),
    })
}
