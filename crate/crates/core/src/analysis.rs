//! Reporting and statistics over generated anomalies: verification rates,
//! a random-sampling baseline, clustering features, K-means, PCA, and
//! estimation of an idiosyncratic choice-error rate from pattern counts.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::categorizer::{categorize, AnomalyCategory};
use crate::error::{Error, Result};
use crate::eut::UtilityBasis;
use crate::lottery::{lottery_stats, sample_random_menu, Example, ExampleCollection, LotteryStats, Menu, Provenance};
use crate::predictor::Predictor;
use crate::run_rng;
use crate::verifier::{is_anomaly_collection, verify_increasing_utility, verify_parametrized, DEFAULT_KL_THRESHOLD};

/// Settings for verifying candidate collections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub basis: UtilityBasis,
    pub kl_threshold: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            basis: UtilityBasis::polynomial(6, 0.0, 10.0).expect("valid default basis"),
            kl_threshold: DEFAULT_KL_THRESHOLD,
            restarts: 5,
            seed: 0,
        }
    }
}

/// A candidate with the outcome of both verifications.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifiedCandidate {
    pub candidate: ExampleCollection,
    pub parametrized_inconsistent: bool,
    pub min_kl: f64,
    pub fit_converged: bool,
    pub any_utility_inconsistent: bool,
    /// Whether the collection is itself minimal among inconsistent subsets.
    pub minimal: bool,
    pub failing_subset: Option<Vec<usize>>,
    pub margin: f64,
    pub witness: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<AnomalyCategory>,
}

impl VerifiedCandidate {
    /// Flagged by at least one of the two verifications.
    pub fn flagged(&self) -> bool {
        self.parametrized_inconsistent || self.any_utility_inconsistent
    }
}

pub fn verify_candidate<R: Rng + ?Sized>(
    candidate: &ExampleCollection,
    cfg: &VerifyConfig,
    rng: &mut R,
) -> Result<VerifiedCandidate> {
    let par = verify_parametrized(&cfg.basis, candidate, cfg.kl_threshold, cfg.restarts, rng)?;
    let check = is_anomaly_collection(candidate)?;
    Ok(VerifiedCandidate {
        candidate: candidate.clone(),
        parametrized_inconsistent: par.inconsistent,
        min_kl: par.min_kl,
        fit_converged: par.converged,
        any_utility_inconsistent: !check.full.is_consistent(),
        minimal: check.anomaly,
        failing_subset: check.failing_subset,
        margin: check.full.margin,
        witness: check.full.witness_utility,
        category: None,
    })
}

/// Verifies candidates in parallel, one generator stream per index.
pub fn verify_candidates(candidates: &[ExampleCollection], cfg: &VerifyConfig) -> Result<Vec<VerifiedCandidate>> {
    candidates
        .par_iter()
        .enumerate()
        .map(|(i, c)| verify_candidate(c, cfg, &mut run_rng(cfg.seed, i as u64)))
        .collect()
}

/// Attaches a category to every flagged two-menu candidate.
pub fn categorize_flagged(verified: &mut [VerifiedCandidate], tol: f64) -> Result<()> {
    for v in verified.iter_mut().filter(|v| v.flagged()) {
        v.category = Some(if v.candidate.len() == 2 {
            categorize(&v.candidate, tol)?
        } else {
            AnomalyCategory::Other
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub runs: usize,
    pub parametrized: usize,
    pub full: usize,
    /// Flagged by either verification.
    pub flagged: usize,
    pub parametrized_rate: f64,
    pub full_rate: f64,
    /// Categories of flagged candidates that carry one.
    pub category_counts: BTreeMap<String, usize>,
}

pub fn logical_verification_report(verified: &[VerifiedCandidate]) -> Result<VerificationReport> {
    if verified.is_empty() {
        return Err(Error::Empty);
    }
    let runs = verified.len();
    let parametrized = verified.iter().filter(|v| v.parametrized_inconsistent).count();
    let full = verified.iter().filter(|v| v.any_utility_inconsistent).count();
    let mut category_counts = BTreeMap::new();
    for c in verified.iter().filter(|v| v.flagged()).filter_map(|v| v.category.as_ref()) {
        *category_counts.entry(c.tag().to_string()).or_insert(0) += 1;
    }
    Ok(VerificationReport {
        runs,
        parametrized,
        full,
        flagged: verified.iter().filter(|v| v.flagged()).count(),
        parametrized_rate: parametrized as f64 / runs as f64,
        full_rate: full as f64 / runs as f64,
        category_counts,
    })
}

/// Verifies random menu pairs labeled by the predictor.
pub fn baseline_random_pairs(
    predictor: &dyn Predictor,
    num_pairs: usize,
    payoffs: usize,
    cfg: &VerifyConfig,
) -> Result<(VerificationReport, Vec<VerifiedCandidate>)> {
    if num_pairs == 0 {
        return Err(Error::invalid("num_pairs must be at least 1"));
    }
    let (low, high) = cfg.basis.domain();
    let mut verified: Vec<VerifiedCandidate> = (0..num_pairs)
        .into_par_iter()
        .map(|i| {
            let mut rng = run_rng(cfg.seed, i as u64);
            let examples = (0..2)
                .map(|_| {
                    let m = sample_random_menu(&mut rng, payoffs, low, high)?;
                    Ok(Example::new(m.clone(), predictor.predict(&m)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let provenance = Provenance {
                procedure: "baseline".into(),
                master_seed: cfg.seed,
                run_index: i as u64,
                iterations: 0,
            };
            verify_candidate(&ExampleCollection::new(examples, provenance)?, cfg, &mut rng)
        })
        .collect::<Result<_>>()?;
    categorize_flagged(&mut verified, crate::categorizer::DEFAULT_TOL)?;
    Ok((logical_verification_report(&verified)?, verified))
}

pub const FEATURE_COUNT: usize = 18;

/// Column names of [`anomaly_features`].
pub fn feature_names() -> Vec<String> {
    ["a", "b"]
        .iter()
        .flat_map(|m| LotteryStats::NAMES.iter().map(move |n| format!("{m}_{n}")))
        .collect()
}

/// Chosen-minus-alternative lottery statistics for each of the two menus.
pub fn anomaly_features(anomaly: &ExampleCollection) -> Result<[f64; FEATURE_COUNT]> {
    if anomaly.len() != 2 {
        return Err(Error::Arity {
            expected: 2,
            got: anomaly.len(),
        });
    }
    let mut out = [0.0; FEATURE_COUNT];
    for (m, e) in anomaly.examples.iter().enumerate() {
        let c = usize::from(e.implied_choice());
        let chosen = lottery_stats(e.menu.lottery(c)).to_array();
        let other = lottery_stats(e.menu.lottery(1 - c)).to_array();
        for k in 0..9 {
            out[m * 9 + k] = chosen[k] - other[k];
        }
    }
    Ok(out)
}

fn check_matrix(x: &[Vec<f64>]) -> Result<usize> {
    let cols = x.first().ok_or(Error::Empty)?.len();
    if let Some(r) = x.iter().find(|r| r.len() != cols) {
        return Err(Error::Dimension {
            expected: cols,
            got: r.len(),
        });
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix"));
    }
    Ok(cols)
}

/// Z-scores each column with the population standard deviation. Constant
/// columns become zeros.
pub fn standardize(x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let cols = check_matrix(x)?;
    let n = x.len() as f64;
    let mut out = x.to_vec();
    for c in 0..cols {
        let mean = x.iter().map(|r| r[c]).sum::<f64>() / n;
        let var = x.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        for r in out.iter_mut() {
            r[c] = if sd > 1e-12 * mean.abs().max(1.0) { (r[c] - mean) / sd } else { 0.0 };
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after each Lloyd iteration of the kept restart.
    pub history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn nearest(row: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .map(|(j, c)| (j, sq_dist(row, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

const KMEANS_MAX_ITER: usize = 300;

fn lloyd(x: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> KMeansResult {
    let cols = x[0].len();
    let mut assignments: Vec<usize> = x.iter().map(|r| nearest(r, &centroids).0).collect();
    let mut history = Vec::new();
    for _ in 0..KMEANS_MAX_ITER {
        let mut sums = vec![vec![0.0; cols]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (r, &a) in x.iter().zip(&assignments) {
            counts[a] += 1;
            sums[a].iter_mut().zip(r).for_each(|(s, v)| *s += v);
        }
        for (j, c) in centroids.iter_mut().enumerate() {
            // An emptied cluster keeps its previous centroid.
            if counts[j] > 0 {
                *c = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        let next: Vec<(usize, f64)> = x.iter().map(|r| nearest(r, &centroids)).collect();
        history.push(next.iter().map(|(_, d)| d).sum());
        let next: Vec<usize> = next.into_iter().map(|(j, _)| j).collect();
        if next == assignments {
            break;
        }
        assignments = next;
    }
    let inertia = *history.last().expect("at least one iteration");
    KMeansResult {
        assignments,
        centroids,
        inertia,
        history,
    }
}

/// Lloyd's algorithm from farthest-point seeds. Each restart draws its first
/// seed row at random; later seeds are the rows farthest from those chosen.
/// The restart with the smallest inertia is kept.
pub fn kmeans(x: &[Vec<f64>], k: usize, seed: u64, restarts: usize) -> Result<KMeansResult> {
    check_matrix(x)?;
    if k == 0 || k > x.len() {
        return Err(Error::invalid(format!("k = {k} must lie in 1..={}", x.len())));
    }
    let mut best: Option<KMeansResult> = None;
    for r in 0..restarts.max(1) {
        let mut rng = run_rng(seed, r as u64);
        let mut centroids = vec![x[rng.gen_range(0..x.len())].clone()];
        while centroids.len() < k {
            let far = x
                .iter()
                .map(|row| nearest(row, &centroids).1)
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, c| if c.1 > b.1 { c } else { b })
                .0;
            centroids.push(x[far].clone());
        }
        let result = lloyd(x, centroids);
        if best.as_ref().map_or(true, |b| result.inertia < b.inertia) {
            best = Some(result);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    /// Unit loading vectors, one per row, by decreasing variance.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    pub explained_ratio: Vec<f64>,
    /// Standardized rows projected on the components.
    pub scores: Vec<Vec<f64>>,
}

impl PcaResult {
    /// The `count` largest-magnitude loadings of a component, largest first.
    pub fn top_loadings(&self, component: usize, count: usize, names: &[String]) -> Vec<(String, f64)> {
        let mut idx: Vec<usize> = (0..self.components[component].len()).collect();
        let c = &self.components[component];
        idx.sort_by(|&a, &b| c[b].abs().total_cmp(&c[a].abs()).then(a.cmp(&b)));
        idx.into_iter()
            .take(count)
            .map(|i| (names.get(i).cloned().unwrap_or_else(|| i.to_string()), c[i]))
            .collect()
    }
}

/// Principal components of the correlation matrix of the standardized data.
/// Each component is signed so its largest-magnitude loading is positive.
pub fn pca(x: &[Vec<f64>]) -> Result<PcaResult> {
    let z = standardize(x)?;
    let (n, p) = (z.len(), z[0].len());
    let m = DMatrix::from_fn(n, p, |r, c| z[r][c]);
    let corr = m.transpose() * &m / n as f64;
    let eig = SymmetricEigen::new(corr);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut components = Vec::with_capacity(p);
    let mut explained_variance = Vec::with_capacity(p);
    for &i in &order {
        let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0, |b: f64, x| if x.abs() > b.abs() { x } else { b });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        explained_variance.push(eig.eigenvalues[i].max(0.0));
    }
    let explained_ratio = explained_variance
        .iter()
        .map(|v| if total > 0.0 { v / total } else { 0.0 })
        .collect();
    let scores = z
        .iter()
        .map(|r| components.iter().map(|c| crate::math::dot(r, c)).collect())
        .collect();
    Ok(PcaResult {
        components,
        explained_variance,
        explained_ratio,
        scores,
    })
}

/// Joint choice patterns over a two-menu anomaly, ordered
/// `(0,0), (0,1), (1,0), (1,1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternFrequencies {
    pub counts: [u64; 4],
    pub total: u64,
}

impl PatternFrequencies {
    pub const PATTERNS: [[u8; 2]; 4] = [[0, 0], [0, 1], [1, 0], [1, 1]];

    pub fn new(counts: [u64; 4]) -> Self {
        Self {
            counts,
            total: counts.iter().sum(),
        }
    }

    pub fn shares(&self) -> [f64; 4] {
        let t = self.total.max(1) as f64;
        self.counts.map(|c| c as f64 / t)
    }
}

/// The joint patterns that some increasing utility rationalizes.
pub fn consistent_patterns(menus: &[Menu; 2]) -> Result<Vec<[u8; 2]>> {
    let mut out = Vec::new();
    for p in PatternFrequencies::PATTERNS {
        if verify_increasing_utility(menus, &p)?.is_consistent() {
            out.push(p);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonFit {
    pub epsilon: f64,
    /// Mixing weights over the consistent patterns, in the order given.
    pub weights: Vec<f64>,
    /// Squared Euclidean distance between observed and model shares.
    pub distance: f64,
}

fn pattern_model(epsilon: f64, consistent: &[[u8; 2]]) -> DMatrix<f64> {
    DMatrix::from_fn(4, consistent.len(), |o, c| {
        let obs = PatternFrequencies::PATTERNS[o];
        (0..2)
            .map(|m| if obs[m] == consistent[c][m] { 1.0 - epsilon } else { epsilon })
            .product()
    })
}

/// Least squares `min ‖A w − q‖²` over the probability simplex by
/// enumerating supports.
fn simplex_least_squares(a: &DMatrix<f64>, q: &DVector<f64>) -> (Vec<f64>, f64) {
    let c = a.ncols();
    let mut best = (vec![1.0 / c as f64; c], f64::INFINITY);
    for mask in 1u32..(1 << c) {
        let support: Vec<usize> = (0..c).filter(|i| mask & (1 << i) != 0).collect();
        let s = support.len();
        // KKT system for the equality-constrained problem on the support.
        let mut kkt = DMatrix::zeros(s + 1, s + 1);
        let mut rhs = DVector::zeros(s + 1);
        for (i, &si) in support.iter().enumerate() {
            for (j, &sj) in support.iter().enumerate() {
                kkt[(i, j)] = 2.0 * a.column(si).dot(&a.column(sj));
            }
            kkt[(i, s)] = 1.0;
            kkt[(s, i)] = 1.0;
            rhs[i] = 2.0 * a.column(si).dot(q);
        }
        rhs[s] = 1.0;
        let Some(sol) = kkt.clone().lu().solve(&rhs) else { continue };
        if sol.iter().take(s).any(|&w| w < -1e-12 || !w.is_finite()) {
            continue;
        }
        let mut w = vec![0.0; c];
        for (i, &si) in support.iter().enumerate() {
            w[si] = sol[i].max(0.0);
        }
        let sum: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= sum);
        let r = a * DVector::from_column_slice(&w) - q;
        let d = r.norm_squared();
        if d < best.1 - 1e-15 {
            best = (w, d);
        }
    }
    best
}

fn epsilon_objective(epsilon: f64, consistent: &[[u8; 2]], q: &DVector<f64>) -> (Vec<f64>, f64) {
    simplex_least_squares(&pattern_model(epsilon, consistent), q)
}

/// Minimum-distance estimate of a symmetric choice-error rate.
///
/// Respondents hold one of the consistent patterns and flip each menu's
/// choice independently with probability ε. ε is searched on a grid of step
/// `1e-3` over `[0, 0.5]`, then refined to `1e-5` around the best point.
///
/// ```
/// use anomgen::analysis::{estimate_epsilon, PatternFrequencies};
/// let freqs = PatternFrequencies::new([45, 5, 5, 45]);
/// let fit = estimate_epsilon(&freqs, &[[0, 0], [1, 1]]).unwrap();
/// assert!((fit.epsilon - 0.0527864).abs() < 1e-4);
/// ```
pub fn estimate_epsilon(freqs: &PatternFrequencies, consistent: &[[u8; 2]]) -> Result<EpsilonFit> {
    if freqs.total == 0 {
        return Err(Error::invalid("pattern counts are all zero"));
    }
    if consistent.is_empty() {
        return Err(Error::invalid("no consistent patterns"));
    }
    let q = DVector::from_column_slice(&freqs.shares());
    let search = |grid: Vec<f64>| -> (f64, Vec<f64>, f64) {
        grid.into_iter()
            .map(|e| {
                let (w, d) = epsilon_objective(e, consistent, &q);
                (e, w, d)
            })
            .fold((0.0, Vec::new(), f64::INFINITY), |b, c| if c.2 < b.2 - 1e-15 { c } else { b })
    };
    let (coarse, _, _) = search((0..=500).map(|i| i as f64 * 1e-3).collect());
    let fine: Vec<f64> = (-100..=100)
        .map(|i| coarse + i as f64 * 1e-5)
        .filter(|e| (0.0..=0.5).contains(e))
        .collect();
    let (epsilon, weights, distance) = search(fine);
    Ok(EpsilonFit {
        epsilon,
        weights,
        distance,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapInterval {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Percentile interval for `statistic` under multinomial resampling of
/// respondents.
pub fn bootstrap_stat<F>(freqs: &PatternFrequencies, statistic: F, reps: usize, level: f64, seed: u64) -> Result<BootstrapInterval>
where
    F: Fn(&PatternFrequencies) -> Result<f64> + Sync,
{
    if reps == 0 {
        return Err(Error::invalid("reps must be at least 1"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid("level must lie in (0, 1)"));
    }
    let point = statistic(freqs)?;
    let mut stats: Vec<f64> = if freqs.counts.iter().filter(|&&c| c > 0).count() <= 1 {
        vec![point; reps]
    } else {
        let dist = WeightedIndex::new(freqs.counts).map_err(|e| Error::invalid(e.to_string()))?;
        (0..reps)
            .into_par_iter()
            .map(|r| {
                let mut rng = run_rng(seed, r as u64);
                let mut counts = [0u64; 4];
                for _ in 0..freqs.total {
                    counts[dist.sample(&mut rng)] += 1;
                }
                statistic(&PatternFrequencies::new(counts))
            })
            .collect::<Result<_>>()?
    };
    stats.sort_by(f64::total_cmp);
    let at = |q: f64| stats[((q * reps as f64).ceil() as usize).clamp(1, reps) - 1];
    let tail = (1.0 - level) / 2.0;
    Ok(BootstrapInterval {
        point,
        lower: at(tail),
        upper: at(1.0 - tail),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cpt::{CptModel, CptParams};
    use crate::lottery::Lottery;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn lot(z: &[f64], p: &[f64]) -> Lottery {
        Lottery::new(z.to_vec(), p.to_vec()).unwrap()
    }

    fn verified(par: bool, full: bool, category: Option<AnomalyCategory>) -> VerifiedCandidate {
        let m = Menu::new(lot(&[1.0, 2.0], &[0.5, 0.5]), lot(&[1.0, 2.0], &[0.4, 0.6])).unwrap();
        VerifiedCandidate {
            candidate: ExampleCollection::new(vec![Example::new(m, 0.7)], Provenance::default()).unwrap(),
            parametrized_inconsistent: par,
            min_kl: 0.0,
            fit_converged: true,
            any_utility_inconsistent: full,
            minimal: false,
            failing_subset: None,
            margin: 0.1,
            witness: None,
            category,
        }
    }

    #[test]
    fn report_rates() {
        assert!(matches!(logical_verification_report(&[]), Err(Error::Empty)));
        let clean = logical_verification_report(&vec![verified(false, false, None); 4]).unwrap();
        assert_eq!((clean.parametrized_rate, clean.full_rate, clean.flagged), (0.0, 0.0, 0));
        let mixed: Vec<_> = (0..10)
            .map(|i| verified(i % 2 == 0, i < 2, (i % 2 == 0).then_some(AnomalyCategory::Other)))
            .collect();
        let r = logical_verification_report(&mixed).unwrap();
        assert_eq!(r.parametrized_rate, 0.5);
        assert_eq!(r.full_rate, 0.2);
        assert_eq!(r.flagged, 6);
        assert_eq!(r.category_counts.values().sum::<usize>(), 5);
    }

    #[test]
    fn baseline_under_risk_neutral_oracle_is_clean_and_deterministic() {
        let neutral = CptModel::new(CptParams::new(1.0, 1.0).unwrap());
        let cfg = VerifyConfig {
            seed: 3,
            ..VerifyConfig::default()
        };
        let (r, v) = baseline_random_pairs(&neutral, 20, 2, &cfg).unwrap();
        assert_eq!(r.full, 0);
        assert_eq!(r.runs, 20);
        let (r2, v2) = baseline_random_pairs(&neutral, 20, 2, &cfg).unwrap();
        assert_eq!((r, v), (r2, v2));
        assert!(baseline_random_pairs(&neutral, 0, 2, &cfg).is_err());
    }

    fn pair(a: Menu, pa: f64, b: Menu, pb: f64) -> ExampleCollection {
        ExampleCollection::new(vec![Example::new(a, pa), Example::new(b, pb)], Provenance::default()).unwrap()
    }

    #[test]
    fn feature_blocks() {
        let l = lot(&[1.0, 3.0], &[0.3, 0.7]);
        let same = Menu::new(l.clone(), l.clone()).unwrap();
        let other = Menu::new(lot(&[2.0, 5.0], &[0.5, 0.5]), l.clone()).unwrap();
        let f = anomaly_features(&pair(same.clone(), 0.8, other.clone(), 0.8)).unwrap();
        assert!(f[..9].iter().all(|&v| v == 0.0));
        let g = anomaly_features(&pair(same, 0.8, other, 0.2)).unwrap();
        for k in 9..18 {
            assert_eq!(f[k], -g[k]);
        }
        // Expected-value block: chosen 2.4 minus alternative 3.5.
        assert!((f[9] - (2.4 - 3.5)).abs() < 1e-12);
        assert_eq!(feature_names().len(), FEATURE_COUNT);
        assert_eq!(feature_names()[9], "b_expected_value");
    }

    #[test]
    fn standardize_handles_constant_columns() {
        let x = vec![vec![1.0, 5.0], vec![2.0, 5.0], vec![3.0, 5.0]];
        let z = standardize(&x).unwrap();
        assert!(z.iter().all(|r| r[1] == 0.0));
        let mean: f64 = z.iter().map(|r| r[0]).sum::<f64>() / 3.0;
        let var: f64 = z.iter().map(|r| r[0] * r[0]).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-15 && (var - 1.0).abs() < 1e-12);
        assert!(standardize(&[]).is_err());
        assert!(standardize(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    fn blobs(seed: u64, per: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = [[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 10.0, 0.0], [0.0, 0.0, 10.0]];
        let mut x = Vec::new();
        let mut labels = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..per {
                x.push(center.iter().map(|m| m + 0.5 * rng.sample::<f64, _>(StandardNormal)).collect());
                labels.push(c);
            }
        }
        (x, labels)
    }

    /// Partitions agree up to relabeling.
    fn same_partition(a: &[usize], b: &[usize]) -> bool {
        (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
    }

    #[test]
    fn kmeans_recovers_separated_blobs() {
        let (x, labels) = blobs(1, 25);
        let r = kmeans(&x, 4, 7, 5).unwrap();
        assert!(same_partition(&r.assignments, &labels));
        assert!(r.history.windows(2).all(|w| w[1] <= w[0] + 1e-9));
        let one = kmeans(&x, 4, 7, 1).unwrap();
        assert!(r.inertia <= one.inertia + 1e-12);
        assert_eq!(kmeans(&x, 4, 7, 5).unwrap(), r);
        assert!(kmeans(&x, 101, 0, 1).is_err());
        assert!(kmeans(&x, 0, 0, 1).is_err());
    }

    #[test]
    fn single_cluster_centroid_is_the_mean() {
        let x = vec![vec![1.0, 2.0], vec![3.0, -2.0], vec![5.0, 3.0]];
        let r = kmeans(&x, 1, 0, 3).unwrap();
        assert!((r.centroids[0][0] - 3.0).abs() < 1e-12 && (r.centroids[0][1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pca_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<Vec<f64>> = (0..60)
            .map(|_| {
                let t: f64 = rng.sample(StandardNormal);
                let u: f64 = rng.sample(StandardNormal);
                vec![t, 2.0 * t + 0.1 * u, u, 7.0]
            })
            .collect();
        let p = pca(&x).unwrap();
        for (i, a) in p.components.iter().enumerate() {
            for (j, b) in p.components.iter().enumerate() {
                let d = crate::math::dot(a, b);
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-10);
            }
            let lead = a.iter().copied().fold(0.0, |m: f64, v| if v.abs() > m.abs() { v } else { m });
            assert!(lead > 0.0);
        }
        for k in 0..4 {
            assert!(p.scores.iter().map(|s| s[k]).sum::<f64>().abs() < 1e-9);
        }
        assert!(p.explained_variance.windows(2).all(|w| w[0] >= w[1]));
        let names: Vec<String> = ["t", "t2", "u", "c"].iter().map(|s| s.to_string()).collect();
        let top = p.top_loadings(0, 2, &names);
        assert_eq!(top.len(), 2);
        assert!(top.iter().all(|(n, _)| n == "t" || n == "t2"));
    }

    #[test]
    fn rank_one_data_has_one_component() {
        let x: Vec<Vec<f64>> = (0..30).map(|i| {
            let t = i as f64 * 0.37 - 4.0;
            vec![t, -3.0 * t + 1.0, 0.5 * t]
        }).collect();
        let p = pca(&x).unwrap();
        assert!(p.explained_ratio[0] >= 0.999);
    }

    #[test]
    fn epsilon_examples() {
        let only_consistent = PatternFrequencies::new([60, 0, 0, 40]);
        let fit = estimate_epsilon(&only_consistent, &[[0, 0], [1, 1]]).unwrap();
        assert_eq!(fit.epsilon, 0.0);
        assert!(fit.distance < 1e-20);
        let allais = PatternFrequencies::new([45, 5, 5, 45]);
        let fit = estimate_epsilon(&allais, &[[0, 0], [1, 1]]).unwrap();
        let closed = (1.0 - (1.0f64 - 4.0 * 0.05).sqrt()) / 2.0;
        assert!((fit.epsilon - closed).abs() < 1e-4, "{}", fit.epsilon);
        assert!(fit.distance < 1e-9);
        assert!((fit.weights[0] - 0.5).abs() < 1e-6);
        assert!(estimate_epsilon(&PatternFrequencies::new([0; 4]), &[[0, 0]]).is_err());
        assert!(estimate_epsilon(&allais, &[]).is_err());
    }

    #[test]
    fn consistent_patterns_of_the_certainty_effect() {
        let a = Menu::new(lot(&[4000.0, 0.0], &[0.8, 0.2]), lot(&[3000.0, 0.0], &[1.0, 0.0])).unwrap();
        let b = Menu::new(lot(&[4000.0, 0.0], &[0.2, 0.8]), lot(&[3000.0, 0.0], &[0.25, 0.75])).unwrap();
        assert_eq!(consistent_patterns(&[a, b]).unwrap(), vec![[0, 0], [1, 1]]);
    }

    /// Respondents with true patterns drawn from `weights` and independent flips.
    fn simulate(weights: &[(usize, f64)], epsilon: f64, n: usize, seed: u64) -> PatternFrequencies {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = WeightedIndex::new(weights.iter().map(|w| w.1)).unwrap();
        let mut counts = [0u64; 4];
        for _ in 0..n {
            let truth = PatternFrequencies::PATTERNS[weights[dist.sample(&mut rng)].0];
            let obs: Vec<u8> = truth.iter().map(|&c| if rng.gen::<f64>() < epsilon { 1 - c } else { c }).collect();
            counts[usize::from(obs[0]) * 2 + usize::from(obs[1])] += 1;
        }
        PatternFrequencies::new(counts)
    }

    #[test]
    fn epsilon_recovered_from_simulated_respondents() {
        for seed in 0..5 {
            let freqs = simulate(&[(0, 0.6), (3, 0.4)], 0.05, 5000, seed);
            let fit = estimate_epsilon(&freqs, &[[0, 0], [1, 1]]).unwrap();
            assert!((fit.epsilon - 0.05).abs() <= 0.005, "{}", fit.epsilon);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn epsilon_optimum_beats_the_endpoints(
            counts in proptest::array::uniform4(0u64..200),
            mask in 1usize..16,
        ) {
            prop_assume!(counts.iter().sum::<u64>() > 0);
            let consistent: Vec<[u8; 2]> = (0..4).filter(|i| mask & (1 << i) != 0).map(|i| PatternFrequencies::PATTERNS[i]).collect();
            let freqs = PatternFrequencies::new(counts);
            let fit = estimate_epsilon(&freqs, &consistent).unwrap();
            let q = DVector::from_column_slice(&freqs.shares());
            prop_assert!((0.0..=0.5).contains(&fit.epsilon));
            prop_assert!(fit.distance <= epsilon_objective(0.0, &consistent, &q).1 + 1e-12);
            prop_assert!(fit.distance <= epsilon_objective(0.5, &consistent, &q).1 + 1e-12);
            prop_assert!((fit.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    fn violation_share(f: &PatternFrequencies) -> Result<f64> {
        Ok(f.shares()[1] + f.shares()[2])
    }

    #[test]
    fn bootstrap_degenerate_and_deterministic() {
        let degenerate = PatternFrequencies::new([0, 0, 0, 50]);
        let b = bootstrap_stat(&degenerate, violation_share, 100, 0.95, 1).unwrap();
        assert_eq!((b.lower, b.upper), (b.point, b.point));
        let f = PatternFrequencies::new([40, 10, 5, 45]);
        let a = bootstrap_stat(&f, violation_share, 200, 0.95, 9).unwrap();
        assert_eq!(a, bootstrap_stat(&f, violation_share, 200, 0.95, 9).unwrap());
        assert!(a.lower <= a.point && a.point <= a.upper);
        assert!(bootstrap_stat(&f, violation_share, 0, 0.95, 9).is_err());
    }

    #[test]
    fn bootstrap_interval_coverage() {
        // True violation share is 0.2 under these pattern probabilities.
        let probs = [0.45, 0.12, 0.08, 0.35];
        let dist = WeightedIndex::new(probs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let trials = 200;
        let mut covered = 0;
        for t in 0..trials {
            let mut counts = [0u64; 4];
            for _ in 0..400 {
                counts[dist.sample(&mut rng)] += 1;
            }
            let b = bootstrap_stat(&PatternFrequencies::new(counts), violation_share, 300, 0.95, t).unwrap();
            if b.lower <= 0.2 && 0.2 <= b.upper {
                covered += 1;
            }
        }
        let rate = covered as f64 / trials as f64;
        // Binomial sd at 200 trials is about 0.015.
        assert!((0.90..=0.99).contains(&rate), "{rate}");
    }
}
