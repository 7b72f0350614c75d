//! Lotteries, menus of two lotteries, and the flattened feature layout.
//!
//! Every optimizer in the crate works on a menu's flattened feature vector
//! `(z_0, p_0, z_1, p_1)`: the payoffs of lottery 0, its probabilities, then
//! the same for lottery 1. [`MenuLayout`] owns that indexing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Payoffs closer than this are treated as the same consequence.
pub const PAYOFF_MERGE_TOL: f64 = 1e-9;

const SUM_TOL: f64 = 1e-6;
const NEG_TOL: f64 = 1e-9;

/// A finite-support money lottery.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Lottery {
    payoffs: Vec<f64>,
    probs: Vec<f64>,
}

#[derive(Deserialize)]
struct RawLottery {
    payoffs: Vec<f64>,
    probs: Vec<f64>,
}

impl<'de> Deserialize<'de> for Lottery {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawLottery::deserialize(d)?;
        Lottery::new(raw.payoffs, raw.probs).map_err(serde::de::Error::custom)
    }
}

impl Lottery {
    /// Builds a lottery, renormalizing probabilities that sum to one within `1e-6`.
    ///
    /// ```
    /// use anomgen::Lottery;
    /// let l = Lottery::new(vec![4000.0, 0.0], vec![0.8, 0.2]).unwrap();
    /// assert_eq!(l.len(), 2);
    /// assert!(Lottery::new(vec![1.0, 2.0], vec![0.5, 0.6]).is_err());
    /// ```
    pub fn new(payoffs: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if payoffs.len() != probs.len() {
            return Err(Error::LengthMismatch {
                payoffs: payoffs.len(),
                probs: probs.len(),
            });
        }
        if payoffs.is_empty() {
            return Err(Error::Empty);
        }
        if payoffs.iter().any(|z| !z.is_finite()) {
            return Err(Error::NonFinite("payoffs"));
        }
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("probabilities"));
        }
        if let Some(&p) = probs.iter().find(|&&p| p < -NEG_TOL) {
            return Err(Error::NegativeProbability(p));
        }
        let mut probs: Vec<f64> = probs.into_iter().map(|p| p.max(0.0)).collect();
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(Error::NotNormalized(sum));
        }
        if sum != 1.0 {
            probs.iter_mut().for_each(|p| *p /= sum);
        }
        Ok(Self { payoffs, probs })
    }

    /// The lottery paying `z` with certainty.
    pub fn degenerate(z: f64) -> Result<Self> {
        Self::new(vec![z], vec![1.0])
    }

    pub fn payoffs(&self) -> &[f64] {
        &self.payoffs
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.payoffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payoffs.is_empty()
    }

    pub fn expected_value(&self) -> f64 {
        self.payoffs.iter().zip(&self.probs).map(|(z, p)| z * p).sum()
    }

    /// Smallest listed payoff, including payoffs carrying zero probability.
    pub fn min_payoff(&self) -> f64 {
        self.payoffs.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Largest listed payoff, including payoffs carrying zero probability.
    pub fn max_payoff(&self) -> f64 {
        self.payoffs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Probability mass at `z` (payoffs within [`PAYOFF_MERGE_TOL`] are pooled).
    pub fn mass_at(&self, z: f64) -> f64 {
        self.payoffs
            .iter()
            .zip(&self.probs)
            .filter(|(&w, _)| (w - z).abs() <= PAYOFF_MERGE_TOL)
            .map(|(_, p)| p)
            .sum()
    }

    /// Probability of receiving at most `t`.
    pub fn cdf(&self, t: f64) -> f64 {
        self.payoffs
            .iter()
            .zip(&self.probs)
            .filter(|(&z, _)| z <= t + PAYOFF_MERGE_TOL)
            .map(|(_, p)| p)
            .sum()
    }

    /// Probabilities re-expressed over a sorted, merged payoff grid.
    pub fn probs_on_grid(&self, grid: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; grid.len()];
        for (&z, &p) in self.payoffs.iter().zip(&self.probs) {
            if let Some(i) = grid.iter().position(|&g| (g - z).abs() <= PAYOFF_MERGE_TOL) {
                out[i] += p;
            }
        }
        out
    }
}

/// Sorted distinct payoffs of the given lotteries, merging values within
/// [`PAYOFF_MERGE_TOL`].
pub fn merged_payoff_grid<'a>(lotteries: impl IntoIterator<Item = &'a Lottery>) -> Vec<f64> {
    let mut all: Vec<f64> = lotteries
        .into_iter()
        .flat_map(|l| l.payoffs.iter().copied())
        .collect();
    all.sort_by(f64::total_cmp);
    let mut grid: Vec<f64> = Vec::with_capacity(all.len());
    for z in all {
        match grid.last() {
            Some(&last) if z - last <= PAYOFF_MERGE_TOL => {}
            _ => grid.push(z),
        }
    }
    grid
}

/// A choice between lottery 0 and lottery 1 over the same number of payoffs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Menu {
    pub lottery0: Lottery,
    pub lottery1: Lottery,
}

#[derive(Deserialize)]
struct RawMenu {
    lottery0: Lottery,
    lottery1: Lottery,
}

impl<'de> Deserialize<'de> for Menu {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawMenu::deserialize(d)?;
        Menu::new(raw.lottery0, raw.lottery1).map_err(serde::de::Error::custom)
    }
}

impl Menu {
    pub fn new(lottery0: Lottery, lottery1: Lottery) -> Result<Self> {
        if lottery0.len() != lottery1.len() {
            return Err(Error::MenuShape(lottery0.len(), lottery1.len()));
        }
        Ok(Self { lottery0, lottery1 })
    }

    /// Payoffs per lottery.
    pub fn payoff_count(&self) -> usize {
        self.lottery0.len()
    }

    pub fn layout(&self) -> MenuLayout {
        MenuLayout::new(self.payoff_count())
    }

    pub fn lottery(&self, index: usize) -> &Lottery {
        match index {
            0 => &self.lottery0,
            _ => &self.lottery1,
        }
    }

    /// The same menu with lottery labels exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            lottery0: self.lottery1.clone(),
            lottery1: self.lottery0.clone(),
        }
    }

    /// Flattened features in `(z_0, p_0, z_1, p_1)` order.
    pub fn to_features(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(4 * self.payoff_count());
        for l in [&self.lottery0, &self.lottery1] {
            x.extend_from_slice(&l.payoffs);
            x.extend_from_slice(&l.probs);
        }
        x
    }

    /// Rebuilds a menu from flattened features; probabilities must already
    /// lie on the simplex within `1e-6`.
    pub fn from_features(j: usize, x: &[f64]) -> Result<Self> {
        let layout = MenuLayout::new(j);
        if x.len() != layout.dim() {
            return Err(Error::Dimension {
                expected: layout.dim(),
                got: x.len(),
            });
        }
        let lottery = |l: usize| {
            Lottery::new(
                x[layout.payoff_range(l)].to_vec(),
                x[layout.prob_range(l)].to_vec(),
            )
        };
        Menu::new(lottery(0)?, lottery(1)?)
    }
}

/// Index arithmetic for the flattened `(z_0, p_0, z_1, p_1)` feature vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MenuLayout {
    pub j: usize,
}

impl MenuLayout {
    pub fn new(j: usize) -> Self {
        Self { j }
    }

    pub fn dim(&self) -> usize {
        4 * self.j
    }

    pub fn payoff(&self, lottery: usize, k: usize) -> usize {
        lottery * 2 * self.j + k
    }

    pub fn prob(&self, lottery: usize, k: usize) -> usize {
        lottery * 2 * self.j + self.j + k
    }

    pub fn payoff_range(&self, lottery: usize) -> std::ops::Range<usize> {
        let start = self.payoff(lottery, 0);
        start..start + self.j
    }

    pub fn prob_range(&self, lottery: usize) -> std::ops::Range<usize> {
        let start = self.prob(lottery, 0);
        start..start + self.j
    }

    pub fn is_prob(&self, index: usize) -> bool {
        (index % (2 * self.j)) >= self.j
    }

    /// Copy of `x` with probabilities clamped into `[lo, 1 - lo]`.
    pub fn clamp_probs(&self, x: &[f64], lo: f64) -> Vec<f64> {
        let mut out = x.to_vec();
        for l in 0..2 {
            for i in self.prob_range(l) {
                out[i] = out[i].clamp(lo, 1.0 - lo);
            }
        }
        out
    }

    /// Projects each probability block of `x` onto the simplex in place.
    pub fn project_probs(&self, x: &mut [f64]) {
        for l in 0..2 {
            let r = self.prob_range(l);
            let projected = project_to_simplex(&x[r.clone()]).expect("non-empty block");
            x[r].copy_from_slice(&projected);
        }
    }

    /// Projects `v` onto the tangent space of the two probability simplices:
    /// payoff coordinates are zeroed and each probability block is centered.
    pub fn tangent_probs(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for l in 0..2 {
            let r = self.prob_range(l);
            let mean = v[r.clone()].iter().sum::<f64>() / self.j as f64;
            for i in r {
                out[i] = v[i] - mean;
            }
        }
        out
    }
}

/// Euclidean projection onto the probability simplex.
///
/// Vectors already on the simplex (nonnegative, summing to one within
/// `1e-12`) are returned unchanged, which makes the projection idempotent.
///
/// ```
/// use anomgen::lottery::project_to_simplex;
/// assert_eq!(project_to_simplex(&[1.5, -0.5]).unwrap(), vec![1.0, 0.0]);
/// ```
pub fn project_to_simplex(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Empty);
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("simplex projection input"));
    }
    let sum: f64 = v.iter().sum();
    if v.iter().all(|&x| x >= 0.0) && (sum - 1.0).abs() <= 1e-12 {
        return Ok(v.to_vec());
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut threshold = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let t = (cumulative - 1.0) / (i + 1) as f64;
        if u - t > 0.0 {
            threshold = t;
        }
    }
    let mut out: Vec<f64> = v.iter().map(|&x| (x - threshold).max(0.0)).collect();
    // Remove residual rounding so the block sums to one.
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= total);
    Ok(out)
}

/// Draws a menu with i.i.d. uniform payoffs on `[low, high]` and, for each
/// lottery, i.i.d. uniform(0, 1) weights normalized to the simplex.
pub fn sample_random_menu<R: Rng + ?Sized>(rng: &mut R, j: usize, low: f64, high: f64) -> Result<Menu> {
    if !(low < high) || !low.is_finite() || !high.is_finite() {
        return Err(Error::InvalidRange { low, high });
    }
    if j == 0 {
        return Err(Error::invalid("a lottery needs at least one payoff"));
    }
    let lottery = |rng: &mut R| {
        let payoffs: Vec<f64> = (0..j).map(|_| rng.gen_range(low..=high)).collect();
        let raw: Vec<f64> = (0..j).map(|_| rng.gen::<f64>()).collect();
        let sum: f64 = raw.iter().sum();
        let probs = if sum > 0.0 {
            raw.iter().map(|r| r / sum).collect()
        } else {
            vec![1.0 / j as f64; j]
        };
        Lottery::new(payoffs, probs)
    };
    let l0 = lottery(rng)?;
    let l1 = lottery(rng)?;
    Menu::new(l0, l1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dominance {
    ADominates,
    BDominates,
    Equal,
    Incomparable,
}

/// First-order stochastic dominance on the merged payoff grid.
pub fn fosd_compare(a: &Lottery, b: &Lottery) -> Dominance {
    fosd_compare_tol(a, b, 1e-12)
}

/// [`fosd_compare`] with an explicit tolerance on CDF differences.
pub fn fosd_compare_tol(a: &Lottery, b: &Lottery, tol: f64) -> Dominance {
    let grid = merged_payoff_grid([a, b]);
    let mut a_below = false;
    let mut b_below = false;
    let (mut ca, mut cb) = (0.0, 0.0);
    let pa = a.probs_on_grid(&grid);
    let pb = b.probs_on_grid(&grid);
    for i in 0..grid.len() {
        ca += pa[i];
        cb += pb[i];
        if ca < cb - tol {
            a_below = true;
        } else if cb < ca - tol {
            b_below = true;
        }
    }
    match (a_below, b_below) {
        (true, false) => Dominance::ADominates,
        (false, true) => Dominance::BDominates,
        (false, false) => Dominance::Equal,
        (true, true) => Dominance::Incomparable,
    }
}

/// Summary statistics of a lottery used as clustering features.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LotteryStats {
    pub expected_value: f64,
    pub variance: f64,
    pub skew: f64,
    pub payoff_range: f64,
    pub min_payoff: f64,
    pub max_payoff: f64,
    pub prob_range: f64,
    pub min_prob: f64,
    pub max_prob: f64,
}

impl LotteryStats {
    pub fn to_array(&self) -> [f64; 9] {
        [
            self.expected_value,
            self.variance,
            self.skew,
            self.payoff_range,
            self.min_payoff,
            self.max_payoff,
            self.prob_range,
            self.min_prob,
            self.max_prob,
        ]
    }

    pub const NAMES: [&'static str; 9] = [
        "expected_value",
        "variance",
        "skew",
        "payoff_range",
        "min_payoff",
        "max_payoff",
        "prob_range",
        "min_prob",
        "max_prob",
    ];
}

/// Moments of the payoff distribution. Payoff extremes are taken over the
/// support; probability extremes over the listed probability vector.
pub fn lottery_stats(l: &Lottery) -> LotteryStats {
    let ev = l.expected_value();
    let mut var = 0.0;
    let mut third = 0.0;
    for (&z, &p) in l.payoffs.iter().zip(&l.probs) {
        let d = z - ev;
        var += p * d * d;
        third += p * d * d * d;
    }
    let skew = if var < 1e-12 { 0.0 } else { third / var.powf(1.5) };
    let support = l
        .payoffs
        .iter()
        .zip(&l.probs)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&z, _)| z);
    let (min_z, max_z) = support.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), z| {
        (lo.min(z), hi.max(z))
    });
    let min_p = l.probs.iter().copied().fold(f64::INFINITY, f64::min);
    let max_p = l.probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    LotteryStats {
        expected_value: ev,
        variance: var,
        skew,
        payoff_range: max_z - min_z,
        min_payoff: min_z,
        max_payoff: max_z,
        prob_range: max_p - min_p,
        min_prob: min_p,
        max_prob: max_p,
    }
}

/// A menu with its modeled choice probability for lottery 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub menu: Menu,
    pub choice_prob: f64,
}

impl Example {
    pub fn new(menu: Menu, choice_prob: f64) -> Self {
        Self { menu, choice_prob }
    }

    /// `1` when lottery 1 is chosen with probability at least one half.
    pub fn implied_choice(&self) -> u8 {
        u8::from(self.choice_prob >= 0.5)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub procedure: String,
    pub master_seed: u64,
    pub run_index: u64,
    pub iterations: usize,
}

/// An ordered, non-empty collection of examples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleCollection {
    pub examples: Vec<Example>,
    pub provenance: Provenance,
}

impl ExampleCollection {
    pub fn new(examples: Vec<Example>, provenance: Provenance) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Empty);
        }
        Ok(Self {
            examples,
            provenance,
        })
    }

    pub fn menus(&self) -> Vec<Menu> {
        self.examples.iter().map(|e| e.menu.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lot(z: &[f64], p: &[f64]) -> Lottery {
        Lottery::new(z.to_vec(), p.to_vec()).unwrap()
    }

    #[test]
    fn make_lottery_cases() {
        let d = lot(&[5.0], &[1.0]);
        assert_eq!(d.expected_value(), 5.0);
        let l = lot(&[4000.0, 0.0], &[0.8, 0.2]);
        assert_eq!(l.probs(), &[0.8, 0.2]);
        assert!(matches!(
            Lottery::new(vec![1.0, 2.0], vec![0.5, 0.6]),
            Err(Error::NotNormalized(_))
        ));
        assert!(matches!(
            Lottery::new(vec![1.0], vec![0.5, 0.5]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            Lottery::new(vec![1.0, 2.0], vec![1.1, -0.1]),
            Err(Error::NegativeProbability(_))
        ));
        assert!(Lottery::new(vec![f64::NAN], vec![1.0]).is_err());
        let renorm = lot(&[1.0, 2.0], &[0.5, 0.5000001]);
        assert!((renorm.probs().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn menu_json_shape() {
        let m = Menu::new(lot(&[1.0, 2.0], &[0.5, 0.5]), lot(&[3.0, 4.0], &[0.25, 0.75])).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(
            s,
            r#"{"lottery0":{"payoffs":[1.0,2.0],"probs":[0.5,0.5]},"lottery1":{"payoffs":[3.0,4.0],"probs":[0.25,0.75]}}"#
        );
        let back: Menu = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        let bad = r#"{"lottery0":{"payoffs":[1.0],"probs":[1.0]},"lottery1":{"payoffs":[3.0,4.0],"probs":[0.25,0.75]}}"#;
        assert!(serde_json::from_str::<Menu>(bad).is_err());
    }

    #[test]
    fn features_layout() {
        let m = Menu::new(lot(&[1.0, 2.0], &[0.5, 0.5]), lot(&[3.0, 4.0], &[0.25, 0.75])).unwrap();
        let x = m.to_features();
        assert_eq!(x, vec![1.0, 2.0, 0.5, 0.5, 3.0, 4.0, 0.25, 0.75]);
        let lay = m.layout();
        assert_eq!(lay.prob(1, 1), 7);
        assert_eq!(lay.payoff(1, 0), 4);
        assert!(lay.is_prob(2) && !lay.is_prob(4));
        assert_eq!(Menu::from_features(2, &x).unwrap(), m);
    }

    #[test]
    fn simplex_projection_examples() {
        assert_eq!(project_to_simplex(&[0.3, 0.7]).unwrap(), vec![0.3, 0.7]);
        let p = project_to_simplex(&[0.8, 0.8]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
        assert_eq!(project_to_simplex(&[1.5, -0.5]).unwrap(), vec![1.0, 0.0]);
        assert!(matches!(project_to_simplex(&[]), Err(Error::Empty)));
    }

    #[test]
    fn simplex_projection_matches_grid_search() {
        // Oracle: dense grid over the 1-simplex minimizing squared distance.
        let v = [1.5, -0.5];
        let n = 100_000;
        let (mut best, mut arg) = (f64::INFINITY, 0.0);
        for i in 0..=n {
            let s = i as f64 / n as f64;
            let d = (v[0] - s).powi(2) + (v[1] - (1.0 - s)).powi(2);
            if d < best {
                best = d;
                arg = s;
            }
        }
        let p = project_to_simplex(&v).unwrap();
        assert!((p[0] - arg).abs() <= 1.0 / n as f64);
    }

    proptest! {
        #[test]
        fn projection_idempotent_and_feasible(v in prop::collection::vec(-5.0f64..5.0, 1..7)) {
            let p = project_to_simplex(&v).unwrap();
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let pp = project_to_simplex(&p).unwrap();
            prop_assert_eq!(pp, p);
        }

        #[test]
        fn fosd_antisymmetric_and_split_invariant(
            za in prop::collection::vec(0.0f64..10.0, 2),
            zb in prop::collection::vec(0.0f64..10.0, 2),
            wa in 0.01f64..0.99, wb in 0.01f64..0.99, split in 0.1f64..0.9,
        ) {
            let a = lot(&za, &[wa, 1.0 - wa]);
            let b = lot(&zb, &[wb, 1.0 - wb]);
            let ab = fosd_compare(&a, &b);
            let ba = fosd_compare(&b, &a);
            let flipped = match ab {
                Dominance::ADominates => Dominance::BDominates,
                Dominance::BDominates => Dominance::ADominates,
                other => other,
            };
            prop_assert_eq!(ba, flipped);
            let a_split = lot(&[za[0], za[0], za[1]], &[wa * split, wa * (1.0 - split), 1.0 - wa]);
            prop_assert_eq!(fosd_compare(&a_split, &b), ab);
        }

        #[test]
        fn sampled_menus_on_simplex(seed in 0u64..1000, j in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = sample_random_menu(&mut rng, j, 0.0, 10.0).unwrap();
            for l in [&m.lottery0, &m.lottery1] {
                prop_assert!((l.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(l.payoffs().iter().all(|z| (0.0..=10.0).contains(z)));
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_and_unbiased() {
        let a = sample_random_menu(&mut ChaCha8Rng::seed_from_u64(42), 2, 0.0, 10.0).unwrap();
        let b = sample_random_menu(&mut ChaCha8Rng::seed_from_u64(42), 2, 0.0, 10.0).unwrap();
        assert_eq!(a, b);
        assert!(sample_random_menu(&mut ChaCha8Rng::seed_from_u64(1), 2, 3.0, 3.0).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut payoff_sum = 0.0;
        let mut n = 0.0;
        for _ in 0..10_000 {
            let m = sample_random_menu(&mut rng, 2, 0.0, 10.0).unwrap();
            for l in [&m.lottery0, &m.lottery1] {
                payoff_sum += l.payoffs().iter().sum::<f64>();
                n += 2.0;
            }
        }
        let mean = payoff_sum / n;
        assert!((4.8..=5.2).contains(&mean), "{mean}");

        let mut coord = [0.0; 3];
        for _ in 0..10_000 {
            let m = sample_random_menu(&mut rng, 3, 0.0, 10.0).unwrap();
            for (c, p) in coord.iter_mut().zip(m.lottery0.probs()) {
                *c += p / 10_000.0;
            }
        }
        for c in coord {
            assert!((0.31..=0.36).contains(&c), "{c}");
        }
    }

    #[test]
    fn fosd_examples() {
        let d10 = Lottery::degenerate(10.0).unwrap();
        let d5 = Lottery::degenerate(5.0).unwrap();
        assert_eq!(fosd_compare(&d10, &d5), Dominance::ADominates);
        let comp = lot(&[5.04, 5.81], &[0.96, 0.04]);
        let low = Lottery::degenerate(4.63).unwrap();
        assert_eq!(fosd_compare(&comp, &low), Dominance::ADominates);
        let a = lot(&[6.17, 8.51], &[0.79, 0.21]);
        let b = lot(&[4.30, 8.51], &[0.66, 0.34]);
        assert_eq!(fosd_compare(&a, &b), Dominance::Incomparable);
        assert_eq!(fosd_compare(&a, &a.clone()), Dominance::Equal);
    }

    #[test]
    fn stats_examples() {
        let s = lottery_stats(&Lottery::degenerate(5.0).unwrap());
        assert_eq!((s.expected_value, s.variance, s.skew, s.payoff_range), (5.0, 0.0, 0.0, 0.0));
        let s = lottery_stats(&lot(&[0.0, 10.0], &[0.5, 0.5]));
        assert_eq!((s.expected_value, s.variance, s.skew), (5.0, 25.0, 0.0));
        let s = lottery_stats(&lot(&[4.30, 6.17, 8.51], &[0.15, 0.61, 0.24]));
        assert!((s.expected_value - 6.45).abs() < 0.01);
        assert_eq!(s.min_payoff, 4.30);
        assert!((s.prob_range - 0.46).abs() < 1e-12);
    }
}
