//! Parametrized logit expected-utility class.
//!
//! Utility is a linear combination `u_θ(z) = Σ_k θ_k b_k(z̃)` of basis
//! functions evaluated on the payoff rescaled to `[0, 1]`. The choice
//! probability is `σ(s · [EU_θ(lottery 1) − EU_θ(lottery 0)])`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lottery::{Example, Lottery, Menu, MenuLayout};
use crate::math::{bernoulli_entropy, cross_entropy_logit, dot, kl_logit, norm, sigmoid};

const DOMAIN_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub enum BasisKind {
    /// `(z̃, z̃², …, z̃^order)`.
    Polynomial { order: usize },
    /// Monotone splines over `knots` equally spaced knots (boundaries included).
    Ispline { knots: usize, degree: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBasis", into = "RawBasis")]
pub struct UtilityBasis {
    kind: BasisKind,
    low: f64,
    high: f64,
    /// Clamped knot vector on `[0, 1]` (I-splines only).
    knot_vector: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBasis {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    order: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    knots: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    degree: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    domain: Option<[f64; 2]>,
}

impl TryFrom<RawBasis> for UtilityBasis {
    type Error = Error;

    fn try_from(raw: RawBasis) -> Result<Self> {
        let [low, high] = raw.domain.unwrap_or([0.0, 10.0]);
        let kind = match raw.kind.as_str() {
            "polynomial" => {
                if raw.knots.is_some() || raw.degree.is_some() {
                    return Err(Error::invalid("polynomial basis takes only `order`"));
                }
                BasisKind::Polynomial {
                    order: raw.order.unwrap_or(6),
                }
            }
            "ispline" => {
                if raw.order.is_some() {
                    return Err(Error::invalid("ispline basis takes `knots` and `degree`"));
                }
                BasisKind::Ispline {
                    knots: raw.knots.unwrap_or(10),
                    degree: raw.degree.unwrap_or(3),
                }
            }
            other => return Err(Error::invalid(format!("unknown basis kind `{other}`"))),
        };
        UtilityBasis::new(kind, low, high)
    }
}

impl From<UtilityBasis> for RawBasis {
    fn from(b: UtilityBasis) -> Self {
        let domain = Some([b.low, b.high]);
        match b.kind {
            BasisKind::Polynomial { order } => RawBasis {
                kind: "polynomial".into(),
                order: Some(order),
                knots: None,
                degree: None,
                domain,
            },
            BasisKind::Ispline { knots, degree } => RawBasis {
                kind: "ispline".into(),
                order: None,
                knots: Some(knots),
                degree: Some(degree),
                domain,
            },
        }
    }
}

impl UtilityBasis {
    pub fn new(kind: BasisKind, low: f64, high: f64) -> Result<Self> {
        if !(low < high) || !low.is_finite() || !high.is_finite() {
            return Err(Error::InvalidRange { low, high });
        }
        let knot_vector = match kind {
            BasisKind::Polynomial { order } => {
                if order < 1 {
                    return Err(Error::invalid("polynomial order must be at least 1"));
                }
                Vec::new()
            }
            BasisKind::Ispline { knots, degree } => {
                if knots < 2 || degree < 1 {
                    return Err(Error::invalid("ispline needs at least 2 knots and degree 1"));
                }
                let mut t = vec![0.0; degree + 1];
                t.extend((1..knots - 1).map(|i| i as f64 / (knots - 1) as f64));
                t.extend(std::iter::repeat(1.0).take(degree + 1));
                t
            }
        };
        Ok(Self {
            kind,
            low,
            high,
            knot_vector,
        })
    }

    pub fn polynomial(order: usize, low: f64, high: f64) -> Result<Self> {
        Self::new(BasisKind::Polynomial { order }, low, high)
    }

    pub fn ispline(knots: usize, degree: usize, low: f64, high: f64) -> Result<Self> {
        Self::new(BasisKind::Ispline { knots, degree }, low, high)
    }

    pub fn kind(&self) -> &BasisKind {
        &self.kind
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.low, self.high)
    }

    /// Number of basis functions.
    pub fn dim(&self) -> usize {
        match self.kind {
            BasisKind::Polynomial { order } => order,
            BasisKind::Ispline { knots, degree } => knots + degree - 2,
        }
    }

    fn rescale(&self, z: f64) -> Result<f64> {
        if !z.is_finite() || z < self.low - DOMAIN_TOL || z > self.high + DOMAIN_TOL {
            return Err(Error::OutOfDomain {
                value: z,
                low: self.low,
                high: self.high,
            });
        }
        Ok(((z - self.low) / (self.high - self.low)).clamp(0.0, 1.0))
    }

    /// Basis values at payoff `z`.
    ///
    /// ```
    /// use anomgen::eut::UtilityBasis;
    /// let poly = UtilityBasis::polynomial(2, 0.0, 10.0).unwrap();
    /// assert_eq!(poly.eval(10.0).unwrap(), vec![1.0, 1.0]);
    /// let spline = UtilityBasis::ispline(10, 3, 0.0, 10.0).unwrap();
    /// assert!(spline.eval(0.0).unwrap().iter().all(|&v| v == 0.0));
    /// ```
    pub fn eval(&self, z: f64) -> Result<Vec<f64>> {
        let x = self.rescale(z)?;
        Ok(match self.kind {
            BasisKind::Polynomial { order } => {
                let mut out = Vec::with_capacity(order);
                let mut pow = 1.0;
                for _ in 0..order {
                    pow *= x;
                    out.push(pow);
                }
                out
            }
            BasisKind::Ispline { degree, .. } => {
                if x >= 1.0 {
                    return Ok(vec![1.0; self.dim()]);
                }
                let b = bspline_values(&self.knot_vector, degree, x);
                tail_sums(&b)
            }
        })
    }

    /// Derivatives of the basis functions with respect to the raw payoff.
    pub fn derivative(&self, z: f64) -> Result<Vec<f64>> {
        let x = self.rescale(z)?;
        let inv = 1.0 / (self.high - self.low);
        Ok(match self.kind {
            BasisKind::Polynomial { order } => {
                let mut out = Vec::with_capacity(order);
                let mut pow = 1.0;
                for k in 1..=order {
                    out.push(k as f64 * pow * inv);
                    pow *= x;
                }
                out
            }
            BasisKind::Ispline { degree, .. } => {
                let t = &self.knot_vector;
                let lower = bspline_values(t, degree - 1, x);
                let n = t.len() - degree - 1;
                let mut db = vec![0.0; n];
                let p = degree as f64;
                for (i, d) in db.iter_mut().enumerate() {
                    let left = t[i + degree] - t[i];
                    let right = t[i + degree + 1] - t[i + 1];
                    if left > 0.0 {
                        *d += p * lower[i] / left;
                    }
                    if right > 0.0 {
                        *d -= p * lower[i + 1] / right;
                    }
                }
                tail_sums(&db).into_iter().map(|v| v * inv).collect()
            }
        })
    }

    /// `Σ_j p_j b(z_j)` for a lottery given as payoff and probability slices.
    pub fn expected_basis(&self, payoffs: &[f64], probs: &[f64]) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.dim()];
        for (&z, &p) in payoffs.iter().zip(probs) {
            for (a, b) in acc.iter_mut().zip(self.eval(z)?) {
                *a += p * b;
            }
        }
        Ok(acc)
    }

    /// `Σ p_1 b(z_1) − Σ p_0 b(z_0)` on flattened menu features.
    pub fn basis_difference(&self, layout: MenuLayout, x: &[f64]) -> Result<Vec<f64>> {
        let e = |l: usize| self.expected_basis(&x[layout.payoff_range(l)], &x[layout.prob_range(l)]);
        let (e0, e1) = (e(0)?, e(1)?);
        Ok(e1.iter().zip(&e0).map(|(a, b)| a - b).collect())
    }

    pub fn menu_basis_difference(&self, menu: &Menu) -> Result<Vec<f64>> {
        self.basis_difference(menu.layout(), &menu.to_features())
    }
}

/// All B-splines of the given degree at `x ∈ [0, 1]` on a clamped knot vector.
/// `x = 1` is assigned to the last non-empty knot span.
fn bspline_values(t: &[f64], degree: usize, x: f64) -> Vec<f64> {
    let m = t.len();
    let last_span = (0..m - 1).rev().find(|&i| t[i] < t[i + 1]).unwrap_or(0);
    let span = if x >= t[last_span + 1] {
        last_span
    } else {
        (0..m - 1).find(|&i| t[i] <= x && x < t[i + 1]).unwrap_or(last_span)
    };
    let mut b = vec![0.0; m - 1];
    b[span] = 1.0;
    for k in 1..=degree {
        let count = m - k - 1;
        let mut next = vec![0.0; count];
        for (i, v) in next.iter_mut().enumerate() {
            let left = t[i + k] - t[i];
            let right = t[i + k + 1] - t[i + 1];
            if left > 0.0 {
                *v += (x - t[i]) / left * b[i];
            }
            if right > 0.0 {
                *v += (t[i + k + 1] - x) / right * b[i + 1];
            }
        }
        b = next;
    }
    b
}

/// `I_j = Σ_{m ≥ j} B_m` for `j = 1..n`; the constant `I_0` is dropped.
fn tail_sums(b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; b.len() - 1];
    let mut acc = 0.0;
    for j in (1..b.len()).rev() {
        acc += b[j];
        out[j - 1] = acc;
    }
    out
}

/// A member `f_θ` of the logit expected-utility class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheorySpec {
    pub basis: UtilityBasis,
    pub theta: Vec<f64>,
    pub logit_scale: f64,
}

impl TheorySpec {
    pub fn new(basis: UtilityBasis, theta: Vec<f64>, logit_scale: f64) -> Result<Self> {
        if theta.len() != basis.dim() {
            return Err(Error::Dimension {
                expected: basis.dim(),
                got: theta.len(),
            });
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("theta"));
        }
        if !(logit_scale > 0.0) {
            return Err(Error::invalid("logit scale must be positive"));
        }
        Ok(Self {
            basis,
            theta,
            logit_scale,
        })
    }

    pub fn utility(&self, z: f64) -> Result<f64> {
        Ok(dot(&self.theta, &self.basis.eval(z)?))
    }

    pub fn utility_derivative(&self, z: f64) -> Result<f64> {
        Ok(dot(&self.theta, &self.basis.derivative(z)?))
    }

    pub fn expected_utility(&self, l: &Lottery) -> Result<f64> {
        Ok(dot(&self.theta, &self.basis.expected_basis(l.payoffs(), l.probs())?))
    }

    /// `EU_θ(lottery 1) − EU_θ(lottery 0)` without the logit scale.
    pub fn eu_difference(&self, layout: MenuLayout, x: &[f64]) -> Result<f64> {
        Ok(dot(&self.theta, &self.basis.basis_difference(layout, x)?))
    }

    /// Gradient of [`Self::eu_difference`] over the flattened features.
    pub fn eu_difference_grad(&self, layout: MenuLayout, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; layout.dim()];
        for (l, sign) in [(0usize, -1.0), (1usize, 1.0)] {
            for k in 0..layout.j {
                let (zi, pi) = (layout.payoff(l, k), layout.prob(l, k));
                g[pi] = sign * self.utility(x[zi])?;
                g[zi] = sign * x[pi] * self.utility_derivative(x[zi])?;
            }
        }
        Ok(g)
    }

    pub fn choice_prob_features(&self, layout: MenuLayout, x: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.logit_scale * self.eu_difference(layout, x)?))
    }

    pub fn choice_prob_grad_features(&self, layout: MenuLayout, x: &[f64]) -> Result<Vec<f64>> {
        let f = self.choice_prob_features(layout, x)?;
        let s = self.logit_scale * f * (1.0 - f);
        Ok(self
            .eu_difference_grad(layout, x)?
            .into_iter()
            .map(|g| g * s)
            .collect())
    }
}

/// Probability that `f_θ` assigns to lottery 1.
pub fn theory_choice_prob(spec: &TheorySpec, x: &Menu) -> Result<f64> {
    spec.choice_prob_features(x.layout(), &x.to_features())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Kl,
}

/// Targets are clipped into this band before fitting or scoring.
pub const TARGET_CLIP: f64 = 1e-6;

fn clip_target(y: f64) -> f64 {
    y.clamp(TARGET_CLIP, 1.0 - TARGET_CLIP)
}

/// Mean per-example loss of `f_θ` against the examples' choice probabilities.
pub fn theory_loss(spec: &TheorySpec, examples: &[Example], kind: LossKind) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty);
    }
    let mut total = 0.0;
    for e in examples {
        let d = spec.logit_scale * dot(&spec.theta, &spec.basis.menu_basis_difference(&e.menu)?);
        let y = clip_target(e.choice_prob);
        total += match kind {
            LossKind::CrossEntropy => cross_entropy_logit(y, d),
            LossKind::Kl => kl_logit(y, d),
        };
    }
    Ok(total / examples.len() as f64)
}

/// Gradient of the mean loss with respect to each example's flattened menu,
/// holding targets fixed. Cross-entropy and KL share this gradient.
pub fn theory_loss_grad_features(spec: &TheorySpec, examples: &[Example]) -> Result<Vec<Vec<f64>>> {
    if examples.is_empty() {
        return Err(Error::Empty);
    }
    let n = examples.len() as f64;
    examples
        .iter()
        .map(|e| {
            let layout = e.menu.layout();
            let x = e.menu.to_features();
            let f = spec.choice_prob_features(layout, &x)?;
            let scale = spec.logit_scale * (f - clip_target(e.choice_prob)) / n;
            Ok(spec
                .eu_difference_grad(layout, &x)?
                .into_iter()
                .map(|g| g * scale)
                .collect())
        })
        .collect()
}

/// Inner optimizer used by [`fit_theta`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    /// Full-batch gradient descent with backtracking line search.
    #[default]
    GradientDescent,
    /// Damped Newton steps; reaches machine-precision optima in a few iterations.
    Newton,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub method: FitMethod,
    /// Random starts in addition to the zero start.
    pub restarts: usize,
    pub init_sd: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
    /// Radius of the L2 ball bounding θ.
    pub theta_radius: f64,
    pub logit_scale: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            method: FitMethod::GradientDescent,
            restarts: 5,
            init_sd: 0.1,
            max_iter: 5000,
            grad_tol: 1e-10,
            theta_radius: 1e3,
            logit_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta: Vec<f64>,
    /// Mean KL divergence of the clipped targets from the fitted probabilities.
    pub kl: f64,
    pub cross_entropy: f64,
    pub on_boundary: bool,
    pub converged: bool,
}

/// Precomputed soft-label logistic problem in θ.
struct LogisticProblem {
    rows: Vec<Vec<f64>>,
    targets: Vec<f64>,
    entropy: f64,
    scale: f64,
}

impl LogisticProblem {
    fn new(basis: &UtilityBasis, examples: &[Example], scale: f64) -> Result<Self> {
        let rows = examples
            .iter()
            .map(|e| basis.menu_basis_difference(&e.menu))
            .collect::<Result<Vec<_>>>()?;
        let targets: Vec<f64> = examples.iter().map(|e| clip_target(e.choice_prob)).collect();
        let entropy = targets.iter().map(|&y| bernoulli_entropy(y)).sum::<f64>() / targets.len() as f64;
        Ok(Self {
            rows,
            targets,
            entropy,
            scale,
        })
    }

    fn loss(&self, theta: &[f64]) -> f64 {
        let n = self.rows.len() as f64;
        self.rows
            .iter()
            .zip(&self.targets)
            .map(|(r, &y)| cross_entropy_logit(y, self.scale * dot(theta, r)))
            .sum::<f64>()
            / n
    }

    fn grad(&self, theta: &[f64]) -> Vec<f64> {
        let n = self.rows.len() as f64;
        let mut g = vec![0.0; theta.len()];
        for (r, &y) in self.rows.iter().zip(&self.targets) {
            let w = self.scale * (sigmoid(self.scale * dot(theta, r)) - y) / n;
            g.iter_mut().zip(r).for_each(|(gi, ri)| *gi += w * ri);
        }
        g
    }

    fn descend(&self, start: Vec<f64>, cfg: &FitConfig) -> (Vec<f64>, f64, bool) {
        match cfg.method {
            FitMethod::GradientDescent => self.gradient_descent(start, cfg),
            FitMethod::Newton => self.newton(start, cfg),
        }
    }

    /// Projected gradient descent with Armijo backtracking. The accepted step
    /// length is doubled before the next search.
    fn gradient_descent(&self, start: Vec<f64>, cfg: &FitConfig) -> (Vec<f64>, f64, bool) {
        let mut theta = project_ball(start, cfg.theta_radius);
        let mut loss = self.loss(&theta);
        let mut step = 1.0;
        for _ in 0..cfg.max_iter {
            let g = self.grad(&theta);
            let gg: f64 = g.iter().map(|v| v * v).sum();
            if gg.sqrt() < cfg.grad_tol {
                return (theta, loss, true);
            }
            let mut accepted = false;
            for _ in 0..60 {
                let candidate: Vec<f64> = theta.iter().zip(&g).map(|(t, gi)| t - step * gi).collect();
                let candidate = project_ball(candidate, cfg.theta_radius);
                let cand_loss = self.loss(&candidate);
                let decrease: f64 = candidate.iter().zip(&theta).zip(&g).map(|((c, t), gi)| gi * (t - c)).sum();
                if cand_loss <= loss - 1e-4 * decrease && cand_loss < loss {
                    theta = candidate;
                    loss = cand_loss;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                return (theta, loss, true);
            }
            step *= 2.0;
        }
        (theta, loss, false)
    }

    fn grad_hess(&self, theta: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let k = theta.len();
        let n = self.rows.len() as f64;
        let mut g = DVector::zeros(k);
        let mut h = DMatrix::zeros(k, k);
        for (r, &y) in self.rows.iter().zip(&self.targets) {
            let f = sigmoid(self.scale * dot(theta, r));
            let rv = DVector::from_column_slice(r);
            g.axpy(self.scale * (f - y) / n, &rv, 1.0);
            h.ger(self.scale * self.scale * f * (1.0 - f) / n, &rv, &rv, 1.0);
        }
        (g, h)
    }

    /// Damped Newton descent with backtracking, kept inside the θ ball.
    fn newton(&self, start: Vec<f64>, cfg: &FitConfig) -> (Vec<f64>, f64, bool) {
        let k = start.len();
        let mut theta = project_ball(start, cfg.theta_radius);
        let mut loss = self.loss(&theta);
        let mut damping = 1e-8;
        for _ in 0..cfg.max_iter {
            let (g, h) = self.grad_hess(&theta);
            if g.norm() < cfg.grad_tol {
                return (theta, loss, true);
            }
            let mut improved = false;
            for _ in 0..40 {
                let mut m = h.clone();
                let diag = damping * (1.0 + h.diagonal().amax());
                for i in 0..k {
                    m[(i, i)] += diag;
                }
                let step = match m.cholesky() {
                    Some(c) => c.solve(&(-&g)),
                    None => -&g,
                };
                let candidate: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + s).collect();
                let candidate = project_ball(candidate, cfg.theta_radius);
                let cand_loss = self.loss(&candidate);
                if cand_loss < loss {
                    let gain = loss - cand_loss;
                    theta = candidate;
                    loss = cand_loss;
                    damping = (damping * 0.1).max(1e-12);
                    improved = true;
                    if gain <= 1e-16 * loss.abs().max(1e-300) {
                        return (theta, loss, true);
                    }
                    break;
                }
                damping *= 10.0;
            }
            if !improved {
                // No descent direction improves in floating point: stationary.
                return (theta, loss, true);
            }
        }
        (theta, loss, false)
    }
}

fn project_ball(theta: Vec<f64>, radius: f64) -> Vec<f64> {
    let r = norm(&theta);
    if r > radius {
        theta.into_iter().map(|t| t * radius / r).collect()
    } else {
        theta
    }
}

/// Minimizes mean cross-entropy of `f_θ` on the examples from the zero start
/// and `cfg.restarts` Gaussian starts. Among starts reaching the best loss,
/// the smallest θ is kept.
pub fn fit_theta<R: Rng + ?Sized>(
    basis: &UtilityBasis,
    examples: &[Example],
    cfg: &FitConfig,
    rng: &mut R,
) -> Result<FitResult> {
    if examples.is_empty() {
        return Err(Error::Empty);
    }
    let problem = LogisticProblem::new(basis, examples, cfg.logit_scale)?;
    let normal = Normal::new(0.0, cfg.init_sd).map_err(|e| Error::invalid(e.to_string()))?;
    let k = basis.dim();
    let mut best: Option<(Vec<f64>, f64, bool)> = None;
    for r in 0..=cfg.restarts {
        let start = if r == 0 {
            vec![0.0; k]
        } else {
            (0..k).map(|_| normal.sample(rng)).collect()
        };
        let (theta, loss, converged) = problem.descend(start, cfg);
        let replace = match &best {
            None => true,
            Some((bt, bl, _)) => {
                loss < bl - 1e-12 || (loss <= bl + 1e-12 && norm(&theta) < norm(bt))
            }
        };
        if replace {
            best = Some((theta, loss, converged));
        }
    }
    let (theta, ce, converged) = best.expect("at least one start");
    let on_boundary = norm(&theta) >= cfg.theta_radius * (1.0 - 1e-9);
    Ok(FitResult {
        kl: (ce - problem.entropy).max(0.0),
        cross_entropy: ce,
        on_boundary,
        converged,
        theta,
    })
}

/// Best mean KL over θ using `restarts` random starts.
pub fn min_theory_loss<R: Rng + ?Sized>(
    basis: &UtilityBasis,
    examples: &[Example],
    restarts: usize,
    rng: &mut R,
) -> Result<FitResult> {
    let cfg = FitConfig {
        restarts,
        ..FitConfig::default()
    };
    fit_theta(basis, examples, &cfg, rng)
}
