//! Example morphing: move a menu along directions that every sampled
//! expected-utility fit is locally blind to, while the predictor changes.
//!
//! Each step samples parameter vectors around the history of fitted θ's,
//! collects their probability gradients, and removes their span from the
//! predictor's probability gradient. The remaining direction is a descent
//! direction for the predictor that the sampled theories cannot see.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversarial::labeled;
use crate::cpt::GRAD_PROB_FLOOR;
use crate::error::{Error, Result};
use crate::eut::{fit_theta, FitConfig, UtilityBasis};
use crate::lottery::{sample_random_menu, ExampleCollection, Menu, MenuLayout, Provenance};
use crate::math::{dot, norm, sigmoid};
use crate::predictor::Predictor;
use crate::run_rng;

/// Standard deviation of draws around a single fitted θ.
pub const HISTORY_SD: f64 = 0.1;
/// Ridge added to the sample covariance before factorization.
pub const COV_JITTER: f64 = 1e-8;
/// Runs stop once the projected direction is shorter than this.
pub const STOP_NORM: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MorphConfig {
    pub step_size: f64,
    pub iterations: usize,
    /// Parameter vectors drawn per step.
    pub samples: usize,
    /// Relative residual below which a sampled gradient counts as already in the span.
    pub rank_tol: f64,
    pub basis: UtilityBasis,
    pub fit: FitConfig,
    pub payoffs: usize,
    pub seed: u64,
}

impl Default for MorphConfig {
    fn default() -> Self {
        Self {
            step_size: 10.0,
            iterations: 50,
            samples: 2000,
            rank_tol: 0.1,
            basis: UtilityBasis::ispline(10, 3, 0.0, 10.0).expect("valid default basis"),
            fit: FitConfig::default(),
            payoffs: 2,
            seed: 0,
        }
    }
}

impl MorphConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid("step_size must be positive and finite"));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        if self.samples == 0 {
            return Err(Error::invalid("samples must be at least 1"));
        }
        if !(self.rank_tol >= 0.0 && self.rank_tol < 1.0) {
            return Err(Error::invalid("rank_tol must lie in [0, 1)"));
        }
        if self.payoffs == 0 {
            return Err(Error::invalid("payoffs must be at least 1"));
        }
        Ok(())
    }
}

/// Draws `count` vectors from a normal fitted to the history: its mean, and
/// its sample covariance plus a small ridge. A history whose entries are all
/// equal uses `HISTORY_SD² I` instead.
pub fn sample_theta_history<R: Rng + ?Sized>(
    history: &[Vec<f64>],
    count: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let first = history.first().ok_or(Error::Empty)?;
    let k = first.len();
    if let Some(bad) = history.iter().find(|t| t.len() != k) {
        return Err(Error::Dimension {
            expected: k,
            got: bad.len(),
        });
    }
    let n = history.len();
    let mean = history
        .iter()
        .fold(DVector::zeros(k), |acc, t| acc + DVector::from_column_slice(t))
        / n as f64;
    let degenerate = history.iter().all(|t| t == first);
    let cov = if degenerate {
        DMatrix::identity(k, k) * (HISTORY_SD * HISTORY_SD)
    } else {
        let mut c = DMatrix::zeros(k, k);
        for t in history {
            let d = DVector::from_column_slice(t) - &mean;
            c += &d * d.transpose();
        }
        c / (n - 1) as f64 + DMatrix::identity(k, k) * COV_JITTER
    };
    let chol = Cholesky::new(cov).ok_or_else(|| Error::invalid("covariance is not positive definite"))?;
    let l = chol.l();
    Ok((0..count)
        .map(|_| {
            let z = DVector::from_iterator(k, (0..k).map(|_| StandardNormal.sample(rng)));
            (&mean + &l * z).iter().copied().collect()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `g_star` with the retained span removed.
    pub direction: Vec<f64>,
    /// Orthonormal basis of the retained span.
    pub basis: Vec<Vec<f64>>,
    /// Indices of the sampled gradients that define the retained span.
    pub retained: Vec<usize>,
}

impl Projection {
    pub fn rank(&self) -> usize {
        self.basis.len()
    }
}

fn remove_span(v: &mut [f64], basis: &[Vec<f64>]) {
    // Two passes keep the result orthogonal to rounding level.
    for _ in 0..2 {
        for b in basis {
            let c = dot(v, b);
            v.iter_mut().zip(b).for_each(|(x, bi)| *x -= c * bi);
        }
    }
}

/// Orthogonal projection of `g_star` onto the complement of the span of the
/// sampled gradients.
///
/// Gradients with norm at most `rank_tol` are ignored. The span is built by
/// pivoted Gram–Schmidt: the gradient with the largest residual relative to
/// its own norm joins the basis until every residual is at most `rank_tol`.
/// The returned direction `v` then satisfies
/// `|⟨v, g⟩| ≤ rank_tol·‖v‖·‖g‖` for every considered gradient, and is exactly
/// orthogonal to the retained ones.
pub fn null_space_projection(g_star: &[f64], sampled: &[Vec<f64>], rank_tol: f64) -> Result<Projection> {
    let d = g_star.len();
    if let Some(bad) = sampled.iter().find(|g| g.len() != d) {
        return Err(Error::Dimension {
            expected: d,
            got: bad.len(),
        });
    }
    if g_star.iter().chain(sampled.iter().flatten()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    let considered: Vec<(usize, f64)> = sampled
        .iter()
        .enumerate()
        .map(|(i, g)| (i, norm(g)))
        .filter(|&(_, n)| n > rank_tol && n > 0.0)
        .collect();
    let mut residuals: Vec<Vec<f64>> = considered.iter().map(|&(i, _)| sampled[i].clone()).collect();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut retained = Vec::new();
    while basis.len() < d {
        let best = residuals
            .iter()
            .zip(&considered)
            .enumerate()
            .map(|(k, (r, &(_, n)))| (k, norm(r) / n))
            .max_by(|a, b| a.1.total_cmp(&b.1));
        let Some((k, rel)) = best else { break };
        if rel <= rank_tol || rel == 0.0 {
            break;
        }
        let mut q = sampled[considered[k].0].clone();
        remove_span(&mut q, &basis);
        let qn = norm(&q);
        q.iter_mut().for_each(|x| *x /= qn);
        for r in residuals.iter_mut() {
            let c = dot(r, &q);
            r.iter_mut().zip(&q).for_each(|(x, qi)| *x -= c * qi);
        }
        basis.push(q);
        retained.push(considered[k].0);
    }
    let mut direction = g_star.to_vec();
    remove_span(&mut direction, &basis);
    Ok(Projection {
        direction,
        basis,
        retained,
    })
}

/// Probability gradients of `f_θ` at a menu with fixed payoffs, given the
/// basis vectors at each payoff. Entries at payoff positions are zero and
/// each probability block is centered onto the simplex tangent space.
fn sampled_gradients(
    layout: MenuLayout,
    payoff_basis: &[Vec<f64>],
    x: &[f64],
    thetas: &[Vec<f64>],
    scale: f64,
) -> Vec<Vec<f64>> {
    thetas
        .iter()
        .map(|theta| {
            let utils: Vec<f64> = payoff_basis.iter().map(|b| dot(theta, b)).collect();
            let d = eu_diff(layout, &utils, x);
            let s = sigmoid(scale * d);
            let w = scale * s * (1.0 - s);
            let mut g = vec![0.0; layout.dim()];
            for l in 0..2 {
                let sign = if l == 0 { -1.0 } else { 1.0 };
                for k in 0..layout.j {
                    g[layout.prob(l, k)] = sign * w * utils[l * layout.j + k];
                }
            }
            layout.tangent_probs(&g)
        })
        .collect()
}

/// EU difference from per-payoff utilities ordered lottery 0 then lottery 1.
fn eu_diff(layout: MenuLayout, utils: &[f64], x: &[f64]) -> f64 {
    let mut d = 0.0;
    for l in 0..2 {
        let sign = if l == 0 { -1.0 } else { 1.0 };
        for k in 0..layout.j {
            d += sign * utils[l * layout.j + k] * x[layout.prob(l, k)];
        }
    }
    d
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MorphOutcome {
    pub candidate: ExampleCollection,
    pub trajectory: Vec<Vec<f64>>,
    pub flag: Option<String>,
    /// Largest `|f_θ(x^s) − f_θ(x^0)|` over the sampled θ's seen along the run.
    pub drift: f64,
    /// Set when the run ended because the projected direction vanished.
    pub stopped_early: bool,
}

/// Runs the morphing iteration from `x0` on the probability coordinates.
pub fn morph_run<R: Rng + ?Sized>(
    predictor: &dyn Predictor,
    cfg: &MorphConfig,
    x0: &Menu,
    rng: &mut R,
) -> Result<MorphOutcome> {
    cfg.validate()?;
    let layout = x0.layout();
    let start = x0.to_features();
    let payoff_basis: Vec<Vec<f64>> = (0..2)
        .flat_map(|l| layout.payoff_range(l))
        .map(|i| cfg.basis.eval(start[i]))
        .collect::<Result<_>>()?;
    let scale = cfg.fit.logit_scale;
    let f_theta = |theta: &[f64], x: &[f64]| {
        let utils: Vec<f64> = payoff_basis.iter().map(|b| dot(theta, b)).collect();
        sigmoid(scale * eu_diff(layout, &utils, x))
    };

    let seed_fit = fit_theta(&cfg.basis, &labeled(predictor, std::slice::from_ref(x0))?, &cfg.fit, rng)?;
    let mut history = vec![seed_fit.theta];
    let mut x = start.clone();
    let mut trajectory = Vec::with_capacity(cfg.iterations);
    let mut drift: f64 = 0.0;
    let mut flag = None;
    let mut stopped_early = false;
    let mut completed = 0;
    for s in 0..cfg.iterations {
        if s > 0 {
            let current = Menu::from_features(layout.j, &x)?;
            let fit = fit_theta(&cfg.basis, &labeled(predictor, &[x0.clone(), current])?, &cfg.fit, rng)?;
            history.push(fit.theta);
        }
        let thetas = sample_theta_history(&history, cfg.samples, rng)?;
        let sampled = sampled_gradients(layout, &payoff_basis, &x, &thetas, scale);
        let xc = layout.clamp_probs(&x, GRAD_PROB_FLOOR);
        let g_star = layout.tangent_probs(&predictor.grad_features(layout, &xc)?);
        let proj = match null_space_projection(&g_star, &sampled, cfg.rank_tol) {
            Ok(p) => p,
            Err(e) => {
                flag = Some(format!("{e} at iteration {s}"));
                break;
            }
        };
        if norm(&proj.direction) < STOP_NORM {
            stopped_early = true;
            break;
        }
        for (i, v) in proj.direction.iter().enumerate() {
            if layout.is_prob(i) {
                x[i] -= cfg.step_size * v;
            }
        }
        layout.project_probs(&mut x);
        for theta in &thetas {
            drift = drift.max((f_theta(theta, &x) - f_theta(theta, &start)).abs());
        }
        trajectory.push(x.clone());
        completed = s + 1;
    }
    let last = Menu::from_features(layout.j, &x)?;
    let provenance = Provenance {
        procedure: "morphing".into(),
        iterations: completed,
        ..Provenance::default()
    };
    Ok(MorphOutcome {
        candidate: ExampleCollection::new(labeled(predictor, &[x0.clone(), last])?, provenance)?,
        trajectory,
        flag,
        drift,
        stopped_early,
    })
}

/// Independent morph runs from random starting menus, one generator stream
/// per run.
pub fn generate_morphs(predictor: &dyn Predictor, cfg: &MorphConfig, num_inits: usize) -> Result<Vec<MorphOutcome>> {
    if num_inits == 0 {
        return Err(Error::invalid("num_inits must be at least 1"));
    }
    cfg.validate()?;
    let (low, high) = cfg.basis.domain();
    (0..num_inits)
        .into_par_iter()
        .map(|i| {
            let mut rng = run_rng(cfg.seed, i as u64);
            let x0 = sample_random_menu(&mut rng, cfg.payoffs, low, high)?;
            let mut out = morph_run(predictor, cfg, &x0, &mut rng)?;
            out.candidate.provenance.master_seed = cfg.seed;
            out.candidate.provenance.run_index = i as u64;
            Ok(out)
        })
        .collect()
}
