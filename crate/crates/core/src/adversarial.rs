//! Gradient descent-ascent search for collections the logit expected-utility
//! class cannot fit.
//!
//! Each iteration refits θ on the current collection (descent), then moves
//! the evolving menu uphill on an ascent objective, projects probabilities
//! back onto the simplex and clamps payoffs to the basis domain.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cpt::GRAD_PROB_FLOOR;
use crate::error::{Error, Result};
use crate::eut::{fit_theta, FitConfig, TheorySpec, UtilityBasis, TARGET_CLIP};
use crate::lottery::{sample_random_menu, Example, ExampleCollection, Menu, MenuLayout, Provenance};
use crate::math::{kl_bernoulli, logit, sigmoid};
use crate::predictor::Predictor;
use crate::run_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AscentObjective {
    /// KL divergence between predictor and fitted theory at the menu.
    RawLoss,
    /// `−logit(f̂*(x)) · [EU_θ(1) − EU_θ(0)]`, positive when the fitted
    /// theory leans against the predictor's majority choice.
    LogitDisagreement,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AscentCoordinates {
    ProbabilitiesOnly,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectionMode {
    /// Fit on the starting menu and the evolving menu; emit both.
    PairAnchored,
    /// `n` menus evolving jointly, the first being the starting menu.
    Free(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GdaConfig {
    pub step_size: f64,
    pub iterations: usize,
    pub basis: UtilityBasis,
    pub objective: AscentObjective,
    pub coordinates: AscentCoordinates,
    pub mode: CollectionMode,
    pub fit: FitConfig,
    /// Payoffs per lottery for sampled starting menus.
    pub payoffs: usize,
    pub seed: u64,
}

impl Default for GdaConfig {
    fn default() -> Self {
        Self {
            step_size: 0.01,
            iterations: 50,
            basis: UtilityBasis::polynomial(6, 0.0, 10.0).expect("valid default basis"),
            objective: AscentObjective::LogitDisagreement,
            coordinates: AscentCoordinates::ProbabilitiesOnly,
            mode: CollectionMode::PairAnchored,
            fit: FitConfig::default(),
            payoffs: 2,
            seed: 0,
        }
    }
}

impl GdaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid("step_size must be nonnegative and finite"));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        if self.payoffs == 0 {
            return Err(Error::invalid("payoffs must be at least 1"));
        }
        if let CollectionMode::Free(n) = self.mode {
            if n == 0 {
                return Err(Error::invalid("free mode needs at least one menu"));
            }
        }
        Ok(())
    }
}

/// One generator run: the emitted collection plus diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub candidate: ExampleCollection,
    /// Features of the evolving menus after each iteration, concatenated.
    pub trajectory: Vec<Vec<f64>>,
    /// Set when the run stopped on a non-finite value.
    pub flag: Option<String>,
    pub theta: Vec<f64>,
}

/// Ascent objective at the menu `x` and its gradient over all coordinates.
/// Probabilities are clamped away from zero before differentiation.
pub fn ascent_objective(
    kind: AscentObjective,
    predictor: &dyn Predictor,
    spec: &TheorySpec,
    layout: MenuLayout,
    x: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let xc = layout.clamp_probs(x, GRAD_PROB_FLOOR);
    let f = predictor.predict_features(layout, &xc)?;
    let grad_f = predictor.grad_features(layout, &xc)?;
    let eu = spec.eu_difference(layout, &xc)?;
    let grad_eu = spec.eu_difference_grad(layout, &xc)?;
    let out = match kind {
        AscentObjective::LogitDisagreement => {
            let fc = f.clamp(TARGET_CLIP, 1.0 - TARGET_CLIP);
            let l = logit(fc);
            let dl = if f > TARGET_CLIP && f < 1.0 - TARGET_CLIP {
                1.0 / (f * (1.0 - f))
            } else {
                0.0
            };
            let value = -l * eu;
            let grad = grad_f
                .iter()
                .zip(&grad_eu)
                .map(|(gf, ge)| -(dl * gf * eu + l * ge))
                .collect();
            (value, grad)
        }
        AscentObjective::RawLoss => {
            let y = f.clamp(TARGET_CLIP, 1.0 - TARGET_CLIP);
            let d = spec.logit_scale * eu;
            let q = sigmoid(d);
            let value = kl_bernoulli(y, q);
            let dy = logit(y) - d;
            let dd = q - y;
            let grad = grad_f
                .iter()
                .zip(&grad_eu)
                .map(|(gf, ge)| dy * gf + dd * spec.logit_scale * ge)
                .collect();
            (value, grad)
        }
    };
    Ok(out)
}

fn clamp_payoffs(layout: MenuLayout, x: &mut [f64], low: f64, high: f64) {
    for l in 0..2 {
        for i in layout.payoff_range(l) {
            x[i] = x[i].clamp(low, high);
        }
    }
}

pub(crate) fn labeled(predictor: &dyn Predictor, menus: &[Menu]) -> Result<Vec<Example>> {
    menus
        .iter()
        .map(|m| Ok(Example::new(m.clone(), predictor.predict(m)?)))
        .collect()
}

/// Runs the descent-ascent iteration from `x0`.
pub fn gda_run<R: Rng + ?Sized>(
    predictor: &dyn Predictor,
    cfg: &GdaConfig,
    x0: &Menu,
    rng: &mut R,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let layout = x0.layout();
    let (low, high) = cfg.basis.domain();
    let mut fixed: Vec<Menu> = Vec::new();
    let mut moving: Vec<Vec<f64>> = vec![x0.to_features()];
    match cfg.mode {
        CollectionMode::PairAnchored => fixed.push(x0.clone()),
        CollectionMode::Free(n) => {
            for _ in 1..n {
                moving.push(sample_random_menu(rng, layout.j, low, high)?.to_features());
            }
        }
    }
    let mut trajectory = Vec::with_capacity(cfg.iterations);
    let mut theta = vec![0.0; cfg.basis.dim()];
    let mut flag = None;
    let mut completed = 0;
    'outer: for s in 0..cfg.iterations {
        let current: Vec<Menu> = moving
            .iter()
            .map(|x| Menu::from_features(layout.j, x))
            .collect::<Result<_>>()?;
        let collection: Vec<Menu> = fixed.iter().cloned().chain(current).collect();
        let fit = fit_theta(&cfg.basis, &labeled(predictor, &collection)?, &cfg.fit, rng)?;
        theta = fit.theta;
        let spec = TheorySpec::new(cfg.basis.clone(), theta.clone(), cfg.fit.logit_scale)?;
        let mut next = moving.clone();
        for x in next.iter_mut() {
            let (_, grad) = ascent_objective(cfg.objective, predictor, &spec, layout, x)?;
            if grad.iter().any(|g| !g.is_finite()) {
                flag = Some(format!("non-finite ascent gradient at iteration {s}"));
                break 'outer;
            }
            for (i, g) in grad.iter().enumerate() {
                if cfg.coordinates == AscentCoordinates::All || layout.is_prob(i) {
                    x[i] += cfg.step_size * g;
                }
            }
            layout.project_probs(x);
            clamp_payoffs(layout, x, low, high);
        }
        moving = next;
        trajectory.push(moving.concat());
        completed = s + 1;
    }
    let finals: Vec<Menu> = moving
        .iter()
        .map(|x| Menu::from_features(layout.j, x))
        .collect::<Result<_>>()?;
    let menus: Vec<Menu> = fixed.into_iter().chain(finals).collect();
    let provenance = Provenance {
        procedure: "adversarial".into(),
        iterations: completed,
        ..Provenance::default()
    };
    Ok(RunOutcome {
        candidate: ExampleCollection::new(labeled(predictor, &menus)?, provenance)?,
        trajectory,
        flag,
        theta,
    })
}

/// Independent runs from random starting menus. Run `i` draws everything
/// from the generator seeded by `(cfg.seed, i)`, so output does not depend
/// on scheduling.
pub fn generate_adversarial(
    predictor: &dyn Predictor,
    cfg: &GdaConfig,
    num_inits: usize,
) -> Result<Vec<RunOutcome>> {
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
            let mut out = gda_run(predictor, cfg, &x0, &mut rng)?;
            out.candidate.provenance.master_seed = cfg.seed;
            out.candidate.provenance.run_index = i as u64;
            Ok(out)
        })
        .collect()
}
