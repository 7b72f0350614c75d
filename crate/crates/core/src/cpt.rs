//! Probability-weighting choice model used as the data-generating process.
//!
//! Lottery `(p, z)` is valued as `Σ_j π_j(p) z_j` with the weighting
//! `π_j(p) = δ p_j^γ / (δ p_j^γ + Σ_{k≠j} p_k^γ)`. The probability of picking
//! lottery 1 is the logistic of the scaled value difference.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ChoiceDataset, ChoiceRow, OutcomeKind};
use crate::error::{Error, Result};
use crate::lottery::{Lottery, Menu, MenuLayout};
use crate::math::sigmoid;

/// Smallest probability at which gradients are evaluated.
pub const GRAD_PROB_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CptParams {
    pub delta: f64,
    pub gamma: f64,
}

impl CptParams {
    pub fn new(delta: f64, gamma: f64) -> Result<Self> {
        if !(delta > 0.0 && gamma > 0.0) || !delta.is_finite() || !gamma.is_finite() {
            return Err(Error::invalid(format!(
                "weighting parameters must be positive, got ({delta}, {gamma})"
            )));
        }
        Ok(Self { delta, gamma })
    }

    /// Risk-neutral expected value: identity weighting.
    pub const IDENTITY: CptParams = CptParams {
        delta: 1.0,
        gamma: 1.0,
    };

    /// Calibrated presets by name: `bruhin-a`, `bruhin-b`, `bruhin-c`.
    pub fn preset(name: &str) -> Option<Self> {
        let (delta, gamma) = match name {
            "bruhin-a" => (0.926, 0.377),
            "bruhin-b" => (0.726, 0.309),
            "bruhin-c" => (1.063, 0.451),
            "identity" => (1.0, 1.0),
            _ => return None,
        };
        Some(Self { delta, gamma })
    }

    pub const PRESET_NAMES: [&'static str; 3] = ["bruhin-a", "bruhin-b", "bruhin-c"];
}

/// Weighting function applied to a probability vector. `0^γ` is taken as 0,
/// and a weight whose denominator vanishes is 0.
pub fn prob_weights(p: &[f64], params: CptParams) -> Result<Vec<f64>> {
    if p.is_empty() {
        return Err(Error::Empty);
    }
    Ok(weights_unchecked(p, params))
}

fn pow_or_zero(p: f64, gamma: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        p.powf(gamma)
    }
}

fn weights_unchecked(p: &[f64], params: CptParams) -> Vec<f64> {
    let a: Vec<f64> = p.iter().map(|&q| pow_or_zero(q, params.gamma)).collect();
    let total: f64 = a.iter().sum();
    a.iter()
        .map(|&aj| {
            let den = params.delta * aj + (total - aj);
            if den > 0.0 {
                params.delta * aj / den
            } else {
                0.0
            }
        })
        .collect()
}

/// Weighted payoff sum with linear utility.
pub fn cpt_value(l: &Lottery, params: CptParams) -> f64 {
    value_flat(l.payoffs(), l.probs(), params)
}

fn value_flat(z: &[f64], p: &[f64], params: CptParams) -> f64 {
    weights_unchecked(p, params)
        .iter()
        .zip(z)
        .map(|(w, z)| w * z)
        .sum()
}

/// Value and partial derivatives with respect to payoffs and probabilities.
fn value_grad_flat(z: &[f64], p: &[f64], params: CptParams) -> (f64, Vec<f64>, Vec<f64>) {
    let (delta, gamma) = (params.delta, params.gamma);
    let j = p.len();
    let a: Vec<f64> = p.iter().map(|&q| q.powf(gamma)).collect();
    let da: Vec<f64> = p.iter().map(|&q| gamma * q.powf(gamma - 1.0)).collect();
    let total: f64 = a.iter().sum();
    let mut value = 0.0;
    let mut dz = vec![0.0; j];
    // d value / d a_m accumulated over every weight.
    let mut dvalue_da = vec![0.0; j];
    for k in 0..j {
        let rest = total - a[k];
        let den = delta * a[k] + rest;
        let w = delta * a[k] / den;
        value += w * z[k];
        dz[k] = w;
        let den2 = den * den;
        // dw_k/da_k = δ rest / den²; dw_k/da_m = -δ a_k / den² for m ≠ k.
        let own = delta * rest / den2;
        let cross = -delta * a[k] / den2;
        for m in 0..j {
            dvalue_da[m] += z[k] * if m == k { own } else { cross };
        }
    }
    let dp = dvalue_da.iter().zip(&da).map(|(g, d)| g * d).collect();
    (value, dz, dp)
}

/// The probability-weighting choice model with a logistic shock of the given scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CptModel {
    pub params: CptParams,
    #[serde(default = "unit_scale")]
    pub logit_scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl CptModel {
    pub fn new(params: CptParams) -> Self {
        Self {
            params,
            logit_scale: 1.0,
        }
    }

    pub fn with_scale(params: CptParams, logit_scale: f64) -> Self {
        Self {
            params,
            logit_scale,
        }
    }

    /// Value difference `CPT(lottery 1) - CPT(lottery 0)` on flattened features.
    pub fn value_difference(&self, layout: MenuLayout, x: &[f64]) -> f64 {
        let v = |l: usize| value_flat(&x[layout.payoff_range(l)], &x[layout.prob_range(l)], self.params);
        v(1) - v(0)
    }

    pub fn choice_prob_features(&self, layout: MenuLayout, x: &[f64]) -> f64 {
        sigmoid(self.logit_scale * self.value_difference(layout, x))
    }

    /// Gradient of the choice probability over the flattened features.
    /// Fails when a probability is below [`GRAD_PROB_FLOOR`].
    pub fn choice_prob_grad_features(&self, layout: MenuLayout, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != layout.dim() {
            return Err(Error::Dimension {
                expected: layout.dim(),
                got: x.len(),
            });
        }
        for l in 0..2 {
            if let Some(&p) = x[layout.prob_range(l)].iter().find(|&&p| p < GRAD_PROB_FLOOR) {
                return Err(Error::Boundary(p));
            }
        }
        let mut grad = vec![0.0; layout.dim()];
        let mut diff = 0.0;
        for (l, sign) in [(0usize, -1.0), (1usize, 1.0)] {
            let (v, dz, dp) =
                value_grad_flat(&x[layout.payoff_range(l)], &x[layout.prob_range(l)], self.params);
            diff += sign * v;
            for k in 0..layout.j {
                grad[layout.payoff(l, k)] = sign * dz[k];
                grad[layout.prob(l, k)] = sign * dp[k];
            }
        }
        let f = sigmoid(self.logit_scale * diff);
        let scale = self.logit_scale * f * (1.0 - f);
        grad.iter_mut().for_each(|g| *g *= scale);
        Ok(grad)
    }
}

/// Probability of choosing lottery 1 under unit logistic scale.
pub fn choice_prob(x: &Menu, params: CptParams) -> f64 {
    CptModel::new(params).choice_prob_features(x.layout(), &x.to_features())
}

/// Gradient of [`choice_prob`] over the flattened menu features.
pub fn choice_prob_grad(x: &Menu, params: CptParams) -> Result<Vec<f64>> {
    CptModel::new(params).choice_prob_grad_features(x.layout(), &x.to_features())
}

/// How simulated outcomes are recorded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulationKind {
    /// One Bernoulli draw per menu.
    Binary,
    /// Empirical choice rate over `count` draws per menu.
    Rate(u32),
}

/// Simulates choices on each menu from the model's choice probabilities.
pub fn simulate_choices<R: Rng + ?Sized>(
    rng: &mut R,
    menus: &[Menu],
    model: &CptModel,
    kind: SimulationKind,
) -> Result<ChoiceDataset> {
    if let SimulationKind::Rate(0) = kind {
        return Err(Error::invalid("rate simulation needs a positive draw count"));
    }
    let mut rows = Vec::with_capacity(menus.len());
    for menu in menus {
        let f = model.choice_prob_features(menu.layout(), &menu.to_features());
        let (outcome, outcome_kind) = match kind {
            SimulationKind::Binary => (f64::from(u8::from(rng.gen::<f64>() < f)), OutcomeKind::Binary),
            SimulationKind::Rate(count) => {
                let hits = (0..count).filter(|_| rng.gen::<f64>() < f).count();
                (hits as f64 / f64::from(count), OutcomeKind::Rate)
            }
        };
        rows.push(ChoiceRow {
            menu: menu.clone(),
            outcome,
            outcome_kind,
            weight: 1.0,
        });
    }
    ChoiceDataset::new(rows)
}
