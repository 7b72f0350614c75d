//! The predictive model `f̂*` searched by the generators, and the
//! parametric fit of the weighting model to choice data.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::cpt::{CptModel, CptParams};
use crate::dataset::ChoiceDataset;
use crate::error::{Error, Result};
use crate::eut::TheorySpec;
use crate::lottery::{Menu, MenuLayout};
use crate::math::{cross_entropy_logit, sigmoid};
use crate::mlp::MlpModel;

/// A choice-probability function with a feature gradient.
pub trait Predictor: Send + Sync {
    fn predict_features(&self, layout: MenuLayout, x: &[f64]) -> Result<f64>;

    fn grad_features(&self, layout: MenuLayout, x: &[f64]) -> Result<Vec<f64>>;

    fn predict(&self, menu: &Menu) -> Result<f64> {
        self.predict_features(menu.layout(), &menu.to_features())
    }

    fn grad(&self, menu: &Menu) -> Result<Vec<f64>> {
        self.grad_features(menu.layout(), &menu.to_features())
    }
}

impl Predictor for CptModel {
    fn predict_features(&self, layout: MenuLayout, x: &[f64]) -> Result<f64> {
        Ok(self.choice_prob_features(layout, x))
    }

    fn grad_features(&self, layout: MenuLayout, x: &[f64]) -> Result<Vec<f64>> {
        self.choice_prob_grad_features(layout, x)
    }
}

impl Predictor for MlpModel {
    fn predict_features(&self, _layout: MenuLayout, x: &[f64]) -> Result<f64> {
        MlpModel::predict_features(self, x)
    }

    fn grad_features(&self, _layout: MenuLayout, x: &[f64]) -> Result<Vec<f64>> {
        MlpModel::grad_features(self, x)
    }
}

impl Predictor for TheorySpec {
    fn predict_features(&self, layout: MenuLayout, x: &[f64]) -> Result<f64> {
        self.choice_prob_features(layout, x)
    }

    fn grad_features(&self, layout: MenuLayout, x: &[f64]) -> Result<Vec<f64>> {
        self.choice_prob_grad_features(layout, x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictorHandle {
    Cpt(CptModel),
    Mlp(MlpModel),
    /// Weighting model with parameters estimated from data.
    CptFit(CptModel),
}

impl Predictor for PredictorHandle {
    fn predict_features(&self, layout: MenuLayout, x: &[f64]) -> Result<f64> {
        match self {
            PredictorHandle::Cpt(m) | PredictorHandle::CptFit(m) => m.predict_features(layout, x),
            PredictorHandle::Mlp(m) => Predictor::predict_features(m, layout, x),
        }
    }

    fn grad_features(&self, layout: MenuLayout, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            PredictorHandle::Cpt(m) | PredictorHandle::CptFit(m) => m.grad_features(layout, x),
            PredictorHandle::Mlp(m) => Predictor::grad_features(m, layout, x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub cross_entropy: f64,
}

/// Weighted mean squared error and cross-entropy over the dataset.
pub fn evaluate(model: &dyn Predictor, ds: &ChoiceDataset) -> Result<Metrics> {
    if ds.is_empty() {
        return Err(Error::Empty);
    }
    let (mut se, mut ce, mut wsum) = (0.0, 0.0, 0.0);
    for r in &ds.rows {
        let f = model.predict(&r.menu)?.clamp(1e-15, 1.0 - 1e-15);
        se += r.weight * (f - r.outcome).powi(2);
        ce += r.weight * -(r.outcome * f.ln() + (1.0 - r.outcome) * (1.0 - f).ln());
        wsum += r.weight;
    }
    Ok(Metrics {
        mse: se / wsum,
        cross_entropy: ce / wsum,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CptFit {
    pub params: CptParams,
    pub cross_entropy: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Value of one lottery and its derivatives in `(ln δ, ln γ)`.
fn value_param_grad(z: &[f64], p: &[f64], delta: f64, gamma: f64) -> (f64, [f64; 2]) {
    let a: Vec<f64> = p.iter().map(|&q| if q > 0.0 { q.powf(gamma) } else { 0.0 }).collect();
    let da_dgamma: Vec<f64> = p
        .iter()
        .zip(&a)
        .map(|(&q, &ak)| if q > 0.0 { ak * q.ln() } else { 0.0 })
        .collect();
    let total: f64 = a.iter().sum();
    let total_d: f64 = da_dgamma.iter().sum();
    let mut value = 0.0;
    let (mut d_delta, mut d_gamma) = (0.0, 0.0);
    for k in 0..z.len() {
        let rest = total - a[k];
        let den = delta * a[k] + rest;
        if den <= 0.0 {
            continue;
        }
        let den2 = den * den;
        value += delta * a[k] / den * z[k];
        d_delta += a[k] * rest / den2 * z[k];
        // dπ_k/dγ through a_k (own) and through the other terms (cross).
        let own = delta * rest / den2 * da_dgamma[k];
        let cross = -delta * a[k] / den2 * (total_d - da_dgamma[k]);
        d_gamma += (own + cross) * z[k];
    }
    (value, [delta * d_delta, gamma * d_gamma])
}

/// Maximum-likelihood fit of `(δ, γ)` by Fisher scoring in `(ln δ, ln γ)`
/// with backtracking.
pub fn fit_cpt_params(ds: &ChoiceDataset) -> Result<CptFit> {
    fit_cpt_params_with_scale(ds, 1.0)
}

pub fn fit_cpt_params_with_scale(ds: &ChoiceDataset, logit_scale: f64) -> Result<CptFit> {
    if ds.is_empty() {
        return Err(Error::Empty);
    }
    let prepared: Vec<(Vec<f64>, MenuLayout, f64, f64)> = ds
        .rows
        .iter()
        .map(|r| (r.menu.to_features(), r.menu.layout(), r.outcome, r.weight))
        .collect();
    let wsum: f64 = prepared.iter().map(|r| r.3).sum();
    let evaluate = |log_params: Vector2<f64>, with_derivs: bool| {
        let (delta, gamma) = (log_params[0].exp(), log_params[1].exp());
        let mut loss = 0.0;
        let mut g = Vector2::zeros();
        let mut h = Matrix2::zeros();
        for (x, layout, y, w) in &prepared {
            let mut diff = 0.0;
            let mut dd = Vector2::zeros();
            for (l, sign) in [(0usize, -1.0), (1usize, 1.0)] {
                let (v, dv) = value_param_grad(&x[layout.payoff_range(l)], &x[layout.prob_range(l)], delta, gamma);
                diff += sign * v;
                dd += sign * Vector2::new(dv[0], dv[1]);
            }
            let d = logit_scale * diff;
            loss += w * cross_entropy_logit(*y, d);
            if with_derivs {
                let f = sigmoid(d);
                let dd = dd * logit_scale;
                g += dd * (w * (f - y));
                h += dd * dd.transpose() * (w * f * (1.0 - f));
            }
        }
        (loss / wsum, g / wsum, h / wsum)
    };

    let mut best: Option<(Vector2<f64>, f64, usize, bool)> = None;
    for start in [(1.0f64, 1.0f64), (0.8, 0.4)] {
        let mut theta = Vector2::new(start.0.ln(), start.1.ln());
        let (mut loss, _, _) = evaluate(theta, false);
        let mut converged = false;
        let mut iterations = 0;
        for it in 0..100 {
            iterations = it + 1;
            let (_, g, h) = evaluate(theta, true);
            if g.norm() < 1e-10 {
                converged = true;
                break;
            }
            let mut m = h;
            m[(0, 0)] += 1e-10;
            m[(1, 1)] += 1e-10;
            let mut step = match m.try_inverse() {
                Some(inv) => -(inv * g),
                None => -g,
            };
            let max_len = 1.0;
            if step.norm() > max_len {
                step *= max_len / step.norm();
            }
            let mut accepted = false;
            for _ in 0..30 {
                let cand = theta + step;
                let (cl, _, _) = evaluate(cand, false);
                if cl.is_finite() && cl <= loss {
                    let gain = loss - cl;
                    theta = cand;
                    loss = cl;
                    accepted = true;
                    if gain < 1e-15 {
                        converged = true;
                    }
                    break;
                }
                step *= 0.5;
            }
            if !accepted || converged {
                converged = true;
                break;
            }
        }
        if best.as_ref().map_or(true, |b| loss < b.1) {
            best = Some((theta, loss, iterations, converged));
        }
    }
    let (theta, loss, iterations, converged) = best.expect("a start was evaluated");
    Ok(CptFit {
        params: CptParams {
            delta: theta[0].exp(),
            gamma: theta[1].exp(),
        },
        cross_entropy: loss,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cpt::{simulate_choices, SimulationKind};
    use crate::lottery::sample_random_menu;
    use crate::math::{central_difference, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parameter_gradient_matches_differences() {
        let z = [1.0, 4.0, 9.0];
        let p = [0.2, 0.5, 0.3];
        let (_, g) = value_param_grad(&z, &p, 0.8, 0.45);
        let f = |v: &[f64]| value_param_grad(&z, &p, v[0].exp(), v[1].exp()).0;
        let fd = central_difference(f, &[0.8f64.ln(), 0.45f64.ln()], 1e-6);
        assert!(relative_error(&g, &fd) < 1e-7);
    }

    #[test]
    fn recovers_parameters_on_small_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let truth = CptParams::preset("bruhin-b").unwrap();
        let menus: Vec<Menu> = (0..1000).map(|_| sample_random_menu(&mut rng, 2, 0.0, 10.0).unwrap()).collect();
        let ds = simulate_choices(&mut rng, &menus, &CptModel::new(truth), SimulationKind::Binary).unwrap();
        let fit = fit_cpt_params(&ds).unwrap();
        assert!(fit.converged);
        assert!((fit.params.delta - truth.delta).abs() < 0.2, "{:?}", fit.params);
        assert!((fit.params.gamma - truth.gamma).abs() < 0.2, "{:?}", fit.params);
    }

    #[test]
    fn evaluation_metrics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = CptModel::new(CptParams::IDENTITY);
        let menus: Vec<Menu> = (0..50).map(|_| sample_random_menu(&mut rng, 2, 0.0, 10.0).unwrap()).collect();
        let mut ds = simulate_choices(&mut rng, &menus, &model, SimulationKind::Binary).unwrap();
        for r in ds.rows.iter_mut() {
            r.outcome = model.predict(&r.menu).unwrap();
        }
        assert!(evaluate(&model, &ds).unwrap().mse < 1e-30);
        assert!(evaluate(&model, &ChoiceDataset { rows: vec![] }).is_err());
    }

    #[test]
    fn handle_serializes_with_kind_tag() {
        let h = PredictorHandle::Cpt(CptModel::new(CptParams::preset("bruhin-a").unwrap()));
        let s = serde_json::to_string(&h).unwrap();
        assert!(s.starts_with(r#"{"kind":"cpt""#), "{s}");
        let back: PredictorHandle = serde_json::from_str(&s).unwrap();
        assert_eq!(back, h);
    }
}
