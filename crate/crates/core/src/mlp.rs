//! Fully connected network trained on choice rates.
//!
//! Hidden layers use rectified-linear units and the output is logistic.
//! Inputs are the flattened menu with payoffs rescaled to `[0, 1]`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ChoiceDataset;
use crate::error::{Error, Result};
use crate::lottery::{Menu, MenuLayout};
use crate::math::{cross_entropy_logit, sigmoid};

/// Affine input map `x̃_i = (x_i − offset_i) · scale_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputScaling {
    /// Payoffs mapped from `[low, high]` to `[0, 1]`; probabilities untouched.
    pub fn for_payoff_range(layout: MenuLayout, low: f64, high: f64) -> Self {
        let d = layout.dim();
        let mut offset = vec![0.0; d];
        let mut scale = vec![1.0; d];
        for i in 0..d {
            if !layout.is_prob(i) {
                offset[i] = low;
                scale[i] = 1.0 / (high - low);
            }
        }
        Self { offset, scale }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    /// Input dimension, hidden widths, then 1.
    pub widths: Vec<usize>,
    /// Per layer, a `widths[l + 1] × widths[l]` matrix in row-major order.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub input_scaling: InputScaling,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainLoss {
    CrossEntropy,
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub epochs: usize,
    pub step_size: f64,
    pub seed: u64,
    pub loss: TrainLoss,
    pub payoff_range: [f64; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            batch_size: 256,
            epochs: 200,
            step_size: 0.5,
            seed: 0,
            loss: TrainLoss::CrossEntropy,
            payoff_range: [0.0, 10.0],
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub model: MlpModel,
    /// Full-data training loss after each accepted epoch, starting with the initial loss.
    pub loss_history: Vec<f64>,
    pub final_step_size: f64,
}

struct Trace {
    /// Post-activation values per layer, input first.
    activations: Vec<Vec<f64>>,
    /// Output pre-activation.
    logit: f64,
}

impl MlpModel {
    /// Glorot-uniform initialization with zero biases.
    pub fn init<R: Rng + ?Sized>(widths: Vec<usize>, input_scaling: InputScaling, rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || *widths.last().unwrap() != 1 || widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid("widths must be nonzero and end with 1"));
        }
        if input_scaling.offset.len() != widths[0] || input_scaling.scale.len() != widths[0] {
            return Err(Error::Dimension {
                expected: widths[0],
                got: input_scaling.offset.len(),
            });
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push((0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect());
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            widths,
            weights,
            biases,
            input_scaling,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    fn forward(&self, x: &[f64]) -> Trace {
        let s = &self.input_scaling;
        let input: Vec<f64> = x
            .iter()
            .zip(s.offset.iter().zip(&s.scale))
            .map(|(v, (o, c))| (v - o) * c)
            .collect();
        let mut activations = vec![input];
        let mut logit = 0.0;
        for l in 0..self.layers() {
            let n_in = self.widths[l];
            let prev = &activations[l];
            let w = &self.weights[l];
            let mut out = self.biases[l].clone();
            for (r, o) in out.iter_mut().enumerate() {
                let row = &w[r * n_in..(r + 1) * n_in];
                *o += row.iter().zip(prev).map(|(a, b)| a * b).sum::<f64>();
            }
            if l + 1 == self.layers() {
                logit = out[0];
            } else {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            activations.push(out);
        }
        Trace { activations, logit }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn predict_features(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(sigmoid(self.forward(x).logit))
    }

    pub fn predict(&self, menu: &Menu) -> Result<f64> {
        self.predict_features(&menu.to_features())
    }

    /// Propagates `d(output)/d(logit) = seed` backward. Returns the gradient
    /// with respect to the raw input and accumulates parameter gradients.
    fn backward(&self, trace: &Trace, seed: f64, mut param_grads: Option<&mut ParamGrads>) -> Vec<f64> {
        let mut delta = vec![seed];
        for l in (0..self.layers()).rev() {
            let n_in = self.widths[l];
            let prev = &trace.activations[l];
            let w = &self.weights[l];
            if let Some(g) = param_grads.as_deref_mut() {
                for (r, d) in delta.iter().enumerate() {
                    g.biases[l][r] += d;
                    let row = &mut g.weights[l][r * n_in..(r + 1) * n_in];
                    for (gw, a) in row.iter_mut().zip(prev) {
                        *gw += d * a;
                    }
                }
            }
            let mut next = vec![0.0; n_in];
            for (r, d) in delta.iter().enumerate() {
                let row = &w[r * n_in..(r + 1) * n_in];
                for (nv, wv) in next.iter_mut().zip(row) {
                    *nv += d * wv;
                }
            }
            if l > 0 {
                for (nv, a) in next.iter_mut().zip(prev) {
                    if *a <= 0.0 {
                        *nv = 0.0;
                    }
                }
            }
            delta = next;
        }
        delta
            .iter()
            .zip(&self.input_scaling.scale)
            .map(|(d, c)| d * c)
            .collect()
    }

    /// Gradient of the predicted probability over the raw menu features.
    pub fn grad_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let trace = self.forward(x);
        let f = sigmoid(trace.logit);
        Ok(self.backward(&trace, f * (1.0 - f), None))
    }

    pub fn grad(&self, menu: &Menu) -> Result<Vec<f64>> {
        self.grad_features(&menu.to_features())
    }

    fn zero_grads(&self) -> ParamGrads {
        ParamGrads {
            weights: self.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    /// Mean weighted loss and its parameter gradient over the given rows.
    fn loss_and_grads(&self, data: &Prepared, idx: &[usize], loss: TrainLoss) -> (f64, ParamGrads) {
        let mut grads = self.zero_grads();
        let mut total = 0.0;
        let mut weight_sum = 0.0;
        for &i in idx {
            let (x, y, w) = (&data.x[i], data.y[i], data.w[i]);
            let trace = self.forward(x);
            let f = sigmoid(trace.logit);
            let (l, dl) = match loss {
                TrainLoss::CrossEntropy => (cross_entropy_logit(y, trace.logit), f - y),
                TrainLoss::Mse => ((f - y).powi(2), 2.0 * (f - y) * f * (1.0 - f)),
            };
            total += w * l;
            weight_sum += w;
            self.backward(&trace, w * dl, Some(&mut grads));
        }
        grads.scale(1.0 / weight_sum);
        (total / weight_sum, grads)
    }

    fn check_dataset(&self, ds: &ChoiceDataset) -> Result<Prepared> {
        if ds.is_empty() {
            return Err(Error::Empty);
        }
        let data = Prepared::new(ds);
        self.check_dim(&data.x[0])?;
        Ok(data)
    }

    /// Mean weighted loss over the dataset.
    pub fn dataset_loss(&self, ds: &ChoiceDataset, loss: TrainLoss) -> Result<f64> {
        Ok(self.full_loss(&self.check_dataset(ds)?, loss))
    }

    /// Mean weighted loss over the dataset and its parameter gradient.
    pub fn dataset_loss_grad(&self, ds: &ChoiceDataset, loss: TrainLoss) -> Result<(f64, ParamGrads)> {
        let data = self.check_dataset(ds)?;
        let idx: Vec<usize> = (0..data.x.len()).collect();
        Ok(self.loss_and_grads(&data, &idx, loss))
    }

    fn full_loss(&self, data: &Prepared, loss: TrainLoss) -> f64 {
        let mut total = 0.0;
        let mut weight_sum = 0.0;
        for i in 0..data.x.len() {
            let logit = self.forward(&data.x[i]).logit;
            let l = match loss {
                TrainLoss::CrossEntropy => cross_entropy_logit(data.y[i], logit),
                TrainLoss::Mse => (sigmoid(logit) - data.y[i]).powi(2),
            };
            total += data.w[i] * l;
            weight_sum += data.w[i];
        }
        total / weight_sum
    }

    fn apply(&mut self, grads: &ParamGrads, step: f64) {
        for (w, g) in self.weights.iter_mut().zip(&grads.weights) {
            w.iter_mut().zip(g).for_each(|(a, b)| *a -= step * b);
        }
        for (w, g) in self.biases.iter_mut().zip(&grads.biases) {
            w.iter_mut().zip(g).for_each(|(a, b)| *a -= step * b);
        }
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.biases).flatten().all(|v| v.is_finite())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: MlpModel = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let l = self.layers();
        if self.widths.len() < 2 || self.weights.len() != l || self.biases.len() != l {
            return Err(Error::invalid("layer count does not match widths"));
        }
        for i in 0..l {
            if self.weights[i].len() != self.widths[i] * self.widths[i + 1]
                || self.biases[i].len() != self.widths[i + 1]
            {
                return Err(Error::invalid(format!("layer {i} has inconsistent shape")));
            }
        }
        if self.widths[l] != 1 {
            return Err(Error::invalid("output width must be 1"));
        }
        if !self.is_finite() {
            return Err(Error::NonFinite("model weights"));
        }
        Ok(())
    }
}

/// Gradient of a loss in the weights and biases, shaped like the model's.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl ParamGrads {
    fn scale(&mut self, c: f64) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            v.iter_mut().for_each(|x| *x *= c);
        }
    }
}

struct Prepared {
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    w: Vec<f64>,
}

impl Prepared {
    fn new(ds: &ChoiceDataset) -> Self {
        Self {
            x: ds.rows.iter().map(|r| r.menu.to_features()).collect(),
            y: ds.rows.iter().map(|r| r.outcome).collect(),
            w: ds.rows.iter().map(|r| r.weight).collect(),
        }
    }
}

/// Mini-batch gradient descent. After each epoch the full training loss is
/// measured; an epoch that raises it is undone and the step size halved.
pub fn train_mlp(train: &ChoiceDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    let j = train.payoff_count().ok_or(Error::Empty)?;
    if cfg.batch_size == 0 || !(cfg.step_size > 0.0) {
        return Err(Error::invalid("batch size and step size must be positive"));
    }
    let layout = MenuLayout::new(j);
    let [low, high] = cfg.payoff_range;
    let mut widths = vec![layout.dim()];
    widths.extend(&cfg.hidden);
    widths.push(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = MlpModel::init(widths, InputScaling::for_payoff_range(layout, low, high), &mut rng)?;
    let data = Prepared::new(train);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = cfg.step_size;
    let mut loss = model.full_loss(&data, cfg.loss);
    let mut history = vec![loss];
    for epoch in 0..cfg.epochs {
        let snapshot = model.clone();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (_, grads) = model.loss_and_grads(&data, batch, cfg.loss);
            model.apply(&grads, step);
        }
        let new_loss = model.full_loss(&data, cfg.loss);
        if !new_loss.is_finite() || !model.is_finite() {
            if step < 1e-12 {
                return Err(Error::Divergence(format!(
                    "non-finite training loss at epoch {epoch} with step {step:e}"
                )));
            }
            model = snapshot;
            step *= 0.5;
            continue;
        }
        if new_loss > loss {
            model = snapshot;
            step *= 0.5;
        } else {
            loss = new_loss;
        }
        history.push(loss);
    }
    Ok(TrainReport {
        model,
        loss_history: history,
        final_step_size: step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ChoiceRow, OutcomeKind};
    use crate::lottery::sample_random_menu;
    use crate::math::{central_difference, relative_error};

    fn random_model(seed: u64) -> MlpModel {
        let layout = MenuLayout::new(2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = MlpModel::init(vec![8, 6, 5, 1], InputScaling::for_payoff_range(layout, 0.0, 10.0), &mut rng).unwrap();
        for b in m.biases.iter_mut().flatten() {
            *b = rng.gen_range(-0.5..0.5);
        }
        m
    }

    #[test]
    fn input_gradient_matches_differences() {
        let m = random_model(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let x = sample_random_menu(&mut rng, 2, 0.0, 10.0).unwrap().to_features();
            let g = m.grad_features(&x).unwrap();
            let fd = central_difference(|y| m.predict_features(y).unwrap(), &x, 1e-6);
            assert!(relative_error(&g, &fd) < 1e-4);
        }
    }

    #[test]
    fn weight_gradient_matches_differences() {
        let m = random_model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ds = synthetic(&mut rng, 16, |_| 0.3);
        let data = Prepared::new(&ds);
        let idx: Vec<usize> = (0..16).collect();
        let (_, grads) = m.loss_and_grads(&data, &idx, TrainLoss::CrossEntropy);
        for _ in 0..20 {
            let l = rng.gen_range(0..m.weights.len());
            let k = rng.gen_range(0..m.weights[l].len());
            let h = 1e-6;
            let mut up = m.clone();
            up.weights[l][k] += h;
            let mut down = m.clone();
            down.weights[l][k] -= h;
            let fd = (up.full_loss(&data, TrainLoss::CrossEntropy) - down.full_loss(&data, TrainLoss::CrossEntropy)) / (2.0 * h);
            let g = grads.weights[l][k];
            assert!((g - fd).abs() <= 1e-4 * g.abs().max(fd.abs()).max(1e-6), "{g} {fd}");
        }
    }

    fn synthetic(rng: &mut ChaCha8Rng, n: usize, target: impl Fn(&Menu) -> f64) -> ChoiceDataset {
        let rows = (0..n)
            .map(|_| {
                let menu = sample_random_menu(rng, 2, 0.0, 10.0).unwrap();
                ChoiceRow {
                    outcome: target(&menu),
                    menu,
                    outcome_kind: OutcomeKind::Rate,
                    weight: 1.0,
                }
            })
            .collect();
        ChoiceDataset::new(rows).unwrap()
    }

    #[test]
    fn constant_target_is_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ds = synthetic(&mut rng, 300, |_| 0.5);
        let cfg = TrainConfig {
            hidden: vec![8],
            epochs: 400,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let report = train_mlp(&ds, &cfg).unwrap();
        for r in &ds.rows {
            let p = report.model.predict(&r.menu).unwrap();
            assert!((p - 0.5).abs() < 0.01, "{p} {:?}", &report.loss_history[report.loss_history.len() - 3..]);
        }
        assert!(report.loss_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn training_is_reproducible_and_serializable() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ds = synthetic(&mut rng, 100, |m| if m.lottery1.expected_value() > m.lottery0.expected_value() { 0.8 } else { 0.2 });
        let cfg = TrainConfig {
            hidden: vec![6],
            epochs: 5,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let a = train_mlp(&ds, &cfg).unwrap();
        let b = train_mlp(&ds, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        let back = MlpModel::from_json(&a.model.to_json().unwrap()).unwrap();
        for r in &ds.rows {
            assert_eq!(back.predict(&r.menu).unwrap(), a.model.predict(&r.menu).unwrap());
        }
    }

    #[test]
    fn symmetrized_model_is_neutral_on_duplicates() {
        // Output logit w·(h(x) − h(swap x)) makes f(x) = 1 − f(swap x).
        let layout = MenuLayout::new(2);
        let mut m = MlpModel::init(vec![8, 4, 1], InputScaling::for_payoff_range(layout, 0.0, 10.0), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let first: Vec<f64> = m.weights[0][..8].to_vec();
        let swapped: Vec<f64> = first[4..].iter().chain(&first[..4]).copied().collect();
        for r in 0..4 {
            let src = if r % 2 == 0 { &first } else { &swapped };
            m.weights[0][r * 8..(r + 1) * 8].copy_from_slice(src);
        }
        m.biases[0] = vec![0.1; 4];
        m.weights[1] = vec![1.0, -1.0, 0.5, -0.5];
        m.biases[1] = vec![0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let menu = sample_random_menu(&mut rng, 2, 0.0, 10.0).unwrap();
        let dup = Menu::new(menu.lottery0.clone(), menu.lottery0.clone()).unwrap();
        assert!((m.predict(&dup).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_shapes() {
        let m = random_model(1);
        assert!(m.predict_features(&[0.0; 7]).is_err());
        let mut bad = m.clone();
        bad.biases[0].pop();
        assert!(MlpModel::from_json(&serde_json::to_string(&bad).unwrap()).is_err());
    }
}
