//! Scalar helpers shared by the choice models.

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Entropy of a Bernoulli(y) variable in nats; `0 ln 0 = 0`.
pub fn bernoulli_entropy(y: f64) -> f64 {
    let term = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
    term(y) + term(1.0 - y)
}

/// Cross-entropy of target `y` against `σ(d)`.
pub fn cross_entropy_logit(y: f64, d: f64) -> f64 {
    softplus(d) - y * d
}

/// `KL(y ‖ σ(d))`.
pub fn kl_logit(y: f64, d: f64) -> f64 {
    (cross_entropy_logit(y, d) - bernoulli_entropy(y)).max(0.0)
}

/// `KL(y ‖ q)` between Bernoulli distributions.
pub fn kl_bernoulli(y: f64, q: f64) -> f64 {
    let term = |a: f64, b: f64| if a > 0.0 { a * (a / b).ln() } else { 0.0 };
    term(y, q) + term(1.0 - y, 1.0 - q)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
pub(crate) fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|i| {
            y[i] = x[i] + h;
            let up = f(&y);
            y[i] = x[i] - h;
            let down = f(&y);
            y[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Norm-wise relative error with a small absolute floor.
#[cfg(test)]
pub(crate) fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-6)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logistic_helpers() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(800.0) - 1.0).abs() < 1e-15 && sigmoid(-800.0) >= 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(1000.0) - 1000.0).abs() < 1e-12);
        assert!((logit(sigmoid(1.7)) - 1.7).abs() < 1e-12);
    }

    #[test]
    fn kl_forms_agree() {
        for &(y, d) in &[(0.2, 0.0), (0.8, 1.3), (1e-6, -4.0), (0.5, 0.0)] {
            let direct = kl_bernoulli(y, sigmoid(d));
            assert!((kl_logit(y, d) - direct).abs() < 1e-12, "{y} {d}");
        }
        assert_eq!(kl_logit(0.5, 0.0), 0.0);
    }
}
