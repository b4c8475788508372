//! Training objectives: adversarial loss, gradient penalty, and the
//! multi-scale perceptual reconstruction loss, plus the weighted totals.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nets::{BoundParams, FeatureExtractor};

pub const LAMBDA_REC_DEFAULT: f64 = 0.8;
pub const LAMBDA_GRAD_DEFAULT: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_grad: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_rec: LAMBDA_REC_DEFAULT,
            lambda_grad: LAMBDA_GRAD_DEFAULT,
        }
    }
}

fn check_scores(g: &Graph, scores: Var, what: &str) -> Result<()> {
    for &v in &g.value(scores).data {
        if !(v > 0.0 && v < 1.0) {
            return Err(if v.is_finite() {
                Error::ScoreDomain(v)
            } else {
                Error::NonFinite(what.to_string())
            });
        }
    }
    Ok(())
}

/// Two-sided adversarial objective
/// `mean(log D(real)) + mean(log(1 - D(fake)))`.
///
/// D maximizes this; G minimizes it (the real term is constant for G). Scores
/// must lie strictly inside (0,1). With every score at 1/2 the value is
/// exactly `-2 ln 2`.
pub fn adversarial_loss(g: &mut Graph, real_scores: Var, fake_scores: Var) -> Result<Var> {
    check_scores(g, real_scores, "real scores")?;
    check_scores(g, fake_scores, "fake scores")?;
    let log_real = g.log(real_scores);
    let real_term = g.mean_all(log_real);
    let neg_fake = g.mul_scalar(fake_scores, -1.0);
    let one_minus = g.add_scalar(neg_fake, 1.0);
    let log_fake = g.log(one_minus);
    let fake_term = g.mean_all(log_fake);
    Ok(g.add(real_term, fake_term))
}

/// The piece of the adversarial objective the generator actually descends.
///
/// Default (saturating, matching the minimax form): `mean(log(1 - D(fake)))`.
/// Non-saturating alternative: `-mean(log D(fake))`.
pub fn generator_adversarial_term(
    g: &mut Graph,
    fake_scores: Var,
    non_saturating: bool,
) -> Result<Var> {
    check_scores(g, fake_scores, "fake scores")?;
    if non_saturating {
        let log_fake = g.log(fake_scores);
        let m = g.mean_all(log_fake);
        Ok(g.mul_scalar(m, -1.0))
    } else {
        let neg = g.mul_scalar(fake_scores, -1.0);
        let one_minus = g.add_scalar(neg, 1.0);
        let log_term = g.log(one_minus);
        Ok(g.mean_all(log_term))
    }
}

/// Gradient penalty `mean_n (||grad_yhat D(yhat_n)||_2 - 1)^2` on the
/// interpolates `yhat_n = eps_n * real_n + (1 - eps_n) * fake_n`.
///
/// `score` maps the interpolate batch to per-sample scalar scores, shape [N].
/// The gradient is taken on the tape, so the returned penalty is itself
/// differentiable with respect to the score function's parameters.
pub fn gradient_penalty<S>(
    g: &mut Graph,
    real: &Tensor,
    fake: &Tensor,
    eps: &[f64],
    score: S,
) -> Result<Var>
where
    S: FnOnce(&mut Graph, Var) -> Result<Var>,
{
    if real.shape != fake.shape {
        return Err(Error::ShapeMismatch(format!(
            "gradient penalty batches: {:?} vs {:?}",
            real.shape, fake.shape
        )));
    }
    let n = real.shape[0];
    if eps.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "epsilon count {} for batch of {n}",
            eps.len()
        )));
    }
    let per = real.len() / n;
    let mut mixed = vec![0.0; real.len()];
    for i in 0..n {
        let e = eps[i];
        assert!((0.0..=1.0).contains(&e), "epsilon outside [0,1]");
        for j in 0..per {
            let idx = i * per + j;
            mixed[idx] = e * real.data[idx] + (1.0 - e) * fake.data[idx];
        }
    }
    let y_hat = g.leaf(Tensor::from_vec(&real.shape, mixed), true);
    let scores = score(g, y_hat)?;
    if g.value(scores).shape != vec![n] {
        return Err(Error::ShapeMismatch(format!(
            "per-sample scores: got {:?}, want [{n}]",
            g.value(scores).shape
        )));
    }
    // Samples are independent, so the gradient of the score sum splits into
    // the per-sample gradients.
    let total = g.sum_all(scores);
    let grads = g.backward(total)?;
    let gy = grads[y_hat.0]
        .ok_or_else(|| Error::NonFinite("score did not depend on interpolates".to_string()))?;
    let sq = g.mul(gy, gy);
    let norm_sq = g.sum_per_sample(sq);
    let norm = g.sqrt(norm_sq);
    let shifted = g.add_scalar(norm, -1.0);
    let pen = g.mul(shifted, shifted);
    Ok(g.mean_all(pen))
}

/// Multi-scale perceptual reconstruction loss:
/// `(1/M) * sum_i (1/t_i) * ||features(y_i) - features(out_i)||_1`,
/// where `t_i` counts the feature elements at level i.
///
/// `features` is pluggable so tests can substitute an identity extractor.
pub fn reconstruction_loss<F>(
    g: &mut Graph,
    mut features: F,
    inputs: &[Var],
    outputs: &[Var],
) -> Result<Var>
where
    F: FnMut(&mut Graph, Var) -> Vec<Var>,
{
    if inputs.is_empty() {
        return Err(Error::EmptyInput("reconstruction levels".to_string()));
    }
    if inputs.len() != outputs.len() {
        return Err(Error::LevelMismatch {
            expected: inputs.len(),
            got: outputs.len(),
        });
    }
    let m = inputs.len();
    let mut total: Option<Var> = None;
    for (y, out) in inputs.iter().zip(outputs) {
        let f_in = features(g, *y);
        let f_out = features(g, *out);
        assert_eq!(f_in.len(), f_out.len());
        let t_i: usize = f_in.iter().map(|v| g.value(*v).len()).sum();
        let mut level: Option<Var> = None;
        for (a, b) in f_in.iter().zip(&f_out) {
            let d = g.sub(*a, *b);
            let ad = g.abs(d);
            let s = g.sum_all(ad);
            level = Some(match level {
                Some(acc) => g.add(acc, s),
                None => s,
            });
        }
        let scaled = g.mul_scalar(level.unwrap(), 1.0 / t_i as f64);
        total = Some(match total {
            Some(acc) => g.add(acc, scaled),
            None => scaled,
        });
    }
    Ok(g.mul_scalar(total.unwrap(), 1.0 / m as f64))
}

/// Reconstruction loss through a frozen feature extractor.
pub fn perceptual_reconstruction_loss(
    g: &mut Graph,
    phi: &FeatureExtractor,
    phi_params: &BoundParams,
    inputs: &[Var],
    outputs: &[Var],
) -> Result<Var> {
    reconstruction_loss(g, |g, v| phi.forward(g, phi_params, v), inputs, outputs)
}

/// Scalar summary of one training step's objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub adv: f64,
    pub rec: f64,
    pub grad_pen: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossReport {
    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in [
            ("adv", self.adv),
            ("rec", self.rec),
            ("grad_pen", self.grad_pen),
            ("total_g", self.total_g),
            ("total_d", self.total_d),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("loss term {name} = {v}")));
            }
        }
        Ok(())
    }
}

/// Combine the raw objective values into the weighted totals the two players
/// optimize: `total_g = adv + lambda_rec * rec` and
/// `total_d = -adv + lambda_grad * grad_pen`.
pub fn total_losses(adv: f64, rec: f64, grad_pen: f64, w: &LossWeights) -> LossReport {
    LossReport {
        adv,
        rec,
        grad_pen,
        total_g: adv + w.lambda_rec * rec,
        total_d: -adv + w.lambda_grad * grad_pen,
    }
}
