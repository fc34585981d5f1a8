//! Training objectives: the adversarial, contextual, latent and contextual
//! adversarial terms, their label-gated composites, and the discriminator
//! objective.
//!
//! Every function takes tape variables and returns a scalar tape variable so
//! gradients flow through both generator applications of the second-pass
//! reconstruction. Weights and epsilon live in plain `f64` config structs
//! and are cast to the tape element type at use.

use crate::graph::{Tape, Var};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("loss error: empty batch")]
    EmptyBatch,
    #[error("loss error: shape mismatch between {0:?} and {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("loss error: {0}")]
    Invalid(String),
}

/// Weighting coefficients of the composite objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_adv: f64,
    pub lambda_con: f64,
    pub lambda_adcon: f64,
    pub lambda_lat: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_adv: 1.0,
            lambda_con: 50.0,
            lambda_adcon: 15.0,
            lambda_lat: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [
            ("lambda_adv", self.lambda_adv),
            ("lambda_con", self.lambda_con),
            ("lambda_adcon", self.lambda_adcon),
            ("lambda_lat", self.lambda_lat),
        ] {
            if v.is_nan() || v < 0.0 {
                return Err(LossError::Invalid(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-term scalar values recorded for every optimizer step.
///
/// The four component fields hold the normal-subset terms feeding the
/// normality loss; `l_anomaly` is the composite over the anomalous subset.
/// Empty subsets contribute zeros.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_adv: f64,
    pub l_con: f64,
    pub l_adcon: f64,
    pub l_lat: f64,
    pub l_normality: f64,
    pub l_anomaly: f64,
    pub l_total: f64,
    pub l_disc: f64,
}

impl LossBreakdown {
    /// Name of the first non-finite field, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("l_adv", self.l_adv),
            ("l_con", self.l_con),
            ("l_adcon", self.l_adcon),
            ("l_lat", self.l_lat),
            ("l_normality", self.l_normality),
            ("l_anomaly", self.l_anomaly),
            ("l_total", self.l_total),
            ("l_disc", self.l_disc),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| name)
    }
}

/// Constant target of a binary cross-entropy term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryTarget {
    /// Target 1 ("real").
    Real,
    /// Target 0 ("fake").
    Fake,
}

fn check_same_shape<T: Scalar>(tape: &Tape<T>, a: Var, b: Var) -> Result<(), LossError> {
    if tape.shape(a) != tape.shape(b) {
        return Err(LossError::ShapeMismatch(
            tape.shape(a).to_vec(),
            tape.shape(b).to_vec(),
        ));
    }
    Ok(())
}

/// Mean binary cross-entropy of probabilities against a constant target.
pub fn adversarial_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    target: BinaryTarget,
) -> Result<Var, LossError> {
    if tape.value(pred).is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let lo = T::cast(PROB_EPS);
    let hi = T::cast(1.0 - PROB_EPS);
    let p = tape.clamp(pred, lo, hi);
    let inner = match target {
        BinaryTarget::Real => p,
        BinaryTarget::Fake => tape.affine(p, -T::one(), T::one()), // 1 - p
    };
    let logs = tape.ln(inner);
    let mean = tape.mean_all(logs);
    Ok(tape.affine(mean, -T::one(), T::zero()))
}

/// Mean absolute reconstruction error.
pub fn contextual_loss<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    x_hat: Var,
) -> Result<Var, LossError> {
    check_same_shape(tape, x, x_hat)?;
    let d = tape.sub(x, x_hat);
    let a = tape.abs(d);
    Ok(tape.mean_all(a))
}

/// Mean squared error between latent feature batches.
pub fn latent_loss<T: Scalar>(tape: &mut Tape<T>, z: Var, z_hat: Var) -> Result<Var, LossError> {
    check_same_shape(tape, z, z_hat)?;
    let d = tape.sub(z, z_hat);
    let s = tape.sqr(d);
    Ok(tape.mean_all(s))
}

/// Negated mean absolute difference between a reconstruction and its own
/// second-pass reconstruction; always <= 0, and minimizing it pushes the
/// second pass to fail.
pub fn contextual_adversarial_loss<T: Scalar>(
    tape: &mut Tape<T>,
    x_hat: Var,
    x_hat_prime: Var,
) -> Result<Var, LossError> {
    check_same_shape(tape, x_hat, x_hat_prime)?;
    let d = tape.sub(x_hat, x_hat_prime);
    let a = tape.abs(d);
    let mean = tape.mean_all(a);
    Ok(tape.affine(mean, -T::one(), T::zero()))
}

/// Component terms of the normality objective. `l_adcon` is absent when the
/// contextual adversarial mechanism is switched off.
pub struct NormalityTerms {
    pub l_adv: Var,
    pub l_con: Var,
    pub l_adcon: Option<Var>,
    pub l_lat: Var,
}

/// Weighted sum of the normal-subset terms.
pub fn normality_loss<T: Scalar>(
    tape: &mut Tape<T>,
    terms: &NormalityTerms,
    weights: &LossWeights,
) -> Var {
    let mut acc = tape.affine(terms.l_adv, T::cast(weights.lambda_adv), T::zero());
    let con = tape.affine(terms.l_con, T::cast(weights.lambda_con), T::zero());
    acc = tape.add(acc, con);
    if let Some(adcon) = terms.l_adcon {
        let adcon = tape.affine(adcon, T::cast(weights.lambda_adcon), T::zero());
        acc = tape.add(acc, adcon);
    }
    let lat = tape.affine(terms.l_lat, T::cast(weights.lambda_lat), T::zero());
    tape.add(acc, lat)
}

/// Component terms of the anomaly objective, computed on the true-anomaly
/// subset with the adversarial term targeted at 0.
pub struct AnomalyTerms {
    pub l_adv: Var,
    pub l_adcon: Option<Var>,
    pub l_lat: Var,
}

/// Reciprocal composite that rewards failed reconstruction of anomalies:
/// `λ_adv/(L_adv+eps) + λ_adcon/(-L_adcon+eps) + λ_lat/(L_lat+eps)`.
///
/// `-L_adcon >= 0` by construction, so every denominator is at least `eps`.
pub fn anomaly_loss<T: Scalar>(
    tape: &mut Tape<T>,
    terms: &AnomalyTerms,
    weights: &LossWeights,
    eps: f64,
) -> Var {
    let eps = T::cast(eps);
    let reciprocal = |tape: &mut Tape<T>, term: Var, negate: bool, lambda: f64| -> Var {
        let sign = if negate { -T::one() } else { T::one() };
        let shifted = tape.affine(term, sign, eps);
        let inv = tape.recip(shifted);
        tape.affine(inv, T::cast(lambda), T::zero())
    };
    let mut acc = reciprocal(tape, terms.l_adv, false, weights.lambda_adv);
    if let Some(adcon) = terms.l_adcon {
        let mid = reciprocal(tape, adcon, true, weights.lambda_adcon);
        acc = tape.add(acc, mid);
    }
    let lat = reciprocal(tape, terms.l_lat, false, weights.lambda_lat);
    tape.add(acc, lat)
}

/// Label-gated total: the normality loss over the normal subset plus the
/// anomaly loss over the anomalous subset, either contributing zero when its
/// subset is empty.
pub fn final_loss<T: Scalar>(
    tape: &mut Tape<T>,
    normal: Option<Var>,
    anomaly: Option<Var>,
) -> Result<Var, LossError> {
    match (normal, anomaly) {
        (Some(n), Some(a)) => Ok(tape.add(n, a)),
        (Some(n), None) => Ok(n),
        (None, Some(a)) => Ok(a),
        (None, None) => Err(LossError::EmptyBatch),
    }
}

/// Discriminator objective: `BCE(D(x̂), 0) + BCE(D(x), 1)` on normal data,
/// `BCE(D(x), 0)` on true anomalies, summed per subset for mixed batches.
pub fn discriminator_loss<T: Scalar>(
    tape: &mut Tape<T>,
    normal: Option<(Var, Var)>,
    anomaly: Option<Var>,
) -> Result<Var, LossError> {
    let normal_term = normal
        .map(|(y_real, y_fake)| {
            let fake = adversarial_loss(tape, y_fake, BinaryTarget::Fake)?;
            let real = adversarial_loss(tape, y_real, BinaryTarget::Real)?;
            Ok::<Var, LossError>(tape.add(fake, real))
        })
        .transpose()?;
    let anomaly_term = anomaly
        .map(|y_real| adversarial_loss(tape, y_real, BinaryTarget::Fake))
        .transpose()?;
    final_loss(tape, normal_term, anomaly_term)
}
