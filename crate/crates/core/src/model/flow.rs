//! Rectified-flow interpolation and the velocity regression loss.

use serde::{Deserialize, Serialize};

use crate::condition::Latent;
use crate::error::{ensure_arg, Error, Result};

/// A point on the straight path from noise `x0` to data `x1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub x0: Latent,
    pub x1: Latent,
    pub t: f64,
    pub x_t: Latent,
    pub v_t: Latent,
}

/// `x_t = t x1 + (1 - t) x0`, `v_t = x1 - x0`.
pub fn fm_interpolate(x0: &Latent, x1: &Latent, t: f64) -> Result<FlowSample> {
    ensure_arg!((0.0..=1.0).contains(&t), "t = {t} outside [0, 1]");
    if !x0.same_shape(x1) {
        return Err(Error::Shape(format!("x0 {:?} vs x1 {:?}", x0.shape(), x1.shape())));
    }
    let mut x_t = x0.clone();
    let mut v_t = x0.clone();
    for (i, (&a, &b)) in x0.data.iter().zip(&x1.data).enumerate() {
        x_t.data[i] = t * b + (1.0 - t) * a;
        v_t.data[i] = b - a;
    }
    Ok(FlowSample {
        x0: x0.clone(),
        x1: x1.clone(),
        t,
        x_t,
        v_t,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Mean squared error.
    #[default]
    Mse,
    /// Mean absolute error.
    L1,
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Self::Mse),
            "l1" => Ok(Self::L1),
            other => Err(Error::InvalidArgument(format!("unknown loss mode {other:?}"))),
        }
    }
}

pub fn fm_loss(pred: &Latent, target: &Latent, mode: LossMode) -> Result<f64> {
    if !pred.same_shape(target) {
        return Err(Error::Shape(format!("pred {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    let n = pred.data.len().max(1) as f64;
    let diffs = pred.data.iter().zip(&target.data).map(|(p, t)| p - t);
    Ok(match mode {
        LossMode::Mse => diffs.map(|d| d * d).sum::<f64>() / n,
        LossMode::L1 => diffs.map(f64::abs).sum::<f64>() / n,
    })
}

/// Gradient of [`fm_loss`] w.r.t. `pred`. The L1 subgradient at zero is 0.
pub fn fm_loss_grad(pred: &Latent, target: &Latent, mode: LossMode) -> Latent {
    let n = pred.data.len().max(1) as f64;
    let mut g = pred.clone();
    for (gv, (p, t)) in g.data.iter_mut().zip(pred.data.iter().zip(&target.data)) {
        let d = p - t;
        *gv = match mode {
            LossMode::Mse => 2.0 * d / n,
            LossMode::L1 => {
                if d == 0.0 {
                    0.0
                } else {
                    d.signum() / n
                }
            }
        };
    }
    g
}
