//! Training objective: pixel-wise binary cross-entropy plus the uncertainty
//! penalty `1 - (2p - 1)^2`, weighted by a cosine ramp `lambda(t)`.

use std::f64::consts::PI;
use std::rc::Rc;

use crate::autograd::{Tape, Var};
use crate::error::{CodError, Result};
use crate::tensor::Tensor;

/// Log clamp applied to predictions inside the cross-entropy.
pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_LAMBDA_MAX: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_max: f64,
    pub total_epochs: usize,
    pub epsilon: f64,
}

impl LossConfig {
    pub fn new(lambda_max: f64, total_epochs: usize) -> Result<Self> {
        let cfg = Self {
            lambda_max,
            total_epochs,
            epsilon: DEFAULT_EPSILON,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_max >= 0.0 && self.lambda_max.is_finite()) {
            return Err(CodError::InvalidInput(format!("lambda_max {} must be >= 0", self.lambda_max)));
        }
        if self.total_epochs == 0 {
            return Err(CodError::InvalidInput("total_epochs must be positive".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-3) {
            return Err(CodError::InvalidInput(format!("epsilon {} must lie in (0, 1e-3]", self.epsilon)));
        }
        Ok(())
    }
}

/// One evaluation of the objective, for logging.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct LossBreakdown {
    pub bce: f64,
    pub ual: f64,
    pub lambda: f64,
    pub total: f64,
}

fn check_prediction(p: &Tensor) -> Result<()> {
    match p.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(CodError::InvalidInput(format!("prediction value {v} outside [0, 1]"))),
        None => Ok(()),
    }
}

fn check_pair(p: &Tensor, g: &Tensor) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(CodError::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            p.shape(),
            g.shape()
        )));
    }
    check_prediction(p)?;
    check_mask(g)
}

pub fn check_mask(g: &Tensor) -> Result<()> {
    match g.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(v) => Err(CodError::InvalidInput(format!("ground-truth value {v} is not 0 or 1"))),
        None => Ok(()),
    }
}

pub fn bce_loss(p: &Tensor, g: &Tensor) -> Result<f64> {
    bce_loss_eps(p, g, DEFAULT_EPSILON)
}

pub fn bce_loss_eps(p: &Tensor, g: &Tensor, eps: f64) -> Result<f64> {
    check_pair(p, g)?;
    let tape = Tape::new();
    let pv = tape.leaf(p.clone());
    let l = tape.bce(pv, Rc::new(g.clone()), eps)?;
    Ok(tape.scalar(l))
}

pub fn ual_loss(p: &Tensor) -> Result<f64> {
    check_prediction(p)?;
    let tape = Tape::new();
    let pv = tape.leaf(p.clone());
    Ok(tape.scalar(tape.ual(pv)))
}

pub fn lambda_schedule(epoch: usize, cfg: &LossConfig) -> Result<f64> {
    if epoch > cfg.total_epochs {
        return Err(CodError::InvalidInput(format!(
            "epoch {epoch} beyond the {}-epoch schedule",
            cfg.total_epochs
        )));
    }
    let t = epoch as f64 / cfg.total_epochs as f64;
    Ok(cfg.lambda_max * (1.0 - (PI * t).cos()) / 2.0)
}

pub fn total_loss(p: &Tensor, g: &Tensor, epoch: usize, cfg: &LossConfig) -> Result<LossBreakdown> {
    let lambda = lambda_schedule(epoch, cfg)?;
    let bce = bce_loss_eps(p, g, cfg.epsilon)?;
    let ual = ual_loss(p)?;
    Ok(LossBreakdown {
        bce,
        ual,
        lambda,
        total: bce + lambda * ual,
    })
}

/// Differentiable objective on the tape. Returns `(total, bce, ual)`.
pub fn total_loss_var(tape: &Tape, p: Var, g: Rc<Tensor>, lambda: f64, eps: f64) -> Result<(Var, Var, Var)> {
    check_mask(&g)?;
    let bce = tape.bce(p, g, eps)?;
    let ual = tape.ual(p);
    let total = if lambda == 0.0 {
        bce
    } else {
        let weighted = tape.scale(ual, lambda);
        tape.add(bce, weighted)?
    };
    Ok((total, bce, ual))
}
