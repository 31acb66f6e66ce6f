//! SGD, Adam with L2 weight decay, and polynomial learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, NamedArray};
use crate::error::{CodaError, Result};
use crate::grid::DenseGrid;
use crate::nets::{BoundParams, ModelParams};
use crate::tape::Gradients;

/// Gradients for every parameter of `bound`, in parameter order.
pub fn collect_grads(bound: &BoundParams, grads: &Gradients) -> Vec<DenseGrid> {
    bound.vars().map(|(_, v)| grads.get(v)).collect()
}

fn check_shapes(op: &'static str, params: &ModelParams, grads: &[DenseGrid]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(CodaError::shape(op, format!("{} params vs {} grads", params.len(), grads.len())));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(CodaError::shape(
                op,
                format!("`{name}` is {:?} but its gradient is {:?}", p.shape(), g.shape()),
            ));
        }
    }
    Ok(())
}

/// `w ← w − lr·g`.
pub fn sgd_step(params: &mut ModelParams, grads: &[DenseGrid], lr: f64) -> Result<()> {
    check_shapes("sgd_step", params, grads)?;
    for ((_, p), g) in params.iter_mut().zip(grads) {
        for (w, &gv) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * gv;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<DenseGrid>,
    pub v: Vec<DenseGrid>,
    pub t: u64,
}

impl AdamState {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let zeros: Vec<DenseGrid> = params.iter().map(|(_, p)| DenseGrid::zeros(p.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn write_to(&self, ckpt: &mut Checkpoint, prefix: &str, params: &ModelParams) {
        ckpt.insert(format!("{prefix}t"), NamedArray::scalar(self.t as f64));
        for (((name, p), m), v) in params.iter().zip(&self.m).zip(&self.v) {
            let dims = p.shape().to_vec();
            ckpt.insert(format!("{prefix}m.{name}"), NamedArray::from_grid(m, dims.clone()));
            ckpt.insert(format!("{prefix}v.{name}"), NamedArray::from_grid(v, dims));
        }
    }

    pub fn read_from(ckpt: &Checkpoint, prefix: &str, params: &ModelParams) -> Result<Self> {
        let missing = |what: String| CodaError::Format {
            format: "CKPT",
            detail: format!("missing optimizer array `{what}`"),
        };
        let t = ckpt.scalar(&format!("{prefix}t")).ok_or_else(|| missing(format!("{prefix}t")))? as u64;
        let mut state = AdamState {
            m: vec![],
            v: vec![],
            t,
        };
        for (name, p) in params.iter() {
            for (slot, key) in [(&mut state.m, "m"), (&mut state.v, "v")] {
                let full = format!("{prefix}{key}.{name}");
                let arr = ckpt.get(&full).ok_or_else(|| missing(full.clone()))?;
                let grid = arr.to_grid()?;
                if grid.shape() != p.shape() {
                    return Err(CodaError::shape("adam state", format!("`{full}` has shape {:?}", grid.shape())));
                }
                slot.push(grid);
            }
        }
        Ok(state)
    }
}

/// Bias-corrected Adam. The L2 term `weight_decay·w` is added to the
/// gradient before the moment updates.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[DenseGrid],
    state: &mut AdamState,
    hyper: &AdamHyper,
    lr: f64,
) -> Result<()> {
    check_shapes("adam_step", params, grads)?;
    if state.m.len() != params.len() {
        return Err(CodaError::shape("adam_step", "optimizer state does not match parameters"));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for ((((_, p), g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((w, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let g = gv + hyper.weight_decay * *w;
            *mv = hyper.beta1 * *mv + (1.0 - hyper.beta1) * g;
            *vv = hyper.beta2 * *vv + (1.0 - hyper.beta2) * g * g;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

/// `base_lr · (1 − t/t_max)^power`, zero once `t ≥ t_max`.
pub fn poly_decay(base_lr: f64, t: usize, t_max: usize, power: f64) -> f64 {
    if t >= t_max {
        return 0.0;
    }
    base_lr * (1.0 - t as f64 / t_max as f64).powf(power)
}

/// Optimizer choice as it appears in configs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default = "default_wd")]
        weight_decay: f64,
    },
}

fn default_beta1() -> f64 {
    AdamHyper::default().beta1
}
fn default_beta2() -> f64 {
    AdamHyper::default().beta2
}
fn default_eps() -> f64 {
    AdamHyper::default().eps
}
fn default_wd() -> f64 {
    AdamHyper::default().weight_decay
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        let h = AdamHyper::default();
        OptimizerConfig::Adam {
            lr,
            beta1: h.beta1,
            beta2: h.beta2,
            eps: h.eps,
            weight_decay: h.weight_decay,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        let lr = self.lr();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(CodaError::config(format!("{field}.lr"), format!("must be positive, got {lr}")));
        }
        if let OptimizerConfig::Adam { beta1, beta2, eps, weight_decay, .. } = *self {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2)) {
                return Err(CodaError::config(format!("{field}.beta"), "betas must lie in [0, 1)"));
            }
            if !(eps > 0.0) || !(weight_decay >= 0.0) {
                return Err(CodaError::config(format!("{field}"), "eps must be > 0 and weight_decay ≥ 0"));
            }
        }
        Ok(())
    }
}

/// An optimizer bound to one model.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub adam: Option<AdamState>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &ModelParams) -> Self {
        let adam = matches!(config, OptimizerConfig::Adam { .. }).then(|| AdamState::zeros_like(params));
        Optimizer { config, adam }
    }

    /// Apply one update with learning rate `lr`.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[DenseGrid], lr: f64) -> Result<()> {
        match self.config {
            OptimizerConfig::Sgd { .. } => sgd_step(params, grads, lr),
            OptimizerConfig::Adam { beta1, beta2, eps, weight_decay, .. } => {
                let hyper = AdamHyper { beta1, beta2, eps, weight_decay };
                let state = self.adam.as_mut().expect("adam state allocated in new");
                adam_step(params, grads, state, &hyper, lr)
            }
        }
    }

    pub fn write_to(&self, ckpt: &mut Checkpoint, prefix: &str, params: &ModelParams) {
        if let Some(state) = &self.adam {
            state.write_to(ckpt, prefix, params);
        }
    }

    /// Restore state saved by [`Optimizer::write_to`]; missing state starts fresh.
    pub fn read_from(config: OptimizerConfig, ckpt: &Checkpoint, prefix: &str, params: &ModelParams) -> Result<Self> {
        let mut opt = Optimizer::new(config, params);
        if opt.adam.is_some() && ckpt.get(&format!("{prefix}t")).is_some() {
            opt.adam = Some(AdamState::read_from(ckpt, prefix, params)?);
        }
        Ok(opt)
    }
}
