use crate::nn::ParameterSet;
use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

/// SGD with optional (Nesterov) momentum, L2 weight decay and a stepped schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    /// `(epoch, lr)` drops for a run of `reference_epochs` epochs. Shorter or longer
    /// runs place each drop at the same fraction of training.
    pub milestones: Vec<(usize, f64)>,
    pub reference_epochs: usize,
}

impl Default for OptimizerConfig {
    /// lr 0.1, Nesterov momentum 0.9, weight decay 5e-4, drops to 0.06, 0.012 and
    /// 0.0024 at epochs 20, 40 and 50 of 60.
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 5e-4,
            milestones: vec![(20, 0.06), (40, 0.012), (50, 0.0024)],
            reference_epochs: 60,
        }
    }
}

impl OptimizerConfig {
    /// Plain gradient descent at a fixed rate.
    pub fn plain(lr: f64) -> Self {
        Self {
            lr,
            momentum: 0.0,
            nesterov: false,
            weight_decay: 0.0,
            milestones: Vec::new(),
            reference_epochs: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("optimizer: {m}")));
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        if !ok(self.lr) {
            return bad(format!("lr {} must be >= 0", self.lr));
        }
        if !ok(self.momentum) {
            return bad(format!("momentum {} must be >= 0", self.momentum));
        }
        if !ok(self.weight_decay) {
            return bad(format!("weight_decay {} must be >= 0", self.weight_decay));
        }
        if self.nesterov && self.momentum == 0.0 {
            return bad("nesterov needs a non-zero momentum".into());
        }
        if !self.milestones.is_empty() && self.reference_epochs == 0 {
            return bad("reference_epochs must be positive when milestones are set".into());
        }
        if let Some((e, lr)) = self.milestones.iter().find(|(_, lr)| !ok(*lr)) {
            return bad(format!("milestone lr {lr} at epoch {e} must be >= 0"));
        }
        if self.milestones.windows(2).any(|w| w[0].0 > w[1].0) {
            return bad("milestones must be sorted by epoch".into());
        }
        Ok(())
    }

    /// Learning rate for `epoch` (0-based) of a run lasting `epochs`.
    pub fn lr_at(&self, epoch: usize, epochs: usize) -> f64 {
        let mut lr = self.lr;
        for &(at, v) in &self.milestones {
            if epoch * self.reference_epochs >= at * epochs {
                lr = v;
            }
        }
        lr
    }
}

/// Optimizer state. Momentum buffers follow the parameter-set order.
#[derive(Debug, Clone)]
pub struct Sgd<S> {
    cfg: OptimizerConfig,
    buffers: Option<Vec<Vec<S>>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self { cfg, buffers: None }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// `d = g + wd theta; b = mu b + d; theta -= lr (d + mu b)` (Nesterov) or
    /// `theta -= lr b`. The first step seeds `b = d`.
    pub fn step(&mut self, params: &mut ParameterSet<S>, grads: &[Tensor<S>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::InvalidConfig(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        let (mu, wd, lr) = (S::lit(self.cfg.momentum), S::lit(self.cfg.weight_decay), S::lit(lr));
        let use_momentum = self.cfg.momentum != 0.0;
        let fresh = self.buffers.is_none();
        let buffers = self
            .buffers
            .get_or_insert_with(|| grads.iter().map(|g| vec![S::zero(); g.len()]).collect());
        for ((i, (name, p)), g) in params.iter_mut().enumerate().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(Error::InvalidConfig(format!(
                    "gradient for '{name}' has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.value.shape()
                )));
            }
            let buf = &mut buffers[i];
            for ((t, &gv), b) in p.value.data_mut().iter_mut().zip(g.data()).zip(buf.iter_mut()) {
                let mut d = gv;
                if wd != S::zero() {
                    d += wd * *t;
                }
                if use_momentum {
                    *b = if fresh { d } else { mu * *b + d };
                    d = if self.cfg.nesterov { d + mu * *b } else { *b };
                }
                *t -= lr * d;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Scope;

    fn one(v: f64) -> ParameterSet<f64> {
        let mut p = ParameterSet::new();
        p.insert("w", Scope::Backbone, Tensor::vector(vec![v]));
        p
    }

    #[test]
    fn paper_schedule() {
        let c = OptimizerConfig::default();
        let lrs: Vec<f64> = [0, 19, 20, 39, 40, 49, 50, 59]
            .iter()
            .map(|&e| c.lr_at(e, 60))
            .collect();
        assert_eq!(lrs, vec![0.1, 0.1, 0.06, 0.06, 0.012, 0.012, 0.0024, 0.0024]);
        // six epochs: drops at 2, 4 and 5
        let short: Vec<f64> = (0..6).map(|e| c.lr_at(e, 6)).collect();
        assert_eq!(short, vec![0.1, 0.1, 0.06, 0.06, 0.012, 0.0024]);
    }

    #[test]
    fn plain_step() {
        let mut p = one(1.0);
        let mut o = Sgd::new(OptimizerConfig::plain(0.5));
        o.step(&mut p, &[Tensor::vector(vec![0.4])], 0.5).unwrap();
        assert_eq!(p.get("w").unwrap().value.data(), &[0.8]);
    }

    #[test]
    fn nesterov_matches_hand_recurrence() {
        let cfg = OptimizerConfig {
            milestones: Vec::new(),
            ..OptimizerConfig::default()
        };
        let (mu, wd, lr) = (0.9, 5e-4, 0.1);
        let mut p = one(1.0);
        let mut o = Sgd::new(cfg);
        let (mut theta, mut b) = (1.0f64, 0.0f64);
        for (k, g) in [0.3, -0.2, 0.5].into_iter().enumerate() {
            o.step(&mut p, &[Tensor::vector(vec![g])], lr).unwrap();
            let d = g + wd * theta;
            b = if k == 0 { d } else { mu * b + d };
            theta -= lr * (d + mu * b);
            assert_eq!(p.get("w").unwrap().value.data(), &[theta]);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(OptimizerConfig {
            lr: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(OptimizerConfig {
            momentum: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(OptimizerConfig {
            milestones: vec![(5, 0.1), (2, 0.01)],
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(OptimizerConfig::default().validate().is_ok());
    }
}
