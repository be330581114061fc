use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, Tensor, Var};

use crate::error::Result;

/// Adam with L2 weight decay added to the gradient (the classic, coupled form).
pub struct Adam {
    vars: Vec<(String, Var)>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    steps: i32,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, lr: f64, weight_decay: f64) -> Self {
        Self {
            vars,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Collect the gradients of the tracked variables by name, detached from
    /// the graph. Variables the loss does not reach are absent.
    pub fn collect(&self, grads: &GradStore) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(name, var)| grads.get(var).map(|g| (name.clone(), g.detach())))
            .collect()
    }

    /// One update using the given gradients. Variables without a gradient are
    /// left untouched, including their moment estimates.
    pub fn step(&mut self, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps);
        let bc2 = 1.0 - self.beta2.powi(self.steps);
        for (name, var) in &self.vars {
            let Some(g) = grads.get(name) else { continue };
            // moments must not hold on to this step's graph
            let theta = var.as_tensor().detach();
            let g = if self.weight_decay != 0.0 {
                (g.detach() + (&theta * self.weight_decay)?)?
            } else {
                g.detach()
            };
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (
                    ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                    ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                ),
                None => ((&g * (1.0 - self.beta1))?, (g.sqr()? * (1.0 - self.beta2))?),
            };
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            var.set(&(&theta - (update * self.lr)?)?)?;
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(())
    }
}
