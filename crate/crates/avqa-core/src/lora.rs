//! Low-rank adapters over frozen linear layers.
//!
//! A wrapped layer computes `y = W x + b + (alpha / r) * B A dropout(x)`
//! where `W` (`[out, in]`) and `b` stay frozen, and only the rank-`r`
//! factors `A` (`[r, in]`) and `B` (`[out, r]`) train. `B` starts at zero so
//! the wrapped layer is exactly the base layer at initialization, and the
//! trained update can be folded back into a plain weight with
//! [`LoraLinear::merged_weight`].

use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::graph::{Graph, TensorId};
use crate::param::{Bindings, Param};

/// Adapter hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Dropout probability on the adapter's input path (training mode only).
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig { rank: 8, alpha: 16.0, dropout: 0.1 }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, in_dim: usize, out_dim: usize) -> Result<()> {
        if self.rank == 0 {
            return Err(CoreError::Config("lora rank must be at least 1".into()));
        }
        if self.rank > in_dim.min(out_dim) {
            return Err(CoreError::Config(format!(
                "lora rank {} exceeds min(in={in_dim}, out={out_dim})",
                self.rank
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::Config(format!(
                "lora dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(CoreError::Config(format!("lora alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// A frozen linear layer with trainable low-rank factors.
#[derive(Debug, Clone)]
pub struct LoraLinear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub config: LoraConfig,
    pub base_w: Param,
    pub base_b: Option<Param>,
    pub a: Param,
    pub b: Param,
}

impl LoraLinear {
    /// Creates a wrapped layer named `layer`: the base weight serializes as
    /// `<layer>.weight` (plus `<layer>.bias`), the adapters as
    /// `<layer>.lora.A` and `<layer>.lora.B`. `A` gets a small uniform init,
    /// `B` starts at zero.
    pub fn new(
        layer: &str,
        in_dim: usize,
        out_dim: usize,
        with_bias: bool,
        config: LoraConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate(in_dim, out_dim)?;
        let bound = 1.0 / (in_dim as f64).sqrt();
        let base_w = Param::uniform(format!("{layer}.weight"), &[out_dim, in_dim], bound, rng);
        let base_b = if with_bias {
            Some(Param::zeros(format!("{layer}.bias"), &[out_dim]))
        } else {
            None
        };
        let a = Param::uniform(format!("{layer}.lora.A"), &[config.rank, in_dim], bound, rng);
        let b = Param::zeros(format!("{layer}.lora.B"), &[out_dim, config.rank]);
        Ok(LoraLinear { in_dim, out_dim, config, base_w, base_b, a, b })
    }

    /// Number of parameters that actually train: `r * (in + out)`.
    pub fn trainable_param_count(&self) -> usize {
        self.config.rank * (self.in_dim + self.out_dim)
    }

    /// Frozen parameters (for checkpoints).
    pub fn frozen_params(&self) -> Vec<&Param> {
        let mut ps = vec![&self.base_w];
        if let Some(b) = &self.base_b {
            ps.push(b);
        }
        ps
    }

    /// Trainable parameters: the adapters only.
    pub fn adapter_params(&self) -> Vec<&Param> {
        vec![&self.a, &self.b]
    }

    pub fn adapter_params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.a, &mut self.b]
    }

    pub fn all_params(&self) -> Vec<&Param> {
        let mut ps = self.frozen_params();
        ps.extend(self.adapter_params());
        ps
    }

    /// Folds the trained update into a standalone weight:
    /// `W + (alpha / r) * B A`. The merged layer computes exactly what the
    /// wrapped layer computes in evaluation mode.
    pub fn merged_weight(&self) -> Param {
        let scale = self.config.scaling();
        let r = self.config.rank;
        let mut data = self.base_w.data.clone();
        for o in 0..self.out_dim {
            for i in 0..self.in_dim {
                let mut acc = 0.0;
                for k in 0..r {
                    acc += self.b.data[o * r + k] * self.a.data[k * self.in_dim + i];
                }
                data[o * self.in_dim + i] += scale * acc;
            }
        }
        Param { name: format!("{}.merged", self.base_w.name), shape: vec![self.out_dim, self.in_dim], data }
    }

    /// Binds for a forward pass. The base is always frozen; the adapters are
    /// trainable unless `freeze_adapters`.
    pub fn bind(
        &self,
        g: &mut Graph,
        binds: &mut Bindings,
        freeze_adapters: bool,
    ) -> Result<BoundLora> {
        let base_w = binds.bind_frozen(g, &self.base_w)?;
        let base_b = match &self.base_b {
            Some(b) => Some(binds.bind_frozen(g, b)?),
            None => None,
        };
        let (a, b) = if freeze_adapters {
            (binds.bind_frozen(g, &self.a)?, binds.bind_frozen(g, &self.b)?)
        } else {
            (binds.bind(g, &self.a)?, binds.bind(g, &self.b)?)
        };
        Ok(BoundLora {
            base_w,
            base_b,
            a,
            b,
            scaling: self.config.scaling(),
            dropout: self.config.dropout,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLora {
    base_w: TensorId,
    base_b: Option<TensorId>,
    a: TensorId,
    b: TensorId,
    scaling: f64,
    dropout: f64,
}

/// Forward through a wrapped layer: base path plus scaled low-rank path.
/// `dropout_seed` only matters on training-mode graphs.
pub fn lora_forward(g: &mut Graph, layer: &BoundLora, x: TensorId, dropout_seed: u64) -> Result<TensorId> {
    let base = g.linear(x, layer.base_w, layer.base_b)?;
    let dropped = g.dropout(x, layer.dropout, dropout_seed)?;
    let low = g.linear(dropped, layer.a, None)?;
    let up = g.linear(low, layer.b, None)?;
    let scaled = g.affine(up, layer.scaling, 0.0)?;
    g.add(base, scaled)
}
