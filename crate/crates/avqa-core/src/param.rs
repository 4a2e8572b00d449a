//! Named parameter storage shared by all model blocks.
//!
//! The autodiff [`Graph`](crate::graph::Graph) is rebuilt for every forward
//! pass, so long-lived weights live outside it in [`Param`] structs. Each
//! forward pass *binds* them onto the tape (trainable weights via
//! `Graph::param`, frozen weights via `Graph::input`) and records the
//! resulting tensor ids in a [`Bindings`] list so the trainer can read
//! gradients back out by name after `backward`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::graph::{Graph, TensorId};

/// A named weight tensor with its shape. Names are stable identifiers used
/// for checkpoints, optimizer state, and gradient reporting, so they must be
/// unique across a model.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    /// All-zero parameter.
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Param { name: name.into(), shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    /// Constant-filled parameter.
    pub fn full(name: impl Into<String>, shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Param { name: name.into(), shape: shape.to_vec(), data: vec![value; numel] }
    }

    /// Uniform init on `[-bound, bound)` drawn from the supplied stream.
    pub fn uniform(name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
        Param { name: name.into(), shape: shape.to_vec(), data }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Deterministic per-model init stream: one ChaCha stream per seed, consumed
/// in fixed construction order.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Records which tape tensor each trainable parameter was bound to during one
/// forward pass.
#[derive(Debug, Default)]
pub struct Bindings {
    entries: Vec<(String, TensorId)>,
}

impl Bindings {
    pub fn new() -> Self {
        Bindings { entries: Vec::new() }
    }

    /// Binds a trainable parameter onto the tape and remembers the id.
    pub fn bind(&mut self, g: &mut Graph, p: &Param) -> Result<TensorId> {
        let id = g.param(p.data.clone(), &p.shape)?;
        self.entries.push((p.name.clone(), id));
        Ok(id)
    }

    /// Binds a frozen parameter; it participates in the forward pass but is
    /// never listed for gradient collection.
    pub fn bind_frozen(&mut self, g: &mut Graph, p: &Param) -> Result<TensorId> {
        g.input(p.data.clone(), &p.shape)
    }

    /// `(name, id)` pairs in binding order.
    pub fn entries(&self) -> &[(String, TensorId)] {
        &self.entries
    }

    /// Looks a bound tensor up by parameter name.
    pub fn id_of(&self, name: &str) -> Option<TensorId> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, id)| *id)
    }

    /// Adds this pass's gradients into `acc` (keyed by parameter name).
    /// Parameters that did not participate in the loss contribute nothing.
    pub fn collect_grads(&self, g: &Graph, acc: &mut std::collections::BTreeMap<String, Vec<f64>>) -> Result<()> {
        for (name, id) in &self.entries {
            if let Some(grad) = g.grad(*id) {
                match acc.get_mut(name) {
                    Some(buf) => {
                        if buf.len() != grad.len() {
                            return Err(CoreError::Config(format!(
                                "gradient length changed between passes for `{name}`"
                            )));
                        }
                        for (b, v) in buf.iter_mut().zip(grad) {
                            *b += v;
                        }
                    }
                    None => {
                        acc.insert(name.clone(), grad.to_vec());
                    }
                }
            }
        }
        Ok(())
    }
}
