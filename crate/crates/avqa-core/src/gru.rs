//! Bidirectional GRU over per-frame feature vectors.
//!
//! One cell step, with `x` the current frame and `h` the previous hidden
//! state:
//!
//! ```text
//! z = sigmoid(W_z x + U_z h + b_z)          update gate
//! r = sigmoid(W_r x + U_r h + b_r)          reset gate
//! c = tanh(W_h x + U_h (r * h) + b_h)       candidate state
//! h' = (1 - z) * h + z * c
//! ```
//!
//! The encoder runs one pass left-to-right and one right-to-left (optionally
//! sharing weights) from zero initial state, and emits the elementwise sum of
//! the two per-timestep states, so every output row sees both past and
//! future context within the clip.

use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::graph::{Graph, TensorId};
use crate::param::{Bindings, Param};

/// Weights for a single GRU direction. Input-to-hidden matrices are
/// `[hidden, input]`, hidden-to-hidden are `[hidden, hidden]`, biases are
/// `[hidden]`.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_z: Param,
    pub u_z: Param,
    pub b_z: Param,
    pub w_r: Param,
    pub u_r: Param,
    pub b_r: Param,
    pub w_h: Param,
    pub u_h: Param,
    pub b_h: Param,
}

impl GruCell {
    /// Uniform init on `[-1/sqrt(hidden), 1/sqrt(hidden))`.
    pub fn new(prefix: &str, input_dim: usize, hidden_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let mat_in = |n: &str, rng: &mut ChaCha8Rng| {
            Param::uniform(format!("{prefix}.{n}"), &[hidden_dim, input_dim], bound, rng)
        };
        let mat_h = |n: &str, rng: &mut ChaCha8Rng| {
            Param::uniform(format!("{prefix}.{n}"), &[hidden_dim, hidden_dim], bound, rng)
        };
        let vec_h = |n: &str, rng: &mut ChaCha8Rng| {
            Param::uniform(format!("{prefix}.{n}"), &[hidden_dim], bound, rng)
        };
        GruCell {
            input_dim,
            hidden_dim,
            w_z: mat_in("w_z", rng),
            u_z: mat_h("u_z", rng),
            b_z: vec_h("b_z", rng),
            w_r: mat_in("w_r", rng),
            u_r: mat_h("u_r", rng),
            b_r: vec_h("b_r", rng),
            w_h: mat_in("w_h", rng),
            u_h: mat_h("u_h", rng),
            b_h: vec_h("b_h", rng),
        }
    }

    /// All-zero weights (useful for constructing exact test fixtures).
    pub fn zeros(prefix: &str, input_dim: usize, hidden_dim: usize) -> Self {
        let mut rng = crate::param::init_rng(0);
        let mut cell = Self::new(prefix, input_dim, hidden_dim, &mut rng);
        for p in cell.params_mut() {
            for v in &mut p.data {
                *v = 0.0;
            }
        }
        cell
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![
            &self.w_z, &self.u_z, &self.b_z,
            &self.w_r, &self.u_r, &self.b_r,
            &self.w_h, &self.u_h, &self.b_h,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.w_z, &mut self.u_z, &mut self.b_z,
            &mut self.w_r, &mut self.u_r, &mut self.b_r,
            &mut self.w_h, &mut self.u_h, &mut self.b_h,
        ]
    }

    pub fn bind(&self, g: &mut Graph, binds: &mut Bindings, trainable: bool) -> Result<BoundGruCell> {
        let bind_one = |g: &mut Graph, binds: &mut Bindings, p: &Param| {
            if trainable {
                binds.bind(g, p)
            } else {
                binds.bind_frozen(g, p)
            }
        };
        Ok(BoundGruCell {
            w_z: bind_one(g, binds, &self.w_z)?,
            u_z: bind_one(g, binds, &self.u_z)?,
            b_z: bind_one(g, binds, &self.b_z)?,
            w_r: bind_one(g, binds, &self.w_r)?,
            u_r: bind_one(g, binds, &self.u_r)?,
            b_r: bind_one(g, binds, &self.b_r)?,
            w_h: bind_one(g, binds, &self.w_h)?,
            u_h: bind_one(g, binds, &self.u_h)?,
            b_h: bind_one(g, binds, &self.b_h)?,
            hidden_dim: self.hidden_dim,
            input_dim: self.input_dim,
        })
    }
}

/// Tape ids for one direction's weights during a single forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BoundGruCell {
    w_z: TensorId,
    u_z: TensorId,
    b_z: TensorId,
    w_r: TensorId,
    u_r: TensorId,
    b_r: TensorId,
    w_h: TensorId,
    u_h: TensorId,
    b_h: TensorId,
    pub hidden_dim: usize,
    pub input_dim: usize,
}

/// One recurrence step: `x_t` is `[1, input]`, `h_prev` is `[1, hidden]`.
pub fn gru_step(g: &mut Graph, cell: &BoundGruCell, x_t: TensorId, h_prev: TensorId) -> Result<TensorId> {
    let zx = g.linear(x_t, cell.w_z, None)?;
    let zh = g.linear(h_prev, cell.u_z, None)?;
    let zs = g.add(zx, zh)?;
    let zs = g.add_bias(zs, cell.b_z)?;
    let z = g.sigmoid(zs)?;

    let rx = g.linear(x_t, cell.w_r, None)?;
    let rh = g.linear(h_prev, cell.u_r, None)?;
    let rs = g.add(rx, rh)?;
    let rs = g.add_bias(rs, cell.b_r)?;
    let r = g.sigmoid(rs)?;

    let cx = g.linear(x_t, cell.w_h, None)?;
    let gated = g.mul(r, h_prev)?;
    let ch = g.linear(gated, cell.u_h, None)?;
    let cs = g.add(cx, ch)?;
    let cs = g.add_bias(cs, cell.b_h)?;
    let cand = g.tanh(cs)?;

    let keep = g.affine(z, -1.0, 1.0)?; // 1 - z
    let kept = g.mul(keep, h_prev)?;
    let new = g.mul(z, cand)?;
    g.add(kept, new)
}

/// A bidirectional encoder. With `tied` weights the right-to-left pass reuses
/// the left-to-right cell, which makes the encoder exactly symmetric under
/// sequence reversal.
#[derive(Debug, Clone)]
pub struct BiGru {
    pub forward: GruCell,
    /// `None` means tied: the backward direction shares `forward`'s weights.
    pub backward: Option<GruCell>,
}

impl BiGru {
    pub fn new(prefix: &str, input_dim: usize, hidden_dim: usize, tied: bool, rng: &mut ChaCha8Rng) -> Self {
        let forward = GruCell::new(&format!("{prefix}.fwd"), input_dim, hidden_dim, rng);
        let backward = if tied {
            None
        } else {
            Some(GruCell::new(&format!("{prefix}.bwd"), input_dim, hidden_dim, rng))
        };
        BiGru { forward, backward }
    }

    pub fn hidden_dim(&self) -> usize {
        self.forward.hidden_dim
    }

    pub fn input_dim(&self) -> usize {
        self.forward.input_dim
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut ps = self.forward.params();
        if let Some(b) = &self.backward {
            ps.extend(b.params());
        }
        ps
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = self.forward.params_mut();
        if let Some(b) = &mut self.backward {
            ps.extend(b.params_mut());
        }
        ps
    }

    pub fn bind(&self, g: &mut Graph, binds: &mut Bindings, trainable: bool) -> Result<BoundBiGru> {
        let fwd = self.forward.bind(g, binds, trainable)?;
        let bwd = match &self.backward {
            Some(cell) => cell.bind(g, binds, trainable)?,
            None => fwd,
        };
        Ok(BoundBiGru { fwd, bwd })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundBiGru {
    pub fwd: BoundGruCell,
    pub bwd: BoundGruCell,
}

/// Encodes `frames: [T, input]` into `[T, hidden]`, where output row `t` is
/// the sum of the forward state after frames `0..=t` and the backward state
/// after frames `T-1..=t`. Initial states are zero.
pub fn encode_bidirectional(g: &mut Graph, bigru: &BoundBiGru, frames: TensorId) -> Result<TensorId> {
    let shape = g.shape(frames).to_vec();
    let (t_len, dim) = match shape.as_slice() {
        &[t, d] => (t, d),
        other => {
            return Err(CoreError::InvalidShape {
                op: "encode_bidirectional",
                shape: other.to_vec(),
                reason: "frames must be a [T, input_dim] matrix".into(),
            })
        }
    };
    if dim != bigru.fwd.input_dim {
        return Err(CoreError::ShapeMismatch {
            op: "encode_bidirectional",
            lhs: vec![t_len, dim],
            rhs: vec![bigru.fwd.hidden_dim, bigru.fwd.input_dim],
        });
    }

    let hidden = bigru.fwd.hidden_dim;
    let mut h = g.input(vec![0.0; hidden], &[1, hidden])?;
    let mut fwd_states = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let x_t = g.slice_rows(frames, t, 1)?;
        h = gru_step(g, &bigru.fwd, x_t, h)?;
        fwd_states.push(h);
    }

    let mut h_b = g.input(vec![0.0; hidden], &[1, hidden])?;
    let mut bwd_states = vec![None; t_len];
    for t in (0..t_len).rev() {
        let x_t = g.slice_rows(frames, t, 1)?;
        h_b = gru_step(g, &bigru.bwd, x_t, h_b)?;
        bwd_states[t] = Some(h_b);
    }

    let mut rows = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let sum = g.add(fwd_states[t], bwd_states[t].expect("filled above"))?;
        rows.push(sum);
    }
    g.concat_rows(&rows)
}
