//! Place-cell style associative storage.
//!
//! Every feature row `x` is expanded into an index `k = x/‖x‖` (column) and a
//! context `v = x` (row). The memory matrix is updated with
//!
//! ```text
//! incremental:  W ← W + η·(k·v − (k·kᵀ)·W)
//! literal:      W ← η·(k·v − (k·kᵀ)·W)
//! ```
//!
//! and read by multiplying the inactive vector (the raw feature row) with the
//! current `W`. The readout `x + relu(layer_norm(q·A + b))` turns the
//! activation `q` into the position encoding fed to the attention stage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Matrix, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateMode {
    #[default]
    Incremental,
    Literal,
}

/// Episodic memory state. `W` is carried between batches as a plain matrix,
/// so gradients only flow through the updates made inside one graph.
#[derive(Clone, Debug, PartialEq)]
pub struct HebbianMemory {
    pub w: Matrix,
    pub mode: UpdateMode,
}

impl HebbianMemory {
    pub fn new(dim: usize, mode: UpdateMode) -> Self {
        Self {
            w: Matrix::zeros(dim, dim),
            mode,
        }
    }

    pub fn dim(&self) -> usize {
        self.w.rows()
    }

    pub fn reset(&mut self) {
        self.w = Matrix::zeros(self.dim(), self.dim());
    }

    /// Stores one feature row directly, without recording a graph.
    pub fn write(&mut self, x: &[f64], eta: f64) -> Result<()> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::shape("memory write", (1, x.len()), (d, d)));
        }
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 1e-12) {
            return Err(Error::DegenerateKey(0));
        }
        let k: Vec<f64> = x.iter().map(|v| v / norm).collect();
        let mut r = x.to_vec();
        for (i, &ki) in k.iter().enumerate() {
            for (rj, wij) in r.iter_mut().zip(self.w.row(i)) {
                *rj -= ki * wij;
            }
        }
        let keep = match self.mode {
            UpdateMode::Incremental => 1.0,
            UpdateMode::Literal => 0.0,
        };
        for (i, &ki) in k.iter().enumerate() {
            for (wij, rj) in self.w.row_mut(i).iter_mut().zip(&r) {
                *wij = keep * *wij + eta * ki * rj;
            }
        }
        Ok(())
    }
}

/// Graph handles for the readout head parameters.
#[derive(Clone, Copy, Debug)]
pub struct ReadoutHead {
    /// D×D fully connected weight.
    pub weight: Var,
    /// 1×D bias.
    pub bias: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
}

/// Splits a B×D feature batch into per-row `(k: D×1, v: 1×D)` pairs.
pub fn expand(g: &mut Graph, features: Var) -> Result<Vec<(Var, Var)>> {
    let mut out = Vec::with_capacity(features.rows());
    for b in 0..features.rows() {
        let v = g.slice_rows(features, b, 1)?;
        let k_row = g.row_l2_normalize(v).map_err(|e| match e {
            Error::DegenerateKey(_) => Error::DegenerateKey(b),
            other => other,
        })?;
        let k = g.transpose(k_row)?;
        out.push((k, v));
    }
    Ok(out)
}

pub fn hebbian_update(g: &mut Graph, w: Var, k: Var, v: Var, eta: Var, mode: UpdateMode) -> Result<Var> {
    g.hebbian_step(w, k, v, eta, mode == UpdateMode::Literal)
}

/// `q = x·W`.
pub fn activate(g: &mut Graph, w: Var, x: Var) -> Result<Var> {
    g.matmul(x, w)
}

/// `x + relu(layer_norm(q·A + b))`, rowwise.
pub fn readout(g: &mut Graph, head: &ReadoutHead, q: Var, x: Var) -> Result<Var> {
    if q.shape() != x.shape() {
        return Err(Error::shape("readout", q.shape(), x.shape()));
    }
    let lin = g.matmul(q, head.weight)?;
    let lin = g.add_row(lin, head.bias)?;
    let normed = g.layer_norm(lin, head.ln_gain, head.ln_bias)?;
    let act = g.relu(normed)?;
    g.add(x, act)
}

/// Runs a time-ordered batch through the memory: each row is read with the
/// current `W`, then written into it. With `frozen` the memory is only read.
///
/// Returns the B×D position encodings. The memory state is advanced in place
/// unless `frozen`.
pub fn process_batch(
    g: &mut Graph,
    mem: &mut HebbianMemory,
    eta: Var,
    head: &ReadoutHead,
    features: Var,
    timestamps: &[f64],
    frozen: bool,
) -> Result<Var> {
    let (b, d) = features.shape();
    if d != mem.dim() {
        return Err(Error::shape("process_batch", features.shape(), mem.w.shape()));
    }
    if timestamps.len() != b {
        return Err(Error::Contract(format!(
            "{} timestamps for a batch of {b}",
            timestamps.len()
        )));
    }
    if let Some(i) = timestamps.windows(2).position(|p| !(p[0] <= p[1])) {
        return Err(Error::Contract(format!(
            "batch not in ascending time order at row {} ({} then {})",
            i + 1,
            timestamps[i],
            timestamps[i + 1]
        )));
    }

    if frozen {
        return read_frozen(g, mem, head, features);
    }

    let mut w = g.constant(mem.w.clone());
    let pairs = expand(g, features)?;
    let mut activations = Vec::with_capacity(b);
    for (row, &(k, v)) in pairs.iter().enumerate() {
        let x = g.slice_rows(features, row, 1)?;
        activations.push(activate(g, w, x)?);
        w = hebbian_update(g, w, k, v, eta, mem.mode)?;
    }
    let q = g.concat_rows(&activations)?;
    let out = readout(g, head, q, features)?;
    mem.w = g.value(w).clone();
    Ok(out)
}

/// Read-only pass: every row is activated against the same `W`.
pub fn read_frozen(g: &mut Graph, mem: &HebbianMemory, head: &ReadoutHead, features: Var) -> Result<Var> {
    if features.cols() != mem.dim() {
        return Err(Error::shape("read_frozen", features.shape(), mem.w.shape()));
    }
    let w = g.constant(mem.w.clone());
    let q = activate(g, w, features)?;
    readout(g, head, q, features)
}
