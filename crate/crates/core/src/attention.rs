//! Head-direction encoding and two-head scaled dot-product attention.
//!
//! A D-dimensional feature row is viewed as `bins` direction tokens of
//! `bin_features` each. Token `j` (1-based) receives the offset
//! `ξ_j · sin(d_j / 2)` with `d_j = 2πj / bins` and `ξ = sigmoid(ξ_raw)`.
//! Attention then mixes the direction tokens:
//!
//! ```text
//! S_i = (T·Wθ_i)(T·Wψ_i)ᵀ / √d_head
//! h_i = softmax(S_i)·(T·Wg_i)
//! y   = flatten(concat(h_1, .., h_n)·Wᴼ) + x_hd
//! ```

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Matrix, Var};

/// Right-edge bin angles `2πj/bins` for `j = 1..=bins`.
pub fn bin_angles(bins: usize) -> Vec<f64> {
    (1..=bins).map(|j| 2.0 * PI * j as f64 / bins as f64).collect()
}

/// `sin(d_j / 2)` broadcast over each token's features.
pub fn direction_offsets(bins: usize, bin_features: usize) -> Matrix {
    let mut m = Matrix::zeros(bins, bin_features);
    for (j, d) in bin_angles(bins).into_iter().enumerate() {
        m.row_mut(j).iter_mut().for_each(|x| *x = (d / 2.0).sin());
    }
    m
}

/// `x_hd = x_pc + flatten(sigmoid(ξ_raw) ∘ sin(d/2))`, applied to every row
/// of the B×D input.
pub fn direction_encode(g: &mut Graph, x_pc: Var, xi_raw: Var) -> Result<Var> {
    let (bins, feats) = xi_raw.shape();
    if bins * feats != x_pc.cols() {
        return Err(Error::shape("direction_encode", x_pc.shape(), xi_raw.shape()));
    }
    let xi = g.sigmoid(xi_raw)?;
    let sines = g.constant(direction_offsets(bins, feats));
    let offsets = g.hadamard(xi, sines)?;
    let flat = g.reshape(offsets, 1, bins * feats)?;
    g.add_row(x_pc, flat)
}

/// Per-head projections plus the shared output matrix.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub theta: Vec<Var>,
    pub psi: Vec<Var>,
    pub value: Vec<Var>,
    pub out: Var,
}

impl AttentionParams {
    pub fn heads(&self) -> usize {
        self.theta.len()
    }

    pub fn head_dim(&self) -> usize {
        self.theta.first().map_or(0, |t| t.cols())
    }

    pub fn token_dim(&self) -> usize {
        self.out.rows()
    }

    fn validate(&self) -> Result<()> {
        let h = self.heads();
        if h == 0 || self.psi.len() != h || self.value.len() != h {
            return Err(Error::Contract(
                "attention needs the same non-zero number of θ, ψ and g projections".into(),
            ));
        }
        let (f, dh) = self.theta[0].shape();
        for p in self.theta.iter().chain(&self.psi).chain(&self.value) {
            if p.shape() != (f, dh) {
                return Err(Error::shape("attention projection", p.shape(), (f, dh)));
            }
        }
        if self.out.shape() != (h * dh, f) {
            return Err(Error::shape("attention output", self.out.shape(), (h * dh, f)));
        }
        Ok(())
    }
}

fn scores_from(g: &mut Graph, theta: Var, psi: Var) -> Result<Var> {
    let psi_t = g.transpose(psi)?;
    let s = g.matmul(theta, psi_t)?;
    g.scale(s, 1.0 / (theta.cols() as f64).sqrt())
}

/// Scaled similarity `S` for one head over a T×F token matrix.
pub fn scaled_scores(g: &mut Graph, tokens: Var, params: &AttentionParams, head: usize) -> Result<Var> {
    check_head(params, head)?;
    let th = g.matmul(tokens, params.theta[head])?;
    let ps = g.matmul(tokens, params.psi[head])?;
    scores_from(g, th, ps)
}

/// Row-stochastic attention weights `softmax(S)` for one head.
pub fn attention_weights(g: &mut Graph, tokens: Var, params: &AttentionParams, head: usize) -> Result<Var> {
    let s = scaled_scores(g, tokens, params, head)?;
    g.softmax_rows(s)
}

/// `h_i = softmax(S_i)·(T·Wg_i)`.
pub fn attention_head(g: &mut Graph, tokens: Var, params: &AttentionParams, head: usize) -> Result<Var> {
    let a = attention_weights(g, tokens, params, head)?;
    let v = g.matmul(tokens, params.value[head])?;
    g.matmul(a, v)
}

fn check_head(params: &AttentionParams, head: usize) -> Result<()> {
    if head >= params.heads() {
        return Err(Error::Contract(format!(
            "head {head} out of range ({} heads)",
            params.heads()
        )));
    }
    Ok(())
}

/// Full residual multi-head block over a B×D batch. Each row is reshaped
/// into `tokens × (D / tokens)`; attention never crosses rows.
pub fn multi_head_forward(g: &mut Graph, x_hd: Var, params: &AttentionParams, tokens: usize) -> Result<Var> {
    params.validate()?;
    let (b, d) = x_hd.shape();
    let f = params.token_dim();
    if tokens * f != d {
        return Err(Error::shape("multi_head_forward", x_hd.shape(), (tokens, f)));
    }
    // Projections for all samples at once; rows b*T..(b+1)*T belong to sample b.
    let all = g.reshape(x_hd, b * tokens, f)?;
    let mut projected = Vec::with_capacity(params.heads());
    for h in 0..params.heads() {
        let th = g.matmul(all, params.theta[h])?;
        let ps = g.matmul(all, params.psi[h])?;
        let vv = g.matmul(all, params.value[h])?;
        projected.push((th, ps, vv));
    }
    let mut per_sample = Vec::with_capacity(b);
    for s in 0..b {
        let mut heads = Vec::with_capacity(params.heads());
        for &(th, ps, vv) in &projected {
            let th_s = g.slice_rows(th, s * tokens, tokens)?;
            let ps_s = g.slice_rows(ps, s * tokens, tokens)?;
            let vv_s = g.slice_rows(vv, s * tokens, tokens)?;
            let sc = scores_from(g, th_s, ps_s)?;
            let a = g.softmax_rows(sc)?;
            heads.push(g.matmul(a, vv_s)?);
        }
        per_sample.push(g.concat_cols(&heads)?);
    }
    let stacked = g.concat_rows(&per_sample)?;
    let mixed = g.matmul(stacked, params.out)?;
    let flat = g.reshape(mixed, b, d)?;
    g.add(flat, x_hd)
}
