//! Composite operations built from the recorded primitives.
//!
//! Because each of these is a composition of differentiable ops, gradients of
//! any order come for free.

use crate::error::{AutogradError, Result};
use crate::graph::Var;
use crate::tensor::Tensor;

/// Floor applied to norms before dividing by them.
pub const NORM_EPS: f64 = 1e-12;

/// `x @ w + b` with `x: [n, in]`, `w: [in, out]`, `b: [1, out]`.
pub fn linear<'g>(x: Var<'g>, w: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
    x.matmul(w)?.add(b)
}

/// Euclidean norm of each row: `[n, m] -> [n, 1]`.
pub fn row_norms(x: Var<'_>) -> Result<Var<'_>> {
    x.mul(x)?.sum_cols()?.sqrt()
}

/// Scales each row to unit Euclidean norm.
///
/// Rows whose norm is below [`NORM_EPS`] are divided by `NORM_EPS` instead
/// and a warning is recorded on the graph.
pub fn l2_normalize(x: Var<'_>) -> Result<Var<'_>> {
    let norms = row_norms(x)?;
    if norms.value().data().iter().any(|&n| n < NORM_EPS) {
        x.graph().warn("l2_normalize: row with (near-)zero norm");
    }
    x.div(norms.clamp(NORM_EPS, f64::INFINITY)?)
}

/// Row-wise Euclidean distance between two `[n, m]` matrices: `[n, 1]`.
pub fn euclidean_distance<'g>(a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
    row_norms(a.sub(b)?)
}

/// Row-wise cosine similarity: `[n, 1]`.
pub fn cosine_similarity<'g>(a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
    let dot = a.mul(b)?.sum_cols()?;
    let na = row_norms(a)?;
    let nb = row_norms(b)?;
    if na
        .value()
        .data()
        .iter()
        .chain(nb.value().data())
        .any(|&n| n < NORM_EPS)
    {
        a.graph()
            .warn("cosine_similarity: row with (near-)zero norm");
    }
    let na = na.clamp(NORM_EPS, f64::INFINITY)?;
    let nb = nb.clamp(NORM_EPS, f64::INFINITY)?;
    dot.div(na.mul(nb)?)
}

/// Row-wise log-softmax.
pub fn log_softmax(x: Var<'_>) -> Result<Var<'_>> {
    let v = x.value();
    let maxes: Vec<f64> = (0..v.rows())
        .map(|i| {
            v.row_slice(i)
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    // shifting by a constant leaves the result (and its derivatives) unchanged
    let shift = x.graph().constant(Tensor::new([v.rows(), 1], maxes)?);
    let z = x.sub(shift)?;
    let lse = z.exp()?.sum_cols()?.log()?;
    z.sub(lse)
}

/// Row-wise softmax.
pub fn softmax(x: Var<'_>) -> Result<Var<'_>> {
    log_softmax(x)?.exp()
}

/// One GRU step given the input projection `xp = x @ w_ih + b_ih` (`[n, 3h]`).
///
/// Gate layout along the columns is `(reset, update, candidate)`:
///
/// ```text
/// r  = sigmoid(xp_r + h @ W_hr + b_hr)
/// z  = sigmoid(xp_z + h @ W_hz + b_hz)
/// n  = tanh(xp_n + r * (h @ W_hn + b_hn))
/// h' = (1 - z) * n + z * h
/// ```
pub fn gru_step_projected<'g>(
    xp: Var<'g>,
    h: Var<'g>,
    w_hh: Var<'g>,
    b_hh: Var<'g>,
) -> Result<Var<'g>> {
    let [n, hd] = h.shape();
    if xp.shape() != [n, 3 * hd] {
        return Err(AutogradError::ShapeMismatch {
            op: "gru_cell_step",
            lhs: xp.shape(),
            rhs: [n, 3 * hd],
        });
    }
    let hp = linear(h, w_hh, b_hh)?;
    let gate = |v: Var<'g>, k: usize| v.slice(0..n, k * hd..(k + 1) * hd);
    let r = gate(xp, 0)?.add(gate(hp, 0)?)?.sigmoid()?;
    let z = gate(xp, 1)?.add(gate(hp, 1)?)?.sigmoid()?;
    let cand = gate(xp, 2)?.add(r.mul(gate(hp, 2)?)?)?.tanh()?;
    // (1 - z) * n + z * h  ==  n + z * (h - n)
    cand.add(z.mul(h.sub(cand)?)?)
}

/// One GRU step on raw input `x: [n, in]`.
pub fn gru_cell_step<'g>(
    x: Var<'g>,
    h: Var<'g>,
    w_ih: Var<'g>,
    w_hh: Var<'g>,
    b_ih: Var<'g>,
    b_hh: Var<'g>,
) -> Result<Var<'g>> {
    gru_step_projected(linear(x, w_ih, b_ih)?, h, w_hh, b_hh)
}
