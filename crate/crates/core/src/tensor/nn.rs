//! Composite layers built from graph primitives.

use super::{Graph, Var};
use crate::error::Result;

/// `x·w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// Convolution followed by a per-channel bias.
pub fn conv2d_bias(g: &mut Graph, x: Var, k: Var, b: Var, pad: usize) -> Result<Var> {
    let y = g.conv2d(x, k, pad)?;
    let c = g.shape(b)[0];
    let b4 = g.reshape(b, &[1, c, 1, 1])?;
    g.add(y, b4)
}

/// Weights of one LSTM layer with gates packed as `[input, forget, cell, output]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmWeights {
    /// `[in, 4·hidden]`
    pub w_x: Var,
    /// `[hidden, 4·hidden]`
    pub w_h: Var,
    /// `[4·hidden]`
    pub bias: Var,
}

/// One recurrent step: returns the new `(h, c)`, each `[n, hidden]`.
pub fn lstm_cell(g: &mut Graph, x: Var, h: Var, c: Var, w: LstmWeights) -> Result<(Var, Var)> {
    let hidden = g.shape(h)[1];
    let zx = g.matmul(x, w.w_x)?;
    let zh = g.matmul(h, w.w_h)?;
    let z = g.add(zx, zh)?;
    let z = g.add(z, w.bias)?;
    let gate = |g: &mut Graph, k: usize| g.narrow(z, 1, k * hidden, hidden);
    let (zi, zf, zg, zo) = (gate(g, 0)?, gate(g, 1)?, gate(g, 2)?, gate(g, 3)?);
    let i = g.sigmoid(zi);
    let f = g.sigmoid(zf);
    let cand = g.tanh(zg);
    let o = g.sigmoid(zo);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_new = g.add(keep, write)?;
    let tc = g.tanh(c_new);
    let h_new = g.mul(o, tc)?;
    Ok((h_new, c_new))
}
