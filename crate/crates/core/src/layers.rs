//! Building blocks shared by the models: fully-connected layers and the
//! LSTM recurrences.

use rand::Rng;

use crate::autodiff::{Float, Graph, Tensor, Var};
use crate::error::Result;
use crate::params::{uniform_init, Bound, ParamStore};

/// `x W^T + b` for `x: (rows, inp)` using parameters `name.w`, `name.b`.
pub fn fc<T: Float>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{name}.w"));
    let b = p.var(&format!("{name}.b"));
    let y = g.matmul_t(x, w)?;
    g.add(y, b)
}

/// Gate layout inside the stacked weight matrices: input, forget, output,
/// then the candidate cell.
pub fn add_lstm<T: Float, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, input: usize, hidden: usize) {
    store.insert(format!("{name}.w_ih"), uniform_init(rng, &[4 * hidden, input], hidden));
    store.insert(format!("{name}.w_hh"), uniform_init(rng, &[4 * hidden, hidden], hidden));
    let mut bias = vec![T::zero(); 4 * hidden];
    for b in &mut bias[hidden..2 * hidden] {
        *b = T::one();
    }
    store.insert(format!("{name}.b"), Tensor::vector(bias));
}

/// Runs one LSTM direction over `x: (L, input)` and returns `(L, hidden)`
/// in the original time order.
pub fn lstm<T: Float>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var, reverse: bool) -> Result<Var> {
    let w_ih = p.var(&format!("{name}.w_ih"));
    let w_hh = p.var(&format!("{name}.w_hh"));
    let b = p.var(&format!("{name}.b"));
    let len = g.shape(x)[0];
    let hidden = g.shape(w_hh)[1];
    let xp = g.matmul_t(x, w_ih)?;
    let xp = g.add(xp, b)?;

    let mut outputs: Vec<Var> = Vec::with_capacity(len);
    let mut state: Option<(Var, Var)> = None;
    let order: Vec<usize> = if reverse {
        (0..len).rev().collect()
    } else {
        (0..len).collect()
    };
    for t in order {
        let mut gates = g.row(xp, t)?;
        if let Some((h, _)) = state {
            let rec = g.matmul_t(h, w_hh)?;
            gates = g.add(gates, rec)?;
        }
        let sig_part = g.slice(gates, 1, 0, 3 * hidden)?;
        let sig = g.sigmoid(sig_part)?;
        let cand = g.slice(gates, 1, 3 * hidden, 4 * hidden)?;
        let cand = g.tanh(cand)?;
        let i = g.slice(sig, 1, 0, hidden)?;
        let o = g.slice(sig, 1, 2 * hidden, 3 * hidden)?;
        let mut c = g.mul(i, cand)?;
        if let Some((_, c_prev)) = state {
            let f = g.slice(sig, 1, hidden, 2 * hidden)?;
            let keep = g.mul(f, c_prev)?;
            c = g.add(keep, c)?;
        }
        let tc = g.tanh(c)?;
        let h = g.mul(o, tc)?;
        outputs.push(h);
        state = Some((h, c));
    }
    if reverse {
        outputs.reverse();
    }
    g.concat(&outputs, 0)
}

/// Forward and backward LSTM outputs concatenated per position: `(L, 2*hidden)`.
pub fn bilstm<T: Float>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let fw = lstm(g, p, &format!("{name}.fw"), x, false)?;
    let bw = lstm(g, p, &format!("{name}.bw"), x, true)?;
    g.concat(&[fw, bw], 1)
}

/// Appends zero rows so that `x: (L, c)` becomes `(total, c)`.
pub fn pad_rows<T: Float>(g: &mut Graph<T>, x: Var, total: usize) -> Result<Var> {
    let (len, c) = (g.shape(x)[0], g.shape(x)[1]);
    if total <= len {
        return Ok(x);
    }
    let zeros = g.constant(Tensor::zeros(vec![total - len, c]));
    g.concat(&[x, zeros], 0)
}

/// Column vector `(L, 1)` from plain values.
pub fn column<T: Float>(g: &mut Graph<T>, values: &[f64]) -> Var {
    g.constant(Tensor::new(vec![values.len(), 1], values.iter().map(|&v| T::from_f64_lossy(v)).collect()).expect("non-empty"))
}
