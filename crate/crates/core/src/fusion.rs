//! Representation fusion between encoder and answer layer: associative
//! intra-context fusion, recurrent backward/forward fusion and fusion of
//! question states into the context.

use rand::Rng;

use crate::autodiff::{Float, Graph, Tensor, Var};
use crate::error::Result;
use crate::layers::fc;
use crate::params::{add_fc, Bound, ParamStore};

/// Gate sites, each with its own `(n, 2n)` gate layer.
pub const GATES: [&str; 6] = [
    "fusion.intra",
    "fusion.intra_bw",
    "fusion.intra_fw",
    "fusion.inter",
    "fusion.inter_bw",
    "fusion.inter_fw",
];

pub fn add_fusion_params<T: Float, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, n: usize) {
    store.insert("fusion.v_beta", Tensor::filled(vec![n], T::one()));
    store.insert("fusion.v_gamma", Tensor::filled(vec![n], T::one()));
    for gate in GATES {
        add_fc(store, rng, gate, n, 2 * n);
    }
}

/// Sets every gate bias to `value`. A large positive value keeps the first
/// argument of each fusion, which turns the whole stack into the identity.
pub fn saturate_gates<T: Float>(store: &mut ParamStore<T>, value: T) -> Result<()> {
    for gate in GATES {
        store.get_mut(&format!("{gate}.b"))?.data_mut().fill(value);
    }
    Ok(())
}

/// Row-wise gated addition `g * a + (1 - g) * b` with `g = sigmoid(FC([a; b]))`.
pub fn fuse<T: Float>(g: &mut Graph<T>, p: &Bound, gate: &str, a: Var, b: Var) -> Result<Var> {
    let ab = g.concat(&[a, b], 1)?;
    let pre = fc(g, p, gate, ab)?;
    let gv = g.sigmoid(pre)?;
    let keep = g.mul(gv, a)?;
    let rest = g.one_minus(gv)?;
    let take = g.mul(rest, b)?;
    g.add(keep, take)
}

/// Attention weights `softmax_k(v . (h_j * h_k))` with the self score set to
/// zero, or removed from the softmax when `exclude_self` is set.
pub fn intra_weights<T: Float>(g: &mut Graph<T>, p: &Bound, h: Var, exclude_self: bool) -> Result<Var> {
    let len = g.shape(h)[0];
    let hv = g.mul(h, p.var("fusion.v_beta"))?;
    let scores = g.matmul_t(hv, h)?;
    if exclude_self && len > 1 {
        let mut mask = vec![T::zero(); len * len];
        for j in 0..len {
            mask[j * len + j] = T::MASKED;
        }
        g.softmax(scores, 1, Some(&mask))
    } else {
        let mut off = vec![T::one(); len * len];
        for j in 0..len {
            off[j * len + j] = T::zero();
        }
        let off = g.constant(Tensor::new(vec![len, len], off)?);
        let scores = g.mul(scores, off)?;
        g.softmax(scores, 1, None)
    }
}

pub fn intra_fuse<T: Float>(g: &mut Graph<T>, p: &Bound, h: Var, exclude_self: bool) -> Result<Var> {
    let beta = intra_weights(g, p, h, exclude_self)?;
    let co = g.matmul(beta, h)?;
    fuse(g, p, "fusion.intra", h, co)
}

/// Backward sweep fusing each state with its right neighbour's result,
/// then a forward sweep fusing with the left neighbour's result.
pub fn recurrent_fuse<T: Float>(g: &mut Graph<T>, p: &Bound, prefix: &str, h: Var) -> Result<Var> {
    let len = g.shape(h)[0];
    if len == 1 {
        return Ok(h);
    }
    let rows: Vec<Var> = (0..len).map(|j| g.row(h, j)).collect::<Result<_>>()?;
    let bw_gate = format!("{prefix}_bw");
    let fw_gate = format!("{prefix}_fw");
    let mut bw = vec![rows[len - 1]; len];
    for j in (0..len - 1).rev() {
        bw[j] = fuse(g, p, &bw_gate, rows[j], bw[j + 1])?;
    }
    let mut fw = vec![bw[0]; len];
    for j in 1..len {
        fw[j] = fuse(g, p, &fw_gate, bw[j], fw[j - 1])?;
    }
    g.concat(&fw, 0)
}

/// `softmax_j(v . (z_i * h_j))` per question word: `(L_Q, L_X)`.
pub fn inter_weights<T: Float>(g: &mut Graph<T>, p: &Bound, h: Var, z: Var) -> Result<Var> {
    let zv = g.mul(z, p.var("fusion.v_gamma"))?;
    let scores = g.matmul_t(zv, h)?;
    g.softmax(scores, 1, None)
}

pub fn inter_fuse<T: Float>(g: &mut Graph<T>, p: &Bound, h: Var, z: Var) -> Result<Var> {
    let gamma = inter_weights(g, p, h, z)?;
    let co = g.matmul_ex(gamma, z, true, false)?;
    let fused = fuse(g, p, "fusion.inter", h, co)?;
    recurrent_fuse(g, p, "fusion.inter", fused)
}

/// The whole interaction layer applied to context states `h: (L_X, n)` and
/// question states `z: (L_Q, n)`.
pub fn fusion_stack<T: Float>(g: &mut Graph<T>, p: &Bound, h: Var, z: Var, exclude_self: bool) -> Result<Var> {
    let star = intra_fuse(g, p, h, exclude_self)?;
    let tilde = recurrent_fuse(g, p, "fusion.intra", star)?;
    inter_fuse(g, p, tilde, z)
}
