//! FastQA: projected and highway-transformed embeddings, a BiLSTM encoder
//! fed with word-in-question features, a question summary and start/end
//! networks decoded with beam search.

use rand::Rng;

use crate::autodiff::{length_mask, Float, Graph, Tensor, Var};
use crate::embedder::embed_tokens;
use crate::error::{Error, Result};
use crate::features::Features;
use crate::fusion::{add_fusion_params, fusion_stack};
use crate::layers::{add_lstm, bilstm, column, fc, pad_rows};
use crate::model::{GoldLoss, Model, ModelConfig, ModelKind, SpanPrediction};
use crate::params::{add_fc, uniform_init, Bound, ParamStore};

pub fn add_params<T: Float, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, cfg: &ModelConfig, d: usize) {
    let n = cfg.n;
    store.insert("proj.w", uniform_init(rng, &[n, d], d));
    add_fc(store, rng, "highway.gate", n, n);
    add_fc(store, rng, "highway.transform", n, n);
    store.insert("wiq.v", Tensor::filled(vec![n], T::one()));
    add_lstm(store, rng, "lstm.fw", n + 2, n);
    add_lstm(store, rng, "lstm.bw", n + 2, n);
    store.insert("enc.b_ctx", identity_pair(n));
    store.insert("enc.b_q", identity_pair(n));
    store.insert("answer.v_q", uniform_init(rng, &[n], n));
    add_fc(store, rng, "start.fc", n, 3 * n);
    store.insert("start.v", uniform_init(rng, &[n], n));
    add_fc(store, rng, "end.fc", n, 5 * n);
    store.insert("end.v", uniform_init(rng, &[n], n));
    if cfg.kind == ModelKind::FastQaExt {
        add_fusion_params(store, rng, n);
    }
}

/// `[I_n I_n]`, so that `B h'` starts out as the sum of both directions.
fn identity_pair<T: Float>(n: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); n * 2 * n];
    for i in 0..n {
        data[i * 2 * n + i] = T::one();
        data[i * 2 * n + n + i] = T::one();
    }
    Tensor::new(vec![n, 2 * n], data).expect("shape")
}

/// Returns the projection `x'` and the highway output.
pub fn project_highway<T: Float>(g: &mut Graph<T>, p: &Bound, x: Var) -> Result<(Var, Var)> {
    let xp = g.matmul_t(x, p.var("proj.w"))?;
    let gate = fc(g, p, "highway.gate", xp)?;
    let gate = g.sigmoid(gate)?;
    let tr = fc(g, p, "highway.transform", xp)?;
    let tr = g.tanh(tr)?;
    let keep = g.mul(gate, xp)?;
    let rest = g.one_minus(gate)?;
    let mixed = g.mul(rest, tr)?;
    Ok((xp, g.add(keep, mixed)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pass {
    Context,
    Question,
}

/// BiLSTM over `[x; wiq_b; wiq_w]` followed by `tanh(B h')`.
pub fn encode_sequence<T: Float>(g: &mut Graph<T>, p: &Bound, x: Var, wiq_b: Var, wiq_w: Var, pass: Pass) -> Result<Var> {
    if g.shape(x)[0] == 0 {
        return Err(Error::shape("encode_sequence", "empty sequence"));
    }
    let inp = g.concat(&[x, wiq_b, wiq_w], 1)?;
    let h = bilstm(g, p, "lstm", inp)?;
    let b = match pass {
        Pass::Context => p.var("enc.b_ctx"),
        Pass::Question => p.var("enc.b_q"),
    };
    let hb = g.matmul_t(h, b)?;
    g.tanh(hb)
}

/// Attention-pooled question vector `(n,)` and its weights `(L_Q,)`.
pub fn question_summary<T: Float>(g: &mut Graph<T>, p: &Bound, z: Var) -> Result<(Var, Var)> {
    let scores = g.matmul(z, p.var("answer.v_q"))?;
    let alpha = g.softmax(scores, 0, None)?;
    Ok((g.matmul(alpha, z)?, alpha))
}

/// Encoder outputs of one example, context padded to `total` rows.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub h: Var,
    pub z: Var,
    pub z_tilde: Var,
    pub alpha: Var,
    /// `h * z_tilde`, shared by the start and end networks.
    pub hz: Var,
    pub len: usize,
    pub total: usize,
}

pub fn encode<T: Float>(
    model: &Model<T>,
    g: &mut Graph<T>,
    p: &Bound,
    f: &Features,
    dropout: Option<&[T]>,
    pad_to: usize,
) -> Result<Encoded> {
    let cfg = &model.config;
    let cnn = cfg.char_cnn.as_ref();
    let mut x = embed_tokens(g, p, &model.embeddings, cnn, &f.x_ids, &f.x_chars)?;
    let mut q = embed_tokens(g, p, &model.embeddings, cnn, &f.q_ids, &f.q_chars)?;
    if let Some(mask) = dropout {
        x = g.dropout(x, mask)?;
        q = g.dropout(q, mask)?;
    }
    let (xp, xt) = project_highway(g, p, x)?;
    let (qp, qt) = project_highway(g, p, q)?;
    let (lx, lq) = (f.x_ids.len(), f.q_ids.len());

    let zeros = |g: &mut Graph<T>, l: usize| column(g, &vec![0.0; l]);
    let wb = if cfg.use_wiq_b { column(g, &f.wiq_b) } else { zeros(g, lx) };
    let ww = if cfg.use_wiq_w {
        let w = crate::wiq::compute_wiq_weighted(g, xp, qp, p.var("wiq.v"))?;
        g.reshape(w, &[lx, 1])?
    } else {
        zeros(g, lx)
    };
    // the question's own features are constant ones
    let q_feat = if cfg.use_wiq_b || cfg.use_wiq_w {
        column(g, &vec![1.0; lq])
    } else {
        zeros(g, lq)
    };
    let mut hx = encode_sequence(g, p, xt, wb, ww, Pass::Context)?;
    let z = encode_sequence(g, p, qt, q_feat, q_feat, Pass::Question)?;
    if cfg.kind == ModelKind::FastQaExt {
        hx = fusion_stack(g, p, hx, z, cfg.fusion_exclude_self)?;
    }
    let (z_tilde, alpha) = question_summary(g, p, z)?;
    let total = pad_to.max(lx);
    let h = pad_rows(g, hx, total)?;
    let hz = g.mul(h, z_tilde)?;
    Ok(Encoded {
        h,
        z,
        z_tilde,
        alpha,
        hz,
        len: lx,
        total,
    })
}

/// `log p_s` over all (padded) positions; padding is masked out.
pub fn start_log_probs<T: Float>(g: &mut Graph<T>, p: &Bound, enc: &Encoded) -> Result<Var> {
    let zb = g.broadcast_rows(enc.z_tilde, enc.total)?;
    let inp = g.concat(&[enc.h, zb, enc.hz], 1)?;
    let hidden = fc(g, p, "start.fc", inp)?;
    let hidden = g.relu(hidden)?;
    let logits = g.matmul(hidden, p.var("start.v"))?;
    g.log_softmax(logits, 0, Some(&length_mask(enc.total, enc.len)))
}

/// The part of the end network that does not depend on the start:
/// `[h_j; z; h_j * z]` through the matching columns of the end layer.
pub fn end_base<T: Float>(g: &mut Graph<T>, p: &Bound, enc: &Encoded) -> Result<Var> {
    let n = g.shape(enc.z_tilde)[0];
    let w = p.var("end.fc.w");
    let w_h = g.slice(w, 1, 0, n)?;
    let w_z = g.slice(w, 1, 2 * n, 3 * n)?;
    let w_hz = g.slice(w, 1, 3 * n, 4 * n)?;
    let a = g.matmul_t(enc.h, w_h)?;
    let b = g.matmul_t(enc.z_tilde, w_z)?;
    let c = g.matmul_t(enc.hz, w_hz)?;
    let ac = g.add(a, c)?;
    let ab = g.add(ac, b)?;
    g.add(ab, p.var("end.fc.b"))
}

/// `log p_e(. | s)`; positions before `s`, padding and (optionally) ends
/// beyond `max_len` tokens are masked.
pub fn end_log_probs<T: Float>(
    g: &mut Graph<T>,
    p: &Bound,
    enc: &Encoded,
    base: Var,
    s: usize,
    max_len: Option<usize>,
) -> Result<Var> {
    if s >= enc.len {
        return Err(Error::InvalidArgument(format!("start {s} outside context of length {}", enc.len)));
    }
    let n = g.shape(enc.z_tilde)[0];
    let w = p.var("end.fc.w");
    let w_s = g.slice(w, 1, n, 2 * n)?;
    let w_hs = g.slice(w, 1, 4 * n, 5 * n)?;
    let hs = g.row(enc.h, s)?;
    let t_s = g.matmul_t(hs, w_s)?;
    let hhs = g.mul(enc.h, hs)?;
    let t_hs = g.matmul_t(hhs, w_hs)?;
    let pre = g.add(base, t_hs)?;
    let pre = g.add(pre, t_s)?;
    let hidden = g.relu(pre)?;
    let logits = g.matmul(hidden, p.var("end.v"))?;
    let last = max_len.map_or(enc.len, |m| enc.len.min(s + m.max(1)));
    let mask: Vec<T> = (0..enc.total)
        .map(|j| if j >= s && j < last { T::zero() } else { T::MASKED })
        .collect();
    g.log_softmax(logits, 0, Some(&mask))
}

/// Span cross-entropy with the end network conditioned on the gold start.
pub fn loss<T: Float>(
    model: &Model<T>,
    g: &mut Graph<T>,
    p: &Bound,
    f: &Features,
    dropout: Option<&[T]>,
    pad_to: usize,
) -> Result<Var> {
    let golds: Vec<(usize, usize)> = f
        .gold_spans
        .iter()
        .copied()
        .filter(|&(s, e)| s <= e && e < f.x_ids.len())
        .collect();
    if golds.is_empty() {
        return Err(Error::InvalidArgument(format!("example {} has no valid gold span", f.id)));
    }
    let enc = encode(model, g, p, f, dropout, pad_to)?;
    let lps = start_log_probs(g, p, &enc)?;
    let base = end_base(g, p, &enc)?;
    let mut ends: Vec<(usize, Var)> = Vec::new();
    let mut logp = Vec::with_capacity(golds.len());
    for &(s, e) in &golds {
        let lpe = match ends.iter().find(|(k, _)| *k == s) {
            Some(&(_, v)) => v,
            None => {
                let v = end_log_probs(g, p, &enc, base, s, None)?;
                ends.push((s, v));
                v
            }
        };
        let a = g.gather(lps, &[s])?;
        let b = g.gather(lpe, &[e])?;
        logp.push(g.add(a, b)?);
    }
    span_loss(g, &logp, model.config.gold_loss)
}

/// Combines per-gold log-probabilities `log p_s(s) + log p_e(e|s)`.
pub fn span_loss<T: Float>(g: &mut Graph<T>, gold_logp: &[Var], mode: GoldLoss) -> Result<Var> {
    match mode {
        GoldLoss::Min => {
            // ties keep the first gold
            let mut best = gold_logp[0];
            for &v in &gold_logp[1..] {
                if g.data(v)[0] > g.data(best)[0] {
                    best = v;
                }
            }
            let l = g.scale(best, -T::one())?;
            g.reshape(l, &[1])
        }
        GoldLoss::Marginal => {
            let all = g.concat(gold_logp, 0)?;
            let lse = g.logsumexp(all)?;
            g.scale(lse, -T::one())
        }
    }
}

/// Top-`k` beam result: the best span plus one candidate per explored start.
#[derive(Clone, Debug, PartialEq)]
pub struct Beam {
    pub best: SpanPrediction,
    pub candidates: Vec<SpanPrediction>,
}

/// Explores the `k` most probable starts (ties to the smaller index), takes
/// the argmax end for each and returns the span maximizing `p_s * p_e`,
/// ties broken by smaller start, then smaller end. `k` is clamped to the
/// number of starts.
pub fn beam_search_decode<F>(p_s: &[f64], mut end_fn: F, k: usize) -> Result<Beam>
where
    F: FnMut(usize) -> Result<Vec<f64>>,
{
    if k == 0 || p_s.is_empty() {
        return Err(Error::InvalidArgument("beam search needs k >= 1 and a start".into()));
    }
    let mut order: Vec<usize> = (0..p_s.len()).collect();
    order.sort_by(|&a, &b| p_s[b].total_cmp(&p_s[a]).then(a.cmp(&b)));
    let mut candidates = Vec::new();
    for &s in order.iter().take(k.min(p_s.len())) {
        let p_e = end_fn(s)?;
        let mut e = s;
        for j in s..p_e.len() {
            if p_e[j] > p_e[e] {
                e = j;
            }
        }
        candidates.push(SpanPrediction {
            start: s,
            end: e,
            probability: p_s[s] * p_e[e],
        });
    }
    let best = *candidates
        .iter()
        .min_by(|a, b| {
            b.probability
                .total_cmp(&a.probability)
                .then(a.start.cmp(&b.start))
                .then(a.end.cmp(&b.end))
        })
        .expect("k >= 1");
    Ok(Beam { best, candidates })
}

fn probs<T: Float>(g: &Graph<T>, v: Var, len: usize) -> Vec<f64> {
    g.data(v)[..len].iter().map(|x| x.to_f64_lossy().exp()).collect()
}

pub fn predict<T: Float>(model: &Model<T>, g: &mut Graph<T>, p: &Bound, f: &Features, beam_k: usize) -> Result<SpanPrediction> {
    let enc = encode(model, g, p, f, None, 0)?;
    let lps = start_log_probs(g, p, &enc)?;
    let base = end_base(g, p, &enc)?;
    let p_s = probs(g, lps, enc.len);
    let cap = model.config.max_answer_len;
    let beam = beam_search_decode(
        &p_s,
        |s| {
            let lpe = end_log_probs(g, p, &enc, base, s, cap)?;
            Ok(probs(g, lpe, enc.len))
        },
        beam_k,
    )?;
    Ok(beam.best)
}

/// Start distribution and, for every start `s`, the end distribution
/// `p_e(. | s)` over the whole context (disallowed ends have probability 0).
pub fn span_distributions<T: Float>(model: &Model<T>, f: &Features) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let p = model.params.bind_frozen(&mut g);
    let g = &mut g;
    let enc = encode(model, g, &p, f, None, 0)?;
    let lps = start_log_probs(g, &p, &enc)?;
    let base = end_base(g, &p, &enc)?;
    let p_s = probs(g, lps, enc.len);
    let cap = model.config.max_answer_len;
    let p_e = (0..enc.len)
        .map(|s| {
            let lpe = end_log_probs(g, &p, &enc, base, s, cap)?;
            Ok(probs(g, lpe, enc.len))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((p_s, p_e))
}
