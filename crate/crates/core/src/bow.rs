//! Neural bag-of-words baseline: every span up to a maximum length is
//! scored by how well it matches the expected answer type plus how many
//! question words surround it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Float, Graph, Tensor, Var};
use crate::embedder::embed_tokens;
use crate::error::{Error, Result};
use crate::features::Features;
use crate::layers::{column, fc};
use crate::model::{Model, SpanPrediction};
use crate::params::{add_fc, Bound, ParamStore};
use crate::text::is_stopword;
use crate::wiq::compute_wiq_weighted;

/// Context windows around a span used by the context score.
pub const WINDOWS: [usize; 3] = [5, 10, 20];
/// Neighbourhood averaged on each side of a span in its encoding.
pub const SPAN_SIDE: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatKind {
    QuestionWord,
    NounPhraseAfterWhatWhich,
    Fallback,
}

/// Inclusive token span of the lexical answer type in the question.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatSpan {
    pub start: usize,
    pub end: usize,
    pub kind: LatKind,
}

impl LatSpan {
    pub fn fallback() -> Self {
        LatSpan {
            start: 0,
            end: 0,
            kind: LatKind::Fallback,
        }
    }
}

const WH_WORDS: [&str; 7] = ["who", "whom", "whose", "when", "where", "why", "how"];

/// Answer type words: up to three non-function words after "what"/"which",
/// "how many"/"how much", another wh-word, or the first token.
pub fn extract_lat<S: AsRef<str>>(question: &[S]) -> LatSpan {
    let lower: Vec<String> = question.iter().map(|t| t.as_ref().to_lowercase()).collect();
    if let Some(i) = lower.iter().position(|t| t == "what" || t == "which") {
        let content = |t: &String| t.chars().all(char::is_alphanumeric) && !is_stopword(t);
        let len = lower[i + 1..].iter().take(3).take_while(|t| content(t)).count();
        return if len > 0 {
            LatSpan {
                start: i + 1,
                end: i + len,
                kind: LatKind::NounPhraseAfterWhatWhich,
            }
        } else {
            LatSpan {
                start: i,
                end: i,
                kind: LatKind::QuestionWord,
            }
        };
    }
    if let Some(i) = lower
        .windows(2)
        .position(|w| w[0] == "how" && (w[1] == "many" || w[1] == "much"))
    {
        return LatSpan {
            start: i,
            end: i + 1,
            kind: LatKind::QuestionWord,
        };
    }
    if let Some(i) = lower.iter().position(|t| WH_WORDS.contains(&t.as_str())) {
        return LatSpan {
            start: i,
            end: i,
            kind: LatKind::QuestionWord,
        };
    }
    LatSpan::fallback()
}

/// All `(s, e)` with `e - s + 1 <= max_len`, ordered by start then end.
pub fn enumerate_spans(len: usize, max_len: usize) -> Vec<(usize, usize)> {
    (0..len)
        .flat_map(|s| (s..len.min(s + max_len)).map(move |e| (s, e)))
        .collect()
}

pub fn add_params<T: Float, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, n: usize, d: usize) {
    store.insert("wiq.v", Tensor::filled(vec![d], T::one()));
    add_fc(store, rng, "lat.fc", n, 3 * d);
    add_fc(store, rng, "span.fc", n, 5 * d);
    add_fc(store, rng, "type.hidden", n, 3 * n);
    add_fc(store, rng, "type.out", 1, n);
    store.insert("ctxt.weights", Tensor::zeros(vec![4 * WINDOWS.len()]));
}

/// `tanh(FC([first; last; mean]))` over the answer-type words: `(1, n)`.
pub fn encode_lat<T: Float>(g: &mut Graph<T>, p: &Bound, q: Var, lat: LatSpan) -> Result<Var> {
    let lq = g.shape(q)[0];
    if lat.start > lat.end || lat.end >= lq {
        return Err(Error::InvalidArgument(format!("answer type span {lat:?} outside question of length {lq}")));
    }
    let first = g.row(q, lat.start)?;
    let last = g.row(q, lat.end)?;
    let inner = g.slice(q, 0, lat.start, lat.end + 1)?;
    let mean = g.mean(inner, Some(0))?;
    let d = g.shape(mean)[0];
    let mean = g.reshape(mean, &[1, d])?;
    let cat = g.concat(&[first, last, mean], 1)?;
    let out = fc(g, p, "lat.fc", cat)?;
    g.tanh(out)
}

/// Averaging matrix rows for `count` tokens starting at `from`; empty
/// windows leave the row zero.
fn average_into(row: &mut [f64], from: usize, count: usize) {
    if count > 0 {
        let w = 1.0 / count as f64;
        for v in &mut row[from..from + count] {
            *v = w;
        }
    }
}

/// Mean of up to `w` tokens left of `s`, border truncated.
fn left_window(s: usize, w: usize) -> (usize, usize) {
    let from = s.saturating_sub(w);
    (from, s - from)
}

/// Mean of up to `w` tokens right of `e`, border truncated.
fn right_window(e: usize, w: usize, len: usize) -> (usize, usize) {
    let from = e + 1;
    (from.min(len), len.saturating_sub(from).min(w))
}

/// Span encodings `(S, n)`: `tanh(FC([x_s; x_e; mean; left mean; right mean]))`.
/// Each of the five parts is a fixed linear map of the context rows, so
/// the layer is evaluated as one selection matrix times the per-part
/// projections of the context.
pub fn encode_spans<T: Float>(g: &mut Graph<T>, p: &Bound, x: Var, spans: &[(usize, usize)]) -> Result<Var> {
    let (len, d) = (g.shape(x)[0], g.shape(x)[1]);
    let parts = 5;
    let mut m = vec![0.0; spans.len() * parts * len];
    for (r, &(s, e)) in spans.iter().enumerate() {
        let row = &mut m[r * parts * len..(r + 1) * parts * len];
        row[s] = 1.0;
        row[len + e] = 1.0;
        average_into(&mut row[2 * len..3 * len], s, e - s + 1);
        let (lf, lc) = left_window(s, SPAN_SIDE);
        average_into(&mut row[3 * len..4 * len], lf, lc);
        let (rf, rc) = right_window(e, SPAN_SIDE, len);
        average_into(&mut row[4 * len..5 * len], rf, rc);
    }
    let w = p.var("span.fc.w");
    let mut projected = Vec::with_capacity(parts);
    for k in 0..parts {
        let wk = g.slice(w, 1, k * d, (k + 1) * d)?;
        projected.push(g.matmul_t(x, wk)?);
    }
    let stacked = g.concat(&projected, 0)?;
    let sel = g.constant(Tensor::from_f64(vec![spans.len(), parts * len], &m)?);
    let pre = g.matmul(sel, stacked)?;
    let pre = g.add(pre, p.var("span.fc.b"))?;
    g.tanh(pre)
}

/// MLP over `[z; x; z * x]` with one ReLU layer: `(S,)`.
pub fn type_scores<T: Float>(g: &mut Graph<T>, p: &Bound, z: Var, spans_enc: Var) -> Result<Var> {
    let n = g.shape(spans_enc)[1];
    let w = p.var("type.hidden.w");
    let w_z = g.slice(w, 1, 0, n)?;
    let w_x = g.slice(w, 1, n, 2 * n)?;
    let w_zx = g.slice(w, 1, 2 * n, 3 * n)?;
    let zx = g.mul(spans_enc, z)?;
    let a = g.matmul_t(spans_enc, w_x)?;
    let b = g.matmul_t(zx, w_zx)?;
    let c = g.matmul_t(z, w_z)?;
    let c = g.add(c, p.var("type.hidden.b"))?;
    let ab = g.add(a, b)?;
    let hidden = g.add(ab, c)?;
    let hidden = g.relu(hidden)?;
    let out = fc(g, p, "type.out", hidden)?;
    let s = g.shape(out)[0];
    g.reshape(out, &[s])
}

/// The twelve window means per span, `(S, 12)`: for each window size and
/// side (left, right) the means of the binary and weighted features.
pub fn context_features<T: Float>(g: &mut Graph<T>, wiq: Var, spans: &[(usize, usize)]) -> Result<Var> {
    let len = g.shape(wiq)[0];
    let mut cols = Vec::with_capacity(2 * WINDOWS.len());
    for &w in &WINDOWS {
        for left in [true, false] {
            let mut a = vec![0.0; spans.len() * len];
            for (r, &(s, e)) in spans.iter().enumerate() {
                let (from, count) = if left { left_window(s, w) } else { right_window(e, w, len) };
                average_into(&mut a[r * len..(r + 1) * len], from, count);
            }
            let a = g.constant(Tensor::from_f64(vec![spans.len(), len], &a)?);
            cols.push(g.matmul(a, wiq)?);
        }
    }
    g.concat(&cols, 1)
}

/// Weighted sum of the window means: `(S,)`.
pub fn context_scores<T: Float>(g: &mut Graph<T>, p: &Bound, wiq: Var, spans: &[(usize, usize)]) -> Result<Var> {
    let feats = context_features(g, wiq, spans)?;
    g.matmul(feats, p.var("ctxt.weights"))
}

/// Scores of every candidate span of one example.
#[derive(Clone, Debug)]
pub struct SpanScores {
    pub spans: Vec<(usize, usize)>,
    pub type_score: Var,
    pub context_score: Var,
    pub total: Var,
}

pub fn score_spans<T: Float>(model: &Model<T>, g: &mut Graph<T>, p: &Bound, f: &Features, dropout: Option<&[T]>) -> Result<SpanScores> {
    let cnn = model.config.char_cnn.as_ref();
    let mut x = embed_tokens(g, p, &model.embeddings, cnn, &f.x_ids, &f.x_chars)?;
    let mut q = embed_tokens(g, p, &model.embeddings, cnn, &f.q_ids, &f.q_chars)?;
    if let Some(mask) = dropout {
        x = g.dropout(x, mask)?;
        q = g.dropout(q, mask)?;
    }
    let len = f.x_ids.len();
    let wb = if model.config.use_wiq_b {
        column(g, &f.wiq_b)
    } else {
        column(g, &vec![0.0; len])
    };
    let ww = if model.config.use_wiq_w {
        let w = compute_wiq_weighted(g, x, q, p.var("wiq.v"))?;
        g.reshape(w, &[len, 1])?
    } else {
        column(g, &vec![0.0; len])
    };
    let wiq = g.concat(&[wb, ww], 1)?;
    let lat = if f.lat.end < f.q_ids.len() { f.lat } else { LatSpan::fallback() };
    let z = encode_lat(g, p, q, lat)?;
    let spans = enumerate_spans(len, model.config.max_span_len);
    let enc = encode_spans(g, p, x, &spans)?;
    let type_score = type_scores(g, p, z, enc)?;
    let context_score = context_scores(g, p, wiq, &spans)?;
    let total = g.add(type_score, context_score)?;
    Ok(SpanScores {
        spans,
        type_score,
        context_score,
        total,
    })
}

/// Negative log of the summed probability of the gold spans under a
/// softmax over all candidates.
pub fn loss<T: Float>(model: &Model<T>, g: &mut Graph<T>, p: &Bound, f: &Features, dropout: Option<&[T]>) -> Result<Var> {
    let max = model.config.max_span_len;
    let len = f.x_ids.len();
    let gold_idx: Vec<usize> = f
        .gold_spans
        .iter()
        .filter(|&&(s, e)| s <= e && e < len && e - s < max)
        .map(|&(s, e)| span_index(len, max, s, e))
        .collect();
    if gold_idx.is_empty() {
        return Err(Error::InvalidArgument(format!("example {} has no gold span of at most {max} tokens", f.id)));
    }
    let scores = score_spans(model, g, p, f, dropout)?;
    let logp = g.log_softmax(scores.total, 0, None)?;
    let gold = g.gather(logp, &gold_idx)?;
    let lse = g.logsumexp(gold)?;
    g.scale(lse, -T::one())
}

/// Position of `(s, e)` in [`enumerate_spans`] order.
pub fn span_index(len: usize, max_len: usize, s: usize, e: usize) -> usize {
    let before: usize = (0..s).map(|i| len.min(i + max_len) - i).sum();
    before + (e - s)
}

/// Highest-scoring span; the earliest one on ties.
pub fn predict<T: Float>(model: &Model<T>, g: &mut Graph<T>, p: &Bound, f: &Features) -> Result<SpanPrediction> {
    let scores = score_spans(model, g, p, f, None)?;
    let logp = g.log_softmax(scores.total, 0, None)?;
    let lp = g.data(logp);
    let best = (0..lp.len()).fold(0, |b, i| if lp[i] > lp[b] { i } else { b });
    let (start, end) = scores.spans[best];
    Ok(SpanPrediction {
        start,
        end,
        probability: lp[best].to_f64_lossy().exp(),
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{grad_check, DEFAULT_EPS, DEFAULT_TOL};
    use crate::model::{ModelConfig, ModelKind};
    use crate::params::uniform_init;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    fn tiny_bow(n: usize, d: usize, seed: u64) -> Model<f64> {
        let mut cfg = ModelConfig::new(ModelKind::Bow);
        cfg.n = n;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = uniform_init(&mut rng, &[20, d], 1);
        Model::new(cfg, emb, 10, seed).unwrap()
    }

    fn features(rng: &mut ChaCha8Rng, lx: usize, lq: usize) -> Features {
        let x_ids: Vec<usize> = (0..lx).map(|_| rng.random_range(2..20)).collect();
        let q_ids: Vec<usize> = (0..lq).map(|_| rng.random_range(2..20)).collect();
        let wiq_b = x_ids.iter().map(|x| if q_ids.contains(x) { 1.0 } else { 0.0 }).collect();
        Features {
            id: "b".into(),
            q_chars: vec![vec![]; lq],
            x_chars: vec![vec![]; lx],
            q_ids,
            x_ids,
            wiq_b,
            lat: LatSpan {
                start: 1,
                end: 2,
                kind: LatKind::NounPhraseAfterWhatWhich,
            },
            gold_spans: vec![(3, 5), (7, 7)],
        }
    }

    #[test]
    fn lat_examples() {
        let q = toks("what year did the church open ?");
        let lat = extract_lat(&q);
        assert_eq!((lat.start, lat.end, lat.kind), (1, 1, LatKind::NounPhraseAfterWhatWhich));
        let lat = extract_lat(&toks("When did building activity occur on St. Kazimierz Church ?"));
        assert_eq!((lat.start, lat.end, lat.kind), (0, 0, LatKind::QuestionWord));
        assert_eq!(extract_lat(&toks("how many goals were scored ?")), LatSpan {
            start: 0,
            end: 1,
            kind: LatKind::QuestionWord
        });
        let lat = extract_lat(&toks("which river basin area drains it"));
        assert_eq!((lat.start, lat.end), (1, 3));
        let lat = extract_lat(&toks("what is it ?"));
        assert_eq!((lat.start, lat.end), (0, 0));
        assert_eq!(extract_lat(&toks("name a river")).kind, LatKind::Fallback);
    }

    #[test]
    fn span_counts() {
        assert_eq!(enumerate_spans(3, 10).len(), 6);
        assert_eq!(enumerate_spans(1, 10), vec![(0, 0)]);
        assert_eq!(enumerate_spans(400, 10).len(), 3955);
        let spans = enumerate_spans(23, 10);
        for (i, &(s, e)) in spans.iter().enumerate() {
            assert_eq!(span_index(23, 10, s, e), i);
        }
        let mut sorted = spans.clone();
        sorted.sort();
        assert_eq!(sorted, spans);
    }

    #[test]
    fn lat_encoding_single_token_and_range() {
        let m = tiny_bow(6, 4, 1);
        let mut g = Graph::new();
        let p = m.params.bind(&mut g);
        let q = g.constant(Tensor::new(vec![2, 4], vec![0.1, 0.2, 0.3, 0.4, 5.0, 6.0, 7.0, 8.0]).unwrap());
        let lat = LatSpan {
            start: 0,
            end: 0,
            kind: LatKind::QuestionWord,
        };
        let z = encode_lat(&mut g, &p, q, lat).unwrap();
        assert_eq!(g.shape(z), &[1, 6]);
        assert!(g.data(z).iter().all(|v| v.abs() < 1.0));
        let row = g.row(q, 0).unwrap();
        let rep = g.concat(&[row, row, row], 1).unwrap();
        let want = fc(&mut g, &p, "lat.fc", rep).unwrap();
        let want = g.tanh(want).unwrap();
        assert_eq!(g.data(z), g.data(want));
    }

    /// Direct per-span evaluation of the span layer for comparison.
    fn naive_span(g: &mut Graph<f64>, p: &Bound, x: Var, s: usize, e: usize) -> Vec<f64> {
        let len = g.shape(x)[0];
        let d = g.shape(x)[1];
        let xv = g.value(x).clone();
        let mean = |from: usize, count: usize| -> Vec<f64> {
            (0..d)
                .map(|c| {
                    if count == 0 {
                        0.0
                    } else {
                        (from..from + count).map(|r| xv.at(r, c)).sum::<f64>() / count as f64
                    }
                })
                .collect()
        };
        let lf = s.saturating_sub(5);
        let rc = len.saturating_sub(e + 1).min(5);
        let mut cat = xv.row(s).to_vec();
        cat.extend_from_slice(xv.row(e));
        cat.extend(mean(s, e - s + 1));
        cat.extend(mean(lf, s - lf));
        cat.extend(mean(e + 1, rc));
        let c = g.constant(Tensor::new(vec![1, 5 * d], cat).unwrap());
        let o = fc(g, p, "span.fc", c).unwrap();
        let o = g.tanh(o).unwrap();
        g.data(o).to_vec()
    }

    #[test]
    fn span_encoding_matches_direct_concatenation() {
        let m = tiny_bow(5, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let p = m.params.bind(&mut g);
        for len in [1, 3, 14] {
            let x = g.constant(uniform_init(&mut rng, &[len, 3], 1));
            let spans = enumerate_spans(len, 10);
            let enc = encode_spans(&mut g, &p, x, &spans).unwrap();
            let encv = g.value(enc).clone();
            for (r, &(s, e)) in spans.iter().enumerate() {
                let want = naive_span(&mut g, &p, x, s, e);
                for (a, b) in encv.row(r).iter().zip(&want) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn context_score_examples() {
        let mut m = tiny_bow(4, 3, 4);
        let len = 30;
        let spans = enumerate_spans(len, 10);
        let wiq: Vec<f64> = (0..len).flat_map(|j| [1.0, 0.1 * j as f64]).collect();
        let mut g = Graph::new();
        let p = m.params.bind(&mut g);
        let w = g.constant(Tensor::new(vec![len, 2], wiq.clone()).unwrap());
        let zero = context_scores(&mut g, &p, w, &spans).unwrap();
        assert!(g.data(zero).iter().all(|&v| v == 0.0));
        m.params.get_mut("ctxt.weights").unwrap().data_mut().fill(1.0);
        let mut g = Graph::new();
        let p = m.params.bind(&mut g);
        let w = g.constant(Tensor::new(vec![len, 2], wiq).unwrap());
        let sc = context_scores(&mut g, &p, w, &spans).unwrap();
        let feats = context_features(&mut g, w, &spans).unwrap();
        let i = span_index(len, 10, 12, 13);
        // hand computation: six binary means of 1, plus the weighted means
        let mean = |a: usize, b: usize| (a..b).map(|j| 0.1 * j as f64).sum::<f64>() / (b - a) as f64;
        let want = 6.0 + mean(7, 12) + mean(14, 19) + mean(2, 12) + mean(14, 24) + mean(0, 12) + mean(14, 30);
        assert!((g.data(sc)[i] - want).abs() < 1e-12);
        // a span at position 0 has empty left windows
        let f0 = g.value(feats).row(span_index(len, 10, 0, 2)).to_vec();
        for k in [0, 1, 4, 5, 8, 9] {
            assert_eq!(f0[k], 0.0);
        }
    }

    #[test]
    fn loss_conventions() {
        let mut m = tiny_bow(4, 3, 5);
        for name in ["type.out.w", "type.out.b", "ctxt.weights"] {
            m.params.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut f = features(&mut rng, 12, 4);
        let spans = enumerate_spans(12, 10).len() as f64;
        let mut g = Graph::new();
        let p = m.params.bind(&mut g);
        let l = m.loss(&mut g, &p, &f, None, 0).unwrap();
        assert!((g.data(l)[0] - (spans / 2.0).ln()).abs() < 1e-12);
        f.gold_spans = vec![(3, 5)];
        let l = m.loss(&mut g, &p, &f, None, 0).unwrap();
        assert!((g.data(l)[0] - spans.ln()).abs() < 1e-12);
        f.gold_spans = vec![(0, 11)];
        assert!(m.loss(&mut g, &p, &f, None, 0).is_err());
    }

    #[test]
    fn scores_sum_and_normalise() {
        let m = tiny_bow(5, 4, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = features(&mut rng, 15, 5);
        let mut g = Graph::new();
        let p = m.params.bind(&mut g);
        let sc = score_spans(&m, &mut g, &p, &f, None).unwrap();
        for i in 0..sc.spans.len() {
            assert_eq!(g.data(sc.total)[i], g.data(sc.type_score)[i] + g.data(sc.context_score)[i]);
        }
        let prob = g.softmax(sc.total, 0, None).unwrap();
        assert!((g.data(prob).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        // shifting every score leaves the argmax unchanged
        let pred = m.predict(&f, 1).unwrap();
        let mut shifted = m.clone();
        shifted.params.get_mut("type.out.b").unwrap().data_mut()[0] += 3.5;
        let pred2 = shifted.predict(&f, 1).unwrap();
        assert_eq!((pred.start, pred.end), (pred2.start, pred2.end));
    }

    #[test]
    fn bow_loss_gradients() {
        for seed in 0..3 {
            let m = tiny_bow(9, 4, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let mut f = features(&mut rng, 12, 5);
            f.gold_spans = vec![(2, 4), (9, 11)];
            // non-zero context weights so their inputs are exercised too
            let mut m = m;
            let w: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            m.params.get_mut("ctxt.weights").unwrap().data_mut().copy_from_slice(&w);
            let rep = grad_check(
                |g, v| {
                    let p = m.params.bound_from(v);
                    m.loss(g, &p, &f, None, 0)
                },
                &m.params.tensors(),
                DEFAULT_EPS,
                DEFAULT_TOL,
            )
            .unwrap();
            assert!(rep.passed(), "{rep:?}");
        }
    }
}
