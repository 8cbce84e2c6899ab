//! Word-in-question features: the binary indicator, the softly weighted
//! variant and its term-frequency closed form under a discrete similarity.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Float, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::text::is_stopword;

/// How question and context tokens are compared for the binary feature.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WiqPolicy {
    /// Exact surface form.
    #[default]
    Surface,
    /// Lowercased; question side restricted to alphanumeric non-stopwords.
    Normalized,
}

fn is_alnum_word(t: &str) -> bool {
    !t.is_empty() && t.chars().all(char::is_alphanumeric)
}

/// `1` for context tokens that also occur in the question.
pub fn compute_wiq_binary<S: AsRef<str>>(context: &[S], question: &[S], policy: WiqPolicy) -> Vec<f64> {
    let qset: HashSet<String> = match policy {
        WiqPolicy::Surface => question.iter().map(|q| q.as_ref().to_string()).collect(),
        WiqPolicy::Normalized => question
            .iter()
            .map(|q| q.as_ref().to_lowercase())
            .filter(|q| is_alnum_word(q) && !is_stopword(q))
            .collect(),
    };
    context
        .iter()
        .map(|x| {
            let key = match policy {
                WiqPolicy::Surface => x.as_ref().to_string(),
                WiqPolicy::Normalized => x.as_ref().to_lowercase(),
            };
            if qset.contains(&key) {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Softmax of each similarity row over the context axis, summed over
/// question words: `(L_Q, L_X)` to `(L_X,)`. `mask` is an additive mask
/// over the context axis or over the whole matrix.
pub fn wiq_from_similarity<T: Float>(g: &mut Graph<T>, sim: Var, mask: Option<&[T]>) -> Result<Var> {
    let p = g.softmax(sim, 1, mask)?;
    g.sum(p, Some(0))
}

/// Weighted feature with `sim[i][j] = v . (x_j * q_i)`.
pub fn compute_wiq_weighted<T: Float>(g: &mut Graph<T>, context: Var, question: Var, v: Var) -> Result<Var> {
    let (xs, qs, vs) = (g.shape(context).to_vec(), g.shape(question).to_vec(), g.shape(v).to_vec());
    if xs.len() != 2 || qs.len() != 2 || xs[1] != qs[1] || vs != [xs[1]] {
        return Err(Error::shape(
            "compute_wiq_weighted",
            format!("context {xs:?}, question {qs:?}, v {vs:?}"),
        ));
    }
    let qv = g.mul(question, v)?;
    let sim = g.matmul_t(qv, context)?;
    wiq_from_similarity(g, sim, None)
}

/// `tf(x_j|Q) / tf(x_j|C)` for context tokens occurring in the question,
/// zero elsewhere, by direct counting.
pub fn tf_wiq_oracle<S: AsRef<str>>(context: &[S], question: &[S]) -> Vec<f64> {
    let mut tf_c: HashMap<&str, usize> = HashMap::new();
    let mut tf_q: HashMap<&str, usize> = HashMap::new();
    for x in context {
        *tf_c.entry(x.as_ref()).or_default() += 1;
    }
    for q in question {
        *tf_q.entry(q.as_ref()).or_default() += 1;
    }
    context
        .iter()
        .map(|x| {
            let x = x.as_ref();
            match tf_q.get(x) {
                Some(&q) => q as f64 / tf_c[x] as f64,
                None => 0.0,
            }
        })
        .collect()
}

/// The discrete similarity `0` on a match and `T::MASKED` otherwise, over
/// the question words that occur in the context. Words absent from the
/// context have no defined softmax and are left out.
pub fn discrete_similarity<T: Float, S: AsRef<str>>(context: &[S], question: &[S]) -> Option<Tensor<T>> {
    let rows: Vec<&S> = question
        .iter()
        .filter(|q| context.iter().any(|x| x.as_ref() == q.as_ref()))
        .collect();
    if rows.is_empty() || context.is_empty() {
        return None;
    }
    let data = rows
        .iter()
        .flat_map(|q| {
            context
                .iter()
                .map(move |x| if x.as_ref() == q.as_ref() { T::zero() } else { T::MASKED })
        })
        .collect();
    Tensor::new(vec![rows.len(), context.len()], data).ok()
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{grad_check, DEFAULT_EPS, DEFAULT_TOL};

    fn via_pipeline(context: &[&str], question: &[&str]) -> Vec<f64> {
        let Some(sim) = discrete_similarity::<f64, _>(context, question) else {
            return vec![0.0; context.len()];
        };
        let mut g = Graph::new();
        let s = g.constant(sim);
        let w = wiq_from_similarity(&mut g, s, None).unwrap();
        g.data(w).to_vec()
    }

    #[test]
    fn binary_examples() {
        assert_eq!(compute_wiq_binary(&["the", "cat", "sat"], &["cat"], WiqPolicy::Surface), [0.0, 1.0, 0.0]);
        assert_eq!(compute_wiq_binary::<&str>(&["a", "b"], &[], WiqPolicy::Surface), [0.0, 0.0]);
        assert_eq!(compute_wiq_binary(&["The", "cat"], &["the"], WiqPolicy::Surface), [0.0, 0.0]);
        assert_eq!(compute_wiq_binary(&["The", "cat"], &["the"], WiqPolicy::Normalized), [0.0, 0.0]);
        assert_eq!(compute_wiq_binary(&["The", "Cat"], &["cat", "?"], WiqPolicy::Normalized), [0.0, 1.0]);
        assert_eq!(compute_wiq_binary(&["?", "x"], &["?"], WiqPolicy::Normalized), [0.0, 0.0]);
    }

    #[test]
    fn oracle_examples() {
        assert_eq!(tf_wiq_oracle(&["a", "b", "a"], &["a"]), [0.5, 0.0, 0.5]);
        assert_eq!(tf_wiq_oracle(&["a"], &["a", "a"]), [2.0]);
        assert_eq!(tf_wiq_oracle(&["a", "b"], &["c"]), [0.0, 0.0]);
        assert_eq!(via_pipeline(&["a", "b", "a"], &["a"]), [0.5, 0.0, 0.5]);
        assert_eq!(via_pipeline(&["a"], &["a", "a"]), [2.0]);
    }

    #[test]
    fn uniform_similarity_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::filled(vec![4, 3], 0.5));
        let q = g.constant(Tensor::filled(vec![1, 3], 0.5));
        let v = g.constant(Tensor::filled(vec![3], 1.0));
        let w = compute_wiq_weighted(&mut g, x, q, v).unwrap();
        for &p in g.data(w) {
            assert!((p - 0.25).abs() < 1e-15);
        }
        let bad = g.constant(Tensor::filled(vec![1, 2], 0.5));
        assert!(compute_wiq_weighted(&mut g, x, bad, v).is_err());
    }

    #[test]
    fn weighted_sums_to_question_length_and_grad_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (lx, lq, n) = (rng.random_range(1..9), rng.random_range(1..5), rng.random_range(1..6));
            let mut t = |r: usize, c: usize| {
                let data: Vec<f64> = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
                Tensor::new(vec![r, c], data).unwrap()
            };
            let leaves = vec![t(lx, n), t(lq, n), t(1, n).reshaped(vec![n]).unwrap()];
            let mut g = Graph::new();
            let vars: Vec<Var> = leaves.iter().map(|l| g.constant(l.clone())).collect();
            let w = compute_wiq_weighted(&mut g, vars[0], vars[1], vars[2]).unwrap();
            let total: f64 = g.data(w).iter().sum();
            assert!((total - lq as f64).abs() < 1e-5);
            let rep = grad_check(
                |g, v| {
                    let w = compute_wiq_weighted(g, v[0], v[1], v[2])?;
                    let sq = g.mul(w, w)?;
                    g.sum(sq, None)
                },
                &leaves,
                DEFAULT_EPS,
                DEFAULT_TOL,
            )
            .unwrap();
            assert!(rep.passed(), "{rep:?}");
        }
    }

    proptest::proptest! {
        #[test]
        fn binary_is_question_permutation_invariant(
            ctx in proptest::collection::vec("[a-d]", 1..10),
            mut q in proptest::collection::vec("[a-d]", 0..6),
        ) {
            let before = compute_wiq_binary(&ctx, &q, WiqPolicy::Surface);
            q.reverse();
            proptest::prop_assert_eq!(before, compute_wiq_binary(&ctx, &q, WiqPolicy::Surface));
        }

        #[test]
        fn pipeline_matches_oracle(
            ctx in proptest::collection::vec("[a-e]", 1..30),
            q in proptest::collection::vec("[a-e]", 1..30),
        ) {
            let ctx: Vec<&str> = ctx.iter().map(String::as_str).collect();
            let q: Vec<&str> = q.iter().map(String::as_str).collect();
            let got = via_pipeline(&ctx, &q);
            for (a, b) in got.iter().zip(tf_wiq_oracle(&ctx, &q)) {
                proptest::prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
