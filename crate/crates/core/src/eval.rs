//! Exact match and token F1 scoring, and win/loss comparison of two systems.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercases, replaces punctuation by spaces, drops the articles
/// a/an/the and collapses whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lowered: String = s
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Multiset token F1 between normalized strings.
pub fn token_f1(pred: &str, gold: &str) -> f64 {
    let p = normalize_answer(pred);
    let g = normalize_answer(gold);
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    if pt.is_empty() || gt.is_empty() {
        return if pt.is_empty() && gt.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gt {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &pt {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pt.len() as f64;
    let recall = common as f64 / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn exact_match(pred: &str, gold: &str) -> bool {
    normalize_answer(pred) == normalize_answer(gold)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionScore {
    pub em: f64,
    pub f1: f64,
    pub prediction: Option<String>,
    pub golds: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub exact_match: f64,
    pub f1: f64,
    pub missing: usize,
    pub per_question: BTreeMap<String, QuestionScore>,
}

/// Scores every gold question; questions without a prediction count as 0.
pub fn evaluate(predictions: &HashMap<String, String>, golds: &HashMap<String, Vec<String>>) -> EvalResult {
    let mut per_question = BTreeMap::new();
    let mut missing = 0;
    for (id, answers) in golds {
        let pred = predictions.get(id);
        let (em, f1) = match pred {
            None => {
                missing += 1;
                (0.0, 0.0)
            }
            Some(p) => {
                let em = answers.iter().any(|g| exact_match(p, g));
                let f1 = answers.iter().map(|g| token_f1(p, g)).fold(0.0, f64::max);
                (if em { 1.0 } else { 0.0 }, f1)
            }
        };
        per_question.insert(
            id.clone(),
            QuestionScore {
                em,
                f1,
                prediction: pred.cloned(),
                golds: answers.clone(),
            },
        );
    }
    let n = per_question.len().max(1) as f64;
    // summed in id order so the aggregate does not depend on hash order
    let exact_match = 100.0 * per_question.values().map(|q| q.em).sum::<f64>() / n;
    let f1 = 100.0 * per_question.values().map(|q| q.f1).sum::<f64>() / n;
    EvalResult {
        exact_match,
        f1,
        missing,
        per_question,
    }
}

/// Summary statistics of one partition cell.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SetSummary {
    pub count: usize,
    pub mean_question_len: f64,
    pub mean_answer_len: f64,
    pub question_words: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SystemDiff {
    pub a_wins: Vec<String>,
    pub b_wins: Vec<String>,
    pub both: Vec<String>,
    pub neither: Vec<String>,
    pub summaries: BTreeMap<String, SetSummary>,
}

const QUESTION_WORDS: &[&str] = &["what", "which", "who", "whom", "whose", "when", "where", "why", "how"];

/// First wh-word in the question, or "other".
pub fn question_word(question: &str) -> String {
    question
        .split(|c: char| !c.is_alphanumeric())
        .map(str::to_lowercase)
        .find(|w| QUESTION_WORDS.contains(&w.as_str()))
        .unwrap_or_else(|| "other".into())
}

/// Partitions question ids by which system answered them exactly.
/// `questions` maps ids to question text for the summaries and may be empty.
pub fn diff_systems(a: &EvalResult, b: &EvalResult, questions: &HashMap<String, String>) -> Result<SystemDiff> {
    if a.per_question.len() != b.per_question.len() || a.per_question.keys().any(|k| !b.per_question.contains_key(k)) {
        return Err(Error::InvalidArgument("the two results cover different question ids".into()));
    }
    let mut d = SystemDiff::default();
    for (id, qa) in &a.per_question {
        let qb = &b.per_question[id];
        let cell = match (qa.em > 0.0, qb.em > 0.0) {
            (true, false) => &mut d.a_wins,
            (false, true) => &mut d.b_wins,
            (true, true) => &mut d.both,
            (false, false) => &mut d.neither,
        };
        cell.push(id.clone());
    }
    for (name, ids) in [("a_wins", &d.a_wins), ("b_wins", &d.b_wins), ("both", &d.both), ("neither", &d.neither)] {
        let mut s = SetSummary {
            count: ids.len(),
            ..Default::default()
        };
        for id in ids {
            let q = questions.get(id).map(String::as_str).unwrap_or("");
            s.mean_question_len += q.split_whitespace().count() as f64;
            let ans = a.per_question[id].golds.first().map(String::as_str).unwrap_or("");
            s.mean_answer_len += ans.split_whitespace().count() as f64;
            *s.question_words.entry(question_word(q)).or_default() += 1;
        }
        if !ids.is_empty() {
            s.mean_question_len /= ids.len() as f64;
            s.mean_answer_len /= ids.len() as f64;
        }
        d.summaries.insert(name.to_string(), s);
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn golds(pairs: &[(&str, &[&str])]) -> HashMap<String, Vec<String>> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.iter().map(|s| s.to_string()).collect()))
            .collect()
    }

    fn preds(pairs: &[(&str, &str)]) -> HashMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_answer("The Cat!"), "cat");
        assert_eq!(normalize_answer("1688-1692"), "1688 1692");
        assert_eq!(normalize_answer(""), "");
        assert_eq!(normalize_answer("  an  apple  "), "apple");
    }

    #[test]
    fn f1_examples() {
        assert_eq!(token_f1("cat", "cat"), 1.0);
        assert_eq!(token_f1("the cat", "cat"), 1.0);
        assert!((token_f1("black cat", "cat") - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(token_f1("", ""), 1.0);
        assert_eq!(token_f1("cat", ""), 0.0);
        // multiset, not set
        assert!((token_f1("cat cat", "cat") - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn evaluate_examples() {
        let g = golds(&[("q1", &["cat"]), ("q2", &["dog", "a dog"])]);
        let r = evaluate(&preds(&[("q1", "cat"), ("q2", "dog")]), &g);
        assert_eq!((r.exact_match, r.f1), (100.0, 100.0));

        let g1 = golds(&[("q", &["cat"])]);
        let r = evaluate(&preds(&[("q", "black cat")]), &g1);
        assert_eq!(r.exact_match, 0.0);
        assert!((r.f1 - 66.67).abs() < 0.01);

        let r = evaluate(&HashMap::new(), &g);
        assert_eq!((r.exact_match, r.f1, r.missing), (0.0, 0.0, 2));
    }

    #[test]
    fn diff_partitions() {
        let g = golds(&[("1", &["x"]), ("2", &["y"]), ("3", &["z"])]);
        let a = evaluate(&preds(&[("1", "x"), ("2", "y"), ("3", "z")]), &g);
        let b = evaluate(&preds(&[("1", "no"), ("2", "no"), ("3", "no")]), &g);
        let q: HashMap<String, String> = [("1", "who is x"), ("2", "what y"), ("3", "z?")]
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let d = diff_systems(&a, &b, &q).unwrap();
        assert_eq!(d.a_wins.len(), 3);
        assert!(d.b_wins.is_empty());
        let hist: usize = d.summaries["a_wins"].question_words.values().sum();
        assert_eq!(hist, 3);
        let same = diff_systems(&a, &a, &q).unwrap();
        assert!(same.a_wins.is_empty() && same.b_wins.is_empty());
        let other = evaluate(&HashMap::new(), &golds(&[("9", &["x"])]));
        assert!(diff_systems(&a, &other, &q).is_err());
    }

    proptest! {
        #[test]
        fn f1_symmetric_and_em_implies_f1(a in "[a-c ]{0,12}", b in "[a-c ]{0,12}") {
            prop_assert!((token_f1(&a, &b) - token_f1(&b, &a)).abs() < 1e-12);
            if exact_match(&a, &b) {
                prop_assert_eq!(token_f1(&a, &b), 1.0);
            }
        }

        #[test]
        fn aggregate_f1_bounds_em(ps in proptest::collection::vec(("[a-c ]{0,6}", "[a-c ]{0,6}"), 1..10)) {
            let g: HashMap<String, Vec<String>> = ps.iter().enumerate().map(|(i, (_, g))| (i.to_string(), vec![g.clone()])).collect();
            let p: HashMap<String, String> = ps.iter().enumerate().map(|(i, (p, _))| (i.to_string(), p.clone())).collect();
            let r = evaluate(&p, &g);
            prop_assert!(r.f1 + 1e-9 >= r.exact_match);
            prop_assert!(r.f1 <= 100.0 + 1e-9);
        }
    }
}
