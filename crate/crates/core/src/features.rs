//! Per-example model inputs derived from a tokenized example.

use crate::bow::{extract_lat, LatSpan};
use crate::text::{TokenizedExample, Vocabulary};
use crate::wiq::{compute_wiq_binary, WiqPolicy};

#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub id: String,
    pub q_ids: Vec<usize>,
    pub x_ids: Vec<usize>,
    pub q_chars: Vec<Vec<usize>>,
    pub x_chars: Vec<Vec<usize>>,
    /// Binary word-in-question feature for each context token.
    pub wiq_b: Vec<f64>,
    pub lat: LatSpan,
    pub gold_spans: Vec<(usize, usize)>,
}

impl Features {
    pub fn context_len(&self) -> usize {
        self.x_ids.len()
    }
}

/// Builds features; character ids must already be encoded on `ex`
/// (they are only read when the model has a character CNN).
pub fn featurize(ex: &TokenizedExample, vocab: &Vocabulary, policy: WiqPolicy) -> Features {
    let pad_chars = |chars: &[Vec<usize>], n: usize| {
        if chars.len() == n {
            chars.to_vec()
        } else {
            vec![Vec::new(); n]
        }
    };
    Features {
        id: ex.id.clone(),
        q_ids: vocab.ids(&ex.question_tokens),
        x_ids: vocab.ids(&ex.context_tokens),
        q_chars: pad_chars(&ex.question_chars, ex.question_tokens.len()),
        x_chars: pad_chars(&ex.context_chars, ex.context_tokens.len()),
        wiq_b: compute_wiq_binary(&ex.context_tokens, &ex.question_tokens, policy),
        lat: extract_lat(&ex.question_tokens),
        gold_spans: ex.gold_spans.clone(),
    }
}
