//! Word embeddings: a fixed lookup table, optionally concatenated with a
//! character CNN (width-5 convolution, max over time).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Float, Graph, Tensor, Var};
use crate::error::Result;
use crate::params::{uniform_init, Bound, ParamStore};
use crate::text::{MAX_CHARS, PAD_ID, UNK_ID};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharCnnConfig {
    pub c_dim: usize,
    pub out_dim: usize,
    pub width: usize,
    /// Every token is padded or truncated to this many characters, so the
    /// pooled feature is a function of the token's characters alone.
    pub max_chars: usize,
}

impl Default for CharCnnConfig {
    fn default() -> Self {
        CharCnnConfig {
            c_dim: 50,
            out_dim: 100,
            width: 5,
            max_chars: MAX_CHARS,
        }
    }
}

pub fn add_char_cnn<T: Float, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, cfg: &CharCnnConfig, num_chars: usize) {
    store.insert("char.table", uniform_init(rng, &[num_chars, cfg.c_dim], cfg.c_dim));
    store.insert("char.kernel", uniform_init(rng, &[cfg.c_dim, cfg.out_dim, cfg.width], cfg.c_dim * cfg.width));
    store.insert("char.bias", Tensor::zeros(vec![cfg.out_dim]));
}

/// Rows of the fixed table `E`. Ids outside the table become unknown. The
/// result is a graph constant, so `E` never receives a gradient.
pub fn lookup<T: Float>(g: &mut Graph<T>, table: &Tensor<T>, ids: &[usize]) -> Var {
    let d = table.cols();
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        let id = if id < table.rows() { id } else { UNK_ID };
        out.extend_from_slice(table.row(id));
    }
    g.constant(Tensor::new(vec![ids.len(), d], out).expect("non-empty ids"))
}

/// Character features `(L, out_dim)` for tokens given as character ids.
pub fn char_features<T: Float>(g: &mut Graph<T>, p: &Bound, cfg: &CharCnnConfig, chars: &[Vec<usize>]) -> Result<Var> {
    let table = p.var("char.table");
    let rows = g.shape(table)[0];
    let width = cfg.max_chars.max(cfg.width);
    let mut ids = Vec::with_capacity(chars.len() * width);
    for token in chars {
        let kept = token.iter().take(width).map(|&c| if c < rows { c } else { UNK_ID });
        let n = kept.len();
        ids.extend(kept);
        ids.extend(std::iter::repeat_n(PAD_ID, width - n));
    }
    let emb = g.embedding_lookup(table, &ids, Some(PAD_ID))?;
    let conv = g.conv1d(emb, p.var("char.kernel"), p.var("char.bias"), width)?;
    g.max_over_time_grouped(conv, width)
}

/// `[x^w ; x^c]` per token, or just `x^w` without a character CNN.
pub fn embed_tokens<T: Float>(
    g: &mut Graph<T>,
    p: &Bound,
    table: &Tensor<T>,
    cnn: Option<&CharCnnConfig>,
    ids: &[usize],
    chars: &[Vec<usize>],
) -> Result<Var> {
    let words = lookup(g, table, ids);
    match cnn {
        None => Ok(words),
        Some(cfg) => {
            let c = char_features(g, p, cfg, chars)?;
            g.concat(&[words, c], 1)
        }
    }
}
