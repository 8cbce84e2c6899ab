//! Model configuration and the wrapper dispatching to the three variants.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Float, Graph, Tensor, Var};
use crate::bow;
use crate::embedder::CharCnnConfig;
use crate::error::{Error, Result};
use crate::fastqa;
use crate::features::Features;
use crate::params::{Bound, ParamStore};
use crate::text::TokenMode;
use crate::wiq::WiqPolicy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Bow,
    FastQa,
    FastQaExt,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Bow => "bow",
            ModelKind::FastQa => "fastqa",
            ModelKind::FastQaExt => "fastqaext",
        }
    }

    pub fn token_mode(self) -> TokenMode {
        match self {
            ModelKind::Bow => TokenMode::Bow,
            _ => TokenMode::FastQa,
        }
    }

    pub fn wiq_policy(self) -> WiqPolicy {
        match self {
            ModelKind::Bow => WiqPolicy::Normalized,
            _ => WiqPolicy::Surface,
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bow" => Ok(ModelKind::Bow),
            "fastqa" => Ok(ModelKind::FastQa),
            "fastqaext" => Ok(ModelKind::FastQaExt),
            other => Err(Error::InvalidArgument(format!("unknown model {other:?}"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How several gold spans of one example combine into a loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GoldLoss {
    /// Loss of the easiest gold span.
    Min,
    /// Negative log of the summed gold probabilities.
    Marginal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub n: usize,
    pub char_cnn: Option<CharCnnConfig>,
    pub use_wiq_b: bool,
    pub use_wiq_w: bool,
    pub gold_loss: GoldLoss,
    /// Longest candidate span of the bag-of-words model.
    pub max_span_len: usize,
    /// Optional cap on FastQA answer length at inference.
    pub max_answer_len: Option<usize>,
    /// Remove the self position from the intra-fusion softmax instead of
    /// only zeroing its score.
    pub fusion_exclude_self: bool,
}

impl ModelConfig {
    pub fn new(kind: ModelKind) -> Self {
        let bow = kind == ModelKind::Bow;
        ModelConfig {
            kind,
            n: if bow { 150 } else { 300 },
            char_cnn: if bow { None } else { Some(CharCnnConfig::default()) },
            use_wiq_b: true,
            use_wiq_w: true,
            gold_loss: if bow { GoldLoss::Marginal } else { GoldLoss::Min },
            max_span_len: 10,
            max_answer_len: None,
            fusion_exclude_self: false,
        }
    }

    /// Width of one token embedding.
    pub fn embed_dim(&self, word_dim: usize) -> usize {
        word_dim + self.char_cnn.map_or(0, |c| c.out_dim)
    }
}

/// A predicted span with its model probability.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpanPrediction {
    pub start: usize,
    pub end: usize,
    pub probability: f64,
}

/// Parameters, fixed word embeddings and configuration of one model.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    /// Fixed word embedding table; never trained.
    pub embeddings: Tensor<T>,
}

impl<T: Float> Model<T> {
    pub fn new(config: ModelConfig, embeddings: Tensor<T>, num_chars: usize, seed: u64) -> Result<Self> {
        if config.n == 0 {
            return Err(Error::InvalidArgument("hidden size must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.embed_dim(embeddings.cols());
        if let Some(cnn) = &config.char_cnn {
            crate::embedder::add_char_cnn(&mut params, &mut rng, cnn, num_chars);
        }
        match config.kind {
            ModelKind::Bow => bow::add_params(&mut params, &mut rng, config.n, d),
            ModelKind::FastQa | ModelKind::FastQaExt => fastqa::add_params(&mut params, &mut rng, &config, d),
        }
        Ok(Model {
            config,
            params,
            embeddings,
        })
    }

    pub fn cast<U: Float>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            embeddings: self.embeddings.cast(),
        }
    }

    /// Training loss of one example. `dropout` is a mask over the embedding
    /// width shared by all positions; `pad_to` pads the context to the batch
    /// length (padding never changes the loss).
    pub fn loss(&self, g: &mut Graph<T>, p: &Bound, f: &Features, dropout: Option<&[T]>, pad_to: usize) -> Result<Var> {
        check_features(f)?;
        match self.config.kind {
            ModelKind::Bow => bow::loss(self, g, p, f, dropout),
            _ => fastqa::loss(self, g, p, f, dropout, pad_to),
        }
    }

    /// Most probable span; `beam_k` only affects FastQA variants.
    pub fn predict(&self, f: &Features, beam_k: usize) -> Result<SpanPrediction> {
        check_features(f)?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        match self.config.kind {
            ModelKind::Bow => bow::predict(self, &mut g, &p, f),
            _ => fastqa::predict(self, &mut g, &p, f, beam_k),
        }
    }
}

fn check_features(f: &Features) -> Result<()> {
    if f.q_ids.is_empty() || f.x_ids.is_empty() {
        return Err(Error::InvalidArgument(format!("example {} has an empty question or context", f.id)));
    }
    Ok(())
}
