//! Mini-batch training with Adam, dev-F1 driven learning-rate halving,
//! variational input dropout, checkpoints and early stopping.

pub mod checkpoint;
pub mod optim;

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalResult};
use crate::features::{featurize, Features};
use crate::model::{Model, ModelConfig, ModelKind};
use crate::params::ParamStore;
use crate::text::{cut_context, CharVocab, TokenizedExample, Vocabulary};

pub use checkpoint::Checkpoint;
pub use optim::{clip_global_norm, lr_schedule_update, variational_mask, Adam};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub dropout: f64,
    /// Mini-batches between checkpoints; `None` checkpoints once per epoch.
    pub checkpoint_every: Option<usize>,
    pub beam_k: usize,
    pub max_context: usize,
    pub seed: u64,
    pub max_epochs: usize,
    pub max_steps: Option<u64>,
    /// Stop after this many checkpoints without a dev F1 improvement.
    pub patience: usize,
    pub clip_norm: Option<f64>,
    pub min_lr: f64,
    /// Stop once this much wall time has passed (checked between batches).
    pub max_seconds: Option<f64>,
}

impl TrainConfig {
    pub fn new(kind: ModelKind) -> Self {
        let bow = kind == ModelKind::Bow;
        TrainConfig {
            model: ModelConfig::new(kind),
            lr: 1e-3,
            batch_size: if bow { 32 } else { 64 },
            dropout: if bow { 0.2 } else { 0.5 },
            checkpoint_every: if bow { None } else { Some(1000) },
            beam_k: 5,
            max_context: 400,
            seed: 0,
            max_epochs: 10,
            max_steps: None,
            patience: 5,
            clip_norm: Some(5.0),
            min_lr: 1e-6,
            max_seconds: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u64,
    pub batch_in_epoch: u64,
    pub lr: f64,
    pub f1_history: Vec<f64>,
    pub best_f1: Option<f64>,
    pub best_em: Option<f64>,
    pub best_step: u64,
    pub stale_checkpoints: usize,
    pub stopped: bool,
    pub loss_since_checkpoint: f64,
    pub steps_since_checkpoint: u64,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f64,
    pub dev_em: f64,
    pub dev_f1: f64,
    pub lr: f64,
    pub wall_time: f64,
}

/// Tokenized examples with their model features.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub examples: Vec<TokenizedExample>,
    pub features: Vec<Features>,
}

impl Dataset {
    /// Encodes characters and builds features for `kind`.
    pub fn new(mut examples: Vec<TokenizedExample>, vocab: &Vocabulary, chars: &CharVocab, kind: ModelKind) -> Self {
        let features = examples
            .iter_mut()
            .map(|ex| {
                ex.encode_chars(chars);
                featurize(ex, vocab, kind.wiq_policy())
            })
            .collect();
        Dataset { examples, features }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn golds(&self) -> HashMap<String, Vec<String>> {
        self.examples.iter().map(|e| (e.id.clone(), e.raw_answers.clone())).collect()
    }

    pub fn questions(&self) -> HashMap<String, String> {
        self.examples.iter().map(|e| (e.id.clone(), e.question.clone())).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepStats {
    pub kept: usize,
    pub without_gold: usize,
    pub cut_dropped: usize,
    pub too_long: usize,
}

/// Training-set filtering: examples need a question and a gold span, long
/// contexts are cut, and the bag-of-words model needs a short enough span.
pub fn prepare_training(examples: &[TokenizedExample], cfg: &TrainConfig) -> (Vec<TokenizedExample>, PrepStats) {
    let mut stats = PrepStats::default();
    let mut out = Vec::new();
    for ex in examples {
        if ex.gold_spans.is_empty() || ex.question_tokens.is_empty() {
            stats.without_gold += 1;
            continue;
        }
        let Some(mut cut) = cut_context(ex, cfg.max_context) else {
            stats.cut_dropped += 1;
            continue;
        };
        if cfg.model.kind == ModelKind::Bow {
            let max = cfg.model.max_span_len;
            cut.gold_spans.retain(|&(s, e)| e - s < max);
            if cut.gold_spans.is_empty() {
                stats.too_long += 1;
                continue;
            }
        }
        out.push(cut);
    }
    stats.kept = out.len();
    (out, stats)
}

/// Answer strings for every example; examples the model cannot read get an
/// empty answer.
pub fn predict_dataset(model: &Model<f32>, data: &Dataset, beam_k: usize) -> Result<HashMap<String, String>> {
    let mut out = HashMap::with_capacity(data.len());
    for (ex, f) in data.examples.iter().zip(&data.features) {
        let text = if f.q_ids.is_empty() || f.x_ids.is_empty() {
            String::new()
        } else {
            let p = model.predict(f, beam_k)?;
            ex.span_text(p.start, p.end)
        };
        out.insert(ex.id.clone(), text);
    }
    Ok(out)
}

pub fn evaluate_model(model: &Model<f32>, data: &Dataset, beam_k: usize) -> Result<EvalResult> {
    let preds = predict_dataset(model, data, beam_k)?;
    Ok(evaluate(&preds, &data.golds()))
}

/// Deterministic example order for one epoch.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, epoch, 0x5eed));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub epochs: u64,
    pub best_dev_em: f64,
    pub best_dev_f1: f64,
    pub best_step: u64,
    pub final_lr: f64,
    pub early_stopped: bool,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model<f32>,
    pub adam: Adam<f32>,
    pub state: TrainState,
    pub vocab_fingerprint: String,
    pub char_vocab: CharVocab,
    pub metrics: Vec<MetricsRecord>,
    /// Loss of every step run by this instance.
    pub step_losses: Vec<f32>,
    train: Vec<Features>,
    best: Option<ParamStore<f32>>,
    order: Option<(u64, Vec<usize>)>,
    started: Instant,
    out_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        model: Model<f32>,
        train: Vec<Features>,
        vocab_fingerprint: String,
        char_vocab: CharVocab,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        if config.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        let adam = Adam::new(&model.params);
        let state = TrainState {
            lr: config.lr,
            ..Default::default()
        };
        Ok(Trainer {
            config,
            model,
            adam,
            state,
            vocab_fingerprint,
            char_vocab,
            metrics: Vec::new(),
            step_losses: Vec::new(),
            train,
            best: None,
            order: None,
            started: Instant::now(),
            out_dir: None,
        })
    }

    /// Continues from a checkpoint; `embeddings` must come from the same file
    /// used originally.
    pub fn resume(ckpt: Checkpoint, embeddings: Tensor<f32>, train: Vec<Features>) -> Result<Self> {
        let model = Model {
            config: ckpt.model.clone(),
            params: ckpt.params.clone(),
            embeddings,
        };
        let mut t = Trainer::new(ckpt.train.clone(), model, train, ckpt.vocab_fingerprint.clone(), ckpt.char_vocab.clone())?;
        t.adam = ckpt.adam;
        t.state = ckpt.state;
        Ok(t)
    }

    /// Parameters of the best checkpoint so far, restored when a resumed run
    /// ends without improving on them.
    pub fn with_best_params(mut self, params: ParamStore<f32>) -> Self {
        self.best = Some(params);
        self
    }

    /// Writes checkpoints and the metrics log under `dir`.
    pub fn with_output(mut self, dir: &Path) -> Self {
        self.out_dir = Some(dir.to_path_buf());
        self
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.config.clone(),
            train: self.config.clone(),
            vocab_fingerprint: self.vocab_fingerprint.clone(),
            char_vocab: self.char_vocab.clone(),
            params: self.model.params.clone(),
            adam: self.adam.clone(),
            state: self.state.clone(),
        }
    }

    fn batch(&mut self) -> Vec<usize> {
        let n = self.train.len();
        let epoch = self.state.epoch;
        if self.order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            self.order = Some((epoch, epoch_order(self.config.seed, epoch, n)));
        }
        let bs = self.config.batch_size.min(n);
        let start = (self.state.batch_in_epoch as usize * bs).min(n);
        let end = (start + bs).min(n);
        self.order.as_ref().expect("set above").1[start..end].to_vec()
    }

    /// Runs one mini-batch update and returns its mean loss and whether it
    /// finished an epoch.
    pub fn train_step(&mut self) -> Result<(f32, bool)> {
        let batch = self.batch();
        let pad_to = batch.iter().map(|&i| self.train[i].context_len()).max().unwrap_or(0);
        let width = self.model.config.embed_dim(self.model.embeddings.cols());
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.config.seed, self.state.step, 0xd0));
        let mut grads: Vec<Vec<f32>> = self.model.params.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect();
        let mut loss_sum = 0.0f64;
        for &i in &batch {
            let mask = if self.config.dropout > 0.0 {
                Some(variational_mask::<f32, _>(&mut rng, width, self.config.dropout)?)
            } else {
                None
            };
            let mut g = Graph::new();
            let p = self.model.params.bind(&mut g);
            let l = self.model.loss(&mut g, &p, &self.train[i], mask.as_deref(), pad_to)?;
            g.backward(l)?;
            loss_sum += g.data(l)[0] as f64;
            for (acc, gr) in grads.iter_mut().zip(p.gradients(&g)) {
                for (a, b) in acc.iter_mut().zip(gr) {
                    *a += b;
                }
            }
        }
        let scale = 1.0 / batch.len() as f32;
        grads.iter_mut().flatten().for_each(|g| *g *= scale);
        if let Some(max) = self.config.clip_norm {
            clip_global_norm(&mut grads, max);
        }
        self.adam.update(&mut self.model.params, &grads, self.state.lr)?;
        let loss = (loss_sum / batch.len() as f64) as f32;
        self.state.step += 1;
        self.state.batch_in_epoch += 1;
        self.state.loss_since_checkpoint += loss as f64;
        self.state.steps_since_checkpoint += 1;
        let n = self.train.len();
        let bs = self.config.batch_size.min(n);
        let epoch_done = self.state.batch_in_epoch as usize * bs >= n;
        if epoch_done {
            self.state.epoch += 1;
            self.state.batch_in_epoch = 0;
        }
        self.step_losses.push(loss);
        Ok((loss, epoch_done))
    }

    /// Evaluates on `dev`, updates the schedule and early stopping, logs
    /// metrics and persists checkpoints.
    pub fn run_checkpoint(&mut self, dev: &Dataset) -> Result<MetricsRecord> {
        let res = evaluate_model(&self.model, dev, self.config.beam_k)?;
        let st = &mut self.state;
        st.f1_history.push(res.f1);
        let new_lr = lr_schedule_update(&st.f1_history, st.lr, self.config.min_lr);
        if new_lr < st.lr {
            let h = &st.f1_history;
            log::info!(
                "dev F1 dropped {:.2} -> {:.2}; learning rate {} -> {}",
                h[h.len() - 2],
                h[h.len() - 1],
                st.lr,
                new_lr
            );
        }
        st.lr = new_lr;
        let improved = st.best_f1.is_none_or(|b| res.f1 > b);
        if improved {
            st.best_f1 = Some(res.f1);
            st.best_em = Some(res.exact_match);
            st.best_step = st.step;
            st.stale_checkpoints = 0;
            self.best = Some(self.model.params.clone());
        } else {
            st.stale_checkpoints += 1;
            if st.stale_checkpoints >= self.config.patience {
                log::info!("no dev F1 improvement for {} checkpoints; stopping", st.stale_checkpoints);
                st.stopped = true;
            }
        }
        let record = MetricsRecord {
            step: st.step,
            loss: st.loss_since_checkpoint / st.steps_since_checkpoint.max(1) as f64,
            dev_em: res.exact_match,
            dev_f1: res.f1,
            lr: st.lr,
            wall_time: self.started.elapsed().as_secs_f64(),
        };
        st.loss_since_checkpoint = 0.0;
        st.steps_since_checkpoint = 0;
        log::info!(
            "step {} loss {:.4} dev EM {:.2} F1 {:.2} lr {}",
            record.step,
            record.loss,
            record.dev_em,
            record.dev_f1,
            record.lr
        );
        if let Some(dir) = &self.out_dir {
            let path = dir.join("metrics.jsonl");
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(&path, e))?;
            let ckpt = self.checkpoint();
            ckpt.save(&dir.join("last.ckpt"))?;
            if improved {
                ckpt.save(&dir.join("best.ckpt"))?;
            }
        }
        self.metrics.push(record.clone());
        Ok(record)
    }

    fn out_of_budget(&self) -> bool {
        let st = &self.state;
        st.stopped
            || self.config.max_steps.is_some_and(|m| st.step >= m)
            || st.epoch as usize >= self.config.max_epochs
            || self
                .config
                .max_seconds
                .is_some_and(|s| self.started.elapsed().as_secs_f64() >= s)
    }

    /// Trains until early stopping or a step, epoch or time limit, then
    /// restores the parameters of the best checkpoint.
    pub fn run(&mut self, dev: &Dataset) -> Result<TrainSummary> {
        if dev.is_empty() {
            return Err(Error::Dataset("dev set is empty".into()));
        }
        while !self.out_of_budget() {
            let (_, epoch_done) = self.train_step()?;
            let due = match self.config.checkpoint_every {
                Some(k) => self.state.step.is_multiple_of(k.max(1) as u64),
                None => epoch_done,
            };
            if due {
                self.run_checkpoint(dev)?;
            }
        }
        if self.state.steps_since_checkpoint > 0 || self.metrics.is_empty() {
            self.run_checkpoint(dev)?;
        }
        if let Some(params) = self.best.take() {
            self.model.params = params;
        }
        Ok(TrainSummary {
            steps: self.state.step,
            epochs: self.state.epoch,
            best_dev_em: self.state.best_em.unwrap_or(0.0),
            best_dev_f1: self.state.best_f1.unwrap_or(0.0),
            best_step: self.state.best_step,
            final_lr: self.state.lr,
            early_stopped: self.state.stopped,
        })
    }
}
