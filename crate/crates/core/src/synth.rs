//! Synthetic toy reading task.
//!
//! Vocabulary of 100 tokens: 10 type words `t0..t9`, 40 entities `e{t}{k}`
//! (entity `k` of type `t`), 40 cue words `c00..c39` and 10 function
//! tokens. A question reads `what tT is near cA cB cC ?`; the answer is the
//! type-`T` entity with the three cue words immediately next to it. The
//! context also holds a type distractor (another type, same cues adjacent),
//! and often a near miss: a same-type entity whose cues are interleaved with
//! filler within five tokens. Counting question words in windows cannot
//! separate the near miss from the answer; word order can.

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};

use crate::autodiff::Tensor;
use crate::error::Result;
use crate::text::{write_embeddings, Embeddings, Vocabulary};
use crate::train::checkpoint::write_atomic;

pub const TYPES: usize = 10;
pub const ENTITIES_PER_TYPE: usize = 4;
pub const CUES: usize = 40;
const FUNCTION_WORDS: [&str; 10] = ["what", "is", "near", "the", "of", "a", "and", ",", ".", "?"];
/// Room for every block plus separators.
pub const MIN_CONTEXT: usize = 24;
const FILLERS: [&str; 5] = ["the", "of", "a", "and", ","];

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub train: usize,
    pub dev: usize,
    /// Context length in tokens; raised to [`MIN_CONTEXT`] if smaller.
    pub context_len: usize,
    /// Probability that a context contains a near miss.
    pub near_miss_rate: f64,
    pub dim: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            train: 5000,
            dev: 500,
            context_len: 60,
            near_miss_rate: 0.7,
            dim: 50,
            seed: 0,
        }
    }
}

pub struct SynthData {
    pub train: Value,
    pub dev: Value,
    pub embeddings: Embeddings,
}

fn type_word(t: usize) -> String {
    format!("t{t}")
}

fn entity(t: usize, k: usize) -> String {
    format!("e{t}{k}")
}

fn cue(c: usize) -> String {
    format!("c{c:02}")
}

pub fn vocabulary() -> Vec<String> {
    let mut v: Vec<String> = (0..TYPES).map(type_word).collect();
    for t in 0..TYPES {
        v.extend((0..ENTITIES_PER_TYPE).map(|k| entity(t, k)));
    }
    v.extend((0..CUES).map(cue));
    v.extend(FUNCTION_WORDS.iter().map(|s| s.to_string()));
    v
}

/// Random unit vectors; an entity is its type word's vector plus noise so
/// type membership is visible in embedding space.
fn embeddings(rng: &mut ChaCha8Rng, dim: usize) -> Embeddings {
    let mut gauss = |scale: f32| -> Vec<f32> {
        let v: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.into_iter().map(|x| scale * x / norm).collect()
    };
    let words = vocabulary();
    let type_vecs: Vec<Vec<f32>> = (0..TYPES).map(|_| gauss(1.0)).collect();
    let mut vocab = Vocabulary::new();
    let mut rows = vec![0.0f32; 2 * dim];
    for w in &words {
        vocab.add(w);
        let v = if let Some(t) = w.strip_prefix('t').and_then(|s| s.parse::<usize>().ok()) {
            type_vecs[t].clone()
        } else if w.starts_with('e') && w.len() == 3 {
            let t = w[1..2].parse::<usize>().expect("entity type digit");
            let noise = gauss(0.6);
            type_vecs[t].iter().zip(noise).map(|(a, b)| a + b).collect()
        } else {
            gauss(1.0)
        };
        rows.extend(v);
    }
    let matrix = Tensor::new(vec![vocab.len(), dim], rows).expect("rows match vocabulary");
    Embeddings { vocab, matrix }
}

/// Places `blocks` at random non-overlapping offsets separated by at least
/// one filler token.
fn layout(rng: &mut ChaCha8Rng, len: usize, blocks: &[usize]) -> Vec<usize> {
    let used: usize = blocks.iter().sum::<usize>() + blocks.len();
    let free = len - used;
    let mut gaps: Vec<usize> = (0..=blocks.len()).map(|_| 0).collect();
    for _ in 0..free {
        let i = rng.random_range(0..gaps.len());
        gaps[i] += 1;
    }
    let mut order: Vec<usize> = (0..blocks.len()).collect();
    order.shuffle(rng);
    let mut starts = vec![0; blocks.len()];
    let mut pos = gaps[0];
    for (j, &b) in order.iter().enumerate() {
        starts[b] = pos;
        pos += blocks[b] + 1 + gaps[j + 1];
    }
    starts
}

fn example(rng: &mut ChaCha8Rng, cfg: &SynthConfig, id: String) -> Value {
    let t = rng.random_range(0..TYPES);
    let mut cues: Vec<usize> = (0..CUES).collect();
    cues.shuffle(rng);
    let (q_cues, spare) = cues.split_at(3);
    let other_types: Vec<usize> = (0..TYPES).filter(|&x| x != t).collect();
    let mut ks: Vec<usize> = (0..ENTITIES_PER_TYPE).collect();
    ks.shuffle(rng);

    let filler = |rng: &mut ChaCha8Rng| -> String {
        if rng.random_bool(0.5) {
            FILLERS.choose(rng).expect("non-empty").to_string()
        } else {
            cue(*spare.choose(rng).expect("non-empty"))
        }
    };
    // cue cluster next to an entity, on a random side
    let adjacent = |rng: &mut ChaCha8Rng, ent: String| -> (Vec<String>, usize) {
        let mut c: Vec<String> = q_cues.iter().map(|&c| cue(c)).collect();
        c.shuffle(rng);
        if rng.random_bool(0.5) {
            c.push(ent);
            (c, 3)
        } else {
            c.insert(0, ent);
            (c, 0)
        }
    };

    let mut blocks: Vec<(Vec<String>, usize)> = Vec::new();
    blocks.push(adjacent(rng, entity(t, ks[0])));
    let ot = *other_types.choose(rng).expect("nine other types");
    let ok = rng.random_range(0..ENTITIES_PER_TYPE);
    blocks.push(adjacent(rng, entity(ot, ok)));
    if rng.random_bool(cfg.near_miss_rate) {
        // cues at distances 2, 4 and 5 from the entity
        let mut c: Vec<String> = q_cues.iter().map(|&c| cue(c)).collect();
        c.shuffle(rng);
        let mut b = vec![c[0].clone(), c[1].clone(), filler(rng), c[2].clone(), filler(rng)];
        b.push(entity(t, ks[1]));
        if rng.random_bool(0.5) {
            b.reverse();
            blocks.push((b, 0));
        } else {
            blocks.push((b, 5));
        }
    }
    blocks.push((vec![entity(t, ks[2])], 0));
    for _ in 0..2 {
        let (tt, k) = (rng.random_range(0..TYPES), rng.random_range(0..ENTITIES_PER_TYPE));
        blocks.push((vec![entity(tt, k)], 0));
    }

    let sizes: Vec<usize> = blocks.iter().map(|b| b.0.len()).collect();
    let len = cfg.context_len.max(MIN_CONTEXT);
    let starts = layout(rng, len, &sizes);
    let mut tokens: Vec<String> = (0..len).map(|_| filler(rng)).collect();
    for ((b, _), &s) in blocks.iter().zip(&starts) {
        tokens[s..s + b.len()].clone_from_slice(b);
    }
    let answer_tok = starts[0] + blocks[0].1;
    let answer_start: usize = tokens[..answer_tok].iter().map(|w| w.len() + 1).sum();
    let answer = tokens[answer_tok].clone();
    let context = tokens.join(" ");
    let question = format!(
        "what {} is near {} {} {} ?",
        type_word(t),
        cue(q_cues[0]),
        cue(q_cues[1]),
        cue(q_cues[2])
    );
    json!({
        "context": context,
        "qas": [{"id": id, "question": question, "answers": [{"text": answer, "answer_start": answer_start}]}]
    })
}

fn split(rng: &mut ChaCha8Rng, cfg: &SynthConfig, name: &str, count: usize) -> Value {
    let paragraphs: Vec<Value> = (0..count).map(|i| example(rng, cfg, format!("{name}-{i:05}"))).collect();
    json!({"version": "synth-1", "data": [{"title": name, "paragraphs": paragraphs}]})
}

pub fn generate(cfg: &SynthConfig) -> SynthData {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let embeddings = embeddings(&mut rng, cfg.dim);
    let train = split(&mut rng, cfg, "train", cfg.train);
    let dev = split(&mut rng, cfg, "dev", cfg.dev);
    SynthData { train, dev, embeddings }
}

/// Writes `train.json`, `dev.json` and `embeddings.txt` into `dir`.
pub fn write_synth(dir: &Path, cfg: &SynthConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    let data = generate(cfg);
    write_atomic(&dir.join("train.json"), serde_json::to_string(&data.train)?.as_bytes())?;
    write_atomic(&dir.join("dev.json"), serde_json::to_string(&data.dev)?.as_bytes())?;
    write_embeddings(&dir.join("embeddings.txt"), &data.embeddings)
}
