//! Gradient-check harnesses shared by the test suites and the `gradcheck`
//! command: every graph primitive, the full model losses and the fusion
//! stack, all in 64-bit precision against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, Float, GradReport, Graph, Tensor, Var, DEFAULT_EPS, DEFAULT_TOL};
use crate::bow::LatSpan;
use crate::embedder::CharCnnConfig;
use crate::error::Result;
use crate::features::Features;
use crate::fusion::{add_fusion_params, fusion_stack};
use crate::model::{Model, ModelConfig, ModelKind};
use crate::params::{uniform_init, ParamStore};

pub const TINY_VOCAB: usize = 20;
pub const TINY_WORD_DIM: usize = 5;
pub const TINY_CHARS: usize = 15;

/// Model over a random 20-word, 5-dimensional embedding table with a small
/// character CNN.
pub fn tiny_model(kind: ModelKind, n: usize, seed: u64) -> Model<f64> {
    let mut cfg = ModelConfig::new(kind);
    cfg.n = n;
    cfg.char_cnn = Some(CharCnnConfig {
        c_dim: 3,
        out_dim: 4,
        width: 5,
        max_chars: 6,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe5);
    let emb = uniform_init(&mut rng, &[TINY_VOCAB, TINY_WORD_DIM], 1);
    Model::new(cfg, emb, TINY_CHARS, seed).expect("positive hidden size")
}

/// Random example for [`tiny_model`] with one gold span.
pub fn random_features(rng: &mut ChaCha8Rng, lx: usize, lq: usize) -> Features {
    let ids = |rng: &mut ChaCha8Rng, l: usize| (0..l).map(|_| rng.random_range(0..TINY_VOCAB)).collect::<Vec<_>>();
    let chars = |rng: &mut ChaCha8Rng, l: usize| {
        (0..l)
            .map(|_| (0..rng.random_range(1..8)).map(|_| rng.random_range(1..TINY_CHARS)).collect())
            .collect::<Vec<Vec<usize>>>()
    };
    let x_ids = ids(rng, lx);
    let q_ids = ids(rng, lq);
    let wiq_b = x_ids.iter().map(|x| if q_ids.contains(x) { 1.0 } else { 0.0 }).collect();
    let s = rng.random_range(0..lx);
    let e = rng.random_range(s..(s + 4).min(lx));
    let ls = rng.random_range(0..lq);
    Features {
        id: "r".into(),
        q_chars: chars(rng, lq),
        x_chars: chars(rng, lx),
        q_ids,
        x_ids,
        wiq_b,
        lat: LatSpan {
            start: ls,
            end: ls,
            kind: crate::bow::LatKind::QuestionWord,
        },
        gold_spans: vec![(s, e)],
    }
}

/// Draws closer than this to a relu kink are rejected by
/// [`check_model_loss`]; the loss is not differentiable there.
pub const KINK_MARGIN: f64 = 1e-3;

/// Full training loss of a freshly initialised model, checked with respect
/// to every parameter. The context is padded by two rows. Examples whose
/// relu pre-activations come within [`KINK_MARGIN`] of zero are redrawn.
pub fn check_model_loss(kind: ModelKind, n: usize, lx: usize, lq: usize, seed: u64) -> Result<GradReport> {
    let mut model = tiny_model(kind, n, seed);
    if kind != ModelKind::Bow {
        model.config.max_span_len = lx;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9c));
    // perturb the all-ones initialisations so no gradient is trivially symmetric
    for name in ["wiq.v", "fusion.v_beta", "fusion.v_gamma"] {
        if let Ok(t) = model.params.get_mut(name) {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
    }
    let mut f = random_features(&mut rng, lx, lq);
    for _ in 0..50 {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        model.loss(&mut g, &p, &f, None, lx + 2)?;
        if g.relu_margin().is_none_or(|m| m >= KINK_MARGIN) {
            break;
        }
        f = random_features(&mut rng, lx, lq);
    }
    grad_check(
        |g, v| {
            let p = model.params.bound_from(v);
            model.loss(g, &p, &f, None, lx + 2)
        },
        &model.params.tensors(),
        DEFAULT_EPS,
        DEFAULT_TOL,
    )
}

/// Fusion stack applied to random context and question states.
pub fn check_fusion(n: usize, lx: usize, lq: usize, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    add_fusion_params(&mut store, &mut rng, n);
    let k = store.len();
    let mut leaves = store.tensors();
    leaves.push(uniform_init(&mut rng, &[lx, n], 1));
    leaves.push(uniform_init(&mut rng, &[lq, n], 1));
    grad_check(
        |g, v| {
            let p = store.bound_from(&v[..k]);
            let out = fusion_stack(g, &p, v[k], v[k + 1], false)?;
            weighted_sum(g, out)
        },
        &leaves,
        DEFAULT_EPS,
        DEFAULT_TOL,
    )
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

/// Values bounded away from zero, for the kink of relu.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = rand_tensor(rng, shape, 0.05, 1.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Weighted sum with fixed weights so every output coordinate receives a
/// distinct upstream gradient.
fn weighted_sum(g: &mut Graph<f64>, v: Var) -> Result<Var> {
    let n = g.value(v).len();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect();
    let wt = g.constant(Tensor::new(g.shape(v).to_vec(), w)?);
    let p = g.mul(v, wt)?;
    g.sum(p, None)
}

/// One case per differentiable primitive, on random shapes drawn from `seed`.
pub fn primitive_cases(seed: u64) -> Vec<(&'static str, Vec<Tensor<f64>>, Build)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, k, n) = (rng.random_range(1..6), rng.random_range(2..6), rng.random_range(1..6));
    let mut r = |shape: &[usize]| rand_tensor(&mut rng, shape, -1.0, 1.0);
    let a = r(&[m, k]);
    let b = r(&[k, n]);
    let bt = r(&[n, k]);
    let row = r(&[k]);
    let same = r(&[m, k]);
    let kern = r(&[k, n, 5]);
    let bias = r(&[n]);
    let seq_x = r(&[2 * m, k]);
    let pos = rand_tensor(&mut rng, &[m, k], 0.2, 2.0);
    let kinked = away_from_zero(&mut rng, &[m, k]);
    // distinct values so the max is never tied
    let distinct = Tensor::new(
        vec![2 * m, n],
        (0..2 * m * n)
            .map(|i| ((i * 37) % 101) as f64 / 50.0 + rng.random_range(0.0..1e-3))
            .collect(),
    )
    .expect("sized");
    let mask: Vec<f64> = (0..k).map(|j| if j % 2 == 1 { f64::MASKED } else { 0.0 }).collect();
    let live: Vec<usize> = (0..m * k).filter(|i| (i % k) % 2 == 0).collect();
    let drop: Vec<f64> = (0..k).map(|j| if j % 3 == 0 { 0.0 } else { 2.0 }).collect();

    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, Build)> = vec![
        ("matmul", vec![a.clone(), b.clone()], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("matmul_vec", vec![a.clone(), row.clone()], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("matmul_t", vec![a.clone(), bt], Box::new(|g, v| g.matmul_t(v[0], v[1]))),
        ("matmul_tt", vec![b.clone(), a.clone()], Box::new(|g, v| g.matmul_ex(v[0], v[1], true, true))),
        ("add", vec![a.clone(), row.clone()], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![a.clone(), row.clone()], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul_broadcast", vec![a.clone(), row.clone()], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("mul", vec![a.clone(), same.clone()], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("affine", vec![a.clone()], Box::new(|g, v| g.affine(v[0], -0.7, 0.3))),
        ("scale", vec![a.clone()], Box::new(|g, v| g.scale(v[0], 1.7))),
        ("one_minus", vec![a.clone()], Box::new(|g, v| g.one_minus(v[0]))),
        ("concat_rows", vec![a.clone(), same.clone()], Box::new(|g, v| g.concat(&[v[0], v[1]], 0))),
        ("concat_cols", vec![a.clone(), same], Box::new(|g, v| g.concat(&[v[0], v[1]], 1))),
        ("slice", vec![a.clone()], Box::new(move |g, v| g.slice(v[0], 1, k / 2, k))),
        ("row", vec![a.clone()], Box::new(move |g, v| g.row(v[0], m - 1))),
        ("reshape", vec![a.clone()], Box::new(move |g, v| g.reshape(v[0], &[m * k]))),
        ("transpose", vec![a.clone()], Box::new(|g, v| g.transpose(v[0]))),
        ("tanh", vec![a.clone()], Box::new(|g, v| g.tanh(v[0]))),
        ("sigmoid", vec![a.clone()], Box::new(|g, v| g.sigmoid(v[0]))),
        ("relu", vec![kinked], Box::new(|g, v| g.relu(v[0]))),
        ("exp", vec![a.clone()], Box::new(|g, v| g.exp(v[0]))),
        ("log", vec![pos], Box::new(|g, v| g.log(v[0]))),
        ("softmax_rows", vec![a.clone()], Box::new(|g, v| g.softmax(v[0], 1, None))),
        ("softmax_cols", vec![a.clone()], Box::new(|g, v| g.softmax(v[0], 0, None))),
        ("log_softmax", vec![a.clone()], Box::new(|g, v| g.log_softmax(v[0], 1, None))),
        ("sum_axis", vec![a.clone()], Box::new(|g, v| g.sum(v[0], Some(0)))),
        ("mean_axis", vec![a.clone()], Box::new(|g, v| g.mean(v[0], Some(1)))),
        ("mean", vec![a.clone()], Box::new(|g, v| g.mean(v[0], None))),
        ("broadcast_rows", vec![row.clone()], Box::new(move |g, v| g.broadcast_rows(v[0], m))),
        ("logsumexp", vec![row.clone()], Box::new(|g, v| g.logsumexp(v[0]))),
        ("gather", vec![row], Box::new(move |g, v| g.gather(v[0], &[0, k - 1, 0]))),
        (
            "embedding_lookup",
            vec![a.clone()],
            Box::new(move |g, v| g.embedding_lookup(v[0], &[m - 1, 0, m - 1], Some(0))),
        ),
        ("dropout", vec![a.clone()], Box::new(move |g, v| g.dropout(v[0], &drop))),
        ("max_over_time", vec![distinct.clone()], Box::new(|g, v| g.max_over_time(v[0]))),
        ("max_over_time_grouped", vec![distinct], Box::new(|g, v| g.max_over_time_grouped(v[0], 2))),
        ("conv1d", vec![seq_x, kern, bias], Box::new(move |g, v| g.conv1d(v[0], v[1], v[2], m))),
    ];
    let mask2 = mask.clone();
    cases.push(("softmax_masked", vec![a.clone()], Box::new(move |g, v| g.softmax(v[0], 1, Some(&mask)))));
    // masked log-probabilities sit near the mask value; compare only live ones
    cases.push((
        "log_softmax_masked",
        vec![a],
        Box::new(move |g, v| {
            let lp = g.log_softmax(v[0], 1, Some(&mask2))?;
            let flat = g.reshape(lp, &[m * k])?;
            g.gather(flat, &live)
        }),
    ));
    cases
}

/// Runs [`primitive_cases`]; each output is reduced by a fixed weighted sum.
pub fn check_primitives(seed: u64) -> Result<Vec<(&'static str, GradReport)>> {
    primitive_cases(seed)
        .into_iter()
        .map(|(name, leaves, build)| {
            let rep = grad_check(
                |g, v| {
                    let out = build(g, v)?;
                    weighted_sum(g, out)
                },
                &leaves,
                DEFAULT_EPS,
                DEFAULT_TOL,
            )?;
            Ok((name, rep))
        })
        .collect()
}
