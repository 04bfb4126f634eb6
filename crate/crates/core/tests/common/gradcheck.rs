//! Central finite-difference checks of every differentiable graph operation
//! and of the full training loss.

#![allow(dead_code)]

use dualora::losses::Strategy;
use dualora::model::{LoraConfig, ModelConfig, ParamId, Phase, TranscriberModel};
use dualora::numerics::{Distance, Graph, Tensor, Var};
use dualora::synthdata::{tokenize, PairedSample, PAD};
use dualora::training::record_step_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
pub const INSTANCES: usize = 20;

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Like [`randn`] but with every entry at least `margin` away from zero, so
/// a finite-difference step never crosses a kink at 0.
fn randn_away(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor {
    let mut t = randn(rng, shape);
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = margin.copysign(*v) + *v;
        }
    }
    t
}

/// Gaussian `[rows×cols]` whose rows all have standard deviation at least
/// `min_std`. Near-constant rows make layer norm so curved that the
/// difference quotient at [`STEP`] is no longer accurate.
fn spread_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize, min_std: f64) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    while data.len() < rows * cols {
        let row: Vec<f64> = (0..cols).map(|_| rng.sample(StandardNormal)).collect();
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / cols as f64;
        if var.sqrt() >= min_std {
            data.extend(row);
        }
    }
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, or the absolute difference when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Reduces any node to a scalar with fixed random weights, so every output
/// element receives a distinct upstream gradient.
fn weighted_mean(g: &Graph, out: Var, seed: u64) -> Var {
    let shape = g.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.leaf(&randn(&mut rng, &shape));
    g.mean(g.mul(out, w).unwrap())
}

/// Largest relative error over the inputs of `build` at `inputs`.
pub fn check(inputs: &[Tensor], build: &dyn Fn(&Graph, &[Var]) -> Var) -> f64 {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(&t.clone().with_grad())).collect();
    let loss = build(&g, &vars);
    let grads = g.backward(loss).unwrap();
    let eval = |xs: &[Tensor]| {
        let g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t)).collect();
        g.scalar(build(&g, &vars))
    };
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.dense(*v);
        let mut numeric = vec![0.0; inputs[i].numel()];
        let mut xs = inputs.to_vec();
        for j in 0..numeric.len() {
            let orig = inputs[i].data()[j];
            xs[i].data_mut()[j] = orig + STEP;
            let up = eval(&xs);
            xs[i].data_mut()[j] = orig - STEP;
            let down = eval(&xs);
            xs[i].data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * STEP);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5))
}

fn instance(name: &str, rng: &mut ChaCha8Rng) -> f64 {
    let (m, k, n) = dims(rng);
    let seed = rng.gen();
    match name {
        "matmul" => check(&[randn(rng, &[m, k]), randn(rng, &[k, n])], &|g, v| {
            weighted_mean(g, g.matmul(v[0], v[1]).unwrap(), seed)
        }),
        "matmul_t" => check(&[randn(rng, &[m, k]), randn(rng, &[n, k])], &|g, v| {
            weighted_mean(g, g.matmul_t(v[0], v[1]).unwrap(), seed)
        }),
        "transpose" => check(&[randn(rng, &[m, n])], &|g, v| {
            weighted_mean(g, g.transpose(v[0]).unwrap(), seed)
        }),
        "add" => check(&[randn(rng, &[m, n]), randn(rng, &[m, n])], &|g, v| {
            weighted_mean(g, g.add(v[0], v[1]).unwrap(), seed)
        }),
        "sub" => check(&[randn(rng, &[m, n]), randn(rng, &[m, n])], &|g, v| {
            weighted_mean(g, g.sub(v[0], v[1]).unwrap(), seed)
        }),
        "mul" => check(&[randn(rng, &[m, n]), randn(rng, &[m, n])], &|g, v| {
            weighted_mean(g, g.mul(v[0], v[1]).unwrap(), seed)
        }),
        "scale" => {
            let c: f64 = rng.gen_range(-3.0..3.0);
            check(&[randn(rng, &[m, n])], &|g, v| weighted_mean(g, g.scale(v[0], c), seed))
        }
        "add_row" => check(&[randn(rng, &[m, n]), randn(rng, &[n])], &|g, v| {
            weighted_mean(g, g.add_row(v[0], v[1]).unwrap(), seed)
        }),
        "gelu" => check(&[randn(rng, &[m, n])], &|g, v| weighted_mean(g, g.gelu(v[0]), seed)),
        "relu" => check(&[randn_away(rng, &[m, n], 0.01)], &|g, v| {
            weighted_mean(g, g.relu(v[0]), seed)
        }),
        "layer_norm" => {
            let n = n + 1;
            check(&[spread_rows(rng, m, n, 0.5), randn(rng, &[n]), randn(rng, &[n])], &|g, v| {
                weighted_mean(g, g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(), seed)
            })
        }
        "embedding" => {
            let ids: Vec<usize> = (0..k + 2).map(|_| rng.gen_range(0..m + 1)).collect();
            check(&[randn(rng, &[m + 1, n])], &|g, v| {
                weighted_mean(g, g.embedding(v[0], &ids).unwrap(), seed)
            })
        }
        "concat_rows" => check(&[randn(rng, &[m, n]), randn(rng, &[k, n])], &|g, v| {
            weighted_mean(g, g.concat_rows(&[v[0], v[1]]).unwrap(), seed)
        }),
        "concat_cols" => check(&[randn(rng, &[m, n]), randn(rng, &[m, k])], &|g, v| {
            weighted_mean(g, g.concat_cols(&[v[0], v[1]]).unwrap(), seed)
        }),
        "slice_cols" => {
            let width = n + k;
            let start = rng.gen_range(0..width);
            let len = rng.gen_range(1..=width - start);
            check(&[randn(rng, &[m, width])], &|g, v| {
                weighted_mean(g, g.slice_cols(v[0], start, len).unwrap(), seed)
            })
        }
        "mean" => check(&[randn(rng, &[m, n])], &|g, v| g.mean(v[0])),
        "softmax" => check(&[randn(rng, &[m, n + 1])], &|g, v| {
            weighted_mean(g, g.softmax(v[0]).unwrap(), seed)
        }),
        "causal_softmax" => check(&[randn(rng, &[m, m])], &|g, v| {
            weighted_mean(g, g.causal_softmax(v[0]).unwrap(), seed)
        }),
        "segment_attention" => {
            let heads = rng.gen_range(1..3);
            let d = heads * rng.gen_range(1..4);
            let causal = rng.gen_bool(0.5);
            let q_segs: Vec<usize> = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(1..4)).collect();
            let k_segs: Vec<usize> = if causal {
                q_segs.clone()
            } else {
                q_segs.iter().map(|_| rng.gen_range(1..4)).collect()
            };
            let (tq, tk) = (q_segs.iter().sum::<usize>(), k_segs.iter().sum::<usize>());
            check(&[randn(rng, &[tq, d]), randn(rng, &[tk, d]), randn(rng, &[tk, d])], &|g, v| {
                let out = g.segment_attention(v[0], v[1], v[2], heads, &q_segs, &k_segs, causal).unwrap();
                weighted_mean(g, out, seed)
            })
        }
        "cross_entropy" => {
            let rows = m + 1;
            let targets: Vec<usize> = (0..rows)
                .map(|i| if i == 0 { PAD } else { rng.gen_range(0..n + 1) })
                .collect();
            check(&[randn(rng, &[rows, n + 1])], &|g, v| {
                g.cross_entropy(v[0], &targets, Some(PAD)).unwrap()
            })
        }
        "dropout" => {
            let p = rng.gen_range(0.1..0.6);
            check(&[randn(rng, &[m, n])], &|g, v| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                weighted_mean(g, g.dropout(v[0], p, &mut r).unwrap(), seed)
            })
        }
        "masked_distance_l1" | "masked_distance_l2" => {
            let kind = if name.ends_with("l1") { Distance::L1 } else { Distance::L2 };
            let mask: Vec<bool> = (0..m + 1).map(|i| i == 0 || rng.gen_bool(0.7)).collect();
            let a = randn(rng, &[m + 1, n]);
            // Keep |a − b| away from zero for the L1 kink.
            let offset = randn_away(rng, &[m + 1, n], 0.01);
            let b = Tensor::new(
                a.shape().to_vec(),
                a.data().iter().zip(offset.data()).map(|(x, o)| x + o).collect(),
            )
            .unwrap();
            check(&[a, b], &|g, v| g.masked_distance(v[0], v[1], kind, &mask).unwrap())
        }
        "combine" => {
            let w = rng.gen_range(0.0..10.0);
            check(&[randn(rng, &[1]), randn(rng, &[1]), randn(rng, &[1])], &|g, v| {
                g.combine(v[0], v[1], v[2], w).unwrap()
            })
        }
        other => panic!("no gradient check for {other}"),
    }
}

pub const OPS: &[&str] = &[
    "matmul",
    "matmul_t",
    "transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "add_row",
    "gelu",
    "relu",
    "layer_norm",
    "embedding",
    "concat_rows",
    "concat_cols",
    "slice_cols",
    "mean",
    "softmax",
    "causal_softmax",
    "segment_attention",
    "cross_entropy",
    "dropout",
    "masked_distance_l1",
    "masked_distance_l2",
    "combine",
];

/// Worst relative error of `name` over [`INSTANCES`] random instances.
pub fn check_op(name: &str) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164 ^ name.len() as u64 ^ (name.as_bytes()[0] as u64) << 8);
    (0..INSTANCES)
        .map(|_| {
            let e = instance(name, &mut rng);
            if std::env::var_os("GRADCHECK_VERBOSE").is_some() {
                eprintln!("{name}: {e:.3e}");
            }
            e
        })
        .fold(0.0, f64::max)
}

fn tiny_model(rng: &mut ChaCha8Rng) -> TranscriberModel {
    let cfg = ModelConfig {
        feature_dim: 4,
        hidden_dim: 8,
        num_heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        ffn_dim: 8,
        ..ModelConfig::default()
    };
    let mut model = TranscriberModel::from_seed(cfg, rng.gen()).unwrap();
    let lora = LoraConfig {
        rank: 2,
        alpha: 4.0,
        dropout: 0.2,
    };
    model.attach_lora(&lora, rng).unwrap();
    // Non-zero B so gradients reach A as well.
    for (_, a) in model.adapters_mut() {
        for v in a.b.data_mut() {
            *v = 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    model
}

fn paired(rng: &mut ChaCha8Rng, text: &str, frames: usize) -> PairedSample {
    let vocal = randn(rng, &[frames, 4]);
    let noise = randn(rng, &[frames, 4]);
    let mixture = Tensor::new(
        vec![frames, 4],
        vocal.data().iter().zip(noise.data()).map(|(v, n)| v + n).collect(),
    )
    .unwrap();
    PairedSample {
        id: text.into(),
        seed: 0,
        language: "en".into(),
        text: text.into(),
        tokens: tokenize(text).unwrap(),
        vocal,
        mixture,
        gain: 1.0,
    }
}

/// Step loss plus the graph variables of `ids` in the same binding.
fn step_loss(
    model: &TranscriberModel,
    batch: &[&PairedSample],
    strategy: &Strategy,
    seed: u64,
    ids: &[ParamId],
) -> (Graph, Var, Vec<Var>) {
    let g = Graph::new();
    let (total, vars) = {
        let bound = model.bind(&g);
        let mut coin = ChaCha8Rng::seed_from_u64(seed);
        let mut dropout = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let total = record_step_loss(&bound, batch, strategy, &mut coin, &mut dropout).unwrap().total;
        (total, ids.iter().map(|&id| bound.var(id)).collect())
    };
    (g, total, vars)
}

/// Worst relative error of the full step loss of `strategy` with respect to
/// the trainable parameters of `phase`. With `sample` set, only that many
/// randomly chosen elements of each tensor are perturbed.
pub fn check_full_loss(strategy: &Strategy, phase: Phase, sample: Option<usize>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6c6f_7373 ^ phase as u64);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let mut model = tiny_model(&mut rng);
        model.set_phase(phase);
        let a = paired(&mut rng, "la la", 9);
        let b = paired(&mut rng, "oh", 5);
        let batch = [&a, &b];
        let seed: u64 = rng.gen();
        let ids = model.trainable_parameters(phase);
        let analytic: Vec<Vec<f64>> = {
            let (g, total, vars) = step_loss(&model, &batch, strategy, seed, &ids);
            let grads = g.backward(total).unwrap();
            vars.iter().map(|&v| grads.dense(v)).collect()
        };
        let mut a_all = Vec::new();
        let mut n_all = Vec::new();
        for (id, grad) in ids.iter().zip(&analytic) {
            let len = model.param(*id).numel();
            let picks: Vec<usize> = match sample {
                Some(s) => (0..s.min(len)).map(|_| rng.gen_range(0..len)).collect(),
                None => (0..len).collect(),
            };
            for j in picks {
                let orig = model.param(*id).data()[j];
                let mut eval = |x: f64| {
                    model.param_mut(*id).data_mut()[j] = x;
                    let (g, total, _) = step_loss(&model, &batch, strategy, seed, &[]);
                    g.scalar(total)
                };
                let numeric = (eval(orig + STEP) - eval(orig - STEP)) / (2.0 * STEP);
                model.param_mut(*id).data_mut()[j] = orig;
                a_all.push(grad[j]);
                n_all.push(numeric);
            }
        }
        worst = worst.max(relative_error(&a_all, &n_all));
    }
    worst
}

pub fn cns_l2() -> Strategy {
    Strategy::Cns {
        kind: Distance::L2,
        weight: 1.0,
    }
}

/// `(label, worst relative error)` for every check of the suite.
pub fn full_suite() -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = OPS.iter().map(|op| (op.to_string(), check_op(op))).collect();
    out.push(("cns loss, adapter parameters".into(), check_full_loss(&cns_l2(), Phase::Finetune, None)));
    out.push(("cns loss, base parameters".into(), check_full_loss(&cns_l2(), Phase::Pretrain, Some(3))));
    out
}
