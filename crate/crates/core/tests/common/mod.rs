#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use indistill_core::losses::{cross_entropy, kl_distill_loss, mse_feature_loss, pkt_loss};
use indistill_core::metrics::EmbeddingSet;
use indistill_core::tensor::{finite_diff_check, BatchNormMode, RunningStats};
use indistill_core::{Result, Tape, Tensor, Var};

pub const GRAD_TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// `Σ out ⊙ R` with a fixed random `R`, so every output coordinate matters.
fn project(tape: &mut Tape<f64>, out: Var, r: &Tensor<f64>) -> Result<Var> {
    let r = tape.constant(r.clone());
    let m = tape.mul(out, r)?;
    Ok(tape.sum(m))
}

/// Ops covered by the gradient suite.
pub const GRAD_OPS: [&str; 9] = [
    "conv2d",
    "batchnorm2d",
    "dense",
    "maxpool",
    "softmax+kl",
    "mse",
    "pkt",
    "cross-entropy",
    "composite",
];

/// Worst relative error of one random instance of `op`.
pub fn grad_case(op: &str, seed: u64) -> Result<f64> {
    let mut g = rng(seed);
    match op {
        "conv2d" => {
            let n = g.gen_range(1..3);
            let cin = g.gen_range(1..4);
            let cout = g.gen_range(1..4);
            let k = [1, 3][g.gen_range(0..2)];
            let stride = g.gen_range(1..3);
            let pad = g.gen_range(0..=k / 2);
            let hw = g.gen_range(k..k + 4);
            let x = randn(&[n, cin, hw, hw], &mut g);
            let w = randn(&[cin, cout, k, k], &mut g);
            let b = randn(&[cout], &mut g);
            let mut probe = Tape::<f64>::inference();
            let (xv, wv, bv) = (probe.constant(x.clone()), probe.constant(w.clone()), probe.constant(b.clone()));
            let y = probe.conv2d(xv, wv, bv, stride, pad)?;
            let shape = probe.shape(y).to_vec();
            let r = randn(&shape, &mut g);
            finite_diff_check(
                |t, v| {
                    let y = t.conv2d(v[0], v[1], v[2], stride, pad)?;
                    project(t, y, &r)
                },
                &[x, w, b],
                STEP,
            )
        }
        "batchnorm2d" => {
            let n = g.gen_range(2..4);
            let c = g.gen_range(1..4);
            let hw = g.gen_range(1..4);
            let x = randn(&[n, c, hw, hw], &mut g);
            let gamma = randn(&[c], &mut g);
            let beta = randn(&[c], &mut g);
            let r = randn(&[n, c, hw, hw], &mut g);
            finite_diff_check(
                |t, v| {
                    let mut stats = RunningStats::new(c);
                    let y = t.batch_norm(v[0], v[1], v[2], BatchNormMode::Train(&mut stats))?;
                    project(t, y, &r)
                },
                &[x, gamma, beta],
                STEP,
            )
        }
        "dense" => {
            let n = g.gen_range(1..5);
            let i = g.gen_range(1..6);
            let o = g.gen_range(1..6);
            let x = randn(&[n, i], &mut g);
            let w = randn(&[i, o], &mut g);
            let b = randn(&[o], &mut g);
            let r = randn(&[n, o], &mut g);
            finite_diff_check(
                |t, v| {
                    let y = t.dense(v[0], v[1], v[2])?;
                    project(t, y, &r)
                },
                &[x, w, b],
                STEP,
            )
        }
        "maxpool" => {
            let n = g.gen_range(1..3);
            let c = g.gen_range(1..3);
            let hw = g.gen_range(2..7);
            let x = randn(&[n, c, hw, hw], &mut g);
            let out = hw / 2;
            let r = randn(&[n, c, out, out], &mut g);
            finite_diff_check(
                |t, v| {
                    let y = t.max_pool2d(v[0], 2, 2)?;
                    project(t, y, &r)
                },
                &[x],
                STEP,
            )
        }
        "softmax+kl" => {
            let n = g.gen_range(1..5);
            let c = g.gen_range(2..6);
            let temp = g.gen_range(0.5..5.0);
            let u = randn(&[n, c], &mut g);
            let v = randn(&[n, c], &mut g);
            let r = randn(&[n, c], &mut g);
            let kl = finite_diff_check(|t, x| kl_distill_loss(t, x[0], x[1], temp), &[u.clone(), v.clone()], STEP)?;
            let sm = finite_diff_check(
                |t, x| {
                    let y = t.softmax(x[0], temp)?;
                    project(t, y, &r)
                },
                &[v],
                STEP,
            )?;
            Ok(kl.max(sm))
        }
        "mse" => {
            let shape = [g.gen_range(1..4), g.gen_range(1..4), g.gen_range(1..4), g.gen_range(1..4)];
            let p = randn(&shape, &mut g);
            let s = randn(&shape, &mut g);
            finite_diff_check(|t, v| mse_feature_loss(t, v[0], v[1]), &[p, s], STEP)
        }
        "pkt" => {
            let n = g.gen_range(2..7);
            let ft = randn(&[n, g.gen_range(1..6)], &mut g);
            let fs = randn(&[n, g.gen_range(1..6)], &mut g);
            finite_diff_check(|t, v| pkt_loss(t, v[0], v[1]), &[ft, fs], STEP)
        }
        "cross-entropy" => {
            let n = g.gen_range(1..6);
            let c = g.gen_range(2..8);
            let logits = randn(&[n, c], &mut g);
            let labels: Vec<usize> = (0..n).map(|_| g.gen_range(0..c)).collect();
            finite_diff_check(|t, v| cross_entropy(t, v[0], &labels), &[logits], STEP)
        }
        "composite" => {
            // conv → batchnorm → relu → maxpool → flatten → dense → softmax-KL.
            // The conv bias is held fixed: batchnorm removes any per-channel
            // shift, so its gradient is identically zero and a relative
            // error against finite-difference noise says nothing.
            let (n, cin, c, hw, classes) = (3, 2, 3, 4, 4);
            let x = randn(&[n, cin, hw, hw], &mut g);
            let w = randn(&[cin, c, 3, 3], &mut g);
            let b = randn(&[c], &mut g);
            let gamma = randn(&[c], &mut g);
            let beta = randn(&[c], &mut g);
            let fw = randn(&[c * (hw / 2) * (hw / 2), classes], &mut g);
            let fb = randn(&[classes], &mut g);
            let teacher = randn(&[n, classes], &mut g);
            finite_diff_check(
                |t, v| {
                    let mut stats = RunningStats::new(c);
                    let bias = t.constant(b.clone());
                    let y = t.conv2d(v[0], v[1], bias, 1, 1)?;
                    let y = t.batch_norm(y, v[2], v[3], BatchNormMode::Train(&mut stats))?;
                    let y = t.relu(y);
                    let y = t.max_pool2d(y, 2, 2)?;
                    let y = t.flatten(y);
                    let logits = t.dense(y, v[4], v[5])?;
                    let u = t.constant(teacher.clone());
                    kl_distill_loss(t, u, logits, 2.0)
                },
                &[x, w, gamma, beta, fw, fb],
                STEP,
            )
        }
        other => panic!("unknown op {other}"),
    }
}

/// Worst error of `op` over `seeds` instances.
pub fn grad_suite(op: &str, seeds: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        worst = worst.max(grad_case(op, seed * 7919 + 1)?);
    }
    Ok(worst)
}

/// Brute-force kept set: filter `j` survives unless fewer than `p` filters
/// precede it in (score, index) order.
pub fn brute_force_kept(scores: &[f32], p: usize) -> Vec<usize> {
    (0..scores.len())
        .filter(|&j| {
            let before = (0..scores.len())
                .filter(|&m| scores[m] < scores[j] || (scores[m] == scores[j] && m < j))
                .count();
            before >= p
        })
        .collect()
}

/// Kernel `[cin, cout, k, k]` with small integer entries so that equal
/// filter norms are common.
pub fn tie_heavy_kernel(g: &mut ChaCha8Rng) -> Tensor {
    let cin = g.gen_range(1..4);
    let cout = g.gen_range(2..12);
    let k = [1, 3][g.gen_range(0..2)];
    let data = (0..cin * cout * k * k).map(|_| g.gen_range(-2i32..=2) as f32).collect();
    Tensor::new(vec![cin, cout, k, k], data).unwrap()
}

/// `e_i = a + i·b` for `i < L`, the rest to the last sub-task; `r_i` are the
/// prefix sums.
pub fn closed_form_schedule(a: usize, b: usize, e: usize, l: usize) -> (Vec<usize>, Vec<usize>) {
    let mut counts: Vec<usize> = (1..l).map(|i| a + i * b).collect();
    let head: usize = counts.iter().sum();
    counts.push(e - head);
    let offsets = (0..l).map(|i| counts[..i].iter().sum()).collect();
    (counts, offsets)
}

fn cosine(emb: &EmbeddingSet, q: usize, j: usize) -> f64 {
    let inv = |r: &[f64]| {
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            1.0 / n
        } else {
            0.0
        }
    };
    let (a, b) = (emb.row(q), emb.row(j));
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot * inv(a) * inv(b)
}

/// Quadratic ranker: the rank of `j` for query `q` is one plus the number of
/// gallery items that beat it on (similarity desc, index asc).
pub fn brute_force_retrieval(emb: &EmbeddingSet, k: usize) -> (f64, f64) {
    let n = emb.len();
    let labels = emb.labels();
    let cutoff = k.min(n - 1);
    let (mut ap_sum, mut queries, mut p_sum) = (0.0, 0usize, 0.0);
    for q in 0..n {
        let sims: Vec<f64> = (0..n).map(|j| cosine(emb, q, j)).collect();
        let rank_of = |j: usize| {
            1 + (0..n)
                .filter(|&m| m != q && m != j && (sims[m] > sims[j] || (sims[m] == sims[j] && m < j)))
                .count()
        };
        let mut ranks: Vec<usize> = (0..n).filter(|&j| j != q && labels[j] == labels[q]).map(rank_of).collect();
        ranks.sort_unstable();
        p_sum += ranks.iter().filter(|&&r| r <= cutoff).count() as f64 / cutoff as f64;
        if !ranks.is_empty() {
            let mut precision = 0.0;
            for (h, &r) in ranks.iter().enumerate() {
                precision += (h + 1) as f64 / r as f64;
            }
            ap_sum += precision / ranks.len() as f64;
            queries += 1;
        }
    }
    (ap_sum / queries as f64, p_sum / n as f64)
}

/// Random embeddings; integer coordinates make exact similarity ties likely.
pub fn fuzzed_embeddings(g: &mut ChaCha8Rng, max_n: usize) -> EmbeddingSet {
    let n = g.gen_range(2..=max_n);
    let dim = g.gen_range(1..5);
    let classes = g.gen_range(1..5);
    let integer = g.gen_bool(0.5);
    let rows = (0..n * dim)
        .map(|_| if integer { g.gen_range(-2i32..=2) as f64 } else { g.gen_range(-1.0..1.0) })
        .collect();
    let mut labels: Vec<usize> = (0..n).map(|_| g.gen_range(0..classes)).collect();
    // at least one query must have a relevant item
    labels[1] = labels[0];
    EmbeddingSet::new(rows, dim, labels).unwrap()
}
