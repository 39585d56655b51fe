//! Distillation and task losses.
//!
//! Each loss exists twice: a `*_value` function on plain tensors and a tape
//! operation with an analytic backward. Both share the same forward code.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::kernels::{log_softmax_rows, softmax_rows};
use crate::tensor::{gemm_nn, gemm_nt, Scalar, Tape, Tensor, Var};

/// Guard inside the PKT log-ratio.
pub const PKT_EPS: f64 = 1e-7;

/// Batch size of the information-flow measure.
pub const MI_EVAL_BATCH: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Mse,
    Kl,
    Pkt,
    CrossEntropy,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Mse => "mse",
            LossKind::Kl => "kl",
            LossKind::Pkt => "pkt",
            LossKind::CrossEntropy => "cross-entropy",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub kind: LossKind,
    pub layer: Option<usize>,
}

fn check_finite(kind: LossKind, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{kind} loss")))
    }
}

/// Splits `[n, ...]` into `(n, per-sample length)`.
fn batch_rows(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [c] => (1, *c),
        [n, rest @ ..] => (*n, rest.iter().product()),
    }
}

// ---- MSE ----------------------------------------------------------------------

fn mse_forward<F: Scalar>(p: &Tensor<F>, s: &Tensor<F>) -> Result<F> {
    if p.shape() != s.shape() {
        return Err(Error::Alignment {
            layer: None,
            msg: format!(
                "target {:?} vs student {:?}; check the pruning rate against the layer widths",
                p.shape(),
                s.shape()
            ),
        });
    }
    let (n, _) = batch_rows(p.shape());
    let sum = p
        .data()
        .iter()
        .zip(s.data())
        .fold(F::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
    Ok(sum / F::from_f64(n as f64))
}

/// Squared L2 distance between feature maps, summed per sample and averaged
/// over the leading batch axis.
pub fn mse_feature_value<F: Scalar>(p: &Tensor<F>, s: &Tensor<F>) -> Result<LossValue> {
    let v = mse_forward(p, s)?.to_f64();
    Ok(LossValue {
        value: check_finite(LossKind::Mse, v)?,
        kind: LossKind::Mse,
        layer: None,
    })
}

pub fn mse_feature_loss<F: Scalar>(tape: &mut Tape<F>, p: Var, s: Var) -> Result<Var> {
    let value = mse_forward(tape.value(p), tape.value(s))?;
    let (n, _) = batch_rows(tape.shape(p));
    let scale = F::from_f64(2.0 / n as f64);
    Ok(tape.push_op(Tensor::scalar(value), &[p, s], move || {
        Box::new(move |inputs, _, g, needs| {
            let diff = |sign: F| -> Vec<F> {
                inputs[0]
                    .data()
                    .iter()
                    .zip(inputs[1].data())
                    .map(|(&a, &b)| sign * g[0] * scale * (a - b))
                    .collect()
            };
            vec![
                needs[0].then(|| diff(F::one())),
                needs[1].then(|| diff(-F::one())),
            ]
        })
    }))
}

// ---- temperature KL -----------------------------------------------------------

fn check_temperature<F: Scalar>(t: F) -> Result<()> {
    if t > F::zero() && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("temperature must be positive, got {t}")))
    }
}

fn logits_layout<F: Scalar>(u: &Tensor<F>, v: &Tensor<F>) -> Result<(usize, usize)> {
    if u.shape() != v.shape() {
        return Err(Error::shape(
            "kl_distill",
            format!("teacher logits {:?} vs student logits {:?}", u.shape(), v.shape()),
        ));
    }
    Ok(batch_rows(u.shape()))
}

struct KlForward<F> {
    value: F,
    qt: Vec<F>,
    qs: Vec<F>,
    /// Per-row `log qt − log qs`.
    log_ratio: Vec<F>,
    /// Per-row KL divergence.
    row_kl: Vec<F>,
}

fn kl_forward<F: Scalar>(u: &Tensor<F>, v: &Tensor<F>, t: F) -> Result<KlForward<F>> {
    check_temperature(t)?;
    let (n, c) = logits_layout(u, v)?;
    let log_qt = log_softmax_rows(u.data(), c, t);
    let log_qs = log_softmax_rows(v.data(), c, t);
    let qt: Vec<F> = log_qt.iter().map(|v| v.exp()).collect();
    let qs: Vec<F> = log_qs.iter().map(|v| v.exp()).collect();
    let log_ratio: Vec<F> = log_qt.iter().zip(&log_qs).map(|(&a, &b)| a - b).collect();
    let row_kl: Vec<F> = qt
        .chunks(c)
        .zip(log_ratio.chunks(c))
        .map(|(q, r)| q.iter().zip(r).fold(F::zero(), |acc, (&a, &b)| acc + a * b))
        .collect();
    let total = row_kl.iter().fold(F::zero(), |acc, &v| acc + v);
    Ok(KlForward {
        value: total * t * t / F::from_f64(n as f64),
        qt,
        qs,
        log_ratio,
        row_kl,
    })
}

/// `T² · KL(softmax(u/T) ‖ softmax(v/T))`, averaged over the batch.
pub fn kl_distill_value<F: Scalar>(u: &Tensor<F>, v: &Tensor<F>, t: F) -> Result<LossValue> {
    let v = kl_forward(u, v, t)?.value.to_f64();
    Ok(LossValue {
        value: check_finite(LossKind::Kl, v)?,
        kind: LossKind::Kl,
        layer: None,
    })
}

/// Tape version of [`kl_distill_value`]; `u` are teacher logits, `v` student logits.
pub fn kl_distill_loss<F: Scalar>(tape: &mut Tape<F>, u: Var, v: Var, t: F) -> Result<Var> {
    let fwd = kl_forward(tape.value(u), tape.value(v), t)?;
    let (n, c) = batch_rows(tape.shape(u));
    let value = Tensor::scalar(fwd.value);
    let scale = t / F::from_f64(n as f64);
    Ok(tape.push_op(value, &[u, v], move || {
        let KlForward {
            qt,
            qs,
            log_ratio,
            row_kl,
            ..
        } = fwd;
        Box::new(move |_, _, g, needs| {
            let k = g[0] * scale;
            let du = needs[0].then(|| {
                let mut du = vec![F::zero(); qt.len()];
                for (row, kl) in row_kl.iter().enumerate() {
                    for i in row * c..(row + 1) * c {
                        du[i] = k * qt[i] * (log_ratio[i] - *kl);
                    }
                }
                du
            });
            let dv = needs[1].then(|| qs.iter().zip(&qt).map(|(&s, &q)| k * (s - q)).collect());
            vec![du, dv]
        })
    }))
}

// ---- PKT ------------------------------------------------------------------------

/// Row-normalized features and the conditional similarity distribution
/// `p_{j|i}` (diagonal excluded) for one feature set.
struct SimilarityDist<F> {
    n: usize,
    dim: usize,
    unit: Vec<F>,
    norms: Vec<F>,
    /// `n×n`, zero diagonal.
    p: Vec<F>,
    /// Row normalizers `Σ_{m≠i} K(x_i, x_m)`.
    denom: Vec<F>,
}

impl<F: Scalar> SimilarityDist<F> {
    fn new(x: &Tensor<F>) -> Self {
        let (n, dim) = batch_rows(x.shape());
        let mut unit = x.data().to_vec();
        let mut norms = vec![F::zero(); n];
        for (row, norm) in unit.chunks_mut(dim).zip(norms.iter_mut()) {
            let r = row.iter().fold(F::zero(), |acc, &v| acc + v * v).sqrt();
            *norm = r;
            if r > F::zero() {
                for v in row.iter_mut() {
                    *v = *v / r;
                }
            } else {
                row.fill(F::zero());
            }
        }
        let mut cos = vec![F::zero(); n * n];
        gemm_nt(n, dim, n, &unit, &unit, F::zero(), &mut cos);
        let half = F::from_f64(0.5);
        let mut p = vec![F::zero(); n * n];
        let mut denom = vec![F::zero(); n];
        for i in 0..n {
            let mut d = F::zero();
            for j in (0..n).filter(|&j| j != i) {
                let k = (cos[i * n + j] + F::one()) * half;
                p[i * n + j] = k;
                d = d + k;
            }
            denom[i] = d;
            for j in (0..n).filter(|&j| j != i) {
                p[i * n + j] = if d > F::zero() {
                    p[i * n + j] / d
                } else {
                    F::one() / F::from_f64((n - 1) as f64)
                };
            }
        }
        SimilarityDist {
            n,
            dim,
            unit,
            norms,
            p,
            denom,
        }
    }

    /// Maps `∂L/∂p` back to `∂L/∂x`.
    fn backward(&self, dp: &[F]) -> Vec<F> {
        let n = self.n;
        let half = F::from_f64(0.5);
        // ∂L/∂cos, symmetrized so that unit·unitᵀ can be differentiated in one product.
        let mut dk = vec![F::zero(); n * n];
        for i in 0..n {
            if !(self.denom[i] > F::zero()) {
                continue;
            }
            let weighted = (0..n)
                .filter(|&m| m != i)
                .fold(F::zero(), |acc, m| acc + dp[i * n + m] * self.p[i * n + m]);
            for j in (0..n).filter(|&j| j != i) {
                dk[i * n + j] = (dp[i * n + j] - weighted) / self.denom[i] * half;
            }
        }
        let mut sym = vec![F::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                sym[i * n + j] = dk[i * n + j] + dk[j * n + i];
            }
        }
        let mut dunit = vec![F::zero(); n * self.dim];
        gemm_nn(n, n, self.dim, &sym, &self.unit, F::zero(), &mut dunit);
        let mut dx = vec![F::zero(); n * self.dim];
        for i in 0..n {
            let r = self.norms[i];
            if !(r > F::zero()) {
                continue;
            }
            let u = &self.unit[i * self.dim..(i + 1) * self.dim];
            let g = &dunit[i * self.dim..(i + 1) * self.dim];
            let proj = u.iter().zip(g).fold(F::zero(), |acc, (&a, &b)| acc + a * b);
            for ((d, &uv), &gv) in dx[i * self.dim..(i + 1) * self.dim].iter_mut().zip(u).zip(g) {
                *d = (gv - uv * proj) / r;
            }
        }
        dx
    }
}

fn pkt_check<F: Scalar>(ft: &Tensor<F>, fs: &Tensor<F>) -> Result<()> {
    let (nt, _) = batch_rows(ft.shape());
    let (ns, _) = batch_rows(fs.shape());
    if nt != ns {
        return Err(Error::dim("pkt", "batch", nt, ns));
    }
    if nt < 2 {
        return Err(Error::Parameter(format!(
            "pkt needs at least 2 samples per batch, got {nt}"
        )));
    }
    Ok(())
}

fn pkt_divergence<F: Scalar>(t: &SimilarityDist<F>, s: &SimilarityDist<F>) -> F {
    let n = t.n;
    let eps = F::from_f64(PKT_EPS);
    let mut total = F::zero();
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            let (pt, ps) = (t.p[i * n + j], s.p[i * n + j]);
            total = total + pt * ((pt + eps) / (ps + eps)).ln();
        }
    }
    total / F::from_f64(n as f64)
}

/// Probabilistic knowledge transfer divergence between the pairwise cosine
/// similarity distributions of two feature sets with the same batch size.
pub fn pkt_value<F: Scalar>(ft: &Tensor<F>, fs: &Tensor<F>) -> Result<LossValue> {
    pkt_check(ft, fs)?;
    let v = pkt_divergence(&SimilarityDist::new(ft), &SimilarityDist::new(fs)).to_f64();
    Ok(LossValue {
        value: check_finite(LossKind::Pkt, v)?,
        kind: LossKind::Pkt,
        layer: None,
    })
}

pub fn pkt_loss<F: Scalar>(tape: &mut Tape<F>, ft: Var, fs: Var) -> Result<Var> {
    pkt_check(tape.value(ft), tape.value(fs))?;
    let t = SimilarityDist::new(tape.value(ft));
    let s = SimilarityDist::new(tape.value(fs));
    let value = Tensor::scalar(pkt_divergence(&t, &s));
    Ok(tape.push_op(value, &[ft, fs], move || {
        Box::new(move |_, _, g, needs| {
            let n = t.n;
            let eps = F::from_f64(PKT_EPS);
            let scale = g[0] / F::from_f64(n as f64);
            let dt = needs[0].then(|| {
                let mut dp = vec![F::zero(); n * n];
                for i in 0..n {
                    for j in (0..n).filter(|&j| j != i) {
                        let (pt, ps) = (t.p[i * n + j], s.p[i * n + j]);
                        dp[i * n + j] = scale * (((pt + eps) / (ps + eps)).ln() + pt / (pt + eps));
                    }
                }
                t.backward(&dp)
            });
            let ds = needs[1].then(|| {
                let mut dp = vec![F::zero(); n * n];
                for i in 0..n {
                    for j in (0..n).filter(|&j| j != i) {
                        let (pt, ps) = (t.p[i * n + j], s.p[i * n + j]);
                        dp[i * n + j] = -scale * pt / (ps + eps);
                    }
                }
                s.backward(&dp)
            });
            vec![dt, ds]
        })
    }))
}

// ---- cross-entropy ----------------------------------------------------------------

fn check_labels(labels: &[usize], n: usize, c: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::dim("cross_entropy", "labels", n, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Parameter(format!("label {bad} outside 0..{c}")));
    }
    Ok(())
}

fn cross_entropy_forward<F: Scalar>(logits: &Tensor<F>, labels: &[usize]) -> Result<(F, Vec<F>)> {
    let (n, c) = batch_rows(logits.shape());
    check_labels(labels, n, c)?;
    let log_p = log_softmax_rows(logits.data(), c, F::one());
    let nll = labels
        .iter()
        .enumerate()
        .fold(F::zero(), |acc, (row, &l)| acc - log_p[row * c + l]);
    Ok((nll / F::from_f64(n as f64), log_p))
}

/// Mean negative log-likelihood of integer labels.
pub fn cross_entropy_value<F: Scalar>(logits: &Tensor<F>, labels: &[usize]) -> Result<LossValue> {
    let v = cross_entropy_forward(logits, labels)?.0.to_f64();
    Ok(LossValue {
        value: check_finite(LossKind::CrossEntropy, v)?,
        kind: LossKind::CrossEntropy,
        layer: None,
    })
}

pub fn cross_entropy<F: Scalar>(tape: &mut Tape<F>, logits: Var, labels: &[usize]) -> Result<Var> {
    let (value, _) = cross_entropy_forward(tape.value(logits), labels)?;
    let (n, c) = batch_rows(tape.shape(logits));
    let labels = labels.to_vec();
    Ok(tape.push_op(Tensor::scalar(value), &[logits], move || {
        Box::new(move |inputs, _, g, _| {
            let mut d = softmax_rows(inputs[0].data(), c, F::one());
            let k = g[0] / F::from_f64(n as f64);
            for (row, &l) in labels.iter().enumerate() {
                d[row * c + l] = d[row * c + l] - F::one();
            }
            for v in d.iter_mut() {
                *v = *v * k;
            }
            vec![Some(d)]
        })
    }))
}

// ---- information-flow measure -----------------------------------------------------

/// Mean PKT divergence between the penultimate representations of `teacher`
/// and `student` over consecutive evaluation batches of [`MI_EVAL_BATCH`]
/// samples in dataset order (eval mode). A trailing batch of one sample is
/// skipped.
pub fn mi_divergence_measure(teacher: &Model, student: &Model, dataset: &Dataset) -> Result<f64> {
    mi_divergence_measure_with_batch(teacher, student, dataset, MI_EVAL_BATCH)
}

pub fn mi_divergence_measure_with_batch(
    teacher: &Model,
    student: &Model,
    dataset: &Dataset,
    batch: usize,
) -> Result<f64> {
    if batch < 2 {
        return Err(Error::Parameter("evaluation batch must hold at least 2 samples".into()));
    }
    let n = dataset.len();
    let mut total = 0.0;
    let mut count = 0usize;
    let mut start = 0;
    while start + 1 < n {
        let end = (start + batch).min(n);
        let images = dataset.images().slice_rows(start, end)?;
        let ft = teacher.embed(&images)?;
        let fs = student.embed(&images)?;
        total += pkt_value(&ft, &fs)?.value;
        count += 1;
        start = end;
    }
    if count == 0 {
        return Err(Error::Parameter("dataset too small for the information-flow measure".into()));
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn mse_examples() {
        let z = Tensor::<f64>::zeros(vec![1, 2, 2, 2]);
        let o = Tensor::<f64>::full(vec![1, 2, 2, 2], 1.0);
        assert_eq!(mse_feature_value(&z, &z).unwrap().value, 0.0);
        assert_eq!(mse_feature_value(&z, &o).unwrap().value, 8.0);
        let mut mixed = vec![1.0; 8];
        mixed.extend([0.0; 8]);
        let s = t(&[2, 2, 2, 2], &mixed);
        assert_eq!(mse_feature_value(&Tensor::zeros(vec![2, 2, 2, 2]), &s).unwrap().value, 4.0);
    }

    #[test]
    fn mse_shape_mismatch_is_alignment_error() {
        let a = Tensor::<f32>::zeros(vec![1, 8, 4, 4]);
        let b = Tensor::<f32>::zeros(vec![1, 16, 4, 4]);
        assert!(matches!(mse_feature_value(&a, &b), Err(Error::Alignment { .. })));
    }

    #[test]
    fn kl_examples() {
        let u = t(&[1, 2], &[0.0, 0.0]);
        let v = t(&[1, 2], &[0.0, 3f64.ln()]);
        assert_eq!(kl_distill_value(&u, &u, 1.0).unwrap().value, 0.0);
        let kl = kl_distill_value(&u, &v, 1.0).unwrap().value;
        let want = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        assert!((kl - want).abs() < 1e-12);
        assert!((kl - 0.14384).abs() < 1e-5);
        assert!(kl_distill_value(&u, &v, 0.0).is_err());
    }

    #[test]
    fn kl_at_temperature_two_matches_direct_evaluation() {
        let u = t(&[1, 3], &[1.0, -0.5, 2.0]);
        let v = t(&[1, 3], &[0.2, 0.3, -1.0]);
        let soft = |x: &[f64]| {
            let e: Vec<f64> = x.iter().map(|v| (v / 2.0).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect::<Vec<_>>()
        };
        let (qt, qs) = (soft(u.data()), soft(v.data()));
        let direct: f64 = qt.iter().zip(&qs).map(|(a, b)| a * (a / b).ln()).sum::<f64>() * 4.0;
        let got = kl_distill_value(&u, &v, 2.0).unwrap().value;
        assert!((got - direct).abs() < 1e-12, "{got} vs {direct}");
    }

    #[test]
    fn kl_is_shift_invariant() {
        let u = t(&[1, 3], &[1.0, -0.5, 2.0]);
        let v = t(&[1, 3], &[0.2, 0.3, -1.0]);
        let base = kl_distill_value(&u, &v, 4.0).unwrap().value;
        let shifted = kl_distill_value(&u.map(|x| x + 13.0), &v.map(|x| x - 2.5), 4.0).unwrap().value;
        assert!((base - shifted).abs() < 1e-12);
    }

    #[test]
    fn pkt_zero_cases() {
        let f = t(&[3, 2], &[1.0, 0.0, 0.5, 0.5, -1.0, 2.0]);
        assert!(pkt_value(&f, &f).unwrap().value.abs() < 1e-12);
        assert!(pkt_value(&f, &f.map(|v| 3.0 * v)).unwrap().value.abs() < 1e-12);
    }

    #[test]
    fn pkt_needs_two_samples() {
        let f = t(&[1, 2], &[1.0, 0.0]);
        assert!(pkt_value(&f, &f).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::<f64>::zeros(vec![2, 10]);
        let ce = cross_entropy_value(&uniform, &[3, 7]).unwrap().value;
        assert!((ce - 10f64.ln()).abs() < 1e-12);
        let confident = t(&[1, 3], &[0.0, 200.0, 0.0]);
        assert!(cross_entropy_value(&confident, &[1]).unwrap().value < 1e-12);
        assert!(cross_entropy_value(&confident, &[3]).is_err());
    }
}
