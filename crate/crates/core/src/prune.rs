//! Filter-importance pruning used to carve student-sized targets out of
//! teacher feature maps. Nothing here mutates the teacher.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::Tensor;

/// Read-only view of a kernel laid out as `[n_i, n_o, k, k]`.
///
/// Dense weights `[in, out]` are viewed as `[in, out, 1, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct KernelView<'a> {
    data: &'a [f32],
    inputs: usize,
    outputs: usize,
    spatial: usize,
}

impl<'a> KernelView<'a> {
    pub fn new(kernel: &'a Tensor) -> Result<Self> {
        let (inputs, outputs, spatial) = match kernel.shape() {
            [ni, no, kh, kw] => (*ni, *no, kh * kw),
            [ni, no] => (*ni, *no, 1),
            other => {
                return Err(Error::shape(
                    "kernel view",
                    format!("expected [n_i, n_o, k, k] or [in, out], got {other:?}"),
                ))
            }
        };
        Ok(KernelView {
            data: kernel.data(),
            inputs,
            outputs,
            spatial,
        })
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    /// Weights of input channel `j` into filter `i`.
    pub fn slice(&self, j: usize, i: usize) -> &'a [f32] {
        let start = (j * self.outputs + i) * self.spatial;
        &self.data[start..start + self.spatial]
    }
}

/// Channels kept for one layer after pruning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSelection {
    /// 1-based layer index.
    pub layer: usize,
    /// Kept original channel indices, ascending.
    pub kept: Vec<usize>,
    /// L1 score of every original channel.
    pub scores: Vec<f32>,
}

impl ChannelSelection {
    /// Channel count before pruning.
    pub fn original(&self) -> usize {
        self.scores.len()
    }

    pub fn is_kept(&self, channel: usize) -> bool {
        self.kept.binary_search(&channel).is_ok()
    }
}

/// L1 norm of each output filter: `s_i = Σ_j Σ_{l,m} |K[j,i,l,m]|`.
pub fn filter_l1_scores(kernel: &KernelView<'_>) -> Vec<f32> {
    let mut scores = vec![0.0f32; kernel.outputs()];
    for j in 0..kernel.inputs() {
        for (i, s) in scores.iter_mut().enumerate() {
            *s += kernel.slice(j, i).iter().map(|w| w.abs()).sum::<f32>();
        }
    }
    scores
}

/// Drops the `p` filters with the smallest L1 score. Equal scores drop the
/// lower original index first. Kept indices are returned in original order.
pub fn prune(kernel: &KernelView<'_>, p: usize, layer: usize) -> Result<ChannelSelection> {
    let n = kernel.outputs();
    if p >= n {
        return Err(Error::Parameter(format!(
            "cannot prune {p} of {n} filters in layer {layer}"
        )));
    }
    let scores = filter_l1_scores(kernel);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut kept = order.split_off(p);
    kept.sort_unstable();
    Ok(ChannelSelection {
        layer,
        kept,
        scores,
    })
}

/// Copies the kept channels of an `[n, c, h, w]` (or `[n, c]`) map.
pub fn select_channels(feature: &Tensor, sel: &ChannelSelection) -> Result<Tensor> {
    let shape = feature.shape();
    if shape.len() < 2 {
        return Err(Error::shape("select channels", format!("rank {} feature map", shape.len())));
    }
    if shape[1] != sel.original() {
        return Err(Error::Alignment {
            layer: Some(sel.layer),
            msg: format!(
                "feature map has {} channels but the selection was computed for {}",
                shape[1],
                sel.original()
            ),
        });
    }
    let n = shape[0];
    let c = shape[1];
    let plane: usize = shape[2..].iter().product();
    let src = feature.data();
    let mut out = Vec::with_capacity(n * sel.kept.len() * plane);
    for s in 0..n {
        for &k in &sel.kept {
            let start = (s * c + k) * plane;
            out.extend_from_slice(&src[start..start + plane]);
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[1] = sel.kept.len();
    Tensor::new(out_shape, out)
}

/// Selections for every feature layer of `source` that bring its widths down
/// to `target_widths`.
pub fn selections_for(source: &Model, target_widths: &[usize]) -> Result<Vec<ChannelSelection>> {
    let widths = source.spec().feature_widths();
    if widths.len() != target_widths.len() {
        return Err(Error::Alignment {
            layer: None,
            msg: format!(
                "source has {} feature layers, target has {}",
                widths.len(),
                target_widths.len()
            ),
        });
    }
    widths
        .iter()
        .zip(target_widths)
        .enumerate()
        .map(|(i, (&n_o, &n_s))| {
            let l = i + 1;
            if n_s > n_o || n_s == 0 {
                return Err(Error::Alignment {
                    layer: Some(l),
                    msg: format!("cannot reduce {n_o} channels to {n_s}"),
                });
            }
            let kernel = source.layer_weight(l).expect("feature layer has a weight");
            prune(&KernelView::new(kernel)?, n_o - n_s, l)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column_kernel(values: &[f32]) -> Tensor {
        Tensor::new(vec![1, values.len(), 1, 1], values.to_vec()).unwrap()
    }

    #[test]
    fn scores_are_absolute_sums() {
        let k = column_kernel(&[2.0, -1.0, 0.5]);
        assert_eq!(filter_l1_scores(&KernelView::new(&k).unwrap()), vec![2.0, 1.0, 0.5]);
        let z = Tensor::new(vec![2, 2, 1, 1], vec![0.0, 1.0, 0.0, -3.0]).unwrap();
        assert_eq!(filter_l1_scores(&KernelView::new(&z).unwrap()), vec![0.0, 4.0]);
    }

    #[test]
    fn prune_drops_smallest() {
        let k = column_kernel(&[2.0, -1.0, 0.5]);
        let view = KernelView::new(&k).unwrap();
        assert_eq!(prune(&view, 1, 1).unwrap().kept, vec![0, 1]);
        assert_eq!(prune(&view, 0, 1).unwrap().kept, vec![0, 1, 2]);
        assert!(prune(&view, 3, 1).is_err());
    }

    #[test]
    fn ties_drop_lower_index() {
        let k = column_kernel(&[1.0, 1.0, 1.0, 2.0]);
        let sel = prune(&KernelView::new(&k).unwrap(), 2, 1).unwrap();
        assert_eq!(sel.kept, vec![2, 3]);
    }

    #[test]
    fn select_copies_kept_slices() {
        let f = Tensor::from_fn(vec![2, 4, 1, 2], |i| i as f32);
        let sel = ChannelSelection {
            layer: 1,
            kept: vec![0, 2],
            scores: vec![0.0; 4],
        };
        let out = select_channels(&f, &sel).unwrap();
        assert_eq!(out.shape(), &[2, 2, 1, 2]);
        assert_eq!(out.data(), &[0.0, 1.0, 4.0, 5.0, 8.0, 9.0, 12.0, 13.0]);
        let bad = ChannelSelection {
            scores: vec![0.0; 3],
            ..sel
        };
        assert!(matches!(select_channels(&f, &bad), Err(Error::Alignment { .. })));
    }
}
