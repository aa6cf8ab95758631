//! Self-attention features and the losses built on them.
//!
//! A backbone forward pass exposes the per-head queries, keys and values of
//! its selected self-attention layers as [`AttentionTaps`]. The attention
//! distillation loss compares the target's own attention output
//! `softmax(QKᵀ/√d)V` with the "ideal" output obtained by letting the same
//! queries attend over the reference's keys and values. All L1 distances are
//! reduced by a mean over the elements of a layer and then a mean over
//! layers, so loss weights do not depend on resolution or layer count.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::image::LabelMap;
use crate::tensor::Tensor;

/// Which self-attention layers feed the losses.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LayerSelector {
    /// The final `n` layers of the backbone.
    Last(usize),
    /// Explicit layer ids.
    Layers(Vec<usize>),
}

impl Default for LayerSelector {
    fn default() -> Self {
        LayerSelector::Last(6)
    }
}

impl LayerSelector {
    /// Strictly increasing layer ids for a backbone with `total` attention layers.
    pub fn resolve(&self, total: usize) -> Result<Vec<usize>> {
        let ids = match self {
            LayerSelector::Last(n) => {
                if *n == 0 || *n > total {
                    return Err(Error::config(
                        "layer_selector",
                        format!("last {n} of {total} layers"),
                    ));
                }
                (total - n..total).collect()
            }
            LayerSelector::Layers(ids) => {
                if ids.is_empty() || ids.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::config(
                        "layer_selector",
                        "layer ids must be non-empty and strictly increasing",
                    ));
                }
                if let Some(bad) = ids.iter().find(|&&i| i >= total) {
                    return Err(Error::config(
                        "layer_selector",
                        format!("layer {bad} does not exist (backbone has {total})"),
                    ));
                }
                ids.clone()
            }
        };
        Ok(ids)
    }
}

/// Queries, keys and values of one self-attention layer, each `[heads, tokens, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTap {
    pub layer_id: usize,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

impl LayerTap {
    pub fn new(layer_id: usize, q: Tensor, k: Tensor, v: Tensor) -> Result<Self> {
        let (hq, _, dq) = q.dims3()?;
        let (hk, nk, dk) = k.dims3()?;
        let (hv, nv, _) = v.dims3()?;
        if hq != hk || hk != hv || dq != dk || nk != nv {
            return Err(Error::shape(
                "layer tap",
                format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
            ));
        }
        Ok(Self { layer_id, q, k, v })
    }

    pub fn heads(&self) -> usize {
        self.q.shape()[0]
    }

    pub fn query_tokens(&self) -> usize {
        self.q.shape()[1]
    }

    pub fn key_tokens(&self) -> usize {
        self.k.shape()[1]
    }
}

/// Detached attention features captured from one forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionTaps {
    pub layers: Vec<LayerTap>,
}

impl AttentionTaps {
    pub fn new(layers: Vec<LayerTap>) -> Result<Self> {
        if layers.windows(2).any(|w| w[0].layer_id >= w[1].layer_id) {
            return Err(Error::LayerMismatch("layer ids must be strictly increasing".into()));
        }
        Ok(Self { layers })
    }

    pub fn layer_ids(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.layer_id).collect()
    }

    /// Pushes the taps onto `tape` as constants.
    pub fn to_tape(&self, tape: &mut Tape) -> Result<Vec<TapVars>> {
        self.layers
            .iter()
            .map(|l| {
                Ok(TapVars {
                    layer_id: l.layer_id,
                    q: split_heads(tape, &l.q)?,
                    k: split_heads(tape, &l.k)?,
                    v: split_heads(tape, &l.v)?,
                })
            })
            .collect()
    }

    /// Reads tap values off a tape, dropping their gradient history.
    pub fn detach(tape: &Tape, vars: &[TapVars]) -> Result<Self> {
        let layers = vars
            .iter()
            .map(|t| {
                LayerTap::new(
                    t.layer_id,
                    stack_heads(tape, &t.q)?,
                    stack_heads(tape, &t.k)?,
                    stack_heads(tape, &t.v)?,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }
}

/// Per-head `[tokens, d]` handles of one layer's features on a tape.
#[derive(Clone, Debug)]
pub struct TapVars {
    pub layer_id: usize,
    pub q: Vec<Var>,
    pub k: Vec<Var>,
    pub v: Vec<Var>,
}

fn split_heads(tape: &mut Tape, t: &Tensor) -> Result<Vec<Var>> {
    let (h, n, d) = t.dims3()?;
    Ok(t.data()
        .chunks(n * d)
        .take(h)
        .map(|c| tape.constant(Tensor::new([n, d], c.to_vec()).expect("chunk size")))
        .collect())
}

fn stack_heads(tape: &Tape, heads: &[Var]) -> Result<Tensor> {
    let (n, d) = tape.value(heads[0]).dims2()?;
    let mut data = Vec::with_capacity(heads.len() * n * d);
    for &h in heads {
        data.extend_from_slice(tape.value(h).data());
    }
    Tensor::new([heads.len(), n, d], data)
}

/// Boolean `[target tokens, source tokens]` matrix; `true` lets a pair attend.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl LayerMask {
    pub fn new(rows: usize, cols: usize, fill: bool) -> Self {
        Self {
            rows,
            cols,
            bits: vec![fill; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.cols + col] = value;
    }

    /// Index of the first row with no `true` entry.
    pub fn first_empty_row(&self) -> Option<usize> {
        (0..self.rows).find(|&r| !self.bits[r * self.cols..(r + 1) * self.cols].contains(&true))
    }
}

/// Token grids of one tapped layer for the source (reference) and target branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerGrid {
    pub source: (usize, usize),
    pub target: (usize, usize),
}

/// Per-layer guidance masks plus the downsampled label grids they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceMask {
    pub layers: Vec<Arc<LayerMask>>,
    pub source_labels: Vec<Vec<u32>>,
    pub target_labels: Vec<Vec<u32>>,
}

impl GuidanceMask {
    /// All-true masks, one per layer with the given `(target, source)` token counts.
    pub fn all_true(shapes: &[(usize, usize)]) -> Self {
        Self {
            layers: shapes
                .iter()
                .map(|&(r, c)| Arc::new(LayerMask::new(r, c, true)))
                .collect(),
            source_labels: Vec::new(),
            target_labels: Vec::new(),
        }
    }
}

/// Builds one mask per layer: `M[j][i]` is true iff target token `j` and
/// source token `i` carry the same label after nearest-neighbour downsampling.
pub fn build_guidance_mask(
    src_seg: &LabelMap,
    tgt_seg: &LabelMap,
    grids: &[LayerGrid],
) -> Result<GuidanceMask> {
    let source = src_seg.distinct();
    if let Some(&missing) = tgt_seg.distinct().iter().find(|l| source.binary_search(l).is_err()) {
        return Err(Error::UnmatchedLabel { label: missing });
    }
    let mut out = GuidanceMask {
        layers: Vec::with_capacity(grids.len()),
        source_labels: Vec::with_capacity(grids.len()),
        target_labels: Vec::with_capacity(grids.len()),
    };
    for grid in grids {
        let s = src_seg.downsample(grid.source.0, grid.source.1)?;
        let t = tgt_seg.downsample(grid.target.0, grid.target.1)?;
        let mut mask = LayerMask::new(t.len(), s.len(), false);
        for (j, tl) in t.iter().enumerate() {
            for (i, sl) in s.iter().enumerate() {
                mask.set(j, i, tl == sl);
            }
        }
        // Downsampling can drop a label from the source grid entirely.
        if let Some(row) = mask.first_empty_row() {
            return Err(Error::UnmatchedLabel { label: t[row] });
        }
        out.layers.push(Arc::new(mask));
        out.source_labels.push(s);
        out.target_labels.push(t);
    }
    Ok(out)
}

/// One head of `softmax(q kᵀ / √d) v` on the tape; returns `(output, weights)`.
pub fn attend(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Arc<LayerMask>>,
) -> Result<(Var, Var)> {
    let d = tape.value(q).dims2()?.1;
    if tape.value(k).dims2()?.1 != d {
        return Err(Error::shape("attention", "query and key head dims differ"));
    }
    let logits = tape.matmul_nt(q, k)?;
    let logits = tape.scale(logits, 1.0 / libm::sqrt(d as f64));
    let weights = tape.softmax_rows(logits, mask)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

fn check_layers(a: &[TapVars], b: &[TapVars]) -> Result<()> {
    let ia: Vec<usize> = a.iter().map(|t| t.layer_id).collect();
    let ib: Vec<usize> = b.iter().map(|t| t.layer_id).collect();
    if ia != ib || ia.is_empty() {
        return Err(Error::LayerMismatch(format!("{ia:?} vs {ib:?}")));
    }
    for (x, y) in a.iter().zip(b) {
        if x.q.len() != y.q.len() {
            return Err(Error::LayerMismatch(format!(
                "layer {}: {} vs {} heads",
                x.layer_id,
                x.q.len(),
                y.q.len()
            )));
        }
    }
    Ok(())
}

/// AD loss on the tape. `masks`, when present, restrict the ideal branch only.
pub fn ad_loss_on(
    tape: &mut Tape,
    target: &[TapVars],
    reference: &[TapVars],
    masks: Option<&GuidanceMask>,
) -> Result<Var> {
    ad_loss_traced(tape, target, reference, masks, None)
}

/// As [`ad_loss_on`], additionally pushing every ideal-branch weight matrix
/// (`[target tokens, source tokens]`, layer-major then head) into `weights`.
pub fn ad_loss_traced(
    tape: &mut Tape,
    target: &[TapVars],
    reference: &[TapVars],
    masks: Option<&GuidanceMask>,
    mut weights: Option<&mut Vec<Tensor>>,
) -> Result<Var> {
    check_layers(target, reference)?;
    if let Some(m) = masks {
        if m.layers.len() != target.len() {
            return Err(Error::LayerMismatch(format!(
                "{} masks for {} layers",
                m.layers.len(),
                target.len()
            )));
        }
    }
    let mut per_layer = Vec::with_capacity(target.len());
    for (li, (t, r)) in target.iter().zip(reference).enumerate() {
        let mask = masks.map(|m| &m.layers[li]);
        let mut heads = Vec::with_capacity(t.q.len());
        for h in 0..t.q.len() {
            let (current, _) = attend(tape, t.q[h], t.k[h], t.v[h], None)?;
            let (ideal, w) = attend(tape, t.q[h], r.k[h], r.v[h], mask).map_err(|e| match e {
                Error::Shape { .. } if mask.is_some() => Error::shape(
                    "masked attention",
                    format!("layer {}: mask grid does not match the token grid", t.layer_id),
                ),
                other => other,
            })?;
            if let Some(ws) = weights.as_deref_mut() {
                ws.push(tape.value(w).clone());
            }
            heads.push(tape.l1_mean(current, ideal)?);
        }
        let sum = tape.sum_scalars(&heads)?;
        per_layer.push(tape.scale(sum, 1.0 / heads.len() as f64));
    }
    let sum = tape.sum_scalars(&per_layer)?;
    Ok(tape.scale(sum, 1.0 / per_layer.len() as f64))
}

/// Query-matching content loss on the tape.
pub fn content_loss_on(tape: &mut Tape, target: &[TapVars], content: &[TapVars]) -> Result<Var> {
    check_layers(target, content)?;
    let mut per_layer = Vec::with_capacity(target.len());
    for (t, c) in target.iter().zip(content) {
        let mut heads = Vec::with_capacity(t.q.len());
        for h in 0..t.q.len() {
            if tape.value(t.q[h]).shape() != tape.value(c.q[h]).shape() {
                return Err(Error::shape(
                    "content loss",
                    format!("layer {}: query grids differ", t.layer_id),
                ));
            }
            heads.push(tape.l1_mean(t.q[h], c.q[h])?);
        }
        let sum = tape.sum_scalars(&heads)?;
        per_layer.push(tape.scale(sum, 1.0 / heads.len() as f64));
    }
    let sum = tape.sum_scalars(&per_layer)?;
    Ok(tape.scale(sum, 1.0 / per_layer.len() as f64))
}

/// `softmax(QKᵀ/√d)·V` per head for `[heads, tokens, d]` inputs.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&LayerMask>) -> Result<Tensor> {
    let (hq, nq, dq) = q.dims3()?;
    let (hk, nk, dk) = k.dims3()?;
    let (hv, nv, dv) = v.dims3()?;
    if hq != hk || hk != hv || dq != dk || nk != nv {
        return Err(Error::shape(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let mask = mask.map(|m| Arc::new(m.clone()));
    let mut tape = Tape::new();
    let (qs, ks, vs) = (
        split_heads(&mut tape, q)?,
        split_heads(&mut tape, k)?,
        split_heads(&mut tape, v)?,
    );
    let mut data = Vec::with_capacity(hq * nq * dv);
    for h in 0..hq {
        let (out, _) = attend(&mut tape, qs[h], ks[h], vs[h], mask.as_ref())?;
        data.extend_from_slice(tape.value(out).data());
    }
    Tensor::new([hq, nq, dv], data)
}

/// The attention weight matrices `[heads, n_q, n_k]`.
pub fn attention_weights(q: &Tensor, k: &Tensor, mask: Option<&LayerMask>) -> Result<Tensor> {
    let (h, nq, _) = q.dims3()?;
    let nk = k.dims3()?.1;
    let v = Tensor::zeros([h, nk, 1]);
    let mask = mask.map(|m| Arc::new(m.clone()));
    let mut tape = Tape::new();
    let (qs, ks, vs) = (
        split_heads(&mut tape, q)?,
        split_heads(&mut tape, k)?,
        split_heads(&mut tape, &v)?,
    );
    let mut data = Vec::with_capacity(h * nq * nk);
    for i in 0..h {
        let (_, w) = attend(&mut tape, qs[i], ks[i], vs[i], mask.as_ref())?;
        data.extend_from_slice(tape.value(w).data());
    }
    Tensor::new([h, nq, nk], data)
}

/// Attention distillation loss between detached taps.
pub fn ad_loss(target: &AttentionTaps, reference: &AttentionTaps) -> Result<f64> {
    let mut tape = Tape::new();
    let t = target.to_tape(&mut tape)?;
    let r = reference.to_tape(&mut tape)?;
    let loss = ad_loss_on(&mut tape, &t, &r, None)?;
    Ok(tape.value(loss).item())
}

/// AD loss with the ideal branch restricted by per-layer guidance masks.
pub fn masked_ad_loss(
    target: &AttentionTaps,
    reference: &AttentionTaps,
    masks: &GuidanceMask,
) -> Result<f64> {
    let mut tape = Tape::new();
    let t = target.to_tape(&mut tape)?;
    let r = reference.to_tape(&mut tape)?;
    let loss = ad_loss_on(&mut tape, &t, &r, Some(masks))?;
    Ok(tape.value(loss).item())
}

/// Ideal-branch attention weights for every layer and head (layer-major).
pub fn ideal_attention_weights(
    target: &AttentionTaps,
    reference: &AttentionTaps,
    masks: Option<&GuidanceMask>,
) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let t = target.to_tape(&mut tape)?;
    let r = reference.to_tape(&mut tape)?;
    let mut weights = Vec::new();
    ad_loss_traced(&mut tape, &t, &r, masks, Some(&mut weights))?;
    Ok(weights)
}

pub fn content_loss(target: &AttentionTaps, content: &AttentionTaps) -> Result<f64> {
    let mut tape = Tape::new();
    let t = target.to_tape(&mut tape)?;
    let c = content.to_tape(&mut tape)?;
    let loss = content_loss_on(&mut tape, &t, &c)?;
    Ok(tape.value(loss).item())
}

/// `ad + λ·content`.
pub fn total_loss(ad: f64, content: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::config("lambda", format!("must be >= 0, got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(ad);
    }
    Ok(ad + lambda * content)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t3(h: usize, n: usize, d: usize, data: &[f64]) -> Tensor {
        Tensor::new([h, n, d], data.to_vec()).unwrap()
    }

    fn tap(id: usize, q: Tensor, k: Tensor, v: Tensor) -> AttentionTaps {
        AttentionTaps::new(vec![LayerTap::new(id, q, k, v).unwrap()]).unwrap()
    }

    #[test]
    fn single_key_returns_its_value() {
        let q = t3(1, 3, 2, &[0.1, 5.0, -2.0, 0.3, 7.0, 7.0]);
        let k = t3(1, 1, 2, &[0.4, -0.9]);
        let v = t3(1, 1, 3, &[1.5, -2.0, 0.25]);
        let out = attention(&q, &k, &v, None).unwrap();
        for row in out.data().chunks(3) {
            assert_eq!(row, &[1.5, -2.0, 0.25]);
        }
    }

    #[test]
    fn all_true_mask_is_a_no_op() {
        let q = t3(1, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let plain = attention(&q, &q, &q, None).unwrap();
        let masked = attention(&q, &q, &q, Some(&LayerMask::new(2, 2, true))).unwrap();
        assert_eq!(plain, masked);
    }

    #[test]
    fn fully_masked_row_errors() {
        let q = t3(1, 2, 1, &[1.0, 2.0]);
        let mut mask = LayerMask::new(2, 2, true);
        mask.set(1, 0, false);
        mask.set(1, 1, false);
        assert_eq!(
            attention(&q, &q, &q, Some(&mask)).unwrap_err(),
            Error::EmptyAttentionRow { row: 1 }
        );
    }

    #[test]
    fn ad_loss_single_token_is_value_gap() {
        let one = t3(1, 1, 1, &[0.7]);
        let target = tap(0, one.clone(), one.clone(), t3(1, 1, 1, &[2.0]));
        let reference = tap(0, one.clone(), one, t3(1, 1, 1, &[5.0]));
        assert_eq!(ad_loss(&target, &reference).unwrap(), 3.0);
        assert_eq!(ad_loss(&target, &target).unwrap(), 0.0);
    }

    #[test]
    fn content_loss_is_mean_abs_query_gap() {
        let q = t3(1, 1, 2, &[1.0, 2.0]);
        let qc = t3(1, 1, 2, &[0.0, 0.0]);
        let kv = t3(1, 1, 2, &[0.0, 0.0]);
        let target = tap(3, q, kv.clone(), kv.clone());
        let content = tap(3, qc, kv.clone(), kv);
        assert_eq!(content_loss(&target, &content).unwrap(), 1.5);
        assert_eq!(content_loss(&target, &target).unwrap(), 0.0);
    }

    #[test]
    fn mismatched_layers_are_rejected() {
        let x = t3(1, 1, 1, &[1.0]);
        let a = tap(0, x.clone(), x.clone(), x.clone());
        let b = tap(1, x.clone(), x.clone(), x);
        assert!(matches!(ad_loss(&a, &b), Err(Error::LayerMismatch(_))));
        assert!(matches!(content_loss(&a, &b), Err(Error::LayerMismatch(_))));
    }

    #[test]
    fn total_loss_combines_and_validates() {
        assert_eq!(total_loss(1.0, 2.0, 0.25).unwrap(), 1.5);
        assert_eq!(total_loss(0.375, 9.0, 0.0).unwrap(), 0.375);
        assert_eq!(total_loss(0.0, 0.0, 0.25).unwrap(), 0.0);
        assert!(total_loss(1.0, 1.0, -0.1).is_err());
        assert!(total_loss(1.0, 1.0, f64::NAN).is_err());
    }

    #[test]
    fn guidance_mask_follows_label_equality() {
        let src = LabelMap::new(2, 1, vec![0, 1]).unwrap();
        let tgt = LabelMap::new(2, 1, vec![1, 0]).unwrap();
        let grid = LayerGrid {
            source: (1, 2),
            target: (1, 2),
        };
        let m = build_guidance_mask(&src, &tgt, &[grid]).unwrap();
        let l = &m.layers[0];
        assert_eq!(
            [l.get(0, 0), l.get(0, 1), l.get(1, 0), l.get(1, 1)],
            [false, true, true, false]
        );
    }

    #[test]
    fn unmatched_target_label_errors() {
        let src = LabelMap::new(2, 1, vec![0, 0]).unwrap();
        let tgt = LabelMap::new(2, 1, vec![0, 4]).unwrap();
        let grid = LayerGrid {
            source: (1, 2),
            target: (1, 2),
        };
        assert_eq!(
            build_guidance_mask(&src, &tgt, &[grid]).unwrap_err(),
            Error::UnmatchedLabel { label: 4 }
        );
    }

    #[test]
    fn selector_resolves_last_layers() {
        assert_eq!(LayerSelector::Last(6).resolve(16).unwrap(), (10..16).collect::<Vec<_>>());
        assert!(LayerSelector::Last(7).resolve(6).is_err());
        assert!(LayerSelector::Layers(vec![2, 1]).resolve(6).is_err());
        assert!(LayerSelector::Layers(vec![1, 9]).resolve(6).is_err());
    }
}
