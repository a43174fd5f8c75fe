//! Patch aggregator: embed a variable-length patch sequence, prepend a
//! learnable classification token, and run two Nystrom-attention
//! transformer layers.

use crate::attention::{transformer_block, AttentionKind, BlockBound, BlockParams};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tape::{Tape, TensorId};
use crate::tensor::DiffTensor;
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    /// `N_p x embed_dim`, one row per patch.
    pub embeddings: DiffTensor,
    pub patient_id: String,
}

impl PatchSequence {
    pub fn new(embeddings: DiffTensor, patient_id: impl Into<String>) -> Result<Self> {
        let (n, _) = embeddings.dims2()?;
        if n < 1 {
            return Err(Error::config("patch sequence must have at least one patch"));
        }
        if !embeddings.is_finite() {
            return Err(Error::numeric("patch_sequence", "non-finite embedding"));
        }
        Ok(PatchSequence {
            embeddings,
            patient_id: patient_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.dims2().map(|(n, _)| n).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorParams {
    pub w_in: DiffTensor,
    pub b_in: DiffTensor,
    pub cls_img: DiffTensor,
    pub layers: [BlockParams; 2],
    /// Landmark count `m` shared by both layers.
    pub landmarks: usize,
    pub pinv_iters: usize,
    pub frozen: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct AggregatorBound {
    pub w_in: TensorId,
    pub b_in: TensorId,
    pub cls_img: TensorId,
    pub layers: [BlockBound; 2],
}

impl AggregatorParams {
    pub fn init(
        embed_dim: usize,
        d: usize,
        landmarks: usize,
        pinv_iters: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if landmarks < 1 {
            return Err(Error::config("landmark count must be >= 1"));
        }
        Ok(AggregatorParams {
            w_in: DiffTensor::init_linear(&[embed_dim, d], embed_dim, rng),
            b_in: DiffTensor::zeros(&[1, d]),
            cls_img: DiffTensor::init_linear(&[1, d], d, rng),
            layers: [BlockParams::init(d, rng), BlockParams::init(d, rng)],
            landmarks,
            pinv_iters,
            frozen: false,
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> AggregatorBound {
        AggregatorBound {
            w_in: tape.param(&self.w_in, self.frozen),
            b_in: tape.param(&self.b_in, self.frozen),
            cls_img: tape.param(&self.cls_img, self.frozen),
            layers: [
                self.layers[0].bind(tape, self.frozen),
                self.layers[1].bind(tape, self.frozen),
            ],
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.w_in.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.w_in.shape()[1]
    }
}

impl ParamSet for AggregatorParams {
    fn for_each(&self, f: &mut dyn FnMut(&str, &DiffTensor)) {
        f("w_in", &self.w_in);
        f("b_in", &self.b_in);
        f("cls_img", &self.cls_img);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.for_each(&mut |n, t| f(&format!("layers.{i}.{n}"), t));
        }
    }
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut DiffTensor)) {
        f("w_in", &mut self.w_in);
        f("b_in", &mut self.b_in);
        f("cls_img", &mut self.cls_img);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.for_each_mut(&mut |n, t| f(&format!("layers.{i}.{n}"), t));
        }
    }
}

impl AggregatorBound {
    pub fn apply_grads(&self, params: &mut AggregatorParams, grads: &crate::tape::Gradients) {
        params
            .w_in
            .accumulate_grad(&grads.wrt(self.w_in, params.w_in.numel()));
        params
            .b_in
            .accumulate_grad(&grads.wrt(self.b_in, params.b_in.numel()));
        params
            .cls_img
            .accumulate_grad(&grads.wrt(self.cls_img, params.cls_img.numel()));
        for (bound, p) in self.layers.iter().zip(params.layers.iter_mut()) {
            bound.apply_grads(p, grads);
        }
    }
}

/// Aggregate a patch sequence already on the tape. Accepts either raw
/// `[T x embed_dim]` rows (projected through `w_in`) or pre-embedded
/// `[T x d]` rows. Returns `(cls_img [1 x d], tokens [T x d])`.
pub fn aggregate(
    tape: &mut Tape,
    x: TensorId,
    bound: &AggregatorBound,
    params: &AggregatorParams,
    heads: usize,
) -> Result<(TensorId, TensorId)> {
    let (t, width) = tape.value(x).dims2()?;
    if t < 1 {
        return Err(Error::config("aggregate needs at least one token"));
    }
    let embedded = if width == params.embed_dim() {
        tape.linear(x, bound.w_in, Some(bound.b_in))?
    } else if width == params.d() {
        x
    } else {
        return Err(Error::ShapeMismatch {
            op: "aggregate",
            lhs: vec![t, width],
            rhs: vec![t, params.embed_dim()],
        });
    };
    let mut h = tape.concat_rows(&[bound.cls_img, embedded])?;
    let kind = AttentionKind::Nystrom {
        landmarks: params.landmarks,
        pinv_iters: params.pinv_iters,
    };
    for layer in &bound.layers {
        h = transformer_block(tape, h, layer, heads, kind)?;
    }
    let cls = tape.slice_rows(h, 0, 1)?;
    let tokens = tape.slice_rows(h, 1, t)?;
    Ok((cls, tokens))
}

/// Convenience wrapper that loads the sequence as a constant first.
pub fn aggregate_sequence(
    tape: &mut Tape,
    seq: &PatchSequence,
    bound: &AggregatorBound,
    params: &AggregatorParams,
    heads: usize,
) -> Result<(TensorId, TensorId)> {
    let x = tape.constant_ref(&seq.embeddings);
    aggregate(tape, x, bound, params, heads)
}
