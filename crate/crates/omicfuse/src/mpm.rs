//! Masked patch modeling: sample a fixed-length contiguous window from a
//! patch sequence, mask half of its rows with a learned mask embedding,
//! reconstruct the masked rows through the aggregator plus a lightweight
//! decoder, and penalize the L1 error at masked positions only.

use crate::aggregator::{aggregate, AggregatorBound, AggregatorParams, PatchSequence};
use crate::error::{Error, Result};
use crate::params::param_fields;
use crate::tape::{Tape, TensorId};
use crate::tensor::DiffTensor;
use rand::Rng;

/// A sampled window plus its masking.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedWindow {
    /// Reconstruction targets, `L x embed_dim`.
    pub window: DiffTensor,
    /// Sorted, unique, exactly `floor(ratio * L)` indices below `L`.
    pub masked_indices: Vec<usize>,
    /// `window` with masked rows replaced by the mask embedding (values as
    /// of masking time; the training path rebuilds this on the tape so
    /// gradients reach the embedding).
    pub model_input: DiffTensor,
    /// Offset of the window in the source sequence.
    pub window_start: usize,
}

param_fields!(
    /// Per-token reconstruction decoder `d -> d -> embed_dim`, plus the
    /// learned mask embedding in target space.
    DecoderParams,
    DecoderBound {
        w1,
        b1,
        w2,
        b2,
        mask_embedding,
    }
);

impl DecoderParams {
    pub fn init(d: usize, embed_dim: usize, rng: &mut impl Rng) -> Self {
        DecoderParams {
            w1: DiffTensor::init_linear(&[d, d], d, rng),
            b1: DiffTensor::zeros(&[1, d]),
            w2: DiffTensor::init_linear(&[d, embed_dim], d, rng),
            b2: DiffTensor::zeros(&[1, embed_dim]),
            mask_embedding: DiffTensor::init_linear(&[1, embed_dim], embed_dim, rng),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.w2.shape()[1]
    }
}

/// Sample a length-`l` contiguous window. Sequences of at least `l` patches
/// yield a uniform start in `[0, N_p - l]`; shorter sequences are repeated
/// cyclically until `l` rows are filled (start 0).
pub fn sample_window(
    seq: &PatchSequence,
    l: usize,
    rng: &mut impl Rng,
) -> Result<(DiffTensor, usize)> {
    if l < 2 {
        return Err(Error::config(format!("window length must be >= 2, got {l}")));
    }
    let (n_p, dim) = seq.embeddings.dims2()?;
    if n_p >= l {
        let start = rng.random_range(0..=n_p - l);
        let data = seq.embeddings.data()[start * dim..(start + l) * dim].to_vec();
        Ok((DiffTensor::from_vec(&[l, dim], data)?, start))
    } else {
        let mut data = Vec::with_capacity(l * dim);
        for row in 0..l {
            let src = row % n_p;
            data.extend_from_slice(&seq.embeddings.data()[src * dim..(src + 1) * dim]);
        }
        Ok((DiffTensor::from_vec(&[l, dim], data)?, 0))
    }
}

/// Draw exactly `floor(ratio * L)` distinct masked indices uniformly without
/// replacement and build the model input.
pub fn apply_mask(
    window: DiffTensor,
    window_start: usize,
    ratio: f64,
    rng: &mut impl Rng,
    mask_embedding: &DiffTensor,
) -> Result<MaskedWindow> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config(format!(
            "mask ratio must lie strictly inside (0, 1), got {ratio}"
        )));
    }
    let (l, dim) = window.dims2()?;
    let (er, ec) = mask_embedding.dims2()?;
    if er != 1 || ec != dim {
        return Err(Error::ShapeMismatch {
            op: "apply_mask",
            lhs: window.shape().to_vec(),
            rhs: mask_embedding.shape().to_vec(),
        });
    }
    let count = ((ratio * l as f64).floor() as usize).max(1).min(l - 1);
    let mut masked_indices = rand::seq::index::sample(rng, l, count).into_vec();
    masked_indices.sort_unstable();

    let mut model_data = window.data().to_vec();
    for &r in &masked_indices {
        model_data[r * dim..(r + 1) * dim].copy_from_slice(mask_embedding.data());
    }
    Ok(MaskedWindow {
        model_input: DiffTensor::from_vec(&[l, dim], model_data)?,
        window,
        masked_indices,
        window_start,
    })
}

/// Run the masked input through the aggregator and decode every non-CLS
/// token back to target space. Returns `(H_rec [L x embed_dim], cls_img)`.
///
/// The model input is rebuilt on the tape from the target window and the
/// mask embedding parameter so training reaches the embedding.
pub fn reconstruct(
    tape: &mut Tape,
    masked: &MaskedWindow,
    agg_bound: &AggregatorBound,
    agg: &AggregatorParams,
    dec_bound: &DecoderBound,
    heads: usize,
) -> Result<(TensorId, TensorId)> {
    let targets = tape.constant_ref(&masked.window);
    let model_input =
        tape.replace_rows_broadcast(targets, dec_bound.mask_embedding, &masked.masked_indices)?;
    let (cls, tokens) = aggregate(tape, model_input, agg_bound, agg, heads)?;
    let hidden = tape.linear(tokens, dec_bound.w1, Some(dec_bound.b1))?;
    let hidden = tape.relu(hidden);
    let h_rec = tape.linear(hidden, dec_bound.w2, Some(dec_bound.b2))?;
    Ok((h_rec, cls))
}

/// Eq-style reconstruction loss: sum of L1 distances at masked positions
/// only (unnormalized).
pub fn mpm_loss(
    tape: &mut Tape,
    window: &DiffTensor,
    h_rec: TensorId,
    masked_indices: &[usize],
) -> Result<TensorId> {
    let rec_rows = tape.gather_rows(h_rec, masked_indices)?;
    let (l, dim) = window.dims2()?;
    let mut target_data = Vec::with_capacity(masked_indices.len() * dim);
    for &r in masked_indices {
        if r >= l {
            return Err(Error::config(format!(
                "masked index {r} out of bounds for window of {l} rows"
            )));
        }
        target_data.extend_from_slice(&window.data()[r * dim..(r + 1) * dim]);
    }
    let targets = tape.constant(DiffTensor::from_vec(&[masked_indices.len(), dim], target_data)?);
    tape.sum_abs_diff(rec_rows, targets)
}

/// Pure-value mirror of [`mpm_loss`], usable as a hand oracle.
pub fn mpm_loss_value(window: &DiffTensor, h_rec: &DiffTensor, masked_indices: &[usize]) -> f64 {
    let (_, dim) = window.dims2().unwrap();
    masked_indices
        .iter()
        .map(|&r| {
            window.data()[r * dim..(r + 1) * dim]
                .iter()
                .zip(&h_rec.data()[r * dim..(r + 1) * dim])
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
        })
        .sum()
}
