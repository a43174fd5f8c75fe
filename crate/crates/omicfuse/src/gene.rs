//! Grouped-attention gene encoder.
//!
//! An expression vector of `N_ge` values is cut into `N_f` equal fragments,
//! each projected to a `d`-dimensional token. Fragments are then divided
//! into `N_gr` groups; every group gets its own learnable group token and
//! runs through one shared self-attention block (intra-group stage). The
//! updated group tokens, prefixed by a learnable classification token, run
//! through a second block (inter-group stage), whose position-0 output is
//! the genomic summary `cls_ge`.

use crate::attention::{transformer_block, AttentionKind, BlockBound, BlockParams};
use crate::error::{Error, Result};
use crate::optim::{cosine_lr, AdamW};
use crate::params::{param_fields, ParamSet};
use crate::rng::substream2;
use crate::tape::{Tape, TensorId};
use crate::tensor::DiffTensor;
use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneVector {
    pub values: Vec<f64>,
    pub patient_id: String,
}

/// Fragment/group geometry. All divisibility constraints are enforced here,
/// at construction, so downstream code never re-checks them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupLayout {
    pub n_ge: usize,
    pub n_f: usize,
    pub n_gr: usize,
    pub d: usize,
}

impl GroupLayout {
    pub fn new(n_ge: usize, n_f: usize, n_gr: usize, d: usize) -> Result<Self> {
        if n_ge == 0 || n_f == 0 || n_gr == 0 || d == 0 {
            return Err(Error::config(format!(
                "group layout extents must be positive: n_ge={n_ge} n_f={n_f} n_gr={n_gr} d={d}"
            )));
        }
        if n_ge % n_f != 0 {
            return Err(Error::config(format!(
                "gene length {n_ge} is not divisible by fragment count {n_f}"
            )));
        }
        if n_f % n_gr != 0 {
            return Err(Error::config(format!(
                "fragment count {n_f} is not divisible by group count {n_gr}"
            )));
        }
        Ok(GroupLayout { n_ge, n_f, n_gr, d })
    }

    pub fn fragment_len(&self) -> usize {
        self.n_ge / self.n_f
    }

    pub fn fragments_per_group(&self) -> usize {
        self.n_f / self.n_gr
    }

    /// Group token + its fragments.
    pub fn tokens_per_group(&self) -> usize {
        self.fragments_per_group() + 1
    }

    /// Pad a raw gene length up to the next multiple of `n_f`.
    pub fn padded_len(n_raw: usize, n_f: usize) -> usize {
        n_raw.div_ceil(n_f) * n_f
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneEncoderParams {
    pub w_frag: DiffTensor,
    pub b_frag: DiffTensor,
    pub group_tokens: DiffTensor,
    pub cls_ge: DiffTensor,
    pub intra: BlockParams,
    pub inter: BlockParams,
    pub frozen: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct GeneEncoderBound {
    pub w_frag: TensorId,
    pub b_frag: TensorId,
    pub group_tokens: TensorId,
    pub cls_ge: TensorId,
    pub intra: BlockBound,
    pub inter: BlockBound,
}

impl GeneEncoderParams {
    pub fn init(layout: &GroupLayout, rng: &mut impl Rng) -> Self {
        let d = layout.d;
        let fl = layout.fragment_len();
        GeneEncoderParams {
            w_frag: DiffTensor::init_linear(&[fl, d], fl, rng),
            b_frag: DiffTensor::zeros(&[1, d]),
            group_tokens: DiffTensor::init_linear(&[layout.n_gr, d], d, rng),
            cls_ge: DiffTensor::init_linear(&[1, d], d, rng),
            intra: BlockParams::init(d, rng),
            inter: BlockParams::init(d, rng),
            frozen: false,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> GeneEncoderBound {
        GeneEncoderBound {
            w_frag: tape.param(&self.w_frag, self.frozen),
            b_frag: tape.param(&self.b_frag, self.frozen),
            group_tokens: tape.param(&self.group_tokens, self.frozen),
            cls_ge: tape.param(&self.cls_ge, self.frozen),
            intra: self.intra.bind(tape, self.frozen),
            inter: self.inter.bind(tape, self.frozen),
        }
    }
}

impl ParamSet for GeneEncoderParams {
    fn for_each(&self, f: &mut dyn FnMut(&str, &DiffTensor)) {
        f("w_frag", &self.w_frag);
        f("b_frag", &self.b_frag);
        f("group_tokens", &self.group_tokens);
        f("cls_ge", &self.cls_ge);
        self.intra.for_each(&mut |n, t| f(&format!("intra.{n}"), t));
        self.inter.for_each(&mut |n, t| f(&format!("inter.{n}"), t));
    }
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut DiffTensor)) {
        f("w_frag", &mut self.w_frag);
        f("b_frag", &mut self.b_frag);
        f("group_tokens", &mut self.group_tokens);
        f("cls_ge", &mut self.cls_ge);
        self.intra
            .for_each_mut(&mut |n, t| f(&format!("intra.{n}"), t));
        self.inter
            .for_each_mut(&mut |n, t| f(&format!("inter.{n}"), t));
    }
}

impl GeneEncoderBound {
    pub fn apply_grads(&self, params: &mut GeneEncoderParams, grads: &crate::tape::Gradients) {
        params
            .w_frag
            .accumulate_grad(&grads.wrt(self.w_frag, params.w_frag.numel()));
        params
            .b_frag
            .accumulate_grad(&grads.wrt(self.b_frag, params.b_frag.numel()));
        params
            .group_tokens
            .accumulate_grad(&grads.wrt(self.group_tokens, params.group_tokens.numel()));
        params
            .cls_ge
            .accumulate_grad(&grads.wrt(self.cls_ge, params.cls_ge.numel()));
        self.intra.apply_grads(&mut params.intra, grads);
        self.inter.apply_grads(&mut params.inter, grads);
    }
}

/// Cut a gene vector into `N_f` contiguous fragments, order-preserving and
/// lossless. The vector must already have exactly the layout length
/// (loaders pad short files with zeros before this point).
pub fn fragment(gene: &GeneVector, layout: &GroupLayout) -> Result<DiffTensor> {
    if gene.values.len() != layout.n_ge {
        return Err(Error::config(format!(
            "gene vector for {} has length {}, layout expects {}",
            gene.patient_id,
            gene.values.len(),
            layout.n_ge
        )));
    }
    DiffTensor::from_vec(&[layout.n_f, layout.fragment_len()], gene.values.clone())
}

/// Fragment projection: `[N_f x fragment_len] -> H_f [N_f x d]`.
pub fn project_fragments(
    tape: &mut Tape,
    gene: &GeneVector,
    bound: &GeneEncoderBound,
    layout: &GroupLayout,
) -> Result<TensorId> {
    let frags = fragment(gene, layout)?;
    let x = tape.constant(frags);
    tape.linear(x, bound.w_frag, Some(bound.b_frag))
}

/// Intra-group stage: per group, prepend that group's token to its fragment
/// tokens and run the shared block; returns the `N_gr` updated group tokens.
pub fn intra_group_stage(
    tape: &mut Tape,
    h_f: TensorId,
    bound: &GeneEncoderBound,
    layout: &GroupLayout,
    heads: usize,
) -> Result<TensorId> {
    let fpg = layout.fragments_per_group();
    let mut updated = Vec::with_capacity(layout.n_gr);
    for g in 0..layout.n_gr {
        let token = tape.slice_rows(bound.group_tokens, g, 1)?;
        let frags = tape.slice_rows(h_f, g * fpg, fpg)?;
        let group_in = tape.concat_rows(&[token, frags])?;
        let group_out = transformer_block(tape, group_in, &bound.intra, heads, AttentionKind::Exact)?;
        updated.push(tape.slice_rows(group_out, 0, 1)?);
    }
    tape.concat_rows(&updated)
}

/// Inter-group stage over `[CLS_ge; updated group tokens]`; returns the
/// final classification token and the group tokens.
pub fn inter_group_stage(
    tape: &mut Tape,
    updated_tokens: TensorId,
    bound: &GeneEncoderBound,
    layout: &GroupLayout,
    heads: usize,
) -> Result<(TensorId, TensorId)> {
    let inter_in = tape.concat_rows(&[bound.cls_ge, updated_tokens])?;
    let inter_out = transformer_block(tape, inter_in, &bound.inter, heads, AttentionKind::Exact)?;
    let cls = tape.slice_rows(inter_out, 0, 1)?;
    let tokens = tape.slice_rows(inter_out, 1, layout.n_gr)?;
    Ok((cls, tokens))
}

/// Full encoder: gene vector in, `(cls_ge [1 x d], group_tokens [N_gr x d])`
/// out.
pub fn encode_genes(
    tape: &mut Tape,
    gene: &GeneVector,
    bound: &GeneEncoderBound,
    layout: &GroupLayout,
    heads: usize,
) -> Result<(TensorId, TensorId)> {
    let h_f = project_fragments(tape, gene, bound, layout)?;
    let updated = intra_group_stage(tape, h_f, bound, layout, heads)?;
    inter_group_stage(tape, updated, bound, layout, heads)
}

param_fields!(
    /// Linear probe used only during supervised gene pre-training.
    GeneProbeParams,
    GeneProbeBound { w, b }
);

impl GeneProbeParams {
    pub fn init(d: usize, num_classes: usize, rng: &mut impl Rng) -> Self {
        GeneProbeParams {
            w: DiffTensor::init_linear(&[d, num_classes], d, rng),
            b: DiffTensor::zeros(&[1, num_classes]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GenePretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    pub heads: usize,
    pub num_classes: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct GeneEpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct GenePretrainReport {
    pub history: Vec<GeneEpochStats>,
    pub final_accuracy: f64,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Training accuracy of encoder + probe over the whole sample set.
pub fn gene_train_accuracy(
    samples: &[(GeneVector, usize)],
    params: &GeneEncoderParams,
    probe: &GeneProbeParams,
    layout: &GroupLayout,
    heads: usize,
) -> Result<f64> {
    let mut correct = 0;
    for (gene, label) in samples {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let probe_bound = probe.bind(&mut tape, true);
        let (cls, _) = encode_genes(&mut tape, gene, &bound, layout, heads)?;
        let logits = tape.linear(cls, probe_bound.w, Some(probe_bound.b))?;
        if argmax(tape.value(logits).data()) == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len().max(1) as f64)
}

/// Supervised pre-training of the gene encoder with a linear probe on
/// `cls_ge` and cross-entropy loss. Returns per-epoch statistics; the
/// caller freezes the encoder afterwards.
pub fn pretrain_gene_supervised(
    samples: &[(GeneVector, usize)],
    params: &mut GeneEncoderParams,
    probe: &mut GeneProbeParams,
    layout: &GroupLayout,
    cfg: &GenePretrainConfig,
) -> Result<GenePretrainReport> {
    let classes: std::collections::BTreeSet<usize> =
        samples.iter().map(|(_, l)| *l).collect();
    if classes.len() < 2 {
        return Err(Error::config(format!(
            "gene pre-training needs at least 2 classes, found {}",
            classes.len()
        )));
    }
    if params.frozen {
        return Err(Error::config(
            "gene encoder is frozen; unfreeze before supervised pre-training".to_string(),
        ));
    }

    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        opt.set_lr(cosine_lr(epoch, cfg.epochs, cfg.lr, cfg.lr_min));
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut shuffle_rng = substream2(cfg.seed, "gene-batch", epoch as u64, 0);
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let probe_bound = probe.bind(&mut tape, false);
            let mut logit_rows = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (gene, label) = &samples[i];
                let (cls, _) = encode_genes(&mut tape, gene, &bound, layout, cfg.heads)?;
                logit_rows.push(tape.linear(cls, probe_bound.w, Some(probe_bound.b))?);
                labels.push(*label);
            }
            let logits = tape.concat_rows(&logit_rows)?;
            let log_probs = tape.log_softmax_rows(logits)?;
            let loss = tape.nll_pick_mean(log_probs, &labels)?;
            epoch_loss += tape.value(loss).data()[0];
            batches += 1;
            let grads = tape.backward(loss)?;
            bound.apply_grads(params, &grads);
            probe_bound.apply_grads(probe, &grads);
            opt.step_group("gene", params);
            opt.step_group("gene_probe", probe);
            params.zero_grads();
            probe.zero_grads();
        }

        let accuracy = gene_train_accuracy(samples, params, probe, layout, cfg.heads)?;
        let loss = epoch_loss / batches.max(1) as f64;
        log::info!("gene pre-train epoch {epoch}: loss {loss:.4}, accuracy {accuracy:.4}");
        history.push(GeneEpochStats {
            epoch,
            loss,
            accuracy,
        });
    }

    let final_accuracy = history.last().map(|h| h.accuracy).unwrap_or(0.0);
    Ok(GenePretrainReport {
        history,
        final_accuracy,
    })
}

/// Synthetic, linearly separable gene vectors for tests: class means differ
/// by `shift` standard deviations on the first tenth of the genes.
pub fn separable_gene_samples(
    n_per_class: usize,
    num_classes: usize,
    n_ge: usize,
    shift: f64,
    seed: u64,
) -> Vec<(GeneVector, usize)> {
    let informative = (n_ge / 10).max(1);
    let mut out = Vec::new();
    for class in 0..num_classes {
        for i in 0..n_per_class {
            let mut rng = substream2(seed, "separable-genes", class as u64, i as u64);
            let mut values: Vec<f64> = (0..n_ge)
                .map(|_| {
                    let u1: f64 = rng.random_range(1e-12..1.0);
                    let u2: f64 = rng.random_range(0.0..1.0);
                    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                })
                .collect();
            for v in values.iter_mut().take(informative) {
                *v += shift * class as f64;
            }
            out.push((
                GeneVector {
                    values,
                    patient_id: format!("synth-{class}-{i}"),
                },
                class,
            ));
        }
    }
    // deterministic interleaving of classes
    out.sort_by_key(|(g, _)| g.patient_id.clone());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn layout_small() -> GroupLayout {
        GroupLayout::new(32, 8, 4, 8).unwrap()
    }

    fn gene(values: Vec<f64>) -> GeneVector {
        GeneVector {
            values,
            patient_id: "p0".into(),
        }
    }

    #[test]
    fn layout_enforces_divisibility() {
        assert!(GroupLayout::new(8, 4, 2, 4).is_ok());
        assert!(GroupLayout::new(9, 4, 2, 4).is_err());
        assert!(GroupLayout::new(8, 4, 3, 4).is_err());
        assert!(GroupLayout::new(0, 4, 2, 4).is_err());
    }

    #[test]
    fn paper_scale_fragment_arithmetic() {
        let layout = GroupLayout::new(60_480, 1_890, 30, 16).unwrap();
        assert_eq!(layout.fragment_len(), 32);
        assert_eq!(layout.tokens_per_group(), 64);
    }

    #[test]
    fn fragments_are_contiguous_and_lossless() {
        let layout = GroupLayout::new(8, 4, 2, 4).unwrap();
        let g = gene((0..8).map(|v| v as f64).collect());
        let frags = fragment(&g, &layout).unwrap();
        assert_eq!(frags.shape(), &[4, 2]);
        assert_eq!(frags.row_slice(0), &[0.0, 1.0]);
        assert_eq!(frags.row_slice(3), &[6.0, 7.0]);
        // concatenating fragments reproduces the input exactly
        assert_eq!(frags.data(), g.values.as_slice());
    }

    #[test]
    fn wrong_length_is_rejected() {
        let layout = GroupLayout::new(8, 4, 2, 4).unwrap();
        let g = gene(vec![0.0; 9]);
        assert!(fragment(&g, &layout).is_err());
    }

    #[test]
    fn tokens_per_group_matches_contract() {
        let layout = GroupLayout::new(4096, 64, 8, 16).unwrap();
        assert_eq!(layout.tokens_per_group(), 9);
        assert_eq!(layout.fragments_per_group(), 8);
    }

    #[test]
    fn encoder_output_shapes() {
        let layout = layout_small();
        let mut rng = substream(3, "gene-test", 0);
        let params = GeneEncoderParams::init(&layout, &mut rng);
        let g = gene((0..32).map(|v| (v as f64).sin()).collect());
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let (cls, tokens) = encode_genes(&mut tape, &g, &bound, &layout, 2).unwrap();
        assert_eq!(tape.value(cls).shape(), &[1, 8]);
        assert_eq!(tape.value(tokens).shape(), &[4, 8]);
    }

    #[test]
    fn permuting_within_one_fragment_changes_only_that_projected_row() {
        let layout = layout_small();
        let mut rng = substream(3, "gene-test", 1);
        let params = GeneEncoderParams::init(&layout, &mut rng);
        let base: Vec<f64> = (0..32).map(|v| (v as f64 * 0.37).sin()).collect();

        let mut permuted = base.clone();
        // swap two genes inside fragment 2 (indices 8..12)
        permuted.swap(8, 11);

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let h_a = project_fragments(&mut tape, &gene(base), &bound, &layout).unwrap();
        let h_b = project_fragments(&mut tape, &gene(permuted), &bound, &layout).unwrap();
        let a = tape.value(h_a);
        let b = tape.value(h_b);
        for row in 0..8 {
            let differs = a
                .row_slice(row)
                .iter()
                .zip(b.row_slice(row))
                .any(|(x, y)| x != y);
            assert_eq!(differs, row == 2, "row {row}");
        }
    }

    #[test]
    fn intra_stage_is_equivariant_to_whole_group_permutation() {
        let layout = layout_small(); // 4 groups of 2 fragments, fragment_len 4
        let mut rng = substream(3, "gene-test", 2);
        let mut params = GeneEncoderParams::init(&layout, &mut rng);
        let base: Vec<f64> = (0..32).map(|v| (v as f64 * 0.11).cos()).collect();

        let perm = [2usize, 0, 3, 1];
        let genes_per_group = layout.fragments_per_group() * layout.fragment_len();
        let mut permuted_genes = vec![0.0; 32];
        for (dst, &src) in perm.iter().enumerate() {
            permuted_genes[dst * genes_per_group..(dst + 1) * genes_per_group]
                .copy_from_slice(&base[src * genes_per_group..(src + 1) * genes_per_group]);
        }

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let h = project_fragments(&mut tape, &gene(base), &bound, &layout).unwrap();
        let updated = intra_group_stage(&mut tape, h, &bound, &layout, 2).unwrap();
        let original = tape.value(updated).clone();

        // permute the group tokens with the same permutation
        let d = layout.d;
        let tok = params.group_tokens.data().to_vec();
        for (dst, &src) in perm.iter().enumerate() {
            params.group_tokens.data_mut()[dst * d..(dst + 1) * d]
                .copy_from_slice(&tok[src * d..(src + 1) * d]);
        }
        let mut tape2 = Tape::new();
        let bound2 = params.bind(&mut tape2);
        let h2 = project_fragments(&mut tape2, &gene(permuted_genes), &bound2, &layout).unwrap();
        let updated2 = intra_group_stage(&mut tape2, h2, &bound2, &layout, 2).unwrap();
        let permuted_out = tape2.value(updated2);

        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(
                permuted_out.row_slice(dst),
                original.row_slice(src),
                "group {dst} should be group {src} of the original, bitwise"
            );
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        use crate::gradcheck::grad_check;

        let layout = GroupLayout::new(16, 4, 2, 4).unwrap();
        let mut rng = substream(3, "gene-test", 4);
        let params = GeneEncoderParams::init(&layout, &mut rng);
        let g = gene((0..16).map(|v| (v as f64 * 0.21).sin()).collect());

        let mut flat: Vec<(String, DiffTensor)> = Vec::new();
        params.for_each(&mut |n, t| flat.push((n.to_string(), t.clone())));
        let names: Vec<String> = flat.iter().map(|(n, _)| n.clone()).collect();
        let report = grad_check(&mut flat, 1e-5, 1e-6, None, |tape, ids| {
            let by_name = |n: &str| ids[names.iter().position(|x| x == n).unwrap()];
            let block = |prefix: &str| BlockBound {
                wq: by_name(&format!("{prefix}.wq")),
                wk: by_name(&format!("{prefix}.wk")),
                wv: by_name(&format!("{prefix}.wv")),
                wo: by_name(&format!("{prefix}.wo")),
                bo: by_name(&format!("{prefix}.bo")),
                ln1_gamma: by_name(&format!("{prefix}.ln1_gamma")),
                ln1_beta: by_name(&format!("{prefix}.ln1_beta")),
                mlp_w1: by_name(&format!("{prefix}.mlp_w1")),
                mlp_b1: by_name(&format!("{prefix}.mlp_b1")),
                mlp_w2: by_name(&format!("{prefix}.mlp_w2")),
                mlp_b2: by_name(&format!("{prefix}.mlp_b2")),
                ln2_gamma: by_name(&format!("{prefix}.ln2_gamma")),
                ln2_beta: by_name(&format!("{prefix}.ln2_beta")),
            };
            let bound = GeneEncoderBound {
                w_frag: by_name("w_frag"),
                b_frag: by_name("b_frag"),
                group_tokens: by_name("group_tokens"),
                cls_ge: by_name("cls_ge"),
                intra: block("intra"),
                inter: block("inter"),
            };
            let (cls, tokens) = encode_genes(tape, &g, &bound, &layout, 2)?;
            let c = tape.sq_sum(cls)?;
            let t = tape.sq_sum(tokens)?;
            tape.add(c, t)
        })
        .unwrap();
        assert!(report.passed, "\n{}", report.summary());
    }

    #[test]
    fn supervised_pretrain_reaches_high_accuracy_on_separable_genes() {
        let layout = GroupLayout::new(64, 8, 4, 8).unwrap();
        let samples = separable_gene_samples(12, 2, 64, 3.0, 11);
        let mut rng = substream(11, "init", 0);
        let mut params = GeneEncoderParams::init(&layout, &mut rng);
        let mut probe = GeneProbeParams::init(layout.d, 2, &mut rng);
        let cfg = GenePretrainConfig {
            epochs: 20,
            lr: 1e-3,
            lr_min: 1e-6,
            batch_size: 8,
            heads: 2,
            num_classes: 2,
            weight_decay: 0.01,
            seed: 11,
        };
        let report = pretrain_gene_supervised(&samples, &mut params, &mut probe, &layout, &cfg)
            .unwrap();
        assert!(
            report.final_accuracy >= 0.99,
            "final accuracy {}",
            report.final_accuracy
        );
    }

    #[test]
    fn zero_epochs_leaves_params_at_initialization() {
        let layout = layout_small();
        let samples = separable_gene_samples(4, 2, 32, 3.0, 12);
        let mut rng = substream(12, "init", 0);
        let mut params = GeneEncoderParams::init(&layout, &mut rng);
        let mut probe = GeneProbeParams::init(layout.d, 2, &mut rng);
        let snap = params.snapshot();
        let cfg = GenePretrainConfig {
            epochs: 0,
            lr: 1e-3,
            lr_min: 1e-6,
            batch_size: 4,
            heads: 2,
            num_classes: 2,
            weight_decay: 0.01,
            seed: 12,
        };
        pretrain_gene_supervised(&samples, &mut params, &mut probe, &layout, &cfg).unwrap();
        assert!(params.same_bits(&snap));
    }

    #[test]
    fn single_class_dataset_is_a_config_error() {
        let layout = layout_small();
        let samples = separable_gene_samples(4, 1, 32, 3.0, 13);
        let mut rng = substream(13, "init", 0);
        let mut params = GeneEncoderParams::init(&layout, &mut rng);
        let mut probe = GeneProbeParams::init(layout.d, 2, &mut rng);
        let cfg = GenePretrainConfig {
            epochs: 1,
            lr: 1e-3,
            lr_min: 1e-6,
            batch_size: 4,
            heads: 2,
            num_classes: 2,
            weight_decay: 0.01,
            seed: 13,
        };
        assert!(matches!(
            pretrain_gene_supervised(&samples, &mut params, &mut probe, &layout, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn frozen_binding_blocks_gradient_flow() {
        let layout = layout_small();
        let mut rng = substream(3, "gene-test", 5);
        let mut params = GeneEncoderParams::init(&layout, &mut rng);
        params.frozen = true;
        let g = gene((0..32).map(|v| (v as f64 * 0.5).sin()).collect());
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let (cls, _) = encode_genes(&mut tape, &g, &bound, &layout, 2).unwrap();
        let loss = tape.sq_sum(cls).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(bound.w_frag).is_none());
        assert!(grads.get(bound.cls_ge).is_none());
    }
}
