//! Exact multi-head self-attention and the transformer block shared by the
//! gene encoder (exact attention) and the patch aggregator (Nystrom
//! attention). The exact path doubles as the oracle that Nystrom
//! approximation tests compare against.

use crate::error::{Error, Result};
use crate::nystrom::nystrom_multi_head_attention;
use crate::params::param_fields;
use crate::tape::{Tape, TensorId};
use crate::tensor::DiffTensor;
use rand::Rng;

pub const LN_EPS: f64 = 1e-5;

/// Which attention kernel a block runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Exact,
    Nystrom { landmarks: usize, pinv_iters: usize },
}

param_fields!(
    /// One post-norm transformer block: attention + residual + layer norm,
    /// then a two-layer MLP + residual + layer norm. Q/K/V projections carry
    /// no bias; the output projection and MLP do.
    BlockParams,
    BlockBound {
        wq,
        wk,
        wv,
        wo,
        bo,
        ln1_gamma,
        ln1_beta,
        mlp_w1,
        mlp_b1,
        mlp_w2,
        mlp_b2,
        ln2_gamma,
        ln2_beta,
    }
);

impl BlockParams {
    /// MLP hidden width is fixed at `2 d`.
    pub fn init(d: usize, rng: &mut impl Rng) -> Self {
        let hidden = 2 * d;
        BlockParams {
            wq: DiffTensor::init_linear(&[d, d], d, rng),
            wk: DiffTensor::init_linear(&[d, d], d, rng),
            wv: DiffTensor::init_linear(&[d, d], d, rng),
            wo: DiffTensor::init_linear(&[d, d], d, rng),
            bo: DiffTensor::zeros(&[1, d]),
            ln1_gamma: DiffTensor::full(&[1, d], 1.0),
            ln1_beta: DiffTensor::zeros(&[1, d]),
            mlp_w1: DiffTensor::init_linear(&[d, hidden], d, rng),
            mlp_b1: DiffTensor::zeros(&[1, hidden]),
            mlp_w2: DiffTensor::init_linear(&[hidden, d], hidden, rng),
            mlp_b2: DiffTensor::zeros(&[1, d]),
            ln2_gamma: DiffTensor::full(&[1, d], 1.0),
            ln2_beta: DiffTensor::zeros(&[1, d]),
        }
    }
}

fn check_qkv(tape: &Tape, q: TensorId, k: TensorId, v: TensorId, heads: usize) -> Result<(usize, usize)> {
    let (n, d) = tape.value(q).dims2()?;
    for (name, id) in [("k", k), ("v", v)] {
        let (rn, rd) = tape.value(id).dims2()?;
        if (rn, rd) != (n, d) {
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: tape.value(q).shape().to_vec(),
                rhs: tape.value(id).shape().to_vec(),
            });
        }
        let _ = name;
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!(
            "attention width {d} is not divisible by {heads} heads"
        )));
    }
    Ok((n, d))
}

/// Standard `softmax(Q Kᵀ / sqrt(d_h)) V` per head, heads concatenated.
pub fn multi_head_attention_exact(
    tape: &mut Tape,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    heads: usize,
) -> Result<TensorId> {
    let (_, d) = check_qkv(tape, q, k, v, heads)?;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, scale);
        let weights = tape.softmax_rows(scaled)?;
        outs.push(tape.matmul(weights, vh)?);
    }
    tape.concat_cols(&outs)
}

/// Full block forward: `x [T x d] -> [T x d]`.
pub fn transformer_block(
    tape: &mut Tape,
    x: TensorId,
    block: &BlockBound,
    heads: usize,
    kind: AttentionKind,
) -> Result<TensorId> {
    let q = tape.matmul(x, block.wq)?;
    let k = tape.matmul(x, block.wk)?;
    let v = tape.matmul(x, block.wv)?;
    let attn = match kind {
        AttentionKind::Exact => multi_head_attention_exact(tape, q, k, v, heads)?,
        AttentionKind::Nystrom {
            landmarks,
            pinv_iters,
        } => {
            check_qkv(tape, q, k, v, heads)?;
            nystrom_multi_head_attention(tape, q, k, v, heads, landmarks, pinv_iters)?
        }
    };
    let proj = tape.linear(attn, block.wo, Some(block.bo))?;
    let res1 = tape.add(x, proj)?;
    let x1 = tape.layer_norm_rows(res1, block.ln1_gamma, block.ln1_beta, LN_EPS)?;
    let h = tape.linear(x1, block.mlp_w1, Some(block.mlp_b1))?;
    let h = tape.relu(h);
    let h = tape.linear(h, block.mlp_w2, Some(block.mlp_b2))?;
    let res2 = tape.add(x1, h)?;
    tape.layer_norm_rows(res2, block.ln2_gamma, block.ln2_beta, LN_EPS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    /// Dense triple-loop attention, written independently of the tape ops.
    fn naive_attention(q: &DiffTensor, k: &DiffTensor, v: &DiffTensor, heads: usize) -> DiffTensor {
        let (n, d) = q.dims2().unwrap();
        let dh = d / heads;
        let mut out = vec![0.0; n * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let mut weights = vec![0.0; n];
                for j in 0..n {
                    let mut dot = 0.0;
                    for c in 0..dh {
                        dot += q.data()[i * d + off + c] * k.data()[j * d + off + c];
                    }
                    weights[j] = dot / (dh as f64).sqrt();
                }
                let max = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for w in weights.iter_mut() {
                    *w = (*w - max).exp();
                    z += *w;
                }
                for j in 0..n {
                    let a = weights[j] / z;
                    for c in 0..dh {
                        out[i * d + off + c] += a * v.data()[j * d + off + c];
                    }
                }
            }
        }
        DiffTensor::from_vec(&[n, d], out).unwrap()
    }

    fn rand_t(shape: &[usize], stream: u64) -> DiffTensor {
        let mut rng = substream(41, "attention-test", stream);
        DiffTensor::rand_uniform(shape, -1.0, 1.0, &mut rng)
    }

    #[test]
    fn zero_values_give_zero_output() {
        let mut tape = Tape::new();
        let q = tape.constant(rand_t(&[4, 4], 0));
        let k = tape.constant(rand_t(&[4, 4], 1));
        let v = tape.constant(DiffTensor::zeros(&[4, 4]));
        let out = multi_head_attention_exact(&mut tape, q, k, v, 2).unwrap();
        assert!(tape.value(out).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_token_returns_its_value_row() {
        let mut tape = Tape::new();
        let q = tape.constant(rand_t(&[1, 4], 2));
        let k = tape.constant(rand_t(&[1, 4], 3));
        let vt = rand_t(&[1, 4], 4);
        let v = tape.constant(vt.clone());
        let out = multi_head_attention_exact(&mut tape, q, k, v, 2).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(vt.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_dense_loop_oracle() {
        let mut tape = Tape::new();
        let qt = rand_t(&[6, 4], 5);
        let kt = rand_t(&[6, 4], 6);
        let vt = rand_t(&[6, 4], 7);
        let q = tape.constant(qt.clone());
        let k = tape.constant(kt.clone());
        let v = tape.constant(vt.clone());
        let out = multi_head_attention_exact(&mut tape, q, k, v, 2).unwrap();
        let oracle = naive_attention(&qt, &kt, &vt, 2);
        for (a, b) in tape.value(out).data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn indivisible_heads_is_a_config_error() {
        let mut tape = Tape::new();
        let q = tape.constant(rand_t(&[3, 4], 8));
        let k = tape.constant(rand_t(&[3, 4], 9));
        let v = tape.constant(rand_t(&[3, 4], 10));
        assert!(matches!(
            multi_head_attention_exact(&mut tape, q, k, v, 3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        use crate::gradcheck::grad_check;
        use crate::params::ParamSet;

        let mut rng = substream(41, "attention-test", 20);
        let block = BlockParams::init(4, &mut rng);
        let x = rand_t(&[5, 4], 21);
        let mut params: Vec<(String, DiffTensor)> = Vec::new();
        block.for_each(&mut |name, t| params.push((name.to_string(), t.clone())));
        params.push(("x".into(), x));

        let report = grad_check(&mut params, 1e-5, 1e-6, None, |tape, ids| {
            let bound = BlockBound {
                wq: ids[0],
                wk: ids[1],
                wv: ids[2],
                wo: ids[3],
                bo: ids[4],
                ln1_gamma: ids[5],
                ln1_beta: ids[6],
                mlp_w1: ids[7],
                mlp_b1: ids[8],
                mlp_w2: ids[9],
                mlp_b2: ids[10],
                ln2_gamma: ids[11],
                ln2_beta: ids[12],
            };
            let y = transformer_block(tape, ids[13], &bound, 2, AttentionKind::Exact)?;
            tape.sq_sum(y)
        })
        .unwrap();
        assert!(report.passed, "\n{}", report.summary());
    }
}
