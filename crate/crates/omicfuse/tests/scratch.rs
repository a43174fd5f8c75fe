use omicfuse::nystrom::{nystrom_multi_head_attention, pinv_newton_schulz};
use omicfuse::attention::multi_head_attention_exact;
use omicfuse::rng::substream;
use omicfuse::tensor::{max_abs_diff, DiffTensor};
use omicfuse::Tape;
use rand::Rng;

fn row_stochastic(n: usize, stream: u64) -> DiffTensor {
    let mut rng = substream(57, "nystrom-test-stoch", stream);
    let mut data = vec![0.0; n * n];
    for row in data.chunks_mut(n) {
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = rng.random_range(0.0..1.0);
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    DiffTensor::from_vec(&[n, n], data).unwrap()
}

#[test]
fn probe_pinv_residuals() {
    for stream in 0..30 {
        let a = row_stochastic(8, stream);
        let mut tape = Tape::new();
        let aid = tape.constant(a.clone());
        let p = pinv_newton_schulz(&mut tape, aid, 15).unwrap();
        let ap = tape.matmul(aid, p).unwrap();
        let apa = tape.matmul(ap, aid).unwrap();
        println!("stream={stream}: residual {:.2e}", max_abs_diff(tape.value(apa), &a));
    }
}

#[test]
fn probe_small_m_equals_t() {
    // the unit-test config: T=8, d=4, heads=2 (d_h = 2)
    for &spread in &[2.0f64, 3.0, 4.0] {
        let mut errs = vec![];
        for seed in 0..20u64 {
            let mut rng = substream(99, "probe-small", seed);
            let q = DiffTensor::rand_uniform(&[8, 4], -spread, spread, &mut rng);
            let v = DiffTensor::rand_uniform(&[8, 4], -1.0, 1.0, &mut rng);
            let mut tape = Tape::new();
            let qid = tape.constant(q.clone());
            let kid = tape.constant(q);
            let vid = tape.constant(v);
            let approx = nystrom_multi_head_attention(&mut tape, qid, kid, vid, 2, 8, 15).unwrap();
            let exact = multi_head_attention_exact(&mut tape, qid, kid, vid, 2).unwrap();
            errs.push(max_abs_diff(tape.value(approx), tape.value(exact)));
        }
        let pass = errs.iter().filter(|&&r| r < 1e-3).count();
        errs.sort_by(f64::total_cmp);
        println!(
            "small spread={spread}: pass {pass}/20, min {:.2e}, med {:.2e}, max {:.2e}",
            errs[0], errs[10], errs[19]
        );
    }
}

#[test]
fn probe_m_equals_t_recovery() {
    // variant A: independent q, k with various spreads; variant B: q == k
    for &spread in &[1.0f64, 2.0, 3.0] {
        for qk_same in [false, true] {
            let t = 32;
            let d = 16;
            let mut errs = vec![];
            for seed in 0..20u64 {
                let mut rng = substream(99, "probe", seed);
                let q = DiffTensor::rand_uniform(&[t, d], -spread, spread, &mut rng);
                let k = if qk_same {
                    q.clone()
                } else {
                    DiffTensor::rand_uniform(&[t, d], -spread, spread, &mut rng)
                };
                let v = DiffTensor::rand_uniform(&[t, d], -1.0, 1.0, &mut rng);
                let mut tape = Tape::new();
                let qid = tape.constant(q);
                let kid = tape.constant(k);
                let vid = tape.constant(v);
                let approx =
                    nystrom_multi_head_attention(&mut tape, qid, kid, vid, 1, t, 15).unwrap();
                let exact = multi_head_attention_exact(&mut tape, qid, kid, vid, 1).unwrap();
                errs.push(max_abs_diff(tape.value(approx), tape.value(exact)));
            }
            let pass = errs.iter().filter(|&&r| r < 1e-3).count();
            errs.sort_by(f64::total_cmp);
            println!(
                "spread={spread} qk_same={qk_same}: pass {pass}/20, min {:.2e}, med {:.2e}, max {:.2e}",
                errs[0], errs[10], errs[19]
            );
        }
    }
}
