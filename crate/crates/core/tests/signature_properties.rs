use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ste_core::attention::{reduced_sig, SigMode};
use ste_core::signature::{chen_product, signature, signature_backward, stream_signature};
use ste_core::{sig_dim, PiecewiseLinearPath, Tape, Tensor};

fn path(seed: u64, len: usize, d: usize) -> PiecewiseLinearPath {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..len)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    PiecewiseLinearPath::from_rows(&rows).unwrap()
}

fn rows_of(p: &PiecewiseLinearPath) -> Vec<Vec<f64>> {
    (0..p.len()).map(|t| p.point(t).to_vec()).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dimension_law(d in 1usize..=8, n in 1usize..=4) {
        let expected: usize = (1..=n as u32).map(|k| d.pow(k)).sum();
        prop_assert_eq!(sig_dim(d, n).unwrap(), expected);
        let s = signature(&path(0, 3, d), n).unwrap();
        prop_assert_eq!(s.coeffs().len(), expected);
    }

    #[test]
    fn chen_concatenation(seed: u64, d in 1usize..=3, n in 1usize..=3, la in 1usize..=5, lb in 1usize..=5) {
        let a = path(seed, la, d);
        let b_rows = {
            // b starts where a ends
            let mut r = rows_of(&path(seed ^ 1, lb, d));
            let shift: Vec<f64> = (0..d).map(|j| a.point(la - 1)[j] - r[0][j]).collect();
            for row in &mut r {
                row.iter_mut().zip(&shift).for_each(|(v, s)| *v += s);
            }
            r
        };
        let mut joined = rows_of(&a);
        joined.extend(b_rows[1..].iter().cloned());
        let whole = signature(&PiecewiseLinearPath::from_rows(&joined).unwrap(), n).unwrap();
        let b = PiecewiseLinearPath::from_rows(&b_rows).unwrap();
        let product = chen_product(&signature(&a, n).unwrap(), &signature(&b, n).unwrap()).unwrap();
        prop_assert!(max_diff(whole.coeffs(), product.coeffs()) < 1e-12);
    }

    #[test]
    fn level_two_shuffle(seed: u64, d in 1usize..=4, len in 1usize..=6) {
        let s = signature(&path(seed, len, d), 2).unwrap();
        for i in 0..d {
            for j in 0..d {
                let lhs = s.get(&[i]) * s.get(&[j]);
                let rhs = s.get(&[i, j]) + s.get(&[j, i]);
                prop_assert!((lhs - rhs).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn collinear_midpoint_is_invisible(seed: u64, d in 1usize..=3, n in 1usize..=4, len in 2usize..=5, frac in 0.0f64..1.0) {
        let p = path(seed, len, d);
        let mut rows = rows_of(&p);
        let at = 1 + (seed as usize % (len - 1));
        let mid: Vec<f64> = (0..d)
            .map(|j| rows[at - 1][j] + frac * (rows[at][j] - rows[at - 1][j]))
            .collect();
        rows.insert(at, mid);
        let refined = PiecewiseLinearPath::from_rows(&rows).unwrap();
        let a = signature(&p, n).unwrap();
        let b = signature(&refined, n).unwrap();
        prop_assert!(max_diff(a.coeffs(), b.coeffs()) < 1e-12);
    }

    #[test]
    fn stream_rows_are_prefix_signatures(seed: u64, d in 1usize..=3, n in 1usize..=3, len in 1usize..=6) {
        let p = path(seed, len, d);
        let stream = stream_signature(&p, n).unwrap();
        let rows = rows_of(&p);
        for t in 0..len {
            let prefix = PiecewiseLinearPath::from_rows(&rows[..=t]).unwrap();
            let s = signature(&prefix, n).unwrap();
            prop_assert!(max_diff(stream.row(t), s.coeffs()) < 1e-12);
        }
        let whole = signature(&p, n).unwrap();
        prop_assert_eq!(stream.row(len - 1), whole.coeffs());
    }

    #[test]
    fn backward_matches_central_differences(seed: u64, d in 1usize..=3, n in 1usize..=3, len in 1usize..=5, stream: bool) {
        let p = path(seed, len, d);
        let width = sig_dim(d, n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(99));
        let rows_up = if stream { len } else { 1 };
        let up = Tensor::uniform(&[rows_up, width], -1.0, 1.0, &mut rng);
        let up = if stream { up } else { up.reshape(vec![width]).unwrap() };
        let objective = |q: &PiecewiseLinearPath| -> f64 {
            let out: Vec<f64> = if stream {
                stream_signature(q, n).unwrap().into_data()
            } else {
                signature(q, n).unwrap().into_coeffs()
            };
            out.iter().zip(up.data()).map(|(a, b)| a * b).sum()
        };
        let analytic = signature_backward(&p, n, &up).unwrap();
        let h = 1e-6;
        let base = rows_of(&p);
        for t in 0..len {
            for j in 0..d {
                let mut plus = base.clone();
                plus[t][j] += h;
                let mut minus = base.clone();
                minus[t][j] -= h;
                let numeric = (objective(&PiecewiseLinearPath::from_rows(&plus).unwrap())
                    - objective(&PiecewiseLinearPath::from_rows(&minus).unwrap()))
                    / (2.0 * h);
                let a = analytic.get2(t, j);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
                prop_assert!(rel < 1e-4, "t={} j={} analytic={} numeric={}", t, j, a, numeric);
            }
        }
    }

    #[test]
    fn identity_reduction_is_raw_signature(seed: u64, d in 1usize..=3, n in 1usize..=3, len in 1usize..=5, stream: bool) {
        let p = path(seed, len, d);
        let mode = if stream { SigMode::Stream } else { SigMode::Pooled };
        let mut tape = Tape::new();
        let x = tape.constant(p.points());
        let w = tape.constant(&Tensor::identity(d));
        let out = reduced_sig(&mut tape, x, w, None, n, mode, true).unwrap();
        let expected = if stream {
            stream_signature(&p, n).unwrap().into_data()
        } else {
            signature(&p, n).unwrap().into_coeffs()
        };
        prop_assert!(max_diff(tape.value(out), &expected) < 1e-15);
    }
}

#[test]
fn time_reversal_inverts() {
    let p = path(3, 6, 3);
    let mut rows = rows_of(&p);
    rows.reverse();
    let back = PiecewiseLinearPath::from_rows(&rows).unwrap();
    let prod = chen_product(&signature(&p, 4).unwrap(), &signature(&back, 4).unwrap()).unwrap();
    assert!(prod.coeffs().iter().all(|v| v.abs() < 1e-12));
}
