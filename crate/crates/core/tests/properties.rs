use proptest::prelude::*;

use aeqa::data::corrupt;
use aeqa::mcqa::{argmax, choice_distribution};
use aeqa::numerics::{grad_check, softmax_rows, GradCheckConfig, ParamStore, Tensor};
use aeqa::rng::Stream;
use aeqa::tsaatt::{AcousticFrames, TsaattParams};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0..2.0f64, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (p, q, r) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        for j in 0..r {
            out[i * r + j] = (0..q).map(|k| a.get(i, k) * b.get(k, j)).sum();
        }
    }
    out
}

fn matmul_pair() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..7, 1usize..7, 1usize..7).prop_flat_map(|(p, q, r)| (matrix(p, q), matrix(q, r)))
}

fn frames(d_a: usize, m: usize) -> impl Strategy<Value = AcousticFrames> {
    prop::collection::vec(prop::collection::vec(-4.0..4.0f64, d_a), m)
        .prop_map(move |rows| AcousticFrames::from_rows(d_a, &rows).unwrap())
}

fn tsaatt_case() -> impl Strategy<Value = (TsaattParams, AcousticFrames)> {
    (1usize..7, 1usize..6, 1usize..9).prop_flat_map(|(d_a, d_t, m)| {
        (matrix(d_a, d_a), matrix(d_t, d_a), prop::collection::vec(-1.0..1.0f64, d_t), frames(d_a, m)).prop_map(
            |(w_a, w_s, b_s, f)| (TsaattParams::new(w_a, w_s, Tensor::vector(&b_s).unwrap()).unwrap(), f),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_loop_oracle((a, b) in matmul_pair()) {
        let got = a.matmul(&b).unwrap();
        let want = naive_matmul(&a, &b);
        prop_assert_eq!(got.shape(), &[a.rows(), b.cols()][..]);
        for (x, y) in got.data().iter().zip(&want) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn softmax_rows_are_distributions(
        cols in 1usize..9,
        rows in 1usize..5,
        seed in any::<u64>(),
        shift in -100.0..100.0f64,
    ) {
        let mut rng = Stream::new(seed).rng();
        let data = Tensor::randn(&[rows, cols], 3.0, &mut rng).data().to_vec();
        let p = softmax_rows(&data, cols);
        let shifted: Vec<f64> = data.iter().map(|x| x + shift).collect();
        let q = softmax_rows(&shifted, cols);
        for r in 0..rows {
            let row = &p[r * cols..(r + 1) * cols];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            for (a, b) in row.iter().zip(&q[r * cols..(r + 1) * cols]) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn choice_distribution_preserves_argmax(scores in prop::collection::vec(-30.0..30.0f64, 1..8)) {
        let p = choice_distribution(&scores);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert_eq!(argmax(&p), argmax(&scores));
    }

    #[test]
    fn composite_gradients_match_finite_differences(
        p in 1usize..5,
        q in 1usize..6,
        r in 2usize..6,
        seed in any::<u64>(),
    ) {
        let mut rng = Stream::new(seed).rng();
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::randn(&[p, q], 1.0, &mut rng), true);
        let b = store.add("b", Tensor::randn(&[q, r], 1.0, &mut rng), true);
        let gain = store.add("gain", Tensor::randn(&[r], 0.5, &mut rng), false);
        let bias = store.add("bias", Tensor::randn(&[r], 0.5, &mut rng), false);
        let target = Tensor::randn(&[p, r], 0.3, &mut rng);
        let ids = [a, b, gain, bias];
        // Layer norm over short rows is sharply curved; a finer step keeps
        // the central-difference truncation error below the tolerance.
        let cfg = GradCheckConfig { step: 1e-5, ..GradCheckConfig::default() };
        let report = grad_check(&mut store, &ids, &cfg, |g, m| {
            let h = g.matmul(m.var(a), m.var(b))?;
            let h = g.gelu(h);
            let h = g.layer_norm(h, m.var(gain), m.var(bias), 1e-5)?;
            let s = g.row_softmax(h);
            let t = g.constant(target.clone());
            g.mse(s, t)
        })
        .unwrap();
        prop_assert!(report.passed(1e-4), "{:?}", report);
    }

    #[test]
    fn attention_pooling_invariants((params, f) in tsaatt_case()) {
        let a = params.attend(&f).unwrap();
        prop_assert_eq!(a.shape(), &[f.dim(), f.frame_count()][..]);
        for i in 0..f.dim() {
            prop_assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        }
        let v = params.pool(&f, &a).unwrap();
        for i in 0..f.dim() {
            let col: Vec<f64> = (0..f.frame_count()).map(|j| f.frame(j)[i]).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v.data()[i] >= lo - 1e-12 && v.data()[i] <= hi + 1e-12);
        }
        let one = AcousticFrames::from_rows(f.dim(), &[f.frame(0).to_vec()]).unwrap();
        let a1 = params.attend(&one).unwrap();
        let v1 = params.pool(&one, &a1).unwrap();
        for (x, y) in v1.data().iter().zip(f.frame(0)) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        let special = params.encode_token(&AcousticFrames::special(f.dim())).unwrap();
        prop_assert!(special.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn corruption_keeps_length_and_specials(
        ids in prop::collection::vec(0usize..40, 0..30),
        rho in 0.0..1.0f64,
        seed in any::<u64>(),
    ) {
        let out = corrupt(&ids, rho, 40, &mut Stream::new(seed).rng());
        prop_assert_eq!(out.len(), ids.len());
        for (a, b) in ids.iter().zip(&out) {
            if *a < 5 {
                prop_assert_eq!(a, b);
            } else {
                prop_assert!((5..40).contains(b));
            }
        }
        prop_assert_eq!(corrupt(&ids, 0.0, 40, &mut Stream::new(seed).rng()), ids.clone());
        let flipped = corrupt(&ids, 1.0, 40, &mut Stream::new(seed).rng());
        prop_assert!(ids.iter().zip(&flipped).all(|(a, b)| *a < 5 || a != b));
    }
}
