mod common;

use common::{naive_am, naive_ram, random_batch, random_sized_batch, rel_close, rng};
use marginlab::losses::*;
use marginlab::numerics::Matrix;
use proptest::prelude::*;

fn cfg(variant: LossVariant, m: f64, s: f64) -> MarginConfig<f64> {
    MarginConfig::new(variant, m, s).unwrap()
}

fn batch_strategy(max_n: usize, max_c: usize) -> impl Strategy<Value = LabeledLogits<f64>> {
    (1..=max_n, 2..=max_c).prop_flat_map(|(n, c)| {
        (
            prop::collection::vec(-1.0f64..=1.0, n * c),
            prop::collection::vec(0..c, n),
        )
            .prop_map(move |(v, y)| {
                LabeledLogits::new(Matrix::from_vec(n, c, v).unwrap(), y).unwrap()
            })
    })
}

#[test]
fn softmax_matches_direct_oracle() {
    let mut r = rng(42);
    let data = random_batch(&mut r, 4, 5, 1.0);
    let out = softmax_ce(&data, &MarginConfig::softmax(2.0).unwrap());
    assert!(rel_close(out.value, naive_am(&data, 0.0, 2.0), 1e-13));
}

#[test]
fn am_matches_direct_oracle() {
    let mut r = rng(3);
    for _ in 0..20 {
        let data = random_sized_batch(&mut r, 8, 10, 1.0);
        for (m, s) in [(0.2, 30.0), (0.35, 1.0), (0.1, 10.0)] {
            let got = am_softmax(&data, &cfg(LossVariant::Am, m, s)).value;
            let want = naive_am(&data, m, s);
            assert!(
                (got - want).abs() <= 1e-12 * want + 1e-15,
                "{got} vs {want}"
            );
        }
    }
}

#[test]
fn ram_matches_direct_oracle() {
    let mut r = rng(5);
    for _ in 0..20 {
        let data = random_sized_batch(&mut r, 8, 10, 1.0);
        let got = ram_softmax(&data, &cfg(LossVariant::Ram, 0.3, 30.0)).value;
        assert!(rel_close(got, naive_ram(&data, 0.3, 30.0), 1e-12));
    }
}

#[test]
fn zero_floor_is_literal_minus_log_c_when_satisfied() {
    let z = Matrix::from_rows(&[[0.9, -0.5, 0.1, 0.0], [-0.2, -0.9, 0.7, -0.8]]).unwrap();
    let data = LabeledLogits::new(z, vec![0, 2]).unwrap();
    let lit = ram_softmax(&data, &cfg(LossVariant::Ram, 0.2, 30.0));
    let zero = ram_softmax(
        &data,
        &cfg(LossVariant::Ram, 0.2, 30.0).with_floor_mode(FloorMode::ZeroFloor),
    );
    assert_eq!(lit.value, 4f64.ln());
    assert_eq!(zero.value, 0.0);
    assert!(lit.grad.as_slice().iter().all(|&g| g == 0.0));
    assert!(zero.grad.as_slice().iter().all(|&g| g == 0.0));
}

#[test]
fn logit_gradient_examples() {
    let mut r = rng(11);
    let data = random_batch(&mut r, 4, 6, 1.0);
    let e = loss_gradient_check(&data, &MarginConfig::softmax(1.0).unwrap(), 1e-5).unwrap();
    assert!(e < 1e-5, "{e}");
    let data = random_batch(&mut r, 4, 6, 0.2);
    let e = loss_gradient_check(&data, &cfg(LossVariant::Am, 0.2, 30.0), 1e-5).unwrap();
    assert!(e < 1e-5, "{e}");
}

#[test]
fn ram_satisfied_region_is_flat_under_finite_differences() {
    let z = Matrix::from_rows(&[[0.8, -0.3, 0.2], [0.1, 0.9, -0.6]]).unwrap();
    let data = LabeledLogits::new(z, vec![0, 1]).unwrap();
    let c = cfg(LossVariant::Ram, 0.3, 30.0);
    let out = ram_softmax(&data, &c);
    assert!(out.grad.as_slice().iter().all(|&g| g == 0.0));
    let e = loss_gradient_check(&data, &c, 1e-6).unwrap();
    assert!(e <= 1e-9, "{e}");
}

#[test]
fn asymptotic_limits() {
    let z = Matrix::from_rows(&[[10.0, 0.0, 0.0, 0.0]]).unwrap();
    let easy = LabeledLogits::unbounded(z, vec![0]).unwrap();
    let ratio = am_softmax_reformulated(&easy, &cfg(LossVariant::AmReformulated, 0.5, 1.0)).value
        / am_softmax_reformulated(&easy, &cfg(LossVariant::AmReformulated, 0.0, 1.0)).value;
    let e = 0.5f64.exp();
    assert!(ratio >= 0.99 * e && ratio <= 1.01 * e, "{ratio}");

    let z = Matrix::from_rows(&[[-10.0, 0.0, 0.0, 0.0]]).unwrap();
    let hard = LabeledLogits::unbounded(z, vec![0]).unwrap();
    let diff = am_softmax_reformulated(&hard, &cfg(LossVariant::AmReformulated, 0.5, 1.0)).value
        - am_softmax_reformulated(&hard, &cfg(LossVariant::AmReformulated, 0.0, 1.0)).value;
    assert!((diff - 0.5).abs() <= 1e-3, "{diff}");
}

#[test]
fn hard_sample_approximation() {
    let z = Matrix::from_rows(&[[-6.0, 0.0, 0.0]]).unwrap();
    let data = LabeledLogits::unbounded(z, vec![0]).unwrap();
    let rep = hardness_report(&data, &cfg(LossVariant::Am, 0.5, 1.0), 0.99, 0.5).unwrap();
    assert_eq!(rep.samples[0].set, HardnessSet::Hard);
    assert!(rep.samples[0].approx_error.unwrap() < 1e-2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn equivalence_chain(data in batch_strategy(16, 32), m in 0.0f64..=0.5, s in 0.5f64..=40.0) {
        let direct = am_softmax(&data, &cfg(LossVariant::Am, m, s)).value;
        let reform = am_softmax_reformulated(&data, &cfg(LossVariant::AmReformulated, m, s)).value;
        let fact = am_softmax_factored(&data, &cfg(LossVariant::AmFactored, m, s)).value;
        prop_assert!(rel_close(direct, reform, 1e-10), "{} {}", direct, reform);
        prop_assert!(rel_close(reform, fact, 1e-10), "{} {}", reform, fact);
    }

    #[test]
    fn equivalent_gradients(data in batch_strategy(8, 12), m in 0.0f64..=0.5, s in 0.5f64..=40.0) {
        let a = am_softmax(&data, &cfg(LossVariant::Am, m, s)).grad;
        let b = am_softmax_reformulated(&data, &cfg(LossVariant::AmReformulated, m, s)).grad;
        let c = am_softmax_factored(&data, &cfg(LossVariant::AmFactored, m, s)).grad;
        for ((x, y), z) in a.as_slice().iter().zip(b.as_slice()).zip(c.as_slice()) {
            prop_assert!((x - y).abs() <= 1e-12 * s && (y - z).abs() <= 1e-12 * s);
        }
    }

    #[test]
    fn softmax_recovery(data in batch_strategy(16, 32)) {
        let base = softmax_ce(&data, &MarginConfig::softmax(1.0).unwrap()).value;
        for v in [LossVariant::Am, LossVariant::AmReformulated, LossVariant::AmFactored] {
            let am = evaluate(&data, &cfg(v, 0.0, 1.0)).value;
            prop_assert!((am - base).abs() <= 1e-12);
        }
    }

    #[test]
    fn outputs_finite_non_negative_and_rows_balanced(data in batch_strategy(8, 12), m in 0.0f64..=2.0, s in 0.1f64..=64.0) {
        for v in LossVariant::ALL {
            let out = evaluate(&data, &cfg(v, m, s));
            prop_assert!(out.value.is_finite() && out.value >= 0.0);
            prop_assert!(out.grad.is_finite());
            if v != LossVariant::Ram {
                for row in out.grad.row_iter() {
                    prop_assert!(row.iter().sum::<f64>().abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn raising_target_lowers_loss(data in batch_strategy(6, 8), i in 0usize..6, m in 0.0f64..=0.5, s in 0.5f64..=8.0) {
        let i = i % data.num_samples();
        let y = data.labels()[i];
        let mut z = data.logits().clone();
        prop_assume!(z[(i, y)] < 0.9);
        z[(i, y)] += 0.1;
        let up = LabeledLogits::new(z, data.labels().to_vec()).unwrap();
        for v in LossVariant::ALL {
            let c = cfg(v, m, s);
            let before = evaluate(&data, &c).value;
            let after = evaluate(&up, &c).value;
            if v == LossVariant::Ram {
                prop_assert!(after <= before);
                let zi = data.logits().row(i);
                let violated = (0..zi.len()).any(|j| j != y && zi[y] - zi[j] < m);
                if violated {
                    prop_assert!(after < before);
                }
            } else {
                prop_assert!(after < before);
            }
        }
    }

    #[test]
    fn non_target_permutation_invariance(data in batch_strategy(6, 8), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let c = data.num_classes();
        let mut perm: Vec<usize> = (0..c).collect();
        perm.shuffle(&mut rng(seed));
        // column k of the permuted matrix is column perm[k] of the original
        let z = data.logits();
        let mut pz = Matrix::zeros(z.rows(), c);
        for i in 0..z.rows() {
            for k in 0..c {
                pz[(i, k)] = z[(i, perm[k])];
            }
        }
        let labels: Vec<usize> = data
            .labels()
            .iter()
            .map(|&y| perm.iter().position(|&p| p == y).unwrap())
            .collect();
        let permuted = LabeledLogits::new(pz, labels).unwrap();
        for v in LossVariant::ALL {
            let c = cfg(v, 0.2, 30.0);
            let a = evaluate(&data, &c).value;
            let b = evaluate(&permuted, &c).value;
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }
    }

    #[test]
    fn ram_sparsity_and_floor(data in batch_strategy(8, 12), m in 0.0f64..=0.5, s in 0.5f64..=40.0) {
        let c = cfg(LossVariant::Ram, m, s);
        let lit = ram_softmax(&data, &c);
        let zero = ram_softmax(&data, &c.with_floor_mode(FloorMode::ZeroFloor));
        let z = data.logits();
        for (i, &y) in data.labels().iter().enumerate() {
            for j in 0..z.cols() {
                if j != y && z[(i, y)] - z[(i, j)] > m {
                    prop_assert_eq!(lit.grad[(i, j)], 0.0);
                    prop_assert_eq!(zero.grad[(i, j)], 0.0);
                }
            }
        }
        prop_assert!(lit.value >= (data.num_classes() as f64).ln() * (1.0 - 1e-15));
        prop_assert!(zero.value >= 0.0);
    }

    #[test]
    fn ram_equals_am_when_all_violated(n in 1usize..8, c in 2usize..12, seed in any::<u64>(), s in 0.5f64..=40.0) {
        use rand::Rng;
        let mut r = rng(seed);
        // target logit at or below every non-target, and m > 0, so Δ − m < 0 everywhere
        let m = 0.25;
        let mut z = Matrix::zeros(n, c);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = r.random_range(0..c);
            labels.push(y);
            let target = r.random_range(-1.0..0.0);
            for j in 0..c {
                z[(i, j)] = if j == y { target } else { r.random_range(target..=1.0) };
            }
        }
        let data = LabeledLogits::new(z, labels).unwrap();
        let ram = ram_softmax(&data, &cfg(LossVariant::Ram, m, s));
        let am = am_softmax_reformulated(&data, &cfg(LossVariant::AmReformulated, m, s));
        prop_assert_eq!(ram.value, am.value);
        prop_assert_eq!(ram.grad, am.grad);
    }

    #[test]
    fn logit_gradients_match_finite_differences(data in batch_strategy(6, 8), m in 0.0f64..=0.35, s in 0.5f64..=2.0) {
        for v in LossVariant::ALL {
            let e = loss_gradient_check(&data, &cfg(v, m, s), 1e-5).unwrap();
            prop_assert!(e <= 1e-5, "{:?} {}", v, e);
        }
    }
}
