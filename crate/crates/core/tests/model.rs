mod common;

use common::rng;
use marginlab::losses::{evaluate, LabeledLogits, LossVariant, MarginConfig};
use marginlab::model::*;
use marginlab::numerics::{cosine, cosine_logits, l2_normalize, norm, Matrix};
use proptest::prelude::*;
use rand::Rng;

fn dims(d_in: usize, hidden: usize, d_emb: usize, classes: usize) -> ModelDims {
    ModelDims {
        d_in,
        hidden,
        d_emb,
        classes,
    }
}

fn random_features(seed: u64, n: usize, d: usize) -> Matrix<f64> {
    let mut r = rng(seed);
    Matrix::from_vec(
        n,
        d,
        (0..n * d).map(|_| r.random_range(-2.0..2.0)).collect(),
    )
    .unwrap()
}

/// Straight-line forward pass, one sample at a time.
fn oracle_embed(p: &EncoderParams<f64>, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = (0..p.w1.rows())
        .map(|k| {
            let mut a = p.b1[k];
            for (i, xi) in x.iter().enumerate() {
                a += p.w1[(k, i)] * xi;
            }
            if a > 0.0 {
                a
            } else {
                0.0
            }
        })
        .collect();
    let e: Vec<f64> = (0..p.w2.rows())
        .map(|k| {
            let mut a = p.b2[k];
            for (i, hi) in h.iter().enumerate() {
                a += p.w2[(k, i)] * hi;
            }
            a
        })
        .collect();
    let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    e.iter().map(|v| v / n).collect()
}

#[test]
fn cosine_logits_match_pairwise_oracle() {
    let x = random_features(1, 7, 5);
    let mut r = rng(2);
    let w = ClassWeights::<f64>::random(4, 5, &mut r);
    let xn = Matrix::from_rows(
        &x.row_iter()
            .map(|row| l2_normalize(row).unwrap())
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let z = cosine_logits(&xn, w.matrix()).unwrap();
    for i in 0..7 {
        for j in 0..4 {
            let want = cosine(x.row(i), w.matrix().row(j)).unwrap();
            assert!((z[(i, j)] - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn forward_matches_oracle() {
    let mut model = Model::<f64>::init(dims(6, 9, 4, 3), true, 5).unwrap();
    let mut r = rng(8);
    for b in model
        .encoder
        .b1
        .iter_mut()
        .chain(model.encoder.b2.iter_mut())
    {
        *b = r.random_range(-0.5..0.5);
    }
    let x = random_features(3, 10, 6);
    let (logits, trace) = model.forward(&x).unwrap();
    for i in 0..10 {
        let want = oracle_embed(&model.encoder, x.row(i));
        for (a, b) in trace.embeddings.row(i).iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert!((norm(trace.embeddings.row(i)) - 1.0).abs() <= 1e-12);
        for j in 0..3 {
            let c = cosine(&want, model.classes.matrix().row(j)).unwrap();
            assert!((logits[(i, j)] - c).abs() <= 1e-12);
            assert!((-1.0..=1.0).contains(&logits[(i, j)]));
        }
    }
}

#[test]
fn logit_of_own_embedding_and_orthogonal_row() {
    let model = Model::<f64>::init(dims(4, 6, 2, 2), true, 9).unwrap();
    let x = random_features(4, 1, 4);
    let e = model.embed(&x).unwrap();
    let (a, b) = (e[(0, 0)], e[(0, 1)]);
    let w = ClassWeights::from_matrix(Matrix::from_rows(&[[a, b], [-b, a]]).unwrap()).unwrap();
    let (z, _) = model_forward(&model.encoder, &w, &x).unwrap();
    assert!((z[(0, 0)] - 1.0).abs() <= 1e-12);
    assert!(z[(0, 1)].abs() <= 1e-12);
}

#[test]
fn backward_matches_finite_differences() {
    let model = Model::<f64>::init(dims(5, 7, 3, 4), true, 21).unwrap();
    let x = random_features(6, 8, 5);
    let labels = vec![0, 1, 2, 3, 0, 1, 2, 3];
    let loss = MarginConfig::new(LossVariant::Am, 0.2, 30.0).unwrap();
    let rep = marginlab::train::whole_model_grad_check(&x, &labels, &model, &loss, 1e-6).unwrap();
    assert!(rep.passes(1e-4), "{rep:?}");
    assert_eq!(rep.checked + rep.skipped, model.num_params());
}

#[test]
fn bias_gradients_vanish_without_bias() {
    let model = Model::<f64>::init(dims(3, 4, 2, 3), false, 1).unwrap();
    let x = random_features(1, 5, 3);
    let (z, trace) = model.forward(&x).unwrap();
    let out = evaluate(
        &LabeledLogits::new(z, vec![0, 1, 2, 0, 1]).unwrap(),
        &MarginConfig::softmax(1.0).unwrap(),
    );
    let g = model.backward(&trace, &out.grad).unwrap();
    assert!(g.encoder.b1.iter().chain(&g.encoder.b2).all(|&v| v == 0.0));
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let model = Model::<f64>::init(ModelDims::default(), true, 3).unwrap();
    let meta = CheckpointMeta { seed: 3, step: 17 };
    save_checkpoint(&path, &model, meta).unwrap();
    let (back, m2) = load_checkpoint::<f64>(&path).unwrap();
    assert_eq!(back, model);
    assert_eq!(m2, meta);
    assert!(load_checkpoint::<f64>(&dir.path().join("missing")).is_err());
}

proptest! {
    #[test]
    fn scale_invariance_without_bias(seed in any::<u64>(), alpha in 1e-3f64..1e3) {
        let model = Model::<f64>::init(dims(6, 8, 4, 5), false, seed).unwrap();
        let x = random_features(seed ^ 1, 4, 6);
        let scaled = x.map(|v| v * alpha);
        let (a, b) = match (model.forward(&x), model.forward(&scaled)) {
            (Ok((a, _)), Ok((b, _))) => (a, b),
            _ => return Ok(()),
        };
        for (p, q) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((p - q).abs() <= 1e-10);
        }
    }

    #[test]
    fn renormalized_rows_are_unit(rows in 1usize..8, cols in 2usize..8, seed in any::<u64>()) {
        let mut r = rng(seed);
        let w = Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-5.0..5.0)).collect()).unwrap();
        let u = renormalize_class_weights(&w).unwrap();
        for (i, row) in u.row_iter().enumerate() {
            let want = l2_normalize(w.row(i)).unwrap();
            prop_assert!((norm(row) - 1.0f64).abs() <= 1e-12);
            for (a, b) in row.iter().zip(&want) {
                prop_assert!(f64::abs(a - b) <= 1e-15);
            }
        }
    }

    #[test]
    fn embeddings_are_unit(seed in any::<u64>()) {
        let model = Model::<f64>::init(dims(5, 6, 3, 2), true, seed).unwrap();
        if let Ok(e) = model.embed(&random_features(seed, 6, 5)) {
            for row in e.row_iter() {
                prop_assert!((norm(row) - 1.0).abs() <= 1e-12);
            }
        }
    }
}
