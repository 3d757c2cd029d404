use fscil_core::classifier::{softmax, ClassifierWeights};
use fscil_core::data::ClassId;
use fscil_core::numeric::DenseArray;
use proptest::prelude::*;

fn weights(rows: &[Vec<f64>], scale: f64) -> ClassifierWeights {
    let ids = (0..rows.len()).map(ClassId).collect();
    ClassifierWeights::new(DenseArray::from_rows(rows).unwrap(), ids, scale).unwrap()
}

fn nonzero_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0..5.0f64, d).prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
}

fn case() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
    (1usize..8, 1usize..8).prop_flat_map(|(c, d)| (prop::collection::vec(nonzero_vec(d), c), nonzero_vec(d)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn embedding_scale_does_not_move_logits((rows, f) in case(), c in 1e-3..1e3f64) {
        let w = weights(&rows, 10.0);
        let a = w.logits(&f).unwrap();
        let scaled: Vec<f64> = f.iter().map(|x| x * c).collect();
        let b = w.logits(&scaled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn row_scale_does_not_move_logits((rows, f) in case(), cs in prop::collection::vec(1e-3..1e3f64, 8)) {
        let a = weights(&rows, 10.0).logits(&f).unwrap();
        let scaled: Vec<Vec<f64>> = rows.iter().zip(&cs).map(|(r, c)| r.iter().map(|x| x * c).collect()).collect();
        let b = weights(&scaled, 10.0).logits(&f).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn identical_rows_give_a_uniform_posterior(row in nonzero_vec(5), c in 1usize..9, f in nonzero_vec(5)) {
        let w = weights(&vec![row; c], 10.0);
        let p = softmax(&w.logits(&f).unwrap());
        for q in p {
            prop_assert!((q - 1.0 / c as f64).abs() <= 1e-12);
        }
    }
}

#[test]
fn embedding_equidistant_from_every_row_is_uniform() {
    let w = weights(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]], 10.0);
    let p = softmax(&w.logits(&[0.0, 0.0, 0.0, 2.5]).unwrap());
    assert!(p.iter().all(|&q| (q - 1.0 / 3.0).abs() <= 1e-12));
    let p = softmax(&w.logits(&[1.0, 1.0, 1.0, 0.0]).unwrap());
    assert!(p.iter().all(|&q| (q - 1.0 / 3.0).abs() <= 1e-12));
}
