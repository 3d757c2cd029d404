use fscil_core::classifier::{cross_entropy, softmax, ClassifierWeights};
use fscil_core::data::ClassId;
use fscil_core::numeric::DenseArray;
use fscil_core::training::episode_losses;
use proptest::prelude::*;

fn ids(n: usize, offset: usize) -> Vec<ClassId> {
    (0..n).map(|i| ClassId(i + offset)).collect()
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0..4.0f64, n).prop_map(|z| softmax(&z))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn uniform_prediction_costs_ln_classes(c in 2usize..40, d in 1usize..6, f in prop::collection::vec(-3.0..3.0f64, 6), label in 0usize..40) {
        let f = &f[..d];
        let row: Vec<f64> = (0..d).map(|j| 0.5 + j as f64).collect();
        let student = ClassifierWeights::new(DenseArray::from_rows(&vec![row.clone(); c]).unwrap(), ids(c, 0), 10.0).unwrap();
        let teacher = ClassifierWeights::new(DenseArray::from_rows(&vec![row; c.min(3)]).unwrap(), ids(c.min(3), 0), 10.0).unwrap();
        let l = episode_losses(&teacher, &student, &[(f, ClassId(label % c))]).unwrap();
        prop_assert!((l.cls - (c as f64).ln()).abs() <= 1e-9);
    }

    #[test]
    fn cross_entropy_meets_teacher_entropy_only_at_equality(p in (2usize..10).prop_flat_map(distribution)) {
        let h = entropy(&p);
        prop_assert!((cross_entropy(&p, &p).unwrap() - h).abs() <= 1e-9);
        let mut q = p.clone();
        q.rotate_left(1);
        let kl = cross_entropy(&q, &p).unwrap() - h;
        let differs = p.iter().zip(&q).any(|(a, b)| (a - b).abs() > 1e-6);
        prop_assert!(kl >= -1e-12);
        if differs {
            prop_assert!(kl > 0.0);
        }
    }
}

#[test]
fn distillation_equals_teacher_entropy_when_student_copies_teacher() {
    let w = DenseArray::from_rows(&[vec![1.0, 0.2, 0.0], vec![0.1, 1.0, -0.3], vec![-0.5, 0.5, 0.9]]).unwrap();
    let teacher = ClassifierWeights::new(w.clone(), ids(3, 0), 10.0).unwrap();
    let extra = DenseArray::concat_rows(&[&w, &DenseArray::vector(vec![0.3, -0.2, 0.4])]).unwrap();
    let student = ClassifierWeights::new(extra, ids(4, 0), 10.0).unwrap();
    let qs: Vec<[f64; 3]> = vec![[0.4, 0.9, 0.1], [-1.0, 0.3, 0.5], [0.2, -0.2, 1.0]];
    let queries: Vec<(&[f64], ClassId)> = qs.iter().map(|q| (q.as_slice(), ClassId(1))).collect();
    let l = episode_losses(&teacher, &student, &queries).unwrap();
    let mean_h = qs.iter().map(|q| entropy(&teacher.predict(q).unwrap())).sum::<f64>() / qs.len() as f64;
    assert!((l.distil - mean_h).abs() <= 1e-9, "{} vs {mean_h}", l.distil);

    let shifted = DenseArray::concat_rows(&[&w.select_rows(&[1, 2, 0]).unwrap(), &DenseArray::vector(vec![0.3, -0.2, 0.4])]).unwrap();
    let other = ClassifierWeights::new(shifted, ids(4, 0), 10.0).unwrap();
    let l2 = episode_losses(&teacher, &other, &queries).unwrap();
    assert!(l2.distil > mean_h + 1e-6);
}
