use fscil_core::backbone::{Backbone, BackboneConfig, Embedding};
use fscil_core::classifier::ClassifierWeights;
use fscil_core::data::{split_classes, ClassId, ClassSplit, Dataset, Domain, ImageShape, Item, SplitCounts, SupportDomain};
use fscil_core::eval::{acc_both, acc_novel, base_accuracy, both_accuracy, novel_accuracy, run_matrix, EvalConfig, EvalContext, MatrixEntry, Metric};
use fscil_core::data::SplitPart;
use fscil_core::generator::{GeneratorConfig, WeightGenerator, V_A, V_B, V_C};
use fscil_core::model::{EmbeddingTable, Model};
use fscil_core::numeric::{DenseArray, ParameterSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const D: usize = 16;
const CLASSES: usize = 30;
const PER: usize = 80;

struct World {
    dataset: Dataset,
    split: ClassSplit,
    table: EmbeddingTable,
    centres: Vec<Vec<f64>>,
}

/// Items whose embeddings are `centre + noise` (or pure noise when `noise_only`).
fn world(noise: f64, noise_only: bool, seed: u64) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let centres: Vec<Vec<f64>> = (0..CLASSES).map(|_| (0..D).map(|_| normal.sample(&mut rng)).collect()).collect();
    let mut items = Vec::new();
    let mut embs = Vec::new();
    for (c, centre) in centres.iter().enumerate() {
        for domain in Domain::ALL {
            for _ in 0..PER {
                items.push(Item { image: DenseArray::zeros(&[4, 4, 3]), label: ClassId(c), domain });
                let e: Vec<f64> = (0..D)
                    .map(|j| if noise_only { 0.0 } else { centre[j] } + noise * normal.sample(&mut rng))
                    .collect();
                embs.push(e);
            }
        }
    }
    let dataset = Dataset::new((0..CLASSES).map(|c| format!("c{c}")).collect(), items, ImageShape::square(4));
    let split = split_classes(&dataset, SplitCounts { base: 10, val: 5, novel: 15 }, 0).unwrap();
    let mut table = EmbeddingTable::new(dataset.len());
    for (i, e) in embs.into_iter().enumerate() {
        table.set(i, Embedding(DenseArray::vector(e))).unwrap();
    }
    World { dataset, split, table, centres }
}

fn model(w: &World, base_rows: Vec<Vec<f64>>, v_c_zero: bool, seed: u64) -> Model {
    let cfg = BackboneConfig { input: ImageShape::square(4), widths: vec![2], kernel: 3, embedding_dim: D, ..Default::default() };
    let backbone = Backbone::new(cfg, 0).unwrap().freeze();
    let base = ClassifierWeights::new(DenseArray::from_rows(&base_rows).unwrap(), w.split.base.clone(), 10.0).unwrap();
    let gcfg = GeneratorConfig { dim: D, attention_init: 1.0, message_init: 1.0, ..Default::default() };
    let mut generator = WeightGenerator::new(gcfg.clone(), seed).unwrap();
    if v_c_zero {
        let mut p = ParameterSet::new();
        p.insert(V_A, generator.params().get(V_A).unwrap().clone());
        p.insert(V_B, generator.params().get(V_B).unwrap().clone());
        p.insert(V_C, DenseArray::zeros(&[D, D]));
        generator = WeightGenerator::from_params(gcfg, p).unwrap();
    }
    Model { backbone, base, generator }
}

fn oracle(w: &World) -> Model {
    model(w, w.split.base.iter().map(|c| w.centres[c.0].clone()).collect(), true, 1)
}

fn cfg(episodes: usize, seeds: Vec<u64>) -> EvalConfig {
    EvalConfig { n_episodes: episodes, seeds, ..Default::default() }
}

#[test]
fn oracle_classifier_is_nearly_perfect() {
    let w = world(0.3, false, 1);
    let m = oracle(&w);
    let c = cfg(100, vec![0]);
    assert!(novel_accuracy(&m, &w.table, &w.dataset, &w.split, SplitPart::Novel, &c, 0).unwrap() > 0.9);
    let base = base_accuracy(&m, &w.table, &w.dataset, &w.split, &c, 0).unwrap();
    assert!(base.after > 0.9 && base.before > 0.9, "{base:?}");
    let both = both_accuracy(&m, &w.table, &w.dataset, &w.split, &c, 0).unwrap();
    assert!(both.both > 0.9, "{both:?}");
}

/// |acc − p| ≤ 3σ for `trials` Bernoulli(p) draws.
fn within_three_sigma(acc: f64, p: f64, trials: usize) -> bool {
    (acc - p).abs() <= 3.0 * (p * (1.0 - p) / trials as f64).sqrt()
}

#[test]
fn noise_embeddings_score_at_chance() {
    let w = world(1.0, true, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let base_rows = (0..10).map(|_| (0..D).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let m = model(&w, base_rows, true, 4);
    let c = cfg(600, vec![0]);
    let novel = novel_accuracy(&m, &w.table, &w.dataset, &w.split, SplitPart::Novel, &c, 0).unwrap();
    assert!(within_three_sigma(novel, 1.0 / 5.0, 600 * 75), "novel {novel}");
}

/// The fixed random base rows make trials within one model correlated, so the
/// joint-space check averages independent models and uses their spread.
#[test]
fn noise_embeddings_score_at_joint_chance() {
    let runs: Vec<f64> = (0..20u64)
        .map(|s| {
            let w = world(1.0, true, 100 + s);
            let mut rng = ChaCha8Rng::seed_from_u64(200 + s);
            let base_rows = (0..10).map(|_| (0..D).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let m = model(&w, base_rows, true, s);
            both_accuracy(&m, &w.table, &w.dataset, &w.split, &cfg(100, vec![0]), s).unwrap().both
        })
        .collect();
    let n = runs.len() as f64;
    let mean = runs.iter().sum::<f64>() / n;
    let sd = (runs.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((mean - 0.1).abs() <= 3.0 * sd / n.sqrt(), "mean {mean}, sd {sd}");
}

#[test]
fn repeated_runs_produce_identical_reports() {
    let w = world(0.8, false, 5);
    let m = oracle(&w);
    let ctx = EvalContext { model: &m, table: &w.table, dataset: &w.dataset, split: &w.split, checkpoint_hash: "abc".into() };
    let c = EvalConfig { support_domain: SupportDomain::Mixed, ..cfg(30, vec![0, 1, 2]) };
    let (a, b) = (acc_both(&ctx, &c).unwrap(), acc_both(&ctx, &c).unwrap());
    assert_eq!(a.to_text(), b.to_text());
    assert_eq!(a.to_csv(), b.to_csv());
    let other = acc_both(&ctx, &EvalConfig { seeds: vec![0, 1, 3], ..c.clone() }).unwrap();
    assert_eq!(a.per_seed[..2], other.per_seed[..2]);
    assert_ne!(a.per_seed[2], other.per_seed[2]);
    let n = acc_novel(&ctx, &c).unwrap();
    assert!(n.per_seed.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn matrix_covers_every_model_shot_and_seed() {
    let w = world(0.8, false, 6);
    let full = oracle(&w);
    let other = model(&w, w.split.base.iter().map(|c| w.centres[c.0].clone()).collect(), false, 9);
    let entries = [
        MatrixEntry { label: "full".into(), model: &full, table: &w.table },
        MatrixEntry { label: "variant".into(), model: &other, table: &w.table },
    ];
    let c = cfg(10, (0..5).collect());
    let m = run_matrix(&entries, &[Metric::Novel, Metric::Both], &[1, 5], &c, &w.dataset, &w.split).unwrap();
    assert_eq!(m.rows.len(), 20);
    assert!(m.rows.iter().all(|r| r.novel.is_some() && r.both.is_some() && r.base.is_none()));
    assert_eq!(m.to_csv().lines().count(), 21);
    assert!(m.mean("full", 5, Metric::Novel).unwrap() >= m.mean("full", 1, Metric::Novel).unwrap() - 0.05);
    assert!(m.mean("missing", 5, Metric::Novel).is_none());
}

