use fscil_core::data::{generate_synthetic, sample_episode, split_classes, ClassId, Dataset, Domain, ImageShape, Item, SplitCounts, SplitPart, SupportDomain, SyntheticSpec};
use fscil_core::numeric::DenseArray;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Grayscale darkness minus the image's own mean: a fixed, untrained map
/// under which a filled silhouette and its traced outline overlap.
fn features(img: &DenseArray) -> Vec<f64> {
    let gray: Vec<f64> = img.values().chunks(3).map(|p| 1.0 - (p[0] + p[1] + p[2]) / 3.0).collect();
    let m = gray.iter().sum::<f64>() / gray.len() as f64;
    let centred: Vec<f64> = gray.iter().map(|g| g - m).collect();
    let n = centred.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    centred.iter().map(|x| x / n).collect()
}

/// Multinomial logistic regression by full-batch gradient descent.
fn fit(xs: &[Vec<f64>], ys: &[usize], classes: usize) -> Vec<Vec<f64>> {
    let d = xs[0].len() + 1;
    let mut w = vec![vec![0.0; d]; classes];
    for _ in 0..300 {
        let mut grad = vec![vec![0.0; d]; classes];
        for (x, &y) in xs.iter().zip(ys) {
            let p = probs(&w, x);
            for c in 0..classes {
                let e = p[c] - f64::from(u8::from(c == y));
                for j in 0..d - 1 {
                    grad[c][j] += e * x[j];
                }
                grad[c][d - 1] += e;
            }
        }
        for c in 0..classes {
            for j in 0..d {
                w[c][j] -= 2.0 * grad[c][j] / xs.len() as f64;
            }
        }
    }
    w
}

fn probs(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let z: Vec<f64> = w.iter().map(|r| r[..x.len()].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + r[x.len()]).collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

#[test]
fn photo_trained_probe_transfers_to_sketches() {
    let classes = 10;
    let ds = generate_synthetic(&SyntheticSpec { classes, per_class_per_domain: 40, image_size: 16, seed: 21 }).unwrap();
    let collect = |domain: Domain| {
        let idx: Vec<usize> = (0..classes).flat_map(|c| ds.indices(ClassId(c), domain).to_vec()).collect();
        let xs: Vec<Vec<f64>> = idx.iter().map(|&i| features(&ds.item(i).image)).collect();
        let ys: Vec<usize> = idx.iter().map(|&i| ds.item(i).label.0).collect();
        (xs, ys)
    };
    let (px, py) = collect(Domain::Photo);
    let (sx, sy) = collect(Domain::Sketch);
    let w = fit(&px, &py, classes);
    let correct = sx
        .iter()
        .zip(&sy)
        .filter(|(x, &y)| {
            let p = probs(&w, x);
            (0..classes).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap() == y
        })
        .count();
    let n = sy.len() as f64;
    let acc = correct as f64 / n;
    let chance = 1.0 / classes as f64;
    let sigma = (chance * (1.0 - chance) / n).sqrt();
    assert!(acc > chance + 3.0 * sigma, "sketch accuracy {acc} vs chance {chance} + 3σ {}", 3.0 * sigma);
}

fn tiny_dataset(classes: usize, per: usize) -> Dataset {
    let shape = ImageShape::square(2);
    let names = (0..classes).map(|c| format!("c{c:03}")).collect();
    let items = (0..classes)
        .flat_map(|c| {
            Domain::ALL.into_iter().flat_map(move |domain| {
                (0..per).map(move |i| Item { image: DenseArray::filled(&[2, 2, 3], (c * per + i) as f64 / 1e4), label: ClassId(c), domain })
            })
        })
        .collect();
    Dataset::new(names, items, shape)
}

#[test]
fn sketchy_sized_split_has_the_published_shape() {
    let ds = tiny_dataset(125, 5);
    let split = split_classes(&ds, SplitCounts { base: 64, val: 40, novel: 21 }, 3).unwrap();
    assert_eq!((split.base.len(), split.val.len(), split.novel.len()), (64, 40, 21));
    assert!(split.is_disjoint());
    let mut all: Vec<ClassId> = split.base.iter().chain(&split.val).chain(&split.novel).copied().collect();
    all.sort();
    assert_eq!(all, (0..125).map(ClassId).collect::<Vec<_>>());
}

#[test]
fn episode_counts_follow_way_shot_and_query() {
    let ds = tiny_dataset(30, 25);
    let split = split_classes(&ds, SplitCounts { base: 10, val: 5, novel: 15 }, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (k, support) in [(5, SupportDomain::Sketch), (1, SupportDomain::Sketch), (5, SupportDomain::Photo)] {
        let ep = sample_episode(&ds, &split, SplitPart::Novel, 5, k, 15, support, &mut rng).unwrap();
        assert_eq!(ep.support_flat().count(), 5 * k);
        assert_eq!(ep.query.len(), 75);
        let want = if support == SupportDomain::Photo { Domain::Photo } else { Domain::Sketch };
        assert!(ep.support_flat().all(|i| ds.item(i).domain == want));
        assert!(ep.query.iter().all(|&(i, _)| ds.item(i).domain == Domain::Photo));
        let mut used: Vec<usize> = ep.support_flat().chain(ep.query.iter().map(|q| q.0)).collect();
        let n = used.len();
        used.sort();
        used.dedup();
        assert_eq!(used.len(), n);
    }
}
