use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ClassId, ClassSplit, Dataset, Domain, SplitPart};
use crate::error::{Error, Result};

/// Domain the support exemplars are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SupportDomain {
    #[default]
    Sketch,
    Photo,
    /// Each exemplar independently photo or sketch with probability ½.
    Mixed,
}

/// An n-way k-shot task: support exemplars and disjoint photo queries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub way_classes: Vec<ClassId>,
    /// Item indices grouped per way class (outer order matches `way_classes`).
    pub support: Vec<Vec<usize>>,
    /// `(item index, position in way_classes)`, class-major.
    pub query: Vec<(usize, usize)>,
}

impl Episode {
    pub fn support_flat(&self) -> impl Iterator<Item = usize> + '_ {
        self.support.iter().flatten().copied()
    }
}

/// Draws `n_way` distinct classes from `part`, then per class `k_shot` support
/// items and `q_per_class` photo queries that never overlap the support.
#[allow(clippy::too_many_arguments)]
pub fn sample_episode<R: Rng>(
    dataset: &Dataset,
    split: &ClassSplit,
    part: SplitPart,
    n_way: usize,
    k_shot: usize,
    q_per_class: usize,
    support_domain: SupportDomain,
    rng: &mut R,
) -> Result<Episode> {
    let pool = split.classes(part);
    if n_way == 0 || n_way > pool.len() {
        return Err(Error::InsufficientData(format!(
            "{n_way}-way episode requested from {} classes",
            pool.len()
        )));
    }
    let mut way_classes: Vec<ClassId> = pool.choose_multiple(rng, n_way).copied().collect();
    way_classes.shuffle(rng);
    let (support, query) = draw_items(dataset, split, part, &way_classes, k_shot, q_per_class, support_domain, rng)?;
    Ok(Episode { way_classes, support, query })
}

/// Support/query draw for a fixed list of classes.
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
fn draw_items<R: Rng>(
    dataset: &Dataset,
    split: &ClassSplit,
    part: SplitPart,
    classes: &[ClassId],
    k_shot: usize,
    q_per_class: usize,
    support_domain: SupportDomain,
    rng: &mut R,
) -> Result<(Vec<Vec<usize>>, Vec<(usize, usize)>)> {
    let mut support = Vec::with_capacity(classes.len());
    let mut query = Vec::with_capacity(classes.len() * q_per_class);
    for (pos, &class) in classes.iter().enumerate() {
        let name = &dataset.class_names()[class.0];
        let mut photos = split.items(dataset, part, class, Domain::Photo);
        let mut sketches = split.items(dataset, part, class, Domain::Sketch);
        photos.shuffle(rng);
        sketches.shuffle(rng);
        if photos.len() < q_per_class {
            return Err(Error::InsufficientData(format!(
                "class `{name}` has {} photos, {q_per_class} queries needed",
                photos.len()
            )));
        }
        let spare_photos = photos.split_off(q_per_class);
        query.extend(photos.into_iter().map(|i| (i, pos)));

        let shots = match support_domain {
            SupportDomain::Sketch => take(sketches, k_shot, name, "sketch")?,
            SupportDomain::Photo => take(spare_photos, k_shot, name, "photo")?,
            SupportDomain::Mixed => {
                let (mut p, mut s) = (spare_photos.into_iter(), sketches.into_iter());
                let mut out = Vec::with_capacity(k_shot);
                for _ in 0..k_shot {
                    let first_photo = rng.gen_bool(0.5);
                    let next = if first_photo { p.next().or_else(|| s.next()) } else { s.next().or_else(|| p.next()) };
                    out.push(next.ok_or_else(|| {
                        Error::InsufficientData(format!("class `{name}` has fewer than {k_shot} support items"))
                    })?);
                }
                out
            }
        };
        support.push(shots);
    }
    Ok((support, query))
}

fn take(mut items: Vec<usize>, k: usize, class: &str, domain: &str) -> Result<Vec<usize>> {
    if items.len() < k {
        return Err(Error::InsufficientData(format!(
            "class `{class}` has {} {domain} support items, {k} needed",
            items.len()
        )));
    }
    items.truncate(k);
    Ok(items)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::{generate_synthetic, split_classes, ItemSubset, SplitCounts, SyntheticSpec};

    fn fixture() -> (Dataset, ClassSplit) {
        let ds = generate_synthetic(&SyntheticSpec { classes: 20, per_class_per_domain: 30, image_size: 16, seed: 2 })
            .unwrap();
        let split = split_classes(&ds, SplitCounts { base: 10, val: 0, novel: 10 }, 4).unwrap();
        (ds, split)
    }

    #[test]
    fn five_way_five_shot_fifteen_queries() {
        let (ds, split) = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep = sample_episode(&ds, &split, SplitPart::Novel, 5, 5, 15, SupportDomain::Sketch, &mut rng).unwrap();
        assert_eq!(ep.support_flat().count(), 25);
        assert_eq!(ep.query.len(), 75);
        assert!(ep.support_flat().all(|i| ds.item(i).domain == Domain::Sketch));
        assert!(ep.query.iter().all(|&(i, _)| ds.item(i).domain == Domain::Photo));
        for (pos, shots) in ep.support.iter().enumerate() {
            assert!(shots.iter().all(|&i| ds.item(i).label == ep.way_classes[pos]));
        }
        assert!(ep.query.iter().all(|&(i, pos)| ds.item(i).label == ep.way_classes[pos]));
    }

    #[test]
    fn one_shot_and_photo_support() {
        let (ds, split) = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ep = sample_episode(&ds, &split, SplitPart::Novel, 5, 1, 15, SupportDomain::Sketch, &mut rng).unwrap();
        assert_eq!(ep.support_flat().count(), 5);
        let ep = sample_episode(&ds, &split, SplitPart::Novel, 5, 5, 15, SupportDomain::Photo, &mut rng).unwrap();
        assert!(ep.support_flat().all(|i| ds.item(i).domain == Domain::Photo));
        let support: BTreeSet<_> = ep.support_flat().collect();
        assert!(ep.query.iter().all(|(i, _)| !support.contains(i)));
    }

    #[test]
    fn insufficient_items_name_the_class() {
        let (ds, split) = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // base test subset holds 6 photos per class
        let err = sample_episode(&ds, &split, SplitPart::Base(ItemSubset::Test), 5, 1, 15, SupportDomain::Sketch, &mut rng)
            .unwrap_err();
        assert!(err.to_string().contains("class `shape_"), "{err}");
        let err = sample_episode(&ds, &split, SplitPart::Novel, 11, 1, 1, SupportDomain::Sketch, &mut rng).unwrap_err();
        assert!(matches!(err, Error::InsufficientData(_)));
    }

    #[test]
    fn mixed_support_draws_both_domains() {
        let (ds, split) = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ep = sample_episode(&ds, &split, SplitPart::Novel, 5, 10, 10, SupportDomain::Mixed, &mut rng).unwrap();
        let domains: BTreeSet<_> = ep.support_flat().map(|i| ds.item(i).domain).collect();
        assert_eq!(domains.len(), 2);
        let support: BTreeSet<_> = ep.support_flat().collect();
        assert_eq!(support.len(), 50);
        assert!(ep.query.iter().all(|(i, _)| !support.contains(i)));
    }
}
