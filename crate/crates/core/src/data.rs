//! Labeled datasets, class-disjoint phase splits, labeled/unlabeled
//! partitions and k-shot n-way episode sampling.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::{Real, Tensor};

/// Images of one shape `[C, H, W]` with a class label each.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset<T> {
    image_shape: [usize; 3],
    pixels: Vec<T>,
    labels: Vec<usize>,
    class_names: Vec<String>,
    class_index: Vec<Vec<usize>>,
}

impl<T: Real> LabeledDataset<T> {
    /// `pixels` holds the images back to back, `labels[i] < class_names.len()`.
    pub fn new(image_shape: [usize; 3], pixels: Vec<T>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        let per_image: usize = image_shape.iter().product();
        if per_image == 0 || pixels.len() != per_image * labels.len() {
            return Err(Error::Config(format!(
                "{} pixel values do not hold {} images of shape {:?}",
                pixels.len(),
                labels.len(),
                image_shape
            )));
        }
        let mut class_index = alloc::vec![Vec::new(); class_names.len()];
        for (i, &l) in labels.iter().enumerate() {
            let slot = class_index
                .get_mut(l)
                .ok_or_else(|| Error::Config(format!("label {} out of range for {} classes", l, class_names.len())))?;
            slot.push(i);
        }
        if let Some(empty) = class_index.iter().position(Vec::is_empty) {
            return Err(Error::EmptyClass(empty));
        }
        Ok(Self {
            image_shape,
            pixels,
            labels,
            class_names,
            class_index,
        })
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[T] {
        &self.pixels
    }

    /// Image indices of `class`.
    pub fn class_members(&self, class: usize) -> &[usize] {
        &self.class_index[class]
    }

    pub fn image(&self, i: usize) -> &[T] {
        let n: usize = self.image_shape.iter().product();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Batch `[indices.len(), C, H, W]`.
    pub fn gather(&self, indices: &[usize]) -> Tensor<T> {
        let n: usize = self.image_shape.iter().product();
        let mut data = Vec::with_capacity(n * indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.image_shape;
        Tensor::new(&[indices.len(), c, h, w], data).expect("consistent image size")
    }
}

/// Meta-learning phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Train,
    Val,
    Test,
}

/// Class-disjoint assignment of dataset classes to the three phases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn classes(&self, phase: Phase) -> &[usize] {
        match phase {
            Phase::Train => &self.train,
            Phase::Val => &self.val,
            Phase::Test => &self.test,
        }
    }

    pub fn is_disjoint(&self) -> bool {
        let mut all: Vec<usize> = self.train.iter().chain(&self.val).chain(&self.test).copied().collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        all.len() == n
    }
}

/// Minimum images per class for a class to take part in a split.
pub const DEFAULT_MIN_CLASS_SIZE: usize = 40;

/// Drops classes below `min_class_size` images, then deals the rest at random
/// (deterministic in `seed`) into train/val/test groups of the requested sizes.
pub fn make_split<T: Real>(
    dataset: &LabeledDataset<T>,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
    min_class_size: usize,
) -> Result<SplitSpec> {
    let mut eligible: Vec<usize> = (0..dataset.num_classes())
        .filter(|&c| dataset.class_members(c).len() >= min_class_size)
        .collect();
    let needed = n_train + n_val + n_test;
    if eligible.len() < needed {
        return Err(Error::InsufficientClasses {
            needed,
            available: eligible.len(),
        });
    }
    eligible.shuffle(&mut rng_from(seed, 0));
    let sorted = |range: core::ops::Range<usize>| {
        let mut v = eligible[range].to_vec();
        v.sort_unstable();
        v
    };
    Ok(SplitSpec {
        train: sorted(0..n_train),
        val: sorted(n_train..n_train + n_val),
        test: sorted(n_train + n_val..needed),
        seed,
    })
}

/// Per-class division of images into a labeled and an unlabeled pool.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledUnlabeledPartition {
    pub labeled_fraction: f64,
    labeled: Vec<Vec<usize>>,
    unlabeled: Vec<Vec<usize>>,
}

impl LabeledUnlabeledPartition {
    /// Shuffles each class and keeps `round(fraction · size)` (at least one)
    /// images labeled.
    pub fn new<T: Real>(dataset: &LabeledDataset<T>, labeled_fraction: f64, seed: u64) -> Result<Self> {
        if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "labeled fraction must lie in (0, 1], got {labeled_fraction}"
            )));
        }
        let mut labeled = Vec::with_capacity(dataset.num_classes());
        let mut unlabeled = Vec::with_capacity(dataset.num_classes());
        for c in 0..dataset.num_classes() {
            let mut members = dataset.class_members(c).to_vec();
            members.shuffle(&mut rng_from(seed, c as u64));
            let keep = num_traits::Float::round(labeled_fraction * members.len() as f64) as usize;
            let keep = keep.clamp(1, members.len());
            let rest = members.split_off(keep);
            labeled.push(members);
            unlabeled.push(rest);
        }
        Ok(Self {
            labeled_fraction,
            labeled,
            unlabeled,
        })
    }

    /// Everything labeled.
    pub fn all_labeled<T: Real>(dataset: &LabeledDataset<T>) -> Self {
        Self {
            labeled_fraction: 1.0,
            labeled: (0..dataset.num_classes())
                .map(|c| dataset.class_members(c).to_vec())
                .collect(),
            unlabeled: alloc::vec![Vec::new(); dataset.num_classes()],
        }
    }

    pub fn labeled(&self, class: usize) -> &[usize] {
        &self.labeled[class]
    }

    pub fn unlabeled(&self, class: usize) -> &[usize] {
        &self.unlabeled[class]
    }
}

/// Episode geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeSpec {
    /// Labeled support images per class (k).
    pub shots: usize,
    /// Classes per episode (n).
    pub ways: usize,
    /// Target images per class (t).
    pub targets: usize,
    /// Unlabeled images per class, episode and distractor classes alike (u).
    pub unlabeled: usize,
    /// Extra classes contributing only unlabeled images.
    pub distractors: usize,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            shots: 5,
            ways: 5,
            targets: 5,
            unlabeled: 0,
            distractors: 0,
        }
    }
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 || self.ways == 0 || self.targets == 0 {
            return Err(Error::Config("shots, ways and targets must be positive".into()));
        }
        if self.distractors > 0 && self.unlabeled == 0 {
            return Err(Error::Config("distractor classes need unlabeled > 0".into()));
        }
        Ok(())
    }
}

/// One k-shot n-way task. Labels are episode-local (`0..ways`), in the order
/// of `classes`; images are dataset indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub classes: Vec<usize>,
    pub distractor_classes: Vec<usize>,
    pub support: Vec<(usize, usize)>,
    /// Unlabeled images with their episode label, or `None` for distractors.
    pub unlabeled: Vec<(usize, Option<usize>)>,
    pub target: Vec<(usize, usize)>,
}

impl Episode {
    pub fn ways(&self) -> usize {
        self.classes.len()
    }

    /// The same task with distractor images removed from the unlabeled set.
    pub fn without_distractors(&self) -> Self {
        Self {
            distractor_classes: Vec::new(),
            unlabeled: self.unlabeled.iter().copied().filter(|(_, l)| l.is_some()).collect(),
            ..self.clone()
        }
    }

    /// The same task with no unlabeled set.
    pub fn without_unlabeled(&self) -> Self {
        Self {
            distractor_classes: Vec::new(),
            unlabeled: Vec::new(),
            ..self.clone()
        }
    }

    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|&(_, l)| l).collect()
    }

    pub fn target_labels(&self) -> Vec<usize> {
        self.target.iter().map(|&(_, l)| l).collect()
    }

    /// Materialized image batches.
    pub fn tensors<T: Real>(&self, dataset: &LabeledDataset<T>) -> EpisodeTensors<T> {
        let idx = |v: &[(usize, usize)]| v.iter().map(|&(i, _)| i).collect::<Vec<_>>();
        let unl: Vec<usize> = self.unlabeled.iter().map(|&(i, _)| i).collect();
        EpisodeTensors {
            ways: self.ways(),
            support: dataset.gather(&idx(&self.support)),
            support_labels: self.support_labels(),
            unlabeled: dataset.gather(&unl),
            target: dataset.gather(&idx(&self.target)),
            target_labels: self.target_labels(),
        }
    }
}

/// An episode's images as batches `[count, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTensors<T> {
    pub ways: usize,
    pub support: Tensor<T>,
    pub support_labels: Vec<usize>,
    pub unlabeled: Tensor<T>,
    pub target: Tensor<T>,
    pub target_labels: Vec<usize>,
}

/// Samples one episode from `phase_classes`.
///
/// Support and target images come from the labeled pool, unlabeled images
/// from the unlabeled pool; draws are without replacement inside an episode.
pub fn sample_episode<R: Rng + ?Sized>(
    partition: &LabeledUnlabeledPartition,
    phase_classes: &[usize],
    spec: &EpisodeSpec,
    rng: &mut R,
) -> Result<Episode> {
    spec.validate()?;
    let needed_classes = spec.ways + spec.distractors;
    if phase_classes.len() < needed_classes {
        return Err(Error::InsufficientClasses {
            needed: needed_classes,
            available: phase_classes.len(),
        });
    }
    let picks = index::sample(rng, phase_classes.len(), needed_classes).into_vec();
    let classes: Vec<usize> = picks[..spec.ways].iter().map(|&i| phase_classes[i]).collect();
    let distractor_classes: Vec<usize> = picks[spec.ways..].iter().map(|&i| phase_classes[i]).collect();

    let mut support = Vec::with_capacity(spec.shots * spec.ways);
    let mut target = Vec::with_capacity(spec.targets * spec.ways);
    let mut unlabeled = Vec::with_capacity(spec.unlabeled * needed_classes);
    let draw = |pool: &[usize], count: usize, class: usize, name: &'static str, rng: &mut R| {
        if pool.len() < count {
            return Err(Error::InsufficientSamples {
                class,
                pool: name,
                needed: count,
                available: pool.len(),
            });
        }
        Ok(index::sample(rng, pool.len(), count)
            .into_iter()
            .map(|i| pool[i])
            .collect::<Vec<_>>())
    };
    for (label, &class) in classes.iter().enumerate() {
        let drawn = draw(
            partition.labeled(class),
            spec.shots + spec.targets,
            class,
            "labeled",
            rng,
        )?;
        support.extend(drawn[..spec.shots].iter().map(|&i| (i, label)));
        target.extend(drawn[spec.shots..].iter().map(|&i| (i, label)));
    }
    if spec.unlabeled > 0 {
        for (label, &class) in classes.iter().enumerate() {
            let drawn = draw(partition.unlabeled(class), spec.unlabeled, class, "unlabeled", rng)?;
            unlabeled.extend(drawn.into_iter().map(|i| (i, Some(label))));
        }
        for &class in &distractor_classes {
            let drawn = draw(partition.unlabeled(class), spec.unlabeled, class, "unlabeled", rng)?;
            unlabeled.extend(drawn.into_iter().map(|i| (i, None)));
        }
    }
    Ok(Episode {
        classes,
        distractor_classes,
        support,
        unlabeled,
        target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn toy(classes: usize, per_class: usize) -> LabeledDataset<f32> {
        let labels: Vec<usize> = (0..classes * per_class).map(|i| i / per_class).collect();
        let pixels = labels.iter().map(|&l| l as f32).collect();
        let names = (0..classes).map(|c| c.to_string()).collect();
        LabeledDataset::new([1, 1, 1], pixels, labels, names).unwrap()
    }

    #[test]
    fn nineteen_classes_split_nine_five_five() {
        let d = toy(19, 40);
        let s = make_split(&d, 9, 5, 5, 3, DEFAULT_MIN_CLASS_SIZE).unwrap();
        assert!(s.is_disjoint());
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (9, 5, 5));
        assert_eq!(s, make_split(&d, 9, 5, 5, 3, 40).unwrap());
    }

    #[test]
    fn split_reports_shortfall() {
        let d = toy(14, 40);
        assert_eq!(
            make_split(&d, 9, 5, 5, 0, 40),
            Err(Error::InsufficientClasses {
                needed: 19,
                available: 14
            })
        );
    }

    #[test]
    fn small_classes_are_excluded() {
        let mut labels: Vec<usize> = (0..19 * 40).map(|i| i / 40).collect();
        labels.extend(vec![19; 10]);
        let names = (0..20).map(|c| c.to_string()).collect();
        let d = LabeledDataset::new([1, 1, 1], vec![0.0f32; labels.len()], labels, names).unwrap();
        let s = make_split(&d, 9, 5, 5, 1, 40).unwrap();
        assert!(!s.train.contains(&19) && !s.val.contains(&19) && !s.test.contains(&19));
    }

    #[test]
    fn two_by_two_partitions_exactly() {
        let d = toy(2, 2);
        let p = LabeledUnlabeledPartition::all_labeled(&d);
        let spec = EpisodeSpec {
            shots: 1,
            ways: 2,
            targets: 1,
            unlabeled: 0,
            distractors: 0,
        };
        let e = sample_episode(&p, &[0, 1], &spec, &mut rng_from(0, 0)).unwrap();
        let mut all: Vec<usize> = e.support.iter().chain(&e.target).map(|&(i, _)| i).collect();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }

    #[test]
    fn insufficient_samples_names_the_class() {
        let d = toy(5, 6);
        let p = LabeledUnlabeledPartition::all_labeled(&d);
        let err = sample_episode(&p, &[0, 1, 2, 3, 4], &EpisodeSpec::default(), &mut rng_from(0, 0));
        assert!(matches!(
            err,
            Err(Error::InsufficientSamples {
                needed: 10,
                available: 6,
                ..
            })
        ));
    }

    #[test]
    fn partition_fraction_is_close() {
        let d = toy(3, 37);
        let p = LabeledUnlabeledPartition::new(&d, 0.4, 9).unwrap();
        for c in 0..3 {
            let (l, u) = (p.labeled(c).len(), p.unlabeled(c).len());
            assert_eq!(l + u, 37);
            assert!((l as f64 / 37.0 - 0.4).abs() <= 1.0 / 37.0);
        }
        assert!(LabeledUnlabeledPartition::new(&d, 0.0, 1).is_err());
    }
}
