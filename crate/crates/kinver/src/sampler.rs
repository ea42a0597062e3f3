//! Constraint-respecting batch sampler.
//!
//! Epochs shuffle the kin-pair list; batches are consecutive windows with
//! same-family duplicates swapped out for later unconsumed pairs from other
//! families, so every batch holds pairwise-distinct families and in-batch
//! cross pairs are guaranteed non-kin. Within a pair, each individual
//! contributes its least-served image (ties broken by lowest image id) and
//! that image's counter is incremented. Counters persist across epochs.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Dataset, ImageIdx, KinPair, PersonIdx};
use crate::error::{Error, Result};
use crate::rng::seeded_rng;

/// One sampled kin pair: the index into the dataset's pair list plus the
/// image chosen for each side (x belongs to person1, y to person2).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampledPair {
    pub pair: usize,
    pub image_x: ImageIdx,
    pub image_y: ImageIdx,
}

/// A batch of kin pairs from pairwise-distinct families.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub pairs: Vec<SampledPair>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn kin_pair<'d>(&self, dataset: &'d Dataset, i: usize) -> &'d KinPair {
        &dataset.pairs()[self.pairs[i].pair]
    }

    /// Family ids of the batch, in pair order.
    pub fn family_ids<'d>(&self, dataset: &'d Dataset) -> Vec<&'d str> {
        self.pairs
            .iter()
            .map(|p| dataset.family_id(dataset.pairs()[p.pair].family))
            .collect()
    }

    /// Checks every batch invariant: pairwise-distinct families, images owned
    /// by the pair's individuals, and the pair itself present in the index.
    pub fn check_invariants(&self, dataset: &Dataset) -> Result<()> {
        let mut families = HashSet::new();
        for sampled in &self.pairs {
            let pair = dataset
                .pairs()
                .get(sampled.pair)
                .ok_or_else(|| Error::Invariant(format!("unknown pair index {}", sampled.pair)))?;
            if !families.insert(pair.family) {
                return Err(Error::Invariant(format!(
                    "family {} appears twice in one batch",
                    dataset.family_id(pair.family)
                )));
            }
            let owns = |person: PersonIdx, img: ImageIdx| {
                dataset.individual(person).images.contains(&img)
            };
            if !owns(pair.person1, sampled.image_x) || !owns(pair.person2, sampled.image_y) {
                return Err(Error::Invariant(format!(
                    "batch serves an image that does not belong to pair ({}, {})",
                    dataset.individual(pair.person1).person_id,
                    dataset.individual(pair.person2).person_id,
                )));
            }
        }
        Ok(())
    }
}

/// Returns an image of `person` whose serving count is minimal, breaking
/// ties by lowest image id.
pub fn select_least_seen(dataset: &Dataset, person: PersonIdx, counters: &[u64]) -> ImageIdx {
    let individual = dataset.individual(person);
    *individual
        .images
        .iter()
        .min_by(|&&a, &&b| {
            counters[a.0]
                .cmp(&counters[b.0])
                .then_with(|| dataset.image(a).id.cmp(&dataset.image(b).id))
        })
        .expect("individuals have at least one image")
}

/// Cumulative sampling statistics, exposed for dry-run audits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SamplerStats {
    pub batches_emitted: usize,
    pub pairs_served: usize,
    pub duplicate_replacements: usize,
    pub duplicates_dropped: usize,
    pub windows_dropped: usize,
}

/// Streaming batch sampler over a dataset's kin-pair list.
pub struct Sampler<'d> {
    dataset: &'d Dataset,
    batch_size: usize,
    counters: Vec<u64>,
    rng: ChaCha8Rng,
    epoch_order: Vec<usize>,
    cursor: usize,
    epochs_started: usize,
    stats: SamplerStats,
}

impl<'d> Sampler<'d> {
    /// Builds a sampler over all kin pairs of `dataset`. Counters start at
    /// zero and the first epoch order is a seeded shuffle of the pair list.
    pub fn new(dataset: &'d Dataset, batch_size: usize, seed: u64) -> Result<Self> {
        if dataset.pairs().is_empty() {
            return Err(Error::Config("cannot sample from an empty pair list".into()));
        }
        if batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 (a contrastive batch needs a negative), got {batch_size}"
            )));
        }
        let mut sampler = Sampler {
            dataset,
            batch_size,
            counters: vec![0; dataset.images().len()],
            rng: seeded_rng(seed),
            epoch_order: (0..dataset.pairs().len()).collect(),
            cursor: 0,
            epochs_started: 0,
            stats: SamplerStats::default(),
        };
        sampler.begin_epoch();
        Ok(sampler)
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Pair indices in the order this epoch serves them.
    pub fn epoch_order(&self) -> &[usize] {
        &self.epoch_order
    }

    /// Serving counters indexed by image; counters of images whose
    /// individuals never appear in the pair list stay zero forever.
    pub fn counters(&self) -> &[u64] {
        &self.counters
    }

    pub fn stats(&self) -> SamplerStats {
        self.stats
    }

    /// Epochs started so far (1 after construction).
    pub fn epochs_started(&self) -> usize {
        self.epochs_started
    }

    /// Reshuffles the pair list and rewinds the cursor. Counters persist.
    pub fn begin_epoch(&mut self) {
        self.epoch_order.shuffle(&mut self.rng);
        self.cursor = 0;
        self.epochs_started += 1;
    }

    /// Next batch of this epoch, or `None` when the epoch is exhausted.
    /// Windows that cannot reach two distinct families are dropped with a
    /// warning.
    pub fn next_batch(&mut self) -> Option<Batch> {
        while self.cursor < self.epoch_order.len() {
            let end = (self.cursor + self.batch_size).min(self.epoch_order.len());
            let window_len = end - self.cursor;

            // Resolve duplicate families: swap each duplicate with the first
            // unconsumed later pair whose family is absent from the window.
            let mut families: Vec<crate::dataset::FamilyIdx> = (self.cursor..end)
                .map(|slot| self.dataset.pairs()[self.epoch_order[slot]].family)
                .collect();
            let mut keep = vec![true; window_len];
            for pos in 0..window_len {
                let duplicate = families[..pos].contains(&families[pos]);
                if !duplicate {
                    continue;
                }
                let candidate = (end..self.epoch_order.len()).find(|&q| {
                    let fam = self.dataset.pairs()[self.epoch_order[q]].family;
                    !families.contains(&fam)
                });
                match candidate {
                    Some(q) => {
                        self.epoch_order.swap(self.cursor + pos, q);
                        families[pos] = self.dataset.pairs()[self.epoch_order[self.cursor + pos]].family;
                        self.stats.duplicate_replacements += 1;
                    }
                    None => {
                        keep[pos] = false;
                        self.stats.duplicates_dropped += 1;
                    }
                }
            }

            let slots: Vec<usize> = (0..window_len)
                .filter(|&pos| keep[pos])
                .map(|pos| self.epoch_order[self.cursor + pos])
                .collect();
            self.cursor = end;

            if slots.len() < 2 {
                self.stats.windows_dropped += 1;
                log::warn!(
                    "dropping a sampler window with fewer than 2 distinct families \
                     ({} pair(s) left in it)",
                    slots.len()
                );
                continue;
            }

            let pairs = slots
                .into_iter()
                .map(|pair_idx| {
                    let pair = &self.dataset.pairs()[pair_idx];
                    let image_x = select_least_seen(self.dataset, pair.person1, &self.counters);
                    let image_y = select_least_seen(self.dataset, pair.person2, &self.counters);
                    self.counters[image_x.0] += 1;
                    self.counters[image_y.0] += 1;
                    SampledPair {
                        pair: pair_idx,
                        image_x,
                        image_y,
                    }
                })
                .collect();
            self.stats.batches_emitted += 1;
            let batch = Batch { pairs };
            self.stats.pairs_served += batch.len();
            return Some(batch);
        }
        None
    }

    /// Next batch, starting a new epoch when the current one is exhausted.
    /// Fails if a full fresh epoch cannot produce a single valid batch.
    pub fn next_batch_cycling(&mut self) -> Result<Batch> {
        if let Some(batch) = self.next_batch() {
            return Ok(batch);
        }
        self.begin_epoch();
        self.next_batch().ok_or_else(|| {
            Error::Config(
                "the pair list cannot form any batch with 2 distinct families".into(),
            )
        })
    }

    /// Maximum minus minimum serving count over one individual's images.
    pub fn count_spread(&self, person: PersonIdx) -> u64 {
        let counts = self
            .dataset
            .individual(person)
            .images
            .iter()
            .map(|img| self.counters[img.0]);
        let max = counts.clone().max().unwrap_or(0);
        let min = counts.min().unwrap_or(0);
        max - min
    }

    /// Individuals that appear in the pair list.
    pub fn sampled_individuals(&self) -> Vec<PersonIdx> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for pair in self.dataset.pairs() {
            for person in [pair.person1, pair.person2] {
                if seen.insert(person) {
                    out.push(person);
                }
            }
        }
        out
    }
}

/// Full-epoch audit used by the `sample-dry-run` command and the acceptance
/// suite: streams `epochs` epochs of batches through `on_batch`, asserting
/// the distinct-family, validity and balance invariants as it goes.
pub fn dry_run(
    sampler: &mut Sampler,
    dataset: &Dataset,
    epochs: usize,
    mut on_batch: impl FnMut(usize, &Batch),
) -> Result<SamplerStats> {
    let individuals = sampler.sampled_individuals();
    for epoch in 0..epochs {
        if epoch > 0 {
            sampler.begin_epoch();
        }
        let mut batches_this_epoch = 0usize;
        while let Some(batch) = sampler.next_batch() {
            batch.check_invariants(dataset)?;
            on_batch(epoch, &batch);
            batches_this_epoch += 1;
        }
        if batches_this_epoch == 0 {
            log::warn!("epoch {epoch} produced no valid batches");
        }
        for &person in &individuals {
            let spread = sampler.count_spread(person);
            if spread > 1 {
                return Err(Error::Invariant(format!(
                    "individual {} has image count spread {spread} after epoch {epoch}",
                    dataset.individual(person).person_id
                )));
            }
        }
    }
    Ok(sampler.stats())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, DatasetBuilder, ImageSource, RelationshipType, SyntheticConfig};
    use ndarray::Array2;
    use proptest::prelude::*;

    /// `families × members` grid with one image per member and one pair per
    /// family (members 0 and 1).
    fn grid_dataset(families: usize, members: usize, images: usize) -> Dataset {
        let mut b = DatasetBuilder::new();
        let mut feature_rows = 0usize;
        for f in 0..families {
            let family_id = format!("F{f}");
            let mut people = Vec::new();
            for m in 0..members {
                let person = b.person(&format!("F{f}_P{m}"), &family_id).unwrap();
                for i in 0..images {
                    b.add_image(
                        person,
                        format!("F{f}_P{m}_img{i}"),
                        ImageSource::Feature(feature_rows),
                    )
                    .unwrap();
                    feature_rows += 1;
                }
                people.push(person);
            }
            b.add_pair(people[0], people[1], RelationshipType::SIBS).unwrap();
        }
        b.finish(Some(Array2::zeros((feature_rows, 4)))).unwrap()
    }

    #[test]
    fn new_sampler_shuffles_deterministically() {
        let ds = grid_dataset(10, 2, 1);
        let a = Sampler::new(&ds, 4, 1).unwrap();
        let b = Sampler::new(&ds, 4, 1).unwrap();
        let mut sorted = a.epoch_order().to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_eq!(a.epoch_order(), b.epoch_order());
        assert!(a.counters().iter().all(|&c| c == 0));
    }

    #[test]
    fn batch_size_below_two_is_a_configuration_error() {
        let ds = grid_dataset(4, 2, 1);
        assert!(matches!(Sampler::new(&ds, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn empty_pair_list_is_a_configuration_error() {
        let mut b = DatasetBuilder::new();
        let p = b.person("only", "F0").unwrap();
        b.add_image(p, "img".into(), ImageSource::File("x.png".into())).unwrap();
        let ds = b.finish(None).unwrap();
        assert!(matches!(Sampler::new(&ds, 2, 0), Err(Error::Config(_))));
    }

    /// Monte Carlo: across 100 seed pairs, at least 99 produce different
    /// epoch orders.
    #[test]
    fn different_seeds_give_different_orders() {
        let ds = grid_dataset(10, 2, 1);
        let mut differing = 0;
        for s in 0..100u64 {
            let a = Sampler::new(&ds, 4, s).unwrap();
            let b = Sampler::new(&ds, 4, s + 1000).unwrap();
            if a.epoch_order() != b.epoch_order() {
                differing += 1;
            }
        }
        assert!(differing >= 99, "only {differing} of 100 seed pairs differed");
    }

    /// Hand-enumerable case: 4 pairs from 4 distinct families, batch_size 2.
    #[test]
    fn clean_epoch_serves_every_pair_once() {
        let ds = grid_dataset(4, 2, 1);
        let mut sampler = Sampler::new(&ds, 2, 3).unwrap();
        let mut batches = Vec::new();
        while let Some(batch) = sampler.next_batch() {
            batch.check_invariants(&ds).unwrap();
            batches.push(batch);
        }
        assert_eq!(batches.len(), 2);
        assert!(batches.iter().all(|b| b.len() == 2));
        assert_eq!(sampler.stats().duplicate_replacements, 0);
        // every individual has one image, served exactly once
        for person in sampler.sampled_individuals() {
            for &img in &ds.individual(person).images {
                assert_eq!(sampler.counters()[img.0], 1);
            }
        }
    }

    #[test]
    fn single_family_data_yields_zero_batches() {
        let mut b = DatasetBuilder::new();
        let p0 = b.person("a", "F").unwrap();
        let p1 = b.person("b", "F").unwrap();
        let p2 = b.person("c", "F").unwrap();
        for (p, name) in [(p0, "a"), (p1, "b"), (p2, "c")] {
            b.add_image(p, format!("{name}_img"), ImageSource::File("x.png".into())).unwrap();
        }
        b.add_pair(p0, p1, RelationshipType::BB).unwrap();
        b.add_pair(p0, p2, RelationshipType::FS).unwrap();
        let ds = b.finish(None).unwrap();
        let mut sampler = Sampler::new(&ds, 2, 0).unwrap();
        assert!(sampler.next_batch().is_none());
        assert_eq!(sampler.stats().windows_dropped, 1);
        assert!(sampler.next_batch_cycling().is_err());
    }

    #[test]
    fn duplicates_are_replaced_by_later_distinct_families() {
        // family F0 contributes two pairs, so some window eventually holds
        // both; the sampler must swap one for a later family or drop it.
        let mut b = DatasetBuilder::new();
        for f in 0..3 {
            let family_id = format!("F{f}");
            let p0 = b.person(&format!("F{f}_a"), &family_id).unwrap();
            let p1 = b.person(&format!("F{f}_b"), &family_id).unwrap();
            for (p, tag) in [(p0, "a"), (p1, "b")] {
                b.add_image(p, format!("F{f}_{tag}_img"), ImageSource::File("x.png".into()))
                    .unwrap();
            }
            b.add_pair(p0, p1, RelationshipType::BB).unwrap();
            if f == 0 {
                let p2 = b.person("F0_c", "F0").unwrap();
                b.add_image(p2, "F0_c_img".into(), ImageSource::File("x.png".into()))
                    .unwrap();
                b.add_pair(p0, p2, RelationshipType::FS).unwrap();
            }
        }
        let ds = b.finish(None).unwrap();
        for seed in 0..20u64 {
            let mut sampler = Sampler::new(&ds, 2, seed).unwrap();
            while let Some(batch) = sampler.next_batch() {
                batch.check_invariants(&ds).unwrap();
            }
        }
    }

    /// Three selections across epochs keep an individual's two images within
    /// one serving of each other.
    #[test]
    fn least_seen_selection_balances_two_images() {
        let ds = grid_dataset(4, 2, 2);
        let mut sampler = Sampler::new(&ds, 2, 9).unwrap();
        for _ in 0..3 {
            while sampler.next_batch().is_some() {}
            sampler.begin_epoch();
        }
        for person in sampler.sampled_individuals() {
            assert!(sampler.count_spread(person) <= 1);
        }
    }

    /// Coverage: with all-distinct families, no replacement collisions and
    /// no short trailing window, every pair is served exactly once per epoch.
    #[test]
    fn distinct_families_get_full_coverage_every_epoch() {
        let ds = grid_dataset(8, 2, 2);
        let epochs = 5;
        let mut sampler = Sampler::new(&ds, 4, 21).unwrap();
        let mut served = vec![0usize; ds.pairs().len()];
        for epoch in 0..epochs {
            if epoch > 0 {
                sampler.begin_epoch();
            }
            while let Some(batch) = sampler.next_batch() {
                for pair in &batch.pairs {
                    served[pair.pair] += 1;
                }
            }
        }
        assert!(served.iter().all(|&s| s == epochs), "{served:?}");
    }

    #[test]
    fn tie_break_is_by_lowest_image_id() {
        let ds = grid_dataset(1, 2, 3);
        let person = PersonIdx(0);
        let mut counters = vec![0u64; ds.images().len()];
        let first = select_least_seen(&ds, person, &counters);
        assert_eq!(ds.image(first).id, "F0_P0_img0");
        counters[first.0] = 3;
        counters[ds.individual(person).images[1].0] = 1;
        counters[ds.individual(person).images[2].0] = 2;
        let second = select_least_seen(&ds, person, &counters);
        assert_eq!(ds.image(second).id, "F0_P0_img1");
    }

    #[test]
    fn dry_run_passes_on_synthetic_data() {
        let data = generate_synthetic(&SyntheticConfig {
            num_families: 12,
            seed: 5,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let mut sampler = Sampler::new(&data.dataset, 4, 1).unwrap();
        let stats = dry_run(&mut sampler, &data.dataset, 3, |_, _| {}).unwrap();
        assert!(stats.batches_emitted > 0);
    }

    proptest! {
        /// Selecting and incrementing k times never spreads an individual's
        /// image counts by more than one.
        #[test]
        fn select_increment_spread_stays_within_one(k in 1usize..60, m in 1usize..8) {
            let ds = grid_dataset(1, 2, m);
            let person = PersonIdx(0);
            let mut counters = vec![0u64; ds.images().len()];
            for _ in 0..k {
                let img = select_least_seen(&ds, person, &counters);
                counters[img.0] += 1;
            }
            let counts: Vec<u64> = ds.individual(person).images.iter().map(|i| counters[i.0]).collect();
            let max = *counts.iter().max().unwrap();
            let min = *counts.iter().min().unwrap();
            prop_assert!(max - min <= 1);
        }
    }
}
