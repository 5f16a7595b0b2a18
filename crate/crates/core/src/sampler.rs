//! Weight-proportional resampling from the disk-resident dataset.
//!
//! Selection is systematic ("minimal variance"): a grid of points
//! `offset + k * step` is laid over the cumulative weight line and each item
//! is selected once per grid point inside its interval. Every item's count is
//! within one of its expectation `w / step`.

use rand::Rng;

use crate::dataio::RecordSource;
use crate::error::{Error, Result};
use crate::model::StrongModel;
use crate::scanner::{raw_weight, TrainingRecord};
use crate::stats::CompensatedSum;

/// Streaming form of [`mvs_select`].
#[derive(Clone, Debug)]
pub struct SystematicSelector {
    step: f64,
    offset: f64,
    cumulative: CompensatedSum,
    next_point: u64,
}

impl SystematicSelector {
    pub fn new(step: f64, offset: f64) -> Result<Self> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::domain(format!("step must be positive, got {step}")));
        }
        if !(0.0..step).contains(&offset) {
            return Err(Error::domain(format!("offset {offset} outside [0, {step})")));
        }
        Ok(SystematicSelector {
            step,
            offset,
            cumulative: CompensatedSum::default(),
            next_point: 0,
        })
    }

    /// Number of grid points in the next item's interval `[c, c + w)`.
    #[inline]
    pub fn select(&mut self, weight: f64) -> usize {
        self.cumulative.add(weight);
        let end = self.cumulative.value();
        let mut count = 0;
        while self.offset + self.next_point as f64 * self.step < end {
            self.next_point += 1;
            count += 1;
        }
        count
    }
}

/// Multiplicity of every item under systematic sampling.
pub fn mvs_select(weights: impl IntoIterator<Item = f64>, step: f64, offset: f64) -> Result<Vec<usize>> {
    let mut sel = SystematicSelector::new(step, offset)?;
    Ok(weights.into_iter().map(|w| sel.select(w)).collect())
}

/// `sum_i exp(-y_i H(x_i))` over the whole dataset.
pub fn total_weight_pass<S: RecordSource + ?Sized>(source: &S, model: &StrongModel) -> Result<f64> {
    if source.is_empty() {
        return Err(Error::domain("dataset is empty"));
    }
    let mut total = CompensatedSum::default();
    for rec in source.records()? {
        let rec = rec?;
        total.add(raw_weight(f64::from(rec.y), model.predict(&rec.x)?)?);
    }
    Ok(total.value())
}

/// An in-memory sample together with what is needed to relate it back to the
/// full dataset.
#[derive(Clone, Debug)]
pub struct Sample {
    pub records: Vec<TrainingRecord>,
    /// Total raw weight of the dataset under the sampling model.
    pub total_weight: f64,
    pub dataset_len: u64,
    pub offset: f64,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Estimate of the full-dataset exponential loss of the model the cached
    /// weights were last updated to: `(T / n) * mean(w / w_s)`.
    pub fn loss_estimate(&self) -> f64 {
        if self.records.is_empty() {
            return f64::NAN;
        }
        let rel: CompensatedSum = self.records.iter().map(TrainingRecord::relative_weight).collect();
        self.total_weight / self.dataset_len as f64 * rel.value() / self.records.len() as f64
    }
}

/// Two passes: total weight, then systematic selection with
/// `step = T / capacity` and one uniform offset. Selected records carry
/// `w_s = w_l =` their raw weight, so every relative weight starts at 1.
pub fn build_sample<S, R>(source: &S, model: &StrongModel, capacity: usize, rng: &mut R) -> Result<Sample>
where
    S: RecordSource + ?Sized,
    R: Rng + ?Sized,
{
    if capacity == 0 {
        return Err(Error::domain("sample capacity must be at least 1"));
    }
    let total = total_weight_pass(source, model)?;
    let step = total / capacity as f64;
    let offset = rng.random::<f64>() * step;
    let mut sel = SystematicSelector::new(step, offset.min(step * (1.0 - f64::EPSILON)))?;
    let mut records = Vec::with_capacity(capacity + 1);
    for rec in source.records()? {
        let rec = rec?;
        let y = f64::from(rec.y);
        let w = raw_weight(y, model.predict(&rec.x)?)?;
        let k = sel.select(w);
        if k > 0 {
            let sampled = TrainingRecord::sampled(rec.x, y, model)?;
            for _ in 1..k {
                records.push(sampled.clone());
            }
            records.push(sampled);
        }
    }
    log::debug!(
        "sampled {} records (capacity {capacity}, total weight {total}, offset {offset})",
        records.len()
    );
    Ok(Sample {
        records,
        total_weight: total,
        dataset_len: source.len(),
        offset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::MemoryDataset;
    use crate::model::{Lineage, Polarity, Stump};
    use crate::stats::effective_sample_size;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_dataset(n: usize) -> MemoryDataset {
        MemoryDataset::from_dense(
            (0..n)
                .map(|i| (vec![i as f32], if i % 3 == 0 { 1 } else { -1 }))
                .collect(),
        )
    }

    #[test]
    fn mvs_examples() {
        assert_eq!(mvs_select([1.0; 4], 1.0, 0.5).unwrap(), vec![1, 1, 1, 1]);
        assert_eq!(
            mvs_select([2.0, 1e-12, 1e-12, 1e-12], 1.0, 0.5).unwrap(),
            vec![2, 0, 0, 0]
        );
        assert!(mvs_select([1.0], 0.0, 0.0).is_err());
        assert!(mvs_select([1.0], 1.0, 1.0).is_err());
    }

    #[test]
    fn total_weight_examples() {
        let ds = unit_dataset(17);
        let empty = StrongModel::empty(Lineage::new("a"));
        assert_eq!(total_weight_pass(&ds, &empty).unwrap(), 17.0);

        let one = MemoryDataset::from_dense(vec![(vec![1.0], 1)]);
        let m = empty
            .add_rule(Stump::new(0, 0.0, Polarity::Positive), 0.3)
            .unwrap();
        assert!((total_weight_pass(&one, &m).unwrap() - 0.5).abs() < 1e-15);

        assert!(total_weight_pass(&MemoryDataset::default(), &empty).is_err());
    }

    #[test]
    fn total_weight_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<(Vec<f32>, i8)> = (0..2000)
            .map(|_| (vec![rng.random_range(-3.0..3.0)], if rng.random::<bool>() { 1 } else { -1 }))
            .collect();
        let m = StrongModel::empty(Lineage::new("a"))
            .add_rule(Stump::new(0, 0.2, Polarity::Positive), 0.4)
            .unwrap();
        let a = total_weight_pass(&MemoryDataset::from_dense(rows.clone()), &m).unwrap();
        let mut rev = rows;
        rev.reverse();
        let b = total_weight_pass(&MemoryDataset::from_dense(rev), &m).unwrap();
        assert!((a - b).abs() / a <= 1e-9);
    }

    #[test]
    fn full_capacity_uniform_takes_everything_once() {
        let ds = unit_dataset(300);
        let m = StrongModel::empty(Lineage::new("a"));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = build_sample(&ds, &m, 300, &mut rng).unwrap();
        assert_eq!(s.len(), 300);
        let mut seen: Vec<f32> = s.records.iter().map(|r| r.x.to_dense()[0]).collect();
        seen.sort_by(f32::total_cmp);
        assert_eq!(seen, (0..300).map(|i| i as f32).collect::<Vec<_>>());
    }

    #[test]
    fn half_capacity_uniform() {
        let ds = unit_dataset(1000);
        let m = StrongModel::empty(Lineage::new("a"));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let s = build_sample(&ds, &m, 500, &mut rng).unwrap();
            assert!(s.len() == 500 || s.len() == 501, "{}", s.len());
            let mut seen: Vec<f32> = s.records.iter().map(|r| r.x.to_dense()[0]).collect();
            seen.sort_by(f32::total_cmp);
            seen.dedup();
            assert_eq!(seen.len(), s.len());
            let rel: Vec<f64> = s.records.iter().map(|r| r.relative_weight()).collect();
            assert_eq!(effective_sample_size(&rel).unwrap(), s.len() as f64);
            assert_eq!(s.loss_estimate(), 1.0);
        }
    }

    #[test]
    fn zero_capacity_rejected() {
        let ds = unit_dataset(3);
        let m = StrongModel::empty(Lineage::new("a"));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(build_sample(&ds, &m, 0, &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn multiplicities_within_one(
            ws in prop::collection::vec(1e-3f64..10.0, 1..300),
            cap in 1usize..400,
            u in 0.0f64..1.0,
        ) {
            let total: f64 = ws.iter().sum();
            let step = total / cap as f64;
            let counts = mvs_select(ws.iter().copied(), step, u * step).unwrap();
            for (w, k) in ws.iter().zip(&counts) {
                prop_assert!((*k as f64 - w / step).abs() < 1.0 + 1e-9);
            }
            let sum: usize = counts.iter().sum();
            prop_assert!((sum as f64 - total / step).abs() <= 1.0 + 1e-9);
        }
    }
}
