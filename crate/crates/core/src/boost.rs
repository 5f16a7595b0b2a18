//! Exhaustive AdaBoost over the full dataset with exact edges. Used as a
//! reference for the sampled, early-stopped learner.

use crate::dataio::{MemoryDataset, RecordSource};
use crate::error::{Error, Result};
use crate::features::FeatureAccess;
use crate::model::{Lineage, LossBound, StrongModel};
use crate::scanner::{generate_candidates, TrainingRecord};
use crate::stats::CompensatedSum;

#[derive(Clone, Debug)]
pub struct BoostStep {
    pub model: StrongModel,
    /// Exact half-correlation of the chosen stump.
    pub gamma: f64,
    pub bound: f64,
    pub train_loss: f64,
}

/// Runs `iterations` rounds, each picking the candidate stump with the
/// largest exact edge under the current normalized weights.
pub fn full_information_boost(data: &MemoryDataset, bins: usize, iterations: usize) -> Result<Vec<BoostStep>> {
    if data.as_slice().is_empty() {
        return Err(Error::domain("dataset is empty"));
    }
    let empty = StrongModel::empty(Lineage::new("exact"));
    let records = data
        .as_slice()
        .iter()
        .map(|r| TrainingRecord::sampled(r.x.clone(), f64::from(r.y), &empty))
        .collect::<Result<Vec<_>>>()?;
    let features: Vec<usize> = (0..data.dim()).collect();
    let candidates = generate_candidates(&records, &features, bins);
    if candidates.is_empty() {
        return Err(Error::domain("no candidate stumps"));
    }
    // predictions[c][i] in {-1, +1}
    let predictions: Vec<Vec<f64>> = candidates
        .iter()
        .map(|s| records.iter().map(|r| s.eval(r.x.value(s.feature)) * r.y).collect())
        .collect();

    let n = records.len() as f64;
    let mut margins = vec![0.0f64; records.len()];
    let mut model = empty;
    let mut bound = LossBound::INITIAL;
    let mut steps = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let weights: Vec<f64> = records
            .iter()
            .zip(&margins)
            .map(|(r, m)| (-r.y * m).exp())
            .collect();
        let total: f64 = weights.iter().copied().collect::<CompensatedSum>().value();
        let (best, corr) = predictions
            .iter()
            .map(|yh| {
                weights
                    .iter()
                    .zip(yh)
                    .map(|(w, v)| w * v)
                    .collect::<CompensatedSum>()
                    .value()
                    / total
            })
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("candidates non-empty");
        let gamma = corr / 2.0;
        if gamma <= 0.0 || gamma >= 0.5 {
            break;
        }
        let stump = candidates[best];
        model = model.add_rule(stump, gamma)?;
        let alpha = model.rules().last().expect("just added").alpha;
        for (m, r) in margins.iter_mut().zip(&records) {
            *m += alpha * stump.eval(r.x.value(stump.feature));
        }
        bound = bound.update(gamma)?;
        let loss = records
            .iter()
            .zip(&margins)
            .map(|(r, m)| (-r.y * m).exp())
            .collect::<CompensatedSum>()
            .value()
            / n;
        steps.push(BoostStep {
            model: model.clone(),
            gamma,
            bound: bound.value(),
            train_loss: loss,
        });
    }
    Ok(steps)
}
