//! Sequential scan over the in-memory sample.
//!
//! Each visited record has its weight brought up to date with the current
//! model (incrementally when only rules were appended since the record was
//! last touched), and the relative weight `w / w_s` is fed to the edge
//! estimator for every candidate stump. The scan returns as soon as one
//! candidate's edge over the live target `gamma` is certified. The target is
//! halved after every `shrink_period` examples without a certification.

use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::{Error, Result};
use crate::features::{FeatureAccess, Features};
use crate::model::{Lineage, Polarity, StrongModel, Stump};
use crate::stats::{certify_fire, effective_sample_size, EdgeEstimator, StoppingConfig};

/// The model state a cached weight was computed against.
#[derive(Clone, Debug, PartialEq)]
pub struct Watermark {
    pub lineage: Lineage,
    pub rules: usize,
}

impl Watermark {
    pub fn of(model: &StrongModel) -> Self {
        Watermark {
            lineage: model.lineage().clone(),
            rules: model.len(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainingRecord {
    pub x: Features,
    /// +1.0 or -1.0
    pub y: f64,
    /// Raw weight at sampling time.
    pub w_s: f64,
    /// Raw weight `exp(-y H(x))` for the watermark model.
    pub w_l: f64,
    pub watermark: Watermark,
}

impl TrainingRecord {
    /// A freshly sampled record, weighted under `model`.
    pub fn sampled(x: Features, y: f64, model: &StrongModel) -> Result<Self> {
        let w = raw_weight(y, model.predict(&x)?)?;
        Ok(TrainingRecord {
            x,
            y,
            w_s: w,
            w_l: w,
            watermark: Watermark::of(model),
        })
    }

    pub fn relative_weight(&self) -> f64 {
        self.w_l / self.w_s
    }
}

pub(crate) fn raw_weight(y: f64, margin: f64) -> Result<f64> {
    let w = (-y * margin).exp();
    if w.is_finite() && w > 0.0 {
        Ok(w)
    } else {
        Err(Error::Numeric(format!(
            "example weight exp({}) is not representable",
            -y * margin
        )))
    }
}

/// Brings `record` up to date with `model` and returns its relative weight
/// `w / w_s`. Only the rules appended since the watermark are evaluated when
/// the lineage matches; otherwise the weight is recomputed from scratch.
pub fn update_weight(record: &mut TrainingRecord, model: &StrongModel) -> Result<f64> {
    let mark = &record.watermark;
    let w = if mark.lineage == *model.lineage() && mark.rules <= model.len() {
        if mark.rules == model.len() {
            record.w_l
        } else {
            let s = model.partial_margin(&record.x, mark.rules)?;
            let w = record.w_l * (-record.y * s).exp();
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::Numeric(format!("weight update overflowed ({w})")));
            }
            w
        }
    } else {
        raw_weight(record.y, model.predict(&record.x)?)?
    };
    record.w_l = w;
    if record.watermark.rules != model.len() || record.watermark.lineage != *model.lineage() {
        record.watermark = Watermark::of(model);
    }
    Ok(w / record.w_s)
}

/// Threshold stumps at the empirical quantiles of each feature over the
/// sample, both polarities. Ordered by feature, then threshold, positive
/// polarity first.
pub fn generate_candidates(sample: &[TrainingRecord], features: &[usize], bins: usize) -> Vec<Stump> {
    let mut out = Vec::new();
    if sample.is_empty() || bins < 2 {
        return out;
    }
    let n = sample.len();
    let mut values = Vec::with_capacity(n);
    for &f in features {
        values.clear();
        values.extend(
            sample
                .iter()
                .filter(|r| f < r.x.dim())
                .map(|r| r.x.value(f)),
        );
        if values.is_empty() {
            continue;
        }
        values.sort_by(|a, b| a.total_cmp(b));
        let max = *values.last().unwrap();
        let mut last: Option<f32> = None;
        for k in 1..bins {
            let idx = ((k * values.len()).div_ceil(bins)).saturating_sub(1);
            let t = values[idx.min(values.len() - 1)];
            if t >= max || last == Some(t) {
                continue;
            }
            last = Some(t);
            for polarity in [Polarity::Positive, Polarity::Negative] {
                out.push(Stump::new(f, f64::from(t), polarity));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub enum ScanOutcome {
    Found { resume_index: usize, stump: Stump, gamma: f64 },
    /// A full cycle ended with the target below the noise floor.
    Exhausted,
    Interrupted,
}

/// Resumable scan state: estimator sums, live target and position.
#[derive(Clone, Debug)]
pub struct Scanner {
    estimator: EdgeEstimator,
    gamma: f64,
    gamma_min: f64,
    start: usize,
    index: usize,
    since_shrink: usize,
    shrink_period: usize,
    cfg: StoppingConfig,
}

impl Scanner {
    /// `cfg` is applied per candidate as given; callers split the global
    /// failure probability beforehand.
    pub fn new(
        sample: &[TrainingRecord],
        candidates: &[Stump],
        gamma0: f64,
        shrink_period: usize,
        start: usize,
        cfg: StoppingConfig,
    ) -> Result<Self> {
        if sample.is_empty() {
            return Err(Error::domain("cannot scan an empty sample"));
        }
        if !(gamma0 > 0.0 && gamma0 < 0.5) {
            return Err(Error::domain(format!("initial edge must lie in (0, 1/2), got {gamma0}")));
        }
        if start >= sample.len() {
            return Err(Error::domain(format!(
                "start index {start} outside sample of {}",
                sample.len()
            )));
        }
        if shrink_period == 0 {
            return Err(Error::domain("shrink period must be positive"));
        }
        let dim = sample[0].x.dim();
        if let Some(bad) = candidates.iter().find(|c| c.feature >= dim) {
            return Err(Error::Dimension {
                feature: bad.feature,
                dim,
            });
        }
        let relative: Vec<f64> = sample.iter().map(TrainingRecord::relative_weight).collect();
        let n_eff = effective_sample_size(&relative)?;
        Ok(Scanner {
            estimator: EdgeEstimator::new(candidates.len()),
            gamma: gamma0,
            gamma_min: 1.0 / (4.0 * n_eff.sqrt()),
            start,
            index: start,
            since_shrink: 0,
            shrink_period,
            cfg,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn gamma_min(&self) -> f64 {
        self.gamma_min
    }

    pub fn estimator(&self) -> &EdgeEstimator {
        &self.estimator
    }

    pub fn scanned(&self) -> u64 {
        self.estimator.count()
    }

    /// Scans until an outcome is reached or `budget` examples have been
    /// processed, in which case `Ok(None)` is returned and the scan can be
    /// resumed later with the same sample, model and candidates.
    pub fn resume(
        &mut self,
        sample: &mut [TrainingRecord],
        model: &StrongModel,
        candidates: &[Stump],
        interrupt: &AtomicBool,
        budget: Option<u64>,
    ) -> Result<Option<ScanOutcome>> {
        let n = sample.len();
        let mut used = 0u64;
        loop {
            if interrupt.load(Ordering::Acquire) {
                return Ok(Some(ScanOutcome::Interrupted));
            }
            if budget.is_some_and(|b| used >= b) {
                return Ok(None);
            }
            used += 1;

            let record = &mut sample[self.index];
            let w = update_weight(record, model)?;
            self.estimator.observe(w);
            let wy = w * record.y;
            for (i, c) in candidates.iter().enumerate() {
                self.estimator.accumulate(i, wy * c.eval(record.x.value(c.feature)));
            }
            self.index = (self.index + 1) % n;
            self.since_shrink += 1;

            if let Some(cert) = certify_fire(&self.estimator, self.gamma, &self.cfg) {
                return Ok(Some(ScanOutcome::Found {
                    resume_index: self.index,
                    stump: candidates[cert.candidate],
                    gamma: cert.gamma,
                }));
            }
            if self.since_shrink >= self.shrink_period {
                self.gamma /= 2.0;
                self.since_shrink = 0;
            }
            if self.index == self.start && self.gamma < self.gamma_min {
                return Ok(Some(ScanOutcome::Exhausted));
            }
        }
    }
}

/// Runs a scan to completion.
#[allow(clippy::too_many_arguments)]
pub fn scan(
    sample: &mut [TrainingRecord],
    model: &StrongModel,
    candidates: &[Stump],
    gamma0: f64,
    shrink_period: usize,
    start: usize,
    interrupt: &AtomicBool,
    cfg: &StoppingConfig,
) -> Result<ScanOutcome> {
    let mut scanner = Scanner::new(sample, candidates, gamma0, shrink_period, start, *cfg)?;
    let outcome = scanner.resume(sample, model, candidates, interrupt, None)?;
    Ok(outcome.expect("unbounded scan always yields an outcome"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::WeightedRule;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn record(x: Vec<f32>, y: f64, model: &StrongModel) -> TrainingRecord {
        TrainingRecord::sampled(Features::Dense(x), y, model).unwrap()
    }

    fn random_stump(rng: &mut ChaCha8Rng, dim: usize) -> Stump {
        let p = if rng.random::<bool>() {
            Polarity::Positive
        } else {
            Polarity::Negative
        };
        Stump::new(rng.random_range(0..dim), rng.random_range(-1.0..1.0), p)
    }

    #[test]
    fn unchanged_model_keeps_weight() {
        let m = StrongModel::empty(Lineage::new("a"))
            .add_rule(Stump::new(0, 0.0, Polarity::Positive), 0.1)
            .unwrap();
        let mut r = record(vec![1.0], 1.0, &m);
        r.w_s = 2.0 * r.w_l;
        let rel = update_weight(&mut r, &m).unwrap();
        assert_eq!(rel, 0.5);
    }

    #[test]
    fn incremental_step_by_hand() {
        let m0 = StrongModel::empty(Lineage::new("a"));
        let mut r = record(vec![1.0], 1.0, &m0);
        r.w_l = 2.0;
        r.w_s = 1.0;
        // new rule contributes margin ln 2 on this record
        let m1 = m0.add_rule(Stump::new(0, 0.0, Polarity::Positive), 0.3).unwrap();
        let rel = update_weight(&mut r, &m1).unwrap();
        assert!((r.w_l - 1.0).abs() < 1e-15);
        assert!((rel - 1.0).abs() < 1e-15);
        assert_eq!(r.watermark, Watermark::of(&m1));
    }

    #[test]
    fn lineage_change_recomputes() {
        let m0 = StrongModel::empty(Lineage::new("a"))
            .add_rule(Stump::new(0, 0.0, Polarity::Positive), 0.3)
            .unwrap();
        let mut r = record(vec![1.0], 1.0, &m0);
        // same rule count, different content and lineage
        let other = StrongModel::empty(Lineage::new("b"))
            .add_rule(Stump::new(0, 0.0, Polarity::Negative), 0.3)
            .unwrap();
        update_weight(&mut r, &other).unwrap();
        assert!((r.w_l - 2.0).abs() < 1e-15);
    }

    #[test]
    fn overflow_is_numeric_error() {
        let m0 = StrongModel::empty(Lineage::new("a"));
        let mut r = record(vec![1.0], -1.0, &m0);
        let big = StrongModel::from_rules(
            Lineage::new("a"),
            vec![WeightedRule {
                stump: Stump::new(0, 0.0, Polarity::Positive),
                alpha: 1000.0,
            }],
        );
        assert!(matches!(update_weight(&mut r, &big), Err(Error::Numeric(_))));
    }

    #[test]
    fn incremental_matches_scratch() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dim = 5;
        for _ in 0..1000 {
            let mut model = StrongModel::empty(Lineage::random(&mut rng));
            for _ in 0..rng.random_range(0..5) {
                model = model
                    .add_rule(random_stump(&mut rng, dim), rng.random_range(0.01..0.45))
                    .unwrap();
            }
            let x: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let mut r = record(x.clone(), y, &model);
            for _ in 0..rng.random_range(1..4) {
                for _ in 0..rng.random_range(0..4) {
                    model = model
                        .add_rule(random_stump(&mut rng, dim), rng.random_range(0.01..0.45))
                        .unwrap();
                }
                update_weight(&mut r, &model).unwrap();
            }
            let scratch = (-y * model.predict(&x).unwrap()).exp();
            assert!((r.w_l - scratch).abs() / scratch <= 1e-9);
        }
    }

    #[test]
    fn candidates_are_quantile_stumps() {
        let m = StrongModel::empty(Lineage::new("a"));
        let sample: Vec<_> = (0..100)
            .map(|i| record(vec![i as f32, 5.0], 1.0, &m))
            .collect();
        let c = generate_candidates(&sample, &[0, 1], 4);
        // feature 1 is constant and yields nothing
        assert_eq!(c.len(), 6);
        let thresholds: Vec<f64> = c.iter().step_by(2).map(|s| s.threshold).collect();
        assert_eq!(thresholds, vec![24.0, 49.0, 74.0]);
        assert_eq!(c[0].polarity, Polarity::Positive);
        assert_eq!(c[1], c[0].flipped());
    }

    fn correlated_sample(n: usize, model: &StrongModel) -> Vec<TrainingRecord> {
        (0..n)
            .map(|i| {
                let y = if i % 2 == 0 { 1.0 } else { -1.0 };
                record(vec![y as f32], y, model)
            })
            .collect()
    }

    #[test]
    fn perfect_candidate_fires_quickly() {
        let m = StrongModel::empty(Lineage::new("a"));
        let mut sample = correlated_sample(1000, &m);
        let cands = vec![
            Stump::new(0, 0.0, Polarity::Negative),
            Stump::new(0, 0.0, Polarity::Positive),
        ];
        let cfg = StoppingConfig::new(1.0, 0.1).unwrap();
        let flag = AtomicBool::new(false);
        let mut scanner = Scanner::new(&sample, &cands, 0.25, 1000, 0, cfg).unwrap();
        let out = scanner.resume(&mut sample, &m, &cands, &flag, None).unwrap().unwrap();
        match out {
            ScanOutcome::Found { stump, gamma, resume_index } => {
                assert_eq!(stump, cands[1]);
                assert_eq!(gamma, 0.25);
                assert!(resume_index <= 200);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(scanner.scanned() <= 200);
    }

    #[test]
    fn zero_edge_exhausts() {
        let m = StrongModel::empty(Lineage::new("a"));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut sample: Vec<_> = (0..400)
            .map(|_| {
                let y = if rng.random::<bool>() { 1.0 } else { -1.0 };
                record(vec![rng.random_range(-1.0..1.0)], y, &m)
            })
            .collect();
        // constant-threshold candidates that see every label
        let cands = vec![
            Stump::new(0, -10.0, Polarity::Positive),
            Stump::new(0, -10.0, Polarity::Negative),
        ];
        let cfg = StoppingConfig::new(1.0, 1e-3).unwrap();
        let flag = AtomicBool::new(false);
        let out = scan(&mut sample, &m, &cands, 0.25, 400, 0, &flag, &cfg).unwrap();
        assert_eq!(out, ScanOutcome::Exhausted);
    }

    #[test]
    fn interrupt_before_first_example() {
        let m = StrongModel::empty(Lineage::new("a"));
        let mut sample = correlated_sample(100, &m);
        let cands = vec![Stump::new(0, 0.0, Polarity::Positive)];
        let flag = AtomicBool::new(true);
        let mut scanner =
            Scanner::new(&sample, &cands, 0.25, 100, 0, StoppingConfig::default()).unwrap();
        let out = scanner.resume(&mut sample, &m, &cands, &flag, None).unwrap();
        assert_eq!(out, Some(ScanOutcome::Interrupted));
        assert_eq!(scanner.scanned(), 0);
        assert_eq!(scanner.estimator().sum_abs_weight(), 0.0);
    }

    #[test]
    fn gamma_halves_each_period() {
        let m = StrongModel::empty(Lineage::new("a"));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut sample: Vec<_> = (0..1000)
            .map(|_| {
                let y = if rng.random::<bool>() { 1.0 } else { -1.0 };
                record(vec![0.0], y, &m)
            })
            .collect();
        let cands = vec![Stump::new(0, 10.0, Polarity::Positive)];
        let cfg = StoppingConfig::new(1.0, 1e-6).unwrap();
        let flag = AtomicBool::new(false);
        let mut scanner = Scanner::new(&sample, &cands, 0.25, 100, 0, cfg).unwrap();
        for k in 1..=5 {
            let out = scanner
                .resume(&mut sample, &m, &cands, &flag, Some(100))
                .unwrap();
            if out.is_some() {
                break;
            }
            assert_eq!(scanner.gamma(), 0.25 / f64::powi(2.0, k));
        }
    }

    #[test]
    fn scan_is_deterministic_and_coherent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = StrongModel::empty(Lineage::new("a"));
        let sample: Vec<_> = (0..500)
            .map(|_| {
                let x: Vec<f32> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                let y = if x[0] + 0.3 * rng.random_range(-1.0f32..1.0) > 0.0 { 1.0 } else { -1.0 };
                record(x, y, &base)
            })
            .collect();
        let model = base
            .add_rule(Stump::new(1, 0.1, Polarity::Positive), 0.05)
            .unwrap();
        let cands = generate_candidates(&sample, &[0, 1, 2], 8);
        let cfg = StoppingConfig::new(1.0, 0.05).unwrap().per_candidate(cands.len());
        let flag = AtomicBool::new(false);
        let run = || {
            let mut s = sample.clone();
            let mut scanner = Scanner::new(&s, &cands, 0.25, 500, 7, cfg).unwrap();
            let out = scanner.resume(&mut s, &model, &cands, &flag, None).unwrap();
            (out, s, scanner)
        };
        let (a, sa, scanner) = run();
        let (b, _, _) = run();
        assert_eq!(a, b);
        assert!(matches!(a, Some(ScanOutcome::Found { .. })));

        let mut visited_w = 0.0;
        for r in sa.iter().filter(|r| r.watermark.rules == model.len()) {
            let scratch = (-r.y * model.predict(&r.x).unwrap()).exp();
            assert!((r.w_l - scratch).abs() / scratch <= 1e-9);
            visited_w += r.relative_weight();
        }
        let w = scanner.estimator().sum_abs_weight();
        assert!((w - visited_w).abs() / w <= 1e-9);
    }
}
