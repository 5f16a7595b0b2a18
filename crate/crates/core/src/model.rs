//! Additive margin model over decision stumps.
//!
//! A [`StrongModel`] is an ordered list of `(Stump, alpha)` pairs; its margin
//! on `x` is `sum_t alpha_t * h_t(x)` and the predicted class is the sign of
//! the margin. Models have value semantics: [`StrongModel::add_rule`] returns a
//! new model and leaves the receiver untouched.

use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureAccess;
use crate::stats::CompensatedSum;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "i8", into = "i8")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    #[inline]
    pub fn sign(self) -> f64 {
        match self {
            Polarity::Positive => 1.0,
            Polarity::Negative => -1.0,
        }
    }

    pub fn flip(self) -> Self {
        match self {
            Polarity::Positive => Polarity::Negative,
            Polarity::Negative => Polarity::Positive,
        }
    }
}

impl From<Polarity> for i8 {
    fn from(p: Polarity) -> i8 {
        match p {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }
}

impl TryFrom<i8> for Polarity {
    type Error = String;

    fn try_from(v: i8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Polarity::Positive),
            -1 => Ok(Polarity::Negative),
            other => Err(format!("polarity must be 1 or -1, got {other}")),
        }
    }
}

/// One-level decision rule: predicts `polarity` when `x[feature] > threshold`
/// and the opposite sign otherwise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stump {
    pub feature: usize,
    pub threshold: f64,
    pub polarity: Polarity,
}

impl Stump {
    pub fn new(feature: usize, threshold: f64, polarity: Polarity) -> Self {
        Stump {
            feature,
            threshold,
            polarity,
        }
    }

    /// Prediction for a single feature value, always exactly +1 or -1.
    #[inline]
    pub fn eval(&self, value: f32) -> f64 {
        if f64::from(value) > self.threshold {
            self.polarity.sign()
        } else {
            -self.polarity.sign()
        }
    }

    pub fn predict<X: FeatureAccess + ?Sized>(&self, x: &X) -> Result<f64> {
        if self.feature >= x.dim() {
            return Err(Error::Dimension {
                feature: self.feature,
                dim: x.dim(),
            });
        }
        Ok(self.eval(x.value(self.feature)))
    }

    pub fn flipped(&self) -> Self {
        Stump {
            polarity: self.polarity.flip(),
            ..*self
        }
    }
}

/// Identifier of a model's line of descent. Appending keeps it, replacing the
/// model wholesale generates a new one.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Lineage(Arc<str>);

impl Lineage {
    pub fn new(id: impl Into<String>) -> Self {
        Lineage(Arc::from(id.into()))
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Lineage::new(format!("{:016x}", rng.random::<u64>()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Lineage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightedRule {
    pub stump: Stump,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "ModelFile", try_from = "ModelFile")]
pub struct StrongModel {
    lineage: Lineage,
    rules: Vec<WeightedRule>,
}

impl StrongModel {
    pub fn empty(lineage: Lineage) -> Self {
        StrongModel {
            lineage,
            rules: Vec::new(),
        }
    }

    pub fn from_rules(lineage: Lineage, rules: Vec<WeightedRule>) -> Self {
        StrongModel { lineage, rules }
    }

    pub fn lineage(&self) -> &Lineage {
        &self.lineage
    }

    pub fn rules(&self) -> &[WeightedRule] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Same rules under a different lineage, used when a model replaces the
    /// local one wholesale.
    pub fn with_lineage(&self, lineage: Lineage) -> Self {
        StrongModel {
            lineage,
            rules: self.rules.clone(),
        }
    }

    /// Largest feature index referenced by any rule.
    pub fn max_feature(&self) -> Option<usize> {
        self.rules.iter().map(|r| r.stump.feature).max()
    }

    pub fn predict<X: FeatureAccess + ?Sized>(&self, x: &X) -> Result<f64> {
        self.partial_margin(x, 0)
    }

    /// Margin contributed by rules `from..len()`, summed left to right.
    pub fn partial_margin<X: FeatureAccess + ?Sized>(&self, x: &X, from: usize) -> Result<f64> {
        let mut margin = 0.0;
        for rule in self.rules.iter().skip(from) {
            margin += rule.alpha * rule.stump.predict(x)?;
        }
        Ok(margin)
    }

    pub fn add_rule(&self, stump: Stump, gamma: f64) -> Result<StrongModel> {
        let alpha = alpha_for_edge(gamma)?;
        let mut rules = Vec::with_capacity(self.rules.len() + 1);
        rules.extend_from_slice(&self.rules);
        rules.push(WeightedRule { stump, alpha });
        Ok(StrongModel {
            lineage: self.lineage.clone(),
            rules,
        })
    }

    /// Structural checks applied to models received from elsewhere.
    pub fn validate(&self, dim: Option<usize>) -> Result<()> {
        for (t, rule) in self.rules.iter().enumerate() {
            if !rule.alpha.is_finite() || !rule.stump.threshold.is_finite() {
                return Err(Error::Numeric(format!("rule {t} has a non-finite parameter")));
            }
            if let Some(d) = dim {
                if rule.stump.feature >= d {
                    return Err(Error::Dimension {
                        feature: rule.stump.feature,
                        dim: d,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<StrongModel> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<StrongModel> {
        StrongModel::from_json(&fs::read_to_string(path)?)
    }
}

// Persistence layout; field order is part of the file format.
#[derive(Serialize, Deserialize)]
struct ModelFile {
    lineage: String,
    rules: Vec<RuleEntry>,
}

#[derive(Serialize, Deserialize)]
struct RuleEntry {
    feature: usize,
    threshold: f64,
    polarity: Polarity,
    alpha: f64,
}

impl From<StrongModel> for ModelFile {
    fn from(m: StrongModel) -> Self {
        ModelFile {
            lineage: m.lineage.as_str().to_owned(),
            rules: m
                .rules
                .iter()
                .map(|r| RuleEntry {
                    feature: r.stump.feature,
                    threshold: r.stump.threshold,
                    polarity: r.stump.polarity,
                    alpha: r.alpha,
                })
                .collect(),
        }
    }
}

impl TryFrom<ModelFile> for StrongModel {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        let model = StrongModel {
            lineage: Lineage::new(f.lineage),
            rules: f
                .rules
                .into_iter()
                .map(|r| WeightedRule {
                    stump: Stump::new(r.feature, r.threshold, r.polarity),
                    alpha: r.alpha,
                })
                .collect(),
        };
        model.validate(None)?;
        Ok(model)
    }
}

/// Rule weight for a certified edge: `0.5 * ln((1/2 + gamma) / (1/2 - gamma))`.
pub fn alpha_for_edge(gamma: f64) -> Result<f64> {
    check_edge(gamma)?;
    Ok(0.5 * ((0.5 + gamma) / (0.5 - gamma)).ln())
}

fn check_edge(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 0.5 {
        Ok(())
    } else {
        Err(Error::domain(format!("edge must lie in (0, 1/2), got {gamma}")))
    }
}

/// Mean exponential loss `(1/n) sum_i exp(-y_i H(x_i))`.
pub fn exp_loss<'a, X, I>(model: &StrongModel, examples: I) -> Result<f64>
where
    X: FeatureAccess + ?Sized + 'a,
    I: IntoIterator<Item = (&'a X, f64)>,
{
    let mut sum = CompensatedSum::default();
    let mut n = 0usize;
    for (x, y) in examples {
        sum.add((-y * model.predict(x)?).exp());
        n += 1;
    }
    if n == 0 {
        return Err(Error::domain("exponential loss of an empty example list"));
    }
    Ok(sum.value() / n as f64)
}

/// Upper bound on the model's exponential loss carried with every broadcast.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct LossBound(f64);

impl LossBound {
    /// Loss of the empty model.
    pub const INITIAL: LossBound = LossBound(1.0);

    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && value <= 1.0 {
            Ok(LossBound(value))
        } else {
            Err(Error::domain(format!("loss bound must lie in (0, 1], got {value}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn update(self, gamma: f64) -> Result<LossBound> {
        update_loss_bound(self, gamma)
    }
}

impl Default for LossBound {
    fn default() -> Self {
        LossBound::INITIAL
    }
}

/// Contracts the bound by the potential factor `sqrt(1 - 4 gamma^2)`.
pub fn update_loss_bound(bound: LossBound, gamma: f64) -> Result<LossBound> {
    check_edge(gamma)?;
    Ok(LossBound(bound.0 * (1.0 - 4.0 * gamma * gamma).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lineage() -> Lineage {
        Lineage::new("test")
    }

    #[test]
    fn stump_predicts_sign() {
        let s = Stump::new(0, 0.5, Polarity::Positive);
        assert_eq!(s.predict(&[1.0f32][..]).unwrap(), 1.0);
        assert_eq!(s.predict(&[0.5f32][..]).unwrap(), -1.0);
        assert_eq!(s.flipped().predict(&[1.0f32][..]).unwrap(), -1.0);
    }

    #[test]
    fn stump_out_of_range_is_dimension_error() {
        let s = Stump::new(3, 0.0, Polarity::Positive);
        assert!(matches!(
            s.predict(&[1.0f32, 2.0][..]),
            Err(Error::Dimension { feature: 3, dim: 2 })
        ));
        let m = StrongModel::empty(lineage()).add_rule(s, 0.1).unwrap();
        assert!(m.predict(&[1.0f32][..]).is_err());
    }

    #[test]
    fn predict_examples() {
        let x = [1.0f32, -1.0];
        assert_eq!(StrongModel::empty(lineage()).predict(&x[..]).unwrap(), 0.0);
        let s1 = Stump::new(0, 0.0, Polarity::Positive);
        let s2 = Stump::new(1, 0.0, Polarity::Positive);
        let m = StrongModel::from_rules(
            lineage(),
            vec![
                WeightedRule { stump: s1, alpha: 0.5 },
                WeightedRule { stump: s2, alpha: 0.25 },
            ],
        );
        assert_eq!(m.predict(&x[..]).unwrap(), 0.25);
    }

    #[test]
    fn alpha_values() {
        assert!(alpha_for_edge(1e-9).unwrap() < 1e-8);
        assert!((alpha_for_edge(0.3).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((alpha_for_edge(0.1).unwrap() - 0.202_732_554_054_082_2).abs() < 1e-12);
        for bad in [0.0, -0.1, 0.5, 0.7, f64::NAN] {
            assert!(matches!(alpha_for_edge(bad), Err(Error::Domain(_))));
        }
    }

    #[test]
    fn add_rule_appends_and_keeps_lineage() {
        let m0 = StrongModel::empty(lineage());
        let m1 = m0.add_rule(Stump::new(0, 0.0, Polarity::Positive), 0.3).unwrap();
        assert_eq!(m0.len(), 0);
        assert_eq!(m1.len(), 1);
        assert!((m1.rules()[0].alpha - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(m1.lineage(), m0.lineage());
        assert!(m0.add_rule(m1.rules()[0].stump, 0.5).is_err());
    }

    #[test]
    fn exp_loss_examples() {
        let xs = [vec![1.0f32], vec![-1.0f32]];
        let data = [(&xs[0], 1.0), (&xs[1], -1.0)];
        let empty = StrongModel::empty(lineage());
        assert_eq!(exp_loss(&empty, data.iter().copied()).unwrap(), 1.0);

        // margin y*H(x) = ln 2 on both examples
        let m = empty.add_rule(Stump::new(0, 0.0, Polarity::Positive), 0.3).unwrap();
        assert!((exp_loss(&m, data.iter().copied()).unwrap() - 0.5).abs() < 1e-15);

        let neg = StrongModel::from_rules(
            lineage(),
            vec![WeightedRule {
                stump: Stump::new(0, 0.0, Polarity::Negative),
                alpha: 1.0,
            }],
        );
        let one = [(&xs[0], 1.0)];
        assert!((exp_loss(&neg, one).unwrap() - std::f64::consts::E).abs() < 1e-15);

        let none: [(&Vec<f32>, f64); 0] = [];
        assert!(matches!(exp_loss(&empty, none), Err(Error::Domain(_))));
    }

    #[test]
    fn loss_bound_updates() {
        let b = update_loss_bound(LossBound::INITIAL, 0.3).unwrap();
        assert!((b.value() - 0.8).abs() < 1e-15);
        let b = update_loss_bound(LossBound::new(0.5).unwrap(), 0.3).unwrap();
        assert!((b.value() - 0.4).abs() < 1e-15);
        let b = update_loss_bound(LossBound::INITIAL, 1e-4).unwrap();
        assert!(b.value() < 1.0 && b.value() > 1.0 - 1e-7);
        assert!(update_loss_bound(LossBound::INITIAL, 0.5).is_err());
        assert!(LossBound::new(0.0).is_err());
        assert!(LossBound::new(1.5).is_err());
    }

    #[test]
    fn json_layout() {
        let m = StrongModel::empty(Lineage::new("abc"))
            .add_rule(Stump::new(2, 0.25, Polarity::Negative), 0.1)
            .unwrap();
        let json = m.to_json().unwrap();
        assert!(json.starts_with(r#"{"lineage":"abc","rules":[{"feature":2,"threshold":0.25,"polarity":-1,"alpha":"#));
        assert_eq!(StrongModel::from_json(&json).unwrap(), m);
        assert!(StrongModel::from_json(r#"{"lineage":"a","rules":[{"feature":0,"threshold":0.0,"polarity":2,"alpha":1.0}]}"#).is_err());
    }

    fn arb_stump() -> impl Strategy<Value = Stump> {
        (0usize..4, -2.0f64..2.0, any::<bool>()).prop_map(|(f, t, p)| {
            Stump::new(f, t, if p { Polarity::Positive } else { Polarity::Negative })
        })
    }

    fn arb_model() -> impl Strategy<Value = StrongModel> {
        prop::collection::vec((arb_stump(), -3.0f64..3.0), 0..12).prop_map(|rules| {
            StrongModel::from_rules(
                Lineage::new("p"),
                rules
                    .into_iter()
                    .map(|(stump, alpha)| WeightedRule { stump, alpha })
                    .collect(),
            )
        })
    }

    proptest! {
        #[test]
        fn additivity_is_exact(
            m in arb_model(),
            s in arb_stump(),
            gamma in 1e-6f64..0.499,
            x in prop::collection::vec(-3.0f32..3.0, 4),
        ) {
            let extended = m.add_rule(s, gamma).unwrap();
            let before = m.predict(&x).unwrap();
            let after = extended.predict(&x).unwrap();
            prop_assert_eq!(after, before + alpha_for_edge(gamma).unwrap() * s.predict(&x).unwrap());
            prop_assert_eq!(extended.lineage(), m.lineage());
        }

        #[test]
        fn flipping_polarity_negates(s in arb_stump(), x in prop::collection::vec(-3.0f32..3.0, 4)) {
            prop_assert_eq!(s.flipped().predict(&x).unwrap(), -s.predict(&x).unwrap());
        }

        #[test]
        fn empty_model_loss_is_one(xs in prop::collection::vec((prop::collection::vec(-3.0f32..3.0, 4), any::<bool>()), 1..50)) {
            let m = StrongModel::empty(Lineage::new("e"));
            let data = xs.iter().map(|(x, b)| (x, if *b { 1.0 } else { -1.0 }));
            prop_assert_eq!(exp_loss(&m, data).unwrap(), 1.0);
        }

        #[test]
        fn bound_update_commutes(g1 in 1e-6f64..0.499, g2 in 1e-6f64..0.499, l in 1e-3f64..1.0) {
            let l = LossBound::new(l).unwrap();
            let a = l.update(g1).unwrap().update(g2).unwrap().value();
            let b = l.update(g2).unwrap().update(g1).unwrap().value();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs());
        }

        #[test]
        fn bound_update_strictly_decreasing_in_gamma(g1 in 1e-4f64..0.49, d in 1e-4f64..0.009) {
            let g2 = g1 + d;
            let a = LossBound::INITIAL.update(g1).unwrap().value();
            let b = LossBound::INITIAL.update(g2).unwrap().value();
            prop_assert!(b < a);
            prop_assert!(a < 1.0);
        }

        #[test]
        fn json_round_trip(m in arb_model()) {
            let back = StrongModel::from_json(&m.to_json().unwrap()).unwrap();
            prop_assert_eq!(back, m);
        }
    }

    #[test]
    fn random_lineages_differ() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_ne!(Lineage::random(&mut rng), Lineage::random(&mut rng));
    }
}
