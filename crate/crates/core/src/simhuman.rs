//! Synthetic humans and the feedback-source interfaces the learning loops
//! consume.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lang::{Catalog, Direction, UtteranceClass};
use crate::reward::bt_prob;
use crate::world::{Features, TrajId, TrajectoryPool, FEATURE_COUNT};

/// One piece of comparative language feedback.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feedback {
    pub text: String,
    /// Catalog class of the text, when known.
    pub class: Option<UtteranceClass>,
}

impl Feedback {
    pub fn free_text(text: impl Into<String>) -> Self {
        Feedback {
            text: text.into(),
            class: None,
        }
    }
}

/// Produces language feedback about a shown trajectory. `Ok(None)` means
/// the source is satisfied and has nothing to add.
pub trait FeedbackSource {
    fn feedback(&mut self, shown: TrajId) -> Result<Option<Feedback>>;
}

/// Picks the preferred trajectory of a pair.
pub trait ChoiceSource {
    fn choose(&mut self, a: TrajId, b: TrajId) -> Result<TrajId>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HumanSpec {
    pub w: [f64; FEATURE_COUNT],
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_beta() -> f64 {
    1.0
}

impl HumanSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.beta)));
        }
        if self.w.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config(format!("weights must be finite, got {:?}", self.w)));
        }
        Ok(())
    }
}

/// A feedback generator that knows the true reward weights `w`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedHuman {
    pub w: [f64; FEATURE_COUNT],
    pub beta: f64,
    /// Best trajectory under `w` among the candidates it was built with.
    pub optimal: TrajId,
    pub optimal_features: Features,
}

impl SimulatedHuman {
    /// `candidates` defines where the optimum is looked up; ties go to
    /// the lowest id.
    pub fn new<'a>(spec: &HumanSpec, candidates: impl IntoIterator<Item = (TrajId, &'a Features)>) -> Result<Self> {
        spec.validate()?;
        let mut best: Option<(f64, TrajId, Features)> = None;
        for (id, f) in candidates {
            let r = f.dot(&spec.w);
            let better = match &best {
                None => true,
                Some((br, bid, _)) => r > *br || (r == *br && id < *bid),
            };
            if better {
                best = Some((r, id, *f));
            }
        }
        let (_, optimal, optimal_features) =
            best.ok_or_else(|| Error::Invalid("simulated human needs at least one candidate".into()))?;
        Ok(SimulatedHuman {
            w: spec.w,
            beta: spec.beta,
            optimal,
            optimal_features,
        })
    }

    pub fn from_pool(spec: &HumanSpec, pool: &TrajectoryPool) -> Result<Self> {
        SimulatedHuman::new(spec, pool.entries.iter().map(|e| (e.trajectory.id, &e.features)))
    }

    /// Probability of commenting on each feature. Features already equal to
    /// the optimum's have no direction to ask for and get probability zero;
    /// `None` when every feature matches.
    pub fn feature_probabilities(&self, current: &Features) -> Option<[f64; FEATURE_COUNT]> {
        let delta = current.delta(&self.optimal_features);
        let active: Vec<usize> = (0..FEATURE_COUNT).filter(|&d| delta[d] != 0.0).collect();
        if active.is_empty() {
            return None;
        }
        let logits: Vec<f64> = active.iter().map(|&d| self.beta * self.w[d] * delta[d]).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let mut p = [0.0; FEATURE_COUNT];
        for (&d, e) in active.iter().zip(&exps) {
            p[d] = e / total;
        }
        Some(p)
    }

    /// Samples a feature from the softmax and describes the change towards
    /// the optimum with a uniformly chosen paraphrase.
    pub fn language_feedback<R: Rng + ?Sized>(
        &self,
        current: &Features,
        catalog: &Catalog,
        rng: &mut R,
    ) -> Result<Option<Feedback>> {
        let Some(p) = self.feature_probabilities(current) else {
            return Ok(None);
        };
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut feature = None;
        for (d, pd) in p.iter().enumerate() {
            if *pd == 0.0 {
                continue;
            }
            acc += pd;
            feature = Some(d);
            if u < acc {
                break;
            }
        }
        let d = feature.expect("some feature has mass");
        let direction =
            Direction::of(self.optimal_features.get(d) - current.get(d)).expect("active features differ");
        let text = catalog
            .texts(d, direction)
            .choose(rng)
            .ok_or_else(|| Error::Invalid(format!("catalog has no text for feature {d} direction {direction}")))?;
        Ok(Some(Feedback {
            text: text.clone(),
            class: Some((d, direction)),
        }))
    }

    /// Probability of preferring `a` over `b`.
    pub fn choice_probability(&self, a: &Features, b: &Features) -> f64 {
        bt_prob(a.dot(&self.w), b.dot(&self.w))
    }

    /// Returns `true` when `a` is chosen.
    pub fn comparison_choice<R: Rng + ?Sized>(&self, a: &Features, b: &Features, rng: &mut R) -> bool {
        rng.random::<f64>() < self.choice_probability(a, b)
    }
}

/// A simulated human answering about trajectories of a pool.
pub struct SimulatedSource<'a, R> {
    pub human: &'a SimulatedHuman,
    pub pool: &'a TrajectoryPool,
    pub catalog: &'a Catalog,
    pub rng: R,
}

impl<'a, R> SimulatedSource<'a, R> {
    fn features(&self, id: TrajId) -> Result<Features> {
        self.pool
            .get(id)
            .map(|e| e.features)
            .ok_or_else(|| Error::Invalid(format!("trajectory {id} is not in the pool")))
    }
}

impl<R: Rng> FeedbackSource for SimulatedSource<'_, R> {
    fn feedback(&mut self, shown: TrajId) -> Result<Option<Feedback>> {
        let f = self.features(shown)?;
        self.human.language_feedback(&f, self.catalog, &mut self.rng)
    }
}

impl<R: Rng> ChoiceSource for SimulatedSource<'_, R> {
    fn choose(&mut self, a: TrajId, b: TrajId) -> Result<TrajId> {
        if a == b {
            return Err(Error::Invalid(format!("comparison needs two distinct trajectories, got {a} twice")));
        }
        let (fa, fb) = (self.features(a)?, self.features(b)?);
        Ok(if self.human.comparison_choice(&fa, &fb, &mut self.rng) { a } else { b })
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    use super::*;
    use crate::seed::rng_from_seed;
    use crate::world;

    fn human(w: [f64; 4], beta: f64, optimal: [f64; 4]) -> SimulatedHuman {
        SimulatedHuman {
            w,
            beta,
            optimal: 0,
            optimal_features: Features(optimal),
        }
    }

    fn chi_square_p(counts: &[usize], probs: &[f64]) -> f64 {
        let n: usize = counts.iter().sum();
        let mut stat = 0.0;
        let mut cells = 0;
        for (&c, &p) in counts.iter().zip(probs) {
            if p == 0.0 {
                assert_eq!(c, 0);
                continue;
            }
            let e = p * n as f64;
            stat += (c as f64 - e).powi(2) / e;
            cells += 1;
        }
        1.0 - ChiSquared::new((cells - 1) as f64).unwrap().cdf(stat)
    }

    fn sample_features(h: &SimulatedHuman, current: &Features, draws: usize, seed: u64) -> [usize; 4] {
        let catalog = Catalog::builtin();
        let mut rng = rng_from_seed(seed);
        let mut counts = [0; 4];
        for _ in 0..draws {
            let fb = h.language_feedback(current, &catalog, &mut rng).unwrap().unwrap();
            counts[fb.class.unwrap().0] += 1;
        }
        counts
    }

    #[test]
    fn empirical_feature_frequencies_follow_softmax() {
        let h = human([2.0, -1.0, 0.5, 3.0], 1.0, [0.8, 0.1, 0.6, 0.9]);
        let current = Features([0.2, 0.3, 0.1, 0.2]);
        let p = h.feature_probabilities(&current).unwrap();
        // v = w * (theta* - theta0)
        let v = [2.0 * 0.6, -1.0 * -0.2, 0.5 * 0.5, 3.0 * 0.7];
        let z: f64 = v.iter().map(|x: &f64| x.exp()).sum();
        for d in 0..4 {
            assert!((p[d] - v[d].exp() / z).abs() < 1e-12);
        }
        let counts = sample_features(&h, &current, 10_000, 1);
        assert!(chi_square_p(&counts, &p) > 0.01, "{counts:?} vs {p:?}");
    }

    #[test]
    fn equal_components_sample_uniformly() {
        let h = human([1.0, 1.0, 1.0, 1.0], 1.0, [0.5, 0.5, 0.5, 0.5]);
        let current = Features([0.3, 0.3, 0.3, 0.3]);
        let p = h.feature_probabilities(&current).unwrap();
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let counts = sample_features(&h, &current, 10_000, 2);
        assert!(chi_square_p(&counts, &p) > 0.01, "{counts:?}");
    }

    #[test]
    fn sharp_temperature_picks_the_largest_component() {
        let h = human([1.0, 1.0, 1.0, 1.0], 1e6, [0.5, 0.5, 0.5, 0.5]);
        let current = Features([0.3, 0.2, 0.3, 0.3]);
        let counts = sample_features(&h, &current, 10_000, 3);
        assert!(counts[world::SPEED] as f64 / 10_000.0 > 0.999, "{counts:?}");
    }

    #[test]
    fn direction_points_towards_the_optimum() {
        let catalog = Catalog::builtin();
        let mut rng = rng_from_seed(4);
        let h = human([0.0, 1.0, 0.0, 0.0], 1.0, [0.5, 0.05, 0.5, 0.5]);
        let current = Features([0.5, 0.3, 0.5, 0.5]);
        for _ in 0..200 {
            let fb = h.language_feedback(&current, &catalog, &mut rng).unwrap().unwrap();
            assert_eq!(fb.class, Some((world::SPEED, Direction::Decrease)));
            assert!(catalog.texts(world::SPEED, Direction::Decrease).contains(&fb.text));
        }
    }

    #[test]
    fn matching_the_optimum_is_a_no_op() {
        let catalog = Catalog::builtin();
        let f = [0.1, 0.2, 0.3, 0.4];
        let h = human([1.0, 2.0, 3.0, 4.0], 1.0, f);
        assert_eq!(h.language_feedback(&Features(f), &catalog, &mut rng_from_seed(0)).unwrap(), None);
    }

    #[test]
    fn choice_rates_match_bradley_terry() {
        let a = Features([0.0; 4]);
        for (w0, expected) in [(0.0, 0.5), (3f64.ln(), 0.75)] {
            let h = human([w0, 0.0, 0.0, 0.0], 1.0, [1.0, 0.0, 0.0, 0.0]);
            let b = Features([-1.0, 0.0, 0.0, 0.0]);
            assert!((h.choice_probability(&b, &a) - (1.0 - expected)).abs() < 1e-12);
            assert!((h.choice_probability(&a, &b) - expected).abs() < 1e-12);
            let mut rng = rng_from_seed(11);
            let n = 10_000;
            let hits = (0..n).filter(|_| h.comparison_choice(&a, &b, &mut rng)).count();
            let rate = hits as f64 / n as f64;
            let sigma = (expected * (1.0 - expected) / n as f64).sqrt();
            assert!((rate - expected).abs() < 0.02 && (rate - expected).abs() < 3.0 * sigma + 1e-9, "{rate}");
            let p = [expected, 1.0 - expected];
            assert!(chi_square_p(&[hits, n - hits], &p) > 0.01);
        }
    }

    #[test]
    fn optimum_is_the_pool_argmax() {
        let pool = world::generate_pool(&world::WorldConfig::default(), 64, 5).unwrap();
        let spec = HumanSpec { w: [1.0, -2.0, 0.5, 3.0], beta: 1.0 };
        let h = SimulatedHuman::from_pool(&spec, &pool).unwrap();
        let best = pool
            .entries
            .iter()
            .map(|e| e.features.dot(&spec.w))
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(pool.get(h.optimal).unwrap().features.dot(&spec.w), best);
        assert!(HumanSpec { w: spec.w, beta: 0.0 }.validate().is_err());
    }

    #[test]
    fn source_rejects_identical_pair() {
        let pool = world::generate_pool(&world::WorldConfig::default(), 16, 5).unwrap();
        let catalog = Catalog::builtin();
        let h = SimulatedHuman::from_pool(&HumanSpec { w: [1.0; 4], beta: 1.0 }, &pool).unwrap();
        let mut src = SimulatedSource { human: &h, pool: &pool, catalog: &catalog, rng: rng_from_seed(0) };
        assert!(src.choose(3, 3).is_err());
        let c = src.choose(3, 4).unwrap();
        assert!(c == 3 || c == 4);
        assert_eq!(src.feedback(h.optimal).unwrap(), None);
    }

    proptest! {
        #[test]
        fn probabilities_are_normalized(
            w in prop::array::uniform4(-5.0..5.0f64),
            opt in prop::array::uniform4(0.0..1.0f64),
            cur in prop::array::uniform4(0.0..1.0f64),
            beta in 0.01..100.0f64,
        ) {
            let h = human(w, beta, opt);
            if let Some(p) = h.feature_probabilities(&Features(cur)) {
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }

        #[test]
        fn every_utterance_moves_towards_the_optimum(
            w in prop::array::uniform4(-5.0..5.0f64),
            opt in prop::array::uniform4(0.0..1.0f64),
            cur in prop::array::uniform4(0.0..1.0f64),
            seed: u64,
        ) {
            let h = human(w, 1.0, opt);
            let catalog = Catalog::builtin();
            if let Some(fb) = h.language_feedback(&Features(cur), &catalog, &mut rng_from_seed(seed)).unwrap() {
                let (d, dir) = fb.class.unwrap();
                prop_assert!(dir.sign() * (opt[d] - cur[d]) > 0.0);
            }
        }

        #[test]
        fn bt_prob_is_complementary(x in -1e3..1e3f64, y in -1e3..1e3f64) {
            prop_assert!((bt_prob(x, y) + bt_prob(y, x) - 1.0).abs() < 1e-12);
        }
    }
}
