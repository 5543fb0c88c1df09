//! Iterative trajectory improvement by scoring pool candidates against
//! language feedback in the shared latent space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{dot, norm, EncoderPair, PoolEmbeddings};
use crate::simhuman::FeedbackSource;
use crate::world::TrajId;

/// How a candidate's latent change is scored against the utterance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// `psi . (phi' - phi0) / (|phi'| |phi0|)`.
    #[default]
    Printed,
    /// Cosine between `psi` and `phi' - phi0`.
    Cosine,
}

/// Score of moving from `phi0` to `phi_cand` under utterance `psi`, or
/// `None` when a norm in the denominator vanishes.
pub fn improvement_objective(phi_cand: &[f64], phi0: &[f64], psi: &[f64], objective: Objective) -> Option<f64> {
    let diff: Vec<f64> = phi_cand.iter().zip(phi0).map(|(c, o)| c - o).collect();
    let num = dot(psi, &diff);
    let den = match objective {
        Objective::Printed => norm(phi_cand) * norm(phi0),
        Objective::Cosine => {
            if diff.iter().all(|&x| x == 0.0) {
                // staying put is a zero-change candidate, not an undefined one
                return Some(0.0);
            }
            norm(&diff) * norm(psi)
        }
    };
    (den > 0.0).then(|| num / den)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImproveConfig {
    /// Feedback rounds per run.
    pub iterations: usize,
    /// Independent runs (random start and reward weights each).
    pub seeds: usize,
    pub objective: Objective,
    /// Exclude the previously shown trajectory from the candidates.
    pub tabu: bool,
}

impl Default for ImproveConfig {
    fn default() -> Self {
        ImproveConfig {
            iterations: 15,
            seeds: 100,
            objective: Objective::Printed,
            tabu: false,
        }
    }
}

impl ImproveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.seeds == 0 {
            return Err(Error::Config("improvement needs at least one iteration and one seed".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Choice {
    pub id: TrajId,
    pub objective: f64,
}

/// Best candidate for `psi` starting from `current`; the current trajectory
/// always competes and ties go to the lowest id.
pub fn improve_step(
    candidates: &PoolEmbeddings,
    current: TrajId,
    psi: &[f64],
    objective: Objective,
    exclude: Option<TrajId>,
) -> Result<Choice> {
    let phi0 = candidates
        .get(current)
        .ok_or_else(|| Error::Invalid(format!("current trajectory {current} has no embedding")))?;
    let mut best: Option<Choice> = None;
    let mut skipped = 0;
    for (id, phi) in candidates.iter() {
        if Some(id) == exclude && id != current {
            continue;
        }
        let Some(score) = improvement_objective(phi, phi0, psi, objective) else {
            skipped += 1;
            continue;
        };
        let better = match best {
            None => true,
            Some(b) => score > b.objective || (score == b.objective && id < b.id),
        };
        if better {
            best = Some(Choice { id, objective: score });
        }
    }
    if skipped > 0 {
        tracing::warn!(skipped, "candidates with zero-norm embeddings were skipped");
    }
    Ok(best.unwrap_or_else(|| {
        tracing::warn!(current, "no scorable candidate, keeping the current trajectory");
        Choice {
            id: current,
            objective: 0.0,
        }
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub iteration: usize,
    /// Trajectory the feedback was about (equal to `chosen` at iteration 0).
    pub shown: TrajId,
    pub utterance: Option<String>,
    pub chosen: TrajId,
    pub objective: f64,
    pub true_reward: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImprovementTrace {
    pub steps: Vec<TraceStep>,
    /// `false` when the feedback source failed before all rounds ran.
    pub complete: bool,
}

impl ImprovementTrace {
    /// Trajectory after each round, starting with the initial one.
    pub fn trajectories(&self) -> Vec<TrajId> {
        self.steps.iter().map(|s| s.chosen).collect()
    }
}

/// Runs `rounds` rounds of feedback and improvement from `start`. Rounds
/// where the source is satisfied keep the trajectory.
pub fn improve_loop(
    candidates: &PoolEmbeddings,
    enc: &EncoderPair,
    start: TrajId,
    source: &mut dyn FeedbackSource,
    rounds: usize,
    cfg: &ImproveConfig,
    true_reward: Option<&dyn Fn(TrajId) -> f64>,
) -> Result<ImprovementTrace> {
    if rounds == 0 {
        return Err(Error::Invalid("improvement needs at least one round".into()));
    }
    if candidates.get(start).is_none() {
        return Err(Error::Invalid(format!("start trajectory {start} has no embedding")));
    }
    let reward = |id| true_reward.map(|f| f(id));
    let mut steps = vec![TraceStep {
        iteration: 0,
        shown: start,
        utterance: None,
        chosen: start,
        objective: 0.0,
        true_reward: reward(start),
    }];
    let mut current = start;
    let mut previous: Option<TrajId> = None;
    for iteration in 1..=rounds {
        let feedback = match source.feedback(current) {
            Ok(f) => f,
            Err(e) => {
                tracing::warn!(iteration, error = %e, "feedback source failed, truncating trace");
                return Ok(ImprovementTrace { steps, complete: false });
            }
        };
        let (chosen, objective, utterance) = match feedback {
            None => (current, 0.0, None),
            Some(fb) => {
                let psi = enc.encode_text(&fb.text)?;
                let exclude = if cfg.tabu { previous } else { None };
                let c = improve_step(candidates, current, &psi, cfg.objective, exclude)?;
                (c.id, c.objective, Some(fb.text))
            }
        };
        steps.push(TraceStep {
            iteration,
            shown: current,
            utterance,
            chosen,
            objective,
            true_reward: reward(chosen),
        });
        if chosen != current {
            previous = Some(current);
        }
        current = chosen;
    }
    Ok(ImprovementTrace { steps, complete: true })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::error::Error;
    use crate::lang::{Catalog, Vocabulary};
    use crate::latent::LatentConfig;
    use crate::seed::rng_from_seed;
    use crate::simhuman::Feedback;

    fn pool(vecs: &[&[f64]]) -> PoolEmbeddings {
        PoolEmbeddings::new(vecs.iter().enumerate().map(|(i, v)| (i as TrajId, v.to_vec())).collect()).unwrap()
    }

    fn exhaustive(candidates: &PoolEmbeddings, current: TrajId, psi: &[f64], obj: Objective) -> Choice {
        let phi0 = candidates.get(current).unwrap();
        let mut scored: Vec<(TrajId, f64)> = candidates
            .iter()
            .filter_map(|(id, phi)| improvement_objective(phi, phi0, psi, obj).map(|s| (id, s)))
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        Choice { id: scored[0].0, objective: scored[0].1 }
    }

    fn encoder() -> EncoderPair {
        let vocab = Vocabulary::from_catalog(&Catalog::builtin());
        EncoderPair::new(&LatentConfig::default(), vocab, &mut rng_from_seed(3)).unwrap()
    }

    struct Fixed(&'static str);

    impl FeedbackSource for Fixed {
        fn feedback(&mut self, _: TrajId) -> Result<Option<Feedback>> {
            Ok(Some(Feedback::free_text(self.0)))
        }
    }

    struct Flaky {
        left: usize,
    }

    impl FeedbackSource for Flaky {
        fn feedback(&mut self, _: TrajId) -> Result<Option<Feedback>> {
            if self.left == 0 {
                return Err(Error::Invalid("gone".into()));
            }
            self.left -= 1;
            Ok(Some(Feedback::free_text("Move faster.")))
        }
    }

    struct Satisfied;

    impl FeedbackSource for Satisfied {
        fn feedback(&mut self, _: TrajId) -> Result<Option<Feedback>> {
            Ok(None)
        }
    }

    fn random_pool(n: usize, d: usize, seed: u64) -> PoolEmbeddings {
        let mut rng = rng_from_seed(seed);
        PoolEmbeddings::new(
            (0..n)
                .map(|i| (i as TrajId, (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn objective_hand_values() {
        let v = improvement_objective(&[0.0, 1.0], &[1.0, 0.0], &[0.0, 1.0], Objective::Printed).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        let v = improvement_objective(&[0.0, 2.0], &[1.0, 0.0], &[0.0, 1.0], Objective::Printed).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        let c = improvement_objective(&[0.0, 1.0], &[1.0, 0.0], &[0.0, 3.0], Objective::Cosine).unwrap();
        assert!((c - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_objectives() {
        assert_eq!(improvement_objective(&[0.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], Objective::Printed), None);
        assert_eq!(improvement_objective(&[1.0, 0.0], &[0.0, 0.0], &[1.0, 0.0], Objective::Printed), None);
        assert_eq!(improvement_objective(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 0.0], Objective::Cosine), Some(0.0));
        assert_eq!(improvement_objective(&[1.0, 2.0], &[1.0, 0.0], &[0.0, 0.0], Objective::Cosine), None);
    }

    #[test]
    fn three_candidates_by_hand() {
        let c = pool(&[&[1.0, 0.0], &[0.6, 0.8], &[0.0, 1.0]]);
        // scores from 0: 0, 0.8 - 0 = 0.8, 1.0
        let step = improve_step(&c, 0, &[0.0, 1.0], Objective::Printed, None).unwrap();
        assert_eq!(step.id, 2);
        assert!((step.objective - 1.0).abs() < 1e-12);
        let step = improve_step(&c, 0, &[0.0, 1.0], Objective::Printed, Some(2)).unwrap();
        assert_eq!(step.id, 1);
        let step = improve_step(&c, 2, &[0.0, -1.0], Objective::Printed, None).unwrap();
        assert_eq!(step.id, 0);
    }

    #[test]
    fn single_trajectory_pool_stays_put() {
        let c = pool(&[&[0.3, 0.4]]);
        let step = improve_step(&c, 0, &[1.0, 0.0], Objective::Printed, None).unwrap();
        assert_eq!(step, Choice { id: 0, objective: 0.0 });
        assert!(improve_step(&c, 7, &[1.0, 0.0], Objective::Printed, None).is_err());
    }

    #[test]
    fn unit_candidate_along_psi_wins() {
        let n = 24;
        let circle: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let a = i as f64 * std::f64::consts::TAU / n as f64;
                vec![a.cos(), a.sin()]
            })
            .collect();
        let refs: Vec<&[f64]> = circle.iter().map(Vec::as_slice).collect();
        let c = pool(&refs);
        for target in 0..n {
            let psi: Vec<f64> = circle[target].iter().map(|x| 2.5 * x).collect();
            let start = (target + n / 2) % n;
            let step = improve_step(&c, start as TrajId, &psi, Objective::Printed, None).unwrap();
            assert_eq!(step.id, target as TrajId);
        }
    }

    #[test]
    fn ties_go_to_lowest_id() {
        let c = pool(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]]);
        assert_eq!(improve_step(&c, 0, &[0.0, 1.0], Objective::Printed, None).unwrap().id, 1);
        let c = pool(&[&[0.0, 1.0], &[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(improve_step(&c, 2, &[0.0, 1.0], Objective::Printed, None).unwrap().id, 0);
    }

    #[test]
    fn zero_norm_candidates_are_skipped() {
        let c = pool(&[&[1.0, 0.0], &[0.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(improve_step(&c, 0, &[0.0, 1.0], Objective::Printed, None).unwrap().id, 2);
        let c = pool(&[&[0.0, 0.0], &[0.0, 1.0]]);
        let step = improve_step(&c, 0, &[0.0, 1.0], Objective::Printed, None).unwrap();
        assert_eq!(step, Choice { id: 0, objective: 0.0 });
    }

    #[test]
    fn fixed_utterance_climbs_psi_then_settles() {
        let enc = encoder();
        let c = random_pool(60, enc.d_z, 11);
        let psi = enc.encode_text("Move faster.").unwrap();
        let cfg = ImproveConfig::default();
        let trace = improve_loop(&c, &enc, 5, &mut Fixed("Move faster."), 20, &cfg, None).unwrap();
        assert!(trace.complete);
        assert_eq!(trace.steps.len(), 21);
        let proj: Vec<f64> = trace.trajectories().iter().map(|&id| dot(&psi, c.get(id).unwrap())).collect();
        for w in proj.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "{proj:?}");
        }
        let last = trace.trajectories()[20];
        assert_eq!(trace.trajectories()[19], last);
    }

    #[test]
    fn loop_records_rewards_and_utterances() {
        let enc = encoder();
        let c = random_pool(30, enc.d_z, 2);
        let reward = |id: TrajId| id as f64;
        let trace = improve_loop(&c, &enc, 3, &mut Fixed("Move slower."), 4, &ImproveConfig::default(), Some(&reward)).unwrap();
        assert_eq!(trace.steps[0].chosen, 3);
        assert_eq!(trace.steps[0].utterance, None);
        for (i, s) in trace.steps.iter().enumerate() {
            assert_eq!(s.iteration, i);
            assert_eq!(s.true_reward, Some(s.chosen as f64));
            if i > 0 {
                assert_eq!(s.shown, trace.steps[i - 1].chosen);
                assert_eq!(s.utterance.as_deref(), Some("Move slower."));
                assert!(s.objective >= 0.0);
            }
        }
    }

    #[test]
    fn failing_source_truncates() {
        let enc = encoder();
        let c = random_pool(20, enc.d_z, 4);
        let trace = improve_loop(&c, &enc, 0, &mut Flaky { left: 3 }, 10, &ImproveConfig::default(), None).unwrap();
        assert!(!trace.complete);
        assert_eq!(trace.steps.len(), 4);
    }

    #[test]
    fn satisfied_source_keeps_the_start() {
        let enc = encoder();
        let c = random_pool(20, enc.d_z, 4);
        let trace = improve_loop(&c, &enc, 9, &mut Satisfied, 5, &ImproveConfig::default(), None).unwrap();
        assert!(trace.complete);
        assert!(trace.trajectories().iter().all(|&id| id == 9));
        assert!(trace.steps[1..].iter().all(|s| s.utterance.is_none()));
    }

    #[test]
    fn tabu_never_returns_to_the_previous_trajectory() {
        let enc = encoder();
        let c = random_pool(40, enc.d_z, 8);
        let cfg = ImproveConfig { tabu: true, ..ImproveConfig::default() };
        let texts = ["Move faster.", "Move slower."];
        struct Alternate<'a>(&'a [&'static str], usize);
        impl FeedbackSource for Alternate<'_> {
            fn feedback(&mut self, _: TrajId) -> Result<Option<Feedback>> {
                self.1 += 1;
                Ok(Some(Feedback::free_text(self.0[self.1 % 2])))
            }
        }
        let trace = improve_loop(&c, &enc, 1, &mut Alternate(&texts, 0), 12, &cfg, None).unwrap();
        let ids = trace.trajectories();
        let mut previous = None;
        for w in ids.windows(2) {
            if w[1] != w[0] {
                assert_ne!(Some(w[1]), previous, "{ids:?}");
                previous = Some(w[0]);
            }
        }
    }

    #[test]
    fn loop_rejects_bad_inputs() {
        let enc = encoder();
        let c = random_pool(5, enc.d_z, 1);
        let cfg = ImproveConfig::default();
        assert!(improve_loop(&c, &enc, 0, &mut Satisfied, 0, &cfg, None).is_err());
        assert!(improve_loop(&c, &enc, 99, &mut Satisfied, 3, &cfg, None).is_err());
        assert!(ImproveConfig { iterations: 0, ..cfg.clone() }.validate().is_err());
        assert!(ImproveConfig { seeds: 0, ..cfg }.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn step_matches_exhaustive_scan(n in 1usize..100, d in 2usize..6, seed in 0u64..10_000, cosine in any::<bool>()) {
            let c = random_pool(n, d, seed);
            let mut rng = rng_from_seed(seed ^ 0xabc);
            let psi: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let current = rng.random_range(0..n) as TrajId;
            let obj = if cosine { Objective::Cosine } else { Objective::Printed };
            let got = improve_step(&c, current, &psi, obj, None).unwrap();
            prop_assert_eq!(got, exhaustive(&c, current, &psi, obj));
            prop_assert!(got.objective >= 0.0);
        }

        #[test]
        fn choice_is_invariant_to_psi_scale(n in 2usize..60, seed in 0u64..10_000, scale in 0.01f64..100.0) {
            let c = random_pool(n, 4, seed);
            let mut rng = rng_from_seed(seed);
            let psi: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let scaled: Vec<f64> = psi.iter().map(|x| x * scale).collect();
            let a = improve_step(&c, 0, &psi, Objective::Printed, None).unwrap();
            let b = improve_step(&c, 0, &scaled, Objective::Printed, None).unwrap();
            prop_assert_eq!(a.id, b.id);
        }
    }
}
