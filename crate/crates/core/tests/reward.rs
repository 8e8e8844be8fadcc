use irda_core::featurize::FeatureCatalog;
use irda_core::llm::{
    parse_feedback, Conversation, FeedbackItem, Hypothesis, LabelPair, LabelProbabilities, LlmBackend, ScriptedBackend,
    TurnKind,
};
use irda_core::oracle::{make_population, PopulationSpec};
use irda_core::reward::*;
use irda_core::session::{Pools, Session, SessionConfig};
use irda_core::stats::paired_comparison;
use irda_core::stimulus::EnvKind;
use irda_core::study::{labeled_items, record_population, simulate_population};
use irda_core::Error;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sessions(env: EnvKind, n: usize, seed: u64) -> (SessionConfig, Vec<Session>) {
    let mut spec = PopulationSpec::new(env, n, 0.5);
    spec.revision_fraction = 0.3;
    let users = make_population(seed, &spec).unwrap();
    let mut config = SessionConfig::new("pop", env);
    config.pool_seed = seed;
    let recorded = record_population(&users, &config, &ScriptedBackend::new(env)).unwrap();
    (config, recorded.into_iter().map(|(s, _)| s).collect())
}

#[test]
fn baseline_drops_two_turns_per_exchange() {
    for env in [EnvKind::AppleFarm, EnvKind::MoralMachine] {
        let (_, sessions) = sessions(env, 6, 3);
        for s in &sessions {
            let full = RewardModelContext::from_session(s).unwrap();
            let base = build_baseline_context(s).unwrap();
            assert!(!s.hypotheses.is_empty());
            assert_eq!(
                base.conversation.len() + 2 * s.hypotheses.len(),
                full.conversation.len()
            );
            assert!(base
                .conversation
                .turns()
                .iter()
                .all(|t| !matches!(t.kind, TurnKind::Hypothesis | TurnKind::Response)));
            assert_eq!(base.feedback.len(), full.feedback.len());
            for (b, f) in base.feedback.iter().zip(&full.feedback) {
                assert_eq!(
                    (&b.stimulus_id, &b.encoded, b.label),
                    (&f.stimulus_id, &f.encoded, f.label)
                );
            }
        }
    }
}

#[test]
fn baseline_explanations_never_mention_disclosed_features() {
    let env = EnvKind::MoralMachine;
    let catalog = FeatureCatalog::for_env(env);
    let (_, sessions) = sessions(env, 8, 4);
    let mut stripped_any = false;
    for s in &sessions {
        let disclosed = reflection_disclosed_features(s);
        let base = build_baseline_context(s).unwrap();
        for t in base
            .conversation
            .turns()
            .iter()
            .filter(|t| t.kind == TurnKind::Feedback)
        {
            let (_, explanation) = parse_feedback(&s.labels, &t.text).unwrap();
            assert!(catalog
                .mentioned_features(&explanation)
                .iter()
                .all(|f| !disclosed.contains(f)));
        }
        for (b, f) in base.feedback.iter().zip(&s.feedback) {
            if b.explanation != f.explanation {
                stripped_any = true;
                assert!(!disclosed.is_empty());
            }
        }
    }
    assert!(
        stripped_any,
        "some session should disclose a feature through reflection"
    );
}

#[test]
fn contexts_need_a_finished_session() {
    let env = EnvKind::AppleFarm;
    let config = SessionConfig::new("s", env);
    let pools = Pools::generate(&config).unwrap();
    let session = Session::start(&config, &pools, &mut Vec::new()).unwrap();
    assert!(matches!(
        RewardModelContext::from_session(&session),
        Err(Error::Phase(_))
    ));
    assert!(matches!(build_baseline_context(&session), Err(Error::Phase(_))));
}

#[test]
fn baseline_with_reflection_turns_is_rejected() {
    let (_, sessions) = sessions(EnvKind::AppleFarm, 2, 5);
    let mut ctx = RewardModelContext::from_session(&sessions[0]).unwrap();
    ctx.variant = Variant::Baseline;
    assert!(matches!(ctx.validate(), Err(Error::Validation(_))));
}

struct Constant(f64);

impl LlmBackend for Constant {
    fn query_label_probs(
        &self,
        _: &str,
        _: &Conversation,
        _: &str,
        _: &LabelPair,
    ) -> irda_core::Result<LabelProbabilities> {
        LabelProbabilities::from_masses(self.0, 1.0 - self.0)
    }

    fn generate_hypothesis(&self, _: &str, _: &[FeedbackItem]) -> irda_core::Result<Hypothesis> {
        Err(Error::Backend("not used".into()))
    }
}

#[test]
fn exact_tie_is_misaligned() {
    let (config, sessions) = sessions(EnvKind::MoralMachine, 2, 6);
    let pools = Pools::generate(&config).unwrap();
    let ctx = RewardModelContext::from_session(&sessions[0]).unwrap();
    let item = &pools.test[0];
    assert!(!reward(&ctx, &item.encode(), &Constant(0.5)).unwrap());
    assert!(reward(&ctx, &item.encode(), &Constant(0.51)).unwrap());
    assert!(!reward(&ctx, &item.encode(), &Constant(0.49)).unwrap());
}

/// Metric recomputed from the raw (label, predicted) pairs.
fn recount(predictions: &[Prediction], metric: Metric) -> f64 {
    let hits = |want: bool| {
        let of_class: Vec<_> = predictions.iter().filter(|p| p.label == want).collect();
        (of_class.iter().filter(|p| p.predicted == want).count(), of_class.len())
    };
    match metric {
        Metric::Accuracy => {
            predictions.iter().filter(|p| p.label == p.predicted).count() as f64 / predictions.len() as f64
        }
        Metric::BalancedAccuracy => {
            let rates: Vec<f64> = [true, false]
                .into_iter()
                .map(hits)
                .filter(|(_, n)| *n > 0)
                .map(|(h, n)| h as f64 / n as f64)
                .collect();
            rates.iter().sum::<f64>() / rates.len() as f64
        }
    }
}

#[test]
fn evaluation_recounts_and_ignores_order() {
    let env = EnvKind::AppleFarm;
    let (config, sessions) = sessions(env, 4, 7);
    let pools = Pools::generate(&config).unwrap();
    let users = make_population(7, &PopulationSpec::new(env, 4, 0.5)).unwrap();
    let backend = ScriptedBackend::new(env);
    for (s, u) in sessions.iter().zip(&users) {
        let test = labeled_items(u, &pools.test);
        for ctx in [
            RewardModelContext::from_session(s).unwrap(),
            build_baseline_context(s).unwrap(),
        ] {
            for metric in [Metric::Accuracy, Metric::BalancedAccuracy] {
                let e = evaluate(&ctx, &test, metric, &backend).unwrap();
                assert_eq!(e.predictions.len(), test.len());
                assert!((e.value - recount(&e.predictions, metric)).abs() < 1e-12);
                let mut shuffled = test.clone();
                shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
                let again = evaluate(&ctx, &shuffled, metric, &backend).unwrap();
                assert_eq!(again.value, e.value);
                assert_eq!(again.confusion, e.confusion);
            }
        }
    }
}

#[test]
fn evaluation_csv_and_empty_set() {
    let (config, sessions) = sessions(EnvKind::MoralMachine, 2, 8);
    let pools = Pools::generate(&config).unwrap();
    let users = make_population(8, &PopulationSpec::new(EnvKind::MoralMachine, 2, 0.5)).unwrap();
    let ctx = RewardModelContext::from_session(&sessions[0]).unwrap();
    let backend = ScriptedBackend::new(EnvKind::MoralMachine);
    assert!(evaluate(&ctx, &[], Metric::Accuracy, &backend).is_err());
    let test = labeled_items(&users[0], &pools.test);
    let e = evaluate(&ctx, &test, Metric::Accuracy, &backend).unwrap();
    let mut out = Vec::new();
    e.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().count(), test.len() + 1);
    assert!(text.starts_with("stimulus_id,label,predicted,p_aligned"));
}

#[test]
fn reflection_beats_baseline() {
    for env in [EnvKind::AppleFarm, EnvKind::MoralMachine] {
        let users = make_population(1, &PopulationSpec::new(env, 20, 0.5)).unwrap();
        let mut config = SessionConfig::new("pop", env);
        config.pool_seed = 1;
        let metric = irda_core::study::default_metric(env);
        let outcomes = simulate_population(&users, &config, metric, &ScriptedBackend::new(env)).unwrap();
        let irda: Vec<f64> = outcomes.iter().map(|o| o.irda.value).collect();
        let base: Vec<f64> = outcomes.iter().map(|o| o.baseline.value).collect();
        let c = paired_comparison(&irda, &base, 2000, 1).unwrap();
        let p = c.wilcoxon.unwrap().p_value;
        assert!(c.mean_delta >= 0.05, "{env:?}: delta {}", c.mean_delta);
        assert!(p < 0.05, "{env:?}: p {p}");
    }
}
