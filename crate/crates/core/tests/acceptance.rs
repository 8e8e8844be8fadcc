//! Acceptance suite: one PASS/FAIL line per criterion, then a summary.
//!
//! Runs with the scripted backend only. Exits 0 whatever the outcome so the
//! report is always printed in full; the pass count is in the last line.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use irda_core::alignment::{run_session, score_uncertainty, SimulatedParticipant};
use irda_core::llm::{LlmBackend, ScriptedBackend};
use irda_core::mlp::{build_curves, gradient_check, train, CurveConfig, Mlp};
use irda_core::oracle::{make_population, PopulationSpec};
use irda_core::sampling::kmeans;
use irda_core::session::{read_log, Event, EventSink, JsonlSink, Pools, Record, Session, SessionConfig};
use irda_core::stats::{
    bootstrap_ci, fleiss_kappa, jaccard, paired_comparison, wilcoxon_signed_rank, LabelMatrix, WilcoxonMethod,
};
use irda_core::stimulus::EnvKind;
use irda_core::study::{agreement_gradient, default_metric, simulate_population};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

static BACKEND_FAILED: AtomicBool = AtomicBool::new(false);

fn err(e: irda_core::Error) -> String {
    if matches!(e, irda_core::Error::Backend(_)) {
        BACKEND_FAILED.store(true, Ordering::SeqCst);
    }
    e.to_string()
}

fn statistics_exactness() -> Outcome {
    let perfect = LabelMatrix::new(vec![vec![true; 3], vec![false; 3]]).map_err(err)?;
    let k1 = fleiss_kappa(&perfect);
    ensure((k1 - 1.0).abs() < 1e-9, format!("perfect agreement gave kappa {k1}"))?;
    let split = LabelMatrix::new(vec![vec![true, true], vec![true, false]]).map_err(err)?;
    let k2 = fleiss_kappa(&split);
    ensure((k2 + 1.0 / 3.0).abs() < 1e-9, format!("two-item case gave kappa {k2}"))?;

    let universe: Vec<u8> = (0..4).collect();
    for a in 0u32..16 {
        for b in 0u32..16 {
            let sa: BTreeSet<u8> = universe.iter().copied().filter(|i| a >> i & 1 == 1).collect();
            let sb: BTreeSet<u8> = universe.iter().copied().filter(|i| b >> i & 1 == 1).collect();
            let (inter, union) = ((a & b).count_ones(), (a | b).count_ones());
            let expected = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
            ensure(jaccard(&sa, &sb) == expected, format!("jaccard({a:04b}, {b:04b})"))?;
        }
    }

    let w = wilcoxon_signed_rank(&[(1.0, 0.0), (2.0, 0.0), (3.0, 0.0)]).map_err(err)?;
    // |W+ - 3| >= 3 holds for the all-plus and all-minus patterns: 2 of 8
    let patterns = (0..8u32)
        .filter(|m| {
            let w_plus: u32 = (0..3).filter(|i| m >> i & 1 == 1).map(|i| i + 1).sum();
            w_plus.abs_diff(3) >= 3
        })
        .count();
    let enumerated = patterns as f64 / 8.0;
    ensure(
        w.method == WilcoxonMethod::Exact && (w.p_value - 0.25).abs() < 1e-12 && enumerated == 0.25,
        format!("wilcoxon p {} (enumerated {enumerated})", w.p_value),
    )?;

    let degenerate = bootstrap_ci(&[0.7; 12], 10_000, 0.95, 0).map_err(err)?;
    ensure(
        degenerate.low == 0.7 && degenerate.high == 0.7,
        "degenerate bootstrap CI is not (v, v)",
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let trials = 500;
    let mut covered = 0;
    for t in 0..trials {
        let sample: Vec<f64> = (0..100)
            .map(|_| {
                let u1: f64 = 1.0 - rng.random::<f64>();
                let u2: f64 = rng.random();
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        let ci = bootstrap_ci(&sample, 2_000, 0.95, t).map_err(err)?;
        if ci.low <= 0.0 && 0.0 <= ci.high {
            covered += 1;
        }
    }
    let rate = covered as f64 / trials as f64;
    ensure((0.92..=0.98).contains(&rate), format!("95% CI coverage {rate:.3}"))?;
    Ok(format!("kappa 1 and -1/3, p = 0.25, coverage {:.1}%", 100.0 * rate))
}

fn log_bytes(records: &[Record]) -> Result<Vec<u8>, String> {
    let mut sink = JsonlSink::new(Vec::new());
    for r in records {
        sink.record(r).map_err(err)?;
    }
    Ok(sink.into_inner())
}

fn algorithm_invariants() -> Outcome {
    let mut selections = 0;
    let mut sessions = 0;
    for env in [EnvKind::AppleFarm, EnvKind::MoralMachine] {
        let backend = ScriptedBackend::new(env);
        let users = make_population(0, &PopulationSpec::new(env, 5, 0.5)).map_err(err)?;
        // the 0.2 fixture exercises the threshold, 0.0 forces the full budget
        for (epsilon, user) in [0.2, 0.0].into_iter().flat_map(|e| users.iter().map(move |u| (e, u))) {
            let mut config = SessionConfig::new("acceptance", env);
            config.epsilon = epsilon;
            config.budget = 10;
            let pools = Pools::generate(&config).map_err(err)?;
            let run = || -> Result<(Session, Vec<Record>), String> {
                let mut log = Vec::new();
                let mut session = Session::start(&config, &pools, &mut log).map_err(err)?;
                let mut participant = SimulatedParticipant::new(user.clone());
                run_session(&mut session, &pools, &mut participant, &backend, &mut log).map_err(err)?;
                Ok((session, log))
            };
            let (session, log) = run()?;
            sessions += 1;

            let mut last_best = None;
            for (i, record) in log.iter().enumerate() {
                let Event::Selection { selection } = &record.event else {
                    continue;
                };
                let before = Session::replay(&log[..i]).map_err(err)?;
                let mut best: Option<(f64, &str)> = None;
                for id in &before.uncertainty_pool {
                    let encoded = pools.require(id).map_err(err)?.encode();
                    let p = backend
                        .query_label_probs(&env.env_description(), &before.conversation, &encoded, &before.labels)
                        .map_err(err)?;
                    let u = score_uncertainty(&p);
                    if best.is_none_or(|(b, _)| u > b) {
                        best = Some((u, id));
                    }
                }
                let (u, id) = best.ok_or("selection from an empty pool")?;
                ensure(
                    selection.stimulus_id == id && selection.uncertainty == u,
                    format!(
                        "{}: selected {} but rescan gives {id}",
                        session.id(),
                        selection.stimulus_id
                    ),
                )?;
                selections += 1;
            }
            for record in &log {
                if let Event::UncertaintyScores { scores } = &record.event {
                    last_best = scores.iter().map(|s| s.uncertainty).reduce(f64::max);
                }
            }
            let halted = session.uncertainty_iterations == config.budget
                || session.uncertainty_pool.is_empty()
                || last_best.is_some_and(|u| u < config.epsilon);
            ensure(
                halted,
                format!("{} stopped without meeting a halting condition", user.id),
            )?;

            let bytes = log_bytes(&log)?;
            let parsed = read_log(bytes.as_slice()).map_err(err)?;
            ensure(
                Session::replay(&parsed).map_err(err)? == session,
                "replayed session differs",
            )?;
            ensure(log_bytes(&parsed)? == bytes, "re-serialized log differs")?;
            ensure(log_bytes(&run()?.1)? == bytes, "second run wrote a different log")?;
        }
    }
    ensure(
        selections > 0,
        "no uncertainty iteration happened, the argmax check is vacuous",
    )?;
    Ok(format!(
        "{sessions} sessions, {selections} selections rescanned, logs byte-identical"
    ))
}

fn reflection_benefit() -> Outcome {
    let mut parts = Vec::new();
    let mut failures = Vec::new();
    for env in [EnvKind::AppleFarm, EnvKind::MoralMachine] {
        let users = make_population(1, &PopulationSpec::new(env, 20, 0.5)).map_err(err)?;
        ensure(
            users.iter().all(|u| !u.latent_features().is_empty()),
            "a user has no latent feature",
        )?;
        let mut config = SessionConfig::new("acceptance", env);
        config.pool_seed = 1;
        config.cluster_seed = 1;
        ensure(config.test_size == 50, "test set is not 50 items")?;
        let metric = default_metric(env);
        let outcomes = simulate_population(&users, &config, metric, &ScriptedBackend::new(env)).map_err(err)?;
        let irda: Vec<f64> = outcomes.iter().map(|o| o.irda.value).collect();
        let base: Vec<f64> = outcomes.iter().map(|o| o.baseline.value).collect();
        let c = paired_comparison(&irda, &base, 10_000, 1).map_err(err)?;
        let p = c.wilcoxon.map_or(1.0, |w| w.p_value);
        let summary = format!("{}: +{:.1} points, p = {p:.4}", env.name(), 100.0 * c.mean_delta);
        if c.mean_delta < 0.05 || p >= 0.05 {
            failures.push(summary.clone());
        }
        parts.push(summary);
    }
    if failures.is_empty() {
        Ok(parts.join("; "))
    } else {
        Err(parts.join("; "))
    }
}

fn curves(env: EnvKind, heterogeneity: f64, seed: u64) -> Result<(Vec<f64>, Vec<f64>), String> {
    let users = make_population(seed, &PopulationSpec::new(env, 21, heterogeneity)).map_err(err)?;
    let mut config = SessionConfig::new("acceptance", env);
    config.pool_seed = seed;
    let pools = Pools::generate(&config).map_err(err)?;
    let curve_config = CurveConfig::new(default_metric(env), seed);
    let (ind, col) = build_curves(&users, &pools.design, &pools.test, &curve_config).map_err(err)?;
    let means = |c: &irda_core::mlp::TrainingCurve| c.sample_counts.iter().map(|&n| c.mean_at(n).unwrap()).collect();
    Ok((means(&ind), means(&col)))
}

fn heterogeneity_curves() -> Outcome {
    let mut notes = Vec::new();
    let mut failures = Vec::new();

    let (ind, col) = curves(EnvKind::AppleFarm, 1.0, 0)?;
    let (i30, c30) = (ind[29], col[29]);
    let note = format!(
        "h=1 applefarm n=30: individual {:.1}%, collective {:.1}%, gap {:.1} points",
        100.0 * i30,
        100.0 * c30,
        100.0 * (i30 - c30)
    );
    if i30 - c30 < 0.05 || c30 > 0.55 {
        failures.push(note.clone());
    }
    notes.push(note);

    for env in [EnvKind::AppleFarm, EnvKind::MoralMachine] {
        let (ind, col) = curves(env, 0.0, 0)?;
        let worst = (0..10).map(|i| col[i] - ind[i]).fold(f64::INFINITY, f64::min);
        let note = format!(
            "h=0 {}: min collective - individual over n<=10 = {:.1} points",
            env.name(),
            100.0 * worst
        );
        if worst < -0.02 {
            failures.push(note.clone());
        }
        notes.push(note);
    }
    if failures.is_empty() {
        Ok(notes.join("; "))
    } else {
        Err(notes.join("; "))
    }
}

fn agreement() -> Outcome {
    let mut notes = Vec::new();
    for env in [EnvKind::AppleFarm, EnvKind::MoralMachine] {
        let points = agreement_gradient(env, 0, 20, &[0.0, 0.5, 1.0], 200).map_err(err)?;
        let kappas: Vec<f64> = points.iter().map(|p| p.mean_pairwise_kappa).collect();
        let note = format!(
            "{}: {}",
            env.name(),
            kappas
                .iter()
                .map(|k| format!("{k:.3}"))
                .collect::<Vec<_>>()
                .join(" >= ")
        );
        ensure(kappas.windows(2).all(|w| w[1] <= w[0]), note.clone())?;
        notes.push(note);
    }
    Ok(notes.join("; "))
}

fn mlp_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let data: Vec<(Vec<f64>, bool)> = (0..60)
        .map(|_| {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = 2.0 * x[0] - x[2] + 0.3 > 0.0;
            (x, y)
        })
        .collect();
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let mut model = Mlp::new(5, seed).map_err(err)?;
        model.train(&data, 25).map_err(err)?;
        worst = worst.max(gradient_check(&model, &data, 1e-5).map_err(err)?);
    }
    ensure(worst < 1e-4, format!("max relative gradient error {worst:.2e}"))?;
    let fitted = train(5, &data, 2_000, 1).map_err(err)?;
    let acc = fitted.accuracy(&data);
    ensure(acc == 1.0, format!("separable training accuracy {acc}"))?;
    Ok(format!(
        "max relative gradient error {worst:.2e}, training accuracy 1.0"
    ))
}

fn kmeans_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for instance in 0..100u64 {
        let n = rng.random_range(10..80);
        let dim = rng.random_range(1..6);
        let k = rng.random_range(1..=8);
        let points: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random()).collect()).collect();
        let c = kmeans(&points, k, instance).map_err(err)?;
        ensure(
            c.inertia_history.windows(2).all(|w| w[1] <= w[0] + 1e-9),
            format!("instance {instance}: inertia increased"),
        )?;
    }
    let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]];
    let mut points = Vec::new();
    let mut truth = Vec::new();
    for (g, c) in centers.iter().enumerate() {
        for _ in 0..25 {
            points.push(vec![
                c[0] + rng.random_range(-1.0..1.0),
                c[1] + rng.random_range(-1.0..1.0),
            ]);
            truth.push(g);
        }
    }
    let c = kmeans(&points, 4, 0).map_err(err)?;
    for i in 0..points.len() {
        for j in 0..points.len() {
            ensure(
                (truth[i] == truth[j]) == (c.assignments[i] == c.assignments[j]),
                "planted clusters not recovered",
            )?;
        }
    }
    Ok("100 instances monotone, 4 planted clusters recovered".into())
}

struct Criterion {
    name: &'static str,
    budget: Duration,
    check: fn() -> Outcome,
}

fn main() {
    // any accidental HTTP call fails fast instead of reaching a network
    for var in [
        "HTTP_PROXY",
        "HTTPS_PROXY",
        "ALL_PROXY",
        "http_proxy",
        "https_proxy",
        "all_proxy",
    ] {
        std::env::set_var(var, "http://127.0.0.1:9");
    }
    let criteria = [
        Criterion {
            name: "statistics exactness",
            budget: Duration::from_secs(60),
            check: statistics_exactness,
        },
        Criterion {
            name: "dual-loop invariants",
            budget: Duration::from_secs(10),
            check: algorithm_invariants,
        },
        Criterion {
            name: "reflection benefit",
            budget: Duration::from_secs(300),
            check: reflection_benefit,
        },
        Criterion {
            name: "heterogeneity curves",
            budget: Duration::from_secs(600),
            check: heterogeneity_curves,
        },
        Criterion {
            name: "agreement gradient",
            budget: Duration::from_secs(60),
            check: agreement,
        },
        Criterion {
            name: "mlp correctness",
            budget: Duration::from_secs(60),
            check: mlp_correctness,
        },
        Criterion {
            name: "k-means",
            budget: Duration::from_secs(60),
            check: kmeans_checks,
        },
    ];
    let mut passed = 0;
    for c in &criteria {
        let start = Instant::now();
        let outcome = (c.check)();
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > c.budget => Err(format!("{detail}; took {elapsed:.1?}, budget {:?}", c.budget)),
            other => other,
        };
        match outcome {
            Ok(detail) => {
                passed += 1;
                println!("PASS  {:<24} {detail} [{elapsed:.1?}]", c.name);
            }
            Err(detail) => println!("FAIL  {:<24} {detail} [{elapsed:.1?}]", c.name),
        }
    }
    if BACKEND_FAILED.load(Ordering::SeqCst) {
        println!("FAIL  {:<24} a backend call failed", "offline execution");
    } else {
        passed += 1;
        println!(
            "PASS  {:<24} {} criteria ran in-process on the scripted backend",
            "offline execution",
            criteria.len()
        );
    }
    println!("{passed}/{} acceptance criteria passed", criteria.len() + 1);
}
