use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use irda_cli::backend::Backends;
use irda_cli::manifest::ExperimentManifest;
use irda_cli::store::NextPrompt;
use irda_cli::store::{EvaluateBody, FeedbackBody, LabelValue, LabelsBody, Store, TestLabel};
use irda_core::alignment::{Participant, SimulatedParticipant};
use irda_core::oracle::{make_population, PopulationSpec};
use irda_core::session::{Pools, Prompt, Session};
use irda_core::stats::{fleiss_kappa, LabelMatrix};
use irda_core::stimulus::{read_jsonl, EnvKind, Stimulus};
use serde_json::{json, Value};

fn irda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_irda")).args(args).output().unwrap()
}

fn manifests() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../manifests")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json_out(o: &Output) -> Value {
    assert!(o.status.success(), "{}", stderr(o));
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn study1_manifest_reports_agreement_methods_and_test() {
    let path = manifests().join("study1-applefarm.toml");
    let report = json_out(&irda(&["run", "--manifest", path.to_str().unwrap()]));
    assert_eq!(report["env"], "applefarm");
    assert_eq!(report["users"].as_array().unwrap().len(), 21);
    assert!(report["kappa"].as_f64().unwrap() < 1.0);
    for method in ["irda", "l_b", "mlp_individual", "mlp_collective"] {
        let m = &report["methods"][method];
        assert_eq!(m["per_user"].as_array().unwrap().len(), 21, "{method}");
        let mean = m["mean"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&mean), "{method}: {mean}");
    }
    let p = report["wilcoxon_p"].as_f64().unwrap();
    assert!(p > 0.0 && p <= 1.0);
    assert_eq!(report["deltas"][0]["versus"], "l_b");
    assert_eq!(report["deltas"][0]["wilcoxon_p"], report["wilcoxon_p"]);
}

#[test]
fn run_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = manifests().join("study2-moralmachine.toml");
    let outputs: Vec<Vec<u8>> = ["a.json", "b.json", "c.json"]
        .iter()
        .zip(["2", "2", "3"])
        .map(|(name, seed)| {
            let out = dir.path().join(name);
            let o = irda(&[
                "run",
                "--manifest",
                manifest.to_str().unwrap(),
                "--seed",
                seed,
                "--out",
                out.to_str().unwrap(),
            ]);
            assert!(o.status.success(), "{}", stderr(&o));
            std::fs::read(out).unwrap()
        })
        .collect();
    assert_eq!(outputs[0], outputs[1]);
    assert_ne!(outputs[0], outputs[2]);
}

#[test]
fn malformed_manifests_exit_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("env = \"applefarm\"\nepsilon = 1.5\n[population]\nn = 4\n", "epsilon"),
        ("env = \"applefarm\"\nbudgte = 3\n", "budgte"),
        (
            "env = \"moralmachine\"\n[population]\nn = 4\nheterogeneity = \"high\"\n",
            "heterogeneity",
        ),
        ("env = \"mars\"\n", "mars"),
        ("env = \"applefarm\"\npopulation = \"everyone\"\n", "everyone"),
        ("env = \"applefarm\"\npopulation = \"interactive\"\n", "population"),
        ("env = \"applefarm\"\n[population]\nn = 1\n", "population"),
        (
            "env = \"applefarm\"\ndesign_size = 10\n[population]\nn = 4\n",
            "design_size",
        ),
        ("{\"env\": \"applefarm\", \"k\": 0, \"population\": {\"n\": 3}}", "k"),
    ];
    for (i, (text, field)) in cases.iter().enumerate() {
        let path = dir.path().join(format!("m{i}.toml"));
        std::fs::write(&path, text).unwrap();
        let o = irda(&["run", "--manifest", path.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "case {i}: {}", stderr(&o));
        assert!(stderr(&o).contains(field), "case {i}: {}", stderr(&o));
        assert!(o.stdout.is_empty());
    }
    let o = irda(&["run", "--manifest", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn shipped_manifests_validate() {
    for name in ["study1-applefarm.toml", "study2-moralmachine.toml", "interactive.toml"] {
        let m = ExperimentManifest::load(&manifests().join(name)).unwrap();
        assert_eq!(m.study_config().is_ok(), name.starts_with("study"), "{name}");
    }
}

#[test]
fn gen_pool_and_cluster_agree_with_the_engine() {
    let dir = tempfile::tempdir().unwrap();
    let pool = dir.path().join("pool.jsonl");
    let o = irda(&[
        "gen-pool",
        "--env",
        "moralmachine",
        "--count",
        "40",
        "--seed",
        "9",
        "--out",
        pool.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stimuli: Vec<Stimulus> = read_jsonl(std::io::BufReader::new(std::fs::File::open(&pool).unwrap())).unwrap();
    assert_eq!(stimuli, EnvKind::MoralMachine.generate(9, 40).unwrap());

    let from_file = json_out(&irda(&[
        "cluster",
        "--env",
        "moralmachine",
        "--pool",
        pool.to_str().unwrap(),
        "--k",
        "5",
        "--seed",
        "9",
    ]));
    let generated = json_out(&irda(&[
        "cluster",
        "--env",
        "moralmachine",
        "--count",
        "40",
        "--k",
        "5",
        "--seed",
        "9",
    ]));
    assert_eq!(from_file, generated);
    let reps: Vec<&str> = from_file["representatives"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert_eq!(reps.len(), 5);
    for (cluster, rep) in reps.iter().enumerate() {
        assert_eq!(from_file["assignments"][rep], cluster);
    }

    let o = irda(&["cluster", "--env", "applefarm", "--pool", pool.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = irda(&["cluster", "--env", "moralmachine", "--count", "3", "--k", "5"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = irda(&["gen-pool", "--env", "venus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn stats_reports_agreement_and_comparisons() {
    let dir = tempfile::tempdir().unwrap();
    let labels = vec![
        vec![true, true, false, false, true, false],
        vec![true, false, false, false, true, false],
        vec![true, true, true, false, true, true],
    ];
    let input = json!({
        "labels": labels,
        "feature_sets": [["a", "b"], ["a", "c"], ["a", "b"]],
        "methods": {
            "irda": [0.9, 0.8, 0.85],
            "l_b": [0.7, 0.75, 0.6],
        },
    });
    let path = dir.path().join("in.json");
    std::fs::write(&path, input.to_string()).unwrap();
    let report = json_out(&irda(&[
        "stats",
        "--input",
        path.to_str().unwrap(),
        "--resamples",
        "500",
        "--seed",
        "1",
    ]));
    let expected = fleiss_kappa(&LabelMatrix::from_raters(&labels).unwrap());
    assert!((report["kappa"].as_f64().unwrap() - expected).abs() < 1e-12);
    assert!((report["jaccard_mean"].as_f64().unwrap() - (1.0 / 3.0 + 1.0 + 1.0 / 3.0) / 3.0).abs() < 1e-12);
    assert!((report["deltas"][0]["mean_delta"].as_f64().unwrap() - 0.5 / 3.0).abs() < 1e-12);
    // three positive differences: exact two-sided p = 2/8
    assert_eq!(report["wilcoxon_p"].as_f64().unwrap(), 0.25);

    std::fs::write(&path, json!({ "labels": [[true, false], [true]] }).to_string()).unwrap();
    let o = irda(&["stats", "--input", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("labels"));
}

#[test]
fn evaluate_reads_a_session_directory() {
    let env = EnvKind::AppleFarm;
    let data = tempfile::tempdir().unwrap();
    let store = Store::new(data.path(), Backends::scripted()).unwrap();
    let mut manifest = ExperimentManifest::minimal(env);
    manifest.design_size = Some(30);
    manifest.uncertainty_size = Some(10);
    manifest.test_size = Some(8);
    let user = make_population(5, &PopulationSpec::new(env, 2, 0.5)).unwrap().remove(0);
    let mut participant = SimulatedParticipant::new(user.clone());
    let labels = env.label_pair();

    let mut view = store.create(&manifest).unwrap();
    let id = view.id.clone();
    while let NextPrompt::Session(prompt) = &view.prompt {
        let body = match prompt {
            Prompt::Critique { stimulus_id, encoded }
            | Prompt::Explain {
                stimulus_id, encoded, ..
            } => {
                let item = participant
                    .critique(&Stimulus::parse(env, encoded, stimulus_id).unwrap(), &labels)
                    .unwrap();
                FeedbackBody {
                    label: Some(LabelValue::Aligned(item.label)),
                    explanation: Some(item.explanation),
                    ..Default::default()
                }
            }
            Prompt::Hypothesis { hypothesis, .. } => {
                let (text, stable) = participant.respond(hypothesis, &labels).unwrap();
                FeedbackBody {
                    response: Some(text),
                    stable: Some(stable),
                    ..Default::default()
                }
            }
            Prompt::Done => break,
        };
        view = store.feedback(&id, &body).unwrap();
    }
    let session: Session = store.state(&id).unwrap().session;
    let test = Pools::generate(&session.config).unwrap().test;
    let body = LabelsBody {
        labels: test
            .iter()
            .map(|s| TestLabel {
                stimulus_id: s.id().to_string(),
                label: LabelValue::Aligned(user.label_stimulus(s)),
            })
            .collect(),
    };
    store.labels(&id, &body).unwrap();
    let expected = serde_json::to_value(store.evaluate(&id, &EvaluateBody::default()).unwrap()).unwrap();

    let dir = data.path().join(&id);
    let got = json_out(&irda(&["evaluate", "--session", dir.to_str().unwrap(), "--seed", "0"]));
    assert_eq!(got, expected);
    assert_eq!(got["irda"]["predictions"].as_array().unwrap().len(), 8);

    let o = irda(&["evaluate", "--session", data.path().join("absent").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}
