use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::json;

fn qkg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qkg"))
        .args(args)
        .env_remove("QKG_MODE")
        .env_remove("QKG_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = qkg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const KG_CSV: &str = "\
relation,display_relation,x_index,x_id,x_type,x_name,x_source,y_index,y_id,y_type,y_name,y_source
indication,indication,0,D1,drug,metformin,DrugBank,1,5015,disease,type 2 diabetes mellitus,MONDO
contraindication,contraindication,0,D1,drug,metformin,DrugBank,2,77,disease,kidney failure,MONDO
indication,indication,3,D2,drug,insulin,DrugBank,1,5015,disease,type 2 diabetes mellitus,MONDO
disease_phenotype_positive,phenotype present,1,5015,disease,type 2 diabetes mellitus,MONDO,4,HP1,effect/phenotype,polyuria,HPO
drug_effect,side effect,3,D2,drug,insulin,DrugBank,4,HP1,effect/phenotype,polyuria,HPO
";

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        std::fs::write(root.join("kg.csv"), KG_CSV).unwrap();
        let questions = [
            (
                "q1",
                "A 60-year-old man with type 2 diabetes mellitus and eGFR of 22. Which drug?",
                'B',
            ),
            (
                "q2",
                "A 45-year-old woman with type 2 diabetes mellitus. First-line drug?",
                'A',
            ),
            ("q3", "A 30-year-old with polyuria. Most likely cause?", 'A'),
        ];
        let lines: Vec<String> = questions
            .iter()
            .map(|(id, q, gold)| {
                json!({"id": id, "question": q, "choices": {"A": "metformin", "B": "insulin"}, "gold": gold.to_string()})
                    .to_string()
            })
            .collect();
        std::fs::write(root.join("dataset.jsonl"), lines.join("\n") + "\n").unwrap();
        let qa = |letter: &str| {
            json!({
                "llm_answer_choice": letter,
                "selected_option_text": "x",
                "reasoning": "r",
                "claims": [{"option_label": letter, "statement": "metformin treats type 2 diabetes mellitus", "supports": true}],
            })
            .to_string()
        };
        let script = json!({
            "rules": [
                {"role": "reasoner", "last_contains": ["Your initial answer was"], "response": qa("B")},
                {"role": "reasoner", "response": qa("A")},
                {"role": "validator", "response": json!({"final": [{"claim": 1, "status": "CONTRADICTED", "evidence": "AVOID: metformin is not applicable with eGFR below 30"}]}).to_string()},
                {"role": "annotator", "response": json!({"constraints": [{"patient_characteristics": "eGFR < 30", "applicability": "Definitely NOT Applicable", "evidence": "lactic acidosis"}]}).to_string()},
            ]
        });
        std::fs::write(root.join("mock.json"), script.to_string()).unwrap();
        Fixture { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

#[test]
fn mcnemar_prints_rounded_p() {
    assert_eq!(ok(&["mcnemar", "--b", "65", "--c", "70"]).trim(), "0.73");
    assert_eq!(ok(&["mcnemar", "--b", "0", "--c", "0"]).trim(), "1.0");
    assert_eq!(ok(&["mcnemar", "--b", "10", "--c", "40"]).trim(), "2.4e-5");
}

#[test]
fn adjust_from_counts() {
    assert_eq!(
        ok(&[
            "adjust",
            "--final-correct",
            "90",
            "--n",
            "100",
            "--leak",
            "5",
            "--ctx",
            "5"
        ])
        .trim(),
        "0.9444"
    );
}

#[test]
fn unknown_subcommand_fails() {
    assert!(!qkg(&["frobnicate"]).status.success());
    assert!(ok(&["--help"]).contains("run-eval"));
}

#[test]
fn missing_input_is_a_one_line_error() {
    let out = qkg(&[
        "import-kg",
        "--input",
        "/nonexistent/kg.csv",
        "--out-dir",
        "/tmp/unused-qkg",
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(
        err.starts_with("error: input /nonexistent/kg.csv does not exist"),
        "{err}"
    );
    assert!(!Path::new("/tmp/unused-qkg").exists());
}

#[test]
fn full_workflow_with_mock_model() {
    let f = Fixture::new();
    let kg_dir = f.path("kg");
    ok(&["import-kg", "--input", p(&f.path("kg.csv")), "--out-dir", p(&kg_dir)]);
    let graph = kg_dir.join("graph.jsonl");
    assert!(graph.is_file());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(kg_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "import-kg");

    let sub_dir = f.path("sub");
    let out = ok(&[
        "extract-subgraph",
        "--graph",
        p(&graph),
        "--target",
        "MONDO:5015",
        "--out-dir",
        p(&sub_dir),
    ]);
    assert!(out.contains("direct triplets:        3"), "{out}");

    let ann = f.path("ann");
    let mock = f.path("mock.json");
    ok(&[
        "annotate",
        "--graph",
        p(&graph),
        "--mock-script",
        p(&mock),
        "--out-dir",
        p(&ann),
    ]);
    let constraints = ann.join("constraints.jsonl");
    assert!(std::fs::read_to_string(&constraints).unwrap().contains("eGFR < 30"));

    let dataset = f.path("dataset.jsonl");
    let mut runs = Vec::new();
    for mode in ["none", "kg", "qkg"] {
        let dir = f.path(&format!("run_{mode}"));
        ok(&[
            "run-eval",
            "--dataset",
            p(&dataset),
            "--graph",
            p(&graph),
            "--constraints",
            p(&constraints),
            "--mode",
            mode,
            "--mock-script",
            p(&mock),
            "--out-dir",
            p(&dir),
        ]);
        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary["n"], 3);
        assert_eq!(summary["initial_correct"], 2);
        if mode == "none" {
            assert_eq!(summary["final_correct"], summary["initial_correct"]);
        } else {
            // Every contradicted claim flips A to B.
            assert_eq!(summary["final_correct"], 1);
            assert_eq!(summary["w_to_c"], 1);
            assert_eq!(summary["c_to_w"], 2);
        }
        runs.push(dir);
    }

    let out = ok(&["classify-leakage", "--run", p(&runs[2])]);
    assert!(out.contains("W->C"), "{out}");
    assert!(runs[2].join("classification.csv").is_file());
    let out = ok(&["adjust", "--run", p(&runs[2])]);
    assert!(out.contains("adjusted accuracy"), "{out}");

    let out = ok(&["compare", "--a", p(&runs[0]), "--b", p(&runs[2])]);
    assert!(out.contains("paired samples: 3"), "{out}");
    assert!(out.contains("b (A only):     2"), "{out}");

    let rep = f.path("report");
    ok(&[
        "report",
        "--run",
        p(&runs[0]),
        p(&runs[1]),
        p(&runs[2]),
        "--out-dir",
        p(&rep),
    ]);
    let paired = std::fs::read_to_string(rep.join("report_paired.csv")).unwrap();
    assert_eq!(paired.lines().count(), 4);
}

#[test]
fn eval_without_model_roles_is_rejected() {
    let f = Fixture::new();
    let out = qkg(&[
        "run-eval",
        "--dataset",
        p(&f.path("dataset.jsonl")),
        "--mode",
        "none",
        "--out-dir",
        p(&f.path("r")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("role `reasoner` is not configured"), "{err}");
}

#[test]
fn example_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/run.example.yaml");
    let cfg = qkg_core::config::RunConfig::from_yaml_file(&path).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.roles.len(), 3);
    assert_eq!(
        cfg.gateway_config().unwrap().role("validator").unwrap().model,
        "gpt-4o-mini"
    );
}

#[test]
fn call_log_replays_a_run() {
    let f = Fixture::new();
    let graph_dir = f.path("kg");
    ok(&["import-kg", "--input", p(&f.path("kg.csv")), "--out-dir", p(&graph_dir)]);
    let graph = graph_dir.join("graph.jsonl");
    let (live, replay) = (f.path("live"), f.path("replay"));
    let args = |script: &Path, dir: &Path| -> Vec<String> {
        [
            "run-eval",
            "--dataset",
            p(&f.path("dataset.jsonl")),
            "--graph",
            p(&graph),
            "--mode",
            "kg",
            "--mock-script",
            p(script),
            "--out-dir",
            p(dir),
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()
    };
    let live_args = args(&f.path("mock.json"), &live);
    ok(&live_args.iter().map(String::as_str).collect::<Vec<_>>());
    let replay_args = args(&live.join("llm_calls.jsonl"), &replay);
    ok(&replay_args.iter().map(String::as_str).collect::<Vec<_>>());
    for file in ["per_sample.csv", "records.jsonl", "summary.json"] {
        assert_eq!(
            std::fs::read(live.join(file)).unwrap(),
            std::fs::read(replay.join(file)).unwrap(),
            "{file}"
        );
    }
}
