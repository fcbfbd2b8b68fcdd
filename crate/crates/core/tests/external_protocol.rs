use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use zoomlr::experiments::{run_study, Algorithm, ObjectiveSpec, StudyConfig};
use zoomlr::external::ExternalErrorKind;
use zoomlr::objective::DIVERGED_SENTINEL;
use zoomlr::{auc, evaluate_external, ExternalCommand};

fn worker(dir: &Path, name: &str, body: &str) -> ExternalCommand {
    let path = dir.join(name);
    fs::write(&path, format!("#!/bin/sh\nread -r request\n{body}")).unwrap();
    ExternalCommand::new("sh", [path.display().to_string()])
}

fn epochs_script(records: &[&str], done: &str) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&format!("echo '{r}'\n"));
    }
    s.push_str(&format!("echo '{done}'\n"));
    s
}

#[test]
fn replayed_losses_give_their_sum() {
    let dir = tempfile::tempdir().unwrap();
    let cmd = worker(
        dir.path(),
        "echo.sh",
        &epochs_script(
            &[
                r#"{"eval_id": 7, "epoch": 1, "loss": 3.0, "accuracy": 10.0}"#,
                r#"{"eval_id": 7, "epoch": 2, "loss": 2.0, "accuracy": 20.0}"#,
                r#"{"eval_id": 7, "epoch": 3, "loss": 1.0, "accuracy": 30.0}"#,
            ],
            r#"{"eval_id": 7, "done": true, "diverged": false}"#,
        ),
    );
    let trace = evaluate_external(0.01, 3, 7, 99, &cmd).unwrap();
    assert_eq!(trace.epoch_losses(), &[3.0, 2.0, 1.0]);
    assert_eq!(trace.epoch_accuracies(), Some(&[10.0, 20.0, 30.0][..]));
    assert_eq!(auc(&trace).unwrap(), 6.0);
    assert_eq!(trace.final_accuracy(), Some(30.0));
    assert!(!trace.diverged());
    assert_eq!(trace.lr(), 0.01);
}

#[test]
fn worker_receives_one_request_line() {
    let dir = tempfile::tempdir().unwrap();
    let seen = dir.path().join("request.json");
    let body = format!(
        "printf '%s\\n' \"$request\" > '{}'\necho '{{\"eval_id\": 4, \"epoch\": 1, \"loss\": 0.5}}'\necho '{{\"eval_id\": 4, \"done\": true, \"diverged\": false}}'\n",
        seen.display()
    );
    let cmd = worker(dir.path(), "record.sh", &body);
    evaluate_external(0.125, 1, 4, 1234, &cmd).unwrap();
    let request: serde_json::Value = serde_json::from_str(fs::read_to_string(&seen).unwrap().trim()).unwrap();
    assert_eq!(
        request,
        serde_json::json!({"eval_id": 4, "learning_rate": 0.125, "epochs": 1, "seed": 1234})
    );
}

#[test]
fn non_finite_loss_marks_divergence() {
    let dir = tempfile::tempdir().unwrap();
    for token in ["NaN", "Infinity", "null"] {
        let cmd = worker(
            dir.path(),
            "nan.sh",
            &epochs_script(
                &[
                    r#"{"eval_id": 1, "epoch": 1, "loss": 2.0}"#,
                    &format!(r#"{{"eval_id": 1, "epoch": 2, "loss": {token}}}"#),
                ],
                r#"{"eval_id": 1, "done": true, "diverged": false}"#,
            ),
        );
        let trace = evaluate_external(0.5, 5, 1, 0, &cmd).unwrap();
        assert!(trace.diverged(), "{token}");
        assert_eq!(trace.epoch_losses(), &[2.0]);
        assert_eq!(auc(&trace).unwrap(), DIVERGED_SENTINEL);
    }
}

#[test]
fn worker_reported_divergence_allows_short_traces() {
    let dir = tempfile::tempdir().unwrap();
    let cmd = worker(
        dir.path(),
        "short.sh",
        &epochs_script(
            &[r#"{"eval_id": 2, "epoch": 1, "loss": 9.0}"#],
            r#"{"eval_id": 2, "done": true, "diverged": true}"#,
        ),
    );
    let trace = evaluate_external(0.9, 10, 2, 0, &cmd).unwrap();
    assert!(trace.diverged());
    assert_eq!(trace.epochs(), 1);
}

#[test]
fn premature_exit_keeps_partial_trace() {
    let dir = tempfile::tempdir().unwrap();
    let body = "echo '{\"eval_id\": 1, \"epoch\": 1, \"loss\": 4.0}'\necho '{\"eval_id\": 1, \"epoch\": 2, \"loss\": 3.5}'\necho 'out of memory' >&2\nexit 3\n";
    let cmd = worker(dir.path(), "crash.sh", body);
    let err = evaluate_external(0.1, 5, 1, 0, &cmd).unwrap_err();
    assert!(
        matches!(err.kind, ExternalErrorKind::PrematureExit { .. }),
        "{err}"
    );
    assert_eq!(err.partial.epoch_losses(), &[4.0, 3.5]);
    assert!(err.partial.diverged());
    assert!(err.stderr.contains("out of memory"));
    assert!(err.to_string().contains("out of memory"));
}

#[test]
fn malformed_records_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (
            "garbage",
            epochs_script(
                &[r#"{"eval_id": 1, "epoch": 1, "loss": 1.0}"#, "loss=0.3"],
                r#"{"eval_id": 1, "done": true, "diverged": false}"#,
            ),
        ),
        (
            "wrong_id",
            epochs_script(
                &[r#"{"eval_id": 8, "epoch": 1, "loss": 1.0}"#],
                r#"{"eval_id": 1, "done": true, "diverged": false}"#,
            ),
        ),
        (
            "skipped_epoch",
            epochs_script(
                &[r#"{"eval_id": 1, "epoch": 2, "loss": 1.0}"#],
                r#"{"eval_id": 1, "done": true, "diverged": false}"#,
            ),
        ),
        (
            "too_few",
            epochs_script(
                &[r#"{"eval_id": 1, "epoch": 1, "loss": 1.0}"#],
                r#"{"eval_id": 1, "done": true, "diverged": false}"#,
            ),
        ),
        (
            "not_done",
            epochs_script(
                &[r#"{"eval_id": 1, "epoch": 1, "loss": 1.0}"#],
                r#"{"eval_id": 1, "done": false, "diverged": false}"#,
            ),
        ),
    ];
    for (name, body) in cases {
        let cmd = worker(dir.path(), &format!("{name}.sh"), &body);
        let epochs = if name == "too_few" { 2 } else { 1 };
        let err = evaluate_external(0.1, epochs, 1, 0, &cmd).unwrap_err();
        assert!(
            matches!(err.kind, ExternalErrorKind::Malformed { .. }),
            "{name}: {err}"
        );
        assert!(err.partial.diverged(), "{name}");
    }
}

#[test]
fn slow_worker_times_out() {
    let dir = tempfile::tempdir().unwrap();
    let cmd = worker(
        dir.path(),
        "slow.sh",
        "echo '{\"eval_id\": 1, \"epoch\": 1, \"loss\": 1.0}'\nsleep 30\n",
    )
    .with_timeout(Duration::from_secs(1));
    let start = Instant::now();
    let err = evaluate_external(0.1, 3, 1, 0, &cmd).unwrap_err();
    assert!(matches!(err.kind, ExternalErrorKind::Timeout(_)), "{err}");
    assert_eq!(err.partial.epoch_losses(), &[1.0]);
    assert!(start.elapsed() < Duration::from_secs(10));
}

#[test]
fn missing_program_is_reported() {
    let cmd = ExternalCommand::new("/nonexistent/worker-binary", Vec::<String>::new());
    let err = evaluate_external(0.1, 1, 1, 0, &cmd).unwrap_err();
    assert!(matches!(err.kind, ExternalErrorKind::Spawn(_)));
    assert!(err.partial.diverged());
}

#[test]
fn failing_worker_is_recorded_and_the_study_continues() {
    let dir = tempfile::tempdir().unwrap();
    // Odd evaluations crash after one epoch, even ones succeed.
    let body = r#"id=$(printf '%s' "$request" | sed 's/.*"eval_id":\([0-9]*\).*/\1/')
echo "{\"eval_id\": $id, \"epoch\": 1, \"loss\": 2.0}"
if [ $((id % 2)) -eq 1 ]; then exit 1; fi
echo "{\"eval_id\": $id, \"epoch\": 2, \"loss\": 1.0}"
echo "{\"eval_id\": $id, \"done\": true, \"diverged\": false}"
"#;
    let command = worker(dir.path(), "flaky.sh", body);
    let config = StudyConfig {
        budget_evals: 4,
        epochs_per_eval: 2,
        runs: 2,
        ..StudyConfig::new(Algorithm::Random, ObjectiveSpec::External { command })
    };
    let out = run_study(&config).unwrap();
    assert_eq!(out.report.total_evaluations, 8);
    for record in &out.records {
        let rounds: Vec<usize> = record.failures.iter().map(|f| f.round).collect();
        assert_eq!(rounds, vec![1, 3]);
        for e in record.history.entries() {
            assert_eq!(e.trace.diverged(), e.round % 2 == 1);
            if e.trace.diverged() {
                assert_eq!(e.reward, 0.0);
            }
        }
    }
    assert_eq!(out.report.divergence_fraction, 0.0);
    assert_eq!(out.report.per_run[0].failures, 2);
}
