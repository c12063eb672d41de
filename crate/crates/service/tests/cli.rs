use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use milab_core::store::{read_data_csv, DATA_FILE};
use milab_service::commands::{self, LabelLevel, SimulateArgs};
use milab_service::config::{Backend, ServiceConfig};
use milab_service::token::WEEK_SECS;
use milab_service::{router, ManualClock};
use serde_json::{json, Value};
use tower::ServiceExt;

fn mock_config() -> ServiceConfig {
    ServiceConfig { backend: Backend::Mock, ..ServiceConfig::default() }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_milab"))
}

#[test]
fn simulate_annotate_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = mock_config();
    let sims = dir.path().join("sims");
    let args = SimulateArgs { backstories: None, n: 3, seed: 7, max_volleys: 16, out: Some(sims.clone()) };
    let transcripts = commands::simulate(&cfg, Backend::Mock, &args).unwrap();
    assert_eq!(transcripts.len(), 3);
    assert_eq!(fs::read_dir(&sims).unwrap().count(), 3);
    for t in &transcripts {
        assert!(t.volleys.len() <= 16);
        assert!(milab_core::domain::validate_transcript(t).is_empty());
    }

    let out = dir.path().join("labelled").join("conversations.csv");
    let r = commands::annotate(&cfg, Backend::Mock, &sims, &out, 5).unwrap();
    assert_eq!(r.annotated, 3);
    assert!(r.failures.is_empty());
    assert!(r.rows > 0);

    let m = commands::metrics(&out).unwrap();
    assert_eq!(m.participants.len(), 3);
    assert_eq!(m.summary.n, 3);
    for p in &m.participants {
        if let Some(mic) = p.scores.pct_mic {
            assert!((0.0..=100.0).contains(&mic));
        }
    }
    let table = commands::render_metrics(&m);
    assert!(table.starts_with("participant"));

    // The binary reads the same file.
    let o = bin().args(["metrics", "--in"]).arg(&out).arg("--json").output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["participants"].as_array().unwrap().len(), 3);
}

#[test]
fn agreement_from_ratings_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ratings.csv");
    let codes = ["R", "Q", "AF", "GI", "CON", "SU", "FA", "DIR"];
    let mut csv = String::from("item_id,rater_id,label\n");
    for i in 0..60 {
        for rater in ["a", "b", "c"] {
            let code = if rater == "c" && i % 5 == 0 { codes[(i + 1) % codes.len()] } else { codes[i % codes.len()] };
            csv.push_str(&format!("u{i},{rater},{code}\n"));
        }
    }
    fs::write(&path, csv).unwrap();

    let five = commands::agreement(&path, LabelLevel::Five, 0.05, 1000, 1).unwrap();
    assert_eq!(five.items, 60);
    assert_eq!(five.raters, 3);
    assert!(five.categories.iter().all(|c| ["MICO", "MIIN", "R", "Q", "Other"].contains(&c.as_str())));
    assert!(five.fleiss.kappa > 0.7 && five.fleiss.kappa < 1.0);
    assert!(five.fleiss.p_two_sided < 0.001);
    assert!(five.power > 0.9);
    assert_eq!(five.pairwise.len(), 3);

    let fine = commands::agreement(&path, LabelLevel::Sixteen, 0.05, 1000, 1).unwrap();
    assert!(fine.categories.len() > five.categories.len());
    assert!(commands::render_agreement(&fine).contains("Fleiss kappa"));

    let o = bin().args(["agreement", "--level", "16", "--sims", "1000", "--ratings"]).arg(&path).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let bad = dir.path().join("empty.csv");
    fs::write(&bad, "item_id,rater_id,label\n").unwrap();
    assert!(commands::agreement(&bad, LabelLevel::Five, 0.05, 1000, 1).is_err());
}

async fn call(app: &axum::Router, uri: &str, body: Value) -> (StatusCode, Value) {
    let req = Request::builder()
        .method("POST")
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() })
}

async fn run_participant(app: &axum::Router, clock: &ManualClock, pid: &str, confidence: i64) {
    let (_, v) = call(app, "/sessions", json!({"participant_id": pid, "consent": true})).await;
    let id = v["session_id"].as_str().unwrap().to_string();
    let rulers = |c: i64| json!({"confidence": c, "importance": 8, "readiness": 6});
    let (s, _) = call(app, &format!("/sessions/{id}/surveys/pre"), json!({"rulers": rulers(confidence)})).await;
    assert_eq!(s, StatusCode::OK);
    call(app, &format!("/sessions/{id}/messages"), json!({"text": "I smoke when I'm stressed, email me at a@b.org"})).await;
    call(app, &format!("/sessions/{id}/messages"), json!({"text": "bye"})).await;
    call(app, &format!("/sessions/{id}/continue"), json!({"choice": "no"})).await;
    let (s, v) = call(app, &format!("/sessions/{id}/annotate"), json!({})).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let post = json!({
        "rulers": rulers(confidence + 2),
        "care": [5, 5, 5, 4, 4, 5, 5, 5, 4, 5],
        "feedback": ["good", "ok", "phone 555-123-4567"]
    });
    let (s, v) = call(app, &format!("/sessions/{id}/surveys/post"), post).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let token = v["week_token"]["token"].as_str().unwrap().to_string();
    clock.advance(WEEK_SECS);
    let (s, v) = call(app, &format!("/sessions/{id}/surveys/week"), json!({"token": token, "rulers": rulers(confidence + 1)})).await;
    assert_eq!(s, StatusCode::OK, "{v}");
}

#[tokio::test]
async fn journal_export_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("journal.jsonl");
    let cfg = ServiceConfig { journal: Some(journal.clone()), ..mock_config() };
    let clock = Arc::new(ManualClock::new(1_700_000_000));
    let app = router(commands::app_state(&cfg, clock.clone()).unwrap());
    for (i, c) in [2, 3, 4, 1, 2].into_iter().enumerate() {
        run_participant(&app, &clock, &format!("P{i}"), c).await;
    }

    let out = dir.path().join("release");
    let (participants, rows) = commands::export(&journal, &out, true).unwrap();
    assert_eq!(participants, 5);
    assert!(rows > 0);
    let data = fs::read_to_string(out.join(DATA_FILE)).unwrap();
    assert!(data.contains("[PHONE]") && !data.contains("555-123-4567"));
    let conv = fs::read_to_string(out.join("conversations.csv")).unwrap();
    assert!(conv.contains("[EMAIL]") && !conv.contains("a@b.org"));

    let records = read_data_csv(&out.join(DATA_FILE)).unwrap();
    assert_eq!(records.len(), 5);
    assert!(records.iter().all(|r| r.summary.is_some() && r.week_later.is_some()));

    let reports = dir.path().join("report");
    let text = commands::report(&out.join(DATA_FILE), &reports, None, None).unwrap();
    assert!(text.contains("confidence"), "{text}");
    assert!(text.contains("CARE mean"));
    assert!(reports.join("report.json").is_file());

    let v = commands::metrics(&out).unwrap();
    assert_eq!(v.participants.len(), 5);
}

#[test]
fn binary_reports_usage_errors() {
    let o = bin().arg("--help").output().unwrap();
    assert!(o.status.success());
    let help = String::from_utf8_lossy(&o.stdout);
    for cmd in ["serve", "simulate", "annotate", "metrics", "agreement", "report", "export"] {
        assert!(help.contains(cmd), "{help}");
    }
    let o = bin().args(["metrics", "--in", "/nonexistent/conversations.csv"]).output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn config_file_drives_the_backend() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("milab.toml");
    fs::write(&path, "backend = \"mock\"\nprofile = \"initial\"\n").unwrap();
    let out = dir.path().join("sims");
    let o = bin()
        .arg("--config")
        .arg(&path)
        .args(["simulate", "--n", "2", "--max-volleys", "10", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 2);
    assert!(Path::new(&out).join("sim-0-000.json").is_file());
}
