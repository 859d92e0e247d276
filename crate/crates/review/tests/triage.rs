use std::fs;
use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use palmscan::dataset::{load_patch_set, Label, Provenance, Scale};
use palmscan::raster::{GeoTransform, Orthomosaic, PatchWindow};
use palmscan::scan::{CandidateStatus, CandidateWindow};
use palmscan_review::{router, Decision, ReviewError, TriageSession};
use proptest::prelude::*;
use serde_json::{json, Value};
use tower::ServiceExt;

const N: usize = 30;

fn ortho() -> Arc<Orthomosaic> {
    let (w, h) = (600, 500);
    let rgb = (0..w * h).flat_map(|i| [(i % w) as u8, (i / w) as u8, (i % 7 * 30) as u8]).collect();
    let mut mask = vec![false; w * h];
    mask[..w * 10].fill(true);
    Arc::new(Orthomosaic::new(w, h, rgb, mask, GeoTransform::IDENTITY, "").unwrap())
}

/// Candidates on a grid with scores that are not in id order.
fn candidates() -> Vec<CandidateWindow> {
    (0..N)
        .map(|i| CandidateWindow {
            id: format!("c{i:05}"),
            window: PatchWindow::new((i % 6) * 100, (i / 6) * 100, 100),
            peak: ((i % 6) * 100 + 50, (i / 6) * 100 + 50),
            score: ((i * 17) % N) as f64 / N as f64,
            status: CandidateStatus::Pending,
        })
        .collect()
}

fn open(dir: &Path) -> TriageSession {
    TriageSession::open(ortho(), candidates(), dir.join("labels.jsonl")).unwrap()
}

fn app(dir: &Path) -> Router {
    router(open(dir), dir.join("coarse"), None)
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>, axum::http::HeaderMap) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body, headers)
}

async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, body, _) = call(app, Request::get(uri).body(Body::empty()).unwrap()).await;
    (s, serde_json::from_slice(&body).unwrap())
}

async fn post_label(app: &Router, id: &str, decision: &str) -> (StatusCode, Value) {
    let req = Request::post("/api/labels")
        .header("content-type", "application/json")
        .body(Body::from(json!({ "id": id, "decision": decision }).to_string()))
        .unwrap();
    let (s, body, _) = call(app, req).await;
    (s, serde_json::from_slice(&body).unwrap_or(Value::Null))
}

#[tokio::test]
async fn scripted_triage_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());

    let mut all = Vec::new();
    let mut offset = 0;
    loop {
        let (s, body, headers) =
            call(&app, Request::get(format!("/api/candidates?offset={offset}&limit=7")).body(Body::empty()).unwrap()).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(headers["x-total-count"], N.to_string().as_str());
        let page: Vec<Value> = serde_json::from_slice(&body).unwrap();
        if page.is_empty() {
            break;
        }
        offset += page.len();
        all.extend(page);
    }
    assert_eq!(all.len(), N);
    let scores: Vec<f64> = all.iter().map(|c| c["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    assert!(all.iter().all(|c| c["status"] == "pending"));

    let ids: Vec<String> = all.iter().map(|c| c["id"].as_str().unwrap().to_string()).collect();
    for (k, id) in ids.iter().take(25).enumerate() {
        let decision = if k < 10 { "accepted_palm" } else { "rejected_nonpalm" };
        let (s, body) = post_label(&app, id, decision).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(body["status"], decision);
        let (_, one) = get_json(&app, &format!("/api/candidates/{id}")).await;
        assert_eq!(one["status"], decision);
    }

    let (_, _, headers) = call(&app, Request::get("/api/candidates").body(Body::empty()).unwrap()).await;
    assert_eq!(headers["x-pending-count"], "5");

    let (s, summary) = get_json(&app, "/api/export").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!((summary["total"].as_u64(), summary["palm"].as_u64(), summary["nonpalm"].as_u64()), (Some(25), Some(10), Some(15)));
    let set = load_patch_set(dir.path().join("coarse")).unwrap();
    assert_eq!(set.scale(), Scale::Coarse100);
    assert_eq!((set.count(Label::Palm), set.count(Label::NonPalm)), (10, 15));
    assert!(set.items().iter().all(|it| it.provenance == Provenance::Triage && it.patch.size() == 100));
    let first = fs::read(dir.path().join("coarse/manifest.json")).unwrap();

    let (s, _) = get_json(&app, "/api/export").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(fs::read(dir.path().join("coarse/manifest.json")).unwrap(), first);

    let log = fs::read_to_string(dir.path().join("labels.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 25);
}

#[tokio::test]
async fn unknown_id_is_404_and_leaves_log_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    post_label(&app, "c00001", "accepted_palm").await;
    let before = fs::read(dir.path().join("labels.jsonl")).unwrap();

    let (s, body) = post_label(&app, "c99999", "accepted_palm").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert!(body["error"].as_str().unwrap().contains("c99999"));
    assert_eq!(fs::read(dir.path().join("labels.jsonl")).unwrap(), before);

    assert_eq!(get_json(&app, "/api/candidates/nope").await.0, StatusCode::NOT_FOUND);
    let (s, _, _) = call(&app, Request::get("/api/patch/nope.png").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _, _) = call(&app, Request::get("/api/patch/c00001").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let bad = Request::post("/api/labels")
        .header("content-type", "application/json")
        .body(Body::from(r#"{"id":"c00001","decision":"maybe"}"#))
        .unwrap();
    assert!(call(&app, bad).await.0.is_client_error());
    assert_eq!(fs::read(dir.path().join("labels.jsonl")).unwrap(), before);
}

#[tokio::test]
async fn conflicting_decisions_latest_wins_and_both_are_logged() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    post_label(&app, "c00004", "accepted_palm").await;
    post_label(&app, "c00004", "accepted_palm").await;
    let (_, body) = post_label(&app, "c00004", "rejected_nonpalm").await;
    assert_eq!(body["status"], "rejected_nonpalm");
    let log = fs::read_to_string(dir.path().join("labels.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let reopened = open(dir.path());
    assert_eq!(reopened.get("c00004").unwrap().status, CandidateStatus::RejectedNonpalm);
}

#[tokio::test]
async fn patch_png_is_the_window_crop() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (s, body, headers) = call(&app, Request::get("/api/patch/c00007.png").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(headers["content-type"], "image/png");
    let img = image::load_from_memory(&body).unwrap().to_rgb8();
    assert_eq!(img.dimensions(), (100, 100));
    let o = ortho();
    let w = candidates()[7].window;
    for (x, y) in [(0, 0), (99, 0), (37, 81), (99, 99)] {
        assert_eq!(img.get_pixel(x, y).0, o.rgb(w.x0 + x as usize, w.y0 + y as usize));
    }
    let (_, body, _) = call(&app, Request::get("/api/patch/c00000.png").body(Body::empty()).unwrap()).await;
    let masked = image::load_from_memory(&body).unwrap().to_rgb8();
    assert_eq!(masked.get_pixel(5, 5).0, [0, 0, 0]);
}

#[tokio::test]
async fn export_without_decisions_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (s, body) = get_json(&app, "/api/export").await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert!(body["error"].is_string());
    assert!(!dir.path().join("coarse/manifest.json").exists());
}

#[tokio::test]
async fn static_bundle_is_served_outside_api() {
    let dir = tempfile::tempdir().unwrap();
    let ui = dir.path().join("ui");
    fs::create_dir_all(ui.join("assets")).unwrap();
    fs::write(ui.join("index.html"), "<!doctype html><title>triage</title>").unwrap();
    fs::write(ui.join("assets/app.js"), "console.log(1)").unwrap();
    let app = router(open(dir.path()), dir.path().join("coarse"), Some(ui));

    let (s, body, _) = call(&app, Request::get("/").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert!(String::from_utf8(body).unwrap().contains("triage"));
    let (s, body, headers) = call(&app, Request::get("/assets/app.js").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body, b"console.log(1)");
    assert!(headers["content-type"].to_str().unwrap().contains("javascript"));
    assert_eq!(get_json(&app, "/api/candidates?limit=1").await.1.as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn live_listener_answers_http() {
    let dir = tempfile::tempdir().unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let server = tokio::spawn(palmscan_review::serve(listener, app(dir.path())));

    let mut stream = tokio::net::TcpStream::connect(addr).await.unwrap();
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    stream
        .write_all(b"GET /api/candidates/c00002 HTTP/1.1\r\nhost: x\r\nconnection: close\r\n\r\n")
        .await
        .unwrap();
    let mut resp = String::new();
    stream.read_to_string(&mut resp).await.unwrap();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(resp.contains(r#""id":"c00002""#));
    server.abort();
}

#[test]
fn session_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("l.jsonl");
    assert!(matches!(TriageSession::open(ortho(), vec![], &log), Err(ReviewError::NoCandidates)));
    let mut dup = candidates();
    dup[3].id = dup[2].id.clone();
    assert!(matches!(TriageSession::open(ortho(), dup, &log), Err(ReviewError::DuplicateCandidate(_))));
    let mut outside = candidates();
    outside[0].window = PatchWindow::new(550, 0, 100);
    assert!(TriageSession::open(ortho(), outside, &log).is_err());

    fs::write(&log, "{\"id\":\"elsewhere\",\"decision\":\"accepted_palm\",\"ts\":0}\n").unwrap();
    assert!(matches!(TriageSession::open(ortho(), candidates(), &log), Err(ReviewError::CorruptLog { line: 1, .. })));
}

/// Status per id after applying decisions in order, latest wins.
fn oracle(decisions: &[(usize, Decision)]) -> Vec<CandidateStatus> {
    let mut st = vec![CandidateStatus::Pending; N];
    for &(i, d) in decisions {
        st[i] = d.status();
    }
    st
}

fn statuses(s: &TriageSession) -> Vec<CandidateStatus> {
    (0..N).map(|i| s.get(&format!("c{i:05}")).unwrap().status).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn truncated_log_replays_to_a_prefix_state(
        decisions in prop::collection::vec((0..N, prop_oneof![Just(Decision::AcceptedPalm), Just(Decision::RejectedNonpalm)]), 1..40),
        cut in 0.0f64..=1.0,
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.jsonl");
        let mut applied = Vec::new();
        {
            let mut s = TriageSession::open(ortho(), candidates(), &path).unwrap();
            for &(i, d) in &decisions {
                let before = s.get(&format!("c{i:05}")).unwrap().status;
                s.record(&format!("c{i:05}"), d).unwrap();
                if before != d.status() {
                    applied.push((i, d));
                }
            }
            prop_assert_eq!(statuses(&s), oracle(&decisions));
        }
        let full = fs::read(&path).unwrap();
        prop_assert_eq!(full.iter().filter(|&&b| b == b'\n').count(), applied.len());

        let reopened = TriageSession::open(ortho(), candidates(), &path).unwrap();
        prop_assert_eq!(statuses(&reopened), oracle(&decisions));
        drop(reopened);

        let at = (cut * full.len() as f64) as usize;
        fs::write(&path, &full[..at]).unwrap();
        let complete = full[..at].iter().filter(|&&b| b == b'\n').count();
        let s = TriageSession::open(ortho(), candidates(), &path).unwrap();
        prop_assert_eq!(statuses(&s), oracle(&applied[..complete]));
    }
}
