use std::collections::BTreeMap;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use forge_core::dataset::{Action, BBox, Dataset, Episode, Point, Split, Step, UiElement};
use forge_core::review::{CorrectionProposal, DeficiencyCause, ProposalStatus, ProposalStore, QueueEntry, LEDGER_FILE};
use forge_server::{router, AppState, ReviewServer};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

struct Fixture {
    _dir: tempfile::TempDir,
    store_dir: std::path::PathBuf,
    app: axum::Router,
}

fn fixture(n: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let shots = dir.path().join("shots");
    std::fs::create_dir_all(shots.join("e0")).unwrap();
    std::fs::write(shots.join("e0/0.png"), b"\x89PNG fake").unwrap();
    std::fs::write(dir.path().join("secret.txt"), b"nope").unwrap();

    let episodes = (0..n)
        .map(|i| Episode {
            episode_id: format!("e{i}"),
            goal: format!("goal {i}"),
            split: Split::Hard,
            steps: vec![Step {
                step_id: 0,
                screenshot_path: if i == 1 {
                    "../secret.txt".into()
                } else {
                    format!("e{i}/0.png")
                },
                screen_w: 100,
                screen_h: 200,
                elements: vec![UiElement {
                    element_id: "btn".into(),
                    bbox: BBox::new(10.0, 10.0, 40.0, 30.0),
                    interactive: true,
                    text: Some("OK".into()),
                    resource_id: None,
                }],
                gt_actions: vec![Action::Click(Point::new(20.0, 20.0))],
            }],
            provenance: None,
        })
        .collect();
    let dataset = Dataset::new(episodes).unwrap();

    let store_dir = dir.path().join("store");
    let mut store = ProposalStore::open(&store_dir).unwrap();
    for i in 0..n {
        store
            .add(QueueEntry {
                proposal: CorrectionProposal {
                    proposal_id: CorrectionProposal::proposal_id_for(&format!("e{i}"), 0),
                    episode_id: format!("e{i}"),
                    step_id: Some(0),
                    cause: DeficiencyCause::UnclearTask,
                    revised_instruction: Some(format!("clearer goal {i}")),
                    revised_gt: None,
                    rationale: "ambiguous".into(),
                    status: ProposalStatus::Pending,
                    decided_by: None,
                    decided_at: None,
                },
                failures: BTreeMap::from([("A".to_string(), Some(Action::NavigateBack)), ("B".to_string(), None)]),
            })
            .unwrap();
    }
    let app = router(AppState::new(store, dataset, shots));
    Fixture {
        _dir: dir,
        store_dir,
        app,
    }
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>, String) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let ctype = resp
        .headers()
        .get("content-type")
        .map(|v| v.to_str().unwrap().to_owned())
        .unwrap_or_default();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes, ctype)
}

async fn json_call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b, _) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

fn ledger_lines(f: &Fixture) -> usize {
    std::fs::read_to_string(f.store_dir.join(LEDGER_FILE))
        .map(|s| s.lines().count())
        .unwrap_or(0)
}

#[tokio::test]
async fn accept_then_conflict() {
    let f = fixture(3);
    let (s, v) = json_call(
        &f.app,
        "POST",
        "/api/candidates/p-e0-0/decision",
        Some(json!({"verdict": "accept", "reviewer_id": "alice"})),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "Accepted");
    assert_eq!(ledger_lines(&f), 1);

    let (s, v) = json_call(
        &f.app,
        "POST",
        "/api/candidates/p-e0-0/decision",
        Some(json!({"verdict": "reject", "reviewer_id": "bob"})),
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["decided_by"], "alice");
    assert_eq!(ledger_lines(&f), 1);
}

#[tokio::test]
async fn progress_counts() {
    let f = fixture(10);
    for id in ["p-e3-0", "p-e7-0"] {
        let (s, _) = json_call(
            &f.app,
            "POST",
            &format!("/api/candidates/{id}/decision"),
            Some(json!({"verdict": "reject", "reviewer_id": "r"})),
        )
        .await;
        assert_eq!(s, StatusCode::OK);
    }
    let (_, v) = json_call(&f.app, "GET", "/api/progress", None).await;
    assert_eq!(v["pending"], 8);
    assert_eq!(v["decided"], 2);
    assert_eq!(v["rejected"], 2);
}

#[tokio::test]
async fn listing_and_pagination() {
    let f = fixture(10);
    let (s, v) = json_call(&f.app, "GET", "/api/candidates?status=pending&page=2&per_page=4", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["total"], 10);
    let items = v["items"].as_array().unwrap();
    assert_eq!(items.len(), 4);
    assert_eq!(items[0]["proposal"]["proposal_id"], "p-e4-0");
    assert_eq!(items[0]["goal"], "goal 4");

    let (_, v) = json_call(&f.app, "GET", "/api/candidates?status=decided", None).await;
    assert_eq!(v["total"], 0);
    let (s, _) = json_call(&f.app, "GET", "/api/candidates?status=weird", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = json_call(&f.app, "GET", "/api/candidates?page=0", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn detail_has_context() {
    let f = fixture(2);
    let (s, v) = json_call(&f.app, "GET", "/api/candidates/p-e0-0", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["episode"]["goal"], "goal 0");
    assert_eq!(v["step"]["elements"][0]["bbox"]["x2"], 40.0);
    assert_eq!(v["failures"]["A"]["kind"], "navigate_back");
    assert!(v["failures"]["B"].is_null());
    assert_eq!(v["screenshot_url"], "/api/screenshots/e0/0");
    let (s, v) = json_call(&f.app, "GET", "/api/candidates/nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert!(v["error"].as_str().unwrap().contains("nope"));
}

#[tokio::test]
async fn screenshots() {
    let f = fixture(3);
    let (s, body, ctype) = call(&f.app, "GET", "/api/screenshots/e0/0", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(ctype, "image/png");
    assert_eq!(body, b"\x89PNG fake");
    // path escaping the root
    assert_eq!(
        call(&f.app, "GET", "/api/screenshots/e1/0", None).await.0,
        StatusCode::NOT_FOUND
    );
    // missing file, unknown step, unknown episode
    assert_eq!(
        call(&f.app, "GET", "/api/screenshots/e2/0", None).await.0,
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        call(&f.app, "GET", "/api/screenshots/e0/5", None).await.0,
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        call(&f.app, "GET", "/api/screenshots/zz/0", None).await.0,
        StatusCode::NOT_FOUND
    );
}

#[tokio::test]
async fn edits_are_validated() {
    let f = fixture(2);
    let post = |body: Value| {
        let app = f.app.clone();
        async move { json_call(&app, "POST", "/api/candidates/p-e0-0/decision", Some(body)).await }
    };
    // edit without a replacement
    assert_eq!(
        post(json!({"verdict": "edit", "reviewer_id": "r"})).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    // off-screen revised action
    let off = json!({"verdict": "edit", "reviewer_id": "r", "edited_proposal": {
        "cause": "MultipleValidActions", "revised_gt": [{"kind": "click", "point": {"x": 500, "y": 5}}], "rationale": "r"}});
    assert_eq!(post(off).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    // unknown verdict and unknown field
    assert_eq!(
        post(json!({"verdict": "maybe", "reviewer_id": "r"})).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    assert_eq!(
        post(json!({"verdict": "accept", "reviewer_id": "r", "extra": 1}))
            .await
            .0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    assert_eq!(ledger_lines(&f), 0);

    let good = json!({"verdict": "edit", "reviewer_id": "r", "edited_proposal": {
        "cause": "MultipleValidActions", "revised_gt": [{"kind": "click", "point": {"x": 50, "y": 50}}], "rationale": "both work"}});
    let (s, v) = post(good).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "Edited");
    assert_eq!(v["cause"], "MultipleValidActions");
    assert_eq!(ledger_lines(&f), 1);

    let reopened = ProposalStore::open(&f.store_dir).unwrap();
    assert_eq!(reopened.get("p-e0-0").unwrap().proposal.status, ProposalStatus::Edited);

    let (s, _) = json_call(
        &f.app,
        "POST",
        "/api/candidates/nope/decision",
        Some(json!({"verdict": "accept", "reviewer_id": "r"})),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn concurrent_decisions_resolve_to_one_winner() {
    let f = fixture(1);
    let mut handles = Vec::new();
    for i in 0..8 {
        let app = f.app.clone();
        handles.push(tokio::spawn(async move {
            json_call(
                &app,
                "POST",
                "/api/candidates/p-e0-0/decision",
                Some(json!({"verdict": "accept", "reviewer_id": format!("r{i}")})),
            )
            .await
            .0
        }));
    }
    let mut ok = 0;
    let mut conflict = 0;
    for h in handles {
        match h.await.unwrap() {
            StatusCode::OK => ok += 1,
            StatusCode::CONFLICT => conflict += 1,
            other => panic!("unexpected {other}"),
        }
    }
    assert_eq!((ok, conflict), (1, 7));
    assert_eq!(ledger_lines(&f), 1);
}

#[tokio::test]
async fn bind_fails_when_port_taken() {
    let f = fixture(1);
    let store = ProposalStore::open(f.store_dir.join("other")).unwrap();
    let ds = Dataset::new(vec![]).unwrap();
    let first = ReviewServer::bind(AppState::new(store, ds.clone(), "."), "127.0.0.1:0")
        .await
        .unwrap();
    let addr = first.local_addr().unwrap().to_string();
    let store2 = ProposalStore::open(f.store_dir.join("other2")).unwrap();
    assert!(ReviewServer::bind(AppState::new(store2, ds, "."), &addr).await.is_err());
}
