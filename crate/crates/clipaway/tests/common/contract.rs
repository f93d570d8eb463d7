//! Endpoint checks against a mock-mode service; each panics on violation.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::http::StatusCode;
use clipaway::jobs::{JobState, JobStore};
use clipaway::service::{router, AppState};
use clipaway::Models;
use clipaway_core::pipeline::RemovalOptions;
use clipaway_core::raster::decode_rgb;

use super::*;

/// Submit, poll to DONE, fetch the PNG and diagnostics.
pub async fn valid_job_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let (_state, app) = mock_service(dir.path());
    let (img, mask) = scene(48, 40);
    let (ib, mb) = encode_inputs(&img, &mask);

    let r = post_remove(&app, &ib, &mb, Some(r#"{"backend": "UNIPAINT"}"#)).await;
    assert_eq!(r.status, StatusCode::ACCEPTED, "{}", String::from_utf8_lossy(&r.body));
    let v = r.json();
    assert_eq!(v["state"], "QUEUED");
    let id = v["job_id"].as_str().unwrap().to_string();

    let job = wait_terminal(&app, &id).await;
    assert_eq!(job.state, JobState::Done, "{:?}", job.error);
    assert_eq!(job.request.image_size, (48, 40));
    assert_eq!(job.request.options.dilation_kernel, 5);
    assert_eq!(job.request.options.backend.to_string(), "unipaint");
    assert!(job.provenance.contains_key("config_sha256"));
    let (c, s, f) = (job.created_at, job.started_at.unwrap(), job.finished_at.unwrap());
    assert!(c <= s && s <= f);

    let png = get(&app, &format!("/api/v1/results/{id}")).await;
    assert_eq!(png.status, StatusCode::OK);
    assert_eq!(png.content_type.as_deref(), Some("image/png"));
    let out = decode_rgb(&png.body).unwrap();
    assert_eq!(out.dimensions(), img.dimensions());

    let d = get(&app, &format!("/api/v1/results/{id}/diagnostics")).await;
    assert_eq!(d.status, StatusCode::OK);
    let d = d.json();
    assert_eq!(d["job_id"], id.as_str());
    assert_eq!(d["dilation_kernel"], 5);
    assert_eq!(d["token_masking"], "projected_tokens");
    assert!(d["cos_final_fg"].as_f64().unwrap().abs() <= 1e-4);
    assert_eq!(d["provenance"]["config_sha256"], job.provenance["config_sha256"].as_str());
}

pub async fn shape_mismatch_is_400() {
    let dir = tempfile::tempdir().unwrap();
    let (state, app) = mock_service(dir.path());
    let (img, _) = scene(200, 200);
    let (_, mask) = scene(100, 100);
    let (ib, mb) = encode_inputs(&img, &mask);
    let r = post_remove(&app, &ib, &mb, None).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(r.json()["reason"], "mask_shape_mismatch");
    assert!(state.store().list().is_empty(), "rejected requests must not create jobs");
}

/// Concurrent posts all complete, and start in submission order.
pub async fn concurrent_fifo() {
    let dir = tempfile::tempdir().unwrap();
    let (state, app) = mock_service(dir.path());
    let (img, mask) = scene(64, 48);
    let (ib, mb) = encode_inputs(&img, &mask);
    let posts = (0..4).map(|i| {
        let (app, ib, mb) = (app.clone(), ib.clone(), mb.clone());
        tokio::spawn(async move {
            let opts = format!(r#"{{"seed": {i}}}"#);
            post_remove(&app, &ib, &mb, Some(&opts)).await
        })
    });
    let mut ids = Vec::new();
    for p in posts {
        let r = p.await.unwrap();
        assert_eq!(r.status, StatusCode::ACCEPTED);
        ids.push(r.json()["job_id"].as_str().unwrap().to_string());
    }
    for id in &ids {
        assert_eq!(wait_terminal(&app, id).await.state, JobState::Done);
    }
    let jobs = state.store().list();
    assert_eq!(jobs.len(), 4);
    for pair in jobs.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        assert!(a.seq < b.seq);
        assert!(a.started_at.unwrap() <= b.started_at.unwrap(), "start order differs from submission order");
        assert!(a.finished_at.unwrap() <= b.finished_at.unwrap(), "finish order differs from submission order");
    }
}

/// RUNNING jobs become FAILED "interrupted"; QUEUED jobs run after restart.
pub async fn restart_recovery() {
    let dir = tempfile::tempdir().unwrap();
    let (img, mask) = scene(40, 32);
    let (running, queued, done) = {
        let (store, _) = JobStore::open(dir.path()).unwrap();
        let opts = RemovalOptions {
            steps: 4,
            ..Default::default()
        };
        let a = store.create(&img, &mask, opts.clone(), BTreeMap::new()).unwrap().id;
        let b = store.create(&img, &mask, opts.clone(), BTreeMap::new()).unwrap().id;
        let c = store.create(&img, &mask, opts, BTreeMap::new()).unwrap().id;
        store.mark_running(&a).unwrap();
        store.mark_running(&c).unwrap();
        store.mark_done(&c, &img, &serde_json::json!({})).unwrap();
        (a, b, c)
    };
    let (_state, app) = mock_service(dir.path());

    let a = wait_terminal(&app, &running).await;
    assert_eq!(a.state, JobState::Failed);
    assert_eq!(a.error.unwrap().reason, "interrupted");
    let b = wait_terminal(&app, &queued).await;
    assert_eq!(b.state, JobState::Done, "{:?}", b.error);
    let png = get(&app, &format!("/api/v1/results/{queued}")).await;
    assert_eq!(decode_rgb(&png.body).unwrap().dimensions(), (40, 32));
    let c = get(&app, &format!("/api/v1/results/{done}")).await;
    assert_eq!(c.status, StatusCode::OK);
}

pub async fn unknown_job_is_404() {
    let dir = tempfile::tempdir().unwrap();
    let (_state, app) = mock_service(dir.path());
    for uri in ["/api/v1/jobs/nope", "/api/v1/results/nope", "/api/v1/results/nope/diagnostics"] {
        let r = get(&app, uri).await;
        assert_eq!(r.status, StatusCode::NOT_FOUND, "{uri}");
        assert_eq!(r.json()["reason"], "job_not_found");
    }
}

pub async fn oversize_is_413() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = mock_config(dir.path());
    cfg.service.max_upload_bytes = 2048;
    let (store, _) = JobStore::open(dir.path()).unwrap();
    let state = AppState::new(cfg.clone(), Arc::new(store), vec![]);
    state.install_models(Arc::new(Models::from_config(&cfg).unwrap()));
    let app = router(state);
    let (img, mask) = scene(256, 256);
    let (ib, mb) = encode_inputs(&img, &mask);
    assert!(ib.len() > 2048);
    let r = post_remove(&app, &ib, &mb, None).await;
    assert_eq!(r.status, StatusCode::PAYLOAD_TOO_LARGE);
}

pub async fn loading_is_503() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = mock_config(dir.path());
    let (store, _) = JobStore::open(dir.path()).unwrap();
    let state = AppState::new(cfg.clone(), Arc::new(store), vec![]);
    let app = router(state.clone());
    let h = get(&app, "/api/v1/health").await;
    assert_eq!(h.status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(h.json()["status"], "loading");
    let (img, mask) = scene(16, 16);
    let (ib, mb) = encode_inputs(&img, &mask);
    let r = post_remove(&app, &ib, &mb, None).await;
    assert_eq!(r.status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(r.json()["reason"], "models_loading");

    state.install_models(Arc::new(Models::from_config(&cfg).unwrap()));
    let h = get(&app, "/api/v1/health").await;
    assert_eq!(h.status, StatusCode::OK);
    let v = h.json();
    assert_eq!(v["status"], "ready");
    assert_eq!(v["mock"], true);
    assert_eq!(v["config_sha256"], cfg.snapshot_hash().as_str());
    assert_eq!(v["backends"].as_array().unwrap().len(), 3);
    assert!(v["weights"].is_object());
}

pub async fn bad_requests_are_400() {
    let dir = tempfile::tempdir().unwrap();
    let (_state, app) = mock_service(dir.path());
    let (img, mask) = scene(16, 16);
    let (ib, mb) = encode_inputs(&img, &mask);
    let r = post_remove(&app, &ib, &mb, Some(r#"{"dilation_kernel": 4}"#)).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(r.json()["reason"], "invalid_request");
    let r = post_remove(&app, b"not an image", &mb, None).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(r.json()["reason"], "image_decode_error");
}

/// A job that has not finished has no result yet.
pub async fn pending_result_is_409() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = mock_config(dir.path());
    let (store, _) = JobStore::open(dir.path()).unwrap();
    let store = Arc::new(store);
    let (img, mask) = scene(16, 16);
    let id = store.create(&img, &mask, RemovalOptions::default(), BTreeMap::new()).unwrap().id;
    let app = router(AppState::new(cfg, store, vec![]));
    let r = get(&app, &format!("/api/v1/results/{id}")).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    assert_eq!(r.json()["reason"], "job_not_done");
}
