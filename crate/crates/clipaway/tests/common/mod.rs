#![allow(dead_code)]

pub mod cli;
pub mod contract;

use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use clipaway::jobs::{Job, JobState, JobStore};
use clipaway::service::{router, AppState};
use clipaway::{Models, ToolkitConfig};
use clipaway_core::raster::{encode_png_gray, encode_png_rgb, BinaryMask};
use http_body_util::BodyExt;
use image::{Rgb, RgbImage};
use tower::ServiceExt;

pub const BOUNDARY: &str = "clipaway-test-boundary";

pub fn mock_config(jobs_dir: &std::path::Path) -> ToolkitConfig {
    let mut cfg = ToolkitConfig {
        mock: true,
        ..Default::default()
    };
    cfg.service.jobs_dir = jobs_dir.to_path_buf();
    cfg.pipeline.steps = 4;
    cfg
}

pub fn scene(w: u32, h: u32) -> (RgbImage, BinaryMask) {
    let img = RgbImage::from_fn(w, h, |x, y| Rgb([(x * 7 % 256) as u8, (y * 5 % 256) as u8, 90]));
    let mask = BinaryMask::from_fn(w, h, |x, y| {
        let (cx, cy) = (w as i64 / 2, h as i64 / 2);
        let (dx, dy) = (x as i64 - cx, y as i64 - cy);
        dx * dx + dy * dy < (w.min(h) as i64 / 4).pow(2)
    });
    (img, mask)
}

pub fn multipart(image: &[u8], mask: &[u8], options: Option<&str>) -> (String, Vec<u8>) {
    let mut body = Vec::new();
    let mut part = |name: &str, filename: Option<&str>, ctype: &str, data: &[u8]| {
        body.extend_from_slice(format!("--{BOUNDARY}\r\n").as_bytes());
        match filename {
            Some(f) => body.extend_from_slice(
                format!("Content-Disposition: form-data; name=\"{name}\"; filename=\"{f}\"\r\n").as_bytes(),
            ),
            None => body.extend_from_slice(format!("Content-Disposition: form-data; name=\"{name}\"\r\n").as_bytes()),
        }
        body.extend_from_slice(format!("Content-Type: {ctype}\r\n\r\n").as_bytes());
        body.extend_from_slice(data);
        body.extend_from_slice(b"\r\n");
    };
    part("image", Some("image.png"), "image/png", image);
    part("mask", Some("mask.png"), "image/png", mask);
    if let Some(o) = options {
        part("options", None, "application/json", o.as_bytes());
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    (format!("multipart/form-data; boundary={BOUNDARY}"), body)
}

pub fn encode_inputs(img: &RgbImage, mask: &BinaryMask) -> (Vec<u8>, Vec<u8>) {
    (encode_png_rgb(img).unwrap(), encode_png_gray(&mask.to_gray()).unwrap())
}

/// A store, state and router in `dir`, with mock models installed.
pub fn mock_service(dir: &std::path::Path) -> (Arc<AppState>, Router) {
    let cfg = mock_config(dir);
    let (store, recovery) = JobStore::open(dir).unwrap();
    let state = AppState::new(cfg.clone(), Arc::new(store), recovery.queued);
    state.install_models(Arc::new(Models::from_config(&cfg).unwrap()));
    let app = router(state.clone());
    (state, app)
}

pub struct Reply {
    pub status: StatusCode,
    pub content_type: Option<String>,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> serde_json::Value {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| {
            panic!("body is not JSON ({e}): {}", String::from_utf8_lossy(&self.body))
        })
    }
}

pub async fn call(app: &Router, req: Request<Body>) -> Reply {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let content_type = resp
        .headers()
        .get("content-type")
        .map(|v| v.to_str().unwrap().to_string());
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply {
        status,
        content_type,
        body,
    }
}

pub async fn get(app: &Router, uri: &str) -> Reply {
    call(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

pub async fn post_remove(app: &Router, image: &[u8], mask: &[u8], options: Option<&str>) -> Reply {
    let (ctype, body) = multipart(image, mask, options);
    let req = Request::post("/api/v1/remove")
        .header("content-type", ctype)
        .body(Body::from(body))
        .unwrap();
    call(app, req).await
}

/// Poll the job endpoint until the job is terminal.
pub async fn wait_terminal(app: &Router, id: &str) -> Job {
    let deadline = Instant::now() + Duration::from_secs(60);
    loop {
        let r = get(app, &format!("/api/v1/jobs/{id}")).await;
        assert_eq!(r.status, StatusCode::OK);
        let job: Job = serde_json::from_slice(&r.body).unwrap();
        if matches!(job.state, JobState::Done | JobState::Failed) {
            return job;
        }
        assert!(Instant::now() < deadline, "job {id} stuck in {}", job.state);
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}
