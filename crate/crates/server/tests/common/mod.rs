//! Fixtures shared by the server test targets.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

use calltriage::embed::BackendSpec;
use calltriage::pipeline;
use calltriage::project2d::ProjectionMethod;
use calltriage::store::{Project, ProjectConfig};
use calltriage::synthlab::SynthSpec;

/// A small corpus: enough kept reference windows for the default k = 12.
pub fn small_spec() -> SynthSpec {
    SynthSpec {
        seed: 5,
        n_reference: 16,
        n_positive: 5,
        n_negative: 5,
        recording_len_s: 4.0,
        ..SynthSpec::default()
    }
}

/// Runs every stage through clustering and a PCA projection. Nothing is labelled.
pub fn build_clustered(root: &Path, spec: &SynthSpec) -> Project {
    let mut p = Project::init(root, ProjectConfig::default()).unwrap();
    pipeline::synth(&p, spec).unwrap();
    pipeline::ingest(&mut p).unwrap();
    pipeline::spectrogram(&mut p).unwrap();
    pipeline::embed(&mut p, &BackendSpec::BaselineFlatten).unwrap();
    let (k, seed) = (p.config.cluster.k, p.config.seed);
    pipeline::cluster(&mut p, k, seed).unwrap();
    pipeline::project2d(&mut p, ProjectionMethod::Pca, seed).unwrap();
    p
}

pub fn copy_dir(src: &Path, dst: &Path) {
    fs::create_dir_all(dst).unwrap();
    for entry in fs::read_dir(src).unwrap() {
        let entry = entry.unwrap();
        let to = dst.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &to);
        } else {
            fs::copy(entry.path(), to).unwrap();
        }
    }
}

/// A private copy of the clustered small project, built once per test binary.
pub fn fresh_project() -> (tempfile::TempDir, Project) {
    static TEMPLATE: OnceLock<PathBuf> = OnceLock::new();
    let template = TEMPLATE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        build_clustered(&dir, &small_spec());
        dir
    });
    let dir = tempfile::tempdir().unwrap();
    copy_dir(template, dir.path());
    let p = Project::open(dir.path()).unwrap();
    (dir, p)
}

pub struct Reply {
    pub status: StatusCode,
    pub content_type: Option<String>,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.body)
            .unwrap_or_else(|e| panic!("not JSON ({e}): {}", String::from_utf8_lossy(&self.body)))
    }
}

pub async fn send(app: &Router, method: Method, uri: &str, body: Option<Value>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let content_type = resp
        .headers()
        .get(header::CONTENT_TYPE)
        .map(|v| v.to_str().unwrap().to_string());
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply {
        status,
        content_type,
        body,
    }
}

pub async fn get(app: &Router, uri: &str) -> Reply {
    send(app, Method::GET, uri, None).await
}

pub async fn post(app: &Router, uri: &str, body: Value) -> Reply {
    send(app, Method::POST, uri, Some(body)).await
}
