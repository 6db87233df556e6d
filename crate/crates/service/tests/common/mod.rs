#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::Path;
use std::time::{Duration, Instant};

use lams_core::imageio::{encode_base64, encode_png};
use lams_core::masking::{Rect, StubRule};
use lams_service::{SegmentationConfig, Service, ServiceConfig};
use ndarray::Array3;
use serde_json::{json, Value};

pub fn png(size: usize, seed: usize) -> Vec<u8> {
    let img = Array3::from_shape_fn((3, size, size), |(c, y, x)| {
        ((c * 37 + y * 11 + x * 5 + seed * 13) % 256) as f64 / 255.0
    });
    encode_png(&img).unwrap()
}

pub fn config(dir: &Path) -> ServiceConfig {
    ServiceConfig { data_dir: dir.to_path_buf(), ..ServiceConfig::default() }
}

/// Stub segmenter that finds a "cat" in the left half of a 16x16 image.
pub fn stub_segmentation() -> SegmentationConfig {
    SegmentationConfig::Stub {
        rules: vec![StubRule {
            keyword: "cat".into(),
            rects: vec![Rect { top: 0, left: 0, height: 16, width: 8 }],
            score: 0.9,
        }],
    }
}

pub fn edit_body(seed: usize) -> Value {
    json!({
        "image": { "base64": encode_base64(&png(16, seed)) },
        "source_prompt": "a photo of a cat",
        "target_prompt": "a photo of a dog",
    })
}

pub struct Server {
    pub service: Service,
    pub addr: SocketAddr,
    pub client: reqwest::Client,
}

impl Server {
    pub async fn start(config: ServiceConfig) -> Self {
        let service = Service::start(config).unwrap();
        let (addr, _) = lams_service::spawn(service.clone(), "127.0.0.1:0".parse().unwrap()).await.unwrap();
        Self { service, addr, client: reqwest::Client::new() }
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }

    pub async fn get(&self, path: &str) -> reqwest::Response {
        self.client.get(self.url(path)).send().await.unwrap()
    }

    pub async fn post_json(&self, path: &str, body: &Value) -> reqwest::Response {
        self.client.post(self.url(path)).json(body).send().await.unwrap()
    }

    pub async fn submit(&self, body: &Value) -> String {
        let resp = self.post_json("/api/v1/edits", body).await;
        assert_eq!(resp.status(), 202);
        resp.json::<Value>().await.unwrap()["job_id"].as_str().unwrap().to_string()
    }

    /// Polls the job until it is done or failed.
    pub async fn wait(&self, id: &str) -> Value {
        let deadline = Instant::now() + Duration::from_secs(120);
        loop {
            let rec: Value = self.get(&format!("/api/v1/edits/{id}")).await.json().await.unwrap();
            let state = rec["state"].as_str().unwrap();
            if state == "done" || state == "failed" {
                return rec;
            }
            assert!(Instant::now() < deadline, "job {id} stuck in {state}");
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    }
}
