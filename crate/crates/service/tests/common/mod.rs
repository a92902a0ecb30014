#![allow(dead_code)]

use presencia_core::demo;
use presencia_core::engine::Engine;
use presencia_core::haar::HaarCascade;
use presencia_core::synth::synthetic_cascade;
use std::fs;
use std::path::Path;
use std::sync::{Arc, OnceLock};
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

pub fn demo_cascade() -> HaarCascade {
    static CASCADE: OnceLock<HaarCascade> = OnceLock::new();
    CASCADE.get_or_init(|| synthetic_cascade(&demo::cascade_recipe()).unwrap()).clone()
}

/// A fresh data root with the demo config, detector, and impostor cohort.
pub fn demo_engine(root: &Path) -> Engine {
    let engine = Engine::open_with(root, demo::config()).unwrap();
    engine.install_cascade(demo_cascade()).unwrap();
    fs::create_dir_all(engine.cohort_dir()).unwrap();
    for (i, chip) in demo::cohort_chips().iter().enumerate() {
        fs::write(engine.cohort_dir().join(format!("c{i:03}.ppm")), chip.encode_pnm()).unwrap();
    }
    engine
}

pub struct Server {
    pub base: String,
    pub engine: Arc<Engine>,
    stop: Option<oneshot::Sender<()>>,
    task: Option<JoinHandle<std::io::Result<()>>>,
}

impl Server {
    pub async fn start(engine: Arc<Engine>) -> Server {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let (stop, stopped) = oneshot::channel::<()>();
        let task = tokio::spawn(presencia::serve(listener, engine.clone(), async {
            let _ = stopped.await;
        }));
        Server { base, engine, stop: Some(stop), task: Some(task) }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub async fn stop(mut self) {
        let _ = self.stop.take().unwrap().send(());
        self.task.take().unwrap().await.unwrap().unwrap();
    }
}

/// `(event, data)` pairs of a complete server-sent-events body, skipping
/// comments and keep-alives.
pub fn parse_sse(body: &str) -> Vec<(String, String)> {
    body.split("\n\n")
        .filter_map(|block| {
            let mut event = String::from("message");
            let mut data = Vec::new();
            for line in block.lines() {
                if let Some(v) = line.strip_prefix("event:") {
                    event = v.trim_start().to_string();
                } else if let Some(v) = line.strip_prefix("data:") {
                    data.push(v.strip_prefix(' ').unwrap_or(v));
                }
            }
            (!data.is_empty()).then(|| (event, data.join("\n")))
        })
        .collect()
}
