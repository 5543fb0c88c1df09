#![allow(dead_code)]

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::{Arc, OnceLock};

use clfb_core::harness::{gen_data, Dataset, ExperimentConfig};
use clfb_core::lang::PairsPerSplit;
use clfb_core::seed::rng_from_seed;
use clfb_core::EncoderPair;
use clfb_gateway::{serve, AppState, Assets};
use serde_json::Value;

pub fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        pool_size: 60,
        split: [0.6, 0.2, 0.2],
        pairs: PairsPerSplit { train: 80, val: 20, test: 20 },
        ..ExperimentConfig::default()
    };
    cfg.latent.d_z = 8;
    cfg.latent.hidden = vec![8];
    cfg.reward.learning.epochs_per_query = 2;
    cfg
}

fn dataset() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| gen_data(&tiny_config()).unwrap())
}

pub fn assets(cfg: &ExperimentConfig) -> Assets {
    let data = dataset().clone();
    let encoder = EncoderPair::new(&cfg.latent, data.vocabulary(), &mut rng_from_seed(11)).unwrap();
    Assets::new(cfg, data, encoder).unwrap()
}

pub struct Server {
    pub addr: SocketAddr,
    pub state: Arc<AppState>,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl Server {
    pub fn start(cfg: ExperimentConfig) -> Server {
        let state = Arc::new(AppState::new(&cfg, assets(&cfg)).unwrap());
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let st = state.clone();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                addr_tx.send(listener.local_addr().unwrap()).unwrap();
                serve(listener, st, async {
                    let _ = rx.await;
                })
                .await
                .unwrap();
            });
        });
        Server {
            addr: addr_rx.recv().unwrap(),
            state,
            stop: Some(tx),
            thread: Some(thread),
        }
    }

    pub fn request(&self, method: &str, path: &str, body: Option<&str>) -> (u16, Value) {
        let mut stream = TcpStream::connect(self.addr).unwrap();
        let body = body.unwrap_or("");
        write!(
            stream,
            "{method} {path} HTTP/1.1\r\nHost: {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            self.addr,
            body.len()
        )
        .unwrap();
        let mut raw = Vec::new();
        stream.read_to_end(&mut raw).unwrap();
        let text = String::from_utf8(raw).unwrap();
        let (head, payload) = text.split_once("\r\n\r\n").expect("HTTP response has a header block");
        let status: u16 = head.split_whitespace().nth(1).unwrap().parse().unwrap();
        let value = if payload.is_empty() { Value::Null } else { serde_json::from_str(payload).unwrap() };
        (status, value)
    }

    pub fn get(&self, path: &str) -> (u16, Value) {
        self.request("GET", path, None)
    }

    pub fn post(&self, path: &str, body: Value) -> (u16, Value) {
        self.request("POST", path, Some(&body.to_string()))
    }

    pub fn create(&self, mode: &str) -> Value {
        let (status, body) = self.post("/sessions", serde_json::json!({ "mode": mode }));
        assert_eq!(status, 201, "{body}");
        body
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

pub fn error_code(body: &Value) -> &str {
    body["error"]["code"].as_str().unwrap_or("")
}

pub const PHRASES: [&str; 5] = [
    "Move higher.",
    "Move slower.",
    "Stay closer to the pan.",
    "Grasp the spoon better.",
    "Move your gripper lower.",
];
