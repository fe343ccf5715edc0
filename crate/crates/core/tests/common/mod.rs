//! Local chat-completion stub for exercising the LLM client offline.

#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde_json::{json, Value};
use tiny_http::{Header, Response, Server};

/// What the stub sends back for one request.
pub enum Reply {
    Content(String),
    Status(u16),
}

#[derive(Debug, Clone)]
pub struct Seen {
    pub path: String,
    pub authorization: Option<String>,
    pub body: Value,
}

impl Seen {
    pub fn user_message(&self) -> &str {
        self.body["messages"][1]["content"].as_str().unwrap_or("")
    }
}

pub struct Stub {
    pub base_url: String,
    requests: Arc<AtomicUsize>,
    seen: Arc<Mutex<Vec<Seen>>>,
    server: Arc<Server>,
    worker: Option<JoinHandle<()>>,
}

impl Stub {
    /// Serves on an ephemeral port; `respond` sees the user message.
    pub fn start<F>(respond: F) -> Stub
    where
        F: Fn(&str) -> Reply + Send + 'static,
    {
        let server = Arc::new(Server::http("127.0.0.1:0").expect("bind stub"));
        let port = server.server_addr().to_ip().expect("ip listener").port();
        let requests = Arc::new(AtomicUsize::new(0));
        let seen = Arc::new(Mutex::new(Vec::new()));
        let worker = {
            let (server, requests, seen) = (server.clone(), requests.clone(), seen.clone());
            std::thread::spawn(move || {
                for mut req in server.incoming_requests() {
                    requests.fetch_add(1, Ordering::SeqCst);
                    let mut body = String::new();
                    req.as_reader().read_to_string(&mut body).ok();
                    let body: Value = serde_json::from_str(&body).unwrap_or(Value::Null);
                    let authorization = req
                        .headers()
                        .iter()
                        .find(|h| h.field.equiv("Authorization"))
                        .map(|h| h.value.to_string());
                    let record = Seen {
                        path: req.url().to_owned(),
                        authorization,
                        body,
                    };
                    let reply = respond(record.user_message());
                    seen.lock().unwrap().push(record);
                    let json_header =
                        Header::from_bytes("Content-Type", "application/json").unwrap();
                    let response = match reply {
                        Reply::Content(text) => Response::from_string(
                            json!({"choices": [{"message": {"role": "assistant", "content": text}}]})
                                .to_string(),
                        )
                        .with_header(json_header),
                        Reply::Status(code) => {
                            Response::from_string("{\"error\": \"unavailable\"}").with_status_code(code)
                        }
                    };
                    req.respond(response).ok();
                }
            })
        };
        Stub {
            base_url: format!("http://127.0.0.1:{port}/v1"),
            requests,
            seen,
            server,
            worker: Some(worker),
        }
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn seen(&self) -> Vec<Seen> {
        self.seen.lock().unwrap().clone()
    }
}

impl Drop for Stub {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(w) = self.worker.take() {
            w.join().ok();
        }
    }
}
