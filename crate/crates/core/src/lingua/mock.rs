use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use log::debug;
use serde::{Deserialize, Serialize};

use super::corpus::{CorpusManifest, Register};
use super::prompt::build_prompt;
use crate::error::{Error, Result};

/// Scripted responses used to reproduce the two published model rows.
pub const SAMPLE_SCRIPT_LLAMA: &str = include_str!("../../assets/mock_script_llama.json");
pub const SAMPLE_SCRIPT_NATLAS: &str = include_str!("../../assets/mock_script_natlas.json");

/// `{case_id: {register: response}}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MockScript(pub BTreeMap<u32, BTreeMap<Register, String>>);

impl MockScript {
    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::format("<mock script>", e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e))
    }

    pub fn insert(&mut self, case_id: u32, register: Register, response: impl Into<String>) {
        self.0.entry(case_id).or_default().insert(register, response.into());
    }

    pub fn get(&self, case_id: u32, register: Register) -> Option<&str> {
        self.0.get(&case_id)?.get(&register).map(String::as_str)
    }
}

#[derive(Deserialize)]
struct GenerateRequest {
    prompt: String,
}

/// Local `/api/generate` server answering corpus prompts from a script.
/// Unknown prompts get a 404.
pub struct MockGenerateServer {
    url: String,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl MockGenerateServer {
    pub fn start(corpus: &CorpusManifest, script: MockScript) -> Result<Self> {
        let mut answers: HashMap<String, String> = HashMap::new();
        for v in corpus.vignettes() {
            if let Some(reply) = script.get(v.case_id, v.register) {
                answers.insert(build_prompt(v, corpus.labels()), reply.to_string());
            }
        }
        let server = tiny_http::Server::http("127.0.0.1:0")
            .map_err(|e| Error::Validation(format!("cannot bind mock server: {e}")))?;
        let port = server
            .server_addr()
            .to_ip()
            .map(|a| a.port())
            .ok_or_else(|| Error::validation("mock server has no IP address"))?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let handle = std::thread::spawn(move || serve(server, answers, flag));
        Ok(Self {
            url: format!("http://127.0.0.1:{port}"),
            stop,
            handle: Some(handle),
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl Drop for MockGenerateServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve(server: tiny_http::Server, answers: HashMap<String, String>, stop: Arc<AtomicBool>) {
    let json_header = tiny_http::Header::from_bytes("Content-Type", "application/json").expect("static header");
    while !stop.load(Ordering::SeqCst) {
        let mut request = match server.recv_timeout(Duration::from_millis(20)) {
            Ok(Some(r)) => r,
            Ok(None) => continue,
            Err(_) => break,
        };
        let mut body = String::new();
        let parsed = request
            .as_reader()
            .read_to_string(&mut body)
            .ok()
            .and_then(|_| serde_json::from_str::<GenerateRequest>(&body).ok());
        let response = match (request.url(), parsed) {
            ("/api/generate", Some(req)) => match answers.get(&req.prompt) {
                Some(text) => {
                    let payload = serde_json::json!({ "response": text, "done": true }).to_string();
                    tiny_http::Response::from_string(payload).with_header(json_header.clone())
                }
                None => tiny_http::Response::from_string("{\"error\":\"no scripted reply\"}")
                    .with_status_code(404)
                    .with_header(json_header.clone()),
            },
            ("/api/generate", None) => tiny_http::Response::from_string("{\"error\":\"bad request\"}")
                .with_status_code(400)
                .with_header(json_header.clone()),
            _ => tiny_http::Response::from_string("not found").with_status_code(404),
        };
        debug!("mock server answered {}", response.status_code().0);
        let _ = request.respond(response);
    }
}
