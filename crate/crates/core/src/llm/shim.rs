//! Local HTTP server speaking the chat-completions wire format in front of a mock backend.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use crate::llm::openai::{ChatRequest, ChatResponse, Choice, ResponseMessage};
use crate::llm::{GenerationParams, LlmBackend, Message, MockBackend, Role};

pub struct MockServer {
    server: Arc<tiny_http::Server>,
    addr: SocketAddr,
    worker: Option<JoinHandle<()>>,
}

fn role(name: &str) -> Role {
    match name {
        "system" => Role::System,
        "assistant" => Role::Assistant,
        _ => Role::User,
    }
}

impl MockServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and serves until dropped.
    pub fn start(addr: &str, backend: MockBackend) -> std::io::Result<Self> {
        let server = tiny_http::Server::http(addr)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::AddrNotAvailable, e.to_string()))?;
        let server = Arc::new(server);
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("server is not bound to an IP address"))?;
        let backend = Arc::new(Mutex::new(backend));
        let serving = server.clone();
        let worker = std::thread::spawn(move || {
            for mut request in serving.incoming_requests() {
                let mut body = String::new();
                let reply = match request.as_reader().read_to_string(&mut body) {
                    Ok(_) => answer(&backend, &body),
                    Err(e) => Err(e.to_string()),
                };
                let response = match reply {
                    Ok(json) => tiny_http::Response::from_string(json).with_header(
                        "Content-Type: application/json"
                            .parse::<tiny_http::Header>()
                            .expect("static header"),
                    ),
                    Err(msg) => tiny_http::Response::from_string(msg).with_status_code(400),
                };
                let _ = request.respond(response);
            }
        });
        Ok(Self {
            server,
            addr,
            worker: Some(worker),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base URL to hand to an OpenAI-compatible client.
    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    /// Blocks the calling thread until the server stops.
    pub fn join(mut self) {
        if let Some(worker) = self.worker.take() {
            let _ = worker.join();
        }
    }
}

fn answer(backend: &Mutex<MockBackend>, body: &str) -> Result<String, String> {
    let request: ChatRequest = serde_json::from_str(body).map_err(|e| e.to_string())?;
    let messages: Vec<Message> = request
        .messages
        .into_iter()
        .map(|m| Message::new(role(&m.role), m.content))
        .collect();
    let params = GenerationParams {
        temperature: request.temperature.unwrap_or(0.2),
        top_p: request.top_p.unwrap_or(1.0),
        frequency_penalty: request.frequency_penalty.unwrap_or(0.0),
        presence_penalty: request.presence_penalty.unwrap_or(0.0),
        seed: request.seed,
        max_tokens: request.max_tokens,
    };
    let mut backend = backend.lock().map_err(|e| e.to_string())?;
    let content = backend.chat(&messages, &params).map_err(|e| e.to_string())?;
    let response = ChatResponse {
        choices: vec![Choice {
            message: ResponseMessage {
                role: Some("assistant".into()),
                content: Some(content),
                refusal: None,
            },
            finish_reason: Some("stop".into()),
        }],
    };
    serde_json::to_string(&response).map_err(|e| e.to_string())
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(worker) = self.worker.take() {
            let _ = worker.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{EndpointConfig, OpenAiCompatible};

    #[test]
    fn serves_the_mock_over_http() {
        let server = MockServer::start("127.0.0.1:0", MockBackend::oracle()).unwrap();
        let mut client = OpenAiCompatible::new(EndpointConfig::new(server.base_url(), "mock"));
        let prompt = "Separating Task: the task is to move fruits to box 1, containers and kitchenware objects to box 2.\n\
                      Name the objects that are relevant to the given task from the following:\n\
                      apple, banana, cup, bowl, baseball, pear\n\
                      Output a list of object names separated by a comma and without any extra text. If order is important to the task then output the object names in the correct order.";
        assert_eq!(
            client.complete(prompt, &GenerationParams::default()).unwrap(),
            "apple, banana, cup, bowl, pear"
        );
    }
}
