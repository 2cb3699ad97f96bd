use super::types::{ChatRequest, ChatResponse};
use super::GatewayError;

/// Something that can answer model requests: an HTTP endpoint, a scripted
/// backend, or a closure in tests.
pub trait Transport: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;

    /// One vector per input text, order-aligned.
    fn embed(&self, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError>;
}

type ChatFn = dyn Fn(&ChatRequest) -> Result<ChatResponse, GatewayError> + Send + Sync;
type EmbedFn = dyn Fn(&str, &str) -> Vec<f64> + Send + Sync;

/// Closure-backed transport, handy for tests and one-off tools.
pub struct FnTransport {
    chat: Box<ChatFn>,
    embed: Option<Box<EmbedFn>>,
}

impl FnTransport {
    pub fn new(chat: impl Fn(&ChatRequest) -> Result<ChatResponse, GatewayError> + Send + Sync + 'static) -> Self {
        Self { chat: Box::new(chat), embed: None }
    }

    /// Transport whose chat replies are produced by `reply(prompt_of_last_message)`.
    pub fn replying(reply: impl Fn(&str) -> String + Send + Sync + 'static) -> Self {
        Self::new(move |req| {
            let prompt = req.messages.last().map(|m| m.content.as_str()).unwrap_or_default();
            Ok(ChatResponse::stop(reply(prompt)))
        })
    }

    pub fn with_embedder(mut self, embed: impl Fn(&str, &str) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.embed = Some(Box::new(embed));
        self
    }
}

impl Transport for FnTransport {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (self.chat)(request)
    }

    fn embed(&self, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        let embed = self
            .embed
            .as_ref()
            .ok_or_else(|| GatewayError::Transport("this transport has no embedding function".into()))?;
        Ok(texts.iter().map(|t| embed(model_id, t)).collect())
    }
}
