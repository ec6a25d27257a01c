use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::{Problem, PromptRef, Sampler, TrajectoryContent};
use crate::transport::{ChatMessage, ChatRequest, ChatTransport, TransportError};

/// Samples rollouts from a chat-completions model: the prompt under
/// evaluation is the system message, the problem payload the user turn.
pub struct ChatSampler {
    transport: Arc<dyn ChatTransport>,
    model: String,
    temperature: f64,
}

impl ChatSampler {
    pub fn new(transport: Arc<dyn ChatTransport>, model: impl Into<String>, temperature: f64) -> Self {
        Self { transport, model: model.into(), temperature }
    }
}

impl Sampler for ChatSampler {
    fn generate(
        &self,
        prompt: PromptRef<'_>,
        problem: &Problem,
        _rng: &mut ChaCha8Rng,
    ) -> Result<TrajectoryContent, TransportError> {
        let request = ChatRequest {
            model: self.model.clone(),
            messages: vec![ChatMessage::system(prompt.text), ChatMessage::user(&problem.payload)],
            temperature: self.temperature,
        };
        self.transport.complete(&request).map(TrajectoryContent::Text)
    }
}
