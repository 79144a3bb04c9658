#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use userllm_core::clock::TickClock;
use userllm_core::gateway::{Backends, ImageData, MockBackend, MockScript};
use userllm_core::orchestrator::{Pipeline, PipelineSettings};
use userllm_core::persistence::Store;

pub const ROW1_PROFILE: &str = "The person appears to be a southeast Asian female, approximately 60 to 69 years old.";
pub const ROW2_PROFILE: &str = "The person appears to be an Indian male, approximately 60 to 69 years old.";

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

pub fn image(n: u32) -> ImageData {
    ImageData::load(&fixture(&format!("images/face{n}.png")), 1 << 20).unwrap()
}

/// One mock per role so call counts can be checked separately.
pub struct Mocks {
    pub chat: Arc<MockBackend>,
    pub vision: Arc<MockBackend>,
    pub text_embed: Arc<MockBackend>,
    pub image_embed: Arc<MockBackend>,
}

impl Mocks {
    pub fn new(chat: MockScript, vision: MockScript) -> Self {
        Self {
            chat: Arc::new(MockBackend::new("chat", chat)),
            vision: Arc::new(MockBackend::new("vlm", vision)),
            text_embed: Arc::new(MockBackend::new("text-embed", MockScript::default())),
            image_embed: Arc::new(MockBackend::new("face-embed", MockScript::default())),
        }
    }

    pub fn answering(reply: &str, profile_text: &str) -> Self {
        Self::new(MockScript::with_default(reply), MockScript::with_default(profile_text))
    }

    pub fn backends(&self) -> Backends {
        Backends {
            chat: self.chat.clone(),
            vision: self.vision.clone(),
            text_embed: self.text_embed.clone(),
            image_embed: self.image_embed.clone(),
        }
    }

    pub fn pipeline(&self, store: Arc<Store>) -> Pipeline {
        Pipeline::new(store, self.backends(), PipelineSettings::default())
            .with_clock(Arc::new(TickClock::new(1_700_000_000_000, 1)))
    }
}
