//! Live benchmark driver: answers each dataset question through the full
//! pipeline.
//!
//! Every item runs in its own in-memory store, so items are independent and
//! the run gives the same answers at any degree of parallelism. The item's
//! `profile_text` stands in for the vision-language backend: a scripted mock
//! returns it for the item's image, and the cold-start path parses it as
//! usual.

use std::path::Path;
use std::sync::{Arc, Mutex};

use crate::clock::TickClock;
use crate::domain::{BenchItem, GenerationConfig};
use crate::gateway::{
    chat_request_digest, Backend, Backends, ChatBackend, ChatMessage, GatewayError, ImageData, MockBackend, MockScript,
};
use crate::orchestrator::{Pipeline, PipelineSettings, TurnError, TurnInput};
use crate::parallel::{map_ordered_coarse, with_threads, ExecMode};
use crate::persistence::Store;

const BENCH_VLM_ID: &str = "bench-profile-text";

/// First failing item of a run.
#[derive(Debug, thiserror::Error)]
#[error("item {item_id}: {source}")]
pub struct ItemFailure {
    pub item_id: String,
    #[source]
    pub source: TurnError,
}

fn image_path(item: &BenchItem, base_dir: &Path) -> std::path::PathBuf {
    let p = Path::new(&item.image_ref);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}

fn run_item(
    item: &BenchItem,
    base_dir: &Path,
    backends: &Backends,
    settings: &PipelineSettings,
) -> Result<String, TurnError> {
    let image = ImageData::load(&image_path(item, base_dir), settings.max_image_bytes)?;
    let vlm = Arc::new(MockBackend::new(BENCH_VLM_ID, MockScript::with_default(item.profile_text.clone())));
    let item_backends = Backends { vision: vlm, ..backends.clone() };
    let pipeline = Pipeline::new(Arc::new(Store::in_memory()), item_backends, settings.clone())
        .with_clock(Arc::new(TickClock::new(0, 1)));
    let session_id = format!("bench-{}", item.item_id);
    pipeline.create_session(&session_id)?;
    let outcome = pipeline
        .run_turn(&session_id, TurnInput { text: item.question.clone(), image: Some(image), consent: Some(true) })?;
    Ok(outcome.reply)
}

/// Answers every item. Image paths are relative to `base_dir`.
///
/// Returns answers in dataset order, or the first failure in dataset order.
pub fn generate_answers(
    dataset: &[BenchItem],
    base_dir: &Path,
    backends: &Backends,
    settings: &PipelineSettings,
    jobs: usize,
) -> Result<Vec<(String, String)>, ItemFailure> {
    let mode = if jobs > 1 { ExecMode::Parallel } else { ExecMode::Sequential };
    let results =
        with_threads(jobs, || map_ordered_coarse(dataset, mode, |item| run_item(item, base_dir, backends, settings)));
    dataset
        .iter()
        .zip(results)
        .map(|(item, r)| match r {
            Ok(answer) => Ok((item.item_id.clone(), answer)),
            Err(source) => Err(ItemFailure { item_id: item.item_id.clone(), source }),
        })
        .collect()
}

/// Chat backend that only records the digest of the request it receives.
struct DigestRecorder {
    seen: Mutex<Option<String>>,
}

impl Backend for DigestRecorder {
    fn backend_id(&self) -> &str {
        "digest-recorder"
    }

    fn ping(&self) -> bool {
        true
    }
}

impl ChatBackend for DigestRecorder {
    fn chat_complete(&self, messages: &[ChatMessage], _config: &GenerationConfig) -> Result<String, GatewayError> {
        *self.seen.lock().unwrap_or_else(|e| e.into_inner()) = Some(chat_request_digest(messages));
        Err(GatewayError::BackendUnavailable { backend: "digest-recorder".into(), reason: "recording only".into() })
    }
}

/// Digest of the reasoning request each item produces, for writing chat
/// mock scripts. Items run sequentially.
pub fn chat_digests(
    dataset: &[BenchItem],
    base_dir: &Path,
    backends: &Backends,
    settings: &PipelineSettings,
) -> Result<Vec<(String, String)>, ItemFailure> {
    let mut out = Vec::with_capacity(dataset.len());
    for item in dataset {
        let recorder = Arc::new(DigestRecorder { seen: Mutex::new(None) });
        let recording = Backends { chat: recorder.clone(), ..backends.clone() };
        let result = run_item(item, base_dir, &recording, settings);
        let digest = recorder.seen.lock().unwrap_or_else(|e| e.into_inner()).take();
        match (digest, result) {
            (Some(d), _) => out.push((item.item_id.clone(), d)),
            (None, Err(source)) => return Err(ItemFailure { item_id: item.item_id.clone(), source }),
            (None, Ok(_)) => unreachable!("recorder never answers"),
        }
    }
    Ok(out)
}
