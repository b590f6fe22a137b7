#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use lmmclip::embed::{EmbeddingBackend, ReferenceHashBackend};
use lmmclip::gateway::{FixtureFile, Gateway, GatewayError, LmmExchange, LmmProvider, LmmRequest, ReplayProvider};
use lmmclip::http::{HttpRequest, HttpResponse, Transport, TransportError};
use lmmclip::labels::{load_class_list, ClassLabelSet};
use lmmclip::pipeline::{Classifier, PipelineConfig, PipelineMode};

pub const RECORDED_AT: &str = "2024-11-01T00:00:00Z";

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn mismatch_dir() -> PathBuf {
    fixtures_dir().join("mismatch")
}

pub fn redcar_dir() -> PathBuf {
    fixtures_dir().join("redcar")
}

pub fn mismatch_labels() -> ClassLabelSet {
    load_class_list(mismatch_dir().join("mismatch.txt")).unwrap()
}

pub fn vehicle_labels() -> ClassLabelSet {
    load_class_list(redcar_dir().join("vehicles.txt")).unwrap()
}

pub fn reference_backend() -> Arc<dyn EmbeddingBackend> {
    Arc::new(ReferenceHashBackend::new(256).unwrap())
}

pub fn replay_gateway(file: FixtureFile) -> Gateway {
    Gateway::new(Arc::new(ReplayProvider::from_file(file)))
}

fn request_builder(mode: PipelineMode, labels: &ClassLabelSet) -> Classifier {
    let backend = (mode != PipelineMode::LmmOnly).then(reference_backend);
    Classifier::new(
        PipelineConfig::with_mode(mode),
        labels.clone(),
        replay_gateway(FixtureFile::new()),
        backend,
    )
    .unwrap()
}

/// (image file, first-stage answer, second-stage answer, answer when the
/// class list is in the prompt)
pub const MISMATCH_ANSWERS: [(&str, &str, &str, &str); 4] = [
    ("gaillardia.png", "Gaillardia", "Blanket Flower", "Gaillardia"),
    ("ruellia.png", "Ruellia", "Mexican Petunia", "Ruellia"),
    ("cradle.png", "Cradle", "Infant Bed", "Cradle"),
    ("crib.png", "Crib", "Infant Bed", "Crib"),
];

/// The replay fixture for the mismatch set, built from the pipeline's own
/// request builders so keys always line up.
pub fn mismatch_fixture_file() -> FixtureFile {
    let labels = mismatch_labels();
    let two_stage = request_builder(PipelineMode::Tlac, &labels);
    let exact = request_builder(PipelineMode::LmmOnly, &labels);
    let mut file = FixtureFile::new();
    for (img, s1, s2, direct) in MISMATCH_ANSWERS {
        let image = mismatch_dir().join("images").join(img);
        file.push_answer(&two_stage.stage1_request(&image).unwrap(), s1, RECORDED_AT);
        file.push_answer(&two_stage.stage2_request(&image, s1).unwrap(), s2, RECORDED_AT);
        file.push_answer(&exact.stage1_request(&image).unwrap(), direct, RECORDED_AT);
    }
    file
}

pub const RED_CAR_ANSWER: &str = "The image shows red sports car";

pub fn redcar_fixture_file() -> FixtureFile {
    let labels = vehicle_labels();
    let builder = request_builder(PipelineMode::Tlac, &labels);
    let image = redcar_dir().join("red_car.png");
    let mut file = FixtureFile::new();
    file.push_answer(&builder.stage1_request(&image).unwrap(), RED_CAR_ANSWER, RECORDED_AT);
    file.push_answer(&builder.stage2_request(&image, RED_CAR_ANSWER).unwrap(), "red car", RECORDED_AT);
    file
}

/// Wraps a provider and counts calls per model id.
pub struct Counting<P> {
    pub inner: P,
    pub calls: Mutex<Vec<String>>,
}

impl<P> Counting<P> {
    pub fn new(inner: P) -> Arc<Self> {
        Arc::new(Self {
            inner,
            calls: Mutex::new(Vec::new()),
        })
    }

    pub fn total(&self) -> usize {
        self.calls.lock().unwrap().len()
    }

    pub fn for_model(&self, model: &str) -> usize {
        self.calls.lock().unwrap().iter().filter(|m| *m == model).count()
    }
}

impl<P: LmmProvider> LmmProvider for Counting<P> {
    fn query(&self, request: &LmmRequest) -> Result<LmmExchange, GatewayError> {
        self.calls.lock().unwrap().push(request.model_id.clone());
        self.inner.query(request)
    }
}

/// A Gemini-shaped HTTP fake: answers every call with a text derived from
/// the request body and records call times.
pub struct FakeGemini {
    pub calls: AtomicUsize,
    pub times: Mutex<Vec<Instant>>,
}

impl FakeGemini {
    pub fn new() -> Arc<Self> {
        Arc::new(Self {
            calls: AtomicUsize::new(0),
            times: Mutex::new(Vec::new()),
        })
    }

    pub fn count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Transport for FakeGemini {
    fn post(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.times.lock().unwrap().push(Instant::now());
        let body: serde_json::Value = serde_json::from_slice(&request.body).unwrap();
        let prompt = body["contents"][0]["parts"][0]["text"].as_str().unwrap_or_default();
        let reply = serde_json::json!({
            "candidates": [{"content": {"parts": [{"text": format!("echo {prompt}")}]}, "finishReason": "STOP"}]
        });
        Ok(HttpResponse {
            status: 200,
            body: serde_json::to_vec(&reply).unwrap(),
        })
    }
}
