//! Single-stage, two-stage and LMM-only classification.
//!
//! * **SLAC**: ask the LMM what is in the image, then match its answer to a
//!   class label by embedding similarity.
//! * **TLAC**: as SLAC, then send the first answer and the class list back to
//!   the LMM (text only by default), and similarity-match that second answer.
//! * **LMM-only**: the class list goes into the prompt and the answer must
//!   equal a label exactly (after canonicalization). No embedding involved.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::embed::{EmbedError, EmbeddingBackend, LabelIndex, Prediction};
use crate::gateway::{Gateway, GatewayError, GenerationParams, LmmExchange, LmmRequest};
use crate::labels::{ClassLabel, ClassLabelSet, PromptTemplate};

pub const DEFAULT_STAGE1_PROMPT: &str = "Which object is present in the image? Also tell its attribute.";
pub const DEFAULT_STAGE1_MODEL: &str = "gemini-1.5-pro-002";
pub const DEFAULT_STAGE2_MODEL: &str = "gemini-1.5-flash-002";
const CLASS_CHOICE_HEADER: &str = "Choose from the following classes:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineMode {
    Slac,
    Tlac,
    LmmOnly,
}

impl fmt::Display for PipelineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PipelineMode::Slac => "slac",
            PipelineMode::Tlac => "tlac",
            PipelineMode::LmmOnly => "lmm-only",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefusalPolicy {
    /// A refusal is scored as a wrong answer.
    CountWrong,
    /// Ask once more, bypassing the cache; a second refusal is wrong.
    RetryOnceThenWrong,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub mode: PipelineMode,
    pub stage1_model_id: String,
    /// Required for TLAC, ignored otherwise.
    pub stage2_model_id: Option<String>,
    pub stage1_prompt: String,
    pub include_classes_in_stage1: bool,
    pub label_template: PromptTemplate,
    pub refusal_policy: RefusalPolicy,
    /// Re-send the image with the second-stage prompt.
    pub stage2_sends_image: bool,
    pub generation: GenerationParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: PipelineMode::Slac,
            stage1_model_id: DEFAULT_STAGE1_MODEL.into(),
            stage2_model_id: Some(DEFAULT_STAGE2_MODEL.into()),
            stage1_prompt: DEFAULT_STAGE1_PROMPT.into(),
            include_classes_in_stage1: false,
            label_template: PromptTemplate::identity(),
            refusal_policy: RefusalPolicy::CountWrong,
            stage2_sends_image: false,
            generation: GenerationParams::default(),
        }
    }
}

impl PipelineConfig {
    pub fn with_mode(mode: PipelineMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.stage1_prompt.trim().is_empty() {
            return Err(PipelineError::Config("stage1_prompt is empty".into()));
        }
        if self.stage1_model_id.trim().is_empty() {
            return Err(PipelineError::Config("stage1_model_id is empty".into()));
        }
        if self.mode == PipelineMode::Tlac && self.stage2_model_id.as_deref().is_none_or(|m| m.trim().is_empty()) {
            return Err(PipelineError::Config("tlac mode needs stage2_model_id".into()));
        }
        if self.generation.temperature.is_nan() || self.generation.temperature < 0.0 || self.generation.max_output_tokens == 0 {
            return Err(PipelineError::Config("invalid generation parameters".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchedBy {
    SimilarityArgmax,
    ExactString,
    RefusalFallback,
}

impl fmt::Display for MatchedBy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatchedBy::SimilarityArgmax => "similarity-argmax",
            MatchedBy::ExactString => "exact-string",
            MatchedBy::RefusalFallback => "refusal-fallback",
        })
    }
}

/// What the LMM said at each stage and how the answer was matched.
#[derive(Debug, Clone, PartialEq)]
pub struct StageTrace {
    /// Absent only when stage 1 was refused.
    pub stage1_exchange: Option<LmmExchange>,
    /// Present for TLAC unless stage 2 was refused.
    pub stage2_exchange: Option<LmmExchange>,
    pub matched_by: MatchedBy,
    /// Refusal detail, when any stage was refused.
    pub refusal: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Label(Prediction),
    /// The reserved non-label outcome: no class was chosen. Always scored
    /// incorrect.
    NonLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub outcome: Outcome,
    pub trace: StageTrace,
}

impl Classification {
    pub fn predicted_label(&self) -> Option<&ClassLabel> {
        match &self.outcome {
            Outcome::Label(p) => Some(&p.predicted_label),
            Outcome::NonLabel => None,
        }
    }

    pub fn prediction(&self) -> Option<&Prediction> {
        match &self.outcome {
            Outcome::Label(p) => Some(p),
            Outcome::NonLabel => None,
        }
    }

    /// Number of LMM calls answered (cached or not).
    pub fn exchanges(&self) -> impl Iterator<Item = &LmmExchange> {
        self.trace.stage1_exchange.iter().chain(self.trace.stage2_exchange.iter())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("pipeline configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

impl PipelineError {
    pub fn is_config(&self) -> bool {
        matches!(self, PipelineError::Config(_) | PipelineError::Gateway(GatewayError::Config(_)))
    }
}

/// The first-stage prompt, optionally followed by the class list.
pub fn build_stage1_prompt(config: &PipelineConfig, class_set: &ClassLabelSet) -> String {
    if config.include_classes_in_stage1 {
        with_class_choices(&config.stage1_prompt, class_set)
    } else {
        config.stage1_prompt.clone()
    }
}

fn with_class_choices(prompt: &str, class_set: &ClassLabelSet) -> String {
    format!("{prompt}\n\n{CLASS_CHOICE_HEADER} {}", class_set.joined_canonical())
}

/// The second-stage prompt: the first answer, verbatim, plus the class list.
pub fn build_stage2_prompt(stage1_answer: &str, class_set: &ClassLabelSet) -> String {
    format!(
        "You previously identified: {stage1_answer}\n\
         From the following list of classes, answer with the single class most relevant to that identification. \
         Reply with the class name only.\n\
         Classes: {}",
        class_set.joined_canonical()
    )
}

/// A configured classifier for one class set. Label embeddings are computed
/// once at construction. Safe to share across worker threads.
pub struct Classifier {
    config: PipelineConfig,
    labels: ClassLabelSet,
    stage1_prompt: String,
    gateway: Gateway,
    backend: Option<Arc<dyn EmbeddingBackend>>,
    index: Option<LabelIndex>,
}

enum Answer {
    Given(LmmExchange),
    Refused(String),
}

impl Classifier {
    /// `backend` may be `None` only in LMM-only mode.
    pub fn new(
        config: PipelineConfig,
        labels: ClassLabelSet,
        gateway: Gateway,
        backend: Option<Arc<dyn EmbeddingBackend>>,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        let index = match (config.mode, &backend) {
            (PipelineMode::LmmOnly, _) => None,
            (_, Some(b)) => Some(LabelIndex::build(&labels, b.as_ref(), &config.label_template)?),
            (_, None) => {
                return Err(PipelineError::Config(format!("{} mode needs an embedding backend", config.mode)));
            }
        };
        let stage1_prompt = match config.mode {
            PipelineMode::LmmOnly => with_class_choices(&config.stage1_prompt, &labels),
            _ => build_stage1_prompt(&config, &labels),
        };
        Ok(Self {
            config,
            labels,
            stage1_prompt,
            gateway,
            backend,
            index,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn labels(&self) -> &ClassLabelSet {
        &self.labels
    }

    pub fn stage1_prompt(&self) -> &str {
        &self.stage1_prompt
    }

    pub fn stage1_request(&self, image: &Path) -> Result<LmmRequest, PipelineError> {
        Ok(LmmRequest::with_image(
            self.config.stage1_model_id.clone(),
            self.stage1_prompt.clone(),
            image,
            self.config.generation,
        )?)
    }

    pub fn stage2_request(&self, image: &Path, stage1_answer: &str) -> Result<LmmRequest, PipelineError> {
        let model = self.config.stage2_model_id.clone().unwrap_or_default();
        let prompt = build_stage2_prompt(stage1_answer, &self.labels);
        Ok(if self.config.stage2_sends_image {
            LmmRequest::with_image(model, prompt, image, self.config.generation)?
        } else {
            LmmRequest::text_only(model, prompt, self.config.generation)
        })
    }

    fn ask(&self, request: &LmmRequest) -> Result<Answer, PipelineError> {
        match self.gateway.query(request) {
            Ok(ex) => Ok(Answer::Given(ex)),
            Err(GatewayError::SafetyRefusal { detail, .. }) => match self.config.refusal_policy {
                RefusalPolicy::CountWrong => Ok(Answer::Refused(detail)),
                RefusalPolicy::RetryOnceThenWrong => match self.gateway.query_fresh(request) {
                    Ok(ex) => Ok(Answer::Given(ex)),
                    Err(GatewayError::SafetyRefusal { detail, .. }) => Ok(Answer::Refused(detail)),
                    Err(e) => Err(e.into()),
                },
            },
            Err(e) => Err(e.into()),
        }
    }

    fn similarity(&self, answers: &[&str]) -> Result<Prediction, PipelineError> {
        let index = self.index.as_ref().expect("similarity modes build an index");
        let backend = self.backend.as_deref().expect("similarity modes have a backend");
        let z = answers.last().expect("at least one answer");
        let mut p = index.classify(z, backend)?;
        p.stage_trace = answers.iter().map(|s| s.to_string()).collect();
        Ok(p)
    }

    fn refused(detail: String) -> Classification {
        Classification {
            outcome: Outcome::NonLabel,
            trace: StageTrace {
                stage1_exchange: None,
                stage2_exchange: None,
                matched_by: MatchedBy::RefusalFallback,
                refusal: Some(detail),
            },
        }
    }

    pub fn classify(&self, image: impl AsRef<Path>) -> Result<Classification, PipelineError> {
        match self.config.mode {
            PipelineMode::Slac => self.slac(image.as_ref()),
            PipelineMode::Tlac => self.tlac(image.as_ref()),
            PipelineMode::LmmOnly => self.lmm_only(image.as_ref()),
        }
    }

    fn slac(&self, image: &Path) -> Result<Classification, PipelineError> {
        let stage1 = match self.ask(&self.stage1_request(image)?)? {
            Answer::Given(ex) => ex,
            Answer::Refused(d) => return Ok(Self::refused(d)),
        };
        let prediction = self.similarity(&[&stage1.answer_text])?;
        Ok(Classification {
            outcome: Outcome::Label(prediction),
            trace: StageTrace {
                stage1_exchange: Some(stage1),
                stage2_exchange: None,
                matched_by: MatchedBy::SimilarityArgmax,
                refusal: None,
            },
        })
    }

    fn tlac(&self, image: &Path) -> Result<Classification, PipelineError> {
        let stage1 = match self.ask(&self.stage1_request(image)?)? {
            Answer::Given(ex) => ex,
            Answer::Refused(d) => return Ok(Self::refused(d)),
        };
        let stage2_req = self.stage2_request(image, &stage1.answer_text)?;
        let (prediction, stage2, refusal) = match self.ask(&stage2_req)? {
            Answer::Given(ex) => (self.similarity(&[&stage1.answer_text, &ex.answer_text])?, Some(ex), None),
            // Fall back to the single-stage prediction.
            Answer::Refused(d) => (self.similarity(&[&stage1.answer_text])?, None, Some(d)),
        };
        Ok(Classification {
            outcome: Outcome::Label(prediction),
            trace: StageTrace {
                stage1_exchange: Some(stage1),
                stage2_exchange: stage2,
                matched_by: MatchedBy::SimilarityArgmax,
                refusal,
            },
        })
    }

    fn lmm_only(&self, image: &Path) -> Result<Classification, PipelineError> {
        let stage1 = match self.ask(&self.stage1_request(image)?)? {
            Answer::Given(ex) => ex,
            Answer::Refused(d) => return Ok(Self::refused(d)),
        };
        let outcome = match self.labels.find(&stage1.answer_text) {
            Some(label) => {
                let mut scores = vec![0.0; self.labels.len()];
                scores[label.index] = 1.0;
                Outcome::Label(Prediction {
                    predicted_label: label.clone(),
                    score: 1.0,
                    scores,
                    stage_trace: vec![stage1.answer_text.clone()],
                })
            }
            None => Outcome::NonLabel,
        };
        Ok(Classification {
            outcome,
            trace: StageTrace {
                stage1_exchange: Some(stage1),
                stage2_exchange: None,
                matched_by: MatchedBy::ExactString,
                refusal: None,
            },
        })
    }
}

fn require_mode(config: &PipelineConfig, mode: PipelineMode) -> Result<(), PipelineError> {
    if config.mode != mode {
        return Err(PipelineError::Config(format!("expected mode {mode}, config says {}", config.mode)));
    }
    Ok(())
}

pub fn slac_classify(
    image: impl AsRef<Path>,
    class_set: &ClassLabelSet,
    config: &PipelineConfig,
    gateway: &Gateway,
    backend: Arc<dyn EmbeddingBackend>,
) -> Result<Classification, PipelineError> {
    require_mode(config, PipelineMode::Slac)?;
    Classifier::new(config.clone(), class_set.clone(), gateway.clone(), Some(backend))?.classify(image)
}

pub fn tlac_classify(
    image: impl AsRef<Path>,
    class_set: &ClassLabelSet,
    config: &PipelineConfig,
    gateway: &Gateway,
    backend: Arc<dyn EmbeddingBackend>,
) -> Result<Classification, PipelineError> {
    require_mode(config, PipelineMode::Tlac)?;
    Classifier::new(config.clone(), class_set.clone(), gateway.clone(), Some(backend))?.classify(image)
}

pub fn lmm_only_classify(
    image: impl AsRef<Path>,
    class_set: &ClassLabelSet,
    config: &PipelineConfig,
    gateway: &Gateway,
) -> Result<Classification, PipelineError> {
    require_mode(config, PipelineMode::LmmOnly)?;
    Classifier::new(config.clone(), class_set.clone(), gateway.clone(), None)?.classify(image)
}
