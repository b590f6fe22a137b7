//! Model-file backend: an ONNX text encoder run with tract, fed by the BPE
//! tokenizer.
//!
//! The graph takes `input_ids: i64[1, context]` (and optionally an
//! `attention_mask` of the same shape as a second input) and its first output
//! is the text embedding, `[1, dim]`.

use std::path::{Path, PathBuf};

use tract_onnx::prelude::*;

use super::bpe::{ClipTokenizer, CLIP_CONTEXT_WINDOW};
use super::{BackendDescriptor, BackendKind, EmbedError, EmbeddingBackend, EmbeddingVector};

#[derive(Debug, Clone)]
pub struct OnnxTextEncoderOptions {
    pub model_path: PathBuf,
    pub merges_path: PathBuf,
    pub dim: usize,
    pub context_window: usize,
    pub encoder_id: String,
}

impl OnnxTextEncoderOptions {
    pub fn new(model_path: impl AsRef<Path>, merges_path: impl AsRef<Path>) -> Self {
        Self {
            model_path: model_path.as_ref().to_path_buf(),
            merges_path: merges_path.as_ref().to_path_buf(),
            dim: 512,
            context_window: CLIP_CONTEXT_WINDOW,
            encoder_id: "clip-vit-b-16-text".into(),
        }
    }
}

pub struct OnnxTextEncoder {
    descriptor: BackendDescriptor,
    tokenizer: ClipTokenizer,
    plan: TypedRunnableModel<TypedModel>,
    context: usize,
    with_mask: bool,
}

fn model_err(e: impl std::fmt::Display) -> EmbedError {
    EmbedError::Model(e.to_string())
}

impl OnnxTextEncoder {
    pub fn load(opts: &OnnxTextEncoderOptions) -> Result<Self, EmbedError> {
        let tokenizer = ClipTokenizer::from_merges_file(&opts.merges_path)?;
        let ctx = opts.context_window;
        let mut model = tract_onnx::onnx().model_for_path(&opts.model_path).map_err(model_err)?;
        let inputs = model.input_outlets().map_err(model_err)?.len();
        for i in 0..inputs.min(2) {
            model = model
                .with_input_fact(i, i64::fact([1, ctx]).into())
                .map_err(model_err)?;
        }
        let plan = model
            .into_optimized()
            .map_err(model_err)?
            .into_runnable()
            .map_err(model_err)?;
        Ok(Self {
            descriptor: BackendDescriptor {
                backend_id: opts.encoder_id.clone(),
                dim: opts.dim,
                kind: BackendKind::ModelFile,
                concurrent: false,
            },
            tokenizer,
            plan,
            context: ctx,
            with_mask: inputs >= 2,
        })
    }
}

impl EmbeddingBackend for OnnxTextEncoder {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let enc = self.tokenizer.encode_window(text, self.context)?;
        if let Some(tail) = &enc.truncated_tail {
            log::warn!(
                "text exceeds the {}-token window; dropped tail: {tail:?}",
                self.context
            );
        }
        let ids: Vec<i64> = enc.ids.iter().map(|&i| i64::from(i)).collect();
        let ids = tract_ndarray::Array2::from_shape_vec((1, self.context), ids).map_err(model_err)?;
        let mut inputs: TVec<TValue> = tvec!(Tensor::from(ids).into());
        if self.with_mask {
            let mask: Vec<i64> = (0..self.context).map(|i| i64::from(i < enc.len)).collect();
            let mask = tract_ndarray::Array2::from_shape_vec((1, self.context), mask).map_err(model_err)?;
            inputs.push(Tensor::from(mask).into());
        }
        let outputs = self.plan.run(inputs).map_err(model_err)?;
        let view = outputs[0].to_array_view::<f32>().map_err(model_err)?;
        let values: Vec<f64> = view.iter().map(|&v| f64::from(v)).collect();
        if values.len() != self.descriptor.dim {
            return Err(EmbedError::DimensionMismatch {
                left: values.len(),
                right: self.descriptor.dim,
            });
        }
        EmbeddingVector::normalize(values).ok_or_else(|| EmbedError::DegenerateEmbedding(text.to_string()))
    }
}
