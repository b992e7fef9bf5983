//! Unified text+box output sequences for grounded scene description.
//!
//! Box coordinates quantize into discrete vocabulary bins so one decoder can
//! emit words and boxes in a single stream; `<obj>`-delimited groups carry
//! word-box alignments inline. The crate provides the codec and sequence
//! grammar, builders and a parser for those sequences, argmax/nucleus
//! decoding with optional grammar masking, grounding and captioning metrics,
//! a synthetic scene corpus, and a small encoder-decoder that learns the
//! whole mechanism from scratch.

pub mod builder;
pub mod data;
pub mod decoding;
pub mod features;
pub mod metrics;
pub mod model;
pub mod parser;
pub mod pipeline;
pub mod scene;
pub mod vocab;

pub use builder::{
    apply_task_prefix, build_pretrain_sample, build_target, build_task_sample, strip_task_prefix, Entity,
    GroundedText, MarkerStyle, Task, TaskAnnotation, TaskPrefixes, TaskSample, TokenSeq, MAX_SEQ_LEN,
};
pub use decoding::{
    decode, grammar_mask, step_argmax, step_nucleus, DecodeState, GrammarMode, SampleMethod, SamplerConfig,
    StepLogits,
};
pub use features::FeatureGrid;
pub use metrics::{acc_at_05, bleu4, grounding_f1, iou, vqa_soft_accuracy, F1Average, F1Mode, F1Report};
pub use model::{
    forward, grad_check, lm_loss, load_checkpoint, save_checkpoint, train, ModelConfig, ModelParams, Stage,
    TrainConfig, TrainData, TypeEmbedding,
};
pub use parser::{extract_for_task, parse, validate, FailureKind, ParsedOutput, TaskPrediction, ValidityReport};
pub use vocab::{
    build_vocab, dequantize_coord, quantize_coord, BBox, QuantBox, Token, UnifiedVocab, VocabManifest, WordVocab,
};
