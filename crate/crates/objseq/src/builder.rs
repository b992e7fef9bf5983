//! Ground-truth target sequence construction.
//!
//! Targets interleave text with box tokens: each grounded entity becomes a
//! marker group `<obj> words b0 b1 b2 b3 <\obj>` spliced into the word stream
//! at the entity's position, followed by a terminal EOS.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::features::FeatureGrid;
use crate::vocab::{QuantBox, Token, UnifiedVocab, VocabError, WordVocab, BOS, EOS, PAD};

/// Hard cap on target length, EOS included.
pub const MAX_SEQ_LEN: usize = 256;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum BuildError {
    #[error("entity span {start}..{end} is invalid for {len} words")]
    BadSpan { start: usize, end: usize, len: usize },
    #[error("entity spans overlap or are not sorted by start")]
    OverlappingSpans,
    #[error("word id {0} is not a text token of this vocabulary")]
    BadWordId(u32),
    #[error("control token id {0} may not appear in caption words")]
    ControlWord(u32),
    #[error("sequence length {0} exceeds the {MAX_SEQ_LEN}-token cap")]
    TooLong(usize),
    #[error("quantized box does not fit the vocabulary: {0}")]
    Vocab(#[from] VocabError),
    #[error("p_empty must lie in [0, 1], got {0}")]
    BadProbability(f64),
    #[error("annotation does not match the {task:?} schema: {reason}")]
    SchemaMismatch { task: Task, reason: String },
    #[error("prefix word {0:?} is missing from the word vocabulary")]
    MissingPrefixWord(&'static str),
}

/// Tasks sharing the text+box output format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    GroundedCaptioning,
    PhraseGrounding,
    Refexp,
    Captioning,
    Vqa,
    Pretrain,
}

impl Task {
    pub const ALL: [Task; 6] = [
        Task::GroundedCaptioning,
        Task::PhraseGrounding,
        Task::Refexp,
        Task::Captioning,
        Task::Vqa,
        Task::Pretrain,
    ];

    /// The five downstream tasks used in multi-task training.
    pub const DOWNSTREAM: [Task; 5] = [
        Task::GroundedCaptioning,
        Task::PhraseGrounding,
        Task::Refexp,
        Task::Captioning,
        Task::Vqa,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Task::GroundedCaptioning => "grounded_captioning",
            Task::PhraseGrounding => "phrase_grounding",
            Task::Refexp => "refexp",
            Task::Captioning => "captioning",
            Task::Vqa => "vqa",
            Task::Pretrain => "pretrain",
        }
    }

    pub fn from_name(s: &str) -> Option<Task> {
        Task::ALL.iter().copied().find(|t| t.name() == s)
    }
}

/// Which marker tokens to emit around a grounded group.
///
/// `OpenClose` is the standard grammar; the other two are the marker-ablation
/// variants and produce sequences outside the validated grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerStyle {
    OpenClose,
    OpenOnly,
    None,
}

impl MarkerStyle {
    pub fn from_flags(use_obj_markers: bool, use_obj_close: bool) -> Self {
        match (use_obj_markers, use_obj_close) {
            (false, _) => MarkerStyle::None,
            (true, false) => MarkerStyle::OpenOnly,
            (true, true) => MarkerStyle::OpenClose,
        }
    }

    fn emits_open(&self) -> bool {
        !matches!(self, MarkerStyle::None)
    }

    fn emits_close(&self) -> bool {
        matches!(self, MarkerStyle::OpenClose)
    }
}

/// A grounded entity: a half-open word-index span aligned with one box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Entity {
    pub start: usize,
    pub end: usize,
    pub quant: QuantBox,
}

/// A word sequence with non-overlapping grounded entity spans.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundedText {
    words: Vec<u32>,
    entities: Vec<Entity>,
}

impl GroundedText {
    /// Validates word ids against the vocabulary, span bounds and ordering,
    /// and that entity boxes fit the vocabulary's bin count.
    pub fn new(words: Vec<u32>, entities: Vec<Entity>, vocab: &UnifiedVocab) -> Result<Self, BuildError> {
        for &w in &words {
            if w >= vocab.n_text() {
                return Err(BuildError::BadWordId(w));
            }
            if w == BOS || w == EOS || w == PAD {
                return Err(BuildError::ControlWord(w));
            }
        }
        let mut prev_end = 0usize;
        for (i, e) in entities.iter().enumerate() {
            if e.start >= e.end || e.end > words.len() {
                return Err(BuildError::BadSpan { start: e.start, end: e.end, len: words.len() });
            }
            if i > 0 && e.start < prev_end {
                return Err(BuildError::OverlappingSpans);
            }
            prev_end = e.end;
            QuantBox::new(e.quant.bx_min, e.quant.by_min, e.quant.bx_max, e.quant.by_max, vocab.n_bins())?;
        }
        Ok(Self { words, entities })
    }

    pub fn words(&self) -> &[u32] {
        &self.words
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }
}

/// A token sequence, at most [`MAX_SEQ_LEN`] tokens long.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    tokens: Vec<Token>,
}

impl TokenSeq {
    pub fn new(tokens: Vec<Token>) -> Result<Self, BuildError> {
        if tokens.len() > MAX_SEQ_LEN {
            return Err(BuildError::TooLong(tokens.len()));
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn to_ids(&self, vocab: &UnifiedVocab) -> Vec<u32> {
        self.tokens.iter().map(|&t| vocab.token_to_id(t)).collect()
    }

    pub fn from_ids(ids: &[u32], vocab: &UnifiedVocab) -> Result<Self, VocabError> {
        let tokens = ids.iter().map(|&id| vocab.token_from_id(id)).collect::<Result<Vec<_>, _>>()?;
        // Length is capped by the caller's id list; over-long inputs are the
        // caller's problem, not a vocabulary error.
        Ok(Self { tokens })
    }

    pub fn box_token_count(&self) -> usize {
        self.tokens.iter().filter(|t| t.is_box()).count()
    }
}

impl std::ops::Deref for TokenSeq {
    type Target = [Token];

    fn deref(&self) -> &[Token] {
        &self.tokens
    }
}

/// One training/evaluation unit: task id, conditioning text, image features,
/// and the target sequence (EOS-terminated, length-capped).
#[derive(Debug, Clone)]
pub struct TaskSample {
    pub task: Task,
    pub input_text: Vec<u32>,
    pub image: Arc<FeatureGrid>,
    pub target: TokenSeq,
}

/// An annotation resolved against a vocabulary: image features plus grounded
/// words (and, for VQA, the answer words).
#[derive(Debug, Clone)]
pub struct TaskAnnotation {
    pub image: Arc<FeatureGrid>,
    pub text: GroundedText,
    pub answer: Vec<u32>,
}

/// Splices marker groups into the word stream and appends EOS.
///
/// At each entity's start the group opens, the span's words follow, then the
/// four box tokens in codec order, then the close marker. `style` controls
/// the marker-ablation variants.
pub fn build_target(g: &GroundedText, vocab: &UnifiedVocab, style: MarkerStyle) -> Result<TokenSeq, BuildError> {
    let mut tokens = Vec::with_capacity(g.words.len() + g.entities.len() * 6 + 1);
    let mut next_entity = 0usize;
    for (i, &w) in g.words.iter().enumerate() {
        if next_entity < g.entities.len() && g.entities[next_entity].start == i && style.emits_open() {
            tokens.push(Token::ObjOpen);
        }
        tokens.push(Token::Text(w));
        if next_entity < g.entities.len() && g.entities[next_entity].end == i + 1 {
            let e = &g.entities[next_entity];
            for bin in e.quant.bins() {
                tokens.push(Token::BoxBin(bin));
            }
            if style.emits_close() {
                tokens.push(Token::ObjClose);
            }
            next_entity += 1;
        }
    }
    tokens.push(Token::Text(EOS));
    if tokens.len() > MAX_SEQ_LEN {
        return Err(BuildError::TooLong(tokens.len()));
    }
    let _ = vocab;
    TokenSeq::new(tokens)
}

/// Builds a pretraining sample: the input text is empty with probability
/// `p_empty` (captioning-like), otherwise the text-only caption
/// (grounding-like). The grounded target is identical either way.
pub fn build_pretrain_sample<R: Rng>(
    annotation: &TaskAnnotation,
    vocab: &UnifiedVocab,
    style: MarkerStyle,
    rng: &mut R,
    p_empty: f64,
) -> Result<TaskSample, BuildError> {
    if !(0.0..=1.0).contains(&p_empty) {
        return Err(BuildError::BadProbability(p_empty));
    }
    let target = build_target(&annotation.text, vocab, style)?;
    let input_text = if rng.random::<f64>() < p_empty {
        Vec::new()
    } else {
        annotation.text.words().to_vec()
    };
    Ok(TaskSample { task: Task::Pretrain, input_text, image: annotation.image.clone(), target })
}

/// Builds the (input, target) pair for a downstream task.
pub fn build_task_sample(
    task: Task,
    annotation: &TaskAnnotation,
    vocab: &UnifiedVocab,
    style: MarkerStyle,
) -> Result<TaskSample, BuildError> {
    let text = &annotation.text;
    let schema = |reason: &str| BuildError::SchemaMismatch { task, reason: reason.to_string() };
    let (input_text, target) = match task {
        Task::GroundedCaptioning => {
            if !annotation.answer.is_empty() {
                return Err(schema("unexpected answer field"));
            }
            (Vec::new(), build_target(text, vocab, style)?)
        }
        Task::PhraseGrounding => {
            if !annotation.answer.is_empty() {
                return Err(schema("unexpected answer field"));
            }
            (text.words().to_vec(), build_target(text, vocab, style)?)
        }
        Task::Refexp => {
            if text.entities().len() != 1 {
                return Err(schema("expected exactly one referent box"));
            }
            (text.words().to_vec(), build_target(text, vocab, style)?)
        }
        Task::Captioning => {
            let plain = GroundedText::new(text.words().to_vec(), Vec::new(), vocab)?;
            (Vec::new(), build_target(&plain, vocab, style)?)
        }
        Task::Vqa => {
            if annotation.answer.is_empty() {
                return Err(schema("missing answer"));
            }
            if !text.entities().is_empty() {
                return Err(schema("unexpected entity boxes on a question"));
            }
            let answer = GroundedText::new(annotation.answer.clone(), Vec::new(), vocab)?;
            (text.words().to_vec(), build_target(&answer, vocab, style)?)
        }
        Task::Pretrain => {
            return Err(schema("pretrain samples are built by build_pretrain_sample"));
        }
    };
    Ok(TaskSample { task, input_text, image: annotation.image.clone(), target })
}

/// Per-task input-text prefixes ("visual grounding:" etc.), resolved to ids.
#[derive(Debug, Clone)]
pub struct TaskPrefixes {
    ids: Vec<(Task, Vec<u32>)>,
}

const PREFIX_WORDS: [(Task, [&str; 2]); 5] = [
    (Task::Refexp, ["visual", "grounding:"]),
    (Task::PhraseGrounding, ["phrase", "grounding:"]),
    (Task::GroundedCaptioning, ["grounded", "captioning:"]),
    (Task::Captioning, ["image", "captioning:"]),
    (Task::Vqa, ["question", "answering:"]),
];

impl TaskPrefixes {
    /// Fails if any prefix word is missing from the word vocabulary.
    pub fn new(words: &WordVocab) -> Result<Self, BuildError> {
        let mut ids = Vec::new();
        for (task, prefix) in PREFIX_WORDS {
            let mut p = Vec::with_capacity(prefix.len());
            for w in prefix {
                p.push(words.lookup(w).ok_or(BuildError::MissingPrefixWord(w))?);
            }
            ids.push((task, p));
        }
        Ok(Self { ids })
    }

    pub fn prefix(&self, task: Task) -> &[u32] {
        self.ids
            .iter()
            .find(|(t, _)| *t == task)
            .map(|(_, p)| p.as_slice())
            .unwrap_or(&[])
    }
}

/// Prepends the task's prefix ids to the sample input when enabled; identity
/// otherwise. Pretrain samples carry no prefix.
pub fn apply_task_prefix(mut sample: TaskSample, enabled: bool, prefixes: &TaskPrefixes) -> TaskSample {
    if enabled {
        let p = prefixes.prefix(sample.task);
        if !p.is_empty() {
            let mut input = Vec::with_capacity(p.len() + sample.input_text.len());
            input.extend_from_slice(p);
            input.extend_from_slice(&sample.input_text);
            sample.input_text = input;
        }
    }
    sample
}

/// Inverse of [`apply_task_prefix`]: removes the task's prefix if present.
pub fn strip_task_prefix(mut sample: TaskSample, prefixes: &TaskPrefixes) -> TaskSample {
    let p = prefixes.prefix(sample.task);
    if !p.is_empty() && sample.input_text.starts_with(p) {
        sample.input_text.drain(..p.len());
    }
    sample
}
