//! Autoregressive generation from per-step logits: argmax and nucleus
//! sampling, EOS/length stopping, and optional grammar-constrained masking.

use rand::Rng;

use crate::builder::{BuildError, TokenSeq, MAX_SEQ_LEN};
use crate::vocab::{Token, UnifiedVocab, VocabError, EOS};

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("logits length {got} does not match vocabulary size {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("logits contain a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("nucleus threshold must lie in (0, 1], got {0}")]
    BadTopP(f64),
    #[error("max_steps must lie in 1..={MAX_SEQ_LEN}, got {0}")]
    BadMaxSteps(usize),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Seq(#[from] BuildError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleMethod {
    Argmax,
    Nucleus { p: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub method: SampleMethod,
    pub constrained: bool,
    pub max_steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { method: SampleMethod::Argmax, constrained: false, max_steps: MAX_SEQ_LEN }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if let SampleMethod::Nucleus { p } = self.method {
            if !(p > 0.0 && p <= 1.0) {
                return Err(DecodeError::BadTopP(p));
            }
        }
        if self.max_steps == 0 || self.max_steps > MAX_SEQ_LEN {
            return Err(DecodeError::BadMaxSteps(self.max_steps));
        }
        Ok(())
    }
}

/// Position within a marker group, tracked while decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrammarMode {
    Free,
    /// Inside a group, still emitting words; `words` counts them (0 means
    /// just after `<obj>`, where box tokens are not yet legal).
    GroupText { words: usize },
    /// Inside a group's box run; `emitted` of the four bins are out.
    GroupBoxes { emitted: usize },
}

/// Emitted prefix plus the grammar position consistent with it.
#[derive(Debug, Clone)]
pub struct DecodeState {
    emitted: Vec<Token>,
    mode: GrammarMode,
}

impl Default for DecodeState {
    fn default() -> Self {
        Self::new()
    }
}

impl DecodeState {
    pub fn new() -> Self {
        Self { emitted: Vec::new(), mode: GrammarMode::Free }
    }

    pub fn emitted(&self) -> &[Token] {
        &self.emitted
    }

    pub fn mode(&self) -> GrammarMode {
        self.mode
    }

    pub fn push(&mut self, tok: Token) {
        self.mode = match (self.mode, tok) {
            (GrammarMode::Free, Token::ObjOpen) => GrammarMode::GroupText { words: 0 },
            (GrammarMode::Free, _) => GrammarMode::Free,
            (GrammarMode::GroupText { words }, Token::Text(_)) => GrammarMode::GroupText { words: words + 1 },
            (GrammarMode::GroupText { .. }, Token::BoxBin(_)) => GrammarMode::GroupBoxes { emitted: 1 },
            (GrammarMode::GroupBoxes { emitted }, Token::BoxBin(_)) => {
                GrammarMode::GroupBoxes { emitted: emitted + 1 }
            }
            (GrammarMode::GroupBoxes { .. }, Token::ObjClose) => GrammarMode::Free,
            // Off-grammar pushes only happen unconstrained; approximate by
            // restarting group tracking so the mask stays well-defined.
            (_, Token::ObjOpen) => GrammarMode::GroupText { words: 0 },
            (_, Token::ObjClose) => GrammarMode::Free,
            (m, _) => m,
        };
        self.emitted.push(tok);
    }

    /// Tokens still required to bring the grammar back to `Free`.
    fn tokens_to_close(&self) -> usize {
        match self.mode {
            GrammarMode::Free => 0,
            GrammarMode::GroupText { words: 0 } => 1 + 4 + 1,
            GrammarMode::GroupText { .. } => 4 + 1,
            GrammarMode::GroupBoxes { emitted } => (4 - emitted.min(4)) + 1,
        }
    }
}

/// Allowed-token mask for the current grammar position (true = allowed).
///
/// Outside groups, box tokens and `<\obj>` are masked off. Just after
/// `<obj>` only words are legal; once a word is out, box tokens may start
/// the four-bin run; inside the run only box tokens, and after four bins
/// only `<\obj>`.
pub fn grammar_mask(state: &DecodeState, vocab: &UnifiedVocab) -> Vec<bool> {
    let size = vocab.size() as usize;
    let n_text = vocab.n_text() as usize;
    let n_bins = vocab.n_bins() as usize;
    let mut mask = vec![false; size];
    let (text, boxes, open, close) = match state.mode {
        GrammarMode::Free => (true, false, true, false),
        GrammarMode::GroupText { words: 0 } => (true, false, false, false),
        GrammarMode::GroupText { .. } => (true, true, false, false),
        GrammarMode::GroupBoxes { emitted } if emitted < 4 => (false, true, false, false),
        GrammarMode::GroupBoxes { .. } => (false, false, false, true),
    };
    if text {
        for m in mask.iter_mut().take(n_text) {
            *m = true;
        }
        // EOS may not end the sequence inside a group.
        if state.mode != GrammarMode::Free {
            mask[EOS as usize] = false;
        }
    }
    if boxes {
        for m in mask.iter_mut().skip(n_text).take(n_bins) {
            *m = true;
        }
    }
    mask[vocab.obj_open_id() as usize] = open;
    mask[vocab.obj_close_id() as usize] = close;
    mask
}

fn check_logits(logits: &[f64], vocab_size: usize) -> Result<(), DecodeError> {
    if logits.len() != vocab_size {
        return Err(DecodeError::LengthMismatch { got: logits.len(), expected: vocab_size });
    }
    if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
        return Err(DecodeError::NonFinite(i));
    }
    Ok(())
}

/// Index of the maximum logit; ties break toward the lowest id.
pub fn step_argmax(logits: &[f64], vocab_size: usize) -> Result<u32, DecodeError> {
    check_logits(logits, vocab_size)?;
    let mut best = 0usize;
    for (i, &x) in logits.iter().enumerate().skip(1) {
        if x > logits[best] {
            best = i;
        }
    }
    Ok(best as u32)
}

/// Nucleus (top-p) sampling: softmax the logits, keep the smallest
/// probability-sorted prefix whose mass reaches `p`, renormalize, sample.
pub fn step_nucleus<R: Rng>(logits: &[f64], p: f64, rng: &mut R, vocab_size: usize) -> Result<u32, DecodeError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(DecodeError::BadTopP(p));
    }
    check_logits(logits, vocab_size)?;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<(usize, f64)> = logits.iter().map(|&x| (x - max).exp()).enumerate().collect();
    let z: f64 = probs.iter().map(|(_, e)| e).sum();
    for (_, e) in probs.iter_mut() {
        *e /= z;
    }
    // Descending by probability, ties toward the lowest id so a singleton
    // nucleus agrees with argmax.
    probs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut kept = probs.len();
    let mut cum = 0.0;
    for (i, (_, q)) in probs.iter().enumerate() {
        cum += q;
        if cum >= p {
            kept = i + 1;
            break;
        }
    }
    let nucleus = &probs[..kept];
    let mass: f64 = nucleus.iter().map(|(_, q)| q).sum();
    let mut dart = rng.random::<f64>() * mass;
    for &(id, q) in nucleus {
        dart -= q;
        if dart <= 0.0 {
            return Ok(id as u32);
        }
    }
    Ok(nucleus[kept - 1].0 as u32)
}

/// Anything that can score the next token given the emitted prefix.
pub trait StepLogits {
    fn next_logits(&mut self, prefix: &[Token]) -> Vec<f64>;
}

impl<F: FnMut(&[Token]) -> Vec<f64>> StepLogits for F {
    fn next_logits(&mut self, prefix: &[Token]) -> Vec<f64> {
        self(prefix)
    }
}

const MASKED: f64 = f64::NEG_INFINITY;

/// Runs single-token steps, feeding the emitted prefix back each time, until
/// EOS or `max_steps`. The returned sequence excludes the terminal EOS.
///
/// When `constrained`, the grammar mask is applied before sampling; near the
/// step budget, group opening is additionally suppressed so a truncated
/// sequence can never end inside a group.
pub fn decode<M: StepLogits, R: Rng>(
    model: &mut M,
    vocab: &UnifiedVocab,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<TokenSeq, DecodeError> {
    cfg.validate()?;
    let size = vocab.size() as usize;
    let mut state = DecodeState::new();
    for step in 0..cfg.max_steps {
        let mut logits = model.next_logits(state.emitted());
        check_logits(&logits, size)?;
        if cfg.constrained {
            let mask = constrained_mask(&state, vocab, cfg.max_steps - step);
            for (x, &keep) in logits.iter_mut().zip(&mask) {
                if !keep {
                    *x = MASKED;
                }
            }
        }
        let id = match cfg.method {
            SampleMethod::Argmax => masked_argmax(&logits)?,
            SampleMethod::Nucleus { p } => masked_nucleus(&logits, p, rng)?,
        };
        let tok = vocab.token_from_id(id)?;
        if tok.is_eos() {
            break;
        }
        state.push(tok);
    }
    Ok(TokenSeq::new(state.emitted)?)
}

/// Grammar mask plus the step-budget guard: opening a group (7 tokens
/// minimum including `<obj>`) or lingering on words once the budget only
/// covers the box run and close is suppressed.
fn constrained_mask(state: &DecodeState, vocab: &UnifiedVocab, steps_left: usize) -> Vec<bool> {
    let mut mask = grammar_mask(state, vocab);
    match state.mode {
        GrammarMode::Free => {
            if steps_left < 7 {
                mask[vocab.obj_open_id() as usize] = false;
            }
        }
        GrammarMode::GroupText { words } if words > 0 => {
            if steps_left <= state.tokens_to_close() {
                for m in mask.iter_mut().take(vocab.n_text() as usize) {
                    *m = false;
                }
            }
        }
        _ => {}
    }
    mask
}

fn masked_argmax(logits: &[f64]) -> Result<u32, DecodeError> {
    let mut best: Option<usize> = None;
    for (i, &x) in logits.iter().enumerate() {
        if x == MASKED {
            continue;
        }
        if best.map_or(true, |b| x > logits[b]) {
            best = Some(i);
        }
    }
    best.map(|b| b as u32).ok_or(DecodeError::NonFinite(0))
}

fn masked_nucleus<R: Rng>(logits: &[f64], p: f64, rng: &mut R) -> Result<u32, DecodeError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(DecodeError::BadTopP(p));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == MASKED {
        return Err(DecodeError::NonFinite(0));
    }
    let mut probs: Vec<(usize, f64)> = logits
        .iter()
        .enumerate()
        .filter(|(_, &x)| x != MASKED)
        .map(|(i, &x)| (i, (x - max).exp()))
        .collect();
    let z: f64 = probs.iter().map(|(_, e)| e).sum();
    for (_, e) in probs.iter_mut() {
        *e /= z;
    }
    probs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut kept = probs.len();
    let mut cum = 0.0;
    for (i, (_, q)) in probs.iter().enumerate() {
        cum += q;
        if cum >= p {
            kept = i + 1;
            break;
        }
    }
    let nucleus = &probs[..kept];
    let mass: f64 = nucleus.iter().map(|(_, q)| q).sum();
    let mut dart = rng.random::<f64>() * mass;
    for &(id, q) in nucleus {
        dart -= q;
        if dart <= 0.0 {
            return Ok(id as u32);
        }
    }
    Ok(nucleus[kept - 1].0 as u32)
}
