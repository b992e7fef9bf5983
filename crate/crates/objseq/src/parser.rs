//! Output-grammar validation and text/box/alignment extraction.
//!
//! The grammar is regular: outside marker groups any text or (tolerated,
//! warned) stray box token may appear; a group is exactly
//! `<obj> word+ bin bin bin bin <\obj>`. Validation is one left-to-right
//! pass with O(1) state; the sequence is scanned up to its first EOS.

use crate::builder::TokenSeq;
use crate::vocab::{BBox, Token, UnifiedVocab, VocabError};

/// The two failure classes of the output grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FailureKind {
    /// A group's box run is not exactly four consecutive box tokens before
    /// its close marker.
    BoxCount,
    /// A marker is unpaired, groups nest, or `<obj>` is immediately followed
    /// by a box token.
    MarkerMisuse,
}

impl FailureKind {
    pub fn name(&self) -> &'static str {
        match self {
            FailureKind::BoxCount => "box_count",
            FailureKind::MarkerMisuse => "marker_misuse",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Failure {
    pub position: usize,
    pub kind: FailureKind,
}

/// Result of validating a token sequence. `valid()` holds exactly when the
/// failure list is empty; stray box tokens outside groups are tolerated and
/// reported as warnings only.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidityReport {
    pub failures: Vec<Failure>,
    pub stray_box_positions: Vec<usize>,
}

impl ValidityReport {
    pub fn valid(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn has(&self, kind: FailureKind) -> bool {
        self.failures.iter().any(|f| f.kind == kind)
    }

    pub fn count(&self, kind: FailureKind) -> usize {
        self.failures.iter().filter(|f| f.kind == kind).count()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ParseError {
    #[error("sequence fails grammar validation with {} failure(s)", report.failures.len())]
    Invalid { report: ValidityReport },
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

/// One extracted word-box alignment: a half-open span over the parsed text
/// and the group's four bins in codec order. Bins come straight from the
/// sequence and may be disordered; `bbox` dequantizes them when they form a
/// well-ordered box.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grounding {
    pub start: usize,
    pub end: usize,
    pub bins: [u32; 4],
}

impl Grounding {
    /// Dequantizes the bins to a box, or `None` when the bins are disordered
    /// (scored as a miss downstream).
    pub fn bbox(&self, vocab: &UnifiedVocab) -> Option<BBox> {
        let n = vocab.n_bins();
        let c: Vec<f64> = self
            .bins
            .iter()
            .map(|&b| crate::vocab::dequantize_coord(b, n))
            .collect::<Result<_, _>>()
            .ok()?;
        BBox::new(c[0], c[1], c[2], c[3]).ok()
    }
}

/// Text with all box tokens and markers removed, plus the extracted
/// word-box alignments.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedOutput {
    pub text: Vec<u32>,
    pub groundings: Vec<Grounding>,
}

#[derive(Clone, Copy)]
enum State {
    Free,
    /// Inside a group; `words` counts text tokens seen, `run` the current
    /// consecutive box run.
    Group { words: usize, run: usize },
}

/// Scans an arbitrary token sequence against the output grammar. Never
/// fails: malformed input yields a report. Tokens after the first EOS are
/// ignored.
pub fn validate(tokens: &[Token]) -> ValidityReport {
    let mut report = ValidityReport::default();
    let mut state = State::Free;
    let end = tokens.iter().position(Token::is_eos).unwrap_or(tokens.len());
    for (i, &tok) in tokens[..end].iter().enumerate() {
        state = match (state, tok) {
            (State::Free, Token::Text(_)) => State::Free,
            (State::Free, Token::BoxBin(_)) => {
                report.stray_box_positions.push(i);
                State::Free
            }
            (State::Free, Token::ObjOpen) => State::Group { words: 0, run: 0 },
            (State::Free, Token::ObjClose) => {
                report.failures.push(Failure { position: i, kind: FailureKind::MarkerMisuse });
                State::Free
            }
            (State::Group { words, run }, Token::Text(_)) => {
                if run > 0 {
                    // A text token interrupted the box run: the boxes can no
                    // longer be exactly four consecutive tokens before close.
                    report.failures.push(Failure { position: i, kind: FailureKind::BoxCount });
                }
                State::Group { words: words + 1, run: 0 }
            }
            (State::Group { words, run }, Token::BoxBin(_)) => {
                if words == 0 && run == 0 {
                    report.failures.push(Failure { position: i, kind: FailureKind::MarkerMisuse });
                }
                State::Group { words, run: run + 1 }
            }
            (State::Group { words, .. }, Token::ObjOpen) => {
                report.failures.push(Failure { position: i, kind: FailureKind::MarkerMisuse });
                State::Group { words, run: 0 }
            }
            (State::Group { run, .. }, Token::ObjClose) => {
                if run != 4 {
                    report.failures.push(Failure { position: i, kind: FailureKind::BoxCount });
                }
                State::Free
            }
        };
    }
    if let State::Group { .. } = state {
        // Sequence (or EOS) ended inside a group: the open marker is unpaired.
        report.failures.push(Failure { position: end, kind: FailureKind::MarkerMisuse });
    }
    report
}

/// Extracts text and word-box alignments from a grammar-valid sequence.
/// Stray box tokens outside groups are dropped; the terminal EOS (and
/// anything after it) is not part of the text.
pub fn parse(seq: &TokenSeq, vocab: &UnifiedVocab) -> Result<ParsedOutput, ParseError> {
    let tokens = seq.tokens();
    let report = validate(tokens);
    if !report.valid() {
        return Err(ParseError::Invalid { report });
    }
    let _ = vocab;
    let end = tokens.iter().position(Token::is_eos).unwrap_or(tokens.len());
    let mut out = ParsedOutput::default();
    let mut group: Option<(usize, Vec<u32>)> = None; // (text start, bins so far)
    for &tok in &tokens[..end] {
        match tok {
            Token::Text(w) => out.text.push(w),
            Token::BoxBin(b) => {
                if let Some((_, bins)) = group.as_mut() {
                    bins.push(b);
                }
                // Stray box tokens outside any group are discarded.
            }
            Token::ObjOpen => group = Some((out.text.len(), Vec::with_capacity(4))),
            Token::ObjClose => {
                let (start, bins) = group.take().expect("validated sequence pairs markers");
                out.groundings.push(Grounding {
                    start,
                    end: out.text.len(),
                    bins: [bins[0], bins[1], bins[2], bins[3]],
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, thiserror::Error)]
pub enum ExtractError {
    #[error("no box in output sequence")]
    NoBox,
    #[error("first predicted box has disordered coordinates")]
    DegenerateBox,
}

/// A phrase-grounding pair: the group's words and its box (when the bins
/// form a well-ordered box).
#[derive(Debug, Clone, PartialEq)]
pub struct PhrasePair {
    pub words: Vec<u32>,
    pub bbox: Option<BBox>,
}

/// Task-shaped view of a parsed output.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskPrediction {
    /// Referring expressions keep only the first predicted box.
    Box(BBox),
    /// Phrase grounding keeps every (span words, box) pair.
    Pairs(Vec<PhrasePair>),
    /// Grounded captioning keeps the full triple.
    Grounded { text: Vec<u32>, regions: Vec<(Grounding, Option<BBox>)> },
    /// Captioning and VQA keep the text only.
    Text(Vec<u32>),
}

/// Reduces a parsed output to the prediction its task scores.
pub fn extract_for_task(
    parsed: &ParsedOutput,
    task: crate::builder::Task,
    vocab: &UnifiedVocab,
) -> Result<TaskPrediction, ExtractError> {
    use crate::builder::Task;
    match task {
        Task::Refexp => {
            let first = parsed.groundings.first().ok_or(ExtractError::NoBox)?;
            let bbox = first.bbox(vocab).ok_or(ExtractError::DegenerateBox)?;
            Ok(TaskPrediction::Box(bbox))
        }
        Task::PhraseGrounding => {
            let pairs = parsed
                .groundings
                .iter()
                .map(|g| PhrasePair { words: parsed.text[g.start..g.end].to_vec(), bbox: g.bbox(vocab) })
                .collect();
            Ok(TaskPrediction::Pairs(pairs))
        }
        Task::GroundedCaptioning | Task::Pretrain => {
            let regions = parsed.groundings.iter().map(|g| (g.clone(), g.bbox(vocab))).collect();
            Ok(TaskPrediction::Grounded { text: parsed.text.clone(), regions })
        }
        Task::Captioning | Task::Vqa => Ok(TaskPrediction::Text(parsed.text.clone())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builder::{build_target, Entity, GroundedText, MarkerStyle, Task};
    use crate::vocab::{build_vocab, QuantBox, EOS};

    fn vocab() -> UnifiedVocab {
        build_vocab(16, 200).unwrap()
    }

    fn donut_tokens() -> Vec<Token> {
        vec![
            Token::ObjOpen,
            Token::Text(4),
            Token::Text(5),
            Token::BoxBin(90),
            Token::BoxBin(83),
            Token::BoxBin(184),
            Token::BoxBin(180),
            Token::ObjClose,
        ]
    }

    #[test]
    fn donut_sequence_is_valid() {
        assert!(validate(&donut_tokens()).valid());
    }

    #[test]
    fn short_box_run_is_box_count_failure() {
        let seq = vec![
            Token::ObjOpen,
            Token::Text(4),
            Token::Text(5),
            Token::BoxBin(90),
            Token::BoxBin(83),
            Token::ObjClose,
        ];
        let report = validate(&seq);
        assert!(!report.valid());
        assert!(report.has(FailureKind::BoxCount));
        assert!(!report.has(FailureKind::MarkerMisuse));
    }

    #[test]
    fn box_after_open_is_marker_misuse() {
        let seq = vec![Token::ObjOpen, Token::BoxBin(90), Token::Text(4), Token::ObjClose];
        let report = validate(&seq);
        assert!(report.has(FailureKind::MarkerMisuse));
    }

    #[test]
    fn unpaired_markers_fail() {
        let open_only = vec![Token::ObjOpen, Token::Text(4)];
        assert!(validate(&open_only).has(FailureKind::MarkerMisuse));
        let close_only = vec![Token::Text(4), Token::ObjClose];
        assert!(validate(&close_only).has(FailureKind::MarkerMisuse));
        let nested = vec![Token::ObjOpen, Token::Text(4), Token::ObjOpen];
        assert!(validate(&nested).has(FailureKind::MarkerMisuse));
    }

    #[test]
    fn eos_inside_group_is_marker_misuse() {
        let seq = vec![Token::ObjOpen, Token::Text(4), Token::Text(EOS), Token::Text(5)];
        let report = validate(&seq);
        assert!(report.has(FailureKind::MarkerMisuse));
        // The EOS truncates the scan; trailing garbage does not add failures.
        assert_eq!(report.failures.len(), 1);
    }

    #[test]
    fn text_interrupting_box_run_fails() {
        let seq = vec![
            Token::ObjOpen,
            Token::Text(4),
            Token::BoxBin(1),
            Token::Text(5),
            Token::BoxBin(2),
            Token::BoxBin(3),
            Token::BoxBin(4),
            Token::BoxBin(5),
            Token::ObjClose,
        ];
        assert!(validate(&seq).has(FailureKind::BoxCount));
    }

    #[test]
    fn stray_boxes_warn_but_stay_valid() {
        let seq = vec![Token::Text(4), Token::BoxBin(9), Token::BoxBin(10), Token::Text(5)];
        let report = validate(&seq);
        assert!(report.valid());
        assert_eq!(report.stray_box_positions, vec![1, 2]);
    }

    #[test]
    fn parse_donut_sequence() {
        let v = vocab();
        let seq = TokenSeq::new(donut_tokens()).unwrap();
        let parsed = parse(&seq, &v).unwrap();
        assert_eq!(parsed.text, vec![4, 5]);
        assert_eq!(parsed.groundings.len(), 1);
        let g = &parsed.groundings[0];
        assert_eq!((g.start, g.end), (0, 2));
        assert_eq!(g.bins, [90, 83, 184, 180]);
    }

    #[test]
    fn parse_without_markers_strips_eos_and_stray_boxes() {
        let v = vocab();
        let seq = TokenSeq::new(vec![Token::Text(4), Token::BoxBin(7), Token::Text(5), Token::Text(EOS)]).unwrap();
        let parsed = parse(&seq, &v).unwrap();
        assert_eq!(parsed.text, vec![4, 5]);
        assert!(parsed.groundings.is_empty());
    }

    #[test]
    fn parse_rejects_invalid_with_report() {
        let v = vocab();
        let seq = TokenSeq::new(vec![Token::ObjOpen, Token::Text(4)]).unwrap();
        match parse(&seq, &v) {
            Err(ParseError::Invalid { report }) => assert!(report.has(FailureKind::MarkerMisuse)),
            other => panic!("expected invalid, got {other:?}"),
        }
    }

    #[test]
    fn parse_build_roundtrip_small() {
        let v = vocab();
        let q = QuantBox::new(3, 5, 120, 140, 200).unwrap();
        let g = GroundedText::new(vec![4, 5, 6, 7], vec![Entity { start: 1, end: 3, quant: q }], &v).unwrap();
        let seq = build_target(&g, &v, MarkerStyle::OpenClose).unwrap();
        let parsed = parse(&seq, &v).unwrap();
        assert_eq!(parsed.text, g.words());
        assert_eq!(parsed.groundings.len(), 1);
        let got = &parsed.groundings[0];
        assert_eq!((got.start, got.end), (1, 3));
        assert_eq!(got.bins, q.bins());
    }

    #[test]
    fn extract_refexp_takes_first_box_only() {
        let v = vocab();
        let mut tokens = donut_tokens();
        tokens.extend([
            Token::ObjOpen,
            Token::Text(6),
            Token::BoxBin(1),
            Token::BoxBin(2),
            Token::BoxBin(3),
            Token::BoxBin(4),
            Token::ObjClose,
        ]);
        let parsed = parse(&TokenSeq::new(tokens).unwrap(), &v).unwrap();
        assert_eq!(parsed.groundings.len(), 2);
        match extract_for_task(&parsed, Task::Refexp, &v).unwrap() {
            TaskPrediction::Box(b) => {
                assert!((b.x_min - 0.4525).abs() < 1e-12);
                assert!((b.y_min - 0.4175).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn extract_refexp_without_boxes_is_an_error() {
        let v = vocab();
        let parsed = parse(&TokenSeq::new(vec![Token::Text(4)]).unwrap(), &v).unwrap();
        assert!(matches!(extract_for_task(&parsed, Task::Refexp, &v), Err(ExtractError::NoBox)));
    }

    #[test]
    fn extract_captioning_drops_boxes() {
        let v = vocab();
        let parsed = parse(&TokenSeq::new(donut_tokens()).unwrap(), &v).unwrap();
        match extract_for_task(&parsed, Task::Captioning, &v).unwrap() {
            TaskPrediction::Text(text) => assert_eq!(text, vec![4, 5]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn disordered_bins_have_no_bbox() {
        let v = vocab();
        let g = Grounding { start: 0, end: 1, bins: [150, 0, 10, 20] };
        assert_eq!(g.bbox(&v), None);
    }
}
