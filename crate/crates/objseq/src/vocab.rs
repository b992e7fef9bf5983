//! Unified token id space and the box <-> box-token codec.
//!
//! One id space covers text tokens, quantized box-coordinate tokens, and the
//! two object markers, so a single decoding head can emit any of them. The
//! layout is a fixed partition:
//!
//! ```text
//! [0, n_text)                  text ids (BOS/EOS/PAD/UNK live here)
//! [n_text, n_text + n_bins)    box-coordinate bins
//! n_text + n_bins              <obj>
//! n_text + n_bins + 1          <\obj>
//! ```

use serde::{Deserialize, Serialize};

/// Reserved control ids inside the text segment.
pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
pub const UNK: u32 = 3;

/// Number of reserved control ids (BOS, EOS, PAD, UNK).
pub const NUM_CONTROL: u32 = 4;

/// Default number of coordinate bins.
pub const DEFAULT_N_BINS: u32 = 200;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum VocabError {
    #[error("n_text must be at least {NUM_CONTROL} (got {0})")]
    TextVocabTooSmall(u32),
    #[error("n_bins must be positive")]
    NoBins,
    #[error("coordinate is NaN")]
    NanCoordinate,
    #[error("bin index {bin} out of range for {n_bins} bins")]
    BinOutOfRange { bin: u32, n_bins: u32 },
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: u32 },
    #[error("invalid box: expected 0 <= min <= max <= 1, got [{0}, {1}, {2}, {3}]")]
    InvalidBox(f64, f64, f64, f64),
    #[error("invalid quantized box: bins ({0}, {1}, {2}, {3}) violate ordering or range")]
    InvalidQuantBox(u32, u32, u32, u32),
    #[error("word list has {words} entries but the text segment holds {slots}")]
    WordCountMismatch { words: usize, slots: u32 },
    #[error("vocabulary manifest: {0}")]
    Manifest(String),
}

/// An axis-aligned box in normalized image coordinates.
///
/// x is a fraction of image width, y a fraction of height, so the codec is
/// independent of pixel dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    /// Validates `0 <= min <= max <= 1` on both axes.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, VocabError> {
        let ok = |lo: f64, hi: f64| lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi && hi <= 1.0;
        if ok(x_min, x_max) && ok(y_min, y_max) {
            Ok(Self { x_min, y_min, x_max, y_max })
        } else {
            Err(VocabError::InvalidBox(x_min, y_min, x_max, y_max))
        }
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    /// Coordinates in codec order `[x_min, y_min, x_max, y_max]`.
    pub fn coords(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

/// A box as four discrete bin indices, in codec order `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantBox {
    pub bx_min: u32,
    pub by_min: u32,
    pub bx_max: u32,
    pub by_max: u32,
}

impl QuantBox {
    pub fn new(bx_min: u32, by_min: u32, bx_max: u32, by_max: u32, n_bins: u32) -> Result<Self, VocabError> {
        if bx_min <= bx_max && by_min <= by_max && bx_max < n_bins && by_max < n_bins {
            Ok(Self { bx_min, by_min, bx_max, by_max })
        } else {
            Err(VocabError::InvalidQuantBox(bx_min, by_min, bx_max, by_max))
        }
    }

    /// Bin indices in codec order `[x_min, y_min, x_max, y_max]`.
    pub fn bins(&self) -> [u32; 4] {
        [self.bx_min, self.by_min, self.bx_max, self.by_max]
    }
}

/// One entry of the unified vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Text(u32),
    BoxBin(u32),
    ObjOpen,
    ObjClose,
}

impl Token {
    pub fn is_box(&self) -> bool {
        matches!(self, Token::BoxBin(_))
    }

    pub fn is_marker(&self) -> bool {
        matches!(self, Token::ObjOpen | Token::ObjClose)
    }

    pub fn is_eos(&self) -> bool {
        matches!(self, Token::Text(EOS))
    }
}

/// The unified id space: `n_text` text ids, `n_bins` box bins, and the two
/// object markers, for a total of `n_text + n_bins + 2` ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnifiedVocab {
    n_text: u32,
    n_bins: u32,
}

impl UnifiedVocab {
    pub fn new(n_text: u32, n_bins: u32) -> Result<Self, VocabError> {
        if n_text < NUM_CONTROL {
            return Err(VocabError::TextVocabTooSmall(n_text));
        }
        if n_bins == 0 {
            return Err(VocabError::NoBins);
        }
        Ok(Self { n_text, n_bins })
    }

    pub fn n_text(&self) -> u32 {
        self.n_text
    }

    pub fn n_bins(&self) -> u32 {
        self.n_bins
    }

    /// Total id count: `n_text + n_bins + 2`.
    pub fn size(&self) -> u32 {
        self.n_text + self.n_bins + 2
    }

    pub fn obj_open_id(&self) -> u32 {
        self.n_text + self.n_bins
    }

    pub fn obj_close_id(&self) -> u32 {
        self.n_text + self.n_bins + 1
    }

    pub fn token_to_id(&self, token: Token) -> u32 {
        match token {
            Token::Text(id) => {
                debug_assert!(id < self.n_text);
                id
            }
            Token::BoxBin(bin) => {
                debug_assert!(bin < self.n_bins);
                self.n_text + bin
            }
            Token::ObjOpen => self.obj_open_id(),
            Token::ObjClose => self.obj_close_id(),
        }
    }

    pub fn token_from_id(&self, id: u32) -> Result<Token, VocabError> {
        if id < self.n_text {
            Ok(Token::Text(id))
        } else if id < self.n_text + self.n_bins {
            Ok(Token::BoxBin(id - self.n_text))
        } else if id == self.obj_open_id() {
            Ok(Token::ObjOpen)
        } else if id == self.obj_close_id() {
            Ok(Token::ObjClose)
        } else {
            Err(VocabError::IdOutOfRange { id, size: self.size() })
        }
    }

    pub fn quantize_box(&self, b: &BBox) -> Result<QuantBox, VocabError> {
        let [x0, y0, x1, y1] = b.coords();
        Ok(QuantBox {
            bx_min: quantize_coord(x0, self.n_bins)?,
            by_min: quantize_coord(y0, self.n_bins)?,
            bx_max: quantize_coord(x1, self.n_bins)?,
            by_max: quantize_coord(y1, self.n_bins)?,
        })
    }

    pub fn dequantize_box(&self, q: &QuantBox) -> Result<BBox, VocabError> {
        Ok(BBox {
            x_min: dequantize_coord(q.bx_min, self.n_bins)?,
            y_min: dequantize_coord(q.by_min, self.n_bins)?,
            x_max: dequantize_coord(q.bx_max, self.n_bins)?,
            y_max: dequantize_coord(q.by_max, self.n_bins)?,
        })
    }
}

/// Builds the unified vocabulary. `n_text` must leave room for the four
/// control ids; `n_bins` defaults to [`DEFAULT_N_BINS`] elsewhere in the crate.
pub fn build_vocab(n_text: u32, n_bins: u32) -> Result<UnifiedVocab, VocabError> {
    UnifiedVocab::new(n_text, n_bins)
}

/// Maps a coordinate in `[0, 1]` to its bin: `min(floor(x * n_bins), n_bins - 1)`.
///
/// Out-of-range finite inputs are clamped to `[0, 1]` first; NaN is rejected.
pub fn quantize_coord(x: f64, n_bins: u32) -> Result<u32, VocabError> {
    if x.is_nan() {
        return Err(VocabError::NanCoordinate);
    }
    if n_bins == 0 {
        return Err(VocabError::NoBins);
    }
    let x = x.clamp(0.0, 1.0);
    let bin = (x * n_bins as f64).floor() as u32;
    Ok(bin.min(n_bins - 1))
}

/// Maps a bin back to the center of its interval: `(bin + 0.5) / n_bins`.
pub fn dequantize_coord(bin: u32, n_bins: u32) -> Result<f64, VocabError> {
    if bin >= n_bins {
        return Err(VocabError::BinOutOfRange { bin, n_bins });
    }
    Ok((bin as f64 + 0.5) / n_bins as f64)
}

/// The word side of the text segment: one word per non-control text id.
///
/// Text id `NUM_CONTROL + i` renders as `words[i]`. Lookup is exact
/// whitespace-delimited word matching; unknown words map to [`UNK`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordVocab {
    words: Vec<String>,
}

impl WordVocab {
    /// `words.len()` must equal `n_text - NUM_CONTROL` of the vocabulary this
    /// word list accompanies.
    pub fn new(words: Vec<String>, n_text: u32) -> Result<Self, VocabError> {
        let slots = n_text.saturating_sub(NUM_CONTROL);
        if words.len() != slots as usize {
            return Err(VocabError::WordCountMismatch { words: words.len(), slots });
        }
        Ok(Self { words })
    }

    pub fn n_text(&self) -> u32 {
        self.words.len() as u32 + NUM_CONTROL
    }

    pub fn id_of(&self, word: &str) -> u32 {
        self.words
            .iter()
            .position(|w| w == word)
            .map(|i| i as u32 + NUM_CONTROL)
            .unwrap_or(UNK)
    }

    /// Like [`id_of`](Self::id_of) but distinguishes missing words from a
    /// literal UNK mapping.
    pub fn lookup(&self, word: &str) -> Option<u32> {
        self.words.iter().position(|w| w == word).map(|i| i as u32 + NUM_CONTROL)
    }

    pub fn word_of(&self, id: u32) -> Option<&str> {
        if id < NUM_CONTROL {
            return None;
        }
        self.words.get((id - NUM_CONTROL) as usize).map(String::as_str)
    }

    pub fn encode(&self, words: &[&str]) -> Vec<u32> {
        words.iter().map(|w| self.id_of(w)).collect()
    }

    pub fn encode_str(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.id_of(w)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .map(|&id| self.word_of(id).map(str::to_owned).unwrap_or_else(|| format!("<{id}>")))
            .collect()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// Persistable description of a vocabulary: layout sizes, reserved control
/// ids, and the word list. Travels with every trained model and record file
/// so token ids are self-describing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabManifest {
    pub version: u32,
    pub n_text: u32,
    pub n_bins: u32,
    pub bos: u32,
    pub eos: u32,
    pub pad: u32,
    pub unk: u32,
    pub words: Vec<String>,
}

impl VocabManifest {
    pub const VERSION: u32 = 1;

    pub fn new(vocab: UnifiedVocab, words: &WordVocab) -> Self {
        Self {
            version: Self::VERSION,
            n_text: vocab.n_text(),
            n_bins: vocab.n_bins(),
            bos: BOS,
            eos: EOS,
            pad: PAD,
            unk: UNK,
            words: words.words().to_vec(),
        }
    }

    pub fn vocab(&self) -> Result<UnifiedVocab, VocabError> {
        UnifiedVocab::new(self.n_text, self.n_bins)
    }

    pub fn word_vocab(&self) -> Result<WordVocab, VocabError> {
        WordVocab::new(self.words.clone(), self.n_text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, VocabError> {
        let m: Self = serde_json::from_str(s).map_err(|e| VocabError::Manifest(e.to_string()))?;
        if m.version != Self::VERSION {
            return Err(VocabError::Manifest(format!("unsupported manifest version {}", m.version)));
        }
        if m.bos != BOS || m.eos != EOS || m.pad != PAD || m.unk != UNK {
            return Err(VocabError::Manifest("nonstandard control id layout".into()));
        }
        m.vocab()?;
        m.word_vocab()?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_size_matches_layout() {
        let v = build_vocab(50265, 200).unwrap();
        assert_eq!(v.size(), 50467);
        let tiny = build_vocab(10, 1).unwrap();
        assert_eq!(tiny.size(), 13);
    }

    #[test]
    fn marker_ids_follow_box_segment() {
        // Layout recomputed by enumerating the partition boundaries.
        let v = build_vocab(64, 200).unwrap();
        assert_eq!(v.obj_open_id(), 264);
        assert_eq!(v.obj_close_id(), 265);
    }

    #[test]
    fn vocab_rejects_degenerate_sizes() {
        assert_eq!(build_vocab(3, 200), Err(VocabError::TextVocabTooSmall(3)));
        assert_eq!(build_vocab(10, 0), Err(VocabError::NoBins));
    }

    #[test]
    fn id_layout_is_total_and_disjoint() {
        let v = build_vocab(10, 5).unwrap();
        for id in 0..v.size() {
            let tok = v.token_from_id(id).unwrap();
            assert_eq!(v.token_to_id(tok), id);
        }
        assert!(v.token_from_id(v.size()).is_err());
    }

    #[test]
    fn quantize_coord_examples() {
        assert_eq!(quantize_coord(0.0, 200).unwrap(), 0);
        assert_eq!(quantize_coord(1.0, 200).unwrap(), 199);
        // 0.4525 * 200 = 90.5; the brute-force scan below agrees.
        assert_eq!(quantize_coord(0.4525, 200).unwrap(), 90);
        let brute = (0..200)
            .find(|&b| {
                let lo = b as f64 / 200.0;
                let hi = (b + 1) as f64 / 200.0;
                lo <= 0.4525 && (0.4525 < hi || b == 199)
            })
            .unwrap();
        assert_eq!(brute, 90);
    }

    #[test]
    fn quantize_coord_clamps_and_rejects_nan() {
        assert_eq!(quantize_coord(-0.2, 200).unwrap(), 0);
        assert_eq!(quantize_coord(1.7, 200).unwrap(), 199);
        assert_eq!(quantize_coord(f64::NAN, 200), Err(VocabError::NanCoordinate));
    }

    #[test]
    fn dequantize_coord_examples() {
        assert_eq!(dequantize_coord(0, 200).unwrap(), 0.0025);
        assert_eq!(dequantize_coord(199, 200).unwrap(), 0.9975);
        assert_eq!(dequantize_coord(90, 200).unwrap(), 0.4525);
        assert!(dequantize_coord(200, 200).is_err());
    }

    #[test]
    fn bin_roundtrip_is_identity_for_all_bins() {
        for n_bins in [1u32, 7, 200] {
            for b in 0..n_bins {
                let x = dequantize_coord(b, n_bins).unwrap();
                assert_eq!(quantize_coord(x, n_bins).unwrap(), b);
            }
        }
    }

    #[test]
    fn quantization_is_monotone() {
        let n = 200;
        let mut prev = 0;
        for i in 0..=1000 {
            let x = i as f64 / 1000.0;
            let b = quantize_coord(x, n).unwrap();
            assert!(b >= prev);
            prev = b;
        }
    }

    #[test]
    fn box_roundtrip_published_bins() {
        let v = build_vocab(64, 200).unwrap();
        let q = QuantBox::new(90, 83, 184, 180, 200).unwrap();
        let b = v.dequantize_box(&q).unwrap();
        assert_eq!(v.quantize_box(&b).unwrap(), q);
    }

    #[test]
    fn box_corners_quantize_to_extremes() {
        let v = build_vocab(64, 200).unwrap();
        let b = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        assert_eq!(v.quantize_box(&b).unwrap(), QuantBox { bx_min: 0, by_min: 0, bx_max: 199, by_max: 199 });
    }

    #[test]
    fn bbox_rejects_disordered_or_out_of_range() {
        assert!(BBox::new(0.5, 0.0, 0.4, 1.0).is_err());
        assert!(BBox::new(0.0, -0.1, 0.4, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, 0.4, 1.1).is_err());
        assert!(BBox::new(f64::NAN, 0.0, 0.4, 1.0).is_err());
    }

    #[test]
    fn word_vocab_roundtrip_and_unk() {
        let wv = WordVocab::new(vec!["a".into(), "donut".into()], 6).unwrap();
        assert_eq!(wv.id_of("a"), 4);
        assert_eq!(wv.id_of("donut"), 5);
        assert_eq!(wv.id_of("pizza"), UNK);
        assert_eq!(wv.word_of(5), Some("donut"));
        assert_eq!(wv.word_of(EOS), None);
    }

    #[test]
    fn manifest_roundtrip() {
        let vocab = build_vocab(6, 8).unwrap();
        let words = WordVocab::new(vec!["a".into(), "donut".into()], 6).unwrap();
        let m = VocabManifest::new(vocab, &words);
        let back = VocabManifest::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.vocab().unwrap().size(), 16);
    }
}
