//! Desk-scale encoder-decoder over the unified vocabulary, trained with the
//! language-modeling objective by hand-written backprop in f64.
//!
//! Parameters live in one flat buffer with a named-tensor layout, which keeps
//! the optimizer, checkpointing, and finite-difference checking trivial.

mod backward;
mod checkpoint;
mod forward;
mod gradcheck;
mod train;

pub use backward::{backward, loss_and_grad};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use forward::{forward, forward_full, lm_loss, ConditionedModel, ForwardCache};
pub use gradcheck::{grad_check, GradCheckReport};
pub use train::{train, Stage, TrainConfig, TrainData, TrainReport};

use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::vocab::{Token, UnifiedVocab};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("sequence of length {len} exceeds the model cap {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {0} out of range")]
    IdOutOfRange(u32),
    #[error("loss mask excludes every step")]
    AllMasked,
    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },
    #[error("bad configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Vocab(#[from] crate::vocab::VocabError),
    #[error(transparent)]
    Build(#[from] crate::builder::BuildError),
}

/// Decoder-side token-type embedding variants. `TwoType` distinguishes text
/// (markers included) from box tokens; `ThreeType` gives markers their own
/// type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TypeEmbedding {
    #[default]
    None,
    TwoType,
    ThreeType,
}

impl TypeEmbedding {
    pub fn n_types(&self) -> usize {
        match self {
            TypeEmbedding::None => 0,
            TypeEmbedding::TwoType => 2,
            TypeEmbedding::ThreeType => 3,
        }
    }

    pub fn type_of(&self, tok: Token) -> usize {
        match self {
            TypeEmbedding::None => 0,
            TypeEmbedding::TwoType => match tok {
                Token::BoxBin(_) => 1,
                _ => 0,
            },
            TypeEmbedding::ThreeType => match tok {
                Token::BoxBin(_) => 1,
                Token::ObjOpen | Token::ObjClose => 2,
                _ => 0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_text: u32,
    pub n_bins: u32,
    pub feat_dim: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub max_enc_len: usize,
    pub max_dec_len: usize,
    pub type_embedding: TypeEmbedding,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_text: 64,
            n_bins: crate::vocab::DEFAULT_N_BINS,
            feat_dim: crate::scene::feature_dim(),
            d_model: 64,
            n_heads: 4,
            d_ff: 512,
            n_enc_layers: 2,
            n_dec_layers: 2,
            max_enc_len: 64,
            max_dec_len: 64,
            type_embedding: TypeEmbedding::None,
        }
    }
}

impl ModelConfig {
    pub fn vocab(&self) -> UnifiedVocab {
        UnifiedVocab::new(self.n_text, self.n_bins).expect("model config holds a valid vocabulary")
    }

    pub fn vocab_size(&self) -> usize {
        (self.n_text + self.n_bins + 2) as usize
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 || self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return Err(ModelError::Config("layer sizes must be positive".into()));
        }
        if self.max_enc_len == 0 || self.max_dec_len == 0 {
            return Err(ModelError::Config("sequence caps must be positive".into()));
        }
        UnifiedVocab::new(self.n_text, self.n_bins)?;
        Ok(())
    }
}

/// Offset and shape of one named tensor inside the flat parameter buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TRef {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl TRef {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LnRefs {
    pub g: TRef,
    pub b: TRef,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnRefs {
    pub wq: TRef,
    pub bq: TRef,
    pub wk: TRef,
    pub bk: TRef,
    pub wv: TRef,
    pub bv: TRef,
    pub wo: TRef,
    pub bo: TRef,
}

#[derive(Debug, Clone, Copy)]
pub struct FfnRefs {
    pub w1: TRef,
    pub b1: TRef,
    pub w2: TRef,
    pub b2: TRef,
}

#[derive(Debug, Clone)]
pub struct EncLayerRefs {
    pub ln1: LnRefs,
    pub attn: AttnRefs,
    pub ln2: LnRefs,
    pub ffn: FfnRefs,
}

#[derive(Debug, Clone)]
pub struct DecLayerRefs {
    pub ln1: LnRefs,
    pub self_attn: AttnRefs,
    pub ln2: LnRefs,
    pub cross_attn: AttnRefs,
    pub ln3: LnRefs,
    pub ffn: FfnRefs,
}

/// How a tensor initializes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    Gauss,
    Zero,
    One,
}

#[derive(Debug, Clone)]
pub struct TensorSpec {
    pub name: String,
    pub t: TRef,
    pub decay: bool,
    pub init: InitKind,
}

/// Named-tensor layout over the flat parameter buffer.
#[derive(Debug, Clone)]
pub struct Layout {
    pub tok_emb: TRef,
    pub enc_pos: TRef,
    pub dec_pos: TRef,
    pub vis_w: TRef,
    pub vis_b: TRef,
    pub type_emb: Option<TRef>,
    pub enc: Vec<EncLayerRefs>,
    pub enc_ln: LnRefs,
    pub dec: Vec<DecLayerRefs>,
    pub dec_ln: LnRefs,
    pub out_w: TRef,
    pub out_b: TRef,
    pub total: usize,
    /// Tensor specs in buffer order.
    pub specs: Vec<TensorSpec>,
}

struct LayoutBuilder {
    offset: usize,
    specs: Vec<TensorSpec>,
}

impl LayoutBuilder {
    fn alloc(&mut self, name: String, rows: usize, cols: usize, decay: bool, init: InitKind) -> TRef {
        let t = TRef { offset: self.offset, rows, cols };
        self.offset += rows * cols;
        self.specs.push(TensorSpec { name, t, decay, init });
        t
    }

    fn weight(&mut self, name: String, rows: usize, cols: usize) -> TRef {
        self.alloc(name, rows, cols, true, InitKind::Gauss)
    }

    fn emb(&mut self, name: String, rows: usize, cols: usize) -> TRef {
        self.alloc(name, rows, cols, false, InitKind::Gauss)
    }

    fn bias(&mut self, name: String, cols: usize) -> TRef {
        self.alloc(name, 1, cols, false, InitKind::Zero)
    }

    fn ln(&mut self, name: &str, d: usize) -> LnRefs {
        LnRefs {
            g: self.alloc(format!("{name}.g"), 1, d, false, InitKind::One),
            b: self.alloc(format!("{name}.b"), 1, d, false, InitKind::Zero),
        }
    }

    fn attn(&mut self, name: &str, d: usize) -> AttnRefs {
        AttnRefs {
            wq: self.weight(format!("{name}.wq"), d, d),
            bq: self.bias(format!("{name}.bq"), d),
            wk: self.weight(format!("{name}.wk"), d, d),
            bk: self.bias(format!("{name}.bk"), d),
            wv: self.weight(format!("{name}.wv"), d, d),
            bv: self.bias(format!("{name}.bv"), d),
            wo: self.weight(format!("{name}.wo"), d, d),
            bo: self.bias(format!("{name}.bo"), d),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, ff: usize) -> FfnRefs {
        FfnRefs {
            w1: self.weight(format!("{name}.w1"), d, ff),
            b1: self.bias(format!("{name}.b1"), ff),
            w2: self.weight(format!("{name}.w2"), ff, d),
            b2: self.bias(format!("{name}.b2"), d),
        }
    }
}

impl Layout {
    pub fn build(cfg: &ModelConfig) -> Layout {
        let d = cfg.d_model;
        let v = cfg.vocab_size();
        let mut b = LayoutBuilder { offset: 0, specs: Vec::new() };
        let tok_emb = b.emb("tok_emb".into(), v, d);
        let enc_pos = b.emb("enc_pos".into(), cfg.max_enc_len, d);
        let dec_pos = b.emb("dec_pos".into(), cfg.max_dec_len, d);
        let vis_w = b.weight("vis_w".into(), cfg.feat_dim, d);
        let vis_b = b.bias("vis_b".into(), d);
        let type_emb = match cfg.type_embedding.n_types() {
            0 => None,
            n => Some(b.emb("type_emb".into(), n, d)),
        };
        let enc = (0..cfg.n_enc_layers)
            .map(|i| EncLayerRefs {
                ln1: b.ln(&format!("enc{i}.ln1"), d),
                attn: b.attn(&format!("enc{i}.attn"), d),
                ln2: b.ln(&format!("enc{i}.ln2"), d),
                ffn: b.ffn(&format!("enc{i}.ffn"), d, cfg.d_ff),
            })
            .collect();
        let enc_ln = b.ln("enc.ln", d);
        let dec = (0..cfg.n_dec_layers)
            .map(|i| DecLayerRefs {
                ln1: b.ln(&format!("dec{i}.ln1"), d),
                self_attn: b.attn(&format!("dec{i}.self"), d),
                ln2: b.ln(&format!("dec{i}.ln2"), d),
                cross_attn: b.attn(&format!("dec{i}.cross"), d),
                ln3: b.ln(&format!("dec{i}.ln3"), d),
                ffn: b.ffn(&format!("dec{i}.ffn"), d, cfg.d_ff),
            })
            .collect();
        let dec_ln = b.ln("dec.ln", d);
        let out_w = b.weight("out_w".into(), d, v);
        let out_b = b.bias("out_b".into(), v);
        Layout {
            tok_emb,
            enc_pos,
            dec_pos,
            vis_w,
            vis_b,
            type_emb,
            enc,
            enc_ln,
            dec,
            dec_ln,
            out_w,
            out_b,
            total: b.offset,
            specs: b.specs,
        }
    }

    pub fn name_of(&self, flat_index: usize) -> (&str, usize) {
        for spec in &self.specs {
            if flat_index >= spec.t.offset && flat_index < spec.t.offset + spec.t.len() {
                return (&spec.name, flat_index - spec.t.offset);
            }
        }
        ("?", flat_index)
    }
}

pub fn view(data: &[f64], t: TRef) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((t.rows, t.cols), &data[t.offset..t.offset + t.len()]).expect("layout shapes are exact")
}

pub fn view_mut(data: &mut [f64], t: TRef) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((t.rows, t.cols), &mut data[t.offset..t.offset + t.len()])
        .expect("layout shapes are exact")
}

/// Model parameters: config, derived layout, and the flat f64 buffer.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub layout: Layout,
    pub data: Vec<f64>,
}

impl ModelParams {
    /// Gaussian(0, 0.02) weights and embeddings, zero biases, unit LN gains.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let layout = Layout::build(&cfg);
        let mut data = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for spec in &layout.specs {
            let slice = &mut data[spec.t.offset..spec.t.offset + spec.t.len()];
            match spec.init {
                InitKind::One => slice.fill(1.0),
                InitKind::Zero => {}
                InitKind::Gauss => {
                    for x in slice.iter_mut() {
                        *x = 0.02 * gauss(&mut rng);
                    }
                }
            }
        }
        Ok(Self { cfg, layout, data })
    }

    pub fn zeros(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let layout = Layout::build(&cfg);
        let data = vec![0.0; layout.total];
        Ok(Self { cfg, layout, data })
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn vocab(&self) -> UnifiedVocab {
        self.cfg.vocab()
    }
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; the log argument is kept strictly positive.
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
