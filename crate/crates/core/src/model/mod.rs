//! Compact encoder-decoder transformer with a language-modeling head and two
//! projection heads into a joint text/label-name embedding space.
//!
//! All passes work on one sequence at a time; batching happens one level up so
//! examples can be processed independently and reduced in a fixed order.

pub mod attention;
pub mod checkpoint;
pub mod layers;
pub mod tensor;
pub mod transformer;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tokenizer::{BOS, EOS, PAD};
use layers::{dropout_backward, normal_mat, sinusoidal, Dropper, ProjCache, ProjectionHead};
use tensor::{gemm_into, log_softmax, softmax_rows, Mat, Scalar};
use transformer::{Stack, StackCache, StackCtx};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("sequence of length {len} exceeds max_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("input has no non-padding positions")]
    EmptyInput,
    #[error("target must begin with <s> and hold at least two tokens")]
    BadTarget,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub proj_dim: usize,
    pub proj_hidden: usize,
    pub pre_norm: bool,
    pub tie_embeddings: bool,
    pub learned_positions: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            n_heads: 4,
            ffn_dim: 256,
            max_len: 256,
            dropout: 0.1,
            proj_dim: 64,
            proj_hidden: 128,
            pre_norm: true,
            tie_embeddings: true,
            learned_positions: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive");
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.ffn_dim == 0 || self.proj_dim == 0 || self.proj_hidden == 0 || self.max_len < 2 {
            return bad("widths must be positive and max_len at least 2");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Positions<T> {
    Sinusoidal(Mat<T>),
    Learned(Mat<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Seq2Seq<T> {
    pub config: ModelConfig,
    pub embed: Mat<T>,
    pub positions: Positions<T>,
    pub encoder: Stack<T>,
    pub decoder: Stack<T>,
    /// Separate output projection when embeddings are not tied.
    pub lm_head: Option<Mat<T>>,
    pub text_head: ProjectionHead<T>,
    pub label_head: ProjectionHead<T>,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput<T> {
    pub hidden: Mat<T>,
    pub pooled: Vec<T>,
    pub keep: Vec<bool>,
}

/// Teacher-forced next-token distributions for one target sequence.
#[derive(Debug, Clone)]
pub struct DistributionTrace<T> {
    pub logits: Mat<T>,
    pub probs: Mat<T>,
    pub gold: Vec<u32>,
    pub node_positions: Vec<bool>,
}

impl<T: Scalar> DistributionTrace<T> {
    pub fn from_logits(logits: Mat<T>, gold: Vec<u32>, node_mask: &[bool]) -> Self {
        let mut probs = logits.clone();
        softmax_rows(&mut probs);
        let node_positions = gold.iter().map(|&g| node_mask.get(g as usize).copied().unwrap_or(false)).collect();
        Self { logits, probs, gold, node_positions }
    }

    pub fn len(&self) -> usize {
        self.gold.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gold.is_empty()
    }
}

pub struct EncoderPass<T> {
    pub out: EncoderOutput<T>,
    ids: Vec<u32>,
    drop: Option<Vec<T>>,
    stack: StackCache<T>,
}

pub struct DecoderPass<T> {
    ids: Vec<u32>,
    drop: Option<Vec<T>>,
    stack: StackCache<T>,
    hidden: Mat<T>,
}

/// Projection of a pooled encoder vector, with what backward needs.
pub struct ProjectionPass<T> {
    pub embedding: Vec<T>,
    cache: ProjCache<T>,
}

pub type Dropout<'a> = Dropper<'a, ChaCha8Rng>;

pub fn no_dropout<'a>() -> Dropout<'a> {
    Dropper { rate: 0.0, rng: None }
}

impl<T: Scalar> Seq2Seq<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let embed = normal_mat(config.vocab_size, d, (1.0 / d as f64).sqrt(), &mut rng);
        let positions = if config.learned_positions {
            Positions::Learned(normal_mat(config.max_len, d, 0.02, &mut rng))
        } else {
            Positions::Sinusoidal(sinusoidal(config.max_len, d))
        };
        let encoder = Stack::encoder(config.encoder_layers, d, config.n_heads, config.ffn_dim, &mut rng);
        let decoder = Stack::decoder(config.decoder_layers, d, config.n_heads, config.ffn_dim, &mut rng);
        let lm_head = (!config.tie_embeddings).then(|| normal_mat(config.vocab_size, d, (1.0 / d as f64).sqrt(), &mut rng));
        let text_head = ProjectionHead::new(d, config.proj_hidden, config.proj_dim, &mut rng);
        let label_head = ProjectionHead::new(d, config.proj_hidden, config.proj_dim, &mut rng);
        Ok(Self { config, embed, positions, encoder, decoder, lm_head, text_head, label_head })
    }

    /// Gradient buffer with the same layout as `self`.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            embed: self.embed.zeros_like(),
            positions: match &self.positions {
                Positions::Sinusoidal(_) => Positions::Sinusoidal(Mat::zeros(0, 0)),
                Positions::Learned(p) => Positions::Learned(p.zeros_like()),
            },
            encoder: self.encoder.zeros_like(),
            decoder: self.decoder.zeros_like(),
            lm_head: self.lm_head.as_ref().map(Mat::zeros_like),
            text_head: self.text_head.zeros_like(),
            label_head: self.label_head.zeros_like(),
        }
    }

    /// Parameters in their declared (checkpoint) order.
    pub fn params(&self) -> Vec<&Mat<T>> {
        let mut v = vec![&self.embed];
        if let Positions::Learned(p) = &self.positions {
            v.push(p);
        }
        v.extend(self.encoder.params());
        v.extend(self.decoder.params());
        if let Some(h) = &self.lm_head {
            v.push(h);
        }
        v.extend(self.text_head.params());
        v.extend(self.label_head.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat<T>> {
        let mut v = vec![&mut self.embed];
        if let Positions::Learned(p) = &mut self.positions {
            v.push(p);
        }
        v.extend(self.encoder.params_mut());
        v.extend(self.decoder.params_mut());
        if let Some(h) = &mut self.lm_head {
            v.push(h);
        }
        v.extend(self.text_head.params_mut());
        v.extend(self.label_head.params_mut());
        v
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|m| m.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Seq2Seq<U> {
        let mut out: Seq2Seq<U> = Seq2Seq::new(self.config.clone(), 0).expect("config already validated");
        if let (Positions::Sinusoidal(a), Positions::Sinusoidal(b)) = (&self.positions, &mut out.positions) {
            *b = a.cast();
        }
        for (dst, src) in out.params_mut().into_iter().zip(self.params()) {
            *dst = src.cast();
        }
        out
    }

    /// `self += other * scale`, parameter-wise.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (a, b) in self.params_mut().into_iter().zip(other.params()) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += y * scale;
            }
        }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_len {
            Err(ModelError::SequenceTooLong { len, max: self.config.max_len })
        } else {
            Ok(())
        }
    }

    fn embed_tokens(&self, ids: &[u32], dropper: &mut Dropout<'_>) -> (Mat<T>, Option<Vec<T>>) {
        let d = self.config.d_model;
        let scale = T::lit((d as f64).sqrt());
        let table = match &self.positions {
            Positions::Sinusoidal(p) | Positions::Learned(p) => p,
        };
        let mut x = Mat::zeros(ids.len(), d);
        for (p, &id) in ids.iter().enumerate() {
            let row = x.row_mut(p);
            let e = self.embed.row(id as usize);
            let pos = table.row(p);
            for c in 0..d {
                row[c] = e[c] * scale + pos[c];
            }
        }
        let drop = dropper.apply(&mut x);
        (x, drop)
    }

    fn embed_backward(&self, ids: &[u32], drop: &Option<Vec<T>>, dx: &Mat<T>, g: &mut Self) {
        let dx = dropout_backward(drop, dx);
        let scale = T::lit((self.config.d_model as f64).sqrt());
        for (p, &id) in ids.iter().enumerate() {
            let src = dx.row(p);
            for (e, &v) in g.embed.row_mut(id as usize).iter_mut().zip(src) {
                *e += v * scale;
            }
            if let Positions::Learned(gp) = &mut g.positions {
                for (e, &v) in gp.row_mut(p).iter_mut().zip(src) {
                    *e += v;
                }
            }
        }
    }

    pub fn encode_pass(&self, ids: &[u32], dropper: &mut Dropout<'_>) -> Result<EncoderPass<T>> {
        self.check_len(ids.len())?;
        let keep: Vec<bool> = ids.iter().map(|&i| i != PAD).collect();
        let n = keep.iter().filter(|k| **k).count();
        if n == 0 {
            return Err(ModelError::EmptyInput);
        }
        let (x, drop) = self.embed_tokens(ids, dropper);
        let ctx = StackCtx { self_keep: Some(&keep), memory: None, memory_keep: None };
        let (hidden, stack) = self.encoder.forward(&x, &ctx, self.config.pre_norm, dropper);
        let mut pooled = vec![T::zero(); self.config.d_model];
        let inv = T::one() / T::from_usize(n).unwrap();
        for (r, _) in keep.iter().enumerate().filter(|(_, k)| **k) {
            for (p, &h) in pooled.iter_mut().zip(hidden.row(r)) {
                *p += h * inv;
            }
        }
        Ok(EncoderPass { out: EncoderOutput { hidden, pooled, keep }, ids: ids.to_vec(), drop, stack })
    }

    /// Deterministic encoding; pooled vector is the mean over non-pad positions.
    pub fn encode(&self, ids: &[u32]) -> Result<EncoderOutput<T>> {
        Ok(self.encode_pass(ids, &mut no_dropout())?.out)
    }

    /// Backward through the encoder given gradients w.r.t. its hidden states
    /// and, optionally, w.r.t. the pooled vector.
    pub fn encode_backward(&self, pass: &EncoderPass<T>, d_hidden: Option<&Mat<T>>, d_pooled: Option<&[T]>, g: &mut Self) {
        let mut dh = match d_hidden {
            Some(d) => d.clone(),
            None => pass.out.hidden.zeros_like(),
        };
        if let Some(dp) = d_pooled {
            let n = pass.out.keep.iter().filter(|k| **k).count();
            let inv = T::one() / T::from_usize(n).unwrap();
            for (r, _) in pass.out.keep.iter().enumerate().filter(|(_, k)| **k) {
                for (h, &v) in dh.row_mut(r).iter_mut().zip(dp) {
                    *h += v * inv;
                }
            }
        }
        let dx = self.encoder.backward(&pass.stack, &dh, self.config.pre_norm, &mut g.encoder, None);
        self.embed_backward(&pass.ids, &pass.drop, &dx, g);
    }

    fn output_weights(&self) -> &Mat<T> {
        self.lm_head.as_ref().unwrap_or(&self.embed)
    }

    /// Logits for every decoder input position.
    pub fn decode_pass(&self, ids: &[u32], enc: &EncoderOutput<T>, dropper: &mut Dropout<'_>) -> Result<(Mat<T>, DecoderPass<T>)> {
        self.check_len(ids.len())?;
        let (x, drop) = self.embed_tokens(ids, dropper);
        let ctx = StackCtx { self_keep: None, memory: Some(&enc.hidden), memory_keep: Some(&enc.keep) };
        let (hidden, stack) = self.decoder.forward(&x, &ctx, self.config.pre_norm, dropper);
        let w = self.output_weights();
        let mut logits = Mat::zeros(hidden.rows, w.rows);
        gemm_into(&mut logits, &hidden, false, w, true, T::one(), T::zero());
        Ok((logits, DecoderPass { ids: ids.to_vec(), drop, stack, hidden }))
    }

    /// Returns the gradient w.r.t. the encoder hidden states.
    pub fn decode_backward(&self, pass: &DecoderPass<T>, d_logits: &Mat<T>, enc_rows: usize, g: &mut Self) -> Mat<T> {
        let w = self.output_weights();
        let mut dh = Mat::zeros(pass.hidden.rows, pass.hidden.cols);
        gemm_into(&mut dh, d_logits, false, w, false, T::one(), T::zero());
        let gw = g.lm_head.as_mut().unwrap_or(&mut g.embed);
        gemm_into(gw, d_logits, true, &pass.hidden, false, T::one(), T::one());
        let mut d_mem = Mat::zeros(enc_rows, self.config.d_model);
        let dx = self.decoder.backward(&pass.stack, &dh, self.config.pre_norm, &mut g.decoder, Some(&mut d_mem));
        self.embed_backward(&pass.ids, &pass.drop, &dx, g);
        d_mem
    }

    /// Distributions over the vocabulary for each next gold token.
    /// `gold` is the full target, beginning with `<s>`.
    pub fn teacher_forced_forward(&self, src: &[u32], gold: &[u32], node_mask: &[bool]) -> Result<DistributionTrace<T>> {
        if gold.len() < 2 || gold[0] != BOS {
            return Err(ModelError::BadTarget);
        }
        let enc = self.encode(src)?;
        let (logits, _) = self.decode_pass(&gold[..gold.len() - 1], &enc, &mut no_dropout())?;
        Ok(DistributionTrace::from_logits(logits, gold[1..].to_vec(), node_mask))
    }

    /// Greedy decoding; when `allowed` is given, argmax is restricted to it.
    /// Returns emitted ids (without `<s>`, including a final `</s>` if produced)
    /// and the log-probability of each emitted id under the unrestricted model.
    pub fn generate_scored(&self, src: &[u32], max_steps: usize, allowed: Option<&[bool]>) -> Result<(Vec<u32>, Vec<T>)> {
        let enc = self.encode(src)?;
        self.generate_from(&enc, max_steps, allowed)
    }

    pub fn generate_from(&self, enc: &EncoderOutput<T>, max_steps: usize, allowed: Option<&[bool]>) -> Result<(Vec<u32>, Vec<T>)> {
        let mut ids = vec![BOS];
        let mut out = Vec::new();
        let mut scores = Vec::new();
        let steps = max_steps.min(self.config.max_len - 1);
        for _ in 0..steps {
            let (logits, _) = self.decode_pass(&ids, enc, &mut no_dropout())?;
            let last = logits.row(logits.rows - 1);
            let logp = log_softmax(last);
            let mut best: Option<(usize, T)> = None;
            for (j, &l) in last.iter().enumerate() {
                if allowed.is_some_and(|a| !a[j]) {
                    continue;
                }
                if best.map_or(true, |(_, b)| l > b) {
                    best = Some((j, l));
                }
            }
            let Some((tok, _)) = best else { break };
            out.push(tok as u32);
            scores.push(logp[tok]);
            if tok as u32 == EOS {
                break;
            }
            ids.push(tok as u32);
        }
        Ok((out, scores))
    }

    pub fn generate(&self, src: &[u32], max_steps: usize, allowed: Option<&[bool]>) -> Result<Vec<u32>> {
        Ok(self.generate_scored(src, max_steps, allowed)?.0)
    }

    pub fn project_text_pass(&self, pooled: &[T]) -> ProjectionPass<T> {
        project(&self.text_head, pooled)
    }

    pub fn project_label_pass(&self, pooled: &[T]) -> ProjectionPass<T> {
        project(&self.label_head, pooled)
    }

    /// E_t row for a pooled document vector.
    pub fn project_text(&self, pooled: &[T]) -> Vec<T> {
        self.project_text_pass(pooled).embedding
    }

    /// E_l row for a pooled label-name vector.
    pub fn project_label(&self, pooled: &[T]) -> Vec<T> {
        self.project_label_pass(pooled).embedding
    }

    /// Returns the gradient w.r.t. the pooled input.
    pub fn project_text_backward(&self, pass: &ProjectionPass<T>, d_emb: &[T], g: &mut Self) -> Vec<T> {
        let d = Mat::from_vec(1, d_emb.len(), d_emb.to_vec());
        self.text_head.backward(&pass.cache, &d, &mut g.text_head).data
    }

    pub fn project_label_backward(&self, pass: &ProjectionPass<T>, d_emb: &[T], g: &mut Self) -> Vec<T> {
        let d = Mat::from_vec(1, d_emb.len(), d_emb.to_vec());
        self.label_head.backward(&pass.cache, &d, &mut g.label_head).data
    }

    /// Fresh dropout source for a training pass, derived from `(seed, a, b)`.
    pub fn dropout_rng(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b);
        let _: u64 = rng.gen();
        rng
    }
}

fn project<T: Scalar>(head: &ProjectionHead<T>, pooled: &[T]) -> ProjectionPass<T> {
    let x = Mat::from_vec(1, pooled.len(), pooled.to_vec());
    let (y, cache) = head.forward(&x);
    ProjectionPass { embedding: y.data, cache }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            d_model: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            n_heads: 2,
            ffn_dim: 12,
            max_len: 16,
            dropout: 0.0,
            proj_dim: 4,
            proj_hidden: 6,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn single_token_pooling_is_identity() {
        let m = Seq2Seq::<f64>::new(tiny_config(12), 1).unwrap();
        let out = m.encode(&[8]).unwrap();
        assert_eq!(out.hidden.rows, 1);
        assert_eq!(out.pooled, out.hidden.row(0));
    }

    #[test]
    fn all_pad_is_rejected() {
        let m = Seq2Seq::<f64>::new(tiny_config(12), 1).unwrap();
        assert!(matches!(m.encode(&[PAD, PAD]), Err(ModelError::EmptyInput)));
        assert!(matches!(m.encode(&[8; 17]), Err(ModelError::SequenceTooLong { .. })));
    }

    #[test]
    fn pad_positions_do_not_change_pooling() {
        let m = Seq2Seq::<f64>::new(tiny_config(12), 1).unwrap();
        let a = m.encode(&[8, 9, PAD, PAD]).unwrap();
        // Pad placement shifts positions of real tokens only when it precedes them.
        let b = m.encode(&[8, 9, PAD, PAD, PAD]).unwrap();
        for (x, y) in a.pooled.iter().zip(&b.pooled) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let mut c = tiny_config(12);
        c.n_heads = 3;
        assert!(matches!(Seq2Seq::<f32>::new(c, 0), Err(ModelError::InvalidConfig(_))));
    }

    #[test]
    fn cast_round_trip_preserves_f32_values() {
        let m = Seq2Seq::<f32>::new(tiny_config(12), 3).unwrap();
        let back: Seq2Seq<f32> = m.cast::<f64>().cast();
        assert_eq!(m, back);
    }
}
