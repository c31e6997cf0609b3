//! Denoising pretraining, composite-objective fine-tuning, the learning-rate
//! schedule, ablations, hyperparameter grids and data-efficiency runs.
//!
//! A batch step runs four phases: per-example forward passes (parallel), loss
//! evaluation over the whole batch (sequential), per-example backward passes
//! into private gradient buffers (parallel), and a fixed-order reduction
//! followed by clipping and an Adam update. The reduction order makes results
//! bit-identical across thread counts.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::corpus::{self, CorpusError, Example, MaskSpec};
use crate::evaluator::{self, EfficiencyRow, EvalError, PredictionRecord, Scores};
use crate::exec::Exec;
use crate::model::layers::Dropper;
use crate::model::tensor::{Mat, Scalar};
use crate::model::{no_dropout, DecoderPass, DistributionTrace, EncoderPass, ModelError, ProjectionPass, Seq2Seq};
use crate::objectives::{
    combine_logit_grads, lm_loss, output_space_loss, semantic_loss, single_path_levels, token_constraint_loss,
    Components, EdgeScope, LossWeights, ObjectiveError,
};
use crate::taxonomy::{LabelSet, NodeIdx, RepairPolicy, Taxonomy, TaxonomyError};
use crate::tokenizer::{tokenize, TokenizerError, Vocabulary};

/// Model snapshot carried by a divergence error; debug output stays short.
pub struct LastGood(pub Box<Seq2Seq<f32>>);

impl fmt::Debug for LastGood {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "LastGood({} parameters)", self.0.num_params())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became non-finite at step {step}")]
    DivergenceDetected { step: usize, last_good: LastGood },
    #[error("semantic loss needs batches of at least 2 examples, got {0}")]
    BatchTooSmallForSemanticLoss(usize),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Ablation {
    pub no_pretrain: bool,
    pub no_lo: bool,
    pub no_lt: bool,
    pub no_ls: bool,
}

impl Ablation {
    /// The full model followed by the four single-component ablations.
    pub fn variants() -> [(&'static str, Ablation); 5] {
        let off = Ablation::default();
        [
            ("full", off),
            ("no_pretrain", Ablation { no_pretrain: true, ..off }),
            ("no_L_O", Ablation { no_lo: true, ..off }),
            ("no_L_T", Ablation { no_lt: true, ..off }),
            ("no_L_S", Ablation { no_ls: true, ..off }),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecodeOptions {
    pub max_steps: usize,
    /// Restrict argmax to the allowed vocabulary.
    pub constrained: bool,
    #[serde(skip)]
    pub repair: RepairPolicy,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self { max_steps: 32, constrained: false, repair: RepairPolicy::DropInvalid }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    /// Share of the pretraining corpus held out for checkpoint selection.
    pub pretrain_val_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub ablation: Ablation,
    pub edge_scope: EdgeScope,
    pub mask: MaskSpec,
    pub decode: DecodeOptions,
    pub exec: Exec,
}

impl Default for TrainConfig {
    /// Desk-scale profile.
    fn default() -> Self {
        Self {
            batch_size: 8,
            lr: 3e-4,
            warmup_frac: 0.1,
            epochs: 30,
            pretrain_epochs: 10,
            pretrain_lr: 3e-4,
            pretrain_val_frac: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            seed: 0,
            weights: LossWeights::default(),
            ablation: Ablation::default(),
            edge_scope: EdgeScope::AllEdges,
            mask: MaskSpec::default(),
            decode: DecodeOptions::default(),
            exec: Exec::Parallel,
        }
    }
}

impl TrainConfig {
    /// Batch 12 and a 5e-5 peak rate, as used for a full-size pretrained model.
    pub fn paper_profile() -> Self {
        Self { batch_size: 12, lr: 5e-5, pretrain_lr: 5e-5, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.lr > 0.0) || !(self.pretrain_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) || !(0.0..1.0).contains(&self.pretrain_val_frac) {
            return bad("warmup_frac must lie in [0, 1] and pretrain_val_frac in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and epsilon must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        self.weights.validate()?;
        self.mask.validate()?;
        if self.effective_weights().lambda3 > 0.0 && self.batch_size < 2 {
            return Err(TrainError::BatchTooSmallForSemanticLoss(self.batch_size));
        }
        Ok(())
    }

    /// Loss weights with ablated terms set to zero.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights.clone();
        if self.ablation.no_lo {
            w.lambda1 = 0.0;
        }
        if self.ablation.no_lt {
            w.lambda2 = 0.0;
        }
        if self.ablation.no_ls {
            w.lambda3 = 0.0;
        }
        w
    }
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then linear decay to 0 at `total`.
pub fn lr_at(step: usize, total: usize, warmup: usize, peak: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let step = step.min(total);
    if step < warmup {
        peak * step as f64 / warmup as f64
    } else if total == warmup {
        peak
    } else {
        peak * (total - step) as f64 / (total - warmup) as f64
    }
}

/// Tables derived once from a taxonomy and vocabulary.
#[derive(Debug, Clone)]
pub struct Task<'a> {
    pub taxonomy: &'a Taxonomy,
    pub vocab: &'a Vocabulary,
    pub node_mask: Vec<bool>,
    pub allowed: Vec<bool>,
    pub pairs: Vec<(u32, u32)>,
    /// Encoded name of every node.
    pub names: Vec<Vec<u32>>,
    pub max_len: usize,
}

/// Encoder input, full decoder sequence (`<s> ... </s>`) and gold labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
    pub labels: LabelSet,
}

impl<'a> Task<'a> {
    pub fn new(taxonomy: &'a Taxonomy, vocab: &'a Vocabulary, max_len: usize) -> Result<Self> {
        vocab.check_taxonomy(taxonomy)?;
        Ok(Self {
            taxonomy,
            vocab,
            node_mask: vocab.node_mask(),
            allowed: vocab.allowed_mask(taxonomy),
            pairs: vocab.edge_token_pairs(taxonomy),
            names: taxonomy.nodes().iter().map(|n| vocab.encode_words(&tokenize(&n.name))).collect(),
            max_len,
        })
    }

    pub fn sample(&self, ex: &Example) -> Result<Sample> {
        let src = corpus::classify_input(self.vocab, &ex.doc, self.max_len)?;
        let tgt = corpus::label_target(self.vocab, &self.taxonomy.linearize(&ex.labels)?)?;
        if tgt.len() > self.max_len {
            return Err(CorpusError::SequenceTooLong { len: tgt.len(), max: self.max_len }.into());
        }
        Ok(Sample { src, tgt, labels: ex.labels.clone() })
    }

    pub fn samples(&self, data: &[Example]) -> Result<Vec<Sample>> {
        data.iter().map(|e| self.sample(e)).collect()
    }

    /// Masked-label reconstruction sample; masks are drawn from `rng`.
    pub fn pretrain_sample(&self, ex: &Example, mask: &MaskSpec, rng: &mut ChaCha8Rng) -> Result<Sample> {
        let (p, _) = corpus::build_pretrain_example(ex, self.taxonomy, self.vocab, mask, self.max_len, rng)?;
        Ok(Sample { src: p.input, tgt: p.target, labels: ex.labels.clone() })
    }
}

/// Component values and the summed parameter gradient of one batch.
pub struct BatchGrad<T> {
    pub components: Components,
    pub total: f64,
    pub grad: Seq2Seq<T>,
}

struct Forward<T> {
    enc: EncoderPass<T>,
    dec: DecoderPass<T>,
    text: Option<ProjectionPass<T>>,
}

/// Dropout stream index reserved for label-name encodings.
const NAME_STREAM: u64 = 1 << 40;

fn run_forward<T: Scalar>(model: &Seq2Seq<T>, src: &[u32], tgt: &[u32], noise: Option<(u64, u64, u64)>) -> std::result::Result<(EncoderPass<T>, Mat<T>, DecoderPass<T>), ModelError> {
    let mut rng = noise.map(|(seed, step, idx)| Seq2Seq::<T>::dropout_rng(seed, step, idx));
    let mut drop = match rng.as_mut() {
        Some(r) => Dropper { rate: model.config.dropout, rng: Some(r) },
        None => no_dropout(),
    };
    let enc = model.encode_pass(src, &mut drop)?;
    let (logits, dec) = model.decode_pass(&tgt[..tgt.len() - 1], &enc.out, &mut drop)?;
    Ok((enc, logits, dec))
}

/// Composite loss and its gradient for one batch. `noise = Some((seed, step))`
/// enables dropout with streams derived from the step and example index.
pub fn batch_gradient<T: Scalar>(
    model: &Seq2Seq<T>,
    task: &Task<'_>,
    batch: &[&Sample],
    weights: &LossWeights,
    scope: EdgeScope,
    noise: Option<(u64, u64)>,
    exec: Exec,
) -> Result<BatchGrad<T>> {
    let use_ls = weights.lambda3 > 0.0;
    if use_ls && batch.len() < 2 {
        return Err(TrainError::BatchTooSmallForSemanticLoss(batch.len()));
    }
    let level_labels = if use_ls {
        let sets: Vec<LabelSet> = batch.iter().map(|s| s.labels.clone()).collect();
        single_path_levels(task.taxonomy, &sets)?
    } else {
        Vec::new()
    };
    let nodes: Vec<NodeIdx> = level_labels.iter().flatten().flatten().map(|&u| NodeIdx(u)).collect::<BTreeSet<_>>().into_iter().collect();

    let forwards = exec.map(batch, |i, s| {
        let (enc, logits, dec) = run_forward(model, &s.src, &s.tgt, noise.map(|(a, b)| (a, b, i as u64)))?;
        let trace = DistributionTrace::from_logits(logits, s.tgt[1..].to_vec(), &task.node_mask);
        let text = use_ls.then(|| model.project_text_pass(&enc.out.pooled));
        Ok::<_, ModelError>((trace, Forward { enc, dec, text }))
    });
    let mut traces = Vec::with_capacity(batch.len());
    let mut passes = Vec::with_capacity(batch.len());
    for f in forwards {
        let (t, p) = f?;
        traces.push(t);
        passes.push(p);
    }
    let names = exec.map(&nodes, |j, n| {
        let mut rng = noise.map(|(seed, step)| Seq2Seq::<T>::dropout_rng(seed, step, NAME_STREAM + j as u64));
        let mut drop = match rng.as_mut() {
            Some(r) => Dropper { rate: model.config.dropout, rng: Some(r) },
            None => no_dropout(),
        };
        let enc = model.encode_pass(&task.names[n.0], &mut drop)?;
        let proj = model.project_label_pass(&enc.out.pooled);
        Ok::<_, ModelError>((enc, proj))
    });
    let names: Vec<(EncoderPass<T>, ProjectionPass<T>)> = names.into_iter().collect::<std::result::Result<_, _>>()?;

    let lm = lm_loss(&traces);
    let mut components = Components { lm: lm.value.to_f64().unwrap(), ..Components::default() };
    let mut parts = vec![(&lm, 1.0)];
    let lo = (weights.lambda1 > 0.0).then(|| output_space_loss(&traces, &task.pairs, scope));
    if let Some(lo) = &lo {
        components.output = lo.value.to_f64().unwrap();
        parts.push((lo, weights.lambda1));
    }
    let lt = (weights.lambda2 > 0.0).then(|| token_constraint_loss(&traces, &task.allowed));
    if let Some(lt) = &lt {
        components.token = lt.value.to_f64().unwrap();
        parts.push((lt, weights.lambda2));
    }
    let d_logits = combine_logit_grads(&parts);

    let n = batch.len();
    let mut d_text: Option<Mat<T>> = None;
    let mut d_names: Vec<Vec<T>> = Vec::new();
    if use_ls {
        let p = model.config.proj_dim;
        let mut text = Mat::zeros(n, p);
        for (i, f) in passes.iter().enumerate() {
            text.row_mut(i).copy_from_slice(&f.text.as_ref().unwrap().embedding);
        }
        let slot = |u: usize| nodes.binary_search(&NodeIdx(u)).unwrap();
        let labels: Vec<Mat<T>> = level_labels
            .iter()
            .map(|cls| {
                let mut m = Mat::zeros(n, p);
                for (i, c) in cls.iter().enumerate() {
                    if let Some(u) = c {
                        m.row_mut(i).copy_from_slice(&names[slot(*u)].1.embedding);
                    }
                }
                m
            })
            .collect();
        let ls = semantic_loss(&text, &labels, &level_labels, &weights.alphas)?;
        components.semantic = ls.value.to_f64().unwrap();
        let l3 = T::lit(weights.lambda3);
        let mut dt = ls.d_text;
        dt.scale(l3);
        d_names = vec![vec![T::zero(); p]; nodes.len()];
        for (cls, dl) in level_labels.iter().zip(&ls.d_labels) {
            for (i, c) in cls.iter().enumerate() {
                if let Some(u) = c {
                    for (a, &b) in d_names[slot(*u)].iter_mut().zip(dl.row(i)) {
                        *a += b * l3;
                    }
                }
            }
        }
        d_text = Some(dt);
    }
    let total = components.total(weights);
    if !total.is_finite() {
        return Err(TrainError::DivergenceDetected { step: 0, last_good: LastGood(Box::new(Seq2Seq::new(model.config.clone(), 0)?)) });
    }

    let idx: Vec<usize> = (0..n).collect();
    let example_grads = exec.map(&idx, |_, &i| {
        let f = &passes[i];
        let mut g = model.zeros_like();
        let d_mem = model.decode_backward(&f.dec, &d_logits[i], f.enc.out.hidden.rows, &mut g);
        let d_pooled = match (&f.text, &d_text) {
            (Some(tp), Some(dt)) => Some(model.project_text_backward(tp, dt.row(i), &mut g)),
            _ => None,
        };
        model.encode_backward(&f.enc, Some(&d_mem), d_pooled.as_deref(), &mut g);
        g
    });
    let name_idx: Vec<usize> = (0..nodes.len()).collect();
    let name_grads = exec.map(&name_idx, |_, &j| {
        let (enc, proj) = &names[j];
        let mut g = model.zeros_like();
        let d_pooled = model.project_label_backward(proj, &d_names[j], &mut g);
        model.encode_backward(enc, None, Some(&d_pooled), &mut g);
        g
    });
    let mut grads = example_grads.into_iter().chain(name_grads);
    let mut grad = grads.next().expect("non-empty batch");
    for g in grads {
        grad.add_scaled(&g, T::one());
    }
    Ok(BatchGrad { components, total, grad })
}

/// Adam with bias correction; moment buffers mirror the parameter list.
pub struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(model: &Seq2Seq<f32>, cfg: &TrainConfig) -> Self {
        let shapes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }

    pub fn step(&mut self, model: &mut Seq2Seq<f32>, grad: &Seq2Seq<f32>, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for (((p, g), m), v) in model.params_mut().into_iter().zip(grad.params()).zip(&mut self.m).zip(&mut self.v) {
            for (((x, &gi), mi), vi) in p.data.iter_mut().zip(&g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi as f64 / c1;
                let vhat = *vi as f64 / c2;
                *x -= (lr * mhat / (vhat.sqrt() + self.eps)) as f32;
            }
        }
    }
}

/// Scales `grad` to global norm at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(grad: &mut Seq2Seq<f32>, max_norm: f64) -> f64 {
    let norm = grad.params().iter().flat_map(|p| p.data.iter()).map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = (max_norm / norm) as f32;
        for p in grad.params_mut() {
            p.scale(s);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRow {
    pub step: usize,
    pub lm: f64,
    pub lo: f64,
    pub lt: f64,
    pub ls: f64,
    pub total: f64,
    pub lr: f64,
}

pub fn write_history_csv<W: Write>(rows: &[StepRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "step,lm,lo,lt,ls,total,lr")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{},{},{}", r.step, r.lm, r.lo, r.lt, r.ls, r.total, r.lr)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_lm: f64,
    /// Validation Micro-F1; absent for pretraining.
    pub val_micro_f1: Option<f64>,
}

pub fn write_epochs_csv<W: Write>(rows: &[EpochRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "epoch,train_loss,val_lm,val_micro_f1")?;
    for r in rows {
        let f1 = r.val_micro_f1.map(|v| v.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{}", r.epoch, r.train_loss, r.val_lm, f1)?;
    }
    Ok(())
}

pub struct Outcome {
    pub model: Seq2Seq<f32>,
    pub history: Vec<StepRow>,
    pub epochs: Vec<EpochRow>,
    pub best_epoch: usize,
    /// Validation LM loss of the initial parameters.
    pub initial_val_lm: f64,
}

/// Splits `n` shuffled indices into batches, folding a trailing singleton
/// into the previous batch when `min_batch` is 2.
fn batches(n: usize, size: usize, min_batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < min_batch) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    out
}

fn batch_count(n: usize, size: usize, min_batch: usize) -> usize {
    let full = n.div_ceil(size);
    if full > 1 && n % size != 0 && n % size < min_batch {
        full - 1
    } else {
        full
    }
}

/// Mean token cross-entropy of `samples` under teacher forcing, without dropout.
pub fn mean_lm_loss(model: &Seq2Seq<f32>, task: &Task<'_>, samples: &[Sample], exec: Exec) -> Result<f64> {
    let per = exec.map(samples, |_, s| {
        let trace = model.teacher_forced_forward(&s.src, &s.tgt, &task.node_mask)?;
        let l = lm_loss(std::slice::from_ref(&trace));
        Ok::<_, ModelError>((l.value as f64 * trace.len() as f64, trace.len()))
    });
    let (mut sum, mut count) = (0.0, 0usize);
    for p in per {
        let (s, c) = p?;
        sum += s;
        count += c;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Greedy decoding, then parsing under the configured repair policy.
pub fn predict(model: &Seq2Seq<f32>, task: &Task<'_>, data: &[Example], opts: &DecodeOptions, exec: Exec) -> Result<Vec<PredictionRecord>> {
    let allowed = opts.constrained.then_some(task.allowed.as_slice());
    let out = exec.map(data, |_, ex| {
        let src = corpus::classify_input(task.vocab, &ex.doc, task.max_len)?;
        let ids = model.generate(&src, opts.max_steps, allowed)?;
        let tokens = task.vocab.to_label_tokens(&ids)?;
        let (predicted, diagnostics) = task.taxonomy.parse(&tokens, opts.repair)?;
        Ok::<_, TrainError>(PredictionRecord { id: ex.id.clone(), gold: ex.labels.clone(), predicted, diagnostics })
    });
    out.into_iter().collect()
}

pub fn evaluate(model: &Seq2Seq<f32>, task: &Task<'_>, data: &[Example], opts: &DecodeOptions, exec: Exec) -> Result<(Vec<PredictionRecord>, Scores)> {
    let records = predict(model, task, data, opts, exec)?;
    let scores = evaluator::micro_macro_f1(&records)?;
    Ok((records, scores))
}

struct Loop<'a> {
    cfg: &'a TrainConfig,
    weights: LossWeights,
    lr: f64,
    epochs: usize,
    steps_per_epoch: usize,
}

impl Loop<'_> {
    fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    fn warmup(&self) -> usize {
        (self.cfg.warmup_frac * self.total_steps() as f64).round() as usize
    }

    /// One epoch of updates; returns the mean composite loss.
    fn epoch(
        &self,
        model: &mut Seq2Seq<f32>,
        adam: &mut Adam,
        task: &Task<'_>,
        samples: &[Sample],
        epoch: usize,
        history: &mut Vec<StepRow>,
        best: &Seq2Seq<f32>,
    ) -> Result<f64> {
        let min_batch = if self.weights.lambda3 > 0.0 { 2 } else { 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut sum = 0.0;
        let list = batches(samples.len(), self.cfg.batch_size, min_batch, &mut rng);
        for b in &list {
            let step = history.len();
            let batch: Vec<&Sample> = b.iter().map(|&i| &samples[i]).collect();
            let diverged = || TrainError::DivergenceDetected { step, last_good: LastGood(Box::new(best.clone())) };
            let bg = match batch_gradient(model, task, &batch, &self.weights, self.cfg.edge_scope, Some((self.cfg.seed, step as u64)), self.cfg.exec) {
                Err(TrainError::DivergenceDetected { .. }) => return Err(diverged()),
                other => other?,
            };
            let mut grad = bg.grad;
            let norm = clip_grad_norm(&mut grad, self.cfg.clip_norm);
            if !norm.is_finite() {
                return Err(diverged());
            }
            let lr = lr_at(step, self.total_steps(), self.warmup(), self.lr);
            adam.step(model, &grad, lr);
            let c = bg.components;
            history.push(StepRow { step, lm: c.lm, lo: c.output, lt: c.token, ls: c.semantic, total: bg.total, lr });
            sum += bg.total;
        }
        Ok(sum / list.len().max(1) as f64)
    }
}

/// Masked-label reconstruction with cross-entropy only. Masks are redrawn
/// every epoch; the held-out split keeps its first draw. Keeps the parameters
/// with the lowest held-out loss.
pub fn pretrain(cfg: &TrainConfig, task: &Task<'_>, corpus: &[Example], init: Seq2Seq<f32>) -> Result<Outcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyDataset("pretraining corpus"));
    }
    let n_val = ((corpus.len() as f64) * cfg.pretrain_val_frac).round() as usize;
    let n_val = n_val.min(corpus.len() - 1);
    let (val_ex, train_ex) = corpus.split_at(n_val);
    let draw = |data: &[Example], epoch: u64| -> Result<Vec<Sample>> {
        data.iter()
            .enumerate()
            .map(|(i, ex)| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d61_736b);
                rng.set_stream((epoch << 32) | i as u64);
                task.pretrain_sample(ex, &cfg.mask, &mut rng)
            })
            .collect()
    };
    let val = draw(val_ex, u32::MAX as u64)?;
    let weights = LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, alphas: cfg.weights.alphas.clone() };
    let lp = Loop { cfg, weights, lr: cfg.pretrain_lr, epochs: cfg.pretrain_epochs, steps_per_epoch: batch_count(train_ex.len(), cfg.batch_size, 1) };
    let mut model = init;
    let mut adam = Adam::new(&model, cfg);
    let initial_val_lm = if val.is_empty() { f64::NAN } else { mean_lm_loss(&model, task, &val, cfg.exec)? };
    let mut best = (model.clone(), f64::INFINITY, 0usize);
    let mut history = Vec::new();
    let mut epochs = Vec::new();
    for e in 1..=cfg.pretrain_epochs {
        let train = draw(train_ex, e as u64)?;
        let train_loss = lp.epoch(&mut model, &mut adam, task, &train, e, &mut history, &best.0)?;
        let val_lm = if val.is_empty() { train_loss } else { mean_lm_loss(&model, task, &val, cfg.exec)? };
        epochs.push(EpochRow { epoch: e, train_loss, val_lm, val_micro_f1: None });
        if val_lm < best.1 {
            best = (model.clone(), val_lm, e);
        }
    }
    if cfg.pretrain_epochs == 0 {
        best.0 = model;
    }
    Ok(Outcome { model: best.0, history, epochs, best_epoch: best.2, initial_val_lm })
}

/// Optimizes the composite objective; keeps the parameters with the best
/// validation Micro-F1, ties broken by lower validation LM loss.
pub fn finetune(cfg: &TrainConfig, task: &Task<'_>, train: &[Example], val: &[Example], init: Seq2Seq<f32>) -> Result<Outcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset("training set"));
    }
    let weights = cfg.effective_weights();
    let train_s = task.samples(train)?;
    let val_s = task.samples(val)?;
    let min_batch = if weights.lambda3 > 0.0 { 2 } else { 1 };
    if min_batch == 2 && train_s.len() < 2 {
        return Err(TrainError::BatchTooSmallForSemanticLoss(train_s.len()));
    }
    let lp = Loop { cfg, weights, lr: cfg.lr, epochs: cfg.epochs, steps_per_epoch: batch_count(train_s.len(), cfg.batch_size, min_batch) };
    let mut model = init;
    let mut adam = Adam::new(&model, cfg);
    let initial_val_lm = if val_s.is_empty() { f64::NAN } else { mean_lm_loss(&model, task, &val_s, cfg.exec)? };
    let mut best = (model.clone(), f64::NEG_INFINITY, f64::INFINITY, 0usize);
    let mut history = Vec::new();
    let mut epochs = Vec::new();
    for e in 1..=cfg.epochs {
        let train_loss = lp.epoch(&mut model, &mut adam, task, &train_s, e, &mut history, &best.0)?;
        let (val_lm, micro) = if val.is_empty() {
            (train_loss, 0.0)
        } else {
            let (_, s) = evaluate(&model, task, val, &cfg.decode, cfg.exec)?;
            (mean_lm_loss(&model, task, &val_s, cfg.exec)?, s.micro_f1)
        };
        epochs.push(EpochRow { epoch: e, train_loss, val_lm, val_micro_f1: Some(micro) });
        if micro > best.1 || (micro == best.1 && val_lm < best.2) {
            best = (model.clone(), micro, val_lm, e);
        }
    }
    if cfg.epochs == 0 {
        best.0 = model;
    }
    Ok(Outcome { model: best.0, history, epochs, best_epoch: best.3, initial_val_lm })
}

/// Train/validation/test examples sharing one task.
pub struct Splits<'a> {
    pub train: &'a [Example],
    pub val: &'a [Example],
    pub test: &'a [Example],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub lambda1: f64,
    pub lambda2: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
}

/// Fine-tunes once per distinct `(lambda1, lambda2)` cell from `init` and
/// scores on the test split; rows sorted by Macro-F1, best first.
pub fn grid_run(cfg: &TrainConfig, task: &Task<'_>, data: &Splits<'_>, init: &Seq2Seq<f32>, lambda1: &[f64], lambda2: &[f64]) -> Result<Vec<GridRow>> {
    let mut cells: Vec<(f64, f64)> = Vec::new();
    for &a in lambda1 {
        for &b in lambda2 {
            if !cells.iter().any(|&(x, y)| x.to_bits() == a.to_bits() && y.to_bits() == b.to_bits()) {
                cells.push((a, b));
            }
        }
    }
    let rows = cfg.exec.map(&cells, |_, &(a, b)| {
        let mut c = cfg.clone();
        c.weights.lambda1 = a;
        c.weights.lambda2 = b;
        let out = finetune(&c, task, data.train, data.val, init.clone())?;
        let (_, s) = evaluate(&out.model, task, data.test, &c.decode, c.exec)?;
        Ok::<_, TrainError>(GridRow { lambda1: a, lambda2: b, micro_f1: s.micro_f1, macro_f1: s.macro_f1 })
    });
    let mut rows: Vec<GridRow> = rows.into_iter().collect::<Result<_>>()?;
    rows.sort_by(|x, y| y.macro_f1.total_cmp(&x.macro_f1));
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub micro_f1: Vec<f64>,
    pub macro_f1: Vec<f64>,
    pub median_micro_f1: f64,
    pub median_macro_f1: f64,
}

/// Test scores of one seed for every ablation variant, in `Ablation::variants` order.
pub fn ablation_seed(
    cfg: &TrainConfig,
    task: &Task<'_>,
    data: &Splits<'_>,
    pretrain_corpus: &[Example],
    model_cfg: &crate::model::ModelConfig,
    seed: u64,
) -> Result<Vec<Scores>> {
    let mut c = cfg.clone();
    c.seed = seed;
    let init = Seq2Seq::<f32>::new(model_cfg.clone(), seed)?;
    let pretrained = pretrain(&c, task, pretrain_corpus, init.clone())?.model;
    let variants = Ablation::variants();
    let scores = cfg.exec.map(&variants, |_, (_, ab)| {
        let mut v = c.clone();
        v.ablation = *ab;
        let start = if ab.no_pretrain { init.clone() } else { pretrained.clone() };
        let out = finetune(&v, task, data.train, data.val, start)?;
        Ok::<_, TrainError>(evaluate(&out.model, task, data.test, &v.decode, v.exec)?.1)
    });
    scores.into_iter().collect()
}

pub fn ablation_rows(seeds: &[u64], per_seed: &[Vec<Scores>]) -> Vec<AblationRow> {
    Ablation::variants()
        .iter()
        .enumerate()
        .map(|(k, (name, _))| {
            let micro: Vec<f64> = per_seed.iter().map(|s| s[k].micro_f1).collect();
            let macro_: Vec<f64> = per_seed.iter().map(|s| s[k].macro_f1).collect();
            AblationRow {
                variant: name.to_string(),
                seeds: seeds.to_vec(),
                median_micro_f1: evaluator::median(&micro),
                median_macro_f1: evaluator::median(&macro_),
                micro_f1: micro,
                macro_f1: macro_,
            }
        })
        .collect()
}

pub fn run_ablation(
    cfg: &TrainConfig,
    task: &Task<'_>,
    data: &Splits<'_>,
    pretrain_corpus: &[Example],
    model_cfg: &crate::model::ModelConfig,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let per_seed = seeds.iter().map(|&s| ablation_seed(cfg, task, data, pretrain_corpus, model_cfg, s)).collect::<Result<Vec<_>>>()?;
    Ok(ablation_rows(seeds, &per_seed))
}

/// Subsample, fine-tune from `init` and score on test, per proportion and seed.
pub fn data_efficiency(cfg: &TrainConfig, task: &Task<'_>, data: &Splits<'_>, init: &Seq2Seq<f32>, proportions: &[f64], seeds: &[u64]) -> Result<Vec<EfficiencyRow>> {
    evaluator::data_efficiency_curve(proportions, seeds, |p, seed| {
        let mut c = cfg.clone();
        c.seed = seed;
        let train = corpus::subsample(data.train, p, seed)?;
        let out = finetune(&c, task, &train, data.val, init.clone())?;
        let (_, s) = evaluate(&out.model, task, data.test, &c.decode, c.exec)?;
        Ok((s.micro_f1, s.macro_f1))
    })
}
