//! Central finite-difference checks of every analytic gradient in 64-bit
//! arithmetic. Points whose hinge terms sit within `10 * eps` of a kink are
//! redrawn, as are points where the hinge is inactive everywhere (zero
//! gradient would pass vacuously).

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::corpus::{generate_synthetic, SyntheticSpec};
use crate::exec::Exec;
use crate::model::tensor::Mat;
use crate::model::{DistributionTrace, ModelConfig, Seq2Seq};
use crate::objectives::{
    finite_difference_check, lm_loss, output_space_kink_distance, output_space_loss, semantic_kink_distance, semantic_loss,
    single_path_levels, token_constraint_loss, EdgeScope, GradReport, LevelLabels, LossGrad, LossWeights, PairStats,
};
use crate::taxonomy::LabelSet;
use crate::tokenizer::Vocabulary;
use crate::trainer::{batch_gradient, Result, Sample, Task, TrainError};

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub points: usize,
    pub eps: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { points: 50, eps: 1e-5, tolerance: 1e-4 }
    }
}

/// Kink exclusion radius in units of `eps`.
pub const KINK_RADIUS: f64 = 10.0;
const MAX_DRAWS_PER_POINT: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckSummary {
    pub name: String,
    pub points: usize,
    pub resampled: usize,
    pub coordinates: usize,
    pub eps: f64,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub checks: Vec<CheckSummary>,
    pub passed: bool,
}

struct Accumulator {
    summary: CheckSummary,
}

impl Accumulator {
    fn new(name: &str, cfg: &GradcheckConfig) -> Self {
        Self {
            summary: CheckSummary {
                name: name.to_string(),
                points: 0,
                resampled: 0,
                coordinates: 0,
                eps: cfg.eps,
                tolerance: cfg.tolerance,
                max_rel_err: 0.0,
                max_abs_err: 0.0,
                passed: true,
            },
        }
    }

    fn add(&mut self, r: &GradReport) {
        let s = &mut self.summary;
        s.points += 1;
        s.coordinates += r.coordinates;
        s.max_rel_err = s.max_rel_err.max(r.max_rel_err);
        s.max_abs_err = s.max_abs_err.max(r.max_abs_err);
        s.passed &= r.passed;
    }
}

/// Draws until `draw` yields a usable point, counting rejections.
fn draw_point<P>(acc: &mut Accumulator, mut draw: impl FnMut() -> Result<Option<P>>) -> Result<P> {
    for _ in 0..MAX_DRAWS_PER_POINT {
        if let Some(p) = draw()? {
            return Ok(p);
        }
        acc.summary.resampled += 1;
    }
    Err(TrainError::InvalidConfig(format!("{}: no kink-free point after {MAX_DRAWS_PER_POINT} draws", acc.summary.name)))
}

/// Random teacher-forced traces: up to 4 sequences over a vocabulary of at
/// most 12 tokens.
struct LogitInstance {
    shapes: Vec<(usize, usize)>,
    golds: Vec<Vec<u32>>,
    node_mask: Vec<bool>,
    pairs: Vec<(u32, u32)>,
    allowed: Vec<bool>,
    x: Vec<f64>,
}

impl LogitInstance {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let v = rng.gen_range(4..=12);
        let n = rng.gen_range(1..=4);
        let normal = Normal::new(0.0, 1.5).unwrap();
        let mut node_mask: Vec<bool> = (0..v).map(|_| rng.gen_bool(0.6)).collect();
        node_mask[0] = true;
        node_mask[1] = true;
        let nodes: Vec<u32> = (0..v as u32).filter(|&i| node_mask[i as usize]).collect();
        let pairs = (0..rng.gen_range(1..=6))
            .map(|_| {
                let a = nodes[rng.gen_range(0..nodes.len())];
                let mut b = nodes[rng.gen_range(0..nodes.len())];
                if b == a {
                    b = nodes[(nodes.iter().position(|&t| t == a).unwrap() + 1) % nodes.len()];
                }
                (a, b)
            })
            .collect();
        let allowed = (0..v).map(|_| rng.gen_bool(0.5)).collect();
        let mut shapes = Vec::new();
        let mut golds = Vec::new();
        let mut x = Vec::new();
        for _ in 0..n {
            let len = rng.gen_range(1..=5);
            shapes.push((len, v));
            golds.push((0..len).map(|_| rng.gen_range(0..v as u32)).collect());
            x.extend((0..len * v).map(|_| normal.sample(rng)));
        }
        Self { shapes, golds, node_mask, pairs, allowed, x }
    }

    fn traces(&self, x: &[f64]) -> Vec<DistributionTrace<f64>> {
        let mut off = 0;
        self.shapes
            .iter()
            .zip(&self.golds)
            .map(|(&(r, c), g)| {
                let m = Mat::from_vec(r, c, x[off..off + r * c].to_vec());
                off += r * c;
                DistributionTrace::from_logits(m, g.clone(), &self.node_mask)
            })
            .collect()
    }
}

fn flatten(grads: &[Mat<f64>]) -> Vec<f64> {
    grads.iter().flat_map(|m| m.data.iter().copied()).collect()
}

#[derive(Clone, Copy)]
enum LogitLoss {
    Lm,
    Output,
    Token,
}

fn logit_loss(kind: LogitLoss, inst: &LogitInstance, traces: &[DistributionTrace<f64>]) -> LossGrad<f64> {
    match kind {
        LogitLoss::Lm => lm_loss(traces),
        LogitLoss::Output => output_space_loss(traces, &inst.pairs, EdgeScope::AllEdges),
        LogitLoss::Token => token_constraint_loss(traces, &inst.allowed),
    }
}

fn check_logit_loss(name: &str, kind: LogitLoss, cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<CheckSummary> {
    let mut acc = Accumulator::new(name, cfg);
    for _ in 0..cfg.points {
        let inst = draw_point(&mut acc, || {
            let inst = LogitInstance::random(rng);
            if let LogitLoss::Output = kind {
                let traces = inst.traces(&inst.x);
                let lo = output_space_loss(&traces, &inst.pairs, EdgeScope::AllEdges);
                if lo.value <= 0.0 || output_space_kink_distance(&traces, &inst.pairs) < KINK_RADIUS * cfg.eps {
                    return Ok(None);
                }
            }
            Ok(Some(inst))
        })?;
        let analytic = flatten(&logit_loss(kind, &inst, &inst.traces(&inst.x)).d_logits);
        let f = |x: &[f64]| logit_loss(kind, &inst, &inst.traces(x)).value;
        acc.add(&finite_difference_check(name, f, &inst.x, &analytic, cfg.eps, cfg.tolerance)?);
    }
    Ok(acc.summary)
}

fn tiny_model_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        d_model: 8,
        encoder_layers: 1,
        decoder_layers: 1,
        n_heads: 2,
        ffn_dim: 12,
        max_len: 32,
        dropout: 0.0,
        proj_dim: 4,
        proj_hidden: 6,
        pre_norm: true,
        tie_embeddings: true,
        learned_positions: false,
    }
}

/// Pooled vectors fed through both projection heads into the margin loss.
struct SemanticInstance {
    model: Seq2Seq<f64>,
    n: usize,
    classes: Vec<usize>,
    level_labels: LevelLabels,
    alphas: Vec<f64>,
    x: Vec<f64>,
}

impl SemanticInstance {
    fn random(rng: &mut ChaCha8Rng) -> Result<Self> {
        let model = Seq2Seq::<f64>::new(tiny_model_config(10), rng.gen())?;
        let d = model.config.d_model;
        let n = rng.gen_range(2..=4);
        let levels = rng.gen_range(1..=3);
        let classes: Vec<usize> = (0..levels).map(|_| rng.gen_range(2..=3)).collect();
        let level_labels: LevelLabels = classes
            .iter()
            .map(|&c| (0..n).map(|_| (!rng.gen_bool(0.15)).then(|| rng.gen_range(0..c))).collect())
            .collect();
        let mut alphas: Vec<f64> = (0..levels).map(|_| rng.gen_range(0.01..0.5)).collect();
        alphas.sort_by(f64::total_cmp);
        alphas.dedup();
        while alphas.len() < levels {
            alphas.push(alphas.last().unwrap() + 0.05);
        }
        let normal = Normal::new(0.0, 1.0).unwrap();
        let pooled = (n + classes.iter().sum::<usize>()) * d;
        let mut x: Vec<f64> = (0..pooled).map(|_| normal.sample(rng)).collect();
        x.extend(head_params(&model));
        Ok(Self { model, n, classes, level_labels, alphas, x })
    }

    fn with_params(&self, x: &[f64]) -> Seq2Seq<f64> {
        let mut m = self.model.clone();
        let mut it = x[self.pooled_len()..].iter().copied();
        for p in m.text_head.params_mut().into_iter().chain(m.label_head.params_mut()) {
            p.data.iter_mut().for_each(|v| *v = it.next().unwrap());
        }
        m
    }

    fn pooled_len(&self) -> usize {
        (self.n + self.classes.iter().sum::<usize>()) * self.model.config.d_model
    }

    /// Loss value and, when `grad` is set, the gradient in `x` layout.
    fn evaluate(&self, x: &[f64], grad: bool) -> Result<(f64, Vec<PairStats>, Vec<f64>)> {
        let model = self.with_params(x);
        let d = model.config.d_model;
        let p = model.config.proj_dim;
        let text_passes: Vec<_> = (0..self.n).map(|i| model.project_text_pass(&x[i * d..(i + 1) * d])).collect();
        let mut class_off = Vec::new();
        let mut off = self.n;
        for &c in &self.classes {
            class_off.push(off);
            off += c;
        }
        let label_passes: Vec<_> = (self.n..off).map(|r| model.project_label_pass(&x[r * d..(r + 1) * d])).collect();
        let mut text = Mat::zeros(self.n, p);
        for (i, t) in text_passes.iter().enumerate() {
            text.row_mut(i).copy_from_slice(&t.embedding);
        }
        let labels: Vec<Mat<f64>> = self
            .level_labels
            .iter()
            .zip(&class_off)
            .map(|(cls, &o)| {
                let mut m = Mat::zeros(self.n, p);
                for (i, c) in cls.iter().enumerate() {
                    if let Some(c) = c {
                        m.row_mut(i).copy_from_slice(&label_passes[o - self.n + c].embedding);
                    }
                }
                m
            })
            .collect();
        let ls = semantic_loss(&text, &labels, &self.level_labels, &self.alphas)?;
        if !grad {
            return Ok((ls.value, ls.levels, Vec::new()));
        }
        let mut g = model.zeros_like();
        let mut out = vec![0.0; x.len()];
        for (i, t) in text_passes.iter().enumerate() {
            let dp = model.project_text_backward(t, ls.d_text.row(i), &mut g);
            out[i * d..(i + 1) * d].copy_from_slice(&dp);
        }
        let mut d_class = vec![vec![0.0; p]; off - self.n];
        for ((cls, dl), &o) in self.level_labels.iter().zip(&ls.d_labels).zip(&class_off) {
            for (i, c) in cls.iter().enumerate() {
                if let Some(c) = c {
                    for (a, &b) in d_class[o - self.n + c].iter_mut().zip(dl.row(i)) {
                        *a += b;
                    }
                }
            }
        }
        for (k, lp) in label_passes.iter().enumerate() {
            let dp = model.project_label_backward(lp, &d_class[k], &mut g);
            let r = self.n + k;
            out[r * d..(r + 1) * d].copy_from_slice(&dp);
        }
        let heads = head_params(&g);
        out[self.pooled_len()..].copy_from_slice(&heads);
        Ok((ls.value, ls.levels, out))
    }
}

fn head_params(m: &Seq2Seq<f64>) -> Vec<f64> {
    m.text_head.params().into_iter().chain(m.label_head.params()).flat_map(|p| p.data.iter().copied()).collect()
}

fn check_semantic(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<CheckSummary> {
    let name = "L_S/projection-heads";
    let mut acc = Accumulator::new(name, cfg);
    for _ in 0..cfg.points {
        let inst = draw_point(&mut acc, || {
            let inst = SemanticInstance::random(rng)?;
            let (value, stats, _) = inst.evaluate(&inst.x, false)?;
            let usable = value > 0.0 && semantic_kink_distance(&stats, &inst.alphas) >= KINK_RADIUS * cfg.eps;
            Ok(usable.then_some(inst))
        })?;
        let (_, _, analytic) = inst.evaluate(&inst.x, true)?;
        let f = |x: &[f64]| inst.evaluate(x, false).map(|r| r.0).unwrap_or(f64::NAN);
        acc.add(&finite_difference_check(name, f, &inst.x, &analytic, cfg.eps, cfg.tolerance)?);
    }
    Ok(acc.summary)
}

/// A tiny synthetic task with unit loss weights so every term reaches the
/// parameters through the decoder logits or the projection heads.
struct ModelInstance {
    vocab: Vocabulary,
    data: crate::corpus::SyntheticData,
    weights: LossWeights,
}

impl ModelInstance {
    fn new(seed: u64) -> Result<Self> {
        let spec = SyntheticSpec {
            branching: vec![2, 2],
            docs_per_leaf: 3,
            zipf_s: 0.0,
            words_per_topic: 4,
            doc_len_min: 3,
            doc_len_max: 5,
            noise_words: 6,
            pretrain_per_leaf: 1,
            seed,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec)?;
        let vocab = Vocabulary::build(data.examples.iter().map(|e| e.doc.as_slice()), &data.taxonomy, 1)?;
        let weights = LossWeights { lambda1: 1.0, lambda2: 1.0, lambda3: 1.0, alphas: vec![0.05, 0.1] };
        Ok(Self { vocab, data, weights })
    }
}

fn flat_params(m: &Seq2Seq<f64>) -> Vec<f64> {
    m.params().into_iter().flat_map(|p| p.data.iter().copied()).collect()
}

fn set_coords(m: &mut Seq2Seq<f64>, coords: &[usize], values: &[f64]) {
    let mut sizes = Vec::new();
    for p in m.params() {
        sizes.push(p.data.len());
    }
    let mut params = m.params_mut();
    for (&c, &v) in coords.iter().zip(values) {
        let (mut k, mut off) = (0, c);
        while off >= sizes[k] {
            off -= sizes[k];
            k += 1;
        }
        params[k].data[off] = v;
    }
}

/// Smallest distance to a hinge kink of L_O or L_S for this batch.
fn model_kink_distance(model: &Seq2Seq<f64>, task: &Task<'_>, batch: &[&Sample], alphas: &[f64]) -> Result<f64> {
    let mut traces = Vec::new();
    let mut text = Mat::zeros(batch.len(), model.config.proj_dim);
    for (i, s) in batch.iter().enumerate() {
        traces.push(model.teacher_forced_forward(&s.src, &s.tgt, &task.node_mask)?);
        text.row_mut(i).copy_from_slice(&model.project_text(&model.encode(&s.src)?.pooled));
    }
    let sets: Vec<LabelSet> = batch.iter().map(|s| s.labels.clone()).collect();
    let levels = single_path_levels(task.taxonomy, &sets)?;
    let mut labels = Vec::new();
    for cls in &levels {
        let mut m = Mat::zeros(batch.len(), model.config.proj_dim);
        for (i, c) in cls.iter().enumerate() {
            if let Some(u) = c {
                let e = model.project_label(&model.encode(&task.names[*u])?.pooled);
                m.row_mut(i).copy_from_slice(&e);
            }
        }
        labels.push(m);
    }
    let ls = semantic_loss(&text, &labels, &levels, alphas)?;
    Ok(output_space_kink_distance(&traces, &task.pairs).min(semantic_kink_distance(&ls.levels, alphas)))
}

/// Coordinates per model point: half drawn from parameters with a non-zero
/// analytic gradient, half uniformly.
const MODEL_COORDS: usize = 24;

fn check_model(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<CheckSummary> {
    let name = "composite/full-model";
    let inst = ModelInstance::new(rng.gen())?;
    let task = Task::new(&inst.data.taxonomy, &inst.vocab, 32)?;
    let samples = task.samples(&inst.data.examples)?;
    let mut acc = Accumulator::new(name, cfg);
    for _ in 0..cfg.points {
        let (model, batch) = draw_point(&mut acc, || {
            let model = Seq2Seq::<f64>::new(tiny_model_config(inst.vocab.len()), rng.gen())?;
            let k = rng.gen_range(2..=3);
            let batch: Vec<usize> = sample(rng, samples.len(), k).into_vec();
            let refs: Vec<&Sample> = batch.iter().map(|&i| &samples[i]).collect();
            let kink = model_kink_distance(&model, &task, &refs, &inst.weights.alphas)?;
            Ok((kink >= KINK_RADIUS * cfg.eps).then_some((model, batch)))
        })?;
        let refs: Vec<&Sample> = batch.iter().map(|&i| &samples[i]).collect();
        let bg = batch_gradient(&model, &task, &refs, &inst.weights, EdgeScope::AllEdges, None, Exec::Sequential)?;
        let full = flat_params(&bg.grad);
        let values = flat_params(&model);
        let nonzero: Vec<usize> = (0..full.len()).filter(|&i| full[i] != 0.0).collect();
        let mut coords: Vec<usize> = sample(rng, nonzero.len(), (MODEL_COORDS / 2).min(nonzero.len())).into_iter().map(|i| nonzero[i]).collect();
        coords.extend(sample(rng, full.len(), MODEL_COORDS / 2).into_iter());
        coords.sort_unstable();
        coords.dedup();
        let x: Vec<f64> = coords.iter().map(|&c| values[c]).collect();
        let analytic: Vec<f64> = coords.iter().map(|&c| full[c]).collect();
        let f = |x: &[f64]| {
            let mut m = model.clone();
            set_coords(&mut m, &coords, x);
            batch_gradient(&m, &task, &refs, &inst.weights, EdgeScope::AllEdges, None, Exec::Sequential).map(|b| b.total).unwrap_or(f64::NAN)
        };
        acc.add(&finite_difference_check(name, f, &x, &analytic, cfg.eps, cfg.tolerance)?);
    }
    Ok(acc.summary)
}

/// Runs every check with independent streams derived from `seed`.
pub fn run_gradchecks(cfg: &GradcheckConfig, seed: u64) -> Result<GradcheckReport> {
    if cfg.points == 0 || !(cfg.eps > 0.0) || !(cfg.tolerance > 0.0) {
        return Err(TrainError::InvalidConfig("gradcheck needs points > 0, eps > 0 and tolerance > 0".into()));
    }
    let stream = |k: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(k);
        r
    };
    let checks = vec![
        check_logit_loss("L_LM/logits", LogitLoss::Lm, cfg, &mut stream(1))?,
        check_logit_loss("L_O/logits", LogitLoss::Output, cfg, &mut stream(2))?,
        check_logit_loss("L_T/logits", LogitLoss::Token, cfg, &mut stream(3))?,
        check_semantic(cfg, &mut stream(4))?,
        check_model(cfg, &mut stream(5))?,
    ];
    let passed = checks.iter().all(|c| c.passed);
    Ok(GradcheckReport { seed, checks, passed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass_on_a_few_points() {
        let cfg = GradcheckConfig { points: 4, ..GradcheckConfig::default() };
        let r = run_gradchecks(&cfg, 3).unwrap();
        for c in &r.checks {
            assert!(c.passed, "{c:?}");
            assert_eq!(c.points, 4);
        }
    }

    #[test]
    fn broken_gradient_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inst = LogitInstance::random(&mut rng);
        let mut analytic = flatten(&lm_loss(&inst.traces(&inst.x)).d_logits);
        analytic[0] += 0.01;
        let f = |x: &[f64]| lm_loss(&inst.traces(x)).value;
        let r = finite_difference_check("broken", f, &inst.x, &analytic, 1e-5, 1e-4).unwrap();
        assert!(!r.passed);
    }
}
