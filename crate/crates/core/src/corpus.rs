//! Examples, the seeded synthetic benchmark, masked-label pretraining inputs,
//! stratified splits and word-overlap auditing.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::{EdgeSpec, LabelSequence, LabelSet, LabelToken, NodeIdx, NodeSpec, Taxonomy, TaxonomyError, ROOT_ID};
use crate::tokenizer::{tokenize, TokenizerError, Vocabulary, BOS, EOS};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("sequence of length {len} exceeds the model limit {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    InvalidFractions(Vec<f64>),
    #[error("subsample proportion must lie in (0, 1], got {0}")]
    InvalidProportion(f64),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("invalid mask spec: {0}")]
    InvalidMask(String),
    #[error("example `{0}` has an empty document")]
    EmptyDocument(String),
    #[error("dataset line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub id: String,
    pub doc: Vec<String>,
    pub labels: LabelSet,
}

impl Example {
    /// Name words of the example's level-`k` nodes (1-based), one list per node.
    pub fn level_names(&self, taxonomy: &Taxonomy, level: usize) -> Vec<Vec<String>> {
        self.labels
            .iter()
            .filter(|u| taxonomy.node(**u).level == level)
            .map(|u| tokenize(&taxonomy.node(*u).name))
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    doc: Vec<String>,
    labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    masked: Option<Vec<String>>,
}

/// Reads JSON-lines examples; `masked` fields are accepted and ignored.
pub fn read_jsonl<R: BufRead>(taxonomy: &Taxonomy, reader: R) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(&line).map_err(|e| CorpusError::Format { line: n + 1, reason: e.to_string() })?;
        let labels = taxonomy.resolve_ids(&rec.labels)?;
        taxonomy.check_ancestor_closed(&labels)?;
        if rec.doc.is_empty() {
            return Err(CorpusError::EmptyDocument(rec.id));
        }
        out.push(Example { id: rec.id, doc: rec.doc, labels });
    }
    Ok(out)
}

/// Writes one record per example; `masked[i]` adds the masked label tokens.
pub fn write_jsonl<W: Write>(taxonomy: &Taxonomy, examples: &[Example], masked: Option<&[LabelSequence]>, mut w: W) -> Result<()> {
    for (i, ex) in examples.iter().enumerate() {
        let rec = Record {
            id: ex.id.clone(),
            doc: ex.doc.clone(),
            labels: ex.labels.iter().map(|u| taxonomy.node(*u).id.clone()).collect(),
            masked: masked.map(|m| m[i].tokens.iter().map(|t| label_token_str(taxonomy, t)).collect()),
        };
        serde_json::to_writer(&mut w, &rec).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn label_token_str(taxonomy: &Taxonomy, t: &LabelToken) -> String {
    match t {
        LabelToken::Root => ROOT_ID.to_string(),
        LabelToken::Sep => "/".to_string(),
        LabelToken::Mask => "<mask>".to_string(),
        LabelToken::End => "</s>".to_string(),
        LabelToken::Node(u) => taxonomy.node(*u).id.clone(),
        LabelToken::Other(s) => s.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticSpec {
    /// Children per node on each level; `[4, 3]` gives 4 roots with 3 leaves each.
    pub branching: Vec<usize>,
    /// Mean documents per leaf before the Zipf skew is applied.
    pub docs_per_leaf: usize,
    pub zipf_s: f64,
    pub words_per_topic: usize,
    pub doc_len_min: usize,
    pub doc_len_max: usize,
    /// Fraction of document words drawn from the shared noise pool.
    pub noise_rate: f64,
    /// Fraction of topical words drawn from ancestor pools instead of the leaf pool.
    pub ancestor_rate: f64,
    pub noise_words: usize,
    /// Balanced pretraining documents per leaf.
    pub pretrain_per_leaf: usize,
    /// Fraction of each pool replaced by fresh words in the pretraining corpus.
    pub pool_perturb: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            branching: vec![4, 3],
            docs_per_leaf: 75,
            zipf_s: 1.0,
            words_per_topic: 16,
            doc_len_min: 8,
            doc_len_max: 12,
            noise_rate: 0.4,
            ancestor_rate: 0.45,
            noise_words: 120,
            pretrain_per_leaf: 40,
            pool_perturb: 0.3,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CorpusError::InvalidSpec(m.to_string()));
        if self.branching.is_empty() || self.branching.contains(&0) {
            return bad("branching factors must be positive");
        }
        if self.docs_per_leaf == 0 || self.words_per_topic < 2 || self.noise_words == 0 {
            return bad("counts must be positive and topics need at least two words");
        }
        if self.doc_len_min == 0 || self.doc_len_min > self.doc_len_max {
            return bad("document length range must satisfy 1 <= min <= max");
        }
        if !(self.zipf_s >= 0.0 && self.zipf_s.is_finite()) {
            return bad("zipf_s must be a finite non-negative number");
        }
        for (name, p) in [("noise_rate", self.noise_rate), ("ancestor_rate", self.ancestor_rate), ("pool_perturb", self.pool_perturb)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(CorpusError::InvalidSpec(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.noise_rate >= 1.0 {
            return bad("noise_rate must be below 1");
        }
        Ok(())
    }
}

/// Documents per Zipf rank, `total * r^-s / H(n, s)` apportioned by largest
/// remainder so the counts sum to `total`; every rank keeps at least one.
pub fn zipf_counts(leaves: usize, total: usize, s: f64) -> Vec<usize> {
    let h: f64 = (1..=leaves).map(|r| (r as f64).powf(-s)).sum();
    let shares: Vec<f64> = (1..=leaves).map(|r| (r as f64).powf(-s) / h).collect();
    apportion(total, &shares).into_iter().map(|c| c.max(1)).collect()
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub taxonomy: Taxonomy,
    pub examples: Vec<Example>,
    /// Weakly labelled corpus over perturbed topic pools, balanced across leaves.
    pub pretrain: Vec<Example>,
}

const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "tr"];
const NUCLEI: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];

struct WordMint {
    used: HashSet<String>,
}

impl WordMint {
    fn fresh<R: Rng>(&mut self, rng: &mut R) -> String {
        loop {
            let syllables = rng.gen_range(2..=3);
            let w: String = (0..syllables)
                .map(|_| format!("{}{}", ONSETS[rng.gen_range(0..ONSETS.len())], NUCLEI[rng.gen_range(0..NUCLEI.len())]))
                .collect();
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    fn pool<R: Rng>(&mut self, n: usize, rng: &mut R) -> Vec<String> {
        (0..n).map(|_| self.fresh(rng)).collect()
    }
}

/// Builds the tree taxonomy, the Zipf-skewed labelled corpus and the
/// pretraining corpus. Output depends only on `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut mint = WordMint { used: HashSet::new() };

    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    let mut pools: Vec<Vec<String>> = Vec::new();
    let mut frontier: Vec<Option<String>> = vec![None];
    for &b in &spec.branching {
        let mut next = Vec::new();
        for parent in &frontier {
            for c in 0..b {
                let id = match parent {
                    None => format!("{}", c + 1),
                    Some(p) => format!("{p}.{}", c + 1),
                };
                let pool = mint.pool(spec.words_per_topic, &mut rng);
                nodes.push(NodeSpec::new(id.clone(), format!("{} {}", pool[0], pool[1])));
                edges.push(EdgeSpec::new(parent.as_deref().unwrap_or(ROOT_ID), &id));
                pools.push(pool);
                next.push(Some(id));
            }
        }
        frontier = next;
    }
    let taxonomy = Taxonomy::build(nodes, edges)?;
    let noise = mint.pool(spec.noise_words, &mut rng);

    let mut leaves = taxonomy.leaves();
    leaves.shuffle(&mut rng);
    let counts = zipf_counts(leaves.len(), spec.docs_per_leaf * leaves.len(), spec.zipf_s);
    let mut examples = Vec::new();
    for (leaf, &count) in leaves.iter().zip(&counts) {
        for _ in 0..count {
            let doc = synth_doc(spec, &taxonomy, &pools, &noise, *leaf, &mut rng);
            examples.push((*leaf, doc));
        }
    }
    examples.shuffle(&mut rng);
    let examples = examples
        .into_iter()
        .enumerate()
        .map(|(i, (leaf, doc))| Example { id: format!("d{i:05}"), doc, labels: taxonomy.ancestor_closure(leaf) })
        .collect();

    let perturbed: Vec<Vec<String>> = pools
        .iter()
        .map(|pool| {
            let mut p = pool.clone();
            let swaps = (spec.pool_perturb * p.len() as f64).round() as usize;
            // Name words stay, so pretraining still ties names to topics.
            for w in p.iter_mut().skip(2).take(swaps) {
                *w = mint.fresh(&mut rng);
            }
            p
        })
        .collect();
    let mut pretrain = Vec::new();
    let mut leaf_order = taxonomy.leaves();
    leaf_order.sort();
    for leaf in &leaf_order {
        for _ in 0..spec.pretrain_per_leaf {
            let doc = synth_doc(spec, &taxonomy, &perturbed, &noise, *leaf, &mut rng);
            pretrain.push((*leaf, doc));
        }
    }
    pretrain.shuffle(&mut rng);
    let pretrain = pretrain
        .into_iter()
        .enumerate()
        .map(|(i, (leaf, doc))| Example { id: format!("p{i:05}"), doc, labels: taxonomy.ancestor_closure(leaf) })
        .collect();
    Ok(SyntheticData { taxonomy, examples, pretrain })
}

fn synth_doc<R: Rng>(spec: &SyntheticSpec, t: &Taxonomy, pools: &[Vec<String>], noise: &[String], leaf: NodeIdx, rng: &mut R) -> Vec<String> {
    let ancestors: Vec<NodeIdx> = t.ancestor_closure(leaf).into_iter().filter(|&u| u != leaf).collect();
    let len = rng.gen_range(spec.doc_len_min..=spec.doc_len_max);
    (0..len)
        .map(|_| {
            if rng.gen_bool(spec.noise_rate) {
                return noise[rng.gen_range(0..noise.len())].clone();
            }
            let topic = if !ancestors.is_empty() && rng.gen_bool(spec.ancestor_rate) {
                ancestors[rng.gen_range(0..ancestors.len())]
            } else {
                leaf
            };
            let pool = &pools[topic.0];
            pool[rng.gen_range(0..pool.len())].clone()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MaskSpec {
    pub p_level: f64,
    pub p_span: f64,
    pub span_mean: f64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self { p_level: 0.3, p_span: 0.15, span_mean: 2.0 }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_level) || !(0.0..=1.0).contains(&self.p_span) {
            return Err(CorpusError::InvalidMask("probabilities must lie in [0, 1]".into()));
        }
        if !(self.span_mean >= 1.0 && self.span_mean.is_finite()) {
            return Err(CorpusError::InvalidMask("span_mean must be at least 1".into()));
        }
        Ok(())
    }
}

/// Draws attempted before a single node token is masked outright.
pub const MASK_ATTEMPTS: usize = 32;

/// Level masking, then span masking inside surviving levels; each masked span
/// becomes one `<mask>`. Structural tokens are never masked and at least one
/// mask is always produced.
pub fn mask_label_sequence<R: Rng>(seq: &LabelSequence, spec: &MaskSpec, rng: &mut R) -> LabelSequence {
    let levels = seq.levels();
    let draws = if spec.p_level > 0.0 || spec.p_span > 0.0 { MASK_ATTEMPTS } else { 0 };
    for _ in 0..draws {
        let out = mask_once(&levels, spec, rng);
        if out.mask_count() > 0 {
            return out;
        }
    }
    let nonempty: Vec<usize> = (0..levels.len()).filter(|&k| !levels[k].is_empty()).collect();
    let mut forced = levels.clone();
    if let Some(&k) = nonempty.get(rng.gen_range(0..nonempty.len().max(1))) {
        let i = rng.gen_range(0..forced[k].len());
        forced[k][i] = LabelToken::Mask;
    }
    LabelSequence::from_levels(&forced)
}

fn mask_once<R: Rng>(levels: &[Vec<LabelToken>], spec: &MaskSpec, rng: &mut R) -> LabelSequence {
    let extra = Geometric::new(1.0 / spec.span_mean).expect("span_mean >= 1");
    let out: Vec<Vec<LabelToken>> = levels
        .iter()
        .map(|level| {
            if rng.gen_bool(spec.p_level) {
                return vec![LabelToken::Mask];
            }
            let mut kept = Vec::with_capacity(level.len());
            let mut i = 0;
            while i < level.len() {
                if rng.gen_bool(spec.p_span) {
                    let span = 1 + extra.sample(rng) as usize;
                    kept.push(LabelToken::Mask);
                    i += span;
                } else {
                    kept.push(level[i].clone());
                    i += 1;
                }
            }
            kept
        })
        .collect();
    LabelSequence::from_levels(&out)
}

/// Encoder input and decoder target for one masked-label reconstruction example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PretrainExample {
    /// `doc ++ [</s>] ++ masked label ids`.
    pub input: Vec<u32>,
    /// `[<s>] ++ label ids ++ [</s>]`.
    pub target: Vec<u32>,
}

pub fn build_pretrain_example<R: Rng>(
    ex: &Example,
    taxonomy: &Taxonomy,
    vocab: &Vocabulary,
    spec: &MaskSpec,
    max_len: usize,
    rng: &mut R,
) -> Result<(PretrainExample, LabelSequence)> {
    let seq = taxonomy.linearize(&ex.labels)?;
    let masked = mask_label_sequence(&seq, spec, rng);
    let mut input = vocab.encode_words(&ex.doc);
    input.push(EOS);
    input.extend(vocab.encode_label_sequence(&masked)?);
    let target = label_target(vocab, &seq)?;
    for len in [input.len(), target.len()] {
        if len > max_len {
            return Err(CorpusError::SequenceTooLong { len, max: max_len });
        }
    }
    Ok((PretrainExample { input, target }, masked))
}

pub fn label_target(vocab: &Vocabulary, seq: &LabelSequence) -> Result<Vec<u32>> {
    let mut target = vec![BOS];
    target.extend(vocab.encode_label_sequence(seq)?);
    target.push(EOS);
    Ok(target)
}

/// Encoder input for classification: `doc ++ [</s>]`.
pub fn classify_input(vocab: &Vocabulary, doc: &[String], max_len: usize) -> Result<Vec<u32>> {
    let mut input = vocab.encode_words(doc);
    input.push(EOS);
    if input.len() > max_len {
        return Err(CorpusError::SequenceTooLong { len: input.len(), max: max_len });
    }
    Ok(input)
}

/// Orders items so every class is spread evenly along the sequence: item `j`
/// of a class with `n` members gets key `(j + 0.5) / n` after a seeded shuffle.
fn stratified_order<K: Ord + Clone>(keys: &[K], seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        by_class.entry(k.clone()).or_default().push(i);
    }
    let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(keys.len());
    for (c, members) in by_class.values_mut().enumerate() {
        members.shuffle(&mut rng);
        let n = members.len() as f64;
        for (j, &i) in members.iter().enumerate() {
            keyed.push(((j as f64 + 0.5) / n, c, i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    keyed.into_iter().map(|(_, _, i)| i).collect()
}

/// Largest-remainder apportionment of `n` items to `fractions`.
fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

pub const FRACTION_TOLERANCE: f64 = 1e-4;

/// Train/validation/test split stratified by label set.
pub fn stratified_split(data: &[Example], fractions: [f64; 3], seed: u64) -> Result<(Vec<Example>, Vec<Example>, Vec<Example>)> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > FRACTION_TOLERANCE {
        return Err(CorpusError::InvalidFractions(fractions.to_vec()));
    }
    let keys: Vec<&LabelSet> = data.iter().map(|e| &e.labels).collect();
    let order = stratified_order(&keys, seed);
    let counts = apportion(data.len(), &fractions);
    let mut parts: [Vec<usize>; 3] = Default::default();
    let mut it = order.into_iter();
    for (part, &c) in parts.iter_mut().zip(&counts) {
        part.extend(it.by_ref().take(c));
        part.sort_unstable();
    }
    let pick = |ix: &[usize]| ix.iter().map(|&i| data[i].clone()).collect::<Vec<_>>();
    Ok((pick(&parts[0]), pick(&parts[1]), pick(&parts[2])))
}

/// Stratified subset of `round(n * proportion)` items (at least one) in original order.
pub fn subsample(data: &[Example], proportion: f64, seed: u64) -> Result<Vec<Example>> {
    if !(proportion > 0.0 && proportion <= 1.0) {
        return Err(CorpusError::InvalidProportion(proportion));
    }
    if proportion == 1.0 {
        return Ok(data.to_vec());
    }
    let keys: Vec<&LabelSet> = data.iter().map(|e| &e.labels).collect();
    let mut take: Vec<usize> = stratified_order(&keys, seed);
    take.truncate(((data.len() as f64 * proportion).round() as usize).clamp(1, data.len().max(1)));
    take.sort_unstable();
    Ok(take.into_iter().map(|i| data[i].clone()).collect())
}

pub const STOP_WORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "has", "in", "is", "it", "its", "of", "on", "or",
    "that", "the", "this", "to", "was", "were", "which", "with",
];

fn jaccard(a: &BTreeSet<&str>, b: &BTreeSet<&str>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

fn word_sets<'a>(data: &'a [Example], stop: &HashSet<&str>) -> BTreeMap<&'a LabelSet, BTreeSet<&'a str>> {
    let mut out: BTreeMap<&LabelSet, BTreeSet<&str>> = BTreeMap::new();
    for ex in data {
        out.entry(&ex.labels).or_default().extend(ex.doc.iter().map(String::as_str).filter(|w| !stop.contains(w)));
    }
    out
}

/// Word-set Jaccard similarity after stop-word removal, averaged over label
/// sets present in both datasets; whole-corpus sets when none are shared.
pub fn jaccard_overlap(a: &[Example], b: &[Example], stop_words: &[&str]) -> f64 {
    let stop: HashSet<&str> = stop_words.iter().copied().collect();
    let (wa, wb) = (word_sets(a, &stop), word_sets(b, &stop));
    let shared: Vec<f64> = wa.iter().filter_map(|(k, sa)| wb.get(k).map(|sb| jaccard(sa, sb))).collect();
    if !shared.is_empty() {
        return shared.iter().sum::<f64>() / shared.len() as f64;
    }
    let all_a: BTreeSet<&str> = wa.values().flatten().copied().collect();
    let all_b: BTreeSet<&str> = wb.values().flatten().copied().collect();
    jaccard(&all_a, &all_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{MASK, ROOT, SEP};

    fn small_taxonomy() -> Taxonomy {
        Taxonomy::build(
            vec![NodeSpec::new("A", "alpha"), NodeSpec::new("B", "beta"), NodeSpec::new("A1", "alpha one")],
            vec![EdgeSpec::new(ROOT_ID, "A"), EdgeSpec::new(ROOT_ID, "B"), EdgeSpec::new("A", "A1")],
        )
        .unwrap()
    }

    fn ex(t: &Taxonomy, id: &str, doc: &str, labels: &[&str]) -> Example {
        Example { id: id.into(), doc: tokenize(doc), labels: t.resolve_ids(labels).unwrap() }
    }

    #[test]
    fn uniform_zipf_is_flat() {
        let c = zipf_counts(12, 900, 0.0);
        assert!(c.iter().all(|&x| x == 75));
    }

    #[test]
    fn zipf_head_tail_ratio() {
        let c = zipf_counts(12, 900, 1.2);
        // Exact normalization computed independently.
        let h: f64 = (1..=12).map(|r| 1.0 / (r as f64).powf(1.2)).sum();
        let head = 900.0 / h;
        let tail = 900.0 / h / 12f64.powf(1.2);
        assert!((c[0] as f64 - head).abs() < 1.0);
        assert!((c[11] as f64 - tail).abs() < 1.0);
        assert_eq!(c.iter().sum::<usize>(), 900);
        let ratio = c[0] as f64 / c[11] as f64;
        let lo = (head - 1.0) / (tail + 1.0);
        let hi = (head + 1.0) / (tail - 1.0);
        assert!(ratio >= lo && ratio <= hi, "{ratio} not in [{lo}, {hi}]");
    }

    #[test]
    fn generator_is_deterministic_and_disjoint() {
        let spec = SyntheticSpec::default();
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.examples, b.examples);
        assert_eq!(a.pretrain, b.pretrain);
        assert_eq!(a.taxonomy.len(), 16);
        assert_eq!(a.pretrain.len(), 12 * spec.pretrain_per_leaf);
        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        write_jsonl(&a.taxonomy, &a.examples, None, &mut buf_a).unwrap();
        write_jsonl(&b.taxonomy, &b.examples, None, &mut buf_b).unwrap();
        assert_eq!(buf_a, buf_b);
        let back = read_jsonl(&a.taxonomy, &buf_a[..]).unwrap();
        assert_eq!(back, a.examples);
    }

    #[test]
    fn level_mask_replaces_whole_level() {
        let t = small_taxonomy();
        let seq = t.linearize(&t.resolve_ids(&["A", "A1"]).unwrap()).unwrap();
        let spec = MaskSpec { p_level: 1.0, p_span: 0.0, span_mean: 1.0 };
        let out = mask_label_sequence(&seq, &spec, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(out.tokens, vec![LabelToken::Root, LabelToken::Mask, LabelToken::Sep, LabelToken::Mask]);
    }

    #[test]
    fn zero_rates_still_mask_every_draw() {
        let t = small_taxonomy();
        let seq = t.linearize(&t.resolve_ids(&["A", "A1"]).unwrap()).unwrap();
        let spec = MaskSpec { p_level: 0.0, p_span: 0.0, span_mean: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let counts: Vec<usize> = (0..10_000).map(|_| mask_label_sequence(&seq, &spec, &mut rng).mask_count()).collect();
        assert!(counts.iter().all(|&c| c == 1));
    }

    #[test]
    fn pretrain_example_layout() {
        let t = small_taxonomy();
        let docs = [tokenize("x y")];
        let v = Vocabulary::build(docs.iter().map(|d| d.as_slice()), &t, 1).unwrap();
        let e = ex(&t, "0", "x y", &["A", "A1"]);
        let spec = MaskSpec { p_level: 0.0, p_span: 0.0, span_mean: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (p, masked) = build_pretrain_example(&e, &t, &v, &spec, 64, &mut rng).unwrap();
        assert_eq!(masked.mask_count(), 1);
        assert_eq!(p.input.iter().filter(|&&i| i == EOS).count(), 1);
        assert_eq!(&p.input[..3], &[v.word_id("x"), v.word_id("y"), EOS]);
        assert_eq!(p.input[3], ROOT);
        let a = v.node_id(t.lookup("A").unwrap());
        let a1 = v.node_id(t.lookup("A1").unwrap());
        assert_eq!(p.target, vec![BOS, ROOT, a, SEP, a1, EOS]);
        assert!(!p.target.contains(&MASK));
        assert_ne!(&p.input[3..], &p.target[1..5]);
        let long = Example { doc: vec!["x".into(); 70], ..e };
        assert!(matches!(
            build_pretrain_example(&long, &t, &v, &spec, 64, &mut rng),
            Err(CorpusError::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn split_fractions_and_disjointness() {
        let data = generate_synthetic(&SyntheticSpec::default()).unwrap().examples;
        assert_eq!(data.len(), 900);
        let (tr, va, te) = stratified_split(&data, [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0], 1).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (600, 150, 150));
        let ids: HashSet<&str> = tr.iter().chain(&va).chain(&te).map(|e| e.id.as_str()).collect();
        assert_eq!(ids.len(), 900);
        assert!(matches!(stratified_split(&data, [0.6, 0.2, 0.3], 1), Err(CorpusError::InvalidFractions(_))));
    }

    #[test]
    fn subsample_sizes() {
        let data = generate_synthetic(&SyntheticSpec { docs_per_leaf: 10, ..SyntheticSpec::default() }).unwrap().examples;
        let data = &data[..100];
        assert_eq!(subsample(data, 1.0, 4).unwrap(), data.to_vec());
        assert_eq!(subsample(data, 0.5, 4).unwrap().len(), 50);
        assert!(subsample(data, 0.0, 4).is_err());
    }

    #[test]
    fn overlap_examples() {
        let t = small_taxonomy();
        let a = vec![ex(&t, "0", "red blue", &["B"])];
        let b = vec![ex(&t, "1", "blue green", &["B"])];
        assert!((jaccard_overlap(&a, &b, &[]) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(jaccard_overlap(&a, &a, &[]), 1.0);
        let c = vec![ex(&t, "2", "cyan teal", &["A"])];
        assert_eq!(jaccard_overlap(&a, &c, &[]), 0.0);
    }
}
