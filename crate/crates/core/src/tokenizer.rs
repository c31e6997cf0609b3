//! Shared word-level vocabulary over documents, label names, atomic label
//! node tokens and the structural symbols.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};

use thiserror::Error;

use crate::taxonomy::{LabelSequence, LabelToken, NodeIdx, Taxonomy};

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("token id {0} is outside the vocabulary")]
    UnknownSpecial(u32),
    #[error("label token `{0:?}` has no vocabulary entry")]
    UnencodableLabel(LabelToken),
    #[error("vocabulary file line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("vocabulary does not match taxonomy: {0}")]
    TaxonomyMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TokenizerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Special {
    Pad,
    Bos,
    Eos,
    Mask,
    Root,
    Sep,
}

impl Special {
    pub const ALL: [Special; 6] = [Special::Pad, Special::Bos, Special::Eos, Special::Mask, Special::Root, Special::Sep];

    pub fn as_str(self) -> &'static str {
        match self {
            Special::Pad => "<pad>",
            Special::Bos => "<s>",
            Special::Eos => "</s>",
            Special::Mask => "<mask>",
            Special::Root => "<root>",
            Special::Sep => "/",
        }
    }

    pub fn id(self) -> u32 {
        self as u32
    }
}

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const MASK: u32 = 3;
pub const ROOT: u32 = 4;
pub const SEP: u32 = 5;
pub const UNK: u32 = 6;
const FIRST_NODE: u32 = 7;

/// Decoded form of a single id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Token {
    Special(Special),
    Unk,
    Node(NodeIdx),
    Word(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Special,
    Node,
    Word,
}

impl TokenKind {
    fn as_str(self) -> &'static str {
        match self {
            TokenKind::Special => "special",
            TokenKind::Node => "node",
            TokenKind::Word => "word",
        }
    }
}

/// Ids are laid out as: six specials, `<unk>`, one atomic id per taxonomy
/// node (in node order), then words by descending frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    node_ids: Vec<String>,
    words: Vec<String>,
    word_index: HashMap<String, u32>,
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}

impl Vocabulary {
    pub fn build<'a, I>(corpus: I, taxonomy: &Taxonomy, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut docs = 0usize;
        for doc in corpus {
            docs += 1;
            for w in doc {
                *counts.entry(w.to_lowercase()).or_default() += 1;
            }
        }
        if docs == 0 {
            return Err(TokenizerError::EmptyCorpus);
        }
        // Label names must be encodable regardless of corpus frequency.
        for node in taxonomy.nodes() {
            for w in tokenize(&node.name) {
                let c = counts.entry(w).or_default();
                *c = (*c).max(min_count);
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let words: Vec<String> = words.into_iter().map(|(w, _)| w).collect();
        Ok(Self::from_parts(taxonomy.nodes().iter().map(|n| n.id.clone()).collect(), words))
    }

    fn from_parts(node_ids: Vec<String>, words: Vec<String>) -> Self {
        let base = FIRST_NODE + node_ids.len() as u32;
        let word_index = words.iter().enumerate().map(|(i, w)| (w.clone(), base + i as u32)).collect();
        Self { node_ids, words, word_index }
    }

    pub fn len(&self) -> usize {
        FIRST_NODE as usize + self.node_ids.len() + self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn num_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn num_words(&self) -> usize {
        self.words.len()
    }

    pub fn node_id(&self, idx: NodeIdx) -> u32 {
        FIRST_NODE + idx.0 as u32
    }

    pub fn word_id(&self, word: &str) -> u32 {
        self.word_index.get(word).copied().unwrap_or(UNK)
    }

    pub fn is_node_id(&self, id: u32) -> bool {
        id >= FIRST_NODE && ((id - FIRST_NODE) as usize) < self.node_ids.len()
    }

    /// Boolean lookup table over ids, true at node tokens.
    pub fn node_mask(&self) -> Vec<bool> {
        (0..self.len() as u32).map(|i| self.is_node_id(i)).collect()
    }

    pub fn token(&self, id: u32) -> Result<Token> {
        let i = id as usize;
        if i >= self.len() {
            return Err(TokenizerError::UnknownSpecial(id));
        }
        Ok(if id < UNK {
            Token::Special(Special::ALL[i])
        } else if id == UNK {
            Token::Unk
        } else if self.is_node_id(id) {
            Token::Node(NodeIdx((id - FIRST_NODE) as usize))
        } else {
            Token::Word(self.words[i - FIRST_NODE as usize - self.node_ids.len()].clone())
        })
    }

    pub fn kind(&self, id: u32) -> TokenKind {
        if id <= UNK {
            TokenKind::Special
        } else if self.is_node_id(id) {
            TokenKind::Node
        } else {
            TokenKind::Word
        }
    }

    fn surface(&self, id: u32) -> &str {
        if id < UNK {
            Special::ALL[id as usize].as_str()
        } else if id == UNK {
            "<unk>"
        } else if self.is_node_id(id) {
            &self.node_ids[(id - FIRST_NODE) as usize]
        } else {
            &self.words[id as usize - FIRST_NODE as usize - self.node_ids.len()]
        }
    }

    pub fn encode_words(&self, words: &[String]) -> Vec<u32> {
        words.iter().map(|w| self.word_id(&w.to_lowercase())).collect()
    }

    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|w| self.word_id(w)).collect()
    }

    pub fn encode_label_token(&self, t: &LabelToken) -> Result<u32> {
        match t {
            LabelToken::Root => Ok(ROOT),
            LabelToken::Sep => Ok(SEP),
            LabelToken::Mask => Ok(MASK),
            LabelToken::End => Ok(EOS),
            LabelToken::Node(n) if n.0 < self.node_ids.len() => Ok(self.node_id(*n)),
            other => Err(TokenizerError::UnencodableLabel(other.clone())),
        }
    }

    pub fn encode_label_sequence(&self, seq: &LabelSequence) -> Result<Vec<u32>> {
        seq.tokens.iter().map(|t| self.encode_label_token(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<Token>> {
        ids.iter().map(|&i| self.token(i)).collect()
    }

    pub fn decode_text(&self, ids: &[u32]) -> Result<String> {
        let mut parts = Vec::with_capacity(ids.len());
        for &i in ids {
            if i as usize >= self.len() {
                return Err(TokenizerError::UnknownSpecial(i));
            }
            parts.push(self.surface(i));
        }
        Ok(parts.join(" "))
    }

    /// Maps generated ids onto label tokens for parsing.
    pub fn to_label_tokens(&self, ids: &[u32]) -> Result<Vec<LabelToken>> {
        ids.iter()
            .map(|&i| {
                Ok(match self.token(i)? {
                    Token::Special(Special::Root) => LabelToken::Root,
                    Token::Special(Special::Sep) => LabelToken::Sep,
                    Token::Special(Special::Mask) => LabelToken::Mask,
                    Token::Special(Special::Eos) => LabelToken::End,
                    Token::Node(n) => LabelToken::Node(n),
                    _ => LabelToken::Other(self.surface(i).to_string()),
                })
            })
            .collect()
    }

    /// V^H: every node token plus "/", "<root>" and end-of-sequence.
    pub fn allowed_ids(&self, taxonomy: &Taxonomy) -> BTreeSet<u32> {
        taxonomy
            .allowed_tokens()
            .iter()
            .map(|t| self.encode_label_token(t).expect("taxonomy tokens are encodable"))
            .collect()
    }

    /// Boolean table over the vocabulary, true inside V^H.
    pub fn allowed_mask(&self, taxonomy: &Taxonomy) -> Vec<bool> {
        let mut m = vec![false; self.len()];
        for id in self.allowed_ids(taxonomy) {
            m[id as usize] = true;
        }
        m
    }

    /// Parent/child token pairs, one per node-to-node edge.
    pub fn edge_token_pairs(&self, taxonomy: &Taxonomy) -> Vec<(u32, u32)> {
        taxonomy.edges().iter().map(|&(p, c)| (self.node_id(p), self.node_id(c))).collect()
    }

    pub fn check_taxonomy(&self, taxonomy: &Taxonomy) -> Result<()> {
        if self.node_ids.len() != taxonomy.len() {
            return Err(TokenizerError::TaxonomyMismatch(format!(
                "{} node tokens vs {} nodes",
                self.node_ids.len(),
                taxonomy.len()
            )));
        }
        for (a, b) in self.node_ids.iter().zip(taxonomy.nodes()) {
            if *a != b.id {
                return Err(TokenizerError::TaxonomyMismatch(format!("node `{a}` vs `{}`", b.id)));
            }
        }
        Ok(())
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for id in 0..self.len() as u32 {
            writeln!(w, "{}\t{}\t{}", id, self.surface(id), self.kind(id).as_str())?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(reader: R) -> Result<Self> {
        let mut node_ids = Vec::new();
        let mut words = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let bad = |reason: String| TokenizerError::Format { line: lineno + 1, reason };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(bad(format!("expected 3 fields, found {}", fields.len())));
            }
            let id: usize = fields[0].parse().map_err(|_| bad(format!("bad id `{}`", fields[0])))?;
            if id != lineno {
                return Err(bad(format!("ids must be dense and ordered, found {id}")));
            }
            match fields[2] {
                "special" => {
                    let expected = if id < UNK as usize {
                        Special::ALL[id].as_str()
                    } else if id == UNK as usize {
                        "<unk>"
                    } else {
                        return Err(bad("special token after the reserved range".into()));
                    };
                    if fields[1] != expected {
                        return Err(bad(format!("expected `{expected}`, found `{}`", fields[1])));
                    }
                }
                "node" => {
                    if !words.is_empty() || id != FIRST_NODE as usize + node_ids.len() {
                        return Err(bad("node token out of order".into()));
                    }
                    node_ids.push(fields[1].to_string());
                }
                "word" => words.push(fields[1].to_string()),
                other => return Err(bad(format!("unknown kind `{other}`"))),
            }
        }
        Ok(Self::from_parts(node_ids, words))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::{EdgeSpec, NodeSpec, ROOT_ID};

    fn tax() -> Taxonomy {
        Taxonomy::build(
            vec![NodeSpec::new("A", "alpha"), NodeSpec::new("B", "beta"), NodeSpec::new("A1", "alpha one")],
            vec![EdgeSpec::new(ROOT_ID, "A"), EdgeSpec::new(ROOT_ID, "B"), EdgeSpec::new("A", "A1")],
        )
        .unwrap()
    }

    fn empty_tax() -> Taxonomy {
        Taxonomy::build(vec![], vec![]).unwrap()
    }

    fn docs(v: &[&str]) -> Vec<Vec<String>> {
        v.iter().map(|s| tokenize(s)).collect()
    }

    #[test]
    fn min_count_filters_words() {
        let t = empty_tax();
        let d = docs(&["a b", "a c"]);
        let v = Vocabulary::build(d.iter().map(|x| x.as_slice()), &t, 2).unwrap();
        assert_eq!(v.num_words(), 1);
        assert_ne!(v.word_id("a"), UNK);
        assert_eq!(v.word_id("b"), UNK);
        assert_eq!(v.word_id("c"), UNK);
        let v = Vocabulary::build(d.iter().map(|x| x.as_slice()), &t, 1).unwrap();
        assert_eq!(v.num_words(), 3);
        assert_eq!(v.len(), Special::ALL.len() + 0 + 3 + 1);
    }

    #[test]
    fn size_partition_with_nodes() {
        let t = tax();
        let d = docs(&["x y"]);
        let v = Vocabulary::build(d.iter().map(|x| x.as_slice()), &t, 1).unwrap();
        // words: x, y, plus label-name words alpha, beta, one
        assert_eq!(v.len(), Special::ALL.len() + t.len() + v.num_words() + 1);
        assert_eq!(v.num_words(), 5);
    }

    #[test]
    fn empty_corpus_rejected() {
        let t = tax();
        let d: Vec<Vec<String>> = vec![];
        assert!(matches!(
            Vocabulary::build(d.iter().map(|x| x.as_slice()), &t, 1),
            Err(TokenizerError::EmptyCorpus)
        ));
    }

    #[test]
    fn text_and_label_round_trip() {
        let t = tax();
        let d = docs(&["a b"]);
        let v = Vocabulary::build(d.iter().map(|x| x.as_slice()), &t, 1).unwrap();
        let ids = v.encode_text("A b");
        assert_eq!(v.decode_text(&ids).unwrap(), "a b");

        let y = t.resolve_ids(&["A", "A1"]).unwrap();
        let seq = t.linearize(&y).unwrap();
        let ids = v.encode_label_sequence(&seq).unwrap();
        assert_eq!(ids.len(), 4);
        let allowed = v.allowed_ids(&t);
        assert!(ids.iter().all(|i| allowed.contains(i)));
        assert_eq!(v.to_label_tokens(&ids).unwrap(), seq.tokens);
        assert!(matches!(v.decode(&[v.len() as u32]), Err(TokenizerError::UnknownSpecial(_))));
    }

    #[test]
    fn allowed_vocabulary_partition() {
        let t = tax();
        let d = docs(&["a b"]);
        let v = Vocabulary::build(d.iter().map(|x| x.as_slice()), &t, 1).unwrap();
        assert_eq!(v.allowed_ids(&t).len(), 6);
        let mask = v.allowed_mask(&t);
        let inside = mask.iter().filter(|m| **m).count();
        let outside = mask.iter().filter(|m| !**m).count();
        assert_eq!(inside + outside, v.len());

        let e = empty_tax();
        let ve = Vocabulary::build(d.iter().map(|x| x.as_slice()), &e, 1).unwrap();
        assert_eq!(ve.allowed_ids(&e), [ROOT, SEP, EOS].into_iter().collect());
    }

    #[test]
    fn edge_pairs() {
        let t = tax();
        let d = docs(&["a"]);
        let v = Vocabulary::build(d.iter().map(|x| x.as_slice()), &t, 1).unwrap();
        let a = v.node_id(t.lookup("A").unwrap());
        let a1 = v.node_id(t.lookup("A1").unwrap());
        assert_eq!(v.edge_token_pairs(&t), vec![(a, a1)]);
    }

    #[test]
    fn tsv_round_trip() {
        let t = tax();
        let d = docs(&["a b b"]);
        let v = Vocabulary::build(d.iter().map(|x| x.as_slice()), &t, 1).unwrap();
        let mut buf = Vec::new();
        v.write_tsv(&mut buf).unwrap();
        let v2 = Vocabulary::read_tsv(buf.as_slice()).unwrap();
        assert_eq!(v, v2);
        v2.check_taxonomy(&t).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("0\t<pad>\tspecial\n"));
    }
}
