//! Label hierarchy as a DAG under a virtual root, with BFS linearization of
//! label sets into level-separated token sequences and the inverse parser.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::io::{BufRead, Write};

use thiserror::Error;

/// Parent id used in taxonomy files for edges hanging off the virtual root.
pub const ROOT_ID: &str = "<root>";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("cycle detected among nodes {0:?}")]
    CycleDetected(Vec<String>),
    #[error("node `{0}` is not reachable from the root")]
    UnreachableNode(String),
    #[error("node `{0}` has parents on different levels")]
    LevelInconsistency(String),
    #[error("edge references unknown node `{0}`")]
    UnknownNode(String),
    #[error("self edge on `{0}`")]
    SelfEdge(String),
    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),
    #[error("node `{0}` has an empty name")]
    EmptyName(String),
    #[error("label set is not ancestor-closed: `{0}` has no parent in the set")]
    NotAncestorClosed(String),
    #[error("label set is empty")]
    EmptyLabelSet,
    #[error("parse error at token {position}: {reason}")]
    ParseError { position: usize, reason: String },
    #[error("taxonomy file line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for TaxonomyError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, TaxonomyError>;

/// Dense index of a node inside its taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeIdx(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct LabelNode {
    pub id: String,
    pub name: String,
    pub level: usize,
    pub parents: Vec<NodeIdx>,
}

/// A node declaration prior to validation.
#[derive(Debug, Clone)]
pub struct NodeSpec {
    pub id: String,
    pub name: String,
}

impl NodeSpec {
    pub fn new(id: impl Into<String>, name: impl Into<String>) -> Self {
        Self { id: id.into(), name: name.into() }
    }
}

/// Endpoint of an edge: the virtual root or a declared node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Parent {
    Root,
    Node(String),
}

#[derive(Debug, Clone)]
pub struct EdgeSpec {
    pub parent: Parent,
    pub child: String,
}

impl EdgeSpec {
    pub fn new(parent: &str, child: &str) -> Self {
        let parent = if parent == ROOT_ID { Parent::Root } else { Parent::Node(parent.to_string()) };
        Self { parent, child: child.to_string() }
    }
}

#[derive(Debug, Clone)]
pub struct Taxonomy {
    nodes: Vec<LabelNode>,
    index: HashMap<String, NodeIdx>,
    /// Children in edge declaration order; `root_children` for the virtual root.
    children: Vec<Vec<NodeIdx>>,
    root_children: Vec<NodeIdx>,
    edges: Vec<(NodeIdx, NodeIdx)>,
    depth: usize,
}

/// Set of node indices assigned to one document.
pub type LabelSet = BTreeSet<NodeIdx>;

/// One token of a flattened label sequence, or of arbitrary generated output.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum LabelToken {
    Root,
    Sep,
    Mask,
    End,
    Node(NodeIdx),
    /// Anything else a generator may emit (words, unknown strings, other specials).
    Other(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSequence {
    pub tokens: Vec<LabelToken>,
}

impl LabelSequence {
    /// Node (or mask) tokens per level, split at separators; the leading root is skipped.
    pub fn levels(&self) -> Vec<Vec<LabelToken>> {
        let body = match self.tokens.first() {
            Some(LabelToken::Root) => &self.tokens[1..],
            _ => &self.tokens[..],
        };
        body.split(|t| *t == LabelToken::Sep).map(|s| s.to_vec()).collect()
    }

    pub fn from_levels(levels: &[Vec<LabelToken>]) -> Self {
        let mut tokens = vec![LabelToken::Root];
        for (k, level) in levels.iter().enumerate() {
            if k > 0 {
                tokens.push(LabelToken::Sep);
            }
            tokens.extend(level.iter().cloned());
        }
        Self { tokens }
    }

    pub fn mask_count(&self) -> usize {
        self.tokens.iter().filter(|t| **t == LabelToken::Mask).count()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Diagnostics {
    /// Tokens that are not label nodes or structural symbols.
    pub stray: usize,
    /// Node tokens appearing in the segment of another level.
    pub wrong_level: usize,
    /// Node tokens whose parents were all absent from the accepted set.
    pub broken_edge: usize,
    /// Repeated node tokens.
    pub duplicate: usize,
    /// Missing root, empty levels, stray masks and similar shape defects.
    pub malformed: usize,
}

impl Diagnostics {
    pub fn is_clean(&self) -> bool {
        *self == Self::default()
    }

    pub fn total(&self) -> usize {
        self.stray + self.wrong_level + self.broken_edge + self.duplicate + self.malformed
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum RepairPolicy {
    #[default]
    DropInvalid,
    Strict,
}

impl std::str::FromStr for RepairPolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "drop-invalid" => Ok(Self::DropInvalid),
            "strict" => Ok(Self::Strict),
            other => Err(format!("unknown repair policy `{other}`")),
        }
    }
}

impl fmt::Display for RepairPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::DropInvalid => "drop-invalid",
            Self::Strict => "strict",
        })
    }
}

impl Taxonomy {
    /// Validates the graph and assigns levels by longest path from the root.
    pub fn build(nodes: Vec<NodeSpec>, edges: Vec<EdgeSpec>) -> Result<Self> {
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if n.name.trim().is_empty() {
                return Err(TaxonomyError::EmptyName(n.id.clone()));
            }
            if n.id == ROOT_ID || index.insert(n.id.clone(), NodeIdx(i)).is_some() {
                return Err(TaxonomyError::DuplicateNode(n.id.clone()));
            }
        }
        let n = nodes.len();
        let mut children = vec![Vec::new(); n];
        let mut root_children = Vec::new();
        let mut parents: Vec<Vec<NodeIdx>> = vec![Vec::new(); n];
        let mut from_root = vec![false; n];
        let mut edge_list = Vec::new();
        for e in &edges {
            let c = *index
                .get(&e.child)
                .ok_or_else(|| TaxonomyError::UnknownNode(e.child.clone()))?;
            match &e.parent {
                Parent::Root => {
                    if !from_root[c.0] {
                        from_root[c.0] = true;
                        root_children.push(c);
                    }
                }
                Parent::Node(p) => {
                    let p = *index.get(p).ok_or_else(|| TaxonomyError::UnknownNode(p.clone()))?;
                    if p == c {
                        return Err(TaxonomyError::SelfEdge(e.child.clone()));
                    }
                    if !parents[c.0].contains(&p) {
                        parents[c.0].push(p);
                        children[p.0].push(c);
                        edge_list.push((p, c));
                    }
                }
            }
        }

        // Kahn's algorithm over node-to-node edges; leftovers sit on a cycle.
        let mut indegree: Vec<usize> = parents.iter().map(Vec::len).collect();
        let mut queue: VecDeque<NodeIdx> =
            (0..n).filter(|&i| indegree[i] == 0).map(NodeIdx).collect();
        let mut topo = Vec::with_capacity(n);
        while let Some(u) = queue.pop_front() {
            topo.push(u);
            for &c in &children[u.0] {
                indegree[c.0] -= 1;
                if indegree[c.0] == 0 {
                    queue.push_back(c);
                }
            }
        }
        if topo.len() < n {
            let cyclic = (0..n)
                .filter(|&i| indegree[i] > 0)
                .map(|i| nodes[i].id.clone())
                .collect();
            return Err(TaxonomyError::CycleDetected(cyclic));
        }

        // Longest path from the root, in topological order.
        let mut level = vec![0usize; n];
        for &u in &topo {
            if from_root[u.0] {
                level[u.0] = level[u.0].max(1);
            }
            if level[u.0] == 0 {
                return Err(TaxonomyError::UnreachableNode(nodes[u.0].id.clone()));
            }
            for &c in &children[u.0] {
                level[c.0] = level[c.0].max(level[u.0] + 1);
            }
        }
        for i in 0..n {
            let consistent = parents[i].iter().all(|p| level[p.0] + 1 == level[i])
                && (!from_root[i] || level[i] == 1);
            if !consistent {
                return Err(TaxonomyError::LevelInconsistency(nodes[i].id.clone()));
            }
        }

        let depth = level.iter().copied().max().unwrap_or(0);
        let nodes = nodes
            .into_iter()
            .zip(parents)
            .zip(level)
            .map(|((spec, parents), level)| LabelNode { id: spec.id, name: spec.name, level, parents })
            .collect();
        Ok(Self { nodes, index, children, root_children, edges: edge_list, depth })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn node(&self, idx: NodeIdx) -> &LabelNode {
        &self.nodes[idx.0]
    }

    pub fn nodes(&self) -> &[LabelNode] {
        &self.nodes
    }

    pub fn lookup(&self, id: &str) -> Option<NodeIdx> {
        self.index.get(id).copied()
    }

    pub fn children(&self, idx: NodeIdx) -> &[NodeIdx] {
        &self.children[idx.0]
    }

    pub fn root_children(&self) -> &[NodeIdx] {
        &self.root_children
    }

    /// Node-to-node edges; edges from the virtual root are not included.
    pub fn edges(&self) -> &[(NodeIdx, NodeIdx)] {
        &self.edges
    }

    /// Abstract allowed vocabulary: every node token plus "/", "<root>" and end.
    pub fn allowed_tokens(&self) -> Vec<LabelToken> {
        let mut out: Vec<LabelToken> = (0..self.len()).map(|i| LabelToken::Node(NodeIdx(i))).collect();
        out.extend([LabelToken::Sep, LabelToken::Root, LabelToken::End]);
        out
    }

    pub fn is_root_child(&self, idx: NodeIdx) -> bool {
        self.nodes[idx.0].level == 1
    }

    pub fn leaves(&self) -> Vec<NodeIdx> {
        (0..self.len()).map(NodeIdx).filter(|&i| self.children[i.0].is_empty()).collect()
    }

    /// Nodes on the path(s) from the root to `idx`, including `idx`.
    pub fn ancestor_closure(&self, idx: NodeIdx) -> LabelSet {
        let mut out = LabelSet::new();
        let mut stack = vec![idx];
        while let Some(u) = stack.pop() {
            if out.insert(u) {
                stack.extend(self.nodes[u.0].parents.iter().copied());
            }
        }
        out
    }

    pub fn resolve_ids<S: AsRef<str>>(&self, ids: &[S]) -> Result<LabelSet> {
        ids.iter()
            .map(|s| self.lookup(s.as_ref()).ok_or_else(|| TaxonomyError::UnknownNode(s.as_ref().to_string())))
            .collect()
    }

    pub fn check_ancestor_closed(&self, y: &LabelSet) -> Result<()> {
        for &u in y {
            let node = &self.nodes[u.0];
            let ok = node.level == 1 || node.parents.iter().any(|p| y.contains(p));
            if !ok {
                return Err(TaxonomyError::NotAncestorClosed(node.id.clone()));
            }
        }
        Ok(())
    }

    /// Flattens an ancestor-closed label set breadth-first: level-1 members,
    /// then "/", then level-2 members grouped by the queue order of their parents.
    pub fn linearize(&self, y: &LabelSet) -> Result<LabelSequence> {
        if y.is_empty() {
            return Err(TaxonomyError::EmptyLabelSet);
        }
        self.check_ancestor_closed(y)?;
        let mut levels: Vec<Vec<LabelToken>> = Vec::new();
        let mut frontier: Vec<NodeIdx> =
            self.root_children.iter().copied().filter(|c| y.contains(c)).collect();
        let mut seen: BTreeSet<NodeIdx> = frontier.iter().copied().collect();
        while !frontier.is_empty() {
            levels.push(frontier.iter().map(|&u| LabelToken::Node(u)).collect());
            let mut next = Vec::new();
            for &u in &frontier {
                for &c in &self.children[u.0] {
                    if y.contains(&c) && seen.insert(c) {
                        next.push(c);
                    }
                }
            }
            frontier = next;
        }
        Ok(LabelSequence::from_levels(&levels))
    }

    /// Recovers a label set from arbitrary tokens. Under `DropInvalid` the
    /// result is the largest ancestor-closed subset of the correctly levelled
    /// node tokens; `Strict` fails on the first defect.
    pub fn parse(&self, tokens: &[LabelToken], policy: RepairPolicy) -> Result<(LabelSet, Diagnostics)> {
        let mut diag = Diagnostics::default();
        let mut accepted = LabelSet::new();
        let strict = policy == RepairPolicy::Strict;
        let fail = |position: usize, reason: &str| -> Result<()> {
            if strict {
                Err(TaxonomyError::ParseError { position, reason: reason.to_string() })
            } else {
                Ok(())
            }
        };

        let mut pos = 0;
        match tokens.first() {
            Some(LabelToken::Root) => pos = 1,
            _ => {
                fail(0, "sequence does not begin with <root>")?;
                diag.malformed += 1;
            }
        }
        let mut level = 1usize;
        let mut level_len = 0usize;
        while pos < tokens.len() {
            let tok = &tokens[pos];
            match tok {
                LabelToken::End => break,
                LabelToken::Sep => {
                    if level_len == 0 {
                        fail(pos, "empty level")?;
                        diag.malformed += 1;
                    }
                    level += 1;
                    level_len = 0;
                }
                LabelToken::Root | LabelToken::Mask => {
                    fail(pos, "unexpected structural token")?;
                    diag.malformed += 1;
                }
                LabelToken::Other(_) => {
                    fail(pos, "token outside the taxonomy")?;
                    diag.stray += 1;
                }
                LabelToken::Node(u) => {
                    level_len += 1;
                    let node = &self.nodes[u.0];
                    if accepted.contains(u) {
                        fail(pos, "duplicate node")?;
                        diag.duplicate += 1;
                    } else if node.level != level {
                        fail(pos, "node on the wrong level")?;
                        diag.wrong_level += 1;
                    } else if node.level > 1 && !node.parents.iter().any(|p| accepted.contains(p)) {
                        fail(pos, "no parent of node in sequence")?;
                        diag.broken_edge += 1;
                    } else {
                        accepted.insert(*u);
                    }
                }
            }
            pos += 1;
        }
        if level > 1 && level_len == 0 {
            fail(pos, "trailing separator")?;
            diag.malformed += 1;
        }
        Ok((accepted, diag))
    }

    /// Label nodes grouped by level, for single- or multi-path sets.
    pub fn nodes_by_level(&self, y: &LabelSet) -> Vec<Vec<NodeIdx>> {
        let mut out = vec![Vec::new(); self.depth];
        for &u in y {
            out[self.nodes[u.0].level - 1].push(u);
        }
        out
    }

    /// Reads `child_id<TAB>parent_id<TAB>child name` records.
    pub fn read_tsv<R: BufRead>(reader: R) -> Result<Self> {
        let mut nodes: Vec<NodeSpec> = Vec::new();
        let mut seen: HashMap<String, String> = HashMap::new();
        let mut edges = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim_end_matches(['\r', '\n']);
            if trimmed.trim().is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed.split('\t').collect();
            if fields.len() != 3 {
                return Err(TaxonomyError::Format {
                    line: lineno + 1,
                    reason: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            }
            let (child, parent, name) = (fields[0], fields[1], fields[2]);
            match seen.get(child) {
                Some(prev) if prev != name => {
                    return Err(TaxonomyError::Format {
                        line: lineno + 1,
                        reason: format!("node `{child}` redeclared with a different name"),
                    })
                }
                Some(_) => {}
                None => {
                    seen.insert(child.to_string(), name.to_string());
                    nodes.push(NodeSpec::new(child, name));
                }
            }
            edges.push(EdgeSpec::new(parent, child));
        }
        Self::build(nodes, edges)
    }

    /// Writes one record per edge, root edges first per node, in node order.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# child_id\tparent_id\tname")?;
        for node in &self.nodes {
            if node.level == 1 {
                writeln!(w, "{}\t{}\t{}", node.id, ROOT_ID, node.name)?;
            }
            for p in &node.parents {
                writeln!(w, "{}\t{}\t{}", node.id, self.nodes[p.0].id, node.name)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Taxonomy {
        Taxonomy::build(
            vec![NodeSpec::new("A", "alpha"), NodeSpec::new("B", "beta"), NodeSpec::new("A1", "alpha one")],
            vec![EdgeSpec::new(ROOT_ID, "A"), EdgeSpec::new(ROOT_ID, "B"), EdgeSpec::new("A", "A1")],
        )
        .unwrap()
    }

    fn ids(t: &Taxonomy, names: &[&str]) -> LabelSet {
        t.resolve_ids(names).unwrap()
    }

    fn tok(t: &Taxonomy, s: &str) -> LabelToken {
        match s {
            "<root>" => LabelToken::Root,
            "/" => LabelToken::Sep,
            "<mask>" => LabelToken::Mask,
            other => t.lookup(other).map(LabelToken::Node).unwrap_or(LabelToken::Other(other.into())),
        }
    }

    fn toks(t: &Taxonomy, s: &[&str]) -> Vec<LabelToken> {
        s.iter().map(|x| tok(t, x)).collect()
    }

    #[test]
    fn builds_depth_two() {
        let t = small();
        assert_eq!(t.depth(), 2);
        assert_eq!(t.node(t.lookup("A1").unwrap()).level, 2);
    }

    #[test]
    fn cycle_is_rejected() {
        let err = Taxonomy::build(
            vec![NodeSpec::new("A", "a"), NodeSpec::new("B", "b")],
            vec![EdgeSpec::new(ROOT_ID, "A"), EdgeSpec::new("A", "B"), EdgeSpec::new("B", "A")],
        )
        .unwrap_err();
        assert!(matches!(err, TaxonomyError::CycleDetected(_)));
    }

    #[test]
    fn orphan_is_unreachable() {
        let err = Taxonomy::build(
            vec![NodeSpec::new("A", "a"), NodeSpec::new("C", "c")],
            vec![EdgeSpec::new(ROOT_ID, "A")],
        )
        .unwrap_err();
        assert_eq!(err, TaxonomyError::UnreachableNode("C".into()));
    }

    #[test]
    fn mixed_parent_levels_rejected() {
        let err = Taxonomy::build(
            vec![NodeSpec::new("A", "a"), NodeSpec::new("A1", "a1"), NodeSpec::new("X", "x")],
            vec![
                EdgeSpec::new(ROOT_ID, "A"),
                EdgeSpec::new("A", "A1"),
                EdgeSpec::new("A", "X"),
                EdgeSpec::new("A1", "X"),
            ],
        )
        .unwrap_err();
        assert_eq!(err, TaxonomyError::LevelInconsistency("X".into()));
    }

    #[test]
    fn self_edge_and_unknown_rejected() {
        let e = Taxonomy::build(vec![NodeSpec::new("A", "a")], vec![EdgeSpec::new("A", "A")]).unwrap_err();
        assert_eq!(e, TaxonomyError::SelfEdge("A".into()));
        let e = Taxonomy::build(vec![NodeSpec::new("A", "a")], vec![EdgeSpec::new("Z", "A")]).unwrap_err();
        assert_eq!(e, TaxonomyError::UnknownNode("Z".into()));
    }

    #[test]
    fn linearize_two_levels() {
        let t = small();
        let seq = t.linearize(&ids(&t, &["A", "A1"])).unwrap();
        assert_eq!(seq.tokens, toks(&t, &["<root>", "A", "/", "A1"]));
    }

    #[test]
    fn linearize_requires_closure() {
        let t = small();
        assert_eq!(
            t.linearize(&ids(&t, &["A1"])).unwrap_err(),
            TaxonomyError::NotAncestorClosed("A1".into())
        );
        assert_eq!(t.linearize(&LabelSet::new()).unwrap_err(), TaxonomyError::EmptyLabelSet);
    }

    #[test]
    fn parse_examples() {
        let t = Taxonomy::build(
            vec![
                NodeSpec::new("A", "a"),
                NodeSpec::new("B", "b"),
                NodeSpec::new("A1", "a1"),
                NodeSpec::new("B2", "b2"),
            ],
            vec![
                EdgeSpec::new(ROOT_ID, "A"),
                EdgeSpec::new(ROOT_ID, "B"),
                EdgeSpec::new("A", "A1"),
                EdgeSpec::new("B", "B2"),
            ],
        )
        .unwrap();
        let (y, d) = t.parse(&toks(&t, &["<root>", "A", "/", "A1"]), RepairPolicy::DropInvalid).unwrap();
        assert_eq!(y, ids(&t, &["A", "A1"]));
        assert!(d.is_clean());

        let (y, d) = t.parse(&toks(&t, &["<root>", "A", "/", "B2"]), RepairPolicy::DropInvalid).unwrap();
        assert_eq!(y, ids(&t, &["A"]));
        assert_eq!(d.broken_edge, 1);
        assert_eq!(d.total(), 1);

        let (y, d) = t
            .parse(&toks(&t, &["<root>", "A", "xyz", "/", "A1"]), RepairPolicy::DropInvalid)
            .unwrap();
        assert_eq!(y, ids(&t, &["A", "A1"]));
        assert_eq!(d.stray, 1);

        let err = t.parse(&toks(&t, &["<root>", "A", "/", "B2"]), RepairPolicy::Strict).unwrap_err();
        assert!(matches!(err, TaxonomyError::ParseError { position: 3, .. }));
    }

    #[test]
    fn parse_shape_defects() {
        let t = small();
        let (y, d) = t.parse(&toks(&t, &["A", "/", "A1", "/"]), RepairPolicy::DropInvalid).unwrap();
        assert_eq!(y, ids(&t, &["A", "A1"]));
        assert_eq!(d.malformed, 2);
        let (y, d) = t.parse(&toks(&t, &["<root>", "A1", "A"]), RepairPolicy::DropInvalid).unwrap();
        assert_eq!(y, ids(&t, &["A"]));
        assert_eq!(d.wrong_level, 1);
        let (_, d) = t.parse(&toks(&t, &["<root>", "A", "A"]), RepairPolicy::DropInvalid).unwrap();
        assert_eq!(d.duplicate, 1);
        let (y, d) = t.parse(&[LabelToken::Root, LabelToken::End, LabelToken::Sep], RepairPolicy::Strict).unwrap();
        assert!(y.is_empty());
        assert!(d.is_clean());
    }

    #[test]
    fn tsv_round_trip() {
        let text = "# comment\nA\t<root>\talpha\nB\t<root>\tbeta\nA1\tA\talpha one\n";
        let t = Taxonomy::read_tsv(text.as_bytes()).unwrap();
        assert_eq!(t.len(), 3);
        let mut out = Vec::new();
        t.write_tsv(&mut out).unwrap();
        let t2 = Taxonomy::read_tsv(out.as_slice()).unwrap();
        assert_eq!(t.nodes(), t2.nodes());
        assert_eq!(t.edges(), t2.edges());
    }

    #[test]
    fn tsv_rejects_bad_records() {
        let err = Taxonomy::read_tsv("A\t<root>\n".as_bytes()).unwrap_err();
        assert!(matches!(err, TaxonomyError::Format { line: 1, .. }));
    }

    #[test]
    fn shared_child_dag() {
        let t = Taxonomy::build(
            vec![NodeSpec::new("A", "a"), NodeSpec::new("B", "b"), NodeSpec::new("C", "c")],
            vec![
                EdgeSpec::new(ROOT_ID, "A"),
                EdgeSpec::new(ROOT_ID, "B"),
                EdgeSpec::new("A", "C"),
                EdgeSpec::new("B", "C"),
            ],
        )
        .unwrap();
        assert_eq!(t.edges().len(), 2);
        // C reachable through either parent.
        let seq = t.linearize(&ids(&t, &["B", "C"])).unwrap();
        assert_eq!(seq.tokens, toks(&t, &["<root>", "B", "/", "C"]));
        assert_eq!(t.ancestor_closure(t.lookup("C").unwrap()).len(), 3);
    }
}
