//! Per-session radix tree of recorded token sequences.
//!
//! Sequences are merged by longest-prefix matching on token ids. When a new
//! sequence diverges inside a node, the node is split so the shared part is
//! stored once. Per-token origin and version ride along as a run-length
//! encoding inside each node; the first recording of a token wins.
//!
//! Node ids are stable: a split keeps the original id on the suffix half, so
//! a node id that marks the end of a recorded sequence keeps marking it.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::types::{ModelVersion, Origin, SessionId, TokenId, TokenMeta, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl NodeId {
    pub const ROOT: NodeId = NodeId(0);
}

/// Identifier of one recorded sequence end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CompletionId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompletionState {
    Complete,
    Partial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct MetaRun {
    len: usize,
    meta: TokenMeta,
}

#[derive(Debug, Clone)]
struct Node {
    tokens: Vec<TokenId>,
    runs: Vec<MetaRun>,
    children: BTreeMap<TokenId, NodeId>,
    parent: Option<NodeId>,
    marks: BTreeMap<CompletionId, CompletionState>,
}

impl Node {
    fn new(tokens: Vec<TokenId>, meta: &[TokenMeta], parent: Option<NodeId>) -> Self {
        Node {
            tokens,
            runs: encode_runs(meta),
            children: BTreeMap::new(),
            parent,
            marks: BTreeMap::new(),
        }
    }

    fn meta(&self) -> Vec<TokenMeta> {
        self.runs
            .iter()
            .flat_map(|r| std::iter::repeat_n(r.meta, r.len))
            .collect()
    }

    fn is_complete(&self) -> bool {
        self.marks.values().any(|s| *s == CompletionState::Complete)
    }
}

fn encode_runs(meta: &[TokenMeta]) -> Vec<MetaRun> {
    let mut runs: Vec<MetaRun> = Vec::new();
    for m in meta {
        match runs.last_mut() {
            Some(r) if r.meta == *m => r.len += 1,
            _ => runs.push(MetaRun { len: 1, meta: *m }),
        }
    }
    runs
}

/// Splits a run-length encoding after `at` tokens.
fn split_runs(runs: &[MetaRun], at: usize) -> (Vec<MetaRun>, Vec<MetaRun>) {
    let mut head = Vec::new();
    let mut tail = Vec::new();
    let mut seen = 0;
    for r in runs {
        if seen + r.len <= at {
            head.push(*r);
        } else if seen >= at {
            tail.push(*r);
        } else {
            let k = at - seen;
            head.push(MetaRun { len: k, meta: r.meta });
            tail.push(MetaRun {
                len: r.len - k,
                meta: r.meta,
            });
        }
        seen += r.len;
    }
    (head, tail)
}

fn shared_prefix_len(a: &[TokenId], b: &[TokenId]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsertOutcome {
    /// Tokens already stored before this insert.
    pub matched: usize,
    /// Node whose span ends exactly where the sequence ends.
    pub end: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StorageStats {
    pub stored_tokens: usize,
    pub naive_tokens: usize,
    pub dedup_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct SessionTrie {
    session_id: SessionId,
    nodes: Vec<Node>,
    stored_tokens: usize,
    naive_tokens: usize,
}

impl SessionTrie {
    pub fn new(session_id: SessionId) -> Self {
        SessionTrie {
            session_id,
            nodes: vec![Node::new(Vec::new(), &[], None)],
            stored_tokens: 0,
            naive_tokens: 0,
        }
    }

    pub fn session_id(&self) -> &SessionId {
        &self.session_id
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn stored_tokens(&self) -> usize {
        self.stored_tokens
    }

    pub fn naive_tokens(&self) -> usize {
        self.naive_tokens
    }

    pub fn stats(&self) -> StorageStats {
        StorageStats {
            stored_tokens: self.stored_tokens,
            naive_tokens: self.naive_tokens,
            dedup_ratio: if self.naive_tokens == 0 {
                1.0
            } else {
                self.stored_tokens as f64 / self.naive_tokens as f64
            },
        }
    }

    /// Longest-prefix insert. Stored tokens grow by exactly `len - matched`.
    pub fn lpm_insert(&mut self, tokens: &[TokenId], meta: &[TokenMeta]) -> InsertOutcome {
        assert_eq!(tokens.len(), meta.len(), "token/metadata length mismatch");
        assert!(!tokens.is_empty(), "cannot insert an empty sequence");
        self.naive_tokens += tokens.len();

        let mut node = NodeId::ROOT;
        let mut pos = 0;
        while pos < tokens.len() {
            let Some(&child) = self.nodes[node.0].children.get(&tokens[pos]) else {
                let id = NodeId(self.nodes.len());
                self.nodes
                    .push(Node::new(tokens[pos..].to_vec(), &meta[pos..], Some(node)));
                self.nodes[node.0].children.insert(tokens[pos], id);
                self.stored_tokens += tokens.len() - pos;
                return InsertOutcome {
                    matched: pos,
                    end: id,
                };
            };
            let shared = shared_prefix_len(&self.nodes[child.0].tokens, &tokens[pos..]);
            if shared < self.nodes[child.0].tokens.len() {
                self.split(child, shared);
                node = self.nodes[child.0].parent.expect("split node has a parent");
            } else {
                node = child;
            }
            pos += shared;
        }
        InsertOutcome {
            matched: tokens.len(),
            end: node,
        }
    }

    /// Splits `id` after `at` tokens. `id` keeps the suffix; a new node takes the prefix.
    fn split(&mut self, id: NodeId, at: usize) {
        debug_assert!(at > 0 && at < self.nodes[id.0].tokens.len());
        let parent = self.nodes[id.0].parent.expect("root is never split");
        let new_id = NodeId(self.nodes.len());
        let node = &mut self.nodes[id.0];
        let suffix = node.tokens.split_off(at);
        let head_tokens = std::mem::replace(&mut node.tokens, suffix);
        let (head_runs, tail_runs) = split_runs(&node.runs, at);
        node.runs = tail_runs;
        node.parent = Some(new_id);
        let first_of_suffix = node.tokens[0];
        let first_of_head = head_tokens[0];
        self.nodes.push(Node {
            tokens: head_tokens,
            runs: head_runs,
            children: BTreeMap::from([(first_of_suffix, id)]),
            parent: Some(parent),
            marks: BTreeMap::new(),
        });
        self.nodes[parent.0].children.insert(first_of_head, new_id);
    }

    pub fn mark(&mut self, node: NodeId, id: CompletionId, state: CompletionState) {
        self.nodes[node.0].marks.insert(id, state);
    }

    pub fn is_leaf(&self, node: NodeId) -> bool {
        node != NodeId::ROOT && self.nodes[node.0].children.is_empty()
    }

    /// Structural leaves, in node-id order.
    pub fn leaves(&self) -> Vec<NodeId> {
        (1..self.nodes.len())
            .map(NodeId)
            .filter(|n| self.is_leaf(*n))
            .collect()
    }

    /// Leaves carrying at least one complete mark.
    pub fn complete_leaves(&self) -> Vec<NodeId> {
        self.leaves()
            .into_iter()
            .filter(|n| self.nodes[n.0].is_complete())
            .collect()
    }

    pub fn is_complete(&self, node: NodeId) -> bool {
        self.nodes[node.0].is_complete()
    }

    pub fn is_marked(&self, node: NodeId) -> bool {
        !self.nodes[node.0].marks.is_empty()
    }

    /// Tokens and metadata on the path root → `node`.
    pub fn path(&self, node: NodeId) -> (Vec<TokenId>, Vec<TokenMeta>) {
        let mut chain = Vec::new();
        let mut cur = Some(node);
        while let Some(n) = cur {
            chain.push(n);
            cur = self.nodes[n.0].parent;
        }
        let mut toks = Vec::new();
        let mut meta = Vec::new();
        for n in chain.iter().rev() {
            toks.extend_from_slice(&self.nodes[n.0].tokens);
            meta.extend(self.nodes[n.0].meta());
        }
        (toks, meta)
    }

    pub fn trajectory(&self, node: NodeId) -> Trajectory {
        let (toks, meta) = self.path(node);
        Trajectory::from_tokens(self.session_id.clone(), &toks, &meta)
    }

    /// Leaves worth extracting: complete ones, plus partial ones when asked.
    pub fn extractable_leaves(&self, include_partial: bool) -> Vec<NodeId> {
        self.leaves()
            .into_iter()
            .filter(|n| {
                let node = &self.nodes[n.0];
                node.is_complete() || (include_partial && !node.marks.is_empty())
            })
            .collect()
    }

    /// Checks structural invariants; returns a description of the first failure.
    pub fn check_invariants(&self) -> Result<(), String> {
        if !self.nodes[0].tokens.is_empty() || self.nodes[0].parent.is_some() {
            return Err("root must have an empty span and no parent".into());
        }
        let mut total = 0;
        let mut seen_children = BTreeSet::new();
        for (i, node) in self.nodes.iter().enumerate() {
            total += node.tokens.len();
            let run_len: usize = node.runs.iter().map(|r| r.len).sum();
            if run_len != node.tokens.len() {
                return Err(format!("node {i}: metadata covers {run_len} of {} tokens", node.tokens.len()));
            }
            if i != 0 && node.tokens.is_empty() {
                return Err(format!("node {i}: empty span"));
            }
            for (first, child) in &node.children {
                let c = &self.nodes[child.0];
                if c.tokens.first() != Some(first) {
                    return Err(format!("node {i}: child key {first} does not match child span"));
                }
                if c.parent != Some(NodeId(i)) {
                    return Err(format!("node {}: parent pointer broken", child.0));
                }
                if !seen_children.insert(*child) {
                    return Err(format!("node {}: reachable twice", child.0));
                }
            }
        }
        if seen_children.len() != self.nodes.len() - 1 {
            return Err("unreachable nodes present".into());
        }
        if total != self.stored_tokens {
            return Err(format!(
                "stored-token accounting {} differs from node total {total}",
                self.stored_tokens
            ));
        }
        if self.stored_tokens > self.naive_tokens {
            return Err("stored tokens exceed naive tokens".into());
        }
        Ok(())
    }
}

/// Builds metadata for a request: input tokens tagged with the admission version,
/// output tokens with their generating versions.
pub fn request_meta(
    input_len: usize,
    input_version: ModelVersion,
    output_versions: &[ModelVersion],
) -> Vec<TokenMeta> {
    let mut meta = vec![
        TokenMeta {
            origin: Origin::AgentInput,
            version: input_version,
        };
        input_len
    ];
    meta.extend(output_versions.iter().map(|&v| TokenMeta {
        origin: Origin::ModelOutput,
        version: v,
    }));
    meta
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::tokens;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn out_meta(n: usize) -> Vec<TokenMeta> {
        vec![
            TokenMeta {
                origin: Origin::ModelOutput,
                version: ModelVersion(0)
            };
            n
        ]
    }

    fn insert(t: &mut SessionTrie, ids: &[u32]) -> InsertOutcome {
        t.lpm_insert(&tokens(ids), &out_meta(ids.len()))
    }

    #[test]
    fn insert_into_empty_trie() {
        let mut t = SessionTrie::new("s".into());
        let r = insert(&mut t, &[1, 2, 3, 4]);
        assert_eq!(r.matched, 0);
        assert_eq!(t.node_count(), 2);
        assert_eq!(t.stored_tokens(), 4);
    }

    #[test]
    fn divergence_splits_node() {
        let mut t = SessionTrie::new("s".into());
        let first = insert(&mut t, &[1, 2, 3, 4]);
        let second = insert(&mut t, &[1, 2, 8, 9]);
        assert_eq!(second.matched, 2);
        assert_eq!(t.stored_tokens(), 6);
        assert_eq!(t.naive_tokens(), 8);
        assert_eq!(t.path(first.end).0, tokens(&[1, 2, 3, 4]));
        assert_eq!(t.path(second.end).0, tokens(&[1, 2, 8, 9]));
        assert_eq!(t.leaves().len(), 2);
        t.check_invariants().unwrap();

        let again = insert(&mut t, &[1, 2, 3, 4]);
        assert_eq!(again.matched, 4);
        assert_eq!(again.end, first.end);
        assert_eq!(t.stored_tokens(), 6);
        assert_eq!(t.node_count(), 4);
    }

    #[test]
    fn prefix_insert_splits_without_storing() {
        let mut t = SessionTrie::new("s".into());
        let long = insert(&mut t, &[1, 2, 3, 4]);
        let short = insert(&mut t, &[1, 2]);
        assert_eq!(short.matched, 2);
        assert_eq!(t.stored_tokens(), 4);
        assert_ne!(short.end, long.end);
        assert!(!t.is_leaf(short.end));
        assert!(t.is_leaf(long.end));
        t.check_invariants().unwrap();
    }

    #[test]
    fn first_recorded_metadata_wins_and_survives_splits() {
        let mut t = SessionTrie::new("s".into());
        let meta = request_meta(2, ModelVersion(0), &[ModelVersion(0), ModelVersion(1)]);
        let a = t.lpm_insert(&tokens(&[1, 2, 3, 4]), &meta);
        let b = t.lpm_insert(
            &tokens(&[1, 2, 3, 7]),
            &request_meta(4, ModelVersion(5), &[]),
        );
        let (_, ma) = t.path(a.end);
        assert_eq!(ma, meta);
        let (_, mb) = t.path(b.end);
        assert_eq!(&mb[..3], &meta[..3]);
        assert_eq!(mb[3].version, ModelVersion(5));
    }

    #[test]
    fn k_branches_store_shared_prefix_once() {
        let (p, s, k) = (5, 3, 4);
        let mut t = SessionTrie::new("s".into());
        for b in 0..k {
            let mut seq: Vec<u32> = (0..p).collect();
            seq.extend((0..s).map(|i| 1000 + b * 10 + i));
            insert(&mut t, &seq);
        }
        assert_eq!(t.stored_tokens() as u32, p + k * s);
    }

    fn oracle_stored(seqs: &[Vec<u32>]) -> usize {
        // Distinct non-empty prefixes = tokens a prefix tree must hold.
        let mut prefixes = HashSet::new();
        for s in seqs {
            for i in 1..=s.len() {
                prefixes.insert(s[..i].to_vec());
            }
        }
        prefixes.len()
    }

    proptest! {
        #[test]
        fn trie_matches_prefix_set_oracle(seqs in prop::collection::vec(prop::collection::vec(0u32..4, 1..8), 1..12)) {
            let mut t = SessionTrie::new("p".into());
            let mut ends = Vec::new();
            let mut expect_stored = 0;
            for (i, s) in seqs.iter().enumerate() {
                let before = t.stored_tokens();
                let r = insert(&mut t, s);
                prop_assert_eq!(t.stored_tokens() - before, s.len() - r.matched);
                expect_stored = oracle_stored(&seqs[..=i]);
                ends.push(r.end);
            }
            prop_assert_eq!(t.stored_tokens(), expect_stored);
            prop_assert_eq!(t.naive_tokens(), seqs.iter().map(Vec::len).sum::<usize>());
            prop_assert!(t.check_invariants().is_ok(), "{:?}", t.check_invariants());
            for (s, end) in seqs.iter().zip(ends) {
                prop_assert_eq!(t.path(end).0, tokens(s));
            }
        }
    }
}
