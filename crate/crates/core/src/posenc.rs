//! Positional encodings for insertion decoding.
//!
//! * ABS: fixed sinusoids indexed by surface position. Inserting a token
//!   shifts every position to its right, so cached states go stale.
//! * REL: a ternary left/self/right relation between two tokens. The
//!   relation between existing tokens never changes when something is
//!   inserted, so it can be recorded once.
//! * FPE: each token gets a vector computed from its left and right
//!   neighbours at insertion time, `p = [p_left, p_right]·W + b`. Nodes are
//!   append-only and never recomputed; the parent links form a DAG in which
//!   every node has exactly two parents.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use substrate::tensor::matmul;
use substrate::Tensor;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeScheme {
    Abs,
    Rel,
    Fpe,
}

impl PeScheme {
    /// Whether hidden states of existing tokens survive an insertion.
    pub fn permits_reuse(self) -> bool {
        !matches!(self, PeScheme::Abs)
    }

    pub fn name(self) -> &'static str {
        match self {
            PeScheme::Abs => "ABS",
            PeScheme::Rel => "REL",
            PeScheme::Fpe => "FPE",
        }
    }
}

impl std::str::FromStr for PeScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "abs" => Ok(PeScheme::Abs),
            "rel" => Ok(PeScheme::Rel),
            "fpe" => Ok(PeScheme::Fpe),
            other => Err(Error::Config(format!("unknown positional scheme `{other}`"))),
        }
    }
}

/// Sinusoidal encoding: index `2k` is `sin(pos/10000^(2k/d))`, `2k+1` the cosine.
pub fn abs_encoding(pos: usize, d_model: usize) -> Result<Vec<f64>> {
    if d_model % 2 != 0 {
        return Err(Error::OddDimension(d_model));
    }
    let mut out = vec![0.0; d_model];
    for k in 0..d_model / 2 {
        let angle = pos as f64 / 10000f64.powf(2.0 * k as f64 / d_model as f64);
        out[2 * k] = angle.sin();
        out[2 * k + 1] = angle.cos();
    }
    Ok(out)
}

/// Rows of sinusoidal encodings for the given positions.
pub fn abs_rows(positions: impl IntoIterator<Item = usize>, d_model: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    for p in positions {
        data.extend(abs_encoding(p, d_model)?);
        n += 1;
    }
    Ok(Tensor::matrix(n, d_model, data))
}

/// Relation of token `j` as seen from token `i`: −1 left, 0 self, +1 right.
pub fn rel_relation(i: usize, j: usize) -> i8 {
    (j as i64 - i as i64).signum() as i8
}

/// Column of the per-head REL bias table for a relation.
pub fn rel_index(rel: i8) -> u32 {
    (rel + 1) as u32
}

pub const REL_RELATIONS: usize = 3;

/// Pairwise relations recorded at insertion time, indexed by creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RelMatrix {
    /// Creation ids in current surface order.
    surface: Vec<usize>,
    r: Vec<Vec<i8>>,
}

impl RelMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    /// Inserts a new token at surface position `at`; returns its creation id.
    /// Only the new row and column are written.
    pub fn insert(&mut self, at: usize) -> usize {
        let id = self.r.len();
        self.surface.insert(at, id);
        let pos_of = |cid: usize, surface: &[usize]| surface.iter().position(|&c| c == cid).unwrap();
        let mine = at;
        let mut row = Vec::with_capacity(id + 1);
        for other in 0..id {
            row.push(rel_relation(mine, pos_of(other, &self.surface)));
        }
        row.push(0);
        for (other, existing) in self.r.iter_mut().enumerate() {
            existing.push(rel_relation(pos_of(other, &self.surface), mine));
        }
        self.r.push(row);
        id
    }

    pub fn get(&self, i: usize, j: usize) -> i8 {
        self.r[i][j]
    }

    /// Creation ids in surface order.
    pub fn surface_order(&self) -> &[usize] {
        &self.surface
    }
}

/// A parent reference: a sentinel or another position node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PosRef {
    Begin,
    End,
    Node(usize),
}

impl std::fmt::Display for PosRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PosRef::Begin => write!(f, "B"),
            PosRef::End => write!(f, "E"),
            PosRef::Node(id) => write!(f, "{id}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosNode {
    pub id: usize,
    pub embedding: Vec<f64>,
    pub parents: (PosRef, PosRef),
    pub created_step: usize,
}

/// Append-only store of fractional position nodes plus the parameters of the
/// neighbour-combining map.
#[derive(Clone, Debug)]
pub struct FpeState {
    p_begin: Vec<f64>,
    p_end: Vec<f64>,
    /// `[2d × d]`, applied as `[p_left, p_right]·W`.
    w: Tensor,
    b: Vec<f64>,
    nodes: Vec<PosNode>,
}

impl FpeState {
    pub fn new(p_begin: Vec<f64>, p_end: Vec<f64>, w: Tensor, b: Vec<f64>) -> Self {
        let d = p_begin.len();
        assert_eq!(p_end.len(), d);
        assert_eq!(w.shape(), &[2 * d, d], "combining map must be [2d × d]");
        assert_eq!(b.len(), d);
        Self {
            p_begin,
            p_end,
            w,
            b,
            nodes: Vec::new(),
        }
    }

    pub fn d_model(&self) -> usize {
        self.p_begin.len()
    }

    pub fn nodes(&self) -> &[PosNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> Option<&PosNode> {
        self.nodes.get(id)
    }

    pub fn embedding(&self, r: PosRef) -> Result<&[f64]> {
        match r {
            PosRef::Begin => Ok(&self.p_begin),
            PosRef::End => Ok(&self.p_end),
            PosRef::Node(id) => self
                .nodes
                .get(id)
                .map(|n| n.embedding.as_slice())
                .ok_or(Error::DanglingNode(id)),
        }
    }

    /// The combining map on one pair of neighbour embeddings.
    pub fn combine(&self, left: &[f64], right: &[f64]) -> Vec<f64> {
        let d = self.d_model();
        let mut x = Vec::with_capacity(2 * d);
        x.extend_from_slice(left);
        x.extend_from_slice(right);
        let mut out = vec![0.0; d];
        matmul(&x, self.w.data(), &mut out, 1, 2 * d, d);
        for (o, b) in out.iter_mut().zip(&self.b) {
            *o += b;
        }
        out
    }

    /// Creates the node for a token inserted between `left` and `right` at
    /// `step`. Existing nodes are never touched.
    pub fn insert(&mut self, left: PosRef, right: PosRef, step: usize) -> Result<usize> {
        for r in [left, right] {
            if let PosRef::Node(id) = r {
                let parent = self.nodes.get(id).ok_or(Error::DanglingNode(id))?;
                if parent.created_step >= step {
                    return Err(Error::ParentNotOlder {
                        parent: id,
                        parent_step: parent.created_step,
                        step,
                    });
                }
            }
        }
        let embedding = self.combine(self.embedding(left)?, self.embedding(right)?);
        let id = self.nodes.len();
        self.nodes.push(PosNode {
            id,
            embedding,
            parents: (left, right),
            created_step: step,
        });
        Ok(id)
    }

    /// Assigns nodes to an `n`-token snapshot by balanced midpoint
    /// construction (see [`snapshot_plan`]). Returns node ids in token order.
    pub fn embed_snapshot(&mut self, n: usize) -> Vec<usize> {
        let plan = snapshot_plan(n);
        let mut ids = vec![usize::MAX; n];
        for node in &plan {
            let to_ref = |b: Boundary, ids: &[usize]| match b {
                Boundary::Begin => PosRef::Begin,
                Boundary::End => PosRef::End,
                Boundary::Token(t) => PosRef::Node(ids[t]),
            };
            let (l, r) = (to_ref(node.left, &ids), to_ref(node.right, &ids));
            ids[node.token] = self
                .insert(l, r, node.depth)
                .expect("midpoint construction only references older nodes");
        }
        ids
    }

    /// One line per node: `id step left_parent right_parent`, sentinels as
    /// `B` and `E`.
    pub fn export_dag(&self) -> String {
        let mut s = String::new();
        for n in &self.nodes {
            let _ = writeln!(s, "{} {} {} {}", n.id, n.created_step, n.parents.0, n.parents.1);
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundary {
    Begin,
    End,
    Token(usize),
}

/// One token of a midpoint construction: its index in the snapshot, the two
/// neighbours it is combined from, and its depth (its synthetic insertion
/// step, starting at 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SnapshotNode {
    pub token: usize,
    pub left: Boundary,
    pub right: Boundary,
    pub depth: usize,
}

/// Balanced-tree construction over `n` tokens in breadth-first (creation)
/// order. The token at index `start + len/2` of each span is created from
/// the span's boundaries, then both halves recurse one level deeper.
pub fn snapshot_plan(n: usize) -> Vec<SnapshotNode> {
    let mut out = Vec::with_capacity(n);
    let mut queue = VecDeque::new();
    queue.push_back((0usize, n, Boundary::Begin, Boundary::End, 1usize));
    while let Some((start, end, left, right, depth)) = queue.pop_front() {
        if start >= end {
            continue;
        }
        let mid = start + (end - start) / 2;
        out.push(SnapshotNode {
            token: mid,
            left,
            right,
            depth,
        });
        queue.push_back((start, mid, left, Boundary::Token(mid), depth + 1));
        queue.push_back((mid + 1, end, Boundary::Token(mid), right, depth + 1));
    }
    out
}
