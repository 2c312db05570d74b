//! Base graphs and the layered directed grid built on top of them.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type VertexId = u32;

/// A grid node: copy of base vertex `vertex` on layer `layer`.
///
/// Ordered by `(layer, vertex)`, which is also the simulator's tie-break order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId {
    pub layer: u32,
    pub vertex: VertexId,
}

impl NodeId {
    pub const fn new(layer: u32, vertex: VertexId) -> Self {
        Self { layer, vertex }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.vertex, self.layer)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TopologyError {
    #[error("line length must be at least 2, got {0}")]
    LineTooShort(usize),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("self-loop at vertex {0}")]
    SelfLoop(VertexId),
    #[error("graph has no edges")]
    Empty,
    #[error("vertex ids must be contiguous from 0, but vertex {0} has no edges")]
    MissingVertex(VertexId),
    #[error("graph is disconnected: vertex {0} is unreachable from vertex 0")]
    Disconnected(VertexId),
    #[error("vertex {vertex} has degree {degree}; every vertex needs at least 2 neighbors")]
    DegreeTooLow { vertex: VertexId, degree: usize },
    #[error("a layered graph needs at least one layer")]
    NoLayers,
}

/// Vertex roles of a line with replicated ends, used by the layer-0 chain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChainLayout {
    /// Line vertices `v_1..v_m`, in chain order.
    pub order: Vec<VertexId>,
    /// Twins of `v_1`.
    pub start_replicas: Vec<VertexId>,
    /// Twins of `v_m`.
    pub end_replicas: Vec<VertexId>,
}

impl ChainLayout {
    /// Chain hop count of `v`: `i` for `v_i`, and the base vertex's index for replicas.
    pub fn hop_index(&self, v: VertexId) -> Option<usize> {
        if self.start_replicas.contains(&v) {
            return Some(1);
        }
        if self.end_replicas.contains(&v) {
            return Some(self.order.len());
        }
        self.order.iter().position(|&x| x == v).map(|i| i + 1)
    }
}

/// Simple connected undirected graph with minimum degree 2.
#[derive(Clone, Debug)]
pub struct BaseGraph {
    adj: Vec<Vec<VertexId>>,
    dist: Vec<Vec<u32>>,
    diameter: u32,
    chain: Option<ChainLayout>,
}

impl BaseGraph {
    /// Path `v_1..v_m` whose end vertices each get two twin replicas forming a triangle.
    ///
    /// Vertex ids: start replicas `0,1`, then `v_1..v_m` as `2..=m+1`, then end replicas.
    pub fn replicated_line(m: usize) -> Result<Self, TopologyError> {
        if m < 2 {
            return Err(TopologyError::LineTooShort(m));
        }
        let m = m as VertexId;
        let first = 2;
        let last = m + 1;
        let (e1, e2) = (m + 2, m + 3);
        let mut edges = vec![(0, 1), (0, first), (1, first)];
        edges.extend((first..last).map(|v| (v, v + 1)));
        edges.extend([(last, e1), (last, e2), (e1, e2)]);
        let mut g = Self::from_edges(&edges)?;
        g.chain = Some(ChainLayout {
            order: (first..=last).collect(),
            start_replicas: vec![0, 1],
            end_replicas: vec![e1, e2],
        });
        Ok(g)
    }

    /// Builds a graph from undirected edges. Duplicate edges are merged.
    pub fn from_edges(edges: &[(VertexId, VertexId)]) -> Result<Self, TopologyError> {
        if edges.is_empty() {
            return Err(TopologyError::Empty);
        }
        let n = edges.iter().map(|&(a, b)| a.max(b)).max().unwrap_or(0) as usize + 1;
        let mut sets = vec![BTreeSet::new(); n];
        for &(a, b) in edges {
            if a == b {
                return Err(TopologyError::SelfLoop(a));
            }
            sets[a as usize].insert(b);
            sets[b as usize].insert(a);
        }
        let adj: Vec<Vec<VertexId>> = sets.into_iter().map(|s| s.into_iter().collect()).collect();
        for (v, nb) in adj.iter().enumerate() {
            if nb.is_empty() {
                return Err(TopologyError::MissingVertex(v as VertexId));
            }
        }
        let dist: Vec<Vec<u32>> = (0..n).map(|s| bfs(&adj, s)).collect();
        if let Some(v) = dist[0].iter().position(|&d| d == u32::MAX) {
            return Err(TopologyError::Disconnected(v as VertexId));
        }
        for (v, nb) in adj.iter().enumerate() {
            if nb.len() < 2 {
                return Err(TopologyError::DegreeTooLow { vertex: v as VertexId, degree: nb.len() });
            }
        }
        let diameter = dist.iter().flat_map(|r| r.iter().copied()).max().unwrap_or(0);
        Ok(Self { adj, dist, diameter, chain: None })
    }

    /// Parses `u v` pairs, one per line; `#` starts a comment.
    pub fn parse_edge_list(text: &str) -> Result<Self, TopologyError> {
        let mut edges = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse = |tok: Option<&str>| -> Result<VertexId, TopologyError> {
                let tok = tok.ok_or_else(|| TopologyError::Parse {
                    line: i + 1,
                    msg: "expected two vertex ids".into(),
                })?;
                tok.parse().map_err(|_| TopologyError::Parse {
                    line: i + 1,
                    msg: format!("invalid vertex id `{tok}`"),
                })
            };
            let mut toks = line.split_whitespace();
            let a = parse(toks.next())?;
            let b = parse(toks.next())?;
            if toks.next().is_some() {
                return Err(TopologyError::Parse { line: i + 1, msg: "trailing tokens".into() });
            }
            edges.push((a, b));
        }
        Self::from_edges(&edges)
    }

    pub fn num_vertices(&self) -> usize {
        self.adj.len()
    }

    /// Sorted neighbor list.
    pub fn neighbors(&self, v: VertexId) -> &[VertexId] {
        &self.adj[v as usize]
    }

    pub fn degree(&self, v: VertexId) -> usize {
        self.adj[v as usize].len()
    }

    pub fn distance(&self, v: VertexId, w: VertexId) -> u32 {
        self.dist[v as usize][w as usize]
    }

    pub fn diameter(&self) -> u32 {
        self.diameter
    }

    pub fn chain(&self) -> Option<&ChainLayout> {
        self.chain.as_ref()
    }

    /// Undirected edges with `v < w`, in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (VertexId, VertexId)> + '_ {
        self.adj.iter().enumerate().flat_map(|(v, nb)| {
            nb.iter().filter(move |&&w| (v as VertexId) < w).map(move |&w| (v as VertexId, w))
        })
    }
}

fn bfs(adj: &[Vec<VertexId>], src: usize) -> Vec<u32> {
    let mut dist = vec![u32::MAX; adj.len()];
    dist[src] = 0;
    let mut queue = VecDeque::from([src]);
    while let Some(v) = queue.pop_front() {
        for &w in &adj[v] {
            if dist[w as usize] == u32::MAX {
                dist[w as usize] = dist[v] + 1;
                queue.push_back(w as usize);
            }
        }
    }
    dist
}

/// Receiver-side index of an incoming link: 0 is the own copy on the layer
/// below, `i + 1` is the `i`-th base neighbor.
pub type Slot = usize;

/// Directed acyclic grid: one copy of the base graph per layer, with each
/// node linked to its own copy and its base neighbors on the next layer.
#[derive(Clone, Debug)]
pub struct LayeredGraph {
    base: BaseGraph,
    layers: u32,
}

impl LayeredGraph {
    pub fn new(base: BaseGraph, layers: u32) -> Result<Self, TopologyError> {
        if layers == 0 {
            return Err(TopologyError::NoLayers);
        }
        Ok(Self { base, layers })
    }

    pub fn base(&self) -> &BaseGraph {
        &self.base
    }

    pub fn num_layers(&self) -> u32 {
        self.layers
    }

    pub fn num_vertices(&self) -> usize {
        self.base.num_vertices()
    }

    pub fn num_nodes(&self) -> usize {
        self.layers as usize * self.num_vertices()
    }

    pub fn index(&self, node: NodeId) -> usize {
        node.layer as usize * self.num_vertices() + node.vertex as usize
    }

    pub fn node_at(&self, index: usize) -> NodeId {
        let n = self.num_vertices();
        NodeId::new((index / n) as u32, (index % n) as VertexId)
    }

    pub fn contains(&self, node: NodeId) -> bool {
        node.layer < self.layers && (node.vertex as usize) < self.num_vertices()
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.num_nodes()).map(|i| self.node_at(i))
    }

    /// In-neighbors of `node`, own copy first, then base neighbors in id order.
    /// Empty on layer 0.
    pub fn predecessors(&self, node: NodeId) -> Vec<NodeId> {
        if node.layer == 0 {
            return Vec::new();
        }
        let l = node.layer - 1;
        std::iter::once(NodeId::new(l, node.vertex))
            .chain(self.base.neighbors(node.vertex).iter().map(|&w| NodeId::new(l, w)))
            .collect()
    }

    /// Out-neighbors of `node` with the slot they see the message on.
    pub fn successors(&self, node: NodeId) -> Vec<(NodeId, Slot)> {
        if node.layer + 1 >= self.layers {
            return Vec::new();
        }
        let l = node.layer + 1;
        std::iter::once((NodeId::new(l, node.vertex), 0))
            .chain(
                self.base
                    .neighbors(node.vertex)
                    .iter()
                    .map(|&w| (NodeId::new(l, w), self.slot_of(w, node.vertex))),
            )
            .collect()
    }

    /// Slot on which `receiver_vertex` hears `sender_vertex` (one layer down).
    pub fn slot_of(&self, receiver_vertex: VertexId, sender_vertex: VertexId) -> Slot {
        if receiver_vertex == sender_vertex {
            return 0;
        }
        let nb = self.base.neighbors(receiver_vertex);
        nb.binary_search(&sender_vertex).map(|i| i + 1).unwrap_or_else(|_| {
            panic!("{sender_vertex} is not adjacent to {receiver_vertex}")
        })
    }

    /// Sender vertex behind `slot` of `receiver_vertex`.
    pub fn slot_vertex(&self, receiver_vertex: VertexId, slot: Slot) -> VertexId {
        if slot == 0 {
            receiver_vertex
        } else {
            self.base.neighbors(receiver_vertex)[slot - 1]
        }
    }

    /// All nodes reachable backwards from `node` within `depth` hops, excluding `node`.
    pub fn ancestors(&self, node: NodeId, depth: u32) -> BTreeSet<NodeId> {
        let mut seen = BTreeSet::new();
        let mut frontier = BTreeSet::from([node]);
        for _ in 0..depth {
            let mut next = BTreeSet::new();
            for &x in &frontier {
                for p in self.predecessors(x) {
                    if seen.insert(p) {
                        next.insert(p);
                    }
                }
            }
            if next.is_empty() {
                break;
            }
            frontier = next;
        }
        seen
    }

    /// Smallest `k` such that at most `k` faulty nodes lie within
    /// `(k + 1) * depth` hops upstream of `node`.
    pub fn k_faulty_class(&self, node: NodeId, faulty: &BTreeSet<NodeId>, depth: u32) -> u32 {
        let mut k = 0u32;
        loop {
            let hops = (k + 1).saturating_mul(depth);
            let count = self.ancestors(node, hops).intersection(faulty).count() as u32;
            if count <= k {
                return k;
            }
            k += 1;
        }
    }
}
