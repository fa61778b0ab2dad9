//! NSW similarity graph: construction, traversal helpers and persistence.
//!
//! The graph is the bottom layer of an HNSW index built with the usual
//! insertion procedure. Edges are directed because degree pruning can drop
//! one side of a bidirectional link.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, VecDeque};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::ArrayView2;

use crate::data::l2_squared;
use crate::error::{Error, Result};

pub const GRAPH_MAGIC: [u8; 4] = *b"LRGR";
pub const GRAPH_VERSION: u32 = 1;
pub const DEFAULT_MAX_DEGREE: usize = 16;
pub const DEFAULT_EF_CONSTRUCTION: usize = 200;

/// Marker for vertices that BFS did not reach.
pub const UNREACHABLE: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimilarityGraph {
    adjacency: Vec<Vec<u32>>,
    max_degree: usize,
    entry: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuildParams {
    pub max_degree: usize,
    pub ef_construction: usize,
    /// Accepted for reproducibility bookkeeping; construction itself is
    /// fully determined by insertion order.
    pub seed: u64,
}

impl Default for BuildParams {
    fn default() -> Self {
        Self {
            max_degree: DEFAULT_MAX_DEGREE,
            ef_construction: DEFAULT_EF_CONSTRUCTION,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Follow edges u → v.
    Forward,
    /// Follow reversed edges, i.e. distances *to* the source.
    Backward,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HopDistances {
    pub source: u32,
    pub direction: Direction,
    /// Hop count per vertex, [`UNREACHABLE`] when there is no path.
    pub hops: Vec<u32>,
}

impl HopDistances {
    pub fn get(&self, v: u32) -> Option<u32> {
        match self.hops[v as usize] {
            UNREACHABLE => None,
            h => Some(h),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Debug)]
struct Dist(f32);

impl Eq for Dist {}

impl PartialOrd for Dist {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Dist {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl SimilarityGraph {
    /// Builds a graph from explicit adjacency lists, validating the invariants.
    pub fn from_adjacency(adjacency: Vec<Vec<u32>>, max_degree: usize, entry: u32) -> Result<Self> {
        let n = adjacency.len();
        if n == 0 {
            return Err(Error::argument("graph must have at least one vertex"));
        }
        if max_degree == 0 {
            return Err(Error::argument("max degree must be positive"));
        }
        if entry as usize >= n {
            return Err(Error::OutOfRange { id: entry as usize, len: n });
        }
        for (v, list) in adjacency.iter().enumerate() {
            if list.len() > max_degree {
                return Err(Error::format(format!(
                    "vertex {v} has degree {} > {max_degree}",
                    list.len()
                )));
            }
            for (i, &u) in list.iter().enumerate() {
                if u as usize >= n {
                    return Err(Error::OutOfRange { id: u as usize, len: n });
                }
                if u as usize == v {
                    return Err(Error::format(format!("self loop at vertex {v}")));
                }
                if list[..i].contains(&u) {
                    return Err(Error::format(format!("duplicate edge {v} -> {u}")));
                }
            }
        }
        Ok(Self {
            adjacency,
            max_degree,
            entry,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.adjacency.len()
    }

    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    pub fn entry(&self) -> u32 {
        self.entry
    }

    pub fn adjacency(&self) -> &[Vec<u32>] {
        &self.adjacency
    }

    pub fn num_edges(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum()
    }

    pub fn neighbors(&self, v: u32) -> Result<&[u32]> {
        self.adjacency
            .get(v as usize)
            .map(Vec::as_slice)
            .ok_or(Error::OutOfRange {
                id: v as usize,
                len: self.adjacency.len(),
            })
    }

    /// Unchecked neighbor access for hot loops.
    #[inline]
    pub(crate) fn out(&self, v: u32) -> &[u32] {
        &self.adjacency[v as usize]
    }

    /// Adjacency of the reversed graph, lists sorted by id.
    pub fn reversed(&self) -> Vec<Vec<u32>> {
        let mut rev = vec![Vec::new(); self.adjacency.len()];
        for (u, list) in self.adjacency.iter().enumerate() {
            for &v in list {
                rev[v as usize].push(u as u32);
            }
        }
        rev
    }

    /// Undirected adjacency: union of both edge directions, sorted, no cap.
    pub fn symmetrize(&self) -> Vec<Vec<u32>> {
        let mut sym = vec![Vec::new(); self.adjacency.len()];
        for (u, list) in self.adjacency.iter().enumerate() {
            for &v in list {
                sym[u].push(v);
                sym[v as usize].push(u as u32);
            }
        }
        for list in &mut sym {
            list.sort_unstable();
            list.dedup();
        }
        sym
    }

    pub fn bfs_hops(&self, source: u32, direction: Direction) -> Result<HopDistances> {
        let n = self.num_vertices();
        if source as usize >= n {
            return Err(Error::OutOfRange { id: source as usize, len: n });
        }
        let hops = match direction {
            Direction::Forward => bfs_over(&self.adjacency, source),
            Direction::Backward => bfs_over(&self.reversed(), source),
        };
        Ok(HopDistances {
            source,
            direction,
            hops,
        })
    }

    /// True when every vertex is forward-reachable from the entry vertex.
    pub fn is_connected_from_entry(&self) -> bool {
        bfs_over(&self.adjacency, self.entry)
            .iter()
            .all(|&h| h != UNREACHABLE)
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(File::create(path.as_ref())?);
        w.write_all(&GRAPH_MAGIC)?;
        for x in [
            GRAPH_VERSION,
            self.adjacency.len() as u32,
            self.max_degree as u32,
            self.entry,
        ] {
            w.write_all(&x.to_le_bytes())?;
        }
        for list in &self.adjacency {
            w.write_all(&(list.len() as u32).to_le_bytes())?;
            for &u in list {
                w.write_all(&u.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path.as_ref())?).read_to_end(&mut bytes)?;
        let mut r = WordReader::new(&bytes);
        if bytes.len() < 4 || bytes[..4] != GRAPH_MAGIC {
            return Err(Error::format("bad graph magic"));
        }
        r.pos = 4;
        let version = r.u32()?;
        if version != GRAPH_VERSION {
            return Err(Error::format(format!("unsupported graph version {version}")));
        }
        let n = r.u32()? as usize;
        let max_degree = r.u32()? as usize;
        let entry = r.u32()?;
        let mut adjacency = Vec::with_capacity(n.min(bytes.len() / 4));
        for _ in 0..n {
            let len = r.u32()? as usize;
            let mut list = Vec::with_capacity(len.min(max_degree));
            for _ in 0..len {
                list.push(r.u32()?);
            }
            adjacency.push(list);
        }
        if !r.at_end() {
            return Err(Error::format("trailing bytes after graph"));
        }
        Self::from_adjacency(adjacency, max_degree, entry)
    }
}

/// Little-endian u32 reader over a byte slice.
pub(crate) struct WordReader<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> WordReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::format(format!("truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(u32::from_le_bytes(chunk.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        let lo = self.u32()? as u64;
        let hi = self.u32()? as u64;
        Ok(lo | (hi << 32))
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Unweighted BFS over an adjacency list.
pub fn bfs_over(adjacency: &[Vec<u32>], source: u32) -> Vec<u32> {
    let mut hops = vec![UNREACHABLE; adjacency.len()];
    let mut queue = VecDeque::new();
    hops[source as usize] = 0;
    queue.push_back(source);
    while let Some(u) = queue.pop_front() {
        let next = hops[u as usize] + 1;
        for &v in &adjacency[u as usize] {
            if hops[v as usize] == UNREACHABLE {
                hops[v as usize] = next;
                queue.push_back(v);
            }
        }
    }
    hops
}

/// Builds the NSW graph by inserting base rows in index order.
pub fn build_nsw(base: ArrayView2<f32>, params: BuildParams) -> Result<SimilarityGraph> {
    let n = base.nrows();
    if n == 0 {
        return Err(Error::argument("cannot build a graph on an empty base set"));
    }
    if params.max_degree == 0 {
        return Err(Error::argument("max degree must be positive"));
    }
    let ef = params.ef_construction.max(params.max_degree).max(1);
    let m = params.max_degree;
    let row = |i: u32| base.row(i as usize).to_slice().expect("standard layout");
    let dist = |a: u32, b: u32| l2_squared(row(a), row(b));

    let mut adjacency: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut marks = vec![0u32; n];
    let mut stamp = 0u32;

    for i in 1..n as u32 {
        stamp += 1;
        let candidates = search_layer(&adjacency, &mut marks, stamp, 0, ef, |v| dist(v, i));
        let selected = select_neighbors(&candidates, m, &dist);
        for &(_, u) in &selected {
            adjacency[i as usize].push(u);
        }
        for &(_, u) in &selected {
            let list = &mut adjacency[u as usize];
            list.push(i);
            if list.len() > m {
                let mut scored: Vec<(Dist, u32)> = list.iter().map(|&w| (Dist(dist(u, w)), w)).collect();
                scored.sort_unstable();
                scored.truncate(m);
                *list = scored.into_iter().map(|(_, w)| w).collect();
            }
        }
    }
    SimilarityGraph::from_adjacency(adjacency, m, 0)
}

/// Best-first search over the partial graph; returns up to `ef` closest
/// vertices ordered by (distance, id).
fn search_layer(
    adjacency: &[Vec<u32>],
    marks: &mut [u32],
    stamp: u32,
    entry: u32,
    ef: usize,
    dist: impl Fn(u32) -> f32,
) -> Vec<(Dist, u32)> {
    let d0 = Dist(dist(entry));
    marks[entry as usize] = stamp;
    let mut candidates = BinaryHeap::new();
    let mut results = BinaryHeap::new();
    candidates.push(Reverse((d0, entry)));
    results.push((d0, entry));
    while let Some(Reverse((d, v))) = candidates.pop() {
        if results.len() >= ef && d > results.peek().expect("non-empty").0 {
            break;
        }
        for &u in &adjacency[v as usize] {
            if marks[u as usize] == stamp {
                continue;
            }
            marks[u as usize] = stamp;
            let du = Dist(dist(u));
            if results.len() < ef || du < results.peek().expect("non-empty").0 {
                candidates.push(Reverse((du, u)));
                results.push((du, u));
                if results.len() > ef {
                    results.pop();
                }
            }
        }
    }
    results.into_sorted_vec()
}

/// Diversity heuristic: keep a candidate only if it is closer to the new
/// vertex than to every neighbor kept so far, then fill nearest-first.
fn select_neighbors(
    sorted: &[(Dist, u32)],
    m: usize,
    dist: &impl Fn(u32, u32) -> f32,
) -> Vec<(Dist, u32)> {
    let mut kept: Vec<(Dist, u32)> = Vec::with_capacity(m);
    for &(d, c) in sorted {
        if kept.len() >= m {
            break;
        }
        if kept.iter().all(|&(_, k)| d.0 < dist(c, k)) {
            kept.push((d, c));
        }
    }
    if kept.len() < m {
        for &(d, c) in sorted {
            if kept.len() >= m {
                break;
            }
            if !kept.iter().any(|&(_, k)| k == c) {
                kept.push((d, c));
            }
        }
        kept.sort_unstable();
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn line(n: usize) -> Array2<f32> {
        Array2::from_shape_fn((n, 1), |(i, _)| i as f32)
    }

    #[test]
    fn single_vertex_graph() {
        let g = build_nsw(line(1).view(), BuildParams::default()).unwrap();
        assert_eq!(g.num_vertices(), 1);
        assert_eq!(g.entry(), 0);
        assert!(g.neighbors(0).unwrap().is_empty());
        assert!(g.neighbors(1).is_err());
        assert!(build_nsw(Array2::<f32>::zeros((0, 3)).view(), BuildParams::default()).is_err());
    }

    #[test]
    fn evenly_spaced_line_links_coordinate_neighbors() {
        let params = BuildParams {
            max_degree: 2,
            ef_construction: 200,
            seed: 0,
        };
        let g = build_nsw(line(10).view(), params).unwrap();
        for v in 1..9u32 {
            let mut nb = g.neighbors(v).unwrap().to_vec();
            nb.sort_unstable();
            assert_eq!(nb, vec![v - 1, v + 1], "vertex {v}");
        }
        assert!(g.is_connected_from_entry());
    }

    #[test]
    fn symmetrize_adds_reverse_edges() {
        let g = SimilarityGraph::from_adjacency(vec![vec![1], vec![], vec![0, 1]], 2, 0).unwrap();
        let s = g.symmetrize();
        assert_eq!(s, vec![vec![1, 2], vec![0, 2], vec![0, 1]]);
        let sg = SimilarityGraph::from_adjacency(s.clone(), 4, 0).unwrap();
        assert_eq!(sg.symmetrize(), s);
    }

    #[test]
    fn bfs_on_a_path() {
        let g = SimilarityGraph::from_adjacency(vec![vec![1], vec![2], vec![]], 1, 0).unwrap();
        let fwd = g.bfs_hops(0, Direction::Forward).unwrap();
        assert_eq!(fwd.hops, vec![0, 1, 2]);
        let back = g.bfs_hops(2, Direction::Backward).unwrap();
        assert_eq!(back.get(0), Some(2));
        let from2 = g.bfs_hops(2, Direction::Forward).unwrap();
        assert_eq!(from2.get(0), None);
        assert!(g.bfs_hops(3, Direction::Forward).is_err());
    }

    #[test]
    fn invalid_adjacency_is_rejected() {
        assert!(SimilarityGraph::from_adjacency(vec![vec![0]], 2, 0).is_err());
        assert!(SimilarityGraph::from_adjacency(vec![vec![1, 1], vec![]], 2, 0).is_err());
        assert!(SimilarityGraph::from_adjacency(vec![vec![1, 2, 3], vec![], vec![], vec![]], 2, 0).is_err());
        assert!(SimilarityGraph::from_adjacency(vec![vec![]], 2, 1).is_err());
    }

    #[test]
    fn single_vertex_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.bin");
        let g = build_nsw(line(1).view(), BuildParams::default()).unwrap();
        g.save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 4 + 4 * 4 + 4);
        assert_eq!(&bytes[..4], b"LRGR");
        assert_eq!(&bytes[20..], &0u32.to_le_bytes());
        assert_eq!(SimilarityGraph::load(&p).unwrap(), g);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(SimilarityGraph::load(&p), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(SimilarityGraph::load(&p), Err(Error::Format(_))));
        std::fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(SimilarityGraph::load(&p), Err(Error::Format(_))));
    }
}
