//! Optimal-routing supervision.
//!
//! For each training query we keep the hop distance to its true nearest
//! neighbor `v*` for every vertex lying on some entry → `v*` path that is at
//! most `m` hops longer than the shortest one. `ref_set` then answers "which
//! heap members are closest to `v*` in hops".

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::data::GroundTruth;
use crate::error::{Error, Result};
use crate::graph::{bfs_over, SimilarityGraph, WordReader, UNREACHABLE};

pub const CACHE_MAGIC: [u8; 4] = *b"LRHC";
pub const CACHE_VERSION: u32 = 1;
pub const DEFAULT_SLACK: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleConfig {
    /// Hop slack over the optimal entry → v* path length.
    pub m: u32,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { m: DEFAULT_SLACK }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HopCacheEntry {
    pub query_id: u32,
    pub v_star: u32,
    /// `(vertex, hops to v*)`, sorted by vertex id.
    pub hops: Vec<(u32, u32)>,
}

impl HopCacheEntry {
    pub fn hops_to_target(&self, v: u32) -> Option<u32> {
        self.hops
            .binary_search_by_key(&v, |&(u, _)| u)
            .ok()
            .map(|i| self.hops[i].1)
    }

    pub fn len(&self) -> usize {
        self.hops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hops.is_empty()
    }
}

/// Graph-wide data shared by every per-query computation: hop distances from
/// the entry vertex and the reversed adjacency.
#[derive(Debug, Clone)]
pub struct OracleContext {
    pub entry: u32,
    pub from_entry: Vec<u32>,
    pub reversed: Vec<Vec<u32>>,
}

impl OracleContext {
    pub fn new(graph: &SimilarityGraph) -> Self {
        Self {
            entry: graph.entry(),
            from_entry: bfs_over(graph.adjacency(), graph.entry()),
            reversed: graph.reversed(),
        }
    }
}

pub fn precompute_entry(
    ctx: &OracleContext,
    query_id: u32,
    v_star: u32,
    m: u32,
) -> Result<HopCacheEntry> {
    let n = ctx.from_entry.len();
    if v_star as usize >= n {
        return Err(Error::OutOfRange { id: v_star as usize, len: n });
    }
    let optimal = ctx.from_entry[v_star as usize];
    if optimal == UNREACHABLE {
        return Err(Error::Unreachable {
            v_star,
            entry: ctx.entry,
        });
    }
    let to_target = bfs_over(&ctx.reversed, v_star);
    let limit = optimal as u64 + m as u64;
    let hops = ctx
        .from_entry
        .iter()
        .zip(&to_target)
        .enumerate()
        .filter(|&(_, (&ds, &dt))| {
            ds != UNREACHABLE && dt != UNREACHABLE && ds as u64 + dt as u64 <= limit
        })
        .map(|(v, (_, &dt))| (v as u32, dt))
        .collect();
    Ok(HopCacheEntry {
        query_id,
        v_star,
        hops,
    })
}

/// Heap members with the minimal cached hop distance to `v*`. Uncached
/// vertices count as infinitely far; an all-uncached heap yields `[]`.
pub fn ref_set(entry: &HopCacheEntry, heap: &[u32]) -> Vec<u32> {
    let mut best = u32::MAX;
    let mut out = Vec::new();
    for &v in heap {
        if let Some(h) = entry.hops_to_target(v) {
            if h < best {
                best = h;
                out.clear();
                out.push(v);
            } else if h == best {
                out.push(v);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HopCache {
    pub m: u32,
    /// Sorted by query id.
    pub entries: Vec<HopCacheEntry>,
}

impl HopCache {
    pub fn get(&self, query_id: u32) -> Option<&HopCacheEntry> {
        self.entries
            .binary_search_by_key(&query_id, |e| e.query_id)
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn query_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|e| e.query_id)
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(File::create(path.as_ref())?);
        w.write_all(&CACHE_MAGIC)?;
        for x in [CACHE_VERSION, self.entries.len() as u32, self.m] {
            w.write_all(&x.to_le_bytes())?;
        }
        for e in &self.entries {
            for x in [e.query_id, e.v_star, e.hops.len() as u32] {
                w.write_all(&x.to_le_bytes())?;
            }
            for &(v, h) in &e.hops {
                w.write_all(&v.to_le_bytes())?;
                w.write_all(&h.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path.as_ref())?).read_to_end(&mut bytes)?;
        if bytes.len() < 4 || bytes[..4] != CACHE_MAGIC {
            return Err(Error::format("bad hop cache magic"));
        }
        let mut r = WordReader::new(&bytes);
        r.pos = 4;
        let version = r.u32()?;
        if version != CACHE_VERSION {
            return Err(Error::format(format!("unsupported hop cache version {version}")));
        }
        let count = r.u32()? as usize;
        let m = r.u32()?;
        let mut entries = Vec::with_capacity(count.min(bytes.len() / 12));
        for _ in 0..count {
            let query_id = r.u32()?;
            let v_star = r.u32()?;
            let len = r.u32()? as usize;
            let mut hops = Vec::with_capacity(len.min(bytes.len() / 8));
            for _ in 0..len {
                hops.push((r.u32()?, r.u32()?));
            }
            if hops.windows(2).any(|w| w[0].0 >= w[1].0) {
                return Err(Error::format(format!("unsorted hop list for query {query_id}")));
            }
            entries.push(HopCacheEntry {
                query_id,
                v_star,
                hops,
            });
        }
        if !r.at_end() {
            return Err(Error::format("trailing bytes after hop cache"));
        }
        if entries.windows(2).any(|w| w[0].query_id >= w[1].query_id) {
            return Err(Error::format("hop cache entries not sorted by query id"));
        }
        Ok(Self { m, entries })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrecomputeSummary {
    pub cache: HopCache,
    /// Queries whose nearest neighbor is unreachable from the entry vertex.
    pub excluded: Vec<u32>,
}

/// Builds one cache entry per training query whose `v*` is reachable.
pub fn precompute_cache(
    graph: &SimilarityGraph,
    ground_truth: &GroundTruth,
    m: u32,
    workers: usize,
) -> Result<PrecomputeSummary> {
    let ctx = OracleContext::new(graph);
    let run = || -> Vec<(u32, Result<HopCacheEntry>)> {
        (0..ground_truth.num_queries() as u32)
            .into_par_iter()
            .map(|q| (q, precompute_entry(&ctx, q, ground_truth.nearest(q as usize), m)))
            .collect()
    };
    let results = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::argument(format!("thread pool: {e}")))?
        .install(run);

    let mut entries = Vec::with_capacity(results.len());
    let mut excluded = Vec::new();
    for (q, r) in results {
        match r {
            Ok(e) => entries.push(e),
            Err(Error::Unreachable { .. }) => excluded.push(q),
            Err(e) => return Err(e),
        }
    }
    if !excluded.is_empty() {
        log::warn!("{} training queries excluded: nearest neighbor unreachable", excluded.len());
    }
    Ok(PrecomputeSummary {
        cache: HopCache { m, entries },
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path4() -> SimilarityGraph {
        SimilarityGraph::from_adjacency(vec![vec![1], vec![2], vec![3], vec![]], 1, 0).unwrap()
    }

    #[test]
    fn entry_equal_to_target() {
        let ctx = OracleContext::new(&path4());
        let e = precompute_entry(&ctx, 0, 0, 0).unwrap();
        assert_eq!(e.hops, vec![(0, 0)]);
    }

    #[test]
    fn path_graph_cache_and_ref() {
        let ctx = OracleContext::new(&path4());
        let e = precompute_entry(&ctx, 7, 3, 0).unwrap();
        assert_eq!(e.hops, vec![(0, 3), (1, 2), (2, 1), (3, 0)]);
        assert_eq!(ref_set(&e, &[0, 1]), vec![1]);
        assert_eq!(ref_set(&e, &[2, 3, 0]), vec![3]);

        let short = HopCacheEntry {
            query_id: 0,
            v_star: 3,
            hops: vec![(3, 0)],
        };
        assert!(ref_set(&short, &[0, 1]).is_empty());
        assert_eq!(OracleConfig::default().m, 5);
    }

    #[test]
    fn ties_are_all_returned() {
        let e = HopCacheEntry {
            query_id: 0,
            v_star: 9,
            hops: vec![(1, 2), (4, 2), (5, 3)],
        };
        assert_eq!(ref_set(&e, &[5, 4, 1]), vec![4, 1]);
    }

    #[test]
    fn unreachable_target_is_reported() {
        let g = SimilarityGraph::from_adjacency(vec![vec![1], vec![], vec![0]], 1, 0).unwrap();
        let ctx = OracleContext::new(&g);
        assert!(matches!(precompute_entry(&ctx, 0, 2, 5), Err(Error::Unreachable { .. })));
    }

    #[test]
    fn empty_cache_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        let c = HopCache { m: 5, entries: vec![] };
        c.save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 16);
        assert_eq!(HopCache::load(&p).unwrap(), c);
        let mut bad = bytes.clone();
        bad[1] = 0;
        std::fs::write(&p, bad).unwrap();
        assert!(matches!(HopCache::load(&p), Err(Error::Format(_))));
        std::fs::write(&p, &bytes[..10]).unwrap();
        assert!(matches!(HopCache::load(&p), Err(Error::Format(_))));
    }
}
