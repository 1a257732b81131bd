//! Feature graphs and recursive nearest agglomeration.
//!
//! Features are clustered on a structure graph (grid neighborhoods for
//! images/volumes, or an explicit edge list). Clustering is recursive
//! nearest agglomeration: every round, each cluster picks its most similar
//! graph neighbor, the resulting 1-nearest-neighbor graph is symmetrized,
//! its connected components are merged, and the graph is contracted. Merging
//! whole components at once is what makes the round count logarithmic.
//!
//! Similarity is negative squared Euclidean distance between cluster
//! profiles (the mean of member feature columns over the clustering
//! samples). Ties are broken by the smaller cluster id so the procedure is
//! deterministic; an opt-in flag switches tie-breaking to the supplied
//! random stream instead.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::exec;
use crate::linalg::{DenseMatrix, SparseGrouping};
use crate::rng::RngState;

/// Disjoint cover of `p` features by `k` nonempty clusters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    k: usize,
    assign: Vec<u32>,
    sizes: Vec<u32>,
}

impl Partition {
    /// Builds a partition from per-feature cluster ids, validating that every
    /// cluster in `[0, k)` is nonempty.
    pub fn new(k: usize, assign: Vec<u32>) -> Result<Self> {
        if k == 0 || assign.is_empty() {
            return Err(Error::InvalidArgument("empty partition".into()));
        }
        let mut sizes = vec![0u32; k];
        for (j, &c) in assign.iter().enumerate() {
            if c as usize >= k {
                return Err(Error::InvalidArgument(format!(
                    "feature {j} assigned to cluster {c} >= k={k}"
                )));
            }
            sizes[c as usize] += 1;
        }
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::InvalidArgument(format!("cluster {empty} is empty")));
        }
        Ok(Partition { k, assign, sizes })
    }

    pub fn singletons(p: usize) -> Self {
        Partition {
            k: p,
            assign: (0..p as u32).collect(),
            sizes: vec![1; p],
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn p(&self) -> usize {
        self.assign.len()
    }

    pub fn assign(&self) -> &[u32] {
        &self.assign
    }

    pub fn sizes(&self) -> &[u32] {
        &self.sizes
    }

    pub fn cluster_of(&self, feature: usize) -> usize {
        self.assign[feature] as usize
    }

    /// Member features of cluster `q`, ascending.
    pub fn members(&self, q: usize) -> Vec<usize> {
        self.assign
            .iter()
            .enumerate()
            .filter_map(|(j, &c)| (c as usize == q).then_some(j))
            .collect()
    }

    /// Text serialization: header `p,k`, then one `feature_index,cluster_id`
    /// line per feature.
    pub fn to_writer<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{},{}", self.p(), self.k)?;
        for (j, &c) in self.assign.iter().enumerate() {
            writeln!(w, "{j},{c}")?;
        }
        Ok(())
    }

    pub fn from_reader<R: BufRead>(r: R, origin: &Path) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(origin, "empty partition file"))?
            .map_err(|e| Error::io(origin, e))?;
        let (p, k) = parse_pair(&header)
            .ok_or_else(|| Error::parse(origin, format!("bad header line: {header:?}")))?;
        let mut assign = vec![u32::MAX; p];
        let mut seen = 0usize;
        for line in lines {
            let line = line.map_err(|e| Error::io(origin, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let (j, c) = parse_pair(&line)
                .ok_or_else(|| Error::parse(origin, format!("bad line: {line:?}")))?;
            if j >= p || assign[j] != u32::MAX {
                return Err(Error::parse(
                    origin,
                    format!("bad or duplicate feature index {j}"),
                ));
            }
            assign[j] = c as u32;
            seen += 1;
        }
        if seen != p {
            return Err(Error::parse(
                origin,
                format!("expected {p} features, got {seen}"),
            ));
        }
        let part = Partition::new(k, assign)?;
        Ok(part)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.to_writer(BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(std::io::BufReader::new(file), path)
    }
}

fn parse_pair(line: &str) -> Option<(usize, usize)> {
    let (a, b) = line.trim().split_once(',')?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

/// Undirected adjacency structure over feature indices.
#[derive(Clone, Debug)]
pub struct FeatureGraph {
    p: usize,
    neighbors: Vec<Vec<u32>>,
}

impl FeatureGraph {
    /// Graph from an explicit undirected edge list. Self-loops are rejected,
    /// duplicates collapse.
    pub fn from_edges(p: usize, edges: &[(u32, u32)]) -> Result<Self> {
        if p == 0 {
            return Err(Error::InvalidArgument(
                "graph must have at least one node".into(),
            ));
        }
        let mut neighbors = vec![Vec::new(); p];
        for &(a, b) in edges {
            if a == b {
                return Err(Error::InvalidArgument(format!("self-loop at node {a}")));
            }
            if a as usize >= p || b as usize >= p {
                return Err(Error::InvalidArgument(format!(
                    "edge ({a},{b}) out of range p={p}"
                )));
            }
            neighbors[a as usize].push(b);
            neighbors[b as usize].push(a);
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        Ok(FeatureGraph { p, neighbors })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn neighbors(&self, node: usize) -> &[u32] {
        &self.neighbors[node]
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Number of connected components (BFS).
    pub fn component_count(&self) -> usize {
        let mut seen = vec![false; self.p];
        let mut queue = Vec::new();
        let mut count = 0;
        for start in 0..self.p {
            if seen[start] {
                continue;
            }
            count += 1;
            seen[start] = true;
            queue.push(start);
            while let Some(node) = queue.pop() {
                for &nb in &self.neighbors[node] {
                    if !seen[nb as usize] {
                        seen[nb as usize] = true;
                        queue.push(nb as usize);
                    }
                }
            }
        }
        count
    }
}

/// Grid adjacency: 2-neighborhood in 1D, 4-neighborhood in 2D,
/// 6-neighborhood in 3D. `dims` is `[len]`, `[h, w]` or `[d, h, w]`.
pub fn grid_adjacency(dims: &[usize]) -> Result<FeatureGraph> {
    if dims.is_empty() || dims.len() > 3 {
        return Err(Error::InvalidArgument(format!(
            "grid rank must be 1..=3, got {}",
            dims.len()
        )));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument(
            "grid dimensions must be nonzero".into(),
        ));
    }
    let p: usize = dims.iter().product();
    let mut edges = Vec::new();
    // Pad to 3D for uniform traversal.
    let (d, h, w) = match dims {
        [n] => (1, 1, *n),
        [h, w] => (1, *h, *w),
        [d, h, w] => (*d, *h, *w),
        _ => unreachable!(),
    };
    let idx = |z: usize, y: usize, x: usize| -> u32 { ((z * h + y) * w + x) as u32 };
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w {
                    edges.push((idx(z, y, x), idx(z, y, x + 1)));
                }
                if y + 1 < h {
                    edges.push((idx(z, y, x), idx(z, y + 1, x)));
                }
                if z + 1 < d {
                    edges.push((idx(z, y, x), idx(z + 1, y, x)));
                }
            }
        }
    }
    debug_assert_eq!(
        edges.len(),
        d * h * (w - 1) + d * (h - 1) * w + (d - 1) * h * w
    );
    FeatureGraph::from_edges(p, &edges)
}

/// Default cluster count: 20% of the feature count, clamped to `[1, p]`.
pub fn default_k(p: usize) -> usize {
    ((0.2 * p as f64).round() as usize).clamp(1, p)
}

/// Options for [`rena_cluster_with`].
#[derive(Clone, Copy, Debug, Default)]
pub struct RenaOptions {
    /// Break similarity ties with the random stream instead of by cluster id.
    pub random_ties: bool,
}

/// Shorthand for [`rena_cluster_with`] with default options (deterministic
/// id-based tie-breaking; `rng` is not consumed).
pub fn rena_cluster(
    samples: &DenseMatrix,
    graph: &FeatureGraph,
    k: usize,
    rng: &RngState,
) -> Result<Partition> {
    rena_cluster_with(samples, graph, k, rng, RenaOptions::default())
}

/// Recursive nearest agglomeration down to exactly `k` clusters.
///
/// `samples` holds the clustering subsample, one row per sample and one
/// column per feature. If a round would overshoot below `k`, that round's
/// merges are replayed one at a time in descending similarity order and the
/// agglomeration stops at exactly `k`.
pub fn rena_cluster_with(
    samples: &DenseMatrix,
    graph: &FeatureGraph,
    k: usize,
    rng: &RngState,
    options: RenaOptions,
) -> Result<Partition> {
    let p = graph.p();
    let r = samples.rows();
    if samples.cols() != p {
        return Err(Error::DimensionMismatch(format!(
            "samples have {} columns, graph has {p} nodes",
            samples.cols()
        )));
    }
    if r == 0 {
        return Err(Error::InvalidArgument(
            "need at least one clustering sample".into(),
        ));
    }
    if k == 0 || k > p {
        return Err(Error::InvalidArgument(format!(
            "k={k} out of range [1, {p}]"
        )));
    }
    let components = graph.component_count();
    if k < components {
        return Err(Error::InvalidArgument(format!(
            "k={k} below the graph's {components} connected components"
        )));
    }

    // Active-cluster state. `assign` maps features to current cluster ids,
    // relabeled densely every round.
    let mut assign: Vec<u32> = (0..p as u32).collect();
    let mut sums: Vec<Vec<f64>> = (0..p)
        .map(|j| (0..r).map(|t| samples[(t, j)]).collect())
        .collect();
    let mut counts: Vec<u32> = vec![1; p];
    let mut adjacency: Vec<Vec<u32>> = (0..p).map(|j| graph.neighbors(j).to_vec()).collect();
    let mut round = 0u64;

    while counts.len() > k {
        let n_clusters = counts.len();
        let means: Vec<Vec<f64>> = (0..n_clusters)
            .map(|c| {
                let inv = 1.0 / counts[c] as f64;
                sums[c].iter().map(|s| s * inv).collect()
            })
            .collect();

        // 1-nearest-neighbor per cluster over the contracted graph.
        let nn: Vec<Option<(u32, f64)>> = exec::map_indexed(n_clusters, |c| {
            let mine = &means[c];
            let mut best: Option<(u32, f64)> = None;
            let mut tied: Vec<u32> = Vec::new();
            for &nb in &adjacency[c] {
                let theirs = &means[nb as usize];
                let mut dist = 0.0;
                for t in 0..r {
                    let diff = mine[t] - theirs[t];
                    dist += diff * diff;
                }
                match best {
                    None => {
                        best = Some((nb, dist));
                        tied.clear();
                        tied.push(nb);
                    }
                    Some((_, bd)) if dist < bd => {
                        best = Some((nb, dist));
                        tied.clear();
                        tied.push(nb);
                    }
                    Some((bn, bd)) if dist == bd => {
                        tied.push(nb);
                        // Neighbors are visited in ascending id order, so the
                        // incumbent already carries the smaller id.
                        let _ = bn;
                    }
                    _ => {}
                }
            }
            if options.random_ties && tied.len() > 1 {
                // Position-independent stream per (round, cluster) so the
                // choice does not depend on evaluation order.
                let mut pick_rng = rng.derive(round.wrapping_mul(1 << 32) ^ c as u64);
                let choice = tied[pick_rng.index(tied.len())];
                return best.map(|(_, d)| (choice, d));
            }
            best
        });

        // Union the 1-NN edges; a plain union-find over current cluster ids.
        let mut parent: Vec<u32> = (0..n_clusters as u32).collect();
        fn find(parent: &mut [u32], mut x: u32) -> u32 {
            while parent[x as usize] != x {
                parent[x as usize] = parent[parent[x as usize] as usize];
                x = parent[x as usize];
            }
            x
        }
        let mut merged = n_clusters;
        let mut edges: Vec<(f64, u32, u32)> = Vec::with_capacity(n_clusters);
        for c in 0..n_clusters as u32 {
            if let Some((nb, dist)) = nn[c as usize] {
                let (a, b) = if c < nb { (c, nb) } else { (nb, c) };
                edges.push((dist, a, b));
            }
        }
        // Trial union to learn where this round would land.
        {
            let mut trial = parent.clone();
            let mut count = n_clusters;
            for &(_, a, b) in &edges {
                let (ra, rb) = (find(&mut trial, a), find(&mut trial, b));
                if ra != rb {
                    trial[ra.max(rb) as usize] = ra.min(rb);
                    count -= 1;
                }
            }
            if count >= k {
                parent = trial;
                merged = count;
            } else {
                // Exact-k landing: replay merges in descending similarity
                // (ascending distance) order and stop at k.
                edges.sort_by(|x, y| {
                    x.0.partial_cmp(&y.0)
                        .unwrap()
                        .then(x.1.cmp(&y.1))
                        .then(x.2.cmp(&y.2))
                });
                for &(_, a, b) in &edges {
                    if merged == k {
                        break;
                    }
                    let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                    if ra != rb {
                        parent[ra.max(rb) as usize] = ra.min(rb);
                        merged -= 1;
                    }
                }
            }
        }
        if merged == n_clusters {
            // No mergeable pair left; cannot happen when k >= components.
            return Err(Error::Numerical(
                "agglomeration stalled above target k".into(),
            ));
        }

        // Relabel components densely, ordered by their smallest member id.
        let mut label = vec![u32::MAX; n_clusters];
        let mut next = 0u32;
        for c in 0..n_clusters as u32 {
            let root = find(&mut parent, c);
            if label[root as usize] == u32::MAX {
                label[root as usize] = next;
                next += 1;
            }
            label[c as usize] = label[root as usize];
        }
        let new_count = next as usize;
        debug_assert_eq!(new_count, merged);

        // Contract: merge profile sums and counts, rebuild adjacency.
        let mut new_sums = vec![vec![0.0; r]; new_count];
        let mut new_counts = vec![0u32; new_count];
        for c in 0..n_clusters {
            let l = label[c] as usize;
            for t in 0..r {
                new_sums[l][t] += sums[c][t];
            }
            new_counts[l] += counts[c];
        }
        let mut new_adj: Vec<Vec<u32>> = vec![Vec::new(); new_count];
        for c in 0..n_clusters {
            let lc = label[c];
            for &nb in &adjacency[c] {
                let ln = label[nb as usize];
                if ln != lc {
                    new_adj[lc as usize].push(ln);
                }
            }
        }
        for list in &mut new_adj {
            list.sort_unstable();
            list.dedup();
        }
        for a in assign.iter_mut() {
            *a = label[*a as usize];
        }
        sums = new_sums;
        counts = new_counts;
        adjacency = new_adj;
        round += 1;
    }

    Partition::new(counts.len(), assign)
}

/// Grouping matrix of a partition: column `j` carries
/// `1/sqrt(|cluster of j|)` in the row of its cluster.
pub fn partition_to_phi(part: &Partition) -> SparseGrouping {
    let values: Vec<f64> = part
        .assign()
        .iter()
        .map(|&c| 1.0 / (part.sizes()[c as usize] as f64).sqrt())
        .collect();
    SparseGrouping::new(part.k(), part.p(), part.assign().to_vec(), values)
        .expect("valid partition always yields a valid grouping")
}
