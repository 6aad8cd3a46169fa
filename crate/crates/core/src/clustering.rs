//! Spectral clustering of a network into inference clusters: connected
//! components, normalized graph Laplacian of the largest component, top-L
//! eigenvectors, k-means on the embedding rows. Kept components other than
//! the largest become singleton clusters, so the partition has `L + L'`
//! clusters in total.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::seeding;

/// Components of at most this size are discarded before clustering.
const COMPONENT_SIZE_FLOOR: usize = 5;
const KMEANS_MAX_ITER: usize = 100;
const KMEANS_REL_TOL: f64 = 1e-8;
const KMEANS_RESTARTS: usize = 50;

/// Simple undirected graph with 0/1 adjacency, no self-loops.
#[derive(Debug, Clone)]
pub struct Network {
    n: usize,
    adjacency: Vec<Vec<u32>>,
}

impl Network {
    /// Builds a network from an undirected edge list; duplicate edges are
    /// collapsed, self-loops rejected.
    pub fn new(n: usize, edges: &[(u32, u32)]) -> Result<Self> {
        let mut adjacency = vec![Vec::new(); n];
        for &(a, b) in edges {
            let (a, b) = (a as usize, b as usize);
            if a == b {
                return Err(Error::InvalidConfig(format!("self-loop at node {a}")));
            }
            if a >= n || b >= n {
                return Err(Error::InvalidConfig(format!(
                    "edge ({a},{b}) references a node beyond n={n}"
                )));
            }
            adjacency[a].push(b as u32);
            adjacency[b].push(a as u32);
        }
        for list in &mut adjacency {
            list.sort_unstable();
            list.dedup();
        }
        Ok(Self { n, adjacency })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node].len()
    }

    pub fn neighbors(&self, node: usize) -> &[u32] {
        &self.adjacency[node]
    }

    pub fn edges(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        for (a, list) in self.adjacency.iter().enumerate() {
            for &b in list {
                if (a as u32) < b {
                    out.push((a as u32, b));
                }
            }
        }
        out
    }
}

/// Maximal connected components with more than five nodes, sorted ascending
/// by size (ties by smallest contained node, for determinism).
pub fn connected_components(net: &Network) -> Vec<Vec<usize>> {
    let n = net.n();
    let mut seen = vec![false; n];
    let mut components = Vec::new();
    let mut queue = std::collections::VecDeque::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(u) = queue.pop_front() {
            comp.push(u);
            for &v in net.neighbors(u) {
                let v = v as usize;
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        comp.sort_unstable();
        if comp.len() > COMPONENT_SIZE_FLOOR {
            components.push(comp);
        }
    }
    components.sort_by_key(|c| (c.len(), c[0]));
    components
}

/// Normalized Laplacian `I - D^{-1/2} A D^{-1/2}` of the subgraph induced by
/// `nodes`. Every node must have positive degree within the subgraph.
pub fn graph_laplacian(net: &Network, nodes: &[usize]) -> Result<DMatrix<f64>> {
    let m = nodes.len();
    let index: std::collections::HashMap<usize, usize> =
        nodes.iter().enumerate().map(|(k, &v)| (v, k)).collect();
    let mut adj = DMatrix::zeros(m, m);
    for (k, &u) in nodes.iter().enumerate() {
        for &v in net.neighbors(u) {
            if let Some(&l) = index.get(&(v as usize)) {
                adj[(k, l)] = 1.0;
            }
        }
    }
    let degrees: Vec<f64> = (0..m).map(|k| adj.row(k).sum()).collect();
    if let Some(k) = degrees.iter().position(|&d| d <= 0.0) {
        return Err(Error::IsolatedNode { node: nodes[k] });
    }
    let mut lap = DMatrix::identity(m, m);
    for a in 0..m {
        for b in 0..m {
            if adj[(a, b)] != 0.0 {
                lap[(a, b)] -= 1.0 / (degrees[a] * degrees[b]).sqrt();
            }
        }
    }
    Ok(lap)
}

/// Which end of the Laplacian spectrum supplies the embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EigenOrder {
    /// Eigenvectors of the largest Laplacian eigenvalues (the literal
    /// procedure).
    #[default]
    Largest,
    /// Eigenvectors of the smallest eigenvalues (the usual spectral
    /// clustering convention; recovers planted blocks).
    Smallest,
}

impl EigenOrder {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "largest" => Ok(Self::Largest),
            "smallest" => Ok(Self::Smallest),
            other => Err(Error::InvalidConfig(format!(
                "unknown eigen order `{other}` (expected largest | smallest)"
            ))),
        }
    }
}

/// Node-to-cluster assignment. Nodes of dropped components carry no label.
#[derive(Debug, Clone)]
pub struct Partition {
    pub labels: Vec<Option<u32>>,
    pub n_clusters: usize,
    pub sizes: Vec<usize>,
}

impl Partition {
    /// Cluster labels as dataset-ready contiguous ids for the labeled nodes,
    /// in node order.
    pub fn labeled_nodes(&self) -> Vec<(usize, u32)> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.map(|c| (i, c)))
            .collect()
    }
}

/// Spectral partition: k-means with `k = L` on the chosen-eigenvector
/// embedding of the largest kept component; every other kept component
/// becomes one additional cluster.
pub fn spectral_partition(
    net: &Network,
    l: usize,
    seed: u64,
    order: EigenOrder,
) -> Result<Partition> {
    if l == 0 {
        return Err(Error::InvalidConfig("L must be positive".into()));
    }
    let components = connected_components(net);
    let Some(largest) = components.last() else {
        return Err(Error::InvalidConfig(
            "no component larger than five nodes".into(),
        ));
    };
    if largest.len() <= l {
        return Err(Error::InvalidConfig(format!(
            "largest component has {} nodes, need more than L={l}",
            largest.len()
        )));
    }

    let lap = graph_laplacian(net, largest)?;
    let m = largest.len();
    let eig = nalgebra::SymmetricEigen::new(lap);
    let mut idx: Vec<usize> = (0..m).collect();
    match order {
        EigenOrder::Largest => idx.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .partial_cmp(&eig.eigenvalues[a])
                .unwrap()
                .then(a.cmp(&b))
        }),
        EigenOrder::Smallest => idx.sort_by(|&a, &b| {
            eig.eigenvalues[a]
                .partial_cmp(&eig.eigenvalues[b])
                .unwrap()
                .then(a.cmp(&b))
        }),
    }
    let mut embedding = vec![vec![0.0; l]; m];
    for (c, &col) in idx.iter().take(l).enumerate() {
        for r in 0..m {
            embedding[r][c] = eig.eigenvectors[(r, col)];
        }
    }

    let assignment = kmeans(&embedding, l, seed);

    let mut labels = vec![None; net.n()];
    for (row, &node) in largest.iter().enumerate() {
        labels[node] = Some(assignment[row]);
    }
    let mut next = l as u32;
    for comp in components.iter().rev().skip(1) {
        for &node in comp {
            labels[node] = Some(next);
        }
        next += 1;
    }
    let n_clusters = next as usize;
    let mut sizes = vec![0usize; n_clusters];
    for l in labels.iter().flatten() {
        sizes[*l as usize] += 1;
    }
    Ok(Partition {
        labels,
        n_clusters,
        sizes,
    })
}

/// Seeded k-means with k-means++ initialization, a fixed number of restarts,
/// and best-inertia selection (ties by restart index).
fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<u32> {
    let mut best: Option<(f64, Vec<u32>)> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = seeding::stream(seed, "kmeans-restart", restart as u64);
        let (inertia, labels) = kmeans_once(points, k, &mut rng);
        let better = match &best {
            None => true,
            Some((bi, _)) => inertia < *bi,
        };
        if better {
            best = Some((inertia, labels));
        }
    }
    best.expect("at least one restart").1
}

fn kmeans_once(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> (f64, Vec<u32>) {
    let n = points.len();
    let d = points[0].len();

    // k-means++ seeding
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(points[rng.random_range(0..n)].clone());
    let mut dist2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist2.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in dist2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centers.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            dist2[i] = dist2[i].min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }

    let mut labels = vec![0u32; n];
    let mut inertia = f64::INFINITY;
    for _ in 0..KMEANS_MAX_ITER {
        // assign
        let mut new_inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let mut best = (f64::INFINITY, 0u32);
            for (c, center) in centers.iter().enumerate() {
                let d2 = sq_dist(p, center);
                if d2 < best.0 {
                    best = (d2, c as u32);
                }
            }
            labels[i] = best.1;
            new_inertia += best.0;
        }
        // update
        let mut counts = vec![0usize; k];
        let mut sums = vec![vec![0.0; d]; k];
        for (i, p) in points.iter().enumerate() {
            let c = labels[i] as usize;
            counts[c] += 1;
            for (s, &v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // re-seed an empty cluster at the point farthest from its
                // center, deterministically
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(&points[a], &centers[labels[a] as usize])
                            .partial_cmp(&sq_dist(&points[b], &centers[labels[b] as usize]))
                            .unwrap()
                            .then(a.cmp(&b))
                    })
                    .unwrap();
                centers[c] = points[far].clone();
            } else {
                for (j, s) in sums[c].iter().enumerate() {
                    centers[c][j] = s / counts[c] as f64;
                }
            }
        }
        debug_assert!(new_inertia <= inertia * (1.0 + 1e-12) || !inertia.is_finite());
        if inertia.is_finite() && (inertia - new_inertia).abs() <= KMEANS_REL_TOL * inertia.max(1e-300) {
            inertia = new_inertia;
            break;
        }
        inertia = new_inertia;
    }
    (inertia, labels)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
