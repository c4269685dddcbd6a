//! HDBSCAN: core distances, the mutual-reachability MST, the condensed
//! single-linkage tree and excess-of-mass cluster selection.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::{Algorithm, ClusterModel, ClusterParams, ClusterSummary, DensityReference, NOISE};
use crate::error::{Error, Result};
use crate::linalg::{euclidean, knn_exclusive, knn_query};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HdbscanParams {
    pub min_cluster_size: usize,
    /// Neighbour rank used for core distances; `None` means `min_cluster_size`.
    pub min_samples: Option<usize>,
}

impl Default for HdbscanParams {
    fn default() -> Self {
        Self {
            min_cluster_size: 25,
            min_samples: None,
        }
    }
}

impl HdbscanParams {
    pub fn min_samples(&self) -> usize {
        self.min_samples.unwrap_or(self.min_cluster_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MstEdge {
    pub a: usize,
    pub b: usize,
    /// Mutual-reachability distance.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondensedNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub lambda_birth: f64,
    pub lambda_death: f64,
    /// Number of points in the cluster when it is born.
    pub size: usize,
    /// Points that leave this cluster directly, with the density at which
    /// they fall out.
    pub points: Vec<(usize, f64)>,
    pub children: Vec<usize>,
    pub stability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CondensedTree {
    pub nodes: Vec<CondensedNode>,
    /// Ids of the selected clusters, ascending; label `i` is `selected[i]`.
    pub selected: Vec<usize>,
}

impl CondensedTree {
    pub fn is_ancestor(&self, ancestor: usize, mut node: usize) -> bool {
        while let Some(p) = self.nodes[node].parent {
            if p == ancestor {
                return true;
            }
            node = p;
        }
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hierarchy {
    pub labels: Vec<i32>,
    pub clusters: Vec<ClusterSummary>,
    pub tree: CondensedTree,
}

fn lambda_of(weight: f64) -> f64 {
    1.0 / weight.max(f64::EPSILON)
}

/// Distance from each point to its `min_samples`-th nearest other point.
pub fn core_distances(x: ArrayView2<f64>, min_samples: usize) -> Result<Vec<f64>> {
    let n = x.nrows();
    if min_samples == 0 || min_samples >= n {
        return Err(Error::invalid(format!("core distances need 1 <= min_samples < n (min_samples={min_samples}, n={n})")));
    }
    Ok(knn_exclusive(x, min_samples)
        .into_iter()
        .map(|row| row[min_samples - 1].1)
        .collect())
}

/// Prim's algorithm over the complete mutual-reachability graph.
pub fn build_mst(x: ArrayView2<f64>, core: &[f64]) -> Vec<MstEdge> {
    let n = x.nrows();
    if n < 2 {
        return Vec::new();
    }
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut from = vec![0usize; n];
    let mut edges = Vec::with_capacity(n - 1);
    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        let mut next = usize::MAX;
        let mut next_w = f64::INFINITY;
        for j in 0..n {
            if in_tree[j] {
                continue;
            }
            let d = euclidean(x.row(current), x.row(j)).max(core[current]).max(core[j]);
            if d < best[j] {
                best[j] = d;
                from[j] = current;
            }
            if best[j] < next_w {
                next_w = best[j];
                next = j;
            }
        }
        in_tree[next] = true;
        edges.push(MstEdge {
            a: from[next],
            b: next,
            weight: next_w,
        });
        current = next;
    }
    edges
}

struct LinkNode {
    left: usize,
    right: usize,
    weight: f64,
    size: usize,
}

struct Dendrogram {
    n: usize,
    internal: Vec<LinkNode>,
}

impl Dendrogram {
    fn size(&self, node: usize) -> usize {
        if node < self.n {
            1
        } else {
            self.internal[node - self.n].size
        }
    }

    fn leaves(&self, node: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(cur) = stack.pop() {
            if cur < self.n {
                out.push(cur);
            } else {
                let l = &self.internal[cur - self.n];
                stack.push(l.right);
                stack.push(l.left);
            }
        }
        out
    }
}

fn single_linkage(mst: &[MstEdge], n: usize) -> Dendrogram {
    let mut sorted: Vec<&MstEdge> = mst.iter().collect();
    sorted.sort_by(|a, b| a.weight.total_cmp(&b.weight));

    let mut parent: Vec<usize> = (0..2 * n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut internal = Vec::with_capacity(n.saturating_sub(1));
    for e in sorted {
        let ra = find(&mut parent, e.a);
        let rb = find(&mut parent, e.b);
        let id = n + internal.len();
        let size = |r: usize, internal: &Vec<LinkNode>| if r < n { 1 } else { internal[r - n].size };
        let node = LinkNode {
            left: ra,
            right: rb,
            weight: e.weight,
            size: size(ra, &internal) + size(rb, &internal),
        };
        internal.push(node);
        parent[ra] = id;
        parent[rb] = id;
    }
    Dendrogram { n, internal }
}

/// Builds the condensed tree from the MST and selects clusters by excess of
/// mass. The root is only a candidate when it never splits into two
/// clusters of at least `min_cluster_size` points.
pub fn condense_and_extract(mst: &[MstEdge], min_cluster_size: usize) -> Result<Hierarchy> {
    if min_cluster_size < 2 {
        return Err(Error::invalid("min_cluster_size must be at least 2"));
    }
    let n = mst.len() + 1;
    let dendro = single_linkage(mst, n);
    let root_weight = mst.iter().map(|e| e.weight).fold(0.0_f64, f64::max);
    let mut nodes = vec![CondensedNode {
        id: 0,
        parent: None,
        lambda_birth: if mst.is_empty() { 0.0 } else { lambda_of(root_weight) },
        lambda_death: 0.0,
        size: n,
        points: Vec::new(),
        children: Vec::new(),
        stability: 0.0,
    }];

    if n == 1 {
        nodes[0].points.push((0, f64::INFINITY));
    } else {
        let mut stack = vec![(2 * n - 2, 0usize)];
        while let Some((node, cluster)) = stack.pop() {
            if node < n {
                // only reachable when a cluster bottoms out at a single point
                let lam = nodes[cluster].lambda_death.max(nodes[cluster].lambda_birth);
                nodes[cluster].points.push((node, lam));
                continue;
            }
            let link = &dendro.internal[node - n];
            let lam = lambda_of(link.weight);
            let (left, right) = (link.left, link.right);
            let (ls, rs) = (dendro.size(left), dendro.size(right));
            match (ls >= min_cluster_size, rs >= min_cluster_size) {
                (true, true) => {
                    for (child_node, size) in [(left, ls), (right, rs)] {
                        let id = nodes.len();
                        nodes.push(CondensedNode {
                            id,
                            parent: Some(cluster),
                            lambda_birth: lam,
                            lambda_death: lam,
                            size,
                            points: Vec::new(),
                            children: Vec::new(),
                            stability: 0.0,
                        });
                        nodes[cluster].children.push(id);
                        stack.push((child_node, id));
                    }
                }
                (left_big, right_big) => {
                    for (side, big) in [(left, left_big), (right, right_big)] {
                        if big {
                            stack.push((side, cluster));
                        } else {
                            for p in dendro.leaves(side) {
                                nodes[cluster].points.push((p, lam));
                            }
                        }
                    }
                }
            }
        }
    }

    // deaths and stabilities
    for i in 0..nodes.len() {
        let birth = nodes[i].lambda_birth;
        let mut death = birth;
        let mut stability = 0.0;
        for &(_, lam) in &nodes[i].points {
            death = death.max(lam);
            stability += lam - birth;
        }
        for &c in &nodes[i].children {
            let child = &nodes[c];
            death = death.max(child.lambda_birth);
            stability += child.size as f64 * (child.lambda_birth - birth);
        }
        nodes[i].lambda_death = death;
        nodes[i].stability = stability;
        nodes[i].points.sort_by_key(|p| p.0);
    }

    let selected = select_eom(&nodes, min_cluster_size);
    let tree = CondensedTree { nodes, selected };
    let (labels, clusters) = label_points(&tree, n);
    Ok(Hierarchy { labels, clusters, tree })
}

fn select_eom(nodes: &[CondensedNode], min_cluster_size: usize) -> Vec<usize> {
    let root_has_children = !nodes[0].children.is_empty();
    if !root_has_children {
        return if nodes[0].size >= min_cluster_size { vec![0] } else { Vec::new() };
    }
    let mut selected = vec![false; nodes.len()];
    let mut best = vec![0.0; nodes.len()];
    // children always have larger ids than their parent
    for id in (1..nodes.len()).rev() {
        let node = &nodes[id];
        if node.children.is_empty() {
            selected[id] = true;
            best[id] = node.stability;
            continue;
        }
        let below: f64 = node.children.iter().map(|&c| best[c]).sum();
        if node.stability >= below {
            selected[id] = true;
            best[id] = node.stability;
            let mut stack = node.children.clone();
            while let Some(c) = stack.pop() {
                selected[c] = false;
                stack.extend(nodes[c].children.iter().copied());
            }
        } else {
            best[id] = below;
        }
    }
    (1..nodes.len()).filter(|&i| selected[i]).collect()
}

fn label_points(tree: &CondensedTree, n: usize) -> (Vec<i32>, Vec<ClusterSummary>) {
    let mut label_of_node = vec![NOISE; tree.nodes.len()];
    for (label, &id) in tree.selected.iter().enumerate() {
        label_of_node[id] = label as i32;
    }
    // propagate selected labels down to descendants
    for id in 0..tree.nodes.len() {
        if label_of_node[id] == NOISE {
            if let Some(p) = tree.nodes[id].parent {
                label_of_node[id] = label_of_node[p];
            }
        }
    }
    let mut labels = vec![NOISE; n];
    for node in &tree.nodes {
        for &(p, _) in &node.points {
            labels[p] = label_of_node[node.id];
        }
    }
    let clusters = tree
        .selected
        .iter()
        .enumerate()
        .map(|(label, &id)| ClusterSummary {
            id: label as i32,
            size: labels.iter().filter(|&&l| l == label as i32).count(),
            stability: tree.nodes[id].stability,
        })
        .collect();
    (labels, clusters)
}

pub fn fit_hdbscan(x: ArrayView2<f64>, params: &HdbscanParams) -> Result<ClusterModel> {
    let min_samples = params.min_samples();
    let core = core_distances(x, min_samples)?;
    let mst = build_mst(x, &core);
    let hierarchy = condense_and_extract(&mst, params.min_cluster_size)?;
    let cluster_birth = hierarchy
        .tree
        .selected
        .iter()
        .map(|&id| hierarchy.tree.nodes[id].lambda_birth)
        .collect();
    Ok(ClusterModel {
        algorithm: Algorithm::Hdbscan,
        labels: hierarchy.labels,
        clusters: hierarchy.clusters,
        params: ClusterParams::Density {
            min_cluster_size: params.min_cluster_size,
            min_samples,
        },
        density: Some(DensityReference {
            coords: x.to_owned(),
            core,
            mst,
            tree: hierarchy.tree,
            cluster_birth,
        }),
    })
}

/// Labels new points by their nearest reference point: the label is kept
/// when the implied join density `1 / max(d, core)` reaches the birth
/// density of that point's selected cluster.
pub fn assign_new(model: &ClusterModel, y: ArrayView2<f64>) -> Result<Vec<i32>> {
    let density = model
        .density
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("assign_new needs an hdbscan model, got {}", model.algorithm.as_str())))?;
    if y.ncols() != density.coords.ncols() {
        return Err(Error::dim(density.coords.ncols(), y.ncols()));
    }
    let nearest = knn_query(density.coords.view(), y, 1);
    Ok(nearest
        .into_iter()
        .map(|row| {
            let (j, d) = row[0];
            let label = model.labels[j];
            if label == NOISE {
                return NOISE;
            }
            let join = lambda_of(d.max(density.core[j]));
            if join >= density.cluster_birth[label as usize] {
                label
            } else {
                NOISE
            }
        })
        .collect())
}
