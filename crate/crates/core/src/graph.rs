//! Vessel-fused network: global nodes and radius-bearing traces built from
//! a thinned skeleton, in one-to-one correspondence with its voxels.
//!
//! Skeleton voxels are classified by their 26-neighbour degree. Clusters
//! of degree >= 3 voxels form hubs that collapse into one centre node.
//! Traces follow degree-2 chains between nodes; a trace that leaves a hub
//! starts at the hub centre and runs through the hub members on its way out.

use std::collections::{HashMap, HashSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::centerline::SparseCenterline;
use crate::error::{Error, Result};
use crate::topology::neighbours26;
use crate::volume::{BinaryVolume, Grid};

/// Skeleton voxels with their 26-neighbour degree.
#[derive(Clone, Debug)]
pub struct SkeletonGraph {
    grid: Grid,
    voxels: Vec<usize>,
    degree: Vec<u8>,
    slot: HashMap<usize, usize>,
}

impl SkeletonGraph {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Skeleton voxels in ascending index order.
    pub fn voxels(&self) -> &[usize] {
        &self.voxels
    }

    pub fn contains(&self, idx: usize) -> bool {
        self.slot.contains_key(&idx)
    }

    pub fn degree(&self, idx: usize) -> Option<u8> {
        self.slot.get(&idx).map(|&s| self.degree[s])
    }

    /// Skeleton neighbours of a skeleton voxel, ascending.
    pub fn neighbours(&self, idx: usize) -> Vec<usize> {
        neighbours26(&self.grid, idx)
            .filter(|j| self.slot.contains_key(j))
            .collect()
    }

    /// Degree <= 1.
    pub fn endpoints(&self) -> Vec<usize> {
        self.filter(|d| d <= 1)
    }

    pub fn between(&self) -> Vec<usize> {
        self.filter(|d| d == 2)
    }

    pub fn node_candidates(&self) -> Vec<usize> {
        self.filter(|d| d >= 3)
    }

    fn filter(&self, f: impl Fn(u8) -> bool) -> Vec<usize> {
        self.voxels
            .iter()
            .zip(&self.degree)
            .filter(|(_, &d)| f(d))
            .map(|(&v, _)| v)
            .collect()
    }
}

pub fn classify_voxels(skel: &BinaryVolume) -> SkeletonGraph {
    let grid = *skel.grid();
    let voxels = skel.foreground();
    let slot: HashMap<usize, usize> = voxels.iter().enumerate().map(|(s, &v)| (v, s)).collect();
    let degree = voxels
        .iter()
        .map(|&v| neighbours26(&grid, v).filter(|&j| skel.get(j)).count() as u8)
        .collect();
    SkeletonGraph {
        grid,
        voxels,
        degree,
        slot,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Hub {
    /// Sorted member voxels.
    pub members: Vec<usize>,
    /// Skeleton voxels outside the hub adjacent to a member, sorted.
    pub hub_endpoints: Vec<usize>,
    pub center: usize,
}

/// 26-connected clusters of degree >= 3 voxels, with centres elected.
///
/// A degree-2 voxel whose two neighbours both belong to the same cluster
/// is folded into that cluster; otherwise it would become a zero-length
/// loop trace from the hub back to itself.
pub fn detect_hubs(sg: &SkeletonGraph) -> Vec<Hub> {
    let candidates: HashSet<usize> = sg.node_candidates().into_iter().collect();
    let mut hub_of: HashMap<usize, usize> = HashMap::new();
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for &s in sg.voxels() {
        if !candidates.contains(&s) || hub_of.contains_key(&s) {
            continue;
        }
        let id = clusters.len();
        let mut members = vec![s];
        hub_of.insert(s, id);
        let mut i = 0;
        while i < members.len() {
            for w in sg.neighbours(members[i]) {
                if candidates.contains(&w) && !hub_of.contains_key(&w) {
                    hub_of.insert(w, id);
                    members.push(w);
                }
            }
            i += 1;
        }
        clusters.push(members);
    }
    for &v in sg.voxels() {
        if sg.degree(v) != Some(2) {
            continue;
        }
        let nb = sg.neighbours(v);
        if let (Some(&a), Some(&b)) = (hub_of.get(&nb[0]), hub_of.get(&nb[1])) {
            if a == b && !hub_of.contains_key(&v) {
                hub_of.insert(v, a);
                clusters[a].push(v);
            }
        }
    }
    clusters
        .into_iter()
        .map(|mut members| {
            members.sort_unstable();
            let set: HashSet<usize> = members.iter().copied().collect();
            let mut ends: Vec<usize> = members
                .iter()
                .flat_map(|&m| sg.neighbours(m))
                .filter(|w| !set.contains(w))
                .collect();
            ends.sort_unstable();
            ends.dedup();
            let center = hub_center(sg, &members, &ends);
            Hub {
                members,
                hub_endpoints: ends,
                center,
            }
        })
        .collect()
}

/// Member minimising the variance of hop distances to the hub endpoints,
/// measured inside the hub plus its endpoints. Ties go to the smaller mean
/// distance, then the smaller index.
pub fn hub_center(sg: &SkeletonGraph, members: &[usize], hub_endpoints: &[usize]) -> usize {
    if hub_endpoints.is_empty() || members.len() == 1 {
        return members[0];
    }
    let inside: HashSet<usize> = members.iter().copied().collect();
    let terminal: HashSet<usize> = hub_endpoints.iter().copied().collect();
    let mut best: Option<(i128, i128, usize)> = None;
    for &m in members {
        let mut dist: HashMap<usize, i64> = HashMap::from([(m, 0)]);
        let mut queue = VecDeque::from([m]);
        while let Some(v) = queue.pop_front() {
            if terminal.contains(&v) {
                continue;
            }
            for w in sg.neighbours(v) {
                if (inside.contains(&w) || terminal.contains(&w)) && !dist.contains_key(&w) {
                    dist.insert(w, dist[&v] + 1);
                    queue.push_back(w);
                }
            }
        }
        let d: Vec<i128> = hub_endpoints
            .iter()
            .map(|e| dist.get(e).copied().unwrap_or(i64::MAX / 4) as i128)
            .collect();
        let n = d.len() as i128;
        let sum: i128 = d.iter().sum();
        let sum2: i128 = d.iter().map(|x| x * x).sum();
        // n^2 * variance and n * mean, exact
        let key = (n * sum2 - sum * sum, sum, m);
        if best.is_none_or(|b| key < b) {
            best = Some(key);
        }
    }
    best.unwrap().2
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Endpoint,
    Junction,
    HubCenter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub id: usize,
    pub voxel: usize,
    pub kind: NodeKind,
    pub radius_mm: f64,
    /// Hub members collapsed into this node that no trace runs through.
    pub absorbed: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub id: usize,
    pub start: usize,
    pub end: usize,
    /// Voxel path including both terminal node voxels.
    pub voxels: Vec<usize>,
    pub radii: Vec<f64>,
    /// Hub members attributed to this trace that are not on its path.
    pub absorbed: Vec<usize>,
    /// Starts and ends at the same node.
    pub closed: bool,
}

impl Trace {
    pub fn interior(&self) -> &[usize] {
        &self.voxels[1..self.voxels.len() - 1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VesselFusedNetwork {
    grid: Grid,
    nodes: Vec<Node>,
    traces: Vec<Trace>,
}

impl VesselFusedNetwork {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    /// Nodes sorted by id.
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Traces sorted by id.
    pub fn traces(&self) -> &[Trace] {
        &self.traces
    }

    pub fn node(&self, id: usize) -> Option<&Node> {
        self.nodes
            .binary_search_by_key(&id, |n| n.id)
            .ok()
            .map(|i| &self.nodes[i])
    }

    pub fn trace(&self, id: usize) -> Option<&Trace> {
        self.traces
            .binary_search_by_key(&id, |t| t.id)
            .ok()
            .map(|i| &self.traces[i])
    }

    /// Voxel coordinates of a node.
    pub fn node_coord(&self, id: usize) -> Option<[usize; 3]> {
        self.node(id).map(|n| self.grid.coord(n.voxel))
    }

    /// Physical position of a node in mm.
    pub fn node_position(&self, id: usize) -> Option<[f64; 3]> {
        self.node_coord(id)
            .map(|c| self.grid.to_physical(c.map(|v| v as f64)))
    }

    /// Trace points as physical positions (mm) with radii.
    pub fn trace_points(&self, t: &Trace) -> Vec<[f64; 4]> {
        t.voxels
            .iter()
            .zip(&t.radii)
            .map(|(&v, &r)| {
                let p = self.grid.to_physical(self.grid.coord(v).map(|c| c as f64));
                [p[0], p[1], p[2], r]
            })
            .collect()
    }

    /// Incident trace ids per node id; closed traces appear twice.
    pub fn incidence(&self) -> HashMap<usize, Vec<usize>> {
        let mut inc: HashMap<usize, Vec<usize>> =
            self.nodes.iter().map(|n| (n.id, Vec::new())).collect();
        for t in &self.traces {
            inc.entry(t.start).or_default().push(t.id);
            inc.entry(t.end).or_default().push(t.id);
        }
        inc
    }

    /// Number of connected components (nodes joined by traces).
    pub fn component_count(&self) -> usize {
        let index: HashMap<usize, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id, i))
            .collect();
        let mut parent: Vec<usize> = (0..self.nodes.len()).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for t in &self.traces {
            let (a, b) = (
                find(&mut parent, index[&t.start]),
                find(&mut parent, index[&t.end]),
            );
            parent[a.max(b)] = a.min(b);
        }
        (0..parent.len())
            .filter(|&i| find(&mut parent, i) == i)
            .count()
    }

    /// Checks the internal invariants: terminals exist and match the path
    /// ends, every voxel is owned once, and radii are positive.
    pub fn audit(&self) -> Result<()> {
        let mut owner: HashSet<usize> = HashSet::new();
        let mut claim = |v: usize, what: &str| {
            if owner.insert(v) {
                Ok(())
            } else {
                Err(Error::Consistency(format!(
                    "voxel {v} claimed twice ({what})"
                )))
            }
        };
        for w in self.nodes.windows(2) {
            if w[0].id >= w[1].id {
                return Err(Error::Consistency(
                    "node ids not strictly increasing".into(),
                ));
            }
        }
        for n in &self.nodes {
            claim(n.voxel, "node")?;
            for &a in &n.absorbed {
                claim(a, "node member")?;
            }
        }
        for t in &self.traces {
            let (Some(s), Some(e)) = (self.node(t.start), self.node(t.end)) else {
                return Err(Error::Consistency(format!(
                    "trace {} references a missing node",
                    t.id
                )));
            };
            if t.voxels.len() < 2 || t.voxels[0] != s.voxel || *t.voxels.last().unwrap() != e.voxel
            {
                return Err(Error::Consistency(format!(
                    "trace {} does not end on its nodes",
                    t.id
                )));
            }
            if t.radii.len() != t.voxels.len() || t.radii.iter().any(|r| !(*r > 0.0)) {
                return Err(Error::Consistency(format!(
                    "trace {} has invalid radii",
                    t.id
                )));
            }
            if t.closed != (t.start == t.end) {
                return Err(Error::Consistency(format!(
                    "trace {} closed flag is wrong",
                    t.id
                )));
            }
            for &v in t.interior().iter().chain(&t.absorbed) {
                claim(v, "trace")?;
            }
        }
        let degree: usize = self.incidence().values().map(Vec::len).sum();
        if degree != 2 * self.traces.len() {
            return Err(Error::Consistency("handshake identity violated".into()));
        }
        Ok(())
    }

    /// Every skeleton voxel is owned exactly once, and component counts agree.
    pub fn audit_against(&self, skel: &BinaryVolume) -> Result<()> {
        self.audit()?;
        let mut owned: Vec<usize> = self
            .nodes
            .iter()
            .flat_map(|n| std::iter::once(n.voxel).chain(n.absorbed.iter().copied()))
            .chain(
                self.traces
                    .iter()
                    .flat_map(|t| t.interior().iter().chain(&t.absorbed).copied()),
            )
            .collect();
        owned.sort_unstable();
        if owned != skel.foreground() {
            return Err(Error::Consistency(
                "network does not cover the skeleton one-to-one".into(),
            ));
        }
        let comps = crate::topology::components26(skel).1;
        if comps != self.component_count() {
            return Err(Error::Consistency(format!(
                "network has {} components, skeleton {comps}",
                self.component_count()
            )));
        }
        Ok(())
    }
}

/// Build the network from a skeleton and the radii of its voxels.
pub fn build_vessel_fused_network(
    skel: &BinaryVolume,
    centerline: &SparseCenterline,
) -> Result<VesselFusedNetwork> {
    if skel.dims() != centerline.grid().dims {
        return Err(Error::DimensionMismatch(
            "skeleton and centerline grids differ".into(),
        ));
    }
    let grid = *centerline.grid();
    let sg = classify_voxels(skel);
    let radius = |v: usize| {
        centerline.radius_at(v).ok_or_else(|| {
            Error::Consistency(format!("skeleton voxel {:?} has no radius", grid.coord(v)))
        })
    };
    let hubs = detect_hubs(&sg);

    // node voxel -> node; hub member -> hub
    let mut node_voxels: Vec<(usize, NodeKind, Option<usize>)> = Vec::new();
    let mut hub_of: HashMap<usize, usize> = HashMap::new();
    for (h, hub) in hubs.iter().enumerate() {
        let kind = if hub.members.len() == 1 {
            NodeKind::Junction
        } else {
            NodeKind::HubCenter
        };
        node_voxels.push((hub.center, kind, Some(h)));
        for &m in &hub.members {
            hub_of.insert(m, h);
        }
    }
    for v in sg.endpoints() {
        node_voxels.push((v, NodeKind::Endpoint, None));
    }
    node_voxels.sort_by_key(|n| n.0);
    let mut nodes: Vec<Node> = Vec::with_capacity(node_voxels.len());
    let mut node_of_voxel: HashMap<usize, usize> = HashMap::new();
    let mut node_of_hub: HashMap<usize, usize> = HashMap::new();
    for (id, &(voxel, kind, hub)) in node_voxels.iter().enumerate() {
        nodes.push(Node {
            id,
            voxel,
            kind,
            radius_mm: radius(voxel)?,
            absorbed: Vec::new(),
        });
        node_of_voxel.insert(voxel, id);
        if let Some(h) = hub {
            node_of_hub.insert(h, id);
        }
    }
    // the node a voxel collapses into, if any
    let owner_node = |v: usize| -> Option<usize> {
        match hub_of.get(&v) {
            Some(h) => Some(node_of_hub[h]),
            None => node_of_voxel.get(&v).copied(),
        }
    };

    // BFS trees inside each hub, rooted at the centre
    let mut hub_parent: HashMap<usize, usize> = HashMap::new();
    for hub in &hubs {
        let inside: HashSet<usize> = hub.members.iter().copied().collect();
        let mut queue = VecDeque::from([hub.center]);
        hub_parent.insert(hub.center, hub.center);
        while let Some(v) = queue.pop_front() {
            for w in sg.neighbours(v) {
                if inside.contains(&w) && !hub_parent.contains_key(&w) {
                    hub_parent.insert(w, v);
                    queue.push_back(w);
                }
            }
        }
    }
    let mut claimed: HashSet<usize> = HashSet::new();
    // path from a node voxel out to `attach`, centre first, skipping hub
    // members another trace already runs through
    let hub_path = |attach: usize, claimed: &mut HashSet<usize>| -> Vec<usize> {
        let mut chain = vec![attach];
        while let Some(&p) = hub_parent.get(chain.last().unwrap()) {
            if p == *chain.last().unwrap() {
                break;
            }
            chain.push(p);
        }
        chain.reverse();
        // chain[0] is the centre; keep it and the unclaimed members
        let centre = chain[0];
        let mut out = vec![centre];
        for &v in &chain[1..] {
            if claimed.insert(v) {
                out.push(v);
            }
        }
        out
    };

    let mut used_ports: HashSet<(usize, usize)> = HashSet::new();
    let mut visited: HashSet<usize> = HashSet::new();
    let mut traces: Vec<Trace> = Vec::new();
    for node_id in 0..nodes.len() {
        let nv = nodes[node_id].voxel;
        let (ports, own): (Vec<usize>, Vec<usize>) = match hub_of.get(&nv) {
            Some(&h) => (hubs[h].hub_endpoints.clone(), hubs[h].members.clone()),
            None => (sg.neighbours(nv), vec![nv]),
        };
        let own: HashSet<usize> = own.into_iter().collect();
        for first in ports {
            if used_ports.contains(&(node_id, first)) {
                continue;
            }
            let attach = *sg
                .neighbours(first)
                .iter()
                .find(|w| own.contains(w))
                .expect("port touches its node");
            let mut path = if hub_of.contains_key(&nv) {
                hub_path(attach, &mut claimed)
            } else {
                vec![nv]
            };
            let mut prev = attach;
            let mut cur = first;
            let end_node = loop {
                if let Some(n) = owner_node(cur) {
                    break n;
                }
                path.push(cur);
                visited.insert(cur);
                let next = sg.neighbours(cur).into_iter().find(|&w| w != prev);
                match next {
                    Some(w) => {
                        prev = cur;
                        cur = w;
                    }
                    None => {
                        return Err(Error::Consistency(format!(
                            "chain broken at {:?}",
                            grid.coord(cur)
                        )))
                    }
                }
            };
            used_ports.insert((node_id, first));
            used_ports.insert((end_node, prev));
            let end_voxel = nodes[end_node].voxel;
            if cur == end_voxel {
                path.push(cur);
            } else {
                let mut back = hub_path(cur, &mut claimed);
                back.reverse();
                path.extend(back);
            }
            let radii = path
                .iter()
                .map(|&v| radius(v))
                .collect::<Result<Vec<_>>>()?;
            traces.push(Trace {
                id: traces.len(),
                start: node_id,
                end: end_node,
                voxels: path,
                radii,
                absorbed: Vec::new(),
                closed: node_id == end_node,
            });
        }
    }

    // pure loops: every voxel has degree 2 and none was reached
    for &v in sg.voxels() {
        if visited.contains(&v) || owner_node(v).is_some() {
            continue;
        }
        let id = nodes.len();
        nodes.push(Node {
            id,
            voxel: v,
            kind: NodeKind::Junction,
            radius_mm: radius(v)?,
            absorbed: Vec::new(),
        });
        let nb = sg.neighbours(v);
        let mut path = vec![v];
        let (mut prev, mut cur) = (v, nb[0]);
        while cur != v {
            path.push(cur);
            visited.insert(cur);
            let next = sg
                .neighbours(cur)
                .into_iter()
                .find(|&w| w != prev)
                .expect("loop voxel has two neighbours");
            prev = cur;
            cur = next;
        }
        path.push(v);
        let radii = path
            .iter()
            .map(|&w| radius(w))
            .collect::<Result<Vec<_>>>()?;
        traces.push(Trace {
            id: traces.len(),
            start: id,
            end: id,
            voxels: path,
            radii,
            absorbed: Vec::new(),
            closed: true,
        });
    }
    // hub members no trace runs through
    for (h, hub) in hubs.iter().enumerate() {
        let node_id = node_of_hub[&h];
        let orphans: Vec<usize> = hub
            .members
            .iter()
            .copied()
            .filter(|&m| m != hub.center && !claimed.contains(&m))
            .collect();
        if orphans.is_empty() {
            continue;
        }
        let mut owner: HashMap<usize, usize> = HashMap::new();
        let mut queue = VecDeque::new();
        for t in traces
            .iter()
            .filter(|t| t.start == node_id || t.end == node_id)
        {
            for &v in t.interior() {
                if hub_of.get(&v) == Some(&h) && !owner.contains_key(&v) {
                    owner.insert(v, t.id);
                    queue.push_back(v);
                }
            }
        }
        let inside: HashSet<usize> = hub.members.iter().copied().collect();
        while let Some(v) = queue.pop_front() {
            for w in sg.neighbours(v) {
                if inside.contains(&w) && w != hub.center && !owner.contains_key(&w) {
                    owner.insert(w, owner[&v]);
                    queue.push_back(w);
                }
            }
        }
        let fallback = traces
            .iter()
            .find(|t| t.start == node_id || t.end == node_id)
            .map(|t| t.id);
        for m in orphans {
            match owner.get(&m).copied().or(fallback) {
                Some(t) => traces[t].absorbed.push(m),
                None => nodes[node_id].absorbed.push(m),
            }
        }
    }
    Ok(VesselFusedNetwork {
        grid,
        nodes,
        traces,
    })
}

/// Remove a trace and any of its terminal nodes left without traces.
pub fn delete_edge(net: &VesselFusedNetwork, trace_id: usize) -> Result<VesselFusedNetwork> {
    let t = net
        .trace(trace_id)
        .ok_or(Error::UnknownTrace(trace_id))?
        .clone();
    let mut out = net.clone();
    out.traces.retain(|x| x.id != trace_id);
    let inc = out.incidence();
    out.nodes.retain(|n| {
        !((n.id == t.start || n.id == t.end) && inc.get(&n.id).is_none_or(|v| v.is_empty()))
    });
    Ok(out)
}

// ---- graph JSON ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeDoc {
    pub id: usize,
    pub xyz: [usize; 3],
    pub kind: NodeKind,
    pub radius_mm: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub absorbed: Vec<[usize; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceDoc {
    pub id: usize,
    pub start: usize,
    pub end: usize,
    /// Voxel coordinates and radius in mm.
    pub points: Vec<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub absorbed: Vec<[usize; 3]>,
    #[serde(default)]
    pub closed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphDoc {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub nodes: Vec<NodeDoc>,
    pub traces: Vec<TraceDoc>,
}

impl VesselFusedNetwork {
    pub fn to_doc(&self) -> GraphDoc {
        let c = |v: usize| self.grid.coord(v);
        GraphDoc {
            dims: self.grid.dims,
            spacing: self.grid.spacing,
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeDoc {
                    id: n.id,
                    xyz: c(n.voxel),
                    kind: n.kind,
                    radius_mm: n.radius_mm,
                    absorbed: n.absorbed.iter().map(|&v| c(v)).collect(),
                })
                .collect(),
            traces: self
                .traces
                .iter()
                .map(|t| TraceDoc {
                    id: t.id,
                    start: t.start,
                    end: t.end,
                    points: t
                        .voxels
                        .iter()
                        .zip(&t.radii)
                        .map(|(&v, &r)| {
                            let p = c(v);
                            [p[0] as f64, p[1] as f64, p[2] as f64, r]
                        })
                        .collect(),
                    absorbed: t.absorbed.iter().map(|&v| c(v)).collect(),
                    closed: t.closed,
                })
                .collect(),
        }
    }

    pub fn from_doc(doc: &GraphDoc) -> Result<Self> {
        let grid = Grid::new(doc.dims, doc.spacing)?;
        let idx = |p: [usize; 3]| -> Result<usize> {
            grid.checked_index(p.map(|v| v as i64))
                .ok_or_else(|| Error::Format {
                    field: "xyz",
                    reason: format!("{p:?} outside {:?}", doc.dims),
                })
        };
        let mut nodes = doc
            .nodes
            .iter()
            .map(|n| {
                Ok(Node {
                    id: n.id,
                    voxel: idx(n.xyz)?,
                    kind: n.kind,
                    radius_mm: n.radius_mm,
                    absorbed: n.absorbed.iter().map(|&p| idx(p)).collect::<Result<_>>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        nodes.sort_by_key(|n| n.id);
        let mut traces = doc
            .traces
            .iter()
            .map(|t| {
                let voxels = t
                    .points
                    .iter()
                    .map(|p| {
                        if p[..3].iter().any(|v| v.fract() != 0.0 || *v < 0.0) {
                            return Err(Error::Format {
                                field: "points",
                                reason: format!("{p:?} is not a voxel"),
                            });
                        }
                        idx([p[0] as usize, p[1] as usize, p[2] as usize])
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Trace {
                    id: t.id,
                    start: t.start,
                    end: t.end,
                    voxels,
                    radii: t.points.iter().map(|p| p[3]).collect(),
                    absorbed: t.absorbed.iter().map(|&p| idx(p)).collect::<Result<_>>()?,
                    closed: t.closed,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        traces.sort_by_key(|t| t.id);
        let net = VesselFusedNetwork {
            grid,
            nodes,
            traces,
        };
        net.audit()?;
        Ok(net)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_doc()).expect("graph serializes")
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_json()).map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: GraphDoc = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Self::from_doc(&doc)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::centerline::CenterlinePoint;

    pub(crate) fn skeleton(dims: [usize; 3], on: &[[usize; 3]]) -> BinaryVolume {
        let g = Grid::new(dims, [1.0; 3]).unwrap();
        let mut b = BinaryVolume::empty(g);
        for c in on {
            b.set(g.index(c[0], c[1], c[2]), true);
        }
        b
    }

    pub(crate) fn unit_radii(skel: &BinaryVolume) -> SparseCenterline {
        let g = *skel.grid();
        let pts = skel
            .foreground()
            .into_iter()
            .map(|i| CenterlinePoint {
                index: i,
                voxel: g.coord(i),
                radius_mm: 1.0,
            })
            .collect();
        SparseCenterline::new(g, pts).unwrap()
    }

    pub(crate) fn build(skel: &BinaryVolume) -> VesselFusedNetwork {
        let net = build_vessel_fused_network(skel, &unit_radii(skel)).unwrap();
        net.audit_against(skel).unwrap();
        net
    }

    fn y_shape() -> BinaryVolume {
        // three arms of length 4 meeting at (5,5,0)
        let mut pts = vec![[5, 5, 0]];
        for k in 1..=4 {
            pts.push([5 - k, 5, 0]);
            pts.push([5 + k, 5 + k, 0]);
            pts.push([5 + k, 5 - k, 0]);
        }
        skeleton([11, 11, 1], &pts)
    }

    #[test]
    fn chain_classification() {
        let pts: Vec<[usize; 3]> = (0..10).map(|x| [x, 0, 0]).collect();
        let sg = classify_voxels(&skeleton([10, 1, 1], &pts));
        assert_eq!(sg.endpoints().len(), 2);
        assert_eq!(sg.between().len(), 8);
        assert!(sg.node_candidates().is_empty());
        let net = build(&skeleton([10, 1, 1], &pts));
        assert_eq!(net.nodes().len(), 2);
        assert_eq!(net.traces().len(), 1);
        assert_eq!(net.traces()[0].voxels.len(), 10);
    }

    #[test]
    fn y_classification_and_network() {
        let sg = classify_voxels(&y_shape());
        assert_eq!(sg.endpoints().len(), 3);
        assert_eq!(sg.node_candidates().len(), 1);
        let net = build(&y_shape());
        assert_eq!(net.nodes().len(), 4);
        assert_eq!(net.traces().len(), 3);
        assert_eq!(
            net.nodes()
                .iter()
                .filter(|n| n.kind == NodeKind::Junction)
                .count(),
            1
        );
    }

    #[test]
    fn isolated_voxel_is_an_endpoint_node() {
        let s = skeleton([3, 3, 3], &[[1, 1, 1]]);
        let sg = classify_voxels(&s);
        assert_eq!(sg.endpoints(), vec![13]);
        let net = build(&s);
        assert_eq!(net.nodes().len(), 1);
        assert!(net.traces().is_empty());
    }

    #[test]
    fn singleton_hub_has_three_endpoints() {
        let hubs = detect_hubs(&classify_voxels(&y_shape()));
        assert_eq!(hubs.len(), 1);
        assert_eq!(hubs[0].members, vec![hubs[0].center]);
        assert_eq!(hubs[0].hub_endpoints.len(), 3);
    }

    #[test]
    fn adjacent_candidates_form_one_hub() {
        // H shape: bar (4..=5, 3) with two arms on each end voxel
        let mut pts = vec![[4, 3, 0], [5, 3, 0]];
        for k in 1..=3 {
            pts.push([4 - k, 3 + k, 0]);
            pts.push([4 - k, 3 - k, 0]);
            pts.push([5 + k, 3 + k, 0]);
            pts.push([5 + k, 3 - k, 0]);
        }
        let s = skeleton([10, 7, 1], &pts);
        let hubs = detect_hubs(&classify_voxels(&s));
        assert_eq!(hubs.len(), 1);
        assert_eq!(hubs[0].members.len(), 2);
        let net = build(&s);
        assert_eq!(net.traces().len(), 4);
        assert_eq!(
            net.nodes()
                .iter()
                .filter(|n| n.kind == NodeKind::HubCenter)
                .count(),
            1
        );
    }

    #[test]
    fn cross_centre_is_the_meeting_voxel() {
        let mut pts = vec![[4, 4, 0]];
        for k in 1..=4 {
            pts.extend([[4 - k, 4, 0], [4 + k, 4, 0], [4, 4 - k, 0], [4, 4 + k, 0]]);
        }
        let s = skeleton([9, 9, 1], &pts);
        let sg = classify_voxels(&s);
        let hubs = detect_hubs(&sg);
        assert_eq!(hubs.len(), 1);
        assert_eq!(hubs[0].center, s.grid().index(4, 4, 0));
    }

    #[test]
    fn hub_centre_balances_distances() {
        // members a-b-c along x, two arms on a and two on c. From b every
        // arm start is 2 hops away (variance 0); from a they are {1,1,3,3}.
        let mut pts = vec![[3, 3, 0], [4, 3, 0], [5, 3, 0]];
        for k in 1..=3 {
            pts.extend([
                [3 - k, 3 + k, 0],
                [3 - k, 3 - k, 0],
                [5 + k, 3 + k, 0],
                [5 + k, 3 - k, 0],
            ]);
        }
        let s = skeleton([9, 7, 1], &pts);
        let g = *s.grid();
        let sg = classify_voxels(&s);
        let members = [g.index(3, 3, 0), g.index(4, 3, 0), g.index(5, 3, 0)];
        let ends = [
            g.index(2, 2, 0),
            g.index(6, 2, 0),
            g.index(2, 4, 0),
            g.index(6, 4, 0),
        ];
        assert_eq!(hub_center(&sg, &members, &ends), g.index(4, 3, 0));
        // a and c are not adjacent, so detection finds two singleton hubs
        assert_eq!(detect_hubs(&sg).len(), 2);
        let net = build(&s);
        assert_eq!((net.nodes().len(), net.traces().len()), (6, 5));
    }

    #[test]
    fn degree_two_voxel_between_members_is_folded() {
        // a = (3,3) and c = (4,3) are adjacent junctions; v = (3,4) touches both
        let mut pts = vec![[3, 3, 0], [4, 3, 0], [3, 4, 0]];
        for k in 1..=3 {
            pts.extend([[3 - k, 3 - k, 0], [4 + k, 3 - k, 0]]);
        }
        let s = skeleton([8, 5, 1], &pts);
        let g = *s.grid();
        let hubs = detect_hubs(&classify_voxels(&s));
        assert_eq!(hubs.len(), 1);
        assert_eq!(hubs[0].members.len(), 3);
        assert_eq!(hubs[0].center, g.index(3, 4, 0));
        let net = build(&s);
        assert_eq!((net.nodes().len(), net.traces().len()), (3, 2));
    }

    #[test]
    fn ring_gets_a_synthesized_node_and_closed_trace() {
        // square perimeter without its corners, so no voxel sees three others
        let mut ring = Vec::new();
        for k in 1..6 {
            ring.extend([[1 + k, 1, 0], [7, 1 + k, 0], [7 - k, 7, 0], [1, 7 - k, 0]]);
        }
        let s = skeleton([9, 9, 1], &ring);
        assert!(classify_voxels(&s)
            .voxels()
            .iter()
            .all(|&v| classify_voxels(&s).degree(v) == Some(2)));
        let net = build(&s);
        assert_eq!(net.nodes().len(), 1);
        assert_eq!(net.traces().len(), 1);
        assert!(net.traces()[0].closed);
        assert_eq!(net.incidence()[&0].len(), 2);
        assert_eq!(net.nodes()[0].voxel, s.grid().index(2, 1, 0));
    }

    #[test]
    fn delete_arm_of_y_leaves_a_chain() {
        let net = build(&y_shape());
        let arm = net
            .traces()
            .iter()
            .find(|t| {
                net.node(t.end).unwrap().kind == NodeKind::Endpoint
                    || net.node(t.start).unwrap().kind == NodeKind::Endpoint
            })
            .unwrap()
            .id;
        let cut = delete_edge(&net, arm).unwrap();
        assert_eq!(cut.traces().len(), 2);
        assert_eq!(cut.nodes().len(), 3);
        cut.audit().unwrap();
        assert!(matches!(
            delete_edge(&net, 99),
            Err(Error::UnknownTrace(99))
        ));
    }

    #[test]
    fn delete_only_trace_empties_network() {
        let pts: Vec<[usize; 3]> = (0..5).map(|x| [x, 0, 0]).collect();
        let net = build(&skeleton([5, 1, 1], &pts));
        let cut = delete_edge(&net, 0).unwrap();
        assert!(cut.nodes().is_empty() && cut.traces().is_empty());
    }

    #[test]
    fn json_round_trip() {
        let net = build(&y_shape());
        let doc: GraphDoc = serde_json::from_str(&net.to_json()).unwrap();
        assert_eq!(VesselFusedNetwork::from_doc(&doc).unwrap(), net);
    }
}
