//! Landmark assignment and the dynamic graph table: canonical artery names
//! resolved to traces of a vessel-fused network, tolerant of arteries that
//! are anatomically absent.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::polyline_length;
use crate::graph::{delete_edge, VesselFusedNetwork};

/// The 16 critical nodes, in annotation order.
pub const CANONICAL_LABELS: [&str; 16] = [
    "M1-M2_L",
    "M1-M2_R",
    "A1-A2_L",
    "A1-A2_R",
    "ICA-MCA-ACA_L",
    "ICA-MCA-ACA_R",
    "Pcomm-ICA_L",
    "Pcomm-ICA_R",
    "ICA_Root_L",
    "ICA_Root_R",
    "P1-P2-Pcomm_L",
    "P1-P2-Pcomm_R",
    "PCA-BA",
    "BA-VA",
    "VA_Root_L",
    "VA_Root_R",
];

/// How far (mm) a landmark position may sit from the node it snaps to.
pub const DEFAULT_SNAP_MM: f64 = 5.0;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    #[serde(default)]
    pub assignments: BTreeMap<String, usize>,
    #[serde(default)]
    pub deleted_edges: Vec<usize>,
    #[serde(default = "default_version")]
    pub version: u32,
    /// Physical positions (mm) for labels not assigned by node id; each is
    /// snapped to the nearest network node.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub positions: BTreeMap<String, [f64; 3]>,
}

fn default_version() -> u32 {
    1
}

impl LandmarkSet {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json("<landmarks>", e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("landmarks serialize")
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_json()).map_err(|e| Error::io(path.as_ref(), e))
    }

    /// Replace positions by node ids (nearest node within `tolerance_mm`,
    /// smaller id on ties). Positions with no node in reach are dropped.
    pub fn snapped(&self, net: &VesselFusedNetwork, tolerance_mm: f64) -> LandmarkSet {
        let mut out = self.clone();
        out.positions.clear();
        for (label, p) in &self.positions {
            if out.assignments.contains_key(label) {
                continue;
            }
            let mut best: Option<(f64, usize)> = None;
            for n in net.nodes() {
                let q = net.node_position(n.id).expect("node exists");
                let d = (0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>().sqrt();
                if d <= tolerance_mm && best.is_none_or(|b| d < b.0) {
                    best = Some((d, n.id));
                }
            }
            match best {
                Some((_, id)) => {
                    out.assignments.insert(label.clone(), id);
                }
                None => {
                    log::warn!("landmark {label} at {p:?} has no node within {tolerance_mm} mm")
                }
            }
        }
        out
    }

    /// Labels known, nodes existing and unique, deleted edges existing.
    pub fn validate(&self, net: &VesselFusedNetwork, config: &ClassificationConfig) -> Result<()> {
        let known = config.labels();
        let mut used: HashMap<usize, &str> = HashMap::new();
        for (label, &node) in &self.assignments {
            if !known.contains(label.as_str()) {
                return Err(Error::InvalidLandmarks(format!("unknown label `{label}`")));
            }
            if net.node(node).is_none() {
                return Err(Error::UnknownNode {
                    label: label.clone(),
                    node,
                });
            }
            if let Some(other) = used.insert(node, label) {
                return Err(Error::InvalidLandmarks(format!(
                    "node {node} assigned to both `{other}` and `{label}`"
                )));
            }
        }
        for label in self.positions.keys() {
            if !known.contains(label.as_str()) {
                return Err(Error::InvalidLandmarks(format!("unknown label `{label}`")));
            }
        }
        let mut seen = HashSet::new();
        for &t in &self.deleted_edges {
            if net.trace(t).is_none() {
                return Err(Error::UnknownTrace(t));
            }
            if !seen.insert(t) {
                return Err(Error::InvalidLandmarks(format!("trace {t} deleted twice")));
            }
        }
        Ok(())
    }

    /// Mandatory labels not assigned, in config order.
    pub fn missing(&self, config: &ClassificationConfig) -> Vec<String> {
        config
            .mandatory
            .iter()
            .filter(|l| !self.assignments.contains_key(*l))
            .cloned()
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub name: String,
    pub from: String,
    pub to: String,
    /// Landmarks the path must visit in order, when they are assigned.
    #[serde(default)]
    pub via: Vec<String>,
    #[serde(default)]
    pub fault_tolerant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubnetworkSpec {
    pub name: String,
    pub roots: Vec<String>,
}

/// Segments, distal subnetworks and mandatory landmarks. The aggregate
/// `Proximal` (all segments) and `Distal` (all subnetworks) rows are
/// always added.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationConfig {
    pub segments: Vec<SegmentSpec>,
    pub subnetworks: Vec<SubnetworkSpec>,
    pub mandatory: Vec<String>,
    /// Where the proximal network is entered; used as roots of the
    /// `Proximal` row.
    #[serde(default)]
    pub proximal_roots: Vec<String>,
}

impl Default for ClassificationConfig {
    fn default() -> Self {
        let seg = |name: &str, from: &str, to: &str, via: &[&str], ft: bool| SegmentSpec {
            name: name.into(),
            from: from.into(),
            to: to.into(),
            via: via.iter().map(|s| s.to_string()).collect(),
            fault_tolerant: ft,
        };
        let mut segments = Vec::new();
        for s in ["L", "R"] {
            let l = |base: &str| format!("{base}_{s}");
            segments.push(seg(
                &l("ICA"),
                &l("ICA_Root"),
                &l("ICA-MCA-ACA"),
                &[&l("Pcomm-ICA")],
                false,
            ));
            segments.push(seg(&l("M1"), &l("ICA-MCA-ACA"), &l("M1-M2"), &[], false));
            segments.push(seg(&l("A1"), &l("ICA-MCA-ACA"), &l("A1-A2"), &[], true));
        }
        segments.push(seg("Acomm", "A1-A2_L", "A1-A2_R", &[], true));
        for s in ["L", "R"] {
            let l = |base: &str| format!("{base}_{s}");
            segments.push(seg(
                &l("Pcomm"),
                &l("Pcomm-ICA"),
                &l("P1-P2-Pcomm"),
                &[],
                true,
            ));
            segments.push(seg(&l("P1"), "PCA-BA", &l("P1-P2-Pcomm"), &[], true));
        }
        segments.push(seg("BA", "PCA-BA", "BA-VA", &[], false));
        for s in ["L", "R"] {
            segments.push(seg(
                &format!("VA_{s}"),
                "BA-VA",
                &format!("VA_Root_{s}"),
                &[],
                false,
            ));
        }
        let sub = |name: &str, roots: &[&str]| SubnetworkSpec {
            name: name.into(),
            roots: roots.iter().map(|s| s.to_string()).collect(),
        };
        ClassificationConfig {
            segments,
            subnetworks: vec![
                sub("MCA_L", &["M1-M2_L"]),
                sub("MCA_R", &["M1-M2_R"]),
                sub("ACA", &["A1-A2_L", "A1-A2_R"]),
                sub("PCA_L", &["P1-P2-Pcomm_L"]),
                sub("PCA_R", &["P1-P2-Pcomm_R"]),
            ],
            mandatory: [
                "ICA_Root_L",
                "ICA_Root_R",
                "ICA-MCA-ACA_L",
                "ICA-MCA-ACA_R",
                "M1-M2_L",
                "M1-M2_R",
                "PCA-BA",
                "BA-VA",
                "VA_Root_L",
                "VA_Root_R",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            proximal_roots: ["ICA_Root_L", "ICA_Root_R", "VA_Root_L", "VA_Root_R"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

impl ClassificationConfig {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    /// Every label the config refers to, plus the canonical ones.
    pub fn labels(&self) -> BTreeSet<&str> {
        let mut out: BTreeSet<&str> = CANONICAL_LABELS.iter().copied().collect();
        for s in &self.segments {
            out.insert(&s.from);
            out.insert(&s.to);
            out.extend(s.via.iter().map(String::as_str));
        }
        for s in &self.subnetworks {
            out.extend(s.roots.iter().map(String::as_str));
        }
        out.extend(self.mandatory.iter().map(String::as_str));
        out.extend(self.proximal_roots.iter().map(String::as_str));
        out
    }
}

/// A trace walked in a given direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub trace: usize,
    /// True when walked from the trace's start node to its end node.
    pub forward: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentEntry {
    pub name: String,
    pub present: bool,
    pub fault_tolerant: bool,
    /// Node ids along the path, landmark to landmark.
    pub nodes: Vec<usize>,
    pub path: Vec<Step>,
    /// Why the segment is absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl SegmentEntry {
    pub fn traces(&self) -> Vec<usize> {
        self.path.iter().map(|s| s.trace).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubnetworkEntry {
    pub name: String,
    pub present: bool,
    /// Root node ids the subnetwork hangs from.
    pub roots: Vec<usize>,
    /// Sorted trace ids.
    pub traces: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicGraphTable {
    pub segments: Vec<SegmentEntry>,
    pub subnetworks: Vec<SubnetworkEntry>,
    pub deleted_edges: Vec<usize>,
}

impl DynamicGraphTable {
    pub fn segment(&self, name: &str) -> Option<&SegmentEntry> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn subnetwork(&self, name: &str) -> Option<&SubnetworkEntry> {
        self.subnetworks.iter().find(|s| s.name == name)
    }

    /// Presence flag per fault-tolerant segment.
    pub fn presence(&self) -> BTreeMap<String, bool> {
        self.segments
            .iter()
            .filter(|s| s.fault_tolerant)
            .map(|s| (s.name.clone(), s.present))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_json()).map_err(|e| Error::io(path.as_ref(), e))
    }
}

#[derive(PartialEq)]
struct Frontier(f64, usize);

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .total_cmp(&self.0)
            .then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Router {
    length: HashMap<usize, f64>,
    adjacency: HashMap<usize, Vec<(usize, Step)>>,
}

#[derive(Clone)]
struct Route {
    length: f64,
    nodes: Vec<usize>,
    steps: Vec<Step>,
}

impl Router {
    fn new(net: &VesselFusedNetwork) -> Self {
        let mut length = HashMap::new();
        let mut adjacency: HashMap<usize, Vec<(usize, Step)>> = HashMap::new();
        for t in net.traces() {
            length.insert(t.id, polyline_length(&net.trace_points(t)));
            if t.closed {
                continue;
            }
            adjacency.entry(t.start).or_default().push((
                t.end,
                Step {
                    trace: t.id,
                    forward: true,
                },
            ));
            adjacency.entry(t.end).or_default().push((
                t.start,
                Step {
                    trace: t.id,
                    forward: false,
                },
            ));
        }
        Router { length, adjacency }
    }

    /// Shortest path by physical length that does not pass through any
    /// blocked node; equal lengths prefer the lexicographically smaller
    /// node sequence, then trace sequence.
    fn route(&self, from: usize, to: usize, blocked: &HashSet<usize>) -> Option<Route> {
        let mut best: HashMap<usize, Route> = HashMap::new();
        best.insert(
            from,
            Route {
                length: 0.0,
                nodes: vec![from],
                steps: Vec::new(),
            },
        );
        let mut heap = BinaryHeap::from([Frontier(0.0, from)]);
        let mut done = HashSet::new();
        while let Some(Frontier(d, v)) = heap.pop() {
            if !done.insert(v) {
                continue;
            }
            if v == to {
                break;
            }
            if v != from && blocked.contains(&v) {
                continue;
            }
            let here = best[&v].clone();
            debug_assert_eq!(here.length, d);
            for &(w, step) in self.adjacency.get(&v).map(Vec::as_slice).unwrap_or(&[]) {
                if done.contains(&w) || here.nodes.contains(&w) {
                    continue;
                }
                let mut cand = here.clone();
                cand.length += self.length[&step.trace];
                cand.nodes.push(w);
                cand.steps.push(step);
                let better = match best.get(&w) {
                    None => true,
                    Some(b) => {
                        cand.length < b.length
                            || (cand.length == b.length
                                && (
                                    cand.nodes.clone(),
                                    cand.steps.iter().map(|s| s.trace).collect::<Vec<_>>(),
                                ) < (
                                    b.nodes.clone(),
                                    b.steps.iter().map(|s| s.trace).collect::<Vec<_>>(),
                                ))
                    }
                };
                if better {
                    heap.push(Frontier(cand.length, w));
                    best.insert(w, cand);
                }
            }
        }
        best.remove(&to).filter(|_| done.contains(&to))
    }
}

/// Resolve landmark pairs into named segments and distal subnetworks.
pub fn apply_landmarks(
    net: &VesselFusedNetwork,
    lm: &LandmarkSet,
    config: &ClassificationConfig,
) -> Result<DynamicGraphTable> {
    let lm = lm.snapped(net, DEFAULT_SNAP_MM);
    lm.validate(net, config)?;
    let missing = lm.missing(config);
    if !missing.is_empty() {
        return Err(Error::IncompleteLandmarks(missing));
    }
    let mut pruned = net.clone();
    for &t in &lm.deleted_edges {
        pruned = delete_edge(&pruned, t)?;
    }
    let node_of = |label: &str| {
        lm.assignments
            .get(label)
            .copied()
            .filter(|&n| pruned.node(n).is_some())
    };
    let landmark_nodes: HashSet<usize> = lm.assignments.values().copied().collect();
    let router = Router::new(&pruned);

    let mut segments = Vec::new();
    let mut owner: HashMap<usize, String> = HashMap::new();
    for spec in &config.segments {
        let mut stops = vec![spec.from.as_str()];
        stops.extend(
            spec.via
                .iter()
                .map(String::as_str)
                .filter(|l| node_of(l).is_some()),
        );
        stops.push(&spec.to);
        let absent = |reason: String| -> Result<SegmentEntry> {
            if spec.fault_tolerant {
                Ok(SegmentEntry {
                    name: spec.name.clone(),
                    present: false,
                    fault_tolerant: true,
                    nodes: Vec::new(),
                    path: Vec::new(),
                    reason: Some(reason),
                })
            } else {
                Err(Error::Unresolved {
                    segment: spec.name.clone(),
                    reason,
                })
            }
        };
        let ids: Vec<Option<usize>> = stops.iter().map(|l| node_of(l)).collect();
        if let Some(pos) = ids.iter().position(Option::is_none) {
            segments.push(absent(format!("landmark `{}` not assigned", stops[pos]))?);
            continue;
        }
        let ids: Vec<usize> = ids.into_iter().flatten().collect();
        let mut nodes = vec![ids[0]];
        let mut path = Vec::new();
        let mut failed = None;
        for leg in ids.windows(2) {
            let blocked: HashSet<usize> = landmark_nodes
                .iter()
                .copied()
                .filter(|n| *n != leg[0] && *n != leg[1])
                .collect();
            match router.route(leg[0], leg[1], &blocked) {
                Some(r) => {
                    nodes.extend(&r.nodes[1..]);
                    path.extend(r.steps);
                }
                None => {
                    failed = Some(format!("no path from node {} to node {}", leg[0], leg[1]));
                    break;
                }
            }
        }
        if let Some(reason) = failed {
            segments.push(absent(reason)?);
            continue;
        }
        for s in &path {
            if let Some(prev) = owner.insert(s.trace, spec.name.clone()) {
                return Err(Error::Ambiguous(format!(
                    "trace {} lies on both `{prev}` and `{}`",
                    s.trace, spec.name
                )));
            }
        }
        segments.push(SegmentEntry {
            name: spec.name.clone(),
            present: true,
            fault_tolerant: spec.fault_tolerant,
            nodes,
            path,
            reason: None,
        });
    }

    // distal subnetworks: everything reachable from a root without using
    // proximal traces or crossing another landmark
    let mut incident: HashMap<usize, Vec<usize>> = HashMap::new();
    for t in pruned.traces() {
        incident.entry(t.start).or_default().push(t.id);
        if t.end != t.start {
            incident.entry(t.end).or_default().push(t.id);
        }
    }
    let mut taken: HashSet<usize> = owner.keys().copied().collect();
    let mut subnetworks = Vec::new();
    let mut distal_union = BTreeSet::new();
    for spec in &config.subnetworks {
        let roots: Vec<usize> = spec.roots.iter().filter_map(|l| node_of(l)).collect();
        let mut traces = BTreeSet::new();
        let mut seen: HashSet<usize> = roots.iter().copied().collect();
        let mut stack: Vec<usize> = roots.iter().rev().copied().collect();
        while let Some(v) = stack.pop() {
            if !roots.contains(&v) && landmark_nodes.contains(&v) {
                continue;
            }
            for &t in incident.get(&v).map(Vec::as_slice).unwrap_or(&[]) {
                if taken.contains(&t) {
                    continue;
                }
                taken.insert(t);
                traces.insert(t);
                let tr = pruned.trace(t).expect("trace exists");
                for w in [tr.start, tr.end] {
                    if seen.insert(w) {
                        stack.push(w);
                    }
                }
            }
        }
        distal_union.extend(traces.iter().copied());
        subnetworks.push(SubnetworkEntry {
            name: spec.name.clone(),
            present: !roots.is_empty() && !traces.is_empty(),
            roots,
            traces: traces.into_iter().collect(),
        });
    }
    let mut proximal: Vec<usize> = owner.keys().copied().collect();
    proximal.sort_unstable();
    let proximal_roots: Vec<usize> = config
        .proximal_roots
        .iter()
        .filter_map(|l| node_of(l))
        .collect();
    subnetworks.push(SubnetworkEntry {
        name: "Proximal".into(),
        present: !proximal.is_empty(),
        roots: proximal_roots,
        traces: proximal,
    });
    let distal_roots: Vec<usize> = subnetworks
        .iter()
        .take(config.subnetworks.len())
        .flat_map(|s| s.roots.iter().copied())
        .collect();
    subnetworks.push(SubnetworkEntry {
        name: "Distal".into(),
        present: !distal_union.is_empty(),
        roots: distal_roots,
        traces: distal_union.into_iter().collect(),
    });
    let mut deleted = lm.deleted_edges.clone();
    deleted.sort_unstable();
    Ok(DynamicGraphTable {
        segments,
        subnetworks,
        deleted_edges: deleted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::{build, skeleton};

    /// A plus-shaped network: centre junction with four arms of length 4.
    fn plus() -> VesselFusedNetwork {
        let mut pts = vec![[5, 5, 0]];
        for k in 1..=4 {
            pts.extend([[5 - k, 5, 0], [5 + k, 5, 0], [5, 5 - k, 0], [5, 5 + k, 0]]);
        }
        build(&skeleton([11, 11, 1], &pts))
    }

    fn node_at(net: &VesselFusedNetwork, c: [usize; 3]) -> usize {
        net.nodes()
            .iter()
            .find(|n| net.grid().coord(n.voxel) == c)
            .unwrap()
            .id
    }

    fn toy_config() -> ClassificationConfig {
        ClassificationConfig {
            segments: vec![
                SegmentSpec {
                    name: "Stem".into(),
                    from: "ICA_Root_L".into(),
                    to: "ICA-MCA-ACA_L".into(),
                    via: vec![],
                    fault_tolerant: false,
                },
                SegmentSpec {
                    name: "Branch".into(),
                    from: "ICA-MCA-ACA_L".into(),
                    to: "M1-M2_L".into(),
                    via: vec![],
                    fault_tolerant: false,
                },
                SegmentSpec {
                    name: "Optional".into(),
                    from: "ICA-MCA-ACA_L".into(),
                    to: "A1-A2_L".into(),
                    via: vec![],
                    fault_tolerant: true,
                },
            ],
            subnetworks: vec![SubnetworkSpec {
                name: "Tail".into(),
                roots: vec!["M1-M2_L".into()],
            }],
            mandatory: vec![
                "ICA_Root_L".into(),
                "ICA-MCA-ACA_L".into(),
                "M1-M2_L".into(),
            ],
            proximal_roots: vec!["ICA_Root_L".into()],
        }
    }

    fn toy_landmarks(net: &VesselFusedNetwork) -> LandmarkSet {
        let mut lm = LandmarkSet {
            version: 1,
            ..Default::default()
        };
        lm.assignments
            .insert("ICA_Root_L".into(), node_at(net, [1, 5, 0]));
        lm.assignments
            .insert("ICA-MCA-ACA_L".into(), node_at(net, [5, 5, 0]));
        lm.assignments
            .insert("M1-M2_L".into(), node_at(net, [9, 5, 0]));
        lm
    }

    #[test]
    fn default_config_covers_the_canonical_labels() {
        let c = ClassificationConfig::default();
        assert_eq!(c.labels().len(), 16);
        assert_eq!(c.segments.len(), 14);
        assert_eq!(c.segments.iter().filter(|s| s.fault_tolerant).count(), 7);
    }

    #[test]
    fn resolves_segments_and_marks_absences() {
        let net = plus();
        let table = apply_landmarks(&net, &toy_landmarks(&net), &toy_config()).unwrap();
        assert!(table.segment("Stem").unwrap().present);
        assert_eq!(table.segment("Stem").unwrap().path.len(), 1);
        assert!(table.segment("Branch").unwrap().present);
        assert!(!table.segment("Optional").unwrap().present);
        assert_eq!(
            table.presence(),
            BTreeMap::from([("Optional".to_string(), false)])
        );
        // M1-M2_L is an endpoint, so the distal tail is empty
        assert!(!table.subnetwork("Tail").unwrap().present);
        assert_eq!(table.subnetwork("Proximal").unwrap().traces.len(), 2);
    }

    #[test]
    fn distal_subnetwork_collects_reachable_traces() {
        let net = plus();
        let lm = toy_landmarks(&net);
        // root the tail at the centre; the two free arms hang from it
        let mut cfg = toy_config();
        cfg.subnetworks[0].roots = vec!["ICA-MCA-ACA_L".into()];
        let table = apply_landmarks(&net, &lm, &cfg).unwrap();
        assert_eq!(table.subnetwork("Tail").unwrap().traces.len(), 2);
        assert_eq!(table.subnetwork("Distal").unwrap().traces.len(), 2);
    }

    #[test]
    fn missing_mandatory_landmark_is_listed() {
        let net = plus();
        let mut lm = toy_landmarks(&net);
        lm.assignments.remove("M1-M2_L");
        match apply_landmarks(&net, &lm, &toy_config()) {
            Err(Error::IncompleteLandmarks(m)) => assert_eq!(m, vec!["M1-M2_L".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_node_names_the_label() {
        let net = plus();
        let mut lm = toy_landmarks(&net);
        lm.assignments.insert("A1-A2_L".into(), 999);
        match apply_landmarks(&net, &lm, &toy_config()) {
            Err(Error::UnknownNode { label, node }) => {
                assert_eq!((label.as_str(), node), ("A1-A2_L", 999))
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_node_is_invalid() {
        let net = plus();
        let mut lm = toy_landmarks(&net);
        lm.assignments
            .insert("A1-A2_L".into(), node_at(&net, [9, 5, 0]));
        assert!(matches!(
            lm.validate(&net, &toy_config()),
            Err(Error::InvalidLandmarks(_))
        ));
    }

    #[test]
    fn overlapping_segments_are_ambiguous() {
        let net = plus();
        let mut cfg = toy_config();
        cfg.segments.push(SegmentSpec {
            name: "Again".into(),
            from: "ICA_Root_L".into(),
            to: "ICA-MCA-ACA_L".into(),
            via: vec![],
            fault_tolerant: false,
        });
        assert!(matches!(
            apply_landmarks(&net, &toy_landmarks(&net), &cfg),
            Err(Error::Ambiguous(_))
        ));
    }

    #[test]
    fn deleted_edge_makes_optional_segment_absent_and_mandatory_fail() {
        let net = plus();
        let mut lm = toy_landmarks(&net);
        lm.assignments
            .insert("A1-A2_L".into(), node_at(&net, [5, 1, 0]));
        let table = apply_landmarks(&net, &lm, &toy_config()).unwrap();
        assert!(table.segment("Optional").unwrap().present);
        let arm = table.segment("Optional").unwrap().path[0].trace;
        lm.deleted_edges.push(arm);
        let table = apply_landmarks(&net, &lm, &toy_config()).unwrap();
        assert!(!table.segment("Optional").unwrap().present);

        let stem = table.segment("Stem").unwrap().path[0].trace;
        lm.deleted_edges.push(stem);
        assert!(matches!(
            apply_landmarks(&net, &lm, &toy_config()),
            Err(Error::Unresolved { .. })
        ));
    }

    #[test]
    fn positions_snap_to_nearest_node() {
        let net = plus();
        let mut lm = LandmarkSet::default();
        lm.positions.insert("BA-VA".into(), [5.4, 5.2, 0.0]);
        lm.positions.insert("PCA-BA".into(), [50.0, 50.0, 0.0]);
        let s = lm.snapped(&net, 2.0);
        assert_eq!(s.assignments.get("BA-VA"), Some(&node_at(&net, [5, 5, 0])));
        assert!(!s.assignments.contains_key("PCA-BA"));
    }

    #[test]
    fn deterministic_and_json_round_trip() {
        let net = plus();
        let lm = toy_landmarks(&net);
        let a = apply_landmarks(&net, &lm, &toy_config()).unwrap();
        let b = apply_landmarks(&net, &lm, &toy_config()).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let back = LandmarkSet::from_json(&lm.to_json()).unwrap();
        assert_eq!(back, lm);
        let parsed: LandmarkSet =
            serde_json::from_str(r#"{"assignments":{"BA-VA":3},"deleted_edges":[1]}"#).unwrap();
        assert_eq!(parsed.version, 1);
    }
}
