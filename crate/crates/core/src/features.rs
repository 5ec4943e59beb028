//! Per-artery morphometry over polylines with radii, and box-counting
//! fractal dimension.
//!
//! Points are `[x, y, z, r]` in mm. Each consecutive pair is treated as a
//! truncated cone.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::VesselFusedNetwork;
use crate::landmarks::{DynamicGraphTable, Step};

fn dist3(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn check_radii(points: &[[f64; 4]]) -> Result<()> {
    match points
        .iter()
        .position(|p| !(p[3] > 0.0 && p[3].is_finite()))
    {
        Some(i) => Err(Error::Parameter(format!(
            "point {i} has radius {}",
            points[i][3]
        ))),
        None => Ok(()),
    }
}

pub fn polyline_length(points: &[[f64; 4]]) -> f64 {
    if points.len() < 2 {
        if !points.is_empty() {
            log::warn!("single-point trace contributes zero length");
        }
        return 0.0;
    }
    points.windows(2).map(|w| dist3(&w[0], &w[1])).sum()
}

/// Sum of truncated-cone volumes between consecutive points.
pub fn segment_volume(points: &[[f64; 4]]) -> Result<f64> {
    check_radii(points)?;
    Ok(points
        .windows(2)
        .map(|w| {
            let (h, r1, r2) = (dist3(&w[0], &w[1]), w[0][3], w[1][3]);
            std::f64::consts::PI * h / 3.0 * (r1 * r1 + r1 * r2 + r2 * r2)
        })
        .sum())
}

/// Mean of the circular cross-section area over the points.
pub fn mean_section_area(points: &[[f64; 4]]) -> Result<f64> {
    check_radii(points)?;
    if points.is_empty() {
        return Err(Error::Insufficient("no points".into()));
    }
    Ok(points
        .iter()
        .map(|p| std::f64::consts::PI * p[3] * p[3])
        .sum::<f64>()
        / points.len() as f64)
}

/// Sum of lateral truncated-cone areas between consecutive points.
pub fn surface_area(points: &[[f64; 4]]) -> Result<f64> {
    check_radii(points)?;
    Ok(points
        .windows(2)
        .map(|w| {
            let (h, r1, r2) = (dist3(&w[0], &w[1]), w[0][3], w[1][3]);
            std::f64::consts::PI * (r1 + r2) * (h * h + (r1 - r2).powi(2)).sqrt()
        })
        .sum())
}

/// Path length over the straight distance between the path's ends.
pub fn tortuosity(points: &[[f64; 4]]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::Undefined("tortuosity needs two points".into()));
    }
    let chord = dist3(&points[0], &points[points.len() - 1]);
    let length = polyline_length(points);
    if chord == 0.0 || length == 0.0 {
        return Err(Error::Undefined("closed or zero-length path".into()));
    }
    Ok(length / chord)
}

/// Box-counting dimension: least-squares slope of ln N(s) against ln(1/s)
/// for s = 1, 2, 4, ..., 2^(floor(log2 min dim) - 1), boxes anchored at the
/// origin.
pub fn fractal_dimension(voxels: &[[i64; 3]], dims: [usize; 3]) -> Result<f64> {
    box_dimension(voxels, dims, false)
}

/// Box counting where each N(s) is the minimum over the eight grid offsets
/// of 0 or s/2 per axis. Reduces the staircase bias of origin anchoring.
pub fn fractal_dimension_offset_min(voxels: &[[i64; 3]], dims: [usize; 3]) -> Result<f64> {
    box_dimension(voxels, dims, true)
}

fn dedup_boxes(mut v: Vec<[i64; 3]>) -> Vec<[i64; 3]> {
    v.sort_unstable();
    v.dedup();
    v
}

fn box_dimension(voxels: &[[i64; 3]], dims: [usize; 3], offsets: bool) -> Result<f64> {
    let mut boxes = dedup_boxes(voxels.to_vec());
    if boxes.len() < 2 {
        return Err(Error::Insufficient(
            "box counting needs two occupied voxels".into(),
        ));
    }
    let min_dim = *dims.iter().min().unwrap();
    let levels = if min_dim == 0 {
        0
    } else {
        min_dim.ilog2() as usize
    };
    if levels < 3 {
        return Err(Error::Insufficient(format!(
            "grid min dimension {min_dim} gives {levels} scales"
        )));
    }
    let mut xs = Vec::with_capacity(levels);
    let mut ys = Vec::with_capacity(levels);
    xs.push(0.0);
    ys.push((boxes.len() as f64).ln());
    // boxes of size s hold the anchored boxes of size s/2; shifting by s/2
    // before dividing by s equals adding one before halving those indices
    for e in 1..levels {
        let n = if offsets {
            (1..8)
                .map(|o: i64| {
                    let bit = [o & 1, o >> 1 & 1, o >> 2 & 1];
                    dedup_boxes(
                        boxes
                            .iter()
                            .map(|c| [0, 1, 2].map(|a| (c[a] + bit[a]).div_euclid(2)))
                            .collect(),
                    )
                    .len()
                })
                .min()
                .unwrap()
        } else {
            usize::MAX
        };
        boxes = dedup_boxes(boxes.iter().map(|c| c.map(|v| v.div_euclid(2))).collect());
        xs.push(-((1i64 << e) as f64).ln());
        ys.push((n.min(boxes.len()) as f64).ln());
    }
    Ok(least_squares_slope(&xs, &ys))
}

fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// A graph whose edges carry polylines; used for tortuosity of trees.
#[derive(Clone, Debug, Default)]
pub struct PathGraph {
    /// (node a, node b, points from a to b)
    pub edges: Vec<(usize, usize, Vec<[f64; 4]>)>,
}

#[derive(PartialEq)]
struct Item(f64, usize);
impl Eq for Item {}
impl Ord for Item {
    fn cmp(&self, o: &Self) -> Ordering {
        o.0.total_cmp(&self.0).then_with(|| o.1.cmp(&self.1))
    }
}
impl PartialOrd for Item {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

impl PathGraph {
    /// Polyline from the nearest root to the node farthest from all roots
    /// along shortest paths (ties: smaller node id).
    pub fn longest_root_path(&self, roots: &[usize]) -> Option<Vec<[f64; 4]>> {
        let mut adj: BTreeMap<usize, Vec<(usize, usize, bool)>> = BTreeMap::new();
        for (i, (a, b, _)) in self.edges.iter().enumerate() {
            if a == b {
                continue;
            }
            adj.entry(*a).or_default().push((*b, i, true));
            adj.entry(*b).or_default().push((*a, i, false));
        }
        let mut dist: HashMap<usize, f64> = HashMap::new();
        let mut via: HashMap<usize, (usize, usize, bool)> = HashMap::new();
        let mut heap = BinaryHeap::new();
        for &r in roots {
            if adj.contains_key(&r) {
                dist.insert(r, 0.0);
                heap.push(Item(0.0, r));
            }
        }
        let mut done = HashSet::new();
        while let Some(Item(d, v)) = heap.pop() {
            if !done.insert(v) {
                continue;
            }
            for &(w, e, fwd) in &adj[&v] {
                let nd = d + polyline_length(&self.edges[e].2);
                if dist.get(&w).is_none_or(|&old| nd < old) {
                    dist.insert(w, nd);
                    via.insert(w, (v, e, fwd));
                    heap.push(Item(nd, w));
                }
            }
        }
        let (&far, _) = dist
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1).then_with(|| b.0.cmp(a.0)))?;
        let mut chain = Vec::new();
        let mut v = far;
        while let Some(&(p, e, fwd)) = via.get(&v) {
            chain.push((e, fwd));
            v = p;
        }
        if chain.is_empty() {
            return None;
        }
        chain.reverse();
        Some(concat_steps(
            chain
                .iter()
                .map(|&(e, fwd)| (self.edges[e].2.as_slice(), fwd)),
        ))
    }
}

/// Join oriented polylines, dropping the repeated joint points.
pub fn concat_steps<'a>(parts: impl Iterator<Item = (&'a [[f64; 4]], bool)>) -> Vec<[f64; 4]> {
    let mut out: Vec<[f64; 4]> = Vec::new();
    for (pts, forward) in parts {
        let oriented: Vec<[f64; 4]> = if forward {
            pts.to_vec()
        } else {
            pts.iter().rev().copied().collect()
        };
        let skip = usize::from(!out.is_empty());
        out.extend(oriented.into_iter().skip(skip));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub artery: String,
    pub present: bool,
    pub total_length: Option<f64>,
    pub mean_radius: Option<f64>,
    pub total_volume: Option<f64>,
    pub branch_count: Option<usize>,
    pub mean_section_area: Option<f64>,
    pub surface_area: Option<f64>,
    pub tortuosity: Option<f64>,
    pub fractal_dimension: Option<f64>,
}

/// Feature names in CSV column order.
pub const FEATURES: [&str; 8] = [
    "total_length",
    "mean_radius",
    "total_volume",
    "branch_count",
    "mean_section_area",
    "surface_area",
    "tortuosity",
    "fractal_dimension",
];

impl FeatureRow {
    pub fn absent(artery: &str) -> Self {
        FeatureRow {
            artery: artery.into(),
            present: false,
            total_length: None,
            mean_radius: None,
            total_volume: None,
            branch_count: None,
            mean_section_area: None,
            surface_area: None,
            tortuosity: None,
            fractal_dimension: None,
        }
    }

    /// Feature value by name.
    pub fn get(&self, feature: &str) -> Option<f64> {
        match feature {
            "total_length" => self.total_length,
            "mean_radius" => self.mean_radius,
            "total_volume" => self.total_volume,
            "branch_count" => self.branch_count.map(|b| b as f64),
            "mean_section_area" => self.mean_section_area,
            "surface_area" => self.surface_area,
            "tortuosity" => self.tortuosity,
            "fractal_dimension" => self.fractal_dimension,
            _ => None,
        }
    }

    /// Aggregate the morphometric features of a set of polylines.
    /// Tortuosity and fractal dimension are supplied by the caller.
    pub fn from_polylines(
        artery: &str,
        polylines: &[Vec<[f64; 4]>],
        tortuosity: Option<f64>,
        fractal_dimension: Option<f64>,
    ) -> Result<Self> {
        let polylines: Vec<&Vec<[f64; 4]>> = polylines.iter().filter(|p| !p.is_empty()).collect();
        if polylines.is_empty() {
            return Ok(FeatureRow::absent(artery));
        }
        let mut length = 0.0;
        let mut volume = 0.0;
        let mut surface = 0.0;
        let mut radius_sum = 0.0;
        let mut area_sum = 0.0;
        let mut count = 0usize;
        for p in &polylines {
            length += polyline_length(p);
            volume += segment_volume(p)?;
            surface += surface_area(p)?;
            radius_sum += p.iter().map(|q| q[3]).sum::<f64>();
            area_sum += mean_section_area(p)? * p.len() as f64;
            count += p.len();
        }
        Ok(FeatureRow {
            artery: artery.into(),
            present: true,
            total_length: Some(length),
            mean_radius: Some(radius_sum / count as f64),
            total_volume: Some(volume),
            branch_count: Some(polylines.len()),
            mean_section_area: Some(area_sum / count as f64),
            surface_area: Some(surface),
            tortuosity,
            fractal_dimension,
        })
    }
}

pub fn features_csv(rows: &[FeatureRow]) -> String {
    let mut s = String::from("artery,present");
    for f in FEATURES {
        s.push(',');
        s.push_str(f);
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{}", r.artery, r.present);
        for f in FEATURES {
            s.push(',');
            match (f, r.get(f)) {
                ("branch_count", Some(v)) => {
                    let _ = write!(s, "{}", v as usize);
                }
                (_, Some(v)) => {
                    let _ = write!(s, "{v:.6}");
                }
                (_, None) => {}
            }
        }
        s.push('\n');
    }
    s
}

pub fn parse_features_csv(text: &str) -> Result<Vec<FeatureRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format {
        field: "header",
        reason: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() != 2 + FEATURES.len() || cols[0] != "artery" {
        return Err(Error::Format {
            field: "header",
            reason: header.into(),
        });
    }
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols.len() {
            return Err(Error::Format {
                field: "row",
                reason: line.into(),
            });
        }
        let num = |i: usize| -> Result<Option<f64>> {
            if f[i].is_empty() {
                Ok(None)
            } else {
                f[i].parse().map(Some).map_err(|_| Error::Format {
                    field: "value",
                    reason: f[i].into(),
                })
            }
        };
        let mut row = FeatureRow::absent(f[0]);
        row.present = f[1] == "true";
        row.total_length = num(2)?;
        row.mean_radius = num(3)?;
        row.total_volume = num(4)?;
        row.branch_count = num(5)?.map(|v| v as usize);
        row.mean_section_area = num(6)?;
        row.surface_area = num(7)?;
        row.tortuosity = num(8)?;
        row.fractal_dimension = num(9)?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_features(
    rows: &[FeatureRow],
    csv: impl AsRef<Path>,
    json: Option<&Path>,
) -> Result<()> {
    std::fs::write(csv.as_ref(), features_csv(rows)).map_err(|e| Error::io(csv.as_ref(), e))?;
    if let Some(j) = json {
        let text = serde_json::to_string_pretty(rows).expect("rows serialize");
        std::fs::write(j, text).map_err(|e| Error::io(j, e))?;
    }
    Ok(())
}

fn trace_voxels(net: &VesselFusedNetwork, traces: &[usize]) -> Vec<[i64; 3]> {
    traces
        .iter()
        .filter_map(|&t| net.trace(t))
        .flat_map(|t| {
            t.voxels
                .iter()
                .map(|&v| net.grid().coord(v).map(|c| c as i64))
        })
        .collect()
}

/// Gaussian smoothing of the coordinates along arclength. The window at
/// each point is cut symmetrically to its distance from the nearer end, so
/// both endpoints stay fixed. Radii are left alone.
pub fn smooth_polyline(points: &[[f64; 4]], sigma_mm: f64) -> Vec<[f64; 4]> {
    if !(sigma_mm > 0.0) || points.len() < 3 {
        return points.to_vec();
    }
    let mut s = vec![0.0; points.len()];
    for i in 1..points.len() {
        s[i] = s[i - 1] + dist3(&points[i - 1], &points[i]);
    }
    let total = s[s.len() - 1];
    let mut lo = 0;
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let h = (3.0 * sigma_mm).min(s[i]).min(total - s[i]);
            while s[lo] < s[i] - h - 1e-12 {
                lo += 1;
            }
            let mut acc = [0.0; 3];
            let mut wsum = 0.0;
            for j in lo..points.len() {
                let d = s[j] - s[i];
                if d > h + 1e-12 {
                    break;
                }
                let w = (-0.5 * (d / sigma_mm).powi(2)).exp();
                for a in 0..3 {
                    acc[a] += w * points[j][a];
                }
                wsum += w;
            }
            [acc[0] / wsum, acc[1] / wsum, acc[2] / wsum, p[3]]
        })
        .collect()
}

/// How trace geometry is prepared before measurement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureOptions {
    /// Gaussian smoothing of trace coordinates (mm along the trace); zero
    /// measures the raw voxel chain.
    pub smoothing_mm: f64,
}

impl Default for FeatureOptions {
    fn default() -> Self {
        FeatureOptions { smoothing_mm: 0.0 }
    }
}

fn step_points(traces: &HashMap<usize, Vec<[f64; 4]>>, path: &[Step]) -> Vec<[f64; 4]> {
    concat_steps(
        path.iter()
            .map(|s| (traces[&s.trace].as_slice(), s.forward)),
    )
}

/// One row per segment and per subnetwork of the table.
pub fn extract_features(
    table: &DynamicGraphTable,
    net: &VesselFusedNetwork,
    opts: &FeatureOptions,
) -> Result<Vec<FeatureRow>> {
    let dims = net.grid().dims;
    let fractal = |traces: &[usize]| fractal_dimension(&trace_voxels(net, traces), dims).ok();
    let points: HashMap<usize, Vec<[f64; 4]>> = net
        .traces()
        .iter()
        .map(|t| {
            (
                t.id,
                smooth_polyline(&net.trace_points(t), opts.smoothing_mm),
            )
        })
        .collect();
    let polylines = |traces: &[usize]| -> Vec<Vec<[f64; 4]>> {
        traces
            .iter()
            .filter_map(|t| points.get(t))
            .cloned()
            .collect()
    };
    let mut rows = Vec::new();
    for seg in &table.segments {
        if !seg.present {
            rows.push(FeatureRow::absent(&seg.name));
            continue;
        }
        let traces = seg.traces();
        let tort = tortuosity(&step_points(&points, &seg.path)).ok();
        rows.push(FeatureRow::from_polylines(
            &seg.name,
            &polylines(&traces),
            tort,
            fractal(&traces),
        )?);
    }
    for sub in &table.subnetworks {
        if !sub.present {
            rows.push(FeatureRow::absent(&sub.name));
            continue;
        }
        let graph = PathGraph {
            edges: sub
                .traces
                .iter()
                .filter_map(|&t| net.trace(t))
                .map(|t| (t.start, t.end, points[&t.id].clone()))
                .collect(),
        };
        let tort = graph
            .longest_root_path(&sub.roots)
            .and_then(|p| tortuosity(&p).ok());
        rows.push(FeatureRow::from_polylines(
            &sub.name,
            &polylines(&sub.traces),
            tort,
            fractal(&sub.traces),
        )?);
    }
    Ok(rows)
}
