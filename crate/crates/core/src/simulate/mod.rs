//! Synthetic artery volumes with known per-artery features.
//!
//! Arteries are curves from a Fourier dictionary stretched between labeled
//! landmark positions, rasterized with a radius profile, and painted with
//! Gaussian vessel and background intensities.

pub mod fourier;
pub mod orient;
pub mod phantom;
pub mod raster;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{fractal_dimension, FeatureRow, PathGraph};
use crate::landmarks::{ClassificationConfig, LandmarkSet};
use crate::volume::{BinaryVolume, Grid, Volume3D};

pub use fourier::{decode_fourier, encode_fourier, encode_fourier_detrended, FourierArtery};
pub use orient::{orient_trace, OrientationPlane, OrientedTrace};
pub use raster::{radii_along, rasterize_into, rasterize_tube, RadiusProfile};

/// Labeled node positions in mm.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LandmarkGraph {
    pub nodes: BTreeMap<String, [f64; 3]>,
}

impl LandmarkGraph {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FbdEntry {
    #[serde(flatten)]
    pub artery: FourierArtery,
    #[serde(default)]
    pub default_radius_profile: Option<RadiusProfile>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FourierDictionary {
    pub entries: BTreeMap<String, FbdEntry>,
}

impl FourierDictionary {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(self, path.as_ref())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArterySpec {
    pub name: String,
    pub start_label: String,
    pub end_label: String,
    #[serde(default)]
    pub radius_profile: Option<RadiusProfile>,
    pub fbd_key: String,
    /// Feature row (segment or subnetwork) this artery counts towards;
    /// defaults to the artery name.
    #[serde(default)]
    pub row: Option<String>,
    /// Hint for the plane normal before jitter.
    #[serde(default)]
    pub normal: Option<[f64; 3]>,
}

impl ArterySpec {
    pub fn row(&self) -> &str {
        self.row.as_deref().unwrap_or(&self.name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityModel {
    pub mu_b: f64,
    pub sigma_b: f64,
    pub mu_v: f64,
    pub sigma_v: f64,
}

impl Default for IntensityModel {
    fn default() -> Self {
        IntensityModel {
            mu_b: 100.0,
            sigma_b: 20.0,
            mu_v: 200.0,
            sigma_v: 20.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

fn default_jitter() -> f64 {
    15.0
}

fn default_density() -> f64 {
    20.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub grid: GridSpec,
    pub arteries: Vec<ArterySpec>,
    #[serde(default)]
    pub intensity: IntensityModel,
    #[serde(default = "default_jitter")]
    pub jitter_deg: f64,
    #[serde(default)]
    pub seed: u64,
    /// Generator samples per mm of centreline.
    #[serde(default = "default_density")]
    pub samples_per_mm: f64,
    #[serde(default)]
    pub classification: Option<ClassificationConfig>,
}

impl SimulationConfig {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(self, path.as_ref())
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.grid.dims, self.grid.spacing)
    }

    pub fn classification(&self) -> ClassificationConfig {
        self.classification.clone().unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedArtery {
    pub name: String,
    pub row: String,
    pub start_label: String,
    pub end_label: String,
    /// Centreline at uniform arclength with radii, mm.
    pub points: Vec<[f64; 4]>,
    pub angle: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArteryRecord {
    pub name: String,
    pub row: String,
    pub start_label: String,
    pub end_label: String,
    pub jitter_rad: f64,
    pub length_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub rows: Vec<FeatureRow>,
    pub graph: LandmarkGraph,
    pub arteries: Vec<ArteryRecord>,
}

impl GroundTruth {
    pub fn row(&self, name: &str) -> Option<&FeatureRow> {
        self.rows.iter().find(|r| r.artery == name)
    }

    /// CSV with the feature schema plus a provenance JSON next to it.
    pub fn write(&self, csv: impl AsRef<Path>, provenance: impl AsRef<Path>) -> Result<()> {
        let csv = csv.as_ref();
        std::fs::write(csv, crate::features::features_csv(&self.rows))
            .map_err(|e| Error::io(csv, e))?;
        write_json(self, provenance.as_ref())
    }
}

pub struct Simulation {
    pub volume: Volume3D,
    pub binary: BinaryVolume,
    pub arteries: Vec<GeneratedArtery>,
    pub ground_truth: GroundTruth,
}

fn resample_uniform(dense: &[[f64; 3]], step: f64) -> Vec<[f64; 3]> {
    let mut acc = vec![0.0; dense.len()];
    for i in 1..dense.len() {
        acc[i] = acc[i - 1]
            + (0..3)
                .map(|a| (dense[i][a] - dense[i - 1][a]).powi(2))
                .sum::<f64>()
                .sqrt();
    }
    let total = acc[acc.len() - 1];
    let m = ((total / step).ceil() as usize).max(1);
    let mut out = Vec::with_capacity(m + 1);
    let mut j = 0;
    for k in 0..=m {
        let t = total * k as f64 / m as f64;
        while j + 2 < dense.len() && acc[j + 1] < t {
            j += 1;
        }
        let span = acc[j + 1] - acc[j];
        let f = if span > 0.0 {
            ((t - acc[j]) / span).clamp(0.0, 1.0)
        } else {
            0.0
        };
        out.push([0, 1, 2].map(|a| dense[j][a] + f * (dense[j + 1][a] - dense[j][a])));
    }
    out[0] = dense[0];
    out[m] = dense[dense.len() - 1];
    out
}

/// The centreline as a one-voxel-thick 26-connected chain: walk the
/// voxels nearest to the samples and from each kept voxel jump to the last
/// later voxel still 26-adjacent to it.
pub fn centreline_voxels(points: &[[f64; 4]], grid: &Grid) -> Vec<[i64; 3]> {
    let mut seq: Vec<[i64; 3]> = points
        .iter()
        .map(|p| {
            [0, 1, 2].map(|a| {
                ((p[a] / grid.spacing[a]).round() as i64).clamp(0, grid.dims[a] as i64 - 1)
            })
        })
        .collect();
    seq.dedup();
    let adjacent = |a: [i64; 3], b: [i64; 3]| (0..3).all(|k| (a[k] - b[k]).abs() <= 1);
    let mut chain = Vec::new();
    let mut i = 0;
    while i < seq.len() {
        chain.push(seq[i]);
        let mut j = i + 1;
        while j + 1 < seq.len() && adjacent(seq[i], seq[j + 1]) {
            j += 1;
        }
        i = j;
    }
    chain.sort_unstable();
    chain.dedup();
    chain
}

/// Features of one generated artery, on the generator's own sampling.
pub fn ground_truth_features(name: &str, points: &[[f64; 4]], grid: &Grid) -> Result<FeatureRow> {
    let tort = crate::features::tortuosity(points).ok();
    let fd = fractal_dimension(&centreline_voxels(points, grid), grid.dims).ok();
    FeatureRow::from_polylines(name, &[points.to_vec()], tort, fd)
}

fn group_row<'a>(
    name: &str,
    members: &[&'a GeneratedArtery],
    roots: &[String],
    grid: &Grid,
) -> Result<FeatureRow> {
    if members.is_empty() {
        return Ok(FeatureRow::absent(name));
    }
    let mut ids: HashMap<&str, usize> = HashMap::new();
    let mut graph = PathGraph::default();
    for a in members {
        let mut id = |l: &'a str| {
            let n = ids.len();
            *ids.entry(l).or_insert(n)
        };
        let (s, e) = (id(&a.start_label), id(&a.end_label));
        graph.edges.push((s, e, a.points.clone()));
    }
    let root_ids: Vec<usize> = roots
        .iter()
        .filter_map(|r| ids.get(r.as_str()).copied())
        .collect();
    let tort = graph
        .longest_root_path(&root_ids)
        .and_then(|p| crate::features::tortuosity(&p).ok());
    let voxels: Vec<[i64; 3]> = members
        .iter()
        .flat_map(|a| centreline_voxels(&a.points, grid))
        .collect();
    let fd = fractal_dimension(&voxels, grid.dims).ok();
    let polylines: Vec<Vec<[f64; 4]>> = members.iter().map(|a| a.points.clone()).collect();
    FeatureRow::from_polylines(name, &polylines, tort, fd)
}

/// Rows in the order the feature extractor emits them: segments,
/// subnetworks, then `Proximal` and `Distal`.
pub fn ground_truth_rows(
    arteries: &[GeneratedArtery],
    classification: &ClassificationConfig,
    grid: &Grid,
) -> Result<Vec<FeatureRow>> {
    let seg_names: BTreeSet<&str> = classification
        .segments
        .iter()
        .map(|s| s.name.as_str())
        .collect();
    let sub_names: BTreeSet<&str> = classification
        .subnetworks
        .iter()
        .map(|s| s.name.as_str())
        .collect();
    if let Some(a) = arteries
        .iter()
        .find(|a| !seg_names.contains(a.row.as_str()) && !sub_names.contains(a.row.as_str()))
    {
        return Err(Error::Consistency(format!(
            "artery `{}` counts towards unknown row `{}`",
            a.name, a.row
        )));
    }
    let of =
        |row: &str| -> Vec<&GeneratedArtery> { arteries.iter().filter(|a| a.row == row).collect() };
    let mut rows = Vec::new();
    for s in &classification.segments {
        rows.push(group_row(
            &s.name,
            &of(&s.name),
            std::slice::from_ref(&s.from),
            grid,
        )?);
    }
    for s in &classification.subnetworks {
        rows.push(group_row(&s.name, &of(&s.name), &s.roots, grid)?);
    }
    let proximal: Vec<&GeneratedArtery> = arteries
        .iter()
        .filter(|a| seg_names.contains(a.row.as_str()))
        .collect();
    rows.push(group_row(
        "Proximal",
        &proximal,
        &classification.proximal_roots,
        grid,
    )?);
    let distal: Vec<&GeneratedArtery> = arteries
        .iter()
        .filter(|a| sub_names.contains(a.row.as_str()))
        .collect();
    let distal_roots: Vec<String> = classification
        .subnetworks
        .iter()
        .flat_map(|s| s.roots.clone())
        .collect();
    rows.push(group_row("Distal", &distal, &distal_roots, grid)?);
    Ok(rows)
}

/// Counter-based noise: chunk `c` draws from stream `c` of the seed, so the
/// result does not depend on how chunks are scheduled.
pub fn synthesize_intensities(
    binary: &BinaryVolume,
    model: &IntensityModel,
    seed: u64,
) -> Result<Volume3D> {
    const CHUNK: usize = 1 << 14;
    let bg = Normal::new(model.mu_b, model.sigma_b)
        .map_err(|e| Error::Parameter(format!("background: {e}")))?;
    let fg = Normal::new(model.mu_v, model.sigma_v)
        .map_err(|e| Error::Parameter(format!("vessel: {e}")))?;
    let mut data = vec![0.0; binary.grid().len()];
    data.par_chunks_mut(CHUNK).enumerate().for_each(|(c, out)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        let base = c * CHUNK;
        for (i, v) in out.iter_mut().enumerate() {
            let d = if binary.get(base + i) { &fg } else { &bg };
            *v = d.sample(&mut rng);
        }
    });
    Volume3D::new(*binary.grid(), data)
}

pub fn simulate_subject(
    graph: &LandmarkGraph,
    fbd: &FourierDictionary,
    config: &SimulationConfig,
    seed: u64,
) -> Result<Simulation> {
    let grid = config.grid()?;
    if !(config.samples_per_mm > 0.0) {
        return Err(Error::Parameter("samples_per_mm must be positive".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = config.arteries.iter().map(|_| master.random()).collect();
    let noise_seed: u64 = master.random();
    let jitter = config.jitter_deg.to_radians();

    let arteries: Vec<GeneratedArtery> = config
        .arteries
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(spec, &s)| {
            let pos = |l: &str| {
                graph.nodes.get(l).copied().ok_or_else(|| {
                    Error::InvalidLandmarks(format!(
                        "artery `{}` refers to unknown landmark `{l}`",
                        spec.name
                    ))
                })
            };
            let (start, end) = (pos(&spec.start_label)?, pos(&spec.end_label)?);
            let entry = fbd
                .entries
                .get(&spec.fbd_key)
                .ok_or_else(|| Error::Format {
                    field: "fbd_key",
                    reason: format!("no dictionary entry `{}`", spec.fbd_key),
                })?;
            let profile = spec
                .radius_profile
                .clone()
                .or_else(|| entry.default_radius_profile.clone())
                .ok_or_else(|| {
                    Error::Parameter(format!("artery `{}` has no radius profile", spec.name))
                })?;
            let plane = OrientationPlane::from_chord(start, end, spec.normal, jitter)?;
            let chord = (0..3)
                .map(|a| (end[a] - start[a]).powi(2))
                .sum::<f64>()
                .sqrt();
            let n = ((chord * config.samples_per_mm * 4.0).ceil() as usize).max(200);
            let oriented = orient_trace(&entry.artery, &plane, start, end, s, n)?;
            let uniform = resample_uniform(&oriented.points, 1.0 / config.samples_per_mm);
            Ok(GeneratedArtery {
                name: spec.name.clone(),
                row: spec.row().to_string(),
                start_label: spec.start_label.clone(),
                end_label: spec.end_label.clone(),
                points: radii_along(&uniform, &profile),
                angle: oriented.angle,
            })
        })
        .collect::<Result<_>>()?;

    let mut binary = BinaryVolume::empty(grid);
    for a in &arteries {
        rasterize_into(&mut binary, &a.points).map_err(|e| match e {
            Error::OutOfBounds { index } => {
                log::error!("artery `{}` leaves the grid at point {index}", a.name);
                Error::OutOfBounds { index }
            }
            e => e,
        })?;
    }
    let volume = synthesize_intensities(&binary, &config.intensity, noise_seed)?;
    let rows = ground_truth_rows(&arteries, &config.classification(), &grid)?;
    let records = arteries
        .iter()
        .map(|a| ArteryRecord {
            name: a.name.clone(),
            row: a.row.clone(),
            start_label: a.start_label.clone(),
            end_label: a.end_label.clone(),
            jitter_rad: a.angle,
            length_mm: crate::features::polyline_length(&a.points),
        })
        .collect();
    Ok(Simulation {
        volume,
        binary,
        arteries,
        ground_truth: GroundTruth {
            seed,
            rows,
            graph: graph.clone(),
            arteries: records,
        },
    })
}

impl Simulation {
    /// Degree of each landmark in the artery graph.
    pub fn degrees(&self) -> BTreeMap<&str, usize> {
        let mut d: BTreeMap<&str, usize> = BTreeMap::new();
        for a in &self.arteries {
            *d.entry(&a.start_label).or_default() += 1;
            *d.entry(&a.end_label).or_default() += 1;
        }
        d
    }

    /// Node and trace counts of the network the skeleton should reproduce:
    /// degree-2 landmarks dissolve into the trace running through them.
    pub fn expected_network_counts(&self) -> (usize, usize) {
        let deg = self.degrees();
        let pass_through = deg.values().filter(|&&d| d == 2).count();
        (deg.len() - pass_through, self.arteries.len() - pass_through)
    }

    /// Landmark positions for the canonical labels that become graph nodes.
    pub fn landmark_file(&self, classification: &ClassificationConfig) -> LandmarkSet {
        let known = classification.labels();
        let deg = self.degrees();
        let positions = self
            .ground_truth
            .graph
            .nodes
            .iter()
            .filter(|(l, _)| {
                known.contains(l.as_str()) && deg.get(l.as_str()).is_some_and(|&d| d != 2)
            })
            .map(|(l, p)| (l.clone(), *p))
            .collect();
        LandmarkSet {
            positions,
            version: 1,
            ..LandmarkSet::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (LandmarkGraph, FourierDictionary, SimulationConfig) {
        let mut graph = LandmarkGraph::default();
        graph.nodes.insert("a".into(), [5.0, 10.0, 10.0]);
        graph.nodes.insert("b".into(), [15.0, 10.0, 10.0]);
        graph.nodes.insert("c".into(), [15.0, 20.0, 12.0]);
        let mut fbd = FourierDictionary::default();
        fbd.entries.insert(
            "line".into(),
            FbdEntry {
                artery: FourierArtery::straight(),
                default_radius_profile: None,
            },
        );
        let wave = FourierArtery {
            order: 1,
            coeffs_u: vec![0.0; 3],
            coeffs_v: vec![0.0, 0.0, 0.1],
            trend_u: [0.0, 1.0],
            trend_v: [0.0; 2],
        };
        fbd.entries.insert(
            "wave".into(),
            FbdEntry {
                artery: wave,
                default_radius_profile: Some(RadiusProfile::constant(1.0).unwrap()),
            },
        );
        let spec = |name: &str, s: &str, e: &str, key: &str, r: Option<f64>| ArterySpec {
            name: name.into(),
            start_label: s.into(),
            end_label: e.into(),
            radius_profile: r.map(|r| RadiusProfile::constant(r).unwrap()),
            fbd_key: key.into(),
            row: None,
            normal: None,
        };
        let mut classification = ClassificationConfig::default();
        classification.segments.retain(|_| false);
        classification.subnetworks = vec![
            crate::landmarks::SubnetworkSpec {
                name: "one".into(),
                roots: vec!["a".into()],
            },
            crate::landmarks::SubnetworkSpec {
                name: "two".into(),
                roots: vec!["b".into()],
            },
        ];
        let config = SimulationConfig {
            grid: GridSpec {
                dims: [48, 48, 48],
                spacing: [0.5; 3],
            },
            arteries: vec![
                spec("one", "a", "b", "line", Some(1.5)),
                spec("two", "b", "c", "wave", None),
            ],
            intensity: IntensityModel::default(),
            jitter_deg: 15.0,
            seed: 0,
            samples_per_mm: 20.0,
            classification: Some(classification),
        };
        (graph, fbd, config)
    }

    #[test]
    fn two_artery_toy() {
        let (g, f, c) = toy();
        let sim = simulate_subject(&g, &f, &c, 7).unwrap();
        let one = sim.ground_truth.row("one").unwrap();
        assert_eq!(one.tortuosity, Some(1.0));
        assert!((one.total_length.unwrap() - 10.0).abs() < 1e-12);
        let vol = std::f64::consts::PI * 1.5 * 1.5 * 10.0;
        assert!((one.total_volume.unwrap() - vol).abs() < 1e-9);
        assert!(sim.ground_truth.row("two").unwrap().tortuosity.unwrap() > 1.0);
        // binary volume is the union of the two tubes
        let grid = c.grid().unwrap();
        let mut union = BinaryVolume::empty(grid);
        for a in &sim.arteries {
            union
                .union_with(&{
                    let mut b = BinaryVolume::empty(grid);
                    rasterize_into(&mut b, &a.points).unwrap();
                    b
                })
                .unwrap();
        }
        assert_eq!(union, sim.binary);
        // b has degree 2, so a-b-c is one trace
        assert_eq!(sim.expected_network_counts(), (2, 1));
    }

    #[test]
    fn seeds_change_shapes_but_not_endpoints() {
        let (g, f, c) = toy();
        let a = simulate_subject(&g, &f, &c, 1).unwrap();
        let b = simulate_subject(&g, &f, &c, 2).unwrap();
        let again = simulate_subject(&g, &f, &c, 1).unwrap();
        assert_eq!(a.arteries, again.arteries);
        assert_eq!(a.volume, again.volume);
        assert_ne!(a.arteries[1].points, b.arteries[1].points);
        for (x, y) in a.arteries.iter().zip(&b.arteries) {
            assert_eq!(x.points[0][..3], y.points[0][..3]);
            assert_eq!(x.points.last().unwrap()[..3], y.points.last().unwrap()[..3]);
        }
    }

    #[test]
    fn ground_truth_matches_feature_formulas() {
        let (g, f, c) = toy();
        let sim = simulate_subject(&g, &f, &c, 3).unwrap();
        let a = &sim.arteries[1];
        let grid = c.grid().unwrap();
        let gt = ground_truth_features("two", &a.points, &grid).unwrap();
        let direct = FeatureRow::from_polylines(
            "two",
            &[a.points.clone()],
            crate::features::tortuosity(&a.points).ok(),
            gt.fractal_dimension,
        )
        .unwrap();
        for feat in crate::features::FEATURES {
            let (x, y) = (gt.get(feat).unwrap(), direct.get(feat).unwrap());
            assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0));
        }
        let row = sim.ground_truth.row("two").unwrap();
        assert!((row.total_length.unwrap() - gt.total_length.unwrap()).abs() < 1e-9);
    }

    #[test]
    fn sinusoid_length_matches_quadrature() {
        // u = s, v = 0.1 sin(2πs) on a 10 mm chord, without jitter
        let wave = FourierArtery {
            order: 1,
            coeffs_u: vec![0.0; 3],
            coeffs_v: vec![0.0, 0.0, 0.1],
            trend_u: [0.0, 1.0],
            trend_v: [0.0; 2],
        };
        let mut fbd = FourierDictionary::default();
        fbd.entries.insert(
            "w".into(),
            FbdEntry {
                artery: wave,
                default_radius_profile: None,
            },
        );
        let mut graph = LandmarkGraph::default();
        graph.nodes.insert("a".into(), [5.0, 10.0, 10.0]);
        graph.nodes.insert("b".into(), [15.0, 10.0, 10.0]);
        let (_, _, mut c) = toy();
        c.jitter_deg = 0.0;
        c.arteries = vec![ArterySpec {
            name: "one".into(),
            start_label: "a".into(),
            end_label: "b".into(),
            radius_profile: Some(RadiusProfile::constant(1.0).unwrap()),
            fbd_key: "w".into(),
            row: None,
            normal: None,
        }];
        let sim = simulate_subject(&graph, &fbd, &c, 0).unwrap();
        // Simpson quadrature of |x'(s)| = 10 sqrt(1 + (0.2π cos 2πs)^2)
        let n = 100_000;
        let f = |s: f64| {
            10.0 * (1.0 + (0.2 * std::f64::consts::PI * (std::f64::consts::TAU * s).cos()).powi(2))
                .sqrt()
        };
        let h = 1.0 / n as f64;
        let simpson = (0..=n)
            .map(|i| {
                let w = if i == 0 || i == n {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                w * f(i as f64 * h)
            })
            .sum::<f64>()
            * h
            / 3.0;
        let got = sim.ground_truth.row("one").unwrap().total_length.unwrap();
        assert!((got - simpson).abs() / simpson < 1e-3, "{got} vs {simpson}");
    }

    #[test]
    fn noise_is_independent_of_thread_count() {
        let (g, f, c) = toy();
        let sim = simulate_subject(&g, &f, &c, 5).unwrap();
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let v1 = one.install(|| synthesize_intensities(&sim.binary, &c.intensity, 99).unwrap());
        let v4 = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap()
            .install(|| synthesize_intensities(&sim.binary, &c.intensity, 99).unwrap());
        assert_eq!(v1, v4);
    }

    #[test]
    fn unknown_references_are_errors() {
        let (g, f, mut c) = toy();
        c.arteries[0].fbd_key = "missing".into();
        assert!(matches!(
            simulate_subject(&g, &f, &c, 0),
            Err(Error::Format { .. })
        ));
        let (g, f, mut c) = toy();
        c.arteries[0].start_label = "zzz".into();
        assert!(matches!(
            simulate_subject(&g, &f, &c, 0),
            Err(Error::InvalidLandmarks(_))
        ));
    }
}
