//! Batch orchestration: segment, resample, skeletonize, build the network,
//! classify with a landmark file and measure.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::centerline::{compute_radii, SparseCenterline};
use crate::edt::{distance_transform, DistanceField};
use crate::error::{Error, Result};
use crate::features::{extract_features, features_csv, FeatureOptions, FeatureRow};
use crate::graph::{build_vessel_fused_network, VesselFusedNetwork};
use crate::guide::{labeling_guide, GuidePackage};
use crate::hmrf::{em_segment, EmParams, StopReason};
use crate::io::{read_volume, write_binary};
use crate::landmarks::{apply_landmarks, ClassificationConfig, DynamicGraphTable, LandmarkSet};
use crate::thinning::{prune_spurs, recentre, skeletonize_3d};
use crate::topology::remove_small_components;
use crate::volume::{
    resample_binary, resample_isotropic, threshold_initial, BinaryVolume, Volume3D,
};

/// Where isotropic resampling happens relative to segmentation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageOrder {
    /// Segment at native resolution, then resample the binary map.
    #[default]
    SegmentThenResample,
    /// Resample intensities, then segment.
    ResampleThenSegment,
}

/// Overrides applied on top of the statistics of the initial threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmOverrides {
    pub percentile: f64,
    pub beta: Option<f64>,
    pub eps_em: Option<f64>,
    pub n_icm: Option<usize>,
    pub n_em_max: Option<usize>,
}

impl Default for EmOverrides {
    fn default() -> Self {
        EmOverrides {
            percentile: 0.98,
            beta: None,
            eps_em: None,
            n_icm: None,
            n_em_max: None,
        }
    }
}

impl EmOverrides {
    fn apply(&self, p: &mut EmParams) {
        if let Some(b) = self.beta {
            p.beta = b;
        }
        if let Some(e) = self.eps_em {
            p.eps_em = e;
        }
        if let Some(n) = self.n_icm {
            p.n_icm = n;
        }
        if let Some(n) = self.n_em_max {
            p.n_em_max = n;
        }
    }
}

/// Every parameter that can change the numeric output of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageParams {
    pub em: EmOverrides,
    /// Isotropic spacing in mm; the finest input spacing when unset.
    pub target_spacing: Option<f64>,
    pub order: StageOrder,
    /// Foreground components smaller than this (mm³) are discarded before
    /// skeletonization. Zero keeps everything.
    pub min_component_mm3: f64,
    /// Terminal skeleton branches shorter than this multiple of the local
    /// radius at their junction are pruned. Zero disables pruning.
    pub spur_ratio: f64,
    /// Slide skeleton chains onto the distance-map ridge before measuring.
    pub recentre: bool,
    pub features: FeatureOptions,
    pub seed: u64,
}

impl Default for StageParams {
    fn default() -> Self {
        StageParams {
            em: EmOverrides::default(),
            target_spacing: None,
            order: StageOrder::default(),
            min_component_mm3: 5.0,
            spur_ratio: 1.5,
            recentre: true,
            features: FeatureOptions { smoothing_mm: 1.0 },
            seed: 0,
        }
    }
}

impl StageParams {
    pub fn validate(&self) -> Result<()> {
        let em = &self.em;
        if !(em.percentile > 0.0 && em.percentile < 1.0) {
            return Err(Error::Parameter(format!(
                "percentile {} outside (0, 1)",
                em.percentile
            )));
        }
        if em.beta.is_some_and(|b| !(b >= 0.0 && b.is_finite())) {
            return Err(Error::Parameter("beta must be finite and >= 0".into()));
        }
        if em.eps_em.is_some_and(|e| !(e > 0.0)) {
            return Err(Error::Parameter("eps_em must be > 0".into()));
        }
        if em.n_icm == Some(0) || em.n_em_max == Some(0) {
            return Err(Error::Parameter("n_icm and n_em_max must be >= 1".into()));
        }
        if self
            .target_spacing
            .is_some_and(|t| !(t > 0.0 && t.is_finite()))
        {
            return Err(Error::Parameter("target spacing must be positive".into()));
        }
        if !(self.min_component_mm3 >= 0.0 && self.min_component_mm3.is_finite()) {
            return Err(Error::Parameter("min_component_mm3 must be >= 0".into()));
        }
        if !(self.features.smoothing_mm >= 0.0 && self.features.smoothing_mm.is_finite()) {
            return Err(Error::Parameter("smoothing_mm must be >= 0".into()));
        }
        if !(self.spur_ratio >= 0.0 && self.spur_ratio.is_finite()) {
            return Err(Error::Parameter("spur_ratio must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub input: PathBuf,
    pub output: PathBuf,
    #[serde(default)]
    pub params: StageParams,
    /// Classification config file; the built-in Circle-of-Willis layout
    /// when unset.
    #[serde(default)]
    pub classification: Option<PathBuf>,
    #[serde(default)]
    pub landmarks: Option<PathBuf>,
    /// Worker threads; does not affect results.
    #[serde(default)]
    pub threads: Option<usize>,
}

impl PipelineConfig {
    pub fn new(input: impl Into<PathBuf>, output: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            input: input.into(),
            output: output.into(),
            params: StageParams::default(),
            classification: None,
            landmarks: None,
            threads: None,
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    /// Check parameters and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        let files = std::iter::once(&self.input)
            .chain(&self.classification)
            .chain(&self.landmarks);
        for p in files {
            if !p.is_file() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
                ));
            }
        }
        if self.threads == Some(0) {
            return Err(Error::Parameter("threads must be >= 1".into()));
        }
        Ok(())
    }

    pub fn load_classification(&self) -> Result<ClassificationConfig> {
        match &self.classification {
            Some(p) => ClassificationConfig::read(p),
            None => Ok(ClassificationConfig::default()),
        }
    }
}

/// Wall-clock seconds per stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub stages: Vec<(String, f64)>,
}

impl Timings {
    pub fn total(&self) -> f64 {
        self.stages.iter().map(|s| s.1).sum()
    }

    /// Run a stage, recording its wall time and tagging its error.
    pub fn time<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let out = f().map_err(Error::at(stage))?;
        self.stages
            .push((stage.to_string(), t0.elapsed().as_secs_f64()));
        Ok(out)
    }
}

/// Everything up to the labeling step.
#[derive(Clone, Debug)]
pub struct Extraction {
    pub binary: BinaryVolume,
    pub skeleton: BinaryVolume,
    pub centerline: SparseCenterline,
    pub network: VesselFusedNetwork,
    pub em_stop: StopReason,
    /// Log-posterior trace of the EM loop as CSV.
    pub em_trace: String,
    pub timings: Timings,
}

#[derive(Clone, Debug)]
pub struct Classification {
    pub table: DynamicGraphTable,
    pub features: Vec<FeatureRow>,
}

fn target_for(vol: &Volume3D, params: &StageParams) -> f64 {
    params
        .target_spacing
        .unwrap_or_else(|| vol.spacing().iter().copied().fold(f64::INFINITY, f64::min))
}

fn segment(vol: &Volume3D, params: &StageParams) -> Result<(BinaryVolume, StopReason, String)> {
    let init = threshold_initial(vol, params.em.percentile, None)?;
    let mut em = EmParams::from_labels(vol, &init)?;
    params.em.apply(&mut em);
    let out = em_segment(vol, &init, &em)?;
    let bits = (0..vol.grid().len())
        .map(|i| out.labels.is_class(i, 2))
        .collect();
    Ok((
        BinaryVolume::new(*vol.grid(), bits)?,
        out.stop,
        out.trace_csv(),
    ))
}

/// Segment, resample to the isotropic target and drop small components.
/// Also returns why EM stopped and its log-posterior trace as CSV.
pub fn segment_stage(
    vol: &Volume3D,
    params: &StageParams,
    timings: &mut Timings,
) -> Result<(BinaryVolume, StopReason, String)> {
    params.validate()?;
    let target = target_for(vol, params);
    let (binary, em_stop, em_trace) = match params.order {
        StageOrder::SegmentThenResample => {
            let (b, stop, trace) = timings.time("segment", || segment(vol, params))?;
            (
                timings.time("resample", || resample_binary(&b, target))?,
                stop,
                trace,
            )
        }
        StageOrder::ResampleThenSegment => {
            let r = timings.time("resample", || resample_isotropic(vol, target))?;
            timings.time("segment", || segment(&r, params))?
        }
    };
    let binary = timings.time("filter", || {
        let min_voxels = (params.min_component_mm3 / binary.grid().voxel_volume()).ceil() as usize;
        let kept = remove_small_components(&binary, min_voxels);
        if kept.count() == 0 {
            return Err(Error::Degenerate(
                "segmentation has no vessel voxels".into(),
            ));
        }
        Ok(kept)
    })?;
    Ok((binary, em_stop, em_trace))
}

/// Thin a vessel mask, prune spurs and recentre as configured. Returns the
/// skeleton with the distance field it was measured against.
pub fn skeleton_stage(
    binary: &BinaryVolume,
    params: &StageParams,
    timings: &mut Timings,
) -> Result<(BinaryVolume, DistanceField)> {
    let field = timings.time("distance", || distance_transform(binary))?;
    let skeleton = timings.time("skeletonize", || {
        let thin = skeletonize_3d(binary);
        let thin = if params.spur_ratio > 0.0 {
            prune_spurs(&thin, &field, params.spur_ratio)
        } else {
            thin
        };
        Ok(if params.recentre {
            recentre(&thin, &field)
        } else {
            thin
        })
    })?;
    Ok((skeleton, field))
}

/// Radii along the skeleton and the vessel-fused network over it.
pub fn network_stage(
    skeleton: &BinaryVolume,
    field: &DistanceField,
    timings: &mut Timings,
) -> Result<(SparseCenterline, VesselFusedNetwork)> {
    let centerline = timings.time("centerline", || {
        compute_radii(skeleton, field, skeleton.spacing())
    })?;
    let network = timings.time("graph", || {
        build_vessel_fused_network(skeleton, &centerline)
    })?;
    Ok((centerline, network))
}

/// Segment through network construction.
pub fn extract(vol: &Volume3D, params: &StageParams) -> Result<Extraction> {
    let mut timings = Timings::default();
    let (binary, em_stop, em_trace) = segment_stage(vol, params, &mut timings)?;
    let (skeleton, field) = skeleton_stage(&binary, params, &mut timings)?;
    let (centerline, network) = network_stage(&skeleton, &field, &mut timings)?;
    Ok(Extraction {
        binary,
        skeleton,
        centerline,
        network,
        em_stop,
        em_trace,
        timings,
    })
}

/// Dynamic table and feature rows for a labeled network.
pub fn classify(
    net: &VesselFusedNetwork,
    lm: &LandmarkSet,
    config: &ClassificationConfig,
    opts: &FeatureOptions,
) -> Result<Classification> {
    let table = apply_landmarks(net, lm, config)?;
    let features = extract_features(&table, net, opts)?;
    Ok(Classification { table, features })
}

/// Guide images drawn from the intensity volume on the network grid.
pub fn guide_for(vol: &Volume3D, net: &VesselFusedNetwork) -> Result<GuidePackage> {
    if vol.grid() == net.grid() {
        return labeling_guide(vol, net);
    }
    labeling_guide(&resample_isotropic(vol, net.spacing()[0])?, net)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the parameters, classification and landmarks a run uses.
/// Paths, output location and thread count are excluded.
pub fn config_hash(
    params: &StageParams,
    classification: &ClassificationConfig,
    landmarks: Option<&LandmarkSet>,
) -> String {
    let doc = serde_json::json!({
        "params": params,
        "classification": classification,
        "landmarks": landmarks,
    });
    sha256_hex(doc.to_string().as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub input: PathBuf,
    pub input_sha256: String,
    pub config_sha256: String,
    pub seed: u64,
    pub params: StageParams,
    pub em_stop: StopReason,
    pub timings: Timings,
    pub compute_seconds: f64,
    /// Interactive labeling time; filled by the labeling service.
    pub labeling_seconds: Option<f64>,
    pub nodes: usize,
    pub traces: usize,
    pub artifacts: Vec<String>,
}

/// What a run left on disk.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub extraction: Extraction,
    pub classification: Option<Classification>,
}

pub const BINARY_FILE: &str = "binary.json";
pub const EM_TRACE_FILE: &str = "em_trace.csv";
pub const CENTERLINE_FILE: &str = "centerline.csv";
pub const GRAPH_FILE: &str = "graph.json";
pub const GUIDE_FILE: &str = "guide.json";
pub const TABLE_FILE: &str = "table.json";
pub const FEATURES_FILE: &str = "features.csv";
pub const FEATURES_JSON_FILE: &str = "features.json";
pub const MANIFEST_FILE: &str = "manifest.json";

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn in_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Artifact directory for an input: the output root plus the first 16 hex
/// digits of the input hash.
pub fn subject_dir(output: &Path, input_sha256: &str) -> PathBuf {
    output.join(&input_sha256[..16])
}

/// Run every stage and write the artifacts. Without a landmark file the
/// run stops after the network and guide are written and reports the
/// missing mandatory labels.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let classification = cfg.load_classification()?;
    let landmarks = cfg.landmarks.as_ref().map(LandmarkSet::read).transpose()?;
    let raw = std::fs::read(&cfg.input).map_err(|e| Error::io(&cfg.input, e))?;
    let input_sha256 = sha256_hex(&raw);
    drop(raw);
    let vol = read_volume(&cfg.input)?;
    let dir = subject_dir(&cfg.output, &input_sha256);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    in_pool(cfg.threads, || {
        let mut extraction = extract(&vol, &cfg.params)?;
        let mut artifacts = Vec::new();
        let mut put = |name: &str, f: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
            f(&dir.join(name))?;
            artifacts.push(name.to_string());
            Ok(())
        };
        put(BINARY_FILE, &|p| write_binary(&extraction.binary, p))?;
        put(EM_TRACE_FILE, &|p| write_text(p, &extraction.em_trace))?;
        put(CENTERLINE_FILE, &|p| extraction.centerline.write_csv(p))?;
        put(GRAPH_FILE, &|p| extraction.network.write_json(p))?;
        let guide = extraction
            .timings
            .time("guide", || guide_for(&vol, &extraction.network))?;
        put(GUIDE_FILE, &|p| write_text(p, &guide.to_json()))?;

        let outcome = match &landmarks {
            None => Err(Error::IncompleteLandmarks(classification.mandatory.clone())),
            Some(lm) => extraction.timings.time("classify", || {
                classify(
                    &extraction.network,
                    lm,
                    &classification,
                    &cfg.params.features,
                )
            }),
        };
        if let Ok(c) = &outcome {
            put(TABLE_FILE, &|p| c.table.write(p))?;
            put(FEATURES_FILE, &|p| {
                write_text(p, &features_csv(&c.features))
            })?;
            put(FEATURES_JSON_FILE, &|p| {
                write_text(
                    p,
                    &serde_json::to_string_pretty(&c.features).expect("rows serialize"),
                )
            })?;
        }
        let manifest = Manifest {
            input: cfg.input.clone(),
            input_sha256: input_sha256.clone(),
            config_sha256: config_hash(&cfg.params, &classification, landmarks.as_ref()),
            seed: cfg.params.seed,
            params: cfg.params.clone(),
            em_stop: extraction.em_stop,
            compute_seconds: extraction.timings.total(),
            timings: extraction.timings.clone(),
            labeling_seconds: None,
            nodes: extraction.network.nodes().len(),
            traces: extraction.network.traces().len(),
            artifacts: artifacts.clone(),
        };
        let manifest_path = dir.join(MANIFEST_FILE);
        write_text(
            &manifest_path,
            &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
        )?;
        let classification = outcome?;
        Ok(RunOutput {
            dir: dir.clone(),
            manifest,
            extraction,
            classification: Some(classification),
        })
    })?
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_validation() {
        let mut p = StageParams::default();
        p.validate().unwrap();
        p.em.percentile = 1.0;
        assert!(p.validate().is_err());
        let mut p = StageParams::default();
        p.em.n_icm = Some(0);
        assert!(p.validate().is_err());
        let mut p = StageParams::default();
        p.min_component_mm3 = -1.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn config_hash_tracks_effective_parameters_only() {
        let cc = ClassificationConfig::default();
        let base = StageParams::default();
        let h = config_hash(&base, &cc, None);
        assert_eq!(h, config_hash(&base.clone(), &cc, None));
        let mut p = base.clone();
        p.em.beta = Some(1.0);
        assert_ne!(h, config_hash(&p, &cc, None));
        let mut p = base.clone();
        p.seed = 1;
        assert_ne!(h, config_hash(&p, &cc, None));
        let lm = LandmarkSet {
            version: 1,
            ..LandmarkSet::default()
        };
        assert_ne!(h, config_hash(&base, &cc, Some(&lm)));
        let mut c1 = PipelineConfig::new("a", "out1");
        let mut c2 = PipelineConfig::new("b", "out2");
        c1.threads = Some(1);
        c2.threads = Some(8);
        assert_eq!(
            config_hash(&c1.params, &cc, None),
            config_hash(&c2.params, &cc, None)
        );
    }

    #[test]
    fn config_json_round_trip_and_unknown_fields() {
        let mut c = PipelineConfig::new("in.json", "out");
        c.params.em.beta = Some(0.5);
        c.params.order = StageOrder::ResampleThenSegment;
        let text = serde_json::to_string(&c).unwrap();
        assert!(text.contains("resample_then_segment"));
        assert_eq!(serde_json::from_str::<PipelineConfig>(&text).unwrap(), c);
        let bad = r#"{"input":"a","output":"b","params":{"bogus":1}}"#;
        assert!(serde_json::from_str::<PipelineConfig>(bad).is_err());
        let minimal: PipelineConfig =
            serde_json::from_str(r#"{"input":"a","output":"b"}"#).unwrap();
        assert_eq!(minimal.params, StageParams::default());
    }
}
