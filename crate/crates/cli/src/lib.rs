//! Stage subcommands, the batch runner and the labeling service.

pub mod server;

use std::path::{Path, PathBuf};

use angiokit::features::{parse_features_csv, write_features, FeatureOptions};
use angiokit::graph::VesselFusedNetwork;
use angiokit::io::{read_binary, read_volume, write_binary, write_volume};
use angiokit::landmarks::{ClassificationConfig, LandmarkSet};
use angiokit::pipeline::{
    classify, guide_for, network_stage, run_pipeline, segment_stage, sha256_hex, skeleton_stage,
    subject_dir, PipelineConfig, StageOrder, StageParams, Timings, BINARY_FILE, CENTERLINE_FILE,
    EM_TRACE_FILE, GRAPH_FILE, GUIDE_FILE, TABLE_FILE,
};
use angiokit::simulate::{
    phantom, simulate_subject, FourierDictionary, LandmarkGraph, SimulationConfig,
};
use angiokit::stats::validate_features;
use angiokit::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

pub const SKELETON_FILE: &str = "skeleton.json";

#[derive(Debug, Parser)]
#[command(
    name = "angiokit",
    version,
    about = "Intracranial artery extraction, labeling and morphometry"
)]
pub struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Segment an angiogram into a vessel mask.
    Segment(Common),
    /// Thin a vessel mask to its centreline skeleton with radii.
    Skeletonize(Common),
    /// Build the vessel network from a vessel mask.
    Graph(GraphArgs),
    /// Classify a network with a landmark file and measure every artery.
    Features(Common),
    /// Generate a synthetic subject with ground truth.
    Simulate(SimulateArgs),
    /// Compare measured features against ground truth.
    Validate(ValidateArgs),
    /// Run every stage on one subject.
    Run(RunArgs),
    /// Serve an artifact directory to the labeling UI.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Order {
    SegmentThenResample,
    ResampleThenSegment,
}

/// Flags shared by the pipeline commands. Each overrides the matching
/// field of `--config`.
#[derive(Debug, Default, Args)]
pub struct Common {
    /// Pipeline configuration JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(short, long)]
    pub input: Option<PathBuf>,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub classification: Option<PathBuf>,
    #[arg(long)]
    pub landmarks: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Intensity percentile of the initial vessel threshold.
    #[arg(long)]
    pub percentile: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub eps_em: Option<f64>,
    #[arg(long)]
    pub n_icm: Option<usize>,
    #[arg(long)]
    pub n_em_max: Option<usize>,
    /// Isotropic spacing in mm; defaults to the finest input spacing.
    #[arg(long)]
    pub target_spacing: Option<f64>,
    #[arg(long, value_enum)]
    pub order: Option<Order>,
    #[arg(long)]
    pub min_component_mm3: Option<f64>,
    #[arg(long)]
    pub spur_ratio: Option<f64>,
    #[arg(long)]
    pub no_recentre: bool,
    #[arg(long)]
    pub smoothing_mm: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GraphArgs {
    #[command(flatten)]
    pub common: Common,
    /// Intensity volume for the labeling guide.
    #[arg(long)]
    pub volume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: Common,
    /// Without a landmark file, serve the network for labeling instead of failing.
    #[arg(long)]
    pub serve: bool,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Artifact directory with graph.json and guide.json.
    #[arg(long)]
    pub dir: PathBuf,
    #[arg(long)]
    pub classification: Option<PathBuf>,
    /// Initial label set.
    #[arg(long)]
    pub landmarks: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub smoothing_mm: f64,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum VolumeFormat {
    Nii,
    Json,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(short, long)]
    pub output: PathBuf,
    /// Simulation config; without it the built-in circle-of-Willis phantom is used.
    #[arg(long, requires_all = ["landmark_graph", "fbd"])]
    pub sim_config: Option<PathBuf>,
    #[arg(long)]
    pub landmark_graph: Option<PathBuf>,
    #[arg(long)]
    pub fbd: Option<PathBuf>,
    /// Phantom grid size per axis.
    #[arg(long, default_value_t = 192)]
    pub size: usize,
    /// Phantom voxel spacing in mm.
    #[arg(long, default_value_t = 0.5)]
    pub spacing: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value = "nii")]
    pub format: VolumeFormat,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Measured features CSV.
    #[arg(long)]
    pub features: PathBuf,
    /// Ground-truth features CSV.
    #[arg(long)]
    pub truth: PathBuf,
    /// Also write the report here.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

/// 2 for bad input or configuration, 3 when a stage fails.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        2
    } else {
        3
    }
}

impl Common {
    fn apply(&self, p: &mut StageParams) {
        let em = &mut p.em;
        if let Some(v) = self.percentile {
            em.percentile = v;
        }
        em.beta = self.beta.or(em.beta);
        em.eps_em = self.eps_em.or(em.eps_em);
        em.n_icm = self.n_icm.or(em.n_icm);
        em.n_em_max = self.n_em_max.or(em.n_em_max);
        p.target_spacing = self.target_spacing.or(p.target_spacing);
        if let Some(o) = self.order {
            p.order = match o {
                Order::SegmentThenResample => StageOrder::SegmentThenResample,
                Order::ResampleThenSegment => StageOrder::ResampleThenSegment,
            };
        }
        if let Some(v) = self.min_component_mm3 {
            p.min_component_mm3 = v;
        }
        if let Some(v) = self.spur_ratio {
            p.spur_ratio = v;
        }
        if self.no_recentre {
            p.recentre = false;
        }
        if let Some(v) = self.smoothing_mm {
            p.features.smoothing_mm = v;
        }
        if let Some(v) = self.seed {
            p.seed = v;
        }
    }

    /// The effective configuration, validated.
    pub fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::read(path)?,
            None => {
                let missing =
                    |flag: &str| Error::Parameter(format!("--{flag} is required without --config"));
                PipelineConfig::new(
                    self.input.clone().ok_or_else(|| missing("input"))?,
                    self.output.clone().ok_or_else(|| missing("output"))?,
                )
            }
        };
        if let Some(p) = &self.input {
            cfg.input = p.clone();
        }
        if let Some(p) = &self.output {
            cfg.output = p.clone();
        }
        cfg.classification = self.classification.clone().or(cfg.classification);
        cfg.landmarks = self.landmarks.clone().or(cfg.landmarks);
        cfg.threads = self.threads.or(cfg.threads);
        self.apply(&mut cfg.params);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => rayon_pool(n).map(|p| p.install(f)),
    }
}

fn rayon_pool(n: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Parameter(format!("thread pool: {e}")))
}

fn segment(c: &Common) -> Result<serde_json::Value> {
    let cfg = c.resolve()?;
    let vol = read_volume(&cfg.input)?;
    let mut t = Timings::default();
    let (binary, stop, trace) = pool(cfg.threads, || segment_stage(&vol, &cfg.params, &mut t))??;
    create_dir(&cfg.output)?;
    let out = cfg.output.join(BINARY_FILE);
    write_binary(&binary, &out)?;
    write_text(&cfg.output.join(EM_TRACE_FILE), &trace)?;
    Ok(json!({ "binary": out, "voxels": binary.count(), "em_stop": stop, "timings": t }))
}

fn skeletonize(c: &Common) -> Result<serde_json::Value> {
    let cfg = c.resolve()?;
    let binary = read_binary(&cfg.input)?;
    let mut t = Timings::default();
    let (skeleton, centerline) = pool(cfg.threads, || -> Result<_> {
        let (skeleton, field) = skeleton_stage(&binary, &cfg.params, &mut t)?;
        let (centerline, _) = network_stage(&skeleton, &field, &mut t)?;
        Ok((skeleton, centerline))
    })??;
    create_dir(&cfg.output)?;
    write_binary(&skeleton, cfg.output.join(SKELETON_FILE))?;
    centerline.write_csv(cfg.output.join(CENTERLINE_FILE))?;
    Ok(json!({ "skeleton_voxels": skeleton.count(), "timings": t }))
}

fn graph(a: &GraphArgs) -> Result<serde_json::Value> {
    let cfg = a.common.resolve()?;
    let binary = read_binary(&cfg.input)?;
    let mut t = Timings::default();
    let (centerline, net) = pool(cfg.threads, || -> Result<_> {
        let (skeleton, field) = skeleton_stage(&binary, &cfg.params, &mut t)?;
        network_stage(&skeleton, &field, &mut t)
    })??;
    create_dir(&cfg.output)?;
    centerline.write_csv(cfg.output.join(CENTERLINE_FILE))?;
    net.write_json(cfg.output.join(GRAPH_FILE))?;
    if let Some(v) = &a.volume {
        let guide = guide_for(&read_volume(v)?, &net)?;
        write_text(&cfg.output.join(GUIDE_FILE), &guide.to_json())?;
    }
    Ok(
        json!({ "nodes": net.nodes().len(), "traces": net.traces().len(), "components": net.component_count(), "timings": t }),
    )
}

fn features(c: &Common) -> Result<serde_json::Value> {
    let cfg = c.resolve()?;
    let net = VesselFusedNetwork::read_json(&cfg.input)?;
    let classification = cfg.load_classification()?;
    let lm = match &cfg.landmarks {
        Some(p) => LandmarkSet::read(p)?,
        None => return Err(Error::IncompleteLandmarks(classification.mandatory.clone())),
    };
    let out = classify(&net, &lm, &classification, &cfg.params.features)?;
    create_dir(&cfg.output)?;
    out.table.write(cfg.output.join(TABLE_FILE))?;
    let csv = cfg.output.join(angiokit::pipeline::FEATURES_FILE);
    write_features(
        &out.features,
        &csv,
        Some(&cfg.output.join(angiokit::pipeline::FEATURES_JSON_FILE)),
    )?;
    Ok(json!({ "features": csv, "rows": out.features.len(), "present": out.table.presence() }))
}

fn simulate(a: &SimulateArgs) -> Result<serde_json::Value> {
    let (graph, fbd, config) = match &a.sim_config {
        Some(p) => (
            LandmarkGraph::read(a.landmark_graph.as_ref().expect("required by clap"))?,
            FourierDictionary::read(a.fbd.as_ref().expect("required by clap"))?,
            SimulationConfig::read(p)?,
        ),
        None => {
            if a.size < 16 || !(a.spacing > 0.0) {
                return Err(Error::Parameter(
                    "phantom needs --size >= 16 and a positive --spacing".into(),
                ));
            }
            phantom::circle_of_willis(a.size, a.spacing)
        }
    };
    let seed = a.seed.unwrap_or(config.seed);
    let sim = simulate_subject(&graph, &fbd, &config, seed)?;
    let cc = config.classification();
    let dir = &a.output;
    create_dir(dir)?;
    let volume = dir.join(match a.format {
        VolumeFormat::Nii => "subject.nii",
        VolumeFormat::Json => "subject.json",
    });
    write_volume(&sim.volume, &volume)?;
    write_binary(&sim.binary, dir.join("truth_binary.json"))?;
    sim.ground_truth
        .write(dir.join("truth.csv"), dir.join("truth.json"))?;
    sim.landmark_file(&cc).write(dir.join("landmarks.json"))?;
    write_text(
        &dir.join("classification.json"),
        &serde_json::to_string_pretty(&cc).expect("config serializes"),
    )?;
    write_text(
        &dir.join("landmark_graph.json"),
        &serde_json::to_string_pretty(&graph).expect("graph serializes"),
    )?;
    fbd.write(dir.join("fbd.json"))?;
    config.write(dir.join("simulation.json"))?;
    let (nodes, traces) = sim.expected_network_counts();
    Ok(
        json!({ "volume": volume, "seed": seed, "arteries": sim.arteries.len(), "expected_nodes": nodes, "expected_traces": traces }),
    )
}

fn validate(a: &ValidateArgs) -> Result<serde_json::Value> {
    let read = |p: &Path| -> Result<_> {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        parse_features_csv(&text)
    };
    let report = validate_features(&read(&a.features)?, &read(&a.truth)?)?;
    let value = serde_json::to_value(&report).expect("report serializes");
    if let Some(out) = &a.output {
        write_text(
            out,
            &serde_json::to_string_pretty(&value).expect("value serializes"),
        )?;
    }
    Ok(value)
}

fn load_classification(path: Option<&Path>) -> Result<ClassificationConfig> {
    path.map_or_else(
        || Ok(ClassificationConfig::default()),
        ClassificationConfig::read,
    )
}

fn open_session(
    dir: &Path,
    classification: Option<&Path>,
    landmarks: Option<&Path>,
    smoothing_mm: f64,
) -> Result<server::Session> {
    let config = load_classification(classification)?;
    let opts = FeatureOptions { smoothing_mm };
    let mut session = server::Session::open(dir, config, opts)?;
    if let Some(p) = landmarks {
        session.set_labels(LandmarkSet::read(p)?)?;
    }
    Ok(session)
}

fn serve_blocking(session: server::Session, addr: &str) -> Result<()> {
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("<runtime>", e))?;
    rt.block_on(server::serve(session, addr))
        .map_err(|e| Error::io(addr, e))
}

fn run(a: &RunArgs) -> Result<serde_json::Value> {
    let cfg = a.common.resolve()?;
    match run_pipeline(&cfg) {
        Ok(out) => Ok(json!({ "dir": out.dir, "manifest": out.manifest })),
        Err(Error::IncompleteLandmarks(_)) if a.serve && cfg.landmarks.is_none() => {
            let raw = std::fs::read(&cfg.input).map_err(|e| Error::io(&cfg.input, e))?;
            let dir = subject_dir(&cfg.output, &sha256_hex(&raw));
            let session = open_session(
                &dir,
                cfg.classification.as_deref(),
                None,
                cfg.params.features.smoothing_mm,
            )?;
            serve_blocking(session, &a.addr)?;
            Ok(json!({ "dir": dir }))
        }
        Err(e) => Err(e),
    }
}

fn serve(a: &ServeArgs) -> Result<serde_json::Value> {
    let session = open_session(
        &a.dir,
        a.classification.as_deref(),
        a.landmarks.as_deref(),
        a.smoothing_mm,
    )?;
    serve_blocking(session, &a.addr)?;
    Ok(json!({ "dir": a.dir }))
}

/// Execute a parsed command; the returned summary is printed as JSON.
pub fn execute(cli: &Cli) -> Result<serde_json::Value> {
    match &cli.command {
        Command::Segment(c) => segment(c),
        Command::Skeletonize(c) => skeletonize(c),
        Command::Graph(a) => graph(a),
        Command::Features(c) => features(c),
        Command::Simulate(a) => simulate(a),
        Command::Validate(a) => validate(a),
        Command::Run(a) => run(a),
        Command::Serve(a) => serve(a),
    }
}
