//! Config-driven experiment runner: model training, the beam-steering and
//! beam-tracking campaigns, and the small analytic reports. Every stochastic
//! step draws from a seed derived from the configured master seed, so a
//! rerun with the same configuration writes byte-identical CSV and JSONL.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    coherence_time, comm_budget, compute_metrics, mean_ci95, write_cpf_csv, write_metrics_csv,
};
use crate::analysis::{AnglePair, FrameBudget, MetricsRow};
use crate::beamspace::{ArrayGeometry, BeamIndex, Codebook, Coverage};
use crate::dsp::{process_capture, DspConfig, EsiRecord};
use crate::echo::{synthesize_for_beam, EchoConfig, UavState};
use crate::estimators::{
    measurement_variance, select_inputs, FusionTracker, KalmanTracker, KfConfig, ModelDims,
    TemporalMode, TemporalModel, TemporalSample, TrainConfig, VisionInput, VisionModel,
    VisionSample, VsiRecord,
};
use crate::scan::{
    candidate_sets, hierarchical_scan, scan, simulate_hierarchical, write_jsonl, DetectionOracle,
    FallbackCost, GeometricOracle, OverheadModel, QConvention, ScanTrace, SetHit, SnrOracle,
    TrialRecord,
};
use crate::scenario::{
    apply_impairments, derive_seed, observe, ImpairmentPlan, LossPreset, OffsetCase,
    ScenarioConfig, SlotRecord, Trajectory,
};
use crate::{AngleBounds, CoreError, Result};

// Seed streams derived from the master seed.
const STREAM_SCENARIO: u64 = 1;
const STREAM_OBSERVE: u64 = 2;
const STREAM_PLAN_TRAIN: u64 = 3;
const STREAM_PLAN_TEST: u64 = 4;
const STREAM_CAPTURE: u64 = 5;
const STREAM_VISION: u64 = 6;
const STREAM_FUSED: u64 = 7;
const STREAM_ECHO: u64 = 8;
const STREAM_HIERARCHICAL: u64 = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Fusion,
    EchoOnly,
    Kalman,
    VisionOnly,
}

impl EstimatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::Fusion => "fusion",
            EstimatorKind::EchoOnly => "echo_only",
            EstimatorKind::Kalman => "kalman",
            EstimatorKind::VisionOnly => "vision_only",
        }
    }
}

/// What counts as a detection when a beam is illuminated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionModel {
    /// The target lies in the beam's cell.
    Geometric,
    /// In the cell and the predicted range peak clears the DSP threshold.
    Snr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSettings {
    pub vision: TrainConfig,
    pub temporal: TrainConfig,
    /// Echo-loss presets cycled over the training trajectories.
    pub loss_presets: Vec<LossPreset>,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        Self {
            vision: TrainConfig::default(),
            temporal: TrainConfig::default(),
            loss_presets: vec![LossPreset::None, LossPreset::Few],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KfSettings {
    pub q_angle: f64,
    pub q_rate: f64,
    /// Measurement variance; measured on 0 dB training captures when absent.
    pub r: Option<f64>,
}

impl Default for KfSettings {
    fn default() -> Self {
        let d = KfConfig::default();
        Self {
            q_angle: d.q_angle,
            q_rate: d.q_rate,
            r: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub levels: Vec<u32>,
    pub snr_db: Vec<f64>,
    pub loss_presets: Vec<LossPreset>,
    pub offsets: Vec<OffsetCase>,
    pub estimators: Vec<EstimatorKind>,
    /// Restricts tracking to these case labels (see [`case_name`]); empty runs all.
    pub cases: Vec<String>,
    pub dims: ModelDims,
    pub training: TrainingSettings,
    pub kf: KfSettings,
    pub echo: EchoConfig,
    pub dsp: DspConfig,
    pub detection: DetectionModel,
    pub fallback_cost: FallbackCost,
    pub q_convention: QConvention,
    /// Cap on the held-out trajectories `track` replays.
    pub test_trajectories: Option<usize>,
    /// Leading slots of each trajectory that the echo stages (temporal
    /// training data and tracking) use; all slots when absent.
    pub echo_slots: Option<usize>,
    /// Uniform targets per level for the hierarchical reference row.
    pub hierarchical_trials: usize,
    pub budget: FrameBudget,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            levels: vec![2, 3, 4, 5, 6],
            snr_db: vec![0.0, -1.0, -2.0],
            loss_presets: vec![LossPreset::None, LossPreset::Few],
            offsets: vec![OffsetCase::None],
            estimators: vec![
                EstimatorKind::Fusion,
                EstimatorKind::EchoOnly,
                EstimatorKind::Kalman,
                EstimatorKind::VisionOnly,
            ],
            cases: Vec::new(),
            dims: ModelDims::default(),
            training: TrainingSettings::default(),
            kf: KfSettings::default(),
            echo: EchoConfig::default(),
            dsp: DspConfig::default(),
            detection: DetectionModel::Snr,
            fallback_cost: FallbackCost::Conditional,
            q_convention: QConvention::Exact,
            test_trajectories: None,
            echo_slots: None,
            hierarchical_trials: 10_000,
            budget: FrameBudget::default(),
            seed: 1,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() || self.levels.iter().any(|&s| !(1..=8).contains(&s)) {
            return Err(CoreError::Config(format!(
                "levels {:?} must be non-empty and within 1..=8",
                self.levels
            )));
        }
        if self.snr_db.is_empty() || self.loss_presets.is_empty() || self.offsets.is_empty() {
            return Err(CoreError::Config(
                "at least one SNR, loss and offset case is required".into(),
            ));
        }
        if self.estimators.is_empty() {
            return Err(CoreError::Config("estimator roster is empty".into()));
        }
        if self.scenario.trajectories < 5 {
            return Err(CoreError::Config(
                "need at least 5 trajectories for the 80/20 split".into(),
            ));
        }
        if self.echo_len() <= self.dims.history + 1 {
            return Err(CoreError::Config(format!(
                "{} echo slots leave none after the {}-slot history",
                self.echo_len(),
                self.dims.history
            )));
        }
        let known = self.case_names();
        if let Some(c) = self.cases.iter().find(|c| !known.contains(c)) {
            return Err(CoreError::Config(format!(
                "unknown case {c}; configured cases are {known:?}"
            )));
        }
        if self.training.loss_presets.is_empty() {
            return Err(CoreError::Config(
                "training needs at least one loss preset".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }

    /// Labels of every configured (SNR, loss, offset) combination.
    pub fn case_names(&self) -> Vec<String> {
        self.channel_cases().into_iter().map(|(n, ..)| n).collect()
    }

    fn channel_cases(&self) -> Vec<(String, f64, LossPreset, OffsetCase)> {
        let mut out = Vec::new();
        for &snr in &self.snr_db {
            for &loss in &self.loss_presets {
                for &offset in &self.offsets {
                    out.push((case_name(snr, loss, offset), snr, loss, offset));
                }
            }
        }
        out
    }

    fn echo_len(&self) -> usize {
        self.echo_slots
            .map_or(self.scenario.steps, |n| n.min(self.scenario.steps))
    }

    fn bounds(&self) -> AngleBounds {
        self.scenario.camera.bounds
    }

    fn coverage(&self) -> Result<Coverage> {
        Coverage::for_sector(&self.bounds())
    }

    fn seed(&self, stream: u64) -> u64 {
        derive_seed(self.seed, stream)
    }

    /// Hash of everything the trained models depend on.
    fn training_key(&self) -> String {
        let key = serde_json::json!({
            "scenario": self.scenario,
            "levels": self.levels,
            "snr_db": self.snr_db,
            "dims": self.dims,
            "training": self.training,
            "echo_slots": self.echo_slots,
            "kf": self.kf,
            "echo": self.echo,
            "dsp": self.dsp,
            "seed": self.seed,
        });
        hex(&Sha256::digest(key.to_string().as_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Provenance of one verb invocation. Wall-clock times and latencies live
/// here and nowhere else, so the reports stay reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub verb: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<String>,
    pub stages: Vec<StageTiming>,
    pub latency_ms: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(verb: &str, cfg: &ExperimentConfig) -> Self {
        let seeds = [
            ("master", cfg.seed),
            ("scenario", cfg.seed(STREAM_SCENARIO)),
            ("observe", cfg.seed(STREAM_OBSERVE)),
            ("plan_train", cfg.seed(STREAM_PLAN_TRAIN)),
            ("plan_test", cfg.seed(STREAM_PLAN_TEST)),
            ("capture", cfg.seed(STREAM_CAPTURE)),
            ("vision_init", cfg.seed(STREAM_VISION)),
            ("fused_init", cfg.seed(STREAM_FUSED)),
            ("echo_init", cfg.seed(STREAM_ECHO)),
            ("hierarchical", cfg.seed(STREAM_HIERARCHICAL)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Self {
            verb: verb.to_string(),
            config_hash: cfg.hash(),
            seeds,
            artifacts: Vec::new(),
            stages: Vec::new(),
            latency_ms: BTreeMap::new(),
        }
    }

    fn time<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let out = f(self)?;
        self.stages.push(StageTiming {
            stage: stage.to_string(),
            seconds: t0.elapsed().as_secs_f64(),
        });
        Ok(out)
    }

    fn artifact(&mut self, dir: &Path, name: &str) -> PathBuf {
        self.artifacts.push(name.to_string());
        dir.join(name)
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("manifest_{}.json", self.verb));
        fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Trajectories, camera frames and the 80/20 split shared by every verb.
pub struct Dataset {
    pub scenario: ScenarioConfig,
    pub trajectories: Vec<Trajectory>,
    pub frames: Vec<Vec<SlotRecord>>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    /// Trajectory `i` is held out when `i % 5 == 4`.
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let scenario = ScenarioConfig {
            seed: cfg.seed(STREAM_SCENARIO),
            ..cfg.scenario.clone()
        };
        let mut trajectories = Vec::with_capacity(scenario.trajectories);
        let mut frames = Vec::with_capacity(scenario.trajectories);
        for i in 0..scenario.trajectories {
            let traj = scenario.trajectory(i)?;
            let mut rng = rand_chacha::ChaCha8Rng::from_seed_u64(derive_seed(
                cfg.seed(STREAM_OBSERVE),
                i as u64,
            ));
            frames.push(observe(&traj, &scenario.camera, 0.0, &mut rng));
            trajectories.push(traj);
        }
        let (test, train): (Vec<usize>, Vec<usize>) =
            (0..scenario.trajectories).partition(|i| i % 5 == 4);
        Ok(Self {
            scenario,
            trajectories,
            frames,
            train,
            test,
        })
    }
}

trait SeedFromU64 {
    fn from_seed_u64(seed: u64) -> Self;
}

impl SeedFromU64 for rand_chacha::ChaCha8Rng {
    fn from_seed_u64(seed: u64) -> Self {
        rand::SeedableRng::seed_from_u64(seed)
    }
}

/// Echo measurements keyed by trajectory, slot, beam, SNR and echo time.
/// Every method whose scan ends on the same beam in the same slot sees the
/// same capture.
pub struct EchoBank {
    coverage: Coverage,
    echo: EchoConfig,
    dsp: DspConfig,
    seed: u64,
    codebooks: HashMap<u32, Codebook>,
    cache: HashMap<(usize, usize, BeamIndex, u64, u64), EsiRecord>,
    pub captures: usize,
}

impl EchoBank {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            coverage: cfg.coverage()?,
            echo: cfg.echo,
            dsp: DspConfig {
                grid: cfg.bounds(),
                ..cfg.dsp
            },
            seed: cfg.seed(STREAM_CAPTURE),
            codebooks: HashMap::new(),
            cache: HashMap::new(),
            captures: 0,
        })
    }

    pub fn codebook(&mut self, s: u32) -> Result<&Codebook> {
        if !self.codebooks.contains_key(&s) {
            let cb = Codebook::new(ArrayGeometry::for_level(s), s, self.coverage)?;
            self.codebooks.insert(s, cb);
        }
        Ok(&self.codebooks[&s])
    }

    fn echo_at(&self, snr_db: f64) -> EchoConfig {
        let mut e = self.echo;
        e.channel.snr_db = snr_db;
        e
    }

    pub fn oracle(
        &self,
        model: DetectionModel,
        state: &UavState,
        snr_db: f64,
    ) -> Box<dyn DetectionOracle> {
        match model {
            DetectionModel::Geometric => Box::new(GeometricOracle::for_state(self.coverage, state)),
            DetectionModel::Snr => Box::new(SnrOracle::new(
                self.coverage,
                *state,
                self.echo_at(snr_db),
                self.dsp.peak_threshold,
            )),
        }
    }

    /// Measures the echo of `state` through `beam`; invalid when the
    /// synthesis or any processing stage fails.
    pub fn measure(
        &mut self,
        traj: usize,
        slot: usize,
        t: f64,
        state: &UavState,
        beam: BeamIndex,
        snr_db: f64,
    ) -> Result<EsiRecord> {
        let key = (traj, slot, beam, snr_db.to_bits(), state.t.to_bits());
        if let Some(r) = self.cache.get(&key) {
            return Ok(*r);
        }
        let seed = derive_seed(
            derive_seed(derive_seed(self.seed, traj as u64), slot as u64),
            (beam.linear() as u64)
                ^ ((beam.s as u64) << 32)
                ^ snr_db.to_bits().rotate_left(17)
                ^ state.t.to_bits(),
        );
        let echo = self.echo_at(snr_db);
        let cb = self.codebook(beam.s)?.clone();
        let rec = match synthesize_for_beam(state, &cb, beam, &echo, seed) {
            Ok(cap) => process_capture(&cap, &self.dsp, t),
            Err(_) => EsiRecord::invalid(t),
        };
        self.captures += 1;
        self.cache.insert(key, rec);
        Ok(rec)
    }
}

/// Trained estimators and the filter settings.
#[derive(Debug, Clone)]
pub struct Models {
    pub vision: VisionModel,
    pub tracker: FusionTracker,
    pub kf: KfConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelInfo {
    training_key: String,
    kf: KfConfig,
}

#[derive(Debug, Serialize)]
struct LossRow<'a> {
    model: &'a str,
    epoch: usize,
    loss: f64,
}

#[derive(Debug, Serialize)]
struct ModelStatsRow<'a> {
    model: &'a str,
    parameters: usize,
    macs: usize,
}

/// Multiply-accumulates of one forward pass, from the layer shapes.
pub fn vision_macs(d: &ModelDims) -> usize {
    let l = d.l_vis;
    let geo = 4 * l + d.res_blocks * l * l;
    let mut conv = 0;
    let (mut c_prev, mut side) = (1, crate::scenario::PATCH_SIDE);
    for &c in &d.cnn_channels {
        conv += c * c_prev * 9 * side * side;
        c_prev = c;
        side /= 2;
    }
    let head = c_prev * side * side * l;
    let attn = 6 * l * l + 2 * 2 * l * l;
    geo + conv + head + attn + 2 * l
}

pub fn temporal_macs(d: &ModelDims, mode: TemporalMode) -> usize {
    let (p, m) = (d.history, d.l_his);
    let fuse = if mode == TemporalMode::Fused {
        p * 2 * 2
    } else {
        0
    };
    let embed = p * crate::estimators::TOKEN_WIDTH * m;
    let layer = 4 * p * m * m + 2 * p * p * m + 2 * p * m * d.d_ff;
    let now = if mode == TemporalMode::Fused {
        2 * d.l_now
    } else {
        0
    };
    let d_in = m + if mode == TemporalMode::Fused {
        d.l_now
    } else {
        0
    };
    fuse + embed + d.depth * layer + now + d_in * d.head_hidden + d.head_hidden * 2
}

fn true_beam(cb: &Codebook, state: &UavState) -> Result<BeamIndex> {
    let (h, v) = state.wavenumber();
    let (h, v) = cb.coverage.clamp(h, v);
    cb.beam_of_wavenumber(h, v)
}

fn vision_records(model: &VisionModel, frames: &[SlotRecord]) -> Result<Vec<VsiRecord>> {
    frames
        .iter()
        .map(|r| model.predict(r.observation.as_ref(), r.t))
        .collect()
}

/// Trains the vision aligner, then the fused and echo-only temporal
/// estimators on vision outputs and measured echoes of the training split,
/// and measures the filter's measurement noise. Writes checkpoints, loss
/// curves and model statistics.
pub fn run_training(cfg: &ExperimentConfig) -> Result<(Models, RunManifest)> {
    cfg.validate()?;
    let mut manifest = RunManifest::new("train", cfg);
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir)?;
    let data = manifest.time("scenario", |_| Dataset::generate(cfg))?;
    let bounds = cfg.bounds();
    let p = cfg.dims.history;

    let mut vision = VisionModel::new(&cfg.dims, bounds, cfg.seed(STREAM_VISION));
    let vision_curve = manifest.time("train_vision", |_| {
        let samples: Vec<VisionSample> = data
            .train
            .iter()
            .flat_map(|&i| data.frames[i].iter())
            .filter_map(|r| {
                r.observation.as_ref().map(|o| {
                    let (a, b) = bounds.normalize(r.truth.theta, r.truth.phi);
                    VisionSample {
                        input: VisionInput::from(o),
                        target: [a, b],
                    }
                })
            })
            .collect();
        vision.train(&samples, &cfg.training.vision)
    })?;

    let mut bank = EchoBank::new(cfg)?;
    let half_width = data.scenario.dt / 2.0;
    let (samples, calib) = manifest.time("echo_dataset", |_| {
        let mut samples = Vec::new();
        let mut calib = Vec::new();
        for (j, &i) in data.train.iter().enumerate() {
            let s = cfg.levels[j % cfg.levels.len()];
            let snr = cfg.snr_db[(j / cfg.levels.len()) % cfg.snr_db.len()];
            let loss = cfg.training.loss_presets[j % cfg.training.loss_presets.len()];
            let traj = &data.trajectories[i];
            let n = cfg.echo_len().min(traj.len());
            let plan = ImpairmentPlan::build(
                n,
                snr,
                loss,
                OffsetCase::None,
                half_width,
                derive_seed(cfg.seed(STREAM_PLAN_TRAIN), i as u64),
            );
            let frames = apply_impairments(&data.frames[i][..n], traj, &plan)?;
            let vsi = vision_records(&vision, &frames)?;
            let mut esi = Vec::with_capacity(frames.len());
            for (k, r) in frames.iter().enumerate() {
                let rec = if r.echo_valid {
                    let beam = true_beam(bank.codebook(s)?, &r.echo_state)?;
                    bank.measure(i, k, r.t, &r.echo_state, beam, snr)?
                } else {
                    EsiRecord::invalid(r.t)
                };
                if snr == 0.0 && rec.valid {
                    calib.push(rec.theta_e - r.echo_state.theta);
                    calib.push(rec.phi_e - r.echo_state.phi);
                }
                esi.push(rec);
            }
            for k in p..frames.len() {
                let Ok(sel) = select_inputs(&vsi[..k], &esi[..k], &vsi[k], p) else {
                    continue;
                };
                samples.push((sel, (frames[k].truth.theta, frames[k].truth.phi)));
            }
        }
        Ok((samples, calib))
    })?;

    let fused_samples: Vec<TemporalSample> = samples
        .iter()
        .filter_map(|(sel, target)| {
            sel.current.map(|c| TemporalSample {
                history: sel.history.clone(),
                current: Some((c.theta_v, c.phi_v)),
                target: *target,
            })
        })
        .collect();
    let echo_samples: Vec<TemporalSample> = samples
        .iter()
        .map(|(sel, target)| TemporalSample {
            history: sel.history.clone(),
            current: None,
            target: *target,
        })
        .collect();
    let mut fused = TemporalModel::new(
        &cfg.dims,
        TemporalMode::Fused,
        bounds,
        cfg.seed(STREAM_FUSED),
    );
    let fused_curve = manifest.time("train_fused", |_| {
        fused.train(&fused_samples, &cfg.training.temporal)
    })?;
    let mut echo_only = TemporalModel::new(
        &cfg.dims,
        TemporalMode::EchoOnly,
        bounds,
        cfg.seed(STREAM_ECHO),
    );
    let echo_curve = manifest.time("train_echo_only", |_| {
        echo_only.train(&echo_samples, &cfg.training.temporal)
    })?;

    let r = match cfg.kf.r {
        Some(r) => r,
        None => measurement_variance(&calib).unwrap_or(KfConfig::default().r),
    };
    let kf = KfConfig {
        q_angle: cfg.kf.q_angle,
        q_rate: cfg.kf.q_rate,
        r,
    };

    vision.save(manifest.artifact(&dir, "vision.ckpt"))?;
    fused.save(manifest.artifact(&dir, "fused.ckpt"))?;
    echo_only.save(manifest.artifact(&dir, "echo_only.ckpt"))?;
    // Continue with the stored f32 weights so later runs that load them match.
    vision.load(dir.join("vision.ckpt"))?;
    fused.load(dir.join("fused.ckpt"))?;
    echo_only.load(dir.join("echo_only.ckpt"))?;
    let info = ModelInfo {
        training_key: cfg.training_key(),
        kf,
    };
    fs::write(
        manifest.artifact(&dir, "models.json"),
        serde_json::to_string_pretty(&info)?,
    )?;

    let mut w = csv::Writer::from_writer(create(&manifest.artifact(&dir, "train_loss.csv"))?);
    for (model, curve) in [
        ("vision", &vision_curve),
        ("fused", &fused_curve),
        ("echo_only", &echo_curve),
    ] {
        for (epoch, &loss) in curve.iter().enumerate() {
            w.serialize(LossRow { model, epoch, loss })?;
        }
    }
    w.flush()?;
    let mut w = csv::Writer::from_writer(create(&manifest.artifact(&dir, "model_stats.csv"))?);
    for (model, params, macs) in [
        (
            "vision",
            vision.params.num_scalars(),
            vision_macs(&cfg.dims),
        ),
        (
            "fused",
            fused.params.num_scalars(),
            temporal_macs(&cfg.dims, TemporalMode::Fused),
        ),
        (
            "echo_only",
            echo_only.params.num_scalars(),
            temporal_macs(&cfg.dims, TemporalMode::EchoOnly),
        ),
    ] {
        w.serialize(ModelStatsRow {
            model,
            parameters: params,
            macs,
        })?;
    }
    w.flush()?;

    let models = Models {
        vision,
        tracker: FusionTracker { fused, echo_only },
        kf,
    };
    record_latency(&mut manifest, &models, &data)?;
    manifest.write(&dir)?;
    Ok((models, manifest))
}

fn record_latency(manifest: &mut RunManifest, models: &Models, data: &Dataset) -> Result<()> {
    let Some(obs) = data
        .frames
        .iter()
        .flatten()
        .find_map(|r| r.observation.as_ref())
    else {
        return Ok(());
    };
    let reps = 20;
    let t0 = Instant::now();
    for _ in 0..reps {
        models.vision.predict(Some(obs), 0.0)?;
    }
    manifest.latency_ms.insert(
        "vision".into(),
        t0.elapsed().as_secs_f64() * 1e3 / reps as f64,
    );
    let (mid_t, mid_p) = models.vision.bounds.midpoint();
    let hist = vec![
        crate::estimators::HistoryRecord {
            theta_v: mid_t,
            phi_v: mid_p,
            theta_e: mid_t,
            phi_e: mid_p,
            v_e: 0.0,
            d_e: 100.0,
        };
        models.tracker.fused.net.history
    ];
    let cur = VsiRecord {
        theta_v: mid_t,
        phi_v: mid_p,
        valid: true,
        t: 0.0,
    };
    let t0 = Instant::now();
    for _ in 0..reps {
        models.tracker.fused.predict(&hist, Some(&cur), 0.0)?;
    }
    manifest.latency_ms.insert(
        "fused".into(),
        t0.elapsed().as_secs_f64() * 1e3 / reps as f64,
    );
    Ok(())
}

/// Loads the checkpoints in the output directory when they were trained
/// under the same configuration, otherwise trains.
pub fn load_or_train(cfg: &ExperimentConfig) -> Result<Models> {
    let dir = &cfg.output_dir;
    let info: Option<ModelInfo> = fs::read_to_string(dir.join("models.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    if let Some(info) = info.filter(|i| i.training_key == cfg.training_key()) {
        let bounds = cfg.bounds();
        let mut vision = VisionModel::new(&cfg.dims, bounds, cfg.seed(STREAM_VISION));
        let mut fused = TemporalModel::new(
            &cfg.dims,
            TemporalMode::Fused,
            bounds,
            cfg.seed(STREAM_FUSED),
        );
        let mut echo_only = TemporalModel::new(
            &cfg.dims,
            TemporalMode::EchoOnly,
            bounds,
            cfg.seed(STREAM_ECHO),
        );
        let loaded = vision
            .load(dir.join("vision.ckpt"))
            .and_then(|_| fused.load(dir.join("fused.ckpt")))
            .and_then(|_| echo_only.load(dir.join("echo_only.ckpt")));
        if loaded.is_ok() {
            return Ok(Models {
                vision,
                tracker: FusionTracker { fused, echo_only },
                kf: info.kf,
            });
        }
    }
    Ok(run_training(cfg)?.0)
}

/// One row of the steering report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerRow {
    pub s: u32,
    pub method: String,
    pub trials: usize,
    pub mean_scans: f64,
    pub ci95: f64,
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    pub p4: f64,
    pub p_end: f64,
    /// Mean of the per-trial expected cost of the region that detected
    /// (`q` of the candidate-set model around each trial's center).
    pub analytic_overhead: f64,
    pub t_comm_ms: f64,
}

fn hit_index(h: SetHit) -> usize {
    match h {
        SetHit::Set(i) => i as usize - 1,
        SetHit::End => 4,
    }
}

fn steer_row(
    s: u32,
    method: &str,
    traces: &[ScanTrace],
    analytic: &[f64],
    budget: &FrameBudget,
) -> Result<SteerRow> {
    let scans: Vec<f64> = traces.iter().map(|t| t.scans_used as f64).collect();
    let (mean, ci) = mean_ci95(&scans)?;
    let mut p = [0.0; 5];
    for t in traces {
        p[hit_index(t.set_hit)] += 1.0 / traces.len() as f64;
    }
    Ok(SteerRow {
        s,
        method: method.to_string(),
        trials: traces.len(),
        mean_scans: mean,
        ci95: ci,
        p1: p[0],
        p2: p[1],
        p3: p[2],
        p4: p[3],
        p_end: p[4],
        analytic_overhead: if analytic.is_empty() {
            f64::NAN
        } else {
            analytic.iter().sum::<f64>() / analytic.len() as f64
        },
        t_comm_ms: comm_budget(mean, budget)?.t_comm_ms,
    })
}

/// Beam steering from camera frames of the held-out trajectories at the
/// first configured SNR: vision-guided candidate scanning, the same targets
/// found by a hierarchical sweep, a perfect-vision reference and the
/// hierarchical sweep over uniform targets.
pub fn run_task_b(cfg: &ExperimentConfig, models: &Models) -> Result<(Vec<SteerRow>, RunManifest)> {
    cfg.validate()?;
    let mut manifest = RunManifest::new("steer", cfg);
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir)?;
    let data = Dataset::generate(cfg)?;
    let mut bank = EchoBank::new(cfg)?;
    let snr = cfg.snr_db[0];
    let coverage = cfg.coverage()?;
    let mut rows = Vec::new();
    let mut trials = Vec::new();
    manifest.time("steer", |_| {
        let vsi: Vec<Vec<VsiRecord>> = data
            .test
            .iter()
            .map(|&i| vision_records(&models.vision, &data.frames[i]))
            .collect::<Result<_>>()?;
        for &s in &cfg.levels {
            let cb = bank.codebook(s)?.clone();
            let (mut guided, mut analytic, mut hier, mut perfect) =
                (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for (ti, &i) in data.test.iter().enumerate() {
                for (k, r) in data.frames[i].iter().enumerate() {
                    let oracle = bank.oracle(cfg.detection, &r.truth, snr);
                    let h = match hierarchical_scan(oracle.as_ref(), s) {
                        Ok(t) => t,
                        Err(CoreError::ExhaustedTree { .. }) => continue,
                        Err(e) => return Err(e),
                    };
                    let v = vsi[ti][k];
                    let (trace, q) = if v.valid {
                        let center = cb.nearest_beam(v.theta_v, v.phi_v)?;
                        let trace = scan(oracle.as_ref(), &candidate_sets(center));
                        let model =
                            OverheadModel::for_center(center, cfg.fallback_cost, cfg.q_convention);
                        trials.push(TrialRecord::new(
                            derive_seed(i as u64, k as u64),
                            &trace,
                            center,
                        ));
                        let q = model.q()[hit_index(trace.set_hit)];
                        (trace, q)
                    } else {
                        (h.clone(), 2.5 * s as f64)
                    };
                    let truth = true_beam(&cb, &r.truth)?;
                    perfect.push(scan(oracle.as_ref(), &candidate_sets(truth)));
                    guided.push(trace);
                    analytic.push(q);
                    hier.push(h);
                }
            }
            if guided.is_empty() {
                return Err(CoreError::EmptyInput);
            }
            rows.push(steer_row(
                s,
                "vision_guided",
                &guided,
                &analytic,
                &cfg.budget,
            )?);
            rows.push(steer_row(s, "hierarchical", &hier, &[], &cfg.budget)?);
            rows.push(steer_row(s, "perfect_vision", &perfect, &[], &cfg.budget)?);
            let uniform = simulate_hierarchical(
                coverage,
                s,
                cfg.hierarchical_trials,
                derive_seed(cfg.seed(STREAM_HIERARCHICAL), s as u64),
            )?;
            let (mean, ci) = mean_ci95(&uniform)?;
            rows.push(SteerRow {
                s,
                method: "hierarchical_uniform".into(),
                trials: uniform.len(),
                mean_scans: mean,
                ci95: ci,
                p1: 0.0,
                p2: 0.0,
                p3: 0.0,
                p4: 0.0,
                p_end: 1.0,
                analytic_overhead: 2.5 * s as f64,
                t_comm_ms: comm_budget(mean, &cfg.budget)?.t_comm_ms,
            });
        }
        Ok(())
    })?;
    let mut w = csv::Writer::from_writer(create(&manifest.artifact(&dir, "steer.csv"))?);
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    write_jsonl(
        &trials,
        create(&manifest.artifact(&dir, "steer_trials.jsonl"))?,
    )?;
    manifest.write(&dir)?;
    Ok((rows, manifest))
}

/// Label of a channel case, e.g. `snr-1_few_none`.
pub fn case_name(snr_db: f64, loss: LossPreset, offset: OffsetCase) -> String {
    let loss = match loss {
        LossPreset::None => "clean".to_string(),
        LossPreset::Few => "few".to_string(),
        LossPreset::Many => "many".to_string(),
        LossPreset::Fraction(f) => format!("loss{f}"),
    };
    let offset = match offset {
        OffsetCase::None => "sync",
        OffsetCase::Delay => "delay",
        OffsetCase::Random => "random",
        OffsetCase::Advance => "advance",
    };
    format!("snr{snr_db}_{loss}_{offset}")
}

/// Per-method tracking state along one trajectory.
struct Track {
    kind: EstimatorKind,
    esi: Vec<EsiRecord>,
    kf: Option<KalmanTracker>,
    scans: Vec<f64>,
    estimates: Vec<AnglePair>,
    truth: Vec<AnglePair>,
}

impl Track {
    fn new(kind: EstimatorKind) -> Self {
        Self {
            kind,
            esi: Vec::new(),
            kf: None,
            scans: Vec::new(),
            estimates: Vec::new(),
            truth: Vec::new(),
        }
    }

    fn last_valid_echo(&self) -> Option<(f64, f64)> {
        self.esi
            .iter()
            .rev()
            .find(|e| e.valid)
            .map(|e| (e.theta_e, e.phi_e))
    }

    /// Prediction for slot `k`, before that slot's echo is known.
    fn predict(
        &mut self,
        models: &Models,
        vsi: &[VsiRecord],
        k: usize,
        dt: f64,
    ) -> Result<Option<(f64, f64)>> {
        let p = models.tracker.fused.net.history;
        let t = vsi[k].t;
        Ok(match self.kind {
            EstimatorKind::Fusion | EstimatorKind::EchoOnly => {
                let current = if self.kind == EstimatorKind::Fusion {
                    vsi[k]
                } else {
                    VsiRecord::invalid(t)
                };
                match select_inputs(&vsi[..k], &self.esi[..k], &current, p) {
                    Ok(sel) => {
                        let m = models.tracker.predict(&sel, t)?;
                        Some((m.theta_f, m.phi_f))
                    }
                    Err(CoreError::NoDataAvailable) => None,
                    Err(e) => return Err(e),
                }
            }
            EstimatorKind::Kalman => self.kf.as_mut().map(|kf| kf.predict(dt)),
            EstimatorKind::VisionOnly => {
                if vsi[k].valid {
                    Some((vsi[k].theta_v, vsi[k].phi_v))
                } else {
                    self.last_valid_echo()
                }
            }
        })
    }

    /// Folds the slot's echo into the history and the filter.
    fn absorb(&mut self, rec: EsiRecord, predicted: bool, kf_cfg: KfConfig) -> Result<()> {
        self.esi.push(rec);
        if self.kind != EstimatorKind::Kalman {
            return Ok(());
        }
        match self.kf.as_mut() {
            Some(kf) => {
                if !predicted {
                    kf.predict(rec.t - kf.t);
                }
                kf.update(&rec);
            }
            None => {
                let valid: Vec<&EsiRecord> = self.esi.iter().filter(|e| e.valid).collect();
                if valid.len() >= 2 {
                    let (a, b) = (valid[valid.len() - 2], valid[valid.len() - 1]);
                    self.kf = Some(KalmanTracker::from_records(a, b, kf_cfg)?);
                }
            }
        }
        Ok(())
    }
}

/// Beam tracking over the held-out trajectories for every configured
/// (SNR, loss, offset) case and level. The first `history` slots of each
/// trajectory are found by hierarchical sweeps and fill the histories;
/// the remaining slots are scored.
pub fn run_task_c(
    cfg: &ExperimentConfig,
    models: &Models,
) -> Result<(Vec<MetricsRow>, RunManifest)> {
    cfg.validate()?;
    let mut manifest = RunManifest::new("track", cfg);
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir)?;
    let data = Dataset::generate(cfg)?;
    let mut bank = EchoBank::new(cfg)?;
    let p = cfg.dims.history;
    let dt = data.scenario.dt;
    let vsi_clean: Vec<Vec<VsiRecord>> = manifest.time("vision", |_| {
        data.test
            .iter()
            .take(cfg.test_trajectories.unwrap_or(usize::MAX))
            .map(|&i| vision_records(&models.vision, &data.frames[i]))
            .collect()
    })?;
    let mut rows = Vec::new();
    let mut cpf = Vec::new();
    manifest.time("track", |_| {
        for (case, snr, loss, offset) in cfg.channel_cases() {
            if !cfg.cases.is_empty() && !cfg.cases.contains(&case) {
                continue;
            }
            for &s in &cfg.levels {
                let cb = bank.codebook(s)?.clone();
                let mut totals: Vec<Track> =
                    cfg.estimators.iter().map(|&k| Track::new(k)).collect();
                for (ti, &i) in data
                    .test
                    .iter()
                    .enumerate()
                    .take(cfg.test_trajectories.unwrap_or(usize::MAX))
                {
                    let traj = &data.trajectories[i];
                    let n = cfg.echo_len().min(traj.len());
                    let plan = ImpairmentPlan::build(
                        n,
                        snr,
                        loss,
                        offset,
                        dt / 2.0,
                        derive_seed(cfg.seed(STREAM_PLAN_TEST), i as u64),
                    );
                    let frames = apply_impairments(&data.frames[i][..n], traj, &plan)?;
                    let vsi: Vec<VsiRecord> = frames
                        .iter()
                        .zip(&vsi_clean[ti])
                        .map(|(r, v)| {
                            if r.observation.is_some() {
                                *v
                            } else {
                                VsiRecord::invalid(r.t)
                            }
                        })
                        .collect();
                    let mut tracks: Vec<Track> =
                        cfg.estimators.iter().map(|&k| Track::new(k)).collect();
                    for (k, r) in frames.iter().enumerate() {
                        let oracle = bank.oracle(cfg.detection, &r.echo_state, snr);
                        for track in tracks.iter_mut() {
                            let pred = if k >= p {
                                track.predict(models, &vsi, k, dt)?
                            } else {
                                None
                            };
                            let trace = match pred {
                                Some((th, ph)) => {
                                    scan(oracle.as_ref(), &candidate_sets(cb.nearest_beam(th, ph)?))
                                }
                                None => match hierarchical_scan(oracle.as_ref(), s) {
                                    Ok(t) => t,
                                    Err(CoreError::ExhaustedTree { .. }) => ScanTrace {
                                        beams_tried: Vec::new(),
                                        detected_at: None,
                                        fell_back: true,
                                        scans_used: 0,
                                        set_hit: SetHit::End,
                                    },
                                    Err(e) => return Err(e),
                                },
                            };
                            let rec = match (r.echo_valid, trace.detected_beam()) {
                                (true, Some(beam)) => {
                                    bank.measure(i, k, r.t, &r.echo_state, beam, snr)?
                                }
                                _ => EsiRecord::invalid(r.t),
                            };
                            if k >= p {
                                track.scans.push(trace.scans_used as f64);
                                if let Some((th, ph)) = pred {
                                    track.estimates.push(AnglePair { theta: th, phi: ph });
                                    track.truth.push(AnglePair {
                                        theta: r.truth.theta,
                                        phi: r.truth.phi,
                                    });
                                }
                            }
                            track.absorb(rec, pred.is_some(), models.kf)?;
                        }
                    }
                    for (total, t) in totals.iter_mut().zip(tracks) {
                        total.scans.extend(t.scans);
                        total.estimates.extend(t.estimates);
                        total.truth.extend(t.truth);
                    }
                }
                for t in totals {
                    rows.push(compute_metrics(
                        t.kind.name(),
                        &case,
                        s,
                        &t.scans,
                        &t.estimates,
                        &t.truth,
                        &cfg.budget,
                    )?);
                    cpf.push((
                        t.kind.name().to_string(),
                        case.clone(),
                        s,
                        t.estimates,
                        t.truth,
                    ));
                }
            }
        }
        Ok(())
    })?;
    write_metrics_csv(&rows, create(&manifest.artifact(&dir, "track.csv"))?)?;
    write_cpf_csv(&cpf, create(&manifest.artifact(&dir, "track_cpf.csv"))?)?;
    manifest
        .latency_ms
        .insert("captures".into(), bank.captures as f64);
    manifest.write(&dir)?;
    Ok((rows, manifest))
}

#[derive(Debug, Clone, Serialize)]
pub struct CoherenceRow {
    pub s: u32,
    pub d_m: f64,
    pub v_perp: f64,
    pub coherence_ms: f64,
}

/// Coherence time over levels, ranges and tangential speeds.
pub fn run_coherence(
    cfg: &ExperimentConfig,
    ranges: &[f64],
    speeds: &[f64],
) -> Result<Vec<CoherenceRow>> {
    let mut manifest = RunManifest::new("coherence", cfg);
    fs::create_dir_all(&cfg.output_dir)?;
    let mut rows = Vec::new();
    for &s in &cfg.levels {
        for &d in ranges {
            for &v in speeds {
                let t = coherence_time(s, d, v)?;
                rows.push(CoherenceRow {
                    s,
                    d_m: d,
                    v_perp: v,
                    coherence_ms: t.map_or(f64::INFINITY, |t| t * 1e3),
                });
            }
        }
    }
    let mut w = csv::Writer::from_writer(create(
        &manifest.artifact(&cfg.output_dir, "coherence.csv"),
    )?);
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    manifest.write(&cfg.output_dir)?;
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct BudgetRow {
    pub scans: f64,
    pub sensing_symbols: f64,
    pub t_comm_ms: f64,
    pub exceeded: bool,
}

/// Communication time left for each scan count.
pub fn run_budget(cfg: &ExperimentConfig, scans: &[f64]) -> Result<Vec<BudgetRow>> {
    let mut manifest = RunManifest::new("budget", cfg);
    fs::create_dir_all(&cfg.output_dir)?;
    let rows = scans
        .iter()
        .map(|&n| {
            let b = comm_budget(n, &cfg.budget)?;
            Ok(BudgetRow {
                scans: n,
                sensing_symbols: b.sensing_symbols,
                t_comm_ms: b.t_comm_ms,
                exceeded: b.exceeded,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut w =
        csv::Writer::from_writer(create(&manifest.artifact(&cfg.output_dir, "budget.csv"))?);
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    manifest.write(&cfg.output_dir)?;
    Ok(rows)
}

/// Writes the beam centers of every configured level.
pub fn run_export_codebook(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let mut manifest = RunManifest::new("export-codebook", cfg);
    fs::create_dir_all(&cfg.output_dir)?;
    let coverage = cfg.coverage()?;
    let mut paths = Vec::new();
    for &s in &cfg.levels {
        let cb = Codebook::new(ArrayGeometry::for_level(s), s, coverage)?;
        let path = manifest.artifact(&cfg.output_dir, &format!("codebook_s{s}.csv"));
        let mut w = create(&path)?;
        cb.export_centers(&mut w)?;
        w.flush()?;
        paths.push(path);
    }
    manifest.write(&cfg.output_dir)?;
    Ok(paths)
}
