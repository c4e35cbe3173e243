//! Learned angle estimators (vision alignment, fused temporal tracking,
//! echo-only tracking), the constant-velocity Kalman baseline and the
//! fallback policy that routes around missing modalities.

use std::path::Path;

use isac_nn::layers::{
    elementwise_cross_attention, Cnn, Grif, Linear, Mlp, ResMlp, TransformerEncoder,
};
use isac_nn::{Adam, AdamConfig, Bound, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::EsiRecord;
use crate::scenario::{derive_seed, Observation, PATCH_SIDE};
use crate::{AngleBounds, CoreError, Result};

/// Angles read off the camera by the vision aligner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VsiRecord {
    pub theta_v: f64,
    pub phi_v: f64,
    pub valid: bool,
    pub t: f64,
}

impl VsiRecord {
    pub fn invalid(t: f64) -> Self {
        Self {
            theta_v: f64::NAN,
            phi_v: f64::NAN,
            valid: false,
            t,
        }
    }
}

/// Output of a temporal estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MsiRecord {
    pub theta_f: f64,
    pub phi_f: f64,
    pub t: f64,
}

/// Layer widths shared by the learned estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    /// Width of the geometric and semantic vision features.
    pub l_vis: usize,
    /// Width of the pooled history feature (transformer model width).
    pub l_his: usize,
    /// Width of the current-vision correction feature.
    pub l_now: usize,
    /// History window in slots.
    pub history: usize,
    pub res_blocks: usize,
    pub cnn_channels: Vec<usize>,
    pub heads: usize,
    pub d_ff: usize,
    pub depth: usize,
    pub head_hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            l_vis: 16,
            l_his: 16,
            l_now: 4,
            history: 6,
            res_blocks: 2,
            cnn_channels: vec![4, 8, 8],
            heads: 2,
            d_ff: 32,
            depth: 2,
            head_hidden: 32,
        }
    }
}

/// Divisors applied to speed and range before they enter a network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureScale {
    pub speed: f64,
    pub range: f64,
}

impl Default for FeatureScale {
    fn default() -> Self {
        Self {
            speed: 27.0,
            range: 400.0,
        }
    }
}

/// Network inputs derived from one camera observation.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionInput {
    pub bbox: [f64; 4],
    pub patch: Vec<f64>,
}

impl From<&Observation> for VisionInput {
    fn from(o: &Observation) -> Self {
        Self {
            bbox: o.bbox.as_array(),
            patch: o.patch.data.clone(),
        }
    }
}

/// Box-and-patch to angle regressor. The box is embedded and refined by a
/// residual MLP (geometric feature), the patch goes through a small CNN
/// (semantic feature); two cross-attentions swap query/key and value roles
/// between them and their element-wise product is projected to two
/// sigmoid outputs.
#[derive(Debug, Clone)]
pub struct VisionAligner {
    pub geo: ResMlp,
    pub sem: Cnn,
    pub q_geo: Linear,
    pub k_geo: Linear,
    pub v_sem: Linear,
    pub q_sem: Linear,
    pub k_sem: Linear,
    pub v_geo: Linear,
    pub project: Linear,
}

impl VisionAligner {
    pub fn new(store: &mut ParamStore, dims: &ModelDims) -> Self {
        let l = dims.l_vis;
        let lin = |store: &mut ParamStore, n: &str| {
            Linear::without_bias(store, &format!("vision.{n}"), l, l)
        };
        Self {
            geo: ResMlp::new(store, "vision.geo", 4, l, dims.res_blocks),
            sem: Cnn::new(store, "vision.sem", 1, PATCH_SIDE, &dims.cnn_channels, l),
            q_geo: lin(store, "q_geo"),
            k_geo: lin(store, "k_geo"),
            v_sem: lin(store, "v_sem"),
            q_sem: lin(store, "q_sem"),
            k_sem: lin(store, "k_sem"),
            v_geo: lin(store, "v_geo"),
            project: Linear::without_bias(store, "vision.project", l, 2),
        }
    }

    /// `boxes` is `[B, 4]`, `patches` `[B, 1, 32, 32]`; returns normalized
    /// angles `[B, 2]` in (0, 1).
    pub fn forward(&self, g: &mut Graph, p: &Bound, boxes: Var, patches: Var) -> Result<Var> {
        let geo = self.geo.forward(g, p, boxes)?;
        let sem = self.sem.forward(g, p, patches)?;
        let q1 = self.q_geo.forward(g, p, geo)?;
        let k1 = self.k_geo.forward(g, p, geo)?;
        let v1 = self.v_sem.forward(g, p, sem)?;
        let f1 = elementwise_cross_attention(g, q1, k1, v1)?;
        let q2 = self.q_sem.forward(g, p, sem)?;
        let k2 = self.k_sem.forward(g, p, sem)?;
        let v2 = self.v_geo.forward(g, p, geo)?;
        let f2 = elementwise_cross_attention(g, q2, k2, v2)?;
        let fused = g.mul(f1, f2)?;
        let z = self.project.forward(g, p, fused)?;
        Ok(g.sigmoid(z))
    }

    pub fn inputs(g: &mut Graph, batch: &[&VisionInput]) -> Result<(Var, Var)> {
        let n = batch.len();
        let boxes: Vec<f64> = batch.iter().flat_map(|x| x.bbox).collect();
        let mut patches = Vec::with_capacity(n * PATCH_SIDE * PATCH_SIDE);
        for x in batch {
            if x.patch.len() != PATCH_SIDE * PATCH_SIDE {
                return Err(CoreError::Config(format!(
                    "patch has {} pixels",
                    x.patch.len()
                )));
            }
            patches.extend_from_slice(&x.patch);
        }
        let b = g.input(Tensor::from_vec(vec![n, 4], boxes)?);
        let ptch = g.input(Tensor::from_vec(
            vec![n, 1, PATCH_SIDE, PATCH_SIDE],
            patches,
        )?);
        Ok((b, ptch))
    }
}

/// Per-angle gated fusion of vision and echo angles.
#[derive(Debug, Clone)]
pub struct Fuse {
    pub theta: Grif,
    pub phi: Grif,
}

impl Fuse {
    pub fn new(store: &mut ParamStore, name: &str) -> Self {
        Self {
            theta: Grif::new(store, &format!("{name}.theta"), 1),
            phi: Grif::new(store, &format!("{name}.phi"), 1),
        }
    }

    /// `raw` is `[N, 6]` rows `[theta_v, phi_v, theta_e, phi_e, v_e, d_e]`;
    /// returns `[N, 6]` rows `[theta_f, phi_f, theta_e, phi_e, v_e, d_e]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, raw: Var) -> Result<Var> {
        let tv = g.slice_last(raw, 0, 1)?;
        let pv = g.slice_last(raw, 1, 1)?;
        let echo = g.slice_last(raw, 2, 4)?;
        let te = g.slice_last(raw, 2, 1)?;
        let pe = g.slice_last(raw, 3, 1)?;
        let tf = self.theta.forward(g, p, tv, te)?;
        let pf = self.phi.forward(g, p, pv, pe)?;
        Ok(g.concat(&[tf, pf, echo])?)
    }
}

/// Scalar fusion of two angles in the same units, outside of any batch.
pub fn fuse_scalar(grif: &Grif, store: &ParamStore, a: f64, b: f64) -> Result<f64> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let av = g.input(Tensor::from_vec(vec![1, 1], vec![a])?);
    let bv = g.input(Tensor::from_vec(vec![1, 1], vec![b])?);
    let out = grif.forward(&mut g, &p, av, bv)?;
    Ok(g.value(out)[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalMode {
    /// Fused vision/echo history plus the current-vision correction.
    Fused,
    /// Echo history only.
    EchoOnly,
}

/// Transformer over the history window with an optional current-vision
/// correction branch, followed by an MLP and two sigmoid outputs.
#[derive(Debug, Clone)]
pub struct TemporalNet {
    pub mode: TemporalMode,
    pub fuse: Option<Fuse>,
    pub encoder: TransformerEncoder,
    pub current: Option<Linear>,
    pub head: Mlp,
    pub history: usize,
}

/// Token width of a history slot.
pub const TOKEN_WIDTH: usize = 6;

impl TemporalNet {
    pub fn new(store: &mut ParamStore, name: &str, dims: &ModelDims, mode: TemporalMode) -> Self {
        let fused = mode == TemporalMode::Fused;
        let fuse = fused.then(|| Fuse::new(store, &format!("{name}.fuse")));
        let encoder = TransformerEncoder::new(
            store,
            &format!("{name}.encoder"),
            TOKEN_WIDTH,
            dims.l_his,
            dims.heads,
            dims.d_ff,
            dims.depth,
        );
        let current =
            fused.then(|| Linear::without_bias(store, &format!("{name}.current"), 2, dims.l_now));
        let d_in = dims.l_his + if fused { dims.l_now } else { 0 };
        let head = Mlp::new(store, &format!("{name}.head"), &[d_in, dims.head_hidden, 2]);
        Self {
            mode,
            fuse,
            encoder,
            current,
            head,
            history: dims.history,
        }
    }

    /// `tokens` is `[B, P, 6]` of normalized history rows, `current` is
    /// `[B, 2]` normalized current-vision angles (ignored in echo-only mode).
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        tokens: Var,
        current: Option<Var>,
    ) -> Result<Var> {
        let shape = g.shape(tokens).to_vec();
        if shape.len() != 3 || shape[1] != self.history || shape[2] != TOKEN_WIDTH {
            return Err(CoreError::HistoryTooShort {
                needed: self.history,
                have: shape.get(1).copied().unwrap_or(0),
            });
        }
        let seq = match &self.fuse {
            Some(f) => {
                let flat = g.reshape(tokens, vec![shape[0] * shape[1], TOKEN_WIDTH])?;
                let fused = f.forward(g, p, flat)?;
                g.reshape(fused, shape.clone())?
            }
            None => tokens,
        };
        let his = self.encoder.forward(g, p, seq)?;
        let feat = match (&self.current, current) {
            (Some(lin), Some(c)) => {
                let now = lin.forward(g, p, c)?;
                g.concat(&[now, his])?
            }
            (Some(_), None) => {
                return Err(CoreError::Config(
                    "fused mode needs the current vision input".into(),
                ))
            }
            (None, _) => his,
        };
        let z = self.head.forward(g, p, feat)?;
        Ok(g.sigmoid(z))
    }
}

/// One history slot in physical units. In fused mode the vision and echo
/// angles are gated together inside the network; in echo-only mode the
/// vision slots are replaced by the echo angles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub theta_v: f64,
    pub phi_v: f64,
    pub theta_e: f64,
    pub phi_e: f64,
    pub v_e: f64,
    pub d_e: f64,
}

impl HistoryRecord {
    pub fn token(
        &self,
        mode: TemporalMode,
        bounds: &AngleBounds,
        scale: &FeatureScale,
    ) -> [f64; TOKEN_WIDTH] {
        let (te, pe) = bounds.normalize(self.theta_e, self.phi_e);
        let (tv, pv) = match mode {
            TemporalMode::Fused => bounds.normalize(self.theta_v, self.phi_v),
            TemporalMode::EchoOnly => (te, pe),
        };
        [
            tv,
            pv,
            te,
            pe,
            self.v_e / scale.speed,
            self.d_e / scale.range,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    #[default]
    Fused,
    /// Current vision missing: echo-only estimator on the same history.
    EchoOnly,
}

/// Which substitutions `select_inputs` made, as window positions.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub route: Route,
    /// Echo missing: azimuth taken from concurrent vision.
    pub theta_from_vision: Vec<usize>,
    /// Echo missing: elevation (and range, speed) carried from the last valid echo.
    pub echo_carried: Vec<usize>,
    /// Vision missing: vision slots filled with the echo angles.
    pub vision_from_echo: Vec<usize>,
    /// Neither modality: whole record copied from a neighbouring slot.
    pub copied: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectedInputs {
    pub history: Vec<HistoryRecord>,
    pub current: Option<VsiRecord>,
    pub provenance: Provenance,
}

/// Builds the estimator inputs for slot `t` from per-slot vision and echo
/// records of slots before `t` (equal lengths, oldest first) and the vision
/// record of slot `t`.
///
/// Missing echo: azimuth from the concurrent vision record, elevation,
/// range and speed from the most recent valid echo. Missing vision: the
/// echo angles stand in. A slot with neither is copied from the previous
/// slot (or the next one at the start of the window). Missing current
/// vision routes to the echo-only estimator.
pub fn select_inputs(
    vsi: &[VsiRecord],
    esi: &[EsiRecord],
    current: &VsiRecord,
    window: usize,
) -> Result<SelectedInputs> {
    if vsi.len() != esi.len() {
        return Err(CoreError::Config(format!(
            "{} vision and {} echo records",
            vsi.len(),
            esi.len()
        )));
    }
    if vsi.len() < window || window == 0 {
        return Err(CoreError::HistoryTooShort {
            needed: window.max(1),
            have: vsi.len(),
        });
    }
    let start = vsi.len() - window;
    let mut last_echo: Option<EsiRecord> = esi[..start].iter().rev().find(|e| e.valid).copied();
    let mut prov = Provenance {
        route: if current.valid {
            Route::Fused
        } else {
            Route::EchoOnly
        },
        ..Default::default()
    };
    let mut slots: Vec<Option<HistoryRecord>> = Vec::with_capacity(window);
    for (i, (v, e)) in vsi[start..].iter().zip(&esi[start..]).enumerate() {
        let echo = if e.valid {
            last_echo = Some(*e);
            Some((e.theta_e, e.phi_e, e.v_e, e.d_e))
        } else {
            match (v.valid, last_echo) {
                (true, Some(l)) => {
                    prov.theta_from_vision.push(i);
                    prov.echo_carried.push(i);
                    Some((v.theta_v, l.phi_e, l.v_e, l.d_e))
                }
                (true, None) => {
                    prov.theta_from_vision.push(i);
                    Some((v.theta_v, v.phi_v, 0.0, 0.0))
                }
                (false, Some(l)) => {
                    prov.echo_carried.push(i);
                    Some((l.theta_e, l.phi_e, l.v_e, l.d_e))
                }
                (false, None) => None,
            }
        };
        let rec = echo.map(|(te, pe, ve, de)| {
            let (tv, pv) = if v.valid {
                (v.theta_v, v.phi_v)
            } else {
                prov.vision_from_echo.push(i);
                (te, pe)
            };
            HistoryRecord {
                theta_v: tv,
                phi_v: pv,
                theta_e: te,
                phi_e: pe,
                v_e: ve,
                d_e: de,
            }
        });
        slots.push(rec);
    }
    let first = slots
        .iter()
        .flatten()
        .next()
        .copied()
        .ok_or(CoreError::NoDataAvailable)?;
    let mut prev = first;
    let mut history = Vec::with_capacity(window);
    for (i, s) in slots.into_iter().enumerate() {
        match s {
            Some(r) => {
                prev = r;
                history.push(r);
            }
            None => {
                prov.copied.push(i);
                history.push(prev);
            }
        }
    }
    Ok(SelectedInputs {
        history,
        current: current.valid.then_some(*current),
        provenance: prov,
    })
}

/// Mini-batch Adam training schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-3,
            batch_size: 32,
            seed: 7,
        }
    }
}

/// Runs `cfg.epochs` passes over `n` samples in seeded shuffled mini-batches.
/// `batch_loss` records the loss for the given sample indices. Returns the
/// sample-weighted mean loss of each epoch.
pub fn fit<F>(
    params: &mut ParamStore,
    cfg: &TrainConfig,
    n: usize,
    mut batch_loss: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&mut Graph, &Bound, &[usize]) -> Result<Var>,
{
    if n == 0 {
        return Err(CoreError::EmptyInput);
    }
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut g = Graph::new();
            let p = params.bind(&mut g);
            let loss = batch_loss(&mut g, &p, chunk)?;
            let value = g.value(loss)[0];
            if !value.is_finite() {
                return Err(CoreError::DivergenceDetected { epoch });
            }
            g.backward(loss)?;
            params.collect_grads(&g, &p);
            opt.step(params);
            total += value * chunk.len() as f64;
        }
        curve.push(total / n as f64);
    }
    Ok(curve)
}

/// Training pair for the vision aligner.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionSample {
    pub input: VisionInput,
    /// Normalized true angles.
    pub target: [f64; 2],
}

/// Vision aligner with its parameters and output bounds.
#[derive(Debug, Clone)]
pub struct VisionModel {
    pub params: ParamStore,
    pub net: VisionAligner,
    pub bounds: AngleBounds,
}

impl VisionModel {
    pub fn new(dims: &ModelDims, bounds: AngleBounds, seed: u64) -> Self {
        let mut params = ParamStore::new(seed);
        let net = VisionAligner::new(&mut params, dims);
        Self {
            params,
            net,
            bounds,
        }
    }

    /// Normalized outputs for a batch.
    pub fn forward_normalized(&self, batch: &[&VisionInput]) -> Result<Vec<[f64; 2]>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let (b, x) = VisionAligner::inputs(&mut g, batch)?;
        let out = self.net.forward(&mut g, &p, b, x)?;
        Ok(g.value(out).chunks(2).map(|c| [c[0], c[1]]).collect())
    }

    pub fn predict(&self, obs: Option<&Observation>, t: f64) -> Result<VsiRecord> {
        let Some(o) = obs else {
            return Ok(VsiRecord::invalid(t));
        };
        let input = VisionInput::from(o);
        let [a, b] = self.forward_normalized(&[&input])?[0];
        let (theta_v, phi_v) = self.bounds.denormalize(a, b);
        Ok(VsiRecord {
            theta_v,
            phi_v,
            valid: true,
            t,
        })
    }

    pub fn train(&mut self, samples: &[VisionSample], cfg: &TrainConfig) -> Result<Vec<f64>> {
        let net = self.net.clone();
        fit(&mut self.params, cfg, samples.len(), |g, p, idx| {
            let batch: Vec<&VisionInput> = idx.iter().map(|&i| &samples[i].input).collect();
            let target: Vec<f64> = idx.iter().flat_map(|&i| samples[i].target).collect();
            let (b, x) = VisionAligner::inputs(g, &batch)?;
            let out = net.forward(g, p, b, x)?;
            Ok(g.mse(out, &target)?)
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(isac_nn::save_checkpoint(path, &self.params)?)
    }

    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<()> {
        Ok(isac_nn::load_checkpoint(path, &mut self.params)?)
    }
}

/// Training sample for a temporal estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalSample {
    pub history: Vec<HistoryRecord>,
    /// Current vision angles in physical units; required in fused mode.
    pub current: Option<(f64, f64)>,
    /// True angles in physical units.
    pub target: (f64, f64),
}

/// Temporal estimator with parameters, bounds and feature scaling.
#[derive(Debug, Clone)]
pub struct TemporalModel {
    pub params: ParamStore,
    pub net: TemporalNet,
    pub bounds: AngleBounds,
    pub scale: FeatureScale,
}

impl TemporalModel {
    pub fn new(dims: &ModelDims, mode: TemporalMode, bounds: AngleBounds, seed: u64) -> Self {
        let mut params = ParamStore::new(seed);
        let name = match mode {
            TemporalMode::Fused => "fused",
            TemporalMode::EchoOnly => "echo",
        };
        let net = TemporalNet::new(&mut params, name, dims, mode);
        Self {
            params,
            net,
            bounds,
            scale: FeatureScale::default(),
        }
    }

    pub fn mode(&self) -> TemporalMode {
        self.net.mode
    }

    /// Token tensor `[B, P, 6]` and the optional current-vision tensor `[B, 2]`.
    pub fn inputs(
        &self,
        g: &mut Graph,
        batch: &[(&[HistoryRecord], Option<(f64, f64)>)],
    ) -> Result<(Var, Option<Var>)> {
        let p = self.net.history;
        let mut tokens = Vec::with_capacity(batch.len() * p * TOKEN_WIDTH);
        let mut current = Vec::with_capacity(batch.len() * 2);
        for (hist, cur) in batch {
            if hist.len() != p {
                return Err(CoreError::HistoryTooShort {
                    needed: p,
                    have: hist.len(),
                });
            }
            for r in hist.iter() {
                tokens.extend(r.token(self.net.mode, &self.bounds, &self.scale));
            }
            if self.net.mode == TemporalMode::Fused {
                let (t, ph) = cur.ok_or_else(|| {
                    CoreError::Config("fused mode needs the current vision input".into())
                })?;
                let (a, b) = self.bounds.normalize(t, ph);
                current.extend([a, b]);
            }
        }
        let tok = g.input(Tensor::from_vec(vec![batch.len(), p, TOKEN_WIDTH], tokens)?);
        let cur = if self.net.mode == TemporalMode::Fused {
            Some(g.input(Tensor::from_vec(vec![batch.len(), 2], current)?))
        } else {
            None
        };
        Ok((tok, cur))
    }

    /// Normalized outputs for a batch of `(history, current vision)`.
    pub fn forward_normalized(
        &self,
        batch: &[(&[HistoryRecord], Option<(f64, f64)>)],
    ) -> Result<Vec<[f64; 2]>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let (tok, cur) = self.inputs(&mut g, batch)?;
        let out = self.net.forward(&mut g, &p, tok, cur)?;
        Ok(g.value(out).chunks(2).map(|c| [c[0], c[1]]).collect())
    }

    pub fn predict(
        &self,
        history: &[HistoryRecord],
        current: Option<&VsiRecord>,
        t: f64,
    ) -> Result<MsiRecord> {
        let cur = current.filter(|v| v.valid).map(|v| (v.theta_v, v.phi_v));
        let [a, b] = self.forward_normalized(&[(history, cur)])?[0];
        let (theta_f, phi_f) = self.bounds.denormalize(a, b);
        Ok(MsiRecord { theta_f, phi_f, t })
    }

    pub fn train(&mut self, samples: &[TemporalSample], cfg: &TrainConfig) -> Result<Vec<f64>> {
        let this = self.clone();
        fit(&mut self.params, cfg, samples.len(), |g, p, idx| {
            let batch: Vec<(&[HistoryRecord], Option<(f64, f64)>)> = idx
                .iter()
                .map(|&i| (samples[i].history.as_slice(), samples[i].current))
                .collect();
            let target: Vec<f64> = idx
                .iter()
                .flat_map(|&i| {
                    let (a, b) = this
                        .bounds
                        .normalize(samples[i].target.0, samples[i].target.1);
                    [a, b]
                })
                .collect();
            let (tok, cur) = this.inputs(g, &batch)?;
            let out = this.net.forward(g, p, tok, cur)?;
            Ok(g.mse(out, &target)?)
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(isac_nn::save_checkpoint(path, &self.params)?)
    }

    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<()> {
        Ok(isac_nn::load_checkpoint(path, &mut self.params)?)
    }
}

/// Fused tracker with the echo-only fallback used when the current frame
/// has no vision.
#[derive(Debug, Clone)]
pub struct FusionTracker {
    pub fused: TemporalModel,
    pub echo_only: TemporalModel,
}

impl FusionTracker {
    pub fn predict(&self, inputs: &SelectedInputs, t: f64) -> Result<MsiRecord> {
        match (inputs.provenance.route, inputs.current) {
            (Route::Fused, Some(cur)) => self.fused.predict(&inputs.history, Some(&cur), t),
            _ => self.echo_only.predict(&inputs.history, None, t),
        }
    }
}

/// Process and measurement noise of the constant-velocity filter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KfConfig {
    /// Per-step process noise on the angle, rad^2.
    pub q_angle: f64,
    /// Per-step process noise on the angular rate, rad^2.
    pub q_rate: f64,
    /// Measurement variance, rad^2.
    pub r: f64,
}

impl Default for KfConfig {
    fn default() -> Self {
        Self {
            q_angle: 1e-6,
            q_rate: 1e-5,
            r: 1e-6,
        }
    }
}

/// Sample variance, used to set the measurement noise from calibration errors.
pub fn measurement_variance(errors: &[f64]) -> Result<f64> {
    if errors.len() < 2 {
        return Err(CoreError::EmptyInput);
    }
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    Ok(errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Linear Kalman filter on `[angle, rate]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleFilter {
    pub x: [f64; 2],
    pub p: [[f64; 2]; 2],
}

impl AngleFilter {
    /// State from two measurements `dt` apart, with the covariance of the
    /// two-point difference.
    pub fn from_pair(z1: f64, z2: f64, dt: f64, r: f64) -> Self {
        Self {
            x: [z2, (z2 - z1) / dt],
            p: [[r, r / dt], [r / dt, 2.0 * r / (dt * dt)]],
        }
    }

    pub fn predict(&mut self, dt: f64, q_angle: f64, q_rate: f64) -> f64 {
        let [a, r] = self.x;
        self.x = [a + dt * r, r];
        let p = self.p;
        let p00 = p[0][0] + dt * (p[1][0] + p[0][1]) + dt * dt * p[1][1] + q_angle;
        let p01 = p[0][1] + dt * p[1][1];
        let p10 = p[1][0] + dt * p[1][1];
        let p11 = p[1][1] + q_rate;
        self.p = [[p00, p01], [p10, p11]];
        self.x[0]
    }

    pub fn update(&mut self, z: f64, r: f64) {
        let s = self.p[0][0] + r;
        let k = [self.p[0][0] / s, self.p[1][0] / s];
        let innov = z - self.x[0];
        self.x = [self.x[0] + k[0] * innov, self.x[1] + k[1] * innov];
        let p = self.p;
        self.p = [
            [(1.0 - k[0]) * p[0][0], (1.0 - k[0]) * p[0][1]],
            [p[1][0] - k[1] * p[0][0], p[1][1] - k[1] * p[0][1]],
        ];
    }
}

/// Independent constant-velocity filters on azimuth and elevation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KalmanTracker {
    pub theta: AngleFilter,
    pub phi: AngleFilter,
    pub config: KfConfig,
    pub t: f64,
}

impl KalmanTracker {
    /// Initializes from the first two valid echo records.
    pub fn from_records(first: &EsiRecord, second: &EsiRecord, config: KfConfig) -> Result<Self> {
        let dt = second.t - first.t;
        if !first.valid || !second.valid || !(dt > 0.0) {
            return Err(CoreError::Config(
                "filter needs two valid, time-ordered echo records".into(),
            ));
        }
        Ok(Self {
            theta: AngleFilter::from_pair(first.theta_e, second.theta_e, dt, config.r),
            phi: AngleFilter::from_pair(first.phi_e, second.phi_e, dt, config.r),
            config,
            t: second.t,
        })
    }

    /// Advances the state by `dt` and returns the predicted angles.
    pub fn predict(&mut self, dt: f64) -> (f64, f64) {
        let c = self.config;
        self.t += dt;
        (
            self.theta.predict(dt, c.q_angle, c.q_rate),
            self.phi.predict(dt, c.q_angle, c.q_rate),
        )
    }

    /// Folds in an echo measurement; invalid records leave the state on its
    /// prediction.
    pub fn update(&mut self, esi: &EsiRecord) {
        if esi.valid {
            self.theta.update(esi.theta_e, self.config.r);
            self.phi.update(esi.phi_e, self.config.r);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use isac_nn::gradcheck::{check, GradCheckConfig};
    use rand::Rng;

    fn bounds() -> AngleBounds {
        AngleBounds::default()
    }

    fn small_dims() -> ModelDims {
        ModelDims {
            l_vis: 4,
            l_his: 4,
            l_now: 2,
            history: 3,
            res_blocks: 1,
            cnn_channels: vec![2, 2, 2],
            heads: 2,
            d_ff: 4,
            depth: 1,
            head_hidden: 4,
        }
    }

    fn vision_input(rng: &mut ChaCha8Rng) -> VisionInput {
        VisionInput {
            bbox: [
                rng.random(),
                rng.random(),
                rng.random_range(0.02..0.3),
                rng.random_range(0.02..0.3),
            ],
            patch: (0..PATCH_SIDE * PATCH_SIDE)
                .map(|_| rng.random::<f64>())
                .collect(),
        }
    }

    fn history(rng: &mut ChaCha8Rng, n: usize) -> Vec<HistoryRecord> {
        let b = bounds();
        (0..n)
            .map(|_| {
                let (tv, pv) = b.denormalize(rng.random(), rng.random());
                let (te, pe) = b.denormalize(rng.random(), rng.random());
                HistoryRecord {
                    theta_v: tv,
                    phi_v: pv,
                    theta_e: te,
                    phi_e: pe,
                    v_e: rng.random_range(-27.0..27.0),
                    d_e: rng.random_range(30.0..400.0),
                }
            })
            .collect()
    }

    fn zero(store: &mut ParamStore, id: isac_nn::ParamId) {
        let n = store.get(id).len();
        store.set(id, &vec![0.0; n]).unwrap();
    }

    #[test]
    fn zeroed_projection_gives_midpoint() {
        let mut m = VisionModel::new(&ModelDims::default(), bounds(), 3);
        zero(&mut m.params, m.net.project.w);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = vision_input(&mut rng);
        let [a, b] = m.forward_normalized(&[&x]).unwrap()[0];
        assert_eq!((a, b), (0.5, 0.5));

        for mode in [TemporalMode::Fused, TemporalMode::EchoOnly] {
            let mut t = TemporalModel::new(&ModelDims::default(), mode, bounds(), 4);
            let last = t.net.head.layers.last().unwrap().clone();
            zero(&mut t.params, last.w);
            zero(&mut t.params, last.b.unwrap());
            let h = history(&mut rng, 6);
            let cur = VsiRecord {
                theta_v: 2.2,
                phi_v: 0.6,
                valid: true,
                t: 0.0,
            };
            let out = t.predict(&h, Some(&cur), 0.0).unwrap();
            assert_eq!((out.theta_f, out.phi_f), bounds().midpoint());
        }
    }

    #[test]
    fn outputs_stay_in_bounds_for_large_parameters() {
        let b = bounds();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut v = VisionModel::new(&small_dims(), b, 1);
        let mut f = TemporalModel::new(&small_dims(), TemporalMode::Fused, b, 2);
        for _ in 0..20 {
            v.params.randomize(&mut rng, 20.0);
            f.params.randomize(&mut rng, 20.0);
            let x = vision_input(&mut rng);
            let o = v.predict(None, 0.0).unwrap();
            assert!(!o.valid);
            let [a, bb] = v.forward_normalized(&[&x]).unwrap()[0];
            let (t, p) = b.denormalize(a, bb);
            assert!(b.contains(t, p));
            let h = history(&mut rng, 3);
            let out = f.forward_normalized(&[(&h, Some((2.3, 0.7)))]).unwrap()[0];
            let (t, p) = b.denormalize(out[0], out[1]);
            assert!(b.contains(t, p));
        }
    }

    #[test]
    fn fuse_is_convex_and_saturates() {
        let mut store = ParamStore::new(5);
        let grif = Grif::new(&mut store, "g", 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            store.randomize(&mut rng, 3.0);
            let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let f = fuse_scalar(&grif, &store, a, b).unwrap();
            assert!(f >= a.min(b) - 1e-12 && f <= a.max(b) + 1e-12);
            assert!((fuse_scalar(&grif, &store, a, a).unwrap() - a).abs() < 1e-15);
        }
        zero(&mut store, grif.gate.w);
        store.set(grif.gate.b.unwrap(), &[60.0]).unwrap();
        assert_eq!(fuse_scalar(&grif, &store, 1.25, -0.5).unwrap(), 1.25);
    }

    /// A fused estimator whose current branch is zeroed, whose gates are
    /// saturated toward the echo input and whose head reads only the
    /// history feature computes exactly what the echo-only estimator does.
    #[test]
    fn ablated_fused_matches_echo_only() {
        let dims = ModelDims::default();
        let b = bounds();
        let echo = TemporalModel::new(&dims, TemporalMode::EchoOnly, b, 11);
        let mut fused = TemporalModel::new(&dims, TemporalMode::Fused, b, 12);
        // Copy the shared parameters by name suffix.
        let ids: Vec<_> = echo.params.ids().collect();
        for id in ids {
            let name = echo.params.name(id).trim_start_matches("echo.").to_string();
            let target = fused.params.find(&format!("fused.{name}")).unwrap();
            let src = echo.params.get(id).data().to_vec();
            if name == "head.0.w" {
                // Fused head input is [f_now, f_his]: zero rows for f_now.
                let (rows, cols) = (dims.l_now + dims.l_his, dims.head_hidden);
                let mut w = vec![0.0; rows * cols];
                w[dims.l_now * cols..].copy_from_slice(&src);
                fused.params.set(target, &w).unwrap();
            } else {
                fused.params.set(target, &src).unwrap();
            }
        }
        let fuse = fused.net.fuse.clone().unwrap();
        for grif in [&fuse.theta, &fuse.phi] {
            zero(&mut fused.params, grif.gate.w);
            fused.params.set(grif.gate.b.unwrap(), &[-60.0]).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let h = history(&mut rng, dims.history);
            let a = echo.forward_normalized(&[(&h, None)]).unwrap()[0];
            let f = fused.forward_normalized(&[(&h, Some((2.0, 1.0)))]).unwrap()[0];
            assert!(
                (a[0] - f[0]).abs() < 1e-12 && (a[1] - f[1]).abs() < 1e-12,
                "{a:?} {f:?}"
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let dims = small_dims();
        let b = bounds();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut v = VisionModel::new(&dims, b, 1);
        let xs: Vec<VisionInput> = (0..2).map(|_| vision_input(&mut rng)).collect();
        let net = v.net.clone();
        let report = check(&mut v.params, GradCheckConfig::default(), |g, p| {
            let batch: Vec<&VisionInput> = xs.iter().collect();
            let (bx, px) = VisionAligner::inputs(g, &batch).unwrap();
            let out = net.forward(g, p, bx, px).unwrap();
            g.mse(out, &[0.2, 0.7, 0.9, 0.1])
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-4, "{:?}", report.worst());

        let mut f = TemporalModel::new(&dims, TemporalMode::Fused, b, 2);
        let h = history(&mut rng, dims.history);
        let this = f.clone();
        let report = check(&mut f.params, GradCheckConfig::default(), |g, p| {
            let (tok, cur) = this.inputs(g, &[(&h, Some((2.2, 0.8)))]).unwrap();
            let out = this.net.forward(g, p, tok, cur).unwrap();
            g.mse(out, &[0.3, 0.6])
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-4, "{:?}", report.worst());
    }

    fn esi(t: f64, theta: f64, phi: f64) -> EsiRecord {
        EsiRecord {
            theta_e: theta,
            phi_e: phi,
            v_e: 1.0,
            d_e: 100.0,
            valid: true,
            t,
        }
    }

    fn vsi(t: f64, theta: f64, phi: f64) -> VsiRecord {
        VsiRecord {
            theta_v: theta,
            phi_v: phi,
            valid: true,
            t,
        }
    }

    #[test]
    fn select_inputs_policies() {
        let v: Vec<VsiRecord> = (0..4)
            .map(|i| vsi(i as f64, 2.0 + 0.01 * i as f64, 0.5))
            .collect();
        let e: Vec<EsiRecord> = (0..4)
            .map(|i| esi(i as f64, 2.1 + 0.01 * i as f64, 0.6 + 0.01 * i as f64))
            .collect();
        let cur = vsi(4.0, 2.05, 0.5);
        let s = select_inputs(&v, &e, &cur, 3).unwrap();
        assert_eq!(s.provenance, Provenance::default());
        assert_eq!(s.history[0].theta_e, 2.11);
        assert_eq!(s.history[2].theta_v, v[3].theta_v);

        let s = select_inputs(&v, &e, &VsiRecord::invalid(4.0), 3).unwrap();
        assert_eq!(s.provenance.route, Route::EchoOnly);
        assert!(s.current.is_none());

        let mut e2 = e.clone();
        e2[2] = EsiRecord::invalid(2.0);
        let s = select_inputs(&v, &e2, &cur, 3).unwrap();
        assert_eq!(s.history[1].theta_e, v[2].theta_v);
        assert_eq!(s.history[1].phi_e, e[1].phi_e);
        assert_eq!(s.provenance.theta_from_vision, vec![1]);
        assert_eq!(s.provenance.echo_carried, vec![1]);

        let mut v2 = v.clone();
        v2[3] = VsiRecord::invalid(3.0);
        let s = select_inputs(&v2, &e, &cur, 3).unwrap();
        assert_eq!(
            (s.history[2].theta_v, s.history[2].phi_v),
            (e[3].theta_e, e[3].phi_e)
        );

        assert!(matches!(
            select_inputs(&v[..2], &e[..2], &cur, 3),
            Err(CoreError::HistoryTooShort { needed: 3, have: 2 })
        ));
        let nv = vec![VsiRecord::invalid(0.0); 3];
        let ne = vec![EsiRecord::invalid(0.0); 3];
        assert!(matches!(
            select_inputs(&nv, &ne, &cur, 3),
            Err(CoreError::NoDataAvailable)
        ));
    }

    #[test]
    fn kalman_tracks_linear_motion_exactly() {
        let cfg = KfConfig {
            r: 1e-6,
            ..KfConfig::default()
        };
        let dt = 0.1;
        let th = |k: f64| 2.0 + 0.05 * k * dt;
        let ph = |k: f64| 0.7 - 0.02 * k * dt;
        let mut kf = KalmanTracker::from_records(
            &esi(0.0, th(0.0), ph(0.0)),
            &esi(dt, th(1.0), ph(1.0)),
            cfg,
        )
        .unwrap();
        for k in 2..10 {
            let (pt, pp) = kf.predict(dt);
            if k >= 7 {
                assert!((pt - th(k as f64)).abs() < 1e-12 && (pp - ph(k as f64)).abs() < 1e-12);
            }
            kf.update(&esi(k as f64 * dt, th(k as f64), ph(k as f64)));
        }
        let mut still =
            KalmanTracker::from_records(&esi(0.0, 2.0, 0.5), &esi(dt, 2.0, 0.5), cfg).unwrap();
        for k in 2..20 {
            still.predict(dt);
            still.update(&esi(k as f64 * dt, 2.0, 0.5));
        }
        assert_eq!(still.theta.x[1], 0.0);
    }

    #[test]
    fn kalman_reduces_white_noise() {
        use rand_distr::{Distribution, Normal};
        let sigma = 1e-3;
        let cfg = KfConfig {
            q_angle: 1e-12,
            q_rate: 1e-12,
            r: sigma * sigma,
        };
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut est = Vec::new();
        for _ in 0..400 {
            let mut m = || esi(0.0, 2.0 + noise.sample(&mut rng), 0.5);
            let (a, mut b) = (m(), m());
            b.t = 0.1;
            let mut kf = KalmanTracker::from_records(&a, &b, cfg).unwrap();
            for _ in 0..30 {
                kf.predict(0.1);
                kf.update(&m());
            }
            est.push(kf.theta.x[0] - 2.0);
        }
        let var = measurement_variance(&est).unwrap();
        assert!(var < 0.5 * sigma * sigma, "{var}");
        assert!(
            KalmanTracker::from_records(&esi(0.0, 1.0, 1.0), &esi(0.0, 1.0, 1.0), cfg).is_err()
        );
    }

    #[test]
    fn training_reduces_loss_and_zero_lr_freezes() {
        let b = bounds();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samples: Vec<TemporalSample> = (0..32)
            .map(|_| {
                let h = history(&mut rng, 3);
                let target = (h[2].theta_e, h[2].phi_e);
                TemporalSample {
                    history: h,
                    current: None,
                    target,
                }
            })
            .collect();
        let mut m = TemporalModel::new(&small_dims(), TemporalMode::EchoOnly, b, 6);
        let cfg = TrainConfig {
            epochs: 10,
            lr: 1e-2,
            batch_size: 8,
            seed: 1,
        };
        let mut frozen = m.clone();
        let curve = m.train(&samples, &cfg).unwrap();
        assert!(curve[9] < curve[0], "{curve:?}");
        let before = frozen.params.flatten();
        frozen
            .train(&samples, &TrainConfig { lr: 0.0, ..cfg })
            .unwrap();
        assert_eq!(frozen.params.flatten(), before);

        let mut again = TemporalModel::new(&small_dims(), TemporalMode::EchoOnly, b, 6);
        assert_eq!(again.train(&samples, &cfg).unwrap(), curve);
        assert_eq!(again.params.flatten(), m.params.flatten());
    }
}
