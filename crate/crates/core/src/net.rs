//! The pseudo-siamese attention network, the bidirectional correspondence
//! heads, the direct pose head, their losses and the training loop.
//!
//! Every "Conv1D" layer is a dense layer shared across points. Positions are
//! centered on their cloud's centroid and scaled by the model radius before
//! they enter the network; predicted positions are mapped back to meters
//! inside the graph so that every loss is in meters.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Frame, OrientedPoint, OrientedPointCloud, Pose, Rotation, UnitVec3, Vec3};
use crate::metrics::{model_diameter, EvalRecord, MetricsReport};
use crate::ppf::{argmax, attention_target, PpfGammas};
use crate::solver::{average_poses, poses_from_matches, CorrespondenceSet, Direction, PoseSet, Provenance};
use crate::synth::{derive_seed, sample_rotation, Dataset, RotationRange};
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph, PoseDistanceMode, Tensor, Var};

/// Width of the raw per-point input: centered position and normal.
pub const RAW_WIDTH: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsnConfig {
    /// Widths of the shared trunk, input first.
    pub trunk: Vec<usize>,
    /// Width of the exterior feature taken from the opposite cloud.
    pub exterior: usize,
    pub output: usize,
}

impl Default for PsnConfig {
    fn default() -> Self {
        PsnConfig {
            trunk: vec![RAW_WIDTH, 64, 128, 256, 512, 1024],
            exterior: 24,
            output: 512,
        }
    }
}

impl PsnConfig {
    /// Width after the exterior feature is appended.
    pub fn fused_width(&self) -> usize {
        self.trunk.last().copied().unwrap_or(0) + self.exterior
    }

    pub fn validate(&self) -> Result<()> {
        if self.trunk.len() < 3 {
            return Err(invalid("psn_trunk", "need at least 2 layers"));
        }
        if self.trunk[0] != RAW_WIDTH {
            return Err(invalid("psn_trunk", "input width must be 6"));
        }
        if self.trunk.contains(&0) || self.exterior == 0 || self.output == 0 {
            return Err(invalid("psn_trunk", "widths must be positive"));
        }
        Ok(())
    }
}

/// Which heads see the attention map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionFlags {
    pub scene_branch: bool,
    pub model_branch: bool,
    pub direct: bool,
}

impl AttentionFlags {
    pub const ALL: AttentionFlags = AttentionFlags {
        scene_branch: true,
        model_branch: true,
        direct: true,
    };
    pub const NONE: AttentionFlags = AttentionFlags {
        scene_branch: false,
        model_branch: false,
        direct: false,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub n_points: usize,
    pub psn: PsnConfig,
    /// Share PSN weights between the two clouds. Off gives each cloud its own
    /// copy.
    pub psn_shared: bool,
    /// Hidden widths of the per-cloud feature extractor.
    pub feature: Vec<usize>,
    pub decoder: usize,
    /// Hidden widths of each regressor.
    pub regressor: Vec<usize>,
    pub attention: AttentionFlags,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            n_points: 1000,
            psn: PsnConfig::default(),
            psn_shared: true,
            feature: vec![64, 128],
            decoder: 128,
            regressor: vec![256, 128],
            attention: AttentionFlags::ALL,
        }
    }
}

impl NetConfig {
    /// Input width of the feature extractor: raw input plus the scalar
    /// channel.
    pub fn feature_input_width(&self) -> usize {
        RAW_WIDTH + 1
    }

    /// Width of `F_s` / `F_m`: last hidden layer plus its pooled copy.
    pub fn branch_input_width(&self) -> usize {
        2 * self.feature.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        self.psn.validate()?;
        if self.n_points < 4 {
            return Err(invalid("n_points", "need at least 4 points"));
        }
        if self.feature.is_empty() || self.feature.contains(&0) {
            return Err(invalid("feature_widths", "need at least one positive width"));
        }
        if self.decoder == 0 || self.regressor.contains(&0) {
            return Err(invalid("regressor_widths", "widths must be positive"));
        }
        Ok(())
    }
}

fn invalid(key: &str, reason: &str) -> Error {
    Error::InvalidConfig {
        key: key.into(),
        reason: reason.into(),
    }
}

/// Joint loss weights `φ₁..φ₄` and the normal-term balance `ε`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub phi: [f64; 4],
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            phi: [1.0, 1.0, 1.0, 0.01],
            epsilon: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.phi.iter().chain([&self.epsilon]).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid("phi", "loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub gammas: PpfGammas,
    /// Supervise the attention map with the PPF target. Off is the same as
    /// `φ₄ = 0`.
    pub ppf_supervision: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            gammas: PpfGammas::default(),
            ppf_supervision: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.gammas.validate()?;
        let a = &self.adam;
        if !(a.lr.is_finite() && a.lr >= 0.0) {
            return Err(invalid("lr", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(invalid("adam", "betas must lie in [0, 1) and eps be positive"));
        }
        Ok(())
    }

    fn attention_weight(&self) -> f64 {
        if self.ppf_supervision {
            self.weights.phi[3]
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct PsnLayout {
    trunk: Vec<Dense>,
    exterior: Dense,
    out: Dense,
}

#[derive(Clone, Debug)]
struct Layout {
    psn: PsnLayout,
    /// Separate model-cloud weights when the PSN is not shared.
    psn_model: Option<PsnLayout>,
    feature_scene: Vec<Dense>,
    feature_model: Vec<Dense>,
    decoder_scene: Dense,
    decoder_model: Dense,
    decoder_direct: Dense,
    regressor_scene: Vec<Dense>,
    regressor_model: Vec<Dense>,
    regressor_direct: Vec<Dense>,
}

#[derive(Clone, Copy)]
enum Init {
    /// `N(0, 2/fan_in)`.
    He,
    /// `N(0, (scale)²/fan_in)`.
    Scaled(f64),
}

struct Builder {
    names: Vec<String>,
    params: Vec<Tensor>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize, init: Init) -> Dense {
        let std = match init {
            Init::He => (2.0 / fan_in as f64).sqrt(),
            Init::Scaled(s) => s / (fan_in as f64).sqrt(),
        };
        let normal = Normal::new(0.0, std).expect("positive std");
        let data = (0..fan_in * fan_out).map(|_| normal.sample(&mut self.rng)).collect();
        self.names.push(format!("{name}.w"));
        self.params.push(Tensor {
            rows: fan_in,
            cols: fan_out,
            data,
        });
        self.names.push(format!("{name}.b"));
        self.params.push(Tensor::zeros(1, fan_out));
        Dense {
            w: self.params.len() - 2,
            b: self.params.len() - 1,
        }
    }

    fn mlp(&mut self, name: &str, input: usize, hidden: &[usize], output: usize, last: Init) -> Vec<Dense> {
        let mut layers = Vec::new();
        let mut width = input;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(self.dense(&format!("{name}.{i}"), width, h, Init::He));
            width = h;
        }
        layers.push(self.dense(&format!("{name}.{}", hidden.len()), width, output, last));
        layers
    }
}

/// Network parameters with their names and the configuration that shapes
/// them.
#[derive(Clone, Debug)]
pub struct Network {
    config: NetConfig,
    layout: Layout,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl Network {
    /// Randomly initialised network.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            names: Vec::new(),
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let psn = psn_layout(&mut b, "psn", &config.psn);
        let psn_model = (!config.psn_shared).then(|| psn_layout(&mut b, "psn.model", &config.psn));

        let fin = config.feature_input_width();
        let feature_scene = feature_layers(&mut b, "feature.scene", fin, &config.feature);
        let feature_model = feature_layers(&mut b, "feature.model", fin, &config.feature);

        let width = config.branch_input_width();
        let dec = config.decoder;
        let decoder_scene = b.dense("branch.scene.decoder", width, dec, Init::He);
        let decoder_model = b.dense("branch.model.decoder", width, dec, Init::He);
        let decoder_direct = b.dense("direct.decoder", width, dec, Init::He);

        let base = 2 * dec + RAW_WIDTH;
        let att = &config.attention;
        let n = config.n_points;
        let scene_in = base + if att.scene_branch { n + 3 } else { 0 };
        let model_in = base + if att.model_branch { 3 } else { 0 };
        let direct_in = base + if att.direct { n + 3 } else { 0 };
        let regressor_scene = b.mlp("branch.scene.regressor", scene_in, &config.regressor, 6, Init::Scaled(0.1));
        let regressor_model = b.mlp("branch.model.regressor", model_in, &config.regressor, 6, Init::Scaled(0.1));
        let regressor_direct = b.mlp("direct.regressor", direct_in, &config.regressor, 7, Init::Scaled(0.01));
        // identity rotation as the starting quaternion
        let bias = regressor_direct.last().expect("non-empty").b;
        b.params[bias].data[0] = 1.0;

        let layout = Layout {
            psn,
            psn_model,
            feature_scene,
            feature_model,
            decoder_scene,
            decoder_model,
            decoder_direct,
            regressor_scene,
            regressor_model,
            regressor_direct,
        };
        Ok(Network {
            config,
            layout,
            names: b.names,
            params: b.params,
        })
    }

    /// Rebuilds a network from named tensors, checking names and shapes
    /// against `config`.
    pub fn from_named(config: NetConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut net = Network::new(config, 0)?;
        if tensors.len() != net.params.len() {
            return Err(Error::SchemaViolation(format!(
                "expected {} tensors, found {}",
                net.params.len(),
                tensors.len()
            )));
        }
        for (i, (name, t)) in tensors.into_iter().enumerate() {
            if name != net.names[i] {
                return Err(Error::SchemaViolation(format!("tensor {i}: expected '{}', found '{name}'", net.names[i])));
            }
            if t.shape() != net.params[i].shape() {
                return Err(Error::SchemaViolation(format!(
                    "tensor '{name}': expected {:?}, found {:?}",
                    net.params[i].shape(),
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::NonFiniteInput(format!("tensor '{name}'")));
            }
            net.params[i] = t;
        }
        Ok(net)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Adds every parameter to `g`, trainable or not.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Vec<Var>> {
        self.params
            .iter()
            .map(|p| if trainable { g.param(p.clone()) } else { g.constant(p.clone()) })
            .collect()
    }
}

fn psn_layout(b: &mut Builder, name: &str, psn: &PsnConfig) -> PsnLayout {
    let depth = psn.trunk.len() - 1;
    let mut trunk = Vec::new();
    for i in 0..depth - 1 {
        trunk.push(b.dense(&format!("{name}.trunk.{i}"), psn.trunk[i], psn.trunk[i + 1], Init::He));
    }
    // skip connections from every earlier layer plus the pooled global feature
    let skip_width: usize = psn.trunk[1..depth].iter().sum::<usize>() + psn.trunk[depth - 1];
    trunk.push(b.dense(&format!("{name}.trunk.{}", depth - 1), skip_width, psn.trunk[depth], Init::He));
    let exterior = b.dense(&format!("{name}.exterior"), psn.trunk[depth], psn.exterior, Init::He);
    let out = b.dense(&format!("{name}.out"), psn.fused_width(), psn.output, Init::Scaled(1.0));
    PsnLayout { trunk, exterior, out }
}

fn feature_layers(b: &mut Builder, name: &str, input: usize, widths: &[usize]) -> Vec<Dense> {
    let mut width = input;
    widths
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let d = b.dense(&format!("{name}.{i}"), width, w, Init::He);
            width = w;
            d
        })
        .collect()
}

/// Normalised network input for one scene/model pair.
#[derive(Clone, Debug)]
pub struct NetInput {
    /// `N×6`: centered, scaled positions and normals.
    pub scene: Tensor,
    pub model: Tensor,
    /// `N×1` optional scalar channel, zero when absent.
    pub scene_channel: Tensor,
    pub model_channel: Tensor,
    pub scene_center: Vec3,
    pub model_center: Vec3,
    /// Meters → network units.
    pub scale: f64,
}

impl NetInput {
    pub fn new(scene: &OrientedPointCloud, model: &OrientedPointCloud) -> Result<Self> {
        if scene.len() != model.len() {
            return Err(Error::SizeMismatch {
                left: scene.len(),
                right: model.len(),
            });
        }
        let model_center = model.centroid();
        let radius = model.positions().map(|p| (p - model_center).norm()).fold(0.0, f64::max);
        if !(radius > 0.0) {
            return Err(Error::DegenerateConfiguration("model cloud has zero extent".into()));
        }
        let scale = 1.0 / radius;
        let scene_center = scene.centroid();
        let n = scene.len();
        Ok(NetInput {
            scene: raw_tensor(scene, &scene_center, scale),
            model: raw_tensor(model, &model_center, scale),
            scene_channel: Tensor::zeros(n, 1),
            model_channel: Tensor::zeros(n, 1),
            scene_center,
            model_center,
            scale,
        })
    }

    /// Sets the scalar channels; each must hold one value per point.
    pub fn with_channels(mut self, scene: &[f64], model: &[f64]) -> Result<Self> {
        let n = self.scene.rows;
        if scene.len() != n || model.len() != n {
            return Err(Error::SizeMismatch {
                left: scene.len(),
                right: model.len(),
            });
        }
        self.scene_channel = Tensor::new(n, 1, scene.to_vec())?;
        self.model_channel = Tensor::new(n, 1, model.to_vec())?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.scene.rows
    }

    pub fn is_empty(&self) -> bool {
        self.scene.rows == 0
    }

    /// First three columns of a raw tensor.
    fn positions(raw: &Tensor) -> Tensor {
        let data = (0..raw.rows).flat_map(|i| raw.row(i)[..3].to_vec()).collect();
        Tensor {
            rows: raw.rows,
            cols: 3,
            data,
        }
    }
}

fn raw_tensor(cloud: &OrientedPointCloud, center: &Vec3, scale: f64) -> Tensor {
    let mut data = Vec::with_capacity(cloud.len() * RAW_WIDTH);
    for p in cloud.points() {
        let c = (p.position - center) * scale;
        let n = p.normal.as_vec();
        data.extend_from_slice(&[c.x, c.y, c.z, n.x, n.y, n.z]);
    }
    Tensor {
        rows: cloud.len(),
        cols: RAW_WIDTH,
        data,
    }
}

fn dense(g: &mut Graph, p: &[Var], x: Var, d: Dense) -> Result<Var> {
    let y = g.matmul(x, p[d.w])?;
    g.add(y, p[d.b])
}

fn mlp(g: &mut Graph, p: &[Var], mut x: Var, layers: &[Dense]) -> Result<Var> {
    let (last, hidden) = layers.split_last().expect("non-empty mlp");
    for d in hidden {
        x = dense(g, p, x, *d)?;
        x = g.relu(x)?;
    }
    dense(g, p, x, *last)
}

fn pooled(g: &mut Graph, x: Var, rows: usize) -> Result<Var> {
    let m = g.mean_pool_rows(x)?;
    g.broadcast_rows(m, rows)
}

fn check_rows(g: &Graph, a: Var, b: Var) -> Result<usize> {
    let (ra, rb) = (g.value(a).rows, g.value(b).rows);
    if ra != rb {
        return Err(Error::SizeMismatch { left: ra, right: rb });
    }
    Ok(ra)
}

fn psn_trunk(g: &mut Graph, layout: &PsnLayout, p: &[Var], x: Var) -> Result<Var> {
    let n = g.value(x).rows;
    let (last, early) = layout.trunk.split_last().expect("at least two layers");
    let mut skips = Vec::with_capacity(early.len() + 1);
    let mut h = x;
    for d in early {
        h = dense(g, p, h, *d)?;
        h = g.relu(h)?;
        skips.push(h);
    }
    skips.push(pooled(g, h, n)?);
    let cat = g.concat_cols(&skips)?;
    let out = dense(g, p, cat, *last)?;
    g.relu(out)
}

/// Shared-weight features of both clouds. Each cloud's fused feature carries
/// an exterior feature pooled from the other cloud; rows are unit length.
pub fn psn_forward(g: &mut Graph, net: &Network, p: &[Var], scene: Var, model: Var) -> Result<(Var, Var)> {
    let n = check_rows(g, scene, model)?;
    let ls = &net.layout.psn;
    let lm = net.layout.psn_model.as_ref().unwrap_or(ls);
    let hs = psn_trunk(g, ls, p, scene)?;
    let hm = psn_trunk(g, lm, p, model)?;
    let exterior = |g: &mut Graph, other: Var, l: &PsnLayout| -> Result<Var> {
        let pool = g.mean_pool_rows(other)?;
        let e = dense(g, p, pool, l.exterior)?;
        let e = g.relu(e)?;
        g.broadcast_rows(e, n)
    };
    let es = exterior(g, hm, ls)?;
    let em = exterior(g, hs, lm)?;
    let finish = |g: &mut Graph, h: Var, e: Var, l: &PsnLayout| -> Result<Var> {
        let fused = g.concat_cols(&[h, e])?;
        let out = dense(g, p, fused, l.out)?;
        g.row_l2_normalize(out)
    };
    let f_sa = finish(g, hs, es, ls)?;
    let f_ma = finish(g, hm, em, lm)?;
    Ok((f_sa, f_ma))
}

/// Scene→model attention `row_softmax(F_sa·F_maᵀ)` and its model→scene
/// counterpart `row_softmax(F_ma·F_saᵀ)`.
pub fn attention_forward(g: &mut Graph, f_sa: Var, f_ma: Var) -> Result<(Var, Var)> {
    let (a, b) = (g.value(f_sa).cols, g.value(f_ma).cols);
    if a != b {
        return Err(Error::ShapeMismatch {
            op: "attention",
            detail: format!("feature widths {a} vs {b}"),
        });
    }
    let ft = g.transpose(f_ma)?;
    let logits = g.matmul(f_sa, ft)?;
    let m = g.row_softmax(logits)?;
    let lt = g.transpose(logits)?;
    let mt = g.row_softmax(lt)?;
    Ok((m, mt))
}

/// `(1/N²) ΣΣ (M − W)²`.
pub fn attention_loss(g: &mut Graph, m: Var, w: Var) -> Result<Var> {
    g.mse(m, w)
}

fn feature_cloud(g: &mut Graph, p: &[Var], x: Var, layers: &[Dense]) -> Result<Var> {
    let n = g.value(x).rows;
    let mut h = x;
    for d in layers {
        h = dense(g, p, h, *d)?;
        h = g.relu(h)?;
    }
    let global = g.max_pool_rows(h)?;
    let global = g.broadcast_rows(global, n)?;
    g.concat_cols(&[h, global])
}

/// Per-point branch features `(F_s, F_m)` from separate extractors. Inputs
/// are raw `N×6` tensors with a `N×1` scalar channel each.
pub fn feature_forward(
    g: &mut Graph,
    net: &Network,
    p: &[Var],
    scene: (Var, Var),
    model: (Var, Var),
) -> Result<(Var, Var)> {
    check_rows(g, scene.0, model.0)?;
    let xs = g.concat_cols(&[scene.0, scene.1])?;
    let xm = g.concat_cols(&[model.0, model.1])?;
    let fs = feature_cloud(g, p, xs, &net.layout.feature_scene)?;
    let fm = feature_cloud(g, p, xm, &net.layout.feature_model)?;
    Ok((fs, fm))
}

/// Graph nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub f_sa: Var,
    pub f_ma: Var,
    /// Scene→model attention, `N×N`.
    pub attention: Var,
    /// Model→scene attention, `N×N`.
    pub attention_back: Var,
    /// Scene-branch matches in the model frame, meters.
    pub scene_pos: Var,
    pub scene_normal: Var,
    /// Scene-branch normal outputs before row normalization.
    pub scene_normal_raw: Var,
    /// Model-branch matches in the scene frame, meters.
    pub model_pos: Var,
    pub model_normal: Var,
    pub model_normal_raw: Var,
    /// Direct head: unit quaternions `N×4` and translations `N×3`.
    pub quat: Var,
    pub trans: Var,
}

/// Regressor input pieces for one head: its decoded feature, the other
/// branch's pooled decoded feature, the raw point input and, optionally,
/// attention rows and attention-pooled coordinates.
pub struct BranchInputs {
    pub decoded: Var,
    pub other: Var,
    pub raw: Var,
    pub attention_rows: Option<Var>,
    pub attended: Option<Var>,
}

fn regress(g: &mut Graph, p: &[Var], inputs: &BranchInputs, layers: &[Dense]) -> Result<Var> {
    let n = check_rows(g, inputs.decoded, inputs.raw)?;
    let other = pooled(g, inputs.other, n)?;
    let mut parts = vec![inputs.decoded, other, inputs.raw];
    parts.extend(inputs.attention_rows);
    parts.extend(inputs.attended);
    let x = g.concat_cols(&parts)?;
    mlp(g, p, x, layers)
}

/// Splits an `N×6` regressor output into positions mapped to meters around
/// `center`, raw normal outputs and unit normals.
fn split_match(g: &mut Graph, out: Var, scale: f64, center: &Vec3) -> Result<(Var, Var, Var)> {
    let pos = g.slice_cols(out, 0, 3)?;
    let pos = g.scalar_scale(pos, 1.0 / scale)?;
    let c = g.constant(Tensor {
        rows: 1,
        cols: 3,
        data: vec![center.x, center.y, center.z],
    })?;
    let pos = g.add(pos, c)?;
    let raw = g.slice_cols(out, 3, 6)?;
    let nrm = g.row_l2_normalize(raw)?;
    Ok((pos, raw, nrm))
}

/// Full forward pass.
pub fn forward(g: &mut Graph, net: &Network, p: &[Var], input: &NetInput) -> Result<Forward> {
    let n = net.config.n_points;
    if input.len() != n {
        return Err(Error::SizeMismatch {
            left: input.len(),
            right: n,
        });
    }
    let xs = g.constant(input.scene.clone())?;
    let xm = g.constant(input.model.clone())?;
    let cs = g.constant(input.scene_channel.clone())?;
    let cm = g.constant(input.model_channel.clone())?;
    let (f_sa, f_ma) = psn_forward(g, net, p, xs, xm)?;
    let (m, mt) = attention_forward(g, f_sa, f_ma)?;
    let (fs, fm) = feature_forward(g, net, p, (xs, cs), (xm, cm))?;

    let l = &net.layout;
    let att = net.config.attention;
    let dec_s = dense(g, p, fs, l.decoder_scene)?;
    let dec_s = g.relu(dec_s)?;
    let dec_m = dense(g, p, fm, l.decoder_model)?;
    let dec_m = g.relu(dec_m)?;
    let dec_d = dense(g, p, fs, l.decoder_direct)?;
    let dec_d = g.relu(dec_d)?;

    let model_xyz = g.constant(NetInput::positions(&input.model))?;
    let scene_xyz = g.constant(NetInput::positions(&input.scene))?;
    let to_model = if att.scene_branch || att.direct {
        Some(g.matmul(m, model_xyz)?)
    } else {
        None
    };

    let scene_out = regress(
        g,
        p,
        &BranchInputs {
            decoded: dec_s,
            other: dec_m,
            raw: xs,
            attention_rows: att.scene_branch.then_some(m),
            attended: if att.scene_branch { to_model } else { None },
        },
        &l.regressor_scene,
    )?;
    let to_scene = if att.model_branch {
        Some(g.matmul(mt, scene_xyz)?)
    } else {
        None
    };
    let model_out = regress(
        g,
        p,
        &BranchInputs {
            decoded: dec_m,
            other: dec_s,
            raw: xm,
            attention_rows: None,
            attended: to_scene,
        },
        &l.regressor_model,
    )?;
    let direct_out = regress(
        g,
        p,
        &BranchInputs {
            decoded: dec_d,
            other: dec_m,
            raw: xs,
            attention_rows: att.direct.then_some(m),
            attended: if att.direct { to_model } else { None },
        },
        &l.regressor_direct,
    )?;

    let (scene_pos, scene_normal_raw, scene_normal) = split_match(g, scene_out, input.scale, &input.model_center)?;
    let (model_pos, model_normal_raw, model_normal) = split_match(g, model_out, input.scale, &input.scene_center)?;
    let q = g.slice_cols(direct_out, 0, 4)?;
    let quat = g.row_l2_normalize(q)?;
    let t = g.slice_cols(direct_out, 4, 7)?;
    let t = g.scalar_scale(t, 1.0 / input.scale)?;
    let c = g.constant(Tensor {
        rows: 1,
        cols: 3,
        data: vec![input.scene_center.x, input.scene_center.y, input.scene_center.z],
    })?;
    let trans = g.add(t, c)?;
    Ok(Forward {
        f_sa,
        f_ma,
        attention: m,
        attention_back: mt,
        scene_pos,
        scene_normal,
        scene_normal_raw,
        model_pos,
        model_normal,
        model_normal_raw,
        quat,
        trans,
    })
}

/// `(1/N) Σ (‖x − x̂‖₁ + ε‖n − n̂‖₁)` over `N×3` position and normal tensors.
pub fn correspondence_loss(
    g: &mut Graph,
    pos: Var,
    normal: Var,
    target_pos: Var,
    target_normal: Var,
    epsilon: f64,
) -> Result<Var> {
    let a = g.l1(pos, target_pos)?;
    let a = g.scalar_scale(a, 3.0)?;
    let b = g.l1(normal, target_normal)?;
    let b = g.scalar_scale(b, 3.0 * epsilon)?;
    g.add(a, b)
}

/// Weight of the unnormalized-normal L1 relative to the normalized one.
pub const RAW_NORMAL_WEIGHT: f64 = 0.1;

fn raw_normal_term(g: &mut Graph, loss: Var, raw: Var, target: Var, epsilon: f64) -> Result<Var> {
    let r = g.l1(raw, target)?;
    let r = g.scalar_scale(r, 3.0 * epsilon * RAW_NORMAL_WEIGHT)?;
    g.add(loss, r)
}

/// Mean over candidates of the ADD (or, for symmetric objects, ADD-S)
/// distance to the ground-truth-posed model.
pub fn pose_loss(
    g: &mut Graph,
    quat: Var,
    trans: Var,
    model: &OrientedPointCloud,
    gt: &Pose,
    symmetric: bool,
) -> Result<Var> {
    let points: Vec<[f64; 3]> = model.positions().map(|p| [p.x, p.y, p.z]).collect();
    let targets: Vec<[f64; 3]> = model
        .positions()
        .map(|p| {
            let q = gt.transform_point(p);
            [q.x, q.y, q.z]
        })
        .collect();
    let mode = if symmetric {
        PoseDistanceMode::Nearest
    } else {
        PoseDistanceMode::Matched
    };
    let d = g.pose_distance(quat, trans, Rc::new(points), Rc::new(targets), mode)?;
    g.mean_pool_rows(d)
}

fn pose_tensors(pose: &Pose) -> (Tensor, Tensor) {
    let q = pose.rotation.wxyz();
    let t = pose.translation;
    (
        Tensor {
            rows: 1,
            cols: 4,
            data: q.to_vec(),
        },
        Tensor {
            rows: 1,
            cols: 3,
            data: vec![t.x, t.y, t.z],
        },
    )
}

fn single_pose_loss(pose: &Pose, gt: &Pose, model: &OrientedPointCloud, symmetric: bool) -> Result<f64> {
    let mut g = Graph::new();
    let (q, t) = pose_tensors(pose);
    let q = g.constant(q)?;
    let t = g.constant(t)?;
    let l = pose_loss(&mut g, q, t, model, gt, symmetric)?;
    Ok(g.value(l).item())
}

/// ADD pose loss of one pose, evaluated through the graph.
pub fn add_loss(pose: &Pose, gt: &Pose, model: &OrientedPointCloud) -> Result<f64> {
    single_pose_loss(pose, gt, model, false)
}

/// ADD-S pose loss of one pose, evaluated through the graph.
pub fn adds_loss(pose: &Pose, gt: &Pose, model: &OrientedPointCloud) -> Result<f64> {
    single_pose_loss(pose, gt, model, true)
}

/// `φ₁·L_d + φ₂·L_s + φ₃·L_m + φ₄·L_attention` where `L_d` is already the
/// mean over candidates.
pub fn total_loss(g: &mut Graph, parts: [Var; 4], phi: [f64; 4]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (v, w) in parts.into_iter().zip(phi) {
        let term = g.scalar_scale(v, w)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    Ok(acc.expect("four terms"))
}

/// Supervision for one training scene.
#[derive(Clone, Debug)]
pub struct Targets {
    /// Scene points mapped into the model frame.
    pub scene_pos: Tensor,
    pub scene_normal: Tensor,
    /// Model points mapped into the scene frame.
    pub model_pos: Tensor,
    pub model_normal: Tensor,
    pub gt: Pose,
    pub symmetric: bool,
}

impl Targets {
    pub fn new(scene: &OrientedPointCloud, model: &OrientedPointCloud, gt: &Pose, symmetric: bool) -> Self {
        let (scene_pos, scene_normal) = split_cloud(&gt.inverse().apply_cloud(scene, Frame::Model));
        let (model_pos, model_normal) = split_cloud(&gt.apply_cloud(model, Frame::Scene));
        Targets {
            scene_pos,
            scene_normal,
            model_pos,
            model_normal,
            gt: *gt,
            symmetric,
        }
    }
}

fn split_cloud(c: &OrientedPointCloud) -> (Tensor, Tensor) {
    let mut pos = Vec::with_capacity(3 * c.len());
    let mut nrm = Vec::with_capacity(3 * c.len());
    for p in c.points() {
        pos.extend_from_slice(p.position.as_slice());
        nrm.extend_from_slice(p.normal.as_vec().as_slice());
    }
    (
        Tensor {
            rows: c.len(),
            cols: 3,
            data: pos,
        },
        Tensor {
            rows: c.len(),
            cols: 3,
            data: nrm,
        },
    )
}

/// Values of the four loss terms and their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_d: f64,
    pub l_s: f64,
    pub l_m: f64,
    pub l_attention: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn accumulate(&mut self, other: &LossBreakdown) {
        self.l_d += other.l_d;
        self.l_s += other.l_s;
        self.l_m += other.l_m;
        self.l_attention += other.l_attention;
        self.total += other.total;
    }

    fn scaled(mut self, c: f64) -> Self {
        self.l_d *= c;
        self.l_s *= c;
        self.l_m *= c;
        self.l_attention *= c;
        self.total *= c;
        self
    }
}

/// Builds the joint loss of one scene on `g`. The attention target is only
/// computed when its weight is non-zero.
pub fn scene_loss(
    g: &mut Graph,
    net: &Network,
    p: &[Var],
    input: &NetInput,
    targets: &Targets,
    model: &OrientedPointCloud,
    scene: &OrientedPointCloud,
    cfg: &TrainConfig,
) -> Result<(Var, [Var; 4])> {
    let f = forward(g, net, p, input)?;
    let eps = cfg.weights.epsilon;
    let tsp = g.constant(targets.scene_pos.clone())?;
    let tsn = g.constant(targets.scene_normal.clone())?;
    let tmp = g.constant(targets.model_pos.clone())?;
    let tmn = g.constant(targets.model_normal.clone())?;
    let l_s = correspondence_loss(g, f.scene_pos, f.scene_normal, tsp, tsn, eps)?;
    let l_m = correspondence_loss(g, f.model_pos, f.model_normal, tmp, tmn, eps)?;
    // on the sphere, L1 to an axis-aligned target has a local minimum at the
    // antipode; a small term on the unnormalized output pulls it through
    let l_s = raw_normal_term(g, l_s, f.scene_normal_raw, tsn, eps)?;
    let l_m = raw_normal_term(g, l_m, f.model_normal_raw, tmn, eps)?;
    let l_d = pose_loss(g, f.quat, f.trans, model, &targets.gt, targets.symmetric)?;
    let phi4 = cfg.attention_weight();
    let l_att = if phi4 > 0.0 {
        let w = attention_target(scene, model, &targets.gt, &cfg.gammas)?;
        let w = g.constant(Tensor::new(w.rows, w.cols, w.weights)?)?;
        attention_loss(g, f.attention, w)?
    } else {
        g.constant(Tensor::scalar(0.0))?
    };
    let [p1, p2, p3, _] = cfg.weights.phi;
    let parts = [l_d, l_s, l_m, l_att];
    let total = total_loss(g, parts, [p1, p2, p3, phi4])?;
    Ok((total, parts))
}

/// One row of the loss log, averaged over an epoch's steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub losses: LossBreakdown,
}

/// Training state: parameters, optimizer moments and cached supervision.
pub struct Trainer<'a> {
    pub network: Network,
    pub config: TrainConfig,
    dataset: &'a Dataset,
    inputs: Vec<NetInput>,
    targets: Vec<Targets>,
    adam: AdamState,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(network: Network, config: TrainConfig, dataset: &'a Dataset) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::EmptySet);
        }
        let mut inputs = Vec::with_capacity(dataset.len());
        let mut targets = Vec::with_capacity(dataset.len());
        for r in &dataset.records {
            inputs.push(NetInput::new(&r.scene, &dataset.model)?);
            targets.push(Targets::new(&r.scene, &dataset.model, &r.gt, dataset.symmetric));
        }
        let adam = AdamState::new(network.params());
        Ok(Trainer {
            network,
            config,
            dataset,
            inputs,
            targets,
            adam,
            step: 0,
        })
    }

    /// Steps taken so far.
    pub fn steps(&self) -> usize {
        self.step
    }

    /// Loss of record `index` under the current parameters, without an
    /// update.
    pub fn evaluate(&self, index: usize) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let p = self.network.bind(&mut g, false)?;
        let (total, parts) = self.build(&mut g, &p, index)?;
        Ok(breakdown(&g, total, parts))
    }

    fn build(&self, g: &mut Graph, p: &[Var], index: usize) -> Result<(Var, [Var; 4])> {
        let r = &self.dataset.records[index];
        scene_loss(
            g,
            &self.network,
            p,
            &self.inputs[index],
            &self.targets[index],
            &self.dataset.model,
            &r.scene,
            &self.config,
        )
    }

    /// One Adam step on record `index`; returns the losses before the update.
    pub fn step(&mut self, index: usize) -> Result<LossBreakdown> {
        let step = self.step;
        let non_finite = |e: Error| match e {
            Error::NonFiniteInput(_) => Error::NonFiniteLoss { step },
            other => other,
        };
        let mut g = Graph::new();
        let p = self.network.bind(&mut g, true)?;
        let (total, parts) = self.build(&mut g, &p, index).map_err(non_finite)?;
        let losses = breakdown(&g, total, parts);
        if !losses.total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        g.backward(total).map_err(non_finite)?;
        let grads: Vec<Tensor> = p.iter().map(|v| g.grad(*v)).collect();
        if grads.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
        adam_step(&mut self.network.params, &grads, &mut self.adam, &self.config.adam)?;
        self.step += 1;
        Ok(losses)
    }

    /// One pass over the dataset in an order shuffled by `seed`.
    pub fn epoch(&mut self, epoch: usize, seed: u64) -> Result<EpochLoss> {
        let mut order: Vec<usize> = (0..self.dataset.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64)));
        let mut acc = LossBreakdown::default();
        for i in order {
            acc.accumulate(&self.step(i)?);
        }
        Ok(EpochLoss {
            epoch,
            losses: acc.scaled(1.0 / self.dataset.len() as f64),
        })
    }
}

fn breakdown(g: &Graph, total: Var, parts: [Var; 4]) -> LossBreakdown {
    LossBreakdown {
        l_d: g.value(parts[0]).item(),
        l_s: g.value(parts[1]).item(),
        l_m: g.value(parts[2]).item(),
        l_attention: g.value(parts[3]).item(),
        total: g.value(total).item(),
    }
}

/// Trained parameters and the per-epoch loss log.
#[derive(Clone, Debug)]
pub struct Trained {
    pub network: Network,
    pub log: Vec<EpochLoss>,
}

/// Initialises a network from `seed` and trains it for `cfg.epochs` epochs,
/// one scene per step.
pub fn train(dataset: &Dataset, net_config: &NetConfig, cfg: &TrainConfig, seed: u64) -> Result<Trained> {
    let net = Network::new(net_config.clone(), derive_seed(seed, 0))?;
    train_from(net, dataset, cfg, seed)
}

/// Continues training an existing network.
pub fn train_from(network: Network, dataset: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<Trained> {
    let mut trainer = Trainer::new(network, cfg.clone(), dataset)?;
    let shuffle_seed = derive_seed(seed, 1);
    let log = (0..cfg.epochs)
        .map(|e| trainer.epoch(e, shuffle_seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(Trained {
        network: trainer.network,
        log,
    })
}

/// Network outputs for one scene, detached from the graph.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// Scene points paired with their predicted model-frame matches.
    pub scene_to_model: CorrespondenceSet,
    /// Model points paired with their predicted scene-frame matches.
    pub model_to_scene: CorrespondenceSet,
    /// One direct candidate per scene point.
    pub direct: Vec<Pose>,
    /// Scene→model attention map.
    pub attention: Tensor,
}

fn oriented_rows(pos: &Tensor, nrm: &Tensor) -> Vec<OrientedPoint> {
    (0..pos.rows)
        .map(|i| {
            let p = pos.row(i);
            let n = nrm.row(i);
            let normal = UnitVec3::new_normalize(Vec3::new(n[0], n[1], n[2])).unwrap_or_else(UnitVec3::z);
            OrientedPoint::new(Vec3::new(p[0], p[1], p[2]), normal)
        })
        .collect()
}

pub fn predict(net: &Network, scene: &OrientedPointCloud, model: &OrientedPointCloud) -> Result<Prediction> {
    let input = NetInput::new(scene, model)?;
    predict_input(net, &input, scene, model)
}

pub fn predict_input(
    net: &Network,
    input: &NetInput,
    scene: &OrientedPointCloud,
    model: &OrientedPointCloud,
) -> Result<Prediction> {
    let mut g = Graph::new();
    let p = net.bind(&mut g, false)?;
    let f = forward(&mut g, net, &p, input)?;
    let to_model = oriented_rows(g.value(f.scene_pos), g.value(f.scene_normal));
    let to_scene = oriented_rows(g.value(f.model_pos), g.value(f.model_normal));
    let scene_to_model = CorrespondenceSet::new(
        scene.points().iter().cloned().zip(to_model).collect(),
        Direction::SceneToModel,
    )?;
    let model_to_scene = CorrespondenceSet::new(
        model.points().iter().cloned().zip(to_scene).collect(),
        Direction::ModelToScene,
    )?;
    let (q, t) = (g.value(f.quat), g.value(f.trans));
    let direct = (0..q.rows)
        .map(|i| {
            let r = q.row(i);
            let rot = Rotation::from_wxyz([r[0], r[1], r[2], r[3]]).unwrap_or_else(Rotation::identity);
            let tr = t.row(i);
            Pose::new(rot, Vec3::new(tr[0], tr[1], tr[2]))
        })
        .collect();
    Ok(Prediction {
        scene_to_model,
        model_to_scene,
        direct,
        attention: g.value(f.attention).clone(),
    })
}

/// Which candidate sources are fused into the final pose.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sources {
    pub direct: bool,
    pub scene_branch: bool,
    pub model_branch: bool,
}

impl Default for Sources {
    fn default() -> Self {
        Sources {
            direct: true,
            scene_branch: true,
            model_branch: true,
        }
    }
}

/// Collects `T_d ∪ T_s ∪ T_m` and averages it.
pub fn fuse_pose(pred: &Prediction, sources: Sources, num_pairs: usize, seed: u64) -> Result<(Pose, PoseSet)> {
    let mut set = PoseSet::default();
    if sources.direct {
        for p in &pred.direct {
            set.push(*p, Provenance::Direct);
        }
    }
    if sources.scene_branch {
        set.extend(poses_from_matches(&pred.scene_to_model, num_pairs, derive_seed(seed, 0))?);
    }
    if sources.model_branch {
        set.extend(poses_from_matches(&pred.model_to_scene, num_pairs, derive_seed(seed, 1))?);
    }
    let pose = average_poses(&set)?;
    Ok((pose, set))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub num_pairs: usize,
    pub auc_cap: f64,
    pub epsilon: f64,
    pub sources: Sources,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            num_pairs: 100,
            auc_cap: 0.10,
            epsilon: 0.1,
            sources: Sources::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub records: Vec<EvalRecord>,
    pub report: MetricsReport,
    /// Mean over scenes of `(L_s + L_m) / 2`.
    pub correspondence_l1: f64,
}

/// Estimates a pose for every record and scores it.
pub fn evaluate(net: &Network, dataset: &Dataset, cfg: &EvalConfig, seed: u64) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let diameter = model_diameter(&dataset.model)?;
    let mut records = Vec::with_capacity(dataset.len());
    let mut corr = 0.0;
    for (i, r) in dataset.records.iter().enumerate() {
        let pred = predict(net, &r.scene, &dataset.model)?;
        let (pose, _) = fuse_pose(&pred, cfg.sources, cfg.num_pairs, derive_seed(seed, i as u64))?;
        records.push(EvalRecord::new(
            r.id.clone(),
            &pose,
            &r.gt,
            &dataset.model,
            diameter,
            dataset.symmetric,
        ));
        let t = Targets::new(&r.scene, &dataset.model, &r.gt, dataset.symmetric);
        let l_s = set_l1(&pred.scene_to_model, &t.scene_pos, &t.scene_normal, cfg.epsilon);
        let l_m = set_l1(&pred.model_to_scene, &t.model_pos, &t.model_normal, cfg.epsilon);
        corr += 0.5 * (l_s + l_m);
    }
    let report = MetricsReport::from_records(dataset.shape.kind.name(), &records, cfg.auc_cap)?;
    Ok(Evaluation {
        records,
        report,
        correspondence_l1: corr / dataset.len() as f64,
    })
}

fn set_l1(c: &CorrespondenceSet, pos: &Tensor, nrm: &Tensor, epsilon: f64) -> f64 {
    let l1 = |a: &Vec3, b: &[f64]| (a.x - b[0]).abs() + (a.y - b[1]).abs() + (a.z - b[2]).abs();
    let total: f64 = c
        .pairs
        .iter()
        .enumerate()
        .map(|(i, (_, t))| l1(&t.position, pos.row(i)) + epsilon * l1(t.normal.as_vec(), nrm.row(i)))
        .sum();
    total / c.len() as f64
}

/// Fraction of attention rows whose argmax is the true match, over `probes`
/// noiseless scenes built by posing and shuffling the model.
pub fn attention_match_rate(
    net: &Network,
    model: &OrientedPointCloud,
    rotation: RotationRange,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    if probes == 0 {
        return Err(invalid("probes", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = model.len();
    let mut hits = 0usize;
    for _ in 0..probes {
        let rot = sample_rotation(rotation, &mut rng);
        let pose = Pose::new(rot, Vec3::new(0.0, 0.0, 0.5));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let scene = pose.apply_cloud(model, Frame::Scene).permuted(&perm);
        let input = NetInput::new(&scene, model)?;
        let mut g = Graph::new();
        let p = net.bind(&mut g, false)?;
        let xs = g.constant(input.scene.clone())?;
        let xm = g.constant(input.model.clone())?;
        let (f_sa, f_ma) = psn_forward(&mut g, net, &p, xs, xm)?;
        let (m, _) = attention_forward(&mut g, f_sa, f_ma)?;
        let m = g.value(m);
        hits += (0..n).filter(|&i| argmax(m.row(i)) == perm[i]).count();
    }
    Ok(hits as f64 / (probes * n) as f64)
}
