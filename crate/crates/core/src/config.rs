//! Flat `key = value` run configuration.
//!
//! Every tunable has a default; files and `--set` overrides may only name
//! known keys. Lists are comma separated, booleans are `true`/`false`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::net::{AttentionFlags, EvalConfig, LossWeights, NetConfig, PsnConfig, Sources, TrainConfig};
use crate::ppf::PpfGammas;
use crate::synth::{RotationRange, SceneSpec, ShapeKind, ShapeSpec};
use crate::tensor::AdamConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub n_points: usize,
    pub shape: ShapeKind,
    pub shape_dims: [f64; 3],
    pub shape_seed: u64,
    pub scenes: usize,
    pub train_fraction: f64,
    pub rotation: RotationRange,
    pub translation_min: [f64; 3],
    pub translation_max: [f64; 3],
    pub noise_sigma: f64,
    pub occlusion: f64,
    pub viewpoint: [f64; 3],
    pub gammas: PpfGammas,
    pub weights: LossWeights,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub psn: PsnConfig,
    pub psn_shared: bool,
    pub feature_widths: Vec<usize>,
    pub decoder_width: usize,
    pub regressor_widths: Vec<usize>,
    pub attention: AttentionFlags,
    pub ppf_supervision: bool,
    pub num_pairs: usize,
    pub auc_cap: f64,
    pub probes: usize,
    pub sources: Sources,
}

impl Default for Config {
    fn default() -> Self {
        let net = NetConfig::default();
        let scene = SceneSpec::default();
        Config {
            seed: 0,
            n_points: net.n_points,
            shape: ShapeKind::BoxWithBump,
            shape_dims: [0.1, 0.08, 0.06],
            shape_seed: 7,
            scenes: 32,
            train_fraction: 0.5,
            rotation: scene.rotation,
            translation_min: scene.translation_min,
            translation_max: scene.translation_max,
            noise_sigma: scene.noise_sigma,
            occlusion: scene.occlusion,
            viewpoint: scene.viewpoint,
            gammas: PpfGammas::default(),
            weights: LossWeights::default(),
            epochs: 50,
            adam: AdamConfig::default(),
            psn: net.psn,
            psn_shared: net.psn_shared,
            feature_widths: net.feature,
            decoder_width: net.decoder,
            regressor_widths: net.regressor,
            attention: net.attention,
            ppf_supervision: true,
            num_pairs: 100,
            auc_cap: 0.10,
            probes: 4,
            sources: Sources::default(),
        }
    }
}

/// Every accepted key, in the order [`Config::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "seed",
    "n_points",
    "shape",
    "shape_dims",
    "shape_seed",
    "scenes",
    "train_fraction",
    "max_rotation",
    "translation_min",
    "translation_max",
    "noise_sigma",
    "occlusion",
    "viewpoint",
    "gamma1",
    "gamma2",
    "gamma3",
    "phi1",
    "phi2",
    "phi3",
    "phi4",
    "epsilon",
    "epochs",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "psn_trunk",
    "psn_exterior",
    "psn_output",
    "psn_shared",
    "feature_widths",
    "decoder_width",
    "regressor_widths",
    "attention_scene",
    "attention_model",
    "attention_direct",
    "ppf_supervision",
    "num_pairs",
    "auc_cap",
    "probes",
    "use_direct",
    "use_scene_branch",
    "use_model_branch",
];

fn bad(key: &str, reason: impl Into<String>) -> Error {
    Error::InvalidConfig {
        key: key.into(),
        reason: reason.into(),
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| bad(key, format!("cannot parse '{v}'")))
}

fn real(key: &str, v: &str) -> Result<f64> {
    let x: f64 = num(key, v)?;
    if !x.is_finite() {
        return Err(bad(key, "must be finite"));
    }
    Ok(x)
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(bad(key, format!("expected true or false, got '{other}'"))),
    }
}

fn widths(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|t| num(key, t)).collect()
}

fn vec3(key: &str, v: &str) -> Result<[f64; 3]> {
    let parts = v.split(',').map(|t| real(key, t)).collect::<Result<Vec<_>>>()?;
    parts.try_into().map_err(|_| bad(key, "expected three comma-separated numbers"))
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl Config {
    /// Parses a config document on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Config::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(&format!("line {}", no + 1), "expected key = value"))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| bad(kv, "expected key=value"))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = num(key, v)?,
            "n_points" => self.n_points = num(key, v)?,
            "shape" => self.shape = ShapeKind::parse(v)?,
            "shape_dims" => self.shape_dims = vec3(key, v)?,
            "shape_seed" => self.shape_seed = num(key, v)?,
            "scenes" => self.scenes = num(key, v)?,
            "train_fraction" => self.train_fraction = real(key, v)?,
            "max_rotation" => {
                self.rotation = if v == "full" {
                    RotationRange::Full
                } else {
                    RotationRange::MaxAngle(real(key, v)?)
                }
            }
            "translation_min" => self.translation_min = vec3(key, v)?,
            "translation_max" => self.translation_max = vec3(key, v)?,
            "noise_sigma" => self.noise_sigma = real(key, v)?,
            "occlusion" => self.occlusion = real(key, v)?,
            "viewpoint" => self.viewpoint = vec3(key, v)?,
            "gamma1" => self.gammas.distance = real(key, v)?,
            "gamma2" => self.gammas.cross_angle = real(key, v)?,
            "gamma3" => self.gammas.normal_angle = real(key, v)?,
            "phi1" => self.weights.phi[0] = real(key, v)?,
            "phi2" => self.weights.phi[1] = real(key, v)?,
            "phi3" => self.weights.phi[2] = real(key, v)?,
            "phi4" => self.weights.phi[3] = real(key, v)?,
            "epsilon" => self.weights.epsilon = real(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "lr" => self.adam.lr = real(key, v)?,
            "beta1" => self.adam.beta1 = real(key, v)?,
            "beta2" => self.adam.beta2 = real(key, v)?,
            "adam_eps" => self.adam.eps = real(key, v)?,
            "psn_trunk" => self.psn.trunk = widths(key, v)?,
            "psn_exterior" => self.psn.exterior = num(key, v)?,
            "psn_output" => self.psn.output = num(key, v)?,
            "psn_shared" => self.psn_shared = flag(key, v)?,
            "feature_widths" => self.feature_widths = widths(key, v)?,
            "decoder_width" => self.decoder_width = num(key, v)?,
            "regressor_widths" => self.regressor_widths = widths(key, v)?,
            "attention_scene" => self.attention.scene_branch = flag(key, v)?,
            "attention_model" => self.attention.model_branch = flag(key, v)?,
            "attention_direct" => self.attention.direct = flag(key, v)?,
            "ppf_supervision" => self.ppf_supervision = flag(key, v)?,
            "num_pairs" => self.num_pairs = num(key, v)?,
            "auc_cap" => self.auc_cap = real(key, v)?,
            "probes" => self.probes = num(key, v)?,
            "use_direct" => self.sources.direct = flag(key, v)?,
            "use_scene_branch" => self.sources.scene_branch = flag(key, v)?,
            "use_model_branch" => self.sources.model_branch = flag(key, v)?,
            _ => return Err(bad(key, "unknown key")),
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("known key"));
        }
        out
    }

    /// Current value of `key` in its text form.
    pub fn get(&self, key: &str) -> Option<String> {
        let s = match key {
            "seed" => self.seed.to_string(),
            "n_points" => self.n_points.to_string(),
            "shape" => self.shape.name().to_string(),
            "shape_dims" => join(&self.shape_dims),
            "shape_seed" => self.shape_seed.to_string(),
            "scenes" => self.scenes.to_string(),
            "train_fraction" => self.train_fraction.to_string(),
            "max_rotation" => match self.rotation {
                RotationRange::Full => "full".to_string(),
                RotationRange::MaxAngle(a) => a.to_string(),
            },
            "translation_min" => join(&self.translation_min),
            "translation_max" => join(&self.translation_max),
            "noise_sigma" => self.noise_sigma.to_string(),
            "occlusion" => self.occlusion.to_string(),
            "viewpoint" => join(&self.viewpoint),
            "gamma1" => self.gammas.distance.to_string(),
            "gamma2" => self.gammas.cross_angle.to_string(),
            "gamma3" => self.gammas.normal_angle.to_string(),
            "phi1" => self.weights.phi[0].to_string(),
            "phi2" => self.weights.phi[1].to_string(),
            "phi3" => self.weights.phi[2].to_string(),
            "phi4" => self.weights.phi[3].to_string(),
            "epsilon" => self.weights.epsilon.to_string(),
            "epochs" => self.epochs.to_string(),
            "lr" => self.adam.lr.to_string(),
            "beta1" => self.adam.beta1.to_string(),
            "beta2" => self.adam.beta2.to_string(),
            "adam_eps" => self.adam.eps.to_string(),
            "psn_trunk" => join(&self.psn.trunk),
            "psn_exterior" => self.psn.exterior.to_string(),
            "psn_output" => self.psn.output.to_string(),
            "psn_shared" => self.psn_shared.to_string(),
            "feature_widths" => join(&self.feature_widths),
            "decoder_width" => self.decoder_width.to_string(),
            "regressor_widths" => join(&self.regressor_widths),
            "attention_scene" => self.attention.scene_branch.to_string(),
            "attention_model" => self.attention.model_branch.to_string(),
            "attention_direct" => self.attention.direct.to_string(),
            "ppf_supervision" => self.ppf_supervision.to_string(),
            "num_pairs" => self.num_pairs.to_string(),
            "auc_cap" => self.auc_cap.to_string(),
            "probes" => self.probes.to_string(),
            "use_direct" => self.sources.direct.to_string(),
            "use_scene_branch" => self.sources.scene_branch.to_string(),
            "use_model_branch" => self.sources.model_branch.to_string(),
            _ => return None,
        };
        Some(s)
    }

    /// Checks every derived spec against its module's preconditions.
    pub fn validate(&self) -> Result<()> {
        self.shape_spec()?;
        self.scene_spec().validate()?;
        self.net_config().validate()?;
        self.train_config().validate()?;
        if self.scenes == 0 {
            return Err(bad("scenes", "need at least one scene"));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(bad("train_fraction", "must lie in [0, 1]"));
        }
        if self.num_pairs == 0 {
            return Err(bad("num_pairs", "must be at least 1"));
        }
        if !(self.auc_cap > 0.0) {
            return Err(bad("auc_cap", "must be positive"));
        }
        if self.probes == 0 {
            return Err(bad("probes", "must be at least 1"));
        }
        if !(self.sources.direct || self.sources.scene_branch || self.sources.model_branch) {
            return Err(bad("use_direct", "at least one pose source must be enabled"));
        }
        Ok(())
    }

    pub fn shape_spec(&self) -> Result<ShapeSpec> {
        ShapeSpec::new(self.shape, self.shape_dims, self.n_points, self.shape_seed)
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            rotation: self.rotation,
            translation_min: self.translation_min,
            translation_max: self.translation_max,
            noise_sigma: self.noise_sigma,
            occlusion: self.occlusion,
            viewpoint: self.viewpoint,
            resample_to: Some(self.n_points),
            seed: self.seed,
        }
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            n_points: self.n_points,
            psn: self.psn.clone(),
            psn_shared: self.psn_shared,
            feature: self.feature_widths.clone(),
            decoder: self.decoder_width,
            regressor: self.regressor_widths.clone(),
            attention: self.attention,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            adam: self.adam,
            weights: self.weights,
            gammas: self.gammas,
            ppf_supervision: self.ppf_supervision,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            num_pairs: self.num_pairs,
            auc_cap: self.auc_cap,
            epsilon: self.weights.epsilon,
            sources: self.sources,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_training_setup() {
        let c = Config::default();
        assert_eq!(c.n_points, 1000);
        assert_eq!(c.gammas, PpfGammas::new(100.0, 50.0, 50.0).unwrap());
        assert_eq!(c.weights.phi, [1.0, 1.0, 1.0, 0.01]);
        assert_eq!(c.epochs, 50);
        assert_eq!(c.psn.fused_width(), 1048);
        assert_eq!(c.psn.output, 512);
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = Config::default();
        c.apply_override("max_rotation=0.5").unwrap();
        c.apply_override("psn_trunk=6,8,16").unwrap();
        c.apply_override("attention_direct=false").unwrap();
        c.apply_override("phi4=0.125").unwrap();
        assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
        assert_eq!(Config::parse(&Config::default().to_text()).unwrap(), Config::default());
    }

    #[test]
    fn unknown_and_malformed_keys() {
        assert!(matches!(Config::parse("bogus = 1"), Err(Error::InvalidConfig { key, .. }) if key == "bogus"));
        assert!(Config::parse("epochs = many").is_err());
        assert!(Config::parse("viewpoint = 1,2").is_err());
        assert!(Config::parse("psn_shared = yes").is_err());
        assert!(Config::parse("noise_sigma = nan").is_err());
        let c = Config::parse("# comment\n\nepochs = 3 # trailing\n").unwrap();
        assert_eq!(c.epochs, 3);
    }

    #[test]
    fn validation_rejects_bad_values() {
        for kv in ["occlusion=1.0", "n_points=2", "psn_trunk=6", "phi2=-1", "train_fraction=2", "num_pairs=0"] {
            let mut c = Config::default();
            c.apply_override(kv).unwrap();
            assert!(c.validate().is_err(), "{kv}");
        }
    }
}
