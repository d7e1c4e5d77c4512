//! Train/evaluate runs over a dataset, the ablation grid and the toy
//! configuration used by the end-to-end checks.

use std::fmt::Write as _;

use crate::config::Config;
use crate::error::Result;
use crate::metrics::MetricsReport;
use crate::net::{attention_match_rate, evaluate, train, AttentionFlags, EpochLoss, Network, PsnConfig};
use crate::ppf::PpfGammas;
use crate::synth::{derive_seed, make_dataset, Dataset, RotationRange};

/// Desk-scale configuration: 128-point box_with_bump scenes, 64 train and 32
/// test, σ = 2 mm, 30 % occlusion, rotations within 0.5 rad.
pub fn toy_config() -> Config {
    Config {
        n_points: 128,
        scenes: 96,
        train_fraction: 2.0 / 3.0,
        rotation: RotationRange::MaxAngle(0.5),
        noise_sigma: 0.002,
        occlusion: 0.3,
        psn: PsnConfig {
            trunk: vec![6, 32, 64, 128],
            exterior: 16,
            output: 64,
        },
        feature_widths: vec![32, 64],
        decoder_width: 64,
        regressor_widths: vec![128, 64],
        weights: crate::net::LossWeights {
            phi: [1.0, 1.0, 1.0, 1000.0],
            epsilon: 0.1,
        },
        ..Config::default()
    }
}

/// The three variants compared per seed in the toy experiment.
pub fn toy_variants(base: &Config) -> [(&'static str, Config); 3] {
    let mut noatt = base.clone();
    noatt.attention = AttentionFlags::NONE;
    noatt.ppf_supervision = false;
    let mut unsup = base.clone();
    unsup.ppf_supervision = false;
    [("full", base.clone()), ("no_attention", noatt), ("unsupervised", unsup)]
}

/// Builds the dataset a config describes.
pub fn dataset_for(config: &Config) -> Result<Dataset> {
    make_dataset(&config.shape_spec()?, config.scenes, &config.scene_spec(), config.seed)
}

#[derive(Clone, Debug)]
pub struct Variant {
    pub table: &'static str,
    pub name: String,
    pub config: Config,
}

/// Ablation cells: table 4 toggles attention for direct regression and for
/// match prediction, table 5 drops PPF terms, table 6 swaps the shared PSN
/// for unshared extractors with and without PPF supervision.
pub fn ablation_grid(base: &Config, tables: &[u32]) -> Vec<Variant> {
    let mut out = Vec::new();
    let cell = |table, name: &str, config: Config| Variant {
        table,
        name: name.into(),
        config,
    };
    if tables.contains(&4) {
        for (direct, matches) in [(false, false), (false, true), (true, false), (true, true)] {
            let mut c = base.clone();
            c.attention = AttentionFlags {
                scene_branch: matches,
                model_branch: matches,
                direct,
            };
            c.ppf_supervision = base.ppf_supervision && (direct || matches);
            let name = format!("direct={direct};match={matches}");
            out.push(cell("4", &name, c));
        }
    }
    if tables.contains(&5) {
        let g = base.gammas;
        for mask in 1u8..8 {
            let (d, dn, n) = (mask & 1 != 0, mask & 2 != 0, mask & 4 != 0);
            let mut c = base.clone();
            c.gammas = PpfGammas {
                distance: if d { g.distance } else { 0.0 },
                cross_angle: if dn { g.cross_angle } else { 0.0 },
                normal_angle: if n { g.normal_angle } else { 0.0 },
            };
            c.ppf_supervision = true;
            out.push(cell("5", &format!("d={d};theta_dn={dn};theta_n={n}"), c));
        }
    }
    if tables.contains(&6) {
        for (shared, ppf) in [(false, false), (true, false), (true, true)] {
            let mut c = base.clone();
            c.psn_shared = shared;
            c.ppf_supervision = ppf;
            out.push(cell("6", &format!("psn={shared};ppf={ppf}"), c));
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub network: Network,
    pub log: Vec<EpochLoss>,
    pub report: MetricsReport,
    pub correspondence_l1: f64,
    pub match_rate: f64,
}

/// Trains on the first `train_fraction` of `dataset` and evaluates on the
/// rest (or on everything when the split leaves no test scenes).
pub fn run(dataset: &Dataset, train_fraction: f64, config: &Config) -> Result<RunResult> {
    config.validate()?;
    let (train_idx, test_idx) = dataset.split(train_fraction);
    let train_set = dataset.subset(&train_idx);
    let test_set = if test_idx.is_empty() {
        dataset.clone()
    } else {
        dataset.subset(&test_idx)
    };
    let mut net_config = config.net_config();
    net_config.n_points = dataset.model.len();
    let trained = train(&train_set, &net_config, &config.train_config(), config.seed)?;
    let eval = evaluate(&trained.network, &test_set, &config.eval_config(), derive_seed(config.seed, 2))?;
    let match_rate = attention_match_rate(
        &trained.network,
        &dataset.model,
        dataset.scene_spec.rotation,
        config.probes,
        derive_seed(config.seed, 3),
    )?;
    Ok(RunResult {
        network: trained.network,
        log: trained.log,
        report: eval.report,
        correspondence_l1: eval.correspondence_l1,
        match_rate,
    })
}

pub const ABLATION_HEADER: &str =
    "table,variant,object,add_auc,adds_auc,acc_0p1d,acc_2cm,n,correspondence_l1,match_rate,final_loss";

pub fn ablation_row(v: &Variant, r: &RunResult) -> String {
    let m = &r.report;
    let final_loss = r.log.last().map_or(f64::NAN, |e| e.losses.total);
    format!(
        "{},{},{},{:?},{:?},{:?},{:?},{},{:?},{:?},{:?}",
        v.table,
        v.name,
        m.object,
        m.add_auc,
        m.adds_auc,
        m.acc_0p1d,
        m.acc_2cm,
        m.n,
        r.correspondence_l1,
        r.match_rate,
        final_loss
    )
}

pub fn ablation_csv(rows: &[(Variant, RunResult)]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for (v, r) in rows {
        let _ = writeln!(out, "{}", ablation_row(v, r));
    }
    out
}
