//! Command-line surface.
//!
//! Every subcommand takes `--seed`, `--config <file>` and repeatable
//! `--set key=value`. Failures print `{"error": kind, "message": ...}` on
//! stderr and exit with status 1.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::experiment::{ablation_csv, ablation_grid, run};
use crate::geom::Frame;
use crate::gradcheck::{end_to_end, feature_head, op_suites, SuiteResult};
use crate::io;
use crate::net::{evaluate, fuse_pose, predict, train_from, Network};
use crate::ppf::attention_target;
use crate::solver::{average_poses, kabsch_align, poses_from_matches, Provenance};
use crate::synth::{derive_seed, Dataset};

#[derive(Parser, Debug)]
#[command(name = "attnpose", version, about = "PPF-supervised attention for 6D pose estimation on point clouds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// Base seed; overrides the `seed` key.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Flat key = value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        shape: Option<String>,
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long, default_value = "dataset")]
        out: PathBuf,
    },
    /// Write the PPF attention target of one scene as a matrix file.
    PpfTarget {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; combine with --scene.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Scene id inside the dataset (default: first scene).
        #[arg(long)]
        scene: Option<String>,
        /// Scene PLY, used together with --model-cloud and --pose.
        #[arg(long)]
        scene_cloud: Option<PathBuf>,
        #[arg(long)]
        model_cloud: Option<PathBuf>,
        #[arg(long)]
        pose: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the train split of a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Continue from this checkpoint instead of a fresh network.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recover a pose from a correspondence file.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        correspondences: PathBuf,
        #[arg(long, value_enum, default_value_t = SolverKind::Kabsch)]
        solver: SolverKind,
        #[arg(long)]
        out: PathBuf,
        /// Also write the candidate pose set (pair-align only).
        #[arg(long)]
        pose_set: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suites.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every ablation cell on one dataset.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated subset of tables 4, 5, 6.
        #[arg(long, default_value = "4,5,6", value_delimiter = ',')]
        tables: Vec<u32>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SolverKind {
    Kabsch,
    PairAlign,
}

/// Loads defaults, then the config file, then `--set`, then `--seed`.
pub fn resolve(common: &Common) -> Result<Config> {
    let mut c = Config::default();
    if let Some(path) = &common.config {
        c.apply_text(&io::read_text(path)?)?;
    }
    for kv in &common.set {
        c.apply_override(kv)?;
    }
    if let Some(seed) = common.seed {
        c.seed = seed;
    }
    c.validate()?;
    Ok(c)
}

fn print_json<T: Serialize>(v: &T) {
    println!("{}", serde_json::to_string(v).expect("serializable"));
}

fn load(dir: &Path, config: &mut Config) -> Result<(Dataset, io::Manifest)> {
    let (dataset, manifest) = io::load_dataset(dir)?;
    config.n_points = dataset.model.len();
    Ok((dataset, manifest))
}

fn split_of(dataset: &Dataset, fraction: f64, split: Split) -> Dataset {
    let (train, test) = dataset.split(fraction);
    match split {
        Split::Train => dataset.subset(&train),
        Split::Test if !test.is_empty() => dataset.subset(&test),
        _ => dataset.clone(),
    }
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth {
            common,
            shape,
            scenes,
            out,
        } => {
            let mut c = resolve(&common)?;
            if let Some(s) = shape {
                c.set("shape", &s)?;
            }
            if let Some(n) = scenes {
                c.set("scenes", &n.to_string())?;
            }
            c.validate()?;
            let dataset = crate::experiment::dataset_for(&c)?;
            io::save_dataset(&out, &dataset, c.seed, c.train_fraction)?;
            io::write_text(&out.join("config.txt"), &c.to_text())?;
            print_json(&json!({"dataset": out, "scenes": dataset.len(), "points": dataset.model.len()}));
        }
        Command::PpfTarget {
            common,
            dataset,
            scene,
            scene_cloud,
            model_cloud,
            pose,
            out,
        } => {
            let c = resolve(&common)?;
            let (scene, model, gt) = match (dataset, scene_cloud, model_cloud, pose) {
                (Some(dir), None, None, None) => {
                    let (ds, _) = io::load_dataset(&dir)?;
                    let rec = match &scene {
                        None => &ds.records[0],
                        Some(id) => ds
                            .records
                            .iter()
                            .find(|r| &r.id == id)
                            .ok_or_else(|| Error::InvalidConfig {
                                key: "scene".into(),
                                reason: format!("no scene '{id}' in dataset"),
                            })?,
                    };
                    (rec.scene.clone(), ds.model.clone(), rec.gt)
                }
                (None, Some(s), Some(m), Some(p)) => (
                    io::load_ply(&s, Frame::Scene, None)?,
                    io::load_ply(&m, Frame::Model, None)?,
                    io::load_pose(&p)?,
                ),
                _ => {
                    return Err(Error::InvalidConfig {
                        key: "ppf-target".into(),
                        reason: "pass either --dataset or all of --scene-cloud, --model-cloud, --pose".into(),
                    })
                }
            };
            let w = attention_target(&scene, &model, &gt, &c.gammas)?;
            io::write_text(&out, &io::matrix_to_string(&io::weight_matrix_tensor(&w)))?;
            print_json(&json!({"matrix": out, "rows": w.rows, "cols": w.cols}));
        }
        Command::Train {
            common,
            dataset,
            init,
            out,
        } => {
            let mut c = resolve(&common)?;
            let (ds, manifest) = load(&dataset, &mut c)?;
            let train_set = split_of(&ds, manifest.train_fraction, Split::Train);
            let net = match init {
                Some(path) => io::load_checkpoint(&path, Some(&c.net_config()))?,
                None => Network::new(c.net_config(), derive_seed(c.seed, 0))?,
            };
            let trained = train_from(net, &train_set, &c.train_config(), c.seed)?;
            io::save_checkpoint(&out.join("checkpoint.json"), &trained.network)?;
            io::write_text(&out.join("loss.csv"), &io::loss_csv(&trained.log))?;
            io::write_text(&out.join("config.txt"), &c.to_text())?;
            let last = trained.log.last().map(|e| e.losses.total);
            print_json(&json!({"checkpoint": out.join("checkpoint.json"), "epochs": trained.log.len(), "final_loss": last}));
        }
        Command::Eval {
            common,
            dataset,
            checkpoint,
            split,
            out,
        } => {
            let mut c = resolve(&common)?;
            let (ds, manifest) = load(&dataset, &mut c)?;
            let net = io::load_checkpoint(&checkpoint, None)?;
            let set = split_of(&ds, manifest.train_fraction, split);
            let cfg = c.eval_config();
            let seed = derive_seed(c.seed, 2);
            let eval = evaluate(&net, &set, &cfg, seed)?;
            let reports = [eval.report.clone()];
            io::write_text(&out.join("metrics.csv"), &io::metrics_csv(&reports))?;
            io::write_text(&out.join("metrics.json"), &io::metrics_json(&reports))?;
            let mut poses = Vec::with_capacity(set.len());
            for (i, r) in set.records.iter().enumerate() {
                let pred = predict(&net, &r.scene, &set.model)?;
                let (pose, _) = fuse_pose(&pred, cfg.sources, cfg.num_pairs, derive_seed(seed, i as u64))?;
                poses.push(json!({"id": r.id, "pose": io::PoseRecord::new(&pose, None)}));
            }
            io::write_text(
                &out.join("poses.json"),
                &(serde_json::to_string_pretty(&poses).expect("serializable") + "\n"),
            )?;
            print_json(&json!({"report": eval.report, "correspondence_l1": eval.correspondence_l1}));
        }
        Command::Solve {
            common,
            correspondences,
            solver,
            out,
            pose_set,
        } => {
            let c = resolve(&common)?;
            let set = io::parse_correspondences(&io::read_text(&correspondences)?)?;
            let pose = match solver {
                SolverKind::Kabsch => kabsch_align(&set, None)?,
                SolverKind::PairAlign => {
                    let poses = poses_from_matches(&set, c.num_pairs, c.seed)?;
                    if let Some(path) = &pose_set {
                        io::write_text(path, &io::pose_set_to_json(&poses))?;
                    }
                    average_poses(&poses)?
                }
            };
            io::save_pose(&out, &pose)?;
            print_json(&io::PoseRecord::new(&pose, None::<Provenance>));
        }
        Command::Gradcheck { common, instances, out } => {
            let c = resolve(&common)?;
            let mut suites: Vec<SuiteResult> = op_suites(instances, c.seed)?;
            suites.push(feature_head(16, c.seed)?);
            suites.push(end_to_end(16, c.seed)?);
            let passed = suites.iter().all(|s| s.passed);
            let report = json!({"passed": passed, "suites": suites});
            let text = serde_json::to_string_pretty(&report).expect("serializable") + "\n";
            if let Some(path) = out {
                io::write_text(&path, &text)?;
            }
            print!("{text}");
            if !passed {
                let failed: Vec<&str> = suites.iter().filter(|s| !s.passed).map(|s| s.name.as_str()).collect();
                return Err(Error::SchemaViolation(format!("gradient check failed: {}", failed.join(", "))));
            }
        }
        Command::Ablate {
            common,
            dataset,
            tables,
            out,
        } => {
            let mut c = resolve(&common)?;
            let (ds, manifest) = load(&dataset, &mut c)?;
            if let Some(t) = tables.iter().find(|t| !matches!(t, 4..=6)) {
                return Err(Error::InvalidConfig {
                    key: "tables".into(),
                    reason: format!("unknown table {t}"),
                });
            }
            let mut rows = Vec::new();
            for v in ablation_grid(&c, &tables) {
                let r = run(&ds, manifest.train_fraction, &v.config)?;
                eprintln!("{}", crate::experiment::ablation_row(&v, &r));
                rows.push((v, r));
            }
            io::write_text(&out, &ablation_csv(&rows))?;
            print_json(&json!({"ablation": out, "cells": rows.len()}));
        }
    }
    Ok(())
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprintln!("{}", json!({"error": "Usage", "message": e.to_string().trim()}));
            return 2;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            1
        }
    }
}
