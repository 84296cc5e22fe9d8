//! Run directories: manifest, history, checkpoints.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ssdg_core::checkpoint::{load_checkpoint, save_checkpoint};
use ssdg_core::config::TrainConfig;
use ssdg_core::data::{leave_one_out, load_registry, read_manifest, split_labeled_unlabeled, DatasetManifest, LeaveOneOut, SplitRegistry};
use ssdg_core::trainer::{inference_net, HistoryRecord, Trainer};
use ssdg_core::Error;

use crate::commands::CliResult;
use crate::TrainArgs;

pub const MANIFEST: &str = "manifest.json";
pub const HISTORY: &str = "history.jsonl";
pub const CONFIG: &str = "config.toml";
pub const STUDENT: &str = "checkpoints/student.ckpt";
pub const TEACHER: &str = "checkpoints/teacher.ckpt";
pub const INFERENCE: &str = "checkpoints/inference.ckpt";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetDescription {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub unseen_domain: String,
    /// Training domains in id order (ids 1..=K after removing the unseen domain).
    pub training_domains: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Layout {
    pub history: String,
    pub checkpoints: String,
    pub plots: String,
}

/// Everything needed to repeat a run bit-identically.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub seed: u64,
    pub config: TrainConfig,
    /// SHA-256 of the canonical TOML rendering of `config`.
    pub config_hash: String,
    pub dataset: DatasetDescription,
    pub layout: Layout,
    pub tool_version: String,
}

pub fn config_hash(cfg: &TrainConfig) -> String {
    let digest = Sha256::digest(cfg.to_toml_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Registry, leave-one-out split and labeled/unlabeled split for `cfg`.
pub fn prepare_data(root: &Path, cfg: &TrainConfig) -> CliResult<(DatasetManifest, LeaveOneOut, SplitRegistry)> {
    let manifest = read_manifest(root)?;
    let registry = load_registry(root)?;
    let loo = leave_one_out(&registry, cfg.unseen_domain)?;
    let split = split_labeled_unlabeled(&loo.train, cfg.labeled_fraction, cfg.split_seed)?;
    Ok((manifest, loo, split))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_run_manifest(dir: &Path) -> CliResult<RunManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?)
}

fn checkpoint_meta(trainer: &Trainer, role: &str, run: &RunManifest) -> BTreeMap<String, serde_json::Value> {
    let mut meta = trainer.state_metadata();
    meta.insert("role".into(), role.into());
    meta.insert("run".into(), run.name.clone().into());
    meta.insert("unseen_domain".into(), run.dataset.unseen_domain.clone().into());
    meta.insert("training_domains".into(), serde_json::json!(run.dataset.training_domains));
    meta
}

fn save_all(dir: &Path, trainer: &Trainer, run: &RunManifest, final_save: bool) -> CliResult<()> {
    save_checkpoint(
        &dir.join(STUDENT),
        &trainer.pair.student,
        &checkpoint_meta(trainer, "student", run),
        &trainer.optimizer.state_arrays(),
    )?;
    save_checkpoint(&dir.join(TEACHER), &trainer.pair.teacher, &checkpoint_meta(trainer, "teacher", run), &[])?;
    if final_save {
        let net = inference_net(trainer.eval_net())?;
        save_checkpoint(&dir.join(INFERENCE), &net, &checkpoint_meta(trainer, "inference", run), &[])?;
    }
    Ok(())
}

pub fn train(args: &TrainArgs, overrides: &[(String, String)]) -> CliResult<()> {
    let resuming = args.resume.is_some();
    let (dir, base_cfg, data_root) = match &args.resume {
        Some(dir) => {
            let m = read_run_manifest(dir)?;
            if m.dataset.root != args.data {
                log::warn!(
                    "run was trained on {}, resuming with {}",
                    m.dataset.root.display(),
                    args.data.display()
                );
            }
            (dir.clone(), m.config, args.data.clone())
        }
        None => {
            let cfg = match &args.config {
                Some(p) => TrainConfig::from_file(p)?,
                None => TrainConfig::default(),
            };
            (PathBuf::new(), cfg, args.data.clone())
        }
    };
    let mut pairs: Vec<(&str, &str)> = overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    let unseen = args.unseen.map(|u| u.to_string());
    if let Some(u) = &unseen {
        pairs.push(("unseen_domain", u));
    }
    let cfg = base_cfg.with_overrides(pairs)?;
    cfg.validate()?;

    let (manifest, loo, split) = prepare_data(&data_root, &cfg)?;
    let hash = config_hash(&cfg);
    let dir = if resuming {
        dir
    } else {
        let name = args.name.clone().unwrap_or_else(|| format!("run-{}", &hash[..12]));
        let dir = args.runs_dir.join(&name);
        if dir.exists() {
            if !args.force {
                return Err(Error::Config(format!(
                    "run directory {} exists; pass --resume to continue or --force to replace it",
                    dir.display()
                ))
                .into());
            }
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        dir
    };
    for sub in ["checkpoints", "plots"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let run = RunManifest {
        name: dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        seed: cfg.seed,
        config: cfg.clone(),
        config_hash: hash,
        dataset: DatasetDescription {
            root: data_root.clone(),
            manifest,
            unseen_domain: loo.test.name.clone(),
            training_domains: split.domains.iter().map(|d| d.name.clone()).collect(),
        },
        layout: Layout {
            history: HISTORY.into(),
            checkpoints: "checkpoints/".into(),
            plots: "plots/".into(),
        },
        tool_version: env!("CARGO_PKG_VERSION").into(),
    };
    write_json(&dir.join(MANIFEST), &run)?;
    let cfg_path = dir.join(CONFIG);
    fs::write(&cfg_path, cfg.to_toml_string()).map_err(|e| Error::io(&cfg_path, e))?;

    let mut trainer = if resuming {
        let student = load_checkpoint(&dir.join(STUDENT), Some(split.domain_count()))?;
        let teacher = load_checkpoint(&dir.join(TEACHER), Some(split.domain_count()))?;
        let t = Trainer::restore(cfg.clone(), &split, student.net, teacher.net, &student.metadata, &student.extras)?;
        log::info!("resuming {} at iteration {}", run.name, t.iteration);
        t
    } else {
        Trainer::new(cfg.clone(), &split)?
    };

    let history_path = dir.join(HISTORY);
    let file = if resuming {
        truncate_history(&history_path, trainer.iteration)?;
        OpenOptions::new().append(true).create(true).open(&history_path)
    } else {
        File::create(&history_path)
    }
    .map_err(|e| Error::io(&history_path, e))?;
    let mut history = BufWriter::new(file);

    let quiet = args.quiet;
    let every = cfg.checkpoint_every;
    trainer.run(&split, &[&loo.test], |rec: &HistoryRecord, t: &Trainer| {
        let line = serde_json::to_string(rec).map_err(|e| Error::invalid(e.to_string()))?;
        writeln!(history, "{line}").and_then(|_| history.flush()).map_err(|e| Error::io(&history_path, e))?;
        if !quiet {
            let dice = rec
                .unseen_dice
                .as_ref()
                .map(|d| d.values().map(|v| format!(" dice={v:.2}")).collect::<String>())
                .unwrap_or_default();
            eprintln!(
                "iter {:>5} total={:.4} L_x={:.4} L_u={:.4} mask={:.3}{dice}",
                rec.step.iteration, rec.step.total, rec.step.l_x, rec.step.l_u, rec.step.mask_rate
            );
        }
        if every > 0 && t.iteration % every == 0 {
            save_all(&dir, t, &run, false).map_err(|e| Error::invalid(e.to_string()))?;
        }
        Ok(())
    })?;
    save_all(&dir, &trainer, &run, true)?;
    println!("{}", dir.display());
    Ok(())
}

/// Drops history lines past `iteration`, left behind by a run stopped between checkpoints.
fn truncate_history(path: &Path, iteration: usize) -> CliResult<()> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(());
    };
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if v["iteration"].as_u64().is_some_and(|i| i as usize <= iteration) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))?;
    Ok(())
}
