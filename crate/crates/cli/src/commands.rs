use std::fs;
use std::path::{Path, PathBuf};

use cpmn::data::{generate_synthetic, Dataset, Split, SyntheticSpec};
use cpmn::eval::{evaluate, IoUThresholds};
use cpmn::localization::DetectionSet;
use cpmn::nn::TensorStore;
use cpmn::pipeline::{
    ablation_table, component_rows, detections_json, export_cas, infer_all, loss_csv, run_ablation, test_records,
    AblationRow, AblationSpec, Models, PipelineTrainer, RunConfig,
};
use cpmn::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{AblateArgs, ConfigArgs, EvalArgs, InferArgs, SynthArgs, TrainArgs};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const RUN_FILE: &str = "run.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const THREADS_ENV: &str = "CPMN_THREADS";

/// Training progress written next to the checkpoint.
#[derive(Debug, Serialize, Deserialize)]
struct RunRecord {
    config_hash: String,
    epochs_completed: usize,
    complete: bool,
    config: RunConfig,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn parse_split(name: &str) -> Result<Option<Split>> {
    match name {
        "train" => Ok(Some(Split::Train)),
        "test" => Ok(Some(Split::Test)),
        "all" => Ok(None),
        other => Err(Error::Validation(format!("unknown split '{other}' (expected train, test or all)"))),
    }
}

fn env_threads() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Error::Validation(format!("{THREADS_ENV} must be a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(None),
    }
}

/// Load the configuration file, apply flag overrides and size the worker pool.
fn resolve_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut c = match &args.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if let Some(m) = &args.manifest {
        c.manifest = Some(m.clone());
    }
    if let Some(d) = &args.output_dir {
        c.output_dir = d.clone();
    }
    if let Some(s) = args.seed {
        c.seed = s;
    }
    if let Some(t) = args.threads {
        c.threads = Some(t);
    }
    if let Some(z) = args.zeta {
        c.ccm.zeta = z;
    }
    if let Some(t) = args.nms_threshold {
        c.nms_threshold = t;
    }
    if let Some(cap) = env_threads()? {
        c.threads = Some(c.threads.map_or(cap, |t| t.min(cap)));
    }
    c.validate()?;
    if let Some(n) = c.threads {
        // A pool built earlier in the same process keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(c)
}

fn manifest_path(c: &RunConfig) -> Result<&Path> {
    c.manifest
        .as_deref()
        .ok_or_else(|| Error::Validation("no dataset manifest given (set it in the config or pass --manifest)".into()))
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => read_json(p)?,
        None => SyntheticSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let ds = generate_synthetic(&spec)?;
    let manifest = ds.save(&a.out, &spec)?;
    if spec.is_degenerate() {
        eprintln!("warning: margin is 0, the dataset carries no class signal");
    }
    println!(
        "wrote {} train and {} test videos, manifest {}",
        ds.train.videos.len(),
        ds.test.videos.len(),
        manifest.display()
    );
    Ok(())
}

/// Header plus the rows of an earlier run that precede `epoch`.
fn kept_loss_rows(path: &Path, epoch: usize) -> Result<String> {
    let text = fs::read_to_string(path)?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|e| e.parse::<usize>().ok())
                .is_some_and(|e| e < epoch);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut c = resolve_config(&a.config)?;
    if let Some(n) = a.checkpoint_every {
        c.checkpoint_every = n;
    }
    let (_, train_set) = Dataset::load_manifest(manifest_path(&c)?, Some(Split::Train))?;
    let videos = train_set.weak();
    if videos.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    let out = c.output_dir.clone();
    fs::create_dir_all(&out)?;
    let hash = c.hash();
    let ckpt = out.join(CHECKPOINT_FILE);
    let csv_path = out.join(LOSS_FILE);

    let mut trainer = PipelineTrainer::new(&c, videos[0].features.feature_dim(), train_set.num_classes)?;
    let mut csv = if a.resume {
        let record: RunRecord = read_json(&out.join(RUN_FILE))?;
        if record.config_hash != hash {
            return Err(Error::Validation(format!(
                "checkpoint was trained with config {}, current config is {hash}",
                record.config_hash
            )));
        }
        trainer.load_state(&TensorStore::load(&ckpt)?)?;
        kept_loss_rows(&csv_path, trainer.epoch())?
    } else {
        loss_csv(&[], &c.modalities, &hash)
    };
    fs::write(&csv_path, &csv)?;

    let save = |t: &PipelineTrainer| -> Result<()> {
        t.state()?.save(&ckpt)?;
        write_json(
            &out.join(RUN_FILE),
            &RunRecord {
                config_hash: hash.clone(),
                epochs_completed: t.epoch(),
                complete: t.is_done(),
                config: c.clone(),
            },
        )
    };

    while !trainer.is_done() && a.stop_after.is_none_or(|s| trainer.epoch() < s) {
        let log = match trainer.run_epoch(&videos) {
            Ok(log) => log,
            Err(e) => {
                if e.is_numerical() {
                    eprintln!("training diverged during epoch {}", trainer.epoch());
                    if ckpt.exists() {
                        eprintln!("last good checkpoint: {}", ckpt.display());
                    }
                }
                return Err(e);
            }
        };
        let row = loss_csv(std::slice::from_ref(&log), &c.modalities, &hash);
        csv.push_str(row.split_once('\n').map_or("", |(_, rows)| rows));
        fs::write(&csv_path, &csv)?;
        if c.checkpoint_every > 0 && trainer.epoch() % c.checkpoint_every == 0 {
            save(&trainer)?;
        }
    }
    save(&trainer)?;
    println!(
        "trained {} epochs, checkpoint {} (config {hash})",
        trainer.epoch(),
        ckpt.display()
    );
    Ok(())
}

pub fn infer(a: &InferArgs) -> Result<()> {
    let c = resolve_config(&a.config)?;
    let ckpt = a.checkpoint.clone().unwrap_or_else(|| c.output_dir.join(CHECKPOINT_FILE));
    let models = Models::load(&ckpt, &c).map_err(|e| match e {
        Error::Io(io) => Error::Validation(format!("cannot read checkpoint {}: {io}", ckpt.display())),
        other => other,
    })?;
    let (_, ds) = Dataset::load_manifest(manifest_path(&c)?, parse_split(&a.split)?)?;
    let feats: Vec<_> = ds.videos.iter().map(|v| &v.features).collect();
    let results = infer_all(&models, &c, c.components, &feats)?;

    let dir = c.output_dir.join("detections");
    fs::create_dir_all(&dir)?;
    for r in &results {
        r.detections.save(&dir.join(format!("{}.json", r.detections.video_id)))?;
    }
    let combined = c.output_dir.join("detections.json");
    fs::write(&combined, detections_json(&results)?)?;
    if a.export_cas {
        let cas_dir = c.output_dir.join("cas");
        for (r, v) in results.iter().zip(&ds.videos) {
            export_cas(r, Some(&v.record), &cas_dir)?;
        }
    }
    println!("wrote detections for {} videos to {}", results.len(), combined.display());
    Ok(())
}

/// A combined detection file, a single per-video file, or a directory of per-video files.
pub fn load_detections(path: &Path) -> Result<Vec<DetectionSet>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.retain(|p| p.extension().is_some_and(|x| x == "json"));
        files.sort();
        return files.iter().map(|p| DetectionSet::load(p)).collect();
    }
    let text = fs::read_to_string(path)?;
    serde_json::from_str::<Vec<DetectionSet>>(&text)
        .or_else(|_| serde_json::from_str::<DetectionSet>(&text).map(|d| vec![d]))
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let thresholds = IoUThresholds::preset(&a.preset)?;
    let dets = load_detections(&a.detections)?;
    let (_, ds) = Dataset::load_manifest(&a.manifest, parse_split(&a.split)?)?;
    let mut report = evaluate(&dets, &test_records(&ds), ds.num_classes, &thresholds)?;
    let first = dets.first().and_then(|d| d.config_hash.clone());
    if dets.iter().all(|d| d.config_hash == first) {
        report.config_hash = first;
    }
    let out = match &a.out {
        Some(d) => d.clone(),
        None if a.detections.is_dir() => a.detections.clone(),
        None => a.detections.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    fs::create_dir_all(&out)?;
    report.save(&out.join("report.json"), &out.join("report.txt"))?;
    print!("{}", report.to_table());
    Ok(())
}

#[derive(Debug, Serialize)]
struct AblationOutput<'a> {
    config_hash: String,
    rows: &'a [AblationRow],
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let c = resolve_config(&a.config)?;
    let spec: AblationSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => AblationSpec::default(),
    };
    spec.validate()?;
    let manifest = manifest_path(&c)?;
    let (_, train_set) = Dataset::load_manifest(manifest, Some(Split::Train))?;
    let (_, test) = Dataset::load_manifest(manifest, Some(Split::Test))?;

    let rows = match &a.checkpoint {
        Some(p) => {
            let mut rows = Vec::new();
            if spec.components {
                rows.extend(component_rows(&Models::load(p, &c)?, &c, &test)?);
            }
            let sweeps = AblationSpec {
                components: false,
                ..spec.clone()
            };
            if sweeps.num_rows() > 0 {
                if !a.train_inline {
                    return Err(Error::Validation(
                        "zeta and sampler sweeps retrain the models; pass --train-inline or empty those lists".into(),
                    ));
                }
                rows.extend(run_ablation(&c, &sweeps, &train_set, &test)?);
            }
            rows
        }
        None if a.train_inline => run_ablation(&c, &spec, &train_set, &test)?,
        None => {
            return Err(Error::Validation(
                "ablation needs --checkpoint or --train-inline".into(),
            ))
        }
    };

    let hash = c.hash();
    fs::create_dir_all(&c.output_dir)?;
    let table = ablation_table(&rows, &hash);
    fs::write(c.output_dir.join("ablation.txt"), &table)?;
    write_json(
        &c.output_dir.join("ablation.json"),
        &AblationOutput {
            config_hash: hash,
            rows: &rows,
        },
    )?;
    print!("{table}");
    Ok(())
}
