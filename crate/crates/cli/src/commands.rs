//! One function per subcommand. Every command writes into the run directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use fragility_core::attack::{fgm_batch, robustness_sweep, AttackConfig, EpsilonGrid, SweepResult};
use fragility_core::data::{
    generate_synthetic_benchmark, holdout_split, load_image_directory, load_manifest, LabelSet, LabeledImage,
    NormalizationStats, SyntheticConfig,
};
use fragility_core::defense::{mitigation_stress_test, MitigationReport};
use fragility_core::lingua::{
    load_corpus, run_drift_audit, sample_corpus, AuditOptions, CorpusManifest, DriftProfile, FailureMode, HttpBackend,
    InferenceEndpoint, MockGenerateServer, MockScript, SAMPLE_SCRIPT_LLAMA, SAMPLE_SCRIPT_NATLAS,
};
use fragility_core::model::{load_checkpoint, save_checkpoint, train, MicroDenseNet, TrainingTrace};
use fragility_core::report::{
    decay_csv, emit_audit_bundle, emit_figures, DriftProfileDocument, EndpointMetadata, FigureInputs, ModelFingerprint,
    RateFormat, RobustnessMap,
};
use fragility_core::{sha256_hex, Error, Result};

use crate::config::{DataSource, RunConfig, Target};

pub const CHECKPOINT_FILE: &str = "model.json";
pub const SWEEP_FILE: &str = "sweep.json";
pub const DECAY_FILE: &str = "robustness_decay.csv";
pub const MITIGATION_FILE: &str = "mitigation.json";
pub const DRIFT_FILE: &str = "drift_profiles.json";
pub const BUNDLE_DIR: &str = "bundle";

pub struct Context {
    pub cfg: RunConfig,
    pub run_dir: PathBuf,
    pub timestamp: String,
}

impl Context {
    pub fn create(cfg: RunConfig, run_dir: PathBuf, timestamp: String) -> Result<Self> {
        std::fs::create_dir_all(&run_dir).map_err(|source| io(&run_dir, source))?;
        write(&run_dir.join("config.json"), &cfg.to_json())?;
        info!("run directory {}", run_dir.display());
        Ok(Self { cfg, run_dir, timestamp })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.run_dir.join(name)
    }
}

fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("outputs serialize") + "\n"
}

fn from_json<T: for<'de> Deserialize<'de>>(path: &Path, bytes: &[u8]) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Train and test images for the configured source.
pub fn load_data(cfg: &RunConfig) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    let d = &cfg.data;
    let labels = LabelSet::clinical();
    let channel_stats = NormalizationStats::for_channels(d.channels)?;
    let path = || d.path.clone().ok_or_else(|| Error::Validation("data source needs a path".into()));
    let (train, test) = match d.source {
        DataSource::Synthetic => generate_synthetic_benchmark(
            &cfg.split(),
            &SyntheticConfig {
                image_size: d.image_size,
                channels: d.channels,
            },
        )?,
        DataSource::Directory => {
            let report = load_image_directory(&path()?, &labels, &channel_stats, d.image_size)?;
            for w in &report.warnings {
                warn!("skipped {}: {}", w.path.display(), w.reason);
            }
            holdout_split(&report.images, d.per_class_test, cfg.seed)?
        }
        DataSource::Manifest => {
            let split = load_manifest(&path()?, &labels, &channel_stats, d.image_size)?;
            for w in &split.warnings {
                warn!("skipped {}: {}", w.path.display(), w.reason);
            }
            (split.train, split.test)
        }
    };
    if train.is_empty() || test.is_empty() {
        return Err(Error::Validation("both the training and the test split need images".into()));
    }
    info!("{} training and {} test images", train.len(), test.len());
    Ok((train, test))
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainSummary {
    checkpoint_sha256: String,
    num_parameters: usize,
    train_images: usize,
    test_images: usize,
    final_loss: Option<f64>,
    final_train_accuracy: Option<f64>,
    test_accuracy: f64,
}

pub fn cmd_train(ctx: &Context) -> Result<MicroDenseNet> {
    let (train_set, test) = load_data(&ctx.cfg)?;
    let norm = NormalizationStats::from_images(&train_set)?;
    let init = MicroDenseNet::new(ctx.cfg.model_config(), LabelSet::clinical(), norm, ctx.cfg.seed)?;
    info!("training {} parameters", init.num_parameters());
    let (model, trace) = train(&init, &train_set, &ctx.cfg.train_config())?;
    for e in &trace.epochs {
        info!("epoch {} loss {:.4} accuracy {:.4}", e.epoch, e.loss, e.train_accuracy);
    }
    let sha = save_checkpoint(&model, &ctx.path(CHECKPOINT_FILE))?;
    trace.write_csv(&ctx.path("training_trace.csv"))?;
    write(&ctx.path("training_trace.json"), &to_json(&trace))?;
    emit_figures(
        &FigureInputs {
            trace: Some(&trace),
            ..FigureInputs::default()
        },
        &ctx.run_dir,
    )?;
    let test_accuracy = fragility_core::model::evaluate(&model, &test)?.overall_accuracy;
    let summary = TrainSummary {
        checkpoint_sha256: sha,
        num_parameters: model.num_parameters(),
        train_images: train_set.len(),
        test_images: test.len(),
        final_loss: trace.last().map(|e| e.loss),
        final_train_accuracy: trace.last().map(|e| e.train_accuracy),
        test_accuracy,
    };
    write(&ctx.path("train_summary.json"), &to_json(&summary))?;
    info!("test accuracy {test_accuracy:.4}");
    Ok(model)
}

fn load_model(ctx: &Context, checkpoint: Option<&Path>) -> Result<MicroDenseNet> {
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| ctx.path(CHECKPOINT_FILE));
    if !path.exists() {
        return Err(Error::Validation(format!(
            "no checkpoint at {}; run `train` first or pass --checkpoint",
            path.display()
        )));
    }
    load_checkpoint(&path)
}

fn grid(cfg: &RunConfig) -> Result<EpsilonGrid> {
    EpsilonGrid::linspace(cfg.attack.max_epsilon, cfg.attack.levels)
}

pub fn cmd_attack(ctx: &Context, checkpoint: Option<&Path>) -> Result<()> {
    let model = load_model(ctx, checkpoint)?;
    let (_, test) = load_data(&ctx.cfg)?;
    let a = &ctx.cfg.attack;
    let grid = grid(&ctx.cfg)?;
    let sweep = robustness_sweep(&model, &test, &grid, a.ci, a.confidence)?;
    for r in &sweep.rows {
        info!(
            "epsilon {:.3}: accuracy {:.4} [{:.4}, {:.4}]",
            r.epsilon,
            r.accuracy,
            r.ci_lower(),
            r.ci_upper()
        );
    }
    write(&ctx.path(DECAY_FILE), &decay_csv(&sweep, RateFormat::Fraction))?;
    write(&ctx.path(SWEEP_FILE), &to_json(&sweep))?;

    let examples: Vec<LabeledImage> = test.iter().take(a.triptych_examples).cloned().collect();
    let pairs: Vec<(LabeledImage, LabeledImage)> = match grid.first_attack() {
        Some(eps) if !examples.is_empty() => {
            let adv = fgm_batch(&model, &examples, &AttackConfig::new(eps))?;
            examples.into_iter().zip(adv).collect()
        }
        _ => Vec::new(),
    };
    emit_figures(
        &FigureInputs {
            sweep: Some(&sweep),
            image_pairs: &pairs,
            amplification: a.amplification,
            ..FigureInputs::default()
        },
        &ctx.run_dir,
    )?;
    Ok(())
}

pub fn cmd_defend(ctx: &Context, checkpoint: Option<&Path>) -> Result<()> {
    let model = load_model(ctx, checkpoint)?;
    let (train_set, test) = load_data(&ctx.cfg)?;
    let first = grid(&ctx.cfg)?
        .first_attack()
        .ok_or_else(|| Error::Validation("the epsilon grid has no nonzero level".into()))?;
    let stress = ctx.cfg.stress_config(first);
    info!("stress test at epsilon {:.4}", stress.epsilon);
    let report = mitigation_stress_test(&model, &train_set, &test, &stress)?;
    let table = report.to_table();
    for line in table.lines() {
        info!("{line}");
    }
    report.write_csv(&ctx.path("mitigation.csv"))?;
    write(&ctx.path("mitigation.txt"), &table)?;
    write(&ctx.path(MITIGATION_FILE), &to_json(&report))?;
    emit_figures(
        &FigureInputs {
            mitigation: Some(&report),
            ..FigureInputs::default()
        },
        &ctx.run_dir,
    )?;
    Ok(())
}

/// Endpoint descriptions and profiles in target order.
#[derive(Debug, Serialize, Deserialize)]
pub struct DriftRun {
    pub endpoints: Vec<EndpointMetadata>,
    pub profiles: Vec<DriftProfile>,
}

fn endpoint(cfg: &RunConfig, url: &str, model: &str) -> InferenceEndpoint {
    let l = &cfg.lingua;
    InferenceEndpoint {
        timeout_ms: l.timeout_ms,
        max_retries: l.max_retries,
        backoff_ms: l.backoff_ms,
        ..InferenceEndpoint::new(url, model)
    }
}

fn audit_one(
    cfg: &RunConfig,
    corpus: &CorpusManifest,
    url: &str,
    model: &str,
    options: &AuditOptions,
) -> Result<DriftProfile> {
    let backend = HttpBackend::new(endpoint(cfg, url, model))?;
    info!("auditing {model} at {url}");
    run_drift_audit(&backend, corpus, options)
}

fn audit_fixture(
    cfg: &RunConfig,
    corpus: &CorpusManifest,
    model: &str,
    script_json: &str,
    options: &AuditOptions,
) -> Result<(EndpointMetadata, DriftProfile)> {
    let server = MockGenerateServer::start(corpus, MockScript::from_json(script_json)?)?;
    let profile = audit_one(cfg, corpus, server.url(), model, options)?;
    let meta = EndpointMetadata {
        model_name: model.to_string(),
        base_url: None,
        temperature: 0.0,
        fixture_sha256: Some(sha256_hex(script_json.as_bytes())),
    };
    Ok((meta, profile))
}

pub fn cmd_lang_audit(ctx: &Context) -> Result<DriftRun> {
    let l = &ctx.cfg.lingua;
    let corpus = match &l.corpus {
        Some(p) => load_corpus(p, &LabelSet::clinical())?,
        None => sample_corpus(),
    };
    let options = AuditOptions {
        mode: if l.lenient { FailureMode::Lenient } else { FailureMode::Strict },
        parallelism: l.parallelism,
    };
    let targets = if l.targets.is_empty() {
        vec![Target::Builtin]
    } else {
        l.targets.clone()
    };
    let mut run = DriftRun {
        endpoints: Vec::new(),
        profiles: Vec::new(),
    };
    for target in &targets {
        let results = match target {
            Target::Http { url, model } => {
                let profile = audit_one(&ctx.cfg, &corpus, url, model, &options)?;
                let meta = EndpointMetadata {
                    model_name: model.clone(),
                    base_url: Some(url.clone()),
                    temperature: 0.0,
                    fixture_sha256: None,
                };
                vec![(meta, profile)]
            }
            Target::Fixture { path, model } => {
                let bytes = read(path)?;
                let text = String::from_utf8(bytes).map_err(|e| Error::Format {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
                vec![audit_fixture(&ctx.cfg, &corpus, model, &text, &options)?]
            }
            Target::Builtin => vec![
                audit_fixture(&ctx.cfg, &corpus, "llama3.1:8b", SAMPLE_SCRIPT_LLAMA, &options)?,
                audit_fixture(&ctx.cfg, &corpus, "natlas:latest", SAMPLE_SCRIPT_NATLAS, &options)?,
            ],
        };
        for (meta, profile) in results {
            for s in &profile.registers {
                info!(
                    "{} {}: accuracy {:.3}, consistency {:.3}",
                    profile.model_name,
                    s.register.key(),
                    s.accuracy,
                    s.consistency
                );
            }
            run.endpoints.push(meta);
            run.profiles.push(profile);
        }
    }
    write(&ctx.path(DRIFT_FILE), &to_json(&run))?;
    if run.profiles.len() >= 2 {
        let cmp = fragility_core::lingua::compare_models(&run.profiles)?;
        write(&ctx.path("drift_comparison.txt"), &cmp.to_table())?;
    }
    emit_figures(
        &FigureInputs {
            drift: &run.profiles,
            ..FigureInputs::default()
        },
        &ctx.run_dir,
    )?;
    Ok(run)
}

/// Read one optional input, recording its hash.
fn optional_input(dir: &Path, name: &str, hashes: &mut BTreeMap<String, String>) -> Result<Option<(PathBuf, Vec<u8>)>> {
    let path = dir.join(name);
    if !path.exists() {
        return Ok(None);
    }
    let bytes = read(&path)?;
    hashes.insert(name.to_string(), sha256_hex(&bytes));
    Ok(Some((path, bytes)))
}

pub fn cmd_report(ctx: &Context, from: Option<&Path>) -> Result<()> {
    let dir = from.map(Path::to_path_buf).unwrap_or_else(|| ctx.run_dir.clone());
    let mut hashes = BTreeMap::new();
    let sweep_in = optional_input(&dir, SWEEP_FILE, &mut hashes)?;
    let mitigation_in = optional_input(&dir, MITIGATION_FILE, &mut hashes)?;
    let checkpoint_in = optional_input(&dir, CHECKPOINT_FILE, &mut hashes)?;
    let drift_in = optional_input(&dir, DRIFT_FILE, &mut hashes)?;
    if sweep_in.is_none() && drift_in.is_none() {
        return Err(Error::Validation(format!(
            "nothing to report in {}: run `attack` or `lang-audit` first",
            dir.display()
        )));
    }

    let sweep: Option<SweepResult> = sweep_in.as_ref().map(|(p, b)| from_json(p, b)).transpose()?;
    let mitigation: Option<MitigationReport> = mitigation_in.as_ref().map(|(p, b)| from_json(p, b)).transpose()?;
    let map = match &sweep {
        Some(sweep) => {
            let (path, bytes) = checkpoint_in.as_ref().ok_or_else(|| {
                Error::Validation(format!("{} has a sweep but no {CHECKPOINT_FILE}", dir.display()))
            })?;
            let model = load_checkpoint(path)?;
            let fingerprint = ModelFingerprint {
                architecture: "micro-densenet".into(),
                config: *model.config(),
                seed: ctx.cfg.seed,
                checkpoint_sha256: sha256_hex(bytes),
                num_parameters: model.num_parameters(),
            };
            Some(RobustnessMap::build(
                fingerprint,
                sweep.clone(),
                mitigation.clone(),
                ctx.timestamp.clone(),
                hashes.clone(),
            )?)
        }
        None => None,
    };
    let drift = match &drift_in {
        Some((path, bytes)) => {
            let run: DriftRun = from_json(path, bytes)?;
            let mut doc_hashes = BTreeMap::new();
            doc_hashes.insert(DRIFT_FILE.to_string(), hashes[DRIFT_FILE].clone());
            Some(DriftProfileDocument::build(run.endpoints, run.profiles, ctx.timestamp.clone(), doc_hashes)?)
        }
        None => None,
    };

    let out = ctx.path(BUNDLE_DIR);
    std::fs::create_dir_all(&out).map_err(|e| io(&out, e))?;
    let paths = emit_audit_bundle(map.as_ref(), drift.as_ref(), &out)?;
    let trace: Option<TrainingTrace> = match optional_input(&dir, "training_trace.json", &mut BTreeMap::new())? {
        Some((p, b)) => Some(from_json(&p, &b)?),
        None => None,
    };
    let profiles: &[DriftProfile] = drift.as_ref().map(|d| d.profiles.as_slice()).unwrap_or(&[]);
    emit_figures(
        &FigureInputs {
            sweep: sweep.as_ref(),
            mitigation: mitigation.as_ref(),
            drift: profiles,
            trace: trace.as_ref(),
            ..FigureInputs::default()
        },
        &out.join("figures"),
    )?;
    info!("bundle written to {}", paths.summary.parent().unwrap_or(&out).display());
    Ok(())
}

pub fn cmd_audit_all(ctx: &Context) -> Result<()> {
    cmd_train(ctx)?;
    cmd_attack(ctx, None)?;
    cmd_defend(ctx, None)?;
    cmd_lang_audit(ctx)?;
    cmd_report(ctx, None)
}
