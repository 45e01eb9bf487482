//! End-to-end scenario pipeline: worlds, samples, base models, post-hoc
//! training, evaluation and artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{FitOn, ModelSpec, ScenarioConfig, ValidationSource};
use crate::data::Dataset;
use crate::deferral::{DeferralRule, RuleKind};
use crate::error::{Error, Result};
use crate::eval::{
    calibration_from_table, cascade_curve, curve_from_scores, write_calibration_csv,
    write_curves_csv, CalibrationReport, CascadeTable, CurveGrid, CurveOptions, CurvePoint,
    DeferralCurve,
};
use crate::models::{train_classifier, Classifier, ClassifierArchitecture, ProbModel};
use crate::par;
use crate::posthoc::{self, make_targets, train_posthoc_with, PosthocModel, TrainingReport};
use crate::rng::RngSeed;
use crate::worlds::{
    apply_long_tail, sample, LabelNoise, ScenarioTransform, SubgroupPredicate, SyntheticWorld,
};

pub const MANIFEST_VERSION: u32 = 1;
/// Deferral rates summarized in the manifest and compared across runs.
pub const HEADLINE_RATES: [f64; 3] = [0.1, 0.3, 0.5];

/// The distributions a scenario draws from.
#[derive(Debug, Clone)]
pub struct ScenarioWorlds {
    /// Test distribution with clean labels.
    pub clean: SyntheticWorld,
    /// Training distribution: skewed priors and/or noisy labels.
    pub train: SyntheticWorld,
    /// Distribution of the evaluation sample.
    pub test: SyntheticWorld,
    pub subgroup: Option<SubgroupPredicate>,
}

pub fn build_worlds(cfg: &ScenarioConfig) -> Result<ScenarioWorlds> {
    let clean = cfg.world.build()?;
    let mut train = clean.clone();
    let mut noise = None;
    let mut subgroup = None;
    for t in &cfg.transforms {
        match t {
            ScenarioTransform::LongTailSkew { .. } => train = apply_long_tail(&clean, t)?,
            ScenarioTransform::LabelNoise { classes, flip_prob } => {
                noise = Some(LabelNoise {
                    classes: classes.clone(),
                    flip_prob: *flip_prob,
                })
            }
            ScenarioTransform::SpecialistSplit { .. } => {
                subgroup = Some(crate::worlds::make_specialist_world(&clean, t)?.1)
            }
        }
    }
    let mut test = clean.clone();
    if let Some(n) = &noise {
        train = train.with_label_noise(n)?;
        if cfg.evaluation.noisy_test_labels {
            test = test.with_label_noise(n)?;
        }
    }
    Ok(ScenarioWorlds {
        clean,
        train,
        test,
        subgroup,
    })
}

/// Post-hoc model and training record for one rule at one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosthocRecord {
    pub rule: String,
    pub stage: usize,
    pub training_examples: usize,
    pub report: Option<TrainingReport>,
    #[serde(skip)]
    pub model: Option<PosthocModel>,
}

/// Everything computed for one seed, before any file is written.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub classifiers: Vec<Classifier>,
    pub base_accuracies: Vec<f64>,
    pub test_samples: usize,
    pub curves: Vec<DeferralCurve>,
    pub calibration: CalibrationReport,
    pub posthoc: Vec<PosthocRecord>,
}

fn build_classifiers(
    cfg: &ScenarioConfig,
    worlds: &ScenarioWorlds,
    fit_data: &Dataset,
    seed: RngSeed,
) -> Result<Vec<Classifier>> {
    par::try_map_indexed(cfg.models.len(), |k| {
        let pick = |on: &FitOn| match on {
            FitOn::Train => worlds.train.clone(),
            FitOn::Test => worlds.test.clone(),
        };
        let clf = match &cfg.models[k] {
            ModelSpec::Analytic {
                visible_dims,
                fit_on,
            } => Classifier::Analytic {
                world: pick(fit_on),
                visible_dims: *visible_dims,
            },
            ModelSpec::CorruptedAnalytic {
                temperature,
                visible_dims,
                fit_on,
            } => Classifier::CorruptedAnalytic {
                world: pick(fit_on),
                temperature: *temperature,
                visible_dims: *visible_dims,
            },
            ModelSpec::SpecialistAnalytic {
                eps_good,
                eps_bad,
                salt,
            } => Classifier::SpecialistAnalytic {
                world: worlds.train.clone(),
                subgroup: worlds
                    .subgroup
                    .clone()
                    .ok_or_else(|| Error::Config("specialist model without a subgroup".into()))?,
                eps_good: *eps_good,
                eps_bad: *eps_bad,
                salt: *salt,
            },
            ModelSpec::TrainedMlp {
                hidden,
                visible_dims,
                hyperparams,
            } => train_classifier(
                fit_data,
                &ClassifierArchitecture {
                    hidden: hidden.clone(),
                    visible_dims: *visible_dims,
                },
                hyperparams,
                seed.derive_named(&format!("classifier/{k}")),
            )?,
        };
        clf.validate()?;
        Ok(clf)
    })
}

/// One deferral rule per stage, post-hoc ones not yet filled in.
fn stage_rule(
    kind: RuleKind,
    worlds: &ScenarioWorlds,
    seed: RngSeed,
    label: &str,
    stage: usize,
) -> Option<DeferralRule> {
    Some(match kind {
        RuleKind::Confidence => DeferralRule::Confidence,
        RuleKind::Entropy => DeferralRule::Entropy,
        RuleKind::Random => DeferralRule::Random {
            seed: seed.derive_named(&format!("random/{label}")).derive(stage as u64),
        },
        RuleKind::OracleOnehot => DeferralRule::OracleOnehot,
        RuleKind::OracleProb => DeferralRule::OracleProb,
        RuleKind::OracleRelative => DeferralRule::OracleRelative,
        RuleKind::Bayes => DeferralRule::Bayes {
            world: worlds.test.clone(),
        },
        RuleKind::Posthoc => return None,
    })
}

/// Loads pre-trained post-hoc models named by the config, checking them
/// against the scenario.
pub fn load_posthoc_models(cfg: &ScenarioConfig) -> Result<BTreeMap<String, PosthocModel>> {
    let l = cfg.world.build()?.num_classes();
    let mut out = BTreeMap::new();
    for r in &cfg.rules {
        if let Some(p) = &r.model_path {
            let m = posthoc::load_model(p)?;
            if m.num_classes() != l {
                return Err(Error::Config(format!(
                    "post-hoc model {} expects {} classes, scenario has {l}",
                    p.display(),
                    m.num_classes()
                )));
            }
            out.insert(r.label(), m);
        }
    }
    Ok(out)
}

/// Runs the pipeline for one seed in memory.
pub fn evaluate_seed(cfg: &ScenarioConfig, seed: u64) -> Result<SeedRun> {
    cfg.validate()?;
    let preloaded = load_posthoc_models(cfg)?;
    evaluate_seed_with(cfg, seed, &preloaded)
}

fn evaluate_seed_with(
    cfg: &ScenarioConfig,
    seed: u64,
    preloaded: &BTreeMap<String, PosthocModel>,
) -> Result<SeedRun> {
    let root = RngSeed(seed);
    let worlds = build_worlds(cfg)?;
    let k = cfg.num_models();
    let train = sample(&worlds.train, cfg.sampling.train_samples, root.derive_named("train"))?;
    let test = sample(&worlds.test, cfg.sampling.test_samples, root.derive_named("test"))?;
    let ph = &cfg.posthoc;
    let (fit_part, validation) =
        posthoc::validation_split(&train, ph.validation_fraction, root.derive_named("split"))?;
    let validation = match ph.validation_source {
        ValidationSource::Train => validation,
        ValidationSource::Test => {
            sample(&worlds.test, validation.len(), root.derive_named("validation"))?
        }
    };
    let classifiers = build_classifiers(cfg, &worlds, &fit_part, root.derive_named("models"))?;

    let jobs: Vec<(usize, usize)> = cfg
        .rules
        .iter()
        .enumerate()
        .filter(|(_, r)| r.target.is_some())
        .flat_map(|(i, _)| (0..k - 1).map(move |s| (i, s)))
        .collect();
    let trained = par::try_map_indexed(jobs.len(), |j| {
        let (i, stage) = jobs[j];
        let rule = &cfg.rules[i];
        let label = rule.label();
        let kind = rule.target.expect("filtered on target");
        let set = make_targets(&validation, &classifiers[stage], &classifiers[stage + 1], kind)?;
        let (model, report) = train_posthoc_with(
            &set,
            None,
            &ph.hidden,
            &ph.hyperparams,
            root.derive_named(&format!("posthoc/{label}/{stage}")),
        )?;
        Ok::<_, Error>(PosthocRecord {
            rule: label,
            stage,
            training_examples: set.len(),
            report: Some(report),
            model: Some(model),
        })
    })?;

    let mut posthoc = trained;
    for (label, m) in preloaded {
        posthoc.push(PosthocRecord {
            rule: label.clone(),
            stage: 0,
            training_examples: 0,
            report: None,
            model: Some(m.clone()),
        });
    }

    let refs: Vec<&dyn ProbModel> = classifiers.iter().map(|c| c as &dyn ProbModel).collect();
    let table = CascadeTable::build(&test, &refs)?;
    let base_accuracies: Vec<f64> = (0..k).map(|m| table.accuracy(m)).collect();
    let correct: Vec<Vec<bool>> = (0..k).map(|m| table.correct(m)).collect();
    let costs = cfg.model_costs();

    let curves = par::try_map_indexed(cfg.rules.len(), |i| {
        let spec = &cfg.rules[i];
        let label = spec.label();
        let rules: Vec<DeferralRule> = (0..k - 1)
            .map(|stage| match stage_rule(spec.kind, &worlds, root, &label, stage) {
                Some(r) => Ok(r),
                None => posthoc
                    .iter()
                    .find(|p| p.rule == label && p.stage == stage)
                    .and_then(|p| p.model.clone())
                    .map(DeferralRule::Posthoc)
                    .ok_or_else(|| Error::Config(format!("no post-hoc model for {label}"))),
            })
            .collect::<Result<_>>()?;
        let stage_scores = rules
            .iter()
            .enumerate()
            .map(|(s, r)| table.scores(s, r))
            .collect::<Result<Vec<_>>>()?;
        let points = if k == 2 {
            curve_from_scores(
                &stage_scores[0],
                &correct[0],
                &correct[1],
                &cfg.evaluation.grid,
                &CurveOptions {
                    deferral_cost: cfg.evaluation.deferral_cost,
                    model_costs: costs.clone(),
                },
            )?
        } else {
            let CurveGrid::Rates { rates } = &cfg.evaluation.grid else {
                return Err(Error::Config("multi-stage curves need a rate grid".into()));
            };
            cascade_curve(&table, &stage_scores, rates, &costs)?
                .into_iter()
                .map(|p| {
                    let deferred: f64 = p.reach[1..].iter().sum();
                    CurvePoint {
                        threshold: f64::NAN,
                        deferral_rate: p.reach[1],
                        accuracy: p.accuracy,
                        risk: 1.0 - p.accuracy + cfg.evaluation.deferral_cost * deferred,
                        relative_cost: p.relative_cost,
                    }
                })
                .collect()
        };
        Ok(DeferralCurve {
            rule: label,
            scenario: cfg.scenario.clone(),
            seed,
            points,
        })
    })?;

    Ok(SeedRun {
        seed,
        calibration: calibration_from_table(&table),
        classifiers,
        base_accuracies,
        test_samples: test.len(),
        curves,
        posthoc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Headline {
    pub rule: String,
    pub rate: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSummary {
    pub seed: u64,
    pub base_accuracies: Vec<f64>,
    pub headline: Vec<Headline>,
}

/// Run manifest. Its embedded config reproduces the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub scenario: String,
    pub tool_version: String,
    pub config_sha256: String,
    pub config: ScenarioConfig,
    pub seeds: Vec<u64>,
    pub test_samples: usize,
    pub rules: Vec<String>,
    pub runs: Vec<SeedSummary>,
    /// SHA-256 of every other artifact, keyed by path relative to the run
    /// directory.
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn from_json(text: &str, source_name: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Probe {
            format_version: u32,
        }
        let probe: Probe = serde_json::from_str(text).map_err(|e| Error::json(source_name, &e))?;
        if probe.format_version != MANIFEST_VERSION {
            return Err(Error::UnsupportedVersion {
                found: probe.format_version,
                expected: MANIFEST_VERSION,
            });
        }
        serde_json::from_str(text).map_err(|e| Error::json(source_name, &e))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides the config's `output_dir`.
    pub out: Option<PathBuf>,
    /// Runs this single seed instead of the configured list.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub manifest: Manifest,
}

/// Loads a scenario config, or the config embedded in a run manifest.
pub fn load_run_input(path: &Path) -> Result<ScenarioConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let is_manifest = serde_json::from_str::<serde_json::Value>(&text)
        .map(|v| v.get("config_sha256").is_some())
        .unwrap_or(false);
    if is_manifest {
        let m = Manifest::from_json(&text, &name)?;
        m.config.validate()?;
        Ok(m.config)
    } else {
        ScenarioConfig::load(path)
    }
}

pub fn run_scenario_file(path: &Path, opts: &RunOptions) -> Result<RunSummary> {
    run_scenario(&load_run_input(path)?, opts)
}

/// Validates, computes every seed, then writes all artifacts through a
/// staging directory so a failed run leaves nothing behind.
pub fn run_scenario(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<RunSummary> {
    let mut cfg = cfg.clone();
    if let Some(s) = opts.seed {
        cfg.seeds = vec![s];
    }
    let out = opts
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.scenario));
    cfg.output_dir = None;
    cfg.validate()?;
    check_destination(&out)?;
    let preloaded = load_posthoc_models(&cfg)?;

    let runs = cfg
        .seeds
        .iter()
        .map(|&s| evaluate_seed_with(&cfg, s, &preloaded))
        .collect::<Result<Vec<_>>>()?;

    let staging = staging_path(&out);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    let result = write_artifacts(&cfg, &runs, &staging).and_then(|manifest| {
        if out.exists() {
            fs::remove_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        }
        fs::rename(&staging, &out).map_err(|e| Error::io(&out, e))?;
        Ok(manifest)
    });
    match result {
        Ok(manifest) => Ok(RunSummary {
            out_dir: out,
            manifest,
        }),
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}

/// An existing destination is replaced only if it is empty or holds a
/// previous run.
fn check_destination(out: &Path) -> Result<()> {
    if !out.exists() {
        return Ok(());
    }
    if !out.is_dir() {
        return Err(Error::Config(format!("{} exists and is not a directory", out.display())));
    }
    let empty = fs::read_dir(out)
        .map_err(|e| Error::io(out, e))?
        .next()
        .is_none();
    if empty || out.join("manifest.json").is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{} is not empty and does not hold a previous run",
            out.display()
        )))
    }
}

fn staging_path(out: &Path) -> PathBuf {
    let name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    out.with_file_name(format!(".{name}.staging"))
}

fn write_file(dir: &Path, rel: &str, bytes: &[u8], hashes: &mut BTreeMap<String, String>) -> Result<()> {
    let path = dir.join(rel);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    hashes.insert(rel.to_string(), sha256_hex(bytes));
    Ok(())
}

fn hash_existing(dir: &Path, rel: &str, hashes: &mut BTreeMap<String, String>) -> Result<()> {
    let path = dir.join(rel);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    hashes.insert(rel.to_string(), sha256_hex(&bytes));
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("artifact types serialize");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct TrainingLog<'a> {
    seed: u64,
    base_accuracies: &'a [f64],
    posthoc: &'a [PosthocRecord],
}

fn write_artifacts(cfg: &ScenarioConfig, runs: &[SeedRun], dir: &Path) -> Result<Manifest> {
    let models_dir = dir.join("models");
    fs::create_dir_all(&models_dir).map_err(|e| Error::io(&models_dir, e))?;
    let mut hashes = BTreeMap::new();

    let curves: Vec<DeferralCurve> = runs.iter().flat_map(|r| r.curves.iter().cloned()).collect();
    write_curves_csv(&dir.join("curves.csv"), &curves)?;
    hash_existing(dir, "curves.csv", &mut hashes)?;

    for run in runs {
        let rel = format!("calibration_{}.csv", run.seed);
        write_calibration_csv(&dir.join(&rel), &run.calibration)?;
        hash_existing(dir, &rel, &mut hashes)?;
        for (k, clf) in run.classifiers.iter().enumerate() {
            let rel = format!("models/seed{}_model{}.json", run.seed, k + 1);
            let text = serde_json::to_string(clf).expect("classifiers serialize");
            write_file(dir, &rel, text.as_bytes(), &mut hashes)?;
        }
        for p in &run.posthoc {
            if let (Some(m), Some(_)) = (&p.model, &p.report) {
                let rel = format!("models/seed{}_{}_stage{}.json", run.seed, p.rule, p.stage + 1);
                write_file(dir, &rel, posthoc::model_to_json(m).as_bytes(), &mut hashes)?;
            }
        }
    }
    let logs: Vec<TrainingLog> = runs
        .iter()
        .map(|r| TrainingLog {
            seed: r.seed,
            base_accuracies: &r.base_accuracies,
            posthoc: &r.posthoc,
        })
        .collect();
    write_file(dir, "training.json", to_json(&logs).as_bytes(), &mut hashes)?;

    let config_text = serde_json::to_string(cfg).expect("config serializes");
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        scenario: cfg.scenario.clone(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: sha256_hex(config_text.as_bytes()),
        config: cfg.clone(),
        seeds: cfg.seeds.clone(),
        test_samples: cfg.sampling.test_samples,
        rules: cfg.rules.iter().map(|r| r.label()).collect(),
        runs: runs
            .iter()
            .map(|r| SeedSummary {
                seed: r.seed,
                base_accuracies: r.base_accuracies.clone(),
                headline: r
                    .curves
                    .iter()
                    .flat_map(|c| {
                        HEADLINE_RATES.iter().map(|&rate| Headline {
                            rule: c.rule.clone(),
                            rate,
                            accuracy: c.accuracy_at(rate).unwrap_or(f64::NAN),
                        })
                    })
                    .collect(),
            })
            .collect(),
        artifacts: hashes,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, to_json(&manifest)).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
