//! Scenario configuration schema. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::deferral::RuleKind;
use crate::error::{Error, Result};
use crate::eval::CurveGrid;
use crate::models::TrainingHyperparams;
use crate::posthoc::{TargetKind, DEFAULT_HIDDEN};
use crate::rng::RngSeed;
use crate::worlds::{GaussianComponent, ScenarioTransform, SupportPoint, SyntheticWorld};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Identifier written into every output row.
    pub scenario: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub world: WorldSpec,
    #[serde(default)]
    pub transforms: Vec<ScenarioTransform>,
    pub models: Vec<ModelSpec>,
    pub rules: Vec<RuleSpec>,
    #[serde(default)]
    pub posthoc: PosthocSpec,
    #[serde(default)]
    pub sampling: SamplingSpec,
    #[serde(default)]
    pub evaluation: EvaluationSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// The test-time distribution before transforms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum WorldSpec {
    /// Uniform priors, shared stddev, means drawn from `N(0, mean_scale^2)`.
    RandomGaussianMixture {
        num_classes: usize,
        dim: usize,
        mean_scale: f64,
        stddev: f64,
        #[serde(default)]
        world_seed: u64,
    },
    GaussianMixture {
        components: Vec<GaussianComponent>,
    },
    Discrete {
        support: Vec<SupportPoint>,
    },
}

impl WorldSpec {
    pub fn build(&self) -> Result<SyntheticWorld> {
        match self {
            WorldSpec::RandomGaussianMixture {
                num_classes,
                dim,
                mean_scale,
                stddev,
                world_seed,
            } => SyntheticWorld::random_gaussian_mixture(
                *num_classes,
                *dim,
                *mean_scale,
                *stddev,
                RngSeed(*world_seed),
            ),
            WorldSpec::GaussianMixture { components } => {
                SyntheticWorld::gaussian_mixture(components.clone())
            }
            WorldSpec::Discrete { support } => SyntheticWorld::discrete(support.clone()),
        }
    }
}

/// Which distribution an analytic model's posterior comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitOn {
    /// The training distribution (after noise or skew): what a model fit
    /// on the training data converges to.
    #[default]
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    Analytic {
        #[serde(default)]
        visible_dims: Option<usize>,
        #[serde(default)]
        fit_on: FitOn,
    },
    CorruptedAnalytic {
        temperature: f64,
        #[serde(default)]
        visible_dims: Option<usize>,
        #[serde(default)]
        fit_on: FitOn,
    },
    /// Needs a `specialist-split` transform.
    SpecialistAnalytic {
        #[serde(default = "default_eps")]
        eps_good: f64,
        #[serde(default = "default_eps")]
        eps_bad: f64,
        #[serde(default)]
        salt: u64,
    },
    /// Softmax MLP trained on the training split.
    TrainedMlp {
        #[serde(default)]
        hidden: Vec<usize>,
        #[serde(default)]
        visible_dims: Option<usize>,
        #[serde(default)]
        hyperparams: TrainingHyperparams,
    },
}

fn default_eps() -> f64 {
    crate::models::classifier::DEFAULT_SPECIALIST_EPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSpec {
    pub kind: RuleKind,
    /// Label used in outputs; defaults to the kind (and target).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Operating threshold for the per-rule risk summary in the manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    /// Post-hoc target to train.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TargetKind>,
    /// Pre-trained post-hoc model, relative to the config file. Only valid
    /// for two-model scenarios.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_path: Option<PathBuf>,
}

impl RuleSpec {
    pub fn label(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        match (self.kind, self.target) {
            (RuleKind::Posthoc, Some(t)) => format!("posthoc-{}", t.name()),
            (RuleKind::Posthoc, None) => "posthoc".into(),
            (k, _) => k.name().into(),
        }
    }
}

/// Where post-hoc training data comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValidationSource {
    /// Held-out part of the training-distribution sample.
    #[default]
    Train,
    /// An independent sample of the same size from the test distribution.
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PosthocSpec {
    pub hyperparams: TrainingHyperparams,
    pub hidden: Vec<usize>,
    pub validation_fraction: f64,
    pub validation_source: ValidationSource,
}

impl Default for PosthocSpec {
    fn default() -> Self {
        PosthocSpec {
            hyperparams: TrainingHyperparams::default(),
            hidden: DEFAULT_HIDDEN.to_vec(),
            validation_fraction: 0.2,
            validation_source: ValidationSource::Train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSpec {
    pub train_samples: usize,
    pub test_samples: usize,
}

impl Default for SamplingSpec {
    fn default() -> Self {
        SamplingSpec {
            train_samples: 25_000,
            test_samples: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSpec {
    /// Rates (quantile-matched) or fixed thresholds. For cascades of three
    /// or more models the rates are the shared per-stage quantile.
    pub grid: CurveGrid,
    /// Per-deferral cost in the risk column.
    pub deferral_cost: f64,
    /// Positive inference cost per model; defaults to `1, 2, ..., K`.
    pub model_costs: Option<Vec<f64>>,
    /// Evaluate against labels passed through the training noise channel.
    pub noisy_test_labels: bool,
}

impl Default for EvaluationSpec {
    fn default() -> Self {
        EvaluationSpec {
            grid: CurveGrid::uniform(20),
            deferral_cost: 0.0,
            model_costs: None,
            noisy_test_labels: false,
        }
    }
}

impl ScenarioConfig {
    pub fn from_json(text: &str, source_name: &str) -> Result<Self> {
        let cfg: ScenarioConfig =
            serde_json::from_str(text).map_err(|e| Error::json(source_name, &e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new("."));
        for r in &mut cfg.rules {
            if let Some(p) = &r.model_path {
                if p.is_relative() {
                    r.model_path = Some(base.join(p));
                }
            }
        }
        Ok(cfg)
    }

    pub fn num_models(&self) -> usize {
        self.models.len()
    }

    pub fn model_costs(&self) -> Vec<f64> {
        self.evaluation
            .model_costs
            .clone()
            .unwrap_or_else(|| (1..=self.models.len()).map(|k| k as f64).collect())
    }

    /// Structural checks that need no computation.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !is_identifier(&self.scenario) {
            return bad(format!("scenario id {:?} may only use letters, digits, '.', '_' and '-'", self.scenario));
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        let k = self.models.len();
        if k < 2 {
            return bad("a scenario needs at least two models".into());
        }
        if self.rules.is_empty() {
            return bad("no rules to evaluate".into());
        }
        let world = self.world.build()?;
        let l = world.num_classes();
        let mut noise = 0;
        let mut skew = 0;
        let mut split = 0;
        for t in &self.transforms {
            match t {
                ScenarioTransform::LabelNoise { classes, flip_prob } => {
                    noise += 1;
                    if !(0.0..=1.0).contains(flip_prob) {
                        return bad(format!("flip probability {flip_prob} outside [0, 1]"));
                    }
                    if let Some(c) = classes.iter().find(|&&c| c >= l) {
                        return bad(format!("noisy class {c} out of range for {l} classes"));
                    }
                }
                ScenarioTransform::SpecialistSplit { good_classes } => {
                    split += 1;
                    crate::worlds::SubgroupPredicate::new(good_classes, l)?;
                }
                ScenarioTransform::LongTailSkew { .. } => {
                    skew += 1;
                    crate::worlds::apply_long_tail(&world, t)?;
                }
            }
        }
        if noise > 1 || skew > 1 || split > 1 {
            return bad("each transform kind may appear at most once".into());
        }
        for (i, m) in self.models.iter().enumerate() {
            match m {
                ModelSpec::Analytic { visible_dims, .. }
                | ModelSpec::CorruptedAnalytic { visible_dims, .. }
                | ModelSpec::TrainedMlp { visible_dims, .. } => {
                    if let Some(v) = visible_dims {
                        if *v == 0 || *v > world.dim() {
                            return bad(format!("model {}: visible_dims {v} outside 1..={}", i + 1, world.dim()));
                        }
                    }
                }
                ModelSpec::SpecialistAnalytic { .. } => {
                    if split == 0 {
                        return bad(format!("model {} is a specialist but no specialist-split transform is given", i + 1));
                    }
                }
            }
            if let ModelSpec::CorruptedAnalytic { temperature, .. } = m {
                if !(*temperature > 0.0 && temperature.is_finite()) {
                    return bad(format!("model {}: temperature must be positive", i + 1));
                }
            }
            if let ModelSpec::TrainedMlp { hyperparams, .. } = m {
                hyperparams.validate()?;
            }
        }
        let mut labels: Vec<String> = Vec::new();
        for r in &self.rules {
            let label = r.label();
            if labels.contains(&label) {
                return bad(format!("duplicate rule label {label}"));
            }
            if !is_identifier(&label) {
                return bad(format!("rule label {label:?} may only use letters, digits, '.', '_' and '-'"));
            }
            labels.push(label);
            match r.kind {
                RuleKind::Posthoc => match (&r.target, &r.model_path) {
                    (Some(_), None) => {}
                    (None, Some(_)) if k == 2 => {}
                    (None, Some(_)) => return bad("pre-trained post-hoc models are only supported for two-model scenarios".into()),
                    _ => return bad("a posthoc rule needs exactly one of target or model_path".into()),
                },
                _ => {
                    if r.target.is_some() || r.model_path.is_some() {
                        return bad(format!("{} rule takes no target or model_path", r.kind.name()));
                    }
                }
            }
            if r.threshold.is_some_and(|t| t.is_nan()) {
                return bad("threshold must not be NaN".into());
            }
        }
        if self.sampling.test_samples == 0 || self.sampling.train_samples < 2 {
            return bad("sample counts too small".into());
        }
        let p = &self.posthoc;
        p.hyperparams.validate()?;
        if !(p.validation_fraction > 0.0 && p.validation_fraction < 1.0) {
            return bad("validation_fraction must be in (0, 1)".into());
        }
        let held = (p.validation_fraction * self.sampling.train_samples as f64).round() as usize;
        if held == 0 || held == self.sampling.train_samples {
            return bad("validation split leaves an empty part".into());
        }
        let costs = self.model_costs();
        if costs.len() != k || costs.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
            return bad(format!("model_costs must hold {k} positive values"));
        }
        match &self.evaluation.grid {
            CurveGrid::Rates { rates } => {
                if rates.is_empty() || rates.iter().any(|r| !(0.0..=1.0).contains(r)) || rates.windows(2).any(|w| w[1] < w[0]) {
                    return bad("rate grid must be nonempty, sorted and within [0, 1]".into());
                }
            }
            CurveGrid::Thresholds { thresholds } => {
                if k > 2 {
                    return bad("cascades of three or more models need a rate grid".into());
                }
                if thresholds.is_empty() || thresholds.iter().any(|t| t.is_nan()) {
                    return bad("threshold grid must be nonempty".into());
                }
            }
        }
        if self.evaluation.noisy_test_labels && noise == 0 {
            return bad("noisy_test_labels needs a label-noise transform".into());
        }
        Ok(())
    }
}

/// Nonempty and safe both as a CSV field and as part of a file name.
fn is_identifier(s: &str) -> bool {
    !s.is_empty() && !s.starts_with('.') && s.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c))
}
