//! Probabilistic classifiers used as cascade stages.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::mlp::MlpModel;
use crate::models::train::{fit, TrainingHyperparams};
use crate::prob::ProbVector;
use crate::rng::{splitmix64, RngSeed};
use crate::worlds::{SubgroupPredicate, SyntheticWorld};

pub const DEFAULT_SPECIALIST_EPS: f64 = 0.02;

fn default_eps() -> f64 {
    DEFAULT_SPECIALIST_EPS
}

/// A map from instances to class-probability vectors.
///
/// The analytic kinds read posteriors from a [`SyntheticWorld`]; that world
/// may differ from the one the data is drawn from (e.g. a world with skewed
/// priors stands in for a model fit on skewed training data).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Classifier {
    /// Exact posterior, optionally seeing only the leading coordinates.
    Analytic {
        world: SyntheticWorld,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        visible_dims: Option<usize>,
    },
    /// Posterior sharpened or flattened by `p^tau / sum p^tau`.
    CorruptedAnalytic {
        world: SyntheticWorld,
        temperature: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        visible_dims: Option<usize>,
    },
    /// Near one-hot on the Bayes class where that class is in the subgroup;
    /// elsewhere a near-uniform vector peaked on a class that is a fixed
    /// hash of `x`, i.e. unrelated to the label.
    SpecialistAnalytic {
        world: SyntheticWorld,
        subgroup: SubgroupPredicate,
        #[serde(default = "default_eps")]
        eps_good: f64,
        #[serde(default = "default_eps")]
        eps_bad: f64,
        #[serde(default)]
        salt: u64,
    },
    TrainedMlp {
        model: MlpModel,
        input_dim: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        visible_dims: Option<usize>,
        train_accuracy: f64,
    },
}

impl Classifier {
    pub fn analytic(world: SyntheticWorld) -> Self {
        Classifier::Analytic {
            world,
            visible_dims: None,
        }
    }

    pub fn specialist(world: SyntheticWorld, subgroup: SubgroupPredicate) -> Result<Self> {
        let c = Classifier::SpecialistAnalytic {
            world,
            subgroup,
            eps_good: DEFAULT_SPECIALIST_EPS,
            eps_bad: DEFAULT_SPECIALIST_EPS,
            salt: 0,
        };
        c.validate()?;
        Ok(c)
    }

    /// Checks kind-specific parameters.
    pub fn validate(&self) -> Result<()> {
        match self {
            Classifier::Analytic { world, visible_dims } => check_view(world, *visible_dims),
            Classifier::CorruptedAnalytic {
                world,
                temperature,
                visible_dims,
            } => {
                if !(*temperature > 0.0 && temperature.is_finite()) {
                    return Err(Error::Config(format!("temperature {temperature} must be > 0")));
                }
                check_view(world, *visible_dims)
            }
            Classifier::SpecialistAnalytic {
                world,
                subgroup,
                eps_good,
                eps_bad,
                ..
            } => {
                let l = world.num_classes() as f64;
                if subgroup.num_classes() != world.num_classes() {
                    return Err(Error::Config("subgroup and world disagree on classes".into()));
                }
                if !(0.0..=1.0 - 1.0 / l).contains(eps_good) {
                    return Err(Error::Config(format!("eps_good {eps_good} out of range")));
                }
                if !(0.0..=1.0 - 1.0 / l).contains(eps_bad) {
                    return Err(Error::Config(format!("eps_bad {eps_bad} out of range")));
                }
                Ok(())
            }
            Classifier::TrainedMlp {
                model,
                input_dim,
                visible_dims,
                ..
            } => {
                let m = visible_dims.unwrap_or(*input_dim);
                if m == 0 || m > *input_dim || model.input_dim() != m {
                    return Err(Error::Shape(format!(
                        "network input {} does not match visible dims {m} of {input_dim}",
                        model.input_dim()
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Classifier::Analytic { world, .. }
            | Classifier::CorruptedAnalytic { world, .. }
            | Classifier::SpecialistAnalytic { world, .. } => world.num_classes(),
            Classifier::TrainedMlp { model, .. } => model.output_dim(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Classifier::Analytic { world, .. }
            | Classifier::CorruptedAnalytic { world, .. }
            | Classifier::SpecialistAnalytic { world, .. } => world.dim(),
            Classifier::TrainedMlp { input_dim, .. } => *input_dim,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Classifier::Analytic { .. } => "analytic",
            Classifier::CorruptedAnalytic { .. } => "corrupted-analytic",
            Classifier::SpecialistAnalytic { .. } => "specialist-analytic",
            Classifier::TrainedMlp { .. } => "trained-mlp",
        }
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<ProbVector> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "instance has dimension {}, classifier expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        match self {
            Classifier::Analytic { world, visible_dims } => world.posterior_view(x, *visible_dims),
            Classifier::CorruptedAnalytic {
                world,
                temperature,
                visible_dims,
            } => {
                let p = world.posterior_view(x, *visible_dims)?;
                if *temperature == 1.0 {
                    return Ok(p);
                }
                // tempered in log space so large temperatures do not underflow to all zeros
                let logits: Vec<f64> = p
                    .as_slice()
                    .iter()
                    .map(|v| if *v > 0.0 { temperature * v.ln() } else { f64::NEG_INFINITY })
                    .collect();
                ProbVector::from_log_weights(&logits)
            }
            Classifier::SpecialistAnalytic {
                world,
                subgroup,
                eps_good,
                eps_bad,
                salt,
            } => {
                let l = world.num_classes();
                let bayes = world.posterior(x)?.argmax();
                let (peak, mass) = if subgroup.contains(bayes) {
                    (bayes, 1.0 - eps_good)
                } else {
                    (hash_class(x, *salt, l), 1.0 / l as f64 + eps_bad)
                };
                let rest = (1.0 - mass) / (l - 1) as f64;
                let mut v = vec![rest; l];
                v[peak] = mass;
                ProbVector::normalize(&v)
            }
            Classifier::TrainedMlp {
                model, visible_dims, ..
            } => {
                let m = visible_dims.unwrap_or(x.len());
                ProbVector::from_log_weights(&model.forward(&x[..m])?)
            }
        }
    }

    /// Predicted class: argmax of [`Classifier::predict_proba`].
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(self.predict_proba(x)?.argmax())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("classifier serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Classifier =
            serde_json::from_str(&text).map_err(|e| Error::json(&path.display().to_string(), &e))?;
        c.validate()?;
        Ok(c)
    }
}

fn check_view(world: &SyntheticWorld, visible_dims: Option<usize>) -> Result<()> {
    match visible_dims {
        None => Ok(()),
        Some(_) if world.is_discrete() => Err(Error::Config(
            "visible_dims applies only to gaussian-mixture worlds".into(),
        )),
        Some(m) if m == 0 || m > world.dim() => Err(Error::Config(format!(
            "visible_dims {m} outside 1..={}",
            world.dim()
        ))),
        Some(_) => Ok(()),
    }
}

fn hash_class(x: &[f64], salt: u64, num_classes: usize) -> usize {
    let mut h = splitmix64(salt);
    for v in x {
        h = splitmix64(h ^ v.to_bits());
    }
    (h % num_classes as u64) as usize
}

pub fn predict_proba(clf: &Classifier, x: &[f64]) -> Result<ProbVector> {
    clf.predict_proba(x)
}

pub fn predict(clf: &Classifier, x: &[f64]) -> Result<usize> {
    clf.predict(x)
}

/// Hidden layer widths and an optional input restriction for a trained
/// classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierArchitecture {
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub visible_dims: Option<usize>,
}

/// Fits a softmax classifier by cross-entropy with Adam.
pub fn train_classifier(
    ds: &Dataset,
    arch: &ClassifierArchitecture,
    hp: &TrainingHyperparams,
    seed: RngSeed,
) -> Result<Classifier> {
    let input_dim = ds.dim();
    let m = arch.visible_dims.unwrap_or(input_dim);
    if m == 0 || m > input_dim {
        return Err(Error::Config(format!("visible_dims {m} outside 1..={input_dim}")));
    }
    let mut sizes = vec![m];
    sizes.extend(&arch.hidden);
    sizes.push(ds.num_classes());
    let mut model = MlpModel::init(&sizes, seed.derive_named("init"))?;
    let examples = ds.examples();
    fit(&mut model, ds.len(), hp, seed.derive_named("shuffle"), |model, i, scale, grads| {
        let e = &examples[i];
        let trace = model.forward_trace(&e.x[..m])?;
        let p = ProbVector::from_log_weights(trace.output())
            .map_err(|_| Error::TrainingDivergence("non-finite logits".into()))?;
        let loss = -p.get(e.y).max(f64::MIN_POSITIVE).ln();
        let mut upstream: Vec<f64> = p.as_slice().iter().map(|v| v * scale).collect();
        upstream[e.y] -= scale;
        model.backward_into(&trace, &upstream, grads)?;
        Ok(loss)
    }, |_| Ok(()))?;
    let mut clf = Classifier::TrainedMlp {
        model,
        input_dim,
        visible_dims: arch.visible_dims,
        train_accuracy: 0.0,
    };
    let correct = examples
        .iter()
        .map(|e| clf.predict(&e.x).map(|p| (p == e.y) as usize))
        .sum::<Result<usize>>()?;
    if let Classifier::TrainedMlp { train_accuracy, .. } = &mut clf {
        *train_accuracy = correct as f64 / ds.len() as f64;
    }
    Ok(clf)
}
