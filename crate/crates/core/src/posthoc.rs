//! Learned deferral rules that read only the first model's probabilities.
//!
//! A post-hoc model `g` is a small MLP over a fixed feature vector of
//! `p1`: `[entropy; top-10 probabilities, descending, zero-padded; one-hot
//! of the argmax]`, `L + 11` entries in all. It is fit to one of three
//! targets computed with both models on a held-out set:
//!
//! | kind        | target                     | loss     |
//! |-------------|----------------------------|----------|
//! | `diff-01`   | `1[y = h2] - 1[y = h1]`    | squared  |
//! | `diff-prob` | `p2_y - p1_y`              | absolute |
//! | `maxprob`   | `max p2`                   | squared  |
//!
//! At inference the difference kinds score `g(v(p1))` and `maxprob` scores
//! `g(v(p1)) - max p1`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::codec::EncodedMlp;
use crate::models::train::{fit, TrainingHyperparams};
use crate::models::{MlpModel, ProbModel};
use crate::par;
use crate::prob::ProbVector;
use crate::rng::RngSeed;

pub const FORMAT_VERSION: u32 = 1;
pub const TOP_K: usize = 10;
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 16];

pub fn feature_dim(num_classes: usize) -> usize {
    num_classes + TOP_K + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TargetKind {
    #[serde(rename = "diff-01")]
    Diff01,
    #[serde(rename = "diff-prob")]
    DiffProb,
    #[serde(rename = "maxprob")]
    MaxProb,
}

impl TargetKind {
    pub fn name(self) -> &'static str {
        match self {
            TargetKind::Diff01 => "diff-01",
            TargetKind::DiffProb => "diff-prob",
            TargetKind::MaxProb => "maxprob",
        }
    }

    pub fn loss(self) -> Loss {
        match self {
            TargetKind::Diff01 | TargetKind::MaxProb => Loss::Squared,
            TargetKind::DiffProb => Loss::Absolute,
        }
    }

    pub fn target(self, p1: &ProbVector, p2: &ProbVector, y: usize) -> f64 {
        match self {
            TargetKind::Diff01 => {
                (p2.argmax() == y) as i32 as f64 - (p1.argmax() == y) as i32 as f64
            }
            TargetKind::DiffProb => p2.get(y) - p1.get(y),
            TargetKind::MaxProb => p2.max_prob(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    Squared,
    Absolute,
}

impl Loss {
    /// Loss value and its derivative in the prediction. The absolute loss
    /// has derivative 0 at 0.
    pub fn eval(self, prediction: f64, target: f64) -> (f64, f64) {
        let r = prediction - target;
        match self {
            Loss::Squared => (r * r, 2.0 * r),
            Loss::Absolute => {
                let d = if r > 0.0 {
                    1.0
                } else if r < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                (r.abs(), d)
            }
        }
    }
}

/// Feature vector of length `L + 11`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosthocFeatures(Vec<f64>);

impl PosthocFeatures {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

pub fn extract_features(p1: &ProbVector) -> PosthocFeatures {
    let l = p1.num_classes();
    let mut v = Vec::with_capacity(feature_dim(l));
    v.push(p1.entropy());
    let mut sorted = p1.as_slice().to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted.resize(TOP_K.max(l), 0.0);
    v.extend_from_slice(&sorted[..TOP_K]);
    let top = p1.argmax();
    v.extend((0..l).map(|k| (k == top) as i32 as f64));
    PosthocFeatures(v)
}

/// Features and targets for one target kind, in dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct PosthocTrainingSet {
    pub kind: TargetKind,
    pub num_classes: usize,
    pub features: Vec<PosthocFeatures>,
    pub targets: Vec<f64>,
}

impl PosthocTrainingSet {
    pub fn new(
        kind: TargetKind,
        num_classes: usize,
        features: Vec<PosthocFeatures>,
        targets: Vec<f64>,
    ) -> Result<Self> {
        if features.is_empty() || features.len() != targets.len() {
            return Err(Error::Shape(format!(
                "{} feature vectors for {} targets",
                features.len(),
                targets.len()
            )));
        }
        let d = feature_dim(num_classes);
        if features.iter().any(|f| f.0.len() != d) {
            return Err(Error::Shape(format!("features must have length {d}")));
        }
        if targets.iter().any(|t| !t.is_finite()) {
            return Err(Error::Config("targets must be finite".into()));
        }
        Ok(PosthocTrainingSet {
            kind,
            num_classes,
            features,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&PosthocFeatures, f64)> + '_ {
        self.features.iter().zip(self.targets.iter().copied())
    }
}

/// Computes one (features, target) pair per example. This is the only
/// place the second model's outputs are read.
pub fn make_targets<M1: ProbModel, M2: ProbModel>(
    ds: &Dataset,
    model1: &M1,
    model2: &M2,
    kind: TargetKind,
) -> Result<PosthocTrainingSet> {
    let l = ds.num_classes();
    if model1.num_classes() != l || model2.num_classes() != l {
        return Err(Error::Shape(format!(
            "models have {} and {} classes, dataset has {l}",
            model1.num_classes(),
            model2.num_classes()
        )));
    }
    let examples = ds.examples();
    let pairs = par::try_map_indexed(examples.len(), |i| {
        let e = &examples[i];
        let p1 = model1.predict_proba(&e.x)?;
        let p2 = model2.predict_proba(&e.x)?;
        Ok::<_, Error>((extract_features(&p1), kind.target(&p1, &p2, e.y)))
    })?;
    let (features, targets) = pairs.into_iter().unzip();
    PosthocTrainingSet::new(kind, l, features, targets)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosthocModel {
    mlp: MlpModel,
    kind: TargetKind,
    num_classes: usize,
    final_train_loss: Option<f64>,
}

impl PosthocModel {
    pub fn new(mlp: MlpModel, kind: TargetKind, num_classes: usize) -> Result<Self> {
        if mlp.input_dim() != feature_dim(num_classes) || mlp.output_dim() != 1 {
            return Err(Error::Shape(format!(
                "post-hoc network must map {} features to 1 output, has {:?}",
                feature_dim(num_classes),
                mlp.layer_sizes()
            )));
        }
        Ok(PosthocModel {
            mlp,
            kind,
            num_classes,
            final_train_loss: None,
        })
    }

    pub fn mlp(&self) -> &MlpModel {
        &self.mlp
    }

    pub fn kind(&self) -> TargetKind {
        self.kind
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Mean training loss after the last epoch, if trained here.
    pub fn final_train_loss(&self) -> Option<f64> {
        self.final_train_loss
    }

    /// Raw network output `g(v(p1))`.
    pub fn predict(&self, p1: &ProbVector) -> Result<f64> {
        if p1.num_classes() != self.num_classes {
            return Err(Error::Shape(format!(
                "post-hoc model for {} classes given a {}-class vector",
                self.num_classes,
                p1.num_classes()
            )));
        }
        Ok(self.mlp.forward(extract_features(p1).as_slice())?[0])
    }

    pub fn score(&self, p1: &ProbVector) -> Result<f64> {
        let g = self.predict(p1)?;
        Ok(match self.kind {
            TargetKind::MaxProb => g - p1.max_prob(),
            TargetKind::Diff01 | TargetKind::DiffProb => g,
        })
    }

    /// Mean loss of the model's kind over a set.
    pub fn mean_loss(&self, set: &PosthocTrainingSet) -> Result<f64> {
        mean_loss(&self.mlp, set)
    }
}

fn mean_loss(mlp: &MlpModel, set: &PosthocTrainingSet) -> Result<f64> {
    let loss = set.kind.loss();
    let values = par::try_map_indexed(set.len(), |i| {
        let g = mlp.forward(set.features[i].as_slice())?[0];
        Ok::<_, Error>(loss.eval(g, set.targets[i]).0)
    })?;
    Ok(par::pairwise_mean(&values))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub initial_train_loss: f64,
    pub initial_heldout_loss: Option<f64>,
    /// Mean loss at the end of each epoch, measured after the epoch.
    pub train_loss: Vec<f64>,
    pub heldout_loss: Vec<f64>,
}

/// Trains with the default `[64, 16]` hidden layers.
pub fn train_posthoc(
    set: &PosthocTrainingSet,
    hp: &TrainingHyperparams,
    seed: RngSeed,
) -> Result<PosthocModel> {
    Ok(train_posthoc_with(set, None, &DEFAULT_HIDDEN, hp, seed)?.0)
}

/// Full trainer: optional held-out set whose loss is tracked per epoch
/// alongside the training loss, and configurable hidden widths.
pub fn train_posthoc_with(
    set: &PosthocTrainingSet,
    heldout: Option<&PosthocTrainingSet>,
    hidden: &[usize],
    hp: &TrainingHyperparams,
    seed: RngSeed,
) -> Result<(PosthocModel, TrainingReport)> {
    if let Some(h) = heldout {
        if h.kind != set.kind || h.num_classes != set.num_classes {
            return Err(Error::Shape("held-out set does not match the training set".into()));
        }
    }
    let mut sizes = vec![feature_dim(set.num_classes)];
    sizes.extend_from_slice(hidden);
    sizes.push(1);
    let mut mlp = MlpModel::init(&sizes, seed.derive_named("init"))?;
    let loss = set.kind.loss();
    let initial_train_loss = mean_loss(&mlp, set)?;
    let initial_heldout_loss = heldout.map(|h| mean_loss(&mlp, h)).transpose()?;
    let mut train_loss = Vec::with_capacity(hp.epochs);
    let mut heldout_loss = Vec::new();
    fit(
        &mut mlp,
        set.len(),
        hp,
        seed.derive_named("shuffle"),
        |model, i, scale, grads| {
            let trace = model.forward_trace(set.features[i].as_slice())?;
            let (l, d) = loss.eval(trace.output()[0], set.targets[i]);
            model.backward_into(&trace, &[d * scale], grads)?;
            Ok(l)
        },
        |model| {
            let t = mean_loss(model, set)?;
            if !t.is_finite() {
                return Err(Error::TrainingDivergence("post-hoc loss became non-finite".into()));
            }
            train_loss.push(t);
            if let Some(h) = heldout {
                heldout_loss.push(mean_loss(model, h)?);
            }
            Ok(())
        },
    )?;
    let mut model = PosthocModel::new(mlp, set.kind, set.num_classes)?;
    model.final_train_loss = Some(train_loss.last().copied().unwrap_or(initial_train_loss));
    Ok((
        model,
        TrainingReport {
            initial_train_loss,
            initial_heldout_loss,
            train_loss,
            heldout_loss,
        },
    ))
}

/// Deterministic disjoint split; `fraction` of the examples go to the
/// held-out part. Both parts keep dataset order.
pub fn validation_split(ds: &Dataset, fraction: f64, seed: RngSeed) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction {fraction} must be in (0, 1)")));
    }
    let n = ds.len();
    let k = (fraction * n as f64).round() as usize;
    if k == 0 || k == n {
        return Err(Error::Config(format!(
            "split fraction {fraction} of {n} examples leaves an empty part"
        )));
    }
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed.rng());
    let mut heldout = order[..k].to_vec();
    let mut train = order[k..].to_vec();
    heldout.sort_unstable();
    train.sort_unstable();
    Ok((ds.select(&train)?, ds.select(&heldout)?))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    format_version: u32,
    target_kind: TargetKind,
    num_classes: usize,
    layer_sizes: Vec<usize>,
    weights: Vec<String>,
    biases: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    final_train_loss: Option<f64>,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

pub fn save_model(model: &PosthocModel, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_json(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<PosthocModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_json(&text, &path.display().to_string())
}

pub fn model_to_json(model: &PosthocModel) -> String {
    let enc = EncodedMlp::from(&model.mlp);
    let env = Envelope {
        format_version: FORMAT_VERSION,
        target_kind: model.kind,
        num_classes: model.num_classes,
        layer_sizes: enc.layer_sizes,
        weights: enc.weights,
        biases: enc.biases,
        final_train_loss: model.final_train_loss,
    };
    serde_json::to_string_pretty(&env).expect("envelope serializes")
}

pub fn model_from_json(text: &str, source_name: &str) -> Result<PosthocModel> {
    let probe: VersionProbe = serde_json::from_str(text).map_err(|e| Error::json(source_name, &e))?;
    if probe.format_version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: probe.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let env: Envelope = serde_json::from_str(text).map_err(|e| Error::json(source_name, &e))?;
    let mlp = MlpModel::try_from(EncodedMlp {
        layer_sizes: env.layer_sizes,
        weights: env.weights,
        biases: env.biases,
    })?;
    let mut model = PosthocModel::new(mlp, env.target_kind, env.num_classes)?;
    model.final_train_loss = env.final_train_loss;
    Ok(model)
}
