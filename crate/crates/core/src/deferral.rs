//! Deferral rules, the K-model cascade executor and the optimal selector.
//!
//! Every rule produces a real score where higher means stronger evidence
//! for passing the input on; the rule defers at threshold `c` iff
//! `score > c`. Ties at the threshold keep.

use std::cell::OnceCell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ProbModel;
use crate::posthoc::PosthocModel;
use crate::prob::ProbVector;
use crate::rng::RngSeed;
use crate::worlds::SyntheticWorld;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleKind {
    Confidence,
    Entropy,
    Random,
    OracleOnehot,
    OracleProb,
    OracleRelative,
    Bayes,
    Posthoc,
}

impl RuleKind {
    pub fn name(self) -> &'static str {
        match self {
            RuleKind::Confidence => "confidence",
            RuleKind::Entropy => "entropy",
            RuleKind::Random => "random",
            RuleKind::OracleOnehot => "oracle-onehot",
            RuleKind::OracleProb => "oracle-prob",
            RuleKind::OracleRelative => "oracle-relative",
            RuleKind::Bayes => "bayes",
            RuleKind::Posthoc => "posthoc",
        }
    }
}

/// Inputs a rule may read beyond the current model's output and the
/// example index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RuleNeeds {
    pub next_model: bool,
    pub label: bool,
    pub posterior: bool,
}

impl RuleNeeds {
    /// Usable for adaptive computation: nothing beyond the current stage.
    pub fn deployable(self) -> bool {
        !(self.next_model || self.label || self.posterior)
    }
}

/// What a rule can read about one example at one stage. `current` is the
/// output of the model deciding whether to pass on and `next` that of the
/// model it would pass to.
pub trait ScoreSource {
    fn index(&self) -> u64;
    fn instance(&self) -> &[f64];
    fn current(&self) -> Result<&ProbVector>;
    fn next(&self) -> Result<&ProbVector>;
    fn label(&self) -> Result<usize>;
}

#[derive(Debug, Clone, PartialEq)]
pub enum DeferralRule {
    Confidence,
    Entropy,
    /// Bernoulli deferral: the score is a uniform draw keyed by example
    /// index, so threshold `c` defers a `1 - c` fraction.
    Random { seed: RngSeed },
    OracleOnehot,
    OracleProb,
    OracleRelative,
    Bayes { world: SyntheticWorld },
    Posthoc(PosthocModel),
}

impl DeferralRule {
    pub fn kind(&self) -> RuleKind {
        match self {
            DeferralRule::Confidence => RuleKind::Confidence,
            DeferralRule::Entropy => RuleKind::Entropy,
            DeferralRule::Random { .. } => RuleKind::Random,
            DeferralRule::OracleOnehot => RuleKind::OracleOnehot,
            DeferralRule::OracleProb => RuleKind::OracleProb,
            DeferralRule::OracleRelative => RuleKind::OracleRelative,
            DeferralRule::Bayes { .. } => RuleKind::Bayes,
            DeferralRule::Posthoc(_) => RuleKind::Posthoc,
        }
    }

    pub fn needs(&self) -> RuleNeeds {
        match self {
            DeferralRule::Confidence
            | DeferralRule::Entropy
            | DeferralRule::Random { .. }
            | DeferralRule::Posthoc(_) => RuleNeeds::default(),
            DeferralRule::OracleOnehot | DeferralRule::OracleProb => RuleNeeds {
                next_model: true,
                label: true,
                posterior: false,
            },
            DeferralRule::OracleRelative => RuleNeeds {
                next_model: true,
                ..Default::default()
            },
            DeferralRule::Bayes { .. } => RuleNeeds {
                next_model: true,
                posterior: true,
                label: false,
            },
        }
    }

    pub fn score(&self, src: &dyn ScoreSource) -> Result<f64> {
        let s = match self {
            DeferralRule::Confidence => score_confidence(src.current()?),
            DeferralRule::Entropy => score_entropy(src.current()?),
            DeferralRule::Random { seed } => seed.unit_at(src.index()),
            DeferralRule::OracleOnehot => {
                let y = src.label()?;
                score_onehot_oracle(y, src.current()?.argmax(), src.next()?.argmax())
            }
            DeferralRule::OracleProb => {
                let y = src.label()?;
                score_prob_oracle(src.current()?, src.next()?, y)
            }
            DeferralRule::OracleRelative => score_relative_confidence(src.current()?, src.next()?),
            DeferralRule::Bayes { world } => {
                let eta = world.posterior(src.instance())?;
                score_bayes(&eta, src.current()?.argmax(), src.next()?.argmax())
            }
            DeferralRule::Posthoc(g) => score_posthoc(g, src.current()?)?,
        };
        if !s.is_finite() {
            return Err(Error::InvalidDistribution(format!(
                "{} rule produced a non-finite score",
                self.kind().name()
            )));
        }
        Ok(s)
    }
}

/// `score > c`.
pub fn decide(score: f64, threshold: f64) -> bool {
    score > threshold
}

/// Negated top probability: deferring at `-c` is `max p1 < c`.
pub fn score_confidence(p1: &ProbVector) -> f64 {
    -p1.max_prob()
}

pub fn score_entropy(p1: &ProbVector) -> f64 {
    p1.entropy()
}

/// `eta[h2] - eta[h1]`.
pub fn score_bayes(eta: &ProbVector, h1: usize, h2: usize) -> f64 {
    eta.get(h2) - eta.get(h1)
}

pub fn score_onehot_oracle(y: usize, h1: usize, h2: usize) -> f64 {
    (y == h2) as i32 as f64 - (y == h1) as i32 as f64
}

pub fn score_prob_oracle(p1: &ProbVector, p2: &ProbVector, y: usize) -> f64 {
    p2.get(y) - p1.get(y)
}

pub fn score_relative_confidence(p1: &ProbVector, p2: &ProbVector) -> f64 {
    p2.max_prob() - p1.max_prob()
}

/// `g(v(p1))` for the difference targets, `g(v(p1)) - max p1` for maxprob.
pub fn score_posthoc(g: &PosthocModel, p1: &ProbVector) -> Result<f64> {
    g.score(p1)
}

/// Threshold that makes confidence deferral mean `max p1 < c`.
pub fn confidence_threshold(c: f64) -> f64 {
    -c
}

/// `argmin_k error_probs[k] + costs[k]`, lowest index on ties.
pub fn optimal_selector(error_probs: &[f64], costs: &[f64]) -> Result<usize> {
    if error_probs.len() != costs.len() || error_probs.is_empty() {
        return Err(Error::Shape(format!(
            "{} error probabilities for {} costs",
            error_probs.len(),
            costs.len()
        )));
    }
    let mut best = 0;
    for k in 1..error_probs.len() {
        if error_probs[k] + costs[k] < error_probs[best] + costs[best] {
            best = k;
        }
    }
    Ok(best)
}

/// Whether rules may read outputs of models not yet reached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CascadeMode {
    #[default]
    Deployment,
    Analysis,
}

pub struct CascadeConfig<M> {
    classifiers: Vec<M>,
    rules: Vec<DeferralRule>,
    thresholds: Vec<f64>,
    costs: Vec<f64>,
    mode: CascadeMode,
}

impl<M: ProbModel> CascadeConfig<M> {
    pub fn new(
        classifiers: Vec<M>,
        rules: Vec<DeferralRule>,
        thresholds: Vec<f64>,
        costs: Vec<f64>,
        mode: CascadeMode,
    ) -> Result<Self> {
        let k = classifiers.len();
        if k < 2 {
            return Err(Error::Config("a cascade needs at least two classifiers".into()));
        }
        if rules.len() != k - 1 || thresholds.len() != k - 1 {
            return Err(Error::Config(format!(
                "{k} classifiers need {} rules and thresholds, got {} and {}",
                k - 1,
                rules.len(),
                thresholds.len()
            )));
        }
        check_costs(&costs, k)?;
        let l = classifiers[0].num_classes();
        let d = classifiers[0].input_dim();
        if classifiers.iter().any(|c| c.num_classes() != l || c.input_dim() != d) {
            return Err(Error::Config("cascade classifiers disagree on classes or input dimension".into()));
        }
        for (i, rule) in rules.iter().enumerate() {
            if mode == CascadeMode::Deployment && !rule.needs().deployable() {
                return Err(Error::Config(format!(
                    "stage {} rule {} reads later-model outputs or labels; only allowed in analysis mode",
                    i + 1,
                    rule.kind().name()
                )));
            }
            if let DeferralRule::Posthoc(g) = rule {
                if g.num_classes() != l {
                    return Err(Error::Shape(format!(
                        "post-hoc model for {} classes in a {l}-class cascade",
                        g.num_classes()
                    )));
                }
            }
            if let DeferralRule::Bayes { world } = rule {
                if world.num_classes() != l || world.dim() != d {
                    return Err(Error::Config("bayes rule world does not match the cascade".into()));
                }
            }
        }
        if thresholds.iter().any(|t| t.is_nan()) {
            return Err(Error::Config("thresholds must not be NaN".into()));
        }
        Ok(CascadeConfig {
            classifiers,
            rules,
            thresholds,
            costs,
            mode,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.classifiers.len()
    }

    pub fn classifiers(&self) -> &[M] {
        &self.classifiers
    }

    pub fn rules(&self) -> &[DeferralRule] {
        &self.rules
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    pub fn mode(&self) -> CascadeMode {
        self.mode
    }

    pub fn with_thresholds(mut self, thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.len() != self.thresholds.len() {
            return Err(Error::Config("threshold count changed".into()));
        }
        self.thresholds = thresholds;
        Ok(self)
    }
}

pub(crate) fn check_costs(costs: &[f64], k: usize) -> Result<()> {
    if costs.len() != k {
        return Err(Error::Config(format!("{k} models need {k} costs, got {}", costs.len())));
    }
    if costs[0] != 0.0 {
        return Err(Error::Config("the first model's cost must be 0".into()));
    }
    if costs.iter().any(|c| !c.is_finite()) || costs.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Config("costs must be finite and nondecreasing".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CascadeOutcome {
    pub prediction: usize,
    /// 0-based index of the model whose prediction was used.
    pub exit: usize,
    /// Which models were executed for this input.
    pub invoked: Vec<bool>,
}

struct StageSource<'a, M> {
    models: &'a [M],
    outputs: &'a [OnceCell<ProbVector>],
    x: &'a [f64],
    label: Option<usize>,
    index: u64,
    stage: usize,
}

fn output<'a, M: ProbModel>(models: &[M], outputs: &'a [OnceCell<ProbVector>], x: &[f64], k: usize) -> Result<&'a ProbVector> {
    if let Some(p) = outputs[k].get() {
        return Ok(p);
    }
    let p = models[k].predict_proba(x)?;
    Ok(outputs[k].get_or_init(|| p))
}

impl<M: ProbModel> ScoreSource for StageSource<'_, M> {
    fn index(&self) -> u64 {
        self.index
    }

    fn instance(&self) -> &[f64] {
        self.x
    }

    fn current(&self) -> Result<&ProbVector> {
        output(self.models, self.outputs, self.x, self.stage)
    }

    fn next(&self) -> Result<&ProbVector> {
        output(self.models, self.outputs, self.x, self.stage + 1)
    }

    fn label(&self) -> Result<usize> {
        self.label
            .ok_or_else(|| Error::Config("rule needs the true label but none was given".into()))
    }
}

/// Runs the cascade on one input.
///
/// At stage `k` the stage rule is scored; the cascade stops with model
/// `k`'s prediction unless the score exceeds threshold `k`. The last model
/// always predicts. `label` is only consulted by label-dependent oracles in
/// analysis mode; `index` keys the random rule.
pub fn run_cascade<M: ProbModel>(
    cfg: &CascadeConfig<M>,
    x: &[f64],
    label: Option<usize>,
    index: u64,
) -> Result<CascadeOutcome> {
    let k = cfg.classifiers.len();
    let outputs: Vec<OnceCell<ProbVector>> = (0..k).map(|_| OnceCell::new()).collect();
    let mut exit = k - 1;
    for stage in 0..k - 1 {
        let src = StageSource {
            models: &cfg.classifiers,
            outputs: &outputs,
            x,
            label,
            index,
            stage,
        };
        src.current()?;
        let s = cfg.rules[stage].score(&src)?;
        if !decide(s, cfg.thresholds[stage]) {
            exit = stage;
            break;
        }
    }
    let prediction = output(&cfg.classifiers, &outputs, x, exit)?.argmax();
    Ok(CascadeOutcome {
        prediction,
        exit,
        invoked: outputs.iter().map(|o| o.get().is_some()).collect(),
    })
}
