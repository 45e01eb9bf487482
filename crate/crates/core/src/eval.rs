//! Cascade risk, excess risk, deferral curves, calibration buckets and the
//! brute-force oracles used to verify optimality results exactly.
//!
//! Dataset-based quantities are empirical means; the `*_exact` and
//! support-based functions sum over a discrete world's support with its
//! marginal masses, so they carry no Monte-Carlo noise.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{csv_io, csv_parse, Dataset};
use crate::deferral::{decide, optimal_selector, DeferralRule, ScoreSource};
use crate::error::{Error, Result};
use crate::models::ProbModel;
use crate::par;
use crate::prob::ProbVector;
use crate::worlds::SyntheticWorld;

pub const MAX_ENUMERATION_SUPPORT: usize = 12;
pub const MAX_SELECTOR_SUPPORT: usize = 8;
pub const MAX_SELECTOR_MODELS: usize = 3;
pub const CALIBRATION_BUCKETS: usize = 10;

/// Every model's output on every example of a dataset, computed once.
pub struct CascadeTable<'a> {
    ds: &'a Dataset,
    outputs: Vec<Vec<ProbVector>>,
}

impl<'a> CascadeTable<'a> {
    pub fn build(ds: &'a Dataset, models: &[&dyn ProbModel]) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::Config("no models given".into()));
        }
        for m in models {
            if m.num_classes() != ds.num_classes() || m.input_dim() != ds.dim() {
                return Err(Error::Shape(format!(
                    "model ({} classes, dim {}) does not fit dataset ({} classes, dim {})",
                    m.num_classes(),
                    m.input_dim(),
                    ds.num_classes(),
                    ds.dim()
                )));
            }
        }
        let examples = ds.examples();
        let outputs = models
            .iter()
            .map(|m| par::try_map_indexed(examples.len(), |i| m.predict_proba(&examples[i].x)))
            .collect::<Result<Vec<_>>>()?;
        Ok(CascadeTable { ds, outputs })
    }

    pub fn dataset(&self) -> &Dataset {
        self.ds
    }

    pub fn len(&self) -> usize {
        self.ds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ds.is_empty()
    }

    pub fn num_models(&self) -> usize {
        self.outputs.len()
    }

    pub fn outputs(&self, model: usize) -> &[ProbVector] {
        &self.outputs[model]
    }

    pub fn correct(&self, model: usize) -> Vec<bool> {
        self.outputs[model]
            .iter()
            .zip(self.ds.examples())
            .map(|(p, e)| p.argmax() == e.y)
            .collect()
    }

    pub fn accuracy(&self, model: usize) -> f64 {
        let c = self.correct(model);
        c.iter().filter(|b| **b).count() as f64 / c.len() as f64
    }

    /// Scores of `rule` applied at `stage` (between model `stage` and
    /// `stage + 1`) for every example.
    pub fn scores(&self, stage: usize, rule: &DeferralRule) -> Result<Vec<f64>> {
        if stage + 1 >= self.outputs.len() && rule.needs().next_model {
            return Err(Error::Config(format!("stage {stage} has no next model")));
        }
        par::try_map_indexed(self.len(), |i| {
            rule.score(&TableSource {
                table: self,
                stage,
                index: i,
            })
        })
    }
}

struct TableSource<'t, 'a> {
    table: &'t CascadeTable<'a>,
    stage: usize,
    index: usize,
}

impl ScoreSource for TableSource<'_, '_> {
    fn index(&self) -> u64 {
        self.index as u64
    }

    fn instance(&self) -> &[f64] {
        &self.table.ds.examples()[self.index].x
    }

    fn current(&self) -> Result<&ProbVector> {
        Ok(&self.table.outputs[self.stage][self.index])
    }

    fn next(&self) -> Result<&ProbVector> {
        self.table
            .outputs
            .get(self.stage + 1)
            .map(|o| &o[self.index])
            .ok_or_else(|| Error::Config("no next model".into()))
    }

    fn label(&self) -> Result<usize> {
        Ok(self.table.ds.examples()[self.index].y)
    }
}

/// Exact per-support-point quantities of a discrete world and its models.
pub struct SupportTable<'w> {
    world: &'w SyntheticWorld,
    masses: Vec<f64>,
    eta: Vec<ProbVector>,
    outputs: Vec<Vec<ProbVector>>,
}

impl<'w> SupportTable<'w> {
    pub fn build(world: &'w SyntheticWorld, models: &[&dyn ProbModel]) -> Result<Self> {
        let support = world
            .support()
            .ok_or_else(|| Error::Config("exact evaluation needs a discrete world".into()))?;
        for m in models {
            if m.num_classes() != world.num_classes() {
                return Err(Error::Shape("model and world disagree on classes".into()));
            }
        }
        let eta = support
            .iter()
            .map(|p| world.posterior(&p.x))
            .collect::<Result<Vec<_>>>()?;
        let outputs = models
            .iter()
            .map(|m| support.iter().map(|p| m.predict_proba(&p.x)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(SupportTable {
            world,
            masses: support.iter().map(|p| p.mass).collect(),
            eta,
            outputs,
        })
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn eta(&self, point: usize) -> &ProbVector {
        &self.eta[point]
    }

    /// `Pr(y = h_model(x) | x)` at a support point.
    pub fn correct_prob(&self, model: usize, point: usize) -> f64 {
        self.eta[point].get(self.outputs[model][point].argmax())
    }

    pub fn prediction(&self, model: usize, point: usize) -> usize {
        self.outputs[model][point].argmax()
    }

    pub fn scores(&self, stage: usize, rule: &DeferralRule) -> Result<Vec<f64>> {
        (0..self.len())
            .map(|i| {
                rule.score(&SupportSource {
                    table: self,
                    stage,
                    index: i,
                })
            })
            .collect()
    }
}

struct SupportSource<'t, 'w> {
    table: &'t SupportTable<'w>,
    stage: usize,
    index: usize,
}

impl ScoreSource for SupportSource<'_, '_> {
    fn index(&self) -> u64 {
        self.index as u64
    }

    fn instance(&self) -> &[f64] {
        &self.table.world.support().expect("discrete")[self.index].x
    }

    fn current(&self) -> Result<&ProbVector> {
        Ok(&self.table.outputs[self.stage][self.index])
    }

    fn next(&self) -> Result<&ProbVector> {
        self.table
            .outputs
            .get(self.stage + 1)
            .map(|o| &o[self.index])
            .ok_or_else(|| Error::Config("no next model".into()))
    }

    fn label(&self) -> Result<usize> {
        Err(Error::Config(
            "label-dependent rules have no population value on a support point".into(),
        ))
    }
}

fn check_defer_set(table: &SupportTable, defer: &[bool]) -> Result<()> {
    if defer.len() != table.len() {
        return Err(Error::Shape(format!(
            "defer set has {} entries for {} support points",
            defer.len(),
            table.len()
        )));
    }
    Ok(())
}

/// Empirical `mean(1[y != h1] (1 - r) + 1[y != h2] r + cost r)`.
pub fn cascade_risk(
    ds: &Dataset,
    model1: &dyn ProbModel,
    model2: &dyn ProbModel,
    rule: &DeferralRule,
    threshold: f64,
    deferral_cost: f64,
) -> Result<f64> {
    let table = CascadeTable::build(ds, &[model1, model2])?;
    let scores = table.scores(0, rule)?;
    let (c1, c2) = (table.correct(0), table.correct(1));
    let terms: Vec<f64> = (0..ds.len())
        .map(|i| {
            if decide(scores[i], threshold) {
                (!c2[i]) as i32 as f64 + deferral_cost
            } else {
                (!c1[i]) as i32 as f64
            }
        })
        .collect();
    Ok(par::pairwise_mean(&terms))
}

/// Population risk of a defer set on a discrete world:
/// `sum_x Pr(x) [(1 - r) (1 - eta_h1) + r (1 - eta_h2 + cost)]`.
pub fn risk_of_defer_set(table: &SupportTable, defer: &[bool], deferral_cost: f64) -> Result<f64> {
    check_defer_set(table, defer)?;
    Ok((0..table.len())
        .map(|i| {
            let m = table.masses[i];
            if defer[i] {
                m * (1.0 - table.correct_prob(1, i) + deferral_cost)
            } else {
                m * (1.0 - table.correct_prob(0, i))
            }
        })
        .sum())
}

/// Defer set of a rule at a threshold on every support point.
pub fn defer_set(table: &SupportTable, rule: &DeferralRule, threshold: f64) -> Result<Vec<bool>> {
    Ok(table.scores(0, rule)?.into_iter().map(|s| decide(s, threshold)).collect())
}

/// `r*(x) = 1[eta_h2 - eta_h1 > c]` on every support point.
pub fn bayes_defer_set(table: &SupportTable, c: f64) -> Vec<bool> {
    (0..table.len())
        .map(|i| decide(table.correct_prob(1, i) - table.correct_prob(0, i), c))
        .collect()
}

/// Exact population risk of a rule on a discrete world.
pub fn cascade_risk_exact(
    world: &SyntheticWorld,
    model1: &dyn ProbModel,
    model2: &dyn ProbModel,
    rule: &DeferralRule,
    threshold: f64,
    deferral_cost: f64,
) -> Result<f64> {
    let table = SupportTable::build(world, &[model1, model2])?;
    let defer = defer_set(&table, rule, threshold)?;
    risk_of_defer_set(&table, &defer, deferral_cost)
}

/// `sum_x Pr(x) (1[r(x) = 1] - 1[alpha(x) < 0]) alpha(x)` with
/// `alpha = eta_h1 - eta_h2 + c`.
pub fn excess_risk_of_set(table: &SupportTable, defer: &[bool], c: f64) -> Result<f64> {
    check_defer_set(table, defer)?;
    Ok((0..table.len())
        .map(|i| {
            let alpha = table.correct_prob(0, i) - table.correct_prob(1, i) + c;
            let diff = defer[i] as i32 as f64 - (alpha < 0.0) as i32 as f64;
            table.masses[i] * diff * alpha
        })
        .sum())
}

/// Excess risk of a rule over the Bayes-optimal rule at cost `c`.
///
/// Without a dataset the expectation is an exact sum over a discrete
/// world's support. With a dataset it is the empirical mean over its
/// instances, still using the world's exact posterior.
pub fn excess_risk(
    world: &SyntheticWorld,
    ds: Option<&Dataset>,
    model1: &dyn ProbModel,
    model2: &dyn ProbModel,
    rule: &DeferralRule,
    c: f64,
) -> Result<f64> {
    match ds {
        None => {
            let table = SupportTable::build(world, &[model1, model2])?;
            let defer = defer_set(&table, rule, c)?;
            excess_risk_of_set(&table, &defer, c)
        }
        Some(ds) => {
            let table = CascadeTable::build(ds, &[model1, model2])?;
            let scores = table.scores(0, rule)?;
            let terms = par::try_map_indexed(ds.len(), |i| {
                let eta = world.posterior(&ds.examples()[i].x)?;
                let alpha = eta.get(table.outputs[0][i].argmax()) - eta.get(table.outputs[1][i].argmax()) + c;
                let diff = decide(scores[i], c) as i32 as f64 - (alpha < 0.0) as i32 as f64;
                Ok::<_, Error>(diff * alpha)
            })?;
            Ok(par::pairwise_mean(&terms))
        }
    }
}

/// Exhaustive minimizer of the two-model risk over all `2^|support|`
/// defer sets. Ties keep the first set in binary-counter order.
pub fn enumerate_optimal_rule(
    world: &SyntheticWorld,
    model1: &dyn ProbModel,
    model2: &dyn ProbModel,
    c: f64,
) -> Result<(Vec<bool>, f64)> {
    let table = SupportTable::build(world, &[model1, model2])?;
    let n = table.len();
    if n > MAX_ENUMERATION_SUPPORT {
        return Err(Error::SupportTooLarge {
            size: n,
            limit: MAX_ENUMERATION_SUPPORT,
        });
    }
    let mut best = (vec![false; n], f64::INFINITY);
    for mask in 0u32..(1 << n) {
        let set: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
        let r = risk_of_defer_set(&table, &set, c)?;
        if r < best.1 {
            best = (set, r);
        }
    }
    Ok(best)
}

/// `sum_x Pr(x) [1 - eta_{h_s(x)}(x) + cost_{s(x)}]`.
pub fn selector_risk(table: &SupportTable, selector: &[usize], costs: &[f64]) -> Result<f64> {
    if selector.len() != table.len() {
        return Err(Error::Shape("selector length does not match support".into()));
    }
    if costs.len() != table.outputs.len() || selector.iter().any(|&k| k >= costs.len()) {
        return Err(Error::Shape("selector, costs and models disagree".into()));
    }
    Ok((0..table.len())
        .map(|i| {
            let k = selector[i];
            table.masses[i] * (1.0 - table.correct_prob(k, i) + costs[k])
        })
        .sum())
}

/// The pointwise selector `argmin_k Pr(y != h_k(x) | x) + cost_k`.
pub fn pointwise_selector(table: &SupportTable, costs: &[f64]) -> Result<Vec<usize>> {
    (0..table.len())
        .map(|i| {
            let errors: Vec<f64> = (0..table.outputs.len())
                .map(|k| 1.0 - table.correct_prob(k, i))
                .collect();
            optimal_selector(&errors, costs)
        })
        .collect()
}

/// Exhaustive minimizer over all `K^|support|` selectors.
pub fn enumerate_optimal_selector(
    world: &SyntheticWorld,
    models: &[&dyn ProbModel],
    costs: &[f64],
) -> Result<(Vec<usize>, f64)> {
    let k = models.len();
    if !(2..=MAX_SELECTOR_MODELS).contains(&k) {
        return Err(Error::Config(format!(
            "selector enumeration supports 2..={MAX_SELECTOR_MODELS} models, got {k}"
        )));
    }
    let table = SupportTable::build(world, models)?;
    let n = table.len();
    if n > MAX_SELECTOR_SUPPORT {
        return Err(Error::SupportTooLarge {
            size: n,
            limit: MAX_SELECTOR_SUPPORT,
        });
    }
    let total = k.pow(n as u32);
    let mut best = (vec![0; n], f64::INFINITY);
    let mut sel = vec![0usize; n];
    for code in 0..total {
        let mut c = code;
        for s in sel.iter_mut() {
            *s = c % k;
            c /= k;
        }
        let r = selector_risk(&table, &sel, costs)?;
        if r < best.1 {
            best = (sel.clone(), r);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityCheck {
    /// `E[r_A beta]` and `E[r_B beta]` with `beta = eta_h2 - eta_h1`.
    pub expected_gain_a: f64,
    pub expected_gain_b: f64,
    /// Cascade accuracies computed directly from the routing.
    pub accuracy_a: f64,
    pub accuracy_b: f64,
    /// `|A(r) - (P(h1 correct) + E[r beta])|` for each rule.
    pub residual_a: f64,
    pub residual_b: f64,
    /// Whether "equal gains" and "equal accuracies" agree at `tolerance`.
    pub consistent: bool,
}

/// Checks that two defer sets have equal accuracy exactly when they have
/// equal `E[r beta]`.
pub fn accuracy_identity_check(
    table: &SupportTable,
    a: &[bool],
    b: &[bool],
    tolerance: f64,
) -> Result<IdentityCheck> {
    check_defer_set(table, a)?;
    check_defer_set(table, b)?;
    let gain = |r: &[bool]| -> f64 {
        (0..table.len())
            .map(|i| {
                let beta = table.correct_prob(1, i) - table.correct_prob(0, i);
                table.masses[i] * r[i] as i32 as f64 * beta
            })
            .sum()
    };
    let accuracy = |r: &[bool]| -> f64 {
        (0..table.len())
            .map(|i| table.masses[i] * table.correct_prob(r[i] as usize, i))
            .sum()
    };
    let base: f64 = (0..table.len())
        .map(|i| table.masses[i] * table.correct_prob(0, i))
        .sum();
    let (ga, gb, aa, ab) = (gain(a), gain(b), accuracy(a), accuracy(b));
    let same_gain = (ga - gb).abs() <= tolerance;
    let same_acc = (aa - ab).abs() <= tolerance;
    Ok(IdentityCheck {
        expected_gain_a: ga,
        expected_gain_b: gb,
        accuracy_a: aa,
        accuracy_b: ab,
        residual_a: (aa - (base + ga)).abs(),
        residual_b: (ab - (base + gb)).abs(),
        consistent: same_gain == same_acc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Threshold `c` of "defer iff score > c" that induces this point. For
    /// quantile-matched points this is the score of the highest-ranked
    /// example that is kept (negative infinity when all are deferred).
    pub threshold: f64,
    pub deferral_rate: f64,
    pub accuracy: f64,
    pub risk: f64,
    pub relative_cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeferralCurve {
    pub rule: String,
    pub scenario: String,
    pub seed: u64,
    pub points: Vec<CurvePoint>,
}

impl DeferralCurve {
    /// Accuracy at `rate`, linearly interpolated between the two nearest
    /// points by deferral rate and clamped to the ends of the curve.
    pub fn accuracy_at(&self, rate: f64) -> Option<f64> {
        let mut pts: Vec<(f64, f64)> = self
            .points
            .iter()
            .filter(|p| p.deferral_rate.is_finite() && p.accuracy.is_finite())
            .map(|p| (p.deferral_rate, p.accuracy))
            .collect();
        if pts.is_empty() || rate.is_nan() {
            return None;
        }
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (first, last) = (pts[0], pts[pts.len() - 1]);
        if rate <= first.0 {
            return Some(first.1);
        }
        if rate >= last.0 {
            return Some(last.1);
        }
        let j = pts.partition_point(|p| p.0 < rate);
        let (lo, hi) = (pts[j - 1], pts[j]);
        if hi.0 == rate || hi.0 == lo.0 {
            return Some(hi.1);
        }
        Some(lo.1 + (hi.1 - lo.1) * (rate - lo.0) / (hi.0 - lo.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CurveGrid {
    /// Target deferral rates; each threshold is the matching score quantile.
    Rates { rates: Vec<f64> },
    /// Fixed thresholds; rates are whatever they induce.
    Thresholds { thresholds: Vec<f64> },
}

impl CurveGrid {
    pub fn rates(rates: Vec<f64>) -> Self {
        CurveGrid::Rates { rates }
    }

    /// `n + 1` evenly spaced rates from 0 to 1.
    pub fn uniform(n: usize) -> Self {
        CurveGrid::Rates {
            rates: (0..=n).map(|i| i as f64 / n as f64).collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            CurveGrid::Rates { rates } => {
                if rates.is_empty() {
                    return Err(Error::Config("empty rate grid".into()));
                }
                if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
                    return Err(Error::Config("rates must lie in [0, 1]".into()));
                }
                if rates.windows(2).any(|w| w[1] < w[0]) {
                    return Err(Error::Config("rate grid must be sorted".into()));
                }
            }
            CurveGrid::Thresholds { thresholds } => {
                if thresholds.is_empty() || thresholds.iter().any(|t| t.is_nan()) {
                    return Err(Error::Config("threshold grid must be nonempty and not NaN".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurveOptions {
    /// Constant cost `c` charged per deferral in the risk column.
    pub deferral_cost: f64,
    /// Positive inference cost of each model, for the relative-cost column.
    pub model_costs: Vec<f64>,
}

impl Default for CurveOptions {
    fn default() -> Self {
        CurveOptions {
            deferral_cost: 0.0,
            model_costs: vec![1.0, 1.0],
        }
    }
}

/// Expected summed cost of the invoked models relative to the largest
/// model's cost. `reach[k]` is the fraction of inputs that run model `k`.
pub fn relative_inference_cost(reach: &[f64], costs: &[f64]) -> Result<f64> {
    if reach.len() != costs.len() || costs.is_empty() {
        return Err(Error::Shape("reach fractions and costs differ in length".into()));
    }
    if costs.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
        return Err(Error::Config("model costs must be positive".into()));
    }
    let max = costs.iter().cloned().fold(0.0, f64::max);
    Ok(reach.iter().zip(costs).map(|(r, c)| r * c).sum::<f64>() / max)
}

/// Ranks examples for deferral: descending score, ties by example order.
fn ranking(scores: &[f64], subset: &[usize]) -> Vec<usize> {
    let mut order = subset.to_vec();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Curve points from precomputed scores and per-example correctness.
pub fn curve_from_scores(
    scores: &[f64],
    correct1: &[bool],
    correct2: &[bool],
    grid: &CurveGrid,
    opts: &CurveOptions,
) -> Result<Vec<CurvePoint>> {
    grid.validate()?;
    let n = scores.len();
    if n == 0 || correct1.len() != n || correct2.len() != n {
        return Err(Error::Shape("scores and correctness vectors must match and be nonempty".into()));
    }
    if opts.model_costs.len() != 2 {
        return Err(Error::Config("two-model curves need two model costs".into()));
    }
    let base = correct1.iter().filter(|b| **b).count() as i64;
    let point = |deferred: usize, gain: i64, threshold: f64| -> Result<CurvePoint> {
        let rate = deferred as f64 / n as f64;
        let accuracy = (base + gain) as f64 / n as f64;
        Ok(CurvePoint {
            threshold,
            deferral_rate: rate,
            accuracy,
            risk: 1.0 - accuracy + opts.deferral_cost * rate,
            relative_cost: relative_inference_cost(&[1.0, rate], &opts.model_costs)?,
        })
    };
    let delta = |i: usize| correct2[i] as i64 - correct1[i] as i64;
    match grid {
        CurveGrid::Rates { rates } => {
            let all: Vec<usize> = (0..n).collect();
            let order = ranking(scores, &all);
            let mut prefix = Vec::with_capacity(n + 1);
            prefix.push(0i64);
            for &i in &order {
                prefix.push(prefix.last().unwrap() + delta(i));
            }
            rates
                .iter()
                .map(|&a| {
                    let k = ((a * n as f64).round() as usize).min(n);
                    let threshold = if k < n { scores[order[k]] } else { f64::NEG_INFINITY };
                    point(k, prefix[k], threshold)
                })
                .collect()
        }
        CurveGrid::Thresholds { thresholds } => {
            let mut ts = thresholds.clone();
            ts.sort_by(|a, b| b.total_cmp(a));
            ts.iter()
                .map(|&t| {
                    let mut k = 0;
                    let mut gain = 0;
                    for (i, &s) in scores.iter().enumerate() {
                        if decide(s, t) {
                            k += 1;
                            gain += delta(i);
                        }
                    }
                    point(k, gain, t)
                })
                .collect()
        }
    }
}

/// Deferral curve of a rule on a dataset.
pub fn deferral_curve(
    ds: &Dataset,
    model1: &dyn ProbModel,
    model2: &dyn ProbModel,
    rule: &DeferralRule,
    grid: &CurveGrid,
    opts: &CurveOptions,
) -> Result<DeferralCurve> {
    let table = CascadeTable::build(ds, &[model1, model2])?;
    let scores = table.scores(0, rule)?;
    Ok(DeferralCurve {
        rule: rule.kind().name().to_string(),
        scenario: String::new(),
        seed: 0,
        points: curve_from_scores(&scores, &table.correct(0), &table.correct(1), grid, opts)?,
    })
}

/// Exact population deferral curve on a discrete world. The support is
/// ranked by score (ties by support order) and the boundary point is
/// deferred fractionally so each requested rate is met exactly.
pub fn population_curve(
    world: &SyntheticWorld,
    model1: &dyn ProbModel,
    model2: &dyn ProbModel,
    rule: &DeferralRule,
    rates: &[f64],
    opts: &CurveOptions,
) -> Result<DeferralCurve> {
    CurveGrid::rates(rates.to_vec()).validate()?;
    let table = SupportTable::build(world, &[model1, model2])?;
    let scores = table.scores(0, rule)?;
    let all: Vec<usize> = (0..table.len()).collect();
    let order = ranking(&scores, &all);
    let points = rates
        .iter()
        .map(|&a| {
            let mut remaining = a;
            let mut accuracy = 0.0;
            let mut threshold = f64::NEG_INFINITY;
            for &i in &order {
                let m = table.masses[i];
                let w = if remaining >= m {
                    1.0
                } else if remaining > 0.0 {
                    remaining / m
                } else {
                    0.0
                };
                if w < 1.0 && threshold == f64::NEG_INFINITY {
                    threshold = scores[i];
                }
                remaining -= w * m;
                accuracy += m * ((1.0 - w) * table.correct_prob(0, i) + w * table.correct_prob(1, i));
            }
            Ok(CurvePoint {
                threshold,
                deferral_rate: a,
                accuracy,
                risk: 1.0 - accuracy + opts.deferral_cost * a,
                relative_cost: relative_inference_cost(&[1.0, a], &opts.model_costs)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DeferralCurve {
        rule: rule.kind().name().to_string(),
        scenario: String::new(),
        seed: 0,
        points,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadePoint {
    pub alpha: f64,
    /// Fraction of inputs that run each model.
    pub reach: Vec<f64>,
    pub accuracy: f64,
    pub relative_cost: f64,
}

/// K-stage curve with a shared per-stage quantile: at each stage the top
/// `alpha` fraction (by that stage's score) of the inputs reaching it are
/// passed on. `stage_scores[k]` holds stage `k` scores for every example.
pub fn cascade_curve(
    table: &CascadeTable,
    stage_scores: &[Vec<f64>],
    alphas: &[f64],
    model_costs: &[f64],
) -> Result<Vec<CascadePoint>> {
    let k = table.num_models();
    let n = table.len();
    if stage_scores.len() + 1 != k || stage_scores.iter().any(|s| s.len() != n) {
        return Err(Error::Shape("need one score vector per stage".into()));
    }
    if model_costs.len() != k {
        return Err(Error::Config(format!("{k} models need {k} costs")));
    }
    CurveGrid::rates(alphas.to_vec()).validate()?;
    let correct: Vec<Vec<bool>> = (0..k).map(|m| table.correct(m)).collect();
    alphas
        .iter()
        .map(|&a| {
            let mut reaching: Vec<usize> = (0..n).collect();
            let mut reach = vec![1.0];
            let mut hits = 0usize;
            for stage in 0..k - 1 {
                let order = ranking(&stage_scores[stage], &reaching);
                let pass = ((a * order.len() as f64).round() as usize).min(order.len());
                hits += order[pass..].iter().filter(|&&i| correct[stage][i]).count();
                let mut next = order[..pass].to_vec();
                next.sort_unstable();
                reaching = next;
                reach.push(reaching.len() as f64 / n as f64);
            }
            hits += reaching.iter().filter(|&&i| correct[k - 1][i]).count();
            Ok(CascadePoint {
                alpha: a,
                relative_cost: relative_inference_cost(&reach, model_costs)?,
                reach,
                accuracy: hits as f64 / n as f64,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBucket {
    pub bucket_lo: f64,
    pub bucket_hi: f64,
    pub count: usize,
    /// Mean of `max p1`; NaN for an empty bucket.
    pub mean_conf: f64,
    /// Frequency of `h1 wrong and h2 right`; NaN for an empty bucket.
    pub event_freq: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub buckets: Vec<CalibrationBucket>,
}

/// Buckets examples by model-1 confidence into ten equal-width bins and
/// reports how often deferring would have fixed an error in each.
pub fn calibration_report(
    ds: &Dataset,
    model1: &dyn ProbModel,
    model2: &dyn ProbModel,
) -> Result<CalibrationReport> {
    let table = CascadeTable::build(ds, &[model1, model2])?;
    Ok(calibration_from_table(&table))
}

pub fn calibration_from_table(table: &CascadeTable) -> CalibrationReport {
    let b = CALIBRATION_BUCKETS;
    let (c1, c2) = (table.correct(0), table.correct(1));
    let mut conf: Vec<Vec<f64>> = vec![Vec::new(); b];
    let mut events = vec![0usize; b];
    for (i, p) in table.outputs(0).iter().enumerate() {
        let q = p.max_prob();
        let k = ((q * b as f64).floor() as usize).min(b - 1);
        conf[k].push(q);
        events[k] += (!c1[i] && c2[i]) as usize;
    }
    CalibrationReport {
        buckets: (0..b)
            .map(|k| {
                let count = conf[k].len();
                let (mean_conf, event_freq) = if count == 0 {
                    (f64::NAN, f64::NAN)
                } else {
                    (par::pairwise_mean(&conf[k]), events[k] as f64 / count as f64)
                };
                CalibrationBucket {
                    bucket_lo: k as f64 / b as f64,
                    bucket_hi: (k + 1) as f64 / b as f64,
                    count,
                    mean_conf,
                    event_freq,
                }
            })
            .collect(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CurveRow {
    rule: String,
    scenario: String,
    seed: u64,
    threshold: f64,
    deferral_rate: f64,
    accuracy: f64,
    risk: f64,
    relative_cost: f64,
}

pub fn write_curves_csv(path: &Path, curves: &[DeferralCurve]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for c in curves {
        for p in &c.points {
            w.serialize(CurveRow {
                rule: c.rule.clone(),
                scenario: c.scenario.clone(),
                seed: c.seed,
                threshold: p.threshold,
                deferral_rate: p.deferral_rate,
                accuracy: p.accuracy,
                risk: p.risk,
                relative_cost: p.relative_cost,
            })
            .map_err(|e| csv_io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads curves back, grouping consecutive rows by (rule, scenario, seed).
pub fn read_curves_csv(path: &Path) -> Result<Vec<DeferralCurve>> {
    let name = path.display().to_string();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut curves: Vec<DeferralCurve> = Vec::new();
    for row in r.deserialize::<CurveRow>() {
        let row = row.map_err(|e| csv_parse(&name, e))?;
        let p = CurvePoint {
            threshold: row.threshold,
            deferral_rate: row.deferral_rate,
            accuracy: row.accuracy,
            risk: row.risk,
            relative_cost: row.relative_cost,
        };
        match curves.last_mut() {
            Some(c) if c.rule == row.rule && c.scenario == row.scenario && c.seed == row.seed => {
                c.points.push(p)
            }
            _ => curves.push(DeferralCurve {
                rule: row.rule,
                scenario: row.scenario,
                seed: row.seed,
                points: vec![p],
            }),
        }
    }
    if curves.is_empty() {
        return Err(Error::Parse {
            source_name: name,
            line: 1,
            column: 0,
            message: "no curve rows".into(),
        });
    }
    Ok(curves)
}

pub fn write_calibration_csv(path: &Path, report: &CalibrationReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for b in &report.buckets {
        w.serialize(b).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
