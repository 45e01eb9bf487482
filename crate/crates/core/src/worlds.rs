//! Synthetic joint distributions with exactly known posteriors, and the
//! transforms that produce the specialist, label-noise and long-tail
//! scenarios.
//!
//! A world is either a finite *discrete* support (every expectation is an
//! exact finite sum) or an isotropic *Gaussian mixture* (posteriors via
//! Bayes' rule). A world may also carry a label-noise channel, in which case
//! its posterior is the distribution of the *observed* label.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabeledExample};
use crate::error::{Error, Result};
use crate::par;
use crate::prob::ProbVector;
use crate::rng::{Rng, RngSeed};

/// Tolerance on discrete marginal mass.
pub const MASS_TOLERANCE: f64 = 1e-12;

const SAMPLE_CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportPoint {
    pub x: Vec<f64>,
    pub mass: f64,
    pub posterior: ProbVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub mean: Vec<f64>,
    pub stddev: f64,
    pub prior: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum WorldStructure {
    Discrete { support: Vec<SupportPoint> },
    GaussianMixture { components: Vec<GaussianComponent> },
}

/// Observed labels of examples whose true class is in `classes` are
/// replaced, with probability `flip_prob`, by a label drawn uniformly over
/// all classes (the true label may be redrawn).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelNoise {
    pub classes: Vec<usize>,
    pub flip_prob: f64,
}

impl LabelNoise {
    fn validate(&self, num_classes: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!(
                "flip probability {} outside [0, 1]",
                self.flip_prob
            )));
        }
        if let Some(&c) = self.classes.iter().find(|&&c| c >= num_classes) {
            return Err(Error::Config(format!(
                "noisy class {c} out of range for {num_classes} classes"
            )));
        }
        Ok(())
    }

    fn mask(&self, num_classes: usize) -> Vec<bool> {
        let mut m = vec![false; num_classes];
        for &c in &self.classes {
            m[c] = true;
        }
        m
    }

    /// Pushes a clean-label distribution through the noise channel.
    pub fn apply_to(&self, clean: &[f64]) -> Vec<f64> {
        let l = clean.len();
        let mask = self.mask(l);
        let noisy_mass: f64 = clean.iter().zip(&mask).filter(|(_, m)| **m).map(|(p, _)| p).sum();
        let spread = self.flip_prob * noisy_mass / l as f64;
        clean
            .iter()
            .zip(&mask)
            .map(|(&p, &m)| if m { p * (1.0 - self.flip_prob) } else { p } + spread)
            .collect()
    }
}

/// A joint distribution over instances and labels with known posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWorld", into = "RawWorld")]
pub struct SyntheticWorld {
    structure: WorldStructure,
    label_noise: Option<LabelNoise>,
    num_classes: usize,
}

#[derive(Serialize, Deserialize)]
struct RawWorld {
    #[serde(flatten)]
    structure: WorldStructure,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label_noise: Option<LabelNoise>,
}

impl TryFrom<RawWorld> for SyntheticWorld {
    type Error = Error;
    fn try_from(raw: RawWorld) -> Result<Self> {
        let world = SyntheticWorld::from_structure(raw.structure)?;
        match raw.label_noise {
            Some(n) => world.with_label_noise(&n),
            None => Ok(world),
        }
    }
}

impl From<SyntheticWorld> for RawWorld {
    fn from(w: SyntheticWorld) -> Self {
        RawWorld {
            structure: w.structure,
            label_noise: w.label_noise,
        }
    }
}

impl SyntheticWorld {
    pub fn from_structure(structure: WorldStructure) -> Result<Self> {
        let num_classes = match &structure {
            WorldStructure::Discrete { support } => {
                let first = support
                    .first()
                    .ok_or_else(|| Error::Config("discrete support is empty".into()))?;
                let l = first.posterior.num_classes();
                let dim = first.x.len();
                let mut total = 0.0;
                for (i, p) in support.iter().enumerate() {
                    if p.posterior.num_classes() != l || p.x.len() != dim {
                        return Err(Error::Config(format!(
                            "support point {i} disagrees on class count or dimension"
                        )));
                    }
                    if !(p.mass >= 0.0 && p.mass.is_finite()) {
                        return Err(Error::Config(format!("support point {i} has mass {}", p.mass)));
                    }
                    if support[..i].iter().any(|q| q.x == p.x) {
                        return Err(Error::Config(format!("support point {i} is duplicated")));
                    }
                    total += p.mass;
                }
                if (total - 1.0).abs() > MASS_TOLERANCE {
                    return Err(Error::Config(format!("support masses sum to {total}")));
                }
                l
            }
            WorldStructure::GaussianMixture { components } => {
                if components.len() < 2 {
                    return Err(Error::Config("mixture needs at least 2 classes".into()));
                }
                let dim = components[0].mean.len();
                if dim == 0 {
                    return Err(Error::Config("mixture means must be nonempty".into()));
                }
                let mut total = 0.0;
                for (k, c) in components.iter().enumerate() {
                    if c.mean.len() != dim {
                        return Err(Error::Config(format!("component {k} has wrong dimension")));
                    }
                    if !(c.stddev > 0.0 && c.stddev.is_finite()) {
                        return Err(Error::Config(format!("component {k} stddev must be > 0")));
                    }
                    if !(c.prior >= 0.0 && c.prior.is_finite()) {
                        return Err(Error::Config(format!("component {k} prior must be >= 0")));
                    }
                    total += c.prior;
                }
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(format!("class priors sum to {total}")));
                }
                components.len()
            }
        };
        Ok(SyntheticWorld {
            structure,
            label_noise: None,
            num_classes,
        })
    }

    pub fn discrete(support: Vec<SupportPoint>) -> Result<Self> {
        Self::from_structure(WorldStructure::Discrete { support })
    }

    pub fn gaussian_mixture(components: Vec<GaussianComponent>) -> Result<Self> {
        Self::from_structure(WorldStructure::GaussianMixture { components })
    }

    /// Mixture with uniform priors, shared stddev and means drawn i.i.d.
    /// from `N(0, mean_scale^2)` per coordinate.
    pub fn random_gaussian_mixture(
        num_classes: usize,
        dim: usize,
        mean_scale: f64,
        stddev: f64,
        seed: RngSeed,
    ) -> Result<Self> {
        let mut rng = seed.rng();
        let components = (0..num_classes)
            .map(|_| GaussianComponent {
                mean: (0..dim)
                    .map(|_| mean_scale * standard_normal(&mut rng))
                    .collect(),
                stddev,
                prior: 1.0 / num_classes as f64,
            })
            .collect();
        Self::gaussian_mixture(components)
    }

    /// Same world observed through a label-noise channel.
    pub fn with_label_noise(&self, noise: &LabelNoise) -> Result<Self> {
        noise.validate(self.num_classes)?;
        if self.label_noise.is_some() {
            return Err(Error::Config("world already has a label-noise channel".into()));
        }
        Ok(SyntheticWorld {
            label_noise: Some(noise.clone()),
            ..self.clone()
        })
    }

    pub fn structure(&self) -> &WorldStructure {
        &self.structure
    }

    pub fn label_noise(&self) -> Option<&LabelNoise> {
        self.label_noise.as_ref()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        match &self.structure {
            WorldStructure::Discrete { support } => support[0].x.len(),
            WorldStructure::GaussianMixture { components } => components[0].mean.len(),
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self.structure, WorldStructure::Discrete { .. })
    }

    /// Support points of a discrete world.
    pub fn support(&self) -> Option<&[SupportPoint]> {
        match &self.structure {
            WorldStructure::Discrete { support } => Some(support),
            _ => None,
        }
    }

    /// Position of `x` in a discrete support.
    pub fn support_index(&self, x: &[f64]) -> Result<usize> {
        match &self.structure {
            WorldStructure::Discrete { support } => support
                .iter()
                .position(|p| p.x == x)
                .ok_or(Error::OutOfSupport),
            _ => Err(Error::Config("world is not discrete".into())),
        }
    }

    /// Exact `Pr(y | x)`.
    pub fn posterior(&self, x: &[f64]) -> Result<ProbVector> {
        self.posterior_view(x, None)
    }

    /// Posterior given only the first `visible_dims` coordinates of `x`.
    ///
    /// Marginalizing an isotropic mixture over the hidden coordinates leaves
    /// an isotropic mixture on the visible ones, so this is still exact.
    pub fn posterior_view(&self, x: &[f64], visible_dims: Option<usize>) -> Result<ProbVector> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!(
                "instance has dimension {}, world has {}",
                x.len(),
                self.dim()
            )));
        }
        let clean = match &self.structure {
            WorldStructure::Discrete { support } => {
                if visible_dims.is_some() {
                    return Err(Error::Config(
                        "visible_dims applies only to gaussian-mixture worlds".into(),
                    ));
                }
                let i = self.support_index(x)?;
                support[i].posterior.clone()
            }
            WorldStructure::GaussianMixture { components } => {
                let m = visible_dims.unwrap_or(x.len());
                if m == 0 || m > x.len() {
                    return Err(Error::Config(format!(
                        "visible_dims {m} outside 1..={}",
                        x.len()
                    )));
                }
                let logits: Vec<f64> = components
                    .iter()
                    .map(|c| {
                        if c.prior == 0.0 {
                            return f64::NEG_INFINITY;
                        }
                        let sq: f64 = x[..m]
                            .iter()
                            .zip(&c.mean[..m])
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum();
                        c.prior.ln() - sq / (2.0 * c.stddev * c.stddev) - m as f64 * c.stddev.ln()
                    })
                    .collect();
                ProbVector::from_log_weights(&logits)?
            }
        };
        match &self.label_noise {
            Some(n) => ProbVector::new(n.apply_to(clean.as_slice())),
            None => Ok(clean),
        }
    }

    /// Marginal distribution of the (observed) label.
    pub fn class_marginals(&self) -> Vec<f64> {
        let clean: Vec<f64> = match &self.structure {
            WorldStructure::Discrete { support } => {
                let mut m = vec![0.0; self.num_classes];
                for p in support {
                    for (acc, v) in m.iter_mut().zip(p.posterior.as_slice()) {
                        *acc += p.mass * v;
                    }
                }
                m
            }
            WorldStructure::GaussianMixture { components } => {
                components.iter().map(|c| c.prior).collect()
            }
        };
        match &self.label_noise {
            Some(n) => n.apply_to(&clean),
            None => clean,
        }
    }

    fn draw(&self, rng: &mut Rng) -> LabeledExample {
        let (x, mut y) = match &self.structure {
            WorldStructure::Discrete { support } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut idx = support.len() - 1;
                for (i, p) in support.iter().enumerate() {
                    acc += p.mass;
                    if u < acc {
                        idx = i;
                        break;
                    }
                }
                let y = draw_categorical(support[idx].posterior.as_slice(), rng);
                (support[idx].x.clone(), y)
            }
            WorldStructure::GaussianMixture { components } => {
                let priors: Vec<f64> = components.iter().map(|c| c.prior).collect();
                let y = draw_categorical(&priors, rng);
                let c = &components[y];
                let x = c
                    .mean
                    .iter()
                    .map(|m| m + c.stddev * standard_normal(rng))
                    .collect();
                (x, y)
            }
        };
        if let Some(n) = &self.label_noise {
            y = corrupt_label(y, n, self.num_classes, rng);
        }
        LabeledExample { x, y }
    }
}

fn standard_normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn draw_categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding can leave u just above the running total
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

fn corrupt_label(y: usize, noise: &LabelNoise, num_classes: usize, rng: &mut Rng) -> usize {
    if noise.classes.contains(&y) {
        let u: f64 = rng.random();
        if u < noise.flip_prob {
            return rng.random_range(0..num_classes);
        }
    }
    y
}

/// Draws `n` i.i.d. examples. Work is split into fixed-size chunks with
/// derived seeds, so the result does not depend on thread count.
pub fn sample(world: &SyntheticWorld, n: usize, seed: RngSeed) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("sample size must be >= 1".into()));
    }
    let chunks = n.div_ceil(SAMPLE_CHUNK);
    let parts = par::map_indexed(chunks, |c| {
        let mut rng = seed.derive(c as u64).rng();
        let len = SAMPLE_CHUNK.min(n - c * SAMPLE_CHUNK);
        (0..len).map(|_| world.draw(&mut rng)).collect::<Vec<_>>()
    });
    Dataset::new(parts.into_iter().flatten().collect(), world.num_classes())
}

/// Scenario transforms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScenarioTransform {
    LabelNoise {
        classes: Vec<usize>,
        flip_prob: f64,
    },
    SpecialistSplit {
        good_classes: Vec<usize>,
    },
    LongTailSkew {
        head_classes: usize,
        #[serde(default = "default_head_weight")]
        head_weight: f64,
        #[serde(default = "default_tail_weight")]
        tail_weight: f64,
    },
}

fn default_head_weight() -> f64 {
    500.0
}

fn default_tail_weight() -> f64 {
    50.0
}

/// Applies the label-noise transform to a dataset, preserving order.
pub fn apply_label_noise(ds: &Dataset, t: &ScenarioTransform, seed: RngSeed) -> Result<Dataset> {
    let ScenarioTransform::LabelNoise { classes, flip_prob } = t else {
        return Err(Error::Config("expected a label-noise transform".into()));
    };
    let noise = LabelNoise {
        classes: classes.clone(),
        flip_prob: *flip_prob,
    };
    noise.validate(ds.num_classes())?;
    let l = ds.num_classes();
    let examples = ds.examples();
    let chunks = examples.len().div_ceil(SAMPLE_CHUNK);
    let parts = par::map_indexed(chunks, |c| {
        let mut rng = seed.derive(c as u64).rng();
        let end = ((c + 1) * SAMPLE_CHUNK).min(examples.len());
        examples[c * SAMPLE_CHUNK..end]
            .iter()
            .map(|e| LabeledExample {
                x: e.x.clone(),
                y: corrupt_label(e.y, &noise, l, &mut rng),
            })
            .collect::<Vec<_>>()
    });
    Dataset::new(parts.into_iter().flatten().collect(), l)
}

/// Membership of a class in the subgroup a specialist handles well.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgroupPredicate {
    classes: Vec<bool>,
}

impl SubgroupPredicate {
    pub fn new(good_classes: &[usize], num_classes: usize) -> Result<Self> {
        let mut classes = vec![false; num_classes];
        for &c in good_classes {
            if c >= num_classes {
                return Err(Error::Config(format!(
                    "subgroup class {c} out of range for {num_classes} classes"
                )));
            }
            classes[c] = true;
        }
        let count = classes.iter().filter(|b| **b).count();
        if count == 0 || count == num_classes {
            return Err(Error::Config(
                "subgroup must be a nonempty proper subset of the classes".into(),
            ));
        }
        Ok(SubgroupPredicate { classes })
    }

    pub fn contains(&self, class: usize) -> bool {
        self.classes.get(class).copied().unwrap_or(false)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

/// Returns the unchanged world and the predicate marking the good subgroup.
pub fn make_specialist_world(
    base: &SyntheticWorld,
    t: &ScenarioTransform,
) -> Result<(SyntheticWorld, SubgroupPredicate)> {
    let ScenarioTransform::SpecialistSplit { good_classes } = t else {
        return Err(Error::Config("expected a specialist-split transform".into()));
    };
    let pred = SubgroupPredicate::new(good_classes, base.num_classes())?;
    Ok((base.clone(), pred))
}

/// Reweights class priors so the first `head_classes` classes get
/// `head_weight` and the rest `tail_weight`, then renormalizes. Class
/// conditionals are untouched; discrete posteriors follow by Bayes' rule.
pub fn apply_long_tail(world: &SyntheticWorld, t: &ScenarioTransform) -> Result<SyntheticWorld> {
    let ScenarioTransform::LongTailSkew {
        head_classes,
        head_weight,
        tail_weight,
    } = t
    else {
        return Err(Error::Config("expected a long-tail-skew transform".into()));
    };
    let l = world.num_classes();
    if *head_classes >= l {
        return Err(Error::Config(format!(
            "head class count {head_classes} must be below {l}"
        )));
    }
    if !(*head_weight > 0.0 && *tail_weight > 0.0) {
        return Err(Error::Config("head and tail weights must be positive".into()));
    }
    let weights: Vec<f64> = (0..l)
        .map(|k| if k < *head_classes { *head_weight } else { *tail_weight })
        .collect();
    let structure = match &world.structure {
        WorldStructure::GaussianMixture { components } => {
            let raw: Vec<f64> = components.iter().zip(&weights).map(|(c, w)| c.prior * w).collect();
            let total: f64 = raw.iter().sum();
            WorldStructure::GaussianMixture {
                components: components
                    .iter()
                    .zip(&raw)
                    .map(|(c, r)| GaussianComponent {
                        prior: r / total,
                        ..c.clone()
                    })
                    .collect(),
            }
        }
        WorldStructure::Discrete { support } => {
            let scaled: Vec<Vec<f64>> = support
                .iter()
                .map(|p| {
                    p.posterior
                        .as_slice()
                        .iter()
                        .zip(&weights)
                        .map(|(e, w)| p.mass * e * w)
                        .collect()
                })
                .collect();
            let total: f64 = scaled.iter().flatten().sum();
            let support = support
                .iter()
                .zip(&scaled)
                .map(|(p, s)| {
                    let joint: f64 = s.iter().sum();
                    Ok(SupportPoint {
                        x: p.x.clone(),
                        mass: joint / total,
                        posterior: if joint > 0.0 {
                            ProbVector::normalize(s)?
                        } else {
                            p.posterior.clone()
                        },
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            // re-close the mass sum against rounding
            let mass_sum: f64 = support.iter().map(|p| p.mass).sum();
            let support = support
                .into_iter()
                .map(|p| SupportPoint {
                    mass: p.mass / mass_sum,
                    ..p
                })
                .collect();
            WorldStructure::Discrete { support }
        }
    };
    let mut out = SyntheticWorld::from_structure(structure)?;
    out.label_noise = world.label_noise.clone();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    fn one_point() -> SyntheticWorld {
        SyntheticWorld::discrete(vec![SupportPoint {
            x: vec![0.0],
            mass: 1.0,
            posterior: pv(&[0.7, 0.3]),
        }])
        .unwrap()
    }

    fn two_class_gmm(priors: (f64, f64), means: (f64, f64)) -> SyntheticWorld {
        SyntheticWorld::gaussian_mixture(vec![
            GaussianComponent { mean: vec![means.0], stddev: 1.0, prior: priors.0 },
            GaussianComponent { mean: vec![means.1], stddev: 1.0, prior: priors.1 },
        ])
        .unwrap()
    }

    #[test]
    fn discrete_posterior_is_stored_value() {
        let w = one_point();
        assert_eq!(w.posterior(&[0.0]).unwrap().as_slice(), &[0.7, 0.3]);
        assert!(matches!(w.posterior(&[1.0]), Err(Error::OutOfSupport)));
    }

    #[test]
    fn gaussian_posterior_examples() {
        let w = two_class_gmm((0.5, 0.5), (-1.5, 1.5));
        let p = w.posterior(&[0.0]).unwrap();
        assert!((p.get(0) - 0.5).abs() < 1e-15);
        // densities at 0 are equal for means -1, +1, so the posterior is the prior
        let w = two_class_gmm((0.9, 0.1), (-1.0, 1.0));
        let p = w.posterior(&[0.0]).unwrap();
        assert!((p.get(0) - 0.9).abs() < 1e-12);
        // x = 0.5: ratio 0.9 N(0.5;-1,1) / (.. + 0.1 N(0.5;1,1)), computed with scipy
        let p = w.posterior(&[0.5]).unwrap();
        assert!((p.get(0) - 0.768030683315926).abs() < 1e-12);
    }

    #[test]
    fn sampling_examples() {
        let w = one_point();
        let ds = sample(&w, 5, RngSeed(1)).unwrap();
        assert!(ds.examples().iter().all(|e| e.x == vec![0.0]));
        assert_eq!(sample(&w, 100, RngSeed(9)).unwrap(), sample(&w, 100, RngSeed(9)).unwrap());
        assert!(sample(&w, 0, RngSeed(9)).is_err());

        let w = two_class_gmm((0.8, 0.2), (-1.0, 1.0));
        let ds = sample(&w, 10_000, RngSeed(5)).unwrap();
        let freq = ds.labels().filter(|&y| y == 0).count() as f64 / 10_000.0;
        assert!((freq - 0.8).abs() < 0.02, "freq {freq}");
    }

    #[test]
    fn sampling_is_thread_count_independent() {
        let w = two_class_gmm((0.5, 0.5), (-1.0, 1.0));
        let a = sample(&w, 5000, RngSeed(3)).unwrap();
        par::set_execution(par::Execution::Sequential);
        let b = sample(&w, 5000, RngSeed(3)).unwrap();
        par::set_execution(par::Execution::Parallel);
        assert_eq!(a, b);
    }

    #[test]
    fn label_noise_examples() {
        let w = SyntheticWorld::random_gaussian_mixture(10, 2, 3.0, 1.0, RngSeed(2)).unwrap();
        let ds = sample(&w, 100_000, RngSeed(4)).unwrap();
        let off = ScenarioTransform::LabelNoise { classes: (0..10).collect(), flip_prob: 0.0 };
        assert_eq!(apply_label_noise(&ds, &off, RngSeed(1)).unwrap(), ds);

        let full = ScenarioTransform::LabelNoise { classes: (0..10).collect(), flip_prob: 1.0 };
        let noisy = apply_label_noise(&ds, &full, RngSeed(1)).unwrap();
        let mut counts = [0usize; 10];
        for y in noisy.labels() {
            counts[y] += 1;
        }
        for c in counts {
            assert!((c as f64 / 100_000.0 - 0.1).abs() < 0.01);
        }
        let bad = ScenarioTransform::LabelNoise { classes: vec![10], flip_prob: 0.5 };
        assert!(matches!(apply_label_noise(&ds, &bad, RngSeed(1)), Err(Error::Config(_))));
    }

    #[test]
    fn label_noise_accuracy_ceiling() {
        // Pr(observed = true) = 1 - p + p/L on noisy classes
        let l = 20;
        let w = SyntheticWorld::random_gaussian_mixture(l, 2, 3.0, 1.0, RngSeed(8)).unwrap();
        let clean = sample(&w, 40_000, RngSeed(1)).unwrap();
        let p = 0.6;
        let t = ScenarioTransform::LabelNoise { classes: (0..5).collect(), flip_prob: p };
        let noisy = apply_label_noise(&clean, &t, RngSeed(2)).unwrap();
        let (mut n, mut kept) = (0usize, 0usize);
        for (a, b) in clean.examples().iter().zip(noisy.examples()) {
            assert_eq!(a.x, b.x);
            if a.y < 5 {
                n += 1;
                kept += (a.y == b.y) as usize;
            } else {
                assert_eq!(a.y, b.y);
            }
        }
        let expected = 1.0 - p + p / l as f64;
        let rate = kept as f64 / n as f64;
        let se = (expected * (1.0 - expected) / n as f64).sqrt();
        assert!((rate - expected).abs() < 3.0 * se, "{rate} vs {expected}");
    }

    #[test]
    fn noisy_world_posterior_matches_channel() {
        let w = two_class_gmm((0.5, 0.5), (-1.0, 1.0));
        let n = LabelNoise { classes: vec![0], flip_prob: 1.0 };
        let nw = w.with_label_noise(&n).unwrap();
        let clean = w.posterior(&[0.3]).unwrap();
        let noisy = nw.posterior(&[0.3]).unwrap();
        assert!((noisy.get(0) - clean.get(0) * 0.5).abs() < 1e-15);
        assert!((noisy.get(1) - (clean.get(1) + clean.get(0) * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn specialist_predicate() {
        let w = SyntheticWorld::random_gaussian_mixture(20, 2, 1.0, 1.0, RngSeed(1)).unwrap();
        let t = ScenarioTransform::SpecialistSplit { good_classes: (0..5).collect() };
        let (w2, pred) = make_specialist_world(&w, &t).unwrap();
        assert_eq!(w2, w);
        assert!((0..20).all(|c| pred.contains(c) == (c < 5)));
        let all = ScenarioTransform::SpecialistSplit { good_classes: (0..20).collect() };
        assert!(matches!(make_specialist_world(&w, &all), Err(Error::Config(_))));
        let none = ScenarioTransform::SpecialistSplit { good_classes: vec![] };
        assert!(make_specialist_world(&w, &none).is_err());
    }

    #[test]
    fn long_tail_priors() {
        let w = SyntheticWorld::random_gaussian_mixture(4, 2, 1.0, 1.0, RngSeed(1)).unwrap();
        let t = ScenarioTransform::LongTailSkew { head_classes: 2, head_weight: 500.0, tail_weight: 50.0 };
        let lt = apply_long_tail(&w, &t).unwrap();
        let expected = [10.0 / 22.0, 10.0 / 22.0, 1.0 / 22.0, 1.0 / 22.0];
        for (a, b) in lt.class_marginals().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let flat = ScenarioTransform::LongTailSkew { head_classes: 3, head_weight: 1.0, tail_weight: 1.0 };
        assert_eq!(apply_long_tail(&w, &flat).unwrap().class_marginals(), w.class_marginals());
        let bad = ScenarioTransform::LongTailSkew { head_classes: 4, head_weight: 1.0, tail_weight: 1.0 };
        assert!(matches!(apply_long_tail(&w, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn long_tail_only_moves_priors() {
        // posterior ratios change by exactly the prior-weight ratio
        let w = SyntheticWorld::random_gaussian_mixture(5, 3, 1.0, 1.0, RngSeed(6)).unwrap();
        let t = ScenarioTransform::LongTailSkew { head_classes: 2, head_weight: 10.0, tail_weight: 1.0 };
        let lt = apply_long_tail(&w, &t).unwrap();
        let x = [0.2, -0.4, 0.9];
        let (p, q) = (w.posterior(&x).unwrap(), lt.posterior(&x).unwrap());
        let r0 = (q.get(0) / q.get(4)) / (p.get(0) / p.get(4));
        assert!((r0 - 10.0).abs() < 1e-9);
        let r1 = (q.get(3) / q.get(4)) / (p.get(3) / p.get(4));
        assert!((r1 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn discrete_long_tail_matches_bruteforce_bayes() {
        let w = SyntheticWorld::discrete(vec![
            SupportPoint { x: vec![0.0], mass: 0.25, posterior: pv(&[0.5, 0.3, 0.2]) },
            SupportPoint { x: vec![1.0], mass: 0.75, posterior: pv(&[0.1, 0.1, 0.8]) },
        ])
        .unwrap();
        let t = ScenarioTransform::LongTailSkew { head_classes: 1, head_weight: 4.0, tail_weight: 1.0 };
        let lt = apply_long_tail(&w, &t).unwrap();
        // joint Pr(x, y) * w_y, normalized over everything
        let joint = [[0.125 * 4.0, 0.075, 0.05], [0.075 * 4.0, 0.075, 0.6]];
        let total: f64 = joint.iter().flatten().sum();
        for (i, row) in joint.iter().enumerate() {
            let px: f64 = row.iter().sum::<f64>() / total;
            let sp = &lt.support().unwrap()[i];
            assert!((sp.mass - px).abs() < 1e-12);
            for (k, v) in row.iter().enumerate() {
                assert!((sp.posterior.get(k) - v / total / px).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn discrete_total_probability() {
        let w = SyntheticWorld::discrete(vec![
            SupportPoint { x: vec![0.0], mass: 0.4, posterior: pv(&[0.5, 0.5]) },
            SupportPoint { x: vec![1.0], mass: 0.6, posterior: pv(&[0.9, 0.1]) },
        ])
        .unwrap();
        let m = w.class_marginals();
        assert!((m[0] - 0.74).abs() < 1e-12 && (m[1] - 0.26).abs() < 1e-12);
    }

    #[test]
    fn world_json_round_trip_and_validation() {
        let w = two_class_gmm((0.3, 0.7), (0.0, 2.0))
            .with_label_noise(&LabelNoise { classes: vec![1], flip_prob: 0.2 })
            .unwrap();
        let s = serde_json::to_string(&w).unwrap();
        assert_eq!(serde_json::from_str::<SyntheticWorld>(&s).unwrap(), w);
        let bad = r#"{"kind":"gaussian-mixture","components":[{"mean":[0],"stddev":0,"prior":0.5},{"mean":[1],"stddev":1,"prior":0.5}]}"#;
        assert!(serde_json::from_str::<SyntheticWorld>(bad).is_err());
        let bad_mass = r#"{"kind":"discrete","support":[{"x":[0],"mass":0.5,"posterior":[0.5,0.5]}]}"#;
        assert!(serde_json::from_str::<SyntheticWorld>(bad_mass).is_err());
    }
}
