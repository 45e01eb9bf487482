//! Base classifiers, the MLP engine and its optimizer.

pub mod adam;
pub mod classifier;
pub mod codec;
pub mod mlp;
pub(crate) mod train;

pub use adam::{adam_step, OptimizerState};
pub use classifier::{predict, predict_proba, train_classifier, Classifier, ClassifierArchitecture};
pub use mlp::{mlp_backward, mlp_forward, MlpModel};
pub use train::TrainingHyperparams;

use crate::error::Result;
use crate::prob::ProbVector;

/// Anything that maps an instance to class probabilities. Cascades and
/// evaluators are generic over this so tests can substitute instrumented
/// stubs for real classifiers.
pub trait ProbModel: Send + Sync {
    fn num_classes(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn predict_proba(&self, x: &[f64]) -> Result<ProbVector>;
}

impl ProbModel for Classifier {
    fn num_classes(&self) -> usize {
        Classifier::num_classes(self)
    }

    fn input_dim(&self) -> usize {
        Classifier::input_dim(self)
    }

    fn predict_proba(&self, x: &[f64]) -> Result<ProbVector> {
        Classifier::predict_proba(self, x)
    }
}

impl<M: ProbModel + ?Sized> ProbModel for &M {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }

    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }

    fn predict_proba(&self, x: &[f64]) -> Result<ProbVector> {
        (**self).predict_proba(x)
    }
}
