//! Window-level apnea detection: features, standardization, the per-signal
//! SVM experts with their aggregator, and leave-one-subject-out folds.

pub mod ensemble;
pub mod features;
pub mod loso;
pub mod scaler;
pub mod svm;

pub use ensemble::{EnsembleConfig, SvmEnsemble, MODEL_FORMAT_VERSION};
pub use features::{mean_crossings, signal_features, FeatureVector, Label, LabeledWindow, SignalFeatures, NUM_SIGNALS};
pub use loso::{loso_split, run_loso, Fold, FoldOutcome};
pub use scaler::Scaler;
pub use svm::{train_svm, Svm, SvmConfig};
