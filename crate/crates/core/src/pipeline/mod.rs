//! Supervised classifier and the evaluation protocol: in-distribution
//! cross-validation, zero-shot and few-shot out-of-distribution testing of
//! the baseline, enhancement, contrastive and combined variants.

mod classifier;
mod experiment;
mod spec;

pub use classifier::{
    continue_training, extract_features, train_classifier, train_head, Classifier, ClassifierConfig,
    LogisticHead, TrainMode,
};
pub use experiment::{
    load_corpus, run_experiment, AuditEntry, ExperimentReport, FewShotRecord, FractionStat, LabeledCorpus,
    OodRecord, OodRow, ScoredSet, SeedRun, Stat, VariantRow,
};
pub use spec::{CorpusSource, DataSpec, ExperimentSpec, Variant};
