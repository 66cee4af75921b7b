//! Dataset preparation: domain selection, balancing, folds and label
//! matrices.

pub mod balance;
pub mod domain;
pub mod folds;
pub mod labels;

pub use balance::{balance_classes, balance_indices, oversample, undersample, BalanceConfig};
pub use domain::{domain_stats, domain_word_count, select_domains, DomainStats};
pub use folds::{kfold_split, FoldSplit};
pub use labels::{binarize_labels, observed_types, LabelMatrix, LabelMode, NO_PII_COLUMN};
