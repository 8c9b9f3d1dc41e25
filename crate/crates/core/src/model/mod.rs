//! Survival data, outcome design matrices and the clustered Cox partial
//! likelihood.

mod data;
mod design;
mod likelihood;

pub use data::{read_dataset_csv, write_dataset_csv, Dataset, SurvivalRecord};
pub use design::{DesignMatrix, DesignSelector, OutcomeCoefficients};
pub use likelihood::{
    cluster_partial_log_lik, cluster_risk_set, partial_log_lik_gradient, subject_partial_log_lik_term,
    ClusteredCox, CoxEval,
};
