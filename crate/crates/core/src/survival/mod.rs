//! Cox partial-likelihood machinery and Harrell's concordance index.
//!
//! Sign convention: [`cox_loss`] is the *negated* partial log-likelihood, so
//! every optimiser in the crate minimises it. Larger `theta` means higher
//! predicted risk (earlier expected event).

mod concordance;
mod cox;
mod linear;

use serde::{Deserialize, Serialize};

pub use concordance::{concordance_counts, concordance_index, ConcordanceCounts};
pub use cox::{build_risk_sets, cox_gradient, cox_loss, log_sum_exp, CoxBatch, RiskSet};
pub use linear::{LinearCox, LinearCoxConfig};

/// One patient: observed time, event indicator, per-modality features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub id: String,
    /// Observed time, strictly positive.
    pub time: f64,
    /// `true` when the event was observed (uncensored).
    pub event: bool,
    /// Copy-number and mutation features.
    pub cnv_mut: Vec<f64>,
    /// Bulk expression features.
    pub rna: Vec<f64>,
    /// Pathology image features.
    pub image: Vec<f64>,
}
