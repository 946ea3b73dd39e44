//! Contribution-discrepancy ratios between the genomic and image branches and
//! the tanh-capped learning-rate factors derived from them.
//!
//! For each uncensored sample `k` with risk set `R(t_k)` the branch
//! contribution is
//!
//! ```text
//! r^G_k = s^G_k / Σ_{j ∈ R(t_k)} exp(s^G_j),   s^G = W^G·G + b/2
//! ```
//!
//! (and likewise for the image branch). The per-sample ratio `r^G_k / r^P_k`
//! is aggregated over the batch into `ρ^G`, clamped, and `ρ^P = 1/ρ^G`. A
//! branch's step size is scaled by `min(1 − tanh(ρ − 1), 1)`, so only the
//! branch with `ρ > 1` is ever slowed down.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numnet::{dot, Matrix, ParamGroup};
use crate::survival::{log_sum_exp, CoxBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    Mean,
    Median,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModulationConfig {
    pub enabled: bool,
    pub rho_min: f64,
    pub rho_max: f64,
    pub epsilon: f64,
    pub aggregate: Aggregate,
    /// Exponentiate the score in the numerator as well (softmax reading).
    pub exp_numerator: bool,
    /// Optimisation steps before modulation starts acting.
    pub warmup_steps: usize,
}

impl Default for ModulationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            rho_min: 0.1,
            rho_max: 10.0,
            epsilon: 1e-8,
            aggregate: Aggregate::Mean,
            exp_numerator: false,
            warmup_steps: 0,
        }
    }
}

impl ModulationConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho_min > 0.0 && self.rho_min < 1.0) {
            return Err(Error::invalid("modulation.rho_min", format!("{} not in (0, 1)", self.rho_min)));
        }
        if !(self.rho_max > 1.0 && self.rho_max.is_finite()) {
            return Err(Error::invalid("modulation.rho_max", format!("{} must exceed 1", self.rho_max)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid("modulation.epsilon", format!("{} must be positive", self.epsilon)));
        }
        Ok(())
    }
}

/// Per-batch contribution ratios and the resulting step-size factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionReport {
    /// Aggregated ratio before clamping.
    pub rho_g_raw: f64,
    /// `1 / rho_g_raw`.
    pub rho_p_raw: f64,
    /// Clamped ratio used for the factors.
    pub rho_g: f64,
    /// `1 / rho_g`.
    pub rho_p: f64,
    pub factor_g: f64,
    pub factor_p: f64,
    pub per_sample_ratios: Vec<f64>,
    /// No uncensored samples, or a non-finite aggregate; the report is neutral.
    pub degenerate: bool,
}

impl ContributionReport {
    pub fn neutral() -> Self {
        Self {
            rho_g_raw: 1.0,
            rho_p_raw: 1.0,
            rho_g: 1.0,
            rho_p: 1.0,
            factor_g: 1.0,
            factor_p: 1.0,
            per_sample_ratios: Vec::new(),
            degenerate: true,
        }
    }
}

/// Splits the fused score into branch scores: `s_g = W^G·G_k + b/2`,
/// `s_p = W^P·P_k + b/2`, so `s_g + s_p = θ`.
pub fn branch_scores(
    wg: &[f64],
    g: &Matrix,
    wp: &[f64],
    p: &Matrix,
    bias: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if g.cols() != wg.len() {
        return Err(Error::shape("branch_scores W^G", g.cols(), wg.len()));
    }
    if p.cols() != wp.len() {
        return Err(Error::shape("branch_scores W^P", p.cols(), wp.len()));
    }
    if g.rows() != p.rows() {
        return Err(Error::shape("branch_scores batch", g.rows(), p.rows()));
    }
    let half = bias / 2.0;
    let s_g = g.iter_rows().map(|row| dot(wg, row) + half).collect();
    let s_p = p.iter_rows().map(|row| dot(wp, row) + half).collect();
    Ok((s_g, s_p))
}

fn guard(r: f64, eps: f64) -> f64 {
    if r.abs() >= eps {
        r
    } else if r < 0.0 {
        -eps
    } else {
        eps
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn contribution(scores: &[f64], k: usize, members: &[usize], exp_numerator: bool) -> f64 {
    let lse = log_sum_exp(scores, members);
    if exp_numerator {
        (scores[k] - lse).exp()
    } else {
        scores[k] * (-lse).exp()
    }
}

/// Computes `ρ^G`, `ρ^P` and both factors for one batch.
pub fn contribution_ratio(
    s_g: &[f64],
    s_p: &[f64],
    batch: &CoxBatch,
    cfg: &ModulationConfig,
) -> Result<ContributionReport> {
    if s_g.len() != batch.len() || s_p.len() != batch.len() {
        return Err(Error::shape(
            "contribution_ratio scores",
            batch.len(),
            format!("{} / {}", s_g.len(), s_p.len()),
        ));
    }
    if let Some(i) = s_g.iter().chain(s_p).position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("branch score {i}")));
    }
    if batch.is_degenerate() {
        return Ok(ContributionReport::neutral());
    }
    let per_sample_ratios: Vec<f64> = batch
        .risk_sets()
        .iter()
        .map(|rs| {
            let rg = contribution(s_g, rs.event_index, &rs.members, cfg.exp_numerator);
            let rp = contribution(s_p, rs.event_index, &rs.members, cfg.exp_numerator);
            guard(rg, cfg.epsilon) / guard(rp, cfg.epsilon)
        })
        .collect();
    let raw = match cfg.aggregate {
        Aggregate::Mean => per_sample_ratios.iter().sum::<f64>() / per_sample_ratios.len() as f64,
        Aggregate::Median => median(&per_sample_ratios),
    };
    if !raw.is_finite() || raw == 0.0 {
        return Ok(ContributionReport {
            per_sample_ratios,
            rho_g_raw: raw,
            rho_p_raw: 1.0 / raw,
            ..ContributionReport::neutral()
        });
    }
    let rho_g = raw.clamp(cfg.rho_min, cfg.rho_max);
    let rho_p = 1.0 / rho_g;
    Ok(ContributionReport {
        rho_g_raw: raw,
        rho_p_raw: 1.0 / raw,
        rho_g,
        rho_p,
        factor_g: modulation_factor(rho_g),
        factor_p: modulation_factor(rho_p),
        per_sample_ratios,
        degenerate: false,
    })
}

/// `min(1 − tanh(ρ − 1), 1)`, evaluated as `2 / (1 + e^{2(ρ−1)})` above 1 so
/// large ratios do not cancel to zero.
pub fn modulation_factor(rho: f64) -> f64 {
    if rho <= 1.0 {
        return 1.0;
    }
    2.0 / (1.0 + (2.0 * (rho - 1.0)).exp())
}

/// Sets the branch learning-rate scales from `report`. With modulation disabled
/// both scales are reset to 1. The fusion head is never part of either group.
pub fn apply_modulation(
    report: &ContributionReport,
    cfg: &ModulationConfig,
    genomic: &mut ParamGroup<'_>,
    image: &mut ParamGroup<'_>,
) -> Result<()> {
    if !cfg.enabled {
        genomic.set_lr_scale(1.0)?;
        return image.set_lr_scale(1.0);
    }
    genomic.set_lr_scale(report.factor_g)?;
    image.set_lr_scale(report.factor_p)
}
