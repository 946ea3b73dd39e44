use super::SurvivalRecord;
use crate::error::{Error, Result};

/// Risk set of one uncensored sample: every index whose time is `>=` its time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RiskSet {
    pub event_index: usize,
    pub members: Vec<usize>,
}

/// A batch with precomputed risk sets (Breslow ties: equal times share sets).
#[derive(Debug, Clone, PartialEq)]
pub struct CoxBatch {
    times: Vec<f64>,
    events: Vec<bool>,
    risk_sets: Vec<RiskSet>,
}

impl CoxBatch {
    pub fn from_times(times: &[f64], events: &[bool]) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::invalid("batch", "empty"));
        }
        if times.len() != events.len() {
            return Err(Error::shape("CoxBatch events", times.len(), events.len()));
        }
        if let Some(i) = times.iter().position(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(Error::invalid(
                format!("time of sample {i}"),
                format!("{} must be positive and finite", times[i]),
            ));
        }
        // members of each risk set are listed in ascending index order
        let mut order: Vec<usize> = (0..times.len()).collect();
        order.sort_by(|&a, &b| times[b].total_cmp(&times[a]).then(a.cmp(&b)));
        let mut risk_sets = Vec::new();
        let mut at_risk: Vec<usize> = Vec::with_capacity(times.len());
        let mut pos = 0;
        while pos < order.len() {
            let t = times[order[pos]];
            let end = order[pos..]
                .iter()
                .position(|&i| times[i] != t)
                .map_or(order.len(), |o| pos + o);
            at_risk.extend_from_slice(&order[pos..end]);
            let mut members = at_risk.clone();
            members.sort_unstable();
            for &k in &order[pos..end] {
                if events[k] {
                    risk_sets.push(RiskSet {
                        event_index: k,
                        members: members.clone(),
                    });
                }
            }
            pos = end;
        }
        risk_sets.sort_by_key(|r| r.event_index);
        Ok(Self {
            times: times.to_vec(),
            events: events.to_vec(),
            risk_sets,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn events(&self) -> &[bool] {
        &self.events
    }

    /// One entry per uncensored sample, ordered by sample index.
    pub fn risk_sets(&self) -> &[RiskSet] {
        &self.risk_sets
    }

    /// No uncensored samples: the loss is identically zero.
    pub fn is_degenerate(&self) -> bool {
        self.risk_sets.is_empty()
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.len() {
            return Err(Error::shape("theta", self.len(), theta.len()));
        }
        if let Some(i) = theta.iter().position(|t| !t.is_finite()) {
            return Err(Error::NonFinite(format!("theta[{i}]")));
        }
        Ok(())
    }
}

pub fn build_risk_sets(records: &[SurvivalRecord]) -> Result<CoxBatch> {
    let times: Vec<f64> = records.iter().map(|r| r.time).collect();
    let events: Vec<bool> = records.iter().map(|r| r.event).collect();
    CoxBatch::from_times(&times, &events)
}

/// `log Σ exp(values[i])` over `idx`, with max subtraction.
pub fn log_sum_exp(values: &[f64], idx: &[usize]) -> f64 {
    let m = idx
        .iter()
        .map(|&j| values[j])
        .fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + idx.iter().map(|&j| (values[j] - m).exp()).sum::<f64>().ln()
}

/// Negative Cox partial log-likelihood:
/// `Σ_{k uncensored} ( log Σ_{j ∈ R(t_k)} exp θ_j − θ_k )`.
///
/// Every term is non-negative because `k ∈ R(t_k)`.
pub fn cox_loss(theta: &[f64], batch: &CoxBatch) -> Result<f64> {
    batch.check_theta(theta)?;
    Ok(batch
        .risk_sets
        .iter()
        .map(|rs| log_sum_exp(theta, &rs.members) - theta[rs.event_index])
        .fold(0.0, |acc, v| acc + v))
}

/// Exact gradient of [`cox_loss`]:
/// `∂L/∂θ_i = Σ_{k: i ∈ R(t_k)} softmax_{R(t_k)}(θ)_i − 1{i uncensored}`.
pub fn cox_gradient(theta: &[f64], batch: &CoxBatch) -> Result<Vec<f64>> {
    batch.check_theta(theta)?;
    let mut grad = vec![0.0; theta.len()];
    for rs in &batch.risk_sets {
        let lse = log_sum_exp(theta, &rs.members);
        for &j in &rs.members {
            grad[j] += (theta[j] - lse).exp();
        }
        grad[rs.event_index] -= 1.0;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(times: &[f64], events: &[u8]) -> CoxBatch {
        let ev: Vec<bool> = events.iter().map(|&e| e == 1).collect();
        CoxBatch::from_times(times, &ev).unwrap()
    }

    fn members(b: &CoxBatch) -> Vec<(usize, Vec<usize>)> {
        b.risk_sets()
            .iter()
            .map(|r| (r.event_index, r.members.clone()))
            .collect()
    }

    #[test]
    fn risk_sets_follow_definition() {
        let b = batch(&[1.0, 2.0, 3.0], &[1, 1, 1]);
        assert_eq!(
            members(&b),
            vec![(0, vec![0, 1, 2]), (1, vec![1, 2]), (2, vec![2])]
        );
    }

    #[test]
    fn tied_times_share_risk_set() {
        let b = batch(&[2.0, 2.0], &[1, 1]);
        assert_eq!(members(&b), vec![(0, vec![0, 1]), (1, vec![0, 1])]);
    }

    #[test]
    fn censored_samples_have_no_risk_set() {
        let b = batch(&[1.0, 2.0], &[0, 1]);
        assert_eq!(members(&b), vec![(1, vec![1])]);
    }

    #[test]
    fn rejects_bad_times() {
        assert!(CoxBatch::from_times(&[1.0, 0.0], &[true, true]).is_err());
        assert!(CoxBatch::from_times(&[-1.0], &[true]).is_err());
        assert!(CoxBatch::from_times(&[f64::NAN], &[true]).is_err());
        assert!(CoxBatch::from_times(&[], &[]).is_err());
    }

    #[test]
    fn loss_spot_values() {
        assert_eq!(cox_loss(&[0.0], &batch(&[1.0], &[1])).unwrap(), 0.0);
        let b = batch(&[1.0, 2.0, 3.0], &[1, 1, 1]);
        let l = cox_loss(&[0.0, 0.0, 0.0], &b).unwrap();
        assert!((l - (3f64.ln() + 2f64.ln())).abs() < 1e-12);
        assert!((l - 1.791759).abs() < 1e-6);
    }

    #[test]
    fn all_censored_is_degenerate_zero() {
        let b = batch(&[1.0, 2.0, 5.0], &[0, 0, 0]);
        assert!(b.is_degenerate());
        assert_eq!(cox_loss(&[0.3, -2.0, 9.0], &b).unwrap(), 0.0);
        assert_eq!(cox_gradient(&[0.3, -2.0, 9.0], &b).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn gradient_spot_values() {
        assert_eq!(cox_gradient(&[0.0], &batch(&[1.0], &[1])).unwrap(), vec![0.0]);
        let g = cox_gradient(&[0.0, 0.0], &batch(&[1.0, 2.0], &[1, 1])).unwrap();
        assert_eq!(g, vec![-0.5, 0.5]);
    }

    #[test]
    fn theta_length_checked() {
        let b = batch(&[1.0, 2.0], &[1, 1]);
        assert!(cox_loss(&[0.0], &b).is_err());
        assert!(cox_gradient(&[0.0, f64::INFINITY], &b).is_err());
    }

    #[test]
    fn large_theta_is_stable() {
        let b = batch(&[1.0, 2.0], &[1, 1]);
        let l = cox_loss(&[800.0, 800.0], &b).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }
}
