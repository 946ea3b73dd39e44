//! Finite-difference checks behind the `gradcheck` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fusion::{gradient_check, Architecture, BatchInputs, FusionMode, FusionModel};
use crate::numnet::Matrix;
use crate::smoothing::{default_encoder, init_mlp_a, Stage1Config};
use crate::survival::{cox_gradient, cox_loss, CoxBatch};

pub const COX_TOLERANCE: f64 = 1e-6;
pub const MODEL_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSummary {
    pub cox_instances: usize,
    pub cox_max_rel_error: f64,
    pub model_concat_max_rel_error: f64,
    pub model_kronecker_max_rel_error: f64,
    pub model_parameters: usize,
    pub model_kinks: usize,
    pub passed: bool,
}

/// Random Cox instance: `n ≤ 32`, integer times (so ties occur), at least one event.
pub fn random_cox_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, CoxBatch) {
    let n = rng.random_range(1..=32);
    let times: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(1..=n as u32))).collect();
    let mut events: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
    let k = rng.random_range(0..n);
    events[k] = true;
    let theta = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    (theta, CoxBatch::from_times(&times, &events).expect("valid instance"))
}

/// Largest per-instance relative error `|g - fd| / max(|g|, |fd|)` (Euclidean
/// norms) of `cox_gradient` against central differences.
pub fn cox_gradcheck(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (theta, batch) = random_cox_instance(&mut rng);
        let g = cox_gradient(&theta, &batch)?;
        let mut t = theta.clone();
        let (mut diff, mut ng, mut nf) = (0.0, 0.0, 0.0);
        for i in 0..theta.len() {
            t[i] = theta[i] + STEP;
            let up = cox_loss(&t, &batch)?;
            t[i] = theta[i] - STEP;
            let down = cox_loss(&t, &batch)?;
            t[i] = theta[i];
            let fd = (up - down) / (2.0 * STEP);
            diff += (g[i] - fd).powi(2);
            ng += g[i] * g[i];
            nf += fd * fd;
        }
        let scale = ng.max(nf).sqrt();
        if scale > 0.0 {
            worst = worst.max(diff.sqrt() / scale);
        }
    }
    Ok(worst)
}

/// Smallest model the end-to-end check runs on: every width ≤ 4, batch of 6.
pub fn tiny_model(mode: FusionMode, seed: u64) -> Result<FusionModel> {
    let arch = Architecture {
        snn_hidden: 4,
        snn_out: 3,
        hidden_dim: 4,
        genomic_dim: 3,
        image_hidden: 4,
        image_dim: 2,
        fusion_mode: mode,
    };
    let encoder = default_encoder(4, 3, seed)?;
    let mlp_a = init_mlp_a(
        3,
        &Stage1Config {
            hidden_dim: 4,
            feature_dim: 2,
            seed,
            ..Stage1Config::default()
        },
    )?;
    FusionModel::new(&arch, 4, 3, encoder, mlp_a, seed)
}

pub fn tiny_batch(seed: u64) -> Result<(BatchInputs, CoxBatch)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = BatchInputs {
        cnv_mut: Matrix::random_uniform(6, 4, 1.0, &mut rng),
        rna_features: Matrix::random_uniform(6, 2, 1.0, &mut rng),
        image: Matrix::random_uniform(6, 3, 1.0, &mut rng),
    };
    let batch = CoxBatch::from_times(
        &[2.0, 5.0, 1.0, 5.0, 3.0, 4.0],
        &[true, false, true, true, false, true],
    )?;
    Ok((x, batch))
}

pub fn run_suite(seed: u64) -> Result<GradcheckSummary> {
    let cox = cox_gradcheck(100, seed)?;
    let (x, batch) = tiny_batch(seed)?;
    let mut concat = tiny_model(FusionMode::Concat, seed)?;
    let mut kron = tiny_model(FusionMode::Kronecker, seed)?;
    let c = gradient_check(&mut concat, &x, &batch, STEP)?;
    let k = gradient_check(&mut kron, &x, &batch, STEP)?;
    Ok(GradcheckSummary {
        cox_instances: 100,
        cox_max_rel_error: cox,
        model_concat_max_rel_error: c.max_rel_error,
        model_kronecker_max_rel_error: k.max_rel_error,
        model_parameters: c.checked + k.checked,
        model_kinks: c.kinks + k.kinks,
        passed: cox <= COX_TOLERANCE && c.max_rel_error <= MODEL_TOLERANCE && k.max_rel_error <= MODEL_TOLERANCE,
    })
}
