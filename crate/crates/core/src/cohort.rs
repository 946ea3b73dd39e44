//! Synthetic multi-modal survival cohorts, the cohort CSV format, and the
//! k-fold splitter.
//!
//! Each patient has a latent state `z ~ N(0, I)` and true log hazard
//! `h = hazard_coef · z`; survival time is exponential with rate `exp(h)`, so a
//! Cox model is exactly well specified. Every modality is a fixed seeded affine
//! map of `z` plus Gaussian noise: CNV/mutation and image features directly,
//! bulk RNA as a mixture of the shared cell-type atlas whose proportions shift
//! with `z`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Open01, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numnet::{dot, Matrix};
use crate::smoothing::cell_type_atlas;
use crate::survival::SurvivalRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSpec {
    pub n_patients: usize,
    pub latent_dim: usize,
    pub dim_cnv_mut: usize,
    pub dim_rna: usize,
    pub dim_image: usize,
    /// Noise scale of the genomic modalities (CNV/mutation and RNA).
    pub noise_g: f64,
    /// Noise scale of the image modality.
    pub noise_p: f64,
    pub censor_fraction_target: f64,
    /// True log-hazard coefficients; empty means the built-in default.
    pub hazard_coef: Vec<f64>,
    /// Leading latent coordinates visible to the CNV/mutation map; 0 means all.
    pub cnv_latent_dims: usize,
    /// Image features reuse the CNV/mutation map (requires equal dims).
    pub shared_image_map: bool,
    /// Relative size of the latent-driven shift in RNA cell-type proportions.
    pub rna_mix_scale: f64,
    pub num_cell_types: usize,
    pub atlas_seed: u64,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            n_patients: 600,
            latent_dim: 8,
            dim_cnv_mut: 32,
            dim_rna: 64,
            dim_image: 32,
            noise_g: 0.3,
            noise_p: 1.2,
            censor_fraction_target: 0.3,
            hazard_coef: Vec::new(),
            cnv_latent_dims: 2,
            shared_image_map: false,
            rna_mix_scale: 3.0,
            num_cell_types: crate::smoothing::DEFAULT_NUM_TYPES,
            atlas_seed: 17,
            seed: 0,
        }
    }
}

const DEFAULT_HAZARD: [f64; 8] = [1.0, -0.8, 0.6, 0.5, -0.4, 0.3, 0.2, -0.1];

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("cohort.n_patients", self.n_patients),
            ("cohort.latent_dim", self.latent_dim),
            ("cohort.dim_cnv_mut", self.dim_cnv_mut),
            ("cohort.dim_rna", self.dim_rna),
            ("cohort.dim_image", self.dim_image),
            ("cohort.num_cell_types", self.num_cell_types),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        for (name, v) in [("cohort.noise_g", self.noise_g), ("cohort.noise_p", self.noise_p)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("{v} must be non-negative")));
            }
        }
        if !(0.0..1.0).contains(&self.censor_fraction_target) {
            return Err(Error::invalid(
                "cohort.censor_fraction_target",
                format!("{} not in [0, 1)", self.censor_fraction_target),
            ));
        }
        if !self.hazard_coef.is_empty() && self.hazard_coef.len() != self.latent_dim {
            return Err(Error::invalid(
                "cohort.hazard_coef",
                format!("length {} != latent_dim {}", self.hazard_coef.len(), self.latent_dim),
            ));
        }
        if self.cnv_latent_dims > self.latent_dim {
            return Err(Error::invalid(
                "cohort.cnv_latent_dims",
                format!("{} exceeds latent_dim {}", self.cnv_latent_dims, self.latent_dim),
            ));
        }
        if self.shared_image_map && self.dim_image != self.dim_cnv_mut {
            return Err(Error::invalid(
                "cohort.shared_image_map",
                "requires dim_image == dim_cnv_mut",
            ));
        }
        if !(self.rna_mix_scale >= 0.0 && self.rna_mix_scale.is_finite()) {
            return Err(Error::invalid("cohort.rna_mix_scale", "must be non-negative"));
        }
        Ok(())
    }

    pub fn hazard(&self) -> Vec<f64> {
        if !self.hazard_coef.is_empty() {
            return self.hazard_coef.clone();
        }
        (0..self.latent_dim)
            .map(|i| DEFAULT_HAZARD.get(i).copied().unwrap_or(0.0))
            .collect()
    }
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_matrix<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Matrix {
    let data = (0..rows * cols).map(|_| scale * gaussian(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("finite gaussian matrix")
}

/// Independent stream for patient `index`; stream 0 holds the shared maps.
fn patient_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

struct Maps {
    cnv_mut: Matrix,
    image: Matrix,
    /// Centroid deviations from the mean profile, genes × cell types.
    rna_basis: Matrix,
    rna_mean: Vec<f64>,
    /// Cell-type proportion shift per latent unit, types × latent, rows sum to zero.
    rna_mix: Matrix,
}

fn build_maps(spec: &CohortSpec) -> Maps {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = 1.0 / (spec.latent_dim as f64).sqrt();
    let mut cnv_mut = gaussian_matrix(spec.dim_cnv_mut, spec.latent_dim, s, &mut rng);
    if spec.cnv_latent_dims > 0 {
        for r in 0..spec.dim_cnv_mut {
            cnv_mut.row_mut(r)[spec.cnv_latent_dims..].fill(0.0);
        }
    }
    let image = if spec.shared_image_map {
        cnv_mut.clone()
    } else {
        gaussian_matrix(spec.dim_image, spec.latent_dim, s, &mut rng)
    };
    let c = spec.num_cell_types;
    let atlas = cell_type_atlas(c, spec.dim_rna, spec.atlas_seed);
    let mut rna_mean = vec![0.0; spec.dim_rna];
    for row in atlas.iter_rows() {
        for (m, v) in rna_mean.iter_mut().zip(row) {
            *m += v / c as f64;
        }
    }
    let mut rna_basis = Matrix::zeros(spec.dim_rna, c);
    for t in 0..c {
        for g in 0..spec.dim_rna {
            rna_basis.set(g, t, atlas.get(t, g) - rna_mean[g]);
        }
    }
    // proportions are 1/c + shift, with shift of order rna_mix_scale / c
    let mut rna_mix = gaussian_matrix(c, spec.latent_dim, spec.rna_mix_scale * s / c as f64, &mut rng);
    for l in 0..spec.latent_dim {
        let mean = (0..c).map(|t| rna_mix.get(t, l)).sum::<f64>() / c as f64;
        for t in 0..c {
            rna_mix.set(t, l, rna_mix.get(t, l) - mean);
        }
    }
    Maps {
        cnv_mut,
        image,
        rna_basis,
        rna_mean,
        rna_mix,
    }
}

struct Draw {
    survival: f64,
    censor_unit: f64,
    record: SurvivalRecord,
}

fn draw_patient(spec: &CohortSpec, maps: &Maps, hazard: &[f64], index: usize) -> Draw {
    let mut rng = patient_rng(spec.seed, index);
    let z: Vec<f64> = (0..spec.latent_dim).map(|_| gaussian(&mut rng)).collect();
    let h = dot(hazard, &z);
    let u: f64 = rng.sample(Open01);
    let survival = -u.ln() / h.exp();
    let censor_unit: f64 = rng.sample(Open01);

    let noisy = |m: &Matrix, noise: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        m.iter_rows().map(|r| dot(r, &z) + noise * gaussian(rng)).collect()
    };
    let cnv_mut = noisy(&maps.cnv_mut, spec.noise_g, &mut rng);
    let shift: Vec<f64> = maps.rna_mix.iter_rows().map(|r| dot(r, &z)).collect();
    let rna = maps
        .rna_basis
        .iter_rows()
        .zip(&maps.rna_mean)
        .map(|(row, m)| m + dot(row, &shift) + spec.noise_g * gaussian(&mut rng))
        .collect();
    let image = noisy(&maps.image, spec.noise_p, &mut rng);
    Draw {
        survival,
        censor_unit,
        record: SurvivalRecord {
            id: format!("P{index:05}"),
            time: survival,
            event: true,
            cnv_mut,
            rna,
            image,
        },
    }
}

fn censored_fraction(draws: &[Draw], horizon: f64) -> f64 {
    let c = draws
        .iter()
        .filter(|d| horizon * d.censor_unit < d.survival)
        .count();
    c as f64 / draws.len() as f64
}

/// Realised censoring must land within this distance of the target.
const CENSOR_TOLERANCE: f64 = 0.1;

pub fn generate_cohort(spec: &CohortSpec) -> Result<Vec<SurvivalRecord>> {
    spec.validate()?;
    let maps = build_maps(spec);
    let hazard = spec.hazard();
    let mut draws: Vec<Draw> = (0..spec.n_patients)
        .map(|i| draw_patient(spec, &maps, &hazard, i))
        .collect();

    let target = spec.censor_fraction_target;
    if target > 0.0 {
        // censoring fraction is non-increasing in the horizon; bisect in log space
        let (mut lo, mut hi) = (1e-12_f64, 1.0_f64);
        while censored_fraction(&draws, hi) > target {
            hi *= 2.0;
            if hi > 1e300 {
                return Err(Error::invalid("cohort.censor_fraction_target", "calibration diverged"));
            }
        }
        for _ in 0..200 {
            let mid = (lo * hi).sqrt();
            if censored_fraction(&draws, mid) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let realised = censored_fraction(&draws, hi);
        if (realised - target).abs() > CENSOR_TOLERANCE {
            return Err(Error::invalid(
                "cohort.censor_fraction_target",
                format!("{target} unreachable, closest realised fraction {realised:.3}"),
            ));
        }
        for d in &mut draws {
            let c = hi * d.censor_unit;
            if c < d.survival {
                d.record.time = c;
                d.record.event = false;
            }
        }
    }
    Ok(draws.into_iter().map(|d| d.record).collect())
}

/// True log hazards `hazard_coef · z`, aligned with [`generate_cohort`].
pub fn true_log_hazards(spec: &CohortSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let hazard = spec.hazard();
    Ok((0..spec.n_patients)
        .map(|i| {
            let mut rng = patient_rng(spec.seed, i);
            let z: Vec<f64> = (0..spec.latent_dim).map(|_| gaussian(&mut rng)).collect();
            dot(&hazard, &z)
        })
        .collect())
}

fn cohort_header(dg: usize, dr: usize, dp: usize) -> Vec<String> {
    let mut h = vec!["id".to_string(), "time".into(), "event".into()];
    h.extend((0..dg).map(|i| format!("g{i}")));
    h.extend((0..dr).map(|i| format!("r{i}")));
    h.extend((0..dp).map(|i| format!("p{i}")));
    h
}

/// Writes `id,time,event,g*,r*,p*` with LF endings and round-trip decimals.
pub fn write_cohort(path: &Path, records: &[SurvivalRecord]) -> Result<()> {
    let first = records
        .first()
        .ok_or_else(|| Error::invalid("cohort", "no records to write"))?;
    let (dg, dr, dp) = (first.cnv_mut.len(), first.rna.len(), first.image.len());
    let mut out = cohort_header(dg, dr, dp).join(",");
    out.push('\n');
    for r in records {
        if (r.cnv_mut.len(), r.rna.len(), r.image.len()) != (dg, dr, dp) {
            return Err(Error::shape(
                format!("record {}", r.id),
                format!("{dg}/{dr}/{dp}"),
                format!("{}/{}/{}", r.cnv_mut.len(), r.rna.len(), r.image.len()),
            ));
        }
        if r.id.contains([',', '\n', '"']) {
            return Err(Error::invalid("record id", format!("{:?}", r.id)));
        }
        out.push_str(&r.id);
        out.push(',');
        out.push_str(&r.time.to_string());
        out.push(',');
        out.push(if r.event { '1' } else { '0' });
        for v in r.cnv_mut.iter().chain(&r.rna).chain(&r.image) {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

fn block_width(header: &[String], prefix: char, start: usize) -> usize {
    header[start..]
        .iter()
        .enumerate()
        .take_while(|(i, h)| **h == format!("{prefix}{i}"))
        .count()
}

pub fn load_cohort(path: &Path) -> Result<Vec<SurvivalRecord>> {
    let bad = |row: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        reason,
    };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    for (i, want) in ["id", "time", "event"].iter().enumerate() {
        if header.get(i).map(String::as_str) != Some(*want) {
            return Err(bad(1, format!("missing column {want:?} at position {i}")));
        }
    }
    let dg = block_width(&header, 'g', 3);
    let dr = block_width(&header, 'r', 3 + dg);
    let dp = block_width(&header, 'p', 3 + dg + dr);
    if dg == 0 || dr == 0 || dp == 0 || header.len() != 3 + dg + dr + dp {
        return Err(bad(
            1,
            "header must be id,time,event,g0..,r0..,p0.. with every block non-empty".into(),
        ));
    }
    let mut records = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| bad(row, e.to_string()))?;
        if rec.len() != header.len() {
            return Err(bad(row, format!("expected {} fields, found {}", header.len(), rec.len())));
        }
        let time: f64 = rec[1]
            .parse()
            .map_err(|_| bad(row, format!("bad time {:?}", &rec[1])))?;
        if !(time > 0.0 && time.is_finite()) {
            return Err(bad(row, format!("time must be positive, got {time}")));
        }
        let event = match &rec[2] {
            "0" => false,
            "1" => true,
            other => return Err(bad(row, format!("event must be 0 or 1, got {other:?}"))),
        };
        let mut values = Vec::with_capacity(dg + dr + dp);
        for (j, s) in rec.iter().enumerate().skip(3) {
            let v: f64 = s
                .parse()
                .map_err(|_| bad(row, format!("bad value {s:?} in column {}", header[j])))?;
            if !v.is_finite() {
                return Err(bad(row, format!("non-finite value in column {}", header[j])));
            }
            values.push(v);
        }
        let image = values.split_off(dg + dr);
        let rna = values.split_off(dg);
        records.push(SurvivalRecord {
            id: rec[0].to_string(),
            time,
            event,
            cnv_mut: values,
            rna,
            image,
        });
    }
    if records.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "cohort has no records".into(),
        });
    }
    Ok(records)
}

/// Assignment of every patient id to one of `k` folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldPlan {
    /// Record indices held out in `fold`, in record order.
    pub fn test_indices(&self, records: &[SurvivalRecord], fold: usize) -> Vec<usize> {
        self.select(records, |f| f == fold)
    }

    pub fn train_indices(&self, records: &[SurvivalRecord], fold: usize) -> Vec<usize> {
        self.select(records, |f| f != fold)
    }

    fn select(&self, records: &[SurvivalRecord], keep: impl Fn(usize) -> bool) -> Vec<usize> {
        records
            .iter()
            .enumerate()
            .filter(|(_, r)| self.assignments.get(&r.id).is_some_and(|&f| keep(f)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// Checks the partition invariants against `records`.
    pub fn validate(&self, records: &[SurvivalRecord]) -> Result<()> {
        if self.assignments.len() != records.len() {
            return Err(Error::invalid("fold plan", "does not cover the cohort exactly"));
        }
        let mut events = vec![0usize; self.k];
        for r in records {
            let f = *self
                .assignments
                .get(&r.id)
                .ok_or_else(|| Error::invalid("fold plan", format!("record {} unassigned", r.id)))?;
            if f >= self.k {
                return Err(Error::invalid("fold plan", format!("fold {f} >= k {}", self.k)));
            }
            events[f] += usize::from(r.event);
        }
        let sizes = self.fold_sizes();
        let (lo, hi) = (sizes.iter().min().unwrap_or(&0), sizes.iter().max().unwrap_or(&0));
        if hi - lo > 1 {
            return Err(Error::invalid("fold plan", format!("fold sizes range {lo}..{hi}")));
        }
        if let Some(f) = events.iter().position(|&e| e == 0) {
            return Err(Error::invalid("fold plan", format!("fold {f} has no uncensored record")));
        }
        Ok(())
    }
}

/// Seeded shuffle, round-robin assignment, then swaps that give every fold at
/// least one uncensored record while keeping sizes unchanged.
pub fn split_folds(records: &[SurvivalRecord], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::invalid("k_folds", format!("{k} must be at least 2")));
    }
    if records.len() < k {
        return Err(Error::invalid(
            "k_folds",
            format!("{k} folds need at least {k} records, have {}", records.len()),
        ));
    }
    let n_events = records.iter().filter(|r| r.event).count();
    if n_events < k {
        return Err(Error::invalid(
            "k_folds",
            format!("{k} folds need at least {k} uncensored records, have {n_events}"),
        ));
    }
    let mut ids: BTreeMap<&str, ()> = BTreeMap::new();
    for r in records {
        if ids.insert(&r.id, ()).is_some() {
            return Err(Error::invalid("record id", format!("duplicate {:?}", r.id)));
        }
    }

    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (pos, &i) in order.iter().enumerate() {
        folds[pos % k].push(i);
    }
    let count = |f: &Vec<usize>| f.iter().filter(|&&i| records[i].event).count();
    loop {
        let Some(poor) = folds.iter().position(|f| count(f) == 0) else {
            break;
        };
        let rich = (0..k)
            .max_by_key(|&f| (count(&folds[f]), std::cmp::Reverse(f)))
            .expect("k >= 2");
        // n_events >= k guarantees a fold with two or more events while one has none
        let donor_pos = folds[rich]
            .iter()
            .position(|&i| records[i].event)
            .expect("rich fold has an event");
        let recv_pos = 0; // every member of `poor` is censored
        let a = folds[rich][donor_pos];
        let b = folds[poor][recv_pos];
        folds[rich][donor_pos] = b;
        folds[poor][recv_pos] = a;
    }
    let mut assignments = BTreeMap::new();
    for (f, members) in folds.iter().enumerate() {
        for &i in members {
            assignments.insert(records[i].id.clone(), f);
        }
    }
    let plan = FoldPlan { k, assignments };
    plan.validate(records)?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, seed: u64) -> CohortSpec {
        CohortSpec {
            n_patients: n,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_cohort(&small(50, 3)).unwrap();
        let b = generate_cohort(&small(50, 3)).unwrap();
        assert_eq!(a, b);
        let c = generate_cohort(&small(50, 4)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn dims_and_positivity() {
        let spec = small(40, 1);
        let recs = generate_cohort(&spec).unwrap();
        assert_eq!(recs.len(), 40);
        for r in &recs {
            assert!(r.time > 0.0);
            assert_eq!(r.cnv_mut.len(), spec.dim_cnv_mut);
            assert_eq!(r.rna.len(), spec.dim_rna);
            assert_eq!(r.image.len(), spec.dim_image);
        }
    }

    #[test]
    fn censoring_is_calibrated() {
        let recs = generate_cohort(&small(600, 9)).unwrap();
        let frac = recs.iter().filter(|r| !r.event).count() as f64 / 600.0;
        assert!((frac - 0.3).abs() <= 0.1, "{frac}");

        let none = CohortSpec {
            censor_fraction_target: 0.0,
            ..small(30, 2)
        };
        assert!(generate_cohort(&none).unwrap().iter().all(|r| r.event));
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let bad = CohortSpec {
            censor_fraction_target: 1.0,
            ..Default::default()
        };
        assert!(generate_cohort(&bad).unwrap_err().to_string().contains("censor_fraction_target"));
        let bad = CohortSpec {
            dim_rna: 0,
            ..Default::default()
        };
        assert!(generate_cohort(&bad).unwrap_err().to_string().contains("dim_rna"));
    }

    #[test]
    fn folds_partition_evenly() {
        let recs = generate_cohort(&small(30, 5)).unwrap();
        let plan = split_folds(&recs, 15, 1).unwrap();
        assert_eq!(plan.fold_sizes(), vec![2; 15]);
        let mut seen = vec![false; 30];
        for f in 0..15 {
            for i in plan.test_indices(&recs, f) {
                assert!(!seen[i]);
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
        assert_eq!(plan, split_folds(&recs, 15, 1).unwrap());
    }

    #[test]
    fn repair_gives_each_fold_an_event() {
        let mut recs = generate_cohort(&small(30, 6)).unwrap();
        // exactly 15 events, all in the first half
        for (i, r) in recs.iter_mut().enumerate() {
            r.event = i < 15;
        }
        for seed in 0..20 {
            let plan = split_folds(&recs, 15, seed).unwrap();
            plan.validate(&recs).unwrap();
        }
        recs[0].event = false;
        assert!(split_folds(&recs, 15, 0).is_err());
    }

    #[test]
    fn too_few_records() {
        let recs = generate_cohort(&small(10, 0)).unwrap();
        assert!(split_folds(&recs, 15, 0).is_err());
    }
}
