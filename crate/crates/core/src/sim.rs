//! Feature-level simulation of the distillation loop.
//!
//! Teacher features come from per-class Gaussian clusters. Student features
//! are a fixed random isometric map of the teacher features plus Gaussian
//! noise, with a seeded fraction of instances receiving amplified noise
//! ("ambiguous" instances). The student features and the adaptation map are
//! then trained directly by gradient descent on the total distillation loss,
//! regenerating prototypes from the current student every `refresh_period`
//! epochs.

use nalgebra::DMatrix;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_model::{FeatureRecord, GroupKey, Hyperparams, PairedFeatureSet};
use crate::pgm::generate_all_groups;
use crate::rdm::{group_operators, total_loss_with_operators, AdaptationMap, LossValues};
use crate::vecops::l2_distance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub classes: usize,
    pub n_per_class: usize,
    pub dim_t: usize,
    pub dim_s: usize,
    pub teacher_cluster_spread: f64,
    pub map_matrix_seed: u64,
    pub noise_seed: u64,
    pub noise_sigma: f64,
    pub ambiguous_fraction: f64,
    pub ambiguous_noise_multiplier: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            classes: 2,
            n_per_class: 200,
            dim_t: 16,
            dim_s: 24,
            teacher_cluster_spread: 3.0,
            map_matrix_seed: 0,
            noise_seed: 0,
            noise_sigma: 0.05,
            ambiguous_fraction: 0.15,
            ambiguous_noise_multiplier: 60.0,
            learning_rate: 0.02,
            epochs: 10,
            steps_per_epoch: 20,
        }
    }
}

impl SimConfig {
    /// Same layout with every source of noise removed.
    pub fn noiseless(self) -> Self {
        Self {
            noise_sigma: 0.0,
            ambiguous_fraction: 0.0,
            ..self
        }
    }

    /// Both generator seeds set to `seed`.
    pub fn with_seed(self, seed: u64) -> Self {
        Self {
            map_matrix_seed: seed,
            noise_seed: seed,
            ..self
        }
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.classes == 0 {
            return bad("classes must be at least 1");
        }
        if self.n_per_class < 2 {
            return bad("n_per_class must be at least 2");
        }
        if self.dim_t == 0 || self.dim_s == 0 {
            return bad("feature dimensions must be positive");
        }
        if !(self.teacher_cluster_spread.is_finite() && self.teacher_cluster_spread > 0.0) {
            return bad("teacher_cluster_spread must be positive");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative");
        }
        if !(0.0..1.0).contains(&self.ambiguous_fraction) {
            return bad("ambiguous_fraction must lie in [0, 1)");
        }
        if !(self.ambiguous_noise_multiplier.is_finite() && self.ambiguous_noise_multiplier >= 1.0) {
            return bad("ambiguous_noise_multiplier must be at least 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.epochs == 0 || self.steps_per_epoch == 0 {
            return bad("epochs and steps_per_epoch must be positive");
        }
        Ok(())
    }

    /// Ambiguous instances per class.
    pub fn ambiguous_per_class(&self) -> usize {
        (self.ambiguous_fraction * self.n_per_class as f64).round() as usize
    }
}

fn gaussian(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Random `dim_s x dim_t` map with orthonormal columns (or rows when the
/// student space is smaller), so inner products survive the map whenever
/// `dim_s >= dim_t`.
pub fn student_map(dim_t: usize, dim_s: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, cols) = (dim_t.max(dim_s), dim_t.min(dim_s));
    let raw = DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng));
    let q = raw.qr().q();
    if dim_s >= dim_t {
        q
    } else {
        q.transpose()
    }
}

pub fn synth_generate(config: &SimConfig) -> Result<PairedFeatureSet> {
    config.check()?;
    let map = student_map(config.dim_t, config.dim_s, config.map_matrix_seed);
    let mut teacher_rng = stream(config.noise_seed, 0);
    let mut pick_rng = stream(config.noise_seed, 1);
    let mut noise_rng = stream(config.noise_seed, 2);
    let n_amb = config.ambiguous_per_class();

    let mut records = Vec::with_capacity(config.classes * config.n_per_class);
    for class in 0..config.classes {
        let center = gaussian(&mut teacher_rng, config.dim_t, 1.0);
        let mut flagged = vec![false; config.n_per_class];
        for i in index::sample(&mut pick_rng, config.n_per_class, n_amb) {
            flagged[i] = true;
        }
        for (i, &ambiguous) in flagged.iter().enumerate() {
            let f_t: Vec<f64> = gaussian(&mut teacher_rng, config.dim_t, config.teacher_cluster_spread)
                .iter()
                .zip(&center)
                .map(|(d, c)| c + d)
                .collect();
            let scale = if ambiguous {
                config.noise_sigma * config.ambiguous_noise_multiplier
            } else {
                config.noise_sigma
            };
            let noise = gaussian(&mut noise_rng, config.dim_s, scale);
            let f_s: Vec<f64> = (0..config.dim_s)
                .map(|r| {
                    let mapped: f64 = (0..config.dim_t).map(|c| map[(r, c)] * f_t[c]).sum();
                    mapped + noise[r]
                })
                .collect();
            let mut record = FeatureRecord::new(
                (class * config.n_per_class + i) as u64,
                GroupKey::new(class as u32, 0),
                f_t,
                f_s,
            );
            record.ambiguous = Some(ambiguous);
            records.push(record);
        }
    }
    Ok(PairedFeatureSet::new(config.dim_t, config.dim_s, records))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupIndices {
    pub group: GroupKey,
    pub indices: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub refreshed: bool,
    /// Losses at the start of the epoch, after any refresh.
    pub loss: LossValues,
    pub prototypes: Vec<GroupIndices>,
    pub sigma_mean_clean: Option<f64>,
    pub sigma_mean_ambiguous: Option<f64>,
    pub mean_discrepancy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub hyper: Hyperparams,
    pub config: SimConfig,
    pub epochs: Vec<EpochRecord>,
    pub refresh_count: usize,
    pub instance_ids: Vec<u64>,
    pub ambiguous: Vec<Option<bool>>,
    pub initial_sigma: Vec<f64>,
    pub initial_discrepancy: Vec<f64>,
    pub final_loss: LossValues,
    pub final_sigma: Vec<f64>,
    pub final_discrepancy: Vec<f64>,
    pub final_student: Vec<Vec<f64>>,
    pub final_adaptation: AdaptationMap,
}

fn split_mean(values: &[f64], flags: &[Option<bool>], want: bool) -> Option<f64> {
    let picked: Vec<f64> = values
        .iter()
        .zip(flags)
        .filter(|(_, f)| f.unwrap_or(false) == want)
        .map(|(v, _)| *v)
        .collect();
    if picked.is_empty() {
        None
    } else {
        Some(picked.iter().sum::<f64>() / picked.len() as f64)
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Trains the student features and the adaptation map by plain gradient
/// descent. Teacher features are never modified.
pub fn run_distillation(set: &PairedFeatureSet, hyper: &Hyperparams, config: &SimConfig) -> Result<SimTrace> {
    set.ensure_valid()?;
    hyper.check()?;
    config.check()?;
    let lr = config.learning_rate;
    let flags: Vec<Option<bool>> = set.records.iter().map(|r| r.ambiguous).collect();

    let mut student = set.clone();
    let mut adapt = AdaptationMap::identity(set.dim_t, set.dim_s, false);
    let mut ops = None;
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut refresh_count = 0;
    let mut initial = None;

    for epoch in 0..config.epochs {
        let refreshed = epoch % hyper.refresh_period == 0;
        if refreshed {
            let protos = generate_all_groups(&student, hyper)?;
            let prototypes: Vec<GroupIndices> = protos
                .values()
                .map(|p| GroupIndices {
                    group: p.group,
                    indices: p.indices.clone(),
                })
                .collect();
            ops = Some((group_operators(&student, &protos, hyper.lambda, hyper.projection)?, prototypes));
            refresh_count += 1;
        }
        let (group_ops, prototypes) = ops.as_ref().expect("epoch 0 always refreshes");

        for step in 0..config.steps_per_epoch {
            let br = total_loss_with_operators(&student, group_ops, &adapt, hyper)?;
            if step == 0 {
                if initial.is_none() {
                    initial = Some((br.sigma.clone(), br.discrepancy.clone()));
                }
                epochs.push(EpochRecord {
                    epoch,
                    refreshed,
                    loss: br.values(),
                    prototypes: prototypes.clone(),
                    sigma_mean_clean: split_mean(&br.sigma, &flags, false),
                    sigma_mean_ambiguous: split_mean(&br.sigma, &flags, true),
                    mean_discrepancy: mean(&br.discrepancy),
                });
            }
            for (rec, g) in student.records.iter_mut().zip(&br.grad_student) {
                for (v, d) in rec.f_s.iter_mut().zip(g) {
                    *v -= lr * d;
                }
            }
            adapt.matrix -= &br.grad_adaptation * lr;
        }
    }

    let (group_ops, _) = ops.as_ref().expect("at least one epoch");
    let last = total_loss_with_operators(&student, group_ops, &adapt, hyper)?;
    let (initial_sigma, initial_discrepancy) = initial.expect("at least one step");
    Ok(SimTrace {
        hyper: *hyper,
        config: config.clone(),
        epochs,
        refresh_count,
        instance_ids: set.records.iter().map(|r| r.instance_id).collect(),
        ambiguous: flags,
        initial_sigma,
        initial_discrepancy,
        final_loss: last.values(),
        final_sigma: last.sigma,
        final_discrepancy: last.discrepancy,
        final_student: student.records.into_iter().map(|r| r.f_s).collect(),
        final_adaptation: adapt,
    })
}

/// Probability that a clean instance outranks an ambiguous one by `sigma`
/// (ties count half). `None` without both classes present.
pub fn sigma_auc(sigma: &[f64], ambiguous: &[Option<bool>]) -> Option<f64> {
    let clean: Vec<f64> = sigma
        .iter()
        .zip(ambiguous)
        .filter(|(_, a)| a.is_some_and(|a| !a))
        .map(|(s, _)| *s)
        .collect();
    let amb: Vec<f64> = sigma
        .iter()
        .zip(ambiguous)
        .filter(|(_, a)| a.unwrap_or(false))
        .map(|(s, _)| *s)
        .collect();
    if clean.is_empty() || amb.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for c in &clean {
        for a in &amb {
            if c > a {
                wins += 1.0;
            } else if c == a {
                wins += 0.5;
            }
        }
    }
    Some(wins / (clean.len() * amb.len()) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub loss_curve: Vec<LossValues>,
    pub final_loss: LossValues,
    pub loss_reduction: Option<f64>,
    pub refresh_count: usize,
    pub sigma_auc: Option<f64>,
    pub initial_mean_discrepancy: f64,
    pub final_mean_discrepancy: f64,
    /// Initial over final mean `||lambda_s - lambda_t||`.
    pub discrepancy_reduction: Option<f64>,
    /// Mean `||H(f_s) - f_t||` over clean instances after training.
    pub clean_feature_error: Option<f64>,
    pub ambiguous_feature_error: Option<f64>,
}

/// Per-instance `||H(f_s) - f_t||` for the trained student.
pub fn feature_errors(trace: &SimTrace, set: &PairedFeatureSet) -> Result<Vec<f64>> {
    if trace.final_student.len() != set.len() {
        return Err(Error::DimensionMismatch {
            what: "trace students vs records",
            expected: set.len(),
            actual: trace.final_student.len(),
        });
    }
    Ok(set
        .records
        .iter()
        .zip(&trace.final_student)
        .map(|(r, fs)| l2_distance(&trace.final_adaptation.apply(fs), &r.f_t))
        .collect())
}

pub fn report_metrics(trace: &SimTrace, set: &PairedFeatureSet) -> Result<SimReport> {
    let initial = mean(&trace.initial_discrepancy);
    let last = mean(&trace.final_discrepancy);
    let errors = feature_errors(trace, set)?;
    let start = trace.epochs.first().map(|e| e.loss.total);
    Ok(SimReport {
        loss_curve: trace.epochs.iter().map(|e| e.loss).collect(),
        final_loss: trace.final_loss,
        loss_reduction: start
            .filter(|_| trace.final_loss.total > 0.0)
            .map(|s| s / trace.final_loss.total),
        refresh_count: trace.refresh_count,
        sigma_auc: sigma_auc(&trace.final_sigma, &trace.ambiguous),
        initial_mean_discrepancy: initial,
        final_mean_discrepancy: last,
        discrepancy_reduction: if last > 0.0 { Some(initial / last) } else { None },
        clean_feature_error: split_mean(&errors, &trace.ambiguous, false),
        ambiguous_feature_error: split_mean(&errors, &trace.ambiguous, true),
    })
}
