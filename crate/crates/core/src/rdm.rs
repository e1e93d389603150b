//! Global knowledge and robust distillation losses.
//!
//! Every instance is projected onto its group's prototypes in both spaces,
//! giving coefficient vectors `(lambda_t, lambda_s)`. Their distance drives
//! the robustness weight `sigma = clamp(1 - ||lambda_s - lambda_t||, 0, 1)`,
//! which scales the global, feature and response losses. Gradients are taken
//! with respect to the student features (and the adaptation map) while
//! `sigma`, the teacher and the prototypes are held constant.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_model::{GroupKey, Hyperparams, PairedFeatureSet};
use crate::pgm::{solve_from_moments, solve_pair_coefficients, PrototypeSet};
use crate::vecops::{dot, l2_distance, norm_sq, sub_scaled};

/// How instance coefficients are computed from the prototypes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    /// Sequential coupled solve per prototype in selection order, deflating
    /// the residuals after each one.
    #[default]
    Greedy,
    /// Joint regularised least squares over all prototypes at once.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionPair {
    pub lambda_t: Vec<f64>,
    pub lambda_s: Vec<f64>,
}

impl ProjectionPair {
    /// `||lambda_s - lambda_t||_2`
    pub fn discrepancy(&self) -> f64 {
        l2_distance(&self.lambda_s, &self.lambda_t)
    }
}

fn check_dims(f_t: &[f64], f_s: &[f64], protos: &PrototypeSet) -> Result<()> {
    if protos.is_empty() {
        return Err(Error::EmptyBasis);
    }
    if f_t.len() != protos.dim_t() {
        return Err(Error::DimensionMismatch {
            what: "teacher feature vs prototypes",
            expected: protos.dim_t(),
            actual: f_t.len(),
        });
    }
    if f_s.len() != protos.dim_s() {
        return Err(Error::DimensionMismatch {
            what: "student feature vs prototypes",
            expected: protos.dim_s(),
            actual: f_s.len(),
        });
    }
    Ok(())
}

/// Sequential projection of one feature pair onto `protos`.
pub fn project(f_t: &[f64], f_s: &[f64], protos: &PrototypeSet, lambda: f64) -> Result<ProjectionPair> {
    check_dims(f_t, f_s, protos)?;
    let mut r_t = f_t.to_vec();
    let mut r_s = f_s.to_vec();
    let k = protos.len();
    let mut out = ProjectionPair {
        lambda_t: Vec::with_capacity(k),
        lambda_s: Vec::with_capacity(k),
    };
    for (g_t, g_s) in protos.g_t.iter().zip(&protos.g_s) {
        let (wt, ws) = solve_pair_coefficients(&r_t, &r_s, g_t, g_s, lambda)?;
        sub_scaled(&mut r_t, wt, g_t);
        sub_scaled(&mut r_s, ws, g_s);
        out.lambda_t.push(wt);
        out.lambda_s.push(ws);
    }
    Ok(out)
}

fn joint_system(protos: &PrototypeSet, lambda: f64) -> DMatrix<f64> {
    let k = protos.len();
    let mut sys = DMatrix::zeros(2 * k, 2 * k);
    for a in 0..k {
        for b in 0..k {
            sys[(a, b)] = dot(&protos.g_t[a], &protos.g_t[b]);
            sys[(k + a, k + b)] = dot(&protos.g_s[a], &protos.g_s[b]);
        }
        sys[(a, a)] += lambda;
        sys[(k + a, k + a)] += lambda;
        sys[(a, k + a)] = -lambda;
        sys[(k + a, a)] = -lambda;
    }
    sys
}

fn joint_solve(sys: DMatrix<f64>, rhs: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let scale = sys.amax().max(1.0);
    let lu = sys.lu();
    let det = lu.determinant();
    if !det.is_finite() || det.abs() <= 1e-12 * scale.powi(lu.l().nrows() as i32) {
        return Err(Error::DegenerateAtom { det });
    }
    lu.solve(&rhs).ok_or(Error::DegenerateAtom { det })
}

/// Joint least-squares projection: minimises
/// `||f_t - G_t x_t||^2 + ||f_s - G_s x_s||^2 + lambda ||x_t - x_s||^2`.
pub fn project_joint(
    f_t: &[f64],
    f_s: &[f64],
    protos: &PrototypeSet,
    lambda: f64,
) -> Result<ProjectionPair> {
    check_dims(f_t, f_s, protos)?;
    let k = protos.len();
    let mut rhs = DMatrix::zeros(2 * k, 1);
    for a in 0..k {
        rhs[(a, 0)] = dot(&protos.g_t[a], f_t);
        rhs[(k + a, 0)] = dot(&protos.g_s[a], f_s);
    }
    let x = joint_solve(joint_system(protos, lambda), rhs)?;
    Ok(ProjectionPair {
        lambda_t: (0..k).map(|a| x[(a, 0)]).collect(),
        lambda_s: (0..k).map(|a| x[(k + a, 0)]).collect(),
    })
}

pub fn project_with_mode(
    f_t: &[f64],
    f_s: &[f64],
    protos: &PrototypeSet,
    lambda: f64,
    mode: ProjectionMode,
) -> Result<ProjectionPair> {
    match mode {
        ProjectionMode::Greedy => project(f_t, f_s, protos, lambda),
        ProjectionMode::Joint => project_joint(f_t, f_s, protos, lambda),
    }
}

/// The linear map behind projection: `lambda_t = m_t [f_t; f_s]` and
/// `lambda_s = m_s [f_t; f_s]`, each `K x (D_t + D_s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionOperator {
    pub m_t: DMatrix<f64>,
    pub m_s: DMatrix<f64>,
    pub dim_t: usize,
    pub dim_s: usize,
}

impl ProjectionOperator {
    pub fn k(&self) -> usize {
        self.m_t.nrows()
    }

    pub fn apply(&self, f_t: &[f64], f_s: &[f64]) -> ProjectionPair {
        let x = DVector::from_iterator(self.dim_t + self.dim_s, f_t.iter().chain(f_s).copied());
        ProjectionPair {
            lambda_t: (&self.m_t * &x).iter().copied().collect(),
            lambda_s: (&self.m_s * &x).iter().copied().collect(),
        }
    }

    /// `m_s - m_t`, mapping a joint feature to `lambda_s - lambda_t`.
    pub fn difference(&self) -> DMatrix<f64> {
        &self.m_s - &self.m_t
    }
}

/// Materialises the sequential projection by pushing residual operators
/// through the same deflation steps.
pub fn projection_operator(protos: &PrototypeSet, lambda: f64) -> Result<ProjectionOperator> {
    if protos.is_empty() {
        return Err(Error::EmptyBasis);
    }
    let dt = protos.dim_t();
    let ds = protos.dim_s();
    let cols = dt + ds;
    let k = protos.len();
    // residual operators: r_t = res_t x, r_s = res_s x
    let mut res_t = DMatrix::<f64>::zeros(dt, cols);
    let mut res_s = DMatrix::<f64>::zeros(ds, cols);
    for i in 0..dt {
        res_t[(i, i)] = 1.0;
    }
    for i in 0..ds {
        res_s[(i, dt + i)] = 1.0;
    }
    let mut m_t = DMatrix::zeros(k, cols);
    let mut m_s = DMatrix::zeros(k, cols);

    for (row, (g_t, g_s)) in protos.g_t.iter().zip(&protos.g_s).enumerate() {
        let gt = DVector::from_column_slice(g_t);
        let gs = DVector::from_column_slice(g_s);
        let a = gt.transpose() * &res_t;
        let b = gs.transpose() * &res_s;
        let nt = norm_sq(g_t);
        let ns = norm_sq(g_s);
        // the coefficients are linear in (a, b); recover the 2x2 inverse columns
        let (ta, sa) = solve_from_moments(1.0, 0.0, nt, ns, lambda)?;
        let (tb, sb) = solve_from_moments(0.0, 1.0, nt, ns, lambda)?;
        let wt = &a * ta + &b * tb;
        let ws = &a * sa + &b * sb;
        res_t -= &gt * &wt;
        res_s -= &gs * &ws;
        m_t.set_row(row, &wt);
        m_s.set_row(row, &ws);
    }
    Ok(ProjectionOperator {
        m_t,
        m_s,
        dim_t: dt,
        dim_s: ds,
    })
}

pub fn projection_operator_joint(protos: &PrototypeSet, lambda: f64) -> Result<ProjectionOperator> {
    if protos.is_empty() {
        return Err(Error::EmptyBasis);
    }
    let dt = protos.dim_t();
    let ds = protos.dim_s();
    let k = protos.len();
    let mut rhs = DMatrix::zeros(2 * k, dt + ds);
    for a in 0..k {
        for (j, v) in protos.g_t[a].iter().enumerate() {
            rhs[(a, j)] = *v;
        }
        for (j, v) in protos.g_s[a].iter().enumerate() {
            rhs[(k + a, dt + j)] = *v;
        }
    }
    let x = joint_solve(joint_system(protos, lambda), rhs)?;
    Ok(ProjectionOperator {
        m_t: x.rows(0, k).into_owned(),
        m_s: x.rows(k, k).into_owned(),
        dim_t: dt,
        dim_s: ds,
    })
}

pub fn projection_operator_with_mode(
    protos: &PrototypeSet,
    lambda: f64,
    mode: ProjectionMode,
) -> Result<ProjectionOperator> {
    match mode {
        ProjectionMode::Greedy => projection_operator(protos, lambda),
        ProjectionMode::Joint => projection_operator_joint(protos, lambda),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct RobustWeight {
    pub sigma: f64,
}

/// `sigma = 1 - ||lambda_s - lambda_t||`, clamped to `[0, 1]`.
pub fn robust_weight(pp: &ProjectionPair) -> RobustWeight {
    RobustWeight {
        sigma: sigma_from_discrepancy(pp.discrepancy()),
    }
}

pub fn sigma_from_discrepancy(d: f64) -> f64 {
    (1.0 - d).clamp(0.0, 1.0)
}

/// Linear adaptation from the student space to the teacher space, optionally
/// followed by an elementwise ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationMap {
    /// `D_t x D_s`
    pub matrix: DMatrix<f64>,
    pub rectify: bool,
}

impl AdaptationMap {
    /// Rectangular identity.
    pub fn identity(dim_t: usize, dim_s: usize, rectify: bool) -> Self {
        Self {
            matrix: DMatrix::identity(dim_t, dim_s),
            rectify,
        }
    }

    pub fn dim_t(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim_s(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn apply(&self, f_s: &[f64]) -> Vec<f64> {
        let x = DVector::from_column_slice(f_s);
        let mut h: Vec<f64> = (&self.matrix * x).iter().copied().collect();
        if self.rectify {
            for v in &mut h {
                *v = v.max(0.0);
            }
        }
        h
    }
}

/// Per-group projection operators for every group in `set`.
pub fn group_operators(
    set: &PairedFeatureSet,
    protos_by_group: &BTreeMap<GroupKey, PrototypeSet>,
    lambda: f64,
    mode: ProjectionMode,
) -> Result<BTreeMap<GroupKey, ProjectionOperator>> {
    let mut ops = BTreeMap::new();
    for g in set.groups() {
        let protos = protos_by_group.get(&g).ok_or(Error::MissingPrototypes(g))?;
        if protos.dim_t() != set.dim_t || protos.dim_s() != set.dim_s {
            return Err(Error::DimensionMismatch {
                what: "prototype dimensions vs feature set",
                expected: set.dim_t + set.dim_s,
                actual: protos.dim_t() + protos.dim_s(),
            });
        }
        let op = projection_operator_with_mode(protos, lambda, mode).map_err(|e| e.in_group(g))?;
        ops.insert(g, op);
    }
    Ok(ops)
}

/// Per-record projections, in record order.
pub fn project_all(
    set: &PairedFeatureSet,
    ops: &BTreeMap<GroupKey, ProjectionOperator>,
) -> Result<Vec<ProjectionPair>> {
    set.records
        .iter()
        .map(|r| {
            let op = ops.get(&r.group).ok_or(Error::MissingPrototypes(r.group))?;
            Ok(op.apply(&r.f_t, &r.f_s))
        })
        .collect()
}

/// Robustness weights per record, or all ones when weighting is disabled.
pub fn robust_weights(projections: &[ProjectionPair], enabled: bool) -> Vec<f64> {
    projections
        .iter()
        .map(|p| if enabled { robust_weight(p).sigma } else { 1.0 })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalLoss {
    pub value: f64,
    pub grad_student: Vec<Vec<f64>>,
}

/// `(1 / 2NK) sum_i sigma_i ||lambda_s,i - lambda_t,i||^2` with fixed weights.
///
/// `K` is the prototype count of the instance's own group. The gradient with
/// respect to `f_s` flows through both `lambda_s` and `lambda_t`.
pub fn global_loss_weighted(
    set: &PairedFeatureSet,
    ops: &BTreeMap<GroupKey, ProjectionOperator>,
    weights: &[f64],
) -> Result<GlobalLoss> {
    if weights.len() != set.len() {
        return Err(Error::DimensionMismatch {
            what: "weights vs records",
            expected: set.len(),
            actual: weights.len(),
        });
    }
    let n = set.len() as f64;
    let dt = set.dim_t;
    let diffs: BTreeMap<GroupKey, DMatrix<f64>> =
        ops.iter().map(|(g, op)| (*g, op.difference())).collect();

    let mut value = 0.0;
    let mut grad = Vec::with_capacity(set.len());
    for (r, &sigma) in set.records.iter().zip(weights) {
        let diff = diffs.get(&r.group).ok_or(Error::MissingPrototypes(r.group))?;
        let k = diff.nrows() as f64;
        let x = DVector::from_iterator(dt + set.dim_s, r.f_t.iter().chain(&r.f_s).copied());
        let d = diff * x;
        value += sigma * d.norm_squared() / (2.0 * n * k);
        let scale = sigma / (n * k);
        let student_cols = diff.columns(dt, set.dim_s);
        let g: Vec<f64> = (student_cols.transpose() * d).iter().map(|v| v * scale).collect();
        grad.push(g);
    }
    Ok(GlobalLoss {
        value,
        grad_student: grad,
    })
}

/// Global loss with weights derived from the same projections.
pub fn global_loss(
    set: &PairedFeatureSet,
    protos_by_group: &BTreeMap<GroupKey, PrototypeSet>,
    lambda: f64,
    hyper: &Hyperparams,
) -> Result<GlobalLoss> {
    let ops = group_operators(set, protos_by_group, lambda, hyper.projection)?;
    let weights = robust_weights(&project_all(set, &ops)?, hyper.robust_weighting);
    global_loss_weighted(set, &ops, &weights)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeatureLoss {
    pub value: f64,
    pub grad_student: Vec<Vec<f64>>,
    pub grad_adaptation: DMatrix<f64>,
}

/// `(1 / 2N) sum_i sigma_i ||H(f_s,i) - f_t,i||^2`
pub fn local_feature_loss(
    set: &PairedFeatureSet,
    adapt: &AdaptationMap,
    weights: &[f64],
) -> Result<LocalFeatureLoss> {
    if adapt.dim_t() != set.dim_t || adapt.dim_s() != set.dim_s {
        return Err(Error::DimensionMismatch {
            what: "adaptation map vs feature set",
            expected: set.dim_t * set.dim_s,
            actual: adapt.dim_t() * adapt.dim_s(),
        });
    }
    if weights.len() != set.len() {
        return Err(Error::DimensionMismatch {
            what: "weights vs records",
            expected: set.len(),
            actual: weights.len(),
        });
    }
    let n = set.len() as f64;
    let mut value = 0.0;
    let mut grad_student = Vec::with_capacity(set.len());
    let mut grad_adaptation = DMatrix::zeros(set.dim_t, set.dim_s);
    for (r, &sigma) in set.records.iter().zip(weights) {
        let fs = DVector::from_column_slice(&r.f_s);
        let pre = &adapt.matrix * &fs;
        let mut err = DVector::zeros(set.dim_t);
        let mut sq = 0.0;
        for j in 0..set.dim_t {
            let (h, active) = if adapt.rectify {
                (pre[j].max(0.0), pre[j] > 0.0)
            } else {
                (pre[j], true)
            };
            let e = h - r.f_t[j];
            sq += e * e;
            if active {
                err[j] = e;
            }
        }
        value += sigma * sq / (2.0 * n);
        let scale = sigma / n;
        let gs = adapt.matrix.tr_mul(&err) * scale;
        grad_student.push(gs.iter().copied().collect());
        grad_adaptation.ger(scale, &err, &fs, 1.0);
    }
    Ok(LocalFeatureLoss {
        value,
        grad_student,
        grad_adaptation,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResponseLoss {
    pub value: f64,
    pub grad_student_logits: Vec<Vec<f64>>,
}

fn log_softmax(z: &[f64], temperature: f64) -> Vec<f64> {
    let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
    let lse = z.iter().map(|&v| (v / temperature - max).exp()).sum::<f64>().ln() + max;
    z.iter().map(|&v| v / temperature - lse).collect()
}

/// `(1/N) sum_i sigma_i KL(softmax(z_t,i / T) || softmax(z_s,i / T))`
pub fn response_loss(
    logit_pairs: &[(&[f64], &[f64])],
    weights: &[f64],
    temperature: f64,
) -> Result<ResponseLoss> {
    if weights.len() != logit_pairs.len() {
        return Err(Error::DimensionMismatch {
            what: "weights vs logit pairs",
            expected: logit_pairs.len(),
            actual: weights.len(),
        });
    }
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::InvalidConfig("temperature must be positive".into()));
    }
    let n = logit_pairs.len().max(1) as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(logit_pairs.len());
    for (&(zt, zs), &sigma) in logit_pairs.iter().zip(weights) {
        if zt.len() != zs.len() {
            return Err(Error::DimensionMismatch {
                what: "teacher vs student logits",
                expected: zt.len(),
                actual: zs.len(),
            });
        }
        let lt = log_softmax(zt, temperature);
        let ls = log_softmax(zs, temperature);
        let kl: f64 = lt.iter().zip(&ls).map(|(a, b)| a.exp() * (a - b)).sum();
        value += sigma * kl / n;
        let scale = sigma / (n * temperature);
        grads.push(
            lt.iter()
                .zip(&ls)
                .map(|(a, b)| scale * (b.exp() - a.exp()))
                .collect(),
        );
    }
    Ok(ResponseLoss {
        value,
        grad_student_logits: grads,
    })
}

/// Teacher and student logits of one record.
pub type LogitPair<'a> = (&'a [f64], &'a [f64]);

/// Logit pairs of every record. `Ok(None)` when the set carries no logits.
pub fn logit_pairs(set: &PairedFeatureSet) -> Result<Option<Vec<LogitPair<'_>>>> {
    if set.num_logits().is_none() {
        return Ok(None);
    }
    set.records
        .iter()
        .enumerate()
        .map(|(i, r)| match (&r.logits_t, &r.logits_s) {
            (Some(t), Some(s)) => Ok((t.as_slice(), s.as_slice())),
            _ => Err(Error::MissingLogits(i)),
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub global: f64,
    pub local_feat: f64,
    pub local_resp: f64,
    pub total: f64,
}

/// All three distillation terms evaluated with one shared set of weights.
/// The detection loss is not part of the total.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub global: f64,
    pub local_feat: f64,
    pub local_resp: f64,
    pub total: f64,
    pub alphas: [f64; 3],
    pub sigma: Vec<f64>,
    pub discrepancy: Vec<f64>,
    pub grad_student: Vec<Vec<f64>>,
    pub grad_adaptation: DMatrix<f64>,
    pub grad_student_logits: Option<Vec<Vec<f64>>>,
}

impl LossBreakdown {
    pub fn values(&self) -> LossValues {
        LossValues {
            global: self.global,
            local_feat: self.local_feat,
            local_resp: self.local_resp,
            total: self.total,
        }
    }
}

pub fn total_loss(
    set: &PairedFeatureSet,
    protos_by_group: &BTreeMap<GroupKey, PrototypeSet>,
    adapt: &AdaptationMap,
    hyper: &Hyperparams,
) -> Result<LossBreakdown> {
    let ops = group_operators(set, protos_by_group, hyper.lambda, hyper.projection)?;
    total_loss_with_operators(set, &ops, adapt, hyper)
}

/// [`total_loss`] with precomputed projection operators.
pub fn total_loss_with_operators(
    set: &PairedFeatureSet,
    ops: &BTreeMap<GroupKey, ProjectionOperator>,
    adapt: &AdaptationMap,
    hyper: &Hyperparams,
) -> Result<LossBreakdown> {
    let projections = project_all(set, ops)?;
    let discrepancy: Vec<f64> = projections.iter().map(ProjectionPair::discrepancy).collect();
    let sigma = robust_weights(&projections, hyper.robust_weighting);

    let global = global_loss_weighted(set, ops, &sigma)?;
    let feat = local_feature_loss(set, adapt, &sigma)?;
    let resp = match logit_pairs(set)? {
        Some(pairs) => Some(response_loss(&pairs, &sigma, hyper.temperature)?),
        None => None,
    };

    let [a1, a2, a3] = [hyper.alpha_global, hyper.alpha_feat, hyper.alpha_resp];
    let local_resp = resp.as_ref().map_or(0.0, |r| r.value);
    let grad_student = global
        .grad_student
        .iter()
        .zip(&feat.grad_student)
        .map(|(g, f)| g.iter().zip(f).map(|(x, y)| a1 * x + a2 * y).collect())
        .collect();

    Ok(LossBreakdown {
        global: global.value,
        local_feat: feat.value,
        local_resp,
        total: a1 * global.value + a2 * feat.value + a3 * local_resp,
        alphas: [a1, a2, a3],
        sigma,
        discrepancy,
        grad_student,
        grad_adaptation: feat.grad_adaptation * a2,
        grad_student_logits: resp.map(|r| {
            r.grad_student_logits
                .into_iter()
                .map(|g| g.into_iter().map(|v| a3 * v).collect())
                .collect()
        }),
    })
}
