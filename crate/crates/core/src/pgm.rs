//! Prototype generation: a matching-pursuit variant that selects instances
//! serving as common basis vectors in both the teacher and the student space.
//!
//! At every step each unselected instance is tried as the next atom pair
//! `(g_t, g_s)`. For every instance `i` the coefficients `(w_t, w_s)` minimise
//!
//! ```text
//! ||r_t,i - w_t g_t||^2 + ||r_s,i - w_s g_s||^2 + lambda (w_t - w_s)^2
//! ```
//!
//! and the candidate with the lowest joint objective (residual energy in both
//! spaces plus the accumulated coefficient-consistency penalty) is appended.
//! Residuals are then deflated with the chosen atom. Earlier coefficients are
//! never refit.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};
use crate::feature_model::{GroupKey, Hyperparams, PairedFeatureSet};
use crate::vecops::{dot, norm_sq, residual_norm_sq, sub_scaled};

/// Relative determinant tolerance of the coupled 2x2 solve.
pub const DET_TOLERANCE: f64 = 1e-12;

/// Solves the coupled coefficient system given the sufficient statistics
/// `a = <r_t, g_t>`, `b = <r_s, g_s>`, `nt = ||g_t||^2`, `ns = ||g_s||^2`.
///
/// With `p = lambda + nt` and `q = lambda + ns` the stationary point is
/// `w_t = (a q + lambda b) / (p q - lambda^2)` and
/// `w_s = (b p + lambda a) / (p q - lambda^2)`.
pub fn solve_from_moments(a: f64, b: f64, nt: f64, ns: f64, lambda: f64) -> Result<(f64, f64)> {
    if nt == 0.0 && ns == 0.0 && lambda > 0.0 {
        // Only the consistency term depends on the coefficients; any w_t = w_s
        // is optimal and the minimum-norm choice is zero.
        return Ok((0.0, 0.0));
    }
    let p = lambda + nt;
    let q = lambda + ns;
    let det = p * q - lambda * lambda;
    if det <= DET_TOLERANCE * f64::max(1.0, lambda * lambda) {
        return Err(Error::DegenerateAtom { det });
    }
    Ok(((a * q + lambda * b) / det, (b * p + lambda * a) / det))
}

/// Optimal coupled coefficients of one residual pair against one atom pair.
pub fn solve_pair_coefficients(
    r_t: &[f64],
    r_s: &[f64],
    g_t: &[f64],
    g_s: &[f64],
    lambda: f64,
) -> Result<(f64, f64)> {
    if r_t.len() != g_t.len() {
        return Err(Error::DimensionMismatch {
            what: "teacher residual vs atom",
            expected: g_t.len(),
            actual: r_t.len(),
        });
    }
    if r_s.len() != g_s.len() {
        return Err(Error::DimensionMismatch {
            what: "student residual vs atom",
            expected: g_s.len(),
            actual: r_s.len(),
        });
    }
    solve_from_moments(dot(r_t, g_t), dot(r_s, g_s), norm_sq(g_t), norm_sq(g_s), lambda)
}

/// Borrowed view of one group's features, ordered by instance id.
#[derive(Debug, Clone)]
pub struct GroupData<'a> {
    pub group: GroupKey,
    pub ids: Vec<u64>,
    pub f_t: Vec<&'a [f64]>,
    pub f_s: Vec<&'a [f64]>,
}

impl<'a> GroupData<'a> {
    pub fn from_set(set: &'a PairedFeatureSet, group: GroupKey) -> Result<Self> {
        let members = set.group_members(group);
        if members.is_empty() {
            return Err(Error::EmptyGroup(group));
        }
        Ok(Self {
            group,
            ids: members.iter().map(|&i| set.records[i].instance_id).collect(),
            f_t: members.iter().map(|&i| set.records[i].f_t.as_slice()).collect(),
            f_s: members.iter().map(|&i| set.records[i].f_s.as_slice()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Residuals and coefficients after `n` greedy steps. Indices in `selected`
/// are positions within the group (see [`GroupData`]).
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualState {
    pub r_t: Vec<Vec<f64>>,
    pub r_s: Vec<Vec<f64>>,
    /// One row per selected atom, one column per instance.
    pub w_t: Vec<Vec<f64>>,
    pub w_s: Vec<Vec<f64>>,
    pub selected: Vec<usize>,
    /// Unweighted sum of squared coefficient differences over all rows.
    pub consistency: f64,
}

impl ResidualState {
    pub fn new(group: &GroupData<'_>) -> Self {
        Self {
            r_t: group.f_t.iter().map(|f| f.to_vec()).collect(),
            r_s: group.f_s.iter().map(|f| f.to_vec()).collect(),
            w_t: Vec::new(),
            w_s: Vec::new(),
            selected: Vec::new(),
            consistency: 0.0,
        }
    }

    /// Joint objective for the current selection.
    pub fn objective(&self, lambda: f64) -> f64 {
        let energy: f64 = self
            .r_t
            .iter()
            .zip(&self.r_s)
            .map(|(rt, rs)| norm_sq(rt) + norm_sq(rs))
            .sum();
        energy + lambda * self.consistency
    }

    pub fn is_selected(&self, index: usize) -> bool {
        self.selected.contains(&index)
    }
}

/// Objective after hypothetically appending `candidate` with optimal
/// per-instance coefficients. Does not mutate `state`.
pub fn candidate_objective(
    state: &ResidualState,
    candidate: usize,
    group: &GroupData<'_>,
    lambda: f64,
) -> Result<f64> {
    let g_t = group.f_t[candidate];
    let g_s = group.f_s[candidate];
    let nt = norm_sq(g_t);
    let ns = norm_sq(g_s);
    let mut energy = 0.0;
    let mut consistency = state.consistency;
    for (rt, rs) in state.r_t.iter().zip(&state.r_s) {
        let (wt, ws) = solve_from_moments(dot(rt, g_t), dot(rs, g_s), nt, ns, lambda)?;
        energy += residual_norm_sq(rt, wt, g_t) + residual_norm_sq(rs, ws, g_s);
        consistency += (wt - ws) * (wt - ws);
    }
    Ok(energy + lambda * consistency)
}

/// Scores every unselected candidate and returns the argmin together with
/// its objective. Ties go to the lowest position. Candidates whose coupled
/// system is singular are skipped.
pub fn select_next_scored(
    state: &ResidualState,
    group: &GroupData<'_>,
    lambda: f64,
) -> Result<(usize, f64)> {
    let candidates: Vec<usize> = (0..group.len()).filter(|&k| !state.is_selected(k)).collect();
    if candidates.is_empty() {
        return Err(Error::Exhausted);
    }
    let scores: Vec<Result<f64>> = candidates
        .par_iter()
        .map(|&k| candidate_objective(state, k, group, lambda))
        .collect();

    let mut best: Option<(usize, f64)> = None;
    let mut last_degenerate = None;
    for (&k, score) in candidates.iter().zip(scores) {
        match score {
            Ok(v) => {
                if best.is_none_or(|(_, b)| v < b) {
                    best = Some((k, v));
                }
            }
            Err(e @ Error::DegenerateAtom { .. }) => last_degenerate = Some(e),
            Err(e) => return Err(e),
        }
    }
    best.ok_or_else(|| last_degenerate.unwrap_or(Error::DegenerateAtom { det: 0.0 }))
}

pub fn select_next_prototype(
    state: &ResidualState,
    group: &GroupData<'_>,
    lambda: f64,
) -> Result<usize> {
    select_next_scored(state, group, lambda).map(|(k, _)| k)
}

/// Deflates both residual sets with the atom at position `chosen`.
pub fn update_residuals(
    state: &ResidualState,
    chosen: usize,
    group: &GroupData<'_>,
    lambda: f64,
) -> Result<ResidualState> {
    if chosen >= group.len() {
        return Err(Error::DimensionMismatch {
            what: "atom index out of range",
            expected: group.len(),
            actual: chosen,
        });
    }
    if state.is_selected(chosen) {
        return Err(Error::Exhausted);
    }
    let g_t = group.f_t[chosen];
    let g_s = group.f_s[chosen];
    let nt = norm_sq(g_t);
    let ns = norm_sq(g_s);
    let n = group.len();

    let mut next = state.clone();
    let mut row_t = Vec::with_capacity(n);
    let mut row_s = Vec::with_capacity(n);
    for i in 0..n {
        let (wt, ws) =
            solve_from_moments(dot(&next.r_t[i], g_t), dot(&next.r_s[i], g_s), nt, ns, lambda)?;
        sub_scaled(&mut next.r_t[i], wt, g_t);
        sub_scaled(&mut next.r_s[i], ws, g_s);
        next.consistency += (wt - ws) * (wt - ws);
        row_t.push(wt);
        row_s.push(ws);
    }
    next.w_t.push(row_t);
    next.w_s.push(row_s);
    next.selected.push(chosen);
    Ok(next)
}

/// Prototypes of one group: the selected instances in selection order and
/// the coefficients of every group member with respect to them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub group: GroupKey,
    /// Instance ids in selection order.
    pub indices: Vec<u64>,
    /// Positions of the prototypes within the group's id-ordered members.
    pub positions: Vec<usize>,
    /// Group member ids; columns of `w_t` / `w_s`.
    pub member_ids: Vec<u64>,
    pub g_t: Vec<Vec<f64>>,
    pub g_s: Vec<Vec<f64>>,
    pub w_t: Vec<Vec<f64>>,
    pub w_s: Vec<Vec<f64>>,
    pub lambda_used: f64,
    /// Joint objective before any selection.
    pub initial_objective: f64,
    /// Joint objective after each selection step.
    pub objectives: Vec<f64>,
    /// Set when fewer than the requested prototypes exist in the group.
    pub capped: bool,
}

impl PrototypeSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn dim_t(&self) -> usize {
        self.g_t.first().map_or(0, Vec::len)
    }

    pub fn dim_s(&self) -> usize {
        self.g_s.first().map_or(0, Vec::len)
    }
}

/// Runs the greedy selection on a prepared group view.
pub fn generate_for_group(group: &GroupData<'_>, k: usize, lambda: f64) -> Result<PrototypeSet> {
    if group.is_empty() {
        return Err(Error::EmptyGroup(group.group));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be positive".into()));
    }
    let steps = k.min(group.len());
    let capped = steps < k;
    if capped {
        warn!(
            group = %group.group,
            requested = k,
            available = group.len(),
            "prototype count capped at group size"
        );
    }

    let mut state = ResidualState::new(group);
    let initial_objective = state.objective(lambda);
    let mut objectives = Vec::with_capacity(steps);
    for _ in 0..steps {
        let chosen = select_next_prototype(&state, group, lambda)?;
        state = update_residuals(&state, chosen, group, lambda)?;
        objectives.push(state.objective(lambda));
    }

    let positions = state.selected.clone();
    Ok(PrototypeSet {
        group: group.group,
        indices: positions.iter().map(|&p| group.ids[p]).collect(),
        member_ids: group.ids.clone(),
        g_t: positions.iter().map(|&p| group.f_t[p].to_vec()).collect(),
        g_s: positions.iter().map(|&p| group.f_s[p].to_vec()).collect(),
        positions,
        w_t: state.w_t,
        w_s: state.w_s,
        lambda_used: lambda,
        initial_objective,
        objectives,
        capped,
    })
}

pub fn generate_prototypes(
    set: &PairedFeatureSet,
    group: GroupKey,
    hyper: &Hyperparams,
) -> Result<PrototypeSet> {
    let data = GroupData::from_set(set, group)?;
    generate_for_group(&data, hyper.k, hyper.lambda)
}

/// One prototype set per group present in `set`.
pub fn generate_all_groups(
    set: &PairedFeatureSet,
    hyper: &Hyperparams,
) -> Result<BTreeMap<GroupKey, PrototypeSet>> {
    let groups = set.groups();
    let results: Vec<Result<PrototypeSet>> = groups
        .par_iter()
        .map(|&g| generate_prototypes(set, g, hyper).map_err(|e| e.in_group(g)))
        .collect();
    groups.into_iter().zip(results).map(|(g, r)| r.map(|p| (g, p))).collect()
}
