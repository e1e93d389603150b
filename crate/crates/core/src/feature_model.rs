//! Paired teacher/student feature records and their validation.
//!
//! Every instance carries one vector in the teacher space and one in the
//! student space. Records are grouped by `(class, level)`; prototype selection
//! and the distillation losses operate per group.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rdm::ProjectionMode;

/// Partition key: prototypes are generated independently per class and per
/// feature level.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub struct GroupKey {
    pub class_id: u32,
    pub level_id: u32,
}

impl GroupKey {
    pub fn new(class_id: u32, level_id: u32) -> Self {
        Self { class_id, level_id }
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.class_id, self.level_id)
    }
}

/// Parses `class:level`, or a bare `class` meaning level 0.
impl FromStr for GroupKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("group `{s}` is not `class:level`"));
        let (c, l) = s.split_once(':').unwrap_or((s, "0"));
        Ok(GroupKey::new(
            c.trim().parse().map_err(|_| bad())?,
            l.trim().parse().map_err(|_| bad())?,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub instance_id: u64,
    pub group: GroupKey,
    pub f_t: Vec<f64>,
    pub f_s: Vec<f64>,
    pub logits_t: Option<Vec<f64>>,
    pub logits_s: Option<Vec<f64>>,
    /// Ground-truth ambiguity marker; only synthetic fixtures set it.
    pub ambiguous: Option<bool>,
}

impl FeatureRecord {
    pub fn new(instance_id: u64, group: GroupKey, f_t: Vec<f64>, f_s: Vec<f64>) -> Self {
        Self {
            instance_id,
            group,
            f_t,
            f_s,
            logits_t: None,
            logits_s: None,
            ambiguous: None,
        }
    }

    pub fn with_logits(mut self, logits_t: Vec<f64>, logits_s: Vec<f64>) -> Self {
        self.logits_t = Some(logits_t);
        self.logits_s = Some(logits_s);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedFeatureSet {
    pub dim_t: usize,
    pub dim_s: usize,
    pub records: Vec<FeatureRecord>,
}

impl PairedFeatureSet {
    pub fn new(dim_t: usize, dim_s: usize, records: Vec<FeatureRecord>) -> Self {
        Self {
            dim_t,
            dim_s,
            records,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct groups in ascending key order.
    pub fn groups(&self) -> Vec<GroupKey> {
        let mut keys: Vec<GroupKey> = self.records.iter().map(|r| r.group).collect();
        keys.sort_unstable();
        keys.dedup();
        keys
    }

    /// Record positions belonging to `group`, ordered by instance id.
    pub fn group_members(&self, group: GroupKey) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.records.len())
            .filter(|&i| self.records[i].group == group)
            .collect();
        idx.sort_by_key(|&i| self.records[i].instance_id);
        idx
    }

    pub fn members_by_group(&self) -> BTreeMap<GroupKey, Vec<usize>> {
        self.groups()
            .into_iter()
            .map(|g| (g, self.group_members(g)))
            .collect()
    }

    /// Number of logit classes, if the set carries logits.
    pub fn num_logits(&self) -> Option<usize> {
        self.records
            .iter()
            .find_map(|r| r.logits_t.as_ref().map(Vec::len))
    }

    pub fn has_ambiguous_flags(&self) -> bool {
        self.records.iter().any(|r| r.ambiguous.is_some())
    }

    /// Returns `Err(Error::Invalid)` carrying the report when validation fails.
    pub fn ensure_valid(&self) -> Result<()> {
        let report = validate(self);
        if report.is_valid() {
            Ok(())
        } else {
            Err(Error::Invalid(report))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// Position of the offending record, `None` for set-level problems.
    pub record: Option<usize>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, record: Option<usize>, reason: impl Into<String>) {
        self.violations.push(Violation {
            record,
            reason: reason.into(),
        });
    }
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Lists every invariant violation of `set`. An empty report means valid.
pub fn validate(set: &PairedFeatureSet) -> ValidationReport {
    let mut report = ValidationReport::default();
    if set.dim_t == 0 {
        report.push(None, "teacher dimension must be positive");
    }
    if set.dim_s == 0 {
        report.push(None, "student dimension must be positive");
    }
    if set.records.is_empty() {
        report.push(None, "set has no records");
    }

    let mut seen = HashSet::with_capacity(set.records.len());
    let logit_len = set.num_logits();
    let with_logits = set.records.iter().filter(|r| r.logits_t.is_some()).count();
    let with_flags = set.records.iter().filter(|r| r.ambiguous.is_some()).count();

    for (i, r) in set.records.iter().enumerate() {
        if !seen.insert(r.instance_id) {
            report.push(Some(i), format!("duplicate instance_id {}", r.instance_id));
        }
        if r.f_t.len() != set.dim_t {
            report.push(
                Some(i),
                format!("f_t has length {}, expected {}", r.f_t.len(), set.dim_t),
            );
        }
        if r.f_s.len() != set.dim_s {
            report.push(
                Some(i),
                format!("f_s has length {}, expected {}", r.f_s.len(), set.dim_s),
            );
        }
        if !all_finite(&r.f_t) {
            report.push(Some(i), "f_t contains a non-finite value");
        }
        if !all_finite(&r.f_s) {
            report.push(Some(i), "f_s contains a non-finite value");
        }
        match (&r.logits_t, &r.logits_s) {
            (None, None) => {
                if with_logits > 0 {
                    report.push(Some(i), "logits missing while other records carry them");
                }
            }
            (Some(lt), Some(ls)) => {
                if lt.len() != ls.len() {
                    report.push(Some(i), "teacher and student logits differ in length");
                } else if Some(lt.len()) != logit_len {
                    report.push(Some(i), "logit length differs from other records");
                }
                if lt.is_empty() {
                    report.push(Some(i), "logits are empty");
                }
                if !all_finite(lt) || !all_finite(ls) {
                    report.push(Some(i), "logits contain a non-finite value");
                }
            }
            _ => report.push(Some(i), "logits present for only one model"),
        }
        if r.ambiguous.is_none() && with_flags > 0 {
            report.push(Some(i), "ambiguous flag missing while other records carry it");
        }
    }
    report
}

/// Distillation and selection hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    /// Prototypes per group.
    pub k: usize,
    /// Cross-space coefficient consistency weight.
    pub lambda: f64,
    /// Prototype refresh period in epochs.
    pub refresh_period: usize,
    pub alpha_global: f64,
    pub alpha_feat: f64,
    pub alpha_resp: f64,
    /// Softmax temperature of the response loss.
    pub temperature: f64,
    pub projection: ProjectionMode,
    /// When false every robustness weight is forced to 1 (ablation).
    pub robust_weighting: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            k: 10,
            lambda: 10.0,
            refresh_period: 1,
            alpha_global: 1.0,
            alpha_feat: 1.0,
            alpha_resp: 5.0,
            temperature: 1.0,
            projection: ProjectionMode::Greedy,
            robust_weighting: true,
        }
    }
}

impl Hyperparams {
    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.k == 0 {
            return bad("k must be positive");
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda must be finite and non-negative");
        }
        if self.refresh_period == 0 {
            return bad("refresh_period must be positive");
        }
        for a in [self.alpha_global, self.alpha_feat, self.alpha_resp] {
            if !(a.is_finite() && a >= 0.0) {
                return bad("alpha weights must be finite and non-negative");
            }
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_key_parse() {
        assert_eq!("3:1".parse::<GroupKey>().unwrap(), GroupKey::new(3, 1));
        assert_eq!("7".parse::<GroupKey>().unwrap(), GroupKey::new(7, 0));
        assert!("a:b".parse::<GroupKey>().is_err());
        assert!("1:2:3".parse::<GroupKey>().is_err());
    }

    fn two_records() -> PairedFeatureSet {
        PairedFeatureSet::new(
            2,
            3,
            vec![
                FeatureRecord::new(0, GroupKey::new(0, 0), vec![1.0, 2.0], vec![0.0, 1.0, 2.0]),
                FeatureRecord::new(1, GroupKey::new(1, 0), vec![3.0, 4.0], vec![1.0, 1.0, 1.0]),
            ],
        )
    }

    #[test]
    fn well_formed_set_is_valid() {
        let set = two_records();
        assert!(validate(&set).is_valid());
        assert!(set.ensure_valid().is_ok());
    }

    #[test]
    fn non_finite_student_value_names_record() {
        let mut set = two_records();
        set.records[1].f_s[2] = f64::NAN;
        let report = validate(&set);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].record, Some(1));
        assert!(report.violations[0].reason.contains("f_s"));
    }

    #[test]
    fn duplicate_instance_id_is_one_violation() {
        let mut set = two_records();
        set.records[1].instance_id = 0;
        let report = validate(&set);
        assert_eq!(report.violations.len(), 1);
        assert!(report.violations[0].reason.contains("duplicate"));
    }

    #[test]
    fn empty_set_and_bad_lengths() {
        let empty = PairedFeatureSet::new(2, 2, vec![]);
        assert!(!validate(&empty).is_valid());

        let mut set = two_records();
        set.records[0].f_t.push(0.0);
        assert_eq!(validate(&set).violations.len(), 1);
    }

    #[test]
    fn one_sided_logits_rejected() {
        let mut set = two_records();
        set.records[0].logits_t = Some(vec![0.0, 1.0]);
        let report = validate(&set);
        assert!(report.violations.iter().any(|v| v.record == Some(0)));
        // record 1 has none while record 0 has teacher logits
        assert!(report.violations.iter().any(|v| v.record == Some(1)));
    }

    #[test]
    fn validation_is_idempotent_and_pure() {
        let mut set = two_records();
        set.records[0].f_t[0] = f64::INFINITY;
        let before = set.clone();
        let a = validate(&set);
        let b = validate(&set);
        assert_eq!(a, b);
        assert_eq!(set, before);
    }

    #[test]
    fn groups_and_members_are_ordered() {
        let mut set = two_records();
        set.records.push(FeatureRecord::new(
            7,
            GroupKey::new(0, 0),
            vec![0.0, 0.0],
            vec![0.0, 0.0, 0.0],
        ));
        set.records.swap(0, 2);
        assert_eq!(set.groups(), vec![GroupKey::new(0, 0), GroupKey::new(1, 0)]);
        let members = set.group_members(GroupKey::new(0, 0));
        let ids: Vec<u64> = members.iter().map(|&i| set.records[i].instance_id).collect();
        assert_eq!(ids, vec![0, 7]);
    }

    #[test]
    fn default_hyperparams() {
        let h = Hyperparams::default();
        assert_eq!(h.k, 10);
        assert_eq!(h.lambda, 10.0);
        assert_eq!(h.refresh_period, 1);
        assert_eq!((h.alpha_global, h.alpha_feat, h.alpha_resp), (1.0, 1.0, 5.0));
        assert!(h.check().is_ok());
        assert!(Hyperparams { k: 0, ..h }.check().is_err());
    }
}
