//! Alternative basis selections and the cross-space relation discrepancy used
//! to compare them against prototypes.
//!
//! For an instance `i` and a basis `B` the discrepancy is
//! `sum_b |cos(f_t,i, f_t,b) - cos(f_s,i, f_s,b)|`: how differently the two
//! spaces relate the instance to the basis.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_model::{GroupKey, Hyperparams, PairedFeatureSet};
use crate::pgm::{generate_prototypes, GroupData};
use crate::vecops::{cosine, l2_distance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisMethod {
    Prototypes,
    KmeansTeacher,
    KmeansStudent,
    Random,
    Ambiguous,
}

impl BasisMethod {
    pub const ALL: [BasisMethod; 5] = [
        BasisMethod::Prototypes,
        BasisMethod::KmeansTeacher,
        BasisMethod::KmeansStudent,
        BasisMethod::Random,
        BasisMethod::Ambiguous,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BasisMethod::Prototypes => "prototypes",
            BasisMethod::KmeansTeacher => "kmeans_teacher",
            BasisMethod::KmeansStudent => "kmeans_student",
            BasisMethod::Random => "random",
            BasisMethod::Ambiguous => "ambiguous",
        }
    }
}

impl fmt::Display for BasisMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BasisMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BasisMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown basis method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Teacher,
    Student,
}

/// Basis instances chosen for one group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisSelection {
    pub method: BasisMethod,
    pub group: GroupKey,
    /// Instance ids.
    pub indices: Vec<u64>,
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k > n {
        Err(Error::KTooLarge { k, n })
    } else {
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by Lloyd iterations. Returns the centroids.
pub fn kmeans(points: &[&[f64]], k: usize, seed: u64, max_iter: usize) -> Vec<Vec<f64>> {
    let n = points.len();
    if k == 0 || n == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = vec![points[rng.gen_range(0..n)].to_vec()];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let next = match WeightedIndex::new(&nearest) {
            Ok(dist) => dist.sample(&mut rng),
            // every point coincides with a centroid
            Err(_) => rng.gen_range(0..n),
        };
        centroids.push(points[next].to_vec());
        let c = centroids.last().unwrap();
        for (d, p) in nearest.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, c));
        }
    }

    let dim = points[0].len();
    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| sq_dist(p, &centroids[a]).total_cmp(&sq_dist(p, &centroids[b])))
                .unwrap();
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assign) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for c in 0..k {
            // empty clusters keep their previous centroid
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    centroids
}

/// k-means in a single space; each centroid is replaced by its nearest
/// not-yet-taken instance.
pub fn kmeans_select(
    set: &PairedFeatureSet,
    group: GroupKey,
    space: Space,
    k: usize,
    seed: u64,
) -> Result<BasisSelection> {
    let data = GroupData::from_set(set, group)?;
    check_k(k, data.len())?;
    let points = match space {
        Space::Teacher => &data.f_t,
        Space::Student => &data.f_s,
    };
    let centroids = kmeans(points, k, seed, 100);
    let mut taken = vec![false; data.len()];
    let mut indices = Vec::with_capacity(k);
    for c in &centroids {
        let pick = (0..data.len())
            .filter(|&i| !taken[i])
            .min_by(|&a, &b| l2_distance(points[a], c).total_cmp(&l2_distance(points[b], c)))
            .expect("k <= n leaves a free instance");
        taken[pick] = true;
        indices.push(data.ids[pick]);
    }
    Ok(BasisSelection {
        method: match space {
            Space::Teacher => BasisMethod::KmeansTeacher,
            Space::Student => BasisMethod::KmeansStudent,
        },
        group,
        indices,
    })
}

/// Uniform sample without replacement.
pub fn random_select(set: &PairedFeatureSet, group: GroupKey, k: usize, seed: u64) -> Result<BasisSelection> {
    let data = GroupData::from_set(set, group)?;
    check_k(k, data.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices = index::sample(&mut rng, data.len(), k)
        .into_iter()
        .map(|i| data.ids[i])
        .collect();
    Ok(BasisSelection {
        method: BasisMethod::Random,
        group,
        indices,
    })
}

fn relation_discrepancy(data: &GroupData<'_>, i: usize, basis: &[usize]) -> f64 {
    basis
        .iter()
        .map(|&b| {
            (cosine(data.f_t[i], data.f_t[b]) - cosine(data.f_s[i], data.f_s[b])).abs()
        })
        .sum()
}

/// Per-instance ambiguity score: relation discrepancy against every other
/// member of the group.
pub fn ambiguity_scores(data: &GroupData<'_>) -> Vec<f64> {
    (0..data.len())
        .map(|i| {
            let others: Vec<usize> = (0..data.len()).filter(|&b| b != i).collect();
            relation_discrepancy(data, i, &others)
        })
        .collect()
}

/// The `k` highest ambiguity scorers; ties go to the lower position.
pub fn ambiguous_select(set: &PairedFeatureSet, group: GroupKey, k: usize) -> Result<BasisSelection> {
    let data = GroupData::from_set(set, group)?;
    check_k(k, data.len())?;
    let scores = ambiguity_scores(&data);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(BasisSelection {
        method: BasisMethod::Ambiguous,
        group,
        indices: order[..k].iter().map(|&i| data.ids[i]).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins over `[lo, hi]`; the last bin is closed.
    pub fn build(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let bins = bins.max(1);
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let edges = (0..=bins).map(|b| lo + width * b as f64).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let b = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
            counts[b] += 1;
        }
        Histogram { edges, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Summary {
                count: 0,
                mean: 0.0,
                median: 0.0,
                min: 0.0,
                max: 0.0,
            };
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        Summary {
            count: n,
            mean: values.iter().sum::<f64>() / n as f64,
            median,
            min: sorted[0],
            max: sorted[n - 1],
        }
    }
}

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyProfile {
    pub group: GroupKey,
    pub method: BasisMethod,
    /// Non-basis instances, in id order.
    pub instance_ids: Vec<u64>,
    pub discrepancy: Vec<f64>,
    pub summary: Summary,
    pub histogram: Histogram,
}

/// Relation discrepancy of every non-basis instance of `group`.
pub fn relation_discrepancy_profile(
    set: &PairedFeatureSet,
    group: GroupKey,
    basis: &BasisSelection,
) -> Result<DiscrepancyProfile> {
    if basis.indices.is_empty() {
        return Err(Error::EmptyBasis);
    }
    let data = GroupData::from_set(set, group)?;
    let basis_pos: Vec<usize> = basis
        .indices
        .iter()
        .map(|id| {
            data.ids.iter().position(|x| x == id).ok_or_else(|| {
                Error::InvalidConfig(format!("basis instance {id} is not in group {group}"))
            })
        })
        .collect::<Result<_>>()?;

    let mut instance_ids = Vec::new();
    let mut discrepancy = Vec::new();
    for i in 0..data.len() {
        if basis_pos.contains(&i) {
            continue;
        }
        instance_ids.push(data.ids[i]);
        discrepancy.push(relation_discrepancy(&data, i, &basis_pos));
    }
    let summary = Summary::of(&discrepancy);
    let histogram = Histogram::build(&discrepancy, 0.0, summary.max, HISTOGRAM_BINS);
    Ok(DiscrepancyProfile {
        group,
        method: basis.method,
        instance_ids,
        discrepancy,
        summary,
        histogram,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: BasisMethod,
    pub summary: Summary,
    /// Mean discrepancy per seed, pooled over groups.
    pub seed_means: Vec<f64>,
    pub histogram: Histogram,
    /// Chosen bases per seed and group.
    pub selections: Vec<BasisSelection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupBasisSize {
    pub group: GroupKey,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub seeds: Vec<u64>,
    /// Basis size per group (the prototype count).
    pub k_per_group: Vec<GroupBasisSize>,
    pub rows: Vec<MethodRow>,
}

impl ComparisonTable {
    pub fn row(&self, method: BasisMethod) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

/// Runs prototypes and every baseline with matched basis sizes and pools the
/// discrepancy profiles across groups and seeds.
pub fn compare_bases(set: &PairedFeatureSet, hyper: &Hyperparams, seeds: &[u64]) -> Result<ComparisonTable> {
    set.ensure_valid()?;
    let groups = set.groups();
    let mut protos = BTreeMap::new();
    let mut ambiguous = BTreeMap::new();
    for &g in &groups {
        let p = generate_prototypes(set, g, hyper).map_err(|e| e.in_group(g))?;
        let k = p.len();
        protos.insert(
            g,
            BasisSelection {
                method: BasisMethod::Prototypes,
                group: g,
                indices: p.indices,
            },
        );
        ambiguous.insert(g, ambiguous_select(set, g, k).map_err(|e| e.in_group(g))?);
    }
    let k_per_group: BTreeMap<GroupKey, usize> =
        protos.iter().map(|(g, b)| (*g, b.indices.len())).collect();

    // per method: per seed pooled values
    let mut values: BTreeMap<BasisMethod, Vec<Vec<f64>>> = BTreeMap::new();
    let mut selections: BTreeMap<BasisMethod, Vec<BasisSelection>> = BTreeMap::new();
    for &seed in seeds {
        for &g in &groups {
            let k = k_per_group[&g];
            let chosen = [
                protos[&g].clone(),
                kmeans_select(set, g, Space::Teacher, k, seed).map_err(|e| e.in_group(g))?,
                kmeans_select(set, g, Space::Student, k, seed).map_err(|e| e.in_group(g))?,
                random_select(set, g, k, seed).map_err(|e| e.in_group(g))?,
                ambiguous[&g].clone(),
            ];
            for basis in chosen {
                let profile = relation_discrepancy_profile(set, g, &basis).map_err(|e| e.in_group(g))?;
                let per_seed = values.entry(basis.method).or_default();
                if per_seed.len() < seeds.len() && groups.first() == Some(&g) {
                    per_seed.push(Vec::new());
                }
                per_seed.last_mut().unwrap().extend(profile.discrepancy);
                selections.entry(basis.method).or_default().push(basis);
            }
        }
    }

    let global_max = values
        .values()
        .flatten()
        .flatten()
        .fold(0.0f64, |m, &v| m.max(v));
    let rows = BasisMethod::ALL
        .into_iter()
        .map(|method| {
            let per_seed = values.remove(&method).unwrap_or_default();
            let pooled: Vec<f64> = per_seed.iter().flatten().copied().collect();
            MethodRow {
                method,
                summary: Summary::of(&pooled),
                seed_means: per_seed.iter().map(|v| Summary::of(v).mean).collect(),
                histogram: Histogram::build(&pooled, 0.0, global_max, HISTOGRAM_BINS),
                selections: selections.remove(&method).unwrap_or_default(),
            }
        })
        .collect();
    Ok(ComparisonTable {
        seeds: seeds.to_vec(),
        k_per_group: k_per_group
            .into_iter()
            .map(|(group, k)| GroupBasisSize { group, k })
            .collect(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_model::FeatureRecord;

    fn set_from(pairs: Vec<(Vec<f64>, Vec<f64>)>) -> PairedFeatureSet {
        let dt = pairs[0].0.len();
        let ds = pairs[0].1.len();
        PairedFeatureSet::new(
            dt,
            ds,
            pairs
                .into_iter()
                .enumerate()
                .map(|(i, (t, s))| FeatureRecord::new(i as u64, GroupKey::default(), t, s))
                .collect(),
        )
    }

    fn grid(n: usize) -> PairedFeatureSet {
        set_from(
            (0..n)
                .map(|i| {
                    let x = i as f64;
                    (vec![x.sin(), x.cos(), 1.0], vec![x.cos(), 0.5 * x.sin(), 2.0])
                })
                .collect(),
        )
    }

    #[test]
    fn k_equal_n_selects_all() {
        let set = grid(6);
        let g = GroupKey::default();
        let all: Vec<u64> = (0..6).collect();
        for sel in [
            kmeans_select(&set, g, Space::Teacher, 6, 3).unwrap(),
            random_select(&set, g, 6, 3).unwrap(),
            ambiguous_select(&set, g, 6).unwrap(),
        ] {
            let mut ids = sel.indices.clone();
            ids.sort_unstable();
            assert_eq!(ids, all, "{}", sel.method);
        }
    }

    #[test]
    fn k_too_large() {
        let set = grid(3);
        assert!(matches!(
            random_select(&set, GroupKey::default(), 4, 0),
            Err(Error::KTooLarge { k: 4, n: 3 })
        ));
        assert!(ambiguous_select(&set, GroupKey::default(), 4).is_err());
    }

    #[test]
    fn seeded_selectors_are_deterministic() {
        let set = grid(100);
        let g = GroupKey::default();
        let a = random_select(&set, g, 10, 0).unwrap();
        let b = random_select(&set, g, 10, 0).unwrap();
        let c = random_select(&set, g, 10, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.indices, c.indices);
        assert_eq!(
            kmeans_select(&set, g, Space::Student, 5, 9).unwrap(),
            kmeans_select(&set, g, Space::Student, 5, 9).unwrap()
        );
    }

    #[test]
    fn single_instance_random() {
        let set = grid(1);
        assert_eq!(random_select(&set, GroupKey::default(), 1, 5).unwrap().indices, vec![0]);
    }

    #[test]
    fn identical_spaces_tie_to_lowest_ids() {
        let set = set_from(
            (0..5)
                .map(|i| {
                    let v = vec![i as f64 + 1.0, 2.0 - i as f64];
                    (v.clone(), v)
                })
                .collect(),
        );
        let sel = ambiguous_select(&set, GroupKey::default(), 2).unwrap();
        assert_eq!(sel.indices, vec![0, 1]);
        let profile = relation_discrepancy_profile(&set, GroupKey::default(), &sel).unwrap();
        assert!(profile.discrepancy.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn single_basis_direct_formula() {
        // teacher cos 0.9, student cos 0.7 against the basis
        let c9 = (1.0f64 - 0.81).sqrt();
        let c7 = (1.0f64 - 0.49).sqrt();
        let set = set_from(vec![
            (vec![1.0, 0.0], vec![1.0, 0.0]),
            (vec![0.9, c9], vec![0.7, c7]),
        ]);
        let basis = BasisSelection {
            method: BasisMethod::Random,
            group: GroupKey::default(),
            indices: vec![0],
        };
        let p = relation_discrepancy_profile(&set, GroupKey::default(), &basis).unwrap();
        assert_eq!(p.instance_ids, vec![1]);
        assert!((p.discrepancy[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn empty_basis_rejected() {
        let set = grid(3);
        let basis = BasisSelection {
            method: BasisMethod::Random,
            group: GroupKey::default(),
            indices: vec![],
        };
        assert!(matches!(
            relation_discrepancy_profile(&set, GroupKey::default(), &basis),
            Err(Error::EmptyBasis)
        ));
    }

    #[test]
    fn compare_shape_single_basis() {
        let set = set_from(vec![(vec![1.0, 0.0], vec![0.0, 1.0]), (vec![0.5, 0.5], vec![0.2, 1.0])]);
        let hyper = Hyperparams { k: 1, ..Hyperparams::default() };
        let table = compare_bases(&set, &hyper, &[0]).unwrap();
        assert_eq!(table.rows.len(), 5);
        for row in &table.rows {
            assert_eq!(row.selections.len(), 1);
            assert_eq!(row.selections[0].indices.len(), 1);
        }
    }

    #[test]
    fn histogram_counts_everything() {
        let h = Histogram::build(&[0.0, 0.5, 1.0, 1.0], 0.0, 1.0, 4);
        assert_eq!(h.counts.iter().sum::<usize>(), 4);
        assert_eq!(h.counts[3], 2);
        assert_eq!(h.edges.len(), 5);
    }
}
