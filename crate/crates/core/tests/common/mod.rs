#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tsproto::{FeatureRecord, GroupKey, PairedFeatureSet};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Gaussian records spread round-robin over `groups` groups (class ids
/// `0..groups`, level 0). Ids are shuffled so record order differs from id
/// order.
pub fn random_set(seed: u64, n: usize, dim_t: usize, dim_s: usize, groups: u32) -> PairedFeatureSet {
    let mut rng = rng(seed);
    let mut ids: Vec<u64> = (0..n as u64).map(|i| i * 3 + 1).collect();
    for i in (1..ids.len()).rev() {
        let j = rng.gen_range(0..=i);
        ids.swap(i, j);
    }
    let records = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let g = GroupKey::new(i as u32 % groups, 0);
            FeatureRecord::new(id, g, gaussian_vec(&mut rng, dim_t), gaussian_vec(&mut rng, dim_s))
        })
        .collect();
    PairedFeatureSet::new(dim_t, dim_s, records)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Coupled 2x2 solve by Cramer's rule on
/// `[[|g_t|^2 + l, -l], [-l, |g_s|^2 + l]] [w_t; w_s] = [<r_t,g_t>; <r_s,g_s>]`.
pub fn cramer(r_t: &[f64], r_s: &[f64], g_t: &[f64], g_s: &[f64], lambda: f64) -> Option<(f64, f64)> {
    let (m11, m22, m12) = (dot(g_t, g_t) + lambda, dot(g_s, g_s) + lambda, -lambda);
    let (b1, b2) = (dot(r_t, g_t), dot(r_s, g_s));
    if dot(g_t, g_t) == 0.0 && dot(g_s, g_s) == 0.0 && lambda > 0.0 {
        return Some((0.0, 0.0));
    }
    let det = m11 * m22 - m12 * m12;
    if det <= 1e-12 * f64::max(1.0, lambda * lambda) {
        return None;
    }
    Some(((b1 * m22 - m12 * b2) / det, (m11 * b2 - m12 * b1) / det))
}

/// Residuals of every member after deflating with `atoms` in order,
/// recomputed from the raw features. Returns the joint objective and the
/// per-step coefficients, or `None` if an atom is degenerate.
pub fn replay(
    f_t: &[Vec<f64>],
    f_s: &[Vec<f64>],
    atoms: &[usize],
    lambda: f64,
) -> Option<f64> {
    let mut total = 0.0;
    for i in 0..f_t.len() {
        let mut r_t = f_t[i].clone();
        let mut r_s = f_s[i].clone();
        for &a in atoms {
            let (wt, ws) = cramer(&r_t, &r_s, &f_t[a], &f_s[a], lambda)?;
            for (r, g) in r_t.iter_mut().zip(&f_t[a]) {
                *r -= wt * g;
            }
            for (r, g) in r_s.iter_mut().zip(&f_s[a]) {
                *r -= ws * g;
            }
            total += lambda * (wt - ws) * (wt - ws);
        }
        total += dot(&r_t, &r_t) + dot(&r_s, &r_s);
    }
    Some(total)
}

/// Greedy selection written directly from its definition: at every step try
/// each unselected member, replay the whole selection from scratch and keep
/// the first strict minimum. Returns positions in id order.
pub fn naive_prototypes(f_t: &[Vec<f64>], f_s: &[Vec<f64>], k: usize, lambda: f64) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::new();
    for _ in 0..k.min(f_t.len()) {
        let mut best: Option<(usize, f64)> = None;
        for c in 0..f_t.len() {
            if chosen.contains(&c) {
                continue;
            }
            let mut trial = chosen.clone();
            trial.push(c);
            if let Some(obj) = replay(f_t, f_s, &trial, lambda) {
                if best.is_none_or(|(_, b)| obj < b) {
                    best = Some((c, obj));
                }
            }
        }
        match best {
            Some((c, _)) => chosen.push(c),
            None => break,
        }
    }
    chosen
}

/// Members of `group` in id order, as owned vectors.
pub fn group_features(set: &PairedFeatureSet, group: GroupKey) -> (Vec<u64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let members = set.group_members(group);
    (
        members.iter().map(|&i| set.records[i].instance_id).collect(),
        members.iter().map(|&i| set.records[i].f_t.clone()).collect(),
        members.iter().map(|&i| set.records[i].f_s.clone()).collect(),
    )
}

/// Norm-wise relative error `||a - b|| / max(||a||, ||b||, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    diff / na.max(nb).max(floor)
}

/// Central difference of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|j| {
            let orig = probe[j];
            probe[j] = orig + step;
            let up = f(&probe);
            probe[j] = orig - step;
            let down = f(&probe);
            probe[j] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Copy of `set` with student features replaced by the flat row-major `flat`.
pub fn with_student(set: &PairedFeatureSet, flat: &[f64]) -> PairedFeatureSet {
    let mut out = set.clone();
    for (r, chunk) in out.records.iter_mut().zip(flat.chunks(set.dim_s)) {
        r.f_s = chunk.to_vec();
    }
    out
}

pub fn flat_student(set: &PairedFeatureSet) -> Vec<f64> {
    set.records.iter().flat_map(|r| r.f_s.clone()).collect()
}
