//! Brute-force reference implementations of the evaluation metrics, run
//! against the library on seeded random instances. Shared by the core
//! integration tests and the acceptance target.

use std::collections::BTreeMap;

use mmkd::eval::{auc, recall_at_k};
use mmkd::survival::{c_index, c_index_td, ibs, inbll, IntervalGrid};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Largest absolute disagreement per metric over all instances.
pub type Report = BTreeMap<&'static str, f64>;

pub fn pair_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            den += 1.0;
            num += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
        }
    }
    num / den
}

pub fn pair_c_index(risk: &[f64], d: &[f64], e: &[bool]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..d.len() {
        for j in 0..d.len() {
            if e[i] && d[i] < d[j] {
                den += 1.0;
                num += if risk[i] > risk[j] { 1.0 } else if risk[i] == risk[j] { 0.5 } else { 0.0 };
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

pub fn pair_c_index_td(curves: &Array2<f64>, d: &[f64], e: &[bool], cuts: &[f64]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..d.len() {
        for j in 0..d.len() {
            for (m, &t) in cuts.iter().enumerate() {
                if e[i] && d[i] <= t && d[j] > t {
                    den += 1.0;
                    let (a, b) = (curves[[i, m]], curves[[j, m]]);
                    num += if a < b { 1.0 } else if a == b { 0.5 } else { 0.0 };
                }
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Recall@K where gallery rows are positive multiples of signed basis
/// vectors, so cosine order is the order of signed query components and can
/// be settled in integers.
pub fn basis_recall(q: &[Vec<i64>], axes: &[(usize, i64)], truth: &[usize], ks: &[usize]) -> BTreeMap<usize, f64> {
    let mut hits = vec![0usize; ks.len()];
    for (qi, row) in q.iter().enumerate() {
        let score = |g: usize| axes[g].1 * row[axes[g].0];
        let mut order: Vec<usize> = (0..axes.len()).collect();
        order.sort_by_key(|&g| (-score(g), g));
        let rank = order.iter().position(|&g| g == truth[qi]).unwrap();
        for (h, &k) in hits.iter_mut().zip(ks) {
            *h += usize::from(rank < k);
        }
    }
    ks.iter().zip(hits).map(|(&k, h)| (k, h as f64 / q.len() as f64)).collect()
}

/// Negative log-likelihood of discrete-time outcomes, walking each
/// subject's intervals until it leaves observation.
pub fn walk_inbll(probs: &Array2<f64>, d: &[f64], e: &[bool], cuts: &[f64]) -> f64 {
    let clip = |p: f64| p.clamp(1e-7, 1.0 - 1e-7);
    let mut total = 0.0;
    for i in 0..d.len() {
        let mut lo = 0.0;
        for (m, &hi) in cuts.iter().enumerate() {
            let p = clip(probs[[i, m]]);
            let inside = d[i] <= hi && (d[i] > lo || m == 0);
            if d[i] > hi {
                total -= (1.0 - p).ln();
            } else if inside && e[i] {
                total -= p.ln();
                break;
            } else {
                if inside && d[i] == hi {
                    total -= (1.0 - p).ln();
                }
                break;
            }
            lo = hi;
        }
    }
    total / d.len() as f64
}

/// Integrated Brier score by a midpoint Riemann sum on `steps` points.
pub fn riemann_ibs(curves: &Array2<f64>, d: &[f64], e: &[bool], cuts: &[f64], horizon: f64, steps: usize) -> f64 {
    let h = horizon / steps as f64;
    let mut total = 0.0;
    for s in 0..steps {
        let t = (s as f64 + 0.5) * h;
        let col = cuts.iter().position(|&c| t <= c).unwrap_or(cuts.len() - 1);
        let (mut sum, mut count) = (0.0, 0usize);
        for i in 0..d.len() {
            if !e[i] && d[i] < t {
                continue;
            }
            let alive = if d[i] > t { 1.0 } else { 0.0 };
            sum += (curves[[i, col]] - alive).powi(2);
            count += 1;
        }
        if count > 0 {
            total += sum / count as f64 * h;
        }
    }
    total / horizon
}

fn track(report: &mut Report, key: &'static str, err: f64) {
    let slot = report.entry(key).or_insert(0.0);
    *slot = slot.max(err);
}

fn survival_instance(rng: &mut ChaCha8Rng, n: usize, integer_times: bool) -> (Vec<f64>, Vec<bool>) {
    let d = (0..n)
        .map(|_| if integer_times { f64::from(rng.random_range(0..8u8)) } else { rng.random_range(0.0..10.0) })
        .collect();
    let e = (0..n).map(|_| rng.random_bool(0.6)).collect();
    (d, e)
}

fn random_cuts(rng: &mut ChaCha8Rng, integer: bool) -> Vec<f64> {
    if integer {
        let j = rng.random_range(1..=7u8);
        return (1..=j).map(f64::from).collect();
    }
    let j = rng.random_range(1..=6);
    let mut cuts: Vec<f64> = (0..j).map(|_| rng.random_range(0.5..9.0)).collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    cuts
}

fn monotone_curves(rng: &mut ChaCha8Rng, n: usize, j: usize, grid: bool) -> Array2<f64> {
    let mut c = Array2::zeros((n, j));
    for i in 0..n {
        let mut s = 1.0;
        for m in 0..j {
            s *= if grid { f64::from(rng.random_range(5..=10u8)) / 10.0 } else { rng.random_range(0.4..1.0) };
            c[[i, m]] = s;
        }
    }
    c
}

/// Runs `instances` random instances per metric and records the worst
/// absolute disagreement with the reference for each.
pub fn run(instances: usize, seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Report::new();
    for _ in 0..instances {
        // AUC, with scores on a coarse grid to force ties.
        let n = rng.random_range(2..=50);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..6u8)) * 0.25).collect();
        track(&mut report, "auc", (auc(&scores, &labels).unwrap() - pair_auc(&scores, &labels)).abs());

        // Recall@K.
        let (g, dim) = (rng.random_range(2..=50), rng.random_range(2..=8));
        let axes: Vec<(usize, i64)> = (0..g)
            .map(|_| (rng.random_range(0..dim), if rng.random_bool(0.5) { 1 } else { -1 }))
            .collect();
        let scale: Vec<f64> = (0..g).map(|_| f64::from(rng.random_range(1..=4u8))).collect();
        let nq = rng.random_range(1..=50);
        let q: Vec<Vec<i64>> = (0..nq)
            .map(|_| {
                let mut v: Vec<i64> = (0..dim).map(|_| rng.random_range(-3..=3)).collect();
                v[0] = if v[0] == 0 { 1 } else { v[0] };
                v
            })
            .collect();
        let truth: Vec<usize> = (0..nq).map(|_| rng.random_range(0..g)).collect();
        let ks: Vec<usize> = {
            let mut k = vec![1, rng.random_range(1..=g), g];
            k.sort_unstable();
            k.dedup();
            k
        };
        let qm = Array2::from_shape_fn((nq, dim), |(i, k)| q[i][k] as f64);
        let gm = Array2::from_shape_fn((g, dim), |(i, k)| if axes[i].0 == k { axes[i].1 as f64 * scale[i] } else { 0.0 });
        let got = recall_at_k(qm.view(), gm.view(), &truth, &ks).unwrap();
        let want = basis_recall(&q, &axes, &truth, &ks);
        let err = ks.iter().map(|k| (got[k] - want[k]).abs()).fold(0.0, f64::max);
        track(&mut report, "recall_at_k", err);

        // Harrell's C-index, integer times and risks for ties.
        let n = rng.random_range(2..=50);
        let (d, e) = survival_instance(&mut rng, n, true);
        let risk: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..5u8))).collect();
        if let Some(want) = pair_c_index(&risk, &d, &e) {
            track(&mut report, "c_index", (c_index(&risk, &d, &e).unwrap() - want).abs());
        } else {
            assert!(c_index(&risk, &d, &e).is_err());
        }

        // Time-dependent C-index on an integer grid.
        let cuts = random_cuts(&mut rng, true);
        let grid = IntervalGrid::new(cuts.clone()).unwrap();
        let curves = monotone_curves(&mut rng, n, cuts.len(), true);
        let got = c_index_td(curves.view(), &d, &e, &grid);
        match pair_c_index_td(&curves, &d, &e, &cuts) {
            Some(want) => track(&mut report, "c_index_td", (got.unwrap() - want).abs()),
            None => assert!(got.is_err()),
        }

        // INBLL, with durations landing on cut points.
        let probs = Array2::from_shape_fn((n, cuts.len()), |_| rng.random_range(0.0..1.0));
        let got = inbll(probs.view(), grid.outcome_matrix(&d, &e).view()).unwrap();
        track(&mut report, "inbll", (got - walk_inbll(&probs, &d, &e, &cuts)).abs());

        // IBS with continuous times.
        let n = rng.random_range(2..=50);
        let (d, e) = survival_instance(&mut rng, n, false);
        let cuts = random_cuts(&mut rng, false);
        let grid = IntervalGrid::new(cuts.clone()).unwrap();
        let curves = monotone_curves(&mut rng, n, cuts.len(), false);
        let horizon = rng.random_range(1.0..10.0);
        let got = ibs(curves.view(), &d, &e, horizon, &grid).unwrap();
        track(&mut report, "ibs", (got - riemann_ibs(&curves, &d, &e, &cuts, horizon, 10_000)).abs());
    }
    report
}

/// Tolerance per metric: exact metrics within 1e-12, the integral within
/// the resolution of a 10,000-point sum.
pub fn tolerance(metric: &str) -> f64 {
    if metric == "ibs" {
        1e-3
    } else {
        1e-12
    }
}
