//! Brute-force references shared by the oracle tests and the acceptance run.

use chili_core::GridMap;

pub fn pair_count_auroc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut s = 0.0;
    for p in pos {
        for n in neg {
            s += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
        }
    }
    s / (pos.len() * neg.len()) as f64
}

pub fn brute_force_ap(scores: &[f64], gt: &[bool]) -> f64 {
    let positives = gt.iter().filter(|&&g| g).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let selected: Vec<bool> = scores.iter().map(|&s| s >= t).collect();
        let tp = selected.iter().zip(gt).filter(|(s, g)| **s && **g).count() as f64;
        let chosen = selected.iter().filter(|&&s| s).count() as f64;
        let recall = tp / positives;
        ap += (recall - prev_recall) * tp / chosen;
        prev_recall = recall;
    }
    ap
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

pub fn exhaustive_shapley(f: &dyn Fn(&[f64]) -> f64, row: &[f64], bg: &[f64]) -> Vec<f64> {
    let d = row.len();
    let value = |mask: usize| {
        let z: Vec<f64> = (0..d).map(|j| if mask >> j & 1 == 1 { row[j] } else { bg[j] }).collect();
        f(&z)
    };
    let mut phi = vec![0.0; d];
    for mask in 0..1usize << d {
        let size = mask.count_ones() as usize;
        for (j, p) in phi.iter_mut().enumerate() {
            if mask >> j & 1 == 0 {
                let weight = factorial(size) * factorial(d - size - 1) / factorial(d);
                *p += weight * (value(mask | 1 << j) - value(mask));
            }
        }
    }
    phi
}

/// Median of the 3×3 window around `(r, c)` with edge replication.
pub fn window_median(m: &GridMap, r: usize, c: usize) -> f64 {
    let (rows, cols) = (m.rows() as i64, m.cols() as i64);
    let mut w = Vec::with_capacity(9);
    for dr in -1..=1 {
        for dc in -1..=1 {
            let rr = (r as i64 + dr).clamp(0, rows - 1) as usize;
            let cc = (c as i64 + dc).clamp(0, cols - 1) as usize;
            w.push(m.get(rr, cc));
        }
    }
    w.sort_by(|a, b| a.partial_cmp(b).unwrap());
    w[4]
}
