//! Backward sampling of state paths from stored filter snapshots, plus the
//! label-matched accuracy metrics used to score them.

use rand::Rng;

use crate::error::{Error, Result};
use crate::filter::Snapshot;

fn check_trace(snapshots: &[Snapshot]) -> Result<()> {
    let Some(first) = snapshots.first() else {
        return Err(Error::IncompleteTrace(1));
    };
    for (k, s) in snapshots.iter().enumerate() {
        let want = first.t + k as u64;
        if s.t != want {
            return Err(Error::IncompleteTrace(want));
        }
        if s.particles.is_empty() {
            return Err(Error::IncompleteTrace(want));
        }
    }
    Ok(())
}

/// Backward weights over the particles of one snapshot for a fixed next
/// state: the transition probability into `next` (zero when `next` is
/// beyond the particle's new-state slot).
pub fn backward_weights(snap: &Snapshot, next: usize) -> Vec<f64> {
    snap.particles
        .iter()
        .map(|p| p.probs.get(next).copied().unwrap_or(0.0))
        .collect()
}

fn draw_from_cumulative<R: Rng + ?Sized>(cum: &[f64], rng: &mut R) -> usize {
    let total = *cum.last().expect("non-empty weights");
    let u = rng.random::<f64>() * total;
    let i = cum.partition_point(|&c| c <= u);
    i.min(cum.len() - 1)
}

/// Samples `n_paths` state paths. Each path starts from a uniformly chosen
/// final particle and walks backward, picking the particle at time `t` with
/// probability proportional to its transition probability into the state
/// already fixed at `t + 1`. Paths are indexed from the first snapshot.
pub fn smooth<R: Rng + ?Sized>(snapshots: &[Snapshot], n_paths: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    check_trace(snapshots)?;
    let t_len = snapshots.len();
    let last = &snapshots[t_len - 1];
    let mut paths = vec![vec![0usize; t_len]; n_paths];
    for path in paths.iter_mut() {
        let b = rng.random_range(0..last.particles.len());
        path[t_len - 1] = last.particles[b].s as usize;
    }
    for k in (0..t_len - 1).rev() {
        let snap = &snapshots[k];
        let mut labels: Vec<usize> = paths.iter().map(|p| p[k + 1]).collect();
        labels.sort_unstable();
        labels.dedup();
        for next in labels {
            let w = backward_weights(snap, next);
            let mut cum = Vec::with_capacity(w.len());
            let mut acc = 0.0;
            for x in &w {
                acc += x;
                cum.push(acc);
            }
            if !(acc > 0.0) {
                return Err(Error::Numeric(format!(
                    "no particle at t={} can reach state {next}",
                    snap.t
                )));
            }
            for path in paths.iter_mut().filter(|p| p[k + 1] == next) {
                let b = draw_from_cumulative(&cum, rng);
                path[k] = snap.particles[b].s as usize;
            }
        }
    }
    Ok(paths)
}

fn mode(values: impl Iterator<Item = usize>) -> usize {
    let mut counts: Vec<usize> = Vec::new();
    for v in values {
        if v >= counts.len() {
            counts.resize(v + 1, 0);
        }
        counts[v] += 1;
    }
    let mut best = 0;
    for (k, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = k;
        }
    }
    best
}

/// Most common particle state at each time.
pub fn filtered_modes(snapshots: &[Snapshot]) -> Vec<usize> {
    snapshots
        .iter()
        .map(|s| mode(s.particles.iter().map(|p| p.s as usize)))
        .collect()
}

/// Most common state at each time across smoothed paths.
pub fn path_modes(paths: &[Vec<usize>]) -> Vec<usize> {
    let t_len = paths.first().map_or(0, |p| p.len());
    (0..t_len).map(|t| mode(paths.iter().map(|p| p[t]))).collect()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..n {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// Fraction of positions where `estimate` agrees with `truth` after relabeling
/// `estimate` by the permutation that maximizes agreement. Exhaustive for up
/// to seven labels, greedy on the confusion matrix beyond.
pub fn label_matched_accuracy(estimate: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(estimate.len(), truth.len(), "sequences must align");
    if truth.is_empty() {
        return 1.0;
    }
    let m = estimate.iter().chain(truth).max().map_or(0, |v| v + 1);
    let mut confusion = vec![vec![0usize; m]; m];
    for (&e, &t) in estimate.iter().zip(truth) {
        confusion[e][t] += 1;
    }
    let best = if m <= 7 {
        permutations(m)
            .iter()
            .map(|perm| (0..m).map(|e| confusion[e][perm[e]]).sum::<usize>())
            .max()
            .unwrap_or(0)
    } else {
        let mut used_e = vec![false; m];
        let mut used_t = vec![false; m];
        let mut cells: Vec<(usize, usize, usize)> = (0..m)
            .flat_map(|e| (0..m).map(move |t| (e, t)))
            .map(|(e, t)| (confusion[e][t], e, t))
            .collect();
        cells.sort_unstable_by(|a, b| b.cmp(a));
        let mut total = 0;
        for (c, e, t) in cells {
            if !used_e[e] && !used_t[t] {
                used_e[e] = true;
                used_t[t] = true;
                total += c;
            }
        }
        total
    };
    best as f64 / truth.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::ParticleSummary;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn snap(t: u64, parts: Vec<(u32, Vec<f64>)>) -> Snapshot {
        Snapshot {
            t,
            particles: parts.into_iter().map(|(s, probs)| ParticleSummary { s, probs }).collect(),
        }
    }

    #[test]
    fn single_step_is_uniform_terminal_draw() {
        let s = snap(1, vec![(0, vec![1.0]), (1, vec![1.0]), (1, vec![1.0]), (1, vec![1.0])]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let paths = smooth(&[s], 40_000, &mut rng).unwrap();
        let ones = paths.iter().filter(|p| p[0] == 1).count() as f64 / 40_000.0;
        assert!((ones - 0.75).abs() < 0.015);
    }

    #[test]
    fn one_state_paths_are_constant() {
        let snaps: Vec<_> = (1..=10).map(|t| snap(t, vec![(0, vec![0.9, 0.1]); 5])).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for p in smooth(&snaps, 50, &mut rng).unwrap() {
            assert!(p.iter().all(|&s| s == 0));
        }
    }

    #[test]
    fn missing_snapshot_is_reported() {
        let snaps = vec![snap(1, vec![(0, vec![1.0])]), snap(3, vec![(0, vec![1.0])])];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(smooth(&snaps, 3, &mut rng), Err(Error::IncompleteTrace(2))));
        assert!(matches!(smooth(&[], 3, &mut rng), Err(Error::IncompleteTrace(1))));
    }

    #[test]
    fn backward_step_follows_transition_weights() {
        // Two candidates at t=1 reaching state 1 with weights 0.2 and 0.6.
        let s1 = snap(1, vec![(0, vec![0.8, 0.2]), (1, vec![0.4, 0.6, 0.0])]);
        let s2 = snap(2, vec![(1, vec![0.5, 0.5, 0.0])]);
        let w = backward_weights(&s1, 1);
        assert_eq!(w, vec![0.2, 0.6]);
        assert_eq!(backward_weights(&s1, 2), vec![0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 40_000;
        let paths = smooth(&[s1, s2], n, &mut rng).unwrap();
        let frac = paths.iter().filter(|p| p[0] == 1).count() as f64 / n as f64;
        assert!((frac - 0.75).abs() < 0.015);
    }

    #[test]
    fn label_matching() {
        assert_eq!(label_matched_accuracy(&[1, 1, 0, 0], &[0, 0, 1, 1]), 1.0);
        assert_eq!(label_matched_accuracy(&[0, 0, 0, 0], &[0, 0, 1, 1]), 0.5);
        assert_eq!(label_matched_accuracy(&[2, 0, 1, 2], &[0, 1, 2, 0]), 1.0);
        let e: Vec<usize> = (0..20).map(|i| (i * 7 + 3) % 9).collect();
        let t: Vec<usize> = e.iter().map(|v| (v + 1) % 9).collect();
        assert_eq!(label_matched_accuracy(&e, &t), 1.0);
        assert_eq!(path_modes(&[vec![0, 1], vec![0, 1], vec![1, 1]]), vec![0, 1]);
    }
}
