//! Exhaustive search over small shallow trees.

use spectrum_xai::linalg::Matrix;

/// Every distinct binary split of `members` on midpoint thresholds.
fn splits(x: &Matrix, members: &[usize]) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut out: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    for f in 0..x.ncols() {
        let mut vals: Vec<f64> = members.iter().map(|&i| x.get(i, f)).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for w in vals.windows(2) {
            let t = (w[0] + w[1]) / 2.0;
            let (l, r): (Vec<usize>, Vec<usize>) = members.iter().partition(|&&i| x.get(i, f) <= t);
            if !out.iter().any(|(a, _)| *a == l) {
                out.push((l, r));
            }
        }
    }
    out
}

/// Label counts of each leaf of every tree with exactly `m` leaves over
/// `members`, with the tree depth.
fn all_trees(x: &Matrix, labels: &[usize], k: usize, members: &[usize], m: usize) -> Vec<(Vec<Vec<usize>>, usize)> {
    if m == 1 {
        let mut c = vec![0; k];
        for &i in members {
            c[labels[i]] += 1;
        }
        return vec![(vec![c], 0)];
    }
    let mut out = Vec::new();
    for_each_tree(x, labels, k, members, m, &mut |leaves, depth| out.push((leaves.to_vec(), depth)));
    out
}

fn for_each_tree(
    x: &Matrix,
    labels: &[usize],
    k: usize,
    members: &[usize],
    m: usize,
    visit: &mut dyn FnMut(&[Vec<usize>], usize),
) {
    for (l, r) in splits(x, members) {
        for j in 1..m {
            if l.len() < j || r.len() < m - j {
                continue;
            }
            let lt = all_trees(x, labels, k, &l, j);
            let rt = all_trees(x, labels, k, &r, m - j);
            let mut leaves = Vec::with_capacity(m);
            for (ll, ld) in &lt {
                for (rl, rd) in &rt {
                    leaves.clear();
                    leaves.extend(ll.iter().cloned());
                    leaves.extend(rl.iter().cloned());
                    visit(&leaves, 1 + ld.max(rd));
                }
            }
        }
    }
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

/// Minimum of `mistakes / N + lambda * depth` over all k-leaf trees with
/// distinct leaf labels, as (objective, mistakes, depth).
pub fn exhaustive_best(x: &Matrix, labels: &[usize], k: usize, lambda: f64) -> (f64, usize, usize) {
    let n = labels.len();
    let members: Vec<usize> = (0..n).collect();
    let perms = permutations(k);
    let mut best = (f64::INFINITY, 0, 0);
    for_each_tree(x, labels, k, &members, k, &mut |counts, depth| {
        let correct = perms
            .iter()
            .map(|p| counts.iter().zip(p).map(|(c, &l)| c[l]).sum::<usize>())
            .max()
            .unwrap();
        let mistakes = n - correct;
        let obj = mistakes as f64 / n as f64 + lambda * depth as f64;
        if obj < best.0 - 1e-12 {
            best = (obj, mistakes, depth);
        }
    });
    best
}
