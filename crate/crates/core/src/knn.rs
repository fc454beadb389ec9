//! Exact k-nearest-neighbor search on a uniform hash grid.
//!
//! Neighbors of each query are returned sorted by `(squared distance, index)`,
//! so the query point itself comes first and ties resolve to the smaller
//! index.

use std::collections::HashMap;

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

fn cell_of(p: [f64; 3], origin: [f64; 3], cell: f64) -> [i64; 3] {
    [0, 1, 2].map(|a| ((p[a] - origin[a]) / cell).floor() as i64)
}

/// Neighbor table of a cloud: row `i` holds the `k` nearest points of `i`,
/// starting with `i` itself.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Neighborhood {
    pub k: usize,
    pub table: Vec<usize>,
}

impl Neighborhood {
    pub fn build(points: &[[f64; 3]], k: usize) -> Self {
        let (k, table) = knn(points, k);
        Self { k, table }
    }

    pub fn len(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.table.len() / self.k
        }
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

/// Flattened `n x k` neighbor table for `k = min(k, n)`; returns the
/// effective `k` along with the table.
pub fn knn(points: &[[f64; 3]], k: usize) -> (usize, Vec<usize>) {
    let n = points.len();
    let k = k.min(n);
    if n == 0 || k == 0 {
        return (k, Vec::new());
    }
    if n <= 64 {
        return (k, brute_force(points, k));
    }

    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let diag = dist2(lo, hi).sqrt();
    // Surface-like clouds: spacing scales as diag / sqrt(n).
    let cell = if diag > 0.0 {
        (diag * (k as f64 / n as f64).sqrt()).max(diag * 1e-6)
    } else {
        1.0
    };
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, &p) in points.iter().enumerate() {
        grid.entry(cell_of(p, lo, cell)).or_default().push(i);
    }
    let max_ring = {
        let span = [0, 1, 2].map(|a| ((hi[a] - lo[a]) / cell).ceil() as i64 + 1);
        span.into_iter().max().unwrap_or(1)
    };

    let mut out = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::new();
    for &q in points {
        let c = cell_of(q, lo, cell);
        cand.clear();
        let mut ring: i64 = 0;
        loop {
            visit_shell(&grid, c, ring, |idx| {
                for &j in idx {
                    cand.push((dist2(q, points[j]), j));
                }
            });
            // Everything outside the visited cube is farther than ring * cell.
            let reach = ring as f64 * cell;
            if cand.len() >= k {
                cand.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                if cand[k - 1].0 < reach * reach || ring > max_ring {
                    break;
                }
            } else if ring > max_ring {
                break;
            }
            ring += 1;
        }
        cand.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.extend(cand[..k].iter().map(|&(_, j)| j));
    }
    (k, out)
}

fn visit_shell(grid: &HashMap<[i64; 3], Vec<usize>>, c: [i64; 3], r: i64, mut f: impl FnMut(&[usize])) {
    for dx in -r..=r {
        for dy in -r..=r {
            for dz in -r..=r {
                if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                    continue;
                }
                if let Some(idx) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                    f(idx);
                }
            }
        }
    }
}

/// Reference implementation: full sort per query.
pub fn brute_force(points: &[[f64; 3]], k: usize) -> Vec<usize> {
    let k = k.min(points.len());
    let mut out = Vec::with_capacity(points.len() * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(points.len());
    for &q in points {
        cand.clear();
        cand.extend(points.iter().enumerate().map(|(j, &p)| (dist2(q, p), j)));
        cand.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.extend(cand[..k].iter().map(|&(_, j)| j));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    #[test]
    fn grid_matches_brute_force_on_volume_and_surface() {
        let mut rng = seed::rng(11);
        let volume: Vec<[f64; 3]> = (0..700).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let surface: Vec<[f64; 3]> = (0..700)
            .map(|_| [rng.random::<f64>() * 4.0, rng.random::<f64>() * 4.0, 0.0])
            .collect();
        for pts in [volume, surface] {
            for k in [1, 5, 8, 16] {
                assert_eq!(knn(&pts, k).1, brute_force(&pts, k));
            }
        }
    }

    #[test]
    fn ties_resolve_to_smaller_index() {
        // Regular lattice: many equal distances.
        let pts: Vec<[f64; 3]> = (0..100)
            .map(|i| [(i % 10) as f64 * 0.1, (i / 10) as f64 * 0.1, 0.0])
            .collect();
        assert_eq!(knn(&pts, 6).1, brute_force(&pts, 6));
    }

    #[test]
    fn self_first_and_k_clamped() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let (k, t) = knn(&pts, 8);
        assert_eq!(k, 2);
        assert_eq!(t, vec![0, 1, 1, 0]);
        let (k, t) = knn(&[[3.0, 3.0, 3.0]], 8);
        assert_eq!((k, t), (1, vec![0]));
    }

    #[test]
    fn duplicate_points() {
        let mut rng = seed::rng(2);
        let mut pts: Vec<[f64; 3]> = (0..200).map(|_| [rng.random(), rng.random(), 0.5]).collect();
        pts.extend(pts.clone());
        assert_eq!(knn(&pts, 4).1, brute_force(&pts, 4));
    }
}
