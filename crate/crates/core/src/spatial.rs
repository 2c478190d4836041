// SPDX-License-Identifier: Apache-2.0

//! Exact nearest-neighbour search on integer points via uniform grid hashing.
//!
//! Neighbours are ordered by `(squared distance, point index)`, so results
//! are unique even when several points are equidistant.

use std::collections::HashMap;

pub struct GridIndex {
    cell: i64,
    cells: HashMap<[i64; 3], Vec<u32>>,
    points: Vec<[i64; 3]>,
    lo: [i64; 3],
    hi: [i64; 3],
}

impl GridIndex {
    pub fn new(points: &[[i64; 3]]) -> Self {
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let cell = if points.is_empty() {
            1
        } else {
            let vol: f64 = (0..3).map(|a| (hi[a] - lo[a] + 1) as f64).product();
            (vol / points.len() as f64).cbrt().floor().max(1.0) as i64
        };
        let mut cells: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(cell_of(p, cell)).or_default().push(i as u32);
        }
        GridIndex {
            cell,
            cells,
            points: points.to_vec(),
            lo,
            hi,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> [i64; 3] {
        self.points[i]
    }

    /// Nearest point to `q`: `(squared distance, index)`.
    pub fn nearest(&self, q: [i64; 3]) -> Option<(i64, usize)> {
        self.knn(q, 1, None).into_iter().next()
    }

    /// The `k` nearest points to `q` sorted by `(d², index)`, optionally
    /// skipping one index (the query point itself).
    pub fn knn(&self, q: [i64; 3], k: usize, exclude: Option<usize>) -> Vec<(i64, usize)> {
        let available = self.points.len() - exclude.map_or(0, |_| 1);
        let k = k.min(available);
        if k == 0 {
            return Vec::new();
        }
        let qc = cell_of(&q, self.cell);
        // rings beyond this radius hold no cells
        let max_r = (0..3)
            .map(|a| {
                let l = self.lo[a].div_euclid(self.cell);
                let h = self.hi[a].div_euclid(self.cell);
                (qc[a] - l).abs().max((h - qc[a]).abs())
            })
            .max()
            .unwrap();
        let mut best: Vec<(i64, usize)> = Vec::with_capacity(k + 1);
        let mut r = 0i64;
        loop {
            self.visit_ring(qc, r, |i| {
                if Some(i) == exclude {
                    return;
                }
                let p = self.points[i];
                let d2 = dist2(p, q);
                let cand = (d2, i);
                if best.len() < k || cand < best[k - 1] {
                    let pos = best.partition_point(|b| *b < cand);
                    best.insert(pos, cand);
                    best.truncate(k);
                }
            });
            if best.len() == k {
                // unvisited points sit at least r*cell+1 away along some axis
                let bound = r * self.cell + 1;
                if best[k - 1].0 < bound * bound {
                    break;
                }
            }
            if r >= max_r {
                break;
            }
            r += 1;
        }
        best
    }

    fn visit_ring(&self, c: [i64; 3], r: i64, mut f: impl FnMut(usize)) {
        for dx in -r..=r {
            for dy in -r..=r {
                let edge = dx.abs() == r || dy.abs() == r;
                let step = if edge || r == 0 { 1 } else { 2 * r };
                let mut dz = -r;
                while dz <= r {
                    if let Some(v) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                        for &i in v {
                            f(i as usize);
                        }
                    }
                    dz += step;
                }
            }
        }
    }
}

#[inline]
fn cell_of(p: &[i64; 3], cell: i64) -> [i64; 3] {
    [p[0].div_euclid(cell), p[1].div_euclid(cell), p[2].div_euclid(cell)]
}

#[inline]
pub fn dist2(a: [i64; 3], b: [i64; 3]) -> i64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// O(n) scan returning the `k` nearest points under the same ordering; the
/// reference the grid search is tested against.
pub fn brute_knn(points: &[[i64; 3]], q: [i64; 3], k: usize, exclude: Option<usize>) -> Vec<(i64, usize)> {
    let mut all: Vec<(i64, usize)> = points
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, p)| (dist2(*p, q), i))
        .collect();
    all.sort_unstable();
    all.truncate(k);
    all
}
