//! Uniform-grid spatial index for radius-bounded k-nearest queries.

use std::collections::HashMap;

pub struct GridIndex {
    bucket: f64,
    points: Vec<[f64; 2]>,
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

impl GridIndex {
    /// `bucket` should be at least the query radius so a 3 x 3 bucket
    /// neighborhood covers every candidate.
    pub fn new(points: &[[f64; 2]], bucket: f64) -> Self {
        assert!(bucket > 0.0, "bucket size must be positive");
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(Self::key(p, bucket)).or_default().push(i);
        }
        GridIndex {
            bucket,
            points: points.to_vec(),
            buckets,
        }
    }

    fn key(p: &[f64; 2], bucket: f64) -> (i64, i64) {
        ((p[0] / bucket).floor() as i64, (p[1] / bucket).floor() as i64)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Up to `k` points with distance strictly below `radius`, nearest first,
    /// ties broken by lower point index.
    pub fn k_nearest_within(&self, query: [f64; 2], k: usize, radius: f64) -> Vec<(usize, f64)> {
        let reach = (radius / self.bucket).ceil().max(1.0) as i64;
        let (qx, qy) = Self::key(&query, self.bucket);
        let mut found: Vec<(usize, f64)> = Vec::new();
        for bx in qx - reach..=qx + reach {
            for by in qy - reach..=qy + reach {
                let Some(ids) = self.buckets.get(&(bx, by)) else {
                    continue;
                };
                for &i in ids {
                    let p = self.points[i];
                    let d = (p[0] - query[0]).hypot(p[1] - query[1]);
                    if d < radius {
                        found.push((i, d));
                    }
                }
            }
        }
        found.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        found.truncate(k);
        found
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(points: &[[f64; 2]], q: [f64; 2], k: usize, r: f64) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| (i, (p[0] - q[0]).hypot(p[1] - q[1])))
            .collect();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        all.truncate(k);
        all.retain(|(_, d)| *d < r);
        all
    }

    #[test]
    fn ties_prefer_lower_index() {
        let pts = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]];
        let idx = GridIndex::new(&pts, 10.0);
        let got = idx.k_nearest_within([0.0, 0.0], 2, 10.0);
        assert_eq!(got.iter().map(|g| g.0).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn radius_is_strict() {
        let idx = GridIndex::new(&[[10.0, 0.0]], 10.0);
        assert!(idx.k_nearest_within([0.0, 0.0], 5, 10.0).is_empty());
    }

    proptest! {
        #[test]
        fn matches_top_k_then_filter(
            pts in proptest::collection::vec((0u8..40, 0u8..40), 0..80),
            q in (0u8..40, 0u8..40),
            k in 1usize..8,
            r in 1.0f64..15.0,
        ) {
            let pts: Vec<[f64; 2]> = pts.into_iter().map(|(a, b)| [a as f64, b as f64]).collect();
            let q = [q.0 as f64, q.1 as f64];
            let idx = GridIndex::new(&pts, r);
            prop_assert_eq!(idx.k_nearest_within(q, k, r), brute(&pts, q, k, r));
        }
    }
}
