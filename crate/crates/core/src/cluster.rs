//! Complete-linkage agglomerative clustering of scalar samples.
//!
//! On the real line the complete-linkage distance between two clusters is
//! the span of their union, and the closest pair of clusters is always a
//! pair of neighbours in sorted order. Clusters therefore stay contiguous
//! intervals of the sorted samples, and a heap over adjacent pairs gives the
//! full dendrogram cut in `O(n log n)`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    span: f64,
    left: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (span, left)
        other
            .span
            .total_cmp(&self.span)
            .then_with(|| other.left.cmp(&self.left))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Cuts the complete-linkage dendrogram of `values` at height `cut`.
///
/// Returns clusters as sorted sample vectors, ordered by their smallest
/// element. Non-finite samples are ignored.
pub fn complete_linkage_1d(values: &[f64], cut: f64) -> Vec<Vec<f64>> {
    let mut sorted: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n == 0 {
        return Vec::new();
    }

    // Cluster `i` (alive iff start[i] == i) covers sorted[i..=end[i]].
    let mut end: Vec<usize> = (0..n).collect();
    let mut alive = vec![true; n];
    let mut prev: Vec<Option<usize>> = (0..n).map(|i| i.checked_sub(1)).collect();
    let mut next: Vec<Option<usize>> = (0..n).map(|i| (i + 1 < n).then_some(i + 1)).collect();

    let mut heap = BinaryHeap::new();
    for i in 0..n.saturating_sub(1) {
        heap.push(Candidate {
            span: sorted[i + 1] - sorted[i],
            left: i,
        });
    }

    while let Some(Candidate { span, left }) = heap.pop() {
        if span > cut {
            break;
        }
        if !alive[left] {
            continue;
        }
        let Some(right) = next[left] else { continue };
        // stale entry: the right neighbour grew since this was pushed
        if sorted[end[right]] - sorted[left] != span {
            continue;
        }
        end[left] = end[right];
        alive[right] = false;
        next[left] = next[right];
        if let Some(r) = next[right] {
            prev[r] = Some(left);
            heap.push(Candidate {
                span: sorted[end[r]] - sorted[left],
                left,
            });
        }
        if let Some(p) = prev[left] {
            heap.push(Candidate {
                span: sorted[end[left]] - sorted[p],
                left: p,
            });
        }
    }

    let mut out = Vec::new();
    let mut i = Some(0);
    while let Some(start) = i {
        out.push(sorted[start..=end[start]].to_vec());
        i = next[start];
    }
    out
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Textbook complete linkage over arbitrary clusters, O(n^3).
    fn naive_complete_linkage(values: &[f64], cut: f64) -> Vec<Vec<f64>> {
        let mut clusters: Vec<Vec<f64>> = values.iter().map(|&v| vec![v]).collect();
        loop {
            let mut best: Option<(f64, usize, usize)> = None;
            for i in 0..clusters.len() {
                for j in i + 1..clusters.len() {
                    let mut d: f64 = 0.0;
                    for a in &clusters[i] {
                        for b in &clusters[j] {
                            d = d.max((a - b).abs());
                        }
                    }
                    if best.is_none_or(|(bd, _, _)| d < bd) {
                        best = Some((d, i, j));
                    }
                }
            }
            match best {
                Some((d, i, j)) if d <= cut => {
                    let merged = clusters.remove(j);
                    clusters[i].extend(merged);
                }
                _ => break,
            }
        }
        for c in &mut clusters {
            c.sort_by(f64::total_cmp);
        }
        clusters.sort_by(|a, b| a[0].total_cmp(&b[0]));
        clusters
    }

    #[test]
    fn bimodal_split() {
        let mut v: Vec<f64> = (0..10).map(|i| 10.0 + 0.01 * i as f64).collect();
        v.extend((0..10).map(|i| 40.0 + 0.01 * i as f64));
        let c = complete_linkage_1d(&v, 15.0);
        assert_eq!(c.len(), 2);
        assert!((mean_std(&c[0]).0 - 10.045).abs() < 1e-9);
        assert!((mean_std(&c[1]).0 - 40.045).abs() < 1e-9);
    }

    #[test]
    fn chaining_is_prevented() {
        // single linkage would chain 0..=40 into one cluster
        let v: Vec<f64> = (0..=8).map(|i| 5.0 * i as f64).collect();
        let c = complete_linkage_1d(&v, 15.0);
        assert!(c.iter().all(|c| c.last().unwrap() - c[0] <= 15.0));
        assert!(c.len() >= 3);
    }

    #[test]
    fn empty_and_singleton() {
        assert!(complete_linkage_1d(&[], 1.0).is_empty());
        assert_eq!(complete_linkage_1d(&[3.0], 1.0), vec![vec![3.0]]);
    }

    #[test]
    fn mean_std_population() {
        let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(m, 5.0);
        assert_eq!(s, 2.0);
    }

    proptest! {
        #[test]
        fn agrees_with_naive_complete_linkage(
            values in prop::collection::vec(0.0f64..100.0, 0..25),
            cut in 0.5f64..30.0,
        ) {
            prop_assert_eq!(complete_linkage_1d(&values, cut), naive_complete_linkage(&values, cut));
        }
    }
}
