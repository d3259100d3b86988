use serde::{Deserialize, Serialize};

use super::{ProbeMatrix, ProbeSentence};
use crate::error::Result;
use crate::udtree::DistanceMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeQuality {
    pub layer: usize,
    /// Unweighted mean over sentences with at least `min_spearman_len` words.
    pub distance_spearman: f64,
    /// Gold edges recovered by the predicted MST, over all gold edges.
    pub uuas: f64,
    pub n_sentences: usize,
    pub n_spearman_sentences: usize,
    /// Sentences under 2 words, left out of everything.
    pub skipped_short: usize,
    /// Sentences whose rank correlation is undefined (constant distances)
    /// or shorter than the Spearman threshold.
    pub excluded_from_spearman: usize,
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with tie-averaged ranks. `None` when either
/// side is constant or shorter than 2.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

/// Minimum spanning tree of a dense symmetric `n × n` distance matrix
/// (row-major). Kruskal over edges ordered by `(weight, i, j)`, so ties go
/// to the lexicographically smaller edge. Returns edges `(i, j)` with
/// `i < j`.
pub fn minimum_spanning_tree(dist: &[f64], n: usize) -> Vec<(usize, usize)> {
    let mut edges: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    edges.sort_by(|&(a, b), &(c, d)| dist[a * n + b].total_cmp(&dist[c * n + d]).then((a, b).cmp(&(c, d))));
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut tree = Vec::with_capacity(n.saturating_sub(1));
    for (i, j) in edges {
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        if ri != rj {
            parent[ri] = rj;
            tree.push((i, j));
            if tree.len() + 1 == n {
                break;
            }
        }
    }
    tree
}

/// Scores predicted distance matrices against gold trees.
pub fn eval_distance_matrices<'a>(
    layer: usize,
    sentences: impl IntoIterator<Item = (&'a [f64], &'a DistanceMatrix)>,
    min_spearman_len: usize,
) -> ProbeQuality {
    let mut q = ProbeQuality {
        layer,
        distance_spearman: f64::NAN,
        uuas: f64::NAN,
        n_sentences: 0,
        n_spearman_sentences: 0,
        skipped_short: 0,
        excluded_from_spearman: 0,
    };
    let mut rho_sum = 0.0;
    let mut correct = 0usize;
    let mut total = 0usize;
    for (pred, gold) in sentences {
        let n = gold.len();
        if n < 2 {
            q.skipped_short += 1;
            continue;
        }
        q.n_sentences += 1;
        let gold_edges = gold.edges();
        let mst = minimum_spanning_tree(pred, n);
        correct += mst.iter().filter(|e| gold_edges.contains(e)).count();
        total += gold_edges.len();

        let mut p = Vec::with_capacity(n * (n - 1) / 2);
        let mut g = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                p.push(pred[i * n + j]);
                g.push(f64::from(gold.get(i, j)));
            }
        }
        match spearman(&p, &g) {
            Some(rho) if n >= min_spearman_len => {
                rho_sum += rho;
                q.n_spearman_sentences += 1;
            }
            _ => q.excluded_from_spearman += 1,
        }
    }
    if q.n_spearman_sentences > 0 {
        q.distance_spearman = rho_sum / q.n_spearman_sentences as f64;
    }
    if total > 0 {
        q.uuas = correct as f64 / total as f64;
    }
    q
}

/// Distance Spearman and UUAS of a probe on held-out sentences.
pub fn eval_probe(probe: &ProbeMatrix, sentences: &[ProbeSentence], min_spearman_len: usize) -> Result<ProbeQuality> {
    let preds = sentences
        .iter()
        .map(|s| probe.distance_matrix(&s.vectors))
        .collect::<Result<Vec<_>>>()?;
    Ok(eval_distance_matrices(
        probe.layer,
        preds.iter().map(Vec::as_slice).zip(sentences.iter().map(|s| &s.gold)),
        min_spearman_len,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(n: usize) -> DistanceMatrix {
        let rows: Vec<Vec<u32>> = (0..n)
            .map(|i| (0..n).map(|j| (i as i64 - j as i64).unsigned_abs() as u32).collect())
            .collect();
        DistanceMatrix::from_rows(&rows)
    }

    fn as_f64(m: &DistanceMatrix) -> Vec<f64> {
        m.rows().concat().into_iter().map(f64::from).collect()
    }

    #[test]
    fn perfect_prediction() {
        let golds: Vec<DistanceMatrix> = (2..9).map(chain).collect();
        let preds: Vec<Vec<f64>> = golds.iter().map(as_f64).collect();
        let q = eval_distance_matrices(0, preds.iter().map(Vec::as_slice).zip(&golds), 5);
        assert_eq!(q.uuas, 1.0);
        assert_eq!(q.distance_spearman, 1.0);
        assert_eq!(q.n_spearman_sentences, 4);
        assert_eq!(q.excluded_from_spearman, 3);
    }

    #[test]
    fn reversed_chain_has_minus_one() {
        let gold = chain(3);
        let pred: Vec<f64> = as_f64(&gold).iter().map(|d| 10.0 - d).collect();
        let mut p = Vec::new();
        let mut g = Vec::new();
        for i in 0..3 {
            for j in i + 1..3 {
                p.push(pred[i * 3 + j]);
                g.push(f64::from(gold.get(i, j)));
            }
        }
        assert!((spearman(&p, &g).unwrap() + 1.0).abs() < 1e-12);
        let q = eval_distance_matrices(0, [(pred.as_slice(), &gold)], 2);
        assert!((q.distance_spearman + 1.0).abs() < 1e-12);
    }

    #[test]
    fn short_and_constant_sentences_counted() {
        let one = DistanceMatrix::from_rows(&[vec![0]]);
        let two = chain(2);
        let q = eval_distance_matrices(0, [(&[0.0][..], &one), (&[0.0, 1.0, 1.0, 0.0][..], &two)], 1);
        assert_eq!(q.skipped_short, 1);
        assert_eq!(q.n_sentences, 1);
        // a single pair has no rank variation
        assert_eq!(q.excluded_from_spearman, 1);
        assert!(q.distance_spearman.is_nan());
        assert_eq!(q.uuas, 1.0);
    }

    #[test]
    fn mst_tie_break_is_lexicographic() {
        let n = 3;
        let dist = vec![0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0];
        assert_eq!(minimum_spanning_tree(&dist, n), vec![(0, 1), (0, 2)]);
        assert!(minimum_spanning_tree(&[0.0], 1).is_empty());
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
        assert_eq!(spearman(&[1.0], &[1.0]), None);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
    }
}
