//! Subregion affinity construction: Jensen–Shannon similarity over static
//! attributes, ρ-sparsification, and learned attribute attention.

use crate::error::{Error, Result};
use crate::grid::StaticFeatureTable;
use crate::tensor::{pairwise_js_rows, Tensor};

pub const JS_SMOOTHING: f64 = 1e-9;

/// Normalizes a nonnegative vector to a probability vector with additive
/// smoothing. An all-zero vector cannot be normalized.
pub fn normalize_dist(x: &[f64], smoothing: f64) -> Result<Vec<f64>> {
    if x.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::numeric(
            "normalize: entries must be finite and nonnegative",
        ));
    }
    if x.iter().sum::<f64>() == 0.0 {
        return Err(Error::numeric("normalize: all-zero distribution"));
    }
    let s: f64 = x.iter().map(|&v| v + smoothing).sum();
    Ok(x.iter().map(|&v| (v + smoothing) / s).collect())
}

/// Jensen–Shannon divergence between two nonnegative vectors, normalized
/// internally. Natural log; symmetric; bounded by ln 2.
pub fn js_divergence(p: &[f64], r: &[f64]) -> Result<f64> {
    if p.len() != r.len() || p.is_empty() {
        return Err(Error::Dimension {
            op: "js_divergence",
            lhs: vec![p.len()],
            rhs: vec![r.len()],
        });
    }
    let pn = normalize_dist(p, JS_SMOOTHING)?;
    let rn = normalize_dist(r, JS_SMOOTHING)?;
    let mut js = 0.0;
    for (&a, &b) in pn.iter().zip(&rn) {
        let m = a + b;
        js += 0.5 * (a * (2.0 * a / m).ln() + b * (2.0 * b / m).ln());
    }
    Ok(js.max(0.0))
}

/// Rows of `table` normalized to probability vectors (m × dim).
pub fn normalized_rows(values: &[f64], m: usize, dim: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(m * dim);
    for i in 0..m {
        out.extend(normalize_dist(&values[i * dim..(i + 1) * dim], JS_SMOOTHING)?);
    }
    Ok(out)
}

/// exp(−JS) between all row pairs of pre-normalized probability rows, with a
/// zero diagonal.
pub fn exp_neg_js_matrix(prob_rows: &[f64], m: usize, dim: usize) -> Tensor {
    let js = pairwise_js_rows(prob_rows, m, dim);
    let mut data = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            if i != j {
                data[i * m + j] = (-js[i * m + j]).exp();
            }
        }
    }
    Tensor::new(vec![m, m], data).expect("square shape")
}

/// Static affinity: 1 for 8-neighborhood-adjacent pairs, exp(−JS(s_i‖s_j))
/// otherwise; zero diagonal.
pub fn static_affinity(statics: &StaticFeatureTable, adjacency: &[u8]) -> Result<Tensor> {
    let m = statics.m();
    if adjacency.len() != m * m {
        return Err(Error::Dimension {
            op: "static_affinity",
            lhs: vec![m * m],
            rhs: vec![adjacency.len()],
        });
    }
    let probs = normalized_rows(&statics.values, m, statics.dim)?;
    let mut a = exp_neg_js_matrix(&probs, m, statics.dim);
    let data = a.data_mut();
    for i in 0..m {
        for j in 0..m {
            if i != j && adjacency[i * m + j] != 0 {
                data[i * m + j] = 1.0;
            }
        }
    }
    Ok(a)
}

/// 0/1 mask keeping the ⌈ρ·m·(m−1)⌉ largest off-diagonal entries of a
/// symmetric matrix as unordered pairs; ties broken toward the smaller
/// (i, j). The diagonal is always masked out.
pub fn sparsify_mask(a: &Tensor, rho: f64) -> Result<Vec<f64>> {
    let (m, m2) = a.dims2("sparsify")?;
    if m != m2 {
        return Err(Error::Dimension {
            op: "sparsify",
            lhs: a.shape().to_vec(),
            rhs: vec![],
        });
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::config(format!(
            "sparsify: rho must lie in (0, 1], got {rho}"
        )));
    }
    if !a.is_finite() {
        return Err(Error::numeric("sparsify: non-finite affinity entries"));
    }
    let d = a.data();
    for i in 0..m {
        for j in (i + 1)..m {
            if d[i * m + j] != d[j * m + i] {
                return Err(Error::contract(format!(
                    "sparsify: input not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    // ⌈ρ·m·(m−1)⌉ entries = ⌈ρ·m·(m−1)/2⌉ unordered pairs.
    let keep_pairs = (rho * (m * m.saturating_sub(1)) as f64 / 2.0).ceil() as usize;
    let mut pairs: Vec<(usize, usize)> = (0..m)
        .flat_map(|i| ((i + 1)..m).map(move |j| (i, j)))
        .collect();
    pairs.sort_unstable_by(|&(ai, aj), &(bi, bj)| {
        let va = d[ai * m + aj];
        let vb = d[bi * m + bj];
        vb.partial_cmp(&va)
            .expect("finite entries")
            .then(ai.cmp(&bi))
            .then(aj.cmp(&bj))
    });
    let mut mask = vec![0.0; m * m];
    for &(i, j) in pairs.iter().take(keep_pairs) {
        mask[i * m + j] = 1.0;
        mask[j * m + i] = 1.0;
    }
    Ok(mask)
}

/// Keeps only the strongest pairs of a symmetric affinity matrix; see
/// [`sparsify_mask`].
pub fn sparsify(a: &Tensor, rho: f64) -> Result<Tensor> {
    let mask = sparsify_mask(a, rho)?;
    let masked = a
        .data()
        .iter()
        .zip(&mask)
        .map(|(&v, &k)| v * k)
        .collect();
    Tensor::new(a.shape().to_vec(), masked)
}

/// Learned softmax attention over static attributes; scores are trained
/// jointly with the forecasting network.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub scores: Tensor,
}

impl AttentionWeights {
    /// Fresh scores (all zero ⇒ uniform weights) over `dim` attributes.
    pub fn new(dim: usize) -> Self {
        AttentionWeights {
            scores: Tensor::vector(vec![0.0; dim]).with_grad(),
        }
    }

    pub fn from_scores(scores: Tensor) -> Self {
        AttentionWeights { scores }
    }

    pub fn dim(&self) -> usize {
        self.scores.elem_count()
    }

    /// softmax(scores); sums to 1.
    pub fn weights(&self) -> Vec<f64> {
        let s = self.scores.data();
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = s.iter().map(|&x| (x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.iter().map(|&e| e / total).collect()
    }

    /// s*_i = weights ∘ s_i for every subregion row.
    pub fn attend(&self, statics: &StaticFeatureTable) -> Result<Tensor> {
        if statics.dim != self.dim() {
            return Err(Error::Dimension {
                op: "attend_static",
                lhs: vec![statics.dim],
                rhs: vec![self.dim()],
            });
        }
        let w = self.weights();
        let m = statics.m();
        let mut out = Vec::with_capacity(m * statics.dim);
        for i in 0..m {
            out.extend(statics.row(i).iter().zip(&w).map(|(&v, &wk)| v * wk));
        }
        Tensor::new(vec![m, statics.dim], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::UrbanGrid;
    use proptest::prelude::*;

    fn table(rows: &[Vec<f64>]) -> StaticFeatureTable {
        let dim = rows[0].len();
        let names = (0..dim).map(|i| format!("a{i}")).collect();
        let values: Vec<f64> = rows.iter().flatten().copied().collect();
        StaticFeatureTable::new(names, values, rows.len()).unwrap()
    }

    #[test]
    fn js_of_identical_distributions_is_zero() {
        let v = vec![0.2, 0.3, 0.5];
        assert!(js_divergence(&v, &v).unwrap().abs() < 1e-12);
    }

    #[test]
    fn js_of_disjoint_distributions_is_ln2() {
        let js = js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((js - std::f64::consts::LN_2).abs() < 1e-6, "{js}");
    }

    #[test]
    fn js_known_value() {
        let js = js_divergence(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        assert!((js - 0.0338).abs() < 1e-4, "{js}");
    }

    #[test]
    fn js_rejects_all_zero_vector() {
        let err = js_divergence(&[0.0, 0.0], &[1.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn static_affinity_adjacent_pairs_are_one() {
        let g = UrbanGrid::synthetic(2, 2, 500.0, 1, 1).unwrap();
        let t = table(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 1.0],
            vec![2.0, 1.0],
        ]);
        let a = static_affinity(&t, &g.adjacency()).unwrap();
        // In a 2x2 grid every pair is adjacent.
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 0.0 } else { 1.0 };
                assert_eq!(a.at2(i, j), expect);
            }
        }
    }

    #[test]
    fn static_affinity_disjoint_one_hots_give_half() {
        // 1x3 strip: cells 0 and 2 are not adjacent.
        let g = UrbanGrid::synthetic(1, 3, 500.0, 1, 3).unwrap();
        let t = table(&[vec![1.0, 0.0], vec![0.5, 0.5], vec![0.0, 1.0]]);
        let a = static_affinity(&t, &g.adjacency()).unwrap();
        let expect = (-std::f64::consts::LN_2).exp();
        assert!((a.at2(0, 2) - expect).abs() < 1e-6, "{}", a.at2(0, 2));
        assert_eq!(a.at2(0, 1), 1.0);
    }

    #[test]
    fn identical_non_adjacent_features_give_one() {
        let g = UrbanGrid::synthetic(1, 3, 500.0, 1, 3).unwrap();
        let t = table(&[vec![2.0, 3.0], vec![1.0, 9.0], vec![2.0, 3.0]]);
        let a = static_affinity(&t, &g.adjacency()).unwrap();
        assert!((a.at2(0, 2) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sparsify_rho_one_keeps_everything() {
        let a = Tensor::from_rows(&[
            vec![0.0, 0.9, 0.5],
            vec![0.9, 0.0, 0.1],
            vec![0.5, 0.1, 0.0],
        ])
        .unwrap();
        let s = sparsify(&a, 1.0).unwrap();
        assert_eq!(s.data(), a.data());
    }

    #[test]
    fn sparsify_keeps_largest_pair() {
        let a = Tensor::from_rows(&[
            vec![0.0, 0.9, 0.5],
            vec![0.9, 0.0, 0.1],
            vec![0.5, 0.1, 0.0],
        ])
        .unwrap();
        // ⌈0.2·3·2⌉ = 2 entries = 1 unordered pair.
        let s = sparsify(&a, 0.2).unwrap();
        assert_eq!(s.at2(0, 1), 0.9);
        assert_eq!(s.at2(1, 0), 0.9);
        assert_eq!(s.at2(0, 2), 0.0);
        assert_eq!(s.at2(1, 2), 0.0);
    }

    #[test]
    fn sparsify_matches_brute_force_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for trial in 0..50 {
            let m = 10;
            let mut a = Tensor::zeros(&[m, m]);
            for i in 0..m {
                for j in (i + 1)..m {
                    let v: f64 = rng.gen();
                    a.data_mut()[i * m + j] = v;
                    a.data_mut()[j * m + i] = v;
                }
            }
            let rho = rng.gen_range(0.01..1.0);
            let got = sparsify(&a, rho).unwrap();
            // Oracle: sort pairs by value descending, keep ⌈ρ m (m−1)/2⌉.
            let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
            for i in 0..m {
                for j in (i + 1)..m {
                    pairs.push((a.at2(i, j), i, j));
                }
            }
            pairs.sort_by(|x, y| {
                y.0.partial_cmp(&x.0)
                    .unwrap()
                    .then(x.1.cmp(&y.1))
                    .then(x.2.cmp(&y.2))
            });
            let keep = ((rho * (m * (m - 1)) as f64) / 2.0).ceil() as usize;
            let mut expect = Tensor::zeros(&[m, m]);
            for &(v, i, j) in pairs.iter().take(keep) {
                expect.data_mut()[i * m + j] = v;
                expect.data_mut()[j * m + i] = v;
            }
            assert_eq!(got.data(), expect.data(), "trial {trial} rho {rho}");
        }
    }

    #[test]
    fn attend_uniform_weights_divide_by_dim() {
        let t = table(&[vec![2.0, 4.0], vec![6.0, 8.0]]);
        let att = AttentionWeights::new(2);
        let s = att.attend(&t).unwrap();
        assert_eq!(s.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn attend_spiked_scores_select_one_attribute() {
        let t = table(&[vec![2.0, 4.0]]);
        let att = AttentionWeights::from_scores(Tensor::vector(vec![100.0, 0.0]));
        let s = att.attend(&t).unwrap();
        assert!((s.data()[0] - 2.0).abs() < 1e-9);
        assert!(s.data()[1].abs() < 1e-9);
    }

    #[test]
    fn attend_rejects_dim_mismatch() {
        let t = table(&[vec![2.0, 4.0]]);
        let att = AttentionWeights::new(3);
        assert!(att.attend(&t).is_err());
    }

    proptest! {
        #[test]
        fn js_is_symmetric_nonneg_bounded(
            p in proptest::collection::vec(0.0f64..10.0, 4),
            r in proptest::collection::vec(0.0f64..10.0, 4),
        ) {
            prop_assume!(p.iter().sum::<f64>() > 0.0 && r.iter().sum::<f64>() > 0.0);
            let ab = js_divergence(&p, &r).unwrap();
            let ba = js_divergence(&r, &p).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ab >= 0.0);
            prop_assert!(ab <= std::f64::consts::LN_2 + 1e-12);
        }

        #[test]
        fn sparsify_is_idempotent(seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = 8;
            let mut a = Tensor::zeros(&[m, m]);
            for i in 0..m {
                for j in (i + 1)..m {
                    let v: f64 = rng.gen();
                    a.data_mut()[i * m + j] = v;
                    a.data_mut()[j * m + i] = v;
                }
            }
            let rho = rng.gen_range(0.05..1.0);
            let once = sparsify(&a, rho).unwrap();
            let twice = sparsify(&once, rho).unwrap();
            prop_assert_eq!(once.data(), twice.data());
        }

        #[test]
        fn sparsify_density_bound(seed in 0u64..200) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = 12;
            let mut a = Tensor::zeros(&[m, m]);
            for i in 0..m {
                for j in (i + 1)..m {
                    let v: f64 = rng.gen_range(0.1..1.0);
                    a.data_mut()[i * m + j] = v;
                    a.data_mut()[j * m + i] = v;
                }
            }
            let rho = rng.gen_range(0.05..0.9);
            let s = sparsify(&a, rho).unwrap();
            let nonzero = s.data().iter().filter(|&&v| v != 0.0).count();
            let allowed = 2 * ((rho * (m * (m - 1)) as f64 / 2.0).ceil() as usize);
            prop_assert!(nonzero <= allowed);
        }
    }
}
