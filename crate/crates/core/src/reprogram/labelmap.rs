//! Output mappings from the source label space to the target label
//! space: identity, frequency-greedy one-to-one (FLM), and a Bayesian
//! conditional matrix (BLM).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Graph, NodeId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Identity,
    Flm,
    Blm,
}

/// Fitted label mapping. All kinds renormalize so the mapped scores lie
/// on the target simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LabelMap {
    /// Shared label space; requires equal widths.
    Identity { classes: usize },
    /// Injective map: target class `t` reads source class `assignment[t]`.
    Flm { assignment: Vec<usize>, source_classes: usize },
    /// Row-normalized conditional weights, one row per target class.
    Blm { matrix: Tensor },
}

impl LabelMap {
    pub fn kind(&self) -> MapKind {
        match self {
            LabelMap::Identity { .. } => MapKind::Identity,
            LabelMap::Flm { .. } => MapKind::Flm,
            LabelMap::Blm { .. } => MapKind::Blm,
        }
    }

    pub fn source_width(&self) -> usize {
        match self {
            LabelMap::Identity { classes } => *classes,
            LabelMap::Flm { source_classes, .. } => *source_classes,
            LabelMap::Blm { matrix } => matrix.cols(),
        }
    }

    pub fn target_width(&self) -> usize {
        match self {
            LabelMap::Identity { classes } => *classes,
            LabelMap::Flm { assignment, .. } => assignment.len(),
            LabelMap::Blm { matrix } => matrix.rows(),
        }
    }

    /// Map a source probability vector to target scores on the simplex.
    /// A degenerate all-zero selection falls back to uniform.
    pub fn map_output(&self, source_probs: &Tensor) -> Result<Tensor> {
        if source_probs.numel() != self.source_width() {
            return Err(Error::InvalidInput(format!(
                "map expects width {}, got {}",
                self.source_width(),
                source_probs.numel()
            )));
        }
        source_probs.check_finite("map_output input")?;
        let raw: Vec<f64> = match self {
            LabelMap::Identity { .. } => return Ok(source_probs.clone()),
            LabelMap::Flm { assignment, .. } => assignment
                .iter()
                .map(|&s| source_probs.data()[s])
                .collect(),
            LabelMap::Blm { matrix } => (0..matrix.rows())
                .map(|t| {
                    matrix
                        .row(t)
                        .iter()
                        .zip(source_probs.data())
                        .map(|(m, p)| m * p)
                        .sum()
                })
                .collect(),
        };
        let sum: f64 = raw.iter().sum();
        let k = raw.len();
        if sum <= 0.0 {
            return Ok(Tensor::filled(vec![k], 1.0 / k as f64));
        }
        Ok(Tensor::from_vec(raw.into_iter().map(|v| v / sum).collect()))
    }

    /// Graph version over batched source probabilities `[B, K_S]`,
    /// differentiable w.r.t. the probabilities (the map itself carries no
    /// trainable parameters).
    pub fn map_graph(&self, g: &mut Graph, probs: NodeId) -> Result<NodeId> {
        match self {
            LabelMap::Identity { .. } => Ok(probs),
            LabelMap::Flm { assignment, .. } => {
                let picked = g.gather_cols(probs, assignment.clone())?;
                g.row_normalize(picked)
            }
            LabelMap::Blm { matrix } => {
                let mt = g.input(matrix.transpose()?)?;
                let scores = g.matmul(probs, mt)?;
                g.row_normalize(scores)
            }
        }
    }
}

/// Fit a frequency-greedy one-to-one mapping. Builds the target-by-source
/// count table of argmax predictions, then repeatedly assigns the
/// unclaimed (target, source) pair with the highest count; ties break
/// toward the smaller target index, then the smaller source index.
pub fn flm_fit(
    source_argmax: &[usize],
    target_labels: &[usize],
    target_classes: usize,
    source_classes: usize,
) -> Result<LabelMap> {
    if target_classes > source_classes {
        return Err(Error::Infeasible(format!(
            "cannot map {target_classes} targets one-to-one into {source_classes} sources"
        )));
    }
    if source_argmax.len() != target_labels.len() {
        return Err(Error::InvalidInput("prediction/label length mismatch".into()));
    }
    let mut counts = vec![vec![0u64; source_classes]; target_classes];
    for (&s, &t) in source_argmax.iter().zip(target_labels) {
        if s >= source_classes || t >= target_classes {
            return Err(Error::Index("class index out of range in flm_fit".into()));
        }
        counts[t][s] += 1;
    }

    let mut assignment = vec![usize::MAX; target_classes];
    let mut target_done = vec![false; target_classes];
    let mut source_claimed = vec![false; source_classes];
    for _ in 0..target_classes {
        let mut best: Option<(u64, usize, usize)> = None;
        for t in 0..target_classes {
            if target_done[t] {
                continue;
            }
            for s in 0..source_classes {
                if source_claimed[s] {
                    continue;
                }
                let cand = (counts[t][s], t, s);
                let better = match best {
                    None => true,
                    Some((bc, bt, bs)) => {
                        cand.0 > bc || (cand.0 == bc && (t < bt || (t == bt && s < bs)))
                    }
                };
                if better {
                    best = Some(cand);
                }
            }
        }
        let (_, t, s) = best.expect("assignment always possible when K_T <= K_S");
        assignment[t] = s;
        target_done[t] = true;
        source_claimed[s] = true;
    }
    Ok(LabelMap::Flm {
        assignment,
        source_classes,
    })
}

/// Fit the Bayesian conditional matrix: `M[t][s]` proportional to
/// `alpha + sum of p_S(x_i)[s] over images of target class t`, rows
/// normalized. A class with zero examples gets a uniform row.
pub fn blm_fit(
    source_probs: &[Tensor],
    target_labels: &[usize],
    target_classes: usize,
    source_classes: usize,
    alpha: f64,
) -> Result<LabelMap> {
    if alpha <= 0.0 {
        return Err(Error::Config("blm smoothing alpha must be positive".into()));
    }
    if source_probs.len() != target_labels.len() {
        return Err(Error::InvalidInput("prob/label length mismatch".into()));
    }
    let mut rows = vec![vec![alpha; source_classes]; target_classes];
    for (p, &t) in source_probs.iter().zip(target_labels) {
        if t >= target_classes {
            return Err(Error::Index("target label out of range in blm_fit".into()));
        }
        if p.numel() != source_classes {
            return Err(Error::InvalidInput("source prob width mismatch".into()));
        }
        for (s, &v) in p.data().iter().enumerate() {
            rows[t][s] += v;
        }
    }
    let mut data = Vec::with_capacity(target_classes * source_classes);
    for row in rows {
        let sum: f64 = row.iter().sum();
        data.extend(row.into_iter().map(|v| v / sum));
    }
    Ok(LabelMap::Blm {
        matrix: Tensor::new(vec![target_classes, source_classes], data)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_is_passthrough() {
        let map = LabelMap::Identity { classes: 3 };
        let p = Tensor::from_vec(vec![0.2, 0.3, 0.5]);
        assert_eq!(map.map_output(&p).unwrap(), p);
    }

    #[test]
    fn flm_recovers_permutation() {
        // Predictions are an exact permutation of the labels.
        let perm = [2usize, 0, 1];
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let preds: Vec<usize> = labels.iter().map(|&t| perm[t]).collect();
        let map = flm_fit(&preds, &labels, 3, 3).unwrap();
        match &map {
            LabelMap::Flm { assignment, .. } => assert_eq!(assignment, &vec![2, 0, 1]),
            _ => panic!(),
        }
        let p = Tensor::from_vec(vec![0.1, 0.2, 0.7]);
        let mapped = map.map_output(&p).unwrap();
        // target t reads source perm[t], then renormalizes (sum is 1 here).
        assert!((mapped.data()[0] - 0.7).abs() < 1e-12);
        assert!((mapped.data()[1] - 0.1).abs() < 1e-12);
        assert!((mapped.data()[2] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn flm_matches_exhaustive_best_greedy_oracle() {
        // 3 targets, 5 sources, a constructed count table. The oracle
        // runs greedy claiming for every target order and keeps the
        // assignment with the highest total count.
        let counts: [[u64; 5]; 3] = [
            [10, 2, 0, 0, 0],
            [9, 8, 0, 1, 0],
            [0, 7, 6, 0, 0],
        ];
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        for (t, row) in counts.iter().enumerate() {
            for (s, &n) in row.iter().enumerate() {
                for _ in 0..n {
                    preds.push(s);
                    labels.push(t);
                }
            }
        }
        let map = flm_fit(&preds, &labels, 3, 5).unwrap();
        let got = match &map {
            LabelMap::Flm { assignment, .. } => assignment.clone(),
            _ => panic!(),
        };

        // Independent oracle: all 3! orders, greedy per order.
        let orders = [
            [0usize, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ];
        let mut best_total = 0u64;
        let mut best_assign: Option<Vec<usize>> = None;
        for order in orders {
            let mut claimed = [false; 5];
            let mut assign = vec![0usize; 3];
            let mut total = 0u64;
            for &t in &order {
                let mut best_s = usize::MAX;
                let mut best_c = 0u64;
                for s in 0..5 {
                    if !claimed[s] && (best_s == usize::MAX || counts[t][s] > best_c) {
                        best_s = s;
                        best_c = counts[t][s];
                    }
                }
                claimed[best_s] = true;
                assign[t] = best_s;
                total += counts[t][best_s];
            }
            let better = match &best_assign {
                None => true,
                Some(prev) => total > best_total || (total == best_total && assign < *prev),
            };
            if better {
                best_total = total;
                best_assign = Some(assign);
            }
        }
        assert_eq!(got, best_assign.unwrap());
    }

    #[test]
    fn flm_tie_break_lowest_unclaimed_source() {
        // Every prediction is source 1: the most frequent target claims
        // it, the rest get the lowest unclaimed sources in target order.
        let preds = vec![1usize; 7];
        let labels = vec![0, 0, 0, 1, 1, 2, 2];
        let map = flm_fit(&preds, &labels, 3, 4).unwrap();
        match map {
            LabelMap::Flm { assignment, .. } => {
                assert_eq!(assignment[0], 1);
                assert_eq!(assignment[1], 0);
                assert_eq!(assignment[2], 2);
            }
            _ => panic!(),
        }
    }

    #[test]
    fn flm_infeasible_when_more_targets_than_sources() {
        assert!(matches!(
            flm_fit(&[0, 1], &[0, 1], 3, 2),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn blm_single_class_row_is_mean_source_distribution() {
        // Two images of one target class, alpha -> 0: the row approaches
        // the (normalized) mean of the two source distributions.
        let p1 = Tensor::from_vec(vec![0.6, 0.3, 0.1]);
        let p2 = Tensor::from_vec(vec![0.2, 0.5, 0.3]);
        let map = blm_fit(&[p1, p2], &[0, 0], 1, 3, 1e-12).unwrap();
        match map {
            LabelMap::Blm { matrix } => {
                let expect = [0.4, 0.4, 0.2];
                for (a, b) in matrix.row(0).iter().zip(expect) {
                    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
                }
            }
            _ => panic!(),
        }
    }

    #[test]
    fn blm_large_alpha_approaches_uniform() {
        let p1 = Tensor::from_vec(vec![1.0, 0.0]);
        let map = blm_fit(&[p1], &[0], 2, 2, 1e9).unwrap();
        match map {
            LabelMap::Blm { matrix } => {
                for &v in matrix.data() {
                    assert!((v - 0.5).abs() < 1e-8);
                }
            }
            _ => panic!(),
        }
    }

    #[test]
    fn blm_zero_example_class_is_uniform_row() {
        let p1 = Tensor::from_vec(vec![0.9, 0.1]);
        let map = blm_fit(&[p1], &[0], 2, 2, 1.0).unwrap();
        match map {
            LabelMap::Blm { matrix } => {
                for &v in matrix.row(1) {
                    assert!((v - 0.5).abs() < 1e-12);
                }
            }
            _ => panic!(),
        }
    }

    #[test]
    fn blm_matches_bruteforce_recount() {
        // Independent oracle: recompute the matrix from raw counts on a
        // small instance and compare entrywise.
        let mut probs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            let t = i % 4;
            let mut v = vec![0.1; 3];
            v[(i + t) % 3] = 0.8;
            let s: f64 = v.iter().sum();
            probs.push(Tensor::from_vec(v.iter().map(|x| x / s).collect()));
            labels.push(t);
        }
        let alpha = 0.7;
        let map = blm_fit(&probs, &labels, 4, 3, alpha).unwrap();

        let mut expect = vec![vec![alpha; 3]; 4];
        for (p, &t) in probs.iter().zip(&labels) {
            for s in 0..3 {
                expect[t][s] += p.data()[s];
            }
        }
        match map {
            LabelMap::Blm { matrix } => {
                for t in 0..4 {
                    let sum: f64 = expect[t].iter().sum();
                    for s in 0..3 {
                        let want = expect[t][s] / sum;
                        assert!((matrix.row(t)[s] - want).abs() < 1e-12);
                    }
                }
            }
            _ => panic!(),
        }
    }

    #[test]
    fn blm_uniform_matrix_maps_everything_to_uniform() {
        let matrix = Tensor::new(vec![2, 4], vec![0.25; 8]).unwrap();
        let map = LabelMap::Blm { matrix };
        let p = Tensor::from_vec(vec![0.7, 0.1, 0.1, 0.1]);
        let out = map.map_output(&p).unwrap();
        for &v in out.data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn map_output_lands_on_simplex(
            raw in prop::collection::vec(0.0f64..1.0, 5),
            pick in 0usize..3,
        ) {
            let sum: f64 = raw.iter().sum();
            prop_assume!(sum > 1e-6);
            let p = Tensor::from_vec(raw.iter().map(|v| v / sum).collect());
            let map = match pick {
                0 => LabelMap::Identity { classes: 5 },
                1 => LabelMap::Flm { assignment: vec![4, 0, 2], source_classes: 5 },
                _ => LabelMap::Blm {
                    matrix: Tensor::new(vec![3, 5], vec![
                        0.5, 0.1, 0.1, 0.2, 0.1,
                        0.1, 0.6, 0.1, 0.1, 0.1,
                        0.2, 0.2, 0.2, 0.2, 0.2,
                    ]).unwrap(),
                },
            };
            let out = map.map_output(&p).unwrap();
            let s: f64 = out.data().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(out.data().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn argmax_invariant_under_positive_scaling(
            raw in prop::collection::vec(0.01f64..1.0, 5),
            scale in 0.1f64..10.0,
        ) {
            let p = Tensor::from_vec(raw);
            let map = LabelMap::Blm {
                matrix: Tensor::new(vec![3, 5], vec![
                    0.5, 0.1, 0.1, 0.2, 0.1,
                    0.1, 0.6, 0.1, 0.1, 0.1,
                    0.05, 0.05, 0.4, 0.3, 0.2,
                ]).unwrap(),
            };
            let a = map.map_output(&p).unwrap().argmax();
            let b = map.map_output(&p.scale(scale)).unwrap().argmax();
            prop_assert_eq!(a, b);
        }
    }
}
