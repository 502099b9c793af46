//! Retrieval and diversity diagnostics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::FeatureSet;
use crate::ensemble::{cosine, EnsembleModel, TestEmbedding};
use crate::error::{Error, Result};
use crate::tensor::{dot, normalize, pearson, Rng};

/// Recall@K for each requested `K`.
///
/// Candidates are ranked by dot product, highest first; equal scores are
/// ordered by ascending sample index. The query never retrieves itself.
pub fn recall_at_k(
    embeddings: &[Vec<f64>],
    labels: &[u32],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    let n = embeddings.len();
    if labels.len() != n {
        return Err(Error::invalid(format!("{} labels for {n} embeddings", labels.len())));
    }
    if n < 2 {
        return Err(Error::invalid("recall needs at least 2 samples"));
    }
    if ks.is_empty() {
        return Err(Error::invalid("no K values requested"));
    }
    for &k in ks {
        if k == 0 || k >= n {
            return Err(Error::invalid(format!("K={k} must lie in 1..{n}")));
        }
    }
    // Zero-based rank of the first relevant item per query, if any.
    let ranks: Vec<Option<usize>> = (0..n)
        .into_par_iter()
        .map(|q| {
            let sims: Vec<f64> = embeddings.iter().map(|e| dot(&embeddings[q], e)).collect();
            let best = (0..n)
                .filter(|&c| c != q && labels[c] == labels[q])
                .fold(None, |best: Option<usize>, c| match best {
                    Some(b) if sims[b] >= sims[c] => Some(b),
                    _ => Some(c),
                })?;
            Some(
                (0..n)
                    .filter(|&c| {
                        c != q && (sims[c] > sims[best] || (sims[c] == sims[best] && c < best))
                    })
                    .count(),
            )
        })
        .collect();
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|r| matches!(r, Some(r) if *r < k)).count();
            (k, hits as f64 / n as f64)
        })
        .collect())
}

/// Mean absolute correlation between embedding dimensions of different groups.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureCorrelation {
    pub mean_abs: f64,
    pub pairs: usize,
    /// Pairs dropped because one dimension was constant.
    pub skipped: usize,
}

pub fn feature_correlation(model: &EnsembleModel, inputs: &[&[f64]]) -> Result<FeatureCorrelation> {
    let raw = inputs
        .iter()
        .map(|x| model.embed(x))
        .collect::<Result<Vec<_>>>()?;
    feature_correlation_raw(model, &raw)
}

pub fn feature_correlation_raw(model: &EnsembleModel, raw: &[Vec<f64>]) -> Result<FeatureCorrelation> {
    if model.num_learners() < 2 {
        return Err(Error::UndefinedCorrelation(
            "feature correlation needs at least 2 learners".into(),
        ));
    }
    if raw.len() < 2 {
        return Err(Error::invalid("feature correlation needs at least 2 samples"));
    }
    let d = model.embed_dim();
    // Centered, unit-norm columns; `None` marks constant dimensions.
    let cols: Vec<Option<Vec<f64>>> = (0..d)
        .map(|k| {
            let col: Vec<f64> = raw.iter().map(|f| f[k]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let centered: Vec<f64> = col.iter().map(|v| v - mean).collect();
            normalize(&centered).ok()
        })
        .collect();
    let partition = &model.partition;
    let (mut sum, mut pairs, mut skipped) = (0.0, 0usize, 0usize);
    for k in 0..d {
        for l in k + 1..d {
            if partition.group_of(k) == partition.group_of(l) {
                continue;
            }
            match (&cols[k], &cols[l]) {
                (Some(a), Some(b)) => {
                    sum += dot(a, b).clamp(-1.0, 1.0).abs();
                    pairs += 1;
                }
                _ => skipped += 1,
            }
        }
    }
    if skipped > 0 {
        log::debug!("feature correlation skipped {skipped} pairs with constant dimensions");
    }
    if pairs == 0 {
        return Err(Error::UndefinedCorrelation(
            "every cross-group dimension pair has a constant dimension".into(),
        ));
    }
    Ok(FeatureCorrelation {
        mean_abs: sum / pairs as f64,
        pairs,
        skipped,
    })
}

/// Mean absolute correlation between the per-pair scores of every two
/// learners. `scores[m][p]` is learner `m`'s score on pair `p`.
pub fn classifier_correlation_from_scores(scores: &[Vec<f64>]) -> Result<f64> {
    if scores.len() < 2 {
        return Err(Error::UndefinedCorrelation(
            "classifier correlation needs at least 2 learners".into(),
        ));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..scores.len() {
        for j in i + 1..scores.len() {
            sum += pearson(&scores[i], &scores[j])?.abs();
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Per-learner cosine scores on the given sample pairs.
pub fn learner_pair_scores(
    model: &EnsembleModel,
    inputs: &[&[f64]],
    pairs: &[(usize, usize)],
) -> Result<Vec<Vec<f64>>> {
    let raw = inputs
        .iter()
        .map(|x| model.embed(x))
        .collect::<Result<Vec<_>>>()?;
    learner_pair_scores_raw(model, &raw, pairs)
}

fn learner_pair_scores_raw(
    model: &EnsembleModel,
    raw: &[Vec<f64>],
    pairs: &[(usize, usize)],
) -> Result<Vec<Vec<f64>>> {
    (0..model.num_learners())
        .map(|m| {
            pairs
                .iter()
                .map(|&(a, b)| {
                    let p = &model.partition;
                    cosine(p.slice(&raw[a], m), p.slice(&raw[b], m))
                })
                .collect()
        })
        .collect()
}

pub fn classifier_correlation(
    model: &EnsembleModel,
    inputs: &[&[f64]],
    pairs: &[(usize, usize)],
) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(Error::invalid("classifier correlation needs at least 2 pairs"));
    }
    classifier_correlation_from_scores(&learner_pair_scores(model, inputs, pairs)?)
}

/// `count` uniformly drawn pairs of distinct indices below `n`.
pub fn sample_eval_pairs(n: usize, count: usize, rng: &mut Rng) -> Result<Vec<(usize, usize)>> {
    if n < 2 {
        return Err(Error::invalid("need at least 2 samples to draw pairs"));
    }
    Ok((0..count)
        .map(|_| {
            let a = rng.below(n);
            let mut b = rng.below(n - 1);
            if b >= a {
                b += 1;
            }
            (a, b)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub test_embedding: TestEmbedding,
    pub eval_pairs: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ks: vec![1, 2, 4, 8],
            test_embedding: TestEmbedding::default(),
            eval_pairs: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub recall_at: BTreeMap<usize, f64>,
    /// `None` with a single learner.
    pub feature_corr: Option<f64>,
    pub clf_corr: Option<f64>,
    pub learner_recall_at_1: Vec<f64>,
}

impl EvalReport {
    pub fn recall_at_1(&self) -> Option<f64> {
        self.recall_at.get(&1).copied()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (k, r) in &self.recall_at {
            let _ = writeln!(out, "r_at_{k},{r}");
        }
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |v| v.to_string());
        let _ = writeln!(out, "feat_corr,{}", opt(self.feature_corr));
        let _ = writeln!(out, "clf_corr,{}", opt(self.clf_corr));
        for (m, r) in self.learner_recall_at_1.iter().enumerate() {
            let _ = writeln!(out, "learner_{}_r_at_1,{r}", m + 1);
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (k, r) in &self.recall_at {
            let _ = writeln!(out, "{:<22}{:>8.2}%", format!("R@{k}"), 100.0 * r);
        }
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(out, "{:<22}{:>9}", "feature correlation", opt(self.feature_corr));
        let _ = writeln!(out, "{:<22}{:>9}", "classifier correlation", opt(self.clf_corr));
        for (m, r) in self.learner_recall_at_1.iter().enumerate() {
            let _ = writeln!(out, "{:<22}{:>8.2}%", format!("learner {} R@1", m + 1), 100.0 * r);
        }
        out
    }
}

/// Full report on a labelled set.
pub fn evaluate(model: &EnsembleModel, set: &FeatureSet, opts: &EvalOptions) -> Result<EvalReport> {
    let raw = (0..set.len())
        .map(|i| model.embed(set.sample(i)))
        .collect::<Result<Vec<_>>>()?;
    let combined = raw
        .iter()
        .map(|f| {
            crate::ensemble::combine_learners(&model.partition, &model.schedule, f, &opts.test_embedding)
        })
        .collect::<Result<Vec<_>>>()?;
    let recall_at = recall_at_k(&combined, &set.labels, &opts.ks)?;
    let learner_recall_at_1 = (0..model.num_learners())
        .map(|m| {
            let unit = raw
                .iter()
                .map(|f| normalize(model.partition.slice(f, m)))
                .collect::<Result<Vec<_>>>()?;
            Ok(recall_at_k(&unit, &set.labels, &[1])?[&1])
        })
        .collect::<Result<Vec<_>>>()?;
    let (feature_corr, clf_corr) = if model.num_learners() >= 2 {
        let fc = feature_correlation_raw(model, &raw)?.mean_abs;
        let mut rng = Rng::with_stream(opts.seed, 3);
        let pairs = sample_eval_pairs(set.len(), opts.eval_pairs.max(2), &mut rng)?;
        let scores = learner_pair_scores_raw(model, &raw, &pairs)?;
        (Some(fc), Some(classifier_correlation_from_scores(&scores)?))
    } else {
        (None, None)
    };
    Ok(EvalReport {
        recall_at,
        feature_corr,
        clf_corr,
        learner_recall_at_1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::GroupPartition;
    use crate::tensor::Matrix;

    fn brute_force(embeddings: &[Vec<f64>], labels: &[u32], k: usize) -> f64 {
        let n = embeddings.len();
        let mut hits = 0;
        for q in 0..n {
            let mut order: Vec<(f64, usize)> = (0..n)
                .filter(|&c| c != q)
                .map(|c| (dot(&embeddings[q], &embeddings[c]), c))
                .collect();
            order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            if order[..k].iter().any(|&(_, c)| labels[c] == labels[q]) {
                hits += 1;
            }
        }
        hits as f64 / n as f64
    }

    #[test]
    fn two_sample_examples() {
        let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(recall_at_k(&e, &[3, 3], &[1]).unwrap()[&1], 1.0);
        assert_eq!(recall_at_k(&e, &[3, 4], &[1]).unwrap()[&1], 0.0);
        assert!(recall_at_k(&e, &[3, 4], &[2]).is_err());
        assert!(recall_at_k(&e[..1], &[3], &[1]).is_err());
    }

    #[test]
    fn ties_break_toward_lower_index() {
        // Query 0 sees candidates 1 (other class) and 2 (same class) at the
        // same score, so candidate 1 wins the tie.
        let e = vec![vec![1.0], vec![1.0], vec![1.0]];
        let r = recall_at_k(&e, &[0, 1, 0], &[1]).unwrap()[&1];
        // Query 0 → 1 (miss); query 1 → 0 (miss); query 2 → 0 (hit).
        assert!((r - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r, brute_force(&e, &[0, 1, 0], 1));
    }

    #[test]
    fn matches_brute_force() {
        for seed in 0..5 {
            let mut rng = Rng::new(seed);
            let e: Vec<Vec<f64>> = (0..200)
                .map(|_| (0..4).map(|_| (rng.below(5) as f64) * 0.5).collect())
                .collect();
            let labels: Vec<u32> = (0..200).map(|_| rng.below(10) as u32).collect();
            let ks = [1, 2, 4, 8, 16];
            let got = recall_at_k(&e, &labels, &ks).unwrap();
            for k in ks {
                assert_eq!(got[&k], brute_force(&e, &labels, k), "seed {seed} K={k}");
            }
        }
    }

    #[test]
    fn full_depth_recall_is_one() {
        let mut rng = Rng::new(1);
        let e: Vec<Vec<f64>> = (0..12).map(|_| vec![rng.normal(), rng.normal()]).collect();
        let labels: Vec<u32> = (0..12).map(|i| (i / 3) as u32).collect();
        assert_eq!(recall_at_k(&e, &labels, &[11]).unwrap()[&11], 1.0);
        let r = recall_at_k(&e, &labels, &[1, 2, 4, 8]).unwrap();
        assert!(r.values().collect::<Vec<_>>().windows(2).all(|w| w[0] <= w[1]));
    }

    fn two_group_model(w: Vec<f64>, h: usize) -> EnsembleModel {
        EnsembleModel::new(
            Matrix::new(h, 4, w).unwrap(),
            GroupPartition::new(vec![2, 2]).unwrap(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn duplicated_groups_are_fully_correlated() {
        // Columns 2,3 repeat columns 0,1.
        let mut rng = Rng::new(2);
        let mut w = vec![0.0; 12];
        for r in 0..3 {
            let a = rng.normal();
            let b = rng.normal();
            w[r * 4..r * 4 + 4].copy_from_slice(&[a, b, a, b]);
        }
        let model = two_group_model(w, 3);
        let xs: Vec<Vec<f64>> = (0..50).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        let inputs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let fc = feature_correlation(&model, &inputs).unwrap();
        // Pairs (0,2) and (1,3) are exact copies; the mean is at least their share.
        assert!(fc.mean_abs > 0.5 - 1e-12);
        let pairs: Vec<(usize, usize)> = (0..49).map(|i| (i, i + 1)).collect();
        assert!((classifier_correlation(&model, &inputs, &pairs).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_groups_give_one() {
        let mut rng = Rng::new(3);
        let model = EnsembleModel::new(
            Matrix::new(1, 2, vec![1.0, 1.0]).unwrap(),
            GroupPartition::new(vec![1, 1]).unwrap(),
            None,
        )
        .unwrap();
        let xs: Vec<Vec<f64>> = (0..20).map(|_| vec![rng.normal()]).collect();
        let inputs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        assert!((feature_correlation(&model, &inputs).unwrap().mean_abs - 1.0).abs() < 1e-12);
    }

    #[test]
    fn independent_groups_are_nearly_uncorrelated() {
        let w = vec![
            1.0, 0.5, 0.0, 0.0, //
            0.3, -1.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, 0.2, //
            0.0, 0.0, -0.4, 1.0,
        ];
        let model = two_group_model(w, 4);
        let mut rng = Rng::new(0);
        let xs: Vec<Vec<f64>> = (0..5000).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
        let inputs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        assert!(feature_correlation(&model, &inputs).unwrap().mean_abs < 0.1);
    }

    #[test]
    fn feature_correlation_edge_cases() {
        let single = EnsembleModel::new(Matrix::identity(2), GroupPartition::single(2).unwrap(), None)
            .unwrap();
        let xs = [vec![1.0, 2.0], vec![3.0, 1.0]];
        let inputs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        assert!(feature_correlation(&single, &inputs).is_err());

        // Second dimension constant: its pairs are skipped.
        let model = EnsembleModel::new(
            Matrix::identity(3),
            GroupPartition::new(vec![1, 2]).unwrap(),
            None,
        )
        .unwrap();
        let xs = [vec![1.0, 5.0, 2.0], vec![2.0, 5.0, 4.0], vec![4.0, 5.0, 5.0]];
        let inputs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let fc = feature_correlation(&model, &inputs).unwrap();
        assert_eq!((fc.pairs, fc.skipped), (1, 1));
        let a = [1.0, 2.0, 4.0];
        let b = [2.0, 4.0, 5.0];
        assert!((fc.mean_abs - pearson(&a, &b).unwrap().abs()).abs() < 1e-12);
    }

    #[test]
    fn classifier_correlation_examples() {
        let s = vec![0.1, 0.5, -0.3, 0.9];
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        assert!((classifier_correlation_from_scores(&[s.clone(), neg]).unwrap() - 1.0).abs() < 1e-12);

        let a = vec![1.0, 2.0, 3.0, 4.0];
        let b = vec![2.0, 1.0, 4.0, 3.0];
        let c = vec![4.0, 3.0, 2.0, 1.0];
        // r(a,b) = 0.6, r(a,c) = −1, r(b,c) = −0.6.
        let got = classifier_correlation_from_scores(&[a, b, c]).unwrap();
        assert!((got - (0.6 + 1.0 + 0.6) / 3.0).abs() < 1e-12);

        assert!(classifier_correlation_from_scores(&[s.clone(), vec![1.0; 4]]).is_err());
        assert!(classifier_correlation_from_scores(&[s]).is_err());
    }

    #[test]
    fn evaluate_report_shape() {
        let mut rng = Rng::new(4);
        let set = crate::data::synth_gaussian(&crate::data::SynthSpec {
            classes: 4,
            per_class: 5,
            feature_dim: 6,
            ..Default::default()
        })
        .unwrap();
        let model = EnsembleModel::random(6, GroupPartition::new(vec![2, 4]).unwrap(), None, &mut rng)
            .unwrap();
        let r = evaluate(&model, &set, &EvalOptions::default()).unwrap();
        assert_eq!(r.learner_recall_at_1.len(), 2);
        assert!(r.feature_corr.unwrap() <= 1.0 && r.clf_corr.unwrap() >= 0.0);
        assert!(r.to_csv().starts_with("metric,value\nr_at_1,"));
        assert_eq!(r, evaluate(&model, &set, &EvalOptions::default()).unwrap());
    }
}
