//! The partitioned embedding.
//!
//! A linear embedding `f(x) = φ(x)ᵀ W` with `W ∈ R^{h×d}` is cut column-wise
//! into `M` non-overlapping groups; group `m` is weak learner `f_m`. The
//! learners are combined with the fixed online-boosting coefficients
//!
//! ```text
//! η_m = 2 / (m + 1),   α_m = η_m · ∏_{n=m+1}^{M} (1 - η_n)
//! ```
//!
//! At test time each learner output is L2-normalized, scaled by a power of
//! `α_m`, and the pieces are concatenated.

use std::io::{Read, Write};
use std::ops::Range;

use crate::codec::{to_u32, LeReader, LeWriter};
use crate::error::{Error, Result};
use crate::tensor::{dot, norm, normalize, Matrix, Rng};

/// Group sizes `d_1..d_M` of the embedding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPartition {
    sizes: Vec<usize>,
    /// `offsets[m]` is the first column of group `m`; the last entry is `d`.
    offsets: Vec<usize>,
}

/// Hand-chosen group sizes for the embedding/group-count combinations that
/// have published settings: `(d, sizes)`.
pub const PRESET_PARTITIONS: &[(usize, &[usize])] = &[
    (512, &[170, 342]),
    (512, &[96, 160, 256]),
    (512, &[52, 102, 152, 204]),
    (512, &[34, 68, 102, 138, 170]),
    (1024, &[170, 342, 512]),
    (1024, &[102, 204, 308, 410]),
    (1024, &[68, 136, 204, 274, 342]),
    (1024, &[50, 96, 148, 196, 242, 292]),
    (1024, &[36, 74, 110, 148, 182, 218, 256]),
];

impl GroupPartition {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::invalid("partition needs at least one group"));
        }
        if sizes.contains(&0) {
            return Err(Error::invalid("every group needs at least one dimension"));
        }
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for s in &sizes {
            acc += s;
            offsets.push(acc);
        }
        Ok(Self { sizes, offsets })
    }

    /// One group spanning all `d` dimensions.
    pub fn single(d: usize) -> Result<Self> {
        Self::new(vec![d])
    }

    /// Group sizes proportional to the boosting weights: `⌊α_m·d⌋` for all
    /// but the last group, which takes the remainder.
    pub fn proportional(d: usize, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::invalid("number of groups must be at least 1"));
        }
        if d < m {
            return Err(Error::invalid(format!(
                "embedding size {d} is smaller than the number of groups {m}"
            )));
        }
        let schedule = BoostSchedule::new(m)?;
        let mut sizes: Vec<usize> = schedule.alpha[..m - 1]
            .iter()
            .map(|a| ((a * d as f64).floor() as usize).max(1))
            .collect();
        // Minimum-size bumps can eat the remainder for tiny d; give it back
        // from the largest leading group.
        while sizes.iter().sum::<usize>() >= d {
            let (i, _) = sizes
                .iter()
                .enumerate()
                .rev()
                .max_by_key(|&(_, s)| *s)
                .expect("m >= 2 here");
            sizes[i] -= 1;
        }
        let rest = d - sizes.iter().sum::<usize>();
        sizes.push(rest);
        Self::new(sizes)
    }

    /// The published sizes for `(d, m)`, if that combination has a row.
    pub fn preset(d: usize, m: usize) -> Option<Self> {
        PRESET_PARTITIONS
            .iter()
            .find(|(pd, sizes)| *pd == d && sizes.len() == m)
            .map(|(_, sizes)| Self::new(sizes.to_vec()).expect("preset sizes are valid"))
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets[..self.sizes.len()]
    }

    pub fn num_groups(&self) -> usize {
        self.sizes.len()
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, m: usize) -> Range<usize> {
        self.offsets[m]..self.offsets[m + 1]
    }

    pub fn slice<'a>(&self, f: &'a [f64], m: usize) -> &'a [f64] {
        &f[self.range(m)]
    }

    /// Index of the group containing dimension `k`.
    pub fn group_of(&self, k: usize) -> usize {
        self.offsets[1..].partition_point(|&o| o <= k)
    }
}

/// Where group sizes come from.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum PartitionSource {
    #[default]
    Proportional,
    Preset,
    Explicit(Vec<usize>),
}

impl PartitionSource {
    pub fn resolve(&self, d: usize, m: usize) -> Result<GroupPartition> {
        match self {
            PartitionSource::Proportional => GroupPartition::proportional(d, m),
            PartitionSource::Preset => {
                let p = GroupPartition::preset(d, m).ok_or_else(|| {
                    Error::invalid(format!("no preset group sizes for d={d}, M={m}"))
                })?;
                if p.total() != d {
                    log::warn!(
                        "preset group sizes {:?} cover {} of {d} dimensions; embedding width follows the sizes",
                        p.sizes(),
                        p.total()
                    );
                }
                Ok(p)
            }
            PartitionSource::Explicit(sizes) => {
                let p = GroupPartition::new(sizes.clone())?;
                if p.total() != d || p.num_groups() != m {
                    return Err(Error::invalid(format!(
                        "explicit group sizes {sizes:?} do not describe d={d}, M={m}"
                    )));
                }
                Ok(p)
            }
        }
    }
}

/// Fixed online-boosting coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct BoostSchedule {
    pub eta: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl BoostSchedule {
    pub fn new(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::invalid("schedule needs at least one learner"));
        }
        let eta: Vec<f64> = (1..=m).map(|i| 2.0 / (i as f64 + 1.0)).collect();
        let alpha = (0..m)
            .map(|i| eta[i] * eta[i + 1..].iter().map(|e| 1.0 - e).product::<f64>())
            .collect();
        Ok(Self { eta, alpha })
    }

    pub fn len(&self) -> usize {
        self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta.is_empty()
    }
}

/// Optional trainable feature map in front of the embedding:
/// `φ(x) = max(0, A·x + c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    /// `hidden × input`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Backbone {
    pub fn new(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::invalid("backbone bias does not match hidden size"));
        }
        Ok(Self { weights, bias })
    }

    pub fn random(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            weights: Matrix::glorot(hidden, input, rng),
            bias: vec![0.0; hidden],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.weights.rows()
    }

    /// Pre-activations and rectified outputs.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut pre = self.weights.mul_vec(x)?;
        for (p, b) in pre.iter_mut().zip(&self.bias) {
            *p += b;
        }
        let out = pre.iter().map(|&p| p.max(0.0)).collect();
        Ok((pre, out))
    }
}

/// Everything the forward pass of one sample produces.
#[derive(Debug, Clone)]
pub struct SampleForward {
    /// Backbone pre-activations; `None` without a backbone.
    pub pre: Option<Vec<f64>>,
    /// `φ(x)`, the input to the embedding layer.
    pub hidden: Vec<f64>,
    /// Full raw embedding `φ(x)ᵀ W`.
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    /// `h × d` embedding matrix.
    pub embedding: Matrix,
    pub partition: GroupPartition,
    pub schedule: BoostSchedule,
    pub backbone: Option<Backbone>,
}

impl EnsembleModel {
    pub fn new(
        embedding: Matrix,
        partition: GroupPartition,
        backbone: Option<Backbone>,
    ) -> Result<Self> {
        if embedding.cols() != partition.total() {
            return Err(Error::invalid(format!(
                "embedding has {} columns but the partition covers {}",
                embedding.cols(),
                partition.total()
            )));
        }
        if let Some(b) = &backbone {
            if b.hidden_dim() != embedding.rows() {
                return Err(Error::invalid(format!(
                    "backbone outputs {} values but the embedding expects {}",
                    b.hidden_dim(),
                    embedding.rows()
                )));
            }
        }
        let schedule = BoostSchedule::new(partition.num_groups())?;
        Ok(Self {
            embedding,
            partition,
            schedule,
            backbone,
        })
    }

    /// Glorot-uniform `W` (and backbone, when `backbone_hidden` is given).
    pub fn random(
        input_dim: usize,
        partition: GroupPartition,
        backbone_hidden: Option<usize>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let backbone = backbone_hidden.map(|h| Backbone::random(input_dim, h, rng));
        let h = backbone_hidden.unwrap_or(input_dim);
        let embedding = Matrix::glorot(h, partition.total(), rng);
        Self::new(embedding, partition, backbone)
    }

    pub fn input_dim(&self) -> usize {
        self.backbone
            .as_ref()
            .map_or(self.embedding.rows(), Backbone::input_dim)
    }

    /// `h`, the width of `φ(x)`.
    pub fn hidden_dim(&self) -> usize {
        self.embedding.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.embedding.cols()
    }

    pub fn num_learners(&self) -> usize {
        self.partition.num_groups()
    }

    pub fn forward(&self, x: &[f64]) -> Result<SampleForward> {
        if x.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let (pre, hidden) = match &self.backbone {
            Some(b) => {
                let (pre, out) = b.forward(x)?;
                (Some(pre), out)
            }
            None => (None, x.to_vec()),
        };
        let embedding = self.embedding.tmul_vec(&hidden)?;
        Ok(SampleForward {
            pre,
            hidden,
            embedding,
        })
    }

    /// `φ(x)`; the identity without a backbone.
    pub fn hidden(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.hidden)
    }

    /// Full raw embedding `φ(x)ᵀ W`.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.embedding)
    }

    /// Raw (unnormalized) learner outputs `f_1(x) .. f_M(x)`.
    pub fn learner_forward(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let f = self.embed(x)?;
        Ok((0..self.num_learners())
            .map(|m| self.partition.slice(&f, m).to_vec())
            .collect())
    }

    pub fn test_embedding(&self, x: &[f64], opts: &TestEmbedding) -> Result<Vec<f64>> {
        combine_learners(&self.partition, &self.schedule, &self.embed(x)?, opts)
    }

    /// Writes the model section of a checkpoint.
    pub fn write_to<W: Write>(&self, out: W) -> Result<W> {
        let mut w = LeWriter::new(out);
        w.bytes(MODEL_MAGIC)?;
        w.u32(to_u32(self.hidden_dim(), "h")?)?;
        w.u32(to_u32(self.embed_dim(), "d")?)?;
        w.u32(to_u32(self.num_learners(), "M")?)?;
        for &s in self.partition.sizes() {
            w.u32(to_u32(s, "group size")?)?;
        }
        w.f64_slice(self.embedding.data())?;
        match &self.backbone {
            None => w.u8(0)?,
            Some(b) => {
                w.u8(1)?;
                w.u32(to_u32(b.input_dim(), "backbone input")?)?;
                w.u32(to_u32(b.hidden_dim(), "backbone hidden")?)?;
                w.f64_slice(b.weights.data())?;
                w.f64_slice(&b.bias)?;
            }
        }
        Ok(w.into_inner())
    }

    /// Reads a model section; the reader is left positioned after it.
    pub fn read_from<R: Read>(input: R) -> Result<(Self, R, u64)> {
        let mut r = LeReader::new(input);
        let model = Self::read_section(&mut r)?;
        let offset = r.offset();
        Ok((model, r.into_inner(), offset))
    }

    pub(crate) fn read_section<R: Read>(r: &mut LeReader<R>) -> Result<Self> {
        r.magic(MODEL_MAGIC)?;
        let h = r.u32("h")? as usize;
        let d = r.u32("d")? as usize;
        let at = r.offset();
        let m = r.u32("M")? as usize;
        if m == 0 || m > d {
            return Err(Error::format(at, format!("invalid group count {m} for d={d}")));
        }
        let mut sizes = Vec::with_capacity(m);
        for _ in 0..m {
            sizes.push(r.u32("group size")? as usize);
        }
        let at = r.offset();
        let partition = GroupPartition::new(sizes)
            .ok()
            .filter(|p| p.total() == d)
            .ok_or_else(|| Error::format(at, "group sizes do not sum to d"))?;
        let w = r.f64_vec(h * d, "embedding matrix")?;
        let at = r.offset();
        let backbone = match r.u8("backbone flag")? {
            0 => None,
            1 => {
                let input = r.u32("backbone input")? as usize;
                let hidden = r.u32("backbone hidden")? as usize;
                if hidden != h {
                    return Err(Error::format(
                        r.offset(),
                        format!("backbone hidden size {hidden} != h={h}"),
                    ));
                }
                let weights = r.f64_vec(hidden * input, "backbone weights")?;
                let bias = r.f64_vec(hidden, "backbone bias")?;
                Some(Backbone::new(Matrix::new(hidden, input, weights)?, bias)?)
            }
            other => return Err(Error::format(at, format!("bad backbone flag {other}"))),
        };
        Self::new(Matrix::new(h, d, w)?, partition, backbone)
    }
}

pub(crate) const MODEL_MAGIC: &[u8; 8] = b"BIERMDL1";

/// How learner outputs are combined into one retrieval vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestEmbedding {
    /// Each unit learner vector is scaled by `α_m^weight_exponent`. With
    /// `0.5`, dot products of two combined vectors equal `Σ α_m s_m`; with
    /// `1.0` they equal `Σ α_m² s_m`.
    pub weight_exponent: f64,
    /// L2-normalize the concatenated vector as well.
    pub renormalize_full: bool,
}

impl Default for TestEmbedding {
    fn default() -> Self {
        Self {
            weight_exponent: 1.0,
            renormalize_full: false,
        }
    }
}

/// Concatenation of `α_m^p · f_m / ‖f_m‖` from a full raw embedding.
pub fn combine_learners(
    partition: &GroupPartition,
    schedule: &BoostSchedule,
    raw: &[f64],
    opts: &TestEmbedding,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(raw.len());
    for m in 0..partition.num_groups() {
        let unit = normalize(partition.slice(raw, m))
            .map_err(|_| Error::degenerate(format!("learner {} output is zero", m + 1)))?;
        let scale = schedule.alpha[m].powf(opts.weight_exponent);
        out.extend(unit.iter().map(|v| scale * v));
    }
    if opts.renormalize_full {
        out = normalize(&out)?;
    }
    Ok(out)
}

/// Cosine similarity with its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineGrad {
    pub s: f64,
    pub ds_du: Vec<f64>,
    pub ds_dv: Vec<f64>,
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::degenerate("cosine similarity of a zero vector"));
    }
    Ok(dot(u, v) / (nu * nv))
}

/// `s = uᵀv / (‖u‖‖v‖)`, `∂s/∂u = v/(‖u‖‖v‖) − s·u/‖u‖²` and symmetrically
/// for `v`.
pub fn cosine_sim_grad(u: &[f64], v: &[f64]) -> Result<CosineGrad> {
    if u.len() != v.len() {
        return Err(Error::invalid("cosine of vectors with different lengths"));
    }
    let (nu2, nv2) = (dot(u, u), dot(v, v));
    if nu2 == 0.0 || nv2 == 0.0 {
        return Err(Error::degenerate("cosine similarity of a zero vector"));
    }
    let inv = 1.0 / (nu2.sqrt() * nv2.sqrt());
    let s = dot(u, v) * inv;
    let ds_du = u
        .iter()
        .zip(v)
        .map(|(ui, vi)| vi * inv - s * ui / nu2)
        .collect();
    let ds_dv = u
        .iter()
        .zip(v)
        .map(|(ui, vi)| ui * inv - s * vi / nv2)
        .collect();
    Ok(CosineGrad { s, ds_du, ds_dv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::tensor::Rng;

    #[test]
    fn schedule_examples() {
        let s = BoostSchedule::new(1).unwrap();
        assert_eq!((s.eta.clone(), s.alpha.clone()), (vec![1.0], vec![1.0]));

        let s = BoostSchedule::new(2).unwrap();
        assert!((s.alpha[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.alpha[1] - 2.0 / 3.0).abs() < 1e-15);

        let s = BoostSchedule::new(3).unwrap();
        for (a, want) in s.alpha.iter().zip([1.0 / 6.0, 1.0 / 3.0, 0.5]) {
            assert!((a - want).abs() < 1e-15);
        }
        assert!(BoostSchedule::new(0).is_err());
    }

    #[test]
    fn schedule_matches_closed_form() {
        // The product telescopes to α_m = 2m / (M(M+1)).
        for big_m in 1..=16usize {
            let s = BoostSchedule::new(big_m).unwrap();
            let total: f64 = s.alpha.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            for (i, a) in s.alpha.iter().enumerate() {
                let m = (i + 1) as f64;
                let want = 2.0 * m / (big_m as f64 * (big_m as f64 + 1.0));
                assert!((a - want).abs() < 1e-12);
                assert!(*a > 0.0);
            }
        }
    }

    #[test]
    fn proportional_examples() {
        assert_eq!(GroupPartition::proportional(512, 2).unwrap().sizes(), &[170, 342]);
        assert_eq!(GroupPartition::proportional(512, 1).unwrap().sizes(), &[512]);
        assert_eq!(GroupPartition::proportional(512, 3).unwrap().sizes(), &[85, 170, 257]);
        assert_eq!(GroupPartition::proportional(10, 3).unwrap().sizes(), &[1, 3, 6]);
        assert!(GroupPartition::proportional(2, 3).is_err());
        assert!(GroupPartition::proportional(5, 0).is_err());
    }

    #[test]
    fn proportional_tiny_embeddings_keep_every_group_nonempty() {
        for m in 1..=12 {
            for d in m..=3 * m {
                let p = GroupPartition::proportional(d, m).unwrap();
                assert_eq!(p.total(), d);
                assert!(p.sizes().iter().all(|&s| s >= 1), "d={d} m={m}: {:?}", p.sizes());
            }
        }
    }

    #[test]
    fn preset_examples() {
        let get = |d, m| GroupPartition::preset(d, m).map(|p| p.sizes().to_vec());
        assert_eq!(get(512, 3), Some(vec![96, 160, 256]));
        assert_eq!(get(1024, 6), Some(vec![50, 96, 148, 196, 242, 292]));
        assert_eq!(get(512, 5), Some(vec![34, 68, 102, 138, 170]));
        assert_eq!(get(512, 7), None);
        for (d, sizes) in PRESET_PARTITIONS {
            let total = sizes.iter().sum::<usize>();
            if sizes == &[52, 102, 152, 204] {
                assert_eq!(total, 510);
            } else {
                assert_eq!(total, *d);
            }
        }
    }

    #[test]
    fn partition_sources() {
        assert!(PartitionSource::Preset.resolve(100, 3).is_err());
        let p = PartitionSource::Explicit(vec![1, 2, 3]).resolve(6, 3).unwrap();
        assert_eq!(p.range(2), 3..6);
        assert_eq!(p.offsets(), &[0, 1, 3]);
        assert!(PartitionSource::Explicit(vec![1, 2, 3]).resolve(7, 3).is_err());
        assert!(GroupPartition::new(vec![2, 0]).is_err());
        assert_eq!((0..6).map(|k| p.group_of(k)).collect::<Vec<_>>(), vec![0, 1, 1, 2, 2, 2]);
    }

    #[test]
    fn learner_forward_examples() {
        let p = GroupPartition::new(vec![1, 1]).unwrap();
        let zero = EnsembleModel::new(Matrix::zeros(2, 2), p.clone(), None).unwrap();
        assert_eq!(zero.learner_forward(&[3.0, 4.0]).unwrap(), vec![vec![0.0], vec![0.0]]);

        let id = EnsembleModel::new(Matrix::identity(2), p, None).unwrap();
        assert_eq!(id.learner_forward(&[3.0, 4.0]).unwrap(), vec![vec![3.0], vec![4.0]]);
        assert!(id.learner_forward(&[1.0]).is_err());
    }

    #[test]
    fn learner_slices_concatenate_to_full_product() {
        let mut rng = Rng::new(1);
        let p = GroupPartition::new(vec![1, 2, 3]).unwrap();
        let model = EnsembleModel::random(8, p, None, &mut rng).unwrap();
        let x: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let joined = model.learner_forward(&x).unwrap().concat();
        // independent oracle: column-by-column dot products
        for (j, got) in joined.iter().enumerate() {
            let want: f64 = (0..8).map(|i| x[i] * model.embedding.get(i, j)).sum();
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_examples() {
        let g = cosine_sim_grad(&[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(g.s, 1.0);
        assert_eq!(g.ds_du, vec![0.0, 0.0]);
        let g = cosine_sim_grad(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(g.s, 0.0);
        assert_eq!(g.ds_du, vec![0.0, 1.0]);
        assert!(matches!(
            cosine_sim_grad(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn cosine_gradient_matches_finite_differences() {
        let mut rng = Rng::new(2);
        for _ in 0..50 {
            let u: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
            let v: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
            let g = cosine_sim_grad(&u, &v).unwrap();
            let h = 1e-6;
            for (which, grad) in [(0, &g.ds_du), (1, &g.ds_dv)] {
                for k in 0..16 {
                    let eval = |delta: f64| {
                        let (mut a, mut b) = (u.clone(), v.clone());
                        if which == 0 {
                            a[k] += delta;
                        } else {
                            b[k] += delta;
                        }
                        cosine(&a, &b).unwrap()
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let err = (fd - grad[k]).abs() / grad[k].abs().max(1e-3);
                    assert!(err < 1e-6, "component {k}: {} vs {fd}", grad[k]);
                }
            }
        }
    }

    #[test]
    fn test_embedding_single_learner_is_unit() {
        let mut rng = Rng::new(4);
        let model = EnsembleModel::random(5, GroupPartition::single(4).unwrap(), None, &mut rng)
            .unwrap();
        let x: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let e = model.test_embedding(&x, &TestEmbedding::default()).unwrap();
        let f = normalize(&model.embed(&x).unwrap()).unwrap();
        assert_eq!(e, f);
    }

    #[test]
    fn test_embedding_sqrt_weights_reproduce_ensemble_score() {
        let mut rng = Rng::new(5);
        let model =
            EnsembleModel::random(6, GroupPartition::new(vec![2, 3]).unwrap(), None, &mut rng)
                .unwrap();
        let opts = TestEmbedding {
            weight_exponent: 0.5,
            renormalize_full: false,
        };
        for _ in 0..20 {
            let x: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let y: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let lhs = dot(
                &model.test_embedding(&x, &opts).unwrap(),
                &model.test_embedding(&y, &opts).unwrap(),
            );
            let (fx, fy) = (model.learner_forward(&x).unwrap(), model.learner_forward(&y).unwrap());
            let rhs: f64 = (0..2)
                .map(|m| model.schedule.alpha[m] * cosine(&fx[m], &fy[m]).unwrap())
                .sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn test_embedding_group_norms_are_alphas() {
        let mut rng = Rng::new(6);
        let p = GroupPartition::new(vec![2, 3, 4]).unwrap();
        let model = EnsembleModel::random(7, p.clone(), None, &mut rng).unwrap();
        let x: Vec<f64> = (0..7).map(|_| rng.normal()).collect();
        let e = model.test_embedding(&x, &TestEmbedding::default()).unwrap();
        for (m, want) in [1.0 / 6.0, 1.0 / 3.0, 0.5].iter().enumerate() {
            assert!((norm(p.slice(&e, m)) - want).abs() < 1e-12);
        }
        let full = model
            .test_embedding(
                &x,
                &TestEmbedding {
                    renormalize_full: true,
                    ..Default::default()
                },
            )
            .unwrap();
        assert!((norm(&full) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn test_embedding_rejects_zero_group() {
        let p = GroupPartition::new(vec![1, 1]).unwrap();
        let mut w = Matrix::identity(2);
        w.set(1, 1, 0.0);
        let model = EnsembleModel::new(w, p, None).unwrap();
        assert!(matches!(
            model.test_embedding(&[1.0, 1.0], &TestEmbedding::default()),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn model_section_round_trip() {
        let mut rng = Rng::new(8);
        for backbone in [None, Some(5)] {
            let model =
                EnsembleModel::random(4, GroupPartition::new(vec![1, 2]).unwrap(), backbone, &mut rng)
                    .unwrap();
            let bytes = model.write_to(Vec::new()).unwrap();
            let (back, _, used) = EnsembleModel::read_from(bytes.as_slice()).unwrap();
            assert_eq!(back, model);
            assert_eq!(used as usize, bytes.len());
        }
    }

    #[test]
    fn model_section_layout() {
        let model = EnsembleModel::new(
            Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
            GroupPartition::new(vec![1, 1]).unwrap(),
            None,
        )
        .unwrap();
        let bytes = model.write_to(Vec::new()).unwrap();
        let mut want = b"BIERMDL1".to_vec();
        for v in [2u32, 2, 2, 1, 1] {
            want.extend_from_slice(&v.to_le_bytes());
        }
        for v in [1.0f64, 2.0, 3.0, 4.0] {
            want.extend_from_slice(&v.to_le_bytes());
        }
        want.push(0);
        assert_eq!(bytes, want);

        let err = EnsembleModel::read_from(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    proptest! {
        #[test]
        fn cosine_is_scale_invariant(
            u in proptest::collection::vec(-10.0f64..10.0, 8),
            v in proptest::collection::vec(-10.0f64..10.0, 8),
            c in 1e-3f64..1e3,
        ) {
            prop_assume!(norm(&u) > 1e-3 && norm(&v) > 1e-3);
            let scaled: Vec<f64> = u.iter().map(|x| c * x).collect();
            let a = cosine(&u, &v).unwrap();
            let b = cosine(&scaled, &v).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&a));
        }

        #[test]
        fn proportional_sizes_sum_and_grow(m in 1usize..12, extra in 0usize..2000) {
            let d = 3 * m + extra;
            let p = GroupPartition::proportional(d, m).unwrap();
            prop_assert_eq!(p.total(), d);
            for w in p.sizes().windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
        }
    }
}
