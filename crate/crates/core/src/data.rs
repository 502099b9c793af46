//! Labelled feature datasets: binary and CSV formats, a synthetic generator,
//! and train/test splits.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::codec::{to_u32, LeReader, LeWriter};
use crate::error::{Error, Result};
use crate::tensor::{normalize, Matrix, Rng};

pub const FEATURE_MAGIC: &[u8; 8] = b"BIERFT01";

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    /// `N × h`, one sample per row.
    pub features: Matrix,
    pub labels: Vec<u32>,
    pub n_classes: usize,
}

impl FeatureSet {
    pub fn new(features: Matrix, labels: Vec<u32>, n_classes: usize) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::invalid(format!(
                "{} labels for {} samples",
                labels.len(),
                features.rows()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= n_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        if !features.is_finite() {
            return Err(Error::invalid("features must be finite"));
        }
        Ok(Self {
            features,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    /// Sample indices grouped by class id.
    pub fn class_index(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.n_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l as usize].push(i);
        }
        by_class
    }

    /// Rows `idx` as a new set with the same class ids.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| self.sample(i).to_vec()).collect();
        let features = if rows.is_empty() {
            Matrix::zeros(0, self.dim())
        } else {
            Matrix::from_rows(&rows).expect("rows share a width")
        };
        Self {
            features,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    pub fn write_binary<W: Write>(&self, out: W) -> Result<W> {
        let mut w = LeWriter::new(out);
        w.bytes(FEATURE_MAGIC)?;
        w.u64(self.len() as u64)?;
        w.u32(to_u32(self.dim(), "feature dimension")?)?;
        w.u32(to_u32(self.n_classes, "class count")?)?;
        let mut buf = Vec::with_capacity(4 * self.len());
        for l in &self.labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
        w.bytes(&buf)?;
        let mut buf = Vec::with_capacity(4 * self.features.data().len());
        for v in self.features.data() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.bytes(&buf)?;
        Ok(w.into_inner())
    }

    pub fn read_binary<R: Read>(input: R) -> Result<Self> {
        let mut r = LeReader::new(input);
        r.magic(FEATURE_MAGIC)?;
        let n = r.u64("sample count")?;
        let h = r.u32("feature dimension")? as usize;
        let n_classes = r.u32("class count")? as usize;
        let n = usize::try_from(n).map_err(|_| Error::format(8, "sample count too large"))?;
        let mut labels = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let at = r.offset();
            let l = r.u32("labels")?;
            if l as usize >= n_classes {
                return Err(Error::format(
                    at,
                    format!("label {l} not below class count {n_classes}"),
                ));
            }
            labels.push(l);
        }
        let start = r.offset();
        let mut raw = vec![0u8; n * h * 4];
        r.fill(&mut raw, "features")?;
        let mut data = Vec::with_capacity(n * h);
        for (i, c) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(c.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::format(start + 4 * i as u64, "non-finite feature value"));
            }
            data.push(f64::from(v));
        }
        r.expect_eof()?;
        Ok(Self {
            features: Matrix::new(n, h, data)?,
            labels,
            n_classes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        self.write_binary(BufWriter::new(f))?
            .flush()
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Self::read_binary(BufReader::new(f))
    }

    /// `label,v1,...,vh` lines. Class ids are remapped densely in order of
    /// first appearance.
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut ids: HashMap<String, u32> = HashMap::new();
        let mut labels = Vec::new();
        let mut data = Vec::new();
        let mut width = None;
        for (i, line) in input.lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::io(format!("reading line {lineno}"), e))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(',').map(str::trim);
            let raw_label = fields.next().unwrap_or_default();
            if raw_label.is_empty() {
                return Err(Error::Parse {
                    line: lineno,
                    message: "missing label".into(),
                });
            }
            let next = ids.len() as u32;
            let label = *ids.entry(raw_label.to_string()).or_insert(next);
            let mut count = 0;
            for f in fields {
                let v: f64 = f.parse().map_err(|_| Error::Parse {
                    line: lineno,
                    message: format!("`{f}` is not a number"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line: lineno,
                        message: format!("`{f}` is not finite"),
                    });
                }
                data.push(v);
                count += 1;
            }
            match width {
                None if count == 0 => {
                    return Err(Error::Parse {
                        line: lineno,
                        message: "no feature values".into(),
                    })
                }
                None => width = Some(count),
                Some(w) if w != count => {
                    return Err(Error::Parse {
                        line: lineno,
                        message: format!("expected {w} values, found {count}"),
                    })
                }
                Some(_) => {}
            }
            labels.push(label);
        }
        let h = width.unwrap_or(0);
        Self::new(Matrix::new(labels.len(), h, data)?, labels, ids.len())
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<W> {
        for (i, l) in self.labels.iter().enumerate() {
            let mut line = l.to_string();
            for v in self.sample(i) {
                line.push(',');
                line.push_str(&v.to_string());
            }
            line.push('\n');
            out.write_all(line.as_bytes())
                .map_err(|e| Error::io("writing csv", e))?;
        }
        Ok(out)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Self::read_csv(BufReader::new(f))
    }
}

/// Gaussian class clusters around random centers.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub feature_dim: usize,
    /// Radius of the sphere the class centers lie on.
    pub cluster_spread: f64,
    pub noise: f64,
    pub seed: u64,
    /// Restrict class centers to a random subspace of this dimension, so that
    /// structure learned on some classes carries over to unseen ones.
    pub latent_dim: Option<usize>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 20,
            feature_dim: 64,
            cluster_spread: 3.0,
            noise: 1.0,
            seed: 0,
            latent_dim: None,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.per_class < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 samples per class, got {}",
                self.per_class
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        if !(self.cluster_spread >= 0.0 && self.noise >= 0.0)
            || !self.cluster_spread.is_finite()
            || !self.noise.is_finite()
        {
            return Err(Error::invalid("spread and noise must be finite and non-negative"));
        }
        if let Some(k) = self.latent_dim {
            if k == 0 || k > self.feature_dim {
                return Err(Error::invalid(format!(
                    "latent dimension {k} must lie in 1..={}",
                    self.feature_dim
                )));
            }
        }
        Ok(())
    }
}

pub fn synth_gaussian(spec: &SynthSpec) -> Result<FeatureSet> {
    spec.validate()?;
    let h = spec.feature_dim;
    let mut rng = Rng::new(spec.seed);
    // `h × k`; its columns span the latent subspace.
    let basis = match spec.latent_dim {
        Some(k) => {
            let data = (0..h * k).map(|_| rng.normal()).collect();
            Some(Matrix::new(h, k, data)?)
        }
        None => None,
    };
    let mut centers = Vec::with_capacity(spec.classes);
    while centers.len() < spec.classes {
        let raw: Vec<f64> = match &basis {
            Some(b) => {
                let z: Vec<f64> = (0..b.cols()).map(|_| rng.normal()).collect();
                b.mul_vec(&z)?
            }
            None => (0..h).map(|_| rng.normal()).collect(),
        };
        if let Ok(unit) = normalize(&raw) {
            centers.push(unit.into_iter().map(|v| v * spec.cluster_spread).collect::<Vec<_>>());
        }
    }
    let n = spec.classes * spec.per_class;
    let mut data = Vec::with_capacity(n * h);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..spec.per_class {
            data.extend(center.iter().map(|m| m + spec.noise * rng.normal()));
            labels.push(c as u32);
        }
    }
    FeatureSet::new(Matrix::new(n, h, data)?, labels, spec.classes)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitMode {
    /// Whole classes go to one side; `train_fraction` of the classes train.
    DisjointClasses { train_fraction: f64 },
    /// Within every class, `train_fraction` of the samples train.
    WithinClasses { train_fraction: f64 },
}

pub fn split(set: &FeatureSet, mode: SplitMode, seed: u64) -> Result<(FeatureSet, FeatureSet)> {
    let mut rng = Rng::new(seed);
    let by_class = set.class_index();
    let present: Vec<usize> = (0..set.n_classes).filter(|&c| !by_class[c].is_empty()).collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    match mode {
        SplitMode::DisjointClasses { train_fraction } => {
            check_fraction(train_fraction)?;
            if present.len() < 2 {
                return Err(Error::invalid("disjoint split needs at least 2 classes"));
            }
            let n_train = (train_fraction * present.len() as f64).round() as usize;
            if n_train == 0 || n_train >= present.len() {
                return Err(Error::invalid(format!(
                    "fraction {train_fraction} of {} classes leaves one side empty",
                    present.len()
                )));
            }
            let mut classes = present;
            rng.shuffle(&mut classes);
            let mut train_classes = classes[..n_train].to_vec();
            train_classes.sort_unstable();
            for (i, &l) in set.labels.iter().enumerate() {
                if train_classes.binary_search(&(l as usize)).is_ok() {
                    train.push(i);
                } else {
                    test.push(i);
                }
            }
        }
        SplitMode::WithinClasses { train_fraction } => {
            check_fraction(train_fraction)?;
            for &c in &present {
                let mut idx = by_class[c].clone();
                rng.shuffle(&mut idx);
                let k = (train_fraction * idx.len() as f64).floor() as usize;
                train.extend_from_slice(&idx[..k]);
                test.extend_from_slice(&idx[k..]);
            }
            if train.is_empty() || test.is_empty() {
                return Err(Error::invalid(format!(
                    "fraction {train_fraction} leaves one side of the split empty"
                )));
            }
            train.sort_unstable();
            test.sort_unstable();
        }
    }
    Ok((set.subset(&train), set.subset(&test)))
}

fn check_fraction(f: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::invalid(format!("train fraction {f} outside [0, 1]")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> FeatureSet {
        synth_gaussian(&SynthSpec {
            classes: 4,
            per_class: 5,
            feature_dim: 3,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn binary_round_trip_at_f32_precision() {
        let set = small();
        let bytes = set.write_binary(Vec::new()).unwrap();
        let back = FeatureSet::read_binary(bytes.as_slice()).unwrap();
        assert_eq!(back.labels, set.labels);
        assert_eq!(back.n_classes, 4);
        for (a, b) in back.features.data().iter().zip(set.features.data()) {
            assert_eq!(*a, f64::from(*b as f32));
        }
        let again = back.write_binary(Vec::new()).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn empty_file_reports_missing_magic() {
        let err = FeatureSet::read_binary(&[][..]).unwrap_err();
        assert!(err.to_string().contains("missing magic"), "{err}");
        let err = FeatureSet::read_binary(&b"BIERFT02xxxx"[..]).unwrap_err();
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn golden_two_sample_layout() {
        let mut bytes = b"BIERFT01".to_vec();
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        for v in [1.5f32, -2.0, 0.25, 8.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let set = FeatureSet::read_binary(bytes.as_slice()).unwrap();
        assert_eq!(set.labels, vec![1, 0]);
        assert_eq!(set.sample(0), &[1.5, -2.0]);
        assert_eq!(set.sample(1), &[0.25, 8.0]);
        assert_eq!(set.write_binary(Vec::new()).unwrap(), bytes);

        let mut bad = bytes.clone();
        bad[24..28].copy_from_slice(&7u32.to_le_bytes());
        match FeatureSet::read_binary(bad.as_slice()).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, 24),
            e => panic!("{e}"),
        }
        match FeatureSet::read_binary(&bytes[..35]).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, 35),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn csv_examples() {
        let set = FeatureSet::read_csv("0,1.0,2.0\n1,3.0,4.0".as_bytes()).unwrap();
        assert_eq!((set.len(), set.dim()), (2, 2));
        assert_eq!(set.sample(1), &[3.0, 4.0]);

        match FeatureSet::read_csv("0,1.0,2.0\n1,3.0\n".as_bytes()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("{e}"),
        }
        match FeatureSet::read_csv("0,1.0\n1,abc\n".as_bytes()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("{e}"),
        }

        let set = FeatureSet::read_csv("cat,1\n7,2\ncat,3\n".as_bytes()).unwrap();
        assert_eq!(set.labels, vec![0, 1, 0]);
        assert_eq!(set.n_classes, 2);
    }

    #[test]
    fn csv_and_binary_agree() {
        let set = synth_gaussian(&SynthSpec {
            classes: 5,
            per_class: 20,
            feature_dim: 4,
            ..Default::default()
        })
        .unwrap();
        let quantized = FeatureSet::read_binary(set.write_binary(Vec::new()).unwrap().as_slice()).unwrap();
        let csv = quantized.write_csv(Vec::new()).unwrap();
        assert_eq!(csv.iter().filter(|&&b| b == b'\n').count(), 100);
        let from_csv = FeatureSet::read_csv(csv.as_slice()).unwrap();
        assert_eq!(from_csv, quantized);
        assert_eq!(from_csv.write_csv(Vec::new()).unwrap(), csv);
    }

    #[test]
    fn synth_properties() {
        let spec = SynthSpec {
            noise: 0.0,
            classes: 3,
            per_class: 4,
            feature_dim: 5,
            ..Default::default()
        };
        let set = synth_gaussian(&spec).unwrap();
        for c in set.class_index() {
            for &i in &c[1..] {
                assert_eq!(set.sample(i), set.sample(c[0]));
            }
        }
        let a = synth_gaussian(&SynthSpec::default()).unwrap();
        let b = synth_gaussian(&SynthSpec::default()).unwrap();
        assert_eq!(a.write_binary(Vec::new()).unwrap(), b.write_binary(Vec::new()).unwrap());
        assert!(synth_gaussian(&SynthSpec {
            classes: 1,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn latent_centers_span_the_subspace() {
        let set = synth_gaussian(&SynthSpec {
            classes: 8,
            per_class: 2,
            feature_dim: 6,
            noise: 0.0,
            latent_dim: Some(2),
            ..Default::default()
        })
        .unwrap();
        // Three distinct centers in a 2-dim subspace are linearly dependent.
        let c: Vec<&[f64]> = (0..3).map(|k| set.sample(2 * k)).collect();
        let m = Matrix::from_rows(&c.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        let gram: Vec<f64> = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .map(|(i, j)| crate::tensor::dot(m.row(i), m.row(j)))
            .collect();
        let det = gram[0] * (gram[4] * gram[8] - gram[5] * gram[7])
            - gram[1] * (gram[3] * gram[8] - gram[5] * gram[6])
            + gram[2] * (gram[3] * gram[7] - gram[4] * gram[6]);
        assert!(det.abs() < 1e-9, "{det}");
    }

    #[test]
    fn split_modes() {
        let set = small();
        let (tr, te) = split(&set, SplitMode::DisjointClasses { train_fraction: 0.5 }, 3).unwrap();
        let tc: std::collections::BTreeSet<_> = tr.labels.iter().collect();
        assert!(te.labels.iter().all(|l| !tc.contains(l)));
        assert_eq!(tc.len(), 2);
        assert_eq!(tr.len() + te.len(), set.len());

        assert!(split(&set, SplitMode::WithinClasses { train_fraction: 1.0 }, 0).is_err());
        let a = split(&set, SplitMode::WithinClasses { train_fraction: 0.6 }, 9).unwrap();
        let b = split(&set, SplitMode::WithinClasses { train_fraction: 0.6 }, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.len(), 12);
    }

    #[test]
    fn disjoint_split_never_leaks_classes() {
        let set = synth_gaussian(&SynthSpec {
            classes: 9,
            per_class: 2,
            feature_dim: 2,
            ..Default::default()
        })
        .unwrap();
        for seed in 0..100 {
            let (tr, te) =
                split(&set, SplitMode::DisjointClasses { train_fraction: 0.5 }, seed).unwrap();
            assert!(tr.labels.iter().all(|l| !te.labels.contains(l)));
        }
    }
}
