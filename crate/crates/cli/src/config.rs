//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use boostemb_core::trainer::InitConfig;
use boostemb_core::{
    EvalOptions, LossKind, LossSpec, OptimConfig, OptimKind,
    PartitionSource, SimNormalizer, SynthSpec, TestEmbedding, TrainConfig,
};

/// Every accepted key with its help line, grouped by what it configures.
pub const KEYS: &[(&str, &str)] = &[
    ("classes", "gen: number of classes [10]"),
    ("per_class", "gen: samples per class [20]"),
    ("feature_dim", "gen: feature dimension h [64]"),
    ("cluster_spread", "gen: radius of the class-center sphere [3.0]"),
    ("noise", "gen: per-coordinate noise std [1.0]"),
    ("latent_dim", "gen: subspace holding the class centers, `none` for all of h [none]"),
    ("loss", "binomial_deviance | contrastive | triplet [binomial_deviance]"),
    ("beta1", "binomial deviance scale [2]"),
    ("beta2", "binomial deviance translation [0.5]"),
    ("cost_pos", "binomial deviance positive-pair cost [1]"),
    ("cost_neg", "binomial deviance negative-pair cost [25]"),
    ("margin_contrastive", "contrastive margin [0.5]"),
    ("margin_triplet", "triplet margin [0.01]"),
    ("objective", "boosted | global | independent | unpartitioned [boosted]"),
    ("embed_dim", "embedding width d [32]"),
    ("learners", "number of groups M [3]"),
    ("partition", "proportional | preset | comma-separated sizes [proportional]"),
    ("diversity", "activation | adversarial [adversarial]"),
    ("lambda_div", "diversity weight, 0 disables [1e-3 adversarial, 1e-2 activation]"),
    ("lambda_w", "weight-penalty strength in the diversity losses [1]"),
    ("optimizer", "adam | sgd [adam]"),
    ("lr", "learning rate [1e-3]"),
    ("momentum", "sgd momentum [0.9]"),
    ("iterations", "training steps [1000]"),
    ("batch_classes", "classes per batch P [4]"),
    ("samples_per_class", "samples per class K [5]"),
    ("max_pairs_per_batch", "cap on mined pairs, negatives subsampled, `none` for all [none]"),
    ("seed", "run seed [0]"),
    ("boost_weight_signed", "use the signed loss derivative as boosting weight [false]"),
    ("backbone_hidden", "width of a trainable relu feature map, `none` to skip it [none]"),
    ("backbone_trainable", "let the metric loss update the feature map [true]"),
    ("regressor_hidden", "adversarial regressor hidden width [512]"),
    ("sim_normalizer", "d_j | d_i [d_j]"),
    ("reverse_target_path", "reverse the similarity gradient on the target group too [true]"),
    ("weight_exponent", "exponent on the boosting weights at test time [1]"),
    ("renormalize_full", "normalize the concatenated test embedding [false]"),
    ("eval_every", "metrics row interval, 0 for the final row only [0]"),
    ("eval_pairs", "pairs sampled for classifier correlation [2000]"),
    ("threads", "worker threads for batch gradients [1]"),
    ("ks", "recall cut-offs [1,2,4,8]"),
    ("init_lambda_w", "init: weight-penalty strength [10]"),
    ("init_lr", "init: sgd learning rate [1e-3]"),
    ("init_momentum", "init: sgd momentum [0.9]"),
    ("init_max_iterations", "init: iteration cap [5000]"),
    ("init_tolerance", "init: relative loss change that stops the solver [1e-6]"),
    ("init_window", "init: iterations the change is measured over [100]"),
];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Settings {
    entries: Vec<(String, String)>,
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut s = Settings::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("config line {}: expected `key = value`", no + 1))?;
            s.set(k.trim(), v.trim()).map_err(|e| format!("config line {}: {e}", no + 1))?;
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                format!("file not found: {}", path.display())
            } else {
                format!("reading {}: {e}", path.display())
            }
        })?;
        Self::parse(&text)
    }

    /// Later values replace earlier ones.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        if !KEYS.iter().any(|(k, _)| *k == key) {
            return Err(format!("unknown key `{key}`"));
        }
        self.entries.retain(|(k, _)| k != key);
        self.entries.push((key.to_string(), value.to_string()));
        Ok(())
    }

    pub fn set_assignment(&mut self, kv: &str) -> Result<(), String> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| format!("`{kv}` is not `key=value`"))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>, String>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|e| format!("bad value `{v}` for `{key}`: {e}")))
            .transpose()
    }

    fn apply<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<(), String>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.parsed(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn apply_optional<T: FromStr>(&self, key: &str, slot: &mut Option<T>) -> Result<(), String>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(()),
            Some("none") => {
                *slot = None;
                Ok(())
            }
            Some(_) => {
                *slot = self.parsed(key)?;
                Ok(())
            }
        }
    }

    pub fn synth_spec(&self) -> Result<SynthSpec, String> {
        let mut s = SynthSpec::default();
        self.apply("classes", &mut s.classes)?;
        self.apply("per_class", &mut s.per_class)?;
        self.apply("feature_dim", &mut s.feature_dim)?;
        self.apply("cluster_spread", &mut s.cluster_spread)?;
        self.apply("noise", &mut s.noise)?;
        self.apply_optional("latent_dim", &mut s.latent_dim)?;
        self.apply("seed", &mut s.seed)?;
        Ok(s)
    }

    pub fn loss_spec(&self) -> Result<LossSpec, String> {
        let kind: LossKind = self.parsed("loss")?.unwrap_or(LossKind::BinomialDeviance);
        let mut l = LossSpec::new(kind);
        self.apply("beta1", &mut l.beta1)?;
        self.apply("beta2", &mut l.beta2)?;
        self.apply("cost_pos", &mut l.cost_pos)?;
        self.apply("cost_neg", &mut l.cost_neg)?;
        self.apply("margin_contrastive", &mut l.margin_contrastive)?;
        self.apply("margin_triplet", &mut l.margin_triplet)?;
        Ok(l)
    }

    pub fn train_config(&self) -> Result<TrainConfig, String> {
        let mut c = TrainConfig {
            loss: self.loss_spec()?,
            ..TrainConfig::default()
        };
        self.apply("objective", &mut c.objective)?;
        self.apply("embed_dim", &mut c.embed_dim)?;
        self.apply("learners", &mut c.learners)?;
        if let Some(p) = self.get("partition") {
            c.partition = parse_partition(p)?;
        }
        self.apply("diversity", &mut c.diversity)?;
        c.lambda_div = self
            .parsed("lambda_div")?
            .unwrap_or_else(|| c.diversity.default_lambda_div());
        self.apply("lambda_w", &mut c.lambda_w)?;
        let kind: OptimKind = self.parsed("optimizer")?.unwrap_or(OptimKind::Adam);
        let lr = self.parsed("lr")?.unwrap_or(c.optimizer.lr);
        c.optimizer = match kind {
            OptimKind::Adam => OptimConfig::adam(lr),
            OptimKind::SgdMomentum => OptimConfig::sgd_momentum(lr, 0.9),
        };
        self.apply("momentum", &mut c.optimizer.momentum)?;
        self.apply("iterations", &mut c.iterations)?;
        self.apply("batch_classes", &mut c.batch_classes)?;
        self.apply("samples_per_class", &mut c.samples_per_class)?;
        self.apply_optional("max_pairs_per_batch", &mut c.max_pairs_per_batch)?;
        self.apply("seed", &mut c.seed)?;
        self.apply("boost_weight_signed", &mut c.boost_weight_signed)?;
        self.apply_optional("backbone_hidden", &mut c.backbone_hidden)?;
        self.apply("backbone_trainable", &mut c.backbone_trainable)?;
        self.apply("regressor_hidden", &mut c.regressor_hidden)?;
        self.apply("sim_normalizer", &mut c.sim_normalizer)?;
        self.apply("reverse_target_path", &mut c.reverse_target_path)?;
        c.test_embedding = self.test_embedding()?;
        self.apply("eval_every", &mut c.eval_every)?;
        self.apply("eval_pairs", &mut c.eval_pairs)?;
        self.apply("threads", &mut c.threads)?;
        c.validate().map_err(|e| e.to_string())?;
        Ok(c)
    }

    pub fn test_embedding(&self) -> Result<TestEmbedding, String> {
        let mut t = TestEmbedding::default();
        self.apply("weight_exponent", &mut t.weight_exponent)?;
        self.apply("renormalize_full", &mut t.renormalize_full)?;
        Ok(t)
    }

    pub fn eval_options(&self) -> Result<EvalOptions, String> {
        let mut o = EvalOptions {
            test_embedding: self.test_embedding()?,
            ..EvalOptions::default()
        };
        if let Some(ks) = self.get("ks") {
            o.ks = parse_list(ks)?;
        }
        self.apply("eval_pairs", &mut o.eval_pairs)?;
        self.apply("seed", &mut o.seed)?;
        Ok(o)
    }

    pub fn init_config(&self) -> Result<InitConfig, String> {
        let mut c = InitConfig::default();
        self.apply("diversity", &mut c.kind)?;
        self.apply("init_lambda_w", &mut c.lambda_w)?;
        self.apply("init_lr", &mut c.lr)?;
        self.apply("init_momentum", &mut c.momentum)?;
        self.apply("init_max_iterations", &mut c.max_iterations)?;
        self.apply("init_tolerance", &mut c.tolerance)?;
        self.apply("init_window", &mut c.window)?;
        let normalizer: Option<SimNormalizer> = self.parsed("sim_normalizer")?;
        if let Some(n) = normalizer {
            c.adversarial.normalizer = n;
        }
        self.apply("reverse_target_path", &mut c.adversarial.reverse_target_path)?;
        Ok(c)
    }
}

fn parse_partition(v: &str) -> Result<PartitionSource, String> {
    match v {
        "proportional" => Ok(PartitionSource::Proportional),
        "preset" => Ok(PartitionSource::Preset),
        sizes => Ok(PartitionSource::Explicit(parse_list(sizes)?)),
    }
}

pub fn parse_list(v: &str) -> Result<Vec<usize>, String> {
    v.split([',', '-', ' '])
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|e| format!("bad list entry `{s}`: {e}")))
        .collect()
}

pub fn keys_help() -> String {
    let mut out = String::from("Config keys (`key = value`, `#` comments):\n");
    for (k, help) in KEYS {
        let _ = writeln!(out, "  {k:<22}{help}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let s = Settings::parse("# run\nlearners = 4 # groups\n\nloss=triplet\nlearners = 2\n").unwrap();
        let c = s.train_config().unwrap();
        assert_eq!(c.learners, 2);
        assert_eq!(c.loss.kind, LossKind::Triplet);
    }

    #[test]
    fn rejects_unknown_keys_with_line() {
        let err = Settings::parse("lr = 0.1\nlearing_rate = 2\n").unwrap_err();
        assert!(err.contains("line 2") && err.contains("learing_rate"), "{err}");
        assert!(Settings::parse("just words").is_err());
    }

    #[test]
    fn lambda_div_follows_diversity_kind() {
        let s = Settings::parse("diversity = activation").unwrap();
        assert_eq!(s.train_config().unwrap().lambda_div, 1e-2);
        let s = Settings::parse("diversity = activation\nlambda_div = 0").unwrap();
        assert_eq!(s.train_config().unwrap().lambda_div, 0.0);
    }

    #[test]
    fn partitions_and_optionals() {
        let s = Settings::parse("partition = 96-160-256\nembed_dim=512\nbackbone_hidden = none").unwrap();
        let c = s.train_config().unwrap();
        assert_eq!(c.partition, PartitionSource::Explicit(vec![96, 160, 256]));
        assert_eq!(c.backbone_hidden, None);
        let s = Settings::parse("latent_dim = 8").unwrap();
        assert_eq!(s.synth_spec().unwrap().latent_dim, Some(8));
    }

    #[test]
    fn bad_values_are_reported() {
        let s = Settings::parse("learners = three").unwrap();
        assert!(s.train_config().unwrap_err().contains("learners"));
        let s = Settings::parse("batch_classes = 1").unwrap();
        assert!(s.train_config().is_err());
    }

    #[test]
    fn every_key_is_consumed_somewhere() {
        for (k, _) in KEYS {
            let mut s = Settings::default();
            s.set(k, "nonsense-value").unwrap();
            let any_err = s.synth_spec().is_err()
                || s.train_config().is_err()
                || s.eval_options().is_err()
                || s.init_config().is_err();
            assert!(any_err, "key `{k}` is never read");
        }
    }
}
