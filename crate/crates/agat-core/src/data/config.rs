//! Run configuration: `key = value` lines with `#` comments, profile
//! defaults, override handling, and the resolved-config snapshot every run
//! writes back to disk.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{AgatError, Result};
use crate::models::ArchId;
use crate::surrogates::SurrogateId;

use super::shapes::SplitRule;
use super::synth;
use super::LabeledDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Mnist,
    Corruption,
    Shapes,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(Profile::Mnist),
            "corruption" => Ok(Profile::Corruption),
            "shapes" => Ok(Profile::Shapes),
            other => Err(AgatError::Config(format!("unknown profile '{}'", other))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Profile::Mnist => "mnist",
            Profile::Corruption => "corruption",
            Profile::Shapes => "shapes",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Agat,
    Plain,
    PgdAugment,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "agat" => Ok(Mode::Agat),
            "plain" => Ok(Mode::Plain),
            "pgd-augment" => Ok(Mode::PgdAugment),
            other => Err(AgatError::Config(format!("unknown mode '{}'", other))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Agat => "agat",
            Mode::Plain => "plain",
            Mode::PgdAugment => "pgd-augment",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Idx,
    Cifar,
    Shapes,
    SynthDigits,
    SynthRgb,
}

impl DatasetKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "idx" => Ok(DatasetKind::Idx),
            "cifar" => Ok(DatasetKind::Cifar),
            "shapes" => Ok(DatasetKind::Shapes),
            "synth-digits" => Ok(DatasetKind::SynthDigits),
            "synth-rgb" => Ok(DatasetKind::SynthRgb),
            other => Err(AgatError::Config(format!("unknown dataset '{}'", other))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::Idx => "idx",
            DatasetKind::Cifar => "cifar",
            DatasetKind::Shapes => "shapes",
            DatasetKind::SynthDigits => "synth-digits",
            DatasetKind::SynthRgb => "synth-rgb",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerSign {
    /// Descend on cls - beta*const, the printed update rule.
    Descend,
    /// Flip the classification term (ascend on it) while still maximizing
    /// divergence; experimental alternative reading.
    AscendCls,
}

impl InnerSign {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "descend" => Ok(InnerSign::Descend),
            "ascend-cls" => Ok(InnerSign::AscendCls),
            other => Err(AgatError::Config(format!("unknown inner_sign '{}'", other))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            InnerSign::Descend => "descend",
            InnerSign::AscendCls => "ascend-cls",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub profile: Profile,
    pub mode: Mode,
    pub surrogate: SurrogateId,
    pub arch: ArchId,
    pub dataset: DatasetKind,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    pub cifar_path: Option<PathBuf>,
    /// Cap on loaded samples; for synthetic datasets this is the size.
    pub max_n: usize,
    pub split_rule: SplitRule,
    pub n_epochs: usize,
    pub n_pre: usize,
    pub n_aug: usize,
    pub m_steps: usize,
    pub t_aug: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta: f64,
    pub eta: f64,
    pub mu: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub use_cr: bool,
    pub inner_sign: InnerSign,
    pub out_dir: PathBuf,
    pub pgd_eps: f64,
    pub pgd_step: f64,
    pub pgd_steps: usize,
}

impl RunConfig {
    pub fn profile_defaults(profile: Profile) -> Self {
        let base = RunConfig {
            profile,
            mode: Mode::Agat,
            surrogate: SurrogateId::AffineStn,
            arch: ArchId::MnistCnn,
            dataset: DatasetKind::SynthDigits,
            idx_images: None,
            idx_labels: None,
            cifar_path: None,
            max_n: 10_000,
            split_rule: SplitRule::Iid,
            n_epochs: 12,
            n_pre: 5,
            n_aug: 10,
            m_steps: 10,
            t_aug: 0.30,
            lambda1: 1.0,
            lambda2: 1.0,
            beta: 5.0,
            eta: 1e-4,
            mu: 0.1,
            batch_size: 64,
            seed: 7,
            use_cr: true,
            inner_sign: InnerSign::Descend,
            out_dir: PathBuf::from("runs/out"),
            pgd_eps: 8.0 / 255.0,
            pgd_step: 2.0 / 255.0,
            pgd_steps: 7,
        };
        match profile {
            Profile::Mnist => base,
            Profile::Corruption => RunConfig {
                surrogate: SurrogateId::BlurNoise,
                arch: ArchId::CifarCnn,
                dataset: DatasetKind::SynthRgb,
                n_epochs: 150,
                n_pre: 100,
                n_aug: 2,
                m_steps: 15,
                lambda1: 0.5,
                lambda2: 0.5,
                beta: 0.25,
                eta: 5e-5,
                mu: 5e-5,
                batch_size: 128,
                ..base
            },
            Profile::Shapes => RunConfig {
                surrogate: SurrogateId::SoftShapes,
                arch: ArchId::ShapesCnn,
                dataset: DatasetKind::Shapes,
                split_rule: SplitRule::TrainSizePos,
                max_n: 4000,
                n_epochs: 15,
                n_pre: 5,
                n_aug: 2,
                m_steps: 15,
                lambda1: 0.5,
                lambda2: 0.5,
                beta: 0.25,
                eta: 5e-5,
                mu: 5e-5,
                batch_size: 64,
                ..base
            },
        }
    }

    /// Parse a config file: profile defaults first, then every other line in
    /// order. Unknown keys are errors.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                AgatError::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let profile = pairs
            .iter()
            .find(|(k, _)| k == "profile")
            .map(|(_, v)| Profile::parse(v))
            .transpose()?
            .unwrap_or(Profile::Mnist);
        let mut cfg = Self::profile_defaults(profile);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AgatError::io(path.display().to_string(), e))?;
        Self::parse_text(&text)
    }

    /// One `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let fv = |v: &str| -> Result<f64> {
            v.parse::<f64>()
                .map_err(|_| AgatError::Config(format!("{}: not a number: '{}'", key, v)))
        };
        let uv = |v: &str| -> Result<usize> {
            v.parse::<usize>()
                .map_err(|_| AgatError::Config(format!("{}: not an integer: '{}'", key, v)))
        };
        match key {
            "profile" => self.profile = Profile::parse(value)?,
            "mode" => self.mode = Mode::parse(value)?,
            "surrogate" => self.surrogate = SurrogateId::parse(value)?,
            "arch" => self.arch = ArchId::parse(value)?,
            "dataset" => self.dataset = DatasetKind::parse(value)?,
            "idx_images" => self.idx_images = Some(PathBuf::from(value)),
            "idx_labels" => self.idx_labels = Some(PathBuf::from(value)),
            "cifar_path" => self.cifar_path = Some(PathBuf::from(value)),
            "max_n" => self.max_n = uv(value)?,
            "split_rule" => self.split_rule = SplitRule::parse(value)?,
            "n_epochs" => self.n_epochs = uv(value)?,
            "n_pre" => self.n_pre = uv(value)?,
            "n_aug" => self.n_aug = uv(value)?,
            "m_steps" => self.m_steps = uv(value)?,
            "t_aug" => self.t_aug = fv(value)?,
            "lambda1" => self.lambda1 = fv(value)?,
            "lambda2" => self.lambda2 = fv(value)?,
            "beta" => self.beta = fv(value)?,
            "eta" => self.eta = fv(value)?,
            "mu" => self.mu = fv(value)?,
            "batch_size" => self.batch_size = uv(value)?,
            "seed" => {
                self.seed = value
                    .parse::<u64>()
                    .map_err(|_| AgatError::Config(format!("seed: '{}'", value)))?
            }
            "use_cr" => {
                self.use_cr = match value {
                    "true" => true,
                    "false" => false,
                    _ => {
                        return Err(AgatError::Config(format!(
                            "use_cr must be true or false, got '{}'",
                            value
                        )))
                    }
                }
            }
            "inner_sign" => self.inner_sign = InnerSign::parse(value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "pgd_eps" => self.pgd_eps = fv(value)?,
            "pgd_step" => self.pgd_step = fv(value)?,
            "pgd_steps" => self.pgd_steps = uv(value)?,
            other => {
                return Err(AgatError::Config(format!("unknown key '{}'", other)));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_pre >= self.n_epochs {
            return Err(AgatError::Config(format!(
                "n_pre ({}) must be smaller than n_epochs ({})",
                self.n_pre, self.n_epochs
            )));
        }
        if self.n_aug < 1 {
            return Err(AgatError::Config("n_aug must be at least 1".into()));
        }
        if self.m_steps < 1 {
            return Err(AgatError::Config("m_steps must be at least 1".into()));
        }
        if !(self.t_aug > 0.0 && self.t_aug <= 1.0) {
            return Err(AgatError::Config(format!(
                "t_aug must lie in (0,1], got {}",
                self.t_aug
            )));
        }
        let lambda_ok = |l: f64| l > 0.0 && l <= 1.0;
        if !lambda_ok(self.lambda1) || !lambda_ok(self.lambda2) {
            return Err(AgatError::Config(format!(
                "lambda1/lambda2 must lie in (0,1], got {} and {}",
                self.lambda1, self.lambda2
            )));
        }
        if self.eta <= 0.0 || self.mu <= 0.0 || self.beta <= 0.0 {
            return Err(AgatError::Config(format!(
                "eta, mu and beta must be positive (got {}, {}, {})",
                self.eta, self.mu, self.beta
            )));
        }
        if self.batch_size == 0 {
            return Err(AgatError::Config("batch_size must be positive".into()));
        }
        if self.pgd_eps < 0.0 {
            return Err(AgatError::Config("pgd_eps must be non-negative".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> crate::losses::LossWeights {
        crate::losses::LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            beta: self.beta,
        }
    }

    /// Canonical `key = value` text of every effective field; what
    /// `resolved.cfg` holds and what the fingerprint hashes.
    pub fn resolved(&self) -> String {
        let mut s = String::new();
        let p = |s: &mut String, k: &str, v: String| writeln!(s, "{} = {}", k, v).unwrap();
        p(&mut s, "profile", self.profile.name().into());
        p(&mut s, "mode", self.mode.name().into());
        p(&mut s, "surrogate", self.surrogate.name().into());
        p(&mut s, "arch", self.arch.name().into());
        p(&mut s, "dataset", self.dataset.name().into());
        if let Some(v) = &self.idx_images {
            p(&mut s, "idx_images", v.display().to_string());
        }
        if let Some(v) = &self.idx_labels {
            p(&mut s, "idx_labels", v.display().to_string());
        }
        if let Some(v) = &self.cifar_path {
            p(&mut s, "cifar_path", v.display().to_string());
        }
        p(&mut s, "max_n", self.max_n.to_string());
        p(&mut s, "split_rule", self.split_rule.name().into());
        p(&mut s, "n_epochs", self.n_epochs.to_string());
        p(&mut s, "n_pre", self.n_pre.to_string());
        p(&mut s, "n_aug", self.n_aug.to_string());
        p(&mut s, "m_steps", self.m_steps.to_string());
        p(&mut s, "t_aug", format!("{}", self.t_aug));
        p(&mut s, "lambda1", format!("{}", self.lambda1));
        p(&mut s, "lambda2", format!("{}", self.lambda2));
        p(&mut s, "beta", format!("{}", self.beta));
        p(&mut s, "eta", format!("{}", self.eta));
        p(&mut s, "mu", format!("{}", self.mu));
        p(&mut s, "batch_size", self.batch_size.to_string());
        p(&mut s, "seed", self.seed.to_string());
        p(&mut s, "use_cr", self.use_cr.to_string());
        p(&mut s, "inner_sign", self.inner_sign.name().into());
        p(&mut s, "out_dir", self.out_dir.display().to_string());
        p(&mut s, "pgd_eps", format!("{}", self.pgd_eps));
        p(&mut s, "pgd_step", format!("{}", self.pgd_step));
        p(&mut s, "pgd_steps", self.pgd_steps.to_string());
        s
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for b in self.resolved().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    /// Materialize the training dataset this config names.
    pub fn load_dataset(&self) -> Result<LabeledDataset> {
        match self.dataset {
            DatasetKind::Idx => {
                let (ip, lp) = match (&self.idx_images, &self.idx_labels) {
                    (Some(i), Some(l)) => (i, l),
                    _ => {
                        return Err(AgatError::Config(
                            "dataset = idx needs idx_images and idx_labels".into(),
                        ))
                    }
                };
                let d = super::load_idx(ip, lp)?;
                if self.max_n > 0 && self.max_n < d.len() {
                    Ok(d.subset(&(0..self.max_n).collect::<Vec<_>>()))
                } else {
                    Ok(d)
                }
            }
            DatasetKind::Cifar => {
                let p = self.cifar_path.as_ref().ok_or_else(|| {
                    AgatError::Config("dataset = cifar needs cifar_path".into())
                })?;
                super::load_cifar_binary(p, if self.max_n == 0 { usize::MAX } else { self.max_n })
            }
            DatasetKind::Shapes => {
                super::generate_shapes_dataset(self.max_n, self.split_rule, self.seed)
            }
            DatasetKind::SynthDigits => Ok(synth::digits_dataset(self.max_n, self.seed)),
            DatasetKind::SynthRgb => Ok(synth::rgb_glyphs_dataset(self.max_n, self.seed)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mnist_profile_defaults_match_documented_values() {
        let c = RunConfig::parse_text("profile = mnist\n").unwrap();
        assert_eq!(c.n_epochs, 12);
        assert_eq!(c.n_pre, 5);
        assert_eq!(c.n_aug, 10);
        assert_eq!(c.t_aug, 0.30);
        assert_eq!(c.m_steps, 10);
        assert_eq!(c.lambda1, 1.0);
        assert_eq!(c.lambda2, 1.0);
        assert_eq!(c.beta, 5.0);
        assert_eq!(c.eta, 1e-4);
        assert_eq!(c.mu, 0.1);
    }

    #[test]
    fn corruption_profile_defaults() {
        let c = RunConfig::parse_text("profile = corruption\n").unwrap();
        assert_eq!(c.n_epochs, 150);
        assert_eq!(c.n_pre, 100);
        assert_eq!(c.n_aug, 2);
        assert_eq!(c.m_steps, 15);
        assert_eq!(c.lambda1, 0.5);
        assert_eq!(c.lambda2, 0.5);
        assert_eq!(c.beta, 0.25);
        assert_eq!(c.eta, 5e-5);
        assert_eq!(c.mu, 5e-5);
    }

    #[test]
    fn out_of_range_t_aug_is_rejected() {
        assert!(RunConfig::parse_text("t_aug = 1.5\n").is_err());
        assert!(RunConfig::parse_text("t_aug = 1.0\n").is_ok());
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(RunConfig::parse_text("n_epochz = 12\n").is_err());
    }

    #[test]
    fn n_pre_must_stay_below_n_epochs() {
        assert!(RunConfig::parse_text("n_pre = 12\nn_epochs = 12\n").is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let c = RunConfig::parse_text("# a comment\n\nseed = 99 # trailing\n").unwrap();
        assert_eq!(c.seed, 99);
    }

    #[test]
    fn resolved_round_trips_and_fingerprint_is_stable() {
        let c = RunConfig::parse_text("profile = shapes\nseed = 3\n").unwrap();
        let r = c.resolved();
        let c2 = RunConfig::parse_text(&r).unwrap();
        assert_eq!(c.fingerprint(), c2.fingerprint());
        assert_eq!(r, c2.resolved());
    }
}
