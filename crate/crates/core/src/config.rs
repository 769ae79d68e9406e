//! Training configuration and its flat `key = value` text form.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::AugmentConfig;
use crate::error::{Error, Result};
use crate::schedule::PosteriorVarianceMode;

/// Declares a unit enum with a snake_case text form.
macro_rules! text_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} {other:?} (expected one of: {})",
                        stringify!($name),
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

text_enum!(
    EncoderKind {
        Attention => "attention",
        Recurrent => "recurrent",
    }
);

text_enum!(
    /// How the sampled prediction scales its noise: by `β̂_t` or by `√β̂_t`.
    NoiseScaleMode {
        Direct => "direct",
        Sqrt => "sqrt",
    }
);

text_enum!(
    /// Where in-view negatives come from.
    NegativeScope {
        Batch => "batch",
        Sequence => "sequence",
    }
);

text_enum!(
    /// Loss presets for the ablations.
    Variant {
        Full => "full",
        MseOnly => "mse_only",
        CdOnly => "cd_only",
        NoRescale => "no_rescale",
        SingleView => "single_view",
        InOnly => "in_only",
        CrossOnly => "cross_only",
        MseMultiView => "mse_multi_view",
    }
);

/// Which terms a [`Variant`] switches on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossTerms {
    pub cross_divergence: bool,
    pub mse: bool,
    pub in_view: bool,
    pub cross_view: bool,
    /// Weight step `t` by `1/(t+1)`; otherwise by `1/(T+1)`.
    pub rescale: bool,
}

impl Variant {
    pub fn terms(self) -> LossTerms {
        let base = LossTerms { cross_divergence: true, mse: false, in_view: true, cross_view: true, rescale: true };
        match self {
            Variant::Full => base,
            Variant::MseOnly => LossTerms { cross_divergence: false, mse: true, in_view: false, cross_view: false, ..base },
            Variant::CdOnly => LossTerms { in_view: false, cross_view: false, ..base },
            Variant::NoRescale => LossTerms { in_view: false, cross_view: false, rescale: false, ..base },
            Variant::SingleView | Variant::InOnly => LossTerms { cross_view: false, ..base },
            Variant::CrossOnly => LossTerms { in_view: false, ..base },
            Variant::MseMultiView => LossTerms { cross_divergence: false, mse: true, in_view: false, ..base },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub d: usize,
    pub max_len: usize,
    /// Number of diffusion steps `T`.
    pub steps: usize,
    pub beta_max: f64,
    pub lambda: f64,
    pub tau: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub variant: Variant,
    /// Corrupt targets with the forward process; off feeds clean embeddings.
    pub diffusion: bool,
    /// Sample predictions around the mean; off uses the mean itself.
    pub denoising: bool,
    pub encoder: EncoderKind,
    pub blocks: usize,
    pub heads: usize,
    pub posterior_variance_mode: PosteriorVarianceMode,
    pub variance_floor: f64,
    pub noise_scale_mode: NoiseScaleMode,
    pub negative_scope: NegativeScope,
    /// Number of steps drawn per batch; 0 evaluates every step.
    pub step_subsample: usize,
    pub t_infer: usize,
    pub grad_clip: f64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 128,
            dropout: 0.2,
            d: 128,
            max_len: 20,
            steps: 10,
            beta_max: 0.04,
            lambda: 0.1,
            tau: 1.0,
            patience: 50,
            max_epochs: 500,
            seed: 42,
            variant: Variant::Full,
            diffusion: true,
            denoising: true,
            encoder: EncoderKind::Attention,
            blocks: 2,
            heads: 2,
            posterior_variance_mode: PosteriorVarianceMode::Ratio,
            variance_floor: 0.0,
            noise_scale_mode: NoiseScaleMode::Direct,
            negative_scope: NegativeScope::Batch,
            step_subsample: 0,
            t_infer: 0,
            grad_clip: 5.0,
            augment: AugmentConfig::default(),
        }
    }
}

/// Keys a config file has to set explicitly.
pub const REQUIRED_KEYS: &[&str] = &["lambda", "tau"];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {value:?} for {key}"))),
    }
}

impl TrainConfig {
    /// Every key accepted by [`TrainConfig::set`], in file order.
    pub const KEYS: &'static [&'static str] = &[
        "learning_rate",
        "batch_size",
        "dropout",
        "d",
        "max_len",
        "steps",
        "beta_max",
        "lambda",
        "tau",
        "patience",
        "max_epochs",
        "seed",
        "variant",
        "diffusion",
        "denoising",
        "encoder",
        "blocks",
        "heads",
        "posterior_variance_mode",
        "variance_floor",
        "noise_scale_mode",
        "negative_scope",
        "step_subsample",
        "t_infer",
        "grad_clip",
        "crop_ratio",
        "mask_ratio",
        "reorder_ratio",
    ];

    /// Sets one key from its text form. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "d" => self.d = parse(key, v)?,
            "max_len" => self.max_len = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "beta_max" => self.beta_max = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "max_epochs" => self.max_epochs = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "variant" => self.variant = v.parse()?,
            "diffusion" => self.diffusion = parse_bool(key, v)?,
            "denoising" => self.denoising = parse_bool(key, v)?,
            "encoder" => self.encoder = v.parse()?,
            "blocks" => self.blocks = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "posterior_variance_mode" => {
                self.posterior_variance_mode = match v {
                    "ratio" => PosteriorVarianceMode::Ratio,
                    "standard" => PosteriorVarianceMode::Standard,
                    _ => return Err(Error::Config(format!("bad value {v:?} for {key}"))),
                }
            }
            "variance_floor" => self.variance_floor = parse(key, v)?,
            "noise_scale_mode" => self.noise_scale_mode = v.parse()?,
            "negative_scope" => self.negative_scope = v.parse()?,
            "step_subsample" => self.step_subsample = parse(key, v)?,
            "t_infer" => self.t_infer = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "crop_ratio" => self.augment.crop_ratio = parse(key, v)?,
            "mask_ratio" => self.augment.mask_ratio = parse(key, v)?,
            "reorder_ratio" => self.augment.reorder_ratio = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Text value of a key, inverse of [`TrainConfig::set`].
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "learning_rate" => self.learning_rate.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "dropout" => self.dropout.to_string(),
            "d" => self.d.to_string(),
            "max_len" => self.max_len.to_string(),
            "steps" => self.steps.to_string(),
            "beta_max" => self.beta_max.to_string(),
            "lambda" => self.lambda.to_string(),
            "tau" => self.tau.to_string(),
            "patience" => self.patience.to_string(),
            "max_epochs" => self.max_epochs.to_string(),
            "seed" => self.seed.to_string(),
            "variant" => self.variant.to_string(),
            "diffusion" => self.diffusion.to_string(),
            "denoising" => self.denoising.to_string(),
            "encoder" => self.encoder.to_string(),
            "blocks" => self.blocks.to_string(),
            "heads" => self.heads.to_string(),
            "posterior_variance_mode" => match self.posterior_variance_mode {
                PosteriorVarianceMode::Ratio => "ratio".into(),
                PosteriorVarianceMode::Standard => "standard".into(),
            },
            "variance_floor" => self.variance_floor.to_string(),
            "noise_scale_mode" => self.noise_scale_mode.to_string(),
            "negative_scope" => self.negative_scope.to_string(),
            "step_subsample" => self.step_subsample.to_string(),
            "t_infer" => self.t_infer.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "crop_ratio" => self.augment.crop_ratio.to_string(),
            "mask_ratio" => self.augment.mask_ratio.to_string(),
            "reorder_ratio" => self.augment.reorder_ratio.to_string(),
            _ => return None,
        })
    }

    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.d == 0 || self.max_len == 0 || self.steps == 0 {
            return bad("batch_size, d, max_len and steps must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.beta_max > 0.0 && self.beta_max < 1.0) {
            return bad("beta_max must lie in (0, 1)");
        }
        if !(self.tau > 0.0) || !(self.lambda >= 0.0) {
            return bad("tau must be positive and lambda non-negative");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive");
        }
        if self.encoder == EncoderKind::Attention && (self.heads == 0 || !self.d.is_multiple_of(self.heads)) {
            return bad("heads must divide d");
        }
        if self.t_infer > self.steps {
            return bad("t_infer must not exceed steps");
        }
        if self.step_subsample > self.steps + 1 {
            return bad("step_subsample must not exceed steps + 1");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }

    /// `key = value` lines for every key.
    pub fn to_kv(&self) -> String {
        Self::KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k).expect("listed key"))).collect()
    }
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// repeated keys are an error.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let k = k.trim().to_string();
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut c = TrainConfig { variant: Variant::MseOnly, beta_max: 0.06, ..Default::default() };
        c.encoder = EncoderKind::Recurrent;
        let mut back = TrainConfig::default();
        for (k, v) in parse_kv(&c.to_kv()).unwrap() {
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_and_values_are_rejected() {
        let mut c = TrainConfig::default();
        assert!(matches!(c.set("learnin_rate", "0.1"), Err(Error::Config(_))));
        assert!(c.set("variant", "mse").is_err());
        assert!(c.set("diffusion", "maybe").is_err());
        assert!("transformer".parse::<EncoderKind>().is_err());
        assert!(parse_kv("a = 1\na = 2").is_err());
        assert!(parse_kv("no equals sign").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let kv = parse_kv("# header\n\nlambda = 0.5 # trailing\n tau=2\n").unwrap();
        assert_eq!(kv["lambda"], "0.5");
        assert_eq!(kv["tau"], "2");
    }

    #[test]
    fn variant_terms() {
        assert!(!Variant::MseOnly.terms().cross_divergence);
        assert!(!Variant::NoRescale.terms().rescale);
        assert_eq!(Variant::SingleView.terms(), Variant::InOnly.terms());
        let full = Variant::Full.terms();
        assert!(full.cross_divergence && full.in_view && full.cross_view && full.rescale && !full.mse);
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), *v);
        }
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { dropout: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { heads: 3, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { beta_max: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { t_infer: 11, ..Default::default() }.validate().is_err());
    }
}
