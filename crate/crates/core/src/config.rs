use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("unknown {kind} `{value}`")]
    UnknownVariant { kind: &'static str, value: String },
}

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident, $kind:literal, { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = ConfigError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
                    $($text => Ok($name::$variant),)+
                    _ => Err(ConfigError::UnknownVariant { kind: $kind, value: s.to_string() }),
                }
            }
        }
    };
}

string_enum!(
    /// Semantic-preserving intervention applied to a prompt.
    InterventionMethod, "intervention method", {
        Soc => "soc",
        Typo => "typo",
        Paraphrase => "paraphrase",
        Identity => "identity",
    }
);

string_enum!(
    /// Distance between two aligned token distributions.
    Metric, "metric", {
        Hellinger => "hellinger",
        SqHellinger => "sq_hellinger",
        Kl => "kl",
        Bhattacharyya => "bhattacharyya",
    }
);

string_enum!(
    /// Per-position importance weight.
    Weighting, "weighting", {
        Entropy => "entropy",
        None => "none",
    }
);

string_enum!(
    /// Logit assigned to tokens missing from one side of a pair.
    Smoothing, "smoothing", {
        ScaledMin => "scaled_min",
        MinMinusMargin => "min_minus_margin",
    }
);

string_enum!(
    /// Source of token distributions.
    BackendKind, "backend", {
        Mock => "mock",
        Replay => "replay",
        Http => "http",
    }
);

string_enum!(
    /// Denominator of the weighted shift average.
    Normalization, "normalization", {
        Length => "length",
        WeightSum => "weight_sum",
    }
);

/// Parameters of the ESI score and its variant pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsiConfig {
    pub intervention_method: InterventionMethod,
    /// Variants drawn per trial.
    #[serde(rename = "L")]
    pub l: usize,
    pub pool_size: usize,
    /// Top-k truncation of each token distribution.
    pub k: usize,
    pub metric: Metric,
    pub weighting: Weighting,
    /// First removable character position (1-based) for SOC and typo.
    pub soc_min_len: usize,
    /// Per-word intervention probability.
    pub soc_prob: f64,
    pub smoothing: Smoothing,
    #[serde(default = "default_normalization")]
    pub normalization: Normalization,
    pub seed: u64,
}

fn default_normalization() -> Normalization {
    Normalization::Length
}

impl Default for EsiConfig {
    fn default() -> Self {
        Self::for_method(InterventionMethod::Soc)
    }
}

impl EsiConfig {
    /// Defaults for a given intervention method: ten variants from a pool of
    /// forty for character-level methods, five from ten for paraphrases.
    pub fn for_method(method: InterventionMethod) -> Self {
        let (l, pool_size) = match method {
            InterventionMethod::Paraphrase => (5, 10),
            InterventionMethod::Identity => (1, 1),
            InterventionMethod::Soc | InterventionMethod::Typo => (10, 40),
        };
        EsiConfig {
            intervention_method: method,
            l,
            pool_size,
            k: 100,
            metric: Metric::Hellinger,
            weighting: Weighting::Entropy,
            soc_min_len: 3,
            soc_prob: 0.3,
            smoothing: Smoothing::ScaledMin,
            normalization: Normalization::Length,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.l == 0 {
            return bad("L must be positive".into());
        }
        if self.pool_size == 0 {
            return bad("pool_size must be positive".into());
        }
        if self.l > self.pool_size {
            return bad(format!("L ({}) exceeds pool_size ({})", self.l, self.pool_size));
        }
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        if self.soc_min_len == 0 {
            return bad("soc_min_len must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.soc_prob) {
            return bad(format!("soc_prob {} outside [0, 1]", self.soc_prob));
        }
        Ok(())
    }

    /// Short stable hash of the configuration.
    pub fn fingerprint(&self) -> String {
        fingerprint_of(self)
    }
}

/// First 16 hex digits of the SHA-256 of a value's JSON encoding.
pub fn fingerprint_of<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&json);
    hex::encode(&digest[..8])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_defaults() {
        let soc = EsiConfig::for_method(InterventionMethod::Soc);
        assert_eq!((soc.l, soc.pool_size, soc.k, soc.soc_min_len), (10, 40, 100, 3));
        assert_eq!(soc.soc_prob, 0.3);
        let para = EsiConfig::for_method(InterventionMethod::Paraphrase);
        assert_eq!((para.l, para.pool_size), (5, 10));
        soc.validate().unwrap();
        para.validate().unwrap();
    }

    #[test]
    fn l_above_pool_rejected() {
        let cfg = EsiConfig { l: 41, ..EsiConfig::default() };
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));
        let cfg = EsiConfig { soc_prob: 1.5, ..EsiConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn enum_parsing() {
        assert_eq!("sq-hellinger".parse::<Metric>().unwrap(), Metric::SqHellinger);
        assert_eq!("SOC".parse::<InterventionMethod>().unwrap(), InterventionMethod::Soc);
        assert!("cosine".parse::<Metric>().is_err());
        for m in Metric::ALL {
            assert_eq!(m.as_str().parse::<Metric>().unwrap(), *m);
        }
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = EsiConfig::default();
        let b = EsiConfig { k: 20, ..a.clone() };
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 16);
    }
}
