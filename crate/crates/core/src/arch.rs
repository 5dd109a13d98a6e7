//! Architecture descriptions, LoRA target roles and trainable-parameter
//! accounting.

use std::collections::BTreeSet;
use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Architecture {
    EncoderOnly,
    DecoderOnly,
}

impl Architecture {
    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::EncoderOnly => "encoder_only",
            Architecture::DecoderOnly => "decoder_only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "encoder_only" => Some(Architecture::EncoderOnly),
            "decoder_only" => Some(Architecture::DecoderOnly),
            _ => None,
        }
    }

    /// Roles present in one transformer block of this architecture.
    pub fn available_roles(self) -> &'static [Role] {
        match self {
            Architecture::EncoderOnly => &[
                Role::Wq,
                Role::Wk,
                Role::Wv,
                Role::Wo,
                Role::Wup,
                Role::Wdown,
            ],
            Architecture::DecoderOnly => &Role::ALL,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Weight matrices inside a transformer block that may carry an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Wq,
    Wk,
    Wv,
    Wo,
    Wgate,
    Wup,
    Wdown,
}

impl Role {
    pub const ALL: [Role; 7] = [
        Role::Wq,
        Role::Wk,
        Role::Wv,
        Role::Wo,
        Role::Wgate,
        Role::Wup,
        Role::Wdown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Wq => "wq",
            Role::Wk => "wk",
            Role::Wv => "wv",
            Role::Wo => "wo",
            Role::Wgate => "wgate",
            Role::Wup => "wup",
            Role::Wdown => "wdown",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Role::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Dimensions of a transformer and the set of matrices that receive LoRA
/// adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureSpec {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Key/value heads; smaller than `n_heads` for grouped-query attention.
    pub n_kv_heads: usize,
    /// Per-head width. Usually `d_model / n_heads`.
    pub head_dim: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub architecture: Architecture,
    pub lora_targets: BTreeSet<Role>,
}

impl ArchitectureSpec {
    /// A spec with standard multi-head attention (`n_kv_heads = n_heads`,
    /// `head_dim = d_model / n_heads`).
    pub fn new(
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
        vocab_size: usize,
        architecture: Architecture,
        lora_targets: impl IntoIterator<Item = Role>,
    ) -> Result<Self> {
        let spec = Self {
            n_layers,
            d_model,
            n_heads,
            n_kv_heads: n_heads,
            head_dim: d_model.checked_div(n_heads).unwrap_or(0),
            d_ff,
            vocab_size,
            architecture,
            lora_targets: lora_targets.into_iter().collect(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::Invalid(
                "architecture needs at least one layer".into(),
            ));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_kv_heads == 0 || !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::Invalid(format!(
                "n_heads {} is not a multiple of n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        if self.head_dim == 0 || self.d_ff == 0 || self.vocab_size == 0 {
            return Err(Error::Invalid("zero-sized dimension".into()));
        }
        if self.lora_targets.is_empty() {
            return Err(Error::Invalid("lora_targets must not be empty".into()));
        }
        let available = self.architecture.available_roles();
        if let Some(r) = self.lora_targets.iter().find(|r| !available.contains(r)) {
            return Err(Error::Invalid(format!(
                "role {r} does not exist in {} blocks",
                self.architecture
            )));
        }
        Ok(())
    }

    /// `(d_in, d_out)` of a role's weight matrix.
    pub fn role_shape(&self, role: Role) -> (usize, usize) {
        let q_width = self.n_heads * self.head_dim;
        let kv_width = self.n_kv_heads * self.head_dim;
        match role {
            Role::Wq => (self.d_model, q_width),
            Role::Wk | Role::Wv => (self.d_model, kv_width),
            Role::Wo => (q_width, self.d_model),
            Role::Wgate | Role::Wup => (self.d_model, self.d_ff),
            Role::Wdown => (self.d_ff, self.d_model),
        }
    }

    /// Adapter parameters added to one layer at rank `r`.
    pub fn adapter_params_per_layer(&self, rank: usize) -> u64 {
        self.lora_targets
            .iter()
            .map(|&role| {
                let (d_in, d_out) = self.role_shape(role);
                (rank * (d_in + d_out)) as u64
            })
            .sum()
    }
}

/// Trainable adapter parameters when `selected_count` layers carry rank-`rank`
/// adapters on every target role. Embeddings, head and norms are excluded.
pub fn count_trainable(spec: &ArchitectureSpec, rank: usize, selected_count: usize) -> u64 {
    selected_count as u64 * spec.adapter_params_per_layer(rank)
}

/// A named built-in architecture with its default LoRA hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub spec: ArchitectureSpec,
    pub rank: usize,
    pub alpha: f64,
    /// Count-only presets have no toy weights to build.
    pub buildable: bool,
}

pub const PRESET_NAMES: [&str; 7] = [
    "roberta-base-glue",
    "deberta-v3-base",
    "llama2-7b-math",
    "mistral-7b",
    "gemma-7b",
    "toy-encoder",
    "toy-decoder",
];

pub fn preset(name: &str) -> Result<Preset> {
    use Architecture::*;
    use Role::*;

    let (spec, rank, alpha, buildable) = match name {
        "roberta-base-glue" => (
            ArchitectureSpec::new(12, 768, 12, 3072, 50265, EncoderOnly, [Wq, Wv])?,
            8,
            16.0,
            false,
        ),
        "deberta-v3-base" => (
            ArchitectureSpec::new(
                12,
                768,
                12,
                3072,
                128_100,
                EncoderOnly,
                [Wq, Wk, Wv, Wo, Wup, Wdown],
            )?,
            8,
            16.0,
            false,
        ),
        "llama2-7b-math" => (
            ArchitectureSpec::new(32, 4096, 32, 11008, 32000, DecoderOnly, Role::ALL)?,
            128,
            128.0,
            false,
        ),
        "mistral-7b" => {
            let mut s = ArchitectureSpec::new(32, 4096, 32, 14336, 32000, DecoderOnly, Role::ALL)?;
            s.n_kv_heads = 8;
            (s, 128, 128.0, false)
        }
        "gemma-7b" => {
            let mut s =
                ArchitectureSpec::new(28, 3072, 16, 24576, 256_000, DecoderOnly, Role::ALL)?;
            s.head_dim = 256;
            (s, 128, 128.0, false)
        }
        "toy-encoder" => (
            ArchitectureSpec::new(12, 64, 4, 256, 128, EncoderOnly, [Wq, Wv])?,
            4,
            8.0,
            true,
        ),
        "toy-decoder" => (
            ArchitectureSpec::new(8, 64, 4, 256, 128, DecoderOnly, Role::ALL)?,
            4,
            8.0,
            true,
        ),
        other => {
            return Err(Error::Invalid(format!(
                "unknown preset {other:?}; expected one of {}",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    spec.validate()?;
    Ok(Preset {
        name: PRESET_NAMES
            .iter()
            .find(|n| **n == name)
            .copied()
            .unwrap_or("custom"),
        spec,
        rank,
        alpha,
        buildable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roberta_counts() {
        let p = preset("roberta-base-glue").unwrap();
        assert_eq!(count_trainable(&p.spec, 8, 12), 294_912);
        assert_eq!(count_trainable(&p.spec, 8, 6), 147_456);
    }

    #[test]
    fn llama_counts() {
        let p = preset("llama2-7b-math").unwrap();
        assert_eq!(count_trainable(&p.spec, 128, 32), 319_815_680);
        assert_eq!(count_trainable(&p.spec, 128, 16), 159_907_840);
        assert_eq!(
            32 * (4 * 128 * 8192 + 3 * 128 * (4096 + 11008)) as u64,
            319_815_680
        );
    }

    #[test]
    fn gqa_and_wide_head_presets() {
        // Grouped-query attention narrows Wk/Wv; gemma's heads are wider
        // than d_model / n_heads.
        let m = preset("mistral-7b").unwrap();
        assert_eq!(m.spec.role_shape(Role::Wk), (4096, 1024));
        assert_eq!(count_trainable(&m.spec, 128, 32), 335_544_320);
        assert_eq!(count_trainable(&m.spec, 128, 16), 167_772_160);
        let g = preset("gemma-7b").unwrap();
        assert_eq!(g.spec.role_shape(Role::Wo), (4096, 3072));
        assert_eq!(count_trainable(&g.spec, 128, 28), 400_031_744);
        assert_eq!(count_trainable(&g.spec, 128, 14), 200_015_872);
    }

    #[test]
    fn rank_redistribution_keeps_count() {
        let p = preset("roberta-base-glue").unwrap();
        assert_eq!(
            count_trainable(&p.spec, 16, 6),
            count_trainable(&p.spec, 8, 12)
        );
    }

    #[test]
    fn linear_in_rank_and_layers() {
        let p = preset("toy-decoder").unwrap();
        let unit = count_trainable(&p.spec, 1, 1);
        for r in 1..6 {
            for n in 0..=8 {
                assert_eq!(count_trainable(&p.spec, r, n), unit * (r * n) as u64);
            }
        }
    }

    #[test]
    fn validation() {
        assert!(
            ArchitectureSpec::new(2, 10, 3, 8, 8, Architecture::DecoderOnly, [Role::Wq]).is_err()
        );
        assert!(ArchitectureSpec::new(2, 8, 2, 8, 8, Architecture::DecoderOnly, []).is_err());
        assert!(
            ArchitectureSpec::new(2, 8, 2, 8, 8, Architecture::EncoderOnly, [Role::Wgate]).is_err()
        );
        assert!(preset("gpt-5").is_err());
        for name in PRESET_NAMES {
            preset(name).unwrap();
        }
    }
}
