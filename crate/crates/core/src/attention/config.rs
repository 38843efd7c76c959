use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mechanism {
    Full,
    Linformer,
    Longformer2D,
}

impl Mechanism {
    pub const ALL: [Mechanism; 3] = [Mechanism::Full, Mechanism::Linformer, Mechanism::Longformer2D];

    pub fn as_str(self) -> &'static str {
        match self {
            Mechanism::Full => "full",
            Mechanism::Linformer => "linformer",
            Mechanism::Longformer2D => "longformer",
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Mechanism::Full),
            "linformer" => Ok(Mechanism::Linformer),
            "longformer" | "longformer2d" => Ok(Mechanism::Longformer2D),
            other => Err(Error::config(format!("unknown attention mechanism `{other}`"))),
        }
    }
}

/// Multi-head attention hyper-parameters. `k_rank` is read only by
/// Linformer; `window` and `global_tokens` only by Longformer2D.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub mechanism: Mechanism,
    pub heads: usize,
    pub head_dim: usize,
    pub k_rank: usize,
    pub window: usize,
    pub global_tokens: usize,
}

impl AttentionConfig {
    pub fn new(mechanism: Mechanism, heads: usize, head_dim: usize) -> Self {
        Self {
            mechanism,
            heads,
            head_dim,
            k_rank: 16,
            window: 5,
            global_tokens: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Global tokens exist only for the sliding-window mechanism.
    pub fn effective_globals(&self) -> usize {
        match self.mechanism {
            Mechanism::Longformer2D => self.global_tokens,
            _ => 0,
        }
    }

    /// Check against a sequence of `tokens` spatial tokens.
    pub fn validate(&self, tokens: usize) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 {
            return Err(Error::config("heads and head_dim must be positive"));
        }
        match self.mechanism {
            Mechanism::Full => {}
            Mechanism::Linformer => {
                if self.k_rank == 0 {
                    return Err(Error::config("k_rank must be positive"));
                }
                if self.k_rank > tokens {
                    return Err(Error::config(format!(
                        "k_rank {} exceeds the {tokens} tokens it projects",
                        self.k_rank
                    )));
                }
            }
            Mechanism::Longformer2D => {
                if self.window == 0 || self.window.is_multiple_of(2) {
                    return Err(Error::config(format!("window must be odd and positive, got {}", self.window)));
                }
            }
        }
        Ok(())
    }
}

/// One augmentation point: how the feature map is cut into tokens and
/// what block runs over them.
#[derive(Clone, Debug, PartialEq)]
pub struct EvitBlockSpec {
    pub patch: usize,
    pub in_channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub attn: AttentionConfig,
    pub mlp_ratio: f64,
}

impl EvitBlockSpec {
    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Spatial tokens plus global tokens; also the position-table height.
    pub fn seq_len(&self) -> usize {
        self.tokens() + self.attn.effective_globals()
    }

    pub fn hidden(&self) -> usize {
        ((self.dim as f64) * self.mlp_ratio).round().max(1.0) as usize
    }

    pub fn input_extent(&self) -> (usize, usize) {
        (self.grid_h * self.patch, self.grid_w * self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.patch == 1 || self.patch == 2) {
            return Err(Error::config(format!("patch must be 1 or 2, got {}", self.patch)));
        }
        if self.grid_h == 0 || self.grid_w == 0 || self.in_channels == 0 {
            return Err(Error::config("token grid and channels must be positive"));
        }
        if self.attn.dim() != self.dim {
            return Err(Error::config(format!(
                "embedding dim {} != heads {} x head_dim {}",
                self.dim, self.attn.heads, self.attn.head_dim
            )));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) {
            return Err(Error::config(format!("mlp_ratio must be positive, got {}", self.mlp_ratio)));
        }
        if self.attn.mechanism != Mechanism::Longformer2D && self.attn.global_tokens > 0 {
            return Err(Error::config("global_tokens applies only to the longformer mechanism"));
        }
        self.attn.validate(self.tokens())
    }
}
