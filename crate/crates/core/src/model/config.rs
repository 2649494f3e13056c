use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::conv::same_geometry;
use crate::error::{Error, Result};

/// Which encoder layers keep their ConvLSTM and whether attention is applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// ConvLSTM with attention at all four layers.
    #[default]
    Full,
    /// ConvLSTM at all four layers, last hidden state passed on directly.
    NoAttention,
    /// ConvLSTM only at layers 3 and 4, no attention.
    ConvlstmLast2,
    /// ConvLSTM only at layer 4, no attention.
    ConvlstmLast1,
}

impl AblationMode {
    /// Whether encoder layer `layer` (0-based) feeds the decoder through a ConvLSTM.
    pub fn recurrent(self, layer: usize) -> bool {
        match self {
            AblationMode::Full | AblationMode::NoAttention => true,
            AblationMode::ConvlstmLast2 => layer >= 2,
            AblationMode::ConvlstmLast1 => layer >= 3,
        }
    }

    pub fn attention(self) -> bool {
        self == AblationMode::Full
    }

    pub fn all() -> [AblationMode; 4] {
        [
            AblationMode::Full,
            AblationMode::NoAttention,
            AblationMode::ConvlstmLast2,
            AblationMode::ConvlstmLast1,
        ]
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoAttention => "no_attention",
            AblationMode::ConvlstmLast2 => "convlstm_last2",
            AblationMode::ConvlstmLast1 => "convlstm_last1",
        }
    }
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::all()
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode {s:?}")))
    }
}

/// Kernel size, channel counts and stride of one (de)convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub k: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
}

const ENCODER_KERNELS: [usize; 4] = [3, 3, 2, 2];
const ENCODER_STRIDES: [usize; 4] = [1, 2, 2, 2];

/// Architecture plus the signature layout it consumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n: usize,
    pub scales: Vec<usize>,
    pub gap: usize,
    pub channels: [usize; 4],
    pub h: usize,
    pub chi: f64,
    pub mode: AblationMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n: 30,
            scales: vec![10, 30, 60],
            gap: 10,
            channels: [32, 64, 128, 256],
            h: 5,
            chi: 5.0,
            mode: AblationMode::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config(format!("n must be >= 2, got {}", self.n)));
        }
        if self.scales.is_empty() || self.scales.contains(&0) {
            return Err(Error::Config(
                "scales must be non-empty and positive".into(),
            ));
        }
        if self.h == 0 {
            return Err(Error::Config("history h must be >= 1".into()));
        }
        if !(self.chi > 0.0) {
            return Err(Error::Config(format!("chi must be > 0, got {}", self.chi)));
        }
        if self.gap == 0 || self.channels.contains(&0) {
            return Err(Error::Config(
                "gap and channel widths must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        self.scales.len()
    }

    /// Conv1..Conv4.
    pub fn encoder_specs(&self) -> [LayerSpec; 4] {
        let c = self.channels;
        let ins = [self.input_channels(), c[0], c[1], c[2]];
        std::array::from_fn(|l| LayerSpec {
            k: ENCODER_KERNELS[l],
            in_ch: ins[l],
            out_ch: c[l],
            stride: ENCODER_STRIDES[l],
        })
    }

    /// Decoder layers indexed like the encoder: entry `l` maps the level-`l`
    /// representation (plus skip, except at the deepest level) back to level `l-1`.
    /// Entry 3 is DeConv4, entry 0 is DeConv1.
    pub fn decoder_specs(&self) -> [LayerSpec; 4] {
        let c = self.channels;
        let outs = [self.input_channels(), c[0], c[1], c[2]];
        std::array::from_fn(|l| LayerSpec {
            k: ENCODER_KERNELS[l],
            in_ch: if l == 3 { c[3] } else { 2 * c[l] },
            out_ch: outs[l],
            stride: ENCODER_STRIDES[l],
        })
    }

    /// Spatial side of the input and of each encoder output: `[n, n1, n2, n3, n4]`.
    pub fn spatial_sizes(&self) -> [usize; 5] {
        let mut out = [self.n; 5];
        for l in 0..4 {
            out[l + 1] =
                same_geometry(out[l], out[l], ENCODER_KERNELS[l], ENCODER_STRIDES[l]).out_h;
        }
        out
    }

    /// Stable 64-bit digest of the architecture, stored in checkpoints.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_width_schedule() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.spatial_sizes(), [30, 30, 15, 8, 4]);
        let enc = cfg.encoder_specs();
        assert_eq!(
            enc[0],
            LayerSpec {
                k: 3,
                in_ch: 3,
                out_ch: 32,
                stride: 1
            }
        );
        assert_eq!(
            enc[1],
            LayerSpec {
                k: 3,
                in_ch: 32,
                out_ch: 64,
                stride: 2
            }
        );
        assert_eq!(
            enc[2],
            LayerSpec {
                k: 2,
                in_ch: 64,
                out_ch: 128,
                stride: 2
            }
        );
        assert_eq!(
            enc[3],
            LayerSpec {
                k: 2,
                in_ch: 128,
                out_ch: 256,
                stride: 2
            }
        );
        let dec = cfg.decoder_specs();
        assert_eq!(
            dec[3],
            LayerSpec {
                k: 2,
                in_ch: 256,
                out_ch: 128,
                stride: 2
            }
        );
        assert_eq!(
            dec[2],
            LayerSpec {
                k: 2,
                in_ch: 128 + 128,
                out_ch: 64,
                stride: 2
            }
        );
        assert_eq!(
            dec[1],
            LayerSpec {
                k: 3,
                in_ch: 64 + 64,
                out_ch: 32,
                stride: 2
            }
        );
        assert_eq!(
            dec[0],
            LayerSpec {
                k: 3,
                in_ch: 32 + 32,
                out_ch: 3,
                stride: 1
            }
        );
    }

    #[test]
    fn modes() {
        assert!((0..4).all(|l| AblationMode::Full.recurrent(l)));
        assert_eq!(
            (0..4)
                .filter(|&l| AblationMode::ConvlstmLast2.recurrent(l))
                .count(),
            2
        );
        assert_eq!(
            (0..4)
                .filter(|&l| AblationMode::ConvlstmLast1.recurrent(l))
                .count(),
            1
        );
        assert!(!AblationMode::NoAttention.attention());
        assert_eq!(
            "convlstm_last1".parse::<AblationMode>().unwrap(),
            AblationMode::ConvlstmLast1
        );
    }

    #[test]
    fn hash_tracks_architecture() {
        let a = ModelConfig::default();
        let b = ModelConfig { n: 10, ..a.clone() };
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), b.hash());
    }
}
