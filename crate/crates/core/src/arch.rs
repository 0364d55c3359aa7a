//! Layer-level description of the shared network.

use std::fmt::Write;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ops::conv_output_extent;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize, bias: bool },
    BatchNorm { channels: usize },
    Relu,
    MaxPool2,
    GlobalAvg,
    Dense { in_features: usize, out_features: usize },
}

impl LayerSpec {
    pub fn conv3x3(in_channels: usize, out_channels: usize) -> Self {
        LayerSpec::Conv { in_channels, out_channels, kernel: 3, stride: 1, pad: 1, bias: false }
    }
}

/// A validated feed-forward architecture: convolutional trunk, global pooling
/// and a single dense classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    name: String,
    input: [usize; 3],
    classes: usize,
    layers: Vec<LayerSpec>,
}

impl ArchSpec {
    pub fn new(name: &str, input: [usize; 3], classes: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        let arch = ArchSpec { name: name.to_string(), input, classes, layers };
        arch.validate()?;
        Ok(arch)
    }

    /// The default desk-scale trunk:
    /// conv(32)-BN-ReLU ×2, pool, conv(64)-BN-ReLU ×2, pool, conv(128)-BN-ReLU, global average, dense.
    pub fn ienet_mini(input: [usize; 3], classes: usize) -> Result<Self> {
        let mut layers = Vec::new();
        let mut prev = input[0];
        for (i, &width) in [32, 32, 64, 64, 128].iter().enumerate() {
            layers.push(LayerSpec::conv3x3(prev, width));
            layers.push(LayerSpec::BatchNorm { channels: width });
            layers.push(LayerSpec::Relu);
            if i == 1 || i == 3 {
                layers.push(LayerSpec::MaxPool2);
            }
            prev = width;
        }
        layers.push(LayerSpec::GlobalAvg);
        layers.push(LayerSpec::Dense { in_features: prev, out_features: classes });
        ArchSpec::new("ienet-mini", input, classes, layers)
    }

    /// Look up a named architecture.
    pub fn by_name(name: &str, input: [usize; 3], classes: usize) -> Result<Self> {
        match name {
            "ienet-mini" => ArchSpec::ienet_mini(input, classes),
            other => Err(Error::Arch(format!("unknown architecture {other:?}"))),
        }
    }

    fn validate(&self) -> Result<()> {
        let [mut channels, mut h, mut w] = self.input;
        if channels == 0 || h == 0 || w == 0 || self.classes == 0 {
            return Err(Error::Arch("input extents and class count must be positive".into()));
        }
        let mut flat = false;
        for (id, layer) in self.layers.iter().enumerate() {
            let fail = |msg: String| Err(Error::Arch(format!("layer {id}: {msg}")));
            if flat && !matches!(layer, LayerSpec::Dense { .. }) {
                return fail("only the classifier may follow global pooling".into());
            }
            match *layer {
                LayerSpec::Conv { in_channels, out_channels, kernel, stride, pad, .. } => {
                    if in_channels == 0 || out_channels == 0 {
                        return fail("zero-channel convolution".into());
                    }
                    if kernel % 2 == 0 {
                        return fail(format!("kernel {kernel} must be odd"));
                    }
                    if in_channels != channels {
                        return fail(format!("expects {in_channels} input channels, receives {channels}"));
                    }
                    h = conv_output_extent(h, kernel, stride, pad)?;
                    w = conv_output_extent(w, kernel, stride, pad)?;
                    channels = out_channels;
                }
                LayerSpec::BatchNorm { channels: c } => {
                    if c != channels {
                        return fail(format!("batch norm over {c} channels, receives {channels}"));
                    }
                }
                LayerSpec::Relu => {}
                LayerSpec::MaxPool2 => {
                    if h % 2 != 0 || w % 2 != 0 {
                        return fail(format!("max pooling needs even extents, got {h}x{w}"));
                    }
                    h /= 2;
                    w /= 2;
                }
                LayerSpec::GlobalAvg => {
                    flat = true;
                    h = 1;
                    w = 1;
                }
                LayerSpec::Dense { in_features, out_features } => {
                    if !flat {
                        return fail("classifier must follow global pooling".into());
                    }
                    if in_features != channels {
                        return fail(format!("classifier expects {in_features} features, receives {channels}"));
                    }
                    if out_features != self.classes {
                        return fail(format!("classifier emits {out_features} classes, arch declares {}", self.classes));
                    }
                    if id + 1 != self.layers.len() {
                        return fail("classifier must be the last layer".into());
                    }
                }
            }
        }
        match self.layers.last() {
            Some(LayerSpec::Dense { .. }) => Ok(()),
            _ => Err(Error::Arch("architecture must end with exactly one dense classifier".into())),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// `(layer_id, out_channels)` of every layer whose output channels are recombinable.
    pub fn recombinable_layers(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(id, l)| match *l {
                LayerSpec::Conv { out_channels, .. } => Some((id, out_channels)),
                _ => None,
            })
            .collect()
    }

    /// Layer ids of the batch-norm layers, in order.
    pub fn batchnorm_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::BatchNorm { .. }))
            .map(|(id, _)| id)
            .collect()
    }

    /// Canonical one-line-per-layer text used for hashing and checkpoint manifests.
    pub fn describe(&self) -> String {
        let mut s = format!(
            "{} input={}x{}x{} classes={}\n",
            self.name, self.input[0], self.input[1], self.input[2], self.classes
        );
        for layer in &self.layers {
            let _ = match *layer {
                LayerSpec::Conv { in_channels, out_channels, kernel, stride, pad, bias } => writeln!(
                    s,
                    "conv {in_channels}->{out_channels} k{kernel} s{stride} p{pad} bias={bias}"
                ),
                LayerSpec::BatchNorm { channels } => writeln!(s, "bn {channels}"),
                LayerSpec::Relu => writeln!(s, "relu"),
                LayerSpec::MaxPool2 => writeln!(s, "maxpool2"),
                LayerSpec::GlobalAvg => writeln!(s, "global_avg"),
                LayerSpec::Dense { in_features, out_features } => writeln!(s, "dense {in_features}->{out_features}"),
            };
        }
        s
    }

    /// First 16 hex digits of the SHA-256 of [`ArchSpec::describe`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.describe().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ienet_mini_layout() {
        let arch = ArchSpec::ienet_mini([1, 28, 28], 10).unwrap();
        let convs: Vec<usize> = arch.recombinable_layers().iter().map(|&(_, c)| c).collect();
        assert_eq!(convs, vec![32, 32, 64, 64, 128]);
        assert_eq!(arch.batchnorm_layers().len(), 5);
        assert!(ArchSpec::ienet_mini([3, 32, 32], 100).is_ok());
        // 30 -> 15 after the first pool, which the second pool cannot halve
        assert!(ArchSpec::ienet_mini([1, 30, 30], 10).is_err());
    }

    #[test]
    fn rejects_inconsistent_channels_and_zero_width() {
        let layers = vec![
            LayerSpec::conv3x3(1, 4),
            LayerSpec::BatchNorm { channels: 5 },
            LayerSpec::GlobalAvg,
            LayerSpec::Dense { in_features: 4, out_features: 2 },
        ];
        assert!(ArchSpec::new("bad", [1, 4, 4], 2, layers).is_err());
        let layers = vec![
            LayerSpec::conv3x3(1, 0),
            LayerSpec::GlobalAvg,
            LayerSpec::Dense { in_features: 0, out_features: 2 },
        ];
        assert!(ArchSpec::new("zero", [1, 4, 4], 2, layers).is_err());
    }

    #[test]
    fn hash_changes_with_layout() {
        let a = ArchSpec::ienet_mini([1, 28, 28], 10).unwrap();
        let b = ArchSpec::ienet_mini([1, 28, 28], 100).unwrap();
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
