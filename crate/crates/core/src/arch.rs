//! Declarative network specifications.
//!
//! Architectures are data: a small TOML document lists the stem, the
//! splittable blocks and the classifier. Two specs ship with the crate
//! (`resnet50`, `mobilenetv1`) plus a `toy` network for training runs.
//! Loading expands block repeats and infers every layer's shape.

use std::path::Path;

use serde::Deserialize;

use crate::layers::{conv_out, ConvKind};
use crate::spike::LifParams;
use crate::{Error, FeatureShape, Result};

pub const SCHEMA_VERSION: u32 = 1;

const RESNET50: &str = include_str!("../data/resnet50.arch");
const MOBILENETV1: &str = include_str!("../data/mobilenetv1.arch");
const TOY: &str = include_str!("../data/toy.arch");

/// Names of the architectures shipped with the crate.
pub const BUILTIN: [&str; 3] = ["resnet50", "mobilenetv1", "toy"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Stem,
    /// Plain `{CONV-tdBN-LIF}` block.
    Conv,
    /// Residual block: three `{CONV-tdBN-LIF}` stages plus shortcut.
    Rb,
    /// Depthwise convolution followed by a pointwise convolution.
    Irb,
    Head,
}

/// Geometry of one convolution inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub kind: ConvKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub input: FeatureShape,
    pub output: FeatureShape,
}

impl ConvLayerSpec {
    fn new(
        kind: ConvKind,
        input: FeatureShape,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let side = |n| {
            conv_out(n, kernel, stride, padding)
                .filter(|&v| v >= 1)
                .ok_or_else(|| Error::Config(format!("kernel {kernel} does not fit {input}")))
        };
        Ok(Self {
            kind,
            in_channels: input.c,
            out_channels,
            kernel,
            stride,
            padding,
            input,
            output: FeatureShape::new(out_channels, side(input.h)?, side(input.w)?),
        })
    }

    /// `C_in/groups * kh * kw * C_out * H_out * W_out`.
    pub fn macs(&self) -> u64 {
        let per_out = match self.kind {
            ConvKind::Depthwise => 1,
            _ => self.in_channels as u64,
        };
        per_out * (self.kernel * self.kernel) as u64 * self.output.numel() as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv(ConvLayerSpec),
    Tdbn { channels: usize },
    Lif,
    AvgPool,
    Fc { in_features: usize, out_features: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub layers: Vec<LayerSpec>,
    /// Projection on the residual path; `None` with `has_shortcut` means identity.
    pub shortcut: Option<ConvLayerSpec>,
    pub has_shortcut: bool,
    pub input_shape: FeatureShape,
    pub output_shape: FeatureShape,
}

impl BlockSpec {
    pub fn convs(&self) -> impl Iterator<Item = &ConvLayerSpec> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv(c) => Some(c),
                _ => None,
            })
            .chain(self.shortcut.iter())
    }

    pub fn macs(&self) -> u64 {
        self.convs().map(ConvLayerSpec::macs).sum()
    }

    /// Number of LIF populations in the block.
    pub fn lif_layers(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, LayerSpec::Lif)).count()
    }

    pub fn is_splittable(&self) -> bool {
        matches!(self.kind, BlockKind::Conv | BlockKind::Rb | BlockKind::Irb)
    }
}

/// A fully expanded architecture with per-block shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureSpec {
    pub name: String,
    pub arch_id: u16,
    pub input_shape: FeatureShape,
    pub classes: usize,
    pub lif: LifParams,
    pub tdbn_alpha: f64,
    /// Stem, then the splittable blocks in order, then the head.
    pub blocks: Vec<BlockSpec>,
}

/// A candidate split location: after the `index`-th splittable block (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitPoint {
    pub index: usize,
    pub shape: FeatureShape,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchFile {
    schema_version: u32,
    name: String,
    arch_id: u16,
    input: [usize; 3],
    classes: usize,
    #[serde(default)]
    lif: Option<LifFile>,
    #[serde(default)]
    tdbn: Option<TdbnFile>,
    stem: StemFile,
    blocks: Vec<BlockFile>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LifFile {
    tau_decay: f64,
    v_th: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TdbnFile {
    alpha: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StemFile {
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    #[serde(default = "yes")]
    tdbn: bool,
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum BlockFile {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        #[serde(default = "one")]
        repeat: usize,
    },
    Rb {
        mid_channels: usize,
        out_channels: usize,
        stride: usize,
        #[serde(default = "one")]
        repeat: usize,
    },
    Irb {
        out_channels: usize,
        stride: usize,
        #[serde(default = "one")]
        repeat: usize,
    },
}

fn unit(conv: ConvLayerSpec, tdbn: bool) -> Vec<LayerSpec> {
    let mut layers = vec![LayerSpec::Conv(conv)];
    if tdbn {
        layers.push(LayerSpec::Tdbn {
            channels: conv.out_channels,
        });
    }
    layers.push(LayerSpec::Lif);
    layers
}

impl ArchitectureSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let file: ArchFile =
            toml::from_str(text).map_err(|e| Error::Config(format!("architecture file: {e}")))?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported architecture schema version {} (expected {SCHEMA_VERSION})",
                file.schema_version
            )));
        }
        let lif = match file.lif {
            Some(l) => LifParams::new(l.tau_decay, l.v_th)?,
            None => LifParams::default(),
        };
        let [c, h, w] = file.input;
        let input_shape = FeatureShape::new(c, h, w);
        if input_shape.numel() == 0 || file.classes == 0 {
            return Err(Error::Config("empty input shape or zero classes".into()));
        }

        let mut blocks = Vec::new();
        let s = &file.stem;
        let stem = ConvLayerSpec::new(
            ConvKind::Standard,
            input_shape,
            s.out_channels,
            s.kernel,
            s.stride,
            s.padding,
        )?;
        blocks.push(BlockSpec {
            kind: BlockKind::Stem,
            layers: unit(stem, s.tdbn),
            shortcut: None,
            has_shortcut: false,
            input_shape,
            output_shape: stem.output,
        });

        let mut cur = stem.output;
        for spec in &file.blocks {
            let repeat = match spec {
                BlockFile::Conv { repeat, .. }
                | BlockFile::Rb { repeat, .. }
                | BlockFile::Irb { repeat, .. } => *repeat,
            };
            for r in 0..repeat {
                let block = match *spec {
                    BlockFile::Conv {
                        out_channels,
                        kernel,
                        stride,
                        padding,
                        ..
                    } => {
                        let stride = if r == 0 { stride } else { 1 };
                        let conv =
                            ConvLayerSpec::new(ConvKind::Standard, cur, out_channels, kernel, stride, padding)?;
                        BlockSpec {
                            kind: BlockKind::Conv,
                            layers: unit(conv, true),
                            shortcut: None,
                            has_shortcut: false,
                            input_shape: cur,
                            output_shape: conv.output,
                        }
                    }
                    BlockFile::Rb {
                        mid_channels,
                        out_channels,
                        stride,
                        ..
                    } => {
                        let stride = if r == 0 { stride } else { 1 };
                        let a = ConvLayerSpec::new(ConvKind::Standard, cur, mid_channels, 1, 1, 0)?;
                        let b = ConvLayerSpec::new(ConvKind::Standard, a.output, mid_channels, 3, stride, 1)?;
                        let c = ConvLayerSpec::new(ConvKind::Standard, b.output, out_channels, 1, 1, 0)?;
                        let shortcut = (stride != 1 || cur.c != out_channels)
                            .then(|| ConvLayerSpec::new(ConvKind::Standard, cur, out_channels, 1, stride, 0))
                            .transpose()?;
                        let layers = [unit(a, true), unit(b, true), unit(c, true)].concat();
                        BlockSpec {
                            kind: BlockKind::Rb,
                            layers,
                            shortcut,
                            has_shortcut: true,
                            input_shape: cur,
                            output_shape: c.output,
                        }
                    }
                    BlockFile::Irb {
                        out_channels,
                        stride,
                        ..
                    } => {
                        let stride = if r == 0 { stride } else { 1 };
                        let dw = ConvLayerSpec::new(ConvKind::Depthwise, cur, cur.c, 3, stride, 1)?;
                        let pw = ConvLayerSpec::new(ConvKind::Standard, dw.output, out_channels, 1, 1, 0)?;
                        BlockSpec {
                            kind: BlockKind::Irb,
                            layers: [unit(dw, true), unit(pw, true)].concat(),
                            shortcut: None,
                            has_shortcut: false,
                            input_shape: cur,
                            output_shape: pw.output,
                        }
                    }
                };
                cur = block.output_shape;
                blocks.push(block);
            }
        }
        if blocks.len() < 2 {
            return Err(Error::Config("architecture has no splittable blocks".into()));
        }
        blocks.push(BlockSpec {
            kind: BlockKind::Head,
            layers: vec![
                LayerSpec::AvgPool,
                LayerSpec::Fc {
                    in_features: cur.c,
                    out_features: file.classes,
                },
            ],
            shortcut: None,
            has_shortcut: false,
            input_shape: cur,
            output_shape: FeatureShape::new(file.classes, 1, 1),
        });

        let alpha = file.tdbn.map_or(1.0, |t| t.alpha);
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("tdBN alpha {alpha} must be > 0")));
        }
        Ok(Self {
            name: file.name,
            arch_id: file.arch_id,
            input_shape,
            classes: file.classes,
            lif,
            tdbn_alpha: alpha,
            blocks,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// The stem block.
    pub fn stem(&self) -> &BlockSpec {
        &self.blocks[0]
    }

    /// Splittable blocks, in order (RB / IRB / plain conv).
    pub fn split_blocks(&self) -> &[BlockSpec] {
        &self.blocks[1..self.blocks.len() - 1]
    }

    pub fn head(&self) -> &BlockSpec {
        self.blocks.last().expect("head block")
    }

    /// Number of candidate split points `M`.
    pub fn num_splits(&self) -> usize {
        self.split_blocks().len()
    }

    pub fn check_split(&self, split: usize) -> Result<()> {
        if split == 0 || split > self.num_splits() {
            return Err(Error::SplitOutOfRange {
                split,
                max: self.num_splits(),
            });
        }
        Ok(())
    }

    /// Feature shape emitted after the `split`-th block.
    pub fn split_shape(&self, split: usize) -> Result<FeatureShape> {
        self.check_split(split)?;
        Ok(self.split_blocks()[split - 1].output_shape)
    }
}

/// Loads one of the shipped architectures by name.
pub fn build_arch(name: &str) -> Result<ArchitectureSpec> {
    let text = match name.to_ascii_lowercase().as_str() {
        "resnet50" => RESNET50,
        "mobilenetv1" => MOBILENETV1,
        "toy" => TOY,
        _ => return Err(Error::UnknownArch(name.to_string())),
    };
    ArchitectureSpec::from_toml(text)
}

/// MAC count of every convolution executed on the edge up to `split`:
/// the stem plus blocks `1..=split`, shortcut projections included.
pub fn prefix_flops(arch: &ArchitectureSpec, split: usize) -> Result<u64> {
    arch.check_split(split)?;
    Ok(arch.blocks[..=split].iter().map(BlockSpec::macs).sum())
}

/// One entry per splittable block with the feature shape leaving it.
pub fn enumerate_split_points(arch: &ArchitectureSpec) -> Vec<SplitPoint> {
    arch.split_blocks()
        .iter()
        .enumerate()
        .map(|(i, b)| SplitPoint {
            index: i + 1,
            shape: b.output_shape,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shapes(name: &str) -> Vec<String> {
        enumerate_split_points(&build_arch(name).unwrap())
            .iter()
            .map(|p| p.shape.to_string())
            .collect()
    }

    #[test]
    fn resnet50_shapes_match_tables() {
        let s = shapes("resnet50");
        assert_eq!(s.len(), 16);
        let mut want = vec!["256x32x32"; 3];
        want.extend(["512x16x16"; 4]);
        want.extend(["1024x8x8"; 6]);
        want.extend(["2048x4x4"; 3]);
        assert_eq!(s, want);
    }

    #[test]
    fn mobilenet_shapes_match_tables() {
        let s = shapes("mobilenetv1");
        assert_eq!(s.len(), 13);
        assert_eq!(s[0], "64x112x112");
        assert_eq!(&s[1..3], ["128x56x56"; 2]);
        assert_eq!(&s[3..5], ["256x28x28"; 2]);
        assert_eq!(&s[5..11], ["512x14x14"; 6]);
        assert_eq!(&s[11..], ["1024x7x7"; 2]);
    }

    #[test]
    fn block_structure() {
        let r = build_arch("resnet50").unwrap();
        for b in r.split_blocks() {
            assert_eq!(b.kind, BlockKind::Rb);
            assert!(b.has_shortcut);
            assert_eq!(b.lif_layers(), 3);
            assert!(matches!(b.layers.last(), Some(LayerSpec::Lif)));
        }
        let m = build_arch("mobilenetv1").unwrap();
        for b in m.split_blocks() {
            let kinds: Vec<ConvKind> = b.convs().map(|c| c.kind).collect();
            assert_eq!(kinds, [ConvKind::Depthwise, ConvKind::Standard]);
            assert!(matches!(b.layers.last(), Some(LayerSpec::Lif)));
        }
    }

    #[test]
    fn channels_double_when_resolution_halves() {
        let r = build_arch("resnet50").unwrap();
        let blocks = r.split_blocks();
        for pair in blocks.windows(2) {
            let (a, b) = (pair[0].output_shape, pair[1].output_shape);
            if b.h * 2 == a.h {
                assert_eq!(b.c, 2 * a.c, "{a} -> {b}");
            } else {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn prefix_flops_close_to_tables_and_increasing() {
        let r = build_arch("resnet50").unwrap();
        let g1 = prefix_flops(&r, 1).unwrap() as f64 / 1e9;
        let g16 = prefix_flops(&r, 16).unwrap() as f64 / 1e9;
        assert!((g1 - 0.08).abs() / 0.08 < 0.15, "{g1}");
        assert!((g16 - 1.30).abs() / 1.30 < 0.15, "{g16}");
        for arch in ["resnet50", "mobilenetv1", "toy"] {
            let a = build_arch(arch).unwrap();
            let f: Vec<u64> = (1..=a.num_splits()).map(|k| prefix_flops(&a, k).unwrap()).collect();
            assert!(f.windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn split_range_errors() {
        let r = build_arch("resnet50").unwrap();
        assert!(matches!(prefix_flops(&r, 0), Err(Error::SplitOutOfRange { .. })));
        assert!(matches!(prefix_flops(&r, 17), Err(Error::SplitOutOfRange { max: 16, .. })));
        assert!(matches!(build_arch("vgg16"), Err(Error::UnknownArch(_))));
    }

    #[test]
    fn rejects_bad_config() {
        let bad_version = RESNET50.replace("schema_version = 1", "schema_version = 9");
        assert!(ArchitectureSpec::from_toml(&bad_version).is_err());
        let unknown_key = TOY.replace("classes = 2", "classes = 2\nflavour = 1");
        assert!(ArchitectureSpec::from_toml(&unknown_key).is_err());
        let bad_kind = TOY.replace("kind = \"conv\"", "kind = \"lstm\"");
        assert!(ArchitectureSpec::from_toml(&bad_kind).is_err());
    }
}
