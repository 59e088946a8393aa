//! Encoder/decoder dimensioning at a split point and the byte arithmetic of
//! transmitting its output.
//!
//! The encoder is `{CONV-tdBN-LIF}` with stride `(floor(h/h'), floor(w/w'))`;
//! the decoder is `{DECONV-tdBN-LIF}` with the same stride, center-cropped
//! back to the original extent when the transposed convolution overshoots.

use serde::{Deserialize, Serialize};

use crate::layers::{conv_out, deconv_out};
use crate::spike::packed_len;
use crate::{Error, FeatureShape, Result};

pub const KERNEL: usize = 3;

/// Bytes per element of the non-spiking baseline feature.
pub const BASELINE_ELEMENT_BYTES: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BottleneckConfig {
    pub in_shape: FeatureShape,
    pub out_shape: FeatureShape,
    /// `(sh, sw)`.
    pub stride: (usize, usize),
    pub kernel: (usize, usize),
    pub encoder_padding: (usize, usize),
    pub decoder_padding: (usize, usize),
    pub timesteps: usize,
}

impl BottleneckConfig {
    /// Extent of the decoder's transposed convolution before cropping.
    pub fn decoder_raw(&self) -> (usize, usize) {
        let (sh, sw) = self.stride;
        let (ph, pw) = self.decoder_padding;
        (
            deconv_out(self.out_shape.h, self.kernel.0, sh, ph).unwrap_or(0),
            deconv_out(self.out_shape.w, self.kernel.1, sw, pw).unwrap_or(0),
        )
    }

    /// Top-left offset of the center crop applied to the decoder output.
    pub fn crop_offset(&self) -> (usize, usize) {
        let (rh, rw) = self.decoder_raw();
        ((rh - self.in_shape.h) / 2, (rw - self.in_shape.w) / 2)
    }
}

fn encoder_padding(axis: &'static str, from: usize, to: usize, stride: usize) -> Result<usize> {
    (0..KERNEL)
        .find(|&p| conv_out(from, KERNEL, stride, p) == Some(to))
        .ok_or_else(|| Error::Bottleneck {
            axis,
            from,
            to,
            reason: format!("no padding in 0..{KERNEL} reaches it with stride {stride}"),
        })
}

fn decoder_padding(axis: &'static str, from: usize, to: usize, stride: usize) -> Result<usize> {
    (0..KERNEL)
        .rev()
        .find(|&p| deconv_out(to, KERNEL, stride, p).is_some_and(|n| n >= from))
        .ok_or_else(|| Error::Bottleneck {
            axis,
            from,
            to,
            reason: format!("transposed convolution with stride {stride} cannot restore it"),
        })
}

/// Dimensions the encoder/decoder pair mapping `in_shape` to `out_shape`.
pub fn make_bottleneck(
    in_shape: FeatureShape,
    out_shape: FeatureShape,
    timesteps: usize,
) -> Result<BottleneckConfig> {
    if timesteps == 0 {
        return Err(Error::OutOfRange("timesteps must be >= 1".into()));
    }
    let axes = [
        ("channels", in_shape.c, out_shape.c),
        ("height", in_shape.h, out_shape.h),
        ("width", in_shape.w, out_shape.w),
    ];
    for (axis, from, to) in axes {
        if to == 0 || to > from {
            return Err(Error::Bottleneck {
                axis,
                from,
                to,
                reason: "compressed extent must be in 1..=original".into(),
            });
        }
    }
    let sh = in_shape.h / out_shape.h;
    let sw = in_shape.w / out_shape.w;
    Ok(BottleneckConfig {
        in_shape,
        out_shape,
        stride: (sh, sw),
        kernel: (KERNEL, KERNEL),
        encoder_padding: (
            encoder_padding("height", in_shape.h, out_shape.h, sh)?,
            encoder_padding("width", in_shape.w, out_shape.w, sw)?,
        ),
        decoder_padding: (
            decoder_padding("height", in_shape.h, out_shape.h, sh)?,
            decoder_padding("width", in_shape.w, out_shape.w, sw)?,
        ),
        timesteps,
    })
}

/// Bit-packed payload of one sample: `ceil(c' * h' * w' * T / 8)`.
pub fn spike_payload_bytes(config: &BottleneckConfig) -> usize {
    packed_len(config.out_shape.numel() * config.timesteps)
}

/// Baseline payload with one byte per element: `c' * h' * w'`.
pub fn baseline_payload_bytes(config: &BottleneckConfig) -> usize {
    baseline_payload_bytes_with_width(config, BASELINE_ELEMENT_BYTES)
}

pub fn baseline_payload_bytes_with_width(config: &BottleneckConfig, element_bytes: usize) -> usize {
    config.out_shape.numel() * element_bytes
}

/// Element-count ratio `(c*h*w) / (c'*h'*w')` as an exact fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Nearest integer, halves rounded up.
    pub fn rounded(&self) -> u64 {
        (2 * self.num + self.den) / (2 * self.den)
    }
}

pub fn compression_ratio_exact(in_shape: FeatureShape, out_shape: FeatureShape) -> Ratio {
    Ratio {
        num: in_shape.numel() as u64,
        den: out_shape.numel() as u64,
    }
}

/// Rounded element ratio between the split feature and the encoder output.
pub fn compression_ratio(in_shape: FeatureShape, out_shape: FeatureShape) -> u64 {
    compression_ratio_exact(in_shape, out_shape).rounded()
}

/// One row of the compression tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmissionReport {
    pub split_point: usize,
    pub timesteps: usize,
    pub original: String,
    pub compressed: String,
    pub baseline_payload_bytes: usize,
    pub spike_payload_bytes: usize,
    pub compression_ratio: u64,
}

impl TransmissionReport {
    pub fn new(split_point: usize, config: &BottleneckConfig) -> Self {
        Self {
            split_point,
            timesteps: config.timesteps,
            original: config.in_shape.to_string(),
            compressed: config.out_shape.to_string(),
            baseline_payload_bytes: baseline_payload_bytes(config),
            spike_payload_bytes: spike_payload_bytes(config),
            compression_ratio: compression_ratio(config.in_shape, config.out_shape),
        }
    }
}
