//! Spiking layer primitives: per-timestep convolutions (standard, depthwise,
//! transposed), threshold-dependent batch normalization, and the
//! pool + fully-connected head that averages logits over time.

use rand::Rng;

use crate::{Error, Real, Result, Shape5, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvKind {
    Standard,
    /// One filter per channel; `in_channels == out_channels == groups`.
    Depthwise,
    /// Transposed ("deconvolution"), used by the bottleneck decoder.
    Transposed,
}

/// Index arithmetic of a sliding window over one `(C, H, W)` frame.
///
/// For transposed convolutions the geometry describes the *adjoint* forward
/// convolution, mapping the transposed output back onto its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Geometry {
    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    #[inline]
    fn src(&self, o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        (o * stride + k).checked_sub(pad).filter(|&i| i < extent)
    }
}

/// Output extent of a strided window: `floor((n + 2p - k) / s) + 1`.
pub fn conv_out(n: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    if s == 0 {
        return None;
    }
    (n + 2 * p).checked_sub(k).map(|d| d / s + 1)
}

/// Output extent of a transposed convolution: `(n - 1) * s + k - 2p`.
pub fn deconv_out(n: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    ((n.checked_sub(1)?) * s + k).checked_sub(2 * p).filter(|&v| v > 0)
}

/// Unfolds `frame` (`C x H x W`) into `col` (`C*kh*kw x Ho*Wo`).
pub fn im2col<F: Real>(frame: &[F], g: &Geometry, col: &mut [F]) {
    let n = g.col_cols();
    debug_assert_eq!(col.len(), g.col_rows() * n);
    for c in 0..g.c {
        let plane = &frame[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    match g.src(oy, ki, g.sh, g.ph, g.h) {
                        None => out.fill(F::zero()),
                        Some(iy) => {
                            let src = &plane[iy * g.w..(iy + 1) * g.w];
                            for (ox, o) in out.iter_mut().enumerate() {
                                *o = match g.src(ox, kj, g.sw, g.pw, g.w) {
                                    Some(ix) => src[ix],
                                    None => F::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into `frame`.
pub fn col2im<F: Real>(col: &[F], g: &Geometry, frame: &mut [F]) {
    let n = g.col_cols();
    for c in 0..g.c {
        let plane = &mut frame[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let Some(iy) = g.src(oy, ki, g.sh, g.ph, g.h) else {
                        continue;
                    };
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in 0..g.wo {
                        if let Some(ix) = g.src(ox, kj, g.sw, g.pw, g.w) {
                            dst[ix] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// A convolution layer with its weights.
///
/// Weight layouts: standard `[out][in][kh][kw]`, depthwise `[c][kh][kw]`,
/// transposed `[in][out][kh][kw]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<F> {
    pub kind: ConvKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub weight: Vec<F>,
    pub bias: Option<Vec<F>>,
}

impl<F: Real> Conv2d<F> {
    /// Zero-initialized layer; fails on inconsistent geometry.
    pub fn zeros(
        kind: ConvKind,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        bias: bool,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel.0 == 0 || kernel.1 == 0 {
            return Err(Error::Config("convolution with zero extent".into()));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::Config("convolution stride must be >= 1".into()));
        }
        if kind == ConvKind::Depthwise && in_channels != out_channels {
            return Err(Error::Config(format!(
                "depthwise convolution needs in == out channels, got {in_channels} -> {out_channels}"
            )));
        }
        let mut conv = Self {
            kind,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Vec::new(),
            bias: bias.then(|| vec![F::zero(); out_channels]),
        };
        conv.weight = vec![F::zero(); conv.weight_len()];
        Ok(conv)
    }

    /// Kaiming-uniform (fan-in) initialization.
    #[allow(clippy::too_many_arguments)]
    pub fn kaiming<R: Rng>(
        kind: ConvKind,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut conv = Self::zeros(kind, in_channels, out_channels, kernel, stride, padding, bias)?;
        let bound = (6.0 / conv.fan_in() as f64).sqrt();
        for w in conv.weight.iter_mut() {
            *w = F::lit(rng.gen_range(-bound..bound));
        }
        let bias_bound = 1.0 / (conv.fan_in() as f64).sqrt();
        if let Some(b) = conv.bias.as_mut() {
            let bound = bias_bound;
            for v in b.iter_mut() {
                *v = F::lit(rng.gen_range(-bound..bound));
            }
        }
        Ok(conv)
    }

    pub fn fan_in(&self) -> usize {
        let k = self.kernel.0 * self.kernel.1;
        match self.kind {
            ConvKind::Standard | ConvKind::Transposed => self.in_channels * k,
            ConvKind::Depthwise => k,
        }
    }

    pub fn weight_len(&self) -> usize {
        let k = self.kernel.0 * self.kernel.1;
        match self.kind {
            ConvKind::Standard | ConvKind::Transposed => self.in_channels * self.out_channels * k,
            ConvKind::Depthwise => self.out_channels * k,
        }
    }

    /// Output spatial extent for an `h x w` input.
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        let dims = match self.kind {
            ConvKind::Transposed => deconv_out(h, kh, sh, ph).zip(deconv_out(w, kw, sw, pw)),
            _ => conv_out(h, kh, sh, ph).zip(conv_out(w, kw, sw, pw)),
        };
        dims.ok_or_else(|| {
            Error::Shape(format!(
                "{h}x{w} input too small for kernel {kh}x{kw} pad {ph}x{pw}"
            ))
        })
    }

    /// Window geometry for an `h x w` input frame.
    pub fn geometry(&self, h: usize, w: usize) -> Result<Geometry> {
        let (ho, wo) = self.out_hw(h, w)?;
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        Ok(match self.kind {
            ConvKind::Transposed => Geometry {
                c: self.out_channels,
                h: ho,
                w: wo,
                kh,
                kw,
                sh,
                sw,
                ph,
                pw,
                ho: h,
                wo: w,
            },
            ConvKind::Standard => Geometry {
                c: self.in_channels,
                h,
                w,
                kh,
                kw,
                sh,
                sw,
                ph,
                pw,
                ho,
                wo,
            },
            ConvKind::Depthwise => Geometry {
                c: 1,
                h,
                w,
                kh,
                kw,
                sh,
                sw,
                ph,
                pw,
                ho,
                wo,
            },
        })
    }

    /// Multiply-accumulate count for one frame of an `h x w` input.
    pub fn macs(&self, h: usize, w: usize) -> Result<u64> {
        let (ho, wo) = self.out_hw(h, w)?;
        let k = (self.kernel.0 * self.kernel.1) as u64;
        Ok(match self.kind {
            ConvKind::Standard => {
                self.in_channels as u64 * k * self.out_channels as u64 * (ho * wo) as u64
            }
            ConvKind::Depthwise => self.out_channels as u64 * k * (ho * wo) as u64,
            // Each input element scatters into k positions of every output channel.
            ConvKind::Transposed => {
                self.in_channels as u64 * k * self.out_channels as u64 * (h * w) as u64
            }
        })
    }

    /// `(T, B, C_in, H, W) -> (T, B, C_out, H', W')`, each frame independently.
    ///
    /// On a binary input each output is the sum of the weights at active
    /// positions, so the layer is accumulate-only in the spiking regime.
    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let s = x.shape();
        if s.c != self.in_channels {
            return Err(Error::Shape(format!(
                "convolution expects {} input channels, got {}",
                self.in_channels, s.c
            )));
        }
        let (ho, wo) = self.out_hw(s.h, s.w)?;
        let mut out = Tensor::zeros(Shape5::new(s.t, s.b, self.out_channels, ho, wo));
        let g = self.geometry(s.h, s.w)?;
        let mut col = vec![F::zero(); self.scratch_len(&g)];
        for t in 0..s.t {
            for b in 0..s.b {
                self.forward_frame(x.frame(t, b), &g, &mut col, out.frame_mut(t, b));
            }
        }
        Ok(out)
    }

    fn scratch_len(&self, g: &Geometry) -> usize {
        match self.kind {
            ConvKind::Standard if !self.is_pointwise() => g.col_rows() * g.col_cols(),
            ConvKind::Transposed => g.col_rows() * g.col_cols(),
            _ => 0,
        }
    }

    /// 1x1, stride 1, no padding: the input frame already is the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == (1, 1) && self.padding == (0, 0)
    }

    fn forward_frame(&self, frame: &[F], g: &Geometry, col: &mut [F], out: &mut [F]) {
        match self.kind {
            ConvKind::Standard => {
                let k = g.col_rows();
                let n = g.col_cols();
                let cols: &[F] = if self.is_pointwise() {
                    frame
                } else {
                    im2col(frame, g, col);
                    col
                };
                F::gemm(
                    self.out_channels,
                    k,
                    n,
                    F::one(),
                    &self.weight,
                    (k, 1),
                    cols,
                    (n, 1),
                    F::zero(),
                    out,
                    (n, 1),
                );
            }
            ConvKind::Transposed => {
                // col = W^T x, then fold the columns onto the output grid.
                let rows = g.col_rows();
                let n = g.col_cols();
                F::gemm(
                    rows,
                    self.in_channels,
                    n,
                    F::one(),
                    &self.weight,
                    (1, rows),
                    frame,
                    (n, 1),
                    F::zero(),
                    col,
                    (n, 1),
                );
                col2im(col, g, out);
            }
            ConvKind::Depthwise => depthwise_frame(&self.weight, self.out_channels, frame, g, out),
        }
        if let Some(bias) = &self.bias {
            let plane = out.len() / self.out_channels;
            for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
                chunk.iter_mut().for_each(|v| *v += b);
            }
        }
    }
}

fn depthwise_frame<F: Real>(weight: &[F], channels: usize, frame: &[F], g: &Geometry, out: &mut [F]) {
    let (pin, pout) = (g.h * g.w, g.ho * g.wo);
    for c in 0..channels {
        let src = &frame[c * pin..(c + 1) * pin];
        let dst = &mut out[c * pout..(c + 1) * pout];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let wv = weight[(c * g.kh + ki) * g.kw + kj];
                for oy in 0..g.ho {
                    let Some(iy) = g.src(oy, ki, g.sh, g.ph, g.h) else {
                        continue;
                    };
                    let row = &src[iy * g.w..(iy + 1) * g.w];
                    let orow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, o) in orow.iter_mut().enumerate() {
                        if let Some(ix) = g.src(ox, kj, g.sw, g.pw, g.w) {
                            *o += wv * row[ix];
                        }
                    }
                }
            }
        }
    }
}

/// Whether tdBN uses batch statistics (and updates running ones) or the
/// stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

/// Per-channel statistics of one batch over the `(T, B, H, W)` axes.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    /// Biased variance.
    pub var: Vec<F>,
}

/// Threshold-dependent batch normalization:
/// `lambda * alpha * v_th * (x - mean) / sqrt(var + eps) + beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tdbn<F> {
    pub lambda: Vec<F>,
    pub beta: Vec<F>,
    pub alpha: F,
    pub v_th: F,
    pub eps: F,
    pub momentum: F,
    pub running: Option<RunningStats<F>>,
}

impl<F: Real> Tdbn<F> {
    pub fn new(channels: usize, alpha: f64, v_th: f64) -> Self {
        Self {
            lambda: vec![F::one(); channels],
            beta: vec![F::zero(); channels],
            alpha: F::lit(alpha),
            v_th: F::lit(v_th),
            eps: F::lit(1e-5),
            momentum: F::lit(0.1),
            running: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.lambda.len()
    }

    fn check(&self, x: &Tensor<F>) -> Result<()> {
        if x.shape().c != self.channels() {
            return Err(Error::Shape(format!(
                "tdBN over {} channels got input {}",
                self.channels(),
                x.shape()
            )));
        }
        Ok(())
    }

    /// Joint `(T, B, H, W)` statistics per channel, accumulated in `f64`.
    pub fn batch_stats(&self, x: &Tensor<F>) -> Result<BatchStats<F>> {
        self.check(x)?;
        let s = x.shape();
        let plane = s.plane();
        let count = (s.t * s.b * plane) as f64;
        let mut sum = vec![0.0f64; s.c];
        let mut sq = vec![0.0f64; s.c];
        for t in 0..s.t {
            for b in 0..s.b {
                for (c, chunk) in x.frame(t, b).chunks(plane).enumerate() {
                    for &v in chunk {
                        let v = v.as_f64();
                        sum[c] += v;
                        sq[c] += v * v;
                    }
                }
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        // Second pass for the variance; the naive E[x^2] - E[x]^2 cancels badly.
        let mut var = vec![0.0f64; s.c];
        for t in 0..s.t {
            for b in 0..s.b {
                for (c, chunk) in x.frame(t, b).chunks(plane).enumerate() {
                    for &v in chunk {
                        let d = v.as_f64() - mean[c];
                        var[c] += d * d;
                    }
                }
            }
        }
        Ok(BatchStats {
            mean: mean.iter().map(|&m| F::lit(m)).collect(),
            var: var.iter().map(|&v| F::lit(v / count)).collect(),
        })
    }

    fn normalize(&self, x: &Tensor<F>, mean: &[F], var: &[F]) -> Tensor<F> {
        let s = x.shape();
        let plane = s.plane();
        let scale: Vec<F> = (0..s.c)
            .map(|c| self.lambda[c] * self.alpha * self.v_th / (var[c] + self.eps).sqrt())
            .collect();
        let mut out = x.clone();
        for t in 0..s.t {
            for b in 0..s.b {
                for (c, chunk) in out.frame_mut(t, b).chunks_mut(plane).enumerate() {
                    for v in chunk.iter_mut() {
                        *v = scale[c] * (*v - mean[c]) + self.beta[c];
                    }
                }
            }
        }
        out
    }

    /// Train-mode normalization with batch statistics, without touching the
    /// running statistics.
    pub fn forward_train(&self, x: &Tensor<F>) -> Result<(Tensor<F>, BatchStats<F>)> {
        let stats = self.batch_stats(x)?;
        Ok((self.normalize(x, &stats.mean, &stats.var), stats))
    }

    pub fn forward_eval(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.check(x)?;
        let r = self.running.as_ref().ok_or(Error::UninitializedStats)?;
        Ok(self.normalize(x, &r.mean, &r.var))
    }

    /// Exponential moving average with `momentum`; the first observed batch
    /// initializes the running statistics directly.
    pub fn update_running(&mut self, stats: &BatchStats<F>) {
        match self.running.as_mut() {
            None => {
                self.running = Some(RunningStats {
                    mean: stats.mean.clone(),
                    var: stats.var.clone(),
                })
            }
            Some(r) => {
                let m = self.momentum;
                let keep = F::one() - m;
                for c in 0..stats.mean.len() {
                    r.mean[c] = keep * r.mean[c] + m * stats.mean[c];
                    r.var[c] = keep * r.var[c] + m * stats.var[c];
                }
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor<F>, mode: BnMode) -> Result<Tensor<F>> {
        match mode {
            BnMode::Train => {
                let (y, stats) = self.forward_train(x)?;
                self.update_running(&stats);
                Ok(y)
            }
            BnMode::Eval => self.forward_eval(x),
        }
    }
}

/// Spatial average pool and fully connected classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<F> {
    pub in_features: usize,
    pub n_classes: usize,
    /// `[class][feature]`.
    pub weight: Vec<F>,
    pub bias: Vec<F>,
}

impl<F: Real> Head<F> {
    pub fn zeros(in_features: usize, n_classes: usize) -> Self {
        Self {
            in_features,
            n_classes,
            weight: vec![F::zero(); in_features * n_classes],
            bias: vec![F::zero(); n_classes],
        }
    }

    pub fn uniform<R: Rng>(in_features: usize, n_classes: usize, rng: &mut R) -> Self {
        let mut head = Self::zeros(in_features, n_classes);
        let bound = 1.0 / (in_features as f64).sqrt();
        for w in head.weight.iter_mut().chain(head.bias.iter_mut()) {
            *w = F::lit(rng.gen_range(-bound..bound));
        }
        head
    }

    /// Per-timestep spatial means, `[t][b][c]` flattened.
    pub fn pool(&self, spikes: &Tensor<F>) -> Result<Vec<F>> {
        let s = spikes.shape();
        if s.c != self.in_features {
            return Err(Error::Shape(format!(
                "head expects {} channels, got {s}",
                self.in_features
            )));
        }
        let plane = s.plane();
        let inv = F::one() / F::lit(plane as f64);
        let mut pooled = Vec::with_capacity(s.t * s.b * s.c);
        for t in 0..s.t {
            for b in 0..s.b {
                for chunk in spikes.frame(t, b).chunks(plane) {
                    pooled.push(chunk.iter().copied().sum::<F>() * inv);
                }
            }
        }
        Ok(pooled)
    }

    /// Logits of one pooled feature vector.
    pub fn fc(&self, features: &[F]) -> Vec<F> {
        (0..self.n_classes)
            .map(|k| {
                let row = &self.weight[k * self.in_features..(k + 1) * self.in_features];
                row.iter().zip(features).map(|(&w, &x)| w * x).sum::<F>() + self.bias[k]
            })
            .collect()
    }

    /// `(T, B, C, H, W)` spikes to `B x n_classes` logits, averaged over time.
    pub fn forward(&self, spikes: &Tensor<F>) -> Result<Vec<F>> {
        let s = spikes.shape();
        let pooled = self.pool(spikes)?;
        let mut logits = vec![F::zero(); s.b * self.n_classes];
        for t in 0..s.t {
            for b in 0..s.b {
                let base = (t * s.b + b) * s.c;
                let step = self.fc(&pooled[base..base + s.c]);
                for (acc, v) in logits[b * self.n_classes..].iter_mut().zip(step) {
                    *acc += v;
                }
            }
        }
        let steps = F::lit(s.t as f64);
        logits.iter_mut().for_each(|v| *v /= steps);
        Ok(logits)
    }
}

/// Temporal aggregation head applied to the final block's spikes.
pub fn avgpool_and_fc<F: Real>(spikes: &Tensor<F>, head: &Head<F>) -> Result<Vec<F>> {
    head.forward(spikes)
}
