//! Instantiated spiking networks: weights for every block of an
//! [`ArchitectureSpec`], an optional bottleneck at one split point, and the
//! forward passes used for monolithic inference, split (edge / server)
//! inference, firing-rate recording and training.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{ArchitectureSpec, BlockKind, ConvLayerSpec, LayerSpec};
use crate::bottleneck::{make_bottleneck, BottleneckConfig};
use crate::layers::{BatchStats, Conv2d, ConvKind, Head, Tdbn};
use crate::spike::{encode_static, lif_run, LifParams, SpikeTensor};
use crate::{Error, FeatureShape, Real, Result, Shape5, Tensor};

/// `{CONV-tdBN-LIF}` (the LIF is applied by the caller's choice; shortcut
/// projections stop after tdBN).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit<F> {
    pub conv: Conv2d<F>,
    pub bn: Option<Tdbn<F>>,
    /// Center crop applied right after the convolution (decoder only).
    pub crop: Option<Crop>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop {
    pub top: usize,
    pub left: usize,
    pub h: usize,
    pub w: usize,
}

impl Crop {
    pub fn apply<F: Real>(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let s = x.shape();
        if self.top + self.h > s.h || self.left + self.w > s.w {
            return Err(Error::Shape(format!("crop {self:?} exceeds {s}")));
        }
        let out_shape = Shape5::new(s.t, s.b, s.c, self.h, self.w);
        let mut out = Tensor::zeros(out_shape);
        for t in 0..s.t {
            for b in 0..s.b {
                let src = x.frame(t, b);
                let dst = out.frame_mut(t, b);
                for c in 0..s.c {
                    for y in 0..self.h {
                        let from = (c * s.h + self.top + y) * s.w + self.left;
                        let to = (c * self.h + y) * self.w;
                        dst[to..to + self.w].copy_from_slice(&src[from..from + self.w]);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Adjoint of [`Crop::apply`]: zero-pads back to `full`.
    pub fn pad_back<F: Real>(&self, g: &Tensor<F>, full: Shape5) -> Tensor<F> {
        let mut out = Tensor::zeros(full);
        for t in 0..full.t {
            for b in 0..full.b {
                let src = g.frame(t, b);
                let dst = out.frame_mut(t, b);
                for c in 0..full.c {
                    for y in 0..self.h {
                        let to = (c * full.h + self.top + y) * full.w + self.left;
                        let from = (c * self.h + y) * self.w;
                        dst[to..to + self.w].copy_from_slice(&src[from..from + self.w]);
                    }
                }
            }
        }
        out
    }
}

/// Everything a backward pass needs from one unit's train-mode forward.
#[derive(Debug, Clone)]
pub struct UnitCache<F> {
    pub input: Tensor<F>,
    /// Convolution output after cropping, before tdBN.
    pub conv_out: Tensor<F>,
    /// Shape of the convolution output before cropping.
    pub raw_shape: Shape5,
    pub stats: Option<BatchStats<F>>,
    pub membrane: Option<Tensor<F>>,
    pub spikes: Option<Tensor<F>>,
}

impl<F: Real> ConvUnit<F> {
    fn from_spec<R: rand::Rng>(spec: &ConvLayerSpec, tdbn: bool, alpha: f64, lif: &LifParams, rng: &mut R) -> Result<Self> {
        let conv = Conv2d::kaiming(
            spec.kind,
            spec.in_channels,
            spec.out_channels,
            (spec.kernel, spec.kernel),
            (spec.stride, spec.stride),
            (spec.padding, spec.padding),
            false,
            rng,
        )?;
        Ok(Self {
            conv,
            bn: tdbn.then(|| Tdbn::new(spec.out_channels, alpha, lif.v_th)),
            crop: None,
        })
    }

    /// Convolution (+crop) then tdBN, without the LIF.
    fn current(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let mut z = self.conv.forward(x)?;
        if let Some(crop) = &self.crop {
            z = crop.apply(&z)?;
        }
        match &self.bn {
            Some(bn) => bn.forward_eval(&z),
            None => Ok(z),
        }
    }

    /// Inference forward. With `lif` the result is a 0/1 spike tensor,
    /// otherwise the normalized current.
    pub fn forward(&self, x: &Tensor<F>, residual: Option<&Tensor<F>>, lif: Option<&LifParams>) -> Result<Tensor<F>> {
        let mut u = self.current(x)?;
        if let Some(r) = residual {
            u.add_assign(r)?;
        }
        Ok(match lif {
            Some(p) => lif_run(&u, p, false).spikes,
            None => u,
        })
    }

    /// Train-mode forward with batch statistics; updates running statistics.
    pub fn forward_train(
        &mut self,
        x: &Tensor<F>,
        residual: Option<&Tensor<F>>,
        lif: Option<&LifParams>,
    ) -> Result<(Tensor<F>, UnitCache<F>)> {
        let raw = self.conv.forward(x)?;
        let raw_shape = raw.shape();
        let z = match &self.crop {
            Some(crop) => crop.apply(&raw)?,
            None => raw,
        };
        let (mut u, stats) = match self.bn.as_mut() {
            Some(bn) => {
                let (y, st) = bn.forward_train(&z)?;
                bn.update_running(&st);
                (y, Some(st))
            }
            None => (z.clone(), None),
        };
        if let Some(r) = residual {
            u.add_assign(r)?;
        }
        let mut cache = UnitCache {
            input: x.clone(),
            conv_out: z,
            raw_shape,
            stats,
            membrane: None,
            spikes: None,
        };
        let out = match lif {
            Some(p) => {
                let trace = lif_run(&u, p, true);
                cache.membrane = trace.membrane;
                cache.spikes = Some(trace.spikes.clone());
                trace.spikes
            }
            None => u,
        };
        Ok((out, cache))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block<F> {
    /// Stem or plain conv block.
    Unit(ConvUnit<F>),
    Residual {
        a: ConvUnit<F>,
        b: ConvUnit<F>,
        c: ConvUnit<F>,
        /// Projection; identity when `None`.
        shortcut: Option<ConvUnit<F>>,
    },
    Separable {
        depthwise: ConvUnit<F>,
        pointwise: ConvUnit<F>,
    },
}

#[derive(Debug, Clone)]
pub enum BlockCache<F> {
    Unit(UnitCache<F>),
    Residual {
        a: UnitCache<F>,
        b: UnitCache<F>,
        c: UnitCache<F>,
        shortcut: Option<UnitCache<F>>,
    },
    Separable {
        depthwise: UnitCache<F>,
        pointwise: UnitCache<F>,
    },
}

impl<F: Real> Block<F> {
    pub fn forward(&self, x: &Tensor<F>, lif: &LifParams) -> Result<Tensor<F>> {
        self.forward_inner(x, lif, &mut |_| {})
    }

    fn forward_inner(&self, x: &Tensor<F>, lif: &LifParams, record: &mut dyn FnMut(&Tensor<F>)) -> Result<Tensor<F>> {
        match self {
            Block::Unit(u) => {
                let o = u.forward(x, None, Some(lif))?;
                record(&o);
                Ok(o)
            }
            Block::Residual { a, b, c, shortcut } => {
                let oa = a.forward(x, None, Some(lif))?;
                record(&oa);
                let ob = b.forward(&oa, None, Some(lif))?;
                record(&ob);
                let skip = match shortcut {
                    Some(s) => s.forward(x, None, None)?,
                    None => x.clone(),
                };
                let oc = c.forward(&ob, Some(&skip), Some(lif))?;
                record(&oc);
                Ok(oc)
            }
            Block::Separable { depthwise, pointwise } => {
                let od = depthwise.forward(x, None, Some(lif))?;
                record(&od);
                let op = pointwise.forward(&od, None, Some(lif))?;
                record(&op);
                Ok(op)
            }
        }
    }

    pub fn forward_train(&mut self, x: &Tensor<F>, lif: &LifParams) -> Result<(Tensor<F>, BlockCache<F>)> {
        match self {
            Block::Unit(u) => {
                let (o, cache) = u.forward_train(x, None, Some(lif))?;
                Ok((o, BlockCache::Unit(cache)))
            }
            Block::Residual { a, b, c, shortcut } => {
                let (oa, ca) = a.forward_train(x, None, Some(lif))?;
                let (ob, cb) = b.forward_train(&oa, None, Some(lif))?;
                let (skip, cs) = match shortcut {
                    Some(s) => {
                        let (y, cache) = s.forward_train(x, None, None)?;
                        (y, Some(cache))
                    }
                    None => (x.clone(), None),
                };
                let (oc, cc) = c.forward_train(&ob, Some(&skip), Some(lif))?;
                Ok((
                    oc,
                    BlockCache::Residual {
                        a: ca,
                        b: cb,
                        c: cc,
                        shortcut: cs,
                    },
                ))
            }
            Block::Separable { depthwise, pointwise } => {
                let (od, cd) = depthwise.forward_train(x, None, Some(lif))?;
                let (op, cp) = pointwise.forward_train(&od, None, Some(lif))?;
                Ok((
                    op,
                    BlockCache::Separable {
                        depthwise: cd,
                        pointwise: cp,
                    },
                ))
            }
        }
    }

    /// Units with stable names, in forward order.
    pub fn units(&self) -> Vec<(&'static str, &ConvUnit<F>)> {
        match self {
            Block::Unit(u) => vec![("unit", u)],
            Block::Residual { a, b, c, shortcut } => {
                let mut v = vec![("a", a), ("b", b), ("c", c)];
                if let Some(s) = shortcut {
                    v.push(("shortcut", s));
                }
                v
            }
            Block::Separable { depthwise, pointwise } => vec![("depthwise", depthwise), ("pointwise", pointwise)],
        }
    }

    pub fn units_mut(&mut self) -> Vec<(&'static str, &mut ConvUnit<F>)> {
        match self {
            Block::Unit(u) => vec![("unit", u)],
            Block::Residual { a, b, c, shortcut } => {
                let mut v = vec![("a", a), ("b", b), ("c", c)];
                if let Some(s) = shortcut {
                    v.push(("shortcut", s));
                }
                v
            }
            Block::Separable { depthwise, pointwise } => vec![("depthwise", depthwise), ("pointwise", pointwise)],
        }
    }
}

/// Encoder/decoder pair at a split point.
#[derive(Debug, Clone, PartialEq)]
pub struct Bottleneck<F> {
    pub config: BottleneckConfig,
    pub encoder: ConvUnit<F>,
    pub decoder: ConvUnit<F>,
}

impl<F: Real> Bottleneck<F> {
    pub fn init(config: BottleneckConfig, alpha: f64, lif: &LifParams, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (i, o) = (config.in_shape, config.out_shape);
        let encoder = Conv2d::kaiming(
            ConvKind::Standard,
            i.c,
            o.c,
            config.kernel,
            config.stride,
            config.encoder_padding,
            false,
            &mut rng,
        )?;
        let decoder = Conv2d::kaiming(
            ConvKind::Transposed,
            o.c,
            i.c,
            config.kernel,
            config.stride,
            config.decoder_padding,
            false,
            &mut rng,
        )?;
        let (rh, rw) = config.decoder_raw();
        let (top, left) = config.crop_offset();
        let crop = (rh != i.h || rw != i.w).then_some(Crop {
            top,
            left,
            h: i.h,
            w: i.w,
        });
        Ok(Self {
            config,
            encoder: ConvUnit {
                conv: encoder,
                bn: Some(Tdbn::new(o.c, alpha, lif.v_th)),
                crop: None,
            },
            decoder: ConvUnit {
                conv: decoder,
                bn: Some(Tdbn::new(i.c, alpha, lif.v_th)),
                crop,
            },
        })
    }
}

/// Train-mode record of a full forward pass.
#[derive(Debug, Clone)]
pub struct Tape<F> {
    pub timesteps: usize,
    pub batch: usize,
    pub stem: UnitCache<F>,
    pub blocks: Vec<BlockCache<F>>,
    pub encoder: Option<UnitCache<F>>,
    pub decoder: Option<UnitCache<F>>,
    /// Spikes entering the head.
    pub head_input: Tensor<F>,
}

/// Spikes of one LIF population, tagged with the block that produced them
/// (0 = stem, k = k-th splittable block).
#[derive(Debug, Clone)]
pub struct LayerRecord {
    pub block: usize,
    pub spikes: SpikeTensor,
}

/// A spiking network with weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikingNetwork<F> {
    pub arch: ArchitectureSpec,
    pub timesteps: usize,
    pub stem: ConvUnit<F>,
    pub blocks: Vec<Block<F>>,
    pub head: Head<F>,
    /// Split index the bottleneck follows, and the bottleneck itself.
    pub bottleneck: Option<(usize, Bottleneck<F>)>,
}

impl<F: Real> SpikingNetwork<F> {
    /// Kaiming-initialized weights drawn from a ChaCha stream seeded with
    /// `seed`; tdBN running statistics start uninitialized.
    pub fn init(arch: &ArchitectureSpec, timesteps: usize, seed: u64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::OutOfRange("timesteps must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lif = arch.lif;
        let alpha = arch.tdbn_alpha;
        let unit_of = |layers: &[LayerSpec], rng: &mut ChaCha8Rng| -> Result<ConvUnit<F>> {
            let conv = layers
                .iter()
                .find_map(|l| match l {
                    LayerSpec::Conv(c) => Some(*c),
                    _ => None,
                })
                .ok_or_else(|| Error::Config("unit without convolution".into()))?;
            let tdbn = layers.iter().any(|l| matches!(l, LayerSpec::Tdbn { .. }));
            ConvUnit::from_spec(&conv, tdbn, alpha, &lif, rng)
        };
        let stem = unit_of(&arch.stem().layers, &mut rng)?;
        let mut blocks = Vec::with_capacity(arch.num_splits());
        for spec in arch.split_blocks() {
            let convs: Vec<&ConvLayerSpec> = spec.layers.iter().filter_map(|l| match l {
                LayerSpec::Conv(c) => Some(c),
                _ => None,
            }).collect();
            let block = match spec.kind {
                BlockKind::Conv => Block::Unit(unit_of(&spec.layers, &mut rng)?),
                BlockKind::Rb => Block::Residual {
                    a: ConvUnit::from_spec(convs[0], true, alpha, &lif, &mut rng)?,
                    b: ConvUnit::from_spec(convs[1], true, alpha, &lif, &mut rng)?,
                    c: ConvUnit::from_spec(convs[2], true, alpha, &lif, &mut rng)?,
                    shortcut: spec
                        .shortcut
                        .as_ref()
                        .map(|s| ConvUnit::from_spec(s, true, alpha, &lif, &mut rng))
                        .transpose()?,
                },
                BlockKind::Irb => Block::Separable {
                    depthwise: ConvUnit::from_spec(convs[0], true, alpha, &lif, &mut rng)?,
                    pointwise: ConvUnit::from_spec(convs[1], true, alpha, &lif, &mut rng)?,
                },
                BlockKind::Stem | BlockKind::Head => {
                    return Err(Error::Config("stem/head inside block list".into()))
                }
            };
            blocks.push(block);
        }
        let head = Head::uniform(arch.head().input_shape.c, arch.classes, &mut rng);
        Ok(Self {
            arch: arch.clone(),
            timesteps,
            stem,
            blocks,
            head,
            bottleneck: None,
        })
    }

    /// Inserts (or replaces) the bottleneck after block `split`, compressing
    /// to `out_shape`.
    pub fn insert_bottleneck(&mut self, split: usize, out_shape: FeatureShape, seed: u64) -> Result<&BottleneckConfig> {
        let in_shape = self.arch.split_shape(split)?;
        let config = make_bottleneck(in_shape, out_shape, self.timesteps)?;
        let bn = Bottleneck::init(config, self.arch.tdbn_alpha, &self.arch.lif, seed)?;
        self.bottleneck = Some((split, bn));
        Ok(&self.bottleneck.as_ref().expect("just inserted").1.config)
    }

    pub fn bottleneck_at(&self, split: usize) -> Option<&Bottleneck<F>> {
        self.bottleneck.as_ref().filter(|(s, _)| *s == split).map(|(_, b)| b)
    }

    pub fn lif(&self) -> &LifParams {
        &self.arch.lif
    }

    /// Shape of the tensor handed across the split for a batch of `batch`.
    pub fn transmitted_shape(&self, split: usize, batch: usize) -> Result<Shape5> {
        let f = match self.bottleneck_at(split) {
            Some(b) => b.config.out_shape,
            None => self.arch.split_shape(split)?,
        };
        Ok(Shape5::new(self.timesteps, batch, f.c, f.h, f.w))
    }

    fn check_image(&self, image: &Tensor<F>) -> Result<()> {
        let s = image.shape();
        if s.t != 1 || s.feature() != self.arch.input_shape {
            return Err(Error::Shape(format!(
                "{} expects (1, B, {}) images, got {s}",
                self.arch.name, self.arch.input_shape
            )));
        }
        Ok(())
    }

    fn encode(&self, image: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_image(image)?;
        encode_static(image, self.timesteps)
    }

    /// Edge side: stem, blocks `1..=split`, then the encoder if a bottleneck
    /// sits at `split`. Returns the binary tensor to transmit.
    pub fn forward_prefix(&self, image: &Tensor<F>, split: usize) -> Result<Tensor<F>> {
        self.arch.check_split(split)?;
        let lif = self.arch.lif;
        let mut x = self.stem.forward(&self.encode(image)?, None, Some(&lif))?;
        for block in &self.blocks[..split] {
            x = block.forward(&x, &lif)?;
        }
        if let Some(b) = self.bottleneck_at(split) {
            x = b.encoder.forward(&x, None, Some(&lif))?;
        }
        Ok(x)
    }

    /// Server side: decoder (if any), blocks `split+1..`, head. Returns
    /// `B x classes` logits.
    pub fn forward_suffix(&self, spikes: &Tensor<F>, split: usize) -> Result<Vec<F>> {
        self.arch.check_split(split)?;
        let want = self.transmitted_shape(split, spikes.shape().b)?;
        if spikes.shape() != want {
            return Err(Error::Shape(format!(
                "split {split} expects {want}, got {}",
                spikes.shape()
            )));
        }
        let lif = self.arch.lif;
        let mut x = match self.bottleneck_at(split) {
            Some(b) => b.decoder.forward(spikes, None, Some(&lif))?,
            None => spikes.clone(),
        };
        for block in &self.blocks[split..] {
            x = block.forward(&x, &lif)?;
        }
        self.head.forward(&x)
    }

    /// Monolithic inference through the whole network, bottleneck included.
    pub fn forward(&self, image: &Tensor<F>) -> Result<Vec<F>> {
        Ok(self.forward_recorded(image, false)?.0)
    }

    /// Monolithic inference that also returns every LIF population's
    /// spikes (bottleneck excluded) when `record` is set.
    pub fn forward_recorded(&self, image: &Tensor<F>, record: bool) -> Result<(Vec<F>, Vec<LayerRecord>)> {
        let lif = self.arch.lif;
        let mut records = Vec::new();
        let mut push = |block: usize, t: &Tensor<F>| {
            if record {
                records.push(LayerRecord {
                    block,
                    spikes: SpikeTensor::pack(t).expect("LIF output is binary"),
                });
            }
        };
        let mut x = self.stem.forward(&self.encode(image)?, None, Some(&lif))?;
        push(0, &x);
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward_inner(&x, &lif, &mut |t| push(i + 1, t))?;
            if let Some(b) = self.bottleneck_at(i + 1) {
                x = b.encoder.forward(&x, None, Some(&lif))?;
                x = b.decoder.forward(&x, None, Some(&lif))?;
            }
        }
        Ok((self.head.forward(&x)?, records))
    }

    /// Train-mode forward: batch statistics in every tdBN (running statistics
    /// updated), membrane traces recorded for backpropagation.
    pub fn forward_train(&mut self, image: &Tensor<F>) -> Result<(Vec<F>, Tape<F>)> {
        let input = self.encode(image)?;
        let lif = self.arch.lif;
        let (mut x, stem) = self.stem.forward_train(&input, None, Some(&lif))?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let (mut encoder, mut decoder) = (None, None);
        let split = self.bottleneck.as_ref().map(|(s, _)| *s);
        for i in 0..self.blocks.len() {
            let (y, cache) = self.blocks[i].forward_train(&x, &lif)?;
            blocks.push(cache);
            x = y;
            if split == Some(i + 1) {
                let (_, b) = self.bottleneck.as_mut().expect("split set");
                let (e, ce) = b.encoder.forward_train(&x, None, Some(&lif))?;
                let (d, cd) = b.decoder.forward_train(&e, None, Some(&lif))?;
                encoder = Some(ce);
                decoder = Some(cd);
                x = d;
            }
        }
        let logits = self.head.forward(&x)?;
        Ok((
            logits,
            Tape {
                timesteps: self.timesteps,
                batch: image.shape().b,
                stem,
                blocks,
                encoder,
                decoder,
                head_input: x,
            },
        ))
    }

    /// Runs train-mode forwards over `images` to populate the running
    /// statistics of every tdBN, leaving weights untouched.
    pub fn calibrate(&mut self, images: &Tensor<F>) -> Result<()> {
        self.forward_train(images).map(|_| ())
    }

    /// Populates only the bottleneck's running statistics; the rest of the
    /// network must already be calibrated.
    pub fn calibrate_bottleneck(&mut self, images: &Tensor<F>) -> Result<()> {
        let Some((split, _)) = self.bottleneck else {
            return Err(Error::Config("no bottleneck inserted".into()));
        };
        let lif = self.arch.lif;
        let mut x = self.stem.forward(&self.encode(images)?, None, Some(&lif))?;
        for block in &self.blocks[..split] {
            x = block.forward(&x, &lif)?;
        }
        let (_, b) = self.bottleneck.as_mut().expect("checked above");
        let (e, _) = b.encoder.forward_train(&x, None, Some(&lif))?;
        b.decoder.forward_train(&e, None, Some(&lif))?;
        Ok(())
    }

    /// All units with stable dotted names, in forward order.
    pub fn units(&self) -> Vec<(String, &ConvUnit<F>)> {
        let mut v = vec![("stem".to_string(), &self.stem)];
        for (i, block) in self.blocks.iter().enumerate() {
            for (name, u) in block.units() {
                v.push((format!("blocks.{}.{name}", i + 1), u));
            }
        }
        if let Some((_, b)) = &self.bottleneck {
            v.push(("bottleneck.encoder".into(), &b.encoder));
            v.push(("bottleneck.decoder".into(), &b.decoder));
        }
        v
    }

    pub fn units_mut(&mut self) -> Vec<(String, &mut ConvUnit<F>)> {
        let mut v = vec![("stem".to_string(), &mut self.stem)];
        for (i, block) in self.blocks.iter_mut().enumerate() {
            for (name, u) in block.units_mut() {
                v.push((format!("blocks.{}.{name}", i + 1), u));
            }
        }
        if let Some((_, b)) = &mut self.bottleneck {
            v.push(("bottleneck.encoder".into(), &mut b.encoder));
            v.push(("bottleneck.decoder".into(), &mut b.decoder));
        }
        v
    }

    /// Named tensors (trainable parameters and running statistics).
    pub fn named_tensors(&self) -> BTreeMap<String, Vec<F>> {
        let mut out = BTreeMap::new();
        for (name, u) in self.units() {
            out.insert(format!("{name}.conv.weight"), u.conv.weight.clone());
            if let Some(b) = &u.conv.bias {
                out.insert(format!("{name}.conv.bias"), b.clone());
            }
            if let Some(bn) = &u.bn {
                out.insert(format!("{name}.bn.lambda"), bn.lambda.clone());
                out.insert(format!("{name}.bn.beta"), bn.beta.clone());
                out.insert(format!("{name}.bn.alpha"), vec![bn.alpha]);
                out.insert(format!("{name}.bn.eps"), vec![bn.eps]);
                out.insert(format!("{name}.bn.momentum"), vec![bn.momentum]);
                if let Some(r) = &bn.running {
                    out.insert(format!("{name}.bn.running_mean"), r.mean.clone());
                    out.insert(format!("{name}.bn.running_var"), r.var.clone());
                }
            }
        }
        out.insert("head.weight".into(), self.head.weight.clone());
        out.insert("head.bias".into(), self.head.bias.clone());
        out
    }

    /// Assigns every named tensor; all trainable tensors must be present and
    /// correctly sized, and no unknown names are accepted.
    pub fn load_named_tensors(&mut self, mut tensors: BTreeMap<String, Vec<F>>) -> Result<()> {
        fn take<F>(m: &mut BTreeMap<String, Vec<F>>, name: &str, len: usize) -> Result<Vec<F>> {
            let v = m
                .remove(name)
                .ok_or_else(|| Error::Config(format!("missing tensor `{name}`")))?;
            if v.len() != len {
                return Err(Error::Shape(format!(
                    "tensor `{name}` has {} elements, expected {len}",
                    v.len()
                )));
            }
            Ok(v)
        }
        for (name, u) in self.units_mut() {
            u.conv.weight = take(&mut tensors, &format!("{name}.conv.weight"), u.conv.weight.len())?;
            if let Some(b) = u.conv.bias.as_mut() {
                *b = take(&mut tensors, &format!("{name}.conv.bias"), b.len())?;
            }
            if let Some(bn) = u.bn.as_mut() {
                let c = bn.channels();
                bn.lambda = take(&mut tensors, &format!("{name}.bn.lambda"), c)?;
                bn.beta = take(&mut tensors, &format!("{name}.bn.beta"), c)?;
                bn.alpha = take(&mut tensors, &format!("{name}.bn.alpha"), 1)?[0];
                bn.eps = take(&mut tensors, &format!("{name}.bn.eps"), 1)?[0];
                bn.momentum = take(&mut tensors, &format!("{name}.bn.momentum"), 1)?[0];
                let mean_key = format!("{name}.bn.running_mean");
                bn.running = if tensors.contains_key(&mean_key) {
                    Some(crate::layers::RunningStats {
                        mean: take(&mut tensors, &mean_key, c)?,
                        var: take(&mut tensors, &format!("{name}.bn.running_var"), c)?,
                    })
                } else {
                    None
                };
            }
        }
        let (w, b) = (self.head.weight.len(), self.head.bias.len());
        self.head.weight = take(&mut tensors, "head.weight", w)?;
        self.head.bias = take(&mut tensors, "head.bias", b)?;
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Config(format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }

    /// Number of trainable scalars.
    pub fn num_parameters(&self) -> usize {
        self.units()
            .iter()
            .map(|(_, u)| {
                u.conv.weight.len()
                    + u.conv.bias.as_ref().map_or(0, Vec::len)
                    + u.bn.as_ref().map_or(0, |b| 2 * b.channels())
            })
            .sum::<usize>()
            + self.head.weight.len()
            + self.head.bias.len()
    }

    /// Converts every weight to another element type.
    pub fn cast<G: Real>(&self) -> SpikingNetwork<G> {
        let tensors = self
            .named_tensors()
            .into_iter()
            .map(|(k, v)| (k, v.iter().map(|x| G::lit(x.as_f64())).collect()))
            .collect();
        let mut out = SpikingNetwork::<G>::init(&self.arch, self.timesteps, 0).expect("arch already validated");
        if let Some((split, b)) = &self.bottleneck {
            out.insert_bottleneck(*split, b.config.out_shape, 0).expect("config already validated");
        }
        out.load_named_tensors(tensors).expect("same structure");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::build_arch;
    use rand::Rng;

    fn image(arch: &ArchitectureSpec, batch: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = arch.input_shape;
        let shape = Shape5::new(1, batch, s.c, s.h, s.w);
        let data = (0..shape.numel()).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn eval_before_calibration_fails() {
        let arch = build_arch("toy").unwrap();
        let net = SpikingNetwork::<f32>::init(&arch, 2, 1).unwrap();
        assert!(matches!(net.forward(&image(&arch, 1, 2)), Err(Error::UninitializedStats)));
    }

    #[test]
    fn split_equals_monolithic_on_toy() {
        let arch = build_arch("toy").unwrap();
        let mut net = SpikingNetwork::<f32>::init(&arch, 2, 1).unwrap();
        net.calibrate(&image(&arch, 4, 3)).unwrap();
        let x = image(&arch, 1, 4);
        for split in 1..=arch.num_splits() {
            let mut with_bn = net.clone();
            let shape = arch.split_shape(split).unwrap();
            with_bn.insert_bottleneck(split, FeatureShape::new(shape.c / 2, shape.h, shape.w), 9).unwrap();
            with_bn.calibrate(&image(&arch, 4, 5)).unwrap();
            for n in [&net, &with_bn] {
                let mono = n.forward(&x).unwrap();
                let sent = n.forward_prefix(&x, split).unwrap();
                assert!(SpikeTensor::pack(&sent).is_ok());
                assert_eq!(sent.shape(), n.transmitted_shape(split, 1).unwrap());
                assert_eq!(n.forward_suffix(&sent, split).unwrap(), mono);
            }
        }
    }

    #[test]
    fn named_tensor_round_trip() {
        let arch = build_arch("toy").unwrap();
        let mut net = SpikingNetwork::<f32>::init(&arch, 2, 7).unwrap();
        net.insert_bottleneck(1, FeatureShape::new(4, 4, 4), 3).unwrap();
        net.calibrate(&image(&arch, 2, 8)).unwrap();
        let mut other = SpikingNetwork::<f32>::init(&arch, 2, 99).unwrap();
        other.insert_bottleneck(1, FeatureShape::new(4, 4, 4), 1).unwrap();
        other.load_named_tensors(net.named_tensors()).unwrap();
        assert_eq!(other, net);
        let mut missing = net.named_tensors();
        missing.remove("head.bias");
        assert!(other.load_named_tensors(missing).is_err());
    }

    #[test]
    fn suffix_rejects_wrong_shape() {
        let arch = build_arch("toy").unwrap();
        let mut net = SpikingNetwork::<f32>::init(&arch, 2, 1).unwrap();
        net.calibrate(&image(&arch, 2, 3)).unwrap();
        let bad = Tensor::zeros(Shape5::new(2, 1, 3, 4, 4));
        assert!(net.forward_suffix(&bad, 1).is_err());
        assert!(net.forward_prefix(&image(&arch, 1, 1), 0).is_err());
    }
}
