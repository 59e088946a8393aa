//! Binary spike tensors, LIF neuron dynamics, static-image encoding and the
//! rectangular surrogate derivative.
//!
//! Bit layout of a packed [`SpikeTensor`]: elements are flattened in
//! `(T, B, C, H, W)` row-major order and element `k` is stored in byte
//! `k / 8` at bit `k % 8` (LSB first). Unused trailing bits are zero.

use crate::{Error, Real, Result, Shape5, Tensor};

/// Bit-packed binary activations.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SpikeTensor {
    shape: Shape5,
    bytes: Vec<u8>,
}

/// `ceil(n / 8)`: bytes needed to pack `n` binary elements.
pub fn packed_len(n: usize) -> usize {
    n.div_ceil(8)
}

impl SpikeTensor {
    pub fn zeros(shape: Shape5) -> Self {
        Self {
            shape,
            bytes: vec![0; packed_len(shape.numel())],
        }
    }

    pub fn from_bits(shape: Shape5, bits: &[bool]) -> Result<Self> {
        if bits.len() != shape.numel() {
            return Err(Error::Shape(format!(
                "{} bits do not fill shape {shape}",
                bits.len()
            )));
        }
        let mut out = Self::zeros(shape);
        for (k, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
            out.bytes[k >> 3] |= 1 << (k & 7);
        }
        Ok(out)
    }

    /// Packs a dense 0/1 tensor. Any other value is rejected.
    pub fn pack<F: Real>(spikes: &Tensor<F>) -> Result<Self> {
        let shape = spikes.shape();
        let mut bytes = vec![0u8; packed_len(shape.numel())];
        for (k, &v) in spikes.data().iter().enumerate() {
            if v == F::one() {
                bytes[k >> 3] |= 1 << (k & 7);
            } else if v != F::zero() {
                return Err(Error::NonBinary {
                    index: k,
                    value: v.as_f64(),
                });
            }
        }
        Ok(Self { shape, bytes })
    }

    /// Wraps an already packed payload, checking length and zero padding.
    pub fn from_packed(shape: Shape5, bytes: Vec<u8>) -> Result<Self> {
        let n = shape.numel();
        if bytes.len() != packed_len(n) {
            return Err(Error::Shape(format!(
                "{} payload bytes for shape {shape}, expected {}",
                bytes.len(),
                packed_len(n)
            )));
        }
        if n % 8 != 0 {
            let pad_mask = !((1u8 << (n % 8)) - 1);
            if bytes[bytes.len() - 1] & pad_mask != 0 {
                return Err(Error::OutOfRange("nonzero padding bits".into()));
            }
        }
        Ok(Self { shape, bytes })
    }

    pub fn unpack<F: Real>(&self) -> Tensor<F> {
        let data = (0..self.shape.numel())
            .map(|k| if self.get(k) { F::one() } else { F::zero() })
            .collect();
        Tensor::from_vec(self.shape, data).expect("shape matches payload")
    }

    pub fn to_bits(&self) -> Vec<bool> {
        (0..self.shape.numel()).map(|k| self.get(k)).collect()
    }

    pub fn get(&self, flat: usize) -> bool {
        self.bytes[flat >> 3] >> (flat & 7) & 1 == 1
    }

    pub fn shape(&self) -> Shape5 {
        self.shape
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    pub fn packed_bytes(&self) -> usize {
        self.bytes.len()
    }

    pub fn count_ones(&self) -> usize {
        self.bytes.iter().map(|b| b.count_ones() as usize).sum()
    }

    /// Fraction of elements that are 1.
    pub fn mean(&self) -> f64 {
        match self.shape.numel() {
            0 => 0.0,
            n => self.count_ones() as f64 / n as f64,
        }
    }
}

/// Leak and threshold of the iterative LIF neuron.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LifParams {
    pub tau_decay: f64,
    pub v_th: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        Self {
            tau_decay: 0.5,
            v_th: 1.0,
        }
    }
}

impl LifParams {
    pub fn new(tau_decay: f64, v_th: f64) -> Result<Self> {
        let p = Self { tau_decay, v_th };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau_decay) {
            return Err(Error::OutOfRange(format!(
                "tau_decay {} not in [0, 1]",
                self.tau_decay
            )));
        }
        if !(self.v_th > 0.0 && self.v_th.is_finite()) {
            return Err(Error::OutOfRange(format!("v_th {} must be > 0", self.v_th)));
        }
        Ok(())
    }
}

/// Membrane potentials and previous-step spikes of one LIF population.
#[derive(Debug, Clone, PartialEq)]
pub struct LifState<F> {
    /// `(1, B, C, H, W)`.
    pub v: Tensor<F>,
    pub last_spike: Vec<bool>,
}

impl<F: Real> LifState<F> {
    pub fn resting(b: usize, c: usize, h: usize, w: usize) -> Self {
        let shape = Shape5::new(1, b, c, h, w);
        Self {
            v: Tensor::zeros(shape),
            last_spike: vec![false; shape.numel()],
        }
    }
}

#[inline(always)]
fn integrate<F: Real>(v: F, fired: bool, input: F, tau: F) -> F {
    // Hard reset: a neuron that fired contributes no carried potential.
    let keep = if fired { F::zero() } else { F::one() };
    tau * v * keep + input
}

/// Advances one timestep. `input` is a `(1, B, C, H, W)` current slice.
pub fn lif_step<F: Real>(
    state: &LifState<F>,
    input: &Tensor<F>,
    params: &LifParams,
) -> Result<(LifState<F>, SpikeTensor)> {
    let shape = input.shape();
    if shape != state.v.shape() || shape.t != 1 {
        return Err(Error::Shape(format!(
            "LIF state {} vs input {shape}",
            state.v.shape()
        )));
    }
    if !input.is_finite() {
        return Err(Error::NonFinite("LIF input"));
    }
    let tau = F::lit(params.tau_decay);
    let v_th = F::lit(params.v_th);
    let mut v = Vec::with_capacity(shape.numel());
    let mut fired = Vec::with_capacity(shape.numel());
    for ((&v0, &o0), &x) in state.v.data().iter().zip(&state.last_spike).zip(input.data()) {
        let v1 = integrate(v0, o0, x, tau);
        v.push(v1);
        fired.push(v1 > v_th);
    }
    let spikes = SpikeTensor::from_bits(shape, &fired)?;
    Ok((
        LifState {
            v: Tensor::from_vec(shape, v)?,
            last_spike: fired,
        },
        spikes,
    ))
}

/// Spikes and (optionally) the membrane trace of a full LIF sequence.
#[derive(Debug, Clone)]
pub struct LifTrace<F> {
    pub spikes: Tensor<F>,
    pub membrane: Option<Tensor<F>>,
}

/// Runs LIF over every timestep of `input`, starting from rest.
///
/// Spikes are returned as a dense 0/1 tensor. The arithmetic is identical to
/// repeated [`lif_step`].
pub fn lif_run<F: Real>(input: &Tensor<F>, params: &LifParams, record: bool) -> LifTrace<F> {
    let shape = input.shape();
    let n = shape.step_len();
    let tau = F::lit(params.tau_decay);
    let v_th = F::lit(params.v_th);
    let mut v = vec![F::zero(); n];
    let mut fired = vec![false; n];
    let mut spikes = Tensor::zeros(shape);
    let mut membrane = record.then(|| Tensor::zeros(shape));
    for t in 0..shape.t {
        let x = input.step(t);
        let out = spikes.step_mut(t);
        for i in 0..n {
            let v1 = integrate(v[i], fired[i], x[i], tau);
            v[i] = v1;
            fired[i] = v1 > v_th;
            if fired[i] {
                out[i] = F::one();
            }
        }
        if let Some(m) = membrane.as_mut() {
            m.step_mut(t).copy_from_slice(&v);
        }
    }
    LifTrace { spikes, membrane }
}

/// Replicates a static `(1, B, C, H, W)` image with values in `[0, 1]`
/// along `timesteps` steps; the first convolution turns it into spikes.
pub fn encode_static<F: Real>(image: &Tensor<F>, timesteps: usize) -> Result<Tensor<F>> {
    let s = image.shape();
    if s.t != 1 {
        return Err(Error::Shape(format!("static image must have T=1, got {s}")));
    }
    if timesteps == 0 {
        return Err(Error::OutOfRange("timesteps must be >= 1".into()));
    }
    if let Some((i, v)) = image
        .data()
        .iter()
        .enumerate()
        .find(|(_, v)| !(**v >= F::zero() && **v <= F::one()))
    {
        return Err(Error::OutOfRange(format!(
            "pixel {i} = {v} outside [0, 1]"
        )));
    }
    let mut data = Vec::with_capacity(s.numel() * timesteps);
    for _ in 0..timesteps {
        data.extend_from_slice(image.data());
    }
    Tensor::from_vec(Shape5::new(timesteps, s.b, s.c, s.h, s.w), data)
}

/// Width of the rectangular surrogate window.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SurrogateParams {
    pub a: f64,
}

impl Default for SurrogateParams {
    fn default() -> Self {
        Self { a: 1.0 }
    }
}

impl SurrogateParams {
    pub fn new(a: f64) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::OutOfRange(format!("surrogate width {a} must be > 0")));
        }
        Ok(Self { a })
    }
}

/// Stand-in for d(spike)/d(membrane): `1/a` inside `|v - v_th| <= a/2`, else 0.
pub fn surrogate_grad<F: Real>(v: F, params: &LifParams, sg: &SurrogateParams) -> F {
    let a = F::lit(sg.a);
    if (v - F::lit(params.v_th)).abs() <= a / F::lit(2.0) {
        F::one() / a
    } else {
        F::zero()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn slice(vals: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(Shape5::new(1, 1, vals.len(), 1, 1), vals.to_vec()).unwrap()
    }

    #[test]
    fn lif_step_fires_above_threshold() {
        let p = LifParams::new(0.5, 1.0).unwrap();
        let mut s = LifState::resting(1, 1, 1, 1);
        s.v.data_mut()[0] = 0.8;
        let (next, spikes) = lif_step(&s, &slice(&[0.7]), &p).unwrap();
        assert!((next.v.data()[0] - 1.1).abs() < 1e-12);
        assert!(spikes.get(0));
        assert!(next.last_spike[0]);
    }

    #[test]
    fn lif_step_reset_zeroes_carry() {
        let p = LifParams::default();
        for v in [-3.0, 0.2, 7.5] {
            let mut s = LifState::resting(1, 1, 1, 1);
            s.v.data_mut()[0] = v;
            s.last_spike[0] = true;
            let (next, spikes) = lif_step(&s, &slice(&[0.0]), &p).unwrap();
            assert_eq!(next.v.data()[0], 0.0);
            assert!(!spikes.get(0));
        }
    }

    #[test]
    fn lif_tie_at_threshold_does_not_fire() {
        let p = LifParams::new(0.0, 1.0).unwrap();
        let s = LifState::resting(1, 1, 1, 1);
        let (_, spikes) = lif_step(&s, &slice(&[1.0]), &p).unwrap();
        assert!(!spikes.get(0));
    }

    #[test]
    fn lif_subthreshold_steady_state_never_spikes() {
        // Scalar oracle: v <- tau * v + x converges to x / (1 - tau) = 0.6.
        let (tau, x) = (0.5, 0.3);
        let mut v_oracle = 0.0f64;
        for _ in 0..20 {
            v_oracle = tau * v_oracle + x;
            assert!(v_oracle <= 1.0);
        }
        assert!((v_oracle - 0.6).abs() < 1e-5);

        let p = LifParams::new(tau, 1.0).unwrap();
        let mut s = LifState::resting(1, 1, 1, 1);
        for _ in 0..20 {
            let (next, spikes) = lif_step(&s, &slice(&[x]), &p).unwrap();
            assert_eq!(spikes.count_ones(), 0);
            s = next;
        }
        assert!((s.v.data()[0] - v_oracle).abs() < 1e-12);
    }

    #[test]
    fn lif_step_rejects_bad_input() {
        let p = LifParams::default();
        let s = LifState::<f64>::resting(1, 2, 1, 1);
        assert!(matches!(lif_step(&s, &slice(&[0.1]), &p), Err(Error::Shape(_))));
        assert!(matches!(
            lif_step(&s, &slice(&[0.1, f64::NAN]), &p),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn lif_run_matches_repeated_steps() {
        let p = LifParams::new(0.7, 0.9).unwrap();
        let vals: Vec<f64> = (0..4 * 6).map(|i| ((i * 37 % 11) as f64) / 7.0 - 0.3).collect();
        let input = Tensor::from_vec(Shape5::new(4, 1, 6, 1, 1), vals).unwrap();
        let trace = lif_run(&input, &p, true);
        let mut s = LifState::resting(1, 6, 1, 1);
        for t in 0..4 {
            let x = Tensor::from_vec(Shape5::new(1, 1, 6, 1, 1), input.step(t).to_vec()).unwrap();
            let (next, spikes) = lif_step(&s, &x, &p).unwrap();
            assert_eq!(next.v.data(), trace.membrane.as_ref().unwrap().step(t));
            let dense: Vec<f64> = spikes.unpack::<f64>().into_vec();
            assert_eq!(dense.as_slice(), trace.spikes.step(t));
            s = next;
        }
    }

    #[test]
    fn encode_static_replicates() {
        let img = Tensor::from_vec(Shape5::new(1, 1, 1, 2, 2), vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        let out = encode_static(&img, 2).unwrap();
        assert_eq!(out.shape(), Shape5::new(2, 1, 1, 2, 2));
        assert_eq!(out.step(0), img.data());
        assert_eq!(out.step(1), img.data());
        assert_eq!(encode_static(&img, 1).unwrap().data(), img.data());
        let zero = Tensor::<f32>::zeros(Shape5::new(1, 2, 3, 4, 4));
        assert!(encode_static(&zero, 4).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_static_rejects_out_of_range() {
        let img = Tensor::from_vec(Shape5::new(1, 1, 1, 1, 2), vec![0.5, 1.5]).unwrap();
        assert!(matches!(encode_static(&img, 2), Err(Error::OutOfRange(_))));
        let img = Tensor::from_vec(Shape5::new(1, 1, 1, 1, 1), vec![0.5]).unwrap();
        assert!(encode_static(&img, 0).is_err());
    }

    #[test]
    fn surrogate_window() {
        let p = LifParams::default();
        let one = SurrogateParams::new(1.0).unwrap();
        assert_eq!(surrogate_grad(1.0, &p, &one), 1.0);
        assert_eq!(surrogate_grad(2.0, &p, &one), 0.0);
        assert_eq!(surrogate_grad(0.0, &p, &one), 0.0);
        let two = SurrogateParams::new(2.0).unwrap();
        assert_eq!(surrogate_grad(1.9, &p, &two), 0.5);
        assert!(SurrogateParams::new(0.0).is_err());
    }

    #[test]
    fn surrogate_integrates_to_one() {
        let p = LifParams::default();
        for a in [0.25, 1.0, 3.0] {
            let sg = SurrogateParams::new(a).unwrap();
            let (lo, hi, n) = (-5.0, 7.0, 1_200_000);
            let dx = (hi - lo) / n as f64;
            let area: f64 = (0..n)
                .map(|i| surrogate_grad(lo + (i as f64 + 0.5) * dx, &p, &sg) * dx)
                .sum();
            assert!((area - 1.0).abs() < 1e-4, "a={a} area={area}");
        }
    }

    #[test]
    fn all_zero_pack() {
        let t = Tensor::<f32>::zeros(Shape5::new(2, 1, 8, 4, 4));
        let s = SpikeTensor::pack(&t).unwrap();
        assert_eq!(s.as_bytes(), &[0u8; 32][..]);
    }

    #[test]
    fn pack_layout_is_lsb_first() {
        let mut bits = vec![false; 10];
        bits[0] = true;
        bits[3] = true;
        bits[9] = true;
        let s = SpikeTensor::from_bits(Shape5::new(1, 1, 10, 1, 1), &bits).unwrap();
        assert_eq!(s.as_bytes(), &[0b0000_1001, 0b0000_0010]);
    }

    #[test]
    fn pack_rejects_non_binary() {
        let t = Tensor::from_vec(Shape5::new(1, 1, 3, 1, 1), vec![0.0f32, 1.0, 0.5]).unwrap();
        assert!(matches!(SpikeTensor::pack(&t), Err(Error::NonBinary { index: 2, .. })));
    }

    #[test]
    fn from_packed_rejects_dirty_padding() {
        let shape = Shape5::new(1, 1, 3, 1, 1);
        assert!(SpikeTensor::from_packed(shape, vec![0b0000_0101]).is_ok());
        assert!(SpikeTensor::from_packed(shape, vec![0b0000_1101]).is_err());
        assert!(SpikeTensor::from_packed(shape, vec![0, 0]).is_err());
    }

    fn shape_and_bits() -> impl Strategy<Value = (Shape5, Vec<bool>)> {
        (1..4usize, 1..3usize, 1..9usize, 1..6usize, 1..6usize).prop_flat_map(|(t, b, c, h, w)| {
            let s = Shape5::new(t, b, c, h, w);
            (Just(s), proptest::collection::vec(any::<bool>(), s.numel()))
        })
    }

    proptest! {
        #[test]
        fn pack_unpack_round_trip((shape, bits) in shape_and_bits()) {
            let s = SpikeTensor::from_bits(shape, &bits).unwrap();
            prop_assert_eq!(s.packed_bytes(), shape.numel().div_ceil(8));
            prop_assert_eq!(s.to_bits(), bits.clone());
            let dense = s.unpack::<f32>();
            let again = SpikeTensor::pack(&dense).unwrap();
            prop_assert_eq!(&again, &s);
            let raw = SpikeTensor::from_packed(shape, s.clone().into_bytes()).unwrap();
            prop_assert_eq!(raw, s);
        }

        #[test]
        fn reset_removes_prior_potential(tau in 0.0..=1.0f64, v in -10.0..10.0f64, x in -3.0..3.0f64) {
            let p = LifParams::new(tau, 1.0).unwrap();
            let mut s = LifState::resting(1, 1, 1, 1);
            s.v.data_mut()[0] = v;
            s.last_spike[0] = true;
            let (next, spikes) = lif_step(&s, &slice(&[x]), &p).unwrap();
            prop_assert_eq!(next.v.data()[0], x);
            prop_assert_eq!(spikes.get(0), x > 1.0);
        }

        #[test]
        fn surrogate_symmetric_nonnegative(d in 0.0..3.0f64, a in 0.1..4.0f64) {
            let p = LifParams::default();
            let sg = SurrogateParams::new(a).unwrap();
            let up = surrogate_grad(1.0 + d, &p, &sg);
            let down = surrogate_grad(1.0 - d, &p, &sg);
            prop_assert!(up >= 0.0);
            prop_assert_eq!(up, down);
        }
    }
}
