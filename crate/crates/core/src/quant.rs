//! Scalar fake quantization and magnitude-direction decoupled vector
//! quantization (MDDQ).
//!
//! All grids are uniform and symmetric (zero point 0). Rounding is half away
//! from zero everywhere. Scalar fake quantization of x with step d is
//! `clamp(round(x / d), q_min, q_max) * d`; on the autodiff tape the same
//! expression is built from primitives, which yields the straight-through
//! gradient w.r.t. x and the learned-step-size (LSQ) gradient w.r.t. d.
//!
//! MDDQ quantizes a 3-vector channel h as `Q_r(|h|) * Q_d(h/|h|) /
//! |Q_d(h/|h|)|`: the magnitude on an unsigned learned grid, the direction
//! componentwise on a fixed grid covering [-1, 1], renormalized back to the
//! unit sphere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::geometry::standard_normal;
use crate::tape::{Tape, TensorId};
use crate::tensor::{Real, Tensor};

/// Step size assigned when a calibration stream is degenerate (all zero).
pub const DEGENERATE_SCALE: Real = 1e-8;

/// Below this norm a vector channel quantizes to exactly zero.
pub const ZERO_VECTOR_EPS: Real = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    PerTensor,
    PerOutputChannel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantParams {
    pub bits: u8,
    pub signed: bool,
    /// Per-tensor step size (for per-channel params, the first channel's).
    pub scale: Real,
    /// Always 0: every grid in this crate is symmetric.
    pub zero_point: i32,
    pub granularity: Granularity,
    /// One step size per output channel when `granularity` is per-channel.
    pub channel_scales: Vec<Real>,
}

fn check_bits(op: &'static str, bits: u8) -> Result<()> {
    if !(2..=8).contains(&bits) {
        return Err(CoreError::InvalidArgument {
            op,
            detail: format!("bits {} outside 2..=8", bits),
        });
    }
    Ok(())
}

impl QuantParams {
    pub fn per_tensor(bits: u8, signed: bool, scale: Real) -> Result<Self> {
        check_bits("QuantParams::per_tensor", bits)?;
        if !(scale > 0.0) {
            return Err(CoreError::InvalidArgument {
                op: "QuantParams::per_tensor",
                detail: format!("scale {} must be positive", scale),
            });
        }
        Ok(QuantParams {
            bits,
            signed,
            scale,
            zero_point: 0,
            granularity: Granularity::PerTensor,
            channel_scales: Vec::new(),
        })
    }

    pub fn per_channel(bits: u8, signed: bool, channel_scales: Vec<Real>) -> Result<Self> {
        check_bits("QuantParams::per_channel", bits)?;
        if channel_scales.is_empty() || channel_scales.iter().any(|&s| !(s > 0.0)) {
            return Err(CoreError::InvalidArgument {
                op: "QuantParams::per_channel",
                detail: "channel scales must be non-empty and positive".into(),
            });
        }
        Ok(QuantParams {
            bits,
            signed,
            scale: channel_scales[0],
            zero_point: 0,
            granularity: Granularity::PerOutputChannel,
            channel_scales,
        })
    }

    pub fn q_min(&self) -> i32 {
        if self.signed {
            -(1i32 << (self.bits - 1))
        } else {
            0
        }
    }

    pub fn q_max(&self) -> i32 {
        if self.signed {
            (1i32 << (self.bits - 1)) - 1
        } else {
            (1i32 << self.bits) - 1
        }
    }
}

/// Running-max calibration observer. Signed observers track max |x|, unsigned
/// observers track the largest value (negative-only or empty streams are
/// degenerate).
#[derive(Clone, Debug)]
pub struct Observer {
    bits: u8,
    signed: bool,
    max_seen: Real,
    saw_any: bool,
}

impl Observer {
    pub fn new(bits: u8, signed: bool) -> Result<Self> {
        check_bits("Observer::new", bits)?;
        Ok(Observer {
            bits,
            signed,
            max_seen: 0.0,
            saw_any: false,
        })
    }

    pub fn observe(&mut self, values: &[Real]) {
        for &v in values {
            let m = if self.signed { v.abs() } else { v };
            if m > self.max_seen {
                self.max_seen = m;
            }
            self.saw_any = true;
        }
    }

    pub fn is_degenerate(&self) -> bool {
        !self.saw_any || self.max_seen <= 0.0
    }

    pub fn calibrate(&self) -> QuantParams {
        let q_max = if self.signed {
            (1i32 << (self.bits - 1)) - 1
        } else {
            (1i32 << self.bits) - 1
        };
        let scale = if self.is_degenerate() {
            DEGENERATE_SCALE
        } else {
            self.max_seen / q_max as Real
        };
        QuantParams::per_tensor(self.bits, self.signed, scale).expect("valid by construction")
    }
}

/// One-shot calibration over a sample stream. Returns the parameters and a
/// degenerate-stream flag.
pub fn observe_calibrate(samples: &[&[Real]], bits: u8, signed: bool) -> Result<(QuantParams, bool)> {
    let mut obs = Observer::new(bits, signed)?;
    for s in samples {
        obs.observe(s);
    }
    Ok((obs.calibrate(), obs.is_degenerate()))
}

/// Per-output-channel symmetric weight calibration; channels are the columns
/// of the `[in, out]` matrix. Scales are rounded to f32 precision so the
/// fake-quant grid survives checkpoint serialization bitwise.
pub fn calibrate_weight_per_channel(w: &Tensor, bits: u8) -> Result<QuantParams> {
    let (rows, cols) = (w.rows(), w.cols());
    let q_max = ((1i32 << (bits - 1)) - 1) as Real;
    let mut scales = Vec::with_capacity(cols);
    for c in 0..cols {
        let mut max_abs: Real = 0.0;
        for r in 0..rows {
            max_abs = max_abs.max(w.at(r, c).abs());
        }
        let s = if max_abs > 0.0 { max_abs / q_max } else { DEGENERATE_SCALE };
        scales.push(s as f32 as Real);
    }
    QuantParams::per_channel(bits, true, scales)
}

fn fq1(x: Real, scale: Real, q_min: Real, q_max: Real) -> Real {
    (x / scale).round().clamp(q_min, q_max) * scale
}

/// Plain (non-tape) fake quantization with a per-tensor grid.
pub fn fake_quantize(values: &[Real], p: &QuantParams) -> Vec<Real> {
    let (lo, hi) = (p.q_min() as Real, p.q_max() as Real);
    values.iter().map(|&x| fq1(x, p.scale, lo, hi)).collect()
}

/// Plain per-output-channel fake quantization of an `[in, out]` weight matrix.
pub fn fake_quantize_per_channel(w: &Tensor, p: &QuantParams) -> Result<Tensor> {
    if p.granularity != Granularity::PerOutputChannel || p.channel_scales.len() != w.cols() {
        return Err(CoreError::InvalidArgument {
            op: "fake_quantize_per_channel",
            detail: format!(
                "{} channel scales for {} columns",
                p.channel_scales.len(),
                w.cols()
            ),
        });
    }
    let (lo, hi) = (p.q_min() as Real, p.q_max() as Real);
    let cols = w.cols();
    let data: Vec<Real> = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| fq1(x, p.channel_scales[i % cols], lo, hi))
        .collect();
    Tensor::new(w.shape().to_vec(), data)
}

/// Fake quantization composed on the tape. `scale` broadcasts against `x`
/// ([1,1] per-tensor or [1,C] per-output-channel), may be a trainable leaf,
/// and receives the LSQ gradient.
pub fn fake_quantize_on_tape(
    tape: &mut Tape,
    x: TensorId,
    scale: TensorId,
    q_min: i32,
    q_max: i32,
) -> Result<TensorId> {
    let v = tape.div(x, scale)?;
    let r = tape.ste_round(v);
    let c = tape.clamp(r, q_min as Real, q_max as Real);
    tape.mul(c, scale)
}

/// MDDQ parameters: learned unsigned magnitude grid plus a fixed direction
/// grid with step `1 / (2^(bits-1) - 1)`, which puts -1 and +1 exactly on
/// the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MddqParams {
    pub mag: QuantParams,
    pub dir_bits: u8,
}

impl MddqParams {
    pub fn new(mag: QuantParams, dir_bits: u8) -> Result<Self> {
        check_bits("MddqParams::new", dir_bits)?;
        if mag.signed {
            return Err(CoreError::InvalidArgument {
                op: "MddqParams::new",
                detail: "magnitude grid must be unsigned (norms are non-negative)".into(),
            });
        }
        Ok(MddqParams { mag, dir_bits })
    }

    pub fn dir_scale(&self) -> Real {
        1.0 / ((1i32 << (self.dir_bits - 1)) - 1) as Real
    }

    pub fn dir_q_min(&self) -> i32 {
        -(1i32 << (self.dir_bits - 1))
    }

    pub fn dir_q_max(&self) -> i32 {
        (1i32 << (self.dir_bits - 1)) - 1
    }
}

/// Norm with the squares summed largest first, so the value is bitwise
/// invariant under component permutation and negation.
fn canonical_norm(v: [Real; 3]) -> Real {
    let mut sq = [v[0] * v[0], v[1] * v[1], v[2] * v[2]];
    sq.sort_by(|a, b| b.partial_cmp(a).expect("finite squares"));
    (sq[0] + sq[1] + sq[2]).sqrt()
}

/// Magnitude-direction decoupled quantization of one 3-vector channel.
///
/// Near-zero inputs (norm < 1e-12) quantize to the zero vector. If the
/// quantized direction collapses (impossible for unit inputs at >= 2 bits,
/// kept as a defensive branch), the unquantized direction is used.
pub fn mddq_quantize(h: [Real; 3], p: &MddqParams) -> [Real; 3] {
    let r = canonical_norm(h);
    if r < ZERO_VECTOR_EPS {
        return [0.0; 3];
    }
    let hhat = [h[0] / r, h[1] / r, h[2] / r];
    let (dlo, dhi) = (p.dir_q_min() as Real, p.dir_q_max() as Real);
    let ds = p.dir_scale();
    let d = [
        fq1(hhat[0], ds, dlo, dhi),
        fq1(hhat[1], ds, dlo, dhi),
        fq1(hhat[2], ds, dlo, dhi),
    ];
    let rq = fq1(r, p.mag.scale, p.mag.q_min() as Real, p.mag.q_max() as Real);
    let nd = canonical_norm(d);
    if nd < ZERO_VECTOR_EPS {
        return [rq * hhat[0], rq * hhat[1], rq * hhat[2]];
    }
    let s = rq / nd;
    [s * d[0], s * d[1], s * d[2]]
}

/// Componentwise symmetric fake quantization of a 3-vector (the baseline MDDQ
/// is compared against). Small vectors can collapse to zero.
pub fn naive_vec_quantize(h: [Real; 3], p: &QuantParams) -> [Real; 3] {
    let (lo, hi) = (p.q_min() as Real, p.q_max() as Real);
    [
        fq1(h[0], p.scale, lo, hi),
        fq1(h[1], p.scale, lo, hi),
        fq1(h[2], p.scale, lo, hi),
    ]
}

/// MDDQ composed on the tape over an `[n, 3*C]` block-major vector feature
/// tensor (block k holds component k of all C channels). `mag_scale` is a
/// `[1,1]` leaf (trainable once calibrated); the direction grid is a fixed
/// constant. Gradients: straight-through across both roundings, exact through
/// the norms and the renormalization.
pub fn mddq_on_tape(
    tape: &mut Tape,
    h1: TensorId,
    channels: usize,
    mag_scale: TensorId,
    mag_bits: u8,
    dir_bits: u8,
) -> Result<TensorId> {
    check_bits("mddq_on_tape", mag_bits)?;
    check_bits("mddq_on_tape", dir_bits)?;
    let mag_q_max = (1i32 << mag_bits) - 1;
    let dir_scale = 1.0 / ((1i32 << (dir_bits - 1)) - 1) as Real;
    let dir_q_min = -(1i32 << (dir_bits - 1));
    let dir_q_max = (1i32 << (dir_bits - 1)) - 1;

    let norms = tape.block_norms(h1, channels)?;
    let mag_q = fake_quantize_on_tape(tape, norms, mag_scale, 0, mag_q_max)?;
    let inv_norms = tape.recip(norms);
    let dir = tape.block_scale(h1, inv_norms)?;
    let ds = tape.leaf(Tensor::scalar(dir_scale));
    let dir_q = fake_quantize_on_tape(tape, dir, ds, dir_q_min, dir_q_max)?;
    let dir_q_norms = tape.block_norms(dir_q, channels)?;
    let inv_dq = tape.recip(dir_q_norms);
    let factor = tape.mul(mag_q, inv_dq)?;
    tape.block_scale(dir_q, factor)
}

/// One row of the Monte-Carlo angular error comparison.
#[derive(Clone, Debug)]
pub struct AngularErrorRow {
    pub bits: u8,
    pub quantizer: &'static str,
    pub mean_angle_deg: Real,
    pub mean_cosine: Real,
}

fn direction_stats(h: [Real; 3], q: [Real; 3]) -> (Real, Real) {
    let nh = canonical_norm(h);
    let nq = canonical_norm(q);
    if nq < ZERO_VECTOR_EPS || nh < ZERO_VECTOR_EPS {
        // collapsed output: count as fully lost (90 degrees)
        return (0.0, 90.0);
    }
    let cos = ((h[0] * q[0] + h[1] * q[1] + h[2] * q[2]) / (nh * nq)).clamp(-1.0, 1.0);
    (cos, cos.acos().to_degrees())
}

/// Monte-Carlo comparison of MDDQ against componentwise quantization at each
/// bit width. Samples are 3-component standard-normal vectors; each quantizer
/// is calibrated on the sample stream itself (running max), the MDDQ
/// direction grid is fixed. Collapsed outputs score cosine 0 / angle 90.
pub fn angular_error_report(bits: &[u8], n_samples: usize, seed: u64) -> Result<Vec<AngularErrorRow>> {
    if n_samples == 0 && !bits.is_empty() {
        return Err(CoreError::InvalidArgument {
            op: "angular_error_report",
            detail: "n_samples must be positive".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<[Real; 3]> = (0..n_samples)
        .map(|_| [standard_normal(&mut rng), standard_normal(&mut rng), standard_normal(&mut rng)])
        .collect();

    let mut rows = Vec::new();
    for &b in bits {
        check_bits("angular_error_report", b)?;
        let mut mag_obs = Observer::new(b, false)?;
        let mut comp_obs = Observer::new(b, true)?;
        for h in &samples {
            mag_obs.observe(&[canonical_norm(*h)]);
            comp_obs.observe(h);
        }
        let mddq_params = MddqParams::new(mag_obs.calibrate(), b)?;
        let naive_params = comp_obs.calibrate();

        let mut acc = [(0.0, 0.0), (0.0, 0.0)]; // (cos, angle) sums: mddq, naive
        for h in &samples {
            let (c, a) = direction_stats(*h, mddq_quantize(*h, &mddq_params));
            acc[0].0 += c;
            acc[0].1 += a;
            let (c, a) = direction_stats(*h, naive_vec_quantize(*h, &naive_params));
            acc[1].0 += c;
            acc[1].1 += a;
        }
        let n = n_samples as Real;
        rows.push(AngularErrorRow {
            bits: b,
            quantizer: "mddq",
            mean_angle_deg: acc[0].1 / n,
            mean_cosine: acc[0].0 / n,
        });
        rows.push(AngularErrorRow {
            bits: b,
            quantizer: "naive",
            mean_angle_deg: acc[1].1 / n,
            mean_cosine: acc[1].0 / n,
        });
    }
    Ok(rows)
}
