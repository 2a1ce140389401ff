//! Integer inference: conversion of trained fake-quant models into real
//! int8/int4 kernels with 32-bit accumulation, plus the asymptotic cost
//! model, memory accounting, and latency benchmarking.
//!
//! The integer forward mirrors the float simulation site for site. Every
//! operation between quantized linear layers (attention, gating, residuals,
//! MDDQ renormalization) runs through the same tape ops as the simulation,
//! so the only divergence is the rounding inside each integer kernel:
//! 32-bit accumulate then one float requantization multiply, versus the
//! simulation's float dot product. That difference is bounded by one output
//! step per element and is what the paired-path tests measure.

use std::collections::BTreeMap;
use std::rc::Rc;
use std::time::Instant;

use crate::checkpoint::{
    config_echo, config_from_echo, load_model, save_model, Checkpoint, CkptTensor, Payload,
    FORMAT_VERSION,
};
use crate::error::{CoreError, Result};
use crate::geometry::MolGraph;
use crate::model::{
    act_scale_name, attach_quantizers, attention_weights, edge_inputs, mag_scale_name, Model,
    ModelConfig, Normalizer, QuantScheme, SitePlan, LAYER_LINEARS,
};
use crate::quant::{calibrate_weight_per_channel, QuantParams};
use crate::tape::{Tape, TensorId};
use crate::tensor::{Real, Tensor};

/// Integer activation matrix. Values live on an 8-bit grid (signed or
/// unsigned); i32 storage covers both ranges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntMat {
    pub rows: usize,
    pub cols: usize,
    pub v: Vec<i32>,
}

pub fn act_grid(bits: u8, signed: bool) -> (i32, i32) {
    if signed {
        (-(1i32 << (bits - 1)), (1i32 << (bits - 1)) - 1)
    } else {
        (0, (1i32 << bits) - 1)
    }
}

/// Quantize onto an activation grid. Identical arithmetic to the fake-quant
/// simulation (divide, round half away from zero, clamp), so dequantizing
/// reproduces the simulated values bitwise.
pub fn quantize_mat(t: &Tensor, scale: Real, bits: u8, signed: bool) -> IntMat {
    let (lo, hi) = act_grid(bits, signed);
    let (lo, hi) = (lo as Real, hi as Real);
    IntMat {
        rows: t.rows(),
        cols: t.cols(),
        v: t
            .data()
            .iter()
            .map(|&x| (x / scale).round().clamp(lo, hi) as i32)
            .collect(),
    }
}

pub fn dequantize_mat(x: &IntMat, scale: Real) -> Result<Tensor> {
    Tensor::new(
        vec![x.rows, x.cols],
        x.v.iter().map(|&q| q as Real * scale).collect(),
    )
}

fn gather_int_rows(x: &IntMat, idx: &[usize]) -> IntMat {
    let mut v = Vec::with_capacity(idx.len() * x.cols);
    for &i in idx {
        v.extend_from_slice(&x.v[i * x.cols..(i + 1) * x.cols]);
    }
    IntMat {
        rows: idx.len(),
        cols: x.cols,
        v,
    }
}

/// One integer linear kernel: int8/int4 weights on per-output-channel grids,
/// bias folded onto the accumulator grid, requantization back to the 8-bit
/// output activation grid.
#[derive(Clone, Debug)]
pub struct QLinear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `[in_dim, out_dim]` row-major integer weights.
    pub w_int: Vec<i8>,
    pub w_scales: Vec<Real>,
    pub in_scale: Real,
    pub out_scale: Real,
    pub weight_bits: u8,
    pub out_q_min: i32,
    pub out_q_max: i32,
    /// Raw float bias (kept for serialization); empty when the layer has none.
    pub bias: Vec<Real>,
    /// Bias on the accumulator grid: round(b / (in_scale * w_scale)).
    pub bias_int: Vec<i32>,
    /// Requantization multipliers in_scale * w_scale / out_scale, per channel.
    pub multipliers: Vec<Real>,
}

const MAX_QLINEAR_DIM: usize = 4096;

impl QLinear {
    pub fn from_parts(
        w_int: Vec<i8>,
        in_dim: usize,
        out_dim: usize,
        w_scales: Vec<Real>,
        in_scale: Real,
        out_scale: Real,
        weight_bits: u8,
        bias: Vec<Real>,
    ) -> Result<Self> {
        let fail = |detail: String| CoreError::InvalidArgument {
            op: "QLinear::from_parts",
            detail,
        };
        if w_int.len() != in_dim * out_dim || w_scales.len() != out_dim {
            return Err(fail(format!(
                "{} weights / {} scales for dims {in_dim}x{out_dim}",
                w_int.len(),
                w_scales.len()
            )));
        }
        if in_dim > MAX_QLINEAR_DIM || out_dim > MAX_QLINEAR_DIM {
            return Err(fail(format!(
                "dims {in_dim}x{out_dim} exceed the {MAX_QLINEAR_DIM} accumulator safety bound"
            )));
        }
        if !bias.is_empty() && bias.len() != out_dim {
            return Err(fail(format!("{} bias entries for {out_dim} outputs", bias.len())));
        }
        let mut bias_int = vec![0i32; out_dim];
        let mut multipliers = Vec::with_capacity(out_dim);
        for c in 0..out_dim {
            let m = in_scale * w_scales[c] / out_scale;
            if !(m.is_finite() && m > 0.0) {
                return Err(fail(format!("requantization multiplier {m} for channel {c}")));
            }
            multipliers.push(m);
            if !bias.is_empty() {
                let q = (bias[c] / (in_scale * w_scales[c])).round();
                // headroom so accumulator + bias stays far from i32 limits
                if !q.is_finite() || q.abs() > 2e8 {
                    return Err(fail(format!("folded bias {q} overflows channel {c}")));
                }
                bias_int[c] = q as i32;
            }
        }
        // worst case |acc| <= in_dim * 256 * 127 + |bias|; guaranteed < 2^31
        let worst = in_dim as i64 * 256 * 127 + 2e8 as i64;
        assert!(worst < i64::from(i32::MAX), "accumulator bound violated");
        Ok(QLinear {
            in_dim,
            out_dim,
            w_int,
            w_scales,
            in_scale,
            out_scale,
            weight_bits,
            out_q_min: -(1i32 << 7),
            out_q_max: (1i32 << 7) - 1,
            bias,
            bias_int,
            multipliers,
        })
    }

    /// Build from float weights by rounding onto the per-channel grid the
    /// fake-quant simulation uses.
    pub fn from_float(
        w: &Tensor,
        weight_bits: u8,
        in_scale: Real,
        out_scale: Real,
        bias: Option<&Tensor>,
    ) -> Result<Self> {
        let p = calibrate_weight_per_channel(w, weight_bits)?;
        let (lo, hi) = (p.q_min() as Real, p.q_max() as Real);
        let cols = w.cols();
        let w_int: Vec<i8> = w
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| (x / p.channel_scales[i % cols]).round().clamp(lo, hi) as i8)
            .collect();
        QLinear::from_parts(
            w_int,
            w.rows(),
            cols,
            p.channel_scales,
            in_scale,
            out_scale,
            weight_bits,
            bias.map(|b| b.data().to_vec()).unwrap_or_default(),
        )
    }

    /// Weights back in float: equals the simulation's fake-quant weights
    /// bitwise (same grid, same rounding).
    pub fn dequantized_weights(&self) -> Result<Tensor> {
        Tensor::new(
            vec![self.in_dim, self.out_dim],
            self.w_int
                .iter()
                .enumerate()
                .map(|(i, &q)| q as Real * self.w_scales[i % self.out_dim])
                .collect(),
        )
    }
}

/// Integer forward through one kernel: i32 accumulate, add folded bias,
/// requantize with a float multiply, round, clamp to the output grid.
pub fn qlinear_forward(layer: &QLinear, x: &IntMat) -> Result<IntMat> {
    if x.cols != layer.in_dim {
        return Err(CoreError::Shape {
            op: "qlinear_forward",
            detail: format!("input cols {} vs layer in_dim {}", x.cols, layer.in_dim),
        });
    }
    let (rows, inner, cols) = (x.rows, layer.in_dim, layer.out_dim);
    let mut out = vec![0i32; rows * cols];
    for r in 0..rows {
        let xrow = &x.v[r * inner..(r + 1) * inner];
        let orow = &mut out[r * cols..(r + 1) * cols];
        orow.copy_from_slice(&layer.bias_int);
        for (k, &xv) in xrow.iter().enumerate() {
            if xv == 0 {
                continue;
            }
            let wrow = &layer.w_int[k * cols..(k + 1) * cols];
            for c in 0..cols {
                orow[c] += xv * wrow[c] as i32;
            }
        }
        for c in 0..cols {
            let y = orow[c] as Real * layer.multipliers[c];
            orow[c] = (y.round() as i32).clamp(layer.out_q_min, layer.out_q_max);
        }
    }
    Ok(IntMat {
        rows,
        cols,
        v: out,
    })
}

#[derive(Clone, Debug)]
pub struct IntLayer {
    /// Kernels keyed by the short weight name (`wq`, `w1`, ...).
    pub lin: BTreeMap<String, QLinear>,
    /// Input-site scales: short site name -> (scale, signed).
    pub in_scales: BTreeMap<String, (Real, bool)>,
    /// Magnitude grid of the vector-feature quantizer; None for scalar-only.
    pub mag_scale: Option<Real>,
}

#[derive(Clone, Debug)]
pub struct Readout {
    pub we1: Tensor,
    pub be1: Tensor,
    pub we2: Tensor,
    pub be2: Tensor,
    pub wf: Tensor,
}

/// A converted integer model. The species embedding and both readout heads
/// stay in float; everything else runs through integer kernels.
#[derive(Clone, Debug)]
pub struct IntModel {
    pub cfg: ModelConfig,
    pub norm: Normalizer,
    pub scheme: QuantScheme,
    pub plan: SitePlan,
    pub embed: Tensor,
    pub layers: Vec<IntLayer>,
    pub readout: Readout,
}

#[derive(Clone, Debug)]
pub enum ConvertedModel {
    Float(Model),
    Int(Box<IntModel>),
}

impl ConvertedModel {
    pub fn forward(&self, graph: &MolGraph) -> Result<(Real, Tensor)> {
        match self {
            ConvertedModel::Float(m) => {
                let mut rt = m.runtime()?;
                rt.collecting = false;
                m.forward_values(graph, &mut rt)
            }
            ConvertedModel::Int(im) => im.forward(graph),
        }
    }

    pub fn scheme(&self) -> QuantScheme {
        match self {
            ConvertedModel::Float(m) => m.scheme,
            ConvertedModel::Int(im) => im.scheme,
        }
    }
}

fn bias_name(weight: &str) -> String {
    format!("b{}", &weight[1..])
}

/// Realize a trained fake-quant model as integer kernels. FP32-scheme models
/// convert to a no-op copy. Parameters narrow to f32 at this boundary so the
/// integer checkpoint round-trips bitwise. Missing frozen scales (an
/// uncalibrated model) are rejected.
pub fn convert(model: &Model) -> Result<ConvertedModel> {
    if !model.scheme.quantizes_scalars() {
        return Ok(ConvertedModel::Float(model.clone()));
    }
    let narrowed = load_model(&save_model(model)?)?;
    let cfg = narrowed.cfg.clone();
    let plan = attach_quantizers(&cfg, narrowed.scheme);
    let scale_of = |site: &str| -> Result<Real> {
        Ok(narrowed.params.get(&act_scale_name(site))?.item())
    };
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let mut lin = BTreeMap::new();
        let mut in_scales = BTreeMap::new();
        for (w, input, output) in LAYER_LINEARS {
            let in_site = format!("l{l}.{input}");
            let in_scale = scale_of(&in_site)?;
            let out_scale = scale_of(&format!("l{l}.{output}"))?;
            let signed = plan
                .act_sites
                .iter()
                .find(|s| s.name == in_site)
                .map(|s| s.signed)
                .unwrap_or(true);
            in_scales.insert(input.to_string(), (in_scale, signed));
            let wt = narrowed.params.get(&format!("l{l}.{w}"))?;
            let bias = narrowed.params.get(&format!("l{l}.{}", bias_name(w))).ok();
            lin.insert(
                w.to_string(),
                QLinear::from_float(wt, plan.weight_bits, in_scale, out_scale, bias)?,
            );
        }
        let mag_scale = if narrowed.scheme.quantizes_vectors() {
            Some(narrowed.params.get(&mag_scale_name(&format!("l{l}.h1")))?.item())
        } else {
            None
        };
        layers.push(IntLayer {
            lin,
            in_scales,
            mag_scale,
        });
    }
    let readout = Readout {
        we1: narrowed.params.get("out.we1")?.clone(),
        be1: narrowed.params.get("out.be1")?.clone(),
        we2: narrowed.params.get("out.we2")?.clone(),
        be2: narrowed.params.get("out.be2")?.clone(),
        wf: narrowed.params.get("out.wf")?.clone(),
    };
    Ok(ConvertedModel::Int(Box::new(IntModel {
        embed: narrowed.params.get("embed")?.clone(),
        cfg,
        norm: narrowed.norm,
        scheme: narrowed.scheme,
        plan,
        layers,
        readout,
    })))
}

/// One integer kernel invocation recorded during a traced forward pass.
#[derive(Clone, Debug)]
pub struct QlTrace {
    /// Qualified kernel name, e.g. `l0.wq`.
    pub name: String,
    pub input: IntMat,
    pub output: IntMat,
}

impl IntModel {
    pub fn qlinear(&self, layer: usize, short: &str) -> Option<&QLinear> {
        self.layers.get(layer).and_then(|l| l.lin.get(short))
    }

    pub fn forward(&self, graph: &MolGraph) -> Result<(Real, Tensor)> {
        let (e, f, _) = self.run(graph, false)?;
        Ok((e, f))
    }

    /// Forward pass that also records every integer kernel's input/output.
    pub fn forward_traced(&self, graph: &MolGraph) -> Result<(Real, Tensor, Vec<QlTrace>)> {
        self.run(graph, true)
    }

    fn run(&self, graph: &MolGraph, traced: bool) -> Result<(Real, Tensor, Vec<QlTrace>)> {
        if graph.n_atoms() == 0 {
            return Err(CoreError::InvalidArgument {
                op: "IntModel::forward",
                detail: "empty graph".into(),
            });
        }
        let n = graph.n_atoms();
        let f1 = self.cfg.f1;
        let act_bits = self.plan.act_bits;
        let mut trace = Vec::new();
        let mut tape = Tape::new();
        let edges = edge_inputs(&mut tape, graph, &self.cfg)?;
        let idx: Vec<usize> = graph
            .species
            .iter()
            .map(|&z| self.cfg.species_index(z))
            .collect::<Result<_>>()?;
        let table = tape.leaf(self.embed.clone());
        let mut h0 = tape.gather_rows(table, Rc::new(idx))?;
        let mut h1 = tape.leaf(Tensor::zeros(vec![n, 3 * f1]));

        for (l, layer) in self.layers.iter().enumerate() {
            let in_scale = |site: &str| -> Result<(Real, bool)> {
                layer
                    .in_scales
                    .get(site)
                    .copied()
                    .ok_or_else(|| CoreError::MissingQuantParams {
                        name: format!("l{l}.{site}"),
                    })
            };
            let kernel = |short: &str| -> Result<&QLinear> {
                layer.lin.get(short).ok_or_else(|| CoreError::MissingQuantParams {
                    name: format!("l{l}.{short}"),
                })
            };
            let run_kernel = |tape: &mut Tape,
                              trace: &mut Vec<QlTrace>,
                              short: &str,
                              x: &IntMat|
             -> Result<TensorId> {
                let k = kernel(short)?;
                let y = qlinear_forward(k, x)?;
                let deq = tape.leaf(dequantize_mat(&y, k.out_scale)?);
                if traced {
                    trace.push(QlTrace {
                        name: format!("l{l}.{short}"),
                        input: x.clone(),
                        output: y,
                    });
                }
                Ok(deq)
            };

            let (s_h0, sg_h0) = in_scale("h0_in")?;
            let x_h0 = quantize_mat(tape.value(h0), s_h0, act_bits, sg_h0);
            let (s_rbf, sg_rbf) = in_scale("rbf_in")?;
            let x_rbf = quantize_mat(tape.value(edges.rbf), s_rbf, act_bits, sg_rbf);

            // attention branch
            let q = run_kernel(&mut tape, &mut trace, "wq", &x_h0)?;
            let k = run_kernel(&mut tape, &mut trace, "wk", &x_h0)?;
            let v = run_kernel(&mut tape, &mut trace, "wv", &x_h0)?;
            let eb = run_kernel(&mut tape, &mut trace, "wb", &x_rbf)?;
            let attn = attention_weights(&mut tape, q, k, eb, edges.dst.clone(), edges.src.clone())?;

            // invariant branch
            let ve = tape.gather_rows(v, edges.src.clone())?;
            let vw = tape.mul(ve, attn.alpha)?;
            let agg0 = tape.scatter_add_rows(vw, edges.dst.clone(), edges.n)?;
            let (s_msg, sg_msg) = in_scale("msg_in")?;
            let x_msg = quantize_mat(tape.value(agg0), s_msg, act_bits, sg_msg);
            let m1 = run_kernel(&mut tape, &mut trace, "w1", &x_msg)?;
            let hid = tape.silu(m1);
            let (s_hid, sg_hid) = in_scale("hid_in")?;
            let x_hid = quantize_mat(tape.value(hid), s_hid, act_bits, sg_hid);
            let m2 = run_kernel(&mut tape, &mut trace, "w2", &x_hid)?;
            let m2m = tape.mul(m2, edges.mask)?;
            let h0_out = tape.add(h0, m2m)?;

            // equivariant branch
            let x_h0e = gather_int_rows(&x_h0, &edges.src);
            let sh = run_kernel(&mut tape, &mut trace, "wsh", &x_h0e)?;
            let sr = run_kernel(&mut tape, &mut trace, "wsr", &x_rbf)?;
            let s_gate = tape.add(sh, sr)?;
            let th = run_kernel(&mut tape, &mut trace, "wth", &x_h0e)?;
            let tr = run_kernel(&mut tape, &mut trace, "wtr", &x_rbf)?;
            let t_gate = tape.add(th, tr)?;

            let outer = tape.outer_rows(edges.rhat, s_gate)?;
            let h1e = tape.gather_rows(h1, edges.src.clone())?;
            let tv = tape.block_scale(h1e, t_gate)?;
            let msg1 = tape.add(outer, tv)?;
            let msg1w = tape.mul(msg1, attn.alpha)?;
            let agg1 = tape.scatter_add_rows(msg1w, edges.dst.clone(), edges.n)?;

            let norms = tape.block_norms(agg1, f1)?;
            let (s_norms, sg_norms) = in_scale("norms_in")?;
            let x_norms = quantize_mat(tape.value(norms), s_norms, act_bits, sg_norms);
            let g = run_kernel(&mut tape, &mut trace, "wg", &x_norms)?;
            let g = tape.silu(g);
            let upd = tape.block_scale(agg1, g)?;
            let updm = tape.mul(upd, edges.mask)?;
            let h1_mid = tape.add(h1, updm)?;

            h0 = h0_out;
            h1 = match layer.mag_scale {
                None => h1_mid,
                Some(ms) => self.int_mddq(&mut tape, h1_mid, ms)?,
            };
        }

        // float readout, identical ops to the simulation
        let we1 = tape.leaf(self.readout.we1.clone());
        let e1 = tape.matmul(h0, we1)?;
        let be1 = tape.leaf(self.readout.be1.clone());
        let e1 = tape.add(e1, be1)?;
        let e1 = tape.silu(e1);
        let we2 = tape.leaf(self.readout.we2.clone());
        let atomic = tape.matmul(e1, we2)?;
        let be2 = tape.leaf(self.readout.be2.clone());
        let atomic = tape.add(atomic, be2)?;
        let e_raw = tape.sum(atomic);
        let e_scaled = tape.scale(e_raw, self.norm.e_scale);
        let energy = tape.add_const(e_scaled, n as Real * self.norm.e_shift);

        let hr = tape.reshape(h1, vec![n * 3, f1])?;
        let wf = tape.leaf(self.readout.wf.clone());
        let fcol = tape.matmul(hr, wf)?;
        let f_raw = tape.reshape(fcol, vec![n, 3])?;
        let forces = tape.scale(f_raw, self.norm.f_scale);

        Ok((
            tape.value(energy).item(),
            tape.value(forces).clone(),
            trace,
        ))
    }

    /// Integer realization of the vector-feature quantizer: integer magnitude
    /// and direction grids, renormalization in float (mirrors the simulated
    /// op exactly; the roundings themselves are identical arithmetic).
    fn int_mddq(&self, tape: &mut Tape, h1: TensorId, mag_scale: Real) -> Result<TensorId> {
        let channels = self.cfg.f1;
        let dir_scale = 1.0 / ((1i32 << (self.plan.dir_bits - 1)) - 1) as Real;
        let norms = tape.block_norms(h1, channels)?;
        let x_mag = quantize_mat(tape.value(norms), mag_scale, self.plan.mag_bits, false);
        let mag_q = tape.leaf(dequantize_mat(&x_mag, mag_scale)?);
        let inv_norms = tape.recip(norms);
        let dir = tape.block_scale(h1, inv_norms)?;
        let x_dir = quantize_mat(tape.value(dir), dir_scale, self.plan.dir_bits, true);
        let dir_q = tape.leaf(dequantize_mat(&x_dir, dir_scale)?);
        let dir_q_norms = tape.block_norms(dir_q, channels)?;
        let inv_dq = tape.recip(dir_q_norms);
        let factor = tape.mul(mag_q, inv_dq)?;
        tape.block_scale(dir_q, factor)
    }
}

fn scalar_tensor(name: &str, value: Real) -> CkptTensor {
    CkptTensor {
        name: name.into(),
        payload: Payload::F32 {
            shape: vec![1, 1],
            values: vec![value as f32],
        },
        quant: None,
    }
}

fn float_tensor(name: &str, t: &Tensor) -> CkptTensor {
    CkptTensor {
        name: name.into(),
        payload: Payload::from_tensor(t),
        quant: None,
    }
}

/// Serialize an integer model: weights as i8 (or packed i4) with per-channel
/// grids, biases and readout in f32, activation scales as scalar tensors.
pub fn save_int_model(im: &IntModel) -> Result<Checkpoint> {
    let mut tensors = vec![float_tensor("embed", &im.embed)];
    for (l, layer) in im.layers.iter().enumerate() {
        for (w, _, _) in LAYER_LINEARS {
            let k = layer.lin.get(w).ok_or_else(|| CoreError::MissingQuantParams {
                name: format!("l{l}.{w}"),
            })?;
            let shape = vec![k.in_dim, k.out_dim];
            let payload = if k.weight_bits == 4 {
                Payload::I4 {
                    shape,
                    values: k.w_int.clone(),
                }
            } else {
                Payload::I8 {
                    shape,
                    values: k.w_int.clone(),
                }
            };
            tensors.push(CkptTensor {
                name: format!("l{l}.{w}"),
                payload,
                quant: Some(QuantParams::per_channel(
                    k.weight_bits,
                    true,
                    k.w_scales.clone(),
                )?),
            });
            if !k.bias.is_empty() {
                let b = Tensor::new(vec![1, k.out_dim], k.bias.clone())?;
                tensors.push(float_tensor(&format!("l{l}.{}", bias_name(w)), &b));
            }
        }
        for site in im.plan.act_sites.iter().filter(|s| s.name.starts_with(&format!("l{l}."))) {
            let short = site.name.split_once('.').map(|(_, s)| s).unwrap_or(&site.name);
            let scale = layer
                .in_scales
                .get(short)
                .map(|&(s, _)| s)
                .or_else(|| {
                    LAYER_LINEARS.iter().find(|&&(_, _, out)| out == short).and_then(
                        |&(w, _, _)| layer.lin.get(w).map(|k| k.out_scale),
                    )
                })
                .ok_or_else(|| CoreError::MissingQuantParams {
                    name: site.name.clone(),
                })?;
            tensors.push(scalar_tensor(&act_scale_name(&site.name), scale));
        }
        if let Some(ms) = layer.mag_scale {
            tensors.push(scalar_tensor(&mag_scale_name(&format!("l{l}.h1")), ms));
        }
    }
    tensors.push(float_tensor("out.we1", &im.readout.we1));
    tensors.push(float_tensor("out.be1", &im.readout.be1));
    tensors.push(float_tensor("out.we2", &im.readout.we2));
    tensors.push(float_tensor("out.be2", &im.readout.be2));
    tensors.push(float_tensor("out.wf", &im.readout.wf));
    let mut config = config_echo(&im.cfg, &im.norm, im.scheme);
    config.push(("kind".into(), "int".into()));
    Ok(Checkpoint {
        version: FORMAT_VERSION,
        tensors,
        config,
    })
}

pub fn load_int_model(ckpt: &Checkpoint) -> Result<IntModel> {
    if ckpt.config_value("kind")? != "int" {
        return Err(CoreError::CheckpointFormat(
            "not an integer checkpoint (kind != int)".into(),
        ));
    }
    let (cfg, norm, scheme) = config_from_echo(ckpt)?;
    let plan = attach_quantizers(&cfg, scheme);
    let by_name: BTreeMap<&str, &CkptTensor> =
        ckpt.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let named = |name: &str| -> Result<&CkptTensor> {
        by_name
            .get(name)
            .copied()
            .ok_or_else(|| CoreError::MissingQuantParams { name: name.into() })
    };
    let scalar = |name: &str| -> Result<Real> {
        Ok(named(name)?.payload.to_tensor()?.item())
    };
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let mut lin = BTreeMap::new();
        let mut in_scales = BTreeMap::new();
        for (w, input, output) in LAYER_LINEARS {
            let in_site = format!("l{l}.{input}");
            let in_scale = scalar(&act_scale_name(&in_site))?;
            let out_scale = scalar(&act_scale_name(&format!("l{l}.{output}")))?;
            let signed = plan
                .act_sites
                .iter()
                .find(|s| s.name == in_site)
                .map(|s| s.signed)
                .unwrap_or(true);
            in_scales.insert(input.to_string(), (in_scale, signed));
            let t = named(&format!("l{l}.{w}"))?;
            let (shape, values, bits) = match &t.payload {
                Payload::I8 { shape, values } => (shape, values, 8u8),
                Payload::I4 { shape, values } => (shape, values, 4u8),
                Payload::F32 { .. } => {
                    return Err(CoreError::CheckpointFormat(format!(
                        "kernel tensor '{}' is f32 in an integer checkpoint",
                        t.name
                    )))
                }
            };
            let qp = t.quant.as_ref().ok_or_else(|| CoreError::MissingQuantParams {
                name: t.name.clone(),
            })?;
            let bias = by_name
                .get(format!("l{l}.{}", bias_name(w)).as_str())
                .map(|b| b.payload.to_tensor())
                .transpose()?
                .map(|b| b.data().to_vec())
                .unwrap_or_default();
            lin.insert(
                w.to_string(),
                QLinear::from_parts(
                    values.clone(),
                    shape[0],
                    shape[1],
                    qp.channel_scales.clone(),
                    in_scale,
                    out_scale,
                    bits,
                    bias,
                )?,
            );
        }
        let mag_scale = if scheme.quantizes_vectors() {
            Some(scalar(&mag_scale_name(&format!("l{l}.h1")))?)
        } else {
            None
        };
        layers.push(IntLayer {
            lin,
            in_scales,
            mag_scale,
        });
    }
    Ok(IntModel {
        embed: named("embed")?.payload.to_tensor()?,
        readout: Readout {
            we1: named("out.we1")?.payload.to_tensor()?,
            be1: named("out.be1")?.payload.to_tensor()?,
            we2: named("out.we2")?.payload.to_tensor()?,
            be2: named("out.be2")?.payload.to_tensor()?,
            wf: named("out.wf")?.payload.to_tensor()?,
        },
        cfg,
        norm,
        scheme,
        plan,
        layers,
    })
}

/// Symbols of the per-layer asymptotic cost: atom count, mean neighbor count,
/// feature width, spherical order, and arithmetic bit width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostModel {
    pub n: usize,
    pub avg_neighbors: Real,
    pub f: usize,
    pub l_max: u32,
    pub bits: u8,
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if ![4, 8, 16, 32].contains(&self.bits) {
            return Err(CoreError::Config(format!(
                "cost model bits must be one of 4, 8, 16, 32 (got {})",
                self.bits
            )));
        }
        if self.l_max > 3 {
            return Err(CoreError::Config(format!(
                "cost model l_max must be 0..=3 (got {})",
                self.l_max
            )));
        }
        if self.n == 0 || self.f == 0 || !(self.avg_neighbors > 0.0) {
            return Err(CoreError::Config(
                "cost model n, F and avg_neighbors must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Schnet,
    Painn,
    Spookynet,
    Nequip,
    So3krates,
}

impl Arch {
    pub const ALL: [Arch; 5] = [
        Arch::Schnet,
        Arch::Painn,
        Arch::Spookynet,
        Arch::Nequip,
        Arch::So3krates,
    ];

    pub fn parse(s: &str) -> Result<Arch> {
        match s {
            "schnet" => Ok(Arch::Schnet),
            "painn" => Ok(Arch::Painn),
            "spookynet" => Ok(Arch::Spookynet),
            "nequip" => Ok(Arch::Nequip),
            "so3krates" => Ok(Arch::So3krates),
            other => Err(CoreError::Config(format!(
                "unknown architecture '{other}' (expected schnet | painn | spookynet | nequip | so3krates)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Arch::Schnet => "schnet",
            Arch::Painn => "painn",
            Arch::Spookynet => "spookynet",
            Arch::Nequip => "nequip",
            Arch::So3krates => "so3krates",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostReport {
    /// Per-layer full-precision term evaluated numerically.
    pub c_full: Real,
    /// Bit ratio k/32.
    pub rho: Real,
    /// Theoretical speedup 32/k; rho * speedup == 1 exactly.
    pub speedup: Real,
    /// c_full * rho.
    pub c_quant: Real,
}

/// Evaluates the per-layer asymptotic cost term for each architecture family:
/// pairwise-invariant message passing scales with F, vector features add a
/// factor 4, spherical features a factor (l+1)^2, full tensor products
/// (l+1)^6, and the split attention design pays (l+1)^2 + F instead of a
/// product.
pub fn theoretical_cost(cm: &CostModel, arch: Arch) -> Result<CostReport> {
    cm.validate()?;
    let base = cm.n as Real * cm.avg_neighbors;
    let f = cm.f as Real;
    let lp1 = (cm.l_max + 1) as Real;
    let c_full = match arch {
        Arch::Schnet => base * f,
        Arch::Painn => base * 4.0 * f,
        Arch::Spookynet => base * lp1.powi(2) * f,
        Arch::Nequip => base * lp1.powi(6) * f,
        Arch::So3krates => base * (lp1.powi(2) + f),
    };
    let rho = cm.bits as Real / 32.0;
    let speedup = 32.0 / cm.bits as Real;
    Ok(CostReport {
        c_full,
        rho,
        speedup,
        c_quant: c_full * rho,
    })
}

#[derive(Clone, Debug)]
pub struct MemoryRow {
    pub name: String,
    pub fp32_bytes: usize,
    pub quant_bytes: usize,
}

#[derive(Clone, Debug)]
pub struct MemoryReport {
    pub rows: Vec<MemoryRow>,
    pub fp32_bytes: usize,
    pub quant_bytes: usize,
    /// quant_bytes / fp32_bytes over the quantizable weight tensors.
    pub ratio: Real,
}

/// Byte accounting over the quantizable weight tensors (the layer kernels):
/// integer data plus 4 bytes per channel scale, against 4 bytes per element
/// in full precision. Embedding and readout are identical in both forms and
/// excluded.
pub fn memory_report(cm: &ConvertedModel) -> MemoryReport {
    let mut rows = Vec::new();
    match cm {
        ConvertedModel::Float(m) => {
            for l in 0..m.cfg.n_layers {
                for (w, _, _) in LAYER_LINEARS {
                    let name = format!("l{l}.{w}");
                    if let Ok(t) = m.params.get(&name) {
                        let bytes = 4 * t.numel();
                        rows.push(MemoryRow {
                            name,
                            fp32_bytes: bytes,
                            quant_bytes: bytes,
                        });
                    }
                }
            }
        }
        ConvertedModel::Int(im) => {
            for (l, layer) in im.layers.iter().enumerate() {
                for (w, _, _) in LAYER_LINEARS {
                    if let Some(k) = layer.lin.get(w) {
                        let numel = k.in_dim * k.out_dim;
                        let data = if k.weight_bits == 4 {
                            numel.div_ceil(2)
                        } else {
                            numel
                        };
                        rows.push(MemoryRow {
                            name: format!("l{l}.{w}"),
                            fp32_bytes: 4 * numel,
                            quant_bytes: data + 4 * k.out_dim,
                        });
                    }
                }
            }
        }
    }
    let fp32_bytes: usize = rows.iter().map(|r| r.fp32_bytes).sum();
    let quant_bytes: usize = rows.iter().map(|r| r.quant_bytes).sum();
    MemoryReport {
        rows,
        fp32_bytes,
        quant_bytes,
        ratio: if fp32_bytes == 0 {
            1.0
        } else {
            quant_bytes as Real / fp32_bytes as Real
        },
    }
}

#[derive(Clone, Debug)]
pub struct BenchResult {
    pub name: String,
    pub median_us: Real,
    pub mean_us: Real,
    /// t_fp32 / t_variant (median based); 1.0 for the baseline itself.
    pub speedup: Real,
    pub memory_bytes: usize,
}

const BENCH_WARMUP: usize = 10;

/// Single-threaded latency comparison: every variant runs `BENCH_WARMUP`
/// unmeasured warm-up passes, then `n_runs` timed passes. The speedup
/// baseline is the first full-precision variant (the first variant if none
/// is full-precision). Results are measurements, not assertions.
pub fn bench(
    variants: &[(String, ConvertedModel)],
    graph: &MolGraph,
    n_runs: usize,
) -> Result<Vec<BenchResult>> {
    if n_runs == 0 {
        return Err(CoreError::InvalidArgument {
            op: "bench",
            detail: "n_runs must be at least 1".into(),
        });
    }
    if variants.is_empty() {
        return Err(CoreError::InvalidArgument {
            op: "bench",
            detail: "no variants given".into(),
        });
    }
    let mut medians = Vec::with_capacity(variants.len());
    let mut means = Vec::with_capacity(variants.len());
    for (_, v) in variants {
        for _ in 0..BENCH_WARMUP {
            v.forward(graph)?;
        }
        let mut times = Vec::with_capacity(n_runs);
        for _ in 0..n_runs {
            let t0 = Instant::now();
            v.forward(graph)?;
            times.push(t0.elapsed().as_secs_f64() * 1e6);
        }
        times.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
        let median = if n_runs % 2 == 1 {
            times[n_runs / 2]
        } else {
            0.5 * (times[n_runs / 2 - 1] + times[n_runs / 2])
        };
        medians.push(median);
        means.push(times.iter().sum::<Real>() / n_runs as Real);
    }
    let baseline = variants
        .iter()
        .position(|(_, v)| matches!(v, ConvertedModel::Float(_)))
        .unwrap_or(0);
    let t_base = medians[baseline];
    Ok(variants
        .iter()
        .enumerate()
        .map(|(i, (name, v))| BenchResult {
            name: name.clone(),
            median_us: medians[i],
            mean_us: means[i],
            speedup: t_base / medians[i],
            memory_bytes: memory_report(v).quant_bytes,
        })
        .collect())
}
