//! Two-branch rotation-equivariant graph transformer.
//!
//! Each atom carries a scalar feature row `h0` (invariant under rotation) and
//! a block of 3-vector features `h1` (each channel transforms as `v -> R v`).
//! `h1` is stored `[n, 3*F1]` block-major: element `(i, k*F1 + c)` is
//! component `k` of channel `c` on atom `i`, which lets one reshape feed the
//! force head and keeps every vector op expressible with block primitives.
//!
//! Attention logits are cosines of length-normalized query/key rows plus a
//! learned invariant bias of the edge radial features, so the weights depend
//! only on feature directions. The vector update mixes a gated edge direction
//! with gated neighbor vectors; every gate is a rotation-invariant scalar, so
//! the whole layer commutes with rotations by construction.
//!
//! Quantizers attach at named sites between ops. Every linear map inside the
//! transformer layers carries an input-activation site, a per-output-channel
//! weight grid, and an output-activation site; the vector stream gets one
//! magnitude/direction site per layer. The species embedding and both readout
//! heads never quantize.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::geometry::{rbf_expand, standard_normal, MolGraph};
use crate::quant::{calibrate_weight_per_channel, fake_quantize_on_tape, mddq_on_tape, Observer};
use crate::tape::{Tape, TensorId};
use crate::tensor::{Real, Tensor};

/// Added to query/key norms before dividing, keeping zero rows finite.
pub const QK_NORM_EPS: Real = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub f0: usize,
    pub f1: usize,
    pub n_layers: usize,
    pub n_rbf: usize,
    pub cutoff: Real,
    pub d_attn: usize,
    /// Known atomic numbers; position in this list is the embedding row.
    pub species: Vec<u32>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            f0: 32,
            f1: 32,
            n_layers: 3,
            n_rbf: 16,
            cutoff: 5.0,
            d_attn: 32,
            species: vec![1, 6],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.f0, self.f1, self.n_layers, self.n_rbf, self.d_attn];
        if positive.iter().any(|&v| v == 0) || self.cutoff <= 0.0 {
            return Err(CoreError::Config(
                "all model dimensions and the cutoff must be positive".into(),
            ));
        }
        if self.species.is_empty() {
            return Err(CoreError::Config("species list must not be empty".into()));
        }
        let mut seen = self.species.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.species.len() {
            return Err(CoreError::Config("duplicate species entries".into()));
        }
        Ok(())
    }

    pub fn species_index(&self, z: u32) -> Result<usize> {
        self.species
            .iter()
            .position(|&s| s == z)
            .ok_or(CoreError::UnknownSpecies {
                species: z,
                known: self.species.clone(),
            })
    }
}

/// Named parameter tensors in a fixed insertion order. The order is the
/// binding order on every tape and the optimizer's update order, so one seed
/// gives one bit-exact trajectory.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(CoreError::InvalidArgument {
                op: "ParamSet::insert",
                detail: format!("duplicate parameter '{name}'"),
            });
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| CoreError::MissingQuantParams { name: name.into() })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.tensors[i]),
            None => Err(CoreError::MissingQuantParams { name: name.into() }),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn tensor_at(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: Real) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(standard_normal(rng) * std);
    }
    Tensor::new(vec![rows, cols], data).expect("shape matches data by construction")
}

/// Fresh parameters: Gaussian weights scaled by 1/sqrt(fan_in), zero biases,
/// unit-variance species embeddings.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let (f0, f1, d, nb) = (cfg.f0, cfg.f1, cfg.d_attn, cfg.n_rbf);
    fn w(
        p: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: String,
        r: usize,
        c: usize,
    ) -> Result<()> {
        let t = gaussian_matrix(rng, r, c, 1.0 / (r as Real).sqrt());
        p.insert(&name, t)
    }
    p.insert(
        "embed",
        gaussian_matrix(&mut rng, cfg.species.len(), f0, 1.0),
    )?;
    for l in 0..cfg.n_layers {
        w(&mut p, &mut rng, format!("l{l}.wq"), f0, d)?;
        w(&mut p, &mut rng, format!("l{l}.wk"), f0, d)?;
        w(&mut p, &mut rng, format!("l{l}.wv"), f0, f0)?;
        w(&mut p, &mut rng, format!("l{l}.wb"), nb, 1)?;
        w(&mut p, &mut rng, format!("l{l}.wsh"), f0, f1)?;
        p.insert(&format!("l{l}.bsh"), Tensor::zeros(vec![1, f1]))?;
        w(&mut p, &mut rng, format!("l{l}.wsr"), nb, f1)?;
        w(&mut p, &mut rng, format!("l{l}.wth"), f0, f1)?;
        p.insert(&format!("l{l}.bth"), Tensor::zeros(vec![1, f1]))?;
        w(&mut p, &mut rng, format!("l{l}.wtr"), nb, f1)?;
        w(&mut p, &mut rng, format!("l{l}.w1"), f0, f0)?;
        p.insert(&format!("l{l}.b1"), Tensor::zeros(vec![1, f0]))?;
        w(&mut p, &mut rng, format!("l{l}.w2"), f0, f0)?;
        p.insert(&format!("l{l}.b2"), Tensor::zeros(vec![1, f0]))?;
        w(&mut p, &mut rng, format!("l{l}.wg"), f1, f1)?;
        p.insert(&format!("l{l}.bg"), Tensor::zeros(vec![1, f1]))?;
    }
    w(&mut p, &mut rng, "out.we1".into(), f0, f0)?;
    p.insert("out.be1", Tensor::zeros(vec![1, f0]))?;
    w(&mut p, &mut rng, "out.we2".into(), f0, 1)?;
    p.insert("out.be2", Tensor::zeros(vec![1, 1]))?;
    w(&mut p, &mut rng, "out.wf".into(), f1, 1)?;
    Ok(p)
}

/// Output standardization fitted on the training split: raw head outputs are
/// mapped to physical units by `E = e_scale * sum_i(raw_i) + n * e_shift` and
/// `F = f_scale * raw`. Keeps the trainable heads working near unit scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalizer {
    pub e_scale: Real,
    pub e_shift: Real,
    pub f_scale: Real,
}

impl Default for Normalizer {
    fn default() -> Self {
        Normalizer {
            e_scale: 1.0,
            e_shift: 0.0,
            f_scale: 1.0,
        }
    }
}

impl Normalizer {
    pub fn fit(graphs: &[&MolGraph]) -> Result<Normalizer> {
        if graphs.is_empty() {
            return Err(CoreError::EmptyDataset);
        }
        let mut e_per_atom = 0.0;
        let mut n_mol = 0.0;
        for g in graphs {
            let e = g.ref_energy.ok_or(CoreError::InvalidArgument {
                op: "Normalizer::fit",
                detail: "reference energy missing".into(),
            })?;
            e_per_atom += e / g.n_atoms() as Real;
            n_mol += 1.0;
        }
        let e_shift = e_per_atom / n_mol;
        let mut var_e = 0.0;
        let mut var_f = 0.0;
        let mut n_f = 0.0;
        for g in graphs {
            let resid = g.ref_energy.unwrap_or(0.0) - g.n_atoms() as Real * e_shift;
            var_e += resid * resid;
            if let Some(fs) = &g.ref_forces {
                for f in fs {
                    for k in 0..3 {
                        var_f += f[k] * f[k];
                        n_f += 1.0;
                    }
                }
            }
        }
        let e_scale = (var_e / n_mol).sqrt().max(1e-8);
        let f_scale = if n_f > 0.0 {
            (var_f / n_f).sqrt().max(1e-8)
        } else {
            1.0
        };
        Ok(Normalizer {
            e_scale,
            e_shift,
            f_scale,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantScheme {
    Fp32,
    Int8ScalarOnly,
    Int8Full,
    W4A8,
}

impl QuantScheme {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fp32" => Ok(QuantScheme::Fp32),
            "int8-scalar" | "int8-scalar-only" => Ok(QuantScheme::Int8ScalarOnly),
            "int8-full" => Ok(QuantScheme::Int8Full),
            "w4a8" => Ok(QuantScheme::W4A8),
            other => Err(CoreError::Config(format!(
                "unknown quantization scheme '{other}' (expected fp32 | int8-scalar | int8-full | w4a8)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            QuantScheme::Fp32 => "fp32",
            QuantScheme::Int8ScalarOnly => "int8-scalar",
            QuantScheme::Int8Full => "int8-full",
            QuantScheme::W4A8 => "w4a8",
        }
    }

    pub fn quantizes_scalars(&self) -> bool {
        !matches!(self, QuantScheme::Fp32)
    }

    pub fn quantizes_vectors(&self) -> bool {
        matches!(self, QuantScheme::Int8Full | QuantScheme::W4A8)
    }

    pub fn weight_bits(&self) -> u8 {
        match self {
            QuantScheme::W4A8 => 4,
            _ => 8,
        }
    }
}

impl std::fmt::Display for QuantScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActSite {
    pub name: String,
    pub signed: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeightSite {
    /// Parameter name of the quantized weight matrix.
    pub param: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MddqSite {
    pub name: String,
}

/// Static description of every quantizer a scheme attaches. The embedding and
/// the readout heads never appear here.
#[derive(Clone, Debug, Default)]
pub struct SitePlan {
    pub act_sites: Vec<ActSite>,
    pub weight_sites: Vec<WeightSite>,
    pub mddq_sites: Vec<MddqSite>,
    pub act_bits: u8,
    pub weight_bits: u8,
    pub mag_bits: u8,
    pub dir_bits: u8,
}

/// Linear maps inside one transformer layer, with their shared-input
/// activation site and their output site. Biases ride along unquantized and
/// fold into the integer kernels at conversion time.
pub const LAYER_LINEARS: [(&str, &str, &str); 11] = [
    ("wq", "h0_in", "q_out"),
    ("wk", "h0_in", "k_out"),
    ("wv", "h0_in", "v_out"),
    ("wb", "rbf_in", "eb_out"),
    ("wsh", "h0_in", "sh_out"),
    ("wsr", "rbf_in", "sr_out"),
    ("wth", "h0_in", "th_out"),
    ("wtr", "rbf_in", "tr_out"),
    ("w1", "msg_in", "m1_out"),
    ("w2", "hid_in", "m2_out"),
    ("wg", "norms_in", "g_out"),
];

/// Activation sites that are never negative and therefore use the unsigned
/// grid: radial features and vector-channel norms.
const UNSIGNED_SITES: [&str; 2] = ["rbf_in", "norms_in"];

pub fn attach_quantizers(cfg: &ModelConfig, scheme: QuantScheme) -> SitePlan {
    let mut plan = SitePlan {
        act_bits: 8,
        weight_bits: scheme.weight_bits(),
        mag_bits: 8,
        dir_bits: 8,
        ..SitePlan::default()
    };
    if !scheme.quantizes_scalars() {
        return plan;
    }
    for l in 0..cfg.n_layers {
        let mut in_seen: Vec<&str> = Vec::new();
        for (w, input, output) in LAYER_LINEARS {
            if !in_seen.contains(&input) {
                in_seen.push(input);
                plan.act_sites.push(ActSite {
                    name: format!("l{l}.{input}"),
                    signed: !UNSIGNED_SITES.contains(&input),
                });
            }
            plan.act_sites.push(ActSite {
                name: format!("l{l}.{output}"),
                signed: true,
            });
            plan.weight_sites.push(WeightSite {
                param: format!("l{l}.{w}"),
            });
        }
        if scheme.quantizes_vectors() {
            plan.mddq_sites.push(MddqSite {
                name: format!("l{l}.h1"),
            });
        }
    }
    plan
}

/// Per-site state: still collecting running-max statistics, or frozen into a
/// learnable step-size parameter living in the `ParamSet`.
#[derive(Clone, Debug)]
pub enum SiteState {
    Observing(Observer),
    Frozen,
}

/// Mutable quantizer state threaded through forward passes during staged
/// training. Scalar sites freeze before the first epoch; vector sites keep
/// observing magnitudes through the warm-up and freeze at its boundary.
#[derive(Clone, Debug)]
pub struct QuantRuntime {
    pub scheme: QuantScheme,
    pub plan: SitePlan,
    pub act: BTreeMap<String, SiteState>,
    pub mddq: BTreeMap<String, SiteState>,
    /// False during warm-up: vector sites pass through (observing only).
    pub vectors_active: bool,
    /// Observers update only when set (training passes, not evaluation).
    pub collecting: bool,
}

pub fn act_scale_name(site: &str) -> String {
    format!("q.{site}.scale")
}

pub fn mag_scale_name(site: &str) -> String {
    format!("q.{site}.mag_scale")
}

impl QuantRuntime {
    /// Fresh runtime with every site observing.
    pub fn new(cfg: &ModelConfig, scheme: QuantScheme) -> Result<Self> {
        let plan = attach_quantizers(cfg, scheme);
        let mut act = BTreeMap::new();
        for s in &plan.act_sites {
            act.insert(
                s.name.clone(),
                SiteState::Observing(Observer::new(plan.act_bits, s.signed)?),
            );
        }
        let mut mddq = BTreeMap::new();
        for s in &plan.mddq_sites {
            mddq.insert(
                s.name.clone(),
                SiteState::Observing(Observer::new(plan.mag_bits, false)?),
            );
        }
        Ok(QuantRuntime {
            scheme,
            plan,
            act,
            mddq,
            vectors_active: false,
            collecting: true,
        })
    }

    /// Runtime over already-trained scale parameters (model loading path).
    pub fn frozen(cfg: &ModelConfig, scheme: QuantScheme) -> Result<Self> {
        let mut rt = Self::new(cfg, scheme)?;
        for state in rt.act.values_mut() {
            *state = SiteState::Frozen;
        }
        for state in rt.mddq.values_mut() {
            *state = SiteState::Frozen;
        }
        rt.vectors_active = scheme.quantizes_vectors();
        rt.collecting = false;
        Ok(rt)
    }

    /// Freeze every scalar activation site into a trainable step size.
    pub fn freeze_scalar_sites(&mut self, params: &mut ParamSet) -> Result<()> {
        for (name, state) in self.act.iter_mut() {
            if let SiteState::Observing(obs) = state {
                let scale = obs.calibrate().scale;
                params.insert(&act_scale_name(name), Tensor::scalar(scale))?;
                *state = SiteState::Frozen;
            }
        }
        Ok(())
    }

    /// Freeze vector magnitude grids and activate the vector quantizers.
    pub fn freeze_vector_sites(&mut self, params: &mut ParamSet) -> Result<()> {
        for (name, state) in self.mddq.iter_mut() {
            if let SiteState::Observing(obs) = state {
                let scale = obs.calibrate().scale;
                params.insert(&mag_scale_name(name), Tensor::scalar(scale))?;
                *state = SiteState::Frozen;
            }
        }
        self.vectors_active = true;
        Ok(())
    }

    pub fn all_frozen(&self) -> bool {
        let frozen = |s: &SiteState| matches!(s, SiteState::Frozen);
        self.act.values().all(frozen) && self.mddq.values().all(frozen)
    }
}

/// Parameter tensors bound onto one tape as trainable nodes, addressable by
/// name. Binding order equals `ParamSet` order.
pub struct BoundParams<'a> {
    set: &'a ParamSet,
    ids: Vec<TensorId>,
}

impl<'a> BoundParams<'a> {
    pub fn bind(tape: &mut Tape, set: &'a ParamSet) -> Self {
        let ids = (0..set.len())
            .map(|i| tape.param(set.tensor_at(i).clone()))
            .collect();
        BoundParams { set, ids }
    }

    /// Wrap externally created ids (finite-difference harnesses bind params
    /// themselves so they can perturb them).
    pub fn from_ids(set: &'a ParamSet, ids: Vec<TensorId>) -> Result<Self> {
        if ids.len() != set.len() {
            return Err(CoreError::InvalidArgument {
                op: "BoundParams::from_ids",
                detail: format!("{} ids for {} parameters", ids.len(), set.len()),
            });
        }
        Ok(BoundParams { set, ids })
    }

    pub fn id(&self, name: &str) -> Result<TensorId> {
        self.set
            .index
            .get(name)
            .map(|&i| self.ids[i])
            .ok_or_else(|| CoreError::MissingQuantParams { name: name.into() })
    }

    pub fn set(&self) -> &ParamSet {
        self.set
    }

    pub fn ids(&self) -> &[TensorId] {
        &self.ids
    }
}

/// Per-graph tape inputs shared by every layer: directed edges grouped by
/// center, unit displacement rows, radial features, and the
/// has-any-neighbor mask.
pub struct EdgeData {
    pub n: usize,
    pub dst: Rc<Vec<usize>>,
    pub src: Rc<Vec<usize>>,
    pub rhat: TensorId,
    pub rbf: TensorId,
    pub mask: TensorId,
}

pub fn edge_inputs(tape: &mut Tape, graph: &MolGraph, cfg: &ModelConfig) -> Result<EdgeData> {
    let n = graph.n_atoms();
    let edges = graph.directed_edges();
    let mut dst = Vec::with_capacity(edges.len());
    let mut src = Vec::with_capacity(edges.len());
    let mut rhat = Vec::with_capacity(edges.len() * 3);
    let mut rbf = Vec::with_capacity(edges.len() * cfg.n_rbf);
    for &(i, j) in &edges {
        let (pi, pj) = (graph.positions[i], graph.positions[j]);
        let d = crate::geometry::distance(pi, pj);
        dst.push(i);
        src.push(j);
        for k in 0..3 {
            rhat.push((pj[k] - pi[k]) / d);
        }
        rbf.extend(rbf_expand(d, cfg.n_rbf, cfg.cutoff)?);
    }
    let mut mask = vec![0.0; n];
    for &i in &dst {
        mask[i] = 1.0;
    }
    Ok(EdgeData {
        n,
        dst: Rc::new(dst),
        src: Rc::new(src),
        rhat: tape.leaf(Tensor::new(vec![edges.len(), 3], rhat)?),
        rbf: tape.leaf(Tensor::new(vec![edges.len(), cfg.n_rbf], rbf)?),
        mask: tape.leaf(Tensor::new(vec![n, 1], mask)?),
    })
}

fn apply_act_site(
    tape: &mut Tape,
    x: TensorId,
    site: &str,
    quant: &mut QuantRuntime,
    bound: &BoundParams,
) -> Result<TensorId> {
    let Some(state) = quant.act.get_mut(site) else {
        return Ok(x);
    };
    match state {
        SiteState::Observing(obs) => {
            if quant.collecting {
                obs.observe(tape.value(x).data());
            }
            Ok(x)
        }
        SiteState::Frozen => {
            let scale = bound.id(&act_scale_name(site))?;
            let signed = quant
                .plan
                .act_sites
                .iter()
                .find(|s| s.name == site)
                .map(|s| s.signed)
                .unwrap_or(true);
            let bits = quant.plan.act_bits;
            let (q_min, q_max) = if signed {
                (-(1i32 << (bits - 1)), (1i32 << (bits - 1)) - 1)
            } else {
                (0, (1i32 << bits) - 1)
            };
            fake_quantize_on_tape(tape, x, scale, q_min, q_max)
        }
    }
}

fn apply_mddq_site(
    tape: &mut Tape,
    h1: TensorId,
    site: &str,
    f1: usize,
    quant: &mut QuantRuntime,
    bound: &BoundParams,
) -> Result<TensorId> {
    let Some(state) = quant.mddq.get_mut(site) else {
        return Ok(h1);
    };
    match state {
        SiteState::Observing(obs) => {
            if quant.collecting {
                let v = tape.value(h1);
                let rows = v.rows();
                for i in 0..rows {
                    for c in 0..f1 {
                        let mut s = 0.0;
                        for k in 0..3 {
                            let e = v.at(i, k * f1 + c);
                            s += e * e;
                        }
                        obs.observe(&[s.sqrt()]);
                    }
                }
            }
            Ok(h1)
        }
        SiteState::Frozen => {
            if !quant.vectors_active {
                return Ok(h1);
            }
            let mag_scale = bound.id(&mag_scale_name(site))?;
            mddq_on_tape(
                tape,
                h1,
                f1,
                mag_scale,
                quant.plan.mag_bits,
                quant.plan.dir_bits,
            )
        }
    }
}

/// Weight tensor for a site: raw when unquantized, otherwise fake-quantized
/// on a per-output-channel grid recomputed from the current values. The grid
/// is a pure function of the weights, so gradients flow through the rounding
/// straight into the float shadow weights.
fn weight_for(
    tape: &mut Tape,
    bound: &BoundParams,
    quant: &QuantRuntime,
    name: &str,
) -> Result<TensorId> {
    let wid = bound.id(name)?;
    if !quant.plan.weight_sites.iter().any(|s| s.param == name) {
        return Ok(wid);
    }
    let p = calibrate_weight_per_channel(bound.set().get(name)?, quant.plan.weight_bits)?;
    let scales = p.channel_scales.clone();
    let scale = tape.leaf(Tensor::new(vec![1, scales.len()], scales)?);
    fake_quantize_on_tape(tape, wid, scale, p.q_min(), p.q_max())
}

/// Attention over directed edges from length-normalized queries and keys plus
/// an invariant per-edge bias. Returned `cos` rows are the raw query/key
/// cosines before the 1/sqrt(d) damping.
pub struct Attention {
    pub alpha: TensorId,
    pub cos: TensorId,
    pub logits: TensorId,
}

pub fn attention_weights(
    tape: &mut Tape,
    q: TensorId,
    k: TensorId,
    edge_bias: TensorId,
    dst: Rc<Vec<usize>>,
    src: Rc<Vec<usize>>,
) -> Result<Attention> {
    let d = tape.value(q).cols();
    let qn = tape.l2_norm_last_axis(q)?;
    let qn = tape.add_const(qn, QK_NORM_EPS);
    let qt = tape.div(q, qn)?;
    let kn = tape.l2_norm_last_axis(k)?;
    let kn = tape.add_const(kn, QK_NORM_EPS);
    let kt = tape.div(k, kn)?;
    let qe = tape.gather_rows(qt, dst.clone())?;
    let ke = tape.gather_rows(kt, src)?;
    let prod = tape.mul(qe, ke)?;
    let cos = tape.sum_last_axis(prod)?;
    let scaled = tape.scale(cos, 1.0 / (d as Real).sqrt());
    let logits = tape.add(scaled, edge_bias)?;
    let alpha = tape.softmax_segments(logits, dst)?;
    Ok(Attention { alpha, cos, logits })
}

/// One transformer layer's outputs plus its attention trace.
pub struct LayerOut {
    pub h0: TensorId,
    pub h1: TensorId,
    pub cos: TensorId,
    pub alpha: TensorId,
}

#[allow(clippy::too_many_arguments)]
pub fn layer_forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    bound: &BoundParams,
    quant: &mut QuantRuntime,
    layer: usize,
    h0: TensorId,
    h1: TensorId,
    edges: &EdgeData,
) -> Result<LayerOut> {
    let l = layer;
    let site = |s: &str| format!("l{l}.{s}");
    let pname = |s: &str| format!("l{l}.{s}");

    let h0q = apply_act_site(tape, h0, &site("h0_in"), quant, bound)?;
    let rbfq = apply_act_site(tape, edges.rbf, &site("rbf_in"), quant, bound)?;

    // attention over neighbors
    let wq = weight_for(tape, bound, quant, &pname("wq"))?;
    let wk = weight_for(tape, bound, quant, &pname("wk"))?;
    let wv = weight_for(tape, bound, quant, &pname("wv"))?;
    let q = tape.matmul(h0q, wq)?;
    let q = apply_act_site(tape, q, &site("q_out"), quant, bound)?;
    let k = tape.matmul(h0q, wk)?;
    let k = apply_act_site(tape, k, &site("k_out"), quant, bound)?;
    let v = tape.matmul(h0q, wv)?;
    let v = apply_act_site(tape, v, &site("v_out"), quant, bound)?;
    let wb = weight_for(tape, bound, quant, &pname("wb"))?;
    let eb = tape.matmul(rbfq, wb)?;
    let eb = apply_act_site(tape, eb, &site("eb_out"), quant, bound)?;
    let attn = attention_weights(tape, q, k, eb, edges.dst.clone(), edges.src.clone())?;

    // invariant branch: gated neighbor values through a two-layer MLP
    let ve = tape.gather_rows(v, edges.src.clone())?;
    let vw = tape.mul(ve, attn.alpha)?;
    let agg0 = tape.scatter_add_rows(vw, edges.dst.clone(), edges.n)?;
    let agg0 = apply_act_site(tape, agg0, &site("msg_in"), quant, bound)?;
    let w1 = weight_for(tape, bound, quant, &pname("w1"))?;
    let m1 = tape.matmul(agg0, w1)?;
    let b1 = bound.id(&pname("b1"))?;
    let m1 = tape.add(m1, b1)?;
    let m1 = apply_act_site(tape, m1, &site("m1_out"), quant, bound)?;
    let hid = tape.silu(m1);
    let hid = apply_act_site(tape, hid, &site("hid_in"), quant, bound)?;
    let w2 = weight_for(tape, bound, quant, &pname("w2"))?;
    let m2 = tape.matmul(hid, w2)?;
    let b2 = bound.id(&pname("b2"))?;
    let m2 = tape.add(m2, b2)?;
    let m2 = apply_act_site(tape, m2, &site("m2_out"), quant, bound)?;
    let m2m = tape.mul(m2, edges.mask)?;
    let h0_out = tape.add(h0, m2m)?;

    // equivariant branch: gates are invariant scalars of the *source* atom
    // and the edge radial features
    let h0e = tape.gather_rows(h0q, edges.src.clone())?;
    let wsh = weight_for(tape, bound, quant, &pname("wsh"))?;
    let sh = tape.matmul(h0e, wsh)?;
    let bsh = bound.id(&pname("bsh"))?;
    let sh = tape.add(sh, bsh)?;
    let sh = apply_act_site(tape, sh, &site("sh_out"), quant, bound)?;
    let wsr = weight_for(tape, bound, quant, &pname("wsr"))?;
    let sr = tape.matmul(rbfq, wsr)?;
    let sr = apply_act_site(tape, sr, &site("sr_out"), quant, bound)?;
    let s_gate = tape.add(sh, sr)?;
    let wth = weight_for(tape, bound, quant, &pname("wth"))?;
    let th = tape.matmul(h0e, wth)?;
    let bth = bound.id(&pname("bth"))?;
    let th = tape.add(th, bth)?;
    let th = apply_act_site(tape, th, &site("th_out"), quant, bound)?;
    let wtr = weight_for(tape, bound, quant, &pname("wtr"))?;
    let tr = tape.matmul(rbfq, wtr)?;
    let tr = apply_act_site(tape, tr, &site("tr_out"), quant, bound)?;
    let t_gate = tape.add(th, tr)?;

    let outer = tape.outer_rows(edges.rhat, s_gate)?;
    let h1e = tape.gather_rows(h1, edges.src.clone())?;
    let tv = tape.block_scale(h1e, t_gate)?;
    let msg1 = tape.add(outer, tv)?;
    let msg1w = tape.mul(msg1, attn.alpha)?;
    let agg1 = tape.scatter_add_rows(msg1w, edges.dst.clone(), edges.n)?;

    // norm-gated nonlinearity on the aggregated vector update
    let norms = tape.block_norms(agg1, cfg.f1)?;
    let normsq = apply_act_site(tape, norms, &site("norms_in"), quant, bound)?;
    let wg = weight_for(tape, bound, quant, &pname("wg"))?;
    let g = tape.matmul(normsq, wg)?;
    let bg = bound.id(&pname("bg"))?;
    let g = tape.add(g, bg)?;
    let g = apply_act_site(tape, g, &site("g_out"), quant, bound)?;
    let g = tape.silu(g);
    let upd = tape.block_scale(agg1, g)?;
    let updm = tape.mul(upd, edges.mask)?;
    let h1_mid = tape.add(h1, updm)?;
    let h1_out = apply_mddq_site(tape, h1_mid, &site("h1"), cfg.f1, quant, bound)?;

    Ok(LayerOut {
        h0: h0_out,
        h1: h1_out,
        cos: attn.cos,
        alpha: attn.alpha,
    })
}

/// Species embedding: learned scalar rows, zero vector features.
pub fn embed(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &ModelConfig,
    species: &[u32],
) -> Result<(TensorId, TensorId)> {
    let idx: Vec<usize> = species
        .iter()
        .map(|&z| cfg.species_index(z))
        .collect::<Result<_>>()?;
    let table = bound.id("embed")?;
    let h0 = tape.gather_rows(table, Rc::new(idx))?;
    let h1 = tape.leaf(Tensor::zeros(vec![species.len(), 3 * cfg.f1]));
    Ok((h0, h1))
}

/// Full forward pass with the per-layer attention trace exposed.
pub struct ForwardOutput {
    /// `[1,1]` total energy in eV.
    pub energy: TensorId,
    /// `[n,3]` forces in eV/A.
    pub forces: TensorId,
    pub cos: Vec<TensorId>,
    pub alpha: Vec<TensorId>,
}

pub fn model_forward(
    tape: &mut Tape,
    graph: &MolGraph,
    cfg: &ModelConfig,
    bound: &BoundParams,
    norm: &Normalizer,
    quant: &mut QuantRuntime,
) -> Result<ForwardOutput> {
    if graph.n_atoms() == 0 {
        return Err(CoreError::InvalidArgument {
            op: "model_forward",
            detail: "empty graph".into(),
        });
    }
    let n = graph.n_atoms();
    let edges = edge_inputs(tape, graph, cfg)?;
    let (mut h0, mut h1) = embed(tape, bound, cfg, &graph.species)?;
    let mut cos = Vec::with_capacity(cfg.n_layers);
    let mut alpha = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let out = layer_forward(tape, cfg, bound, quant, l, h0, h1, &edges)?;
        h0 = out.h0;
        h1 = out.h1;
        cos.push(out.cos);
        alpha.push(out.alpha);
    }

    // scalar readout head (kept unquantized)
    let we1 = bound.id("out.we1")?;
    let e1 = tape.matmul(h0, we1)?;
    let be1 = bound.id("out.be1")?;
    let e1 = tape.add(e1, be1)?;
    let e1 = tape.silu(e1);
    let we2 = bound.id("out.we2")?;
    let atomic = tape.matmul(e1, we2)?;
    let be2 = bound.id("out.be2")?;
    let atomic = tape.add(atomic, be2)?;
    let e_raw = tape.sum(atomic);
    let e_scaled = tape.scale(e_raw, norm.e_scale);
    let energy = tape.add_const(e_scaled, n as Real * norm.e_shift);

    // force head: one linear combination over vector channels (no bias, so
    // the map stays equivariant)
    let f1 = cfg.f1;
    let hr = tape.reshape(h1, vec![n * 3, f1])?;
    let wf = bound.id("out.wf")?;
    let fcol = tape.matmul(hr, wf)?;
    let f_raw = tape.reshape(fcol, vec![n, 3])?;
    let forces = tape.scale(f_raw, norm.f_scale);

    Ok(ForwardOutput {
        energy,
        forces,
        cos,
        alpha,
    })
}

/// A complete trainable or loadable model.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub norm: Normalizer,
    pub scheme: QuantScheme,
}

impl Model {
    pub fn new(cfg: ModelConfig, scheme: QuantScheme, seed: u64) -> Result<Self> {
        let params = init_params(&cfg, seed)?;
        Ok(Model {
            cfg,
            params,
            norm: Normalizer::default(),
            scheme,
        })
    }

    /// Runtime matching this model's training state: fp32 models get an
    /// empty runtime, quantized models expect frozen scales in `params`.
    pub fn runtime(&self) -> Result<QuantRuntime> {
        if self.scheme.quantizes_scalars() && self.params.contains(&act_scale_name("l0.h0_in")) {
            QuantRuntime::frozen(&self.cfg, self.scheme)
        } else {
            QuantRuntime::new(&self.cfg, self.scheme)
        }
    }

    /// Forward returning plain values: total energy (eV) and `[n,3]` forces.
    pub fn forward_values(
        &self,
        graph: &MolGraph,
        quant: &mut QuantRuntime,
    ) -> Result<(Real, Tensor)> {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &self.params);
        let out = model_forward(&mut tape, graph, &self.cfg, &bound, &self.norm, quant)?;
        Ok((
            tape.value(out.energy).item(),
            tape.value(out.forces).clone(),
        ))
    }
}
