//! Staged quantization-aware training.
//!
//! Stage structure: one calibration sweep initializes every scalar grid, the
//! scalar quantizers run from the first epoch, and the vector quantizers sit
//! idle through a warm-up (while their magnitude observers keep collecting)
//! before switching on with learnable step sizes. After the warm-up a
//! rotation-consistency penalty on predicted forces can join the loss for
//! schemes that quantize the vector stream.
//!
//! Everything is driven by one seeded generator with a fixed reduction order,
//! so a config + seed pair reproduces its training log bit for bit.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::geometry::{rotate_graph, rotate_rows, MolGraph, Rotation};
use crate::model::{
    model_forward, BoundParams, Model, ModelConfig, Normalizer, ParamSet, QuantRuntime,
    QuantScheme,
};
use crate::records::Record;
use crate::tape::{Tape, TensorId};
use crate::tensor::{Real, Tensor};

/// Step sizes never shrink below this after an optimizer step.
pub const MIN_STEP_SIZE: Real = 1e-8;

/// Molecules used for the pre-training calibration sweep.
const CALIBRATION_MOLECULES: usize = 32;

/// Validation molecules and rotations per epoch used for the logged
/// equivariance-error column (the post-training report uses more).
const LOG_LEE_MOLECULES: usize = 8;
const LOG_LEE_ROTATIONS: usize = 2;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: Real,
    pub lambda_e: Real,
    pub lambda_f: Real,
    pub lambda_lee: Real,
    /// Random rotations drawn per batch for the equivariance penalty.
    pub n_lee_rotations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub scheme: QuantScheme,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            warmup_epochs: 5,
            lr: 1e-4,
            lambda_e: 1.0,
            lambda_f: 10.0,
            lambda_lee: 0.01,
            n_lee_rotations: 1,
            batch_size: 8,
            seed: 7,
            scheme: QuantScheme::Fp32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return Err(CoreError::Config(format!(
                "warmup_epochs ({}) must be smaller than epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.lambda_e < 0.0 || self.lambda_f < 0.0 || self.lambda_lee < 0.0 {
            return Err(CoreError::Config("loss weights must be >= 0".into()));
        }
        if self.batch_size == 0 || self.n_lee_rotations == 0 {
            return Err(CoreError::Config(
                "batch_size and n_lee_rotations must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One training-log row. Error columns are validation metrics; `loss` is the
/// epoch's mean training batch loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub e_mae_mev: Real,
    pub f_mae_mev_a: Real,
    pub lee_mev_a: Real,
    pub loss: Real,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        let mut r = Record::new();
        r.push("epoch", self.epoch)
            .push("e_mae_mev", self.e_mae_mev)
            .push("f_mae_mev_a", self.f_mae_mev_a)
            .push("lee_mev_a", self.lee_mev_a)
            .push("loss", self.loss);
        r.to_line()
    }

    pub fn parse(line: &str) -> Result<EpochRecord> {
        let r = Record::parse(line)?;
        let epoch = r
            .get("epoch")
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| CoreError::Config(format!("bad epoch field in '{line}'")))?;
        Ok(EpochRecord {
            epoch,
            e_mae_mev: r.get_real("e_mae_mev")?,
            f_mae_mev_a: r.get_real("f_mae_mev_a")?,
            lee_mev_a: r.get_real("lee_mev_a")?,
            loss: r.get_real("loss")?,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&r.to_line());
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<TrainLog> {
        let mut records = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            records.push(EpochRecord::parse(line)?);
        }
        Ok(TrainLog { records })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub e_mae_mev: Real,
    pub f_mae_mev_a: Real,
    pub lee_mev_a: Real,
}

/// Adam with per-parameter slots keyed by name, so step sizes created at a
/// stage boundary join cleanly mid-run.
struct Adam {
    lr: Real,
    b1: Real,
    b2: Real,
    eps: Real,
    slots: HashMap<String, (u64, Tensor, Tensor)>,
}

impl Adam {
    fn new(lr: Real) -> Self {
        Adam {
            lr,
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
            slots: HashMap::new(),
        }
    }

    /// Applies one update in parameter order; `grads[i]` pairs with parameter
    /// index `i`. Missing gradients leave the parameter untouched.
    fn step(&mut self, params: &mut ParamSet, grads: &[Option<&Tensor>]) {
        for i in 0..params.len() {
            let Some(g) = grads[i] else { continue };
            let name = params.names()[i].clone();
            let p = params.tensor_at_mut(i);
            let (t, m, v) = self.slots.entry(name.clone()).or_insert_with(|| {
                (
                    0,
                    Tensor::zeros(p.shape().to_vec()),
                    Tensor::zeros(p.shape().to_vec()),
                )
            });
            *t += 1;
            let bc1 = 1.0 - self.b1.powi(*t as i32);
            let bc2 = 1.0 - self.b2.powi(*t as i32);
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for j in 0..pd.len() {
                let gj = g.data()[j];
                md[j] = self.b1 * md[j] + (1.0 - self.b1) * gj;
                vd[j] = self.b2 * vd[j] + (1.0 - self.b2) * gj * gj;
                let mh = md[j] / bc1;
                let vh = vd[j] / bc2;
                pd[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            if name.starts_with("q.") {
                for x in pd {
                    if *x < MIN_STEP_SIZE {
                        *x = MIN_STEP_SIZE;
                    }
                }
            }
        }
    }
}

fn require_refs(graph: &MolGraph) -> Result<(Real, &Vec<[Real; 3]>)> {
    let e = graph.ref_energy.ok_or(CoreError::InvalidArgument {
        op: "loss",
        detail: "reference energy missing".into(),
    })?;
    let f = graph.ref_forces.as_ref().ok_or(CoreError::InvalidArgument {
        op: "loss",
        detail: "reference forces missing".into(),
    })?;
    Ok((e, f))
}

fn forces_leaf(tape: &mut Tape, forces: &[[Real; 3]]) -> TensorId {
    let data: Vec<Real> = forces.iter().flat_map(|f| f.iter().copied()).collect();
    tape.leaf(Tensor::new(vec![forces.len(), 3], data).expect("rows of three"))
}

/// Per-molecule task terms on the tape: `lambda_e |dE|` and the per-component
/// force MAE scaled by `lambda_f`. Returns (energy term, force term, forces id).
fn molecule_task_terms(
    tape: &mut Tape,
    model: &Model,
    bound: &BoundParams,
    quant: &mut QuantRuntime,
    graph: &MolGraph,
    lambda_e: Real,
    lambda_f: Real,
) -> Result<(TensorId, TensorId, TensorId)> {
    let (e_ref, f_ref) = require_refs(graph)?;
    let out = model_forward(tape, graph, &model.cfg, bound, &model.norm, quant)?;
    let e_leaf = tape.leaf(Tensor::scalar(e_ref));
    let de = tape.sub(out.energy, e_leaf)?;
    let ade = tape.abs(de);
    let e_term = tape.scale(ade, lambda_e);
    let f_leaf = forces_leaf(tape, f_ref);
    let df = tape.sub(out.forces, f_leaf)?;
    let adf = tape.abs(df);
    let f_mae = tape.mean(adf);
    let f_term = tape.scale(f_mae, lambda_f);
    Ok((e_term, f_term, out.forces))
}

/// Rotation-consistency term for one molecule: mean per-atom distance between
/// forces predicted on the rotated graph and the rotated predictions
/// (eV/A on the tape; reports convert to meV/A).
fn molecule_lee_term(
    tape: &mut Tape,
    model: &Model,
    bound: &BoundParams,
    quant: &mut QuantRuntime,
    graph: &MolGraph,
    forces: TensorId,
    rotation: &Rotation,
) -> Result<TensorId> {
    let rg = rotate_graph(graph, rotation);
    let out_r = model_forward(tape, &rg, &model.cfg, bound, &model.norm, quant)?;
    let m = rotation.matrix();
    // row-vector convention: (R f)ᵀ = fᵀ Rᵀ
    let rt = tape.leaf(Tensor::new(
        vec![3, 3],
        vec![
            m[0][0], m[1][0], m[2][0], m[0][1], m[1][1], m[2][1], m[0][2], m[1][2], m[2][2],
        ],
    )?);
    let f_rot = tape.matmul(forces, rt)?;
    let diff = tape.sub(out_r.forces, f_rot)?;
    let norms = tape.l2_norm_last_axis(diff)?;
    Ok(tape.mean(norms))
}

fn mean_ids(tape: &mut Tape, ids: &[TensorId]) -> TensorId {
    let mut acc = ids[0];
    for &id in &ids[1..] {
        acc = tape.add(acc, id).expect("scalar accumulation");
    }
    tape.scale(acc, 1.0 / ids.len() as Real)
}

/// Exact equivariance deviation of the force head in meV/A, averaged over the
/// given rotations. Computed on plain values with no epsilon floor, so an
/// exactly equivariant model reports exactly zero.
pub fn lee_metric(
    model: &Model,
    quant: &mut QuantRuntime,
    graph: &MolGraph,
    rotations: &[Rotation],
) -> Result<Real> {
    if rotations.is_empty() {
        return Err(CoreError::InvalidArgument {
            op: "lee_metric",
            detail: "at least one rotation required".into(),
        });
    }
    let (_, f_base) = model.forward_values(graph, quant)?;
    let mut total = 0.0;
    for rot in rotations {
        let rg = rotate_graph(graph, rot);
        let (_, f_rot_graph) = model.forward_values(&rg, quant)?;
        let f_rotated = rotate_rows(&f_base, rot)?;
        let n = graph.n_atoms();
        let mut mol = 0.0;
        for i in 0..n {
            let mut s = 0.0;
            for k in 0..3 {
                let d = f_rot_graph.at(i, k) - f_rotated.at(i, k);
                s += d * d;
            }
            mol += s.sqrt();
        }
        total += mol / n as Real;
    }
    Ok(total / rotations.len() as Real * 1000.0)
}

/// Validation metrics: energy MAE (meV), per-component force MAE (meV/A), and
/// the equivariance error over `k_rotations` fresh seeded rotations per
/// molecule.
pub fn evaluate(
    model: &Model,
    quant: &mut QuantRuntime,
    graphs: &[MolGraph],
    k_rotations: usize,
    seed: u64,
) -> Result<EvalReport> {
    if graphs.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut e_sum = 0.0;
    let mut f_sum = 0.0;
    let mut lee_sum = 0.0;
    for g in graphs {
        let (e_ref, f_ref) = require_refs(g)?;
        let (e, f) = model.forward_values(g, quant)?;
        e_sum += (e - e_ref).abs();
        let mut mol = 0.0;
        for (i, fr) in f_ref.iter().enumerate() {
            for k in 0..3 {
                mol += (f.at(i, k) - fr[k]).abs();
            }
        }
        f_sum += mol / (3 * g.n_atoms()) as Real;
        if k_rotations > 0 {
            let rotations: Vec<Rotation> =
                (0..k_rotations).map(|_| Rotation::random(&mut rng)).collect();
            lee_sum += lee_metric(model, quant, g, &rotations)?;
        }
    }
    let n = graphs.len() as Real;
    Ok(EvalReport {
        e_mae_mev: e_sum / n * 1000.0,
        f_mae_mev_a: f_sum / n * 1000.0,
        lee_mev_a: lee_sum / n,
    })
}

fn check_finite(epoch: usize, term: &'static str, value: Real) -> Result<()> {
    if !value.is_finite() {
        return Err(CoreError::NanLoss { epoch, term });
    }
    Ok(())
}

/// Trains a fresh model under the staged schedule and returns it with its
/// per-epoch log. `train` and `val` must both be non-empty and carry
/// reference energies and forces.
pub fn qat_train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train: &[MolGraph],
    val: &[MolGraph],
) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(CoreError::EmptyDataset);
    }

    let mut model = Model::new(model_cfg.clone(), cfg.scheme, cfg.seed)?;
    let train_refs: Vec<&MolGraph> = train.iter().collect();
    model.norm = Normalizer::fit(&train_refs)?;
    let mut quant = QuantRuntime::new(model_cfg, cfg.scheme)?;

    // calibration sweep, then scalar grids go live for epoch 0
    if cfg.scheme.quantizes_scalars() {
        for g in train.iter().take(CALIBRATION_MOLECULES) {
            model.forward_values(g, &mut quant)?;
        }
        quant.freeze_scalar_sites(&mut model.params)?;
    }

    let mut adam = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        if epoch == cfg.warmup_epochs {
            if cfg.scheme.quantizes_vectors() {
                quant.freeze_vector_sites(&mut model.params)?;
            }
            quant.collecting = false;
        }
        let lee_active = cfg.scheme.quantizes_vectors() && epoch >= cfg.warmup_epochs;

        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let rotations: Vec<Rotation> = if lee_active {
                (0..cfg.n_lee_rotations)
                    .map(|_| Rotation::random(&mut rng))
                    .collect()
            } else {
                Vec::new()
            };

            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &model.params);
            let mut e_terms = Vec::with_capacity(batch.len());
            let mut f_terms = Vec::with_capacity(batch.len());
            let mut lee_terms = Vec::new();
            for &gi in batch {
                let g = &train[gi];
                let (e_term, f_term, forces) = molecule_task_terms(
                    &mut tape,
                    &model,
                    &bound,
                    &mut quant,
                    g,
                    cfg.lambda_e,
                    cfg.lambda_f,
                )?;
                e_terms.push(e_term);
                f_terms.push(f_term);
                for rot in &rotations {
                    lee_terms.push(molecule_lee_term(
                        &mut tape, &model, &bound, &mut quant, g, forces, rot,
                    )?);
                }
            }
            let e_mean = mean_ids(&mut tape, &e_terms);
            let f_mean = mean_ids(&mut tape, &f_terms);
            check_finite(epoch, "energy", tape.value(e_mean).item())?;
            check_finite(epoch, "force", tape.value(f_mean).item())?;
            let mut loss = tape.add(e_mean, f_mean)?;
            if !lee_terms.is_empty() {
                let lee_mean = mean_ids(&mut tape, &lee_terms);
                check_finite(epoch, "lee", tape.value(lee_mean).item())?;
                let weighted = tape.scale(lee_mean, cfg.lambda_lee);
                loss = tape.add(loss, weighted)?;
            }
            check_finite(epoch, "total", tape.value(loss).item())?;
            loss_sum += tape.value(loss).item();
            n_batches += 1.0;

            let grads = tape.backward(loss)?;
            let grad_list: Vec<Option<&Tensor>> =
                bound.ids().iter().map(|&id| grads.get(id)).collect();
            adam.step(&mut model.params, &grad_list);
        }

        // validation metrics with observers paused
        let was_collecting = quant.collecting;
        quant.collecting = false;
        let val_eval = evaluate(&model, &mut quant, val, 0, 0)?;
        let lee_subset = &val[0..val.len().min(LOG_LEE_MOLECULES)];
        let lee_eval = evaluate(
            &model,
            &mut quant,
            lee_subset,
            LOG_LEE_ROTATIONS,
            cfg.seed.wrapping_add(0x1ee + epoch as u64),
        )?;
        quant.collecting = was_collecting;

        log.records.push(EpochRecord {
            epoch,
            e_mae_mev: val_eval.e_mae_mev,
            f_mae_mev_a: val_eval.f_mae_mev_a,
            lee_mev_a: lee_eval.lee_mev_a,
            loss: loss_sum / n_batches,
        });
    }

    Ok((model, log))
}
