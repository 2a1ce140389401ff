//! Subcommand implementations and report plumbing.
//!
//! Reporting convention: each table is printed once for humans and once as
//! line-delimited records `REC <table> key=value ...`. Record values use the
//! shortest round-trip float formatting, so parsing a record recovers the
//! reported numbers exactly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use equiquant::checkpoint::{load_model, save_model, Checkpoint, FORMAT_VERSION};
use equiquant::data::{gen_synthetic, parse_xyz, split, write_xyz};
use equiquant::geometry::{rotate_graph, rotate_rows, MolGraph, Rotation};
use equiquant::infer::{
    bench, convert, load_int_model, memory_report, save_int_model, ConvertedModel, IntModel,
};
use equiquant::model::{Model, QuantScheme};
use equiquant::quant::angular_error_report;
use equiquant::records::Record;
use equiquant::train::{evaluate, lee_metric, qat_train, EvalReport};
use equiquant::{CoreError, Real};

use crate::config::{parse_atoms, parse_bits, parse_train_setup};
use crate::{
    BenchArgs, Cmd, DiagMddqArgs, EvalArgs, GenDataArgs, LeeArgs, QuantizeArgs, RunError,
    TrainArgs,
};

type CmdResult = Result<(), RunError>;

/// Seed override honored by every subcommand that consumes randomness.
pub const SEED_ENV: &str = "EQUIQUANT_SEED";

pub fn dispatch(cmd: Cmd, out: &mut dyn Write) -> CmdResult {
    match cmd {
        Cmd::GenData(a) => gen_data(a, out),
        Cmd::Train(a) => train(a, out),
        Cmd::Quantize(a) => quantize(a, out),
        Cmd::Eval(a) => eval(a, out),
        Cmd::Lee(a) => lee(a, out),
        Cmd::Bench(a) => bench_cmd(a, out),
        Cmd::DiagMddq(a) => diag_mddq(a, out),
    }
}

fn resolve_seed(flag_or_config: u64) -> Result<u64, RunError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|e| RunError::Usage(format!("{SEED_ENV}='{v}': {e}"))),
        Err(std::env::VarError::NotPresent) => Ok(flag_or_config),
        Err(e) => Err(RunError::Usage(format!("{SEED_ENV}: {e}"))),
    }
}

fn kv(k: &str, v: impl std::fmt::Display) -> (String, String) {
    (k.to_string(), v.to_string())
}

/// Default manifest location: beside the subcommand's primary file, tagged
/// with the subcommand name when that file is an input rather than an output.
fn manifest_path(explicit: Option<&PathBuf>, beside: &Path, tag: Option<&str>) -> PathBuf {
    if let Some(p) = explicit {
        return p.clone();
    }
    match tag {
        Some(t) => PathBuf::from(format!("{}.{t}.manifest", beside.display())),
        None => PathBuf::from(format!("{}.manifest", beside.display())),
    }
}

fn write_manifest(
    path: &Path,
    subcommand: &str,
    seed: Option<u64>,
    config: &[(String, String)],
    artifacts: &[&Path],
) -> CmdResult {
    use std::fmt::Write as _;
    let mut s = String::new();
    let _ = writeln!(s, "subcommand={subcommand}");
    let _ = writeln!(s, "version={}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "checkpoint_format={FORMAT_VERSION}");
    if let Some(seed) = seed {
        let _ = writeln!(s, "seed={seed}");
    }
    for (k, v) in config {
        let _ = writeln!(s, "config.{k}={v}");
    }
    for (i, a) in artifacts.iter().enumerate() {
        let _ = writeln!(s, "artifact.{i}={}", a.display());
    }
    fs::write(path, s)?;
    Ok(())
}

fn rec(out: &mut dyn Write, table: &str, r: &Record) -> CmdResult {
    writeln!(out, "REC {table} {}", r.to_line())?;
    Ok(())
}

fn gen_data(a: GenDataArgs, out: &mut dyn Write) -> CmdResult {
    let (lo, hi) = parse_atoms(&a.atoms).ok_or_else(|| {
        RunError::Usage(format!("--atoms '{}' is not of the form LO..HI", a.atoms))
    })?;
    let seed = resolve_seed(a.seed)?;
    let ds = gen_synthetic(a.n, lo..=hi, seed)?;
    fs::write(&a.out, write_xyz(&ds.graphs)?)?;
    writeln!(
        out,
        "wrote {} molecules ({lo}..={hi} atoms, seed {seed}) to {}",
        ds.graphs.len(),
        a.out.display()
    )?;
    let mut r = Record::new();
    r.push("molecules", ds.graphs.len())
        .push("atoms_lo", lo)
        .push("atoms_hi", hi)
        .push("seed", seed);
    rec(out, "gen-data", &r)?;

    let mpath = manifest_path(a.manifest.as_ref(), &a.out, None);
    let cfg = vec![
        kv("out", a.out.display()),
        kv("n", a.n),
        kv("atoms", format!("{lo}..={hi}")),
    ];
    write_manifest(&mpath, "gen-data", Some(seed), &cfg, &[&a.out])
}

fn train(a: TrainArgs, out: &mut dyn Write) -> CmdResult {
    let mut setup = parse_train_setup(&fs::read_to_string(&a.config)?)?;
    if let Some(s) = &a.scheme {
        setup.train.scheme = QuantScheme::parse(s)?;
    }
    setup.train.seed = resolve_seed(setup.train.seed)?;

    let ds = parse_xyz(&fs::read_to_string(&setup.data)?, setup.model.cutoff)?;
    let (tr, va, te) = split(&ds.graphs, setup.fractions, setup.train.seed)?;
    writeln!(
        out,
        "training on {} molecules ({} val, {} test), scheme {}, seed {}",
        tr.len(),
        va.len(),
        te.len(),
        setup.train.scheme,
        setup.train.seed
    )?;

    let (model, log) = qat_train(&setup.model, &setup.train, &tr, &va)?;
    for r in &log.records {
        writeln!(
            out,
            "epoch {:>4}  e_mae {:>10.3} meV  f_mae {:>10.3} meV/A  lee {:>10.4} meV/A  loss {:>12.6}",
            r.epoch, r.e_mae_mev, r.f_mae_mev_a, r.lee_mev_a, r.loss
        )?;
        writeln!(out, "REC epoch {}", r.to_line())?;
    }

    // held-out metrics with a seed decoupled from the training stream
    let mut rt = model.runtime()?;
    rt.collecting = false;
    let k = setup.train.n_lee_rotations.max(1);
    let rep = evaluate(
        &model,
        &mut rt,
        &te,
        k,
        setup.train.seed.wrapping_add(1),
    )?;
    print_eval(out, "test", &rep, te.len(), k)?;

    save_model(&model)?.save(&a.out)?;
    let log_path = PathBuf::from(format!("{}.log", a.out.display()));
    fs::write(&log_path, log.to_text())?;
    writeln!(
        out,
        "wrote checkpoint {} and epoch log {}",
        a.out.display(),
        log_path.display()
    )?;

    let mpath = manifest_path(a.manifest.as_ref(), &a.out, None);
    let mut cfg = setup.entries();
    cfg.push(kv("config", a.config.display()));
    cfg.push(kv("out", a.out.display()));
    write_manifest(
        &mpath,
        "train",
        Some(setup.train.seed),
        &cfg,
        &[&a.out, &log_path],
    )
}

fn print_eval(
    out: &mut dyn Write,
    table: &str,
    rep: &EvalReport,
    molecules: usize,
    rotations: usize,
) -> CmdResult {
    writeln!(out, "{table} metrics over {molecules} molecules:")?;
    writeln!(out, "  energy MAE  {:>14.4} meV", rep.e_mae_mev)?;
    writeln!(out, "  force MAE   {:>14.4} meV/A", rep.f_mae_mev_a)?;
    writeln!(
        out,
        "  LEE         {:>14.6} meV/A ({rotations} rotations)",
        rep.lee_mev_a
    )?;
    let mut r = Record::new();
    r.push("molecules", molecules)
        .push("rotations", rotations)
        .push("e_mae_mev", rep.e_mae_mev)
        .push("f_mae_mev_a", rep.f_mae_mev_a)
        .push("lee_mev_a", rep.lee_mev_a);
    rec(out, table, &r)
}

fn quantize(a: QuantizeArgs, out: &mut dyn Write) -> CmdResult {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    if ckpt.config_value("kind")? != "float" {
        return Err(CoreError::CheckpointFormat(
            "quantize expects a float training checkpoint as input".into(),
        )
        .into());
    }
    let model = load_model(&ckpt)?;
    let scheme = model.scheme;
    let cm = convert(&model)?;
    match &cm {
        ConvertedModel::Float(m) => save_model(m)?,
        ConvertedModel::Int(im) => save_int_model(im)?,
    }
    .save(&a.out)?;

    let mem = memory_report(&cm);
    writeln!(out, "{:<12} {:>12} {:>12}", "tensor", "fp32_bytes", "quant_bytes")?;
    for row in &mem.rows {
        writeln!(
            out,
            "{:<12} {:>12} {:>12}",
            row.name, row.fp32_bytes, row.quant_bytes
        )?;
    }
    writeln!(
        out,
        "{:<12} {:>12} {:>12}   ratio {:.6}",
        "total", mem.fp32_bytes, mem.quant_bytes, mem.ratio
    )?;
    for row in &mem.rows {
        let mut r = Record::new();
        r.push("name", &row.name)
            .push("fp32_bytes", row.fp32_bytes)
            .push("quant_bytes", row.quant_bytes);
        rec(out, "memory", &r)?;
    }
    let mut r = Record::new();
    r.push("scheme", scheme.name())
        .push("tensors", mem.rows.len())
        .push("fp32_bytes", mem.fp32_bytes)
        .push("quant_bytes", mem.quant_bytes)
        .push("ratio", mem.ratio);
    rec(out, "quantize", &r)?;
    let kind = match &cm {
        ConvertedModel::Float(_) => "float",
        ConvertedModel::Int(_) => "integer",
    };
    writeln!(out, "wrote {kind} checkpoint {}", a.out.display())?;

    let mpath = manifest_path(a.manifest.as_ref(), &a.out, None);
    let cfg = vec![kv("ckpt", a.ckpt.display()), kv("out", a.out.display())];
    write_manifest(&mpath, "quantize", None, &cfg, &[&a.out])
}

/// A checkpoint opened without knowing which inference path it holds.
enum LoadedModel {
    Float(Box<Model>),
    Int(Box<IntModel>),
}

impl LoadedModel {
    fn load(path: &Path) -> Result<LoadedModel, RunError> {
        let ckpt = Checkpoint::load(path)?;
        match ckpt.config_value("kind")? {
            "float" => Ok(LoadedModel::Float(Box::new(load_model(&ckpt)?))),
            "int" => Ok(LoadedModel::Int(Box::new(load_int_model(&ckpt)?))),
            other => Err(CoreError::CheckpointFormat(format!(
                "unknown checkpoint kind '{other}'"
            ))
            .into()),
        }
    }

    fn cutoff(&self) -> Real {
        match self {
            LoadedModel::Float(m) => m.cfg.cutoff,
            LoadedModel::Int(im) => im.cfg.cutoff,
        }
    }

    fn scheme(&self) -> QuantScheme {
        match self {
            LoadedModel::Float(m) => m.scheme,
            LoadedModel::Int(im) => im.scheme,
        }
    }
}

fn missing_refs() -> CoreError {
    CoreError::Config("dataset molecule lacks reference labels".into())
}

/// Integer-path twin of the float evaluator: same metric arithmetic, same
/// per-molecule rotation stream.
fn eval_int(
    im: &IntModel,
    graphs: &[MolGraph],
    k_rotations: usize,
    seed: u64,
) -> Result<EvalReport, RunError> {
    if graphs.is_empty() {
        return Err(CoreError::EmptyDataset.into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut e_sum = 0.0;
    let mut f_sum = 0.0;
    let mut lee_sum = 0.0;
    for g in graphs {
        let e_ref = g.ref_energy.ok_or_else(missing_refs)?;
        let f_ref = g.ref_forces.as_ref().ok_or_else(missing_refs)?;
        let (e, f) = im.forward(g)?;
        e_sum += (e - e_ref).abs();
        let mut mol = 0.0;
        for (i, fr) in f_ref.iter().enumerate() {
            for k in 0..3 {
                mol += (f.at(i, k) - fr[k]).abs();
            }
        }
        f_sum += mol / (3 * g.n_atoms()) as Real;
        if k_rotations > 0 {
            let rotations: Vec<Rotation> = (0..k_rotations)
                .map(|_| Rotation::random(&mut rng))
                .collect();
            lee_sum += lee_int(im, g, &rotations)?;
        }
    }
    let n = graphs.len() as Real;
    Ok(EvalReport {
        e_mae_mev: e_sum / n * 1000.0,
        f_mae_mev_a: f_sum / n * 1000.0,
        lee_mev_a: lee_sum / n,
    })
}

fn lee_int(im: &IntModel, graph: &MolGraph, rotations: &[Rotation]) -> Result<Real, RunError> {
    if rotations.is_empty() {
        return Err(CoreError::InvalidArgument {
            op: "lee",
            detail: "at least one rotation required".into(),
        }
        .into());
    }
    let (_, f_base) = im.forward(graph)?;
    let mut total = 0.0;
    for rot in rotations {
        let rg = rotate_graph(graph, rot);
        let (_, f_rot_graph) = im.forward(&rg)?;
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

fn eval(a: EvalArgs, out: &mut dyn Write) -> CmdResult {
    let seed = resolve_seed(a.seed)?;
    let lm = LoadedModel::load(&a.ckpt)?;
    let ds = parse_xyz(&fs::read_to_string(&a.data)?, lm.cutoff())?;
    let rep = match &lm {
        LoadedModel::Float(m) => {
            let mut rt = m.runtime()?;
            rt.collecting = false;
            evaluate(m, &mut rt, &ds.graphs, a.rotations, seed)?
        }
        LoadedModel::Int(im) => eval_int(im, &ds.graphs, a.rotations, seed)?,
    };
    writeln!(
        out,
        "checkpoint {} (scheme {}), data {}",
        a.ckpt.display(),
        lm.scheme(),
        a.data.display()
    )?;
    print_eval(out, "eval", &rep, ds.graphs.len(), a.rotations)?;

    let mpath = manifest_path(a.manifest.as_ref(), &a.ckpt, Some("eval"));
    let cfg = vec![
        kv("ckpt", a.ckpt.display()),
        kv("data", a.data.display()),
        kv("rotations", a.rotations),
    ];
    write_manifest(&mpath, "eval", Some(seed), &cfg, &[])
}

fn lee(a: LeeArgs, out: &mut dyn Write) -> CmdResult {
    if a.rotations == 0 {
        return Err(RunError::Usage("--rotations must be at least 1".into()));
    }
    let seed = resolve_seed(a.seed)?;
    let lm = LoadedModel::load(&a.ckpt)?;
    let ds = parse_xyz(&fs::read_to_string(&a.data)?, lm.cutoff())?;
    if ds.graphs.is_empty() {
        return Err(CoreError::EmptyDataset.into());
    }
    let mut rt = match &lm {
        LoadedModel::Float(m) => {
            let mut q = m.runtime()?;
            q.collecting = false;
            Some(q)
        }
        LoadedModel::Int(_) => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mean = 0.0;
    for (i, g) in ds.graphs.iter().enumerate() {
        let rotations: Vec<Rotation> = (0..a.rotations)
            .map(|_| Rotation::random(&mut rng))
            .collect();
        let v = match &lm {
            LoadedModel::Float(m) => lee_metric(m, rt.as_mut().expect("float runtime"), g, &rotations)?,
            LoadedModel::Int(im) => lee_int(im, g, &rotations)?,
        };
        writeln!(out, "mol {i:>4}  atoms {:>3}  lee {v:>12.6} meV/A", g.n_atoms())?;
        let mut r = Record::new();
        r.push("mol", i).push("n_atoms", g.n_atoms()).push("lee_mev_a", v);
        rec(out, "lee", &r)?;
        mean += v;
    }
    mean /= ds.graphs.len() as Real;
    writeln!(
        out,
        "mean LEE over {} molecules: {mean:.6} meV/A",
        ds.graphs.len()
    )?;
    let mut r = Record::new();
    r.push("molecules", ds.graphs.len())
        .push("rotations", a.rotations)
        .push("mean_lee_mev_a", mean);
    rec(out, "lee-summary", &r)?;

    let mpath = manifest_path(a.manifest.as_ref(), &a.ckpt, Some("lee"));
    let cfg = vec![
        kv("ckpt", a.ckpt.display()),
        kv("data", a.data.display()),
        kv("rotations", a.rotations),
    ];
    write_manifest(&mpath, "lee", Some(seed), &cfg, &[])
}

fn bench_cmd(a: BenchArgs, out: &mut dyn Write) -> CmdResult {
    let fckpt = Checkpoint::load(&a.ckpt_fp32)?;
    if fckpt.config_value("kind")? != "float" {
        return Err(CoreError::CheckpointFormat(
            "--ckpt-fp32 expects a float checkpoint".into(),
        )
        .into());
    }
    let fmodel = load_model(&fckpt)?;
    if fmodel.scheme != QuantScheme::Fp32 {
        return Err(CoreError::Config(format!(
            "--ckpt-fp32 expects scheme fp32, got {}",
            fmodel.scheme
        ))
        .into());
    }
    let ickpt = Checkpoint::load(&a.ckpt_int)?;
    if ickpt.config_value("kind")? != "int" {
        return Err(CoreError::CheckpointFormat(
            "--ckpt-int expects an integer checkpoint (run quantize first)".into(),
        )
        .into());
    }
    let imodel = load_int_model(&ickpt)?;

    let seed = resolve_seed(0)?;
    let graph = match &a.data {
        Some(p) => {
            let ds = parse_xyz(&fs::read_to_string(p)?, fmodel.cfg.cutoff)?;
            ds.graphs.into_iter().next().ok_or(CoreError::EmptyDataset)?
        }
        None => gen_synthetic(1, 12..=12, seed)?.graphs.remove(0),
    };
    let int_name = imodel.scheme.name().to_string();
    let variants = vec![
        ("fp32".to_string(), ConvertedModel::Float(fmodel)),
        (int_name, ConvertedModel::Int(Box::new(imodel))),
    ];
    let results = bench(&variants, &graph, a.runs)?;

    writeln!(
        out,
        "workload: {} atoms, {} timed runs per variant",
        graph.n_atoms(),
        a.runs
    )?;
    writeln!(
        out,
        "{:<12} {:>12} {:>12} {:>9} {:>14}",
        "variant", "median_us", "mean_us", "speedup", "weight_bytes"
    )?;
    for r in &results {
        writeln!(
            out,
            "{:<12} {:>12.1} {:>12.1} {:>9.2} {:>14}",
            r.name, r.median_us, r.mean_us, r.speedup, r.memory_bytes
        )?;
    }
    for r in &results {
        let mut rr = Record::new();
        rr.push("name", &r.name)
            .push("median_us", r.median_us)
            .push("mean_us", r.mean_us)
            .push("speedup", r.speedup)
            .push("memory_bytes", r.memory_bytes);
        rec(out, "bench", &rr)?;
    }

    let mpath = manifest_path(a.manifest.as_ref(), &a.ckpt_int, Some("bench"));
    let mut cfg = vec![
        kv("ckpt_fp32", a.ckpt_fp32.display()),
        kv("ckpt_int", a.ckpt_int.display()),
        kv("runs", a.runs),
        kv("n_atoms", graph.n_atoms()),
    ];
    if let Some(p) = &a.data {
        cfg.push(kv("data", p.display()));
    }
    write_manifest(&mpath, "bench", Some(seed), &cfg, &[])
}

fn diag_mddq(a: DiagMddqArgs, out: &mut dyn Write) -> CmdResult {
    let bits = parse_bits(&a.bits).ok_or_else(|| {
        RunError::Usage(format!(
            "--bits '{}' is not a comma-separated list of bit widths",
            a.bits
        ))
    })?;
    let seed = resolve_seed(a.seed)?;
    writeln!(
        out,
        "{:>4} {:>10} {:>16} {:>14}",
        "bits", "quantizer", "mean_angle_deg", "mean_cosine"
    )?;
    // samples == 0 is a legal request for an empty table
    if a.samples > 0 {
        let rows = angular_error_report(&bits, a.samples, seed)?;
        for row in &rows {
            writeln!(
                out,
                "{:>4} {:>10} {:>16.6} {:>14.8}",
                row.bits, row.quantizer, row.mean_angle_deg, row.mean_cosine
            )?;
        }
        for row in &rows {
            let mut r = Record::new();
            r.push("bits", row.bits)
                .push("quantizer", row.quantizer)
                .push("mean_angle_deg", row.mean_angle_deg)
                .push("mean_cosine", row.mean_cosine);
            rec(out, "mddq", &r)?;
        }
    }

    let bits_str = bits
        .iter()
        .map(u8::to_string)
        .collect::<Vec<_>>()
        .join(",");
    let mpath = manifest_path(a.manifest.as_ref(), Path::new("diag-mddq"), None);
    let cfg = vec![kv("bits", bits_str), kv("samples", a.samples)];
    write_manifest(&mpath, "diag-mddq", Some(seed), &cfg, &[])
}
