//! End-to-end subcommand tests, driven in-process through `run_with_output`
//! (and through the real binary where environment isolation matters).

use std::fs;
use std::path::Path;
use std::process::Command;

use equiquant::checkpoint::{load_model, Checkpoint};
use equiquant::records::Record;
use equiquant::train::{evaluate, TrainLog};
use equiquant_cli::run_with_output;
use tempfile::tempdir;

fn run(args: &[&str]) -> (i32, String) {
    let argv: Vec<String> = std::iter::once("equiquant")
        .chain(args.iter().copied())
        .map(str::to_string)
        .collect();
    let mut buf = Vec::new();
    let code = run_with_output(&argv, &mut buf);
    (code, String::from_utf8(buf).expect("utf8 output"))
}

/// All `REC <table> ...` lines of one table, parsed.
fn recs(output: &str, table: &str) -> Vec<Record> {
    let prefix = format!("REC {table} ");
    output
        .lines()
        .filter_map(|l| l.strip_prefix(prefix.as_str()))
        .map(|rest| Record::parse(rest).expect("parsable record"))
        .collect()
}

fn manifest_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .expect("manifest exists")
        .lines()
        .map(str::to_string)
        .collect()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(run(&["--help"]).0, 0);
    assert_eq!(run(&["--version"]).0, 0);
    assert_eq!(run(&["gen-data", "--help"]).0, 0);
}

#[test]
fn usage_errors_exit_one() {
    // unknown subcommand / unknown flag / missing required flag
    assert_eq!(run(&["frobnicate"]).0, 1);
    assert_eq!(run(&["gen-data", "--bogus", "1"]).0, 1);
    assert_eq!(run(&["gen-data", "--n", "3"]).0, 1);
    // constrained flag values
    let dir = tempdir().unwrap();
    let out = dir.path().join("x.xyz");
    let out_s = out.to_str().unwrap();
    assert_eq!(
        run(&["gen-data", "--out", out_s, "--n", "2", "--atoms", "banana", "--seed", "1"]).0,
        1
    );
    assert_eq!(
        run(&["train", "--config", "c", "--scheme", "int7", "--out", "m"]).0,
        1
    );
    let m = dir.path().join("diag.manifest");
    assert_eq!(
        run(&[
            "diag-mddq",
            "--bits",
            "4,banana",
            "--samples",
            "10",
            "--manifest",
            m.to_str().unwrap(),
        ])
        .0,
        1
    );
}

#[test]
fn data_errors_exit_two() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("x.xyz");
    let out_s = out.to_str().unwrap();
    // atom range outside the generator's 2..=32 domain
    assert_eq!(
        run(&["gen-data", "--out", out_s, "--n", "2", "--atoms", "1..40", "--seed", "1"]).0,
        2
    );
    // missing files
    assert_eq!(
        run(&["eval", "--ckpt", "absent.ckpt", "--data", "absent.xyz"]).0,
        2
    );
    assert_eq!(
        run(&["train", "--config", "absent.cfg", "--out", out_s]).0,
        2
    );
    // config typo is rejected, not ignored
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "data=x.xyz\nepohcs=3\n").unwrap();
    assert_eq!(
        run(&["train", "--config", cfg.to_str().unwrap(), "--out", out_s]).0,
        2
    );
}

#[test]
fn gen_data_writes_dataset_and_manifest() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("data.xyz");
    let out_s = out.to_str().unwrap();
    let (code, stdout) = run(&[
        "gen-data", "--out", out_s, "--n", "6", "--atoms", "3..5", "--seed", "7",
    ]);
    assert_eq!(code, 0, "stdout:\n{stdout}");

    let ds = equiquant::data::parse_xyz(&fs::read_to_string(&out).unwrap(), 5.0).unwrap();
    assert_eq!(ds.graphs.len(), 6);
    assert!(ds
        .graphs
        .iter()
        .all(|g| (3..=5).contains(&g.n_atoms()) && g.ref_forces.is_some()));

    let r = &recs(&stdout, "gen-data")[0];
    assert_eq!(r.get("molecules"), Some("6"));
    assert_eq!(r.get("atoms_lo"), Some("3"));
    assert_eq!(r.get("atoms_hi"), Some("5"));

    let lines = manifest_lines(&dir.path().join("data.xyz.manifest"));
    assert!(lines.contains(&"subcommand=gen-data".to_string()));
    assert!(lines.contains(&"seed=7".to_string()));
    assert!(lines.contains(&"config.atoms=3..=5".to_string()));
    assert!(lines.contains(&format!("artifact.0={out_s}")));
}

fn write_config(path: &Path, data: &Path, scheme: &str) -> String {
    let text = format!(
        "data={}\n\
         f0=8\nf1=8\nn_layers=1\nn_rbf=8\nd_attn=8\ncutoff=5.0\nspecies=1,6\n\
         epochs=2\nwarmup_epochs=1\nlr=0.001\nbatch_size=4\nn_lee_rotations=1\n\
         seed=3\nscheme={scheme}\n\
         frac_train=0.7\nfrac_val=0.15\nfrac_test=0.15\n",
        data.display()
    );
    fs::write(path, &text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn pipeline_train_quantize_eval_lee_bench() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data.xyz");
    let (code, _) = run(&[
        "gen-data",
        "--out",
        data.to_str().unwrap(),
        "--n",
        "14",
        "--atoms",
        "4..6",
        "--seed",
        "3",
    ]);
    assert_eq!(code, 0);

    // --- train the int8-full model ---
    let cfg = write_config(&dir.path().join("train.cfg"), &data, "fp32");
    let ckpt = dir.path().join("m.ckpt");
    let ckpt_s = ckpt.to_str().unwrap().to_string();
    let (code, stdout) = run(&[
        "train", "--config", &cfg, "--scheme", "int8-full", "--out", &ckpt_s,
    ]);
    assert_eq!(code, 0, "stdout:\n{stdout}");
    assert_eq!(recs(&stdout, "epoch").len(), 2);
    assert_eq!(recs(&stdout, "test").len(), 1);

    let log_text = fs::read_to_string(format!("{ckpt_s}.log")).unwrap();
    let log = TrainLog::parse(&log_text).unwrap();
    assert_eq!(log.records.len(), 2);
    let mlines = manifest_lines(&dir.path().join("m.ckpt.manifest"));
    assert!(mlines.contains(&"subcommand=train".to_string()));
    assert!(mlines.contains(&"config.scheme=int8-full".to_string()));
    assert!(mlines.contains(&"seed=3".to_string()));

    // --- quantize to the integer path ---
    let ickpt = dir.path().join("m.int.ckpt");
    let ickpt_s = ickpt.to_str().unwrap().to_string();
    let (code, stdout) = run(&["quantize", "--ckpt", &ckpt_s, "--out", &ickpt_s]);
    assert_eq!(code, 0, "stdout:\n{stdout}");
    let q = &recs(&stdout, "quantize")[0];
    let ratio: f64 = q.get_real("ratio").unwrap();
    assert!(ratio > 0.0 && ratio < 1.0, "ratio {ratio}");
    assert!(!recs(&stdout, "memory").is_empty());
    // feeding the integer checkpoint back into quantize is a data error
    assert_eq!(run(&["quantize", "--ckpt", &ickpt_s, "--out", &ickpt_s]).0, 2);

    // --- eval on the float checkpoint: records parse back exactly ---
    let data_s = data.to_str().unwrap().to_string();
    let (code, stdout) = run(&[
        "eval", "--ckpt", &ckpt_s, "--data", &data_s, "--rotations", "1", "--seed", "5",
    ]);
    assert_eq!(code, 0, "stdout:\n{stdout}");
    let r = &recs(&stdout, "eval")[0];
    let model = load_model(&Checkpoint::load(&ckpt).unwrap()).unwrap();
    let mut rt = model.runtime().unwrap();
    rt.collecting = false;
    let ds = equiquant::data::parse_xyz(&fs::read_to_string(&data).unwrap(), model.cfg.cutoff)
        .unwrap();
    let want = evaluate(&model, &mut rt, &ds.graphs, 1, 5).unwrap();
    assert_eq!(r.get_real("e_mae_mev").unwrap(), want.e_mae_mev);
    assert_eq!(r.get_real("f_mae_mev_a").unwrap(), want.f_mae_mev_a);
    assert_eq!(r.get_real("lee_mev_a").unwrap(), want.lee_mev_a);
    assert!(dir.path().join("m.ckpt.eval.manifest").exists());

    // --- eval on the integer checkpoint ---
    let (code, stdout) = run(&[
        "eval", "--ckpt", &ickpt_s, "--data", &data_s, "--rotations", "1",
    ]);
    assert_eq!(code, 0, "stdout:\n{stdout}");
    let ri = &recs(&stdout, "eval")[0];
    assert!(ri.get_real("e_mae_mev").unwrap().is_finite());

    // --- per-molecule LEE table; summary equals the mean of the rows ---
    let (code, stdout) = run(&[
        "lee", "--ckpt", &ickpt_s, "--data", &data_s, "--rotations", "2",
    ]);
    assert_eq!(code, 0, "stdout:\n{stdout}");
    let rows = recs(&stdout, "lee");
    assert_eq!(rows.len(), 14);
    let mut mean = 0.0;
    for row in &rows {
        mean += row.get_real("lee_mev_a").unwrap();
    }
    mean /= rows.len() as f64;
    let summary = &recs(&stdout, "lee-summary")[0];
    assert_eq!(summary.get_real("mean_lee_mev_a").unwrap(), mean);

    // --- fp32 baseline: spec example "LEE column < 1e-4 meV/A" ---
    let fckpt = dir.path().join("f.ckpt");
    let fckpt_s = fckpt.to_str().unwrap().to_string();
    let (code, _) = run(&["train", "--config", &cfg, "--out", &fckpt_s]);
    assert_eq!(code, 0);
    let (code, stdout) = run(&[
        "eval", "--ckpt", &fckpt_s, "--data", &data_s, "--rotations", "2",
    ]);
    assert_eq!(code, 0);
    let lee_fp32 = recs(&stdout, "eval")[0].get_real("lee_mev_a").unwrap();
    assert!(lee_fp32 < 1e-4, "fp32 LEE {lee_fp32} meV/A");

    // --- bench both checkpoints ---
    let (code, stdout) = run(&[
        "bench",
        "--ckpt-fp32",
        &fckpt_s,
        "--ckpt-int",
        &ickpt_s,
        "--runs",
        "3",
        "--data",
        &data_s,
    ]);
    assert_eq!(code, 0, "stdout:\n{stdout}");
    let rows = recs(&stdout, "bench");
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].get("name"), Some("fp32"));
    assert_eq!(rows[0].get_real("speedup").unwrap(), 1.0);
    assert_eq!(rows[1].get("name"), Some("int8-full"));
    assert!(rows[1].get_real("median_us").unwrap() > 0.0);
    assert!(dir.path().join("m.int.ckpt.bench.manifest").exists());
    // an fp32 slot fed with a quantized-scheme checkpoint is rejected
    assert_eq!(
        run(&["bench", "--ckpt-fp32", &ckpt_s, "--ckpt-int", &ickpt_s, "--runs", "1"]).0,
        2
    );
}

#[test]
fn diag_mddq_tables() {
    let dir = tempdir().unwrap();
    let m = dir.path().join("diag.manifest");
    let m_s = m.to_str().unwrap();

    // spec example: zero samples is an empty table, exit 0
    let (code, stdout) = run(&[
        "diag-mddq", "--bits", "8", "--samples", "0", "--manifest", m_s,
    ]);
    assert_eq!(code, 0, "stdout:\n{stdout}");
    assert!(stdout.contains("mean_angle_deg"));
    assert!(recs(&stdout, "mddq").is_empty());
    assert!(manifest_lines(&m).contains(&"config.samples=0".to_string()));

    let (code, stdout) = run(&[
        "diag-mddq", "--bits", "4,8", "--samples", "400", "--seed", "1", "--manifest", m_s,
    ]);
    assert_eq!(code, 0, "stdout:\n{stdout}");
    let rows = recs(&stdout, "mddq");
    assert_eq!(rows.len(), 4);
    let cos = |bits: &str, q: &str| -> f64 {
        rows.iter()
            .find(|r| r.get("bits") == Some(bits) && r.get("quantizer") == Some(q))
            .expect("row present")
            .get_real("mean_cosine")
            .unwrap()
    };
    assert!(cos("4", "mddq") > cos("4", "naive"));
    assert!(cos("8", "mddq") > 0.999);
}

#[test]
fn env_seed_override_through_binary() {
    let dir = tempdir().unwrap();
    let exe = env!("CARGO_BIN_EXE_equiquant");
    let gen = |out: &Path, env: Option<&str>| -> std::process::ExitStatus {
        let mut c = Command::new(exe);
        c.arg("gen-data")
            .arg("--out")
            .arg(out)
            .args(["--n", "2", "--atoms", "3..4", "--seed", "7"])
            .env_remove("EQUIQUANT_SEED");
        if let Some(v) = env {
            c.env("EQUIQUANT_SEED", v);
        }
        c.status().unwrap()
    };

    let a = dir.path().join("a.xyz");
    assert!(gen(&a, Some("123")).success());
    let lines = manifest_lines(&dir.path().join("a.xyz.manifest"));
    assert!(lines.contains(&"seed=123".to_string()), "{lines:?}");

    let b = dir.path().join("b.xyz");
    assert!(gen(&b, None).success());
    let lines = manifest_lines(&dir.path().join("b.xyz.manifest"));
    assert!(lines.contains(&"seed=7".to_string()), "{lines:?}");

    assert_eq!(gen(&dir.path().join("c.xyz"), Some("banana")).code(), Some(1));
}
