//! Synthetic dataset with an analytic, exactly equivariant reference:
//! two-species Lennard-Jones clusters, extended-XYZ text serialization, and
//! seeded dataset splitting.
//!
//! The reference energy sums over all pairs with Lorentz-Berthelot mixing;
//! forces are its exact negative gradient, so equivariance and accuracy
//! claims can be tested against closed-form ground truth. Labels are eV and
//! eV/A.

use std::ops::RangeInclusive;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::geometry::{build_graph, distance, MolGraph};
use crate::tensor::Real;

/// Interaction table: sigma (A) and epsilon (eV) per atomic number.
const LJ_SPECIES: [(u32, Real, Real); 2] = [(1, 1.8, 0.12), (6, 2.3, 0.18)];

/// Cluster radius for generated molecules: 0.9 of the default model cutoff.
pub const CLUSTER_RADIUS: Real = 4.5;

/// Minimum pair separation as a fraction of the mixed sigma.
pub const MIN_DIST_FACTOR: Real = 0.8;

/// Per-molecule rejection-sampling budget.
pub const MAX_SAMPLING_ATTEMPTS: usize = 10_000;

const ELEMENTS: [(u32, &str); 10] = [
    (1, "H"),
    (2, "He"),
    (3, "Li"),
    (4, "Be"),
    (5, "B"),
    (6, "C"),
    (7, "N"),
    (8, "O"),
    (9, "F"),
    (10, "Ne"),
];

pub fn element_symbol(z: u32) -> Result<&'static str> {
    ELEMENTS
        .iter()
        .find(|&&(num, _)| num == z)
        .map(|&(_, s)| s)
        .ok_or(CoreError::UnknownSpecies {
            species: z,
            known: ELEMENTS.iter().map(|&(z, _)| z).collect(),
        })
}

pub fn element_number(symbol: &str) -> Option<u32> {
    ELEMENTS
        .iter()
        .find(|&&(_, s)| s == symbol)
        .map(|&(z, _)| z)
}

fn lj_params(z: u32) -> Result<(Real, Real)> {
    LJ_SPECIES
        .iter()
        .find(|&&(num, _, _)| num == z)
        .map(|&(_, s, e)| (s, e))
        .ok_or(CoreError::UnknownSpecies {
            species: z,
            known: LJ_SPECIES.iter().map(|&(z, _, _)| z).collect(),
        })
}

fn mixed_params(a: u32, b: u32) -> Result<(Real, Real)> {
    let (sa, ea) = lj_params(a)?;
    let (sb, eb) = lj_params(b)?;
    Ok(((sa + sb) / 2.0, (ea * eb).sqrt()))
}

/// Closed-form reference: total pair energy (eV) and per-atom forces (eV/A)
/// over all pairs, no cutoff.
pub fn lj_reference(species: &[u32], positions: &[[Real; 3]]) -> Result<(Real, Vec<[Real; 3]>)> {
    let n = species.len();
    let mut energy = 0.0;
    let mut forces = vec![[0.0; 3]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let (sigma, eps) = mixed_params(species[i], species[j])?;
            let r = distance(positions[i], positions[j]);
            let sr6 = (sigma / r).powi(6);
            let sr12 = sr6 * sr6;
            energy += 4.0 * eps * (sr12 - sr6);
            // -dE/dr_i = (24 eps / r^2) (2 (s/r)^12 - (s/r)^6) (r_i - r_j)
            let c = 24.0 * eps / (r * r) * (2.0 * sr12 - sr6);
            for k in 0..3 {
                let dk = positions[i][k] - positions[j][k];
                forces[i][k] += c * dk;
                forces[j][k] -= c * dk;
            }
        }
    }
    Ok((energy, forces))
}

/// Generator settings recorded alongside a synthetic dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenMeta {
    pub n_molecules: usize,
    pub atoms_lo: usize,
    pub atoms_hi: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub graphs: Vec<MolGraph>,
    pub meta: Option<GenMeta>,
}

fn sample_positions(
    rng: &mut ChaCha8Rng,
    species: &[u32],
    radius: Real,
    seed: u64,
) -> Result<Vec<[Real; 3]>> {
    let mut positions: Vec<[Real; 3]> = Vec::with_capacity(species.len());
    let mut attempts = 0;
    while positions.len() < species.len() {
        if attempts >= MAX_SAMPLING_ATTEMPTS {
            return Err(CoreError::SamplingFailed { attempts, seed });
        }
        attempts += 1;
        let p = [
            (rng.gen::<Real>() * 2.0 - 1.0) * radius,
            (rng.gen::<Real>() * 2.0 - 1.0) * radius,
            (rng.gen::<Real>() * 2.0 - 1.0) * radius,
        ];
        if (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() > radius {
            continue;
        }
        let i = positions.len();
        let ok = positions.iter().enumerate().all(|(j, &q)| {
            let (sigma, _) = mixed_params(species[i], species[j]).expect("generator species");
            distance(p, q) >= MIN_DIST_FACTOR * sigma
        });
        if ok {
            positions.push(p);
        }
    }
    Ok(positions)
}

/// Random two-species clusters labeled by the closed-form reference.
/// Molecules have `atoms` atoms each, positions inside a ball of
/// [`CLUSTER_RADIUS`], and no pair closer than [`MIN_DIST_FACTOR`] of the
/// mixed sigma.
pub fn gen_synthetic(
    n_molecules: usize,
    atoms: RangeInclusive<usize>,
    seed: u64,
) -> Result<Dataset> {
    let (lo, hi) = (*atoms.start(), *atoms.end());
    if lo < 2 || hi > 32 || lo > hi {
        return Err(CoreError::InvalidArgument {
            op: "gen_synthetic",
            detail: format!("atom count range {lo}..={hi} outside 2..=32"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graphs = Vec::with_capacity(n_molecules);
    for _ in 0..n_molecules {
        let n = rng.gen_range(lo..=hi);
        let species: Vec<u32> = (0..n)
            .map(|_| LJ_SPECIES[rng.gen_range(0..LJ_SPECIES.len())].0)
            .collect();
        let positions = sample_positions(&mut rng, &species, CLUSTER_RADIUS, seed)?;
        let (energy, forces) = lj_reference(&species, &positions)?;
        let mut g = build_graph(species, positions, 5.0)?;
        g.ref_energy = Some(energy);
        g.ref_forces = Some(forces);
        graphs.push(g);
    }
    Ok(Dataset {
        graphs,
        meta: Some(GenMeta {
            n_molecules,
            atoms_lo: lo,
            atoms_hi: hi,
            seed,
        }),
    })
}

/// Seeded shuffled partition into train/val/test. Fractions must sum to one;
/// a positive fraction that rounds to zero members is an error.
pub fn split(
    graphs: &[MolGraph],
    fractions: (Real, Real, Real),
    seed: u64,
) -> Result<(Vec<MolGraph>, Vec<MolGraph>, Vec<MolGraph>)> {
    let (ft, fv, fs) = fractions;
    if ft < 0.0 || fv < 0.0 || fs < 0.0 || (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(CoreError::Config(format!(
            "split fractions ({ft}, {fv}, {fs}) must be non-negative and sum to 1"
        )));
    }
    if graphs.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    let n = graphs.len();
    let c1 = (ft * n as Real).round() as usize;
    let c2 = ((ft + fv) * n as Real).round() as usize;
    let (c1, c2) = (c1.min(n), c2.min(n).max(c1));
    for (fraction, count) in [(ft, c1), (fv, c2 - c1), (fs, n - c2)] {
        if fraction > 0.0 && count == 0 {
            return Err(CoreError::EmptySplit { fraction, len: n });
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |r: std::ops::Range<usize>| r.map(|i| graphs[order[i]].clone()).collect();
    Ok((pick(0..c1), pick(c1..c2), pick(c2..n)))
}

fn xyz_err(line: usize, column: usize, detail: impl Into<String>) -> CoreError {
    CoreError::XyzParse {
        line,
        column,
        detail: detail.into(),
    }
}

/// Whitespace tokens with their 1-based column positions.
fn tokens_with_columns(line: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in line.char_indices() {
        if ch.is_whitespace() {
            if let Some(s) = start.take() {
                out.push((s + 1, &line[s..i]));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push((s + 1, &line[s..]));
    }
    out
}

/// Serializes frames in the extended-XYZ layout: atom count, a properties
/// line carrying `energy=`, then one `symbol x y z fx fy fz` line per atom.
/// Floats print in shortest-round-trip form, so parse(write(d)) is lossless.
pub fn write_xyz(graphs: &[MolGraph]) -> Result<String> {
    let mut out = String::new();
    for g in graphs {
        let energy = g.ref_energy.ok_or(CoreError::InvalidArgument {
            op: "write_xyz",
            detail: "reference energy missing".into(),
        })?;
        let forces = g.ref_forces.as_ref().ok_or(CoreError::InvalidArgument {
            op: "write_xyz",
            detail: "reference forces missing".into(),
        })?;
        out.push_str(&format!("{}\n", g.n_atoms()));
        out.push_str(&format!("energy={energy}\n"));
        for i in 0..g.n_atoms() {
            let p = g.positions[i];
            let f = forces[i];
            out.push_str(&format!(
                "{} {} {} {} {} {} {}\n",
                element_symbol(g.species[i])?,
                p[0],
                p[1],
                p[2],
                f[0],
                f[1],
                f[2]
            ));
        }
    }
    Ok(out)
}

/// Parses extended-XYZ text into graphs built at the given neighbor cutoff.
/// Failures report the 1-based line and column of the offending token.
pub fn parse_xyz(text: &str, cutoff: Real) -> Result<Dataset> {
    let lines: Vec<&str> = text.lines().collect();
    let mut graphs = Vec::new();
    let mut li = 0;
    while li < lines.len() {
        if lines[li].trim().is_empty() {
            li += 1;
            continue;
        }
        let count_line = li + 1;
        let toks = tokens_with_columns(lines[li]);
        let (col, tok) = toks
            .first()
            .ok_or_else(|| xyz_err(count_line, 1, "expected atom count"))?;
        if toks.len() != 1 {
            return Err(xyz_err(
                count_line,
                toks[1].0,
                "unexpected token after atom count",
            ));
        }
        let n: usize = tok
            .parse()
            .map_err(|_| xyz_err(count_line, *col, format!("bad atom count '{tok}'")))?;
        if n == 0 {
            return Err(xyz_err(count_line, *col, "atom count must be positive"));
        }
        li += 1;
        if li >= lines.len() {
            return Err(xyz_err(count_line + 1, 1, "missing properties line"));
        }
        let props_line = li + 1;
        let mut energy = None;
        for (col, tok) in tokens_with_columns(lines[li]) {
            if let Some(v) = tok.strip_prefix("energy=") {
                let e: Real = v.parse().map_err(|_| {
                    xyz_err(props_line, col, format!("bad energy value '{v}'"))
                })?;
                energy = Some(e);
            }
        }
        let energy =
            energy.ok_or_else(|| xyz_err(props_line, 1, "missing energy= property"))?;
        li += 1;

        let mut species = Vec::with_capacity(n);
        let mut positions = Vec::with_capacity(n);
        let mut forces = Vec::with_capacity(n);
        for a in 0..n {
            if li >= lines.len() {
                return Err(xyz_err(
                    li + 1,
                    1,
                    format!("expected atom line {} of {n}", a + 1),
                ));
            }
            let atom_line = li + 1;
            let toks = tokens_with_columns(lines[li]);
            if toks.len() != 7 {
                let col = toks.get(7).map(|t| t.0).unwrap_or(lines[li].len() + 1);
                return Err(xyz_err(
                    atom_line,
                    col,
                    format!("expected 7 fields (symbol x y z fx fy fz), got {}", toks.len()),
                ));
            }
            let (sym_col, sym) = toks[0];
            let z = element_number(sym)
                .ok_or_else(|| xyz_err(atom_line, sym_col, format!("unknown element '{sym}'")))?;
            let mut vals = [0.0; 6];
            for (slot, &(col, tok)) in toks[1..].iter().enumerate() {
                vals[slot] = tok
                    .parse()
                    .map_err(|_| xyz_err(atom_line, col, format!("bad number '{tok}'")))?;
            }
            species.push(z);
            positions.push([vals[0], vals[1], vals[2]]);
            forces.push([vals[3], vals[4], vals[5]]);
            li += 1;
        }
        let mut g = build_graph(species, positions, cutoff)?;
        g.ref_energy = Some(energy);
        g.ref_forces = Some(forces);
        graphs.push(g);
    }
    if graphs.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    Ok(Dataset {
        graphs,
        meta: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{random_rotation, rotate_graph};

    #[test]
    fn lj_minimum_energy_and_zero_forces() {
        let r = 1.8 * (2.0 as Real).powf(1.0 / 6.0);
        let (e, f) = lj_reference(&[1, 1], &[[0.0; 3], [r, 0.0, 0.0]]).unwrap();
        assert!((e - (-0.12)).abs() < 1e-12, "minimum energy is -epsilon: {e}");
        for atom in &f {
            for k in 0..3 {
                assert!(atom[k].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forces_sum_to_zero_per_molecule() {
        let ds = gen_synthetic(6, 3..=9, 42).unwrap();
        for g in &ds.graphs {
            let f = g.ref_forces.as_ref().unwrap();
            for k in 0..3 {
                let s: Real = f.iter().map(|a| a[k]).sum();
                assert!(s.abs() < 1e-8, "net force {s}");
            }
        }
    }

    #[test]
    fn analytic_forces_match_finite_differences() {
        let ds = gen_synthetic(3, 4..=6, 7).unwrap();
        let h = 1e-5;
        for g in &ds.graphs {
            let f_ref = g.ref_forces.as_ref().unwrap();
            for i in 0..g.n_atoms() {
                for k in 0..3 {
                    let mut plus = g.positions.clone();
                    let mut minus = g.positions.clone();
                    plus[i][k] += h;
                    minus[i][k] -= h;
                    let (ep, _) = lj_reference(&g.species, &plus).unwrap();
                    let (em, _) = lj_reference(&g.species, &minus).unwrap();
                    let fd = -(ep - em) / (2.0 * h);
                    let rel = (fd - f_ref[i][k]).abs() / f_ref[i][k].abs().max(1.0);
                    assert!(rel < 1e-6, "atom {i} comp {k}: fd {fd} vs {}", f_ref[i][k]);
                }
            }
        }
    }

    #[test]
    fn oracle_is_exactly_equivariant() {
        let ds = gen_synthetic(2, 5..=7, 11).unwrap();
        let rot = random_rotation(13);
        for g in &ds.graphs {
            let rg = rotate_graph(g, &rot);
            let (e_r, f_r) = lj_reference(&rg.species, &rg.positions).unwrap();
            assert!((e_r - g.ref_energy.unwrap()).abs() < 1e-9);
            let expected = rg.ref_forces.as_ref().unwrap();
            for (a, b) in f_r.iter().zip(expected) {
                for k in 0..3 {
                    assert!((a[k] - b[k]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn generation_respects_packing_constraints() {
        let ds = gen_synthetic(10, 8..=16, 3).unwrap();
        assert_eq!(ds.graphs.len(), 10);
        for g in &ds.graphs {
            assert!((8..=16).contains(&g.n_atoms()));
            for i in 0..g.n_atoms() {
                let p = g.positions[i];
                let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                assert!(r <= CLUSTER_RADIUS + 1e-12);
                for j in 0..i {
                    let (sigma, _) = mixed_params(g.species[i], g.species[j]).unwrap();
                    assert!(distance(p, g.positions[j]) >= MIN_DIST_FACTOR * sigma - 1e-12);
                }
            }
        }
    }

    #[test]
    fn infeasible_packing_reports_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // 32 atoms cannot fit a ball of radius 1 at sigma-scale separations
        let species = vec![6u32; 32];
        let err = sample_positions(&mut rng, &species, 1.0, 99).unwrap_err();
        match err {
            CoreError::SamplingFailed { attempts, seed } => {
                assert_eq!(attempts, MAX_SAMPLING_ATTEMPTS);
                assert_eq!(seed, 99);
            }
            other => panic!("expected SamplingFailed, got {other:?}"),
        }
    }

    #[test]
    fn split_behaviour() {
        let ds = gen_synthetic(10, 2..=4, 21).unwrap();
        let (tr, va, te) = split(&ds.graphs, (1.0, 0.0, 0.0), 5).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (10, 0, 0));

        let (tr, va, te) = split(&ds.graphs, (0.6, 0.2, 0.2), 5).unwrap();
        assert_eq!(tr.len() + va.len() + te.len(), 10);
        assert_eq!((tr.len(), va.len(), te.len()), (6, 2, 2));

        let (tr2, ..) = split(&ds.graphs, (0.6, 0.2, 0.2), 5).unwrap();
        for (a, b) in tr.iter().zip(&tr2) {
            assert_eq!(a.positions, b.positions, "same seed, same membership");
        }

        let err = split(&ds.graphs[0..3], (0.9, 0.05, 0.05), 5).unwrap_err();
        assert!(matches!(err, CoreError::EmptySplit { .. }));
    }

    #[test]
    fn xyz_round_trip_is_lossless_and_idempotent() {
        let ds = gen_synthetic(100, 2..=6, 31).unwrap();
        let text = write_xyz(&ds.graphs).unwrap();
        let parsed = parse_xyz(&text, 5.0).unwrap();
        assert_eq!(parsed.graphs.len(), 100);
        for (a, b) in ds.graphs.iter().zip(&parsed.graphs) {
            assert_eq!(a.ref_energy.unwrap().to_bits(), b.ref_energy.unwrap().to_bits());
            for (pa, pb) in a.positions.iter().zip(&b.positions) {
                for k in 0..3 {
                    assert_eq!(pa[k].to_bits(), pb[k].to_bits());
                }
            }
            assert_eq!(a.neighbors, b.neighbors);
        }
        let text2 = write_xyz(&parsed.graphs).unwrap();
        assert_eq!(text, text2);
    }

    #[test]
    fn minimal_single_atom_frame_parses() {
        let ds = parse_xyz("1\nenergy=0.5\nH 0 0 0 0 0 0\n", 5.0).unwrap();
        assert_eq!(ds.graphs.len(), 1);
        assert_eq!(ds.graphs[0].n_atoms(), 1);
        assert_eq!(ds.graphs[0].ref_energy, Some(0.5));
    }

    #[test]
    fn truncated_frame_errors_at_missing_line() {
        let err = parse_xyz("3\nenergy=1\nH 0 0 0 0 0 0\nC 2 0 0 0 0 0\n", 5.0).unwrap_err();
        match err {
            CoreError::XyzParse { line, .. } => assert_eq!(line, 5),
            other => panic!("expected XyzParse, got {other:?}"),
        }
    }

    #[test]
    fn bad_tokens_report_line_and_column() {
        let err = parse_xyz("1\nenergy=1\nH 0 zero 0 0 0 0\n", 5.0).unwrap_err();
        match err {
            CoreError::XyzParse { line, column, .. } => {
                assert_eq!(line, 3);
                assert_eq!(column, 5);
            }
            other => panic!("expected XyzParse, got {other:?}"),
        }
        let err = parse_xyz("1\nenergy=1\nXx 0 0 0 0 0 0\n", 5.0).unwrap_err();
        match err {
            CoreError::XyzParse { line, column, detail } => {
                assert_eq!((line, column), (3, 1));
                assert!(detail.contains("unknown element"));
            }
            other => panic!("expected XyzParse, got {other:?}"),
        }
        let err = parse_xyz("2\nnothing=here\nH 0 0 0 0 0 0\nH 2 0 0 0 0 0\n", 5.0).unwrap_err();
        assert!(matches!(err, CoreError::XyzParse { line: 2, .. }));
    }
}
