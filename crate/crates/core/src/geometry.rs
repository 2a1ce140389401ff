//! Molecular graphs, cutoff neighbor lists, SO(3) rotations, and radial
//! basis expansion of edge distances.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::tensor::{Real, Tensor};

/// Atoms closer than this are considered duplicates and rejected.
pub const MIN_PAIR_DIST: Real = 1e-8;

#[derive(Clone, Debug)]
pub struct MolGraph {
    pub species: Vec<u32>,
    pub positions: Vec<[Real; 3]>,
    /// Per-atom neighbor indices, ascending, excluding the atom itself.
    pub neighbors: Vec<Vec<usize>>,
    pub cutoff: Real,
    pub ref_energy: Option<Real>,
    pub ref_forces: Option<Vec<[Real; 3]>>,
}

impl MolGraph {
    pub fn n_atoms(&self) -> usize {
        self.species.len()
    }

    /// Directed edges (center, neighbor), grouped by center in index order.
    pub fn directed_edges(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::new();
        for (i, nbrs) in self.neighbors.iter().enumerate() {
            for &j in nbrs {
                edges.push((i, j));
            }
        }
        edges
    }
}

pub fn distance(a: [Real; 3], b: [Real; 3]) -> Real {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// Build the cutoff graph over `positions`. An edge (i, j) exists iff
/// `0 < d_ij <= cutoff` (boundary inclusive). Duplicate positions
/// (`d < 1e-8`) are rejected.
pub fn build_graph(species: Vec<u32>, positions: Vec<[Real; 3]>, cutoff: Real) -> Result<MolGraph> {
    if species.len() != positions.len() {
        return Err(CoreError::InvalidArgument {
            op: "build_graph",
            detail: format!("{} species for {} positions", species.len(), positions.len()),
        });
    }
    if positions.is_empty() {
        return Err(CoreError::InvalidArgument {
            op: "build_graph",
            detail: "no atoms".into(),
        });
    }
    if !(cutoff > 0.0) {
        return Err(CoreError::InvalidArgument {
            op: "build_graph",
            detail: format!("cutoff {} must be positive", cutoff),
        });
    }
    let n = positions.len();
    let mut neighbors = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = distance(positions[i], positions[j]);
            if d < MIN_PAIR_DIST {
                return Err(CoreError::DegenerateGeometry { a: i, b: j, min_dist: MIN_PAIR_DIST });
            }
            if d <= cutoff {
                neighbors[i].push(j);
                neighbors[j].push(i);
            }
        }
    }
    Ok(MolGraph {
        species,
        positions,
        neighbors,
        cutoff,
        ref_energy: None,
        ref_forces: None,
    })
}

/// Proper rotation (element of SO(3)), stored row-major.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation {
    m: [[Real; 3]; 3],
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Validates orthonormality (`R^T R = I` within 1e-6 per entry) and
    /// `det = +1` within 1e-6.
    pub fn new(m: [[Real; 3]; 3]) -> Result<Self> {
        let r = Rotation { m };
        let (ortho, det) = r.orthonormality_defect();
        if ortho > 1e-6 || (det - 1.0).abs() > 1e-6 {
            return Err(CoreError::InvalidArgument {
                op: "Rotation::new",
                detail: format!("not a proper rotation: orthonormality defect {ortho:.2e}, det {det}"),
            });
        }
        Ok(r)
    }

    pub fn matrix(&self) -> &[[Real; 3]; 3] {
        &self.m
    }

    /// (max |(R^T R - I)_ij|, det R)
    pub fn orthonormality_defect(&self) -> (Real, Real) {
        let m = &self.m;
        let mut max_def: Real = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: Real = (0..3).map(|k| m[k][i] * m[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                max_def = max_def.max((dot - target).abs());
            }
        }
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        (max_def, det)
    }

    pub fn apply(&self, v: [Real; 3]) -> [Real; 3] {
        let m = &self.m;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    pub fn transpose(&self) -> Rotation {
        let m = &self.m;
        Rotation {
            m: [
                [m[0][0], m[1][0], m[2][0]],
                [m[0][1], m[1][1], m[2][1]],
                [m[0][2], m[1][2], m[2][2]],
            ],
        }
    }

    /// Haar-uniform random rotation from a normalized 4-component Gaussian
    /// quaternion.
    pub fn random<R: Rng>(rng: &mut R) -> Rotation {
        loop {
            let q: [Real; 4] = [
                standard_normal(rng),
                standard_normal(rng),
                standard_normal(rng),
                standard_normal(rng),
            ];
            let norm = (q.iter().map(|v| v * v).sum::<Real>()).sqrt();
            if norm < 1e-6 {
                continue;
            }
            let [w, x, y, z] = [q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm];
            return Rotation {
                m: [
                    [
                        1.0 - 2.0 * (y * y + z * z),
                        2.0 * (x * y - w * z),
                        2.0 * (x * z + w * y),
                    ],
                    [
                        2.0 * (x * y + w * z),
                        1.0 - 2.0 * (x * x + z * z),
                        2.0 * (y * z - w * x),
                    ],
                    [
                        2.0 * (x * z - w * y),
                        2.0 * (y * z + w * x),
                        1.0 - 2.0 * (x * x + y * y),
                    ],
                ],
            };
        }
    }
}

/// Seeded Haar-uniform rotation (deterministic per seed).
pub fn random_rotation(seed: u64) -> Rotation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Rotation::random(&mut rng)
}

/// Rotate positions (and reference forces, when present). The neighbor list
/// is copied verbatim: distances are rotation-invariant, so rebuilding could
/// only differ by floating-point noise at the cutoff boundary.
pub fn rotate_graph(graph: &MolGraph, rotation: &Rotation) -> MolGraph {
    let mut out = graph.clone();
    out.positions = graph.positions.iter().map(|&p| rotation.apply(p)).collect();
    out.ref_forces = graph
        .ref_forces
        .as_ref()
        .map(|fs| fs.iter().map(|&f| rotation.apply(f)).collect());
    out
}

/// Rotate each row of an `[n, 3]` tensor in place of the matrix product
/// `(R v)ᵀ` per row.
pub fn rotate_rows(t: &Tensor, rotation: &Rotation) -> Result<Tensor> {
    if t.shape().len() != 2 || t.cols() != 3 {
        return Err(CoreError::Shape {
            op: "rotate_rows",
            detail: format!("expected [n, 3], got {:?}", t.shape()),
        });
    }
    let mut out = t.clone();
    for i in 0..t.rows() {
        let v = rotation.apply([t.at(i, 0), t.at(i, 1), t.at(i, 2)]);
        for k in 0..3 {
            out.set(i, k, v[k]);
        }
    }
    Ok(out)
}

/// Gaussian radial basis of a positive distance, modulated by a smooth cosine
/// cutoff envelope. Basis k (k = 1..=n_basis) is centered at `k * cutoff /
/// n_basis` with width equal to the center spacing. Distances beyond the
/// cutoff (which the neighbor rule never produces) get a zero envelope.
pub fn rbf_expand(d: Real, n_basis: usize, cutoff: Real) -> Result<Vec<Real>> {
    if !(d > 0.0) {
        return Err(CoreError::InvalidArgument {
            op: "rbf_expand",
            detail: format!("distance {} must be positive", d),
        });
    }
    if n_basis == 0 || !(cutoff > 0.0) {
        return Err(CoreError::InvalidArgument {
            op: "rbf_expand",
            detail: format!("n_basis {} and cutoff {} must be positive", n_basis, cutoff),
        });
    }
    let spacing = cutoff / n_basis as Real;
    let envelope = if d <= cutoff {
        0.5 * ((std::f64::consts::PI * d / cutoff).cos() + 1.0)
    } else {
        0.0
    };
    let width2 = 2.0 * spacing * spacing;
    Ok((1..=n_basis)
        .map(|k| {
            let mu = k as Real * spacing;
            (-(d - mu) * (d - mu) / width2).exp() * envelope
        })
        .collect())
}

/// Standard normal deviate via Box-Muller; deterministic for a seeded rng.
pub(crate) fn standard_normal<R: Rng>(rng: &mut R) -> Real {
    loop {
        let u1: f64 = rng.gen();
        if u1 > 1e-300 {
            let u2: f64 = rng.gen();
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_atom_neighbor_rule() {
        let pos = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let g = build_graph(vec![1, 1], pos.clone(), 1.5).unwrap();
        assert_eq!(g.neighbors, vec![vec![1], vec![0]]);

        let g = build_graph(vec![1, 1], pos.clone(), 0.9).unwrap();
        assert_eq!(g.neighbors, vec![Vec::<usize>::new(), Vec::new()]);

        // boundary inclusive
        let g = build_graph(vec![1, 1], pos, 1.0).unwrap();
        assert_eq!(g.neighbors, vec![vec![1], vec![0]]);
    }

    #[test]
    fn cube_has_three_neighbors_per_atom() {
        // 8 atoms on a cube of side 1.5 with cutoff 1.6: only the three edge
        // neighbors are within range (face diagonal is 1.5 * sqrt(2) > 1.6).
        let side = 1.5;
        let mut pos = Vec::new();
        for ix in 0..2 {
            for iy in 0..2 {
                for iz in 0..2 {
                    pos.push([ix as Real * side, iy as Real * side, iz as Real * side]);
                }
            }
        }
        let g = build_graph(vec![1; 8], pos.clone(), 1.6).unwrap();
        // independent brute-force oracle over all 28 pairs
        for i in 0..8 {
            let expected: Vec<usize> = (0..8)
                .filter(|&j| j != i && distance(pos[i], pos[j]) <= 1.6)
                .collect();
            assert_eq!(g.neighbors[i], expected);
            assert_eq!(g.neighbors[i].len(), 3, "atom {i}");
        }
    }

    #[test]
    fn neighbor_list_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pos: Vec<[Real; 3]> = (0..20)
            .map(|_| [rng.gen::<Real>() * 6.0, rng.gen::<Real>() * 6.0, rng.gen::<Real>() * 6.0])
            .collect();
        let g = build_graph(vec![1; 20], pos, 2.5).unwrap();
        for i in 0..20 {
            for &j in &g.neighbors[i] {
                assert!(g.neighbors[j].contains(&i), "edge {i}->{j} not symmetric");
            }
            assert!(!g.neighbors[i].contains(&i), "self edge at {i}");
        }
    }

    #[test]
    fn duplicate_positions_rejected() {
        let pos = vec![[0.0, 0.0, 0.0], [0.0, 0.0, 1e-9]];
        let err = build_graph(vec![1, 1], pos, 2.0).unwrap_err();
        assert!(matches!(err, CoreError::DegenerateGeometry { .. }));
    }

    #[test]
    fn random_rotations_are_proper() {
        for seed in 0..50 {
            let r = random_rotation(seed);
            let (ortho, det) = r.orthonormality_defect();
            assert!(ortho < 1e-12, "seed {seed}: orthonormality defect {ortho}");
            assert!((det - 1.0).abs() < 1e-12, "seed {seed}: det {det}");
        }
    }

    #[test]
    fn random_rotation_is_seed_deterministic() {
        assert_eq!(random_rotation(42).matrix(), random_rotation(42).matrix());
        assert_ne!(random_rotation(42).matrix(), random_rotation(43).matrix());
    }

    #[test]
    fn haar_mean_is_near_zero() {
        // Haar uniformity: E[R] = 0. With 1e5 samples the entrywise standard
        // error is ~0.002, so 0.02 is a 10-sigma band.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut sums = [[0.0; 3]; 3];
        let n = 100_000;
        for _ in 0..n {
            let r = Rotation::random(&mut rng);
            for i in 0..3 {
                for j in 0..3 {
                    sums[i][j] += r.matrix()[i][j];
                }
            }
        }
        for row in &sums {
            for &s in row {
                assert!((s / n as Real).abs() < 0.02, "mean entry {}", s / n as Real);
            }
        }
    }

    #[test]
    fn rotate_graph_and_inverse() {
        // 90 degree rotation about z
        let r = Rotation::new([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let mut g = build_graph(vec![1, 1], vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], 2.0).unwrap();
        g.ref_forces = Some(vec![[0.5, 0.0, 0.0], [-0.5, 0.0, 0.0]]);

        let gr = rotate_graph(&g, &r);
        assert!((gr.positions[1][1] - 1.0).abs() < 1e-12);
        assert!(gr.positions[1][0].abs() < 1e-12);
        assert!((gr.ref_forces.as_ref().unwrap()[0][1] - 0.5).abs() < 1e-12);
        assert_eq!(gr.neighbors, g.neighbors);

        let back = rotate_graph(&gr, &r.transpose());
        for (a, b) in back.positions.iter().zip(&g.positions) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn rbf_values() {
        let n = 8;
        let cutoff = 5.0;
        // at a basis center the gaussian is exactly 1, so the feature equals
        // the envelope
        let spacing = cutoff / n as Real;
        let f = rbf_expand(spacing, n, cutoff).unwrap();
        let env = 0.5 * ((std::f64::consts::PI * spacing / cutoff).cos() + 1.0);
        assert!((f[0] - env).abs() < 1e-12);

        // at the cutoff the envelope vanishes
        let f = rbf_expand(cutoff, n, cutoff).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));

        // all features positive strictly inside
        let f = rbf_expand(2.3, n, cutoff).unwrap();
        assert!(f.iter().all(|&v| v > 0.0));
        assert_eq!(f.len(), n);

        assert!(rbf_expand(0.0, n, cutoff).is_err());
        assert!(rbf_expand(-1.0, n, cutoff).is_err());
    }

    #[test]
    fn neighbor_rule_under_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pos: Vec<[Real; 3]> = (0..10)
            .map(|_| [rng.gen::<Real>() * 4.0, rng.gen::<Real>() * 4.0, rng.gen::<Real>() * 4.0])
            .collect();
        let g = build_graph(vec![1; 10], pos.clone(), 2.0).unwrap();

        // reverse the atom order; neighbor sets must map through the permutation
        let perm: Vec<usize> = (0..10).rev().collect();
        let ppos: Vec<[Real; 3]> = perm.iter().map(|&i| pos[i]).collect();
        let pg = build_graph(vec![1; 10], ppos, 2.0).unwrap();
        for new_i in 0..10 {
            let old_i = perm[new_i];
            let mut mapped: Vec<usize> = g.neighbors[old_i].iter().map(|&j| 9 - j).collect();
            mapped.sort_unstable();
            assert_eq!(pg.neighbors[new_i], mapped);
        }
    }
}
