//! Dihedral synchronization matrices, class and member grades, and
//! reflection synchronization.
//!
//! Pair `(i, j)` holds the relative element `g_i g_jᵀ` of O(2): a rotation
//! `[[cos θ, -sin θ], [sin θ, cos θ]]`, or for reflected pairs
//! `[[cos θ, -sin θ], [-sin θ, -cos θ]]`.

use std::f64::consts::TAU;

use faer::Mat;

use crate::eigen::{leading_eigenpairs, sym_eigen, SubspaceOptions};
use crate::error::{invalid, Result};
use crate::neighbors::{AngleGrid, Match};

/// Classes up to this size use the dense eigensolver directly.
const DENSE_LIMIT: usize = 64;

/// Relative rotation and reflection flag for one ordered pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairEstimate {
    pub theta: f64,
    pub reflected: bool,
}

impl PairEstimate {
    pub fn new(theta: f64, reflected: bool) -> Self {
        Self { theta: theta.rem_euclid(TAU), reflected }
    }

    pub const IDENTITY: PairEstimate = PairEstimate { theta: 0.0, reflected: false };

    /// The estimate for the swapped pair.
    pub fn inverse(&self) -> Self {
        if self.reflected {
            *self
        } else {
            Self::new(-self.theta, false)
        }
    }

    /// From a neighbor-search match `a_j ≈ steer(a_i, φ)` (or its reflection).
    pub fn from_match(m: &Match, grid: &AngleGrid) -> Self {
        let phi = m.angle(grid);
        if m.reflected {
            Self::new(phi, true)
        } else {
            Self::new(-phi, false)
        }
    }

    pub fn block(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.theta.sin_cos();
        if self.reflected {
            [[c, -s], [-s, -c]]
        } else {
            [[c, -s], [s, c]]
        }
    }
}

/// Full `M × M` table of pair estimates, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTable {
    m: usize,
    entries: Vec<PairEstimate>,
}

impl PairTable {
    /// Fill from the upper triangle; the lower triangle is the group inverse.
    pub fn from_upper(m: usize, mut upper: impl FnMut(usize, usize) -> PairEstimate) -> Self {
        let mut entries = vec![PairEstimate::IDENTITY; m * m];
        for i in 0..m {
            for j in i + 1..m {
                let e = upper(i, j);
                entries[i * m + j] = e;
                entries[j * m + i] = e.inverse();
            }
        }
        Self { m, entries }
    }

    /// From the upper-triangular output of [`crate::neighbors::pair_matches`].
    pub fn from_matches(m: usize, matches: &[Option<Match>], grid: &AngleGrid) -> Result<Self> {
        if matches.len() != m * m {
            return Err(invalid("pair match table has the wrong size"));
        }
        let mut missing = false;
        let table = Self::from_upper(m, |i, j| match &matches[i * m + j] {
            Some(mt) => PairEstimate::from_match(mt, grid),
            None => {
                missing = true;
                PairEstimate::IDENTITY
            }
        });
        if missing {
            return Err(invalid("pair match table lacks upper-triangle entries"));
        }
        Ok(table)
    }

    /// Arbitrary full table; checked for symmetry when building a [`SyncMatrix`].
    pub fn from_entries(m: usize, entries: Vec<PairEstimate>) -> Result<Self> {
        if entries.len() != m * m {
            return Err(invalid(format!("{} pair entries do not form a {m}x{m} table", entries.len())));
        }
        Ok(Self { m, entries })
    }

    pub fn size(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> PairEstimate {
        self.entries[i * self.m + j]
    }

    /// Restriction to `keep` (in the given order).
    pub fn subset(&self, keep: &[usize]) -> Self {
        let m = keep.len();
        let entries = keep.iter().flat_map(|&i| keep.iter().map(move |&j| (i, j))).map(|(i, j)| self.get(i, j)).collect();
        Self { m, entries }
    }

    /// Permute members: row `a` of the result is member `perm[a]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        self.subset(perm)
    }

    fn check_symmetric(&self) -> Result<()> {
        for i in 0..self.m {
            let d = self.get(i, i);
            if d.reflected || angle_gap(d.theta, 0.0) > 1e-9 {
                return Err(invalid(format!("diagonal pair ({i},{i}) is not the identity")));
            }
            for j in i + 1..self.m {
                let (a, b) = (self.get(i, j), self.get(j, i).inverse());
                if a.reflected != b.reflected || angle_gap(a.theta, b.theta) > 1e-9 {
                    return Err(invalid(format!("pair table is not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(())
    }
}

fn angle_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

/// Real symmetric `2M × 2M` block matrix of pair elements.
#[derive(Debug, Clone)]
pub struct SyncMatrix {
    m: usize,
    data: Mat<f64>,
}

pub fn build_sync_matrix(pairs: &PairTable) -> Result<SyncMatrix> {
    pairs.check_symmetric()?;
    let m = pairs.size();
    let mut data = Mat::zeros(2 * m, 2 * m);
    for i in 0..m {
        for j in 0..m {
            let b = if i == j { PairEstimate::IDENTITY.block() } else { pairs.get(i, j).block() };
            for r in 0..2 {
                for c in 0..2 {
                    data[(2 * i + r, 2 * j + c)] = b[r][c];
                }
            }
        }
    }
    Ok(SyncMatrix { m, data })
}

impl SyncMatrix {
    pub fn members(&self) -> usize {
        self.m
    }

    pub fn matrix(&self) -> &Mat<f64> {
        &self.data
    }

    pub fn trace(&self) -> f64 {
        (0..2 * self.m).map(|i| self.data[(i, i)]).sum()
    }

    pub fn block(&self, i: usize, j: usize) -> [[f64; 2]; 2] {
        let d = &self.data;
        [[d[(2 * i, 2 * j)], d[(2 * i, 2 * j + 1)]], [d[(2 * i + 1, 2 * j)], d[(2 * i + 1, 2 * j + 1)]]]
    }
}

/// Two leading eigenpairs and the third eigenvalue estimate.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub lambda: [f64; 3],
    /// Unit eigenvectors for `lambda[0]` and `lambda[1]`, length `2M`.
    pub vectors: [Vec<f64>; 2],
    pub degenerate: bool,
}

pub fn spectrum(m: &SyncMatrix) -> Result<Spectrum> {
    let n = 2 * m.m;
    let mc = m.m as f64;
    let pairs = if m.m <= DENSE_LIMIT {
        None
    } else {
        let opts = SubspaceOptions { block: 8, shift: mc, tol: 1e-10 * mc, max_iter: 400 };
        let found = leading_eigenpairs(m.data.as_ref(), 2, opts);
        if found.is_none() {
            log::debug!("subspace iteration did not converge for a class of {}; using the dense solver", m.m);
        }
        found
    };
    let pairs = match pairs {
        Some(p) => p,
        None => sym_eigen(m.data.as_ref())?,
    };
    let at = |k: usize| pairs.values.get(k).copied().unwrap_or(f64::NEG_INFINITY);
    let lambda = [at(0), at(1), at(2)];
    let vec_of = |k: usize| (0..n).map(|r| pairs.vectors[(r, k)]).collect::<Vec<f64>>();
    let vectors = if n >= 2 { [vec_of(0), vec_of(1)] } else { [vec_of(0), vec![0.0; n]] };
    let degenerate = lambda[1] - lambda[2] <= 1e-6 * mc;
    if degenerate {
        log::warn!("class of {} members has a degenerate spectrum (lambda2 = {:.6}, lambda3 = {:.6})", m.m, lambda[1], lambda[2]);
    }
    Ok(Spectrum { lambda, vectors, degenerate })
}

/// Spectral class grade.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassGrade {
    /// `(λ1 + λ2) / 2M`.
    pub g: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub degenerate: bool,
}

pub fn grade_from_spectrum(m: &SyncMatrix, s: &Spectrum) -> ClassGrade {
    ClassGrade {
        g: (s.lambda[0] + s.lambda[1]) / (2.0 * m.m as f64),
        lambda1: s.lambda[0],
        lambda2: s.lambda[1],
        degenerate: s.degenerate,
    }
}

pub fn class_grade(m: &SyncMatrix) -> Result<ClassGrade> {
    Ok(grade_from_spectrum(m, &spectrum(m)?))
}

/// Block `(i, j)` of `λ1 v1 v1ᵀ + λ2 v2 v2ᵀ`.
fn rank2_block(s: &Spectrum, i: usize, j: usize) -> [[f64; 2]; 2] {
    let mut b = [[0.0; 2]; 2];
    for l in 0..2 {
        let v = &s.vectors[l];
        for r in 0..2 {
            for c in 0..2 {
                b[r][c] += s.lambda[l] * v[2 * i + r] * v[2 * j + c];
            }
        }
    }
    b
}

/// `g_i = -(1/M) Σ_j ‖R̂_ij − R_ij‖_F` over 2×2 blocks.
pub fn member_grades_from_spectrum(m: &SyncMatrix, s: &Spectrum) -> Vec<f64> {
    let n = m.m;
    (0..n)
        .map(|i| {
            let total: f64 = (0..n)
                .map(|j| {
                    let (a, b) = (rank2_block(s, i, j), m.block(i, j));
                    let mut f = 0.0;
                    for r in 0..2 {
                        for c in 0..2 {
                            f += (a[r][c] - b[r][c]).powi(2);
                        }
                    }
                    f.sqrt()
                })
                .sum();
            -total / n as f64
        })
        .collect()
}

pub fn rank2_member_grades(m: &SyncMatrix) -> Result<Vec<f64>> {
    Ok(member_grades_from_spectrum(m, &spectrum(m)?))
}

/// `‖R − R̂‖_F` for the best rank-two approximation `R̂`.
pub fn rank2_residual(m: &SyncMatrix, s: &Spectrum) -> f64 {
    let n = m.m;
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (rank2_block(s, i, j), m.block(i, j));
            for r in 0..2 {
                for c in 0..2 {
                    acc += (a[r][c] - b[r][c]).powi(2);
                }
            }
        }
    }
    acc.sqrt()
}

/// Angle of every member relative to member 0 read from the leading
/// eigenvectors: member `j`'s image is member 0's rotated by the angle, after
/// mirroring when `reflected[j]` (flags relative to member 0).
pub fn relative_angles(s: &Spectrum, reflected: &[bool]) -> Vec<f64> {
    let block = |i: usize| [[s.vectors[0][2 * i], s.vectors[1][2 * i]], [s.vectors[0][2 * i + 1], s.vectors[1][2 * i + 1]]];
    let b0 = block(0);
    reflected
        .iter()
        .enumerate()
        .map(|(j, &f)| {
            let bj = block(j);
            // (V_j V_0ᵀ) entries (0,0) and (1,0)
            let m00 = bj[0][0] * b0[0][0] + bj[0][1] * b0[0][1];
            let m10 = bj[1][0] * b0[0][0] + bj[1][1] * b0[0][1];
            let sign = if f { -1.0 } else { 1.0 };
            (sign * m10).atan2(m00).rem_euclid(TAU)
        })
        .collect()
}

/// Indices of the `keep` largest scores, best first; ties by index.
fn top_indices(scores: &[f64], keep: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(keep);
    idx
}

/// The `keep` classes with the highest grade, best first.
pub fn prune_classes(grades: &[f64], keep: usize) -> Vec<usize> {
    top_indices(grades, keep)
}

/// The `keep` members with the highest grade, best first.
pub fn prune_members(grades: &[f64], keep: usize) -> Vec<usize> {
    top_indices(grades, keep)
}

/// Reflection flags from the leading eigenvector of the `±1` pair matrix;
/// member 0 is unreflected by convention.
pub fn reflection_sync(pairs: &PairTable) -> Result<Vec<bool>> {
    pairs.check_symmetric()?;
    let k = pairs.size();
    if k == 0 {
        return Ok(Vec::new());
    }
    let j = Mat::from_fn(k, k, |a, b| if a != b && pairs.get(a, b).reflected { -1.0 } else { 1.0 });
    let eig = sym_eigen(j.as_ref())?;
    let v: Vec<f64> = (0..k).map(|i| eig.vectors[(i, 0)]).collect();
    let mut sign: Vec<Option<f64>> = v.iter().map(|&x| if x.abs() <= 1e-8 { None } else { Some(x.signum()) }).collect();
    for i in 0..k {
        if sign[i].is_none() {
            let vote: f64 = (0..k).filter(|&b| b != i).filter_map(|b| sign[b].map(|s| j[(i, b)] * s)).sum();
            log::warn!("reflection flag of member {i} is ambiguous; assigned by majority vote ({vote:+})");
            sign[i] = Some(if vote < 0.0 { -1.0 } else { 1.0 });
        }
    }
    let s0 = sign[0].unwrap();
    Ok(sign.into_iter().map(|s| s.unwrap() != s0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Table for images `M^{f_i} Rot(θ_i) T`, written per case.
    fn planted(thetas: &[f64], flips: &[bool]) -> PairTable {
        PairTable::from_upper(thetas.len(), |i, j| match (flips[i], flips[j]) {
            (false, false) => PairEstimate::new(thetas[i] - thetas[j], false),
            (true, true) => PairEstimate::new(thetas[j] - thetas[i], false),
            (false, true) => PairEstimate::new(thetas[j] - thetas[i], true),
            (true, false) => PairEstimate::new(thetas[i] - thetas[j], true),
        })
    }

    fn element(theta: f64, flip: bool) -> [[f64; 2]; 2] {
        let (s, c) = theta.sin_cos();
        let r = [[c, -s], [s, c]];
        if flip {
            [[r[0][0], r[0][1]], [-r[1][0], -r[1][1]]]
        } else {
            r
        }
    }

    #[test]
    fn single_member_is_identity() {
        let m = build_sync_matrix(&PairTable::from_upper(1, |_, _| unreachable!())).unwrap();
        assert_eq!(m.block(0, 0), [[1.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn consistent_table_equals_s_st() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 9;
        let thetas: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * TAU).collect();
        let flips: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
        let m = build_sync_matrix(&planted(&thetas, &flips)).unwrap();
        for i in 0..n {
            for j in 0..n {
                let (gi, gj) = (element(thetas[i], flips[i]), element(thetas[j], flips[j]));
                for r in 0..2 {
                    for c in 0..2 {
                        let expect = gi[r][0] * gj[c][0] + gi[r][1] * gj[c][1];
                        assert!((m.block(i, j)[r][c] - expect).abs() < 1e-12);
                    }
                }
            }
        }
        let g = class_grade(&m).unwrap();
        assert!((g.g - 1.0).abs() < 1e-9);
        assert!((g.lambda1 - n as f64).abs() < 1e-9 && (g.lambda2 - n as f64).abs() < 1e-9);
        assert!(rank2_member_grades(&m).unwrap().iter().all(|&x| x.abs() < 1e-8));
    }

    #[test]
    fn relative_angles_match_planted_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for n in [3, 12, 80] {
            let thetas: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * TAU).collect();
            let flips: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
            let table = planted(&thetas, &flips);
            let s = spectrum(&build_sync_matrix(&table).unwrap()).unwrap();
            let rel: Vec<bool> = flips.iter().map(|&f| f != flips[0]).collect();
            let got = relative_angles(&s, &rel);
            for j in 1..n {
                let pe = table.get(0, j);
                let expect = if pe.reflected { pe.theta } else { -pe.theta };
                assert!(angle_gap(got[j], expect) < 1e-9, "n {n} member {j}");
            }
            assert!(angle_gap(got[0], 0.0) < 1e-12);
        }
    }

    #[test]
    fn reflected_block_has_negative_determinant() {
        let t = PairTable::from_upper(3, |i, j| PairEstimate::new(0.3 * (i + j) as f64, i == 0 && j == 2));
        let m = build_sync_matrix(&t).unwrap();
        let det = |b: [[f64; 2]; 2]| b[0][0] * b[1][1] - b[0][1] * b[1][0];
        assert!((det(m.block(0, 2)) + 1.0).abs() < 1e-12);
        assert!((det(m.block(2, 0)) + 1.0).abs() < 1e-12);
        assert!((det(m.block(0, 1)) - 1.0).abs() < 1e-12);
        assert!((m.trace() - 6.0).abs() < 1e-15);
    }

    #[test]
    fn asymmetric_table_is_rejected() {
        let mut entries = vec![PairEstimate::IDENTITY; 4];
        entries[1] = PairEstimate::new(0.5, false);
        entries[2] = PairEstimate::new(0.5, false);
        assert!(build_sync_matrix(&PairTable::from_entries(2, entries).unwrap()).is_err());
    }

    #[test]
    fn large_class_uses_iterative_path_and_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 120;
        let thetas: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * TAU).collect();
        let flips = vec![false; n];
        let noisy = PairTable::from_upper(n, |i, j| {
            let e = planted(&thetas, &flips).get(i, j);
            PairEstimate::new(e.theta + 0.3 * (rng.random::<f64>() - 0.5), false)
        });
        let m = build_sync_matrix(&noisy).unwrap();
        let s = spectrum(&m).unwrap();
        let full = sym_eigen(m.matrix().as_ref()).unwrap();
        assert!((s.lambda[0] - full.values[0]).abs() < 1e-7);
        assert!((s.lambda[1] - full.values[1]).abs() < 1e-7);
        assert!((full.values.iter().sum::<f64>() - 2.0 * n as f64).abs() < 1e-6 * n as f64);
    }

    #[test]
    fn member_grades_are_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 12;
        let t = PairTable::from_upper(n, |_, _| PairEstimate::new(rng.random::<f64>() * TAU, rng.random::<bool>()));
        let g = rank2_member_grades(&build_sync_matrix(&t).unwrap()).unwrap();
        let perm: Vec<usize> = (0..n).rev().collect();
        let gp = rank2_member_grades(&build_sync_matrix(&t.permuted(&perm)).unwrap()).unwrap();
        for (a, &p) in perm.iter().enumerate() {
            assert!((gp[a] - g[p]).abs() < 1e-9);
        }
    }

    #[test]
    fn outlier_gets_lowest_grade() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let n = 30;
            let thetas: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * TAU).collect();
            let flips = vec![false; n];
            let base = planted(&thetas, &flips);
            let out = rng.random_range(0..n);
            let t = PairTable::from_upper(n, |i, j| {
                if i == out || j == out {
                    PairEstimate::new(rng.random::<f64>() * TAU, false)
                } else {
                    base.get(i, j)
                }
            });
            let g = rank2_member_grades(&build_sync_matrix(&t).unwrap()).unwrap();
            let worst = prune_members(&g, n).last().copied().unwrap();
            assert_eq!(worst, out);
        }
    }

    #[test]
    fn prune_orders_by_grade() {
        assert_eq!(prune_classes(&[0.9, 0.3, 0.7], 2), vec![0, 2]);
        assert_eq!(prune_classes(&[0.5, 0.5, 0.5], 3), vec![0, 1, 2]);
        assert_eq!(prune_members(&[-0.1, -0.5, -0.05, -0.2], 2), vec![2, 0]);
    }

    #[test]
    fn reflection_sync_finds_planted_flags() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10;
        let thetas: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * TAU).collect();
        assert!(reflection_sync(&planted(&thetas, &vec![false; n])).unwrap().iter().all(|&f| !f));
        let mut flips = vec![false; n];
        flips[6] = true;
        assert_eq!(reflection_sync(&planted(&thetas, &flips)).unwrap(), flips);
        // flags are relative to member 0
        let flips: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
        let expect: Vec<bool> = flips.iter().map(|&f| f != flips[0]).collect();
        assert_eq!(reflection_sync(&planted(&thetas, &flips)).unwrap(), expect);
    }

    #[test]
    fn from_match_inverts_neighbor_convention() {
        let grid = AngleGrid::default();
        let m = Match { value: 1.0, angle_index: 10, reflected: false };
        let e = PairEstimate::from_match(&m, &grid);
        assert!(angle_gap(e.theta, -grid.angle(10)) < 1e-12);
        let r = PairEstimate::from_match(&Match { reflected: true, ..m }, &grid);
        assert!(angle_gap(r.theta, grid.angle(10)) < 1e-12);
    }
}
