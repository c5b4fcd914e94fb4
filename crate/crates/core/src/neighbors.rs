//! Rotation/reflection-invariant nearest neighbors on steerable coefficients.
//!
//! The reported angle `φ` of a match is the steering angle: an unreflected
//! match means `a_j ≈ steer(a_i, φ)`, a reflected one `a_j ≈ reflect(steer(a_i, φ))`.

use std::f64::consts::TAU;

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, MatRef, Par};
use num_complex::Complex64;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::spca::{CoeffMatrix, SteerableCoeffs};

/// Seeds per batched product.
const SEED_BLOCK: usize = 16;
/// Target columns per batched product.
const COL_BLOCK: usize = 512;

/// Uniform angle grid `θ_i = i · 2π / n_theta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AngleGrid {
    n_theta: usize,
}

impl AngleGrid {
    pub fn new(n_theta: usize) -> Result<Self> {
        if n_theta == 0 {
            return Err(invalid("angle grid needs at least one angle"));
        }
        Ok(Self { n_theta })
    }

    pub fn len(&self) -> usize {
        self.n_theta
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn angle(&self, i: usize) -> f64 {
        i as f64 * TAU / self.n_theta as f64
    }

    pub fn angles(&self) -> Vec<f64> {
        (0..self.n_theta).map(|i| self.angle(i)).collect()
    }
}

impl Default for AngleGrid {
    fn default() -> Self {
        Self { n_theta: 72 }
    }
}

/// Best invariant match between two coefficient vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub value: f64,
    pub angle_index: usize,
    pub reflected: bool,
}

impl Match {
    pub fn angle(&self, grid: &AngleGrid) -> f64 {
        grid.angle(self.angle_index)
    }
}

/// One entry of a neighbor list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub value: f64,
    pub angle_index: usize,
    pub reflected: bool,
}

/// Per-seed neighbor lists, best first; each list starts with the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborTable {
    pub grid: AngleGrid,
    pub seeds: Vec<usize>,
    pub neighbors: Vec<Vec<Neighbor>>,
}

impl NeighborTable {
    pub fn n_classes(&self) -> usize {
        self.seeds.len()
    }

    pub fn members(&self, class: usize) -> Vec<usize> {
        self.neighbors[class].iter().map(|n| n.index).collect()
    }
}

fn centered(v: &[Complex64]) -> (Vec<Complex64>, f64) {
    let mean = v.iter().sum::<Complex64>() / v.len() as f64;
    let c: Vec<Complex64> = v.iter().map(|x| x - mean).collect();
    let sigma = c.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
    (c, sigma)
}

/// `Re((u - ū)^* (v - v̄)) / (σ_u σ_v)` with `σ` the norm of the centered vector.
/// Zero-variance inputs give 0.
pub fn centered_corr(u: &[Complex64], v: &[Complex64]) -> f64 {
    assert_eq!(u.len(), v.len(), "correlated vectors differ in length");
    let (cu, su) = centered(u);
    let (cv, sv) = centered(v);
    if su == 0.0 || sv == 0.0 {
        log::warn!("correlation with a zero-variance coefficient vector is defined as 0");
        return 0.0;
    }
    cu.iter().zip(&cv).map(|(a, b)| (a.conj() * b).re).sum::<f64>() / (su * sv)
}

fn steered(u: &[Complex64], freqs: &[u32], phi: f64) -> Vec<Complex64> {
    u.iter().zip(freqs).map(|(v, &k)| v * Complex64::from_polar(1.0, -(k as f64) * phi)).collect()
}

fn check_pair(a: &SteerableCoeffs, b: &SteerableCoeffs) {
    assert_eq!(a.freqs, b.freqs, "coefficient vectors use different frequency vectors");
}

/// Maximum over the grid of both branches; ties go to the lowest angle
/// index, then to the unreflected branch.
pub fn invariant_corr(a_i: &SteerableCoeffs, a_j: &SteerableCoeffs, grid: &AngleGrid) -> Match {
    check_pair(a_i, a_j);
    let conj_j: Vec<Complex64> = a_j.values.iter().map(|v| v.conj()).collect();
    let mut best = Match { value: f64::NEG_INFINITY, angle_index: 0, reflected: false };
    for t in 0..grid.len() {
        let z = steered(&a_i.values, &a_i.freqs, grid.angle(t));
        for (reflected, target) in [(false, &a_j.values), (true, &conj_j)] {
            let v = centered_corr(&z, target);
            if v > best.value {
                best = Match { value: v, angle_index: t, reflected };
            }
        }
    }
    best
}

/// Best angle within one branch only.
pub fn best_angle_in_branch(a_i: &SteerableCoeffs, a_j: &SteerableCoeffs, grid: &AngleGrid, reflected: bool) -> Match {
    check_pair(a_i, a_j);
    let target: Vec<Complex64> =
        if reflected { a_j.values.iter().map(|v| v.conj()).collect() } else { a_j.values.clone() };
    let mut best = Match { value: f64::NEG_INFINITY, angle_index: 0, reflected };
    for t in 0..grid.len() {
        let v = centered_corr(&steered(&a_i.values, &a_i.freqs, grid.angle(t)), &target);
        if v > best.value {
            best = Match { value: v, angle_index: t, reflected };
        }
    }
    best
}

/// Centered, normalized targets split by frequency parity.
///
/// With an even grid, `φ + π` multiplies odd frequencies by −1, so products
/// against the even and odd halves at `n_theta / 2` angles give all angles.
struct Targets {
    n: usize,
    split: bool,
    even: Vec<usize>,
    odd: Vec<usize>,
    wr_e: Mat<f64>,
    wi_e: Mat<f64>,
    wr_o: Mat<f64>,
    wi_o: Mat<f64>,
    zero_variance: Vec<bool>,
}

fn split_indices(freqs: &[u32], split: bool) -> (Vec<usize>, Vec<usize>) {
    if !split {
        return ((0..freqs.len()).collect(), Vec::new());
    }
    let even = (0..freqs.len()).filter(|&m| freqs[m] % 2 == 0).collect();
    let odd = (0..freqs.len()).filter(|&m| freqs[m] % 2 == 1).collect();
    (even, odd)
}

impl Targets {
    fn new(coeffs: &CoeffMatrix, rows: &[usize], split: bool) -> Self {
        let (even, odd) = split_indices(coeffs.freqs(), split);
        let n = rows.len();
        let normalized: Vec<(Vec<Complex64>, bool)> = rows
            .par_iter()
            .map(|&i| {
                let (c, s) = centered(coeffs.row(i));
                if s == 0.0 {
                    (c, true)
                } else {
                    (c.into_iter().map(|v| v / s).collect(), false)
                }
            })
            .collect();
        let build = |idx: &[usize], imag: bool| {
            Mat::from_fn(idx.len(), n, |m, j| {
                let v = normalized[j].0[idx[m]];
                if imag {
                    v.im
                } else {
                    v.re
                }
            })
        };
        let zero_variance = normalized.iter().map(|(_, z)| *z).collect();
        Self {
            n,
            split,
            wr_e: build(&even, false),
            wi_e: build(&even, true),
            wr_o: build(&odd, false),
            wi_o: build(&odd, true),
            even,
            odd,
            zero_variance,
        }
    }
}

/// Steered copies of one query at the first `half` angles, plus `1/σ` per angle.
struct Query {
    zr_e: Vec<Vec<f64>>,
    zi_e: Vec<Vec<f64>>,
    zr_o: Vec<Vec<f64>>,
    zi_o: Vec<Vec<f64>>,
    inv_sigma: Vec<f64>,
}

fn make_query(u: &[Complex64], freqs: &[u32], grid: &AngleGrid, half: usize, even: &[usize], odd: &[usize]) -> Query {
    let mut q = Query { zr_e: vec![], zi_e: vec![], zr_o: vec![], zi_o: vec![], inv_sigma: vec![0.0; grid.len()] };
    for t in 0..grid.len() {
        let z = steered(u, freqs, grid.angle(t));
        let (_, s) = centered(&z);
        q.inv_sigma[t] = if s == 0.0 { 0.0 } else { 1.0 / s };
        if t < half {
            q.zr_e.push(even.iter().map(|&m| z[m].re).collect());
            q.zi_e.push(even.iter().map(|&m| z[m].im).collect());
            q.zr_o.push(odd.iter().map(|&m| z[m].re).collect());
            q.zi_o.push(odd.iter().map(|&m| z[m].im).collect());
        }
    }
    q
}

fn stack(queries: &[Query], pick: impl Fn(&Query) -> &Vec<Vec<f64>>, width: usize) -> Mat<f64> {
    let rows: Vec<&Vec<f64>> = queries.iter().flat_map(|q| pick(q).iter()).collect();
    Mat::from_fn(rows.len(), width, |r, c| rows[r][c])
}

fn product(lhs: MatRef<'_, f64>, rhs: MatRef<'_, f64>) -> Mat<f64> {
    let mut out = Mat::zeros(lhs.nrows(), rhs.ncols());
    if lhs.ncols() > 0 {
        matmul(&mut out, Accum::Replace, lhs, rhs, 1.0, Par::Seq);
    }
    out
}

/// Best match of every query against every target column, in target order.
fn match_all(queries: &[Vec<Complex64>], freqs: &[u32], targets: &Targets, grid: &AngleGrid, mut sink: impl FnMut(usize, usize, Match)) {
    let half = if targets.split { grid.len() / 2 } else { grid.len() };
    let qs: Vec<Query> = queries.iter().map(|u| make_query(u, freqs, grid, half, &targets.even, &targets.odd)).collect();
    let (ne, no) = (targets.even.len(), targets.odd.len());
    let zr_e = stack(&qs, |q| &q.zr_e, ne);
    let zi_e = stack(&qs, |q| &q.zi_e, ne);
    let zr_o = stack(&qs, |q| &q.zr_o, no);
    let zi_o = stack(&qs, |q| &q.zi_o, no);
    let mut c0 = 0;
    while c0 < targets.n {
        let w = COL_BLOCK.min(targets.n - c0);
        let pe = product(zr_e.as_ref(), targets.wr_e.as_ref().subcols(c0, w));
        let qe = product(zi_e.as_ref(), targets.wi_e.as_ref().subcols(c0, w));
        let po = product(zr_o.as_ref(), targets.wr_o.as_ref().subcols(c0, w));
        let qo = product(zi_o.as_ref(), targets.wi_o.as_ref().subcols(c0, w));
        let nt = grid.len();
        let mut un = vec![0.0; nt];
        let mut re = vec![0.0; nt];
        for (s, q) in qs.iter().enumerate() {
            let flat = q.inv_sigma.iter().all(|&v| v == 0.0);
            let rows = s * half..(s + 1) * half;
            for j in 0..w {
                let col = c0 + j;
                if flat || targets.zero_variance[col] {
                    sink(s, col, Match { value: 0.0, angle_index: 0, reflected: false });
                    continue;
                }
                let pe_j = &pe.col_as_slice(j)[rows.clone()];
                let qe_j = &qe.col_as_slice(j)[rows.clone()];
                if half == nt {
                    for t in 0..half {
                        let scale = q.inv_sigma[t];
                        un[t] = (pe_j[t] + qe_j[t]) * scale;
                        re[t] = (pe_j[t] - qe_j[t]) * scale;
                    }
                } else {
                    let po_j = &po.col_as_slice(j)[rows.clone()];
                    let qo_j = &qo.col_as_slice(j)[rows.clone()];
                    for t in 0..half {
                        let (p, qq) = (pe_j[t] + po_j[t], qe_j[t] + qo_j[t]);
                        let (p2, q2) = (pe_j[t] - po_j[t], qe_j[t] - qo_j[t]);
                        let (s1, s2) = (q.inv_sigma[t], q.inv_sigma[t + half]);
                        un[t] = (p + qq) * s1;
                        re[t] = (p - qq) * s1;
                        un[t + half] = (p2 + q2) * s2;
                        re[t + half] = (p2 - q2) * s2;
                    }
                }
                let mut best = Match { value: f64::NEG_INFINITY, angle_index: 0, reflected: false };
                for t in 0..nt {
                    if un[t] > best.value {
                        best = Match { value: un[t], angle_index: t, reflected: false };
                    }
                    if re[t] > best.value {
                        best = Match { value: re[t], angle_index: t, reflected: true };
                    }
                }
                sink(s, col, best);
            }
        }
        c0 += w;
    }
}

/// The `class_size` best invariant matches for each seed, found with
/// batched products against all centered, normalized coefficient vectors.
pub fn knn_search(seeds: &[usize], coeffs: &CoeffMatrix, grid: &AngleGrid, class_size: usize) -> Result<NeighborTable> {
    let n = coeffs.n_images();
    if class_size == 0 {
        return Err(invalid("class size must be positive"));
    }
    if class_size > n {
        return Err(invalid(format!("class size {class_size} exceeds the {n} available images")));
    }
    if let Some(&bad) = seeds.iter().find(|&&s| s >= n) {
        return Err(invalid(format!("seed index {bad} out of range for {n} images")));
    }
    let all: Vec<usize> = (0..n).collect();
    let targets = Targets::new(coeffs, &all, grid.len() % 2 == 0);
    let freqs = coeffs.freqs().to_vec();
    let neighbors: Vec<Vec<Neighbor>> = seeds
        .par_chunks(SEED_BLOCK)
        .flat_map_iter(|block| {
            let queries: Vec<Vec<Complex64>> = block.iter().map(|&s| coeffs.row(s).to_vec()).collect();
            let mut best = vec![Vec::with_capacity(n); block.len()];
            match_all(&queries, &freqs, &targets, grid, |s, _, m| best[s].push(m));
            block.iter().zip(best).map(|(&seed, row)| top_neighbors(seed, &row, class_size)).collect::<Vec<_>>()
        })
        .collect();
    Ok(NeighborTable { grid: *grid, seeds: seeds.to_vec(), neighbors })
}

/// Seed first, then the best `class_size - 1` others by value (ties by index).
fn top_neighbors(seed: usize, row: &[Match], class_size: usize) -> Vec<Neighbor> {
    let by_rank = |a: &usize, b: &usize| row[*b].value.total_cmp(&row[*a].value).then(a.cmp(b));
    let mut others: Vec<usize> = (0..row.len()).filter(|&j| j != seed).collect();
    let keep = class_size - 1;
    if keep < others.len() && keep > 0 {
        others.select_nth_unstable_by(keep - 1, by_rank);
    }
    others.truncate(keep);
    others.sort_by(by_rank);
    let mut out = Vec::with_capacity(class_size);
    out.push(Neighbor { index: seed, value: 1.0, angle_index: 0, reflected: false });
    out.extend(others.into_iter().map(|j| Neighbor {
        index: j,
        value: row[j].value,
        angle_index: row[j].angle_index,
        reflected: row[j].reflected,
    }));
    out
}

/// Best matches for every ordered pair `(a, b)` with `a < b` among `members`,
/// as a row-major `M × M` table (lower triangle and diagonal unset).
pub fn pair_matches(members: &[usize], coeffs: &CoeffMatrix, grid: &AngleGrid) -> Vec<Option<Match>> {
    let m = members.len();
    let targets = Targets::new(coeffs, members, grid.len() % 2 == 0);
    let freqs = coeffs.freqs().to_vec();
    let queries: Vec<Vec<Complex64>> = members.iter().map(|&i| coeffs.row(i).to_vec()).collect();
    let mut table = vec![None; m * m];
    match_all(&queries, &freqs, &targets, grid, |a, b, mt| {
        if a < b {
            table[a * m + b] = Some(mt);
        }
    });
    table
}

/// `n_c` distinct uniformly drawn indices in `0..n`, ascending.
pub fn select_seeds(n: usize, n_c: usize, rng_seed: u64) -> Result<Vec<usize>> {
    if n_c > n {
        return Err(invalid(format!("cannot choose {n_c} seeds from {n} images")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut picked = index::sample(&mut rng, n, n_c).into_vec();
    picked.sort_unstable();
    Ok(picked)
}
