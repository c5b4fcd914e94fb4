//! Steerable PCA on a Fourier–Bessel basis.
//!
//! Images are expanded on the inscribed disk of radius `R = (side - 1) / 2`
//! in the functions `ψ_{k,q}(r, φ) = J_k(j_{kq} r / R) e^{ikφ} / (√π R |J_{k+1}(j_{kq})|)`
//! with `j_{kq} ≤ 2π c R`, then compressed per angular frequency by PCA.
//! The polar angle is `φ = atan2(row - c, col - c)`.
//!
//! Rotating an image by `α` multiplies its coefficients by `e^{-ikα}`;
//! flipping its rows conjugates them.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use faer::linalg::solvers::Solve;
use faer::{Mat, Side};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::bessel::{bessel_j, bessel_zeros_below};
use crate::eigen::{mat_mul, mat_tmul, sym_eigen};
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::preprocess::sample_indices;

const CACHE_MAGIC: &[u8; 8] = b"C2DSPCA\0";
const COEFF_MAGIC: &[u8; 8] = b"C2DCOEF\0";
const CACHE_VERSION: u32 = 1;
/// Images expanded per batched product.
const EXPAND_BATCH: usize = 512;

/// Options for [`build_basis`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpcaConfig {
    /// Cycles per pixel.
    pub bandlimit: f64,
    pub n_coeffs: usize,
    /// Upper bound on images used for the covariance.
    pub max_sample: usize,
    pub rng_seed: u64,
}

impl Default for SpcaConfig {
    fn default() -> Self {
        Self { bandlimit: 0.5, n_coeffs: 500, max_sample: 4000, rng_seed: 0 }
    }
}

/// One retained principal component.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub k: u32,
    pub eigenvalue: f64,
    /// Weights over the `q_k` Fourier–Bessel radial functions of frequency `k`.
    pub radial: Vec<f64>,
}

impl Component {
    /// Image energy carried by the component; `±k` both count for `k > 0`.
    pub fn energy(&self) -> f64 {
        if self.k == 0 {
            self.eigenvalue
        } else {
            2.0 * self.eigenvalue
        }
    }
}

/// Coefficients of one image in a [`SteerableBasis`].
#[derive(Debug, Clone, PartialEq)]
pub struct SteerableCoeffs {
    pub values: Vec<Complex64>,
    pub freqs: Arc<[u32]>,
}

impl SteerableCoeffs {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Relative distance `‖self - other‖ / ‖other‖`.
    pub fn relative_error(&self, reference: &SteerableCoeffs) -> f64 {
        let diff: f64 = self.values.iter().zip(&reference.values).map(|(a, b)| (a - b).norm_sqr()).sum();
        diff.sqrt() / reference.norm()
    }
}

/// Multiply each coefficient by `e^{-ikα}`: the coefficients of the image rotated by `α`.
pub fn steer(coeffs: &SteerableCoeffs, alpha: f64) -> SteerableCoeffs {
    let values = coeffs
        .values
        .iter()
        .zip(coeffs.freqs.iter())
        .map(|(v, &k)| v * Complex64::from_polar(1.0, -(k as f64) * alpha))
        .collect();
    SteerableCoeffs { values, freqs: Arc::clone(&coeffs.freqs) }
}

/// Complex conjugation: the coefficients of the mirrored image.
pub fn reflect(coeffs: &SteerableCoeffs) -> SteerableCoeffs {
    SteerableCoeffs { values: coeffs.values.iter().map(|v| v.conj()).collect(), freqs: Arc::clone(&coeffs.freqs) }
}

/// Row-major `n_images × n_co` coefficient table sharing one frequency vector.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffMatrix {
    n_co: usize,
    freqs: Arc<[u32]>,
    data: Vec<Complex64>,
}

impl CoeffMatrix {
    pub fn new(freqs: Arc<[u32]>, data: Vec<Complex64>) -> Result<Self> {
        let n_co = freqs.len();
        if n_co == 0 || data.len() % n_co != 0 {
            return Err(invalid(format!("{} values do not fill rows of {n_co} coefficients", data.len())));
        }
        Ok(Self { n_co, freqs, data })
    }

    pub fn from_rows(rows: &[SteerableCoeffs]) -> Result<Self> {
        let first = rows.first().ok_or_else(|| invalid("empty coefficient set"))?;
        let freqs = Arc::clone(&first.freqs);
        let mut data = Vec::with_capacity(rows.len() * freqs.len());
        for row in rows {
            if row.freqs != freqs {
                return Err(invalid("coefficient rows use different frequency vectors"));
            }
            data.extend_from_slice(&row.values);
        }
        Self::new(freqs, data)
    }

    pub fn n_images(&self) -> usize {
        self.data.len() / self.n_co
    }

    pub fn n_coeffs(&self) -> usize {
        self.n_co
    }

    pub fn freqs(&self) -> &Arc<[u32]> {
        &self.freqs
    }

    pub fn row(&self, i: usize) -> &[Complex64] {
        &self.data[i * self.n_co..(i + 1) * self.n_co]
    }

    pub fn coeffs(&self, i: usize) -> SteerableCoeffs {
        SteerableCoeffs { values: self.row(i).to_vec(), freqs: Arc::clone(&self.freqs) }
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    /// Subtract `center` from every row.
    pub fn subtract(&mut self, center: &[Complex64]) -> Result<()> {
        if center.len() != self.n_co {
            return Err(invalid("center length differs from the coefficient count"));
        }
        for row in self.data.chunks_mut(self.n_co) {
            for (v, c) in row.iter_mut().zip(center) {
                *v -= c;
            }
        }
        Ok(())
    }

    /// Rows `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.n_co);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self { n_co: self.n_co, freqs: Arc::clone(&self.freqs), data }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(COEFF_MAGIC)?;
        w.write_u32::<LittleEndian>(CACHE_VERSION)?;
        w.write_u64::<LittleEndian>(self.n_co as u64)?;
        w.write_u64::<LittleEndian>(self.n_images() as u64)?;
        for &k in self.freqs.iter() {
            w.write_u32::<LittleEndian>(k)?;
        }
        for v in &self.data {
            w.write_f64::<LittleEndian>(v.re)?;
            w.write_f64::<LittleEndian>(v.im)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        check_magic(&mut r, COEFF_MAGIC)?;
        let n_co = r.read_u64::<LittleEndian>()? as usize;
        let n = r.read_u64::<LittleEndian>()? as usize;
        let freqs: Vec<u32> = (0..n_co).map(|_| r.read_u32::<LittleEndian>()).collect::<std::io::Result<_>>()?;
        let mut data = Vec::with_capacity(n * n_co);
        for _ in 0..n * n_co {
            let re = r.read_f64::<LittleEndian>()?;
            let im = r.read_f64::<LittleEndian>()?;
            data.push(Complex64::new(re, im));
        }
        Self::new(freqs.into(), data)
    }
}

/// Fourier–Bessel index set: zeros `j_{kq} ≤ 2π c R` for each `k ≥ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct FbIndex {
    /// `zeros[k]` lists `j_{k,1} < j_{k,2} < ...`; its length is `q_k`.
    pub zeros: Vec<Vec<f64>>,
}

impl FbIndex {
    pub fn new(bandlimit: f64, support_radius: f64) -> Self {
        let limit = 2.0 * std::f64::consts::PI * bandlimit * support_radius;
        let mut zeros = Vec::new();
        for k in 0.. {
            let z = bessel_zeros_below(k, limit);
            if z.is_empty() {
                break;
            }
            zeros.push(z);
        }
        Self { zeros }
    }

    pub fn k_max(&self) -> usize {
        self.zeros.len().saturating_sub(1)
    }

    pub fn radial_counts(&self) -> Vec<usize> {
        self.zeros.iter().map(Vec::len).collect()
    }

    /// Number of complex basis functions over `k ∈ [-k_max, k_max]`.
    pub fn n_functions(&self) -> usize {
        self.zeros.iter().enumerate().map(|(k, z)| if k == 0 { z.len() } else { 2 * z.len() }).sum()
    }

    /// Real design columns: one for `k = 0`, two (cos, sin) for `k > 0`.
    fn n_real_columns(&self) -> usize {
        self.n_functions()
    }
}

/// Disk pixels and their polar coordinates.
#[derive(Debug, Clone)]
struct DiskGrid {
    pixels: Vec<usize>,
    /// Index into `radii` per pixel.
    radius_id: Vec<usize>,
    radii: Vec<f64>,
    phi: Vec<f64>,
}

impl DiskGrid {
    fn new(side: usize, radius: f64) -> Self {
        let c = (side as f64 - 1.0) / 2.0;
        let mut pixels = Vec::new();
        let mut radius_id = Vec::new();
        let mut phi = Vec::new();
        let mut radii = Vec::new();
        // squared radii are multiples of 1/4, so this key is exact
        let mut seen: HashMap<u64, usize> = HashMap::new();
        for r in 0..side {
            for col in 0..side {
                let (x, y) = (col as f64 - c, r as f64 - c);
                let r2 = x * x + y * y;
                if r2 > radius * radius + 1e-9 {
                    continue;
                }
                let key = (4.0 * r2).round() as u64;
                let id = *seen.entry(key).or_insert_with(|| {
                    radii.push(r2.sqrt());
                    radii.len() - 1
                });
                pixels.push(r * side + col);
                radius_id.push(id);
                phi.push(y.atan2(x));
            }
        }
        Self { pixels, radius_id, radii, phi }
    }

    fn len(&self) -> usize {
        self.pixels.len()
    }
}

/// Normalized radial functions `f_{kq}` at each distinct disk radius; `[q][radius]`.
fn radial_table(k: usize, zeros: &[f64], radii: &[f64], support: f64) -> Vec<Vec<f64>> {
    zeros
        .iter()
        .map(|&j| {
            let norm = 1.0 / (std::f64::consts::PI.sqrt() * support * bessel_j(k + 1, j).abs());
            radii.iter().map(|&r| norm * bessel_j(k, j * r / support)).collect()
        })
        .collect()
}

/// Fill real design columns for frequency `k` from per-radius values
/// `g[radius]`: `g` for `k = 0`, else `2g cos kφ` and `-2g sin kφ`.
fn fill_columns(grid: &DiskGrid, k: usize, g: &[f64], out: &mut Mat<f64>, col: usize) {
    for (p, (&rid, &phi)) in grid.radius_id.iter().zip(&grid.phi).enumerate() {
        let v = g[rid];
        if k == 0 {
            out[(p, col)] = v;
        } else {
            let (s, c) = (k as f64 * phi).sin_cos();
            out[(p, col)] = 2.0 * v * c;
            out[(p, col + 1)] = -2.0 * v * s;
        }
    }
}

/// A data-adapted steerable basis with precomputed analysis operator.
#[derive(Debug, Clone)]
pub struct SteerableBasis {
    side: usize,
    bandlimit: f64,
    support_radius: f64,
    radial_counts: Vec<usize>,
    components: Vec<Component>,
    freqs: Arc<[u32]>,
    center: Vec<Complex64>,
    grid: DiskGrid,
    /// Disk pixels × real coefficient columns.
    synthesis: Mat<f64>,
    /// Real coefficient columns × disk pixels; left inverse of `synthesis`.
    analysis: Mat<f64>,
    /// First real column of each complex coefficient (`k > 0` use two).
    columns: Vec<usize>,
}

/// Build a basis from a sample of images (all of the same side).
pub fn build_basis(images: &[Image], cfg: &SpcaConfig) -> Result<SteerableBasis> {
    let first = images.first().ok_or_else(|| invalid("basis construction needs at least one image"))?;
    let side = first.side();
    if side < 16 {
        return Err(invalid(format!("image side {side} is below the minimum of 16")));
    }
    if !(cfg.bandlimit > 0.0) || cfg.n_coeffs == 0 {
        return Err(invalid("bandlimit and coefficient count must be positive"));
    }
    let support = (side as f64 - 1.0) / 2.0;
    let index = FbIndex::new(cfg.bandlimit, support);
    let grid = DiskGrid::new(side, support);
    let n_px = grid.len();

    let picked = sample_indices(images.len(), cfg.max_sample, cfg.rng_seed);
    for &i in &picked {
        check_image(&images[i], side, i)?;
    }

    // full Fourier–Bessel design matrix, columns grouped by k
    let radial: Vec<Vec<Vec<f64>>> = index
        .zeros
        .par_iter()
        .enumerate()
        .map(|(k, z)| radial_table(k, z, &grid.radii, support))
        .collect();
    let m = index.n_real_columns();
    let mut design = Mat::<f64>::zeros(n_px, m);
    let mut k_offset = Vec::with_capacity(index.zeros.len());
    let mut col = 0;
    for (k, table) in radial.iter().enumerate() {
        k_offset.push(col);
        for g in table {
            fill_columns(&grid, k, g, &mut design, col);
            col += if k == 0 { 1 } else { 2 };
        }
    }

    let mut gram = mat_tmul(design.as_ref(), design.as_ref());
    let ridge = 1e-4 * (0..m).map(|i| gram[(i, i)]).sum::<f64>() / m as f64;
    for i in 0..m {
        gram[(i, i)] += ridge;
    }
    let llt = gram.llt(Side::Lower).map_err(|e| Error::Numerical(format!("Fourier–Bessel Gram factorization: {e:?}")))?;

    let x = Mat::from_fn(n_px, picked.len(), |p, j| images[picked[j]].data()[grid.pixels[p]]);
    let mut coef = mat_tmul(design.as_ref(), x.as_ref());
    llt.solve_in_place(coef.as_mut());
    drop(x);

    let n_s = picked.len();
    let q_max = index.zeros.iter().map(Vec::len).max().unwrap_or(0);
    let shrink = if n_s < 10 * q_max {
        log::warn!("{n_s} sample images is below 10 x {q_max}; shrinking covariance estimates");
        (q_max as f64 / n_s as f64).min(1.0)
    } else {
        0.0
    };

    let per_k: Vec<(Vec<Component>, Vec<f64>)> = index
        .zeros
        .par_iter()
        .enumerate()
        .map(|(k, z)| {
            let q = z.len();
            let off = k_offset[k];
            let stride = if k == 0 { 1 } else { 2 };
            let mut mean = vec![0.0; q];
            if k == 0 {
                for (a, m) in mean.iter_mut().enumerate() {
                    *m = (0..n_s).map(|j| coef[(off + a, j)]).sum::<f64>() / n_s as f64;
                }
            }
            let mut cov = Mat::<f64>::zeros(q, q);
            for a in 0..q {
                for b in 0..=a {
                    let mut acc = 0.0;
                    for j in 0..n_s {
                        let (ra, rb) = (coef[(off + stride * a, j)] - mean[a], coef[(off + stride * b, j)] - mean[b]);
                        acc += ra * rb;
                        if k > 0 {
                            acc += coef[(off + 2 * a + 1, j)] * coef[(off + 2 * b + 1, j)];
                        }
                    }
                    let v = acc / n_s as f64;
                    cov[(a, b)] = v;
                    cov[(b, a)] = v;
                }
            }
            if shrink > 0.0 {
                let avg = (0..q).map(|a| cov[(a, a)]).sum::<f64>() / q as f64;
                for a in 0..q {
                    for b in 0..q {
                        cov[(a, b)] *= 1.0 - shrink;
                    }
                    cov[(a, a)] += shrink * avg;
                }
            }
            let eig = sym_eigen(cov.as_ref()).expect("small symmetric eigenproblem");
            let comps = (0..q)
                .map(|c| Component {
                    k: k as u32,
                    eigenvalue: eig.values[c].max(0.0),
                    radial: (0..q).map(|a| eig.vectors[(a, c)]).collect(),
                })
                .collect();
            (comps, mean)
        })
        .collect();

    let mean0 = per_k[0].1.clone();
    let mut all: Vec<Component> = per_k.into_iter().flat_map(|(c, _)| c).collect();
    let total = all.len();
    // stable sort keeps (k, q) order among equal energies
    all.sort_by(|a, b| b.energy().total_cmp(&a.energy()));
    if total < cfg.n_coeffs {
        log::warn!("only {total} steerable components exist; keeping all of them");
    }
    all.truncate(cfg.n_coeffs);

    let center = all
        .iter()
        .map(|c| {
            if c.k == 0 {
                Complex64::new(c.radial.iter().zip(&mean0).map(|(u, m)| u * m).sum(), 0.0)
            } else {
                Complex64::default()
            }
        })
        .collect();
    SteerableBasis::assemble(side, cfg.bandlimit, index.radial_counts(), all, center)
}

fn check_image(image: &Image, side: usize, index: usize) -> Result<()> {
    if image.side() != side {
        return Err(Error::ShapeMismatch { expected: format!("{side}x{side}"), found: format!("{0}x{0}", image.side()) });
    }
    if image.has_nan() {
        return Err(Error::NanPixels { index });
    }
    Ok(())
}

fn check_magic(r: &mut impl Read, magic: &[u8; 8]) -> Result<()> {
    let mut got = [0u8; 8];
    r.read_exact(&mut got)?;
    if &got != magic {
        return Err(invalid("not a steerable basis cache file"));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CACHE_VERSION {
        return Err(invalid(format!("cache version {version} is not supported (expected {CACHE_VERSION})")));
    }
    Ok(())
}

impl SteerableBasis {
    fn assemble(
        side: usize,
        bandlimit: f64,
        radial_counts: Vec<usize>,
        components: Vec<Component>,
        center: Vec<Complex64>,
    ) -> Result<Self> {
        let support = (side as f64 - 1.0) / 2.0;
        let index = FbIndex::new(bandlimit, support);
        if index.radial_counts() != radial_counts {
            return Err(invalid("radial counts do not match the basis geometry"));
        }
        let grid = DiskGrid::new(side, support);
        let mut columns = Vec::with_capacity(components.len());
        let mut d = 0;
        for c in &components {
            columns.push(d);
            d += if c.k == 0 { 1 } else { 2 };
        }
        let tables: Vec<Vec<f64>> = components
            .par_iter()
            .map(|c| {
                let k = c.k as usize;
                let table = radial_table(k, &index.zeros[k], &grid.radii, support);
                (0..grid.radii.len()).map(|r| c.radial.iter().zip(&table).map(|(u, t)| u * t[r]).sum()).collect()
            })
            .collect();
        let mut synthesis = Mat::<f64>::zeros(grid.len(), d);
        for ((c, g), &col) in components.iter().zip(&tables).zip(&columns) {
            fill_columns(&grid, c.k as usize, g, &mut synthesis, col);
        }
        let mut gram = mat_tmul(synthesis.as_ref(), synthesis.as_ref());
        let ridge = 1e-12 * (0..d).map(|i| gram[(i, i)]).sum::<f64>() / d.max(1) as f64;
        for i in 0..d {
            gram[(i, i)] += ridge;
        }
        let llt = gram.llt(Side::Lower).map_err(|e| Error::Numerical(format!("steerable Gram factorization: {e:?}")))?;
        let mut analysis = synthesis.transpose().to_owned();
        llt.solve_in_place(analysis.as_mut());
        let freqs: Arc<[u32]> = components.iter().map(|c| c.k).collect();
        Ok(Self { side, bandlimit, support_radius: support, radial_counts, components, freqs, center, grid, synthesis, analysis, columns })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn bandlimit(&self) -> f64 {
        self.bandlimit
    }

    pub fn support_radius(&self) -> f64 {
        self.support_radius
    }

    pub fn k_max(&self) -> usize {
        self.radial_counts.len().saturating_sub(1)
    }

    /// `q_k` for `k = 0..=k_max`.
    pub fn radial_counts(&self) -> &[usize] {
        &self.radial_counts
    }

    /// Fourier–Bessel functions before truncation, counting `±k` separately.
    pub fn n_fb_functions(&self) -> usize {
        self.radial_counts.iter().enumerate().map(|(k, &q)| if k == 0 { q } else { 2 * q }).sum()
    }

    pub fn n_coeffs(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn freqs(&self) -> &Arc<[u32]> {
        &self.freqs
    }

    /// Mean coefficient vector of the sample (nonzero only at `k = 0`).
    pub fn center(&self) -> &[Complex64] {
        &self.center
    }

    /// `(k, rank within k)` for every retained coefficient.
    pub fn kept_index(&self) -> Vec<(u32, usize)> {
        let mut seen: HashMap<u32, usize> = HashMap::new();
        self.components
            .iter()
            .map(|c| {
                let slot = seen.entry(c.k).or_insert(0);
                *slot += 1;
                (c.k, *slot - 1)
            })
            .collect()
    }

    pub fn expand(&self, image: &Image) -> Result<SteerableCoeffs> {
        Ok(self.expand_many(std::slice::from_ref(image))?.coeffs(0))
    }

    /// Expansion plus relative reconstruction residual on the disk.
    pub fn expand_with_residual(&self, image: &Image) -> Result<(SteerableCoeffs, f64)> {
        let coeffs = self.expand(image)?;
        let recon = self.reconstruct(&coeffs);
        let (mut num, mut den) = (0.0, 0.0);
        for &p in &self.grid.pixels {
            num += (image.data()[p] - recon.data()[p]).powi(2);
            den += image.data()[p].powi(2);
        }
        let residual = if den > 0.0 { (num / den).sqrt() } else { 0.0 };
        Ok((coeffs, residual))
    }

    /// Expand every image; batched as matrix products.
    pub fn expand_many(&self, images: &[Image]) -> Result<CoeffMatrix> {
        for (i, im) in images.iter().enumerate() {
            check_image(im, self.side, i)?;
        }
        let n_co = self.n_coeffs();
        let chunks: Vec<Vec<Complex64>> = images
            .par_chunks(EXPAND_BATCH)
            .map(|chunk| {
                let x = Mat::from_fn(self.grid.len(), chunk.len(), |p, j| chunk[j].data()[self.grid.pixels[p]]);
                let real = mat_mul(self.analysis.as_ref(), x.as_ref());
                let mut out = Vec::with_capacity(chunk.len() * n_co);
                for j in 0..chunk.len() {
                    for (c, &col) in self.components.iter().zip(&self.columns) {
                        let im = if c.k == 0 { 0.0 } else { real[(col + 1, j)] };
                        out.push(Complex64::new(real[(col, j)], im));
                    }
                }
                out
            })
            .collect();
        CoeffMatrix::new(Arc::clone(&self.freqs), chunks.concat())
    }

    /// Image synthesized from coefficients; zero outside the disk.
    pub fn reconstruct(&self, coeffs: &SteerableCoeffs) -> Image {
        let d = self.synthesis.ncols();
        let mut real = vec![0.0; d];
        for ((c, &col), v) in self.components.iter().zip(&self.columns).zip(&coeffs.values) {
            real[col] = v.re;
            if c.k > 0 {
                real[col + 1] = v.im;
            }
        }
        let mut out = Image::zeros(self.side);
        for (p, &pix) in self.grid.pixels.iter().enumerate() {
            out.data_mut()[pix] = (0..d).map(|j| self.synthesis[(p, j)] * real[j]).sum();
        }
        out
    }

    /// Serialize the basis (geometry, frequency vector, PCA rotations, center).
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(CACHE_MAGIC)?;
        w.write_u32::<LittleEndian>(CACHE_VERSION)?;
        w.write_u32::<LittleEndian>(self.side as u32)?;
        w.write_f64::<LittleEndian>(self.bandlimit)?;
        w.write_u32::<LittleEndian>(self.components.len() as u32)?;
        for &k in self.freqs.iter() {
            w.write_u32::<LittleEndian>(k)?;
        }
        w.write_u32::<LittleEndian>(self.radial_counts.len() as u32)?;
        for &q in &self.radial_counts {
            w.write_u32::<LittleEndian>(q as u32)?;
        }
        for (c, m) in self.components.iter().zip(&self.center) {
            w.write_f64::<LittleEndian>(c.eigenvalue)?;
            for &u in &c.radial {
                w.write_f64::<LittleEndian>(u)?;
            }
            w.write_f64::<LittleEndian>(m.re)?;
            w.write_f64::<LittleEndian>(m.im)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        check_magic(&mut r, CACHE_MAGIC)?;
        let side = r.read_u32::<LittleEndian>()? as usize;
        let bandlimit = r.read_f64::<LittleEndian>()?;
        let n_co = r.read_u32::<LittleEndian>()? as usize;
        let freqs: Vec<u32> = (0..n_co).map(|_| r.read_u32::<LittleEndian>()).collect::<std::io::Result<_>>()?;
        let n_k = r.read_u32::<LittleEndian>()? as usize;
        let radial_counts: Vec<usize> =
            (0..n_k).map(|_| r.read_u32::<LittleEndian>().map(|q| q as usize)).collect::<std::io::Result<_>>()?;
        let mut components = Vec::with_capacity(n_co);
        let mut center = Vec::with_capacity(n_co);
        for &k in &freqs {
            let q = *radial_counts.get(k as usize).ok_or_else(|| invalid(format!("frequency {k} exceeds k_max")))?;
            let eigenvalue = r.read_f64::<LittleEndian>()?;
            let radial = (0..q).map(|_| r.read_f64::<LittleEndian>()).collect::<std::io::Result<_>>()?;
            components.push(Component { k, eigenvalue, radial });
            let re = r.read_f64::<LittleEndian>()?;
            let im = r.read_f64::<LittleEndian>()?;
            center.push(Complex64::new(re, im));
        }
        Self::assemble(side, bandlimit, radial_counts, components, center)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
