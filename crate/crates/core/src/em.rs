//! Single-class expectation–maximization over rotations and integer shifts.
//!
//! The model is `I_i = L_t X + ε` with `L_t` a rotation followed by a
//! circular shift and white Gaussian `ε` of variance `σ²`. Both steps are
//! orthogonal, so the M-step average of `L_tᵀ I_i` is the exact maximizer.

use std::f64::consts::{PI, TAU};

use faer::Mat;

use crate::eigen::{mat_mul, mat_tmul};
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::transform::{roll, FourierRotator};

/// Rotations × integer shifts searched by the E-step.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformGrid {
    pub rotations: Vec<f64>,
    /// `(dx, dy)` offsets with `dx² + dy² ≤ max_shift²`.
    pub shifts: Vec<(i64, i64)>,
}

impl TransformGrid {
    pub fn new(n_rotations: usize, max_shift: u32) -> Result<Self> {
        if n_rotations == 0 {
            return Err(invalid("transform grid needs at least one rotation"));
        }
        let rotations = (0..n_rotations).map(|i| i as f64 * TAU / n_rotations as f64).collect();
        let s = max_shift as i64;
        let mut shifts = Vec::new();
        for dy in -s..=s {
            for dx in -s..=s {
                if dx * dx + dy * dy <= s * s {
                    shifts.push((dx, dy));
                }
            }
        }
        Ok(Self { rotations, shifts })
    }

    pub fn identity() -> Self {
        Self { rotations: vec![0.0], shifts: vec![(0, 0)] }
    }

    pub fn len(&self) -> usize {
        self.rotations.len() * self.shifts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn uniform_prior(&self) -> Vec<f64> {
        vec![1.0 / self.len() as f64; self.len()]
    }

    /// `(rotation index, shift index)` of grid point `t`.
    pub fn split(&self, t: usize) -> (usize, usize) {
        (t / self.shifts.len(), t % self.shifts.len())
    }
}

/// Current parameters and the quantities evaluated at them.
#[derive(Debug, Clone)]
pub struct EmState {
    pub x: Image,
    pub sigma2: f64,
    pub prior: Vec<f64>,
    pub iteration: usize,
    /// Marginal log-likelihood at these parameters.
    pub log_likelihood: f64,
    /// `γ[i * T + t]`, posterior over grid points per member.
    responsibilities: Vec<f64>,
}

impl EmState {
    pub fn responsibilities(&self) -> &[f64] {
        &self.responsibilities
    }
}

/// Settings for [`run_em`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmOptions {
    pub n_iter: usize,
    pub grid: TransformGrid,
    /// `X` is restricted to pixels within this distance of the center;
    /// `None` leaves it unconstrained.
    pub support_radius: Option<f64>,
}

impl EmOptions {
    /// 7 iterations, 72 rotations × shifts within 4 px, support on the
    /// inscribed disk.
    pub fn standard(side: usize) -> Self {
        Self {
            n_iter: 7,
            grid: TransformGrid::new(72, 4).expect("nonzero rotations"),
            support_radius: Some((side as f64 - 1.0) / 2.0),
        }
    }
}

/// Members with reflections applied, stacked as columns for the products.
pub struct EmData {
    side: usize,
    members: Vec<Image>,
    stack: Mat<f64>,
    norms: Vec<f64>,
    rotator: FourierRotator,
    support: Option<Vec<bool>>,
}

impl EmData {
    pub fn new(members: Vec<Image>) -> Result<Self> {
        let side = members.first().ok_or_else(|| invalid("EM needs at least one member"))?.side();
        for (i, m) in members.iter().enumerate() {
            if m.side() != side {
                return Err(Error::ShapeMismatch { expected: format!("{side}x{side}"), found: format!("{0}x{0}", m.side()) });
            }
            if m.has_nan() {
                return Err(Error::NanPixels { index: i });
            }
        }
        let p = side * side;
        let stack = Mat::from_fn(p, members.len(), |r, c| members[c].data()[r]);
        let norms = members.iter().map(Image::norm_sq).collect();
        Ok(Self { side, members, stack, norms, rotator: FourierRotator::new(side), support: None })
    }

    /// Restrict `X` to the disk of `radius` pixels. Since every `L_t` is
    /// orthogonal, the constrained M-step is the masked average.
    pub fn with_support(mut self, radius: f64) -> Self {
        let c = (self.side as f64 - 1.0) / 2.0;
        let inside = (0..self.side * self.side)
            .map(|p| {
                let (r, col) = ((p / self.side) as f64 - c, (p % self.side) as f64 - c);
                r.hypot(col) <= radius + 1e-9
            })
            .collect();
        self.support = Some(inside);
        self
    }

    fn project(&self, x: &mut Image) {
        if let Some(inside) = &self.support {
            for (v, &keep) in x.data_mut().iter_mut().zip(inside) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
    }

    pub fn members(&self) -> &[Image] {
        &self.members
    }

    fn k(&self) -> usize {
        self.members.len()
    }

    fn pixels(&self) -> usize {
        self.side * self.side
    }

    fn sigma2_floor(&self) -> f64 {
        let power = self.norms.iter().sum::<f64>() / (self.k() * self.pixels()) as f64;
        1e-8 * power.max(f64::MIN_POSITIVE)
    }

    /// `‖I_i − L_t X‖²` for every grid point (rows) and member (columns).
    pub fn distances(&self, x: &Image, grid: &TransformGrid) -> Mat<f64> {
        let p = self.pixels();
        let ns = grid.shifts.len();
        let mut t_mat = Mat::<f64>::zeros(p, grid.len());
        let mut norms = Vec::with_capacity(grid.rotations.len());
        for (r, &theta) in grid.rotations.iter().enumerate() {
            let y = self.rotator.rotate(x, theta);
            norms.push(y.norm_sq());
            for (s, &(dx, dy)) in grid.shifts.iter().enumerate() {
                let moved = roll(&y, dx, dy);
                t_mat.col_as_slice_mut(r * ns + s).copy_from_slice(moved.data());
            }
        }
        let mut d = mat_tmul(t_mat.as_ref(), self.stack.as_ref());
        for i in 0..self.k() {
            for t in 0..grid.len() {
                d[(t, i)] = (self.norms[i] + norms[t / ns] - 2.0 * d[(t, i)]).max(0.0);
            }
        }
        d
    }

    /// Responsibilities and log-likelihood at `(x, σ², prior)`.
    fn evaluate(&self, x: &Image, sigma2: f64, prior: &[f64], grid: &TransformGrid) -> (Vec<f64>, f64) {
        let d = self.distances(x, grid);
        let nt = grid.len();
        let log_prior: Vec<f64> = prior.iter().map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY }).collect();
        let mut gamma = vec![0.0; self.k() * nt];
        let mut total = 0.0;
        let mut lw = vec![0.0; nt];
        for i in 0..self.k() {
            let col = d.col_as_slice(i);
            let mut m = f64::NEG_INFINITY;
            for t in 0..nt {
                lw[t] = log_prior[t] - col[t] / (2.0 * sigma2);
                m = m.max(lw[t]);
            }
            let z: f64 = lw.iter().map(|&v| (v - m).exp()).sum();
            let log_z = m + z.ln();
            for t in 0..nt {
                gamma[i * nt + t] = (lw[t] - log_z).exp();
            }
            total += log_z;
        }
        let ll = total - 0.5 * (self.k() * self.pixels()) as f64 * (TAU * sigma2).ln();
        (gamma, ll)
    }

    fn state(&self, x: Image, sigma2: f64, prior: Vec<f64>, iteration: usize, grid: &TransformGrid) -> EmState {
        let (responsibilities, log_likelihood) = self.evaluate(&x, sigma2, &prior, grid);
        EmState { x, sigma2, prior, iteration, log_likelihood, responsibilities }
    }
}

/// Pooled variance of the pixels outside the inscribed disk.
pub fn corner_variance(images: &[Image]) -> f64 {
    let Some(first) = images.first() else { return 0.0 };
    let radius = (first.side() as f64 - 1.0) / 2.0;
    let (mut n, mut s, mut s2) = (0usize, 0.0, 0.0);
    for im in images {
        for v in im.outside_disk(radius) {
            n += 1;
            s += v;
            s2 += v * v;
        }
    }
    if n < 2 {
        return 0.0;
    }
    let mean = s / n as f64;
    (s2 / n as f64 - mean * mean).max(0.0) * n as f64 / (n - 1) as f64
}

/// Mirror flagged members; used before [`em_init`] and [`em_iterate`].
pub fn apply_reflections(members: &[Image], reflected: &[bool]) -> Result<Vec<Image>> {
    if members.len() != reflected.len() {
        return Err(invalid("one reflection flag is needed per member"));
    }
    Ok(members.iter().zip(reflected).map(|(m, &f)| if f { m.mirrored() } else { m.clone() }).collect())
}

/// Undo each member's rotation `rel_angles[i]` (relative to the reference)
/// and average. `data` holds the reflection-corrected members.
pub fn em_init(data: &EmData, rel_angles: &[f64], grid: &TransformGrid) -> Result<EmState> {
    if rel_angles.len() != data.k() {
        return Err(invalid("one relative angle is needed per member"));
    }
    let mut x = Image::zeros(data.side);
    for (m, &a) in data.members.iter().zip(rel_angles) {
        x.add_scaled(&data.rotator.rotate_adjoint(m, a), 1.0);
    }
    x.scale(1.0 / data.k() as f64);
    data.project(&mut x);
    let mut sigma2 = corner_variance(&data.members);
    if !(sigma2 > data.sigma2_floor()) {
        sigma2 = data.sigma2_floor().max(
            data.norms.iter().sum::<f64>() / (data.k() * data.pixels()) as f64 * 1e-2,
        );
        if !(sigma2 > 0.0) {
            sigma2 = 1.0;
        }
    }
    Ok(data.state(x, sigma2, grid.uniform_prior(), 0, grid))
}

/// One EM step: maximize over `(X, σ², p)` given the cached responsibilities,
/// then evaluate the new parameters.
pub fn em_iterate(state: &EmState, data: &EmData, grid: &TransformGrid) -> EmState {
    let k = data.k();
    let nt = grid.len();
    let ns = grid.shifts.len();
    let gamma = Mat::from_fn(k, nt, |i, t| state.responsibilities[i * nt + t]);
    let weighted = mat_mul(data.stack.as_ref(), gamma.as_ref());
    let mut x = Image::zeros(data.side);
    for (r, &theta) in grid.rotations.iter().enumerate() {
        let mut acc = Image::zeros(data.side);
        for (s, &(dx, dy)) in grid.shifts.iter().enumerate() {
            let col = Image::from_vec(data.side, weighted.col_as_slice(r * ns + s).to_vec()).expect("square");
            acc.add_scaled(&roll(&col, -dx, -dy), 1.0);
        }
        x.add_scaled(&data.rotator.rotate_adjoint(&acc, theta), 1.0);
    }
    x.scale(1.0 / k as f64);
    data.project(&mut x);
    let prior: Vec<f64> = (0..nt).map(|t| (0..k).map(|i| state.responsibilities[i * nt + t]).sum::<f64>() / k as f64).collect();
    let residual = data.norms.iter().sum::<f64>() - k as f64 * x.norm_sq();
    let mut sigma2 = residual / (k * data.pixels()) as f64;
    let floor = data.sigma2_floor();
    if !(sigma2 >= floor) {
        log::warn!("noise variance collapsed to {sigma2:.3e}; clamped to {floor:.3e}");
        sigma2 = floor;
    }
    data.state(x, sigma2, prior, state.iteration + 1, grid)
}

/// Output of [`run_em`].
#[derive(Debug, Clone)]
pub struct ClassAverage {
    pub image: Image,
    pub sigma2: f64,
    pub log_likelihood: f64,
    /// Log-likelihood after initialization and after every iteration.
    pub history: Vec<f64>,
    /// Mean entropy (nats) of the per-member posteriors.
    pub mean_entropy: f64,
    pub iterations: usize,
}

pub fn run_em(members: &[Image], rel_angles: &[f64], reflected: &[bool], opts: &EmOptions) -> Result<ClassAverage> {
    let grid = &opts.grid;
    let mut data = EmData::new(apply_reflections(members, reflected)?)?;
    if let Some(r) = opts.support_radius {
        data = data.with_support(r);
    }
    let mut state = em_init(&data, rel_angles, grid)?;
    let mut history = vec![state.log_likelihood];
    for _ in 0..opts.n_iter {
        state = em_iterate(&state, &data, grid);
        history.push(state.log_likelihood);
    }
    let nt = grid.len();
    let mean_entropy = state
        .responsibilities
        .chunks(nt)
        .map(|g| g.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum::<f64>())
        .sum::<f64>()
        / data.k() as f64;
    Ok(ClassAverage {
        image: state.x,
        sigma2: state.sigma2,
        log_likelihood: state.log_likelihood,
        history,
        mean_entropy,
        iterations: opts.n_iter,
    })
}

/// Angle `rotations[r]` in `(-π, π]`, for reporting.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    if w > PI {
        w - TAU
    } else {
        w
    }
}
