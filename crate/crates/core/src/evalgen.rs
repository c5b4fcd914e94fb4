//! Synthetic particle stacks with ground truth, and quality metrics.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::fft::{signed_freq, Fft2};
use crate::image::Image;
use crate::neighbors::NeighborTable;
use crate::transform::{roll, FourierRotator};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_templates: usize,
    pub images_per_template: usize,
    pub side: usize,
    /// Mean template power over noise variance; `f64::INFINITY` turns noise off.
    pub snr: f64,
    pub shift_sigma: f64,
    /// Shift magnitudes are clipped to this radius.
    pub max_shift: f64,
    pub reflection_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_templates: 20,
            images_per_template: 500,
            side: 64,
            snr: 0.05,
            shift_sigma: 1.5,
            max_shift: 3.0,
            reflection_prob: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.snr > 0.0) {
            return Err(invalid("snr must be positive"));
        }
        if !(0.0..=1.0).contains(&self.reflection_prob) {
            return Err(invalid("reflection_prob must lie in [0, 1]"));
        }
        if self.n_templates == 0 || self.images_per_template == 0 || self.side < 8 {
            return Err(invalid("need at least one template, one image each, and side >= 8"));
        }
        if !(self.shift_sigma >= 0.0) || !(self.max_shift >= 0.0) {
            return Err(invalid("shift parameters must be non-negative"));
        }
        Ok(())
    }

    pub fn n_images(&self) -> usize {
        self.n_templates * self.images_per_template
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Bump {
    x: f64,
    y: f64,
    amp: f64,
    width: f64,
}

/// A sum of isotropic Gaussians, rendered analytically under any rigid motion.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    bumps: Vec<Bump>,
}

impl Template {
    pub fn random(side: usize, rng: &mut impl Rng) -> Self {
        let radius = 0.8 * side as f64 / 2.0;
        let count = rng.random_range(5..=15);
        let bumps = (0..count)
            .map(|_| {
                let width = side as f64 * rng.random_range(0.035..0.07);
                let r = (radius - 1.5 * width).max(0.0) * rng.random::<f64>().sqrt();
                let phi = rng.random::<f64>() * TAU;
                Bump { x: r * phi.cos(), y: r * phi.sin(), amp: rng.random_range(0.3..1.0), width }
            })
            .collect();
        Self { bumps }
    }

    /// Mirror (row flip), then rotate by `angle`, then shift by `(dx, dy)`.
    pub fn render(&self, side: usize, angle: f64, dx: f64, dy: f64, reflected: bool) -> Image {
        let c = (side as f64 - 1.0) / 2.0;
        let (s, co) = angle.sin_cos();
        let moved: Vec<Bump> = self
            .bumps
            .iter()
            .map(|b| {
                let y = if reflected { -b.y } else { b.y };
                Bump { x: co * b.x - s * y + dx, y: s * b.x + co * y + dy, ..*b }
            })
            .collect();
        Image::from_fn(side, |r, col| {
            let (x, y) = (col as f64 - c, r as f64 - c);
            moved
                .iter()
                .map(|b| b.amp * (-((x - b.x).powi(2) + (y - b.y).powi(2)) / (2.0 * b.width * b.width)).exp())
                .sum()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthRecord {
    pub template_id: usize,
    pub angle: f64,
    pub dx: f64,
    pub dy: f64,
    pub reflected: bool,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub templates: Vec<Template>,
    /// Untransformed template images.
    pub template_images: Vec<Image>,
    pub images: Vec<Image>,
    pub truth: Vec<TruthRecord>,
    pub noise_sigma: f64,
}

/// Image `i` shows template `i % n_templates`.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut trng = ChaCha8Rng::seed_from_u64(spec.seed);
    trng.set_stream(u64::MAX);
    let templates: Vec<Template> = (0..spec.n_templates).map(|_| Template::random(spec.side, &mut trng)).collect();
    let template_images: Vec<Image> = templates.iter().map(|t| t.render(spec.side, 0.0, 0.0, 0.0, false)).collect();
    let power = template_images.iter().map(|t| t.norm_sq() / t.len() as f64).sum::<f64>() / spec.n_templates as f64;
    let noise_sigma = if spec.snr.is_finite() { (power / spec.snr).sqrt() } else { 0.0 };
    let shift = Normal::new(0.0, spec.shift_sigma).map_err(|e| invalid(e.to_string()))?;
    let (images, truth): (Vec<Image>, Vec<TruthRecord>) = (0..spec.n_images())
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let template_id = i % spec.n_templates;
            let angle = rng.random::<f64>() * TAU;
            let (mut dx, mut dy) = (rng.sample(shift), rng.sample(shift));
            let mag = dx.hypot(dy);
            if mag > spec.max_shift {
                dx *= spec.max_shift / mag;
                dy *= spec.max_shift / mag;
            }
            let reflected = rng.random::<f64>() < spec.reflection_prob;
            let mut img = templates[template_id].render(spec.side, angle, dx, dy, reflected);
            if noise_sigma > 0.0 {
                for v in img.data_mut() {
                    *v += noise_sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
            (img, TruthRecord { template_id, angle, dx, dy, reflected })
        })
        .unzip();
    Ok(SyntheticData { templates, template_images, images, truth, noise_sigma })
}

pub fn write_truth(truth: &[TruthRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("image_id\ttemplate_id\tangle_rad\tdx\tdy\treflected\n");
    for (i, t) in truth.iter().enumerate() {
        writeln!(out, "{i}\t{}\t{:.17}\t{:.17}\t{:.17}\t{}", t.template_id, t.angle, t.dx, t.dy, u8::from(t.reflected)).unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_truth(path: impl AsRef<Path>) -> Result<Vec<TruthRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || invalid(format!("truth table line {}: malformed", ln + 1));
        if f.len() != 6 {
            return Err(bad());
        }
        out.push(TruthRecord {
            template_id: f[1].parse().map_err(|_| bad())?,
            angle: f[2].parse().map_err(|_| bad())?,
            dx: f[3].parse().map_err(|_| bad())?,
            dy: f[4].parse().map_err(|_| bad())?,
            reflected: f[5] == "1",
        });
    }
    Ok(out)
}

/// Fraction of `members` sharing the template of `members[0]`.
pub fn purity_of(members: &[usize], truth: &[TruthRecord]) -> f64 {
    let Some(&seed) = members.first() else { return 0.0 };
    let id = truth[seed].template_id;
    members.iter().filter(|&&m| truth[m].template_id == id).count() as f64 / members.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct PurityReport {
    pub per_class: Vec<f64>,
    pub mean: f64,
}

pub fn class_purity(table: &NeighborTable, truth: &[TruthRecord]) -> PurityReport {
    let per_class: Vec<f64> = (0..table.n_classes()).map(|c| purity_of(&table.members(c), truth)).collect();
    let mean = if per_class.is_empty() { 0.0 } else { per_class.iter().sum::<f64>() / per_class.len() as f64 };
    PurityReport { per_class, mean }
}

/// Search grid for [`aligned_correlation`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignSearch {
    pub n_rotations: usize,
    pub max_shift: i64,
}

impl Default for AlignSearch {
    fn default() -> Self {
        Self { n_rotations: 360, max_shift: 6 }
    }
}

/// Best Pearson correlation between `estimate` and the template moved by any
/// grid rotation, integer shift within the radius, and optional mirror.
pub fn aligned_correlation(estimate: &Image, template: &Image, search: AlignSearch) -> f64 {
    let n = estimate.side();
    let p = estimate.len() as f64;
    let rot = FourierRotator::new(n);
    let e_mean = estimate.mean();
    let e_centered: Vec<f64> = estimate.data().iter().map(|v| v - e_mean).collect();
    let e_norm = e_centered.iter().map(|v| v * v).sum::<f64>().sqrt();
    let shifts: Vec<(i64, i64)> = (-search.max_shift..=search.max_shift)
        .flat_map(|dy| (-search.max_shift..=search.max_shift).map(move |dx| (dx, dy)))
        .filter(|(dx, dy)| dx * dx + dy * dy <= search.max_shift * search.max_shift)
        .collect();
    let mirrored = template.mirrored();
    (0..2 * search.n_rotations)
        .into_par_iter()
        .map(|j| {
            let src = if j < search.n_rotations { template } else { &mirrored };
            let angle = (j % search.n_rotations) as f64 * TAU / search.n_rotations as f64;
            let t = rot.rotate(src, angle);
            let t_mean = t.mean();
            let t_norm = (t.norm_sq() - p * t_mean * t_mean).max(0.0).sqrt();
            if t_norm == 0.0 || e_norm == 0.0 {
                return 0.0;
            }
            shifts
                .iter()
                .map(|&(dx, dy)| {
                    let moved = roll(&t, dx, dy);
                    let dot: f64 = moved.data().iter().zip(&e_centered).map(|(a, b)| a * b).sum();
                    dot / (t_norm * e_norm)
                })
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .reduce(|| f64::NEG_INFINITY, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrcCurve {
    /// Ring `r` collects frequencies with `round(|f|) = r`, up to `side / 2`.
    pub values: Vec<f64>,
    /// First drop below 0.5 in cycles per pixel, linearly interpolated.
    pub crossing: Option<f64>,
}

pub fn fourier_ring_correlation(a: &Image, b: &Image) -> Result<FrcCurve> {
    let n = a.side();
    if b.side() != n {
        return Err(invalid("FRC needs images of equal size"));
    }
    let fft = Fft2::new(n);
    let fa = fft.forward_real(a);
    let fb = fft.forward_real(b);
    let rings = n / 2 + 1;
    let mut num = vec![0.0; rings];
    let mut pa = vec![0.0; rings];
    let mut pb = vec![0.0; rings];
    for r in 0..n {
        let fy = signed_freq(r, n) as f64;
        for c in 0..n {
            let fx = signed_freq(c, n) as f64;
            let ring = fx.hypot(fy).round() as usize;
            if ring >= rings {
                continue;
            }
            let (x, y) = (fa[r * n + c], fb[r * n + c]);
            num[ring] += x.re * y.re + x.im * y.im;
            pa[ring] += x.re * x.re + x.im * x.im;
            pb[ring] += y.re * y.re + y.im * y.im;
        }
    }
    let values: Vec<f64> = (0..rings)
        .map(|i| match (pa[i] > 0.0, pb[i] > 0.0) {
            (true, true) => num[i] / (pa[i] * pb[i]).sqrt(),
            (false, false) => 1.0,
            _ => 0.0,
        })
        .collect();
    let crossing = (1..rings).find(|&i| values[i] < 0.5).map(|i| {
        let (v0, v1) = (values[i - 1], values[i]);
        let f = (i - 1) as f64 + (v0 - 0.5) / (v0 - v1);
        f / n as f64
    });
    Ok(FrcCurve { values, crossing })
}

/// Number of Fourier samples in every ring of [`fourier_ring_correlation`].
pub fn ring_counts(side: usize) -> Vec<usize> {
    let rings = side / 2 + 1;
    let mut counts = vec![0; rings];
    for r in 0..side {
        for c in 0..side {
            let ring = (signed_freq(c, side) as f64).hypot(signed_freq(r, side) as f64).round() as usize;
            if ring < rings {
                counts[ring] += 1;
            }
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neighbors::{AngleGrid, Neighbor};

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec { n_templates: 3, images_per_template: 4, side: 32, snr: f64::INFINITY, seed: 5, ..Default::default() }
    }

    #[test]
    fn noise_off_gives_transformed_templates() {
        let spec = small_spec();
        let d = generate(&spec).unwrap();
        for (img, t) in d.images.iter().zip(&d.truth) {
            let expect = d.templates[t.template_id].render(32, t.angle, t.dx, t.dy, t.reflected);
            assert_eq!(img, &expect);
            assert!(t.dx.hypot(t.dy) <= spec.max_shift + 1e-12);
        }
    }

    #[test]
    fn recorded_transforms_reproduce_images_by_resampling() {
        let d = generate(&small_spec()).unwrap();
        let rot = FourierRotator::new(32);
        for (img, t) in d.images.iter().zip(&d.truth) {
            let base = &d.template_images[t.template_id];
            let src = if t.reflected { base.mirrored() } else { base.clone() };
            let moved = rot.apply(&src, t.angle, t.dx, t.dy);
            assert!(moved.relative_error(img) < 0.01, "{}", moved.relative_error(img));
        }
    }

    #[test]
    fn empirical_snr_matches_request() {
        let spec = SyntheticSpec { n_templates: 10, images_per_template: 100, side: 32, snr: 0.05, seed: 9, ..Default::default() };
        let noisy = generate(&spec).unwrap();
        let clean = generate(&SyntheticSpec { snr: f64::INFINITY, ..spec.clone() }).unwrap();
        let (mut signal, mut noise, mut count) = (0.0, 0.0, 0.0);
        for (a, b) in noisy.images.iter().zip(&clean.images) {
            signal += b.norm_sq();
            noise += a.sub(b).norm_sq();
            count += a.len() as f64;
        }
        let template_power = clean.template_images.iter().map(|t| t.norm_sq() / t.len() as f64).sum::<f64>() / 10.0;
        let measured = template_power / (noise / count);
        assert!((measured / 0.05 - 1.0).abs() < 0.05, "{measured}");
        assert!(signal > 0.0);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec { snr: 0.1, ..small_spec() };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn truth_table_round_trips() {
        let d = generate(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("truth.tsv");
        write_truth(&d.truth, &path).unwrap();
        assert_eq!(read_truth(&path).unwrap(), d.truth);
    }

    fn table(classes: Vec<Vec<usize>>) -> NeighborTable {
        NeighborTable {
            grid: AngleGrid::new(72).unwrap(),
            seeds: classes.iter().map(|c| c[0]).collect(),
            neighbors: classes
                .into_iter()
                .map(|c| c.into_iter().map(|index| Neighbor { index, value: 1.0, angle_index: 0, reflected: false }).collect())
                .collect(),
        }
    }

    #[test]
    fn purity_of_planted_and_random_classes() {
        let truth: Vec<TruthRecord> =
            (0..400).map(|i| TruthRecord { template_id: i % 4, angle: 0.0, dx: 0.0, dy: 0.0, reflected: false }).collect();
        let planted = table(vec![(0..100).map(|i| 4 * i).collect(), (0..100).map(|i| 4 * i + 1).collect()]);
        assert_eq!(class_purity(&planted, &truth).mean, 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let classes: Vec<Vec<usize>> = (0..200)
            .map(|_| rand::seq::index::sample(&mut rng, 400, 50).into_vec())
            .collect();
        let rep = class_purity(&table(classes.clone()), &truth);
        // each member after the seed matches with probability ≈ 1/4; sd of the mean ≈ 0.0044
        let expected = (1.0 + 49.0 * 99.0 / 399.0) / 50.0;
        assert!((rep.mean - expected).abs() < 0.02, "{} vs {expected}", rep.mean);

        let mut shuffled = classes[0].clone();
        shuffled[1..].reverse();
        assert_eq!(purity_of(&shuffled, &truth), rep.per_class[0]);
    }

    #[test]
    fn aligned_correlation_finds_transformed_copy() {
        let t = Template::random(32, &mut ChaCha8Rng::seed_from_u64(1));
        let base = t.render(32, 0.0, 0.0, 0.0, false);
        let search = AlignSearch { n_rotations: 72, max_shift: 3 };
        assert!((aligned_correlation(&base, &base, search) - 1.0).abs() < 1e-12);
        let moved = t.render(32, 10f64.to_radians(), 2.0, -1.0, true);
        assert!(aligned_correlation(&moved, &base, search) >= 0.999);
    }

    #[test]
    fn aligned_correlation_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Template::random(24, &mut rng).render(24, 0.0, 0.0, 0.0, false);
        let b = Template::random(24, &mut rng).render(24, 0.0, 0.0, 0.0, false);
        let search = AlignSearch { n_rotations: 8, max_shift: 2 };
        let rot = FourierRotator::new(24);
        let mut best = f64::NEG_INFINITY;
        for refl in [false, true] {
            for r in 0..8 {
                for dy in -2i64..=2 {
                    for dx in -2i64..=2 {
                        if dx * dx + dy * dy > 4 {
                            continue;
                        }
                        let src = if refl { b.mirrored() } else { b.clone() };
                        let cand = roll(&rot.rotate(&src, r as f64 * TAU / 8.0), dx, dy);
                        best = best.max(cand.pearson(&a));
                    }
                }
            }
        }
        assert!((aligned_correlation(&a, &b, search) - best).abs() < 1e-12);
    }

    #[test]
    fn frc_of_identical_images_is_one() {
        let img = Template::random(32, &mut ChaCha8Rng::seed_from_u64(3)).render(32, 0.0, 0.0, 0.0, false);
        let frc = fourier_ring_correlation(&img, &img).unwrap();
        assert!(frc.values.iter().all(|&v| v == 1.0), "{:?}", frc.values);
        assert_eq!(frc.crossing, None);
    }

    #[test]
    fn frc_of_independent_noise_stays_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 64;
        let counts = ring_counts(n);
        let (mut over, mut total) = (0, 0);
        for _ in 0..20 {
            let a = Image::from_fn(n, |_, _| rng.sample(StandardNormal));
            let b = Image::from_fn(n, |_, _| rng.sample(StandardNormal));
            let frc = fourier_ring_correlation(&a, &b).unwrap();
            for r in 1..frc.values.len() {
                total += 1;
                if frc.values[r].abs() > 3.0 / (counts[r] as f64).sqrt() {
                    over += 1;
                }
            }
        }
        assert!((over as f64) <= 0.02 * total as f64, "{over}/{total}");
    }

    #[test]
    fn frc_crossing_drops_with_snr() {
        let n = 64;
        let t = Template::random(n, &mut ChaCha8Rng::seed_from_u64(7)).render(n, 0.0, 0.0, 0.0, false);
        let power = t.norm_sq() / t.len() as f64;
        let mut last = f64::INFINITY;
        for snr in [100.0, 10.0, 1.0, 0.1] {
            let mut acc = 0.0;
            for trial in 0..10 {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
                let sigma = (power / snr).sqrt();
                let noisy = Image::from_fn(n, |r, c| t.get(r, c) + sigma * rng.sample::<f64, _>(StandardNormal));
                acc += fourier_ring_correlation(&t, &noisy).unwrap().crossing.unwrap_or(0.5);
            }
            let mean = acc / 10.0;
            assert!(mean < last, "snr {snr}: {mean} !< {last}");
            last = mean;
        }
    }
}
