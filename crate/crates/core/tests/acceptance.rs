//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `cargo test --test acceptance -- 3 6` runs only the listed criteria.

use std::f64::consts::TAU;
use std::sync::Arc;
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use cryo2d::em::{run_em, EmOptions};
use cryo2d::evalgen::{aligned_correlation, generate, AlignSearch, SyntheticSpec, Template};
use cryo2d::formats::{parse_star, read_mrc_stack, read_star_ctf, write_mrc_stack, CtfParams, MrcStack};
use cryo2d::neighbors::{invariant_corr, knn_search, pair_matches, select_seeds, AngleGrid};
use cryo2d::pipeline::{align_members, run_pipeline, InitAngles, PipelineConfig};
use cryo2d::spca::{build_basis, reflect, steer, CoeffMatrix, SpcaConfig};
use cryo2d::sync::{
    build_sync_matrix, grade_from_spectrum, member_grades_from_spectrum, rank2_residual, reflection_sync, spectrum,
    PairEstimate, PairTable, SyncMatrix,
};
use cryo2d::transform::rotate_bilinear;
use cryo2d::Image;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Group element `M^f R(θ)` as a 2×2 matrix, `M = diag(1, -1)`.
fn element(theta: f64, flip: bool) -> [[f64; 2]; 2] {
    let (s, c) = theta.sin_cos();
    if flip {
        [[c, -s], [-s, -c]]
    } else {
        [[c, -s], [s, c]]
    }
}

/// Pair estimate read back from the block `g_i g_jᵀ`.
fn estimate_from_block(b: [[f64; 2]; 2]) -> PairEstimate {
    let det = b[0][0] * b[1][1] - b[0][1] * b[1][0];
    if det < 0.0 {
        PairEstimate::new((-b[1][0]).atan2(b[0][0]), true)
    } else {
        PairEstimate::new(b[1][0].atan2(b[0][0]), false)
    }
}

fn product_t(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut o = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            o[r][c] = a[r][0] * b[c][0] + a[r][1] * b[c][1];
        }
    }
    o
}

fn planted_table(thetas: &[f64], flips: &[bool]) -> PairTable {
    let g: Vec<_> = thetas.iter().zip(flips).map(|(&t, &f)| element(t, f)).collect();
    PairTable::from_upper(thetas.len(), |i, j| estimate_from_block(product_t(g[i], g[j])))
}

fn frobenius(m: &SyncMatrix) -> f64 {
    let a = m.matrix();
    let n = a.nrows();
    (0..n).flat_map(|r| (0..n).map(move |c| (r, c))).map(|(r, c)| a[(r, c)].powi(2)).sum::<f64>().sqrt()
}

fn trace_ok(m: &SyncMatrix) -> bool {
    let mc = m.members() as f64;
    (m.trace() - 2.0 * mc).abs() <= 1e-6 * mc
}

fn smooth_fixtures(count: usize, side: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| Template::random(side, &mut rng).render(side, 0.0, 0.0, 0.0, false)).collect()
}

fn criterion_1() -> Outcome {
    let side = 64;
    let fixtures = smooth_fixtures(20, side, 101);
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut training = fixtures.clone();
    for f in &fixtures {
        for _ in 0..5 {
            training.push(rotate_bilinear(f, rng.random::<f64>() * TAU));
        }
    }
    let basis = build_basis(&training, &SpcaConfig::default()).expect("basis");
    let grid = AngleGrid::default();
    let angles: Vec<f64> = [5, 13, 22, 31, 40, 49, 58, 67].iter().map(|&i| grid.angle(i)).collect();
    let (mut worst_rot, mut worst_ref) = (0.0f64, 0.0f64);
    for f in &fixtures {
        let a = basis.expand(f).expect("expand");
        for &alpha in &angles {
            let direct = basis.expand(&rotate_bilinear(f, alpha)).expect("expand");
            worst_rot = worst_rot.max(steer(&a, alpha).relative_error(&direct));
        }
        let mirrored = basis.expand(&f.mirrored()).expect("expand");
        worst_ref = worst_ref.max(reflect(&a).relative_error(&mirrored));
    }
    outcome(
        worst_rot <= 0.05 && worst_ref <= 0.05,
        format!("steering error max {worst_rot:.4}, reflection error max {worst_ref:.2e} (bound 0.05)"),
    )
}

fn criterion_2() -> Outcome {
    let spec = SyntheticSpec { n_templates: 10, images_per_template: 200, side: 48, snr: 0.2, seed: 201, ..Default::default() };
    let data = generate(&spec).expect("synthetic data");
    let basis = build_basis(&data.images, &SpcaConfig { n_coeffs: 300, ..Default::default() }).expect("basis");
    let mut coeffs = basis.expand_many(&data.images).expect("expand");
    coeffs.subtract(basis.center()).expect("center");
    let grid = AngleGrid::default();
    let seeds = select_seeds(coeffs.n_images(), 20, 202).expect("seeds");
    let class_size = 50;
    let table = knn_search(&seeds, &coeffs, &grid, class_size).expect("knn");
    let (mut selection_diffs, mut triple_diffs, mut max_dv) = (0, 0, 0.0f64);
    for (c, &seed) in seeds.iter().enumerate() {
        let a = coeffs.coeffs(seed);
        let mut all: Vec<(usize, cryo2d::neighbors::Match)> =
            (0..coeffs.n_images()).filter(|&j| j != seed).map(|j| (j, invariant_corr(&a, &coeffs.coeffs(j), &grid))).collect();
        all.sort_by(|x, y| y.1.value.total_cmp(&x.1.value).then(x.0.cmp(&y.0)));
        let got = &table.neighbors[c];
        if got[0].index != seed {
            selection_diffs += 1;
        }
        for (nb, (j, m)) in got[1..].iter().zip(&all[..class_size - 1]) {
            if nb.index != *j {
                selection_diffs += 1;
                continue;
            }
            max_dv = max_dv.max((nb.value - m.value).abs());
            if nb.angle_index != m.angle_index || nb.reflected != m.reflected || (nb.value - m.value).abs() > 1e-12 {
                triple_diffs += 1;
            }
        }
    }
    outcome(
        selection_diffs == 0 && triple_diffs == 0,
        format!(
            "{} seeds x {} images: {selection_diffs} selection and {triple_diffs} triple mismatches, max value gap {max_dv:.1e}",
            seeds.len(),
            coeffs.n_images()
        ),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(301);
    let mut lines = Vec::new();
    let mut pass = true;
    for m in [3usize, 10, 150] {
        let thetas: Vec<f64> = (0..m).map(|_| rng.random::<f64>() * TAU).collect();
        let flips: Vec<bool> = (0..m).map(|_| rng.random::<bool>()).collect();
        let sm = build_sync_matrix(&planted_table(&thetas, &flips)).expect("sync matrix");
        let s = spectrum(&sm).expect("spectrum");
        let g = grade_from_spectrum(&sm, &s).g;
        let rel = rank2_residual(&sm, &s) / frobenius(&sm);
        let ok = g >= 1.0 - 1e-9 && rel <= 1e-8 && trace_ok(&sm);
        pass &= ok;
        lines.push(format!("M={m}: G-1={:.1e} resid {rel:.1e}", g - 1.0));
    }
    // trace identity on inconsistent matrices too
    for m in [5usize, 40, 300] {
        let t = PairTable::from_upper(m, |_, _| PairEstimate::new(rng.random::<f64>() * TAU, rng.random::<bool>()));
        pass &= trace_ok(&build_sync_matrix(&t).expect("sync matrix"));
    }
    outcome(pass, lines.join("; "))
}

fn outlier_trial(rng: &mut ChaCha8Rng, k: usize, noise_deg: f64) -> bool {
    let thetas: Vec<f64> = (0..k).map(|_| rng.random::<f64>() * TAU).collect();
    let flips: Vec<bool> = (0..k).map(|_| rng.random::<bool>()).collect();
    let outlier = rng.random_range(0..k);
    let g: Vec<_> = thetas.iter().zip(&flips).map(|(&t, &f)| element(t, f)).collect();
    let sigma = noise_deg.to_radians();
    let table = PairTable::from_upper(k, |i, j| {
        if i == outlier || j == outlier {
            return PairEstimate::new(rng.random::<f64>() * TAU, rng.random::<bool>());
        }
        let e = estimate_from_block(product_t(g[i], g[j]));
        PairEstimate::new(e.theta + sigma * rng.sample::<f64, _>(StandardNormal), e.reflected)
    });
    let sm = build_sync_matrix(&table).expect("sync matrix");
    let s = spectrum(&sm).expect("spectrum");
    let grades = member_grades_from_spectrum(&sm, &s);
    let min = (0..k).min_by(|&a, &b| grades[a].total_cmp(&grades[b])).unwrap();
    min == outlier
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(401);
    let clean = (0..100).filter(|_| outlier_trial(&mut rng, 50, 0.0)).count();
    let noisy = (0..100).filter(|_| outlier_trial(&mut rng, 50, 10.0)).count();
    outcome(clean == 100 && noisy >= 95, format!("outlier ranked last in {clean}/100 clean and {noisy}/100 noisy (10 deg) trials"))
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(501);
    let mut failures = 0;
    let mut total = 0;
    for k in 1..=12usize {
        for _ in 0..50 {
            let thetas: Vec<f64> = (0..k).map(|_| rng.random::<f64>() * TAU).collect();
            let flips: Vec<bool> = (0..k).map(|_| rng.random::<bool>()).collect();
            let table = planted_table(&thetas, &flips);
            let j = |a: usize, b: usize| if table.get(a, b).reflected { -1.0 } else { 1.0 };
            let score = |s: &[f64]| -> f64 {
                let mut t = 0.0;
                for a in 0..k {
                    for b in 0..k {
                        if a != b {
                            t += j(a, b) * s[a] * s[b];
                        }
                    }
                }
                t
            };
            let mut best = f64::NEG_INFINITY;
            let mut best_set = Vec::new();
            for mask in 0u32..(1 << k) {
                let s: Vec<f64> = (0..k).map(|i| if mask >> i & 1 == 1 { -1.0 } else { 1.0 }).collect();
                let v = score(&s);
                if v > best + 1e-12 {
                    best = v;
                    best_set = vec![mask];
                } else if (v - best).abs() <= 1e-12 {
                    best_set.push(mask);
                }
            }
            let flags = reflection_sync(&table).expect("reflection sync");
            let mask = flags.iter().enumerate().fold(0u32, |m, (i, &f)| m | (u32::from(f) << i));
            total += 1;
            if !best_set.contains(&mask) {
                failures += 1;
            }
        }
    }
    outcome(failures == 0, format!("{} of {total} instances (K = 1..12) match the exhaustive optimum", total - failures))
}

fn criterion_6() -> Outcome {
    let spec = SyntheticSpec {
        n_templates: 1,
        images_per_template: 150,
        side: 64,
        snr: 0.05,
        shift_sigma: 1.5,
        max_shift: 3.0,
        reflection_prob: 0.0,
        seed: 601,
    };
    let data = generate(&spec).expect("synthetic class");
    let basis = build_basis(&data.images, &SpcaConfig::default()).expect("basis");
    let mut coeffs = basis.expand_many(&data.images).expect("expand");
    coeffs.subtract(basis.center()).expect("center");
    let grid = AngleGrid::default();
    let members: Vec<usize> = (0..150).collect();
    let pairs = PairTable::from_matches(150, &pair_matches(&members, &coeffs, &grid), &grid).expect("pairs");
    let (flags, angles) = align_members(&members, &pairs, &coeffs, &grid, InitAngles::Sync).expect("alignment");
    let avg = run_em(&data.images, &angles, &flags, &EmOptions::standard(64)).expect("EM");
    let corr = aligned_correlation(&avg.image, &data.template_images[0], AlignSearch::default());
    let monotone = avg.history.windows(2).all(|w| w[1] >= w[0] - 1e-6 * w[0].abs());
    outcome(corr >= 0.9 && monotone, format!("aligned correlation {corr:.4} (>= 0.9), log-likelihood non-decreasing: {monotone}"))
}

fn criterion_7() -> Outcome {
    let spec = SyntheticSpec { n_templates: 20, images_per_template: 500, side: 64, snr: 0.05, seed: 701, ..Default::default() };
    let data = generate(&spec).expect("synthetic data");
    let dir = tempfile::tempdir().expect("temp dir");
    let input = dir.path().join("particles.mrcs");
    write_mrc_stack(&MrcStack::from_images(&data.images, 1.0).expect("stack"), &input).expect("write stack");
    let mut cfg = PipelineConfig { input, out_dir: dir.path().join("out"), ..Default::default() };
    cfg.apply_kv_text("num-classes = 100\nkeep-classes = 50\nclass-size = 300\nkeep-members = 150\nseed = 702").unwrap();
    let out = match run_pipeline(&cfg) {
        Ok(o) => o,
        Err(e) => return outcome(false, format!("pipeline failed: {e}")),
    };
    let template = |i: usize| data.truth[i].template_id;
    let kept_purity: Vec<f64> = out
        .kept_classes()
        .map(|c| c.members.iter().filter(|&&m| template(m) == template(c.seed)).count() as f64 / c.members.len() as f64)
        .collect();
    let class_purity = |c: usize| {
        let m = out.table.members(c);
        m.iter().filter(|&&i| template(i) == template(out.table.seeds[c])).count() as f64 / m.len() as f64
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let kept_full: Vec<f64> = out.classes.iter().filter(|c| c.kept).map(|c| class_purity(c.class)).collect();
    let dropped_full: Vec<f64> = out.classes.iter().filter(|c| !c.kept).map(|c| class_purity(c.class)).collect();
    let (kp, kf, df) = (mean(&kept_purity), mean(&kept_full), mean(&dropped_full));
    let t = out.timing;
    outcome(
        kp >= 0.9 && kf > df && t.total < 1800.0,
        format!(
            "kept purity {kp:.3} (>= 0.9); before member pruning kept {kf:.3} vs discarded {df:.3}; total {:.0} s (preprocess {:.0}, sPCA {:.0}, NN {:.0}, EM {:.0})",
            t.total, t.preprocess, t.spca, t.nn, t.em
        ),
    )
}

fn random_coeffs(n: usize, seed: u64) -> CoeffMatrix {
    let mut freqs = Vec::new();
    let mut k = 0u32;
    while freqs.len() < 500 {
        let count = (16 - (k / 4) as usize).max(1);
        freqs.extend(std::iter::repeat_n(k, count.min(500 - freqs.len())));
        k += 1;
    }
    let freqs: Arc<[u32]> = freqs.into();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * 500);
    for _ in 0..n {
        for &k in freqs.iter() {
            let s = (-(k as f64) / 20.0).exp();
            let im = if k == 0 { 0.0 } else { s * rng.sample::<f64, _>(StandardNormal) };
            data.push(Complex64::new(s * rng.sample::<f64, _>(StandardNormal), im));
        }
    }
    CoeffMatrix::new(freqs, data).expect("coefficients")
}

fn criterion_8() -> Outcome {
    let grid = AngleGrid::default();
    let mut per_n = Vec::new();
    let mut last = 0.0;
    for n in [12_500usize, 25_000, 50_000] {
        let coeffs = random_coeffs(n, 801);
        let seeds = select_seeds(n, 1000, 802).expect("seeds");
        let t = Instant::now();
        let table = knn_search(&seeds, &coeffs, &grid, 300).expect("knn");
        let secs = t.elapsed().as_secs_f64();
        assert_eq!(table.n_classes(), 1000);
        per_n.push(secs / n as f64);
        last = secs;
    }
    let (lo, hi) = per_n.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
    let ratio = hi / lo;
    outcome(
        last < 300.0 && ratio <= 1.2,
        format!(
            "N=50000: {last:.1} s (< 300 s); per-image cost spread {ratio:.3} (<= 1.2) over 12.5k/25k/50k on {} threads",
            rayon::current_num_threads()
        ),
    )
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut rng = ChaCha8Rng::seed_from_u64(901);
    let mut mismatches = 0;
    for i in 0..100 {
        let side = rng.random_range(1..40usize);
        let n = rng.random_range(1..6usize);
        let data: Vec<f32> = (0..side * side * n)
            .map(|_| match rng.random_range(0..20) {
                0 => f32::from_bits(rng.random::<u32>()),
                1 => f32::MAX,
                2 => -0.0,
                _ => rng.sample::<f64, _>(StandardNormal) as f32 * 1e3,
            })
            .collect();
        let stack = MrcStack::new(side, rng.random_range(0.5..5.0), data).expect("stack");
        let path = dir.path().join(format!("s{i}.mrcs"));
        write_mrc_stack(&stack, &path).expect("write");
        let back = read_mrc_stack(&path).expect("read");
        let same_bits = back.data().len() == stack.data().len()
            && back.data().iter().zip(stack.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        let mut expected_header = stack.header.clone();
        (expected_header.dmin, expected_header.dmax, expected_header.dmean, expected_header.rms) =
            (back.header.dmin, back.header.dmax, back.header.dmean, back.header.rms);
        let again = dir.path().join(format!("s{i}b.mrcs"));
        write_mrc_stack(&back, &again).expect("rewrite");
        let stable = std::fs::read(&path).expect("read bytes") == std::fs::read(&again).expect("read bytes");
        if !same_bits || !stable || back.side() != side || back.n_images() != n || back.header != expected_header {
            mismatches += 1;
        }
    }
    let fixtures = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures");
    let ctf = |name: &str| read_star_ctf(format!("{fixtures}/{name}")).expect("fixture parses");
    let approx = |p: &CtfParams, e: [f64; 7]| {
        let got = [p.voltage, p.spherical_aberration, p.amplitude_contrast, p.defocus_u, p.defocus_v, p.astigmatism_angle, p.phase_shift];
        got.iter().zip(e).all(|(a, b)| (a - b).abs() <= 1e-9 * b.abs().max(1.0))
    };
    let expected: [(&str, Vec<[f64; 7]>); 3] = [
        (
            "optics_groups.star",
            vec![
                [300.0, 2.7, 0.1, 12345.6, 12001.2, 35.25, 0.0],
                [300.0, 2.7, 0.1, 12345.6, 12001.2, 35.25, 0.0],
                [200.0, 2.0, 0.07, 20150.0, 19875.5, -12.0, 0.0],
                [200.0, 2.0, 0.07, 9800.0, 9800.0, 0.0, 0.0],
            ],
        ),
        (
            "per_particle.star",
            vec![
                [300.0, 2.7, 0.1, 15000.0, 14500.0, 10.0, 0.0],
                [300.0, 2.7, 0.1, 16000.0, 15500.0, 20.0, 0.0],
                [300.0, 2.7, 0.1, 17000.0, 16500.0, 30.0, 90.0],
            ],
        ),
        ("scalar_optics.star", vec![[120.0, 1.4, 0.15, 8000.0, 7600.0, 0.0, 0.0], [120.0, 1.4, 0.15, 8500.0, 8500.0, 0.0, 0.0]]),
    ];
    let mut star_ok = 0;
    for (name, records) in &expected {
        let got = ctf(name);
        if got.len() == records.len() && got.iter().zip(records).all(|(p, e)| approx(p, *e)) {
            star_ok += 1;
        }
    }
    let malformed = parse_star("data_\nloop_\n_rlnDefocusU\n_rlnDefocusV\n1.0\n").is_err();
    outcome(
        mismatches == 0 && star_ok == expected.len() && malformed,
        format!("{} of 100 stacks bit-identical; {star_ok} of {} STAR fixtures parsed as expected", 100 - mismatches, expected.len()),
    )
}

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "steering and reflection identities", criterion_1),
        (2, "batched search equals per-pair oracle", criterion_2),
        (3, "synchronization exactness", criterion_3),
        (4, "outlier detection by member grade", criterion_4),
        (5, "reflection sync vs exhaustive optimum", criterion_5),
        (6, "EM recovery at SNR 0.05", criterion_6),
        (7, "end-to-end synthetic run", criterion_7),
        (8, "nearest-neighbor performance envelope", criterion_8),
        (9, "format round trip", criterion_9),
    ];
    let mut failed = Vec::new();
    for (id, name, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let o = run();
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {id} {status}: {name}: {} [{:.1} s]", o.detail, t.elapsed().as_secs_f64());
        if !o.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
