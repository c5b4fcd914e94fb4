//! Stage orchestration: preprocess → sPCA → nearest neighbors → grading → EM.
//!
//! Every stage output is checkpointed under `<out>/checkpoints/` with the
//! canonical configuration text and its hash, so [`resume`] can restart from
//! the last finished stage and refuse checkpoints written under another
//! configuration.

use std::fmt::{self, Write as _};
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::em::{run_em, ClassAverage, EmOptions, TransformGrid};
use crate::error::{invalid, Error, Result};
use crate::formats::{read_mrc_stack, read_star_ctf, write_mrc_stack, MrcStack};
use crate::image::Image;
use crate::neighbors::{best_angle_in_branch, knn_search, pair_matches, select_seeds, AngleGrid, Neighbor, NeighborTable};
use crate::preprocess::{estimate_noise_spectrum, fourier_downsample, phase_flip, sample_indices, whiten, SignGridCache};
use crate::spca::{build_basis, CoeffMatrix, SpcaConfig};
use crate::sync::{
    build_sync_matrix, grade_from_spectrum, member_grades_from_spectrum, prune_classes, prune_members, reflection_sync,
    relative_angles, spectrum, ClassGrade, PairTable,
};

/// How EM starting angles are obtained for each class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitAngles {
    /// From the leading eigenvectors of the class synchronization matrix.
    Sync,
    /// From each member's match against the class reference alone.
    Reference,
}

impl fmt::Display for InitAngles {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitAngles::Sync => "sync",
            InitAngles::Reference => "reference",
        })
    }
}

impl FromStr for InitAngles {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sync" => Ok(InitAngles::Sync),
            "reference" => Ok(InitAngles::Reference),
            other => Err(invalid(format!("unknown EM initialization {other:?} (expected sync or reference)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub input: PathBuf,
    pub star: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Seed classes before pruning.
    pub num_classes: usize,
    pub keep_classes: usize,
    pub class_size: usize,
    pub keep_members: usize,
    pub n_coeffs: usize,
    /// Working image side; inputs at or below it are not resampled.
    pub downsample: usize,
    pub n_theta: usize,
    pub bandlimit: f64,
    pub spca_sample: usize,
    pub noise_sample: usize,
    /// Pixels at the working size; noise is estimated outside it.
    /// Defaults to 0.45 × working side.
    pub particle_radius: Option<f64>,
    /// Å per input pixel; read from the stack header when unset.
    pub pixel_size: Option<f64>,
    pub whiten: bool,
    pub em_iters: usize,
    pub em_rotations: usize,
    pub em_max_shift: u32,
    /// Run EM on phase-flipped full-size images instead of the working images.
    pub em_on_raw: bool,
    pub em_init: InitAngles,
    pub seed: u64,
    /// 0 uses every available core.
    pub workers: usize,
    pub checkpoints: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input: PathBuf::new(),
            star: None,
            out_dir: PathBuf::new(),
            num_classes: 3000,
            keep_classes: 1500,
            class_size: 300,
            keep_members: 150,
            n_coeffs: 500,
            downsample: 89,
            n_theta: 72,
            bandlimit: 0.5,
            spca_sample: 4000,
            noise_sample: 4000,
            particle_radius: None,
            pixel_size: None,
            whiten: true,
            em_iters: 7,
            em_rotations: 72,
            em_max_shift: 4,
            em_on_raw: false,
            em_init: InitAngles::Sync,
            seed: 0,
            workers: 0,
            checkpoints: true,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| invalid(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(invalid(format!("bad value {value:?} for {key} (expected true or false)"))),
    }
}

/// `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| invalid(format!("config line {}: expected key = value", ln + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl PipelineConfig {
    /// Set one option by its command-line name (without dashes).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let opt_f64 = |v: &str| -> Result<Option<f64>> {
            if v.is_empty() || v == "auto" {
                Ok(None)
            } else {
                parse_value(key, v).map(Some)
            }
        };
        match key {
            "input" => self.input = value.into(),
            "star" => self.star = if value.is_empty() { None } else { Some(value.into()) },
            "out" => self.out_dir = value.into(),
            "num-classes" => self.num_classes = parse_value(key, value)?,
            "keep-classes" => self.keep_classes = parse_value(key, value)?,
            "class-size" => self.class_size = parse_value(key, value)?,
            "keep-members" => self.keep_members = parse_value(key, value)?,
            "n-coeffs" => self.n_coeffs = parse_value(key, value)?,
            "downsample" => self.downsample = parse_value(key, value)?,
            "n-theta" => self.n_theta = parse_value(key, value)?,
            "bandlimit" => self.bandlimit = parse_value(key, value)?,
            "spca-sample" => self.spca_sample = parse_value(key, value)?,
            "noise-sample" => self.noise_sample = parse_value(key, value)?,
            "particle-radius" => self.particle_radius = opt_f64(value)?,
            "pixel-size" => self.pixel_size = opt_f64(value)?,
            "whiten" => self.whiten = parse_bool(key, value)?,
            "em-iters" => self.em_iters = parse_value(key, value)?,
            "em-rotations" => self.em_rotations = parse_value(key, value)?,
            "em-max-shift" => self.em_max_shift = parse_value(key, value)?,
            "em-on-raw" => self.em_on_raw = parse_bool(key, value)?,
            "em-init" => self.em_init = value.parse()?,
            "seed" => self.seed = parse_value(key, value)?,
            "workers" => self.workers = parse_value(key, value)?,
            "checkpoints" => self.checkpoints = parse_bool(key, value)?,
            other => return Err(invalid(format!("unknown option {other:?}"))),
        }
        Ok(())
    }

    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_kv(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.as_os_str().is_empty() {
            return Err(invalid("no input stack given"));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(invalid("no output directory given"));
        }
        let counts = [
            ("num-classes", self.num_classes),
            ("keep-classes", self.keep_classes),
            ("class-size", self.class_size),
            ("keep-members", self.keep_members),
            ("n-coeffs", self.n_coeffs),
            ("downsample", self.downsample),
            ("n-theta", self.n_theta),
            ("spca-sample", self.spca_sample),
            ("noise-sample", self.noise_sample),
            ("em-rotations", self.em_rotations),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(invalid(format!("{name} must be positive")));
        }
        if self.keep_classes > self.num_classes {
            return Err(invalid(format!("keep-classes {} exceeds num-classes {}", self.keep_classes, self.num_classes)));
        }
        if self.keep_members > self.class_size {
            return Err(invalid(format!("keep-members {} exceeds class-size {}", self.keep_members, self.class_size)));
        }
        if !(self.bandlimit > 0.0 && self.bandlimit <= 0.5) {
            return Err(invalid("bandlimit must lie in (0, 0.5]"));
        }
        if self.downsample < 8 {
            return Err(invalid("downsample must be at least 8 pixels"));
        }
        if let Some(r) = self.particle_radius {
            if !(r > 0.0) {
                return Err(invalid("particle-radius must be positive"));
            }
        }
        if let Some(p) = self.pixel_size {
            if !(p > 0.0) {
                return Err(invalid("pixel-size must be positive"));
            }
        }
        Ok(())
    }

    /// Every option that affects results, one `key = value` per line in a
    /// fixed order. Output location, worker count and checkpointing are left out.
    pub fn canonical_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "auto".to_string(), |x| format!("{x:?}"));
        let mut s = String::new();
        let mut line = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        line("input", self.input.display().to_string());
        line("star", self.star.as_ref().map_or_else(String::new, |p| p.display().to_string()));
        line("num-classes", self.num_classes.to_string());
        line("keep-classes", self.keep_classes.to_string());
        line("class-size", self.class_size.to_string());
        line("keep-members", self.keep_members.to_string());
        line("n-coeffs", self.n_coeffs.to_string());
        line("downsample", self.downsample.to_string());
        line("n-theta", self.n_theta.to_string());
        line("bandlimit", format!("{:?}", self.bandlimit));
        line("spca-sample", self.spca_sample.to_string());
        line("noise-sample", self.noise_sample.to_string());
        line("particle-radius", opt(self.particle_radius));
        line("pixel-size", opt(self.pixel_size));
        line("whiten", self.whiten.to_string());
        line("em-iters", self.em_iters.to_string());
        line("em-rotations", self.em_rotations.to_string());
        line("em-max-shift", self.em_max_shift.to_string());
        line("em-on-raw", self.em_on_raw.to_string());
        line("em-init", self.em_init.to_string());
        line("seed", self.seed.to_string());
        s
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_text().as_bytes()).into()
    }

    fn em_options(&self, side: usize) -> Result<EmOptions> {
        Ok(EmOptions {
            n_iter: self.em_iters,
            grid: TransformGrid::new(self.em_rotations, self.em_max_shift)?,
            support_radius: Some((side as f64 - 1.0) / 2.0),
        })
    }
}

/// Lines that differ between two canonical texts, as `key: old -> new`.
pub fn config_diff(old: &str, new: &str) -> Vec<String> {
    let parse = |t: &str| parse_kv(t).unwrap_or_default();
    let (a, b) = (parse(old), parse(new));
    let mut out = Vec::new();
    for (k, v) in &b {
        match a.iter().find(|(ka, _)| ka == k) {
            Some((_, va)) if va == v => {}
            Some((_, va)) => out.push(format!("{k}: {va} -> {v}")),
            None => out.push(format!("{k}: (absent) -> {v}")),
        }
    }
    for (k, v) in &a {
        if !b.iter().any(|(kb, _)| kb == k) {
            out.push(format!("{k}: {v} -> (absent)"));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Preprocess,
    Spca,
    Neighbors,
    Grades,
    Em,
}

impl Stage {
    pub const CHECKPOINTED: [Stage; 4] = [Stage::Preprocess, Stage::Spca, Stage::Neighbors, Stage::Grades];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Preprocess => "preprocess",
            Stage::Spca => "spca",
            Stage::Neighbors => "neighbors",
            Stage::Grades => "grades",
            Stage::Em => "em",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("input error: {0}")]
    Input(Error),

    #[error("stage {stage} failed: {source}{}", manifest_suffix(.manifest))]
    Stage {
        stage: Stage,
        source: Error,
        /// Files written before the failure.
        manifest: Vec<PathBuf>,
    },

    #[error("checkpoint {}: {reason}", .path.display())]
    Checkpoint { path: PathBuf, reason: String },
}

fn manifest_suffix(manifest: &[PathBuf]) -> String {
    if manifest.is_empty() {
        "; no outputs were written".into()
    } else {
        let list: Vec<String> = manifest.iter().map(|p| p.display().to_string()).collect();
        format!("; partial outputs: {}", list.join(", "))
    }
}

impl PipelineError {
    /// 2 for bad input or configuration, 3 for a failure inside a stage.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Input(_) | PipelineError::Checkpoint { .. } => 2,
            PipelineError::Stage { .. } => 3,
        }
    }
}

/// Canonical configuration of the last run, written to the output directory.
pub const CONFIG_FILE: &str = "config.txt";

const CKPT_MAGIC: &[u8; 8] = b"C2DCKPT\0";
const CKPT_VERSION: u32 = 1;

pub fn checkpoint_path(out_dir: &Path, stage: Stage) -> PathBuf {
    out_dir.join("checkpoints").join(format!("{}.ckpt", stage.name()))
}

/// Header (magic, version, stage, config hash and text) then the payload
/// preceded by its length and SHA-256.
pub fn write_checkpoint(path: &Path, stage: Stage, cfg: &PipelineConfig, payload: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let text = cfg.canonical_text();
    let mut buf = Vec::with_capacity(payload.len() + text.len() + 128);
    buf.write_all(CKPT_MAGIC)?;
    buf.write_u32::<LittleEndian>(CKPT_VERSION)?;
    buf.write_u8(stage.name().len() as u8)?;
    buf.write_all(stage.name().as_bytes())?;
    buf.write_all(&cfg.hash())?;
    buf.write_u32::<LittleEndian>(text.len() as u32)?;
    buf.write_all(text.as_bytes())?;
    buf.write_u64::<LittleEndian>(payload.len() as u64)?;
    let digest: [u8; 32] = Sha256::digest(payload).into();
    buf.write_all(&digest)?;
    buf.write_all(payload)?;
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Payload of a checkpoint, after checking stage, integrity and configuration.
pub fn read_checkpoint(path: &Path, stage: Stage, cfg: &PipelineConfig) -> Result<Vec<u8>, PipelineError> {
    let fail = |reason: String| PipelineError::Checkpoint { path: path.to_path_buf(), reason };
    let bytes = fs::read(path).map_err(|e| fail(e.to_string()))?;
    let mut r = Cursor::new(&bytes[..]);
    let truncated = |_| fail("truncated header".into());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != CKPT_MAGIC {
        return Err(fail("not a checkpoint file".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
    if version != CKPT_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let n = r.read_u8().map_err(truncated)? as usize;
    let mut name = vec![0u8; n];
    r.read_exact(&mut name).map_err(truncated)?;
    if name != stage.name().as_bytes() {
        return Err(fail(format!("holds stage {:?}, expected {}", String::from_utf8_lossy(&name), stage)));
    }
    let mut hash = [0u8; 32];
    r.read_exact(&mut hash).map_err(truncated)?;
    let text_len = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let mut text = vec![0u8; text_len];
    r.read_exact(&mut text).map_err(truncated)?;
    let text = String::from_utf8_lossy(&text).into_owned();
    let payload_len = r.read_u64::<LittleEndian>().map_err(truncated)? as usize;
    let mut digest = [0u8; 32];
    r.read_exact(&mut digest).map_err(truncated)?;
    let start = r.position() as usize;
    if bytes.len() - start != payload_len {
        return Err(fail(format!("payload is {} bytes, header says {payload_len}", bytes.len() - start)));
    }
    let payload = &bytes[start..];
    let actual: [u8; 32] = Sha256::digest(payload).into();
    if actual != digest {
        return Err(fail("content hash mismatch; the file is corrupted".into()));
    }
    let stored_hash: [u8; 32] = Sha256::digest(text.as_bytes()).into();
    if stored_hash != hash {
        return Err(fail("configuration hash does not match the stored configuration; the file is corrupted".into()));
    }
    if hash != cfg.hash() {
        let diff = config_diff(&text, &cfg.canonical_text());
        return Err(fail(format!("written under a different configuration: {}", diff.join("; "))));
    }
    Ok(payload.to_vec())
}

/// Per-stage wall-clock seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Timing {
    pub preprocess: f64,
    pub spca: f64,
    /// Neighbor search plus class grading.
    pub nn: f64,
    pub em: f64,
    pub total: f64,
}

impl Timing {
    pub const HEADER: &'static str = "preprocess\tsPCA\tNN\tEM\ttotal";

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\n{:.3}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\n",
            Self::HEADER,
            self.preprocess,
            self.spca,
            self.nn,
            self.em,
            self.total
        )
    }
}

/// Grading result for one seed class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRecord {
    pub class: usize,
    pub seed: usize,
    pub grade: ClassGrade,
    pub kept: bool,
    /// Members surviving member pruning, EM reference first.
    pub members: Vec<usize>,
    pub member_grades: Vec<f64>,
    /// Mirror flags relative to the reference.
    pub reflected: Vec<bool>,
    /// EM starting angles relative to the reference.
    pub angles: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub classes: Vec<ClassRecord>,
    /// Class indices by descending grade (ties by index).
    pub order: Vec<usize>,
    /// EM averages of the kept classes, in `order`.
    pub averages: Vec<ClassAverage>,
    pub table: NeighborTable,
    pub timing: Timing,
    pub resumed_from: Option<Stage>,
    pub written: Vec<PathBuf>,
}

impl PipelineOutput {
    pub fn kept_classes(&self) -> impl Iterator<Item = &ClassRecord> {
        self.order.iter().map(|&c| &self.classes[c]).filter(|c| c.kept)
    }
}

struct Preprocessed {
    working: Vec<Image>,
    /// Phase-flipped full-size images for EM, when requested.
    raw: Option<Vec<Image>>,
    pixel_size: f64,
}

fn round_f32(img: Image) -> Image {
    let side = img.side();
    Image::from_vec(side, img.into_vec().into_iter().map(|v| v as f32 as f64).collect()).expect("square")
}

fn preprocess_stage(cfg: &PipelineConfig, stack: &MrcStack) -> Result<Preprocessed> {
    let n = stack.n_images();
    let side = stack.side();
    let pixel_size = cfg.pixel_size.unwrap_or_else(|| stack.pixel_size());
    let ctf = match &cfg.star {
        Some(p) => {
            let params = read_star_ctf(p)?;
            if params.len() != n {
                return Err(invalid(format!("STAR file lists {} particles but the stack holds {n}", params.len())));
            }
            Some(params)
        }
        None => None,
    };
    let cache = SignGridCache::new();
    let flipped: Vec<Image> = (0..n)
        .into_par_iter()
        .map(|i| {
            let img = stack.image(i);
            if img.has_nan() {
                return Err(Error::NanPixels { index: i });
            }
            match &ctf {
                Some(params) => phase_flip(&img, &cache.get(&params[i], side, pixel_size)),
                None => Ok(img),
            }
        })
        .collect::<Result<_>>()?;
    let target = cfg.downsample.min(side);
    let mut working: Vec<Image> = if target < side {
        flipped.par_iter().map(|im| fourier_downsample(im, target)).collect::<Result<_>>()?
    } else {
        flipped.clone()
    };
    if cfg.whiten {
        let radius = cfg.particle_radius.unwrap_or(0.45 * target as f64);
        let sample: Vec<Image> = sample_indices(n, cfg.noise_sample, cfg.seed).into_iter().map(|i| working[i].clone()).collect();
        let noise = estimate_noise_spectrum(&sample, radius)?;
        working = working.par_iter().map(|im| whiten(im, &noise)).collect();
    }
    let working = working.into_iter().map(round_f32).collect();
    let raw = cfg.em_on_raw.then(|| flipped.into_iter().map(round_f32).collect());
    Ok(Preprocessed { working, raw, pixel_size: pixel_size * side as f64 / target as f64 })
}

fn write_images(w: &mut Vec<u8>, images: &[Image]) -> Result<()> {
    w.write_u64::<LittleEndian>(images.len() as u64)?;
    w.write_u64::<LittleEndian>(images.first().map_or(0, Image::side) as u64)?;
    for im in images {
        for &v in im.data() {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    Ok(())
}

fn read_images(r: &mut impl Read) -> Result<Vec<Image>> {
    let n = r.read_u64::<LittleEndian>()? as usize;
    let side = r.read_u64::<LittleEndian>()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut data = vec![0f32; side * side];
        r.read_f32_into::<LittleEndian>(&mut data)?;
        out.push(Image::from_vec(side, data.into_iter().map(f64::from).collect())?);
    }
    Ok(out)
}

impl Preprocessed {
    fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Vec::new();
        w.write_f64::<LittleEndian>(self.pixel_size)?;
        write_images(&mut w, &self.working)?;
        w.write_u8(u8::from(self.raw.is_some()))?;
        if let Some(raw) = &self.raw {
            write_images(&mut w, raw)?;
        }
        Ok(w)
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let pixel_size = r.read_f64::<LittleEndian>()?;
        let working = read_images(&mut r)?;
        let raw = if r.read_u8()? == 1 { Some(read_images(&mut r)?) } else { None };
        Ok(Self { working, raw, pixel_size })
    }
}

fn encode_table(t: &NeighborTable) -> Result<Vec<u8>> {
    let mut w = Vec::new();
    w.write_u64::<LittleEndian>(t.grid.len() as u64)?;
    w.write_u64::<LittleEndian>(t.seeds.len() as u64)?;
    for (seed, list) in t.seeds.iter().zip(&t.neighbors) {
        w.write_u64::<LittleEndian>(*seed as u64)?;
        w.write_u64::<LittleEndian>(list.len() as u64)?;
        for nb in list {
            w.write_u64::<LittleEndian>(nb.index as u64)?;
            w.write_f64::<LittleEndian>(nb.value)?;
            w.write_u32::<LittleEndian>(nb.angle_index as u32)?;
            w.write_u8(u8::from(nb.reflected))?;
        }
    }
    Ok(w)
}

fn decode_table(bytes: &[u8]) -> Result<NeighborTable> {
    let mut r = Cursor::new(bytes);
    let grid = AngleGrid::new(r.read_u64::<LittleEndian>()? as usize)?;
    let n = r.read_u64::<LittleEndian>()? as usize;
    let (mut seeds, mut neighbors) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        seeds.push(r.read_u64::<LittleEndian>()? as usize);
        let len = r.read_u64::<LittleEndian>()? as usize;
        let mut list = Vec::with_capacity(len);
        for _ in 0..len {
            list.push(Neighbor {
                index: r.read_u64::<LittleEndian>()? as usize,
                value: r.read_f64::<LittleEndian>()?,
                angle_index: r.read_u32::<LittleEndian>()? as usize,
                reflected: r.read_u8()? == 1,
            });
        }
        neighbors.push(list);
    }
    Ok(NeighborTable { grid, seeds, neighbors })
}

fn encode_classes(classes: &[ClassRecord]) -> Result<Vec<u8>> {
    let mut w = Vec::new();
    w.write_u64::<LittleEndian>(classes.len() as u64)?;
    for c in classes {
        w.write_u64::<LittleEndian>(c.class as u64)?;
        w.write_u64::<LittleEndian>(c.seed as u64)?;
        w.write_f64::<LittleEndian>(c.grade.g)?;
        w.write_f64::<LittleEndian>(c.grade.lambda1)?;
        w.write_f64::<LittleEndian>(c.grade.lambda2)?;
        w.write_u8(u8::from(c.grade.degenerate))?;
        w.write_u8(u8::from(c.kept))?;
        w.write_u64::<LittleEndian>(c.members.len() as u64)?;
        for i in 0..c.members.len() {
            w.write_u64::<LittleEndian>(c.members[i] as u64)?;
            w.write_f64::<LittleEndian>(c.member_grades[i])?;
            w.write_u8(u8::from(c.reflected[i]))?;
            w.write_f64::<LittleEndian>(c.angles[i])?;
        }
    }
    Ok(w)
}

fn decode_classes(bytes: &[u8]) -> Result<Vec<ClassRecord>> {
    let mut r = Cursor::new(bytes);
    let n = r.read_u64::<LittleEndian>()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let class = r.read_u64::<LittleEndian>()? as usize;
        let seed = r.read_u64::<LittleEndian>()? as usize;
        let grade = ClassGrade {
            g: r.read_f64::<LittleEndian>()?,
            lambda1: r.read_f64::<LittleEndian>()?,
            lambda2: r.read_f64::<LittleEndian>()?,
            degenerate: r.read_u8()? == 1,
        };
        let kept = r.read_u8()? == 1;
        let m = r.read_u64::<LittleEndian>()? as usize;
        let mut rec = ClassRecord {
            class,
            seed,
            grade,
            kept,
            members: Vec::with_capacity(m),
            member_grades: Vec::with_capacity(m),
            reflected: Vec::with_capacity(m),
            angles: Vec::with_capacity(m),
        };
        for _ in 0..m {
            rec.members.push(r.read_u64::<LittleEndian>()? as usize);
            rec.member_grades.push(r.read_f64::<LittleEndian>()?);
            rec.reflected.push(r.read_u8()? == 1);
            rec.angles.push(r.read_f64::<LittleEndian>()?);
        }
        out.push(rec);
    }
    Ok(out)
}

fn spca_stage(cfg: &PipelineConfig, images: &[Image]) -> Result<CoeffMatrix> {
    let scfg = SpcaConfig { bandlimit: cfg.bandlimit, n_coeffs: cfg.n_coeffs, max_sample: cfg.spca_sample, rng_seed: cfg.seed };
    let basis = build_basis(images, &scfg)?;
    let mut coeffs = basis.expand_many(images)?;
    coeffs.subtract(basis.center())?;
    Ok(coeffs)
}

/// Mirror flags and starting angles for `members` (indices into `coeffs`,
/// reference first), from their pair table.
pub fn align_members(
    members: &[usize],
    pairs: &PairTable,
    coeffs: &CoeffMatrix,
    grid: &AngleGrid,
    init: InitAngles,
) -> Result<(Vec<bool>, Vec<f64>)> {
    let flags = reflection_sync(pairs)?;
    let angles = match init {
        InitAngles::Sync => relative_angles(&spectrum(&build_sync_matrix(pairs)?)?, &flags),
        InitAngles::Reference => {
            let reference = coeffs.coeffs(members[0]);
            (0..members.len())
                .map(|j| {
                    if j == 0 {
                        return 0.0;
                    }
                    let pe = pairs.get(0, j);
                    if pe.reflected == flags[j] {
                        if pe.reflected {
                            pe.theta
                        } else {
                            (-pe.theta).rem_euclid(std::f64::consts::TAU)
                        }
                    } else {
                        best_angle_in_branch(&reference, &coeffs.coeffs(members[j]), grid, flags[j]).angle(grid)
                    }
                })
                .collect()
        }
    };
    Ok((flags, angles))
}

/// Grade one class and choose its members, flags and starting angles.
fn grade_class(cfg: &PipelineConfig, class: usize, table: &NeighborTable, coeffs: &CoeffMatrix) -> Result<ClassRecord> {
    let members = table.members(class);
    let grid = &table.grid;
    let pairs = PairTable::from_matches(members.len(), &pair_matches(&members, coeffs, grid), grid)?;
    let sync = build_sync_matrix(&pairs)?;
    let spec = spectrum(&sync)?;
    let grade = grade_from_spectrum(&sync, &spec);
    let all_grades = member_grades_from_spectrum(&sync, &spec);
    let mut keep = prune_members(&all_grades, cfg.keep_members.min(members.len()));
    keep.sort_unstable();
    let sub = pairs.subset(&keep);
    let kept_members: Vec<usize> = keep.iter().map(|&p| members[p]).collect();
    let (reflected, angles) = align_members(&kept_members, &sub, coeffs, grid, cfg.em_init)?;
    Ok(ClassRecord {
        class,
        seed: table.seeds[class],
        grade,
        kept: false,
        members: kept_members,
        member_grades: keep.iter().map(|&p| all_grades[p]).collect(),
        reflected,
        angles,
    })
}

fn class_order(classes: &[ClassRecord]) -> Vec<usize> {
    let grades: Vec<f64> = classes.iter().map(|c| c.grade.g).collect();
    prune_classes(&grades, classes.len())
}

fn grades_tsv(classes: &[ClassRecord], order: &[usize]) -> String {
    let mut s = String::from("rank\tclass\tseed\tG\tlambda1\tlambda2\tdegenerate\tkept\tstack_index\n");
    let mut stack_index = 0;
    for (rank, &c) in order.iter().enumerate() {
        let r = &classes[c];
        let idx = if r.kept {
            stack_index += 1;
            (stack_index - 1).to_string()
        } else {
            "-".into()
        };
        writeln!(
            s,
            "{rank}\t{}\t{}\t{:.9}\t{:.6}\t{:.6}\t{}\t{}\t{idx}",
            r.class,
            r.seed,
            r.grade.g,
            r.grade.lambda1,
            r.grade.lambda2,
            u8::from(r.grade.degenerate),
            u8::from(r.kept)
        )
        .unwrap();
    }
    s
}

fn members_tsv(classes: &[ClassRecord], order: &[usize]) -> String {
    let mut s = String::from("stack_index\tclass\timage\tmember_grade\treflected\tinit_angle_rad\n");
    for (si, r) in order.iter().map(|&c| &classes[c]).filter(|r| r.kept).enumerate() {
        for i in 0..r.members.len() {
            writeln!(s, "{si}\t{}\t{}\t{:.9}\t{}\t{:.9}", r.class, r.members[i], r.member_grades[i], u8::from(r.reflected[i]), r.angles[i])
                .unwrap();
        }
    }
    s
}

/// Run every stage from scratch.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput, PipelineError> {
    execute(cfg, false)
}

/// Reuse the longest chain of valid checkpoints, then run the rest.
pub fn resume(cfg: &PipelineConfig) -> Result<PipelineOutput, PipelineError> {
    execute(cfg, true)
}

fn execute(cfg: &PipelineConfig, reuse: bool) -> Result<PipelineOutput, PipelineError> {
    cfg.validate().map_err(PipelineError::Input)?;
    if cfg.workers > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| PipelineError::Input(invalid(e.to_string())))?;
        pool.install(|| run_stages(cfg, reuse))
    } else {
        run_stages(cfg, reuse)
    }
}

struct Runner<'a> {
    cfg: &'a PipelineConfig,
    reuse: bool,
    written: Vec<PathBuf>,
    resumed_from: Option<Stage>,
}

impl Runner<'_> {
    fn fail(&self, stage: Stage) -> impl FnOnce(Error) -> PipelineError + '_ {
        move |source| PipelineError::Stage { stage, source, manifest: self.written.clone() }
    }

    /// Payload of a reusable checkpoint, or `None` when the stage must run.
    fn cached(&mut self, stage: Stage) -> Result<Option<Vec<u8>>, PipelineError> {
        if !self.reuse {
            return Ok(None);
        }
        let path = checkpoint_path(&self.cfg.out_dir, stage);
        if !path.exists() {
            self.reuse = false;
            return Ok(None);
        }
        let payload = read_checkpoint(&path, stage, self.cfg)?;
        self.resumed_from = Some(stage);
        log::info!("reusing {stage} checkpoint {}", path.display());
        Ok(Some(payload))
    }

    fn save(&mut self, stage: Stage, payload: Result<Vec<u8>>) -> Result<(), PipelineError> {
        if !self.cfg.checkpoints {
            return Ok(());
        }
        let path = checkpoint_path(&self.cfg.out_dir, stage);
        payload
            .and_then(|p| write_checkpoint(&path, stage, self.cfg, &p))
            .map_err(|e| PipelineError::Stage { stage, source: e, manifest: self.written.clone() })?;
        self.written.push(path);
        Ok(())
    }

    fn write_output(&mut self, stage: Stage, name: &str, content: &str) -> Result<(), PipelineError> {
        let path = self.cfg.out_dir.join(name);
        fs::write(&path, content).map_err(|e| PipelineError::Stage { stage, source: e.into(), manifest: self.written.clone() })?;
        self.written.push(path);
        Ok(())
    }
}

fn run_stages(cfg: &PipelineConfig, reuse: bool) -> Result<PipelineOutput, PipelineError> {
    let total = Instant::now();
    fs::create_dir_all(&cfg.out_dir).map_err(|e| PipelineError::Input(e.into()))?;
    let mut run = Runner { cfg, reuse, written: Vec::new(), resumed_from: None };
    if reuse && !checkpoint_path(&cfg.out_dir, Stage::Preprocess).exists() {
        return Err(PipelineError::Checkpoint {
            path: checkpoint_path(&cfg.out_dir, Stage::Preprocess),
            reason: "no checkpoint to resume from".into(),
        });
    }
    run.write_output(Stage::Preprocess, CONFIG_FILE, &cfg.canonical_text())?;
    let mut timing = Timing::default();

    let t = Instant::now();
    let pre = match run.cached(Stage::Preprocess)? {
        Some(p) => Preprocessed::decode(&p).map_err(run.fail(Stage::Preprocess))?,
        None => {
            let stack = read_mrc_stack(&cfg.input).map_err(|e| PipelineError::Input(e.into()))?;
            if let Some(star) = &cfg.star {
                if !star.exists() {
                    return Err(PipelineError::Input(invalid(format!("STAR file {} not found", star.display()))));
                }
            }
            let pre = preprocess_stage(cfg, &stack).map_err(|e| match e {
                Error::Format(_) | Error::InvalidInput(_) | Error::NanPixels { .. } => PipelineError::Input(e),
                other => run.fail(Stage::Preprocess)(other),
            })?;
            run.save(Stage::Preprocess, pre.encode())?;
            pre
        }
    };
    timing.preprocess = t.elapsed().as_secs_f64();
    log::info!("preprocess: {} images at {} px ({:.1} s)", pre.working.len(), pre.working[0].side(), timing.preprocess);

    let t = Instant::now();
    let coeffs = match run.cached(Stage::Spca)? {
        Some(p) => CoeffMatrix::read_from(&p[..]).map_err(run.fail(Stage::Spca))?,
        None => {
            let c = spca_stage(cfg, &pre.working).map_err(run.fail(Stage::Spca))?;
            let mut buf = Vec::new();
            let enc = c.write_to(&mut buf).map(|_| buf);
            run.save(Stage::Spca, enc)?;
            c
        }
    };
    timing.spca = t.elapsed().as_secs_f64();
    log::info!("sPCA: {} coefficients ({:.1} s)", coeffs.n_coeffs(), timing.spca);

    let t = Instant::now();
    let grid = AngleGrid::new(cfg.n_theta).map_err(PipelineError::Input)?;
    let table = match run.cached(Stage::Neighbors)? {
        Some(p) => decode_table(&p).map_err(run.fail(Stage::Neighbors))?,
        None => {
            let n = coeffs.n_images();
            if cfg.num_classes > n || cfg.class_size > n {
                return Err(PipelineError::Input(invalid(format!(
                    "{n} images cannot supply {} classes of {}",
                    cfg.num_classes, cfg.class_size
                ))));
            }
            let seeds = select_seeds(n, cfg.num_classes, cfg.seed).map_err(run.fail(Stage::Neighbors))?;
            let table = knn_search(&seeds, &coeffs, &grid, cfg.class_size).map_err(run.fail(Stage::Neighbors))?;
            run.save(Stage::Neighbors, encode_table(&table))?;
            table
        }
    };
    let classes = match run.cached(Stage::Grades)? {
        Some(p) => decode_classes(&p).map_err(run.fail(Stage::Grades))?,
        None => {
            let mut classes: Vec<ClassRecord> = (0..table.n_classes())
                .into_par_iter()
                .map(|c| grade_class(cfg, c, &table, &coeffs))
                .collect::<Result<_>>()
                .map_err(run.fail(Stage::Grades))?;
            let order = class_order(&classes);
            for &c in order.iter().take(cfg.keep_classes) {
                classes[c].kept = true;
            }
            run.save(Stage::Grades, encode_classes(&classes))?;
            classes
        }
    };
    timing.nn = t.elapsed().as_secs_f64();
    let order = class_order(&classes);
    log::info!("neighbors and grading: {} classes, {} kept ({:.1} s)", classes.len(), cfg.keep_classes, timing.nn);

    let t = Instant::now();
    let em_images = pre.raw.as_ref().unwrap_or(&pre.working);
    let opts = cfg.em_options(em_images[0].side()).map_err(PipelineError::Input)?;
    let kept: Vec<&ClassRecord> = order.iter().map(|&c| &classes[c]).filter(|c| c.kept).collect();
    let averages: Vec<ClassAverage> = kept
        .par_iter()
        .map(|r| {
            let members: Vec<Image> = r.members.iter().map(|&i| em_images[i].clone()).collect();
            run_em(&members, &r.angles, &r.reflected, &opts)
        })
        .collect::<Result<_>>()
        .map_err(run.fail(Stage::Em))?;
    timing.em = t.elapsed().as_secs_f64();
    log::info!("EM: {} class averages ({:.1} s)", averages.len(), timing.em);

    let images: Vec<Image> = averages.iter().map(|a| a.image.clone()).collect();
    let stack_path = cfg.out_dir.join("class_averages.mrcs");
    if !images.is_empty() {
        let px = if cfg.em_on_raw { pre.pixel_size * pre.working[0].side() as f64 / em_images[0].side() as f64 } else { pre.pixel_size };
        MrcStack::from_images(&images, px)
            .map_err(Error::from)
            .and_then(|s| write_mrc_stack(&s, &stack_path).map_err(Error::from))
            .map_err(run.fail(Stage::Em))?;
        run.written.push(stack_path);
    }
    run.write_output(Stage::Grades, "grades.tsv", &grades_tsv(&classes, &order))?;
    run.write_output(Stage::Grades, "members.tsv", &members_tsv(&classes, &order))?;
    timing.total = total.elapsed().as_secs_f64();
    run.write_output(Stage::Em, "timing.tsv", &timing.to_tsv())?;

    Ok(PipelineOutput {
        classes,
        order,
        averages,
        table,
        timing,
        resumed_from: run.resumed_from,
        written: run.written,
    })
}

/// One row of `grades.tsv`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradeRow {
    pub rank: usize,
    pub class: usize,
    pub seed: usize,
    pub g: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub degenerate: bool,
    pub kept: bool,
    pub stack_index: Option<usize>,
}

pub fn read_grade_report(path: impl AsRef<Path>) -> Result<Vec<GradeRow>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || invalid(format!("grade report line {}: malformed", ln + 1));
        if f.len() != 9 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad());
        rows.push(GradeRow {
            rank: int(f[0])?,
            class: int(f[1])?,
            seed: int(f[2])?,
            g: num(f[3])?,
            lambda1: num(f[4])?,
            lambda2: num(f[5])?,
            degenerate: f[6] == "1",
            kept: f[7] == "1",
            stack_index: if f[8] == "-" { None } else { Some(int(f[8])?) },
        });
    }
    Ok(rows)
}
