use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use cryo2d::evalgen::{generate, write_truth, SyntheticSpec};
use cryo2d::formats::{write_mrc_stack, MrcStack};
use cryo2d::pipeline::{self, parse_kv, read_grade_report, PipelineConfig, PipelineError, CONFIG_FILE};

#[derive(Parser)]
#[command(name = "cryo2d", version, about = "Class averages of noisy particle images by invariant nearest neighbors, spectral grading and EM")]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the whole pipeline.
    Run(PipelineArgs),
    /// Continue from the checkpoints in the output directory.
    Resume(PipelineArgs),
    /// Summarize grades.tsv of a finished run.
    GradeReport {
        /// Output directory of a run, or a grades.tsv file.
        #[arg(long)]
        out: PathBuf,
        /// Rows to print.
        #[arg(long, default_value_t = 20)]
        top: usize,
    },
    /// Write a synthetic particle stack and its ground truth.
    Synth {
        /// key = value file with n-templates, images-per-template, side, snr,
        /// shift-sigma, max-shift, reflection-prob, seed.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Å per pixel recorded in the header.
        #[arg(long, default_value_t = 1.0)]
        pixel_size: f64,
    },
}

#[derive(Args)]
struct PipelineArgs {
    /// key = value file; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: Option<String>,
    #[arg(long)]
    star: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    num_classes: Option<String>,
    #[arg(long)]
    keep_classes: Option<String>,
    #[arg(long)]
    class_size: Option<String>,
    #[arg(long)]
    keep_members: Option<String>,
    #[arg(long)]
    n_coeffs: Option<String>,
    #[arg(long)]
    downsample: Option<String>,
    #[arg(long)]
    n_theta: Option<String>,
    #[arg(long)]
    bandlimit: Option<String>,
    #[arg(long)]
    spca_sample: Option<String>,
    #[arg(long)]
    noise_sample: Option<String>,
    #[arg(long)]
    particle_radius: Option<String>,
    #[arg(long)]
    pixel_size: Option<String>,
    #[arg(long)]
    em_iters: Option<String>,
    #[arg(long)]
    em_rotations: Option<String>,
    #[arg(long)]
    em_max_shift: Option<String>,
    /// sync or reference
    #[arg(long)]
    em_init: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    workers: Option<String>,
    /// EM on phase-flipped full-size images.
    #[arg(long)]
    em_on_raw: bool,
    #[arg(long)]
    no_whiten: bool,
    #[arg(long)]
    no_checkpoints: bool,
}

impl PipelineArgs {
    fn flags(&self) -> Vec<(&'static str, &str)> {
        let pairs: [(&'static str, &Option<String>); 21] = [
            ("input", &self.input),
            ("star", &self.star),
            ("out", &self.out),
            ("num-classes", &self.num_classes),
            ("keep-classes", &self.keep_classes),
            ("class-size", &self.class_size),
            ("keep-members", &self.keep_members),
            ("n-coeffs", &self.n_coeffs),
            ("downsample", &self.downsample),
            ("n-theta", &self.n_theta),
            ("bandlimit", &self.bandlimit),
            ("spca-sample", &self.spca_sample),
            ("noise-sample", &self.noise_sample),
            ("particle-radius", &self.particle_radius),
            ("pixel-size", &self.pixel_size),
            ("em-iters", &self.em_iters),
            ("em-rotations", &self.em_rotations),
            ("em-max-shift", &self.em_max_shift),
            ("em-init", &self.em_init),
            ("seed", &self.seed),
            ("workers", &self.workers),
        ];
        let mut out: Vec<(&'static str, &str)> = pairs.iter().filter_map(|(k, v)| v.as_deref().map(|v| (*k, v))).collect();
        if self.em_on_raw {
            out.push(("em-on-raw", "true"));
        }
        if self.no_whiten {
            out.push(("whiten", "false"));
        }
        if self.no_checkpoints {
            out.push(("checkpoints", "false"));
        }
        out
    }

    /// Defaults, then the saved run configuration (resume only), then the
    /// config file, then flags.
    fn build(&self, resuming: bool) -> anyhow::Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        if resuming {
            let out = self.out.as_deref().ok_or_else(|| anyhow!("resume needs --out"))?;
            let saved = Path::new(out).join(CONFIG_FILE);
            if saved.exists() {
                let text = std::fs::read_to_string(&saved).with_context(|| format!("reading {}", saved.display()))?;
                cfg.apply_kv_text(&text)?;
            }
        }
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_kv_text(&text).with_context(|| format!("in {}", path.display()))?;
        }
        for (k, v) in self.flags() {
            cfg.set(k, v).with_context(|| format!("--{k}"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn synth_spec(path: Option<&Path>) -> anyhow::Result<SyntheticSpec> {
    let mut spec = SyntheticSpec::default();
    let Some(path) = path else { return Ok(spec) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    for (k, v) in parse_kv(&text)? {
        let bad = || anyhow!("{}: bad value {v:?} for {k}", path.display());
        match k.as_str() {
            "n-templates" => spec.n_templates = v.parse().map_err(|_| bad())?,
            "images-per-template" => spec.images_per_template = v.parse().map_err(|_| bad())?,
            "side" => spec.side = v.parse().map_err(|_| bad())?,
            "snr" => spec.snr = v.parse().map_err(|_| bad())?,
            "shift-sigma" => spec.shift_sigma = v.parse().map_err(|_| bad())?,
            "max-shift" => spec.max_shift = v.parse().map_err(|_| bad())?,
            "reflection-prob" => spec.reflection_prob = v.parse().map_err(|_| bad())?,
            "seed" => spec.seed = v.parse().map_err(|_| bad())?,
            _ => bail!("{}: unknown key {k:?}", path.display()),
        }
    }
    spec.validate()?;
    Ok(spec)
}

fn grade_report(out: &Path, top: usize) -> anyhow::Result<()> {
    let path = if out.is_dir() { out.join("grades.tsv") } else { out.to_path_buf() };
    let rows = read_grade_report(&path).with_context(|| format!("reading {}", path.display()))?;
    let mean = |it: Vec<f64>| if it.is_empty() { f64::NAN } else { it.iter().sum::<f64>() / it.len() as f64 };
    let kept: Vec<f64> = rows.iter().filter(|r| r.kept).map(|r| r.g).collect();
    let dropped: Vec<f64> = rows.iter().filter(|r| !r.kept).map(|r| r.g).collect();
    println!("classes\t{}", rows.len());
    println!("kept\t{}", kept.len());
    println!("mean G kept\t{:.6}", mean(kept));
    println!("mean G discarded\t{:.6}", mean(dropped));
    println!("degenerate\t{}", rows.iter().filter(|r| r.degenerate).count());
    println!();
    println!("rank\tclass\tseed\tG\tkept\tstack_index");
    for r in rows.iter().take(top) {
        let idx = r.stack_index.map_or_else(|| "-".to_string(), |i| i.to_string());
        println!("{}\t{}\t{}\t{:.6}\t{}\t{idx}", r.rank, r.class, r.seed, r.g, u8::from(r.kept));
    }
    Ok(())
}

fn run_pipeline(args: &PipelineArgs, resuming: bool) -> ExitCode {
    let cfg = match args.build(resuming) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let result = if resuming { pipeline::resume(&cfg) } else { pipeline::run_pipeline(&cfg) };
    match result {
        Ok(out) => {
            let t = out.timing;
            println!(
                "{} classes graded, {} averages written to {}",
                out.classes.len(),
                out.averages.len(),
                cfg.out_dir.display()
            );
            println!("preprocess {:.1} s, sPCA {:.1} s, NN {:.1} s, EM {:.1} s, total {:.1} s", t.preprocess, t.spca, t.nn, t.em, t.total);
            ExitCode::SUCCESS
        }
        Err(e) => report(&e),
    }
}

fn report(e: &PipelineError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match cli.command {
        Command::Run(args) => run_pipeline(&args, false),
        Command::Resume(args) => run_pipeline(&args, true),
        Command::GradeReport { out, top } => match grade_report(&out, top) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(2)
            }
        },
        Command::Synth { spec, out, truth, pixel_size } => {
            let result = synth_spec(spec.as_deref()).and_then(|s| {
                let data = generate(&s)?;
                write_mrc_stack(&MrcStack::from_images(&data.images, pixel_size)?, &out)?;
                write_truth(&data.truth, &truth)?;
                println!("{} images of {} templates written to {}", data.images.len(), s.n_templates, out.display());
                Ok(())
            });
            match result {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::from(2)
                }
            }
        }
    }
}
