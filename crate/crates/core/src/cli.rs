//! `discont` command line: dataset generation, training, evaluation,
//! projection export and swap grids, driven by a `key = value` config file.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::data::{generate_color_position, load_dataset, oversample, save_dataset, FactorDataset};
use crate::error::{config_err, Error, Result};
use crate::evaluation::{
    informativeness_csv, informativeness_report, project_latents_2d, projection_csv, swap_grid,
    DEFAULT_K_NEIGHBORS, DEFAULT_PCA_DIMS,
};
use crate::rng::RngState;
use crate::trainer::{checkpoint_load, fit_with, Checkpoint, TrainConfig};

pub const SEED_ENV: &str = "DISCONT_SEED";
pub const RESOLVED_CONFIG: &str = "resolved_config.txt";
pub const INFORMATIVENESS_FILE: &str = "informativeness.csv";
pub const PROJECTION_FILE: &str = "projection.csv";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_FORMAT: i32 = 5;
pub const EXIT_NON_FINITE: i32 = 6;
pub const EXIT_SHAPE: i32 = 7;

const EXIT_DOCS: &[(i32, &str)] = &[
    (EXIT_OK, "success"),
    (EXIT_USAGE, "bad command line"),
    (EXIT_CONFIG, "invalid config file or setting"),
    (EXIT_IO, "file could not be read or written"),
    (EXIT_FORMAT, "malformed, corrupt or wrong-version data file"),
    (EXIT_NON_FINITE, "training produced a non-finite loss or parameter"),
    (EXIT_SHAPE, "shape mismatch or broken precondition"),
];

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Io { .. } => EXIT_IO,
        Error::Format(_) | Error::Version { .. } | Error::Corruption(_) => EXIT_FORMAT,
        Error::NonFinite(_) => EXIT_NON_FINITE,
        Error::Dimension(_) | Error::Contract(_) | Error::UnsupportedShape(_) => EXIT_SHAPE,
    }
}

/// Training settings plus dataset generation and evaluation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub n_colors: usize,
    pub n_x: usize,
    pub n_y: usize,
    /// Dataset copies written by `gen-data`; copies after the first are
    /// jittered with noise and smoothing.
    pub oversample: usize,
    pub pca_dims: usize,
    pub k_neighbors: usize,
    pub n_samples: usize,
    /// Image pairs shown by `swap`.
    pub swap_pairs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            n_colors: 8,
            n_x: 4,
            n_y: 4,
            oversample: 8,
            pca_dims: DEFAULT_PCA_DIMS,
            k_neighbors: DEFAULT_K_NEIGHBORS,
            n_samples: 512,
            swap_pairs: 8,
        }
    }
}

/// One-line descriptions of every config key, in `entries` order.
const KEY_DOCS: &[(&str, &str)] = &[
    ("batch_size", "images per training step"),
    ("image_size", "image side in pixels (32, 48 or 64)"),
    ("latent_dim", "size d of every latent chunk"),
    ("num_attributes", "number k of attribute chunks"),
    ("context_dim", "size c of context vectors"),
    ("lambda_kl", "weight of the KL term"),
    ("lambda_cen", "weight of the center loss"),
    ("lambda_a", "weight of the augmentation consistency loss"),
    ("learning_rate", "Adam step size"),
    ("adam_beta1", "Adam first-moment decay"),
    ("adam_beta2", "Adam second-moment decay"),
    ("adam_eps", "Adam denominator offset"),
    ("epochs", "training epochs"),
    ("seed", "master seed (overridden by DISCONT_SEED, then --seed)"),
    ("bernoulli_p", "probability of applying each negative transform"),
    ("negative_transforms", "one transform per attribute: grayscale, flip, rotate, crop_resize, cutout"),
    ("positive_transforms", "gaussian_noise, gaussian_smooth"),
    ("noise_sigmas", "noise standard deviations to pick from"),
    ("smooth_sigmas", "blur standard deviations to pick from"),
    ("flip_axes", "horizontal, vertical"),
    ("rotation_degrees", "rotation angles to pick from"),
    ("crop_fraction", "crop side range 'lo,hi' as a fraction of the image"),
    ("cutout_sides", "cutout square sides in pixels"),
    ("checkpoint_history", "keep a checkpoint for every epoch"),
    ("dataset_dir", "dataset directory"),
    ("output_dir", "directory for checkpoints, logs and reports"),
    ("n_colors", "gen-data: number of hues"),
    ("n_x", "gen-data: horizontal grid cells"),
    ("n_y", "gen-data: vertical grid cells"),
    ("oversample", "gen-data: jittered copies of the dataset"),
    ("pca_dims", "eval: principal components kept from the images"),
    ("k_neighbors", "eval: neighbors used by the MI estimator"),
    ("n_samples", "eval/viz: images encoded"),
    ("swap_pairs", "swap: image pairs in the grid"),
];

impl RunConfig {
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let mut out = self.train.entries();
        out.extend(self.train.path_entries());
        out.extend([
            ("n_colors", self.n_colors.to_string()),
            ("n_x", self.n_x.to_string()),
            ("n_y", self.n_y.to_string()),
            ("oversample", self.oversample.to_string()),
            ("pca_dims", self.pca_dims.to_string()),
            ("k_neighbors", self.k_neighbors.to_string()),
            ("n_samples", self.n_samples.to_string()),
            ("swap_pairs", self.swap_pairs.to_string()),
        ]);
        out
    }

    /// Sets one key; returns `Ok(false)` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        if self.train.set(key, value)? {
            return Ok(true);
        }
        let slot = match key {
            "n_colors" => &mut self.n_colors,
            "n_x" => &mut self.n_x,
            "n_y" => &mut self.n_y,
            "oversample" => &mut self.oversample,
            "pca_dims" => &mut self.pca_dims,
            "k_neighbors" => &mut self.k_neighbors,
            "n_samples" => &mut self.n_samples,
            "swap_pairs" => &mut self.swap_pairs,
            _ => return Ok(false),
        };
        *slot = crate::trainer::parse_value(key, value, "a non-negative integer")?;
        Ok(true)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err!("line {line_no}: expected 'key = value', got '{line}'"))?;
            let key = key.trim();
            if seen.iter().any(|k| k == key) {
                return Err(config_err!("line {line_no}: key '{key}' is set twice"));
            }
            match cfg.set(key, value.trim()) {
                Ok(true) => seen.push(key.to_string()),
                Ok(false) => return Err(config_err!("line {line_no}: unknown key '{key}'")),
                Err(Error::Config(msg)) => return Err(config_err!("line {line_no}: {msg}")),
                Err(e) => return Err(e),
            }
        }
        Ok(cfg)
    }

    pub fn resolved_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::parse(&text).map_err(|e| match e {
        Error::Config(msg) => config_err!("{}: {msg}", path.display()),
        other => other,
    })
}

fn help_text() -> String {
    let mut s = String::from("Config keys (`key = value` lines, `#` starts a comment):\n");
    let defaults = RunConfig::default().entries();
    for ((key, default), (_, doc)) in defaults.iter().zip(KEY_DOCS) {
        let _ = writeln!(s, "  {key:<20} default {default:<28} {doc}");
    }
    let _ = writeln!(s, "\nSeed precedence: --seed, then {SEED_ENV}, then the config file, then 0.");
    s.push_str("\nExit codes:\n");
    for (code, doc) in EXIT_DOCS {
        let _ = writeln!(s, "  {code}  {doc}");
    }
    s
}

#[derive(Debug, Parser)]
#[command(name = "discont", version, about = "Attribute disentanglement with context vectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (the dataset directory for gen-data).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic color/position dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train and write checkpoints plus a loss log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Write the per-chunk informativeness CSV.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write the 2-D latent projection CSV.
    Viz {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write a PPM grid swapping one attribute chunk between image pairs.
    Swap {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Attribute chunk to swap, 1-based.
        #[arg(long)]
        attr: usize,
        #[command(flatten)]
        common: Common,
    },
}

fn command() -> clap::Command {
    let help = help_text();
    let mut cmd = Cli::command().after_help(help.clone());
    for name in ["gen-data", "train", "eval", "viz", "swap"] {
        cmd = cmd.mut_subcommand(name, |c| c.after_help(help.clone()));
    }
    cmd
}

fn resolve(config: Option<&Path>, common: &Common, env_seed: Option<&str>) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(p) => parse_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = env_seed {
        cfg.train.seed = s
            .trim()
            .parse()
            .map_err(|_| config_err!("{SEED_ENV} must be a non-negative integer, got '{s}'"))?;
    }
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn prepare_dir(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join(RESOLVED_CONFIG), cfg.resolved_text())
}

fn load_for_eval(cfg: &RunConfig, ckpt: &Path) -> Result<(Checkpoint, FactorDataset)> {
    let ck = checkpoint_load(ckpt)?;
    let ds = load_dataset(&cfg.train.dataset_dir)?;
    let s = ck.config.model.image_size;
    if ds.image_size() != (s, s) {
        return Err(config_err!(
            "dataset images are {:?} but the checkpoint model expects {s}×{s}",
            ds.image_size()
        ));
    }
    Ok((ck, ds))
}

fn execute(cli: Cli, env_seed: Option<&str>) -> Result<()> {
    match cli.command {
        Command::GenData { config, common } => {
            let mut cfg = resolve(config.as_deref(), &common, env_seed)?;
            if let Some(out) = common.out {
                cfg.train.dataset_dir = out;
            }
            let base = generate_color_position(cfg.n_colors, cfg.n_x, cfg.n_y, cfg.train.model.image_size, cfg.train.seed)?;
            let ds = oversample(&base, cfg.oversample, cfg.train.seed)?;
            save_dataset(&ds, &cfg.train.dataset_dir)?;
            prepare_dir(&cfg.train.dataset_dir, &cfg)?;
            eprintln!("wrote {} images to {}", ds.len(), cfg.train.dataset_dir.display());
        }
        Command::Train { config, resume, common } => {
            let mut cfg = resolve(Some(&config), &common, env_seed)?;
            if let Some(out) = common.out {
                cfg.train.output_dir = out;
            }
            cfg.train.validate()?;
            let ds = load_dataset(&cfg.train.dataset_dir)?;
            let resume = resume.map(|p| checkpoint_load(&p)).transpose()?;
            prepare_dir(&cfg.train.output_dir, &cfg)?;
            let total = cfg.train.epochs;
            let out = fit_with(&ds, &cfg.train, resume, |s| {
                let m = &s.mean;
                eprintln!(
                    "epoch {}/{total}: total {:.4} l_r {:.4} l_kl {:.4} l_cen {:.4} l_a {:.4}",
                    s.epoch, m.total, m.l_r, m.l_kl, m.l_cen, m.l_a
                );
            })?;
            eprintln!("log written to {}", out.log_path.display());
        }
        Command::Eval { config, ckpt, common } => {
            let mut cfg = resolve(Some(&config), &common, env_seed)?;
            if let Some(out) = common.out {
                cfg.train.output_dir = out;
            }
            let (ck, ds) = load_for_eval(&cfg, &ckpt)?;
            let n = cfg.n_samples.min(ds.len());
            let report = informativeness_report(&ck.params, &ds, n, cfg.pca_dims, cfg.k_neighbors, cfg.train.seed)?;
            prepare_dir(&cfg.train.output_dir, &cfg)?;
            let path = cfg.train.output_dir.join(INFORMATIVENESS_FILE);
            write(&path, informativeness_csv(&report))?;
            for c in &report.chunks {
                let flag = if c.estimate.jittered { " (jittered duplicates)" } else { "" };
                eprintln!("{}: {:.4} nats{flag}", c.chunk, c.estimate.value);
            }
            eprintln!(
                "images reduced to {} principal components ({:.1}% of variance)",
                report.pca_dims,
                100.0 * report.pca_explained
            );
        }
        Command::Viz { config, ckpt, common } => {
            let mut cfg = resolve(Some(&config), &common, env_seed)?;
            if let Some(out) = common.out {
                cfg.train.output_dir = out;
            }
            let (ck, ds) = load_for_eval(&cfg, &ckpt)?;
            let report = project_latents_2d(&ck.params, &ds, cfg.n_samples.min(ds.len()), cfg.train.seed)?;
            prepare_dir(&cfg.train.output_dir, &cfg)?;
            write(&cfg.train.output_dir.join(PROJECTION_FILE), projection_csv(&report))?;
            eprintln!(
                "explained variance: {:.3}, {:.3}",
                report.explained[0], report.explained[1]
            );
        }
        Command::Swap { config, ckpt, attr, common } => {
            let mut cfg = resolve(Some(&config), &common, env_seed)?;
            if let Some(out) = common.out {
                cfg.train.output_dir = out;
            }
            let (ck, ds) = load_for_eval(&cfg, &ckpt)?;
            let n = cfg.swap_pairs;
            if n == 0 || 2 * n > ds.len() {
                return Err(config_err!("swap_pairs must be in 1..={}, got {n}", ds.len() / 2));
            }
            let mut rows: Vec<usize> = (0..ds.len()).collect();
            RngState::new(cfg.train.seed).shuffle(&mut rows);
            let a = ds.images.select_rows(&rows[..n])?;
            let b = ds.images.select_rows(&rows[n..2 * n])?;
            prepare_dir(&cfg.train.output_dir, &cfg)?;
            let path = cfg.train.output_dir.join(format!("swap_attr{attr}.ppm"));
            swap_grid(&ck.params, &a, &b, attr, &path)?;
            eprintln!("wrote {}", path.display());
        }
    }
    Ok(())
}

/// Runs the command line in `argv` (program name first) and returns the
/// process exit status.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let env_seed = std::env::var(SEED_ENV).ok();
    run_with_env(argv, env_seed.as_deref())
}

/// [`run_command`] with the seed environment variable given explicitly.
pub fn run_with_env<I, T>(argv: I, env_seed: Option<&str>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let parsed = command()
        .try_get_matches_from(argv)
        .and_then(|m| Cli::from_arg_matches(&m));
    let cli = match parsed {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli, env_seed) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("discont: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let t = &cfg.train;
        assert_eq!(
            (t.batch_size, t.model.latent_dim, t.model.num_attributes, t.model.context_dim),
            (64, 32, 2, 100)
        );
        assert_eq!(t.adam.learning_rate, 1e-4);
    }

    #[test]
    fn overrides_comments_and_line_numbers() {
        let cfg = RunConfig::parse("# run\n\nbatch_size = 16  # small\npca_dims=8\n").unwrap();
        assert_eq!((cfg.train.batch_size, cfg.pca_dims), (16, 8));

        let err = RunConfig::parse("epochs = 3\nbatch_sz = 16\n").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("batch_sz"), "{err}");
        let err = RunConfig::parse("epochs 3\n").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
        let err = RunConfig::parse("\nlambda_a = lots\n").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("number"), "{err}");
        let err = RunConfig::parse("seed = 1\nseed = 2\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn help_lists_exactly_the_accepted_keys() {
        let defaults = RunConfig::default();
        let keys: Vec<&str> = defaults.entries().iter().map(|(k, _)| *k).collect();
        let documented: Vec<&str> = KEY_DOCS.iter().map(|(k, _)| *k).collect();
        assert_eq!(keys, documented);

        let help = command().render_long_help().to_string();
        let mut probe = RunConfig::default();
        for (key, default) in defaults.entries() {
            assert!(help.contains(&format!("  {key:<20} default {default}")), "{key} missing from help");
            assert!(probe.set(key, &default).unwrap(), "{key} rejected by the parser");
        }
        for (code, _) in EXIT_DOCS {
            assert!(help.contains(&format!("  {code}  ")));
        }
        let listed = help
            .lines()
            .filter_map(|l| l.strip_prefix("  "))
            .filter(|l| l.contains(" default "))
            .count();
        assert_eq!(listed, keys.len());
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("n_colors", "6").unwrap();
        cfg.set("output_dir", "elsewhere").unwrap();
        assert_eq!(RunConfig::parse(&cfg.resolved_text()).unwrap(), cfg);
    }

    #[test]
    fn seed_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        fs::write(&path, "seed = 5\n").unwrap();
        let none = Common { seed: None, out: None };
        let flag = Common { seed: Some(9), out: None };
        assert_eq!(resolve(None, &none, None).unwrap().train.seed, 0);
        assert_eq!(resolve(Some(&path), &none, None).unwrap().train.seed, 5);
        assert_eq!(resolve(Some(&path), &none, Some("7")).unwrap().train.seed, 7);
        assert_eq!(resolve(Some(&path), &flag, Some("7")).unwrap().train.seed, 9);
        assert!(resolve(Some(&path), &none, Some("x")).is_err());
    }

    #[test]
    fn usage_errors_exit_with_code_two() {
        assert_eq!(run_with_env(["discont", "eval", "--config", "c.txt"], None), EXIT_USAGE);
        assert_eq!(run_with_env(["discont", "dance"], None), EXIT_USAGE);
        assert_eq!(run_with_env(["discont", "--help"], None), EXIT_OK);
    }

    #[test]
    fn failure_classes_map_to_distinct_codes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.txt");
        fs::write(&cfg, "batch_sz = 4\n").unwrap();
        let c = cfg.to_str().unwrap();
        assert_eq!(run_with_env(["discont", "train", "--config", c], None), EXIT_CONFIG);
        let missing = dir.path().join("none.txt");
        assert_eq!(
            run_with_env(["discont", "train", "--config", missing.to_str().unwrap()], None),
            EXIT_IO
        );
        fs::write(&cfg, format!("dataset_dir = {}\n", dir.path().display())).unwrap();
        let bogus = dir.path().join("bogus.dsck");
        fs::write(&bogus, b"nope").unwrap();
        assert_eq!(
            run_with_env(["discont", "eval", "--config", c, "--ckpt", bogus.to_str().unwrap()], None),
            EXIT_FORMAT
        );
        let codes: Vec<i32> = EXIT_DOCS.iter().map(|(c, _)| *c).collect();
        let mut unique = codes.clone();
        unique.dedup();
        assert_eq!(codes, unique);
    }
}
