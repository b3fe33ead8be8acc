//! Command-line driver: simulate fluctuation stacks, reduce them to temporal
//! statistics, solve the mean/covariance BLASSO, evaluate against ground
//! truth, and render reconstructions.
//!
//! Exit statuses: 0 success, 2 configuration error, 3 I/O or file-format
//! error, 4 numerical failure.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gridless::config::{load_config, ConfigError, LambdaSpec, ProblemKind, RunConfig};
use gridless::eval::{
    amplitude_relative_error, jaccard_index, localization_rmse, match_spikes, render_measure,
    write_pgm16,
};
use gridless::measure::{read_spikes_csv, write_spikes_csv, CsvError, DiscreteMeasure};
use gridless::simulate::{simulate_stack_with_stats, SimulationConfig};
use gridless::solver::{lambda_max, solve, ProblemData, Termination};
use gridless::stats::{
    empirical_covariance, empirical_mean, read_covariance, read_stack, write_covariance,
    write_stack, FormatError,
};
use gridless::{ImageStack, ProblemInstance};

#[derive(Parser)]
#[command(name = "gridless", version, about = "Off-the-grid super-resolution of fluorescence fluctuation stacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set solver.max_iterations=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        Ok(load_config(self.config.as_deref(), &self.sets)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesise a blinking-emitter stack from a ground-truth spike CSV.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output FLSTK1 stack.
        #[arg(long)]
        out_stack: PathBuf,
        /// Output copy of the ground-truth spike CSV.
        #[arg(long)]
        out_truth: PathBuf,
    },
    /// Reduce a stack to its temporal mean and empirical covariance.
    Stats {
        /// Input FLSTK1 stack.
        #[arg(long)]
        stack: PathBuf,
        /// Output mean image (FLSTK1 with T=1).
        #[arg(long)]
        out_mean: PathBuf,
        /// Output FLCOV1 covariance matrix.
        #[arg(long)]
        out_cov: PathBuf,
    },
    /// Recover a sparse spike measure from a mean image or covariance matrix.
    Solve {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Input data: FLSTK1 (mean problem) or FLCOV1 (covariance problem).
        #[arg(long)]
        data: PathBuf,
        /// Output reconstruction spike CSV.
        #[arg(long)]
        out_spikes: PathBuf,
        /// Output iteration log.
        #[arg(long)]
        out_log: PathBuf,
    },
    /// Compare a reconstruction CSV against a ground-truth CSV.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        recon: PathBuf,
        /// Matching radius in pixels; defaults to 0.5 sigma of the PSF
        /// (requires a config when omitted).
        #[arg(long)]
        radius: Option<f64>,
        /// Output key=value metrics report.
        #[arg(long)]
        out: PathBuf,
    },
    /// Rasterise a spike CSV to a super-resolved 16-bit PGM image.
    Render {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        spikes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// simulate -> stats -> solve -> evaluate -> render through files in one
    /// output directory; identical to running the subcommands in sequence.
    Pipeline {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

enum CliError {
    Config(String),
    Io(String),
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(e) => CliError::Io(format!("config: {e}")),
            other => CliError::Config(format!("config: {other}")),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

fn io_err<E: std::fmt::Display>(path: &Path) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Simulate { cfg, out_stack, out_truth } => {
            let config = cfg.load()?;
            cmd_simulate(&config, &cfg, &out_stack, &out_truth)
        }
        Command::Stats { stack, out_mean, out_cov } => cmd_stats(&stack, &out_mean, &out_cov),
        Command::Solve { cfg, data, out_spikes, out_log } => {
            let config = cfg.load()?;
            cmd_solve(&config, &cfg, &data, &out_spikes, &out_log)
        }
        Command::Evaluate { cfg, truth, recon, radius, out } => {
            let radius = match radius {
                Some(r) if r > 0.0 => r,
                Some(r) => return Err(CliError::Config(format!("radius must be positive, got {r}"))),
                None => 0.5 * cfg.load()?.sigma_px(),
            };
            cmd_evaluate(&truth, &recon, radius, &out, &cfg)
        }
        Command::Render { cfg, spikes, out } => {
            let config = cfg.load()?;
            cmd_render(&config, &cfg, &spikes, &out)
        }
        Command::Pipeline { cfg, out_dir } => cmd_pipeline(&cfg, &out_dir),
    }
}

fn read_measure(path: &Path) -> Result<DiscreteMeasure, CliError> {
    let f = File::open(path).map_err(io_err(path))?;
    read_spikes_csv(&mut BufReader::new(f)).map_err(|e| match e {
        CsvError::Io(e) => CliError::Io(format!("{}: {e}", path.display())),
        other => CliError::Io(format!("{}: {other}", path.display())),
    })
}

fn write_measure(path: &Path, m: &DiscreteMeasure) -> Result<(), CliError> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    write_spikes_csv(&mut w, m).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    w.flush().map_err(io_err(path))?;
    Ok(())
}

fn format_err(path: &Path, e: FormatError) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Writes the reproducibility sidecar next to the primary output.
fn write_meta(primary_output: &Path, lines: &[String]) -> Result<(), CliError> {
    let dir = primary_output.parent().unwrap_or_else(|| Path::new("."));
    let path = dir.join("run.meta");
    let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    for line in lines {
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Every effective (post-default) parameter, one `key = value` line each.
fn config_lines(cfg: &RunConfig) -> Vec<String> {
    let mut v = vec![
        format!("pixel_size_nm = {}", cfg.pixel_size_nm),
        format!("psf_fwhm_nm = {}", cfg.psf_fwhm_nm),
        format!("sigma_px = {:.12e}", cfg.sigma_px()),
        format!("grid_h = {}", cfg.grid_h),
        format!("grid_w = {}", cfg.grid_w),
        format!(
            "problem = {}",
            match cfg.problem {
                ProblemKind::Mean => "mean",
                ProblemKind::Covariance => "covariance",
            }
        ),
        match cfg.lambda {
            LambdaSpec::Fraction(f) => format!("lambda_fraction = {f}"),
            LambdaSpec::Absolute(a) => format!("lambda_abs = {a}"),
        },
        format!(
            "nonnegative = {}",
            cfg.nonnegative.map_or("default".to_string(), |b| b.to_string())
        ),
        format!("solver.max_iterations = {}", cfg.solver.max_iterations),
        format!("solver.certificate_tolerance = {}", cfg.solver.certificate_tolerance),
        format!("solver.insertion_grid_factor = {}", cfg.solver.insertion_grid_factor),
        format!("solver.lasso_tolerance = {}", cfg.solver.lasso_tolerance),
        format!("solver.slide_max_evals = {}", cfg.solver.slide_max_evals),
        format!("solver.amplitude_prune_threshold = {}", cfg.solver.amplitude_prune_threshold),
        format!("sim.frames = {}", cfg.sim.frames),
        format!("sim.frame_rate = {}", cfg.sim.frame_rate),
        format!("sim.seed = {}", cfg.sim.seed),
        format!("sim.tau_on = {}", cfg.sim.photo.tau_on),
        format!("sim.tau_off = {}", cfg.sim.photo.tau_off),
        format!("sim.tau_bleach = {}", cfg.sim.photo.tau_bleach),
        format!("sim.photons_on = {}", cfg.sim.photo.photons_on),
        format!("sim.background = {}", cfg.sim.noise.background_photons),
        format!(
            "sim.gaussian_snr_db = {}",
            cfg.sim.noise.gaussian_snr_db.map_or("off".to_string(), |v| v.to_string())
        ),
        format!("sim.poisson = {}", cfg.sim.noise.poisson_enabled),
        format!("render.upscale = {}", cfg.render_upscale),
        format!("render.sigma = {}", cfg.render_sigma),
    ];
    if let Some(gt) = &cfg.sim.ground_truth {
        v.push(format!("sim.ground_truth = {gt}"));
    }
    v
}

fn cmd_simulate(
    cfg: &RunConfig,
    args: &ConfigArgs,
    out_stack: &Path,
    out_truth: &Path,
) -> Result<(), CliError> {
    let gt_path = cfg.sim.ground_truth.as_ref().ok_or_else(|| {
        CliError::Config("missing required key `sim.ground_truth`".to_string())
    })?;
    let truth = read_measure(Path::new(gt_path))?;
    let domain = cfg.psf().domain();
    for s in truth.spikes() {
        if !domain.contains(s.position) {
            return Err(CliError::Config(format!(
                "sim.ground_truth: spike at ({}, {}) lies outside the {}x{} grid",
                s.position.x, s.position.y, cfg.grid_h, cfg.grid_w
            )));
        }
    }
    let sim = SimulationConfig {
        ground_truth: truth.clone(),
        psf: cfg.psf(),
        photo: cfg.sim.photo,
        noise: cfg.sim.noise,
        frames: cfg.sim.frames,
        frame_rate: cfg.sim.frame_rate,
        rng_seed: cfg.sim.seed,
    };
    let (stack, stats) = simulate_stack_with_stats(&sim);

    let mut w = BufWriter::new(File::create(out_stack).map_err(io_err(out_stack))?);
    write_stack(&mut w, &stack).map_err(|e| format_err(out_stack, e))?;
    w.flush().map_err(io_err(out_stack))?;
    write_measure(out_truth, &truth)?;

    println!(
        "simulated T={} H={} W={} emitters={} snr_db={:.3}",
        stack.t,
        stack.h,
        stack.w,
        truth.len(),
        stats.snr_db
    );
    let mut meta = vec![
        "subcommand = simulate".to_string(),
        format!("config = {}", args.config.as_deref().map_or("<none>".into(), |p| p.display().to_string())),
        format!("out_stack = {}", out_stack.display()),
        format!("out_truth = {}", out_truth.display()),
        format!("snr_db = {:.6}", stats.snr_db),
        format!("gaussian_sigma = {:.6}", stats.gaussian_sigma),
    ];
    meta.extend(config_lines(cfg));
    write_meta(out_stack, &meta)
}

fn cmd_stats(stack_path: &Path, out_mean: &Path, out_cov: &Path) -> Result<(), CliError> {
    let f = File::open(stack_path).map_err(io_err(stack_path))?;
    let stack = read_stack(&mut BufReader::new(f), 0.0).map_err(|e| format_err(stack_path, e))?;
    if stack.t < 2 {
        return Err(CliError::Io(format!(
            "{}: covariance needs at least 2 frames, stack has {}",
            stack_path.display(),
            stack.t
        )));
    }
    let mean = empirical_mean(&stack);
    let cov = empirical_covariance(&stack)
        .map_err(|e| CliError::Io(format!("{}: {e}", stack_path.display())))?;

    let mean_stack = ImageStack::new(mean, 1, stack.h, stack.w, stack.frame_rate);
    let mut w = BufWriter::new(File::create(out_mean).map_err(io_err(out_mean))?);
    write_stack(&mut w, &mean_stack).map_err(|e| format_err(out_mean, e))?;
    w.flush().map_err(io_err(out_mean))?;

    let mut w = BufWriter::new(File::create(out_cov).map_err(io_err(out_cov))?);
    write_covariance(&mut w, &cov).map_err(|e| format_err(out_cov, e))?;
    w.flush().map_err(io_err(out_cov))?;

    println!("stats T={} H={} W={}", stack.t, stack.h, stack.w);
    write_meta(
        out_mean,
        &[
            "subcommand = stats".to_string(),
            format!("stack = {}", stack_path.display()),
            format!("out_mean = {}", out_mean.display()),
            format!("out_cov = {}", out_cov.display()),
            format!("frames = {}", stack.t),
        ],
    )
}

/// Reads the solve input, dispatching on the file magic; the mean problem
/// accepts any FLSTK1 stack and uses its temporal mean (a T=1 stack is taken
/// as-is).
fn load_problem_data(cfg: &RunConfig, path: &Path) -> Result<ProblemData, CliError> {
    let mut magic = [0u8; 6];
    {
        use std::io::Read;
        let mut f = File::open(path).map_err(io_err(path))?;
        f.read_exact(&mut magic).map_err(io_err(path))?;
    }
    let f = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(f);
    match (&magic, cfg.problem) {
        (b"FLSTK1", ProblemKind::Mean) => {
            let stack = read_stack(&mut r, 0.0).map_err(|e| format_err(path, e))?;
            if stack.h != cfg.grid_h || stack.w != cfg.grid_w {
                return Err(CliError::Config(format!(
                    "{}: stack is {}x{} but the config grid is {}x{}",
                    path.display(),
                    stack.h,
                    stack.w,
                    cfg.grid_h,
                    cfg.grid_w
                )));
            }
            Ok(ProblemData::Mean(empirical_mean(&stack)))
        }
        (b"FLCOV1", ProblemKind::Covariance) => {
            let cov = read_covariance(&mut r).map_err(|e| format_err(path, e))?;
            if cov.dim() != cfg.grid_h * cfg.grid_w {
                return Err(CliError::Config(format!(
                    "{}: covariance is {}x{} but the config grid has {} pixels",
                    path.display(),
                    cov.dim(),
                    cov.dim(),
                    cfg.grid_h * cfg.grid_w
                )));
            }
            Ok(ProblemData::Covariance(cov))
        }
        (m, kind) => {
            let magic = String::from_utf8_lossy(m).into_owned();
            let want = match kind {
                ProblemKind::Mean => "FLSTK1",
                ProblemKind::Covariance => "FLCOV1",
            };
            Err(CliError::Config(format!(
                "{}: data file has magic `{magic}` but problem `{}` needs `{want}`",
                path.display(),
                match kind {
                    ProblemKind::Mean => "mean",
                    ProblemKind::Covariance => "covariance",
                }
            )))
        }
    }
}

fn cmd_solve(
    cfg: &RunConfig,
    args: &ConfigArgs,
    data_path: &Path,
    out_spikes: &Path,
    out_log: &Path,
) -> Result<(), CliError> {
    let data = load_problem_data(cfg, data_path)?;
    let psf = cfg.psf();
    let lambda = match cfg.lambda {
        LambdaSpec::Absolute(a) => a,
        LambdaSpec::Fraction(f) => {
            let lmax = lambda_max(&data, &psf, cfg.solver.insertion_grid_factor);
            if !(lmax > 0.0) {
                // zero data: any positive lambda gives the empty measure
                1.0
            } else {
                f * lmax
            }
        }
    };
    let mut inst = match data {
        ProblemData::Mean(y) => ProblemInstance::mean(y, psf, lambda),
        ProblemData::Covariance(r) => ProblemInstance::covariance(r, psf, lambda),
    };
    if let Some(nn) = cfg.nonnegative {
        inst.nonnegative = nn;
    }
    let (m, report) = solve(&inst, &cfg.solver);
    if let Some(r) = report.iterations.last() {
        if !r.objective.is_finite() {
            return Err(CliError::Numerical(format!(
                "objective became non-finite ({}) at iteration {}",
                r.objective, r.iteration
            )));
        }
    }

    write_measure(out_spikes, &m)?;
    let mut w = BufWriter::new(File::create(out_log).map_err(io_err(out_log))?);
    report.write_log(&mut w).map_err(io_err(out_log))?;
    w.flush().map_err(io_err(out_log))?;

    let termination = match report.termination {
        Termination::CertificateOptimal => "CertificateOptimal",
        Termination::MaxIterations => "MaxIterations",
    };
    println!(
        "solved spikes={} iterations={} lambda={:.6e} termination={termination}",
        m.len(),
        report.iterations.len(),
        lambda
    );
    let mut meta = vec![
        "subcommand = solve".to_string(),
        format!("config = {}", args.config.as_deref().map_or("<none>".into(), |p| p.display().to_string())),
        format!("data = {}", data_path.display()),
        format!("out_spikes = {}", out_spikes.display()),
        format!("out_log = {}", out_log.display()),
        format!("lambda_effective = {:.12e}", lambda),
        format!("termination = {termination}"),
    ];
    meta.extend(config_lines(cfg));
    write_meta(out_spikes, &meta)
}

fn cmd_evaluate(
    truth_path: &Path,
    recon_path: &Path,
    radius: f64,
    out: &Path,
    args: &ConfigArgs,
) -> Result<(), CliError> {
    let truth = read_measure(truth_path)?;
    let recon = read_measure(recon_path)?;
    let m = match_spikes(&truth, &recon, radius);
    let tp = m.pairs.len();
    let fp = m.unmatched_recon.len();
    let fneg = m.unmatched_truth.len();
    let jaccard = jaccard_index(&m);
    let rmse = localization_rmse(&m).unwrap_or(f64::NAN);
    let amp_err = amplitude_relative_error(&truth, &recon, &m).unwrap_or(f64::NAN);

    let report = format!(
        "radius={radius}\ntp={tp}\nfp={fp}\nfn={fneg}\njaccard={jaccard}\nrmse={rmse}\namplitude_relative_error={amp_err}\n"
    );
    std::fs::write(out, &report).map_err(io_err(out))?;
    print!("{report}");
    write_meta(
        out,
        &[
            "subcommand = evaluate".to_string(),
            format!("config = {}", args.config.as_deref().map_or("<none>".into(), |p| p.display().to_string())),
            format!("truth = {}", truth_path.display()),
            format!("recon = {}", recon_path.display()),
            format!("out = {}", out.display()),
            format!("radius = {radius}"),
        ],
    )
}

fn cmd_render(
    cfg: &RunConfig,
    args: &ConfigArgs,
    spikes_path: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let m = read_measure(spikes_path)?;
    let psf = cfg.psf();
    let image = render_measure(&m, &psf, cfg.render_upscale, cfg.render_sigma);
    let mut w = BufWriter::new(File::create(out).map_err(io_err(out))?);
    let scaling = write_pgm16(
        &mut w,
        &image,
        cfg.grid_h * cfg.render_upscale,
        cfg.grid_w * cfg.render_upscale,
    )
    .map_err(io_err(out))?;
    w.flush().map_err(io_err(out))?;

    println!("rendered scale_min={} scale_max={}", scaling.min, scaling.max);
    let mut meta = vec![
        "subcommand = render".to_string(),
        format!("config = {}", args.config.as_deref().map_or("<none>".into(), |p| p.display().to_string())),
        format!("spikes = {}", spikes_path.display()),
        format!("out = {}", out.display()),
        format!("scale_min = {}", scaling.min),
        format!("scale_max = {}", scaling.max),
    ];
    meta.extend(config_lines(cfg));
    write_meta(out, &meta)
}

fn cmd_pipeline(args: &ConfigArgs, out_dir: &Path) -> Result<(), CliError> {
    let cfg = args.load()?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let stack = out_dir.join("stack.flstk");
    let truth = out_dir.join("truth.csv");
    let mean = out_dir.join("mean.flstk");
    let cov = out_dir.join("cov.flcov");
    let recon = out_dir.join("recon.csv");
    let log = out_dir.join("solve.log");
    let metrics = out_dir.join("metrics.txt");
    let pgm = out_dir.join("recon.pgm");

    cmd_simulate(&cfg, args, &stack, &truth)?;
    cmd_stats(&stack, &mean, &cov)?;
    let data = match cfg.problem {
        ProblemKind::Mean => &mean,
        ProblemKind::Covariance => &cov,
    };
    cmd_solve(&cfg, args, data, &recon, &log)?;
    cmd_evaluate(&truth, &recon, 0.5 * cfg.sigma_px(), &metrics, args)?;
    cmd_render(&cfg, args, &recon, &pgm)?;

    // Each stage wrote its own run.meta into out_dir (last writer wins);
    // leave a pipeline-level summary instead.
    let mut meta = vec![
        "subcommand = pipeline".to_string(),
        format!("config = {}", args.config.as_deref().map_or("<none>".into(), |p| p.display().to_string())),
        format!("out_dir = {}", out_dir.display()),
        format!("stack = {}", stack.display()),
        format!("truth = {}", truth.display()),
        format!("mean = {}", mean.display()),
        format!("cov = {}", cov.display()),
        format!("recon = {}", recon.display()),
        format!("log = {}", log.display()),
        format!("metrics = {}", metrics.display()),
        format!("render = {}", pgm.display()),
    ];
    meta.extend(config_lines(&cfg));
    write_meta(&stack, &meta)
}
