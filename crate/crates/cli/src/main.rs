use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use ma_reflector::benchmarks::{cross_sections, run_table, solve_benchmark, write_cross_section_csv, write_table_csv};
use ma_reflector::collocation::SolverConfig;
use ma_reflector::config::{parse_config, parse_schedule, RunSettings};
use ma_reflector::image::{read_pgm, write_pgm_p5, IrradianceImage};
use ma_reflector::io::{read_surface_csv, write_height_field_csv, write_surface_csv};
use ma_reflector::raytrace::{high_pass, validate};
use ma_reflector::reflector::{
    diagnose, final_target, solve_reflector, surface_integral, universal_initial_guess, working_target, ReflectorSetup,
};
use ma_reflector::tensor::SplineSurface;

/// Exit code when every file was written but some solve did not converge.
const EXIT_NOT_CONVERGED: u8 = 3;
const HEIGHT_FIELD_SAMPLES: usize = 101;
const HIGH_PASS_SIZE: usize = 256;
const HIGH_PASS_CUTOFF: usize = 41;
const RENDER_SIZE: usize = 64;

#[derive(Parser, Debug)]
#[command(name = "ma-reflector", version, about = "Monge-Ampère benchmarks and inverse reflector design")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Mollifier schedule override, e.g. `21:101,41:51`.
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of rays traced (at least 1).
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    rays: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Error table of a test problem on the unit square.
    Benchmark {
        /// Problem number, 1 to 5.
        #[arg(value_parser = clap::value_parser!(u8).range(1..=5))]
        id: u8,
        /// Grid sizes, comma separated.
        #[arg(long = "N", value_delimiter = ',', default_values_t = [31usize, 45, 63, 89, 127])]
        n: Vec<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Computes a reflector for a target image.
    Reflector {
        /// Target image (PGM); a constant target when omitted.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Largest grid size of the schedule to run.
        #[arg(long = "N")]
        n: Option<usize>,
        /// Directory for the cached universal initial guess (default: the output directory).
        #[arg(long)]
        guess_cache: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Traces rays off a reflector surface and renders the target plane.
    Raytrace {
        /// Surface CSV written by `reflector`.
        #[arg(long)]
        surface: PathBuf,
        /// Target image to compare with; constant when omitted.
        #[arg(long)]
        image: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Cross-sections along the x axis and the diagonal of a surface.
    CrossSection {
        /// Surface CSV; when omitted, problem 5 is solved at `--N`.
        #[arg(long)]
        surface: Option<PathBuf>,
        #[arg(long = "N", default_value_t = 181)]
        n: usize,
        #[command(flatten)]
        common: Common,
    },
}

type AnyResult<T> = Result<T, Box<dyn std::error::Error>>;

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Settings from the config file with command-line overrides applied; all
/// overrides are checked before any solve starts.
fn settings(common: &Common) -> AnyResult<RunSettings> {
    let mut s = match &common.config {
        Some(path) => parse_config(&fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?)?,
        None => RunSettings::default(),
    };
    if let Some(schedule) = &common.schedule {
        s.setup.schedule = parse_schedule(schedule)?;
    }
    if let Some(seed) = common.seed {
        s.seed = seed;
    }
    if let Some(rays) = common.rays {
        s.rays = usize::try_from(rays)?;
    }
    s.validate()?;
    Ok(s)
}

/// Files written by a command, recorded with their hashes in the manifest.
/// Logs carry timings and are listed without a hash.
struct Outputs {
    dir: PathBuf,
    files: Vec<(String, Option<String>)>,
}

impl Outputs {
    fn new(dir: &Path) -> AnyResult<Self> {
        fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn write(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> ma_reflector::Result<()>) -> AnyResult<()> {
        let hash = self.put(name, f)?;
        self.files.push((name.to_string(), Some(hash)));
        Ok(())
    }

    fn write_log(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> ma_reflector::Result<()>) -> AnyResult<()> {
        self.put(name, f)?;
        self.files.push((name.to_string(), None));
        Ok(())
    }

    fn put(&self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> ma_reflector::Result<()>) -> AnyResult<String> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        let path = self.dir.join(name);
        fs::write(&path, &buf).map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(sha256_hex(&buf))
    }

    fn manifest(mut self, command: &str, s: &RunSettings) -> AnyResult<()> {
        let config = s.to_config_string();
        let files = std::mem::take(&mut self.files);
        self.put("manifest.txt", |w| {
            writeln!(w, "command = {command}")?;
            writeln!(w, "version = {} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))?;
            writeln!(w, "config_sha256 = {}", sha256_hex(config.as_bytes()))?;
            writeln!(w, "seed = {}", s.seed)?;
            for (name, hash) in &files {
                match hash {
                    Some(h) => writeln!(w, "file {name} sha256 = {h}")?,
                    None => writeln!(w, "file {name} (log, not hashed)")?,
                }
            }
            writeln!(w, "[config]")?;
            write!(w, "{config}")?;
            Ok(())
        })?;
        Ok(())
    }
}

fn load_target(image: Option<&Path>, setup: &ReflectorSetup) -> AnyResult<IrradianceImage> {
    Ok(match image {
        Some(path) => IrradianceImage::from_gray(&read_pgm(path).map_err(|e| format!("{}: {e}", path.display()))?, setup.sigma),
        None => IrradianceImage::constant(setup.image_size, setup.image_size, setup.sigma, 1.0)?,
    })
}

/// Universal initial guess, read from `dir` when a file for the same
/// geometry exists and written there otherwise.
fn cached_guess(setup: &ReflectorSetup, dir: &Path) -> AnyResult<(SplineSurface, f64)> {
    let key = RunSettings {
        setup: ReflectorSetup { schedule: vec![setup.schedule[0]], ..setup.clone() },
        ..RunSettings::default()
    };
    let hash = &sha256_hex(key.to_config_string().as_bytes())[..16];
    let surface_path = dir.join(format!("universal_{hash}.csv"));
    let c_path = dir.join(format!("universal_{hash}.c"));
    if surface_path.exists() && c_path.exists() {
        let surface = read_surface_csv(BufReader::new(File::open(&surface_path)?))?;
        let c: f64 = fs::read_to_string(&c_path)?.trim().parse().map_err(|e| format!("{}: {e}", c_path.display()))?;
        eprintln!("using cached initial guess {}", surface_path.display());
        return Ok((surface, c));
    }
    let (surface, c) = universal_initial_guess(setup)?;
    fs::create_dir_all(dir)?;
    write_surface_csv(&surface, BufWriter::new(File::create(&surface_path)?))?;
    fs::write(&c_path, format!("{c}\n"))?;
    Ok((surface, c))
}

fn cmd_benchmark(id: u8, ns: &[usize], common: &Common) -> AnyResult<u8> {
    if ns.is_empty() {
        return Err("--N needs at least one grid size".into());
    }
    let s = settings(common)?;
    let mut out = Outputs::new(&common.out)?;
    let config = SolverConfig::default();
    let rows = run_table(id, ns, &config)?;
    out.write(&format!("benchmark_{id}.csv"), |w| write_table_csv(&rows, w))?;
    for r in &rows {
        match (&r.failure, r.max_error) {
            (Some(e), _) => eprintln!("N={} failed: {e}", r.n),
            (None, Some(err)) => println!("N={} max_error={err:.3e} seconds={:.2}", r.n, r.seconds),
            (None, None) => println!("N={} seconds={:.2}", r.n, r.seconds),
        }
    }
    let mut converged = rows.iter().all(|r| r.failure.is_none());
    if id == 4 {
        // The degenerate problem keeps the best iterate of stalled solves.
        converged = false;
        eprintln!("benchmark 4 does not converge; errors are those of the stalled iterates");
    }
    if id == 5 {
        for &n in ns {
            let run = solve_benchmark(id, n, &config)?;
            let cs = cross_sections(&run.surface)?;
            out.write(&format!("cross_section_x_N{n}.csv"), |w| write_cross_section_csv(&cs.x_axis, w))?;
            out.write(&format!("cross_section_diag_N{n}.csv"), |w| write_cross_section_csv(&cs.diagonal, w))?;
        }
    }
    out.manifest(&format!("benchmark {id}"), &s)?;
    Ok(if converged { 0 } else { EXIT_NOT_CONVERGED })
}

fn cmd_reflector(image: Option<&Path>, n: Option<usize>, guess_cache: Option<&Path>, common: &Common) -> AnyResult<u8> {
    let s = settings(common)?;
    let setup = &s.setup;
    let target = load_target(image, setup)?;
    let n_target = n.unwrap_or(usize::MAX);
    if n_target < setup.schedule[0].0 {
        return Err(format!("--N {n_target} is below the first schedule level {}", setup.schedule[0].0).into());
    }
    let mut out = Outputs::new(&common.out)?;
    let clock = Instant::now();
    let initial = cached_guess(setup, guess_cache.unwrap_or(&common.out))?;
    let solution = solve_reflector(setup, &target, initial, n_target)?;
    let g = final_target(setup, &target, &solution)?;
    let diag = diagnose(setup, &g, &solution.surface, solution.c)?;
    out.write("surface.csv", |w| write_surface_csv(&solution.surface, w))?;
    out.write("height_field.csv", |w| write_height_field_csv(&solution.surface, HEIGHT_FIELD_SAMPLES, w))?;
    let hp = high_pass(&solution.surface, HIGH_PASS_CUTOFF, HIGH_PASS_SIZE)?;
    out.write("high_pass.pgm", |w| write_pgm_p5(&hp.to_gray_auto(), w))?;
    let integral = surface_integral(&solution.surface);
    let mut converged = true;
    out.write_log("solve_log.txt", |w| {
        for l in &solution.levels {
            match &l.report {
                Some(r) => {
                    converged &= l.blend == 1.0 && r.usable();
                    writeln!(
                        w,
                        "level N={} mollifier={} blend={} retries={} iterations={} termination={:?} residual={:.3e} seconds={:.2}",
                        l.n, l.mollifier, l.blend, l.retries, r.iterations, r.termination, r.final_residual_norm, l.seconds
                    )?
                }
                None => {
                    converged = false;
                    writeln!(w, "level N={} mollifier={} no accepted solve", l.n, l.mollifier)?
                }
            }
        }
        writeln!(w, "c = {}", solution.c)?;
        writeln!(w, "integral = {integral} (G = {}, error {:.3e})", setup.size_g, (integral - setup.size_g).abs())?;
        writeln!(w, "min_t = {} min_eigenvalue = {} picard_defect = {:.3e}", diag.min_t, diag.min_eigenvalue, diag.picard_defect)?;
        writeln!(w, "energy_mismatch = {:.4}", diag.energy_mismatch())?;
        Ok(())
    })?;
    println!(
        "c={} integral={integral} levels={} seconds={:.1}",
        solution.c,
        solution.levels.len(),
        clock.elapsed().as_secs_f64()
    );
    out.manifest("reflector", &s)?;
    Ok(if converged { 0 } else { EXIT_NOT_CONVERGED })
}

fn cmd_raytrace(surface: &Path, image: Option<&Path>, common: &Common) -> AnyResult<u8> {
    let s = settings(common)?;
    let file = File::open(surface).map_err(|e| format!("{}: {e}", surface.display()))?;
    let surface = read_surface_csv(BufReader::new(file)).map_err(|e| format!("{}: {e}", surface.display()))?;
    let target = load_target(image, &s.setup)?;
    let lifted = ma_reflector::image::resample(&working_target(&s.setup, &target)?, RENDER_SIZE, RENDER_SIZE)?;
    let mut out = Outputs::new(&common.out)?;
    let report = validate(&surface, &s.setup, &lifted, s.rays, s.seed)?;
    out.write("rendered.pgm", |w| write_pgm_p5(&report.rendered.to_gray_auto(), w))?;
    let summary = report.summary();
    out.write_log("report.txt", |w| Ok(writeln!(w, "rays={} seed={} {summary}", s.rays, s.seed)?))?;
    println!("{summary}");
    out.manifest("raytrace", &s)?;
    Ok(0)
}

fn cmd_cross_section(surface: Option<&Path>, n: usize, common: &Common) -> AnyResult<u8> {
    let s = settings(common)?;
    let (surface, converged) = match surface {
        Some(path) => (read_surface_csv(BufReader::new(File::open(path).map_err(|e| format!("{}: {e}", path.display()))?))?, true),
        None => {
            let run = solve_benchmark(5, n, &SolverConfig::default())?;
            let ok = run.reports.iter().all(|(_, r)| r.usable());
            (run.surface, ok)
        }
    };
    let mut out = Outputs::new(&common.out)?;
    let cs = cross_sections(&surface)?;
    out.write("cross_section_x.csv", |w| write_cross_section_csv(&cs.x_axis, w))?;
    out.write("cross_section_diag.csv", |w| write_cross_section_csv(&cs.diagonal, w))?;
    out.manifest("cross-section", &s)?;
    Ok(if converged { 0 } else { EXIT_NOT_CONVERGED })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Benchmark { id, n, common } => cmd_benchmark(*id, n, common),
        Command::Reflector { image, n, guess_cache, common } => cmd_reflector(image.as_deref(), *n, guess_cache.as_deref(), common),
        Command::Raytrace { surface, image, common } => cmd_raytrace(surface, image.as_deref(), common),
        Command::CrossSection { surface, n, common } => cmd_cross_section(surface.as_deref(), *n, common),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
