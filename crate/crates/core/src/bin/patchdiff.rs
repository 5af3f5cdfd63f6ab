use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::RngCore;

use patchdiff::config::Config;
use patchdiff::ct::{default_detector_count, CtGeometry, Projector};
use patchdiff::error::{Error, Result};
use patchdiff::eval::{self, PhantomSpec};
use patchdiff::grid::{PatchGrid, Volume};
use patchdiff::{io, par, rng, sampler, training};

#[derive(Parser)]
#[command(name = "patchdiff", version, about = "3D patch diffusion prior for sparse-view CT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write N synthetic phantom volumes
    Phantom {
        #[arg(long)]
        n: usize,
        /// Edge length of the cubic volumes
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        edge_softness: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parallel-beam projection of a volume
    Project {
        #[arg(long, required_unless_present = "import_raw")]
        vol: Option<PathBuf>,
        /// Read a headerless little-endian f32 volume instead
        #[arg(long, num_args = 4, value_names = ["FILE", "NX", "NY", "NZ"])]
        import_raw: Option<Vec<String>>,
        #[arg(long)]
        views: usize,
        #[arg(long, default_value_t = 0.0)]
        noise_sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Filtered back projection
    Fbp {
        #[arg(long)]
        sino: PathBuf,
        #[command(flatten)]
        size: SliceSize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the patch denoiser on a directory of volumes
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint at --out
        #[arg(long)]
        resume: bool,
        /// Loss curve CSV (default: <out>.csv)
        #[arg(long)]
        curve: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Unconditional generation
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        sampling: Sampling,
        /// Output dims (default: the training volume dims)
        #[arg(long, num_args = 3, value_names = ["NX", "NY", "NZ"])]
        dims: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sparse-view reconstruction with recurrent noising and CG data consistency
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sino: PathBuf,
        #[command(flatten)]
        sampling: Sampling,
        #[arg(long)]
        cg_iters: Option<usize>,
        #[arg(long)]
        cg_every: Option<usize>,
        #[command(flatten)]
        size: SliceSize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics
    #[command(subcommand)]
    Eval(EvalCommand),
}

#[derive(Args)]
struct Sampling {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long = "K")]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sigma_rule: Option<String>,
    /// Write each step's clean estimate here
    #[arg(long)]
    dump_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SliceSize {
    /// Slice width (default: inferred from the detector count)
    #[arg(long)]
    nx: Option<usize>,
    #[arg(long)]
    ny: Option<usize>,
}

#[derive(Subcommand)]
enum EvalCommand {
    Psnr {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        peak: f64,
    },
    Nn {
        #[arg(long)]
        vol: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    Boundary {
        #[arg(long)]
        vol: PathBuf,
        #[arg(long, default_value_t = 8)]
        patch_size: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("error: {}", msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    par::init_threads(par::threads_from_env());
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}

fn print(metrics: &[(&str, String)]) -> Result<()> {
    io::write_metrics(std::io::stdout().lock(), metrics)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Phantom { n, size, seed, edge_softness, out } => {
            if n == 0 || size == 0 {
                return Err(Error::InvalidArgument("--n and --size must be positive".into()));
            }
            std::fs::create_dir_all(&out)?;
            for i in 0..n {
                let spec = PhantomSpec { seed: rng::stream(seed, &[i as u64]).next_u64(), edge_softness, ..PhantomSpec::default() };
                let v = eval::generate_phantom(&spec, [size; 3])?;
                io::save_volume(&out.join(format!("phantom_{i:04}.pdv")), &v)?;
            }
            print(&[("volumes", n.to_string()), ("out", out.display().to_string())])
        }
        Command::Project { vol, import_raw, views, noise_sigma, seed, out } => {
            let v = match (vol, import_raw) {
                (_, Some(raw)) => {
                    let dims = [1, 2, 3].map(|i| raw[i].parse::<usize>());
                    let dims = match dims {
                        [Ok(a), Ok(b), Ok(c)] => [a, b, c],
                        _ => return Err(Error::InvalidArgument("--import-raw dims must be integers".into())),
                    };
                    io::import_raw(Path::new(&raw[0]), dims)?
                }
                (Some(p), None) => io::load_volume(&p)?,
                (None, None) => unreachable!("clap requires one input"),
            };
            if !(noise_sigma >= 0.0) {
                return Err(Error::InvalidArgument("--noise-sigma must be non-negative".into()));
            }
            let [nx, ny, _] = v.dims();
            let geom = CtGeometry::for_image(views, nx, ny)?;
            let mut s = Projector::new(&geom, v.dims())?.project(&v)?;
            s.add_noise(noise_sigma, seed);
            io::save_sinogram(&out, &s)?;
            print(&[("views", views.to_string()), ("detectors", geom.n_det.to_string()), ("out", out.display().to_string())])
        }
        Command::Fbp { sino, size, out } => {
            let s = io::load_sinogram(&sino)?;
            let (proj, _) = projector_for(&s, &size)?;
            let v = proj.fbp(&s)?;
            io::save_volume(&out, &v)?;
            print(&[("dims", dims_text(v.dims())), ("out", out.display().to_string())])
        }
        Command::Train { data, config, out, resume, curve, steps, seed } => {
            let mut cfg = match &config {
                Some(p) => Config::load(p)?,
                None => Config::default(),
            };
            if let Some(s) = steps {
                cfg.train_steps = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let volumes = load_dir(&data)?;
            let dims = volumes[0].dims();
            let echo = format!("{}# data_dims = {}\n", cfg.to_text(), dims_text(dims));
            let tc = cfg.train_config();
            let state = if resume && out.exists() {
                let ck = io::load_checkpoint(&out)?;
                let prev = Config::parse(&ck.config)?;
                if prev.net_config() != tc.net || prev.patch_size != tc.patch_size {
                    return Err(Error::InvalidArgument("checkpoint network differs from the requested config".into()));
                }
                Some(ck.to_state(&tc.net)?)
            } else {
                None
            };
            let curve = curve.unwrap_or_else(|| out.with_extension("csv"));
            let st = training::train_to_files(&volumes, &tc, &echo, &out, &curve, state)?;
            print(&[
                ("steps", st.step.to_string()),
                ("parameters", st.net.params().num_values().to_string()),
                ("out", out.display().to_string()),
                ("curve", curve.display().to_string()),
            ])
        }
        Command::Sample { ckpt, sampling, dims, out } => {
            let (cfg, ck_dims, net) = load_model(&ckpt)?;
            let sc = sampler_config(&cfg, &sampling)?;
            let dims = match dims {
                Some(d) => [d[0], d[1], d[2]],
                None => ck_dims.ok_or_else(|| Error::InvalidArgument("checkpoint lacks volume dims; pass --dims".into()))?,
            };
            let grid = PatchGrid::new(dims, cfg.patch_size)?;
            let v = sampler::sample_unconditional(&net, &grid, &cfg.schedule()?, &sc)?;
            io::save_volume(&out, &v)?;
            print(&[("dims", dims_text(dims)), ("out", out.display().to_string())])
        }
        Command::Reconstruct { ckpt, sino, sampling, cg_iters, cg_every, size, out } => {
            let (mut cfg, _, net) = load_model(&ckpt)?;
            if let Some(m) = cg_iters {
                cfg.cg_iters = m;
            }
            if let Some(m) = cg_every {
                cfg.cg_every = m;
            }
            let sc = sampler_config(&cfg, &sampling)?;
            let y = io::load_sinogram(&sino)?;
            let (proj, dims) = projector_for(&y, &size)?;
            let grid = PatchGrid::new(dims, cfg.patch_size)?;
            let v = sampler::reconstruct(&net, &grid, &cfg.schedule()?, &sc, &proj, &y)?;
            io::save_volume(&out, &v)?;
            print(&[("dims", dims_text(dims)), ("K", sc.k.to_string()), ("out", out.display().to_string())])
        }
        Command::Eval(e) => match e {
            EvalCommand::Psnr { a, b, peak } => {
                let p = eval::psnr(&io::load_volume(&a)?, &io::load_volume(&b)?, peak)?;
                print(&[("psnr", p.to_string())])
            }
            EvalCommand::Nn { vol, data } => {
                let (i, d) = eval::nearest_neighbor(&io::load_volume(&vol)?, &load_dir(&data)?)?;
                print(&[("index", i.to_string()), ("distance", d.to_string())])
            }
            EvalCommand::Boundary { vol, patch_size } => {
                let v = io::load_volume(&vol)?;
                let grid = PatchGrid::new(v.dims(), patch_size)?;
                print(&[("boundary", eval::boundary_artifact_metric(&v, &grid)?.to_string())])
            }
        },
    }
}

fn dims_text(d: [usize; 3]) -> String {
    format!("{} {} {}", d[0], d[1], d[2])
}

/// Volume files in a directory, sorted by name.
fn load_dir(dir: &Path) -> Result<Vec<Volume>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pdv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!("no .pdv volumes in {}", dir.display())));
    }
    paths.iter().map(|p| io::load_volume(p)).collect()
}

/// Config, training volume dims, and the EMA network from a checkpoint.
fn load_model(path: &Path) -> Result<(Config, Option<[usize; 3]>, patchdiff::ConvDenoiser)> {
    let ck = io::load_checkpoint(path)?;
    let cfg = Config::parse(&ck.config)?;
    let dims = ck.config.lines().find_map(|l| {
        let rest = l.trim().strip_prefix('#')?.trim().strip_prefix("data_dims")?.trim().strip_prefix('=')?;
        let v: Vec<usize> = rest.split_whitespace().filter_map(|s| s.parse().ok()).collect();
        (v.len() == 3).then(|| [v[0], v[1], v[2]])
    });
    let net = ck.ema_denoiser(&cfg.net_config())?;
    Ok((cfg, dims, net))
}

fn sampler_config(cfg: &Config, s: &Sampling) -> Result<sampler::SamplerConfig> {
    let mut c = cfg.sampler_config();
    if let Some(v) = s.steps {
        c.steps = v;
    }
    if let Some(v) = s.eta {
        c.eta = v;
    }
    if let Some(v) = s.k {
        c.k = v;
    }
    if let Some(v) = s.seed {
        c.seed = v;
    }
    if let Some(v) = &s.sigma_rule {
        c.sigma_rule = v.parse()?;
    }
    c.dump_dir = s.dump_dir.clone();
    Ok(c)
}

/// Projector for a sinogram; the slice size defaults to the square image
/// whose default detector count matches.
fn projector_for(s: &patchdiff::ct::Sinogram, size: &SliceSize) -> Result<(Projector, [usize; 3])> {
    let (nx, ny) = match (size.nx, size.ny) {
        (Some(x), Some(y)) => (x, y),
        (Some(x), None) | (None, Some(x)) => (x, x),
        (None, None) => {
            let n = (1..=s.n_det())
                .find(|&n| default_detector_count(n, n, 1.0) == s.n_det())
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("cannot infer a square slice from {} detector bins; pass --nx/--ny", s.n_det()))
                })?;
            (n, n)
        }
    };
    let geom = CtGeometry::with_angles(s.angles().to_vec(), s.n_det(), 1.0)?;
    let dims = [nx, ny, s.nz()];
    Ok((Projector::new(&geom, dims)?, dims))
}
