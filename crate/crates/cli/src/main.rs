use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use snugsplat::bench::{self, BenchSpec};
use snugsplat::image_io::write_pfm;
use snugsplat::ingest::{attach_images, parse_colmap, read_ply};
use snugsplat::pipeline::render_view;
use snugsplat::pose::PoseDelta;
use snugsplat::raster::RenderOptions;
use snugsplat::trainer::{evaluate, load_scene, train, StopReason, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "snugsplat", version, about = "Tile-based Gaussian splatting trainer and renderer")]
struct Cli {
    /// JSON training config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Fixed-order gradient reduction and zeroed benchmark timings.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads; 1 implies --deterministic.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on the scene named by --config.
    Train,
    /// Render every camera of a COLMAP model to PNG and PFM depth.
    Render {
        ply: PathBuf,
        colmap_dir: PathBuf,
        out_dir: PathBuf,
    },
    /// Mean PSNR of a trained set against the images of a COLMAP model.
    Eval {
        ply: PathBuf,
        colmap_dir: PathBuf,
        /// Defaults to `<colmap_dir>/images`.
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Compare binning strategies on random splats.
    BenchTiling {
        #[arg(long, default_value_t = 100_000)]
        splats: usize,
        #[arg(long, default_value_t = 10.0)]
        anisotropy: f64,
        /// Fixed rotation in degrees; random when omitted together with --random-angle.
        #[arg(long, default_value_t = 45.0)]
        angle_deg: f64,
        #[arg(long)]
        random_angle: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

fn usage<T>(r: Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Usage)
}

fn runtime<T>(r: Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Runtime)
}

fn load_config(cli: &Cli, required: bool) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            TrainConfig::from_json(&text).with_context(|| format!("parsing config {}", path.display()))?
        }
        None if required => bail!("--config is required"),
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.deterministic || cli.threads == Some(1) {
        cfg.deterministic = true;
    }
    Ok(cfg)
}

fn cmd_train(cli: &Cli) -> Result<(), Failure> {
    let cfg = usage(load_config(cli, true))?;
    let (set, cameras) = runtime(load_scene(&cfg).context("loading scene"))?;
    log::info!("{} cameras, {} initial splats", cameras.len(), set.len());
    let out = runtime(train(set, cameras, &cfg).context("training"))?;
    let why = match out.stop {
        StopReason::MaxIters => "max iterations",
        StopReason::Budget => "time budget",
    };
    println!(
        "stopped after {} iterations ({why}) in {:.2}s; {} splats; final PSNR {:.3} dB",
        out.iterations,
        out.elapsed.as_secs_f64(),
        out.set.len(),
        out.final_psnr().unwrap_or(0.0)
    );
    if let Some(dir) = &cfg.output_dir {
        println!("wrote {}", dir.join("point_cloud.ply").display());
    }
    Ok(())
}

fn require_dir(dir: &Path) -> Result<()> {
    if !dir.is_dir() {
        bail!("{} is not a directory", dir.display());
    }
    Ok(())
}

fn cmd_render(cli: &Cli, ply: &Path, colmap_dir: &Path, out_dir: &Path) -> Result<(), Failure> {
    let cfg = usage(load_config(cli, false))?;
    usage(require_dir(colmap_dir))?;
    let set = runtime(read_ply(ply).with_context(|| format!("reading {}", ply.display())))?;
    let recon = runtime(parse_colmap(colmap_dir).context("parsing COLMAP model"))?;
    runtime(fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display())))?;
    let settings = cfg.render_settings();
    for cam in &recon.cameras {
        let view = render_view(&set, cam, &PoseDelta::identity(), &settings, RenderOptions::default());
        let stem = Path::new(&cam.name).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let b = &view.buffers;
        runtime(b.color.save(&out_dir.join(format!("{stem}.png"))).context("writing image"))?;
        runtime(
            write_pfm(&out_dir.join(format!("{stem}.pfm")), b.width, b.height, &b.normalized_depth())
                .context("writing depth"),
        )?;
    }
    println!("rendered {} views to {}", recon.cameras.len(), out_dir.display());
    Ok(())
}

fn cmd_eval(cli: &Cli, ply: &Path, colmap_dir: &Path, images: Option<&Path>) -> Result<(), Failure> {
    let cfg = usage(load_config(cli, false))?;
    usage(require_dir(colmap_dir))?;
    let set = runtime(read_ply(ply).with_context(|| format!("reading {}", ply.display())))?;
    let mut recon = runtime(parse_colmap(colmap_dir).context("parsing COLMAP model"))?;
    let images = images.map(Path::to_path_buf).unwrap_or_else(|| colmap_dir.join("images"));
    runtime(attach_images(&mut recon, &images, None).context("loading images"))?;
    let p = runtime(evaluate(&set, &recon.cameras, &cfg.render_settings()).context("evaluating"))?;
    println!("mean PSNR {p:.4} dB over {} views", recon.cameras.len());
    Ok(())
}

fn cmd_bench(cli: &Cli, cmd: &Command) -> Result<(), Failure> {
    let Command::BenchTiling {
        splats,
        anisotropy,
        angle_deg,
        random_angle,
        out,
    } = cmd
    else {
        unreachable!()
    };
    let spec = BenchSpec {
        angle: (!random_angle).then(|| angle_deg.to_radians()),
        ..BenchSpec::new(*splats, *anisotropy, cli.seed.unwrap_or(0))
    };
    let deterministic = cli.deterministic || cli.threads == Some(1);
    let results = bench::run(&spec, deterministic).map_err(|e| Failure::Usage(e.into()))?;
    let csv = bench::to_csv(&results);
    match out {
        Some(path) => runtime(fs::write(path, &csv).with_context(|| format!("writing {}", path.display())))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage(anyhow::anyhow!("--threads must be positive")));
        }
        runtime(rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("building thread pool"))?;
    }
    match &cli.command {
        Command::Train => cmd_train(cli),
        Command::Render { ply, colmap_dir, out_dir } => cmd_render(cli, ply, colmap_dir, out_dir),
        Command::Eval { ply, colmap_dir, images } => cmd_eval(cli, ply, colmap_dir, images.as_deref()),
        cmd @ Command::BenchTiling { .. } => cmd_bench(cli, cmd),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let code = f.code();
            let (Failure::Usage(e) | Failure::Runtime(e)) = f;
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
