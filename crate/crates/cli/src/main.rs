use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use log::info;

use ddhf_core::config::Config;
use ddhf_core::decoder::MixWeights;
use ddhf_core::eval::eval_detections;
use ddhf_core::io::{detections_from_json, detections_to_json, read_tensor, write_tensor};
use ddhf_core::oracle;
use ddhf_core::pipeline::{run_pipeline, Weights};
use ddhf_core::rng::{ParamInit, PrngState};
use ddhf_core::scene::{gen_scene, load_gt, load_scene, write_scene, SceneSpec};
use ddhf_core::viewtrans::encode_image;
use ddhf_core::voxel::voxelize;
use ddhf_core::Tensor;

#[derive(Parser)]
#[command(name = "ddhf", version, about = "LiDAR/camera fusion pipeline on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scene directory from a JSON spec.
    GenScene {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the pipeline on a scene directory and write detections.
    Run(RunArgs),
    /// Score detections against ground truth.
    Eval {
        #[arg(long)]
        det: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Brute-force reference computations.
    #[command(subcommand)]
    Oracle(OracleCmd),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Weight seed; defaults to the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Identity blocks and a density heatmap; writes one box per easy query.
    #[arg(long)]
    pass_through: bool,
    /// Also write stage timings and memory estimates as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum OracleCmd {
    /// Dense unrolled scan over random inputs; writes inputs and output.
    SsmDense {
        #[arg(long, default_value_t = 32)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        channels: usize,
        #[arg(long, default_value_t = 4)]
        state: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Peaks of a `(K, H, W)` heatmap tensor, one `class row col` per line.
    Nms {
        #[arg(long)]
        heatmap: PathBuf,
        #[arg(long)]
        k: usize,
    },
    /// Farthest point sampling over an `(n, 3)` tensor, one index per line.
    Fps {
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        target: usize,
    },
    /// Pillar max of the voxelized point cloud.
    HeightCompress {
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// The curve walk, one `index x y z step` per line.
    HilbertWalk {
        #[arg(long)]
        bits: u32,
    },
    /// Query-conditioned mixing on random inputs; writes inputs and output.
    MixScalar {
        #[arg(long, default_value_t = 8)]
        query_dim: usize,
        #[arg(long, default_value_t = 8)]
        channels: usize,
        #[arg(long, default_value_t = 16)]
        points: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Naive frustum splat of a scene's image features onto the BEV grid.
    Splat {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Config::from_json(&text).with_context(|| format!("config {}", p.display()))
        }
        None => Ok(Config::default()),
    }
}

fn random(rng: &mut PrngState, dims: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
    let n = dims.iter().product();
    Ok(Tensor::new(dims.to_vec(), (0..n).map(|_| rng.uniform(lo, hi) as f32).collect())?)
}

fn save(dir: &Path, name: &str, t: &Tensor) -> Result<()> {
    write_tensor(dir.join(name), t).with_context(|| format!("writing {name}"))
}

fn run(a: RunArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let seed = a.seed.unwrap_or(cfg.seed);
    let scene = load_scene(&a.scene).with_context(|| format!("scene {}", a.scene.display()))?;
    let w = if a.pass_through { Weights::pass_through(&cfg, seed) } else { Weights::init(&cfg, seed) };
    let out = run_pipeline(&scene, &cfg, &w)?;
    let r = &out.report;
    info!(
        "{} points, {} lidar / {} image voxels, {} easy + {} hard queries, peak ~{} KiB",
        r.points,
        r.lidar_voxels,
        r.image_voxels,
        r.easy_queries,
        r.hard_queries,
        r.peak_live_bytes / 1024
    );
    let dets = if a.pass_through { &out.passthrough } else { &out.detections };
    fs::write(&a.out, detections_to_json(dets)).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(p) = a.report {
        fs::write(&p, serde_json::to_string_pretty(&out.report)? + "\n")?;
    }
    Ok(())
}

fn oracle_cmd(cmd: OracleCmd) -> Result<()> {
    match cmd {
        OracleCmd::SsmDense { n, channels, state, seed, out } => {
            if n == 0 || channels == 0 || state == 0 {
                bail!("sizes must be positive");
            }
            let mut rng = PrngState::new(seed);
            let x = random(&mut rng, &[n, channels], -1.0, 1.0)?;
            let a = random(&mut rng, &[channels, state], -2.0, -0.05)?;
            let b = random(&mut rng, &[n, state], -1.0, 1.0)?;
            let c = random(&mut rng, &[n, state], -1.0, 1.0)?;
            let delta = random(&mut rng, &[n, channels], 0.001, 0.5)?;
            let y = oracle::ssm_dense(&x, &a, &b, &c, &delta);
            fs::create_dir_all(&out)?;
            for (name, t) in [("x", &x), ("a", &a), ("b", &b), ("c", &c), ("delta", &delta), ("y", &y)] {
                save(&out, &format!("{name}.bin"), t)?;
            }
        }
        OracleCmd::Nms { heatmap, k } => {
            let h = read_tensor(&heatmap)?;
            if h.dims().len() != 3 {
                bail!("heatmap must be (K, H, W), got {:?}", h.dims());
            }
            for (c, r, col) in oracle::nms_topk(&h, k) {
                println!("{c} {r} {col}");
            }
        }
        OracleCmd::Fps { points, target } => {
            let p = read_tensor(&points)?;
            if p.dims().len() != 2 || p.dims()[1] != 3 {
                bail!("points must be (n, 3), got {:?}", p.dims());
            }
            if target > p.rows() {
                bail!("target {target} exceeds {} points", p.rows());
            }
            let pts: Vec<[f64; 3]> = p.data().chunks(3).map(|r| [r[0] as f64, r[1] as f64, r[2] as f64]).collect();
            for i in oracle::fps_greedy(&pts, target) {
                println!("{i}");
            }
        }
        OracleCmd::HeightCompress { points, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let v = voxelize(&read_tensor(&points)?, &cfg.lidar_grid)?;
            write_tensor(&out, &oracle::height_compress(&v))?;
        }
        OracleCmd::HilbertWalk { bits } => {
            if !(1..=6).contains(&bits) {
                bail!("bits must be in 1..=6 for an exhaustive walk");
            }
            for (i, (p, step)) in oracle::hilbert_walk(bits).into_iter().enumerate() {
                println!("{i} {} {} {} {step}", p[0], p[1], p[2]);
            }
        }
        OracleCmd::MixScalar { query_dim, channels, points, seed, out } => {
            if query_dim == 0 || channels == 0 || points == 0 || points % 4 != 0 {
                bail!("sizes must be positive and points divisible by 4");
            }
            let mut rng = PrngState::new(seed);
            let q = random(&mut rng, &[query_dim], -1.0, 1.0)?;
            let feats = random(&mut rng, &[points, channels], -1.0, 1.0)?;
            let offsets = random(&mut rng, &[points, 3], -2.0, 2.0)?;
            let off: Vec<[f64; 3]> = offsets.data().chunks(3).map(|r| [r[0] as f64, r[1] as f64, r[2] as f64]).collect();
            let w = MixWeights::init(&ParamInit::new(seed), query_dim, channels, points);
            let y = oracle::mix_scalar(q.data(), &feats, &off, &w);
            fs::create_dir_all(&out)?;
            let y = Tensor::new(vec![y.len()], y)?;
            for (name, t) in [("q", &q), ("feats", &feats), ("offsets", &offsets), ("y", &y)] {
                save(&out, &format!("{name}.bin"), t)?;
            }
        }
        OracleCmd::Splat { scene, seed, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let s = load_scene(&scene)?;
            let w = Weights::init(&cfg, seed.unwrap_or(cfg.seed));
            let feats = s.images.iter().map(|i| encode_image(i, &w.image_encoder)).collect::<ddhf_core::Result<Vec<_>>>()?;
            write_tensor(&out, &oracle::splat_naive(&feats, &s.cameras, &cfg.depth_bins, &cfg.lidar_grid))?;
        }
    }
    Ok(())
}

/// Like `Cli::parse`, but an unknown subcommand also lists the valid ones.
fn parse_args() -> Cli {
    Cli::try_parse().unwrap_or_else(|e| {
        if e.kind() != ErrorKind::InvalidSubcommand {
            e.exit();
        }
        let root = Cli::command();
        let under_oracle = std::env::args().any(|a| a == "oracle");
        let parent = if under_oracle { root.find_subcommand("oracle").unwrap_or(&root) } else { &root };
        let names: Vec<&str> = parent.get_subcommands().map(|c| c.get_name()).filter(|n| *n != "help").collect();
        eprint!("{}", e.render());
        eprintln!("valid subcommands: {}", names.join(", "));
        std::process::exit(2);
    })
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match parse_args().cmd {
        Cmd::GenScene { spec, out } => {
            let text = fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let spec = SceneSpec::from_json(&text).context("invalid scene spec")?;
            write_scene(&out, &gen_scene(&spec)?)?;
            info!("wrote {}", out.display());
        }
        Cmd::Run(a) => run(a)?,
        Cmd::Eval { det, gt } => {
            let text = fs::read_to_string(&det).with_context(|| format!("reading {}", det.display()))?;
            let dets = detections_from_json(&text)?;
            let gt = load_gt(&gt).with_context(|| format!("ground truth {}", gt.display()))?;
            println!("{}", serde_json::to_string_pretty(&eval_detections(&dets, &gt))?);
        }
        Cmd::Oracle(cmd) => oracle_cmd(cmd)?,
    }
    Ok(())
}
