//! `hpcg`: command-line frontend for the point cloud geometry codec.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hpcg::assets::Assets;
use hpcg::codec::{Codec, CodecConfig, Encoded, RateReport, Timings};
use hpcg::error::Error;
use hpcg::kdtree::kdtree_partition;
use hpcg::metrics::{tb_rate, TimeBppCurve};
use hpcg::octree::PointCloud;
use hpcg::optim::TrainConfig;
use hpcg::ply::{read_ply, write_ply, PlyFormat};
use hpcg::pretrained::{pretrain_assets, train_base_layer, AssetRecipe, ToyCorpus};
use hpcg::synth::ood_gopc;
use hpcg::train::EpochStat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const ASSET_FILE: &str = "assets.hpca";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser)]
#[command(name = "hpcg", version, about = "Lossless point cloud geometry codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the prior network and write a fresh asset file.
    PretrainPpn(TrainArgs),
    /// Train both refiner base layers on top of existing prior-network assets.
    TrainBase(TrainArgs),
    /// Encode PLY frames into one bitstream per group of frames.
    Encode(EncodeArgs),
    /// Decode bitstreams back to PLY frames.
    Decode(DecodeArgs),
    /// Record the Time-Bpp curve of one group of frames.
    Bench(BenchArgs),
    /// Compare the full codec against its ablations by TB-Rate.
    Ablate(BenchArgs),
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long, env = "HPCG_ASSETS_DIR", default_value = "assets")]
    assets_dir: PathBuf,
    #[arg(long, env = "HPCG_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "HPCG_COARSE_THRESHOLD", default_value_t = 64)]
    coarse_threshold: usize,
    #[arg(long, env = "HPCG_THREADS", default_value_t = 1)]
    threads: usize,
}

#[derive(Args, Clone)]
struct CodecFlags {
    /// Overfitting epochs per group (0 codes with the base layer only).
    #[arg(long, env = "HPCG_EPOCHS", default_value_t = TrainConfig::overfit().epochs)]
    epochs: usize,
    /// Send enhancement parameters as raw 32-bit floats.
    #[arg(long, env = "HPCG_NO_SMC")]
    no_smc: bool,
    /// Disable the prior network (constant zero prior).
    #[arg(long, env = "HPCG_NO_PPN")]
    no_ppn: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Directory of PLY training clouds.
    #[arg(long, conflicts_with = "synthetic")]
    input: Option<PathBuf>,
    /// Train on this many generated primitive clouds instead.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Bit depth of generated clouds.
    #[arg(long, default_value_t = 6)]
    synthetic_bitdepth: u8,
    /// Small networks and short schedules.
    #[arg(long)]
    toy: bool,
    #[arg(long, env = "HPCG_EPOCHS")]
    epochs: Option<usize>,
    #[arg(long)]
    ppn_blocks: Option<usize>,
    #[arg(long)]
    ppn_channels: Option<usize>,
    #[arg(long)]
    dar_blocks: Option<usize>,
    #[arg(long)]
    dar_channels: Option<usize>,
}

#[derive(Args)]
struct EncodeArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    flags: CodecFlags,
    /// Frames in coding order.
    #[arg(required = true)]
    frames: Vec<PathBuf>,
    #[arg(short, long)]
    out_dir: PathBuf,
    #[arg(long, env = "HPCG_GOPC_SIZE", default_value_t = 32)]
    gopc_size: usize,
    /// Split each frame into K-D tree sub-frames of about this many points.
    #[arg(long)]
    subframe_points: Option<usize>,
    /// Bit depth of all frames (default: the smallest that fits).
    #[arg(long)]
    bitdepth: Option<u8>,
    /// Also write wall-clock timings to this JSON file.
    #[arg(long)]
    timings: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long, env = "HPCG_ASSETS_DIR", default_value = "assets")]
    assets_dir: PathBuf,
    #[arg(long, env = "HPCG_THREADS", default_value_t = 1)]
    threads: usize,
    /// An encode output directory, or a single .hpcg file.
    input: PathBuf,
    #[arg(short, long)]
    out_dir: PathBuf,
    /// Write sub-frames separately instead of merging them per frame.
    #[arg(long)]
    no_merge: bool,
    #[arg(long)]
    binary: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    flags: CodecFlags,
    /// Frames of one group; omit to use a generated out-of-distribution group.
    frames: Vec<PathBuf>,
    #[arg(long, default_value_t = 4)]
    synthetic_frames: usize,
    #[arg(long, default_value_t = 6)]
    synthetic_bitdepth: u8,
    #[arg(long, default_value_t = 14.0)]
    synthetic_radius: f64,
    /// Output CSV (bench) or JSON (ablate).
    #[arg(short, long)]
    output: PathBuf,
}

/// Which input frame every coded frame belongs to.
#[derive(Serialize, Deserialize)]
struct Manifest {
    frames: Vec<ManifestFrame>,
    gopcs: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ManifestFrame {
    name: String,
    bitdepth: u8,
    /// `(gopc index, frame index within it)` of each sub-frame.
    parts: Vec<(usize, usize)>,
}

#[derive(Serialize)]
struct EncodeReport {
    total_bits: u64,
    points: usize,
    bpp: f64,
    gopcs: Vec<GopcReport>,
}

#[derive(Serialize)]
struct GopcReport {
    file: String,
    #[serde(flatten)]
    rate: RateReport,
}

#[derive(Serialize)]
struct AblationEntry {
    bpp: f64,
    model_bpp: f64,
    selected_epoch: Option<usize>,
    encode_s: f64,
    /// Percent more bits than the full codec over the shared time span.
    tb_rate_vs_full: Option<f64>,
    curve: Vec<(f64, f64)>,
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<serde_json::Error>().is_some() {
        return 2;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::Ply(_)) => 2,
        Some(Error::ChecksumMismatch) => 3,
        Some(
            Error::BadMagic
            | Error::BadVersion(_)
            | Error::Corrupt(_)
            | Error::Truncated(_)
            | Error::ParamDecode { .. }
            | Error::EmptyParent { .. },
        ) => 4,
        _ if e.chain().any(|c| c.downcast_ref::<AssetError>().is_some()) => 3,
        _ => 1,
    }
}

/// Missing or unusable asset files.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct AssetError(String);

fn load_codec(dir: &Path) -> Result<Codec> {
    let path = dir.join(ASSET_FILE);
    let assets = Assets::load(&path).map_err(|e| AssetError(format!("cannot load {}: {e}", path.display())))?;
    Ok(Codec::new(assets)?)
}

fn codec_config(common: &Common, flags: &CodecFlags) -> CodecConfig {
    CodecConfig {
        coarse_threshold: common.coarse_threshold,
        smc: !flags.no_smc,
        ppn: !flags.no_ppn,
        train: TrainConfig {
            epochs: flags.epochs,
            seed: common.seed,
            ..TrainConfig::overfit()
        },
        threads: common.threads.max(1),
        ..Default::default()
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_frames(paths: &[PathBuf], bitdepth: Option<u8>) -> Result<Vec<PointCloud>> {
    paths
        .iter()
        .map(|p| read_ply(p, bitdepth).with_context(|| format!("reading {}", p.display())))
        .collect()
}

fn ply_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply")));
    files.sort();
    if files.is_empty() {
        bail!("no .ply files in {}", dir.display());
    }
    Ok(files)
}

fn training_set(args: &TrainArgs) -> Result<Vec<PointCloud>> {
    match (&args.input, args.synthetic) {
        (Some(dir), _) => read_frames(&ply_files(dir)?, None),
        (None, Some(n)) => Ok(ToyCorpus {
            clouds: n,
            bitdepth: args.synthetic_bitdepth,
            seed: args.common.seed,
            ..ToyCorpus::default()
        }
        .generate()?),
        (None, None) => bail!("pass --input DIR or --synthetic N"),
    }
}

fn recipe(args: &TrainArgs) -> AssetRecipe {
    let mut r = if args.toy { AssetRecipe::toy() } else { AssetRecipe::default() };
    r.coarse_threshold = args.common.coarse_threshold;
    r.pretrain.seed = args.common.seed;
    r.base.seed = args.common.seed + 1;
    if let Some(e) = args.epochs {
        r.pretrain.epochs = e;
        r.base.epochs = e;
    }
    r.ppn.blocks = args.ppn_blocks.unwrap_or(r.ppn.blocks);
    r.ppn.channels = args.ppn_channels.unwrap_or(r.ppn.channels);
    r.dar.blocks = args.dar_blocks.unwrap_or(r.dar.blocks);
    r.dar.channels = args.dar_channels.unwrap_or(r.dar.channels);
    r
}

fn history_csv(history: &[EpochStat]) -> String {
    let mut s = String::from("epoch,lr,train_loss,val_bpp\n");
    for h in history {
        s.push_str(&format!("{},{},{},{}\n", h.epoch, h.lr, h.train_loss, h.val_bpp));
    }
    s
}

fn pretrain_ppn_cmd(args: &TrainArgs) -> Result<()> {
    let clouds = training_set(args)?;
    let recipe = recipe(args);
    let (assets, history) = pretrain_assets(&clouds, &recipe)?;
    let dir = &args.common.assets_dir;
    std::fs::create_dir_all(dir)?;
    assets.save(&dir.join(ASSET_FILE))?;
    std::fs::write(dir.join("pretrain_ppn.csv"), history_csv(&history))?;
    write_json(&dir.join("recipe.json"), &recipe)?;
    let last = history.last().map(|h| h.val_bpp).unwrap_or(f64::NAN);
    println!("prior network trained on {} clouds, validation {last:.4} bpp", clouds.len());
    Ok(())
}

fn train_base_cmd(args: &TrainArgs) -> Result<()> {
    let clouds = training_set(args)?;
    let dir = &args.common.assets_dir;
    let path = dir.join(ASSET_FILE);
    let mut assets = Assets::load(&path).map_err(|e| AssetError(format!("cannot load {}: {e}", path.display())))?;
    let mut recipe = recipe(args);
    recipe.ppn = assets.ppn_config;
    recipe.dar = assets.dar_config;
    for with_ppn in [true, false] {
        let history = train_base_layer(&mut assets, &clouds, &recipe, with_ppn)?;
        let name = if with_ppn { "train_base.csv" } else { "train_base_no_ppn.csv" };
        std::fs::write(dir.join(name), history_csv(&history))?;
        let last = history.last().map(|h| h.val_bpp).unwrap_or(f64::NAN);
        println!("base layer (prior {}) validation {last:.4} bpp", if with_ppn { "on" } else { "off" });
    }
    assets.save(&path)?;
    Ok(())
}

fn encode_cmd(args: &EncodeArgs) -> Result<()> {
    if args.gopc_size == 0 {
        bail!("--gopc-size must be at least 1");
    }
    let codec = load_codec(&args.common.assets_dir)?;
    let cfg = codec_config(&args.common, &args.flags);
    let clouds = read_frames(&args.frames, args.bitdepth)?;
    let mut coded: Vec<PointCloud> = Vec::new();
    let mut manifest = Manifest {
        frames: Vec::new(),
        gopcs: Vec::new(),
    };
    for (path, pc) in args.frames.iter().zip(&clouds) {
        let parts = match args.subframe_points {
            Some(n) => kdtree_partition(pc, n)?,
            None => vec![pc.clone()],
        };
        let mut ids = Vec::new();
        for part in parts {
            ids.push((coded.len() / args.gopc_size, coded.len() % args.gopc_size));
            coded.push(part);
        }
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        manifest.frames.push(ManifestFrame {
            name,
            bitdepth: pc.bitdepth(),
            parts: ids,
        });
    }
    std::fs::create_dir_all(&args.out_dir)?;
    let mut gopcs = Vec::new();
    let mut timings = Vec::new();
    for (g, group) in coded.chunks(args.gopc_size).enumerate() {
        let enc = codec.encode(group, &cfg)?;
        let file = format!("gopc_{g:04}.hpcg");
        std::fs::write(args.out_dir.join(&file), &enc.bytes)?;
        eprintln!(
            "{file}: {} frames, {} points, {:.4} bpp (model {:.4}), epoch {:?}",
            group.len(),
            enc.report.points,
            enc.report.bpp,
            enc.report.model_bpp,
            enc.report.selected_epoch
        );
        manifest.gopcs.push(file.clone());
        timings.push(enc.report.timings.clone());
        let mut rate = enc.report;
        rate.timings = Timings::default();
        gopcs.push(GopcReport { file, rate });
    }
    let total_bits = gopcs.iter().map(|g| g.rate.total_bits).sum();
    let points = gopcs.iter().map(|g| g.rate.points).sum();
    let report = EncodeReport {
        total_bits,
        points,
        bpp: total_bits as f64 / points as f64,
        gopcs,
    };
    write_json(&args.out_dir.join(MANIFEST_FILE), &manifest)?;
    write_json(&args.out_dir.join("report.json"), &report)?;
    if let Some(p) = &args.timings {
        write_json(p, &timings)?;
    }
    println!("{} frames in {} groups: {:.4} bpp", clouds.len(), manifest.gopcs.len(), report.bpp);
    Ok(())
}

fn decode_cmd(args: &DecodeArgs) -> Result<()> {
    let codec = load_codec(&args.assets_dir)?;
    let format = if args.binary { PlyFormat::BinaryLittleEndian } else { PlyFormat::Ascii };
    std::fs::create_dir_all(&args.out_dir)?;
    if args.input.is_file() {
        let frames = codec.decode(&std::fs::read(&args.input)?, args.threads.max(1))?;
        for (k, f) in frames.iter().enumerate() {
            write_ply(f, &args.out_dir.join(format!("frame_{k:04}.ply")), format)?;
        }
        println!("{} frames", frames.len());
        return Ok(());
    }
    let text = std::fs::read_to_string(args.input.join(MANIFEST_FILE))
        .with_context(|| format!("reading manifest in {}", args.input.display()))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let groups = manifest
        .gopcs
        .iter()
        .map(|f| Ok(codec.decode(&std::fs::read(args.input.join(f))?, args.threads.max(1))?))
        .collect::<Result<Vec<_>>>()?;
    let part = |(g, k): (usize, usize)| -> Result<&PointCloud> {
        groups
            .get(g)
            .and_then(|fs| fs.get(k))
            .ok_or_else(|| Error::Corrupt(format!("manifest names missing frame {k} of group {g}")).into())
    };
    for frame in &manifest.frames {
        if args.no_merge && frame.parts.len() > 1 {
            for (i, &id) in frame.parts.iter().enumerate() {
                write_ply(part(id)?, &args.out_dir.join(format!("{}.part{i}.ply", frame.name)), format)?;
            }
            continue;
        }
        let mut coords = Vec::new();
        for &id in &frame.parts {
            coords.extend_from_slice(part(id)?.coords());
        }
        let pc = PointCloud::new(coords, frame.bitdepth)?;
        write_ply(&pc, &args.out_dir.join(format!("{}.ply", frame.name)), format)?;
    }
    println!("{} frames", manifest.frames.len());
    Ok(())
}

fn bench_frames(args: &BenchArgs) -> Result<Vec<PointCloud>> {
    if args.frames.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(args.common.seed);
        return Ok(ood_gopc(&mut rng, args.synthetic_frames, args.synthetic_bitdepth, args.synthetic_radius)?);
    }
    read_frames(&args.frames, None)
}

fn curve(enc: &Encoded) -> Result<TimeBppCurve> {
    let of = enc.overfit.as_ref().context("encode produced no overfitting trajectory")?;
    Ok(TimeBppCurve::from_trajectory(&of.trajectory, enc.report.timings.prior_s)?)
}

fn bench_cmd(args: &BenchArgs) -> Result<()> {
    let codec = load_codec(&args.common.assets_dir)?;
    let frames = bench_frames(args)?;
    let enc = codec.encode(&frames, &codec_config(&args.common, &args.flags))?;
    let c = curve(&enc)?;
    std::fs::write(&args.output, c.to_csv()).with_context(|| format!("writing {}", args.output.display()))?;
    let (t, b) = c.points()[c.points().len() - 1];
    println!("{} samples, final {b:.4} bpp after {t:.2}s", c.points().len());
    Ok(())
}

fn ablate_cmd(args: &BenchArgs) -> Result<()> {
    let codec = load_codec(&args.common.assets_dir)?;
    let frames = bench_frames(args)?;
    let full_cfg = codec_config(&args.common, &CodecFlags {
        no_smc: false,
        no_ppn: false,
        ..args.flags.clone()
    });
    let runs = [
        ("full", full_cfg),
        ("no_smc", CodecConfig { smc: false, ..full_cfg }),
        (
            "no_smc_no_ppn",
            CodecConfig {
                smc: false,
                ppn: false,
                ..full_cfg
            },
        ),
    ];
    let mut curves = Vec::new();
    let mut encoded = Vec::new();
    for (_, cfg) in &runs {
        let enc = codec.encode(&frames, cfg)?;
        curves.push(curve(&enc)?);
        encoded.push(enc);
    }
    let mut out = serde_json::Map::new();
    for (k, ((name, _), enc)) in runs.iter().zip(&encoded).enumerate() {
        let tb = if k == 0 { None } else { Some(tb_rate(&curves[k], &curves[0])?) };
        if let Some(tb) = tb {
            println!("{name}: TB-Rate vs full {tb:+.2}%");
        }
        let entry = AblationEntry {
            bpp: enc.report.bpp,
            model_bpp: enc.report.model_bpp,
            selected_epoch: enc.report.selected_epoch,
            encode_s: enc.report.timings.total_s,
            tb_rate_vs_full: tb,
            curve: curves[k].points().to_vec(),
        };
        out.insert(name.to_string(), serde_json::to_value(entry)?);
    }
    write_json(&args.output, &out)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::PretrainPpn(a) => pretrain_ppn_cmd(a),
        Command::TrainBase(a) => train_base_cmd(a),
        Command::Encode(a) => encode_cmd(a),
        Command::Decode(a) => decode_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
