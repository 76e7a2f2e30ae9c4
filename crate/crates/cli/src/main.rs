//! `roadfuse`: one subcommand per pipeline stage. Every run writes
//! `<out>.manifest` recording the resolved inputs, so it can be repeated.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use roadfuse::dataset::{augment_dataset, list_ids, load_dir, synth_dataset, SampleTriplet, SceneSpec};
use roadfuse::heatmap::render_heatmap;
use roadfuse::kv::KeyValues;
use roadfuse::metrics::{binarize, format_report, BinaryMask, TileResult};
use roadfuse::net::{init_params, load_checkpoint, predict, save_checkpoint, train, NetConfig, TrainOptions};
use roadfuse::raster::{RasterSpec, RasterTile};
use roadfuse::tensor::Tensor;
use roadfuse::trajectory::{parse_samples, GeoBounds, TrajectoryStore};
use roadfuse::verify::gradient_suite;
use roadfuse::Error;

/// Grid cell used to index trajectories before a render query.
const INDEX_CELL_DEG: f64 = 1e-3;

#[derive(Parser)]
#[command(name = "roadfuse", version, about = "Road extraction from aerial tiles and GPS trajectories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rasterize a trajectory CSV into an RFT1 heat-map.
    Render {
        #[arg(long)]
        csv: PathBuf,
        /// lon_l,lat_l,lon_u,lat_u
        #[arg(long)]
        bounds: String,
        /// H,W
        #[arg(long, default_value = "64,64")]
        size: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate synthetic image/heat-map/mask triplets.
    Synth {
        /// Scene spec file (key=value); defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a triplet directory (augmented x8) and save a checkpoint.
    Train {
        /// Network config file (key=value).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Overrides the config seed; drives init, augmentation and shuffling.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 2e-4)]
        lr: f64,
        /// Train on the stored triplets only.
        #[arg(long)]
        no_augment: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write `<id>.prob.rft` for every triplet in a directory.
    Predict {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground-truth masks.
    Eval {
        /// Directory of `<id>.prob.rft` maps or `<id>.msk.pgm` masks.
        #[arg(long)]
        pred: PathBuf,
        /// Directory holding `<id>.msk.pgm` ground truth.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f32,
        /// Report file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every operation, block and the network.
    Gradcheck {
        /// Network config; defaults to the small verification profile.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report file.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure with its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::MalformedRow { .. }
            | Error::RangeError { .. }
            | Error::Format(_)
            | Error::CorruptCheckpoint(_)
            | Error::NonSquare { .. }
            | Error::ShapeMismatch(_) => 2,
            Error::InvalidBounds(_) | Error::InvalidCellSize(_) | Error::Config(_) => 3,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

type Run<T> = Result<T, Failure>;

struct Manifest {
    kv: KeyValues,
    start: Instant,
}

impl Manifest {
    fn new(command: &str) -> Self {
        let mut kv = KeyValues::new();
        kv.set("command", command);
        kv.set("version", env!("CARGO_PKG_VERSION"));
        Manifest { kv, start: Instant::now() }
    }

    fn set(&mut self, key: &str, value: impl ToString) {
        self.kv.set(key, value);
    }

    fn path(&mut self, key: &str, p: &Path) {
        self.kv.set(key, p.display());
    }

    fn config(&mut self, cfg: &KeyValues) {
        for (k, v) in cfg.iter() {
            self.kv.set(&format!("config.{k}"), v);
        }
    }

    fn finish(mut self, out: &Path) -> Run<()> {
        self.kv.set("duration_ms", self.start.elapsed().as_millis());
        let mut name = out.as_os_str().to_owned();
        name.push(".manifest");
        self.kv.save(PathBuf::from(name))?;
        Ok(())
    }
}

fn parse_size(s: &str) -> Run<(usize, usize)> {
    let bad = || Failure { code: 3, message: format!("--size expects H,W, got `{s}`") };
    let (h, w) = s.split_once(',').ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

fn net_config(path: &Option<PathBuf>, fallback: NetConfig) -> Run<NetConfig> {
    Ok(match path {
        Some(p) => NetConfig::load(p)?,
        None => fallback,
    })
}

fn cmd_render(csv: &Path, bounds: &str, size: &str, out: &Path) -> Run<()> {
    let mut m = Manifest::new("render");
    let bounds = GeoBounds::parse(bounds)?;
    let (h, w) = parse_size(size)?;
    let spec = RasterSpec::new(bounds, h, w)?;
    let samples = parse_samples(fs::File::open(csv).map_err(Error::from)?)?;
    let n = samples.len();
    let store = TrajectoryStore::build(samples, INDEX_CELL_DEG)?;
    let tile = render_heatmap(&store, &spec)?;
    tile.save_rft(out)?;
    m.path("csv", csv);
    m.set("bounds", format!("{},{},{},{}", bounds.lon_l, bounds.lat_l, bounds.lon_u, bounds.lat_u));
    m.set("size", format!("{h},{w}"));
    m.set("samples", n);
    m.path("out", out);
    m.finish(out)
}

fn cmd_synth(config: &Option<PathBuf>, count: usize, seed: u64, out: &Path) -> Run<()> {
    let mut m = Manifest::new("synth");
    let spec = match config {
        Some(p) => SceneSpec::load(p)?,
        None => SceneSpec::default(),
    };
    let data = synth_dataset(&spec, count, seed)?;
    fs::create_dir_all(out).map_err(Error::from)?;
    let width = count.saturating_sub(1).to_string().len().max(4);
    for (i, t) in data.iter().enumerate() {
        t.save(out, &format!("s{i:0width$}"))?;
    }
    m.config(&spec.to_kv());
    m.set("count", count);
    m.set("seed", seed);
    m.path("out", out);
    m.finish(out)
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: &Option<PathBuf>,
    data: &Path,
    seed: Option<u64>,
    epochs: usize,
    batch: usize,
    lr: f64,
    no_augment: bool,
    out: &Path,
) -> Run<()> {
    let mut m = Manifest::new("train");
    let mut cfg = net_config(config, NetConfig::desk())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let seed = cfg.seed;
    let triplets: Vec<SampleTriplet> = load_dir(data)?.into_iter().map(|(_, t)| t).collect();
    let set = if no_augment { triplets } else { augment_dataset(&triplets, seed)? };
    let mut params = init_params(&cfg)?;
    let opts = TrainOptions { epochs, batch, lr, seed };
    let report = train(&set, &mut params, &cfg, &opts)?;
    for (e, l) in report.epoch_losses.iter().enumerate() {
        eprintln!("epoch {} loss {l:.6}", e + 1);
    }
    save_checkpoint(&params, out)?;
    m.config(&cfg.to_kv());
    m.path("data", data);
    m.set("seed", seed);
    m.set("epochs", epochs);
    m.set("batch", batch);
    m.set("lr", lr);
    m.set("augment", !no_augment);
    m.set("samples", set.len());
    if let Some(l) = report.epoch_losses.last() {
        m.set("final_loss", l);
    }
    m.path("out", out);
    m.finish(out)
}

fn load_inputs(dir: &Path, id: &str) -> Run<(Tensor, Tensor, usize, usize)> {
    let [img, trj, _] = SampleTriplet::paths(dir, id);
    let img = RasterTile::load_rft(img)?;
    let trj = RasterTile::load_rft(trj)?;
    let (h, w) = (img.height(), img.width());
    if (trj.height(), trj.width()) != (h, w) {
        return Err(Error::ShapeMismatch(format!("{id}: image {h}x{w} vs heat-map {}x{}", trj.height(), trj.width())).into());
    }
    let a = Tensor::new(&[1, img.channels(), h, w], img.to_planar())?;
    let b = Tensor::new(&[1, trj.channels(), h, w], trj.to_planar())?;
    Ok((a, b, h, w))
}

fn cmd_predict(config: &Option<PathBuf>, ckpt: &Path, data: &Path, out: &Path) -> Run<()> {
    let mut m = Manifest::new("predict");
    let cfg = net_config(config, NetConfig::desk())?;
    let params = load_checkpoint(ckpt, &cfg)?;
    fs::create_dir_all(out).map_err(Error::from)?;
    let ids = list_ids(data)?;
    for id in &ids {
        let (a, b, h, w) = load_inputs(data, id)?;
        let y = predict(&params, &cfg, &a, Some(&b))?;
        RasterTile::new(h, w, 1, y.into_data())?.save_rft(out.join(format!("{id}.prob.rft")))?;
    }
    m.config(&cfg.to_kv());
    m.path("ckpt", ckpt);
    m.path("data", data);
    m.set("tiles", ids.len());
    m.path("out", out);
    m.finish(out)
}

fn load_prediction(dir: &Path, id: &str, threshold: f32) -> Run<BinaryMask> {
    let prob = dir.join(format!("{id}.prob.rft"));
    if prob.exists() {
        return Ok(binarize(&RasterTile::load_rft(prob)?, threshold)?);
    }
    let mask = dir.join(format!("{id}.msk.pgm"));
    if mask.exists() {
        return Ok(BinaryMask::load_pgm(mask)?);
    }
    Err(Error::Format(format!("no prediction for tile `{id}` in {}", dir.display())).into())
}

fn cmd_eval(pred: &Path, gt: &Path, threshold: f32, out: &Path) -> Run<()> {
    let mut m = Manifest::new("eval");
    let ids = list_ids(gt)?;
    let mut results = Vec::with_capacity(ids.len());
    for id in &ids {
        let p = load_prediction(pred, id, threshold)?;
        let t = BinaryMask::load_pgm(gt.join(format!("{id}.msk.pgm")))?;
        results.push(TileResult::new(id.as_str(), &p, &t)?);
    }
    let report = format_report(&results)?;
    print!("{report}");
    fs::write(out, &report).map_err(Error::from)?;
    m.path("pred", pred);
    m.path("gt", gt);
    m.set("threshold", threshold);
    m.set("tiles", ids.len());
    m.path("out", out);
    m.finish(out)
}

fn cmd_gradcheck(config: &Option<PathBuf>, samples: usize, seed: u64, out: &Path) -> Run<()> {
    let mut m = Manifest::new("gradcheck");
    let cfg = net_config(config, NetConfig::gradcheck())?;
    let results = gradient_suite(&cfg, samples, seed)?;
    let mut text = String::new();
    let mut worst = 0.0f64;
    let mut failed = 0;
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        text.push_str(&format!(
            "{:<28} max_rel_error={:.3e} tol={:.0e} checked={} {verdict}\n",
            r.name, r.report.max_rel_error, r.tolerance, r.report.checked
        ));
        worst = worst.max(r.report.max_rel_error / r.tolerance);
        failed += !r.passed() as usize;
    }
    let max_rel = results.iter().map(|r| r.report.max_rel_error).fold(0.0, f64::max);
    text.push_str(&format!("max relative error {max_rel:.3e}; {failed} of {} checks failed\n", results.len()));
    print!("{text}");
    fs::write(out, &text).map_err(Error::from)?;
    m.config(&cfg.to_kv());
    m.set("samples", samples);
    m.set("seed", seed);
    m.set("failed", failed);
    m.set("worst_error_over_tolerance", worst);
    m.path("out", out);
    m.finish(out)?;
    if failed > 0 {
        return Err(Failure { code: 4, message: format!("{failed} gradient checks exceeded tolerance") });
    }
    Ok(())
}

fn run(cli: Cli) -> Run<()> {
    match cli.command {
        Command::Render { csv, bounds, size, out } => cmd_render(&csv, &bounds, &size, &out),
        Command::Synth { config, count, seed, out } => cmd_synth(&config, count, seed, &out),
        Command::Train { config, data, seed, epochs, batch, lr, no_augment, out } => {
            cmd_train(&config, &data, seed, epochs, batch, lr, no_augment, &out)
        }
        Command::Predict { config, ckpt, data, out } => cmd_predict(&config, &ckpt, &data, &out),
        Command::Eval { pred, gt, threshold, out } => cmd_eval(&pred, &gt, threshold, &out),
        Command::Gradcheck { config, samples, seed, out } => cmd_gradcheck(&config, samples, seed, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
