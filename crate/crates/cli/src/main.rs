use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use qsilk::aqclip::{aqclip_step, AqClipConfig, AqClipMode, AttentionSource, StepSession};
use qsilk::confidence::{AttentionProbe, EntropyMap};
use qsilk::harness::{self, Pipeline, SimConfig, Stage, SynthSpec};
use qsilk::microclamp::{micro_clamp_report, ClampMode, MicroClampConfig};
use qsilk::npy;
use qsilk::presets::Preset;
use qsilk::session::{SessionLock, MAGIC};
use qsilk::stats::QuantilePair;
use qsilk::{Dtype, Error, LatentTensor, Shape};

#[derive(Parser)]
#[command(
    name = "qsilk",
    version,
    about = "Latent stabilizers for iterative samplers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-sample quantile clamp of a BxCxHxW latent
    Microclamp(MicroclampArgs),
    /// One adaptive tile-clip step, optionally persisting EMA state in a session file
    Aqclip(AqclipArgs),
    /// Run the synthetic stability loop and write a report plus per-step CSV
    Simulate(SimulateArgs),
    /// Time identity, microclamp and aqclip-lite on a synthetic latent
    Bench(BenchArgs),
    /// Describe an NPY latent or a session file
    Info { path: PathBuf },
}

#[derive(Args)]
struct MicroclampArgs {
    input: PathBuf,
    output: PathBuf,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    q_low: Option<f64>,
    #[arg(long)]
    q_high: Option<f64>,
    /// hard | tanh
    #[arg(long)]
    mode: Option<ClampMode>,
    #[arg(long)]
    alpha: Option<f32>,
    #[arg(long)]
    eps: Option<f32>,
    /// Output dtype (f32 | f16); defaults to the input's
    #[arg(long)]
    dtype: Option<Dtype>,
}

#[derive(Args)]
struct AqclipArgs {
    input: PathBuf,
    output: PathBuf,
    /// Session sidecar carrying EMA state between calls; created if absent
    #[arg(long)]
    session: Option<PathBuf>,
    /// Discard any stored session state before this step
    #[arg(long)]
    reset_session: bool,
    #[arg(long)]
    preset: Option<String>,
    /// With a preset, run its micro-clamp after the clip instead of before
    #[arg(long)]
    aqclip_first: bool,
    /// lite | attn
    #[arg(long)]
    mode: Option<AqClipMode>,
    #[arg(long)]
    tile: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    alpha: Option<f32>,
    #[arg(long)]
    ema_beta: Option<f32>,
    #[arg(long)]
    eps: Option<f32>,
    #[arg(long)]
    invert_confidence: bool,
    /// Query array, (n, d) or (heads, n, d); repeat once per sample or give one for the batch
    #[arg(long)]
    probe_q: Vec<PathBuf>,
    /// Key array matching --probe-q
    #[arg(long)]
    probe_k: Vec<PathBuf>,
    /// Query token layout HxW; defaults to a square grid
    #[arg(long)]
    token_grid: Option<String>,
    /// Precomputed entropy map (h, w); repeat once per sample or give one for the batch
    #[arg(long)]
    entropy_map: Vec<PathBuf>,
    #[arg(long, default_value_t = 1)]
    head_stride: usize,
    #[arg(long, default_value_t = 1)]
    token_stride: usize,
    #[arg(long)]
    dtype: Option<Dtype>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value = "paper-default")]
    preset: String,
    #[arg(long, default_value_t = 30)]
    steps: usize,
    #[arg(long, default_value_t = 23132)]
    seed: u64,
    #[arg(long, default_value = "sim-out")]
    out_dir: PathBuf,
    #[arg(long)]
    aqclip_first: bool,
    /// Drive the clip with the synthetic attention probe instead of the gradient proxy
    #[arg(long)]
    attn: bool,
    /// Override the preset's EMA coefficient
    #[arg(long)]
    ema_beta: Option<f32>,
    /// Latent shape BxCxHxW
    #[arg(long, default_value = "1x4x64x64")]
    shape: Shape,
    /// Fraction of the previous output carried into the next input (1 accumulates, 0 re-noises the anchor)
    #[arg(long, default_value_t = 1.0)]
    carry: f32,
    /// Add a runtime_ms column to the CSV (makes it vary between runs)
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value = "1x4x128x128")]
    shape: Shape,
    #[arg(long, default_value_t = 20)]
    iters: usize,
    #[arg(long, default_value = "bench-out")]
    out_dir: PathBuf,
    /// identity | microclamp | aqclip-lite | all
    #[arg(long, default_value = "all")]
    pipeline: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("qsilk: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qsilk: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for bad values or geometry, 1 for anything environmental.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(err) if err.is_validation() => 2,
        _ => 1,
    }
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("QSILK_THREADS") else {
        return Ok(());
    };
    let n: usize = match raw.trim().parse() {
        Ok(n) if n >= 1 => n,
        _ => bail!("QSILK_THREADS must be a positive integer, got {raw:?}"),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()?;
    Ok(())
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Microclamp(a) => cmd_microclamp(a),
        Command::Aqclip(a) => cmd_aqclip(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Info { path } => cmd_info(&path),
    }
}

fn preset(name: Option<&str>) -> Result<Option<Preset>, Error> {
    name.map(Preset::by_name).transpose()
}

fn microclamp_config(
    a: &MicroclampArgs,
    base: MicroClampConfig,
) -> Result<MicroClampConfig, Error> {
    let quantiles = QuantilePair::new(
        a.q_low.unwrap_or(base.quantiles.low()),
        a.q_high.unwrap_or(base.quantiles.high()),
    )?;
    let cfg = MicroClampConfig {
        quantiles,
        mode: a.mode.unwrap_or(base.mode),
        alpha: a.alpha.unwrap_or(base.alpha),
        eps: a.eps.unwrap_or(base.eps),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn save(t: &LatentTensor, path: &Path, dtype: Option<Dtype>) -> anyhow::Result<()> {
    npy::save_tensor(t, path, dtype.unwrap_or(t.source_dtype()))?;
    Ok(())
}

fn cmd_microclamp(a: MicroclampArgs) -> anyhow::Result<()> {
    let preset = preset(a.preset.as_deref())?;
    let base = match &preset {
        Some(p) => p.microclamp,
        None => Some(MicroClampConfig::default()),
    };
    // validate flags before touching the input
    let cfg = base.map(|b| microclamp_config(&a, b)).transpose()?;
    let x = npy::load_tensor(&a.input)?;
    let Some(cfg) = cfg else {
        save(&x, &a.output, a.dtype)?;
        println!(
            "passthrough (preset off); modified 0/{} elements",
            x.shape().len()
        );
        return Ok(());
    };
    let report = micro_clamp_report(&x, &cfg)?;
    save(&report.tensor, &a.output, a.dtype)?;
    let corridors: Vec<String> = report
        .corridors
        .iter()
        .enumerate()
        .map(|(b, c)| format!("b{b}=[{}, {}]", c.lo, c.hi))
        .collect();
    println!(
        "modified {}/{} elements; corridor {}",
        report.modified(),
        x.shape().len(),
        corridors.join(" ")
    );
    Ok(())
}

fn aqclip_config(a: &AqclipArgs, base: AqClipConfig) -> Result<AqClipConfig, Error> {
    let cfg = AqClipConfig {
        tile: a.tile.unwrap_or(base.tile),
        stride: a.stride.unwrap_or(base.stride),
        alpha: a.alpha.unwrap_or(base.alpha),
        ema_beta: a.ema_beta.unwrap_or(base.ema_beta),
        eps: a.eps.unwrap_or(base.eps),
        mode: a.mode.unwrap_or(base.mode),
        invert_confidence: a.invert_confidence || base.invert_confidence,
        ..base
    };
    cfg.validate()?;
    Ok(cfg)
}

fn parse_grid(s: &str) -> Result<(usize, usize), Error> {
    let bad = || Error::Invalid(format!("token grid must look like HxW, got {s:?}"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?))
}

fn attention_source(a: &AqclipArgs) -> anyhow::Result<Option<AttentionSource>> {
    let has_probe = !a.probe_q.is_empty() || !a.probe_k.is_empty();
    let has_maps = !a.entropy_map.is_empty();
    if has_probe && has_maps {
        return Err(Error::Invalid(
            "give either --probe-q/--probe-k or --entropy-map, not both".into(),
        )
        .into());
    }
    if has_maps {
        let maps = a
            .entropy_map
            .iter()
            .map(|p| EntropyMap::from_array(&npy::read_array(p)?))
            .collect::<Result<Vec<_>, Error>>()?;
        return Ok(Some(AttentionSource::EntropyMaps(maps)));
    }
    if !has_probe {
        return Ok(None);
    }
    if a.probe_q.len() != a.probe_k.len() {
        return Err(Error::Invalid(format!(
            "got {} --probe-q but {} --probe-k",
            a.probe_q.len(),
            a.probe_k.len()
        ))
        .into());
    }
    let mut probes = Vec::with_capacity(a.probe_q.len());
    for (qp, kp) in a.probe_q.iter().zip(&a.probe_k) {
        let q = npy::read_array(qp)?;
        let k = npy::read_array(kp)?;
        let n_q = q.shape.get(q.rank().wrapping_sub(2)).copied().unwrap_or(0);
        let grid = match &a.token_grid {
            Some(s) => parse_grid(s)?,
            None => {
                let side = (n_q as f64).sqrt().round() as usize;
                if side * side != n_q {
                    return Err(Error::Invalid(format!(
                        "{n_q} query tokens do not form a square grid; pass --token-grid HxW"
                    ))
                    .into());
                }
                (side, side)
            }
        };
        let probe = AttentionProbe::from_arrays(&q, &k, grid)?
            .with_subsample(a.head_stride, a.token_stride)?;
        probes.push(probe);
    }
    Ok(Some(AttentionSource::Probes(probes)))
}

fn cmd_aqclip(a: AqclipArgs) -> anyhow::Result<()> {
    let preset = preset(a.preset.as_deref())?;
    let (clamp, base) = match &preset {
        Some(p) => (p.microclamp, p.aqclip),
        None => (None, Some(AqClipConfig::default())),
    };
    let cfg = base.map(|b| aqclip_config(&a, b)).transpose()?;
    let attention = attention_source(&a)?;
    if let Some(cfg) = &cfg {
        match (cfg.mode, &attention) {
            (AqClipMode::Attn, None) => {
                return Err(Error::Invalid(
                    "--mode attn requires --probe-q/--probe-k or --entropy-map".into(),
                )
                .into())
            }
            (AqClipMode::Lite, Some(_)) => {
                return Err(
                    Error::Invalid("attention inputs given but --mode is lite".into()).into(),
                )
            }
            _ => {}
        }
    }

    let x = npy::load_tensor(&a.input)?;
    let Some(cfg) = cfg else {
        let out = match clamp {
            Some(m) => qsilk::microclamp::micro_clamp(&x, &m)?,
            None => x.clone(),
        };
        save(&out, &a.output, a.dtype)?;
        println!("passthrough (no aqclip stage in preset)");
        return Ok(());
    };

    let _lock = a.session.as_ref().map(SessionLock::acquire).transpose()?;
    let mut session = match (&a.session, a.reset_session) {
        (Some(path), false) => StepSession::load_or_new(path)?,
        _ => StepSession::new(),
    };

    let mut z = x;
    if let (Some(m), false) = (&clamp, a.aqclip_first) {
        z = qsilk::microclamp::micro_clamp(&z, m)?;
    }
    let step = aqclip_step(&z, &cfg, &mut session, attention.as_ref())?;
    let mut out = step.latent;
    if let (Some(m), true) = (&clamp, a.aqclip_first) {
        out = qsilk::microclamp::micro_clamp(&out, m)?;
    }

    save(&out, &a.output, a.dtype)?;
    if let Some(path) = &a.session {
        session.save_atomic(path)?;
    }
    let n = step.smoothed.lo.len() as f64;
    let mean = |v: &[f32]| v.iter().map(|&x| x as f64).sum::<f64>() / n;
    println!(
        "step {} tiles {}x{}x{} mean corridor [{:.6}, {:.6}]",
        session.step_index(),
        step.smoothed.batch,
        step.smoothed.tiles_y,
        step.smoothed.tiles_x,
        mean(&step.smoothed.lo),
        mean(&step.smoothed.hi)
    );
    Ok(())
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn create_file(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn cmd_simulate(a: SimulateArgs) -> anyhow::Result<()> {
    let preset = Preset::by_name(&a.preset)?;
    if a.steps == 0 {
        return Err(Error::Invalid("--steps must be >= 1".into()).into());
    }
    let spec = SynthSpec::desk(a.seed).with_shape(a.shape);
    let mut stages = Vec::new();
    if let Some(m) = preset.microclamp {
        stages.push(Stage::MicroClamp(m));
    }
    if let Some(mut c) = preset.aqclip {
        if let Some(beta) = a.ema_beta {
            c.ema_beta = beta;
            c.validate()?;
        }
        stages.push(if a.attn {
            Stage::AqClipAttn(c)
        } else {
            Stage::AqClipLite(c)
        });
    }
    if a.aqclip_first {
        stages.reverse();
    }
    let mut pipeline = Pipeline::new(stages);
    let sim = SimConfig {
        steps: a.steps,
        carry: a.carry,
        ..Default::default()
    };
    let run = harness::run_sim(&spec, &mut pipeline, &sim)?;

    create_dir(&a.out_dir)?;
    let csv_path = a.out_dir.join("steps.csv");
    harness::write_steps_csv(create_file(&csv_path)?, &run.steps, a.timing)?;
    let mut report = format!(
        "preset            {}\nseed              {}\nshape             {}\n",
        preset.name, a.seed, a.shape
    );
    report.push_str(&run.report.to_string());
    let report_path = a.out_dir.join("report.txt");
    fs::write(&report_path, &report)
        .with_context(|| format!("writing {}", report_path.display()))?;
    print!("{report}");
    if a.timing {
        println!("runtime_ms        {:.4}", run.report.runtime_ms);
        println!("throughput_mp_s   {:.2}", run.report.throughput_mp_s);
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> anyhow::Result<()> {
    let all = ["identity", "microclamp", "aqclip-lite"];
    let names: Vec<&str> = match a.pipeline.as_str() {
        "all" => all.to_vec(),
        p if all.contains(&p) => vec![p],
        other => {
            return Err(Error::Invalid(format!(
                "unknown bench pipeline {other:?}; available: all, {}",
                all.join(", ")
            ))
            .into())
        }
    };
    let mut reports = Vec::new();
    for name in names {
        let mut pipeline = match name {
            "identity" => Pipeline::identity(),
            "microclamp" => Pipeline::new(vec![Stage::MicroClamp(MicroClampConfig::default())]),
            _ => Pipeline::new(vec![Stage::AqClipLite(AqClipConfig::default())]),
        };
        let r = harness::bench(a.shape, &mut pipeline, a.iters)?;
        println!("{r}");
        reports.push(r);
    }
    let ms = |n: &str| {
        reports
            .iter()
            .find(|r| r.pipeline == n)
            .map(|r| r.median_ms)
    };
    if let (Some(base), Some(aq)) = (ms("identity"), ms("aqclip-lite")) {
        println!(
            "aqclip-lite / identity  {:.1}x",
            aq / base.max(f64::MIN_POSITIVE)
        );
    }
    create_dir(&a.out_dir)?;
    harness::write_bench_csv(create_file(&a.out_dir.join("bench.csv"))?, &reports)?;
    Ok(())
}

fn cmd_info(path: &Path) -> anyhow::Result<()> {
    let mut head = [0u8; 5];
    let is_session = {
        use std::io::Read;
        let mut f = File::open(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        f.read(&mut head).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })? == 5
            && &head == MAGIC
    };
    if is_session {
        let s = StepSession::load(path)?;
        println!("session       {}", path.display());
        println!("step_index    {}", s.step_index());
        match s.geometry() {
            Some(g) => println!(
                "geometry      batch {} {}x{} tile {} stride {}",
                g.batch, g.height, g.width, g.tile, g.stride
            ),
            None => println!("geometry      unbound"),
        }
        if let Some(fp) = s.fingerprint() {
            println!("fingerprint   {fp:016x}");
        }
        return Ok(());
    }
    let arr = npy::read_array(path)?;
    let n = arr.data.len().max(1) as f64;
    let mean = arr.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let std = (arr
        .data
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let (lo, hi) = arr
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    println!("array         {}", path.display());
    println!("dtype         {}", arr.dtype.descr());
    println!("shape         {:?}", arr.shape);
    println!("min/max       {lo} {hi}");
    println!("mean/std      {mean:.6} {std:.6}");
    Ok(())
}
