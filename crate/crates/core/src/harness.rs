//! Synthetic experiments: generated latents with texture and injected
//! spikes, a multi-step loop that re-noises the latent between pipeline
//! applications, stability metrics, and a throughput benchmark.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::aqclip::{aqclip_step, AqClipConfig, AttentionSource, StepOutput, StepSession};
use crate::confidence::{gradient_magnitude, AttentionProbe};
use crate::error::{Error, Result};
use crate::microclamp::{micro_clamp, MicroClampConfig};
use crate::presets::Preset;
use crate::tensor::{LatentTensor, Shape};
use crate::tiler::{plan_grid, TileGrid};

/// `amplitude · sin(2π·(freq_y·y/H + freq_x·x/W) + phase)`; frequencies in cycles per plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sinusoid {
    pub freq_y: f32,
    pub freq_x: f32,
    pub amplitude: f32,
    pub phase: f32,
}

/// An additive outlier of `magnitude` noise-sigmas at one element.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spike {
    pub batch: usize,
    pub channel: usize,
    pub y: usize,
    pub x: usize,
    pub magnitude: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub shape: Shape,
    pub texture: Vec<Sinusoid>,
    pub noise_sigma: f32,
    pub spikes: Vec<Spike>,
    pub seed: u64,
}

impl SynthSpec {
    /// 1×4×64×64, unit noise, two sinusoids and one +50σ spike.
    pub fn desk(seed: u64) -> SynthSpec {
        SynthSpec {
            shape: Shape::new(1, 4, 64, 64),
            texture: vec![
                Sinusoid {
                    freq_y: 3.0,
                    freq_x: 5.0,
                    amplitude: 0.5,
                    phase: 0.0,
                },
                Sinusoid {
                    freq_y: 11.0,
                    freq_x: -7.0,
                    amplitude: 0.25,
                    phase: 1.0,
                },
            ],
            noise_sigma: 1.0,
            spikes: vec![Spike {
                batch: 0,
                channel: 1,
                y: 37,
                x: 22,
                magnitude: 50.0,
            }],
            seed,
        }
    }

    /// Same spec over a different shape, keeping the spikes that still fit.
    pub fn with_shape(&self, shape: Shape) -> SynthSpec {
        let spikes = self
            .spikes
            .iter()
            .filter(|s| {
                s.batch < shape.batch
                    && s.channel < shape.channels
                    && s.y < shape.height
                    && s.x < shape.width
            })
            .cloned()
            .collect();
        SynthSpec {
            shape,
            spikes,
            ..self.clone()
        }
    }

    /// Size of one σ unit for spike magnitudes.
    pub fn sigma_unit(&self) -> f32 {
        if self.noise_sigma > 0.0 {
            self.noise_sigma
        } else {
            1.0
        }
    }

    fn check_spikes(&self) -> Result<()> {
        let s = self.shape;
        for spike in &self.spikes {
            if spike.batch >= s.batch
                || spike.channel >= s.channels
                || spike.y >= s.height
                || spike.x >= s.width
            {
                return Err(Error::invalid(format!(
                    "spike at ({}, {}, {}, {}) outside {s}",
                    spike.batch, spike.channel, spike.y, spike.x
                )));
            }
        }
        Ok(())
    }

    fn add_spikes(&self, data: &mut [f32]) {
        let unit = self.sigma_unit();
        for spike in &self.spikes {
            data[self
                .shape
                .offset(spike.batch, spike.channel, spike.y, spike.x)] += spike.magnitude * unit;
        }
    }
}

/// Gaussian noise plus sinusoidal texture plus spikes. Deterministic in the seed.
pub fn synth_latent(spec: &SynthSpec) -> Result<LatentTensor> {
    spec.check_spikes()?;
    let shape = spec.shape;
    if shape.dims().contains(&0) {
        return Err(Error::invalid(format!(
            "every dimension must be >= 1, got {shape}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tau = std::f64::consts::TAU;
    let mut data = Vec::with_capacity(shape.len());
    for i in 0..shape.len() {
        let [_, c, y, x] = shape.unravel(i);
        let n: f64 = StandardNormal.sample(&mut rng);
        let mut v = spec.noise_sigma as f64 * n;
        for s in &spec.texture {
            let arg = tau
                * (s.freq_y as f64 * y as f64 / shape.height as f64
                    + s.freq_x as f64 * x as f64 / shape.width as f64)
                + s.phase as f64
                + 0.5 * c as f64;
            v += s.amplitude as f64 * arg.sin();
        }
        data.push(v as f32);
    }
    spec.add_spikes(&mut data);
    LatentTensor::new(shape, data)
}

/// One stage of a stabilization pipeline.
#[derive(Clone, Debug, PartialEq)]
pub enum Stage {
    MicroClamp(MicroClampConfig),
    AqClipLite(AqClipConfig),
    /// Attention mode fed by [`synthetic_probe`].
    AqClipAttn(AqClipConfig),
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::MicroClamp(_) => "microclamp",
            Stage::AqClipLite(_) => "aqclip-lite",
            Stage::AqClipAttn(_) => "aqclip-attn",
        }
    }

    fn aqclip(&self) -> Option<&AqClipConfig> {
        match self {
            Stage::AqClipLite(c) | Stage::AqClipAttn(c) => Some(c),
            Stage::MicroClamp(_) => None,
        }
    }
}

/// Ordered stages plus one EMA session per AQClip stage. An empty pipeline is the identity.
#[derive(Clone, Debug, Default)]
pub struct Pipeline {
    stages: Vec<Stage>,
    sessions: Vec<StepSession>,
}

impl Pipeline {
    pub fn new(stages: Vec<Stage>) -> Pipeline {
        let sessions = vec![StepSession::new(); stages.len()];
        Pipeline { stages, sessions }
    }

    pub fn identity() -> Pipeline {
        Pipeline::default()
    }

    /// Micro-clamp then AQClip (or the reverse when `aqclip_first`).
    pub fn from_preset(preset: &Preset, aqclip_first: bool) -> Pipeline {
        let mut stages = Vec::new();
        if let Some(m) = preset.microclamp {
            stages.push(Stage::MicroClamp(m));
        }
        if let Some(a) = preset.aqclip {
            stages.push(Stage::AqClipLite(a));
        }
        if aqclip_first {
            stages.reverse();
        }
        Pipeline::new(stages)
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn name(&self) -> String {
        if self.stages.is_empty() {
            "identity".into()
        } else {
            self.stages
                .iter()
                .map(Stage::name)
                .collect::<Vec<_>>()
                .join("+")
        }
    }

    fn first_aqclip(&self) -> Option<&AqClipConfig> {
        self.stages.iter().find_map(Stage::aqclip)
    }

    /// Applies every stage once. Returns the output and the first AQClip stage's step record.
    pub fn apply(&mut self, z: &LatentTensor) -> Result<(LatentTensor, Option<StepOutput>)> {
        let mut cur = z.clone();
        let mut record = None;
        for (stage, session) in self.stages.iter().zip(self.sessions.iter_mut()) {
            let step = match stage {
                Stage::MicroClamp(cfg) => {
                    cur = micro_clamp(&cur, cfg)?;
                    continue;
                }
                Stage::AqClipLite(cfg) => aqclip_step(&cur, cfg, session, None)?,
                Stage::AqClipAttn(cfg) => {
                    let probes = (0..cur.shape().batch)
                        .map(|b| synthetic_probe(&cur, b, SYNTH_TOKEN_CELL))
                        .collect::<Result<Vec<_>>>()?;
                    let source = AttentionSource::Probes(probes);
                    aqclip_step(
                        &cur,
                        &AqClipConfig {
                            mode: crate::aqclip::AqClipMode::Attn,
                            ..*cfg
                        },
                        session,
                        Some(&source),
                    )?
                }
            };
            cur = step.latent.clone();
            if record.is_none() {
                record = Some(step);
            }
        }
        Ok((cur, record))
    }
}

const SYNTH_TOKEN_CELL: usize = 4;
const SYNTH_KEYS: usize = 16;
const SYNTH_SHARPNESS: f64 = 12.0;

/// Builds a one-head attention probe whose per-query entropy is low where
/// sample `b` has strong local texture and high where it is flat.
///
/// Tokens are `cell × cell` blocks of the plane. Each query is a scalar
/// proportional to its block's mean gradient magnitude; keys are spread
/// evenly over `[−1, 1]`, so larger queries give peakier softmax rows.
pub fn synthetic_probe(z: &LatentTensor, b: usize, cell: usize) -> Result<AttentionProbe> {
    let shape = z.shape();
    if cell == 0 || b >= shape.batch {
        return Err(Error::invalid(
            "synthetic probe needs cell >= 1 and a valid sample",
        ));
    }
    let (ht, wt) = ((shape.height / cell).max(1), (shape.width / cell).max(1));
    let mut mean = vec![0.0f64; shape.plane_len()];
    for c in 0..shape.channels {
        for (m, &v) in mean.iter_mut().zip(z.plane(b, c)) {
            *m += v as f64 / shape.channels as f64;
        }
    }
    let grad = gradient_magnitude(&mean, shape.height, shape.width);
    let mut energy = vec![0.0f64; ht * wt];
    for y in 0..shape.height {
        let ty = (y / cell).min(ht - 1);
        for x in 0..shape.width {
            let tx = (x / cell).min(wt - 1);
            energy[ty * wt + tx] += grad[y * shape.width + x];
        }
    }
    let max = energy.iter().copied().fold(0.0, f64::max);
    let queries: Vec<f32> = energy
        .iter()
        .map(|&e| {
            if max > 0.0 {
                (SYNTH_SHARPNESS * e / max) as f32
            } else {
                0.0
            }
        })
        .collect();
    let keys: Vec<f32> = (0..SYNTH_KEYS)
        .map(|j| (-1.0 + 2.0 * j as f64 / (SYNTH_KEYS - 1) as f64) as f32)
        .collect();
    AttentionProbe::new(1, ht * wt, SYNTH_KEYS, 1, queries, keys, (ht, wt))
}

/// Loop parameters for [`run_sim`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimConfig {
    pub steps: usize,
    /// Noise added before step `t` has standard deviation `step_noise · decay^t`.
    pub step_noise: f32,
    pub decay: f32,
    /// How much of the previous step's output carries into the next input:
    /// `input_t = anchor + carry·(output_{t−1} − anchor) + noise_t + spikes`,
    /// where the anchor is the spike-free synthesized latent and
    /// `output_{−1} = anchor`. 1 accumulates; 0 re-noises the anchor every step.
    pub carry: f32,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            steps: 30,
            step_noise: 0.5,
            decay: 0.9,
            carry: 1.0,
        }
    }
}

/// Metrics for one step of the loop.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub noise_sigma: f32,
    pub spike_suppression: f64,
    pub texture_corr: f64,
    pub seam_score: f64,
    /// Mean smoothed corridor bounds of the first AQClip stage (NaN-free; 0 without one).
    pub mean_lo: f64,
    pub mean_hi: f64,
    pub runtime_ms: f64,
}

/// Aggregate over all steps: worst-case suppression, texture correlation and
/// seam score, plus corridor flicker and timing.
#[derive(Clone, Debug, PartialEq)]
pub struct StabilityReport {
    pub pipeline: String,
    pub steps: usize,
    pub spike_suppression: f64,
    pub texture_corr: f64,
    pub seam_score: f64,
    pub corridor_flicker: f64,
    pub runtime_ms: f64,
    pub throughput_mp_s: f64,
}

#[derive(Clone, Debug)]
pub struct SimRun {
    pub report: StabilityReport,
    pub steps: Vec<StepMetrics>,
}

/// `max |out|` over `max |in|` at the spike sites; 1 when there are none.
pub fn spike_suppression(input: &LatentTensor, output: &LatentTensor, spikes: &[Spike]) -> f64 {
    let shape = input.shape();
    let site_max = |t: &LatentTensor| {
        spikes
            .iter()
            .map(|s| t.data()[shape.offset(s.batch, s.channel, s.y, s.x)].abs() as f64)
            .fold(0.0, f64::max)
    };
    let before = site_max(input);
    if spikes.is_empty() || before == 0.0 {
        1.0
    } else {
        site_max(output) / before
    }
}

/// Elements farther than 2 pixels (Chebyshev, same sample, any channel) from every spike.
pub fn spike_free_mask(shape: Shape, spikes: &[Spike]) -> Vec<bool> {
    (0..shape.len())
        .map(|i| {
            let [b, _, y, x] = shape.unravel(i);
            spikes
                .iter()
                .all(|s| s.batch != b || s.y.abs_diff(y).max(s.x.abs_diff(x)) >= 3)
        })
        .collect()
}

/// Pearson correlation of `a` and `b` over the masked elements.
/// Two constant series count as perfectly correlated only when equal.
pub fn pearson(a: &[f32], b: &[f32], mask: &[bool]) -> f64 {
    let pairs = || {
        a.iter()
            .zip(b)
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|((&x, &y), _)| (x as f64, y as f64))
    };
    let n = pairs().count();
    if n == 0 {
        return 1.0;
    }
    let (sa, sb) = pairs().fold((0.0, 0.0), |(sa, sb), (x, y)| (sa + x, sb + y));
    let (ma, mb) = (sa / n as f64, sb / n as f64);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in pairs() {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        let same = pairs().all(|(x, y)| x == y);
        return if same { 1.0 } else { 0.0 };
    }
    (cov / (va * vb).sqrt()).clamp(-1.0, 1.0)
}

/// Ratio of the largest jump in `output − input` across tile boundaries to
/// the largest jump between neighbours inside the same set of tiles.
///
/// A neighbour pair straddles a boundary when its two pixels are covered by
/// different sets of tiles. Zero when nothing changed.
#[allow(clippy::needless_range_loop)]
pub fn seam_score(input: &LatentTensor, output: &LatentTensor, grid: &TileGrid) -> f64 {
    let shape = input.shape();
    let (t, py, px) = (grid.tile(), grid.positions_y(), grid.positions_x());
    let x_edge: Vec<bool> = (0..shape.width.saturating_sub(1))
        .map(|x| TileGrid::covering(px, t, x) != TileGrid::covering(px, t, x + 1))
        .collect();
    let y_edge: Vec<bool> = (0..shape.height.saturating_sub(1))
        .map(|y| TileGrid::covering(py, t, y) != TileGrid::covering(py, t, y + 1))
        .collect();
    let (mut boundary, mut interior) = (0.0f64, 0.0f64);
    let w = shape.width;
    for b in 0..shape.batch {
        for c in 0..shape.channels {
            let (a, o) = (input.plane(b, c), output.plane(b, c));
            let d = |i: usize| o[i] as f64 - a[i] as f64;
            for y in 0..shape.height {
                for x in 0..w {
                    let i = y * w + x;
                    if x + 1 < w {
                        let jump = (d(i + 1) - d(i)).abs();
                        let slot = if x_edge[x] {
                            &mut boundary
                        } else {
                            &mut interior
                        };
                        *slot = slot.max(jump);
                    }
                    if y + 1 < shape.height {
                        let jump = (d(i + w) - d(i)).abs();
                        let slot = if y_edge[y] {
                            &mut boundary
                        } else {
                            &mut interior
                        };
                        *slot = slot.max(jump);
                    }
                }
            }
        }
    }
    if boundary == 0.0 {
        0.0
    } else {
        boundary / interior.max(f64::MIN_POSITIVE)
    }
}

/// Mean over tiles (and over `ℓ`, `h`) of the standard deviation of the
/// step-to-step change in each tile's bound. A steady drift scores zero;
/// alternating jumps score high.
pub fn corridor_flicker(history: &[(Vec<f32>, Vec<f32>)]) -> f64 {
    if history.len() < 3 {
        return 0.0;
    }
    let tiles = history[0].0.len();
    let n = (history.len() - 1) as f64;
    let mut total = 0.0;
    for k in 0..tiles {
        for pick in [0usize, 1] {
            let bound =
                |(lo, hi): &(Vec<f32>, Vec<f32>)| if pick == 0 { lo[k] } else { hi[k] } as f64;
            let deltas: Vec<f64> = history
                .windows(2)
                .map(|w| bound(&w[1]) - bound(&w[0]))
                .collect();
            let mean = deltas.iter().sum::<f64>() / n;
            let var = deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
            total += var.sqrt();
        }
    }
    total / (2 * tiles) as f64
}

fn median_and_p95(samples: &[f64]) -> (f64, f64) {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    };
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    (median, s[rank - 1])
}

/// Runs `sim.steps` iterations of: add fresh decaying noise (and the spikes),
/// apply the pipeline, record metrics.
pub fn run_sim(spec: &SynthSpec, pipeline: &mut Pipeline, sim: &SimConfig) -> Result<SimRun> {
    if sim.steps == 0 {
        return Err(Error::invalid("simulation needs at least one step"));
    }
    let shape = spec.shape;
    let anchor = synth_latent(&SynthSpec {
        spikes: Vec::new(),
        ..spec.clone()
    })?;
    let mut latent = anchor.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5155_494c_4b5f_5354);
    let mask = spike_free_mask(shape, &spec.spikes);
    let seam_grid = match pipeline.first_aqclip() {
        Some(cfg) => plan_grid(shape.height, shape.width, cfg.tile, cfg.stride).ok(),
        None => {
            let d = AqClipConfig::default();
            plan_grid(shape.height, shape.width, d.tile, d.stride).ok()
        }
    };

    let mut rows = Vec::with_capacity(sim.steps);
    let mut history = Vec::new();
    for step in 0..sim.steps {
        let sigma = sim.step_noise * sim.decay.powi(step as i32);
        let carry = sim.carry as f64;
        let mut data: Vec<f32> = anchor
            .data()
            .iter()
            .zip(latent.data())
            .map(|(&a, &prev)| (a as f64 + carry * (prev as f64 - a as f64)) as f32)
            .collect();
        for v in data.iter_mut() {
            let n: f32 = StandardNormal.sample(&mut rng);
            *v += sigma * n;
        }
        spec.add_spikes(&mut data);
        let input = LatentTensor::new(shape, data)?;

        let start = Instant::now();
        let (output, record) = pipeline.apply(&input)?;
        let runtime_ms = start.elapsed().as_secs_f64() * 1e3;

        let (mean_lo, mean_hi) = match &record {
            Some(r) => {
                let n = r.smoothed.lo.len() as f64;
                history.push((r.smoothed.lo.clone(), r.smoothed.hi.clone()));
                (
                    r.smoothed.lo.iter().map(|&v| v as f64).sum::<f64>() / n,
                    r.smoothed.hi.iter().map(|&v| v as f64).sum::<f64>() / n,
                )
            }
            None => (0.0, 0.0),
        };
        rows.push(StepMetrics {
            step,
            noise_sigma: sigma,
            spike_suppression: spike_suppression(&input, &output, &spec.spikes),
            texture_corr: pearson(input.data(), output.data(), &mask),
            seam_score: seam_grid
                .as_ref()
                .map_or(0.0, |g| seam_score(&input, &output, g)),
            mean_lo,
            mean_hi,
            runtime_ms,
        });
        latent = output;
    }

    let times: Vec<f64> = rows.iter().map(|r| r.runtime_ms).collect();
    let (median_ms, _) = median_and_p95(&times);
    let report = StabilityReport {
        pipeline: pipeline.name(),
        steps: sim.steps,
        spike_suppression: rows.iter().map(|r| r.spike_suppression).fold(0.0, f64::max),
        texture_corr: rows.iter().map(|r| r.texture_corr).fold(1.0, f64::min),
        seam_score: rows.iter().map(|r| r.seam_score).fold(0.0, f64::max),
        corridor_flicker: corridor_flicker(&history),
        runtime_ms: median_ms,
        throughput_mp_s: megapixels_per_second(shape, median_ms),
    };
    Ok(SimRun {
        report,
        steps: rows,
    })
}

fn megapixels_per_second(shape: Shape, ms: f64) -> f64 {
    let mp = (shape.batch * shape.height * shape.width) as f64 / 1e6;
    if ms > 0.0 {
        mp / (ms / 1e3)
    } else {
        0.0
    }
}

/// Timings for one pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub pipeline: String,
    pub shape: Shape,
    pub samples_ms: Vec<f64>,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub throughput_mp_s: f64,
}

pub const BENCH_WARMUP: usize = 2;

/// Times `iterations` applications of the pipeline after [`BENCH_WARMUP`]
/// untimed ones. The identity pipeline times a plain tensor copy.
pub fn bench(shape: Shape, pipeline: &mut Pipeline, iterations: usize) -> Result<BenchReport> {
    if iterations < 3 {
        return Err(Error::invalid("bench needs at least 3 iterations"));
    }
    let spec = SynthSpec::desk(0).with_shape(shape);
    let input = synth_latent(&spec)?;
    let mut samples_ms = Vec::with_capacity(iterations);
    for i in 0..BENCH_WARMUP + iterations {
        let start = Instant::now();
        let out = if pipeline.stages().is_empty() {
            std::hint::black_box(input.clone())
        } else {
            pipeline.apply(&input)?.0
        };
        let ms = start.elapsed().as_secs_f64() * 1e3;
        std::hint::black_box(&out);
        if i >= BENCH_WARMUP {
            samples_ms.push(ms);
        }
    }
    let (median_ms, p95_ms) = median_and_p95(&samples_ms);
    Ok(BenchReport {
        pipeline: pipeline.name(),
        shape,
        samples_ms,
        median_ms,
        p95_ms,
        throughput_mp_s: megapixels_per_second(shape, median_ms),
    })
}

pub const STEP_CSV_COLUMNS: [&str; 7] = [
    "step",
    "noise_sigma",
    "spike_suppression",
    "texture_corr",
    "seam_score",
    "mean_lo",
    "mean_hi",
];

/// Per-step metrics as CSV. Timing is included only when `with_timing`,
/// since it is the one column that varies between identical runs.
pub fn write_steps_csv<W: Write>(out: W, rows: &[StepMetrics], with_timing: bool) -> Result<()> {
    let mut out = out;
    let io = |e: std::io::Error| Error::Format(e.to_string());
    writeln!(
        out,
        "# step: loop index; noise_sigma: std of noise added before the step; spike_suppression: max|out|/max|in| at spike sites; \
texture_corr: Pearson(in, out) on the spike-free mask; seam_score: boundary/interior jump ratio of out-in; \
mean_lo, mean_hi: mean smoothed corridor of the first aqclip stage{}",
        if with_timing { "; runtime_ms: wall time of the pipeline" } else { "" }
    )
    .map_err(io)?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    let mut header: Vec<&str> = STEP_CSV_COLUMNS.to_vec();
    if with_timing {
        header.push("runtime_ms");
    }
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![
            r.step.to_string(),
            r.noise_sigma.to_string(),
            r.spike_suppression.to_string(),
            r.texture_corr.to_string(),
            r.seam_score.to_string(),
            r.mean_lo.to_string(),
            r.mean_hi.to_string(),
        ];
        if with_timing {
            rec.push(format!("{:.4}", r.runtime_ms));
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(io)
}

/// Benchmark samples as CSV, one row per timed iteration.
pub fn write_bench_csv<W: Write>(out: W, reports: &[BenchReport]) -> Result<()> {
    let mut out = out;
    let io = |e: std::io::Error| Error::Format(e.to_string());
    writeln!(out, "# pipeline: stages applied; shape: BxCxHxW; iteration: timed run index after warmup; ms: wall time").map_err(io)?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["pipeline", "shape", "iteration", "ms"])
        .map_err(csv_err)?;
    for r in reports {
        for (i, ms) in r.samples_ms.iter().enumerate() {
            w.write_record([
                r.pipeline.clone(),
                r.shape.to_string(),
                i.to_string(),
                format!("{ms:.6}"),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(io)
}

impl std::fmt::Display for StabilityReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "pipeline          {}", self.pipeline)?;
        writeln!(f, "steps             {}", self.steps)?;
        writeln!(f, "spike_suppression {:.6}", self.spike_suppression)?;
        writeln!(f, "texture_corr      {:.6}", self.texture_corr)?;
        writeln!(f, "seam_score        {:.6}", self.seam_score)?;
        writeln!(f, "corridor_flicker  {:.6}", self.corridor_flicker)
    }
}

impl std::fmt::Display for BenchReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<28} {}  median {:>9.4} ms  p95 {:>9.4} ms  {:>9.2} MP/s",
            self.pipeline, self.shape, self.median_ms, self.p95_ms, self.throughput_mp_s
        )
    }
}
