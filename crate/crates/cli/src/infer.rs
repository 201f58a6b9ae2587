use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Duration;

use aeropose_core::bench::{bench_pipeline, latency_table};
use aeropose_core::dataset::{load_dataset, Dataset, Split};
use aeropose_core::eval::parse_detections;
use aeropose_core::keypoints::KeypointSet;
use aeropose_core::pipeline::{
    load_frame, results_document, run_sequence_with, serve, timing_sidecar, DecoderFrames,
    DetectorBackend, DirectoryFrames, ExecutionMode, Frame, MockDetector, MockPose, Person,
    PipelineError, PoseBackend, PoseMode, PoseResult, ProcessBackend, StageTimings,
    DEFAULT_DETECTOR_INPUT,
};
use aeropose_core::render::render_overlay;
use clap::Args;

use crate::error::{CliError, CliResult, Context};
use crate::settings::Settings;

/// Where frames come from.
#[derive(Args, Debug)]
pub struct SourceArgs {
    /// Directory of PNG/JPEG frames, read in file-name order.
    #[arg(long, value_name = "DIR", conflicts_with = "decoder")]
    pub frames: Option<PathBuf>,

    /// Decoder command writing raw rgb24 frames to stdout, split on
    /// whitespace (no shell).
    #[arg(long, value_name = "CMD", requires = "decoder_size")]
    pub decoder: Option<String>,

    /// Frame size of the decoder stream.
    #[arg(long, value_name = "WxH")]
    pub decoder_size: Option<FrameSize>,

    /// Annotation file giving frame ids by file name; also feeds the
    /// ground-truth mock backends.
    #[arg(long, value_name = "PATH")]
    pub gt: Option<PathBuf>,

    /// Spacing of frame timestamps.
    #[arg(long, default_value_t = 40.0)]
    pub interval_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameSize {
    pub width: u32,
    pub height: u32,
}

impl std::str::FromStr for FrameSize {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected WxH, got '{s}'"))?;
        let parse = |v: &str| v.trim().parse::<u32>().map_err(|e| format!("'{s}': {e}"));
        Ok(Self {
            width: parse(w)?,
            height: parse(h)?,
        })
    }
}

type FrameIter = Box<dyn Iterator<Item = Result<Frame, PipelineError>> + Send>;

fn split_command(cmd: &str) -> CliResult<Command> {
    let mut parts = cmd.split_whitespace();
    let program = parts
        .next()
        .ok_or_else(|| CliError::input("empty backend or decoder command"))?;
    let mut c = Command::new(program);
    c.args(parts);
    Ok(c)
}

impl SourceArgs {
    fn dataset(&self) -> CliResult<Option<Dataset>> {
        self.gt
            .as_deref()
            .map(|p| load_dataset(p, Split::Test))
            .transpose()
            .map_err(Into::into)
    }

    fn open(&self, gt: Option<&Dataset>) -> CliResult<FrameIter> {
        if !(self.interval_ms >= 0.0) {
            return Err(CliError::input(format!(
                "--interval-ms must be non-negative, got {}",
                self.interval_ms
            )));
        }
        match (&self.frames, &self.decoder, self.decoder_size) {
            (Some(dir), None, _) => Ok(Box::new(DirectoryFrames::open(dir, gt, self.interval_ms)?)),
            (None, Some(cmd), Some(size)) => Ok(Box::new(DecoderFrames::spawn(
                split_command(cmd)?,
                size.width,
                size.height,
                1,
                self.interval_ms,
            )?)),
            _ => Err(CliError::input("give either --frames DIR or --decoder CMD --decoder-size WxH")),
        }
    }
}

#[derive(Args, Debug)]
pub struct BackendArgs {
    /// Detector process speaking the backend protocol on stdin/stdout.
    /// Without it, ground-truth boxes from --gt are emitted.
    #[arg(long, value_name = "CMD")]
    pub detector_cmd: Option<String>,

    /// Pose process speaking the backend protocol. Without it, heatmaps
    /// are encoded from --gt keypoints.
    #[arg(long, value_name = "CMD")]
    pub pose_cmd: Option<String>,

    /// Detector input canvas side.
    #[arg(long, default_value_t = DEFAULT_DETECTOR_INPUT)]
    pub detector_input: u32,

    /// Score attached to ground-truth mock boxes.
    #[arg(long, default_value_t = 1.0)]
    pub mock_score: f64,
}

type Backends = (Box<dyn DetectorBackend>, Box<dyn PoseBackend>);

impl BackendArgs {
    fn build(&self, gt: Option<&Dataset>, s: &Settings, delays: (Duration, Duration)) -> CliResult<Backends> {
        if self.detector_input == 0 {
            return Err(CliError::input("--detector-input must be positive"));
        }
        if !(0.0..=1.0).contains(&self.mock_score) {
            return Err(CliError::input(format!("--mock-score must lie in [0, 1], got {}", self.mock_score)));
        }
        let need_gt = || gt.ok_or_else(|| CliError::input("mock backends need --gt"));
        let det: Box<dyn DetectorBackend> = match &self.detector_cmd {
            Some(cmd) => Box::new(
                ProcessBackend::spawn(split_command(cmd)?)
                    .op(|| format!("starting detector '{cmd}'"))?
                    .with_input_size(self.detector_input),
            ),
            None => {
                let mut m = MockDetector::from_dataset(need_gt()?, self.mock_score)
                    .with_input_size(self.detector_input);
                if !delays.0.is_zero() {
                    m = m.with_delay(delays.0);
                }
                Box::new(m)
            }
        };
        let pose: Box<dyn PoseBackend> = match &self.pose_cmd {
            Some(cmd) => Box::new(ProcessBackend::spawn(split_command(cmd)?).op(|| format!("starting pose backend '{cmd}'"))?),
            None => {
                let mut m = MockPose::from_dataset(need_gt()?).with_codec(s.run.codec);
                if !delays.1.is_zero() {
                    m = m.with_delay(delays.1);
                }
                Box::new(m)
            }
        };
        Ok((det, pose))
    }
}

/// Pipeline overrides shared by run and bench.
#[derive(Args, Debug)]
pub struct PipelineOptions {
    /// Minimum detection score kept.
    #[arg(long)]
    pub det_threshold: Option<f64>,

    /// Growth of each box before cropping.
    #[arg(long)]
    pub box_expansion: Option<f64>,

    /// Send patches to the pose backend in batches of this size.
    #[arg(long, value_name = "N")]
    pub batch: Option<usize>,

    /// Minimum per-keypoint heatmap peak for a visible point.
    #[arg(long)]
    pub kp_threshold: Option<f64>,

    /// Downscale and restore each patch before pose estimation, with the
    /// factor range from the configuration.
    #[arg(long)]
    pub stress: bool,
}

impl PipelineOptions {
    pub fn apply(&self, s: &mut Settings) {
        if let Some(t) = self.det_threshold {
            s.run.det_conf_threshold = t;
        }
        if let Some(e) = self.box_expansion {
            s.run.box_expansion = e;
        }
        if let Some(size) = self.batch {
            s.run.pose_mode = PoseMode::Batched { size };
        }
        if let Some(t) = self.kp_threshold {
            s.run.codec.kp_conf_threshold = t;
        }
        if self.stress && s.run.stress.is_none() {
            s.run.stress = Some(Default::default());
        }
    }
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[command(flatten)]
    pub source: SourceArgs,

    #[command(flatten)]
    pub backends: BackendArgs,

    #[command(flatten)]
    pub options: PipelineOptions,

    /// Overlap detection of the next frame with pose of the current one.
    #[arg(long)]
    pub pipelined: bool,

    /// COCO keypoint results document.
    #[arg(long, short)]
    pub output: PathBuf,

    /// Per-frame timing sidecar (default: next to the output, `.timing.json`).
    #[arg(long, value_name = "PATH")]
    pub timings: Option<PathBuf>,
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).op(|| format!("writing {}", path.display()))
}

fn to_json(v: &impl serde::Serialize) -> CliResult<String> {
    let mut text = serde_json::to_string_pretty(v).map_err(CliError::operational)?;
    text.push('\n');
    Ok(text)
}

pub fn run(a: &RunArgs, s: &Settings) -> CliResult<()> {
    let gt = a.source.dataset()?;
    let frames = a.source.open(gt.as_ref())?;
    let (mut det, mut pose) = a.backends.build(gt.as_ref(), s, (Duration::ZERO, Duration::ZERO))?;
    let mode = if a.pipelined {
        ExecutionMode::Pipelined
    } else {
        ExecutionMode::Sequential
    };
    let mut outcomes = Vec::new();
    run_sequence_with(frames, det.as_mut(), pose.as_mut(), &s.run, mode, |o| {
        if let Err(e) = &o {
            eprintln!("warning: {e}");
        }
        outcomes.push(o);
    });
    write_text(&a.output, &results_document(&outcomes))?;
    let timings = a.timings.clone().unwrap_or_else(|| {
        let stem = a.output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        a.output.with_file_name(format!("{stem}.timing.json"))
    });
    let sidecar = timing_sidecar(&outcomes);
    write_text(&timings, &to_json(&sidecar)?)?;
    let persons: usize = sidecar.frames.iter().map(|f| f.persons).sum();
    println!(
        "{} frames, {} persons, {} failed frames",
        outcomes.len(),
        persons,
        sidecar.errors.len()
    );
    if sidecar.errors.is_empty() {
        Ok(())
    } else {
        Err(CliError::operational(format!("{} frame(s) failed", sidecar.errors.len())))
    }
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub source: SourceArgs,

    #[command(flatten)]
    pub backends: BackendArgs,

    #[command(flatten)]
    pub options: PipelineOptions,

    /// Untimed frame runs before measuring.
    #[arg(long)]
    pub warmup: Option<usize>,

    /// Timed passes over the frames.
    #[arg(long)]
    pub iterations: Option<usize>,

    /// Frame rate the total latency is compared against.
    #[arg(long)]
    pub fps: Option<f64>,

    /// Artificial latency of the mock detector per call.
    #[arg(long, default_value_t = 0.0)]
    pub mock_detect_ms: f64,

    /// Artificial latency of the mock pose backend per call.
    #[arg(long, default_value_t = 0.0)]
    pub mock_pose_ms: f64,

    /// Write the latency report as JSON.
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
}

impl BenchArgs {
    pub fn apply(&self, s: &mut Settings) {
        self.options.apply(s);
        if let Some(w) = self.warmup {
            s.bench.warmup = w;
        }
        if let Some(i) = self.iterations {
            s.bench.iterations = i;
        }
        if let Some(f) = self.fps {
            s.bench.fps_budget = f;
        }
    }
}

fn delay(ms: f64, flag: &str) -> CliResult<Duration> {
    Duration::try_from_secs_f64(ms / 1e3)
        .map_err(|_| CliError::input(format!("{flag} must be a non-negative number of milliseconds, got {ms}")))
}

pub fn bench(a: &BenchArgs, s: &Settings) -> CliResult<()> {
    let delays = (delay(a.mock_detect_ms, "--mock-detect-ms")?, delay(a.mock_pose_ms, "--mock-pose-ms")?);
    let gt = a.source.dataset()?;
    let frames: Vec<Frame> = a.source.open(gt.as_ref())?.collect::<Result<_, _>>()?;
    let (mut det, mut pose) = a.backends.build(gt.as_ref(), s, delays)?;
    let report = bench_pipeline(&frames, det.as_mut(), pose.as_mut(), &s.run, &s.bench)?;
    print!("{}", latency_table(&report));
    if let Some(p) = &a.report {
        write_text(p, &to_json(&report)?)?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    /// Directory of frames the results refer to.
    #[arg(long, value_name = "DIR")]
    pub frames: PathBuf,

    /// Annotation file giving frame ids by file name (default: frames are
    /// numbered from 1 in file-name order).
    #[arg(long, value_name = "PATH")]
    pub gt: Option<PathBuf>,

    /// COCO keypoint results document.
    #[arg(long, value_name = "PATH")]
    pub results: PathBuf,

    /// Output directory for overlay PNGs.
    #[arg(long, short)]
    pub out: PathBuf,
}

/// Regroups a results document into per-frame pose results.
fn results_by_frame(text: &str) -> CliResult<BTreeMap<u64, PoseResult>> {
    let mut by_frame: BTreeMap<u64, PoseResult> = BTreeMap::new();
    for d in parse_detections(text)? {
        let r = by_frame.entry(d.image_id).or_insert_with(|| PoseResult {
            frame_id: d.image_id,
            persons: Vec::new(),
            timings: StageTimings::default(),
        });
        r.persons.push(Person {
            bbox: d.bbox.with_score(d.score),
            keypoints: d.keypoints.unwrap_or_else(KeypointSet::default),
        });
    }
    Ok(by_frame)
}

pub fn render(a: &RenderArgs) -> CliResult<()> {
    let gt = a.gt.as_deref().map(|p| load_dataset(p, Split::Test)).transpose()?;
    let text = std::fs::read_to_string(&a.results).op(|| format!("reading {}", a.results.display()))?;
    let by_frame = results_by_frame(&text).input(|| a.results.display().to_string())?;
    let frames = DirectoryFrames::open(&a.frames, gt.as_ref(), 0.0)?;
    std::fs::create_dir_all(&a.out).op(|| format!("creating {}", a.out.display()))?;
    let mut written = 0;
    for (id, path) in frames.paths() {
        let f = load_frame(id, path, 0.0)?;
        let empty = PoseResult {
            frame_id: id,
            persons: Vec::new(),
            timings: StageTimings::default(),
        };
        let r = by_frame.get(&id).unwrap_or(&empty);
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let out = a.out.join(format!("{stem}.png"));
        render_overlay(&f, r, &out).op(|| format!("rendering frame {id}"))?;
        written += 1;
    }
    println!("{written} overlays written to {}", a.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, value_name = "PATH")]
    pub gt: PathBuf,

    #[arg(long, default_value_t = 1.0)]
    pub score: f64,
}

pub fn serve_mock(a: &ServeArgs) -> CliResult<()> {
    let gt = load_dataset(&a.gt, Split::Test)?;
    let mut det = MockDetector::from_dataset(&gt, a.score);
    let mut pose = MockPose::from_dataset(&gt);
    let mut reader = BufReader::new(std::io::stdin().lock());
    let mut writer = BufWriter::new(std::io::stdout().lock());
    serve(&mut reader, &mut writer, &mut det, &mut pose).op(|| "serving backend requests".into())
}
