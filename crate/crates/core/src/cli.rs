//! The `sfod` command line. Every command that produces files writes the
//! fully resolved configuration beside them as `config.txt`.

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::archive::Archive;
use crate::config::RunConfig;
use crate::data::{Dataset, Split};
use crate::detector::{Detector, DetectorParams};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::gradcheck::{run_check, CHECKS};
use crate::numerics::Tensor;
use crate::ossr::{objectness_weights, ObjectnessMode};
use crate::report::{
    ablation_table, component_grid, field, parse_metrics, series, summarize, svg_bars, svg_heatmap, svg_lines, AblationRow,
};
use crate::teacher::{adapt, pseudo_label, sweep_thresholds, threshold_sweep, EvalHook, TeacherStudentState};
use crate::train::{pretrain, PretrainState};

#[derive(Parser, Debug)]
#[command(name = "sfod", version, about = "Source-free adaptation of a miniature query-based detector")]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key after the file and the environment (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the four dataset splits.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Replace existing split files.
        #[arg(long)]
        force: bool,
    },
    /// Supervised training on the source split.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `out/checkpoint.bin`.
        #[arg(long)]
        resume: bool,
        /// Epochs between checkpoints.
        #[arg(long, default_value_t = 10)]
        checkpoint_every: u64,
    },
    /// Teacher-student adaptation on the unlabeled target split.
    Adapt {
        /// Source checkpoint written by `pretrain`.
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: bool,
        #[arg(long, default_value_t = 10)]
        checkpoint_every: u64,
    },
    /// mAP@0.5 on the test splits, optional threshold sweep and OSSR dump.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Evaluate the student of an adaptation checkpoint.
        #[arg(long)]
        student: bool,
        /// Pseudo-label counts on target_train for c_thresh in 0.1..0.9.
        #[arg(long)]
        sweep: bool,
        /// Dump objectness maps of this target_test image.
        #[arg(long, value_name = "INDEX")]
        ossr_dump: Option<usize>,
    },
    /// Finite-difference gradient suite.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run a single check.
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(CHECKS))]
        only: Option<String>,
    },
    /// Summaries, the ablation table and SVG plots from run outputs.
    Report {
        /// Metrics files or run directories.
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// OSSR dump written by `eval --ossr-dump`.
        #[arg(long)]
        ossr: Option<PathBuf>,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 success, 1 validation error, 2 runtime failure.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { stdout.write_all(text.as_bytes()) } else { stderr.write_all(text.as_bytes()) };
            return code;
        }
    };
    match dispatch(cli, std::env::vars(), stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn resolve(cli: &Cli, env: impl IntoIterator<Item = (String, String)>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), env)?;
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: Cli, env: impl IntoIterator<Item = (String, String)>, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve(&cli, env)?;
    match cli.cmd {
        Command::GenData { out: dir, force } => gen_data(&cfg, &dir, force, out),
        Command::Pretrain {
            data,
            out: dir,
            resume,
            checkpoint_every,
        } => cmd_pretrain(&cfg, &data, &dir, resume, checkpoint_every, out),
        Command::Adapt {
            source,
            data,
            out: dir,
            resume,
            checkpoint_every,
        } => cmd_adapt(&cfg, &source, &data, &dir, resume, checkpoint_every, out),
        Command::Eval {
            checkpoint,
            data,
            out: dir,
            student,
            sweep,
            ossr_dump,
        } => cmd_eval(&cfg, &checkpoint, &data, &dir, student, sweep, ossr_dump, out),
        Command::GradCheck { instances, seed, only } => grad_check(instances, seed, only.as_deref(), out),
        Command::Report { inputs, out: dir, ossr } => cmd_report(&inputs, dir.as_deref(), ossr.as_deref(), out),
    }
}

fn split_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.bin", split.name()))
}

fn write_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    Ok(())
}

fn gen_data(cfg: &RunConfig, dir: &Path, force: bool, out: &mut dyn Write) -> Result<()> {
    let scene = cfg.scene_config();
    scene.validate()?;
    if !force {
        if let Some(p) = Split::ALL.iter().map(|&s| split_path(dir, s)).find(|p| p.exists()) {
            return Err(Error::Config(format!("{} exists; pass --force to overwrite", p.display())));
        }
    }
    fs::create_dir_all(dir)?;
    for split in Split::ALL {
        let d = Dataset::generate(&scene, cfg.data_seed, split, cfg.split_size(split))?;
        d.save(&split_path(dir, split))?;
        writeln!(out, "{}: {} images", split.name(), d.len())?;
    }
    write_config(cfg, dir)
}

fn load_split(dir: &Path, split: Split) -> Result<Dataset> {
    let d = Dataset::load(&split_path(dir, split))?;
    if d.split != split {
        return Err(Error::Format(format!("{} holds split {}", split_path(dir, split).display(), d.split.name())));
    }
    Ok(d)
}

fn check_data(cfg: &RunConfig, d: &Dataset) -> Result<()> {
    let m = cfg.detector_config();
    if d.num_classes != m.num_classes || d.image_h != m.image_h || d.image_w != m.image_w {
        return Err(Error::Mismatch(format!(
            "{} has {} classes at {}x{}, config expects {} at {}x{}",
            d.split.name(),
            d.num_classes,
            d.image_h,
            d.image_w,
            m.num_classes,
            m.image_h,
            m.image_w
        )));
    }
    Ok(())
}

const METRICS_LEN: &str = "progress/metrics_len";
const TIMING_LEN: &str = "progress/timing_len";

/// Opens `path` for appending after truncating it to `len` bytes; a fresh
/// run starts from an empty file.
fn open_stream(path: &Path, len: u64) -> Result<BufWriter<File>> {
    let f = OpenOptions::new().create(true).write(true).truncate(false).open(path)?;
    f.set_len(len)?;
    let mut f = BufWriter::new(f);
    use std::io::Seek;
    f.seek(std::io::SeekFrom::Start(len))?;
    Ok(f)
}

fn stream_len(a: &Archive, name: &str) -> Result<u64> {
    Ok(a.get(name).map(|t| t.item() as u64).unwrap_or(0))
}

/// Checkpoint written atomically so an interrupted write leaves the previous
/// one intact.
fn save_checkpoint(a: &Archive, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    a.save(&tmp)?;
    fs::rename(tmp, path)?;
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig, data: &Path, dir: &Path, resume: bool, every: u64, out: &mut dyn Write) -> Result<()> {
    let train = load_split(data, Split::SourceTrain)?;
    let test = load_split(data, Split::SourceTest)?;
    check_data(cfg, &train)?;
    let det = Detector::new(cfg.detector_config())?;
    let pc = cfg.pretrain_config();
    write_config(cfg, dir)?;
    let ckpt = dir.join("checkpoint.bin");
    let (mut state, len) = if resume && ckpt.exists() {
        let a = Archive::load(&ckpt)?;
        (PretrainState::read_archive(&a, pc.optim)?, stream_len(&a, METRICS_LEN)?)
    } else {
        let init = DetectorParams::init(cfg.detector_config(), cfg.model_seed)?;
        (PretrainState::new(init, pc.optim)?, 0)
    };
    if state.params.config() != det.config() {
        return Err(Error::Mismatch("checkpoint architecture differs from the config".into()));
    }
    let mut metrics = open_stream(&dir.join("metrics.txt"), len)?;
    let save = |state: &PretrainState, metrics: &mut BufWriter<File>| -> Result<()> {
        metrics.flush()?;
        let mut a = Archive::new();
        state.write_archive(&mut a);
        a.insert(METRICS_LEN, Tensor::scalar(metrics.get_ref().metadata()?.len() as f64));
        save_checkpoint(&a, &ckpt)
    };
    save(&state, &mut metrics)?;
    while state.epoch < pc.epochs {
        let mut chunk = pc.clone();
        chunk.epochs = (state.epoch + every.max(1)).min(pc.epochs);
        pretrain(&det, &mut state, &train, &chunk, &mut metrics)?;
        save(&state, &mut metrics)?;
        writeln!(out, "epoch {}/{}", state.epoch, pc.epochs)?;
    }
    let rep = evaluate(&det, &state.params, &test, &cfg.eval_config())?;
    writeln!(metrics, "epoch={} source_map50={}", state.epoch, rep.map50)?;
    metrics.flush()?;
    fs::write(dir.join("summary.txt"), format!("{}\n", rep.to_record()))?;
    writeln!(out, "source_test {}", rep.to_record())?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_adapt(cfg: &RunConfig, source: &Path, data: &Path, dir: &Path, resume: bool, every: u64, out: &mut dyn Write) -> Result<()> {
    let train = load_split(data, Split::TargetTrain)?;
    let test = load_split(data, Split::TargetTest)?;
    check_data(cfg, &train)?;
    let det = Detector::new(cfg.detector_config())?;
    let ac = cfg.adapt_config();
    let src = Archive::load(source).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("source checkpoint {}: {io}", source.display()))),
        other => other,
    })?;
    let source_params = DetectorParams::read_archive(&src, "model/")?;
    if source_params.config() != det.config() {
        return Err(Error::Mismatch(format!(
            "source checkpoint has {} classes, config has {}",
            source_params.config().num_classes,
            det.config().num_classes
        )));
    }
    write_config(cfg, dir)?;
    let ckpt = dir.join("checkpoint.bin");
    let (mut state, mlen, tlen) = if resume && ckpt.exists() {
        let a = Archive::load(&ckpt)?;
        (TeacherStudentState::read_archive(&a, &ac)?, stream_len(&a, METRICS_LEN)?, stream_len(&a, TIMING_LEN)?)
    } else {
        (TeacherStudentState::new(&source_params, &ac)?, 0, 0)
    };
    let mut metrics = open_stream(&dir.join("metrics.txt"), mlen)?;
    let mut timing = open_stream(&dir.join("timing.txt"), tlen)?;
    let save = |state: &TeacherStudentState, m: &mut BufWriter<File>, t: &mut BufWriter<File>| -> Result<()> {
        m.flush()?;
        t.flush()?;
        let mut a = Archive::new();
        state.write_archive(&mut a);
        a.insert(METRICS_LEN, Tensor::scalar(m.get_ref().metadata()?.len() as f64));
        a.insert(TIMING_LEN, Tensor::scalar(t.get_ref().metadata()?.len() as f64));
        save_checkpoint(&a, &ckpt)
    };
    save(&state, &mut metrics, &mut timing)?;
    let hook = EvalHook {
        data: &test,
        config: cfg.eval_config(),
        every: cfg.eval_every,
    };
    while state.epoch < ac.epochs {
        let mut chunk = ac.clone();
        chunk.epochs = (state.epoch + every.max(1)).min(ac.epochs);
        let first = state.iteration;
        let s = adapt(&det, &mut state, &train, &chunk, Some(&hook), &mut metrics)?;
        for (i, sec) in s.step_seconds.iter().enumerate() {
            writeln!(timing, "iter={} seconds={sec}", first + i as u64 + 1)?;
        }
        save(&state, &mut metrics, &mut timing)?;
        writeln!(out, "epoch {}/{} mean step {:.2} ms", state.epoch, ac.epochs, 1e3 * s.mean_step_seconds())?;
    }
    timing.flush()?;
    let times: Vec<f64> = parse_metrics(&fs::read_to_string(dir.join("timing.txt"))?)?
        .iter()
        .filter_map(|r| field(r, "seconds"))
        .collect();
    let ms = if times.is_empty() { 0.0 } else { 1e3 * times.iter().sum::<f64>() / times.len() as f64 };
    let rep = evaluate(&det, &state.teacher, &test, &cfg.eval_config())?;
    if cfg.eval_every == 0 || state.epoch % cfg.eval_every != 0 {
        writeln!(metrics, "iter={} epoch={} map50_eval={}", state.iteration, state.epoch, rep.map50)?;
    }
    metrics.flush()?;
    fs::write(dir.join("summary.txt"), format!("{} ms_per_iter={ms} steps={}\n", rep.to_record(), times.len()))?;
    writeln!(out, "target_test {} ms_per_iter={ms:.3}", rep.to_record())?;
    Ok(())
}

/// Model parameters of a pretraining or adaptation checkpoint.
#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    cfg: &RunConfig,
    ckpt: &Path,
    data: &Path,
    dir: &Path,
    student: bool,
    sweep: bool,
    ossr_dump: Option<usize>,
    out: &mut dyn Write,
) -> Result<()> {
    let params = DetectorParams::load_checkpoint(ckpt, student)?;
    let det = Detector::new(*params.config())?;
    let ec = cfg.eval_config();
    write_config(cfg, dir)?;
    let mut report = String::new();
    let mut maps = Vec::new();
    for split in [Split::SourceTest, Split::TargetTest] {
        let p = split_path(data, split);
        if !p.exists() {
            continue;
        }
        let d = load_split(data, split)?;
        let r = evaluate(&det, &params, &d, &ec)?;
        report.push_str(&format!("split={} {}\n", split.name(), r.to_record()));
        maps.push(r.map50);
    }
    if maps.is_empty() {
        return Err(Error::Config(format!("no test split found in {}", data.display())));
    }
    if let [s, t] = maps[..] {
        report.push_str(&format!("domain_gap={}\n", s - t));
    }
    if sweep {
        let d = load_split(data, Split::TargetTrain)?;
        for row in threshold_sweep(&det, &params, &d, &sweep_thresholds())? {
            report.push_str(&format!("sweep {}\n", row.to_record()));
        }
    }
    if let Some(i) = ossr_dump {
        let d = load_split(data, Split::TargetTest)?;
        let s = d
            .samples
            .get(i)
            .ok_or_else(|| Error::Config(format!("image {i} out of range for {} images", d.len())))?;
        let o = det.forward(&params, &s.image)?;
        let pl = pseudo_label(&o, cfg.c_thresh);
        let spec = cfg.adapt_config().roi;
        let mut a = Archive::new();
        let (h, w) = (d.image_h, d.image_w);
        let gray: Vec<f64> = s.image.chunks(3).map(|p| p.iter().sum::<f64>() / 3.0).collect();
        a.insert("image", Tensor::new(vec![h, w], gray)?);
        for mode in [ObjectnessMode::Encoder, ObjectnessMode::AssignedQueries, ObjectnessMode::AllQueries] {
            let sc = objectness_weights(&o.encoder_maps, o.final_query_feats(), &pl.queries, o.final_boxes(), mode, spec, cfg.beta)?;
            sc.write_archive(&mut a, &format!("{mode}/"));
        }
        let p = dir.join(format!("ossr_{i}.bin"));
        a.save(&p)?;
        report.push_str(&format!("ossr_dump={}\n", p.display()));
    }
    fs::write(dir.join("eval.txt"), &report)?;
    out.write_all(report.as_bytes())?;
    Ok(())
}

fn grad_check(instances: usize, seed: u64, only: Option<&str>, out: &mut dyn Write) -> Result<()> {
    let names: Vec<&str> = match only {
        Some(n) => vec![n],
        None => CHECKS.to_vec(),
    };
    let mut failed = Vec::new();
    for n in names {
        let c = run_check(n, seed, instances)?;
        writeln!(out, "{}", c.line())?;
        if !c.passed() {
            failed.push(c.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numerics(format!("gradient checks failed: {}", failed.join(", "))))
    }
}

struct RunInput {
    label: String,
    metrics: String,
    row: Option<AblationRow>,
}

fn read_input(p: &Path) -> Result<RunInput> {
    let label = p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string());
    if !p.is_dir() {
        return Ok(RunInput {
            label,
            metrics: fs::read_to_string(p)?,
            row: None,
        });
    }
    let metrics = fs::read_to_string(p.join("metrics.txt"))?;
    let (cfg_p, sum_p) = (p.join("config.txt"), p.join("summary.txt"));
    let row = if cfg_p.exists() && sum_p.exists() {
        let cfg = RunConfig::from_text(&fs::read_to_string(cfg_p)?)?;
        let sum = parse_metrics(&fs::read_to_string(sum_p)?)?;
        let r = sum.first();
        match (r.and_then(|r| field(r, "map50")), r.and_then(|r| field(r, "ms_per_iter"))) {
            (Some(map50), Some(ms)) => Some(AblationRow {
                cmmb: cfg.cmmb,
                ossr: cfg.ossr,
                uqfd: cfg.uqfd,
                map50,
                ms_per_iter: ms,
            }),
            _ => None,
        }
    } else {
        None
    };
    Ok(RunInput { label, metrics, row })
}

fn cmd_report(inputs: &[PathBuf], dir: Option<&Path>, ossr: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let runs: Vec<RunInput> = inputs.iter().map(|p| read_input(p)).collect::<Result<_>>()?;
    let mut text = String::new();
    let mut losses = Vec::new();
    let mut evals = Vec::new();
    for r in &runs {
        let recs = parse_metrics(&r.metrics)?;
        text.push_str(&format!("== {}\n{}", r.label, summarize(&recs)));
        losses.push((r.label.clone(), series(&recs, "iter", "total")));
        evals.push((r.label.clone(), series(&recs, "epoch", "map50_eval")));
    }
    if runs.is_empty() {
        text.push_str("no data\n");
    }
    let mut rows: Vec<AblationRow> = runs.iter().filter_map(|r| r.row.clone()).collect();
    if !rows.is_empty() {
        let grid = component_grid();
        let rank = |r: &AblationRow| grid.iter().position(|g| *g == (r.cmmb, r.ossr, r.uqfd)).unwrap_or(grid.len());
        rows.sort_by_key(rank);
        text.push_str(&format!("\n{}", ablation_table(&rows)));
    }
    if let Some(d) = dir {
        fs::create_dir_all(d)?;
        fs::write(d.join("report.md"), &text)?;
        fs::write(d.join("loss.svg"), svg_lines("total loss", &losses))?;
        fs::write(d.join("map.svg"), svg_lines("teacher mAP@0.5", &evals))?;
        let bars: Vec<(String, f64)> = runs
            .iter()
            .filter_map(|r| r.row.as_ref().map(|row| (r.label.clone(), row.map50)))
            .collect();
        fs::write(d.join("map_bars.svg"), svg_bars("final mAP@0.5", &bars))?;
    }
    if let Some(p) = ossr {
        let d = dir.ok_or_else(|| Error::Config("--ossr needs --out".into()))?;
        let a = Archive::load(p)?;
        for (name, t) in a.entries() {
            if t.shape().len() == 2 {
                let file = format!("ossr_{}.svg", name.replace(['/', '+'], "_"));
                fs::write(d.join(file), svg_heatmap(name, t.data(), t.shape()[0], t.shape()[1]))?;
            }
        }
    }
    out.write_all(text.as_bytes())?;
    Ok(())
}
