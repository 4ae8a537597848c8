use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use sbt_core::harness::io::{encode_pgm, frame_name, read_boxes, read_frames, read_sequence, write_boxes, write_metrics, write_sequence};
use sbt_core::harness::{
    iou, metrics_from_ious, run_ablation, track_frames, train_and_evaluate, AblationGrid, DeskData, FrameResult, Metrics,
    RunConfig, Sequence, SuiteConfig,
};
use sbt_core::oracles::run_oracle_checks;
use sbt_core::Model;

#[derive(Parser)]
#[command(name = "sbt", version, about = "Single-branch transformer tracker on synthetic sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the synthetic suite described by a run config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Track a suite and write per-sequence metrics.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        /// Suite TOML (its held-out split is used) or a directory of sequence directories.
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        dump_maps: Option<PathBuf>,
    },
    /// Track one sequence directory from its first ground-truth box.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        boxes: PathBuf,
        #[arg(long)]
        dump_maps: Option<PathBuf>,
    },
    /// Run the correlation oracles and equivariance probes.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render a suite to disk as PPM frames plus groundtruth.txt.
    GenData {
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and compare model variants over several seeds.
    Ablate {
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_toml(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn dump_maps(dir: &Path, results: &[FrameResult<f32>]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, r) in results.iter().enumerate() {
        if let Some(cls) = &r.cls {
            let name = frame_name(i).replace(".ppm", ".pgm");
            fs::write(dir.join(name), encode_pgm(cls)?)?;
        }
    }
    Ok(())
}

fn train(config: Option<&Path>, out: &Path, log: Option<&Path>) -> Result<()> {
    let cfg = match config {
        Some(p) => RunConfig::from_toml(&read_toml(p)?)?,
        None => RunConfig::default(),
    };
    let data = DeskData::generate(&cfg.suite)?;
    let run = train_and_evaluate(&cfg.model, &data, &cfg.train, cfg.train.seed)?;
    run.model.save(out)?;
    if let Some(log) = log {
        fs::write(log, run.log.to_csv())?;
    }
    let m = run.metrics();
    println!(
        "trained {} for {} steps in {:.1}s; held-out AO {:.3} SR50 {:.3} SR75 {:.3}",
        run.config, cfg.train.steps, run.train_secs, m.ao, m.sr50, m.sr75
    );
    Ok(())
}

fn load_suite(path: &Path) -> Result<Vec<(String, Sequence<f32>)>> {
    if path.is_dir() {
        let mut dirs: Vec<PathBuf> = fs::read_dir(path)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
        dirs.sort();
        if dirs.is_empty() {
            bail!("no sequence directories in {}", path.display());
        }
        dirs.iter()
            .map(|d| {
                let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                Ok((name, read_sequence(d).with_context(|| format!("reading {}", d.display()))?))
            })
            .collect()
    } else {
        Ok(SuiteConfig::from_toml(&read_toml(path)?)?.test_sequences()?)
    }
}

fn eval(weights: &Path, suite: &Path, metrics: &Path, maps: Option<&Path>) -> Result<()> {
    let model = Model::load(weights).with_context(|| format!("loading {}", weights.display()))?;
    let sequences = load_suite(suite)?;
    let mut rows: Vec<(String, Metrics)> = Vec::new();
    let mut all = Vec::new();
    for (name, seq) in &sequences {
        if seq.len() < 2 {
            bail!("sequence {name} needs at least two frames");
        }
        let results = track_frames(&model, &seq.frames, seq.gt[0])?;
        if let Some(dir) = maps {
            dump_maps(&dir.join(name), &results)?;
        }
        let ious: Vec<f64> = results[1..].iter().zip(&seq.gt[1..]).map(|(r, g)| iou(&r.bbox, g)).collect();
        rows.push((name.clone(), metrics_from_ious(&ious)));
        all.extend(ious);
    }
    write_metrics(metrics, &rows)?;
    let m = metrics_from_ious(&all);
    println!("{} sequences: AO {:.3} SR50 {:.3} SR75 {:.3}", rows.len(), m.ao, m.sr50, m.sr75);
    Ok(())
}

fn infer(weights: &Path, seq: &Path, boxes: &Path, maps: Option<&Path>) -> Result<()> {
    let model = Model::load(weights).with_context(|| format!("loading {}", weights.display()))?;
    let frames = read_frames(seq)?;
    let gt = read_boxes(&seq.join("groundtruth.txt"))?;
    let init = *gt.first().context("groundtruth.txt has no initial box")?;
    let results = track_frames(&model, &frames, init)?;
    if let Some(dir) = maps {
        dump_maps(dir, &results)?;
    }
    let out: Vec<_> = results.iter().map(|r| r.bbox).collect();
    write_boxes(boxes, &out)?;
    println!("tracked {} frames", out.len());
    Ok(())
}

fn oracle_check(seed: u64) -> Result<bool> {
    let checks = run_oracle_checks(seed)?;
    for c in &checks {
        println!("{c}");
    }
    Ok(checks.iter().all(|c| c.passed))
}

fn gen_data(scene: Option<&Path>, out: &Path) -> Result<()> {
    let suite = match scene {
        Some(p) => SuiteConfig::from_toml(&read_toml(p)?)?,
        None => SuiteConfig::default(),
    };
    let all = suite.train_sequences()?.into_iter().chain(suite.test_sequences()?);
    let mut n = 0;
    for (name, seq) in all {
        write_sequence(&out.join(&name), &seq)?;
        n += 1;
    }
    println!("wrote {n} sequences to {}", out.display());
    Ok(())
}

fn ablate(grid: Option<&Path>, out: &Path) -> Result<()> {
    let grid = match grid {
        Some(p) => AblationGrid::from_toml(&read_toml(p)?)?,
        None => AblationGrid::tiny_vs_siamese(),
    };
    let report = run_ablation(&grid)?;
    fs::write(out, report.to_csv())?;
    for (name, m) in report.means() {
        println!("{name}: mean AO {:.3} SR50 {:.3} SR75 {:.3}", m.ao, m.sr50, m.sr75);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, out, log } => train(config.as_deref(), &out, log.as_deref())?,
        Command::Eval { weights, suite, metrics, dump_maps } => eval(&weights, &suite, &metrics, dump_maps.as_deref())?,
        Command::Infer { weights, seq, boxes, dump_maps } => infer(&weights, &seq, &boxes, dump_maps.as_deref())?,
        Command::OracleCheck { seed } => return oracle_check(seed),
        Command::GenData { scene, out } => gen_data(scene.as_deref(), &out)?,
        Command::Ablate { grid, out } => ablate(grid.as_deref(), &out)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
