use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use msfd::anchors::{match_histogram, match_rows_to_csv, BBox};
use msfd::checkpoint;
use msfd::config::CliConfig;
use msfd::data::augment::{resize_crop, CropWindow};
use msfd::data::io::{read_dataset, read_png, write_dataset};
use msfd::data::{generate_scene, mix_seed};
use msfd::eval::{detection_lines, evaluate, postprocess, Detection};
use msfd::model::Detector;
use msfd::par::Execution;
use msfd::train::{loss_csv_header, TrainState};
use msfd::{Error, Result};

#[derive(Parser)]
#[command(name = "msfd", version, about = "Multi-scale face detector: data generation, training, evaluation and inference")]
struct Cli {
    /// Run every batch loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic scenes to PNG files plus a JSON-lines manifest.
    GenDataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON config; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a detector; writes loss.csv and MSFD1 checkpoints under --out.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this iteration count instead of train.max_iters (the
        /// learning-rate schedule still follows train.max_iters).
        #[arg(long)]
        until: Option<usize>,
    },
    /// Report AP@0.5 of a checkpoint on a dataset and write its PR curve.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write the `score,precision,recall` CSV.
        #[arg(long, default_value = "pr.csv")]
        pr_out: PathBuf,
    },
    /// Detect faces in one square PNG; prints JSON lines.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Emit (center_x, center_y, major, minor, angle) ellipses instead of boxes.
        #[arg(long)]
        ellipses: bool,
    },
    /// Count matched anchors for square faces over a size x position grid.
    AnchorStats {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    match run(cli.command, exec) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite { .. } | Error::GradCheck(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(command: Command, exec: Execution) -> Result<()> {
    match command {
        Command::GenDataset {
            out,
            count,
            seed,
            config,
        } => gen_dataset(&out, count, seed, &CliConfig::load(config.as_deref())?, exec),
        Command::Train {
            data,
            out,
            config,
            resume,
            until,
        } => train(&data, &out, &CliConfig::load(config.as_deref())?, resume.as_deref(), until, exec),
        Command::Eval {
            checkpoint,
            data,
            config,
            pr_out,
        } => eval(&checkpoint, &data, &CliConfig::load(config.as_deref())?, &pr_out, exec),
        Command::Detect {
            checkpoint,
            image,
            config,
            ellipses,
        } => detect(&checkpoint, &image, &CliConfig::load(config.as_deref())?, ellipses),
        Command::AnchorStats { config, out } => anchor_stats(&CliConfig::load(config.as_deref())?, &out),
    }
}

fn gen_dataset(out: &Path, count: usize, seed: u64, cfg: &CliConfig, exec: Execution) -> Result<()> {
    let scenes = exec.map_range(count, |i| {
        let mut s = generate_scene(mix_seed(seed, i as u64), &cfg.generator);
        s.seed = i as u64;
        s
    });
    write_dataset(out, &scenes)?;
    let mut sizes: Vec<f64> = scenes
        .iter()
        .flat_map(|s| s.gt_boxes.iter().map(|b| b.width().min(b.height())))
        .collect();
    sizes.sort_by(f64::total_cmp);
    println!("wrote {count} scenes with {} faces to {}", sizes.len(), out.display());
    if !sizes.is_empty() {
        let mean = sizes.iter().sum::<f64>() / sizes.len() as f64;
        println!(
            "face short side: min {:.1}, median {:.1}, mean {:.1}, max {:.1}",
            sizes[0],
            sizes[sizes.len() / 2],
            mean,
            sizes[sizes.len() - 1]
        );
        let edges = [0.0, 16.0, 32.0, 64.0, f64::INFINITY];
        for w in edges.windows(2) {
            let n = sizes.iter().filter(|&&s| s >= w[0] && s < w[1]).count();
            println!("  [{:>3}, {:>3}) {n}", w[0], w[1]);
        }
    }
    Ok(())
}

fn train(
    data: &Path,
    out: &Path,
    cfg: &CliConfig,
    resume: Option<&Path>,
    until: Option<usize>,
    exec: Execution,
) -> Result<()> {
    let scenes = read_dataset(data)?;
    let trainer = cfg.trainer(exec);
    let mut state = match resume {
        Some(p) => TrainState::load(p, &trainer.model)?,
        None => TrainState::fresh(&trainer.model, cfg.train.seed)?,
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join("loss.csv");
    let append = resume.is_some() && log_path.is_file();
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    if !append {
        writeln!(log, "{}", loss_csv_header()).map_err(|e| Error::io(&log_path, e))?;
    }
    let start = Instant::now();
    let every = cfg.train.checkpoint_every;
    let end = until.unwrap_or(cfg.train.max_iters);
    eprintln!(
        "training on {} scenes from iteration {} to {}",
        scenes.len(),
        state.iteration,
        end.min(cfg.train.max_iters)
    );
    trainer.run(&mut state, &scenes, end, |st, row| {
        writeln!(log, "{}", row.csv_line()).map_err(|e| Error::io(&log_path, e))?;
        if every > 0 && st.iteration % every == 0 {
            st.save(&out.join(format!("ckpt_{:06}.msfd", st.iteration)))?;
        }
        if st.iteration % 50 == 0 {
            eprintln!(
                "iter {:>6}  loss {:.4}  cls {:.4}  reg {:.4}  lr {:.0e}  {:.0}s",
                row.iter,
                row.loss,
                row.cls,
                row.reg,
                row.lr,
                start.elapsed().as_secs_f64()
            );
        }
        Ok(())
    })?;
    let final_path = out.join("final.msfd");
    state.save(&final_path)?;
    println!("saved {} at iteration {}", final_path.display(), state.iteration);
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, cfg: &CliConfig, pr_out: &Path, exec: Execution) -> Result<()> {
    let tensors = checkpoint::load(ckpt)?;
    let detector = Detector::from_params(cfg.model(), &tensors)?;
    let scenes = read_dataset(data)?;
    let result = evaluate(&detector, &scenes, &cfg.inference, exec)?;
    fs::write(pr_out, result.pr_csv()).map_err(|e| Error::io(pr_out, e))?;
    println!(
        "AP@0.5 {:.4} over {} faces ({} detections){}",
        result.ap,
        result.num_gt,
        result.pr_points.len(),
        if result.no_detections { ", no detections" } else { "" }
    );
    Ok(())
}

fn detect(ckpt: &Path, image_path: &Path, cfg: &CliConfig, ellipses: bool) -> Result<()> {
    let tensors = checkpoint::load(ckpt)?;
    let detector = Detector::from_params(cfg.model(), &tensors)?;
    let image = read_png(image_path)?;
    let (_, h, w) = image.chw()?;
    if h != w {
        return Err(Error::Shape(format!("{} is {w}x{h}; only square images are supported", image_path.display())));
    }
    let size = cfg.backbone.input_size;
    let input = if w == size {
        image
    } else {
        resize_crop(&image, &CropWindow { x0: 0.0, y0: 0.0, side: w as f64 }, size)
    };
    let outputs = detector.infer(&input)?;
    let scale = w as f64 / size as f64;
    let dets: Vec<Detection> = postprocess(&outputs, detector.anchors(), &cfg.inference, size as f64, size as f64)?
        .into_iter()
        .map(|d| Detection {
            bbox: BBox {
                x1: d.bbox.x1 * scale,
                y1: d.bbox.y1 * scale,
                x2: d.bbox.x2 * scale,
                y2: d.bbox.y2 * scale,
            },
            score: d.score,
        })
        .collect();
    print!("{}", detection_lines(&image_path.display().to_string(), &dets, ellipses)?);
    Ok(())
}

fn anchor_stats(cfg: &CliConfig, out: &Path) -> Result<()> {
    let model = cfg.model();
    let anchors = model.anchors();
    let mut sizes = anchors.scales.clone();
    for w in anchors.scales.windows(2) {
        sizes.push((w[0] * w[1]).sqrt());
    }
    sizes.sort_by(f64::total_cmp);
    let n = cfg.backbone.input_size as f64;
    let c = n / 2.0 + 4.0;
    let positions: Vec<(f64, f64)> = (0..=((c / 4.0) as usize)).map(|k| (k as f64 * 4.0, c)).collect();
    let rows = match_histogram(&anchors, &sizes, &positions, &model.assignment);
    fs::write(out, match_rows_to_csv(&rows)).map_err(|e| Error::io(out, e))?;
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}
