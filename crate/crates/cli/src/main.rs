use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use panoformer::checks::{self, CheckModule};
use panoformer::geometry::{build_stlm_grid, default_face_size, erp_to_cube, pixel_pitch, CubeFace};
use panoformer::io::{
    grid_overlay, read_pfm, read_ppm, write_flow_dump, write_grid_dump, write_pfm, write_ppm, RgbImage,
};
use panoformer::metrics::{rmse_and_deltas, MetricReport, PolarErrorMode};
use panoformer::train::{train_toy, write_trace_csv, TrainConfig};
use panoformer::{checkpoint, DepthMap};

#[derive(Parser)]
#[command(name = "panoformer", version, about = "Panoramic depth estimation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare a predicted depth map with ground truth.
    Metrics {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Aggregate polar errors as sqrt(mean |e|) instead of sqrt(mean e^2).
        #[arg(long)]
        prmse_literal: bool,
        /// Cube face resolution for P-RMSE (default: width / 4).
        #[arg(long)]
        face_size: Option<usize>,
        /// Also print a human-readable table.
        #[arg(long)]
        table: bool,
    },
    /// Split an ERP image (PFM or PPM) into six cube faces.
    E2c {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        face_size: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write the tangent-patch sampling grid of a resolution.
    GridDump {
        #[arg(long)]
        width: usize,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also draw the grid into a PPM image.
        #[arg(long)]
        overlay: Option<PathBuf>,
        /// Angular steps in radians (default: one pixel).
        #[arg(long)]
        delta_theta: Option<f64>,
        #[arg(long)]
        delta_phi: Option<f64>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        /// kernels, leff, psa, pst or model; all when omitted.
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on synthetic scenes.
    TrainToy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write the first block's token flows after training.
        #[arg(long)]
        flows: Option<PathBuf>,
        /// Print the loss every N steps to stderr (0 disables).
        #[arg(long, default_value_t = 100)]
        progress: usize,
    },
    /// Predict depth for an RGB panorama.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        flows: Option<PathBuf>,
    },
}

fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("cannot open {}", path.display()))?,
    ))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

fn load_pfm(path: &Path) -> anyhow::Result<DepthMap> {
    read_pfm(&mut open(path)?).with_context(|| format!("reading {}", path.display()))
}

fn is_ppm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
}

fn metrics(gt: &Path, pred: &Path, literal: bool, face_size: Option<usize>, table: bool) -> anyhow::Result<()> {
    let mut g = load_pfm(gt)?;
    let p = load_pfm(pred)?;
    // zero or negative depth marks missing ground truth
    for (m, v) in g.valid_mask.iter_mut().zip(&g.values) {
        *m = *m && *v > 0.0;
    }
    let mode = if literal {
        PolarErrorMode::Literal
    } else {
        PolarErrorMode::Squared
    };
    let r = MetricReport::evaluate(&g, &p, face_size, mode)?;
    println!("{r}");
    if table {
        for (name, v) in [
            ("RMSE", r.rmse),
            ("delta<1.25", r.delta1),
            ("delta<1.25^2", r.delta2),
            ("delta<1.25^3", r.delta3),
            (if literal { "P-RMSE (literal)" } else { "P-RMSE" }, r.p_rmse),
            ("LRCE", r.lrce),
        ] {
            println!("{name:<18}{v:>12.6}");
        }
        println!("{:<18}{:>12}", "valid pixels", r.valid_pixel_count);
    }
    Ok(())
}

fn e2c(input: &Path, face_size: Option<usize>, out_dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
    if is_ppm(input) {
        let img = read_ppm(&mut open(input)?)?;
        let fs_ = face_size.unwrap_or_else(|| default_face_size(img.width));
        let t = img.to_tensor();
        let n = img.width * img.height;
        let planes = (0..3)
            .map(|c| erp_to_cube(&t.data[c * n..(c + 1) * n], img.width, img.height, fs_))
            .collect::<panoformer::Result<Vec<_>>>()?;
        for face in CubeFace::ALL {
            let mut out = RgbImage::new(fs_, fs_);
            for i in 0..fs_ * fs_ {
                for c in 0..3 {
                    out.data[3 * i + c] = (planes[c].face(face)[i].clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
            let path = out_dir.join(format!("{}.ppm", face.name()));
            let mut w = create(&path)?;
            write_ppm(&mut w, &out)?;
            w.flush()?;
        }
        println!("faces=6 face_size={fs_} format=ppm out_dir={}", out_dir.display());
    } else {
        let d = load_pfm(input)?;
        let fs_ = face_size.unwrap_or_else(|| default_face_size(d.width));
        let values: Vec<f64> = d
            .values
            .iter()
            .zip(&d.valid_mask)
            .map(|(v, &m)| if m { *v } else { 0.0 })
            .collect();
        let cube = erp_to_cube(&values, d.width, d.height, fs_)?;
        for face in CubeFace::ALL {
            let map = DepthMap::new(fs_, fs_, cube.face(face).to_vec())?;
            let path = out_dir.join(format!("{}.pfm", face.name()));
            let mut w = create(&path)?;
            write_pfm(&mut w, &map)?;
            w.flush()?;
        }
        println!("faces=6 face_size={fs_} format=pfm out_dir={}", out_dir.display());
    }
    Ok(())
}

fn grid_dump(
    width: usize,
    height: usize,
    out: &Path,
    overlay: Option<&Path>,
    dt: Option<f64>,
    dp: Option<f64>,
) -> anyhow::Result<()> {
    let (pt, pp) = pixel_pitch(width.max(1), height.max(1));
    let grid = build_stlm_grid(width, height, dt.unwrap_or(pt), dp.unwrap_or(pp))?;
    let mut w = create(out)?;
    write_grid_dump(&mut w, &grid)?;
    w.flush()?;
    if let Some(path) = overlay {
        let scale = (1024 / width.max(1)).clamp(1, 16);
        let mut w = create(path)?;
        write_ppm(&mut w, &grid_overlay(&grid, scale))?;
        w.flush()?;
    }
    println!(
        "width={width} height={height} tokens=9 delta_theta={:.9} delta_phi={:.9} out={}",
        grid.delta_theta,
        grid.delta_phi,
        out.display()
    );
    Ok(())
}

fn gradcheck(module: Option<&str>, seed: u64) -> anyhow::Result<()> {
    let modules = match module {
        Some(m) => vec![m.parse::<CheckModule>()?],
        None => CheckModule::ALL.to_vec(),
    };
    let mut failed = Vec::new();
    for m in modules {
        for r in checks::run(m, seed)? {
            let status = if r.passed() { "pass" } else { "fail" };
            println!(
                "module={m} check={} max_rel_err={:.3e} entries={} status={status}",
                r.name, r.report.max_rel_error, r.report.entries_checked
            );
            if !r.passed() {
                failed.push(r.name);
            }
        }
    }
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(","));
    }
    Ok(())
}

fn train(
    config: &Path,
    out: Option<&Path>,
    trace: Option<&Path>,
    flows: Option<&Path>,
    progress: usize,
) -> anyhow::Result<()> {
    let text = fs::read_to_string(config).with_context(|| format!("cannot read {}", config.display()))?;
    let cfg: TrainConfig = serde_json::from_str(&text)
        .map_err(panoformer::Error::from)
        .with_context(|| format!("parsing {}", config.display()))?;
    let out = out.map(Path::to_path_buf).or_else(|| cfg.checkpoint.clone());
    let trace = trace.map(Path::to_path_buf).or_else(|| cfg.trace.clone());
    let result = train_toy(&cfg, |step, loss| {
        if progress > 0 && (step % progress == 0 || step + 1 == cfg.steps) {
            eprintln!("step={step} loss={loss:.6e}");
        }
    })?;
    if let Some(path) = &trace {
        write_trace_csv(create(path)?, &result.trace)?;
    }
    if let Some(path) = &out {
        let mut w = create(path)?;
        checkpoint::write_checkpoint(&mut w, &result.model)?;
        w.flush()?;
    }
    let scene = &cfg.scene_list()[0];
    let (rgb, gt) = scene.render(cfg.model.input_width, cfg.model.input_height)?;
    let pred = result.model.forward(&rgb)?;
    let t = rmse_and_deltas(&gt, &pred)?;
    let (lo, hi) = gt.min_max().unwrap_or((0.0, 0.0));
    let field = result.model.first_block_flows(&rgb)?;
    if let Some(path) = flows {
        let mut w = create(path)?;
        write_flow_dump(&mut w, &field)?;
        w.flush()?;
    }
    let last = result.trace.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "steps={} final_loss={last:.6e} rmse={:.6} depth_range={:.6} rmse_fraction={:.6} max_flow={:.6e}",
        result.trace.len(),
        t.rmse,
        hi - lo,
        t.rmse / (hi - lo),
        field.max_abs()
    );
    Ok(())
}

fn infer(ckpt: &Path, input: &Path, out: &Path, flows: Option<&Path>) -> anyhow::Result<()> {
    let model = checkpoint::read_checkpoint(&mut open(ckpt)?)
        .with_context(|| format!("reading {}", ckpt.display()))?;
    let img = read_ppm(&mut open(input)?).with_context(|| format!("reading {}", input.display()))?;
    let rgb = img.to_tensor();
    let depth = model.forward(&rgb)?;
    let mut w = create(out)?;
    write_pfm(&mut w, &depth)?;
    w.flush()?;
    if let Some(path) = flows {
        let mut w = create(path)?;
        write_flow_dump(&mut w, &model.first_block_flows(&rgb)?)?;
        w.flush()?;
    }
    let (lo, hi) = depth.min_max().unwrap_or((f64::NAN, f64::NAN));
    println!(
        "width={} height={} min={lo:.6} max={hi:.6} out={}",
        depth.width,
        depth.height,
        out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Metrics {
            gt,
            pred,
            prmse_literal,
            face_size,
            table,
        } => metrics(&gt, &pred, prmse_literal, face_size, table),
        Command::E2c {
            input,
            face_size,
            out_dir,
        } => e2c(&input, face_size, &out_dir),
        Command::GridDump {
            width,
            height,
            out,
            overlay,
            delta_theta,
            delta_phi,
        } => grid_dump(width, height, &out, overlay.as_deref(), delta_theta, delta_phi),
        Command::Gradcheck { module, seed } => gradcheck(module.as_deref(), seed),
        Command::TrainToy {
            config,
            out,
            trace,
            flows,
            progress,
        } => train(&config, out.as_deref(), trace.as_deref(), flows.as_deref(), progress),
        Command::Infer {
            ckpt,
            input,
            out,
            flows,
        } => infer(&ckpt, &input, &out, flows.as_deref()),
    }
}

fn error_line(kind: &str, message: &str) -> String {
    let message = message.replace('\n', " ");
    format!("error kind={kind} message={}", serde_json::Value::from(message.trim()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let first = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("{}", error_line("usage", first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .downcast_ref::<panoformer::Error>()
                .map(|e| e.kind())
                .or_else(|| e.downcast_ref::<std::io::Error>().map(|_| "io"))
                .unwrap_or("failed");
            eprintln!("{}", error_line(kind, &format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}
