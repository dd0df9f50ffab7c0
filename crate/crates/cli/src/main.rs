use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use depthrefine::field::FieldConfig;
use depthrefine::io::{export_obj, read_pfm, write_pfm, write_ppm};
use depthrefine::meshing::build_depth_mesh;
use depthrefine::metrics::compute_metrics;
use depthrefine::pipeline::global_align;
use depthrefine::raster::{apply_vertex_params, render, FieldOutputs, Shading};
use depthrefine::synth::{generate_scene, write_scene, Preset, SceneSpec};
use depthrefine::{Error, PipelineConfig, Scene};

#[derive(Parser, Debug)]
#[command(
    name = "depthrefine",
    version,
    about = "Refine monocular depth into metric multi-view consistent depth"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Refine the reference view's mono depth of a scene.
    Refine(RefineArgs),
    /// Compare a predicted depth map with ground truth.
    Eval(EvalArgs),
    /// Generate a synthetic scene with ground truth.
    Synth(SynthArgs),
    /// Render the scene's reference depth mesh into one of its views.
    Render(RenderArgs),
}

#[derive(Args, Debug)]
struct RefineArgs {
    /// Scene manifest.
    #[arg(long)]
    scene: PathBuf,
    /// Output depth map (PFM).
    #[arg(long)]
    out_depth: PathBuf,
    /// Output mesh (OBJ).
    #[arg(long)]
    out_mesh: Option<PathBuf>,
    /// Mesh downsample factor.
    #[arg(long, default_value_t = 4)]
    d: usize,
    /// Fraction of vertices kept by decimation.
    #[arg(long, default_value_t = 0.5)]
    r: f64,
    #[arg(long, default_value_t = 400)]
    coarse_iters: usize,
    #[arg(long, default_value_t = 700)]
    local_iters: usize,
    #[arg(long, default_value_t = 0.001)]
    lr_coarse: f64,
    #[arg(long, default_value_t = 0.0005)]
    lr_local: f64,
    /// Auxiliary views per local iteration.
    #[arg(long, default_value_t = 22)]
    batch: usize,
    /// Coarse field: mlp-s, mlp-m, mlp-xl, affine or none.
    #[arg(long, default_value = "mlp-s")]
    field: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-iteration loss log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Ground truth beyond this depth (m) is ignored.
    #[arg(long, default_value_t = 7.0)]
    max_depth: f64,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// plane or box-room.
    #[arg(long)]
    preset: String,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 12)]
    views: usize,
    #[arg(long, default_value_t = 5000)]
    points: usize,
    /// Point noise standard deviation, relative to depth.
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    /// Outlier fraction.
    #[arg(long, default_value_t = 0.02)]
    outliers: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 160)]
    width: usize,
    #[arg(long, default_value_t = 120)]
    height: usize,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    /// View id to render into.
    #[arg(long)]
    view: u32,
    #[arg(long)]
    out_image: PathBuf,
    #[arg(long)]
    out_depth: Option<PathBuf>,
}

impl RefineArgs {
    fn config(&self) -> Result<PipelineConfig, Error> {
        Ok(PipelineConfig {
            d: self.d,
            r: self.r,
            coarse_iters: self.coarse_iters,
            local_iters: self.local_iters,
            lr_coarse: self.lr_coarse,
            lr_local: self.lr_local,
            batch: self.batch,
            field: FieldConfig::preset(&self.field)?,
            seed: self.seed,
            ..PipelineConfig::default()
        })
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) => 1,
        Error::Diverged(_) => 3,
        _ => 2,
    }
}

fn metrics_path(out_depth: &Path) -> PathBuf {
    let stem = out_depth.file_stem().unwrap_or_default().to_string_lossy();
    out_depth.with_file_name(format!("{stem}.metrics.txt"))
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn refine(args: &RefineArgs) -> Result<(), Error> {
    let config = args.config()?;
    config.validate()?;
    println!("config {config}");
    let scene = Scene::load(&args.scene)?;
    let result = depthrefine::run(&scene, &config)?;
    write_pfm(&args.out_depth, &result.depth)?;
    if let Some(path) = &args.out_mesh {
        let c = &scene.reference;
        export_obj(path, &result.mesh, &c.intrinsics, &c.pose, scene.near, scene.far)?;
    }
    if let Some(path) = &args.log {
        let mut text = format!("config {config}\n");
        for e in &result.history {
            writeln!(text, "{e}").unwrap();
        }
        write_text(path, &text)?;
    }
    println!("alignment a={} b={}", result.alignment.a, result.alignment.b);
    if let Some((initial, refined)) = &result.metrics {
        println!("initial {}", initial.to_line());
        println!("refined {}", refined.to_line());
        write_text(&metrics_path(&args.out_depth), &refined.to_string())?;
    }
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<(), Error> {
    println!("max_depth={}", args.max_depth);
    let report = compute_metrics(&read_pfm(&args.pred)?, &read_pfm(&args.gt)?, args.max_depth)?;
    print!("{report}");
    Ok(())
}

fn synth(args: &SynthArgs) -> Result<(), Error> {
    let spec = SceneSpec {
        preset: Preset::parse(&args.preset)?,
        width: args.width,
        height: args.height,
        views: args.views,
        points: args.points,
        noise: args.noise,
        outliers: args.outliers,
        seed: args.seed,
        ..SceneSpec::default()
    };
    spec.validate()?;
    println!("spec {spec:?}");
    let generated = generate_scene(&spec)?;
    let manifest = write_scene(&args.out, &generated.scene)?;
    println!("wrote {}", manifest.display());
    Ok(())
}

/// Meshes ground truth when the scene has it, otherwise the globally aligned
/// mono depth, one vertex per pixel, and renders it with vertex colors.
fn render_view(args: &RenderArgs) -> Result<(), Error> {
    println!("scene={} view={}", args.scene.display(), args.view);
    let scene = Scene::load(&args.scene)?;
    let target = std::iter::once(&scene.reference)
        .chain(&scene.aux)
        .find(|v| v.id == args.view)
        .ok_or_else(|| Error::InvalidArgument(format!("scene has no view {}", args.view)))?;
    let depth = match &scene.gt {
        Some(gt) => gt.clone(),
        None => {
            let depths: Vec<f64> = scene.projected_points().iter().map(|p| p.z).collect();
            global_align(&scene.mono, &depths)?.depth
        }
    };
    let reference = scene.reference_camera()?;
    let mesh = build_depth_mesh(
        &depth,
        &scene.reference.image,
        &reference.intrinsics,
        1,
        &reference.proj,
    )?;
    let pos = apply_vertex_params(&mesh, &FieldOutputs::zeros(mesh.len()), &reference.proj)?;
    let out = render(&pos, &mesh, &scene.camera(target)?, &reference, Shading::VertexColors);
    write_ppm(&args.out_image, &out.color)?;
    if let Some(path) = &args.out_depth {
        write_pfm(path, &out.depth)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            if code == 1 {
                eprint!("error: {}", e.render());
            } else {
                print!("{}", e.render());
            }
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Refine(a) => refine(a),
        Command::Eval(a) => eval(a),
        Command::Synth(a) => synth(a),
        Command::Render(a) => render_view(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refine_defaults_match_pipeline_config() {
        let cli = Cli::try_parse_from(["depthrefine", "refine", "--scene", "s", "--out-depth", "o"]).unwrap();
        let Command::Refine(a) = cli.command else { panic!() };
        assert_eq!(a.config().unwrap(), PipelineConfig::default());
    }

    #[test]
    fn synth_defaults_match_scene_spec() {
        let cli = Cli::try_parse_from(["depthrefine", "synth", "--preset", "plane", "--out", "x"]).unwrap();
        let Command::Synth(a) = cli.command else { panic!() };
        let s = SceneSpec::default();
        assert_eq!(
            (a.views, a.points, a.width, a.height, a.seed),
            (s.views, s.points, s.width, s.height, s.seed)
        );
        assert_eq!((a.noise, a.outliers), (s.noise, s.outliers));
    }

    #[test]
    fn metrics_file_sits_next_to_depth() {
        assert_eq!(metrics_path(Path::new("out/d.pfm")), PathBuf::from("out/d.metrics.txt"));
    }
}
