use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use glint::config::{load_run_config, Overrides};
use glint::pipeline::{self, EvalOpts, RenderOpts};
use glint::scene::SynthSpec;

#[derive(Parser)]
#[command(
    name = "glint",
    about = "Inverse rendering: SDF surface, factored materials and SG lighting from posed images",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset (images, cameras, ground truth) for one
    /// of the built-in analytic scenes.
    GenScene {
        /// glossy-sphere | lambert-sphere | two-sphere-occlusion
        #[arg(long)]
        scene: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        views: usize,
        #[arg(long, default_value_t = 10)]
        test: usize,
        /// Square image resolution in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Path-tracer samples per pixel.
        #[arg(long, default_value_t = 512)]
        spp: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train one stage (1 geometry+radiance, 2 visibility/indirect
    /// distillation, 3 material decomposition).
    Train {
        #[arg(long)]
        stage: u8,
        /// TOML run config; CLI flags below override its values.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Start over even if a checkpoint for this stage exists.
        #[arg(long, default_value_t = false)]
        fresh: bool,
        #[command(flatten)]
        ov: OverrideArgs,
    },
    /// Render views from a trained run (stage 1 radiance or stage 3
    /// factored material layers).
    Render {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// View index; default renders the test split.
        #[arg(long)]
        view: Option<usize>,
        /// Force stage 1 or 3; default is the highest trained.
        #[arg(long)]
        stage: Option<u8>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract the zero level set of a trained SDF as an ASCII OBJ mesh.
    Mesh {
        #[arg(long)]
        run: PathBuf,
        /// Marching grid resolution (32–512).
        #[arg(long, default_value_t = 256)]
        res: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score one or more runs against a dataset; writes
    /// `run,stage,metric,value` CSV rows and refreshes loss plots.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Run directory; repeat to compare several runs in one CSV.
        #[arg(long, required = true)]
        run: Vec<PathBuf>,
        /// Output CSV (default: <first run>/metrics.csv).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 128)]
        mesh_res: usize,
        #[arg(long, default_value_t = 30000)]
        chamfer_samples: usize,
        #[arg(long, default_value_t = 10)]
        max_views: usize,
    },
    /// Combine evaluated runs into a comparison table (report.md +
    /// combined.csv); pure artifact aggregation, idempotent.
    Report {
        #[arg(long, required = true)]
        run: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Config-file overrides shared by `train`.
#[derive(Args)]
struct OverrideArgs {
    /// desk (default) or full.
    #[arg(long)]
    profile: Option<String>,
    /// Dataset family for the surface-loss weight: dtu | sk3d | shiny | indisg.
    #[arg(long)]
    dataset_profile: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Iterations for the selected stage (stage 2 splits them between the
    /// visibility and indirect nets).
    #[arg(long)]
    iters: Option<u64>,
    /// Rays per batch for the selected stage.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lambda_sur: Option<f64>,
    #[arg(long)]
    lambda_reg: Option<f64>,
    /// Indirect-illumination term in stage 3 (on/off).
    #[arg(long)]
    si: Option<bool>,
    /// Visibility term in stage 3 (on/off).
    #[arg(long)]
    vi: Option<bool>,
    /// Specular-albedo network in stage 3 (on/off).
    #[arg(long)]
    sai: Option<bool>,
    /// Freeze the environment to the dataset ground truth in stage 3.
    #[arg(long)]
    fixed_env: Option<bool>,
    #[arg(long)]
    env_lobes: Option<usize>,
}

impl OverrideArgs {
    fn into_overrides(self) -> Overrides {
        Overrides {
            profile: self.profile,
            dataset_profile: self.dataset_profile,
            data: self.data,
            out: self.out,
            seed: self.seed,
            iters: self.iters,
            batch: self.batch,
            lambda_sur: self.lambda_sur,
            lambda_reg: self.lambda_reg,
            si: self.si,
            vi: self.vi,
            sai: self.sai,
            fixed_env: self.fixed_env,
            env_lobes: self.env_lobes,
        }
    }
}

fn run(cli: Cli) -> glint::Result<()> {
    match cli.cmd {
        Cmd::GenScene { scene, out, views, test, size, spp, seed } => {
            let spec = SynthSpec {
                train_views: views,
                test_views: test,
                width: size,
                height: size,
                spp,
                ..SynthSpec::new(&scene, seed)
            };
            pipeline::gen_scene(&spec, &out)
        }
        Cmd::Train { stage, config, fresh, ov } => {
            let cfg = load_run_config(config.as_deref(), &ov.into_overrides(), stage)?;
            pipeline::run_stage(&cfg, stage, !fresh)
        }
        Cmd::Render { run, data, view, stage, out } => {
            let files = pipeline::render_run(&run, &data, &RenderOpts { view, stage, out })?;
            println!("wrote {} files", files.len());
            Ok(())
        }
        Cmd::Mesh { run, res, out } => pipeline::mesh_run(&run, res, out).map(|_| ()),
        Cmd::Eval { data, run, out, mesh_res, chamfer_samples, max_views } => {
            let opts = EvalOpts { mesh_res, chamfer_samples, max_views };
            pipeline::evaluate(&data, &run, out.as_deref(), &opts).map(|_| ())
        }
        Cmd::Report { run, out } => pipeline::report(&run, &out).map(|_| ()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
