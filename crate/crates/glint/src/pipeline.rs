//! Orchestration: run the three training stages with previews and resume,
//! render trained models, export meshes, and turn finished runs into metric
//! CSVs, plots and reports.
//!
//! Everything here is deterministic for a fixed (config, seed): reruns of any
//! command reproduce metric CSVs byte-identically.

use std::path::{Path, PathBuf};

use crate::ckpt::Checkpoint;
use crate::config::{save_resolved, RawConfig, RunConfig, RUN_CONFIG};
use crate::distill::{train_stage2, STAGE2_CKPT};
use crate::err::{Error, Result};
use crate::imageio::{write_pfm, write_png_display, CsvLog, FloatImage};
use crate::materials::{
    export_env, render_stage3, train_stage3, EnvLight, ShadeFlags, STAGE3_CKPT,
};
use crate::mesh::{extract_mesh, Mesh};
use crate::metrics::{chamfer_points, psnr};
use crate::nets::{Zoo, ZooCfg};
use crate::render::{eikonal_residual_mean, render_stage1, tonemap, train_stage1, STAGE1_CKPT};
use crate::rng::{stream, tag};
use crate::scene::{
    default_env, make_synthetic, sphere_trace, AnalyticScene, Camera, SceneDataset, SynthSpec,
};
use crate::sg::SgMixture;
use crate::svgplot;
use crate::vec3::Vec3;
use rand::Rng;

fn tensor3(pts: &[Vec3]) -> crate::autodiff::Tensor<f32> {
    let mut d = Vec::with_capacity(pts.len() * 3);
    for p in pts {
        d.push(p.x as f32);
        d.push(p.y as f32);
        d.push(p.z as f32);
    }
    crate::autodiff::Tensor::from_vec(pts.len(), 3, d)
}

// ---------------------------------------------------------------------------
// dataset generation

pub fn gen_scene(spec: &SynthSpec, out: &Path) -> Result<()> {
    let data = make_synthetic(spec, out)?;
    println!(
        "wrote {} views ({} train / {} test) to {}",
        data.views.len(),
        data.train_indices().len(),
        data.test_indices().len(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// training

/// Environment used for background pixels during stage-1 training: the
/// generator ground truth when present, else the default fixture mixture
/// (synthetic backgrounds are rendered from exactly this light).
fn background_env(data: &SceneDataset) -> SgMixture {
    data.gt.as_ref().map(|g| g.scene.env.clone()).unwrap_or_else(default_env)
}

fn require_ckpt(dir: &Path, file: &str, stage: u8, needed: u8) -> Result<PathBuf> {
    let p = dir.join(file);
    if !p.exists() {
        return Err(Error::contract(
            "run_stage",
            format!(
                "stage {stage} requires the stage-{needed} checkpoint {} — run `train --stage {needed}` first",
                p.display()
            ),
        ));
    }
    Ok(p)
}

/// Segment boundaries for preview renders: quarters of the run.
fn quarter_marks(total: u64) -> Vec<u64> {
    let mut m: Vec<u64> = (1..=4u64).map(|q| total * q / 4).filter(|&x| x > 0).collect();
    m.dedup();
    m
}

/// A camera to preview on: first test view, else first view.
fn preview_view(data: &SceneDataset) -> usize {
    data.test_indices().first().copied().unwrap_or(0)
}

/// Train one stage into `cfg.out`.  Preconditions are checked before any
/// dataset I/O; previews land in `out/previews/`.
pub fn run_stage(cfg: &RunConfig, stage: u8, resume: bool) -> Result<()> {
    match stage {
        1 => {}
        2 => {
            require_ckpt(&cfg.out, STAGE1_CKPT, 2, 1)?;
        }
        3 => {
            if cfg.stage3.flags.si || cfg.stage3.flags.vi {
                if !cfg.out.join(STAGE2_CKPT).exists() {
                    return Err(Error::contract(
                        "run_stage",
                        format!(
                            "stage 3 with indirect/visibility terms requires the stage-2 checkpoint {} — run `train --stage 2` first (or disable SI and VI)",
                            cfg.out.join(STAGE2_CKPT).display()
                        ),
                    ));
                }
            } else {
                require_ckpt(&cfg.out, STAGE1_CKPT, 3, 1)?;
            }
        }
        other => return Err(Error::Config(format!("stage must be 1, 2 or 3 (got {other})"))),
    }

    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    save_resolved(cfg, &cfg.out.join(RUN_CONFIG))?;
    let data = SceneDataset::load(&cfg.data)?;
    let previews = cfg.out.join("previews");
    std::fs::create_dir_all(&previews).map_err(|e| Error::io(&previews, e))?;

    match stage {
        1 => {
            let env = background_env(&data);
            let mut zoo = Zoo::<f32>::build(cfg.zoo, cfg.seed);
            let mut seg = cfg.stage1;
            let mut seg_resume = resume;
            for mark in quarter_marks(cfg.stage1.iters) {
                seg.iters = mark;
                train_stage1(&mut zoo, &data, &env, &seg, &cfg.out, seg_resume)?;
                seg_resume = true; // later segments continue the checkpoint
                let cam = &data.views[preview_view(&data)].camera;
                let r = render_stage1(&zoo, &env, cam, &seg.sample, cfg.seed)?;
                write_png_display(&previews.join(format!("stage1_{mark:06}.png")), &r.surface)?;
            }
            println!("stage 1 done: {} iters, opacity sharpness κ = {:.1}", cfg.stage1.iters, zoo.kappa());
        }
        2 => {
            let ck = Checkpoint::load(&cfg.out.join(STAGE1_CKPT))?;
            let mut zoo = Zoo::<f32>::build(cfg.zoo, cfg.seed);
            ck.apply(&mut zoo.store)?;
            let rep = train_stage2(&mut zoo, &data, &cfg.stage2, &cfg.out, resume)?;
            println!(
                "stage 2 done: visibility holdout MAE {:.4}, indirect {} ({} surface points, {} secondary hits)",
                rep.vis_holdout_mae,
                match rep.ind_holdout_l1 {
                    Some(l1) => format!("holdout L1 {l1:.4}"),
                    None => "skipped (too few hits)".to_string(),
                },
                rep.n_points,
                rep.n_hits
            );
        }
        3 => {
            let base = if cfg.stage3.flags.si || cfg.stage3.flags.vi { STAGE2_CKPT } else { STAGE1_CKPT };
            let ck = Checkpoint::load(&cfg.out.join(base))?;
            let mut zoo = Zoo::<f32>::build(cfg.zoo, cfg.seed);
            ck.apply(&mut zoo.store)?;
            let gt_env = data.gt.as_ref().map(|g| g.scene.env.clone());
            let mut seg = cfg.stage3;
            let mut seg_resume = resume;
            let mut last = None;
            for mark in quarter_marks(cfg.stage3.iters) {
                seg.iters = mark;
                let rep = train_stage3(&mut zoo, &data, &seg, gt_env.as_ref(), &cfg.out, seg_resume)?;
                seg_resume = true;
                let cam = &data.views[preview_view(&data)].camera;
                let r = render_stage3(&zoo, &rep.env, cam, &seg.sample, &cfg.stage3.flags, cfg.seed)?;
                write_png_display(&previews.join(format!("stage3_{mark:06}.png")), &r.render)?;
                last = Some(rep);
            }
            let rep = last.expect("at least one training segment");
            export_env(&rep.env, &cfg.out.join("env.txt"), &cfg.out.join("env.pfm"), 128, 64)?;
            println!(
                "stage 3 done: rgb L1 {:.4}, latent L1 {:.4}, env exported",
                rep.final_rgb_l1, rep.final_latent_l1
            );
        }
        _ => unreachable!(),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// loading trained models back

/// Highest-stage checkpoint in a run directory.
fn latest_ckpt(run: &Path) -> Result<(u8, PathBuf)> {
    for (stage, file) in [(3u8, STAGE3_CKPT), (2, STAGE2_CKPT), (1, STAGE1_CKPT)] {
        let p = run.join(file);
        if p.exists() {
            return Ok((stage, p));
        }
    }
    Err(Error::contract(
        "load_run",
        format!("no checkpoint found in {} — train a stage first", run.display()),
    ))
}

/// The run's echoed config, or defaults when it was trained by hand.
fn run_raw_config(run: &Path) -> RawConfig {
    RawConfig::load(&run.join(RUN_CONFIG)).unwrap_or_default()
}

fn zoo_cfg_of(raw: &RawConfig) -> ZooCfg {
    match raw.profile.as_deref() {
        Some("full") => ZooCfg::paper(),
        _ => ZooCfg::desk(),
    }
}

fn shade_flags_of(raw: &RawConfig) -> ShadeFlags {
    ShadeFlags {
        si: raw.stage3.si.unwrap_or(true),
        vi: raw.stage3.vi.unwrap_or(true),
        sai: raw.stage3.sai.unwrap_or(true),
    }
}

/// Rebuild the network zoo from a checkpoint; when the checkpoint carries
/// environment parameters they are installed first so the shapes line up,
/// and the decoded mixture is returned.
fn zoo_from_ckpt(raw: &RawConfig, ckpt: &Checkpoint) -> Result<(Zoo<f32>, Option<SgMixture>)> {
    let mut zoo = Zoo::<f32>::build(zoo_cfg_of(raw), ckpt.seed);
    let env = match ckpt.params.iter().find(|b| b.name == "env.lambda") {
        Some(blob) => Some(EnvLight::install(&mut zoo.store, blob.cols as usize)?),
        None => None,
    };
    ckpt.apply(&mut zoo.store)?;
    let mixture = env.map(|e| e.decode(&zoo.store));
    Ok((zoo, mixture))
}

fn load_run(run: &Path) -> Result<(u8, RawConfig, Zoo<f32>, Option<SgMixture>)> {
    let (stage, path) = latest_ckpt(run)?;
    let raw = run_raw_config(run);
    let ck = Checkpoint::load(&path)?;
    let (zoo, env) = zoo_from_ckpt(&raw, &ck)?;
    Ok((stage, raw, zoo, env))
}

// ---------------------------------------------------------------------------
// rendering

pub struct RenderOpts {
    /// Render only this view index (default: all test views, else all).
    pub view: Option<usize>,
    /// Force a stage (1 or 3); default: highest trained.
    pub stage: Option<u8>,
    pub out: Option<PathBuf>,
}

/// Render trained views to `out/renders/`.  Returns the written paths.
pub fn render_run(run: &Path, data_dir: &Path, opts: &RenderOpts) -> Result<Vec<PathBuf>> {
    let data = SceneDataset::load(data_dir)?;
    let (have, raw, zoo, env) = load_run(run)?;
    let stage = opts.stage.unwrap_or(if have >= 3 { 3 } else { 1 });
    if stage == 2 || stage > 3 {
        return Err(Error::Config("render supports stage 1 (radiance) and stage 3 (factored)".into()));
    }
    if stage > have && !(stage == 1 && have >= 1) {
        return Err(Error::contract("render", format!("run has no stage-{stage} checkpoint")));
    }
    let out = opts.out.clone().unwrap_or_else(|| run.join("renders"));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let views: Vec<usize> = match opts.view {
        Some(v) => {
            if v >= data.views.len() {
                return Err(Error::Config(format!("view {v} out of range ({} views)", data.views.len())));
            }
            vec![v]
        }
        None => {
            let t = data.test_indices();
            if t.is_empty() { (0..data.views.len()).collect() } else { t }
        }
    };

    let seed = raw.seed.unwrap_or(7);
    let sample = match raw.profile.as_deref() {
        Some("full") => crate::render::SampleCfg::paper(),
        _ => crate::render::SampleCfg::desk(),
    };
    let mut written = Vec::new();
    let mut emit = |path: PathBuf, img: &FloatImage, display: bool| -> Result<()> {
        if display {
            write_png_display(&path, img)?;
        } else {
            write_pfm(&path, img)?;
        }
        written.push(path);
        Ok(())
    };

    for &v in &views {
        let view = &data.views[v];
        let stem = format!("{}_s{}", view.name, stage);
        if stage == 3 {
            let env = env.as_ref().ok_or_else(|| {
                Error::Checkpoint("stage-3 render needs environment parameters in the checkpoint".into())
            })?;
            let flags = shade_flags_of(&raw);
            let r = render_stage3(&zoo, env, &view.camera, &sample, &flags, seed)?;
            emit(out.join(format!("{stem}_render.png")), &r.render, true)?;
            emit(out.join(format!("{stem}_render.pfm")), &r.render, false)?;
            emit(out.join(format!("{stem}_albedo.png")), &r.albedo, true)?;
            emit(out.join(format!("{stem}_roughness.png")), &r.roughness, true)?;
            emit(out.join(format!("{stem}_specalbedo.png")), &r.spec_albedo, true)?;
            emit(out.join(format!("{stem}_mask.png")), &r.mask, true)?;
        } else {
            let envbg = background_env(&data);
            let r = render_stage1(&zoo, &envbg, &view.camera, &sample, seed)?;
            emit(out.join(format!("{stem}_volume.png")), &r.volume, true)?;
            emit(out.join(format!("{stem}_volume.pfm")), &r.volume, false)?;
            emit(out.join(format!("{stem}_surface.png")), &r.surface, true)?;
            emit(out.join(format!("{stem}_diffuse.png")), &r.diffuse, true)?;
            emit(out.join(format!("{stem}_specular.png")), &r.specular, true)?;
            emit(out.join(format!("{stem}_mask.png")), &r.mask, true)?;
        }
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// mesh export

pub fn mesh_run(run: &Path, res: usize, out: Option<PathBuf>) -> Result<(PathBuf, Mesh)> {
    let (_, _, zoo, _) = load_run(run)?;
    let mesh = extract_sdf_mesh(&zoo, res)?;
    let path = out.unwrap_or_else(|| run.join("mesh.obj"));
    mesh.write_obj(&path)?;
    println!("wrote {} ({} vertices, {} triangles)", path.display(), mesh.vertices.len(), mesh.tris.len());
    Ok((path, mesh))
}

pub fn extract_sdf_mesh(zoo: &Zoo<f32>, res: usize) -> Result<Mesh> {
    let mesh = extract_mesh(
        |pts| {
            let s = zoo.sdf_value(&tensor3(pts))?;
            Ok((0..pts.len()).map(|r| s.get(r, 0) as f64).collect())
        },
        res,
    )?;
    mesh.validate()?;
    Ok(mesh)
}

// ---------------------------------------------------------------------------
// evaluation

#[derive(Clone, Copy, Debug)]
pub struct EvalOpts {
    pub mesh_res: usize,
    pub chamfer_samples: usize,
    /// Cap on evaluated views (test split first).
    pub max_views: usize,
}

impl Default for EvalOpts {
    fn default() -> EvalOpts {
        EvalOpts { mesh_res: 128, chamfer_samples: 30_000, max_views: 10 }
    }
}

fn tonemap_image(img: &FloatImage) -> FloatImage {
    let mut out = img.clone();
    for v in out.data.iter_mut() {
        *v = tonemap(*v as f64) as f32;
    }
    out
}

/// Binary hit mask and per-pixel roughness of the analytic scene through a
/// camera (evaluation masks come from ground truth, not the model under
/// test; roughness is piecewise constant per primitive so tracing it here
/// is exact and needs no stored map).
fn gt_mask_and_roughness(scene: &AnalyticScene, cam: &Camera) -> (FloatImage, FloatImage) {
    let mut m = FloatImage::new(cam.width, cam.height, 1);
    let mut rough = FloatImage::new(cam.width, cam.height, 1);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let ray = cam.ray_for_pixel(x, y);
            if ray.background {
                continue;
            }
            let t0 = ray.t_near.max(0.0);
            if let Some(t) = sphere_trace(scene, ray.origin, ray.dir, t0, ray.t_far, 256, 1e-5) {
                m.pixel_mut(x, y)[0] = 1.0;
                let hit = ray.origin + ray.dir * t;
                rough.pixel_mut(x, y)[0] = scene.material_at(hit).0.roughness as f32;
            }
        }
    }
    (m, rough)
}

/// Views to score: the test split, else everything, capped.
fn eval_views(data: &SceneDataset, cap: usize) -> Vec<usize> {
    let mut v = data.test_indices();
    if v.is_empty() {
        v = (0..data.views.len()).collect();
    }
    v.truncate(cap.max(1));
    v
}

/// Metrics for one finished run.  With ground-truth assets this scores
/// geometry (chamfer), rendering and albedo; without them the report is
/// geometry-only (mesh statistics and the Eikonal residual).
fn eval_one(data: &SceneDataset, run: &Path, opts: &EvalOpts, log: &mut CsvLog) -> Result<()> {
    let name = run
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| run.display().to_string());
    let (stage, raw, zoo, env) = load_run(run)?;
    let mut put = |stage: u8, metric: &str, value: f64| {
        log.push(format!("{name},{stage},{metric},{value:.6}"));
    };

    // geometry (always available)
    let mesh = extract_sdf_mesh(&zoo, opts.mesh_res)?;
    let mut rng = stream(raw.seed.unwrap_or(7), &[tag("eval-eikonal")]);
    let pts: Vec<Vec3> = (0..10_000)
        .map(|_| crate::rng::unit_sphere(&mut rng) * rng.gen::<f64>().cbrt())
        .collect();
    let eik = eikonal_residual_mean(&zoo, &pts)?;
    put(stage, "mesh-vertices", mesh.vertices.len() as f64);
    put(stage, "mesh-triangles", mesh.tris.len() as f64);
    put(stage, "eikonal-mean", eik);

    if let Some(gt) = &data.gt {
        let samples = mesh.sample_surface(opts.chamfer_samples, mesh.content_seed());
        put(stage, "chamfer", chamfer_points(&samples, &gt.surface_points)?);

        let views = eval_views(data, opts.max_views);
        let seed = raw.seed.unwrap_or(7);
        let sample = match raw.profile.as_deref() {
            Some("full") => crate::render::SampleCfg::paper(),
            _ => crate::render::SampleCfg::desk(),
        };
        let envbg = background_env(data);
        let mut psnr_sum = 0.0;
        let mut albedo_sum = 0.0;
        let mut albedo_n = 0usize;
        let mut rough_sum = 0.0;
        let mut spec_mag = 0.0;
        let mut dif_mag = 0.0;
        for &v in &views {
            let cam = &data.views[v].camera;
            let (mask, gt_rough) = gt_mask_and_roughness(&gt.scene, cam);
            let gt_display = tonemap_image(&data.linear[v]);
            if stage >= 3 {
                let env = env.as_ref().ok_or_else(|| {
                    Error::Checkpoint("stage-3 checkpoint lacks environment parameters".into())
                })?;
                let r = render_stage3(&zoo, env, cam, &sample, &shade_flags_of(&raw), seed)?;
                psnr_sum += psnr(&r.render, &gt_display, Some(&mask))?;
                rough_sum += psnr(&r.roughness, &gt_rough, Some(&mask))?;
                if !gt.albedo.is_empty() {
                    albedo_sum += psnr(&r.albedo, &gt.albedo[v], Some(&mask))?;
                    albedo_n += 1;
                }
            } else {
                let r = render_stage1(&zoo, &envbg, cam, &sample, seed)?;
                psnr_sum += psnr(&r.volume, &gt_display, Some(&mask))?;
                spec_mag += r.specular.mean();
                dif_mag += r.diffuse.mean();
            }
        }
        put(stage, "rendering-psnr", psnr_sum / views.len() as f64);
        if albedo_n > 0 {
            put(stage, "albedo-psnr", albedo_sum / albedo_n as f64);
        }
        if stage >= 3 {
            put(stage, "roughness-psnr", rough_sum / views.len() as f64);
        }
        if stage < 3 && dif_mag > 0.0 {
            put(stage, "spec-diffuse-ratio", spec_mag / dif_mag);
        }
    }

    // refresh loss plots for whatever logs this run has
    for file in ["loss_stage1.csv", "loss_stage2_vis.csv", "loss_stage2_ind.csv", "loss_stage3.csv"] {
        let p = run.join(file);
        if p.exists() {
            let logf = CsvLog::load(&p)?;
            let svg = run.join(format!("{}.svg", file.trim_end_matches(".csv")));
            if svgplot::plot_csv(&logf, file.trim_end_matches(".csv"), &svg).is_err() {
                // logs with no numeric rows (aborted runs) simply get no plot
            }
        }
    }
    Ok(())
}

/// Score runs against a dataset; writes `metrics.csv` (header
/// `run,stage,metric,value`) into the first run directory unless `out_csv`
/// says otherwise.
pub fn evaluate(data_dir: &Path, runs: &[PathBuf], out_csv: Option<&Path>, opts: &EvalOpts) -> Result<PathBuf> {
    if runs.is_empty() {
        return Err(Error::Config("eval needs at least one --run directory".into()));
    }
    let data = SceneDataset::load(data_dir)?;
    let mut log = CsvLog::new("run,stage,metric,value");
    for run in runs {
        eval_one(&data, run, opts, &mut log)?;
    }
    let path = out_csv.map(Path::to_path_buf).unwrap_or_else(|| runs[0].join("metrics.csv"));
    log.save(&path)?;
    println!("wrote {} ({} rows)", path.display(), log.rows.len());
    Ok(path)
}

// ---------------------------------------------------------------------------
// report

/// Assemble `report.md` + `combined.csv` from previously computed artifacts
/// (each run's `metrics.csv`); regeneration is idempotent and touches no
/// model state.
pub fn report(runs: &[PathBuf], out_dir: &Path) -> Result<PathBuf> {
    if runs.is_empty() {
        return Err(Error::Config("report needs at least one --run directory".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut combined = CsvLog::new("run,stage,metric,value");
    // run name -> metric -> value (latest stage wins for duplicated metrics)
    let mut table: Vec<(String, Vec<(String, f64)>)> = Vec::new();
    for run in runs {
        let p = run.join("metrics.csv");
        if !p.exists() {
            return Err(Error::contract(
                "report",
                format!("{} has no metrics.csv — run `eval` first", run.display()),
            ));
        }
        let log = CsvLog::load(&p)?;
        let mut metrics: Vec<(String, f64)> = Vec::new();
        for row in &log.rows {
            combined.push(row.clone());
            let f: Vec<&str> = row.split(',').collect();
            if f.len() == 4 {
                if let Ok(v) = f[3].parse::<f64>() {
                    match metrics.iter_mut().find(|(m, _)| m == f[2]) {
                        Some(slot) => slot.1 = v,
                        None => metrics.push((f[2].to_string(), v)),
                    }
                }
            }
        }
        let name = run
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| run.display().to_string());
        table.push((name, metrics));
    }
    combined.save(&out_dir.join("combined.csv"))?;

    let mut cols: Vec<String> = Vec::new();
    for (_, metrics) in &table {
        for (m, _) in metrics {
            if !cols.contains(m) {
                cols.push(m.clone());
            }
        }
    }
    cols.sort();

    let mut md = String::new();
    md.push_str("# Run comparison\n\n");
    md.push_str(&format!("| run | {} |\n", cols.join(" | ")));
    md.push_str(&format!("|---|{}|\n", "---|".repeat(cols.len())));
    for (name, metrics) in &table {
        let cells: Vec<String> = cols
            .iter()
            .map(|c| {
                metrics
                    .iter()
                    .find(|(m, _)| m == c)
                    .map(|(_, v)| format!("{v:.4}"))
                    .unwrap_or_else(|| "—".into())
            })
            .collect();
        md.push_str(&format!("| {name} | {} |\n", cells.join(" | ")));
    }
    md.push_str("\nLoss curves: see `loss_*.svg` beside each run's checkpoints.\n");
    let path = out_dir.join("report.md");
    std::fs::write(&path, md).map_err(|e| Error::io(&path, e))?;
    println!("wrote {}", path.display());
    Ok(path)
}
