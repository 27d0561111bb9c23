//! End-to-end verification gates.  Runs without the libtest harness so every
//! gate prints exactly one `[PASS]`/`[FAIL]` line on the console; the process
//! exits nonzero when a hard gate fails.
//!
//! The training gates are expensive (full desk-profile runs), so their
//! artifacts are cached under `target/tmp/acceptance/` keyed by the run
//! config: a warmed tree verifies in minutes, a clean checkout retrains
//! everything.  Cached runs are trusted only when the echoed `run.toml`
//! matches the gate's config (anything stale is wiped and retrained).
//! Optional CLI args act as substring filters on gate names.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use glint::autodiff::{Tape, Tensor};
use glint::ckpt::Checkpoint;
use glint::config::{resolve, save_resolved, Overrides, RawConfig, RunConfig, RUN_CONFIG};
use glint::imageio::FloatImage;
use glint::materials::{shade_direct, visibility_lobes, STAGE3_CKPT};
use glint::mesh::{extract_mesh, Mesh};
use glint::metrics::{chamfer, psnr};
use glint::nets::{Act, InputSpec, Mlp, MlpCfg, OutTransform, ParamStore, TapeIn, Zoo, ZooCfg};
use glint::optim::Adam;
use glint::pipeline::{evaluate, run_stage, EvalOpts};
use glint::render::{tonemap, STAGE1_CKPT};
use glint::rng::{stream, tag, unit_sphere};
use glint::scene::{
    make_synthetic, preset, sample_surface_points, AnalyticScene, BrdfParams, Camera, Primitive,
    Shape, SynthSpec,
};
use glint::sg::{sg_inner_product, integral_norm, SgMixture, SphericalGaussian};
use glint::tracer::{brdf_eval, mc_render, trace_primary, visibility_binary, TraceOpts};
use glint::vec3::{v3, Vec3};
use rand::Rng;

type GateResult = Result<String, String>;

struct Gate {
    name: &'static str,
    hard: bool,
    run: fn() -> GateResult,
}

fn main() {
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .map(|a| a.to_lowercase())
        .collect();
    let gates = [
        Gate { name: "metric closed forms", hard: true, run: metric_closed_forms },
        Gate { name: "SG inner product vs Monte Carlo", hard: true, run: sg_inner_product_vs_mc },
        Gate { name: "backward pass vs finite differences", hard: true, run: backward_vs_fd },
        Gate { name: "SG shading vs path-traced reference", hard: true, run: sg_shading_vs_reference },
        Gate { name: "train/eval determinism", hard: true, run: determinism },
        Gate { name: "distilled visibility vs occlusion oracle", hard: true, run: visibility_vs_oracle },
        Gate { name: "recovered geometry vs analytic surface", hard: true, run: geometry_vs_analytic },
        Gate { name: "specular branch idle on matte scene", hard: false, run: matte_decomposition },
        Gate { name: "albedo recovery under known light", hard: true, run: albedo_recovery },
        Gate { name: "specular-albedo net helps rendering", hard: true, run: sai_ablation },
    ];

    let mut hard_fails = 0;
    for g in &gates {
        if !filters.is_empty() && !filters.iter().any(|f| g.name.to_lowercase().contains(f)) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(g.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("[PASS] {}: {detail}", g.name),
            Err(detail) if g.hard => {
                println!("[FAIL] {}: {detail}", g.name);
                hard_fails += 1;
            }
            Err(detail) => println!("[FAIL] {}: {detail} (logged, not gating)", g.name),
        }
    }
    if hard_fails > 0 {
        std::process::exit(101);
    }
}

fn fmt_min(t: Instant) -> String {
    format!("{:.1} min", t.elapsed().as_secs_f64() / 60.0)
}

// ---------------------------------------------------------------------------
// cached fixtures

fn acc_root() -> &'static Path {
    static R: OnceLock<PathBuf> = OnceLock::new();
    R.get_or_init(|| {
        let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
        std::fs::create_dir_all(&d).unwrap();
        d
    })
}

/// Synthetic dataset at the standard fixture size (50 train + 10 test,
/// 64×64, 512 spp, seed 7), generated on first use.
fn dataset(scene: &str, short: &str) -> PathBuf {
    let dir = acc_root().join(format!("data-{short}"));
    if !dir.join("cameras.json").exists() {
        let t = Instant::now();
        make_synthetic(&SynthSpec::new(scene, 7), &dir).unwrap();
        println!("  (generated {short} dataset in {})", fmt_min(t));
    }
    dir
}

fn desk_overrides(data: &Path, out: &Path) -> Overrides {
    Overrides {
        data: Some(data.to_path_buf()),
        out: Some(out.to_path_buf()),
        seed: Some(7),
        ..Default::default()
    }
}

/// Train `stage` into `cfg.out` unless a current checkpoint is already
/// cached.  A cached dir whose echoed config does not byte-match `cfg` is
/// stale (written by older code or other settings) and is wiped.
fn ensure_trained(cfg: &RunConfig, stage: u8, ckpt: &str) {
    let run_toml = cfg.out.join(RUN_CONFIG);
    if run_toml.exists() {
        let tmp = cfg.out.join("run.toml.expect");
        save_resolved(cfg, &tmp).unwrap();
        let same = std::fs::read(&run_toml).unwrap() == std::fs::read(&tmp).unwrap();
        std::fs::remove_file(&tmp).ok();
        if !same {
            println!("  (cached run at {} is stale; retraining)", cfg.out.display());
            std::fs::remove_dir_all(&cfg.out).unwrap();
        }
    }
    if cfg.out.join(ckpt).exists() {
        return;
    }
    let t = Instant::now();
    run_stage(cfg, stage, true).unwrap();
    println!("  (trained stage {stage} at {} in {})", cfg.out.display(), fmt_min(t));
}

fn glossy_s1() -> PathBuf {
    let data = dataset("glossy-sphere", "glossy");
    let out = acc_root().join("glossy-s1");
    let cfg = resolve(&RawConfig::default(), &desk_overrides(&data, &out), 1).unwrap();
    ensure_trained(&cfg, 1, STAGE1_CKPT);
    out
}

fn lambert_s1() -> PathBuf {
    let data = dataset("lambert-sphere", "lambert");
    let out = acc_root().join("lambert-s1");
    let cfg = resolve(&RawConfig::default(), &desk_overrides(&data, &out), 1).unwrap();
    ensure_trained(&cfg, 1, STAGE1_CKPT);
    out
}

/// Material-stage run seeded from an existing geometry checkpoint.  All
/// variants disable the secondary terms: the fixture scenes are convex, so
/// self-occlusion and interreflection are identically absent and the
/// distillation stage would train on nothing.
fn stage3_run(name: &str, data: &Path, s1: &Path, sai: bool, fixed_env: bool) -> PathBuf {
    let out = acc_root().join(name);
    let mut ov = desk_overrides(data, &out);
    ov.si = Some(false);
    ov.vi = Some(false);
    if !sai {
        ov.sai = Some(false);
    }
    if fixed_env {
        ov.fixed_env = Some(true);
    }
    let cfg = resolve(&RawConfig::default(), &ov, 3).unwrap();
    if !out.join(STAGE3_CKPT).exists() {
        std::fs::create_dir_all(&out).unwrap();
        std::fs::copy(s1.join(STAGE1_CKPT), out.join(STAGE1_CKPT)).unwrap();
    }
    ensure_trained(&cfg, 3, STAGE3_CKPT);
    out
}

/// `metric` value for `run` from an `evaluate` CSV.
fn metric_from(csv: &Path, run: &str, metric: &str) -> f64 {
    let text = std::fs::read_to_string(csv).unwrap();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() == 4 && f[0] == run && f[2] == metric {
            return f[3].parse().unwrap();
        }
    }
    panic!("metric {metric} for run {run} missing from {}:\n{text}", csv.display());
}

// ---------------------------------------------------------------------------
// gate: metric closed forms

fn metric_closed_forms() -> GateResult {
    let m = extract_mesh(|pts| Ok(pts.iter().map(|p| p.norm() - 0.5).collect()), 64).unwrap();
    let self_d = chamfer(&m, &m, 10_000).unwrap();
    if self_d > 1e-6 {
        return Err(format!("self-chamfer {self_d:.2e} > 1e-6"));
    }

    let square = |z: f64| Mesh {
        vertices: vec![v3(0.0, 0.0, z), v3(1.0, 0.0, z), v3(0.0, 1.0, z), v3(1.0, 1.0, z)],
        tris: vec![[0, 1, 3], [0, 3, 2]],
    };
    let off = chamfer(&square(0.0), &square(1.0), 30_000).unwrap();
    if (off - 1.0).abs() > 0.02 {
        return Err(format!("offset-plane chamfer {off:.4} outside 1.0 ± 2%"));
    }

    let a = FloatImage::new(32, 32, 3);
    let mut b = FloatImage::new(32, 32, 3);
    for v in b.data.iter_mut() {
        *v = 0.1;
    }
    let db = psnr(&a, &b, None).unwrap();
    if (db - 20.0).abs() > 0.01 {
        return Err(format!("PSNR at MSE 0.01 = {db:.4} dB, want 20.00 ± 0.01"));
    }
    Ok(format!(
        "self-chamfer {self_d:.1e}, offset-plane chamfer {off:.4}, PSNR(MSE 0.01) {db:.3} dB"
    ))
}

// ---------------------------------------------------------------------------
// gate: SG inner product vs Monte Carlo

/// von Mises–Fisher direction sample with concentration λ around `xi`.
fn sample_vmf(xi: Vec3, lambda: f64, rng: &mut impl Rng) -> Vec3 {
    let u: f64 = rng.gen();
    let t = 1.0 + (u + (1.0 - u) * (-2.0 * lambda).exp()).ln() / lambda;
    let phi = 2.0 * std::f64::consts::PI * rng.gen::<f64>();
    let (b1, b2) = xi.onb();
    let s = (1.0 - t * t).max(0.0).sqrt();
    xi * t + (b1 * phi.cos() + b2 * phi.sin()) * s
}

fn sg_inner_product_vs_mc() -> GateResult {
    let mut rng = stream(42, &[tag("acc-sg")]);
    let n = 1_000_000usize;
    let mut worst = 0.0f64;
    for pair in 0..20 {
        let rand_lobe = |rng: &mut glint::rng::Stream| SphericalGaussian {
            xi: unit_sphere(rng),
            lambda: 1.0 + 99.0 * rng.gen::<f64>(),
            mu: v3(
                0.1 + 1.9 * rng.gen::<f64>(),
                0.1 + 1.9 * rng.gen::<f64>(),
                0.1 + 1.9 * rng.gen::<f64>(),
            ),
        };
        let a = rand_lobe(&mut rng);
        let b = rand_lobe(&mut rng);
        let want = sg_inner_product(&a, &b);

        // importance-sample from the sharper lobe; the flat one is the
        // integrand left over after dividing by the vMF density
        let (s, o) = if a.lambda >= b.lambda { (&a, &b) } else { (&b, &a) };
        let mut acc = Vec3::ZERO;
        for _ in 0..n {
            let w = sample_vmf(s.xi, s.lambda, &mut rng);
            acc += o.mu * (o.lambda * (w.dot(o.xi) - 1.0)).exp();
        }
        let est = s.mu.mul_elem(acc) * (integral_norm(s.lambda) / n as f64);
        for (mc, cf) in [(est.x, want.x), (est.y, want.y), (est.z, want.z)] {
            let rel = (mc - cf).abs() / cf.abs().max(1e-300);
            worst = worst.max(rel);
            if rel > 0.01 {
                return Err(format!(
                    "pair {pair}: MC {mc:.6e} vs closed form {cf:.6e} (rel {rel:.4})"
                ));
            }
        }
    }
    Ok(format!("20 random pairs, λ ∈ [1,100], 10⁶ samples each: worst rel err {worst:.2e} ≤ 1%"))
}

// ---------------------------------------------------------------------------
// gate: backward pass vs central finite differences

fn backward_vs_fd() -> GateResult {
    let mut rng = stream(2024, &[tag("acc-fd")]);
    let mut worst = 0.0f64;
    for net in 0..20 {
        // random small architecture from the same building blocks the model
        // uses; smooth activations keep finite differences well-posed
        let groups = 1 + (rng.gen::<u32>() % 2) as usize;
        let inputs: Vec<InputSpec> = (0..groups)
            .map(|_| {
                let dim = 1 + (rng.gen::<u32>() % 3) as usize;
                match rng.gen::<u32>() % 3 {
                    0 => InputSpec::raw(dim),
                    1 => InputSpec::pe(dim, 2),
                    _ => InputSpec::pe(dim, 4),
                }
            })
            .collect();
        let depth = 1 + (rng.gen::<u32>() % 3) as usize;
        let cfg = MlpCfg {
            name: format!("fd{net}"),
            inputs,
            hidden: 4 + (rng.gen::<u32>() % 9) as usize,
            depth,
            skip_at: if depth >= 2 && rng.gen::<bool>() { Some(1) } else { None },
            out: 1 + (rng.gen::<u32>() % 3) as usize,
            act: Act::Softplus,
            transform: if rng.gen::<bool>() { OutTransform::Sigmoid } else { OutTransform::None },
            geometric: if rng.gen::<u32>() % 4 == 0 { Some(0.5) } else { None },
        };
        let mut store = ParamStore::<f64>::new();
        let mlp = Mlp::build(cfg.clone(), &mut store, rng.gen());

        let rows = 6usize;
        let xs: Vec<Tensor<f64>> = cfg
            .inputs
            .iter()
            .map(|g| {
                let d: Vec<f64> = (0..rows * g.dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
                Tensor::from_vec(rows, g.dim, d)
            })
            .collect();
        let loss_of = |store: &ParamStore<f64>| -> f64 {
            let mut tp = Tape::new();
            let pn = store.nodes_on(&mut tp, |_| true);
            let ins: Vec<TapeIn<f64>> = xs.iter().map(|t| TapeIn::Raw(t.clone())).collect();
            let tr = mlp.forward(&mut tp, &pn, &ins);
            let sq = tp.mul(tr.out, tr.out);
            let l = tp.mean_all(sq);
            tp.val(l).get(0, 0)
        };

        // analytic gradients once
        let mut tp = Tape::new();
        let pn = store.nodes_on(&mut tp, |_| true);
        let ins: Vec<TapeIn<f64>> = xs.iter().map(|t| TapeIn::Raw(t.clone())).collect();
        let tr = mlp.forward(&mut tp, &pn, &ins);
        let sq = tp.mul(tr.out, tr.out);
        let l = tp.mean_all(sq);
        let grads = tp.backward(l);

        for _ in 0..10 {
            let id = rng.gen::<usize>() % store.len();
            let (r, c) = {
                let t = store.tensor(id);
                (rng.gen::<usize>() % t.rows(), rng.gen::<usize>() % t.cols())
            };
            let g_ad = grads.get(pn[id]).map(|g| g.get(r, c)).unwrap_or(0.0);

            let w0 = store.tensor(id).get(r, c);
            let h = 1e-5 * (1.0 + w0.abs());
            let mut probe = store.clone();
            let k = r * probe.tensor(id).cols() + c;
            probe.tensor_mut(id).data_mut()[k] = w0 + h;
            let lp = loss_of(&probe);
            probe.tensor_mut(id).data_mut()[k] = w0 - h;
            let lm = loss_of(&probe);
            let g_fd = (lp - lm) / (2.0 * h);

            let rel = (g_ad - g_fd).abs() / g_ad.abs().max(g_fd.abs()).max(1e-3);
            worst = worst.max(rel);
            if rel > 1e-4 {
                return Err(format!(
                    "net {net} param {:?}[{r},{c}]: backward {g_ad:.8e} vs FD {g_fd:.8e} (rel {rel:.2e})",
                    store.name(id)
                ));
            }
        }
    }
    Ok(format!("20 random networks × 10 parameters: worst rel err {worst:.1e} ≤ 1e-4"))
}

// ---------------------------------------------------------------------------
// gate: SG shading vs path-traced reference

fn ball_scene(albedo: Vec3, rough: f64, spec: f64) -> AnalyticScene {
    AnalyticScene {
        name: "shading-probe".into(),
        primitives: vec![Primitive {
            shape: Shape::Sphere { center: Vec3::ZERO, radius: 0.5 },
            brdf: BrdfParams::new(albedo, rough),
            specular_scale: spec,
        }],
        env: SgMixture::new(vec![SphericalGaussian {
            xi: v3(0.45, -0.6, 0.66).normalized(),
            lambda: 10.0,
            mu: v3(2.6, 2.4, 2.2),
        }]),
    }
}

/// Closed-form image: analytic hit points shaded with the SG pipeline under
/// full visibility, against the same scene path-traced without shadow rays.
fn shading_psnr(scene: &AnalyticScene, cam: &Camera) -> f64 {
    let mut sg_img = FloatImage::new(cam.width, cam.height, 3);
    let mut mask = FloatImage::new(cam.width, cam.height, 1);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let ray = cam.ray_for_pixel(x, y);
            if ray.background {
                continue;
            }
            if let Some((_, p)) = trace_primary(scene, ray.origin, ray.dir, ray.t_near.max(0.0), ray.t_far) {
                let n = scene.normal(p);
                let wo = -ray.dir;
                let (brdf, ss) = scene.material_at(p);
                let (dif, spc) = shade_direct(n, wo, brdf, Vec3::splat(ss), &scene.env, |_| 1.0);
                let rgb = dif + spc;
                let px = sg_img.pixel_mut(x, y);
                px[0] = rgb.x as f32;
                px[1] = rgb.y as f32;
                px[2] = rgb.z as f32;
                mask.pixel_mut(x, y)[0] = 1.0;
            }
        }
    }
    let opts = TraceOpts { spp: 4096, bounces: 0, shadows: false, seed: 17, view_id: 0 };
    let (mc, _var) = mc_render(scene, cam, &opts);
    let display = |img: &FloatImage| {
        let mut o = img.clone();
        for v in o.data.iter_mut() {
            *v = tonemap(*v as f64) as f32;
        }
        o
    };
    psnr(&display(&sg_img), &display(&mc), Some(&mask)).unwrap()
}

fn sg_shading_vs_reference() -> GateResult {
    let cam = Camera::look_at(v3(1.8, -2.0, 1.2), Vec3::ZERO, 64, 64, 105.0);
    let lambert = shading_psnr(&ball_scene(v3(0.75, 0.55, 0.35), 0.6, 0.0), &cam);
    let ggx = shading_psnr(&ball_scene(v3(0.4, 0.42, 0.45), 0.3, 1.0), &cam);
    if lambert < 28.0 {
        return Err(format!("Lambertian sphere {lambert:.2} dB < 28 dB vs 4096-spp reference"));
    }
    if ggx < 25.0 {
        return Err(format!("GGX r=0.3 sphere {ggx:.2} dB < 25 dB vs 4096-spp reference"));
    }
    Ok(format!("Lambertian {lambert:.2} dB ≥ 28, GGX r=0.3 {ggx:.2} dB ≥ 25 (4096-spp reference)"))
}

// ---------------------------------------------------------------------------
// gate: determinism

fn determinism() -> GateResult {
    let data = {
        let dir = acc_root().join("data-tiny");
        if !dir.join("cameras.json").exists() {
            let spec = SynthSpec {
                train_views: 3,
                test_views: 1,
                width: 16,
                height: 16,
                spp: 16,
                ..SynthSpec::new("glossy-sphere", 5)
            };
            make_synthetic(&spec, &dir).unwrap();
        }
        dir
    };

    let opts = EvalOpts { mesh_res: 48, chamfer_samples: 2000, max_views: 1 };
    let train_and_eval = |parent: &Path| -> (Vec<u8>, Vec<u8>, Vec<u8>) {
        let run = parent.join("run");
        std::fs::remove_dir_all(parent).ok();
        let mut cfg = resolve(&RawConfig::default(), &desk_overrides(&data, &run), 1).unwrap();
        cfg.stage1.iters = 60;
        cfg.stage1.batch_rays = 16;
        cfg.stage1.ckpt_every = 30;
        run_stage(&cfg, 1, true).unwrap();
        let csv = evaluate(&data, &[run.clone()], None, &opts).unwrap();
        (
            std::fs::read(run.join(STAGE1_CKPT)).unwrap(),
            std::fs::read(run.join("loss_stage1.csv")).unwrap(),
            std::fs::read(csv).unwrap(),
        )
    };
    let a = train_and_eval(&acc_root().join("det-a"));
    let b = train_and_eval(&acc_root().join("det-b"));
    if a.0 != b.0 {
        return Err("rerun produced a different checkpoint".into());
    }
    if a.1 != b.1 {
        return Err("rerun produced a different loss CSV".into());
    }
    if a.2 != b.2 {
        return Err("rerun produced a different metrics CSV".into());
    }

    // re-evaluating an existing run must also be byte-stable
    let run = acc_root().join("det-a").join("run");
    let csv = evaluate(&data, &[run], None, &opts).unwrap();
    if std::fs::read(csv).unwrap() != a.2 {
        return Err("re-evaluation changed metrics.csv".into());
    }
    Ok("fresh retrain and re-evaluation reproduce checkpoint, loss CSV and metrics CSV byte-identically".into())
}

// ---------------------------------------------------------------------------
// gate: distilled visibility vs occlusion oracle

/// Supervised stand-in for the geometry stage: regress the SDF net onto the
/// analytic field (uniform ball + near-surface samples).  The distillation
/// gate measures its own stage, not geometry training, and this keeps it
/// inside a desk-scale budget.
fn fit_sdf_to(scene: &AnalyticScene, zoo: &mut Zoo<f32>, iters: u64) {
    let mut adam = Adam::new(&zoo.store);
    for iter in 0..iters {
        let mut rng = stream(7700 + iter, &[tag("acc-fit")]);
        let mut pts: Vec<Vec3> = (0..256)
            .map(|_| unit_sphere(&mut rng) * rng.gen::<f64>().cbrt())
            .collect();
        for p in sample_surface_points(scene, 256, 880_000 + iter) {
            pts.push(p + unit_sphere(&mut rng) * (0.05 * rng.gen::<f64>()));
        }
        let mut gt = Tensor::<f32>::zeros(pts.len(), 1);
        {
            let gd = gt.data_mut();
            for (i, p) in pts.iter().enumerate() {
                gd[i] = scene.sdf(*p) as f32;
            }
        }
        let mut xs = Vec::with_capacity(pts.len() * 3);
        for p in &pts {
            xs.push(p.x as f32);
            xs.push(p.y as f32);
            xs.push(p.z as f32);
        }
        let mut tp = Tape::new();
        let pn = zoo.store.nodes_on(&mut tp, |n| n.starts_with("sdf."));
        let tr = zoo.sdf.forward(&mut tp, &pn, &[TapeIn::Raw(Tensor::from_vec(pts.len(), 3, xs))]);
        let s = tp.slice_cols(tr.out, 0, 1);
        let g = tp.constant(gt);
        let d = tp.sub(s, g);
        let a = tp.abs(d);
        let l = tp.mean_all(a);
        let mut grads = tp.backward(l);
        let lr = if iter < iters * 3 / 4 { 1e-3 } else { 3e-4 };
        adam.update(&mut zoo.store, &mut grads, &pn, lr);
    }
}

fn visibility_vs_oracle() -> GateResult {
    let data = dataset("two-sphere-occlusion", "twosphere");
    let scene = preset("two-sphere-occlusion").unwrap();
    let out = acc_root().join("twosphere-s2");
    let cfg = resolve(&RawConfig::default(), &desk_overrides(&data, &out), 2).unwrap();

    if !out.join(glint::distill::STAGE2_CKPT).exists() {
        std::fs::create_dir_all(&out).unwrap();
        if !out.join(STAGE1_CKPT).exists() {
            let t = Instant::now();
            let mut zoo = Zoo::<f32>::build(cfg.zoo, cfg.seed);
            fit_sdf_to(&scene, &mut zoo, 4000);
            Checkpoint::capture(1, 0, cfg.seed, &zoo.store, None)
                .save(&out.join(STAGE1_CKPT))
                .unwrap();
            println!("  (fitted two-sphere SDF stand-in in {})", fmt_min(t));
        }
        ensure_trained(&cfg, 2, glint::distill::STAGE2_CKPT);
    }

    let ck = Checkpoint::load(&out.join(glint::distill::STAGE2_CKPT)).unwrap();
    let mut zoo = Zoo::<f32>::build(cfg.zoo, cfg.seed);
    ck.apply(&mut zoo.store).unwrap();

    // held-out points and directions never seen by distillation
    let pts = sample_surface_points(&scene, 200, 31_415);
    let mut rng = stream(9, &[tag("acc-vis")]);
    let mut err_sum = 0.0;
    let mut count = 0usize;
    for p in pts {
        let n = scene.normal(p);
        let dirs: Vec<Vec3> = (0..48)
            .map(|_| {
                let w = unit_sphere(&mut rng);
                if w.dot(n) < 0.0 {
                    -w
                } else {
                    w
                }
            })
            .collect();
        let pred = visibility_lobes(&zoo, &[p], &dirs).unwrap();
        for (w, m) in dirs.iter().zip(pred) {
            err_sum += (m - visibility_binary(&scene, p, n, *w)).abs();
            count += 1;
        }
    }
    let mae = err_sum / count as f64;
    if mae > 0.05 {
        return Err(format!("held-out visibility MAE {mae:.4} > 0.05 over {count} rays"));
    }
    Ok(format!("held-out visibility MAE {mae:.4} ≤ 0.05 over {count} point/direction pairs"))
}

// ---------------------------------------------------------------------------
// gate: recovered geometry vs analytic surface

fn geometry_vs_analytic() -> GateResult {
    let data = dataset("glossy-sphere", "glossy");
    let run = glossy_s1();
    let opts = EvalOpts { mesh_res: 256, chamfer_samples: 30_000, max_views: 10 };
    let csv = evaluate(&data, &[run], None, &opts).unwrap();
    let ch = metric_from(&csv, "glossy-s1", "chamfer");
    let eik = metric_from(&csv, "glossy-s1", "eikonal-mean");
    let db = metric_from(&csv, "glossy-s1", "rendering-psnr");
    if ch > 0.02 {
        return Err(format!("chamfer {ch:.4} > 0.02 scene units (rendering {db:.1} dB)"));
    }
    if eik > 0.05 {
        return Err(format!("eikonal residual mean {eik:.4} > 0.05"));
    }
    Ok(format!("chamfer {ch:.4} ≤ 0.02, eikonal mean {eik:.4} ≤ 0.05 (rendering {db:.1} dB)"))
}

// ---------------------------------------------------------------------------
// gate: specular branch stays idle on a matte scene (soft)

fn matte_decomposition() -> GateResult {
    let data = dataset("lambert-sphere", "lambert");
    let run = lambert_s1();
    let csv = evaluate(&data, &[run], None, &EvalOpts::default()).unwrap();
    let ratio = metric_from(&csv, "lambert-s1", "spec-diffuse-ratio");
    if ratio > 0.10 {
        return Err(format!("specular/diffuse magnitude ratio {ratio:.4} > 0.10"));
    }
    Ok(format!("specular/diffuse magnitude ratio {ratio:.4} ≤ 0.10"))
}

// ---------------------------------------------------------------------------
// gate: albedo recovery under known light

fn albedo_recovery() -> GateResult {
    let data = dataset("lambert-sphere", "lambert");
    let s1 = lambert_s1();
    let run = stage3_run("lambert-s3", &data, &s1, true, true);
    let csv = evaluate(&data, &[run], None, &EvalOpts::default()).unwrap();
    let db = metric_from(&csv, "lambert-s3", "albedo-psnr");
    if db < 25.0 {
        return Err(format!("albedo PSNR {db:.2} dB < 25 dB with the light held at ground truth"));
    }
    Ok(format!("albedo PSNR {db:.2} dB ≥ 25 dB with the light held at ground truth"))
}

// ---------------------------------------------------------------------------
// gate: specular-albedo net improves rendering

fn sai_ablation() -> GateResult {
    let data = dataset("glossy-sphere", "glossy");
    let s1 = glossy_s1();
    let with = stage3_run("glossy-s3-sai", &data, &s1, true, false);
    let without = stage3_run("glossy-s3-nosai", &data, &s1, false, false);
    let csv = acc_root().join("ablation.csv");
    evaluate(&data, &[with, without], Some(&csv), &EvalOpts::default()).unwrap();
    let on = metric_from(&csv, "glossy-s3-sai", "rendering-psnr");
    let off = metric_from(&csv, "glossy-s3-nosai", "rendering-psnr");
    if on < off {
        return Err(format!("rendering PSNR {on:.2} dB with the net < {off:.2} dB without"));
    }
    Ok(format!("rendering PSNR {on:.2} dB with the net ≥ {off:.2} dB without"))
}

// silence the unused warning: brdf_eval anchors the tracer BRDF the shading
// gate compares against
#[allow(dead_code)]
fn _anchor(b: &BrdfParams, n: Vec3, w: Vec3) -> Vec3 {
    brdf_eval(b, 1.0, n, w, w)
}
