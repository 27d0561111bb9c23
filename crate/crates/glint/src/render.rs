//! Stage 1: ray sampling, NeuS-style volumetric quadrature, surface-crossing
//! shading, and the training loop that fits geometry + radiance + sharpness.
//!
//! Everything here exists twice on purpose: once as plain scalar functions
//! (the reference used by tests and by the importance sampler) and once as
//! tape ops inside `build_batch_graph` (the differentiable path).  The two
//! are cross-checked in the tests below.

use crate::autodiff::{NodeId, Real, Tape, Tensor};
use crate::ckpt::Checkpoint;
use crate::err::{Error, Result};
use crate::imageio::{CsvLog, FloatImage};
use crate::nets::{TapeIn, Zoo};
use crate::optim::{lr_schedule, Adam};
use crate::rng::{stream, tag, Stream};
use crate::scene::{Camera, Ray, SceneDataset};
use crate::sg::SgMixture;
use crate::vec3::Vec3;
use rand::Rng;
use std::path::Path;
use std::sync::Arc;

pub const STAGE1_CKPT: &str = "stage1.ckpt";
pub const STAGE1_LOSS: &str = "loss_stage1.csv";

// ---------------------------------------------------------------------------
// tone mapping

/// Linear → sRGB display transfer, input clamped to [0,1].
pub fn tonemap(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    if u <= 0.003_130_8 {
        12.92 * u
    } else {
        1.055 * u.powf(1.0 / 2.4) - 0.055
    }
}

/// Inverse of `tonemap` on [0,1] (used when a display-space prediction has to
/// be taken back to radiance).
pub fn tonemap_inv(y: f64) -> f64 {
    let y = y.clamp(0.0, 1.0);
    if y <= 12.92 * 0.003_130_8 {
        y / 12.92
    } else {
        ((y + 0.055) / 1.055).powf(2.4)
    }
}

pub fn tonemap_rgb(v: Vec3) -> Vec3 {
    crate::vec3::v3(tonemap(v.x), tonemap(v.y), tonemap(v.z))
}

// ---------------------------------------------------------------------------
// scalar quadrature reference

/// Discrete NeuS opacity from two consecutive SDF samples.
pub fn neus_alpha(s_i: f64, s_next: f64, kappa: f64) -> f64 {
    assert!(kappa > 0.0, "neus_alpha: kappa must be positive");
    let phi = |x: f64| 1.0 / (1.0 + (-x).exp());
    let a = phi(kappa * s_i);
    let b = phi(kappa * s_next);
    ((a - b) / a).max(0.0)
}

/// Transmittances and weights from per-sample opacities: T_1 = 1,
/// T_i = Π_{j<i}(1−α_j), w_i = T_i·α_i.
pub fn composite_weights(alphas: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut trans = Vec::with_capacity(alphas.len());
    let mut weights = Vec::with_capacity(alphas.len());
    let mut t = 1.0;
    for &a in alphas {
        trans.push(t);
        weights.push(t * a);
        t *= 1.0 - a;
    }
    (trans, weights)
}

/// C^vol for one ray given weights and per-sample colors.
pub fn volume_color(weights: &[f64], colors: &[Vec3]) -> Vec3 {
    assert_eq!(weights.len(), colors.len());
    let mut c = Vec3::ZERO;
    for (w, col) in weights.iter().zip(colors) {
        c += *col * *w;
    }
    c
}

/// Mirror of the tape quadrature (including its ε-guarded denominator):
/// returns per-sample weights for the SDF values of one ray.  Used by the
/// importance sampler, where the ε makes no measurable difference.
pub fn quadrature_weights(s: &[f64], kappa: f64) -> Vec<f64> {
    let n = s.len();
    let phi = |x: f64| 1.0 / (1.0 + (-x.clamp(-40.0, 40.0)).exp());
    let mut alphas = Vec::with_capacity(n);
    for i in 0..n {
        let a = phi(kappa * s[i]);
        let b = phi(kappa * s[if i + 1 < n { i + 1 } else { i }]);
        alphas.push(((a - b) / (a + 1e-6)).max(0.0));
    }
    composite_weights(&alphas).1
}

// ---------------------------------------------------------------------------
// surface crossing

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceCrossing {
    /// Sample indices (i′−1, i′) bracketing the first zero crossing.
    pub prev: usize,
    pub next: usize,
}

/// First sample with s < 0, bracketed by its predecessor.  None when the ray
/// never enters the surface or starts inside it.
pub fn find_crossing(s: &[f64]) -> Option<SurfaceCrossing> {
    let i = s.iter().position(|&v| v < 0.0)?;
    if i == 0 {
        return None;
    }
    Some(SurfaceCrossing { prev: i - 1, next: i })
}

/// Linear zero of the secant through (p1,s1), (p2,s2) with s1 ≥ 0 > s2.
pub fn interpolate_surface_point(p1: Vec3, p2: Vec3, s1: f64, s2: f64) -> Result<Vec3> {
    if s1 == s2 {
        return Err(Error::contract("interpolate_surface_point", "s1 == s2 has no secant zero"));
    }
    Ok((p2 * s1 - p1 * s2) / (s1 - s2))
}

// ---------------------------------------------------------------------------
// ray sampling

#[derive(Clone, Copy, Debug)]
pub struct SampleCfg {
    pub n_uniform: usize,
    pub rounds: usize,
    pub per_round: usize,
}

impl SampleCfg {
    /// Published profile: 64 uniform + 4×16 importance.
    pub fn paper() -> SampleCfg {
        SampleCfg { n_uniform: 64, rounds: 4, per_round: 16 }
    }

    /// CPU profile: 32 uniform + 2×8 importance.
    pub fn desk() -> SampleCfg {
        SampleCfg { n_uniform: 32, rounds: 2, per_round: 8 }
    }

    pub fn total(&self) -> usize {
        self.n_uniform + self.rounds * self.per_round
    }

    /// Sharpness used for importance round `r` (coarse→fine ladder; the
    /// learned κ is deliberately not consulted here so sampling stays a pure
    /// function of the SDF).
    pub fn round_kappa(r: usize) -> f64 {
        64.0 * (1u64 << r) as f64
    }
}

fn uniform_ts(ray: &Ray, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let dt = (ray.t_far - ray.t_near) / n as f64;
    let jitter: f64 = rng.gen::<f64>();
    (0..n).map(|i| ray.t_near + (i as f64 + jitter) * dt).collect()
}

/// Draw `m` new ts by inverse-CDF over per-bin weights (bin i spans
/// [ts[i], ts[i+1]] with mass w[i] plus a small floor so empty regions keep
/// being probed).
fn importance_ts(ts: &[f64], w: &[f64], m: usize, rng: &mut impl Rng) -> Vec<f64> {
    let bins = ts.len() - 1;
    let mut cdf = Vec::with_capacity(bins + 1);
    let mut acc = 0.0;
    cdf.push(0.0);
    for i in 0..bins {
        acc += w[i].max(0.0) + 1e-5;
        cdf.push(acc);
    }
    let mut out = Vec::with_capacity(m);
    for j in 0..m {
        let u = (j as f64 + rng.gen::<f64>()) / m as f64 * acc;
        let k = match cdf.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
            Ok(i) => i.min(bins - 1),
            Err(i) => i.saturating_sub(1).min(bins - 1),
        };
        let lo = cdf[k];
        let hi = cdf[k + 1];
        let frac = if hi > lo { (u - lo) / (hi - lo) } else { 0.5 };
        out.push(ts[k] + frac * (ts[k + 1] - ts[k]));
    }
    out
}

fn merge_strict(ts: &mut Vec<f64>, added: Vec<f64>, span: f64) {
    ts.extend(added);
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let eps = span * 1e-9;
    for i in 1..ts.len() {
        if ts[i] <= ts[i - 1] {
            ts[i] = ts[i - 1] + eps;
        }
    }
}

/// Sample parameters along one ray: `n_uniform` jittered uniform samples plus
/// `rounds` importance rounds concentrated where the current weights sit.
/// Returns exactly `cfg.total()` strictly increasing ts.
pub fn sample_ray(
    ray: &Ray,
    sdf: &mut dyn FnMut(&[Vec3]) -> Result<Vec<f64>>,
    cfg: &SampleCfg,
    rng: &mut Stream,
) -> Result<Vec<f64>> {
    if ray.t_far <= ray.t_near {
        return Err(Error::contract("sample_ray", "t_far must exceed t_near"));
    }
    let span = ray.t_far - ray.t_near;
    let mut ts = uniform_ts(ray, cfg.n_uniform, rng);
    for r in 0..cfg.rounds {
        let xs: Vec<Vec3> = ts.iter().map(|&t| ray.origin + ray.dir * t).collect();
        let s = sdf(&xs)?;
        let w = quadrature_weights(&s, SampleCfg::round_kappa(r));
        let added = importance_ts(
            &ts,
            &w[..w.len() - 1], // bin i keyed by its left endpoint
            cfg.per_round,
            rng,
        );
        merge_strict(&mut ts, added, span);
    }
    Ok(ts)
}

/// Batched sampler for training/rendering: one SDF net call per round over
/// all rays.  Returns the flat (rays.len()·total) t array.
pub fn sample_batch<T: Real>(
    zoo: &Zoo<T>,
    rays: &[Ray],
    cfg: &SampleCfg,
    rng: &mut Stream,
) -> Result<Vec<f64>> {
    let nr = rays.len();
    let mut per_ray: Vec<Vec<f64>> = Vec::with_capacity(nr);
    for ray in rays {
        if ray.t_far <= ray.t_near {
            return Err(Error::contract("sample_batch", "t_far must exceed t_near"));
        }
        per_ray.push(uniform_ts(ray, cfg.n_uniform, rng));
    }
    for r in 0..cfg.rounds {
        let cnt = per_ray[0].len();
        let mut pts = Vec::with_capacity(nr * cnt * 3);
        for (ray, ts) in rays.iter().zip(&per_ray) {
            for &t in ts {
                let p = ray.origin + ray.dir * t;
                pts.push(T::of_f64(p.x));
                pts.push(T::of_f64(p.y));
                pts.push(T::of_f64(p.z));
            }
        }
        let s = zoo.sdf_value(&Tensor::from_vec(nr * cnt, 3, pts))?;
        for (ri, (ray, ts)) in rays.iter().zip(&mut per_ray).enumerate() {
            let sv: Vec<f64> =
                (0..cnt).map(|i| s.get(ri * cnt + i, 0).as_f64()).collect();
            let w = quadrature_weights(&sv, SampleCfg::round_kappa(r));
            let added = importance_ts(ts, &w[..cnt - 1], cfg.per_round, rng);
            merge_strict(ts, added, ray.t_far - ray.t_near);
        }
    }
    let total = cfg.total();
    let mut flat = Vec::with_capacity(nr * total);
    for ts in per_ray {
        debug_assert_eq!(ts.len(), total);
        flat.extend(ts);
    }
    Ok(flat)
}

// ---------------------------------------------------------------------------
// differentiable batch graph

fn tensor_rgb<T: Real>(rows: &[Vec3]) -> Tensor<T> {
    let mut d = Vec::with_capacity(rows.len() * 3);
    for v in rows {
        d.push(T::of_f64(v.x));
        d.push(T::of_f64(v.y));
        d.push(T::of_f64(v.z));
    }
    Tensor::from_vec(rows.len(), 3, d)
}

pub struct SurBranch {
    /// Indices into the batch's ray list for the crossings that were kept.
    pub ray_ids: Vec<usize>,
    /// Display-space blended surface color, R′×3.
    pub csur: NodeId,
    /// Blended linear diffuse / specular radiance, R′×3 each.
    pub cd: NodeId,
    pub cs: NodeId,
}

pub struct BatchGraph {
    /// Display volume rendering with background compositing, R×3.
    pub cvol: NodeId,
    /// Per-ray opacity Σw, R×1.
    pub sum_w: NodeId,
    /// Per-sample weights, (R·n)×1 — surface blending reads these.
    pub weights: NodeId,
    /// Eikonal penalty mean (‖∇S‖−1)² over every sample, 1×1.
    pub lreg: NodeId,
    pub sur: Option<SurBranch>,
}

/// Emit the full stage-1 forward graph for a batch of in-sphere rays with
/// precomputed sample parameters (`ts` flat, `n` per ray).  The env mixture
/// supplies the known background radiance for the (1−Σw) remainder.
pub fn build_batch_graph<T: Real>(
    tp: &mut Tape<T>,
    zoo: &Zoo<T>,
    pnodes: &[NodeId],
    rays: &[Ray],
    ts: &[f64],
    n: usize,
    env: &SgMixture,
) -> Result<BatchGraph> {
    let nr = rays.len();
    assert_eq!(ts.len(), nr * n, "flat sample array shape");

    let mut pos = Vec::with_capacity(nr * n);
    let mut dirs = Vec::with_capacity(nr * n);
    let mut env_disp = Vec::with_capacity(nr);
    for (ri, ray) in rays.iter().enumerate() {
        for i in 0..n {
            let t = ts[ri * n + i];
            pos.push(ray.origin + ray.dir * t);
            dirs.push(ray.dir);
        }
        env_disp.push(tonemap_rgb(env.eval(ray.dir)));
    }
    let pos_t = tensor_rgb::<T>(&pos);
    let dirs_t = tensor_rgb::<T>(&dirs);

    let trace = zoo.sdf.forward(tp, pnodes, &[TapeIn::Raw(pos_t.clone())]);
    let g = zoo.sdf.emit_input_grad(tp, pnodes, &trace, 0)?;
    let s = tp.slice_cols(trace.out, 0, 1);
    let feat = tp.slice_cols(trace.out, 1, zoo.cfg.feat);
    let gnorm = tp.block_norm(g, 1e-12);
    let nrm = tp.div_col(g, gnorm);

    // α_i = max((Φ(κs_i) − Φ(κs_{i+1})) / (Φ(κs_i) + ε), 0); the ε keeps the
    // division benign and bounds 1−α away from zero, so Σw = 1 − Π(1−α) stays
    // an exact telescoping sum in [0,1].
    let kap = tp.exp(pnodes[zoo.log_kappa]);
    let ks = tp.scalar_mul(s, kap);
    let ksc = tp.clamp(ks, -40.0, 40.0);
    let phi = tp.sigmoid(ksc);
    let phi_next = tp.seg_shift_next(phi, n);
    let dphi = tp.sub(phi, phi_next);
    let denom = tp.add_const(phi, 1e-6);
    let ratio = tp.div(dphi, denom);
    let alpha = tp.relu(ratio);
    let neg_a = tp.neg(alpha);
    let one_minus = tp.add_const(neg_a, 1.0);
    let trans = tp.seg_cumprod_excl(one_minus, n);
    let w = tp.mul(trans, alpha);
    let sum_w = tp.seg_sum(w, n);

    // volume color: M_c over every sample, weighted, plus env remainder
    let ct = zoo.col.forward(
        tp,
        pnodes,
        &[
            TapeIn::Raw(pos_t.clone()),
            TapeIn::Node(nrm),
            TapeIn::Raw(dirs_t),
            TapeIn::Node(feat),
        ],
    );
    let wc = tp.mul_col(ct.out, w);
    let cobj = tp.seg_sum(wc, n);
    let neg_sw = tp.neg(sum_w);
    let bg_w = tp.add_const(neg_sw, 1.0);
    let env_node = tp.constant(tensor_rgb::<T>(&env_disp));
    let bg = tp.mul_col(env_node, bg_w);
    let cvol = tp.add(cobj, bg);

    let res = tp.add_const(gnorm, -1.0);
    let sq = tp.square(res);
    let lreg = tp.mean_all(sq);

    // surface branch: first crossing per ray, shaded at both bracketing
    // samples and blended by their quadrature weights
    let s_vals = tp.val(s).clone();
    let w_vals = tp.val(w).clone();
    let mut ray_ids = Vec::new();
    let mut idx_prev: Vec<u32> = Vec::new();
    let mut idx_next: Vec<u32> = Vec::new();
    for ri in 0..nr {
        let sv: Vec<f64> = (0..n).map(|i| s_vals.get(ri * n + i, 0).as_f64()).collect();
        let Some(cr) = find_crossing(&sv) else { continue };
        let wp = w_vals.get(ri * n + cr.prev, 0).as_f64();
        let wn = w_vals.get(ri * n + cr.next, 0).as_f64();
        if wp + wn < 1e-8 {
            continue; // crossing dropped from R′
        }
        ray_ids.push(ri);
        idx_prev.push((ri * n + cr.prev) as u32);
        idx_next.push((ri * n + cr.next) as u32);
    }

    let sur = if ray_ids.is_empty() {
        None
    } else {
        let rp = ray_ids.len();
        let mut idx_all = idx_prev.clone();
        idx_all.extend_from_slice(&idx_next);
        let idx_all = Arc::new(idx_all);

        let mut xs = Vec::with_capacity(2 * rp);
        let mut vview = Vec::with_capacity(2 * rp);
        for half in 0..2 {
            let src = if half == 0 { &idx_prev } else { &idx_next };
            for &fi in src {
                xs.push(pos[fi as usize]);
                vview.push(dirs[fi as usize] * -1.0);
            }
        }
        let nsub = tp.gather_rows(nrm, idx_all.clone());
        let fsub = tp.gather_rows(feat, idx_all.clone());

        // ω_r = 2(n·v)n − v with v = −d (constant per crossing)
        let vt = tp.constant(tensor_rgb::<T>(&vview));
        let nv_prod = tp.mul(nsub, vt);
        let nv = tp.row_sum(nv_prod);
        let nv2 = tp.scale_const(nv, 2.0);
        let sn = tp.mul_col(nsub, nv2);
        let wr = tp.sub(sn, vt);

        let xs_t = tensor_rgb::<T>(&xs);
        let dt = zoo.dif.forward(
            tp,
            pnodes,
            &[TapeIn::Raw(xs_t.clone()), TapeIn::Node(nsub), TapeIn::Node(fsub)],
        );
        let st = zoo.spc.forward(
            tp,
            pnodes,
            &[TapeIn::Raw(xs_t), TapeIn::Node(wr), TapeIn::Node(nsub), TapeIn::Node(fsub)],
        );
        // raw heads → softplus keeps HDR radiance non-negative
        let cd_all = tp.softplus(dt.out, 1.0);
        let cs_all = tp.softplus(st.out, 1.0);

        let w1 = tp.gather_rows(w, Arc::new(idx_prev));
        let w2 = tp.gather_rows(w, Arc::new(idx_next));
        let wsum = tp.add(w1, w2);
        let prev_rows = Arc::new((0..rp as u32).collect::<Vec<u32>>());
        let next_rows = Arc::new((rp as u32..2 * rp as u32).collect::<Vec<u32>>());
        let blend = |tp: &mut Tape<T>, c: NodeId| {
            let a = tp.gather_rows(c, prev_rows.clone());
            let b = tp.gather_rows(c, next_rows.clone());
            let aw = tp.mul_col(a, w1);
            let bw = tp.mul_col(b, w2);
            let sum = tp.add(aw, bw);
            tp.div_col(sum, wsum)
        };
        let cd = blend(tp, cd_all);
        let cs = blend(tp, cs_all);
        let lin = tp.add(cd, cs);
        let csur = tp.tonemap(lin);
        Some(SurBranch { ray_ids, csur, cd, cs })
    };

    Ok(BatchGraph { cvol, sum_w, weights: w, lreg, sur })
}

/// Attach the three stage-1 losses to a built graph.  Returns
/// (L_total, L_vol, L_sur, L_reg) node handles.
pub fn stage1_losses<T: Real>(
    tp: &mut Tape<T>,
    graph: &BatchGraph,
    gt_disp: &[Vec3],
    lambda_sur: f64,
    lambda_reg: f64,
) -> (NodeId, NodeId, NodeId, NodeId) {
    let gt_node = tp.constant(tensor_rgb::<T>(gt_disp));
    let dv = tp.sub(graph.cvol, gt_node);
    let av = tp.abs(dv);
    let lvol = tp.mean_all(av);

    let lsur = match &graph.sur {
        Some(sur) => {
            let rows: Vec<Vec3> = sur.ray_ids.iter().map(|&ri| gt_disp[ri]).collect();
            let gts = tp.constant(tensor_rgb::<T>(&rows));
            let ds = tp.sub(sur.csur, gts);
            let as_ = tp.abs(ds);
            tp.mean_all(as_)
        }
        None => tp.constant(Tensor::zeros(1, 1)),
    };

    let t1 = tp.scale_const(lsur, lambda_sur);
    let t2 = tp.scale_const(graph.lreg, lambda_reg);
    let p = tp.add(lvol, t1);
    let total = tp.add(p, t2);
    (total, lvol, lsur, graph.lreg)
}

// ---------------------------------------------------------------------------
// training

#[derive(Clone, Copy, Debug)]
pub struct Stage1Cfg {
    pub iters: u64,
    pub batch_rays: usize,
    pub sample: SampleCfg,
    pub lambda_sur: f64,
    pub lambda_reg: f64,
    pub ckpt_every: u64,
    pub seed: u64,
}

impl Stage1Cfg {
    pub fn desk(seed: u64) -> Stage1Cfg {
        Stage1Cfg {
            iters: 20_000,
            batch_rays: 256,
            sample: SampleCfg::desk(),
            lambda_sur: 0.1,
            lambda_reg: 0.1,
            ckpt_every: 2000,
            seed,
        }
    }
}

fn stage1_trainable(name: &str) -> bool {
    name.starts_with("sdf.")
        || name.starts_with("col.")
        || name.starts_with("dif.")
        || name.starts_with("spc.")
        || name == "kappa.log"
}

/// Draw a batch of training rays (resampling the few that miss the scene
/// bounding sphere) together with their display-space ground-truth colors.
pub(crate) fn draw_ray_batch(
    data: &SceneDataset,
    train: &[usize],
    count: usize,
    rng: &mut Stream,
) -> (Vec<Ray>, Vec<Vec3>) {
    let mut rays = Vec::with_capacity(count);
    let mut gts = Vec::with_capacity(count);
    while rays.len() < count {
        let vi = train[rng.gen_range(0..train.len())];
        let cam = &data.views[vi].camera;
        let px = rng.gen_range(0..cam.width);
        let py = rng.gen_range(0..cam.height);
        let ray = cam.ray_for_pixel(px, py);
        if ray.background {
            continue;
        }
        let p = data.linear[vi].pixel(px, py);
        gts.push(tonemap_rgb(crate::vec3::v3(p[0] as f64, p[1] as f64, p[2] as f64)));
        rays.push(ray);
    }
    (rays, gts)
}

/// One optimizer step; returns (L_vol, L_sur, L_reg).
fn stage1_step<T: Real>(
    zoo: &mut Zoo<T>,
    adam: &mut Adam<T>,
    data: &SceneDataset,
    train: &[usize],
    env: &SgMixture,
    cfg: &Stage1Cfg,
    iter: u64,
    lr: f64,
) -> Result<(f64, f64, f64)> {
    let mut rng = stream(cfg.seed, &[tag("s1-batch"), iter]);
    let (rays, gts) = draw_ray_batch(data, train, cfg.batch_rays, &mut rng);
    let ts = sample_batch(zoo, &rays, &cfg.sample, &mut rng)?;
    let n = cfg.sample.total();

    let mut tp = Tape::new();
    let pnodes = zoo.store.nodes_on(&mut tp, stage1_trainable);
    let graph = build_batch_graph(&mut tp, zoo, &pnodes, &rays, &ts, n, env)?;
    let (total, lvol, lsur, lreg) = stage1_losses(&mut tp, &graph, &gts, cfg.lambda_sur, cfg.lambda_reg);

    let lv = tp.val(lvol).get(0, 0).as_f64();
    let ls = tp.val(lsur).get(0, 0).as_f64();
    let lr_ = tp.val(lreg).get(0, 0).as_f64();
    let lt = tp.val(total).get(0, 0).as_f64();
    if !lt.is_finite() {
        return Err(Error::NonFinite {
            what: "stage1 loss".into(),
            detail: format!("iter {iter}: L_vol={lv:e} L_sur={ls:e} L_reg={lr_:e}"),
        });
    }

    let mut grads = tp.backward(total);
    adam.update(&mut zoo.store, &mut grads, &pnodes, lr);
    Ok((lv, ls, lr_))
}

/// Train stage 1.  Writes `stage1.ckpt` and `loss_stage1.csv` under
/// `out_dir`; with `resume` it picks up bit-exactly from the checkpoint.
pub fn train_stage1<T: Real>(
    zoo: &mut Zoo<T>,
    data: &SceneDataset,
    env: &SgMixture,
    cfg: &Stage1Cfg,
    out_dir: &Path,
    resume: bool,
) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt_path = out_dir.join(STAGE1_CKPT);
    let csv_path = out_dir.join(STAGE1_LOSS);
    let train = data.train_indices();
    if train.is_empty() {
        return Err(Error::Config("no training views in dataset".into()));
    }

    let mut adam = Adam::new(&zoo.store);
    let mut log = CsvLog::new("iter,L_vol,L_sur,L_reg,lr");
    let mut start = 0u64;
    if resume && ckpt_path.exists() {
        let ck = Checkpoint::load(&ckpt_path)?;
        if ck.stage != 1 {
            return Err(Error::Checkpoint(format!("expected stage 1, found stage {}", ck.stage)));
        }
        ck.apply(&mut zoo.store)?;
        ck.apply_optim(&mut adam)?;
        start = ck.iter;
        if csv_path.exists() {
            let old = CsvLog::load(&csv_path)?;
            log.rows = old
                .rows
                .into_iter()
                .filter(|r| {
                    r.split(',').next().and_then(|f| f.parse::<u64>().ok()).map_or(false, |i| i < start)
                })
                .collect();
        }
    }

    for iter in start..cfg.iters {
        let lr = lr_schedule(iter + 1, cfg.iters);
        let (lv, ls, lg) = stage1_step(zoo, &mut adam, data, &train, env, cfg, iter, lr)?;
        log.push(format!("{iter},{lv:.6e},{ls:.6e},{lg:.6e},{lr:.6e}"));
        let done = iter + 1;
        if done % cfg.ckpt_every == 0 || done == cfg.iters {
            zoo.store.check_finite(&zoo.store.ids().collect::<Vec<_>>())?;
            Checkpoint::capture(1, done, cfg.seed, &zoo.store, Some(&adam)).save(&ckpt_path)?;
            log.save(&csv_path)?;
        }
    }
    if start >= cfg.iters {
        // nothing to do, but leave the log in a consistent state
        log.save(&csv_path)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluation renders

pub struct Stage1Render {
    /// Tone-mapped volume rendering (always defined).
    pub volume: FloatImage,
    /// Tone-mapped surface rendering; env color where no crossing exists.
    pub surface: FloatImage,
    /// Blended linear diffuse / specular radiance at crossings (else black).
    pub diffuse: FloatImage,
    pub specular: FloatImage,
    /// Σw per pixel (1 channel).
    pub mask: FloatImage,
}

/// Render one view with frozen parameters.  Deterministic for a fixed seed.
pub fn render_stage1<T: Real>(
    zoo: &Zoo<T>,
    env: &SgMixture,
    cam: &Camera,
    scfg: &SampleCfg,
    seed: u64,
) -> Result<Stage1Render> {
    let (w, h) = (cam.width, cam.height);
    let mut out = Stage1Render {
        volume: FloatImage::new(w, h, 3),
        surface: FloatImage::new(w, h, 3),
        diffuse: FloatImage::new(w, h, 3),
        specular: FloatImage::new(w, h, 3),
        mask: FloatImage::new(w, h, 1),
    };
    let mut rng = stream(seed, &[tag("s1-render")]);
    let n = scfg.total();

    let mut pix: Vec<(usize, usize)> = Vec::new();
    for py in 0..h {
        for px in 0..w {
            pix.push((px, py));
        }
    }
    for chunk in pix.chunks(256) {
        let mut rays = Vec::new();
        let mut live = Vec::new();
        for &(px, py) in chunk {
            let ray = cam.ray_for_pixel(px, py);
            if ray.background {
                let c = tonemap_rgb(env.eval(ray.dir));
                let p = out.volume.pixel_mut(px, py);
                p[0] = c.x as f32;
                p[1] = c.y as f32;
                p[2] = c.z as f32;
                let p = out.surface.pixel_mut(px, py);
                p[0] = c.x as f32;
                p[1] = c.y as f32;
                p[2] = c.z as f32;
            } else {
                rays.push(ray);
                live.push((px, py));
            }
        }
        if rays.is_empty() {
            continue;
        }
        let ts = sample_batch(zoo, &rays, scfg, &mut rng)?;
        let mut tp = Tape::new();
        let pnodes = zoo.store.nodes_on(&mut tp, |_| false);
        let graph = build_batch_graph(&mut tp, zoo, &pnodes, &rays, &ts, n, env)?;

        let cvol = tp.val(graph.cvol).clone();
        let sw = tp.val(graph.sum_w).clone();
        for (ri, &(px, py)) in live.iter().enumerate() {
            let p = out.volume.pixel_mut(px, py);
            for c in 0..3 {
                p[c] = cvol.get(ri, c).as_f64() as f32;
            }
            out.mask.pixel_mut(px, py)[0] = sw.get(ri, 0).as_f64() as f32;
            // default surface = background; the crossing loop overwrites
            let e = tonemap_rgb(env.eval(rays[ri].dir));
            let p = out.surface.pixel_mut(px, py);
            p[0] = e.x as f32;
            p[1] = e.y as f32;
            p[2] = e.z as f32;
        }
        if let Some(sur) = &graph.sur {
            let csur = tp.val(sur.csur).clone();
            let cd = tp.val(sur.cd).clone();
            let cs = tp.val(sur.cs).clone();
            for (k, &ri) in sur.ray_ids.iter().enumerate() {
                let (px, py) = live[ri];
                for (img, ten) in [
                    (&mut out.surface, &csur),
                    (&mut out.diffuse, &cd),
                    (&mut out.specular, &cs),
                ] {
                    let p = img.pixel_mut(px, py);
                    for c in 0..3 {
                        p[c] = ten.get(k, c).as_f64() as f32;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Mean |‖∇S‖−1| over a point set (chunked net evaluation).
pub fn eikonal_residual_mean<T: Real>(zoo: &Zoo<T>, pts: &[Vec3]) -> Result<f64> {
    let mut acc = 0.0;
    for chunk in pts.chunks(4096) {
        let x = tensor_rgb::<T>(chunk);
        let (_, _, g) = zoo.sdf_eval(&x)?;
        for r in 0..chunk.len() {
            let gn = (0..3).map(|c| g.get(r, c).as_f64().powi(2)).sum::<f64>().sqrt();
            acc += (gn - 1.0).abs();
        }
    }
    Ok(acc / pts.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::ZooCfg;
    use crate::scene::{self, sphere_bounds, SCENE_RADIUS};

    fn v3(x: f64, y: f64, z: f64) -> Vec3 {
        crate::vec3::v3(x, y, z)
    }

    #[test]
    fn tonemap_frozen_values() {
        assert_eq!(tonemap(0.0), 0.0);
        assert!((tonemap(1.0) - 1.0).abs() < 1e-12);
        assert!((tonemap(0.003_130_8) - 0.04045).abs() < 1e-5);
        assert!((tonemap(0.5) - 0.735357).abs() < 1e-6);
        // branch boundary is continuous
        let below = tonemap(0.003_130_8 - 1e-9);
        let above = tonemap(0.003_130_8 + 1e-9);
        assert!((below - above).abs() < 1e-6);
        // out-of-range input clamps
        assert_eq!(tonemap(-0.3), 0.0);
        assert!((tonemap(2.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tonemap_inverse_roundtrip() {
        for i in 0..=100 {
            let u = i as f64 / 100.0;
            assert!((tonemap_inv(tonemap(u)) - u).abs() < 1e-9, "u={u}");
        }
    }

    #[test]
    fn tonemap_scalar_matches_tape_op() {
        let mut tp = Tape::<f64>::new();
        let vals = vec![0.0, 0.001, 0.003_130_8, 0.01, 0.25, 0.5, 0.99, 1.0];
        let a = tp.constant(Tensor::from_vec(1, vals.len(), vals.clone()));
        let b = tp.tonemap(a);
        for (i, &u) in vals.iter().enumerate() {
            assert!((tp.val(b).get(0, i) - tonemap(u)).abs() < 1e-12);
        }
    }

    #[test]
    fn neus_alpha_pinned_example() {
        // s=+0.1 → −0.1 at κ=20: (Φ(2)−Φ(−2))/Φ(2)
        let a = neus_alpha(0.1, -0.1, 20.0);
        assert!((a - 0.8647).abs() < 1e-4, "alpha {a}");
        assert_eq!(neus_alpha(0.3, 0.3, 20.0), 0.0);
        assert_eq!(neus_alpha(0.1, 0.5, 20.0), 0.0); // receding surface clamps
    }

    #[test]
    fn composite_weights_telescopes() {
        let (t, w) = composite_weights(&[0.5, 0.5]);
        assert_eq!(t[0], 1.0);
        assert!((w[0] - 0.5).abs() < 1e-12 && (w[1] - 0.25).abs() < 1e-12);
        let (_, w1) = composite_weights(&[1.0]);
        assert_eq!(w1[0], 1.0);
        let (_, w0) = composite_weights(&[0.0, 0.0, 0.0]);
        assert!(w0.iter().all(|&x| x == 0.0));
        // Σw = 1 − Π(1−α)
        let alphas = [0.3, 0.2, 0.7, 0.1];
        let (_, w) = composite_weights(&alphas);
        let sum: f64 = w.iter().sum();
        let prod: f64 = alphas.iter().map(|a| 1.0 - a).product();
        assert!((sum - (1.0 - prod)).abs() < 1e-12);
    }

    #[test]
    fn volume_color_is_linear_in_weights() {
        let cols = vec![v3(1.0, 0.0, 0.0), v3(0.0, 1.0, 0.0)];
        let c = volume_color(&[0.0, 0.0], &cols);
        assert_eq!(c, Vec3::ZERO);
        let c = volume_color(&[0.0, 1.0], &cols);
        assert_eq!(c, cols[1]);
        let grey = vec![v3(0.4, 0.4, 0.4); 3];
        let c = volume_color(&[0.25, 0.25, 0.25], &grey);
        assert!((c.x - 0.3).abs() < 1e-12);
    }

    #[test]
    fn find_crossing_cases() {
        assert_eq!(find_crossing(&[0.5, 0.4, 0.3]), None);
        assert_eq!(find_crossing(&[0.5, -0.5, -1.0]), Some(SurfaceCrossing { prev: 0, next: 1 }));
        assert_eq!(find_crossing(&[-1.0, 0.5, -0.5]), None); // camera inside
        assert_eq!(
            find_crossing(&[0.5, 0.2, -0.1, 0.3, -0.4]),
            Some(SurfaceCrossing { prev: 1, next: 2 })
        );
    }

    #[test]
    fn interpolate_surface_point_examples() {
        let p1 = v3(0.0, 0.0, 0.0);
        let p2 = v3(1.0, 0.0, 0.0);
        let mid = interpolate_surface_point(p1, p2, 0.5, -0.5).unwrap();
        assert!((mid.x - 0.5).abs() < 1e-12);
        let at1 = interpolate_surface_point(p1, p2, 0.0, -0.25).unwrap();
        assert!(at1.norm() < 1e-12);
        let q = interpolate_surface_point(p1, p2, 0.75, -0.25).unwrap();
        assert!((q.x - 0.75).abs() < 1e-12);
        assert!(interpolate_surface_point(p1, p2, 0.3, 0.3).is_err());
    }

    fn axis_ray() -> Ray {
        let o = v3(0.0, 0.0, -3.0);
        let d = v3(0.0, 0.0, 1.0);
        let (t0, t1, miss) = sphere_bounds(o, d, SCENE_RADIUS);
        assert!(!miss);
        Ray { origin: o, dir: d, t_near: t0, t_far: t1, background: false }
    }

    #[test]
    fn sample_ray_counts_and_ordering() {
        let ray = axis_ray();
        let mut rng = stream(7, &[tag("samp")]);
        let cfg = SampleCfg { n_uniform: 64, rounds: 0, per_round: 16 };
        let mut sdf = |xs: &[Vec3]| Ok(xs.iter().map(|p| p.norm() - 0.5).collect());
        let ts = sample_ray(&ray, &mut sdf, &cfg, &mut rng).unwrap();
        assert_eq!(ts.len(), 64);
        for i in 1..ts.len() {
            assert!(ts[i] > ts[i - 1]);
        }
        assert!(ts[0] >= ray.t_near && *ts.last().unwrap() <= ray.t_far);

        let cfg = SampleCfg::desk();
        let ts = sample_ray(&ray, &mut sdf, &cfg, &mut rng).unwrap();
        assert_eq!(ts.len(), cfg.total());
        for i in 1..ts.len() {
            assert!(ts[i] > ts[i - 1]);
        }
    }

    #[test]
    fn sample_ray_rejects_empty_interval() {
        let mut ray = axis_ray();
        ray.t_far = ray.t_near;
        let mut rng = stream(7, &[]);
        let mut sdf = |xs: &[Vec3]| Ok(xs.iter().map(|_| 1.0).collect());
        assert!(sample_ray(&ray, &mut sdf, &SampleCfg::desk(), &mut rng).is_err());
    }

    #[test]
    fn empty_field_keeps_weights_near_zero() {
        let ray = axis_ray();
        let mut rng = stream(11, &[tag("samp")]);
        let mut sdf = |xs: &[Vec3]| Ok(xs.iter().map(|_| 1.0).collect::<Vec<f64>>());
        let ts = sample_ray(&ray, &mut sdf, &SampleCfg::paper(), &mut rng).unwrap();
        let s: Vec<f64> = ts.iter().map(|_| 1.0).collect();
        let w = quadrature_weights(&s, 64.0);
        let sum: f64 = w.iter().sum();
        assert!(sum.abs() < 1e-9, "constant field accumulated {sum}");
    }

    #[test]
    fn importance_samples_cluster_at_the_crossing() {
        let ray = axis_ray();
        let mut rng = stream(13, &[tag("samp")]);
        let cfg = SampleCfg::paper();
        let mut sdf = |xs: &[Vec3]| {
            Ok(xs.iter().map(|p| p.norm() - 0.5).collect::<Vec<f64>>())
        };
        let ts = sample_ray(&ray, &mut sdf, &cfg, &mut rng).unwrap();
        // first crossing of the analytic sphere sits at t = 3 − 0.5
        let t_hit = 3.0 - 0.5;
        let voxel = (ray.t_far - ray.t_near) / cfg.n_uniform as f64;
        // uniform samples can't all be near the hit, so count the added ones:
        // everything beyond the 64 originals is an importance sample
        let mut rng2 = stream(13, &[tag("samp")]);
        let uni = uniform_ts(&ray, cfg.n_uniform, &mut rng2);
        let is_uniform = |t: f64| uni.iter().any(|&u| (u - t).abs() < 1e-12);
        let added: Vec<f64> = ts.iter().copied().filter(|&t| !is_uniform(t)).collect();
        assert_eq!(added.len(), cfg.rounds * cfg.per_round);
        let near = added.iter().filter(|&&t| (t - t_hit).abs() <= 2.0 * voxel).count();
        assert!(
            near as f64 >= 0.8 * added.len() as f64,
            "only {near}/{} importance samples near the crossing",
            added.len()
        );
    }

    /// Shared tiny fixture: a narrow zoo plus the default environment.
    fn tiny_zoo(seed: u64) -> Zoo<f32> {
        Zoo::build(ZooCfg { width: 16, feat: 8, dec_width: 16 }, seed)
    }

    #[test]
    fn batch_graph_matches_scalar_quadrature() {
        let zoo = tiny_zoo(5);
        let env = scene::default_env();
        let ray = axis_ray();
        let rays = vec![ray];
        let mut rng = stream(3, &[tag("qtest")]);
        let cfg = SampleCfg::desk();
        let ts = sample_batch(&zoo, &rays, &cfg, &mut rng).unwrap();
        let n = cfg.total();

        let mut tp = Tape::new();
        let pnodes = zoo.store.nodes_on(&mut tp, |_| false);
        let graph = build_batch_graph(&mut tp, &zoo, &pnodes, &rays, &ts, n, &env).unwrap();

        // recompute weights in f64 from the net's own SDF values
        let pts: Vec<Vec3> = ts.iter().map(|&t| ray.origin + ray.dir * t).collect();
        let x = tensor_rgb::<f32>(&pts);
        let s = zoo.sdf_value(&x).unwrap();
        let sv: Vec<f64> = (0..n).map(|i| s.get(i, 0) as f64).collect();
        let w_ref = quadrature_weights(&sv, zoo.kappa());
        let w_tape = tp.val(graph.weights).clone();
        for i in 0..n {
            assert!(
                (w_tape.get(i, 0) as f64 - w_ref[i]).abs() < 1e-4,
                "weight {i}: tape {} vs scalar {}",
                w_tape.get(i, 0),
                w_ref[i]
            );
        }
        let sw = tp.val(graph.sum_w).get(0, 0) as f64;
        assert!((0.0..=1.0 + 1e-6).contains(&sw), "Σw = {sw}");
    }

    #[test]
    fn surface_blend_uses_normalized_weights() {
        // hand-built graph fragment: two colors blended by (w1, w2) must be
        // invariant to rescaling both weights
        let mut tp = Tape::<f64>::new();
        let c = tp.constant(Tensor::from_vec(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]));
        for scale in [1.0, 7.5] {
            let w1 = tp.constant(Tensor::from_vec(1, 1, vec![0.2 * scale]));
            let w2 = tp.constant(Tensor::from_vec(1, 1, vec![0.6 * scale]));
            let wsum = tp.add(w1, w2);
            let a = tp.gather_rows(c, Arc::new(vec![0]));
            let b = tp.gather_rows(c, Arc::new(vec![1]));
            let aw = tp.mul_col(a, w1);
            let bw = tp.mul_col(b, w2);
            let s = tp.add(aw, bw);
            let blend = tp.div_col(s, wsum);
            assert!((tp.val(blend).get(0, 0) - 0.25).abs() < 1e-12);
            assert!((tp.val(blend).get(0, 1) - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn render_is_deterministic_and_well_formed() {
        let zoo = tiny_zoo(9);
        let env = scene::default_env();
        let cam = Camera::look_at(v3(0.0, 0.0, -3.0), Vec3::ZERO, 16, 16, 26.0);
        let scfg = SampleCfg { n_uniform: 16, rounds: 1, per_round: 4 };
        let a = render_stage1(&zoo, &env, &cam, &scfg, 31).unwrap();
        let b = render_stage1(&zoo, &env, &cam, &scfg, 31).unwrap();
        assert_eq!(a.volume.data, b.volume.data);
        assert_eq!(a.surface.data, b.surface.data);
        for &v in &a.volume.data {
            assert!((0.0..=1.0 + 1e-5).contains(&(v as f64)));
        }
        for &m in &a.mask.data {
            assert!((0.0..=1.0 + 1e-5).contains(&(m as f64)));
        }
    }

    /// End-to-end smoke: a few iterations on a 4-view 16×16 synthetic set
    /// must run, log, checkpoint, and resume bit-exactly.
    #[test]
    fn short_training_run_resumes_bit_exact() {
        let dir = tempdir("render-train");
        let spec = scene::SynthSpec {
            scene: "lambert-sphere".into(),
            train_views: 4,
            test_views: 1,
            width: 16,
            height: 16,
            spp: 4,
            seed: 77,
        };
        let data = scene::make_synthetic(&spec, &dir.join("data")).unwrap();
        let env = data.gt.as_ref().unwrap().scene.env.clone();

        let cfg = Stage1Cfg {
            iters: 6,
            batch_rays: 16,
            sample: SampleCfg { n_uniform: 12, rounds: 1, per_round: 4 },
            lambda_sur: 0.1,
            lambda_reg: 0.1,
            ckpt_every: 3,
            seed: 123,
        };
        // straight run
        let mut zoo_a = tiny_zoo(1);
        train_stage1(&mut zoo_a, &data, &env, &cfg, &dir.join("a"), false).unwrap();
        // interrupted run: first 3 iters, then resume to 6
        let mut zoo_b = tiny_zoo(1);
        let mut cfg_b = cfg;
        cfg_b.iters = 3;
        train_stage1(&mut zoo_b, &data, &env, &cfg_b, &dir.join("b"), false).unwrap();
        let mut zoo_b2 = tiny_zoo(1);
        train_stage1(&mut zoo_b2, &data, &env, &cfg, &dir.join("b"), true).unwrap();

        let ca = std::fs::read(dir.join("a").join(STAGE1_CKPT)).unwrap();
        let cb = std::fs::read(dir.join("b").join(STAGE1_CKPT)).unwrap();
        assert_eq!(ca, cb, "resumed checkpoint differs from straight run");
        let la = std::fs::read_to_string(dir.join("a").join(STAGE1_LOSS)).unwrap();
        let lb = std::fs::read_to_string(dir.join("b").join(STAGE1_LOSS)).unwrap();
        assert_eq!(la, lb, "resumed loss log differs from straight run");
        assert_eq!(la.lines().count(), 1 + 6);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn losses_are_zero_for_perfect_prediction() {
        // fabricate a graph whose cvol equals gt exactly: background-only ray
        // through a far-away field (s ≈ const 1 ⇒ Σw ≈ 0 ⇒ cvol = env)
        let zoo = tiny_zoo(21);
        let env = scene::default_env();
        let ray = axis_ray();
        let cfg = SampleCfg { n_uniform: 8, rounds: 0, per_round: 0 };
        let mut rng = stream(1, &[]);
        let ts = sample_batch(&zoo, &[ray], &cfg, &mut rng).unwrap();
        let mut tp = Tape::new();
        let pnodes = zoo.store.nodes_on(&mut tp, |_| false);
        let graph = build_batch_graph(&mut tp, &zoo, &pnodes, &[ray], &ts, 8, &env).unwrap();
        let gt = vec![{
            let v = tp.val(graph.cvol).clone();
            v3(v.get(0, 0) as f64, v.get(0, 1) as f64, v.get(0, 2) as f64)
        }];
        let (_, lvol, _, _) = stage1_losses(&mut tp, &graph, &gt, 0.1, 0.1);
        assert!(tp.val(lvol).get(0, 0) < 1e-7);
    }

    fn tempdir(tag_: &str) -> std::path::PathBuf {
        let d = std::env::temp_dir().join(format!("glint-{tag_}-{}", std::process::id()));
        std::fs::create_dir_all(&d).unwrap();
        d
    }
}
