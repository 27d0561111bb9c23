//! Stage 3 — factored appearance over the frozen field: a BRDF auto-encoder
//! (sparse 32-d latent → albedo + roughness), an optional specular-albedo
//! correction, a 128-lobe SG environment, and closed-form SG shading with
//! per-lobe distilled visibility and the 24-lobe indirect mixture.

use crate::autodiff::{NodeId, Real, Tape, Tensor};
use crate::ckpt::Checkpoint;
use crate::err::{Error, Result};
use crate::imageio::{write_pfm, CsvLog, FloatImage};
use crate::nets::{ParamId, ParamStore, TapeIn, Zoo, INDIRECT_LOBES};
use crate::optim::{lr_schedule, Adam};
use crate::render::{find_crossing, interpolate_surface_point, sample_batch, tonemap_rgb, SampleCfg};
use crate::rng::{stream, tag};
use crate::scene::{Camera, SceneDataset};
use crate::sg::{
    fibonacci_sphere, fresnel_schlick, ggx_specular_sg, hemisphere_cosine_integral,
    sg_inner_product, BrdfParams, SgMixture, SphericalGaussian, F0,
};
use crate::vec3::{v3, Vec3};
use std::f64::consts::PI;
use std::path::Path;

pub const STAGE3_CKPT: &str = "stage3.ckpt";
pub const STAGE3_LOSS: &str = "loss_stage3.csv";
pub const ENV_LOBES: usize = 128;
pub const ENV_LAMBDA_INIT: f64 = 30.0;
pub const ENV_AMP_INIT: f64 = 0.5;
/// Weight of the ‖z‖₁ latent sparsity term.
pub const LATENT_L1_WEIGHT: f64 = 0.01;

const AXIS_EPS: f64 = 1e-9;
const LAMBDA_FLOOR: f64 = 1e-2;

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// ln(e^y − 1); exact inverse of `softplus` for y > 0.
pub fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp()).ln_1p()
}

// ---------------------------------------------------------------------------
// environment light

/// Learnable SG environment stored as three raw parameter blocks: axes are
/// normalized on decode, sharpness and amplitudes pass through softplus
/// (sharpness floored at 1e−2).
#[derive(Clone, Copy, Debug)]
pub struct EnvLight {
    pub axes: ParamId,
    pub lam: ParamId,
    pub amp: ParamId,
    pub k: usize,
}

impl EnvLight {
    /// Add (or re-find) the env parameter blocks: `k` lobes on a Fibonacci
    /// sphere, sharpness 30, grey amplitude 0.5.
    pub fn install<T: Real>(store: &mut ParamStore<T>, k: usize) -> Result<EnvLight> {
        if let Some(axes) = store.find("env.axes") {
            let lam = store.find("env.lambda").ok_or_else(|| Error::Checkpoint("env.lambda missing".into()))?;
            let amp = store.find("env.mu").ok_or_else(|| Error::Checkpoint("env.mu missing".into()))?;
            let have = store.tensor(lam).cols();
            if have != k {
                return Err(Error::Config(format!("env lobe count {have} != configured {k}")));
            }
            return Ok(EnvLight { axes, lam, amp, k });
        }
        let mut ax = Vec::with_capacity(3 * k);
        for d in fibonacci_sphere(k) {
            ax.extend([d.x, d.y, d.z].map(T::of_f64));
        }
        let axes = store.add("env.axes", Tensor::from_vec(1, 3 * k, ax));
        let lam = store.add(
            "env.lambda",
            Tensor::filled(1, k, T::of_f64(inv_softplus(ENV_LAMBDA_INIT - LAMBDA_FLOOR))),
        );
        let amp = store.add("env.mu", Tensor::filled(1, 3 * k, T::of_f64(inv_softplus(ENV_AMP_INIT))));
        Ok(EnvLight { axes, lam, amp, k })
    }

    /// Install with raw values chosen so decoding reproduces `gt` (used by
    /// the fixed-environment training mode; the blocks are then frozen).
    pub fn install_fixed<T: Real>(store: &mut ParamStore<T>, gt: &SgMixture) -> Result<EnvLight> {
        let k = gt.count();
        if let Some(axes) = store.find("env.axes") {
            let lam = store.find("env.lambda").ok_or_else(|| Error::Checkpoint("env.lambda missing".into()))?;
            let amp = store.find("env.mu").ok_or_else(|| Error::Checkpoint("env.mu missing".into()))?;
            let have = store.tensor(lam).cols();
            if have != k {
                return Err(Error::Config(format!("env lobe count {have} != fixed env {k}")));
            }
            return Ok(EnvLight { axes, lam, amp, k });
        }
        let mut ax = Vec::with_capacity(3 * k);
        let mut lv = Vec::with_capacity(k);
        let mut av = Vec::with_capacity(3 * k);
        for lobe in gt.lobes() {
            ax.extend([lobe.xi.x, lobe.xi.y, lobe.xi.z].map(T::of_f64));
            lv.push(T::of_f64(inv_softplus((lobe.lambda - LAMBDA_FLOOR).max(1e-6))));
            for c in [lobe.mu.x, lobe.mu.y, lobe.mu.z] {
                av.push(T::of_f64(inv_softplus(c.max(1e-6))));
            }
        }
        let axes = store.add("env.axes", Tensor::from_vec(1, 3 * k, ax));
        let lam = store.add("env.lambda", Tensor::from_vec(1, k, lv));
        let amp = store.add("env.mu", Tensor::from_vec(1, 3 * k, av));
        Ok(EnvLight { axes, lam, amp, k })
    }

    pub fn decode<T: Real>(&self, store: &ParamStore<T>) -> SgMixture {
        let ax = store.tensor(self.axes);
        let lm = store.tensor(self.lam);
        let am = store.tensor(self.amp);
        let lobes = (0..self.k)
            .map(|i| {
                let a = v3(
                    ax.get(0, 3 * i).as_f64(),
                    ax.get(0, 3 * i + 1).as_f64(),
                    ax.get(0, 3 * i + 2).as_f64(),
                );
                let len = (a.norm2() + AXIS_EPS).sqrt();
                SphericalGaussian {
                    xi: a / len,
                    lambda: softplus(lm.get(0, i).as_f64()) + LAMBDA_FLOOR,
                    mu: v3(
                        softplus(am.get(0, 3 * i).as_f64()),
                        softplus(am.get(0, 3 * i + 1).as_f64()),
                        softplus(am.get(0, 3 * i + 2).as_f64()),
                    ),
                }
            })
            .collect();
        SgMixture::new(lobes)
    }
}

// ---------------------------------------------------------------------------
// closed-form shading (scalar path; the training tape mirrors this exactly)

static GRAZING_NOTE: std::sync::Once = std::sync::Once::new();

/// Direct shading of one point under an SG environment.  `vis` is sampled at
/// each lobe axis and scales that lobe's amplitude.  Returns linear
/// (diffuse, specular); a grazing or back-facing view zeroes the specular
/// term (noted once on stderr).
pub fn shade_direct(
    n: Vec3,
    w_o: Vec3,
    brdf: &BrdfParams,
    spec_scale: Vec3,
    env: &SgMixture,
    mut vis: impl FnMut(Vec3) -> f64,
) -> (Vec3, Vec3) {
    let mut irr = Vec3::ZERO;
    let mut vs = Vec::with_capacity(env.count());
    for lobe in env.lobes() {
        let v = vis(lobe.xi);
        vs.push(v);
        irr += hemisphere_cosine_integral(lobe, n) * v;
    }
    let dif = irr.mul_elem(brdf.diffuse_albedo) / PI;

    let mut spec = Vec3::ZERO;
    if spec_scale.norm2() > 0.0 {
        match ggx_specular_sg(n, w_o, brdf, spec_scale) {
            Ok(fs) => {
                for (lobe, &v) in env.lobes().iter().zip(&vs) {
                    spec += sg_inner_product(&fs, lobe) * v;
                }
                // shading cosine folded in at the warped lobe axis ω_r
                spec = spec * n.dot(w_o);
            }
            Err(_) => GRAZING_NOTE.call_once(|| {
                eprintln!("shade: grazing view (n·ω_o ≤ 0), specular term forced to zero");
            }),
        }
    }
    (dif, spec)
}

/// Indirect terms: identical machinery over the per-point mixture, without
/// visibility.
pub fn shade_indirect(n: Vec3, w_o: Vec3, brdf: &BrdfParams, spec_scale: Vec3, ind: &SgMixture) -> (Vec3, Vec3) {
    shade_direct(n, w_o, brdf, spec_scale, ind, |_| 1.0)
}

// ---------------------------------------------------------------------------
// BRDF decode (host)

#[derive(Clone, Debug)]
pub struct DecodedBrdf {
    pub brdf: BrdfParams,
    pub z: Vec<f64>,
}

pub fn decode_brdf<T: Real>(zoo: &Zoo<T>, xs: &[Vec3]) -> Result<Vec<DecodedBrdf>> {
    let xt = tensor3::<T>(xs);
    let z = zoo.benc.eval(&zoo.store, &[xt])?;
    let out = zoo.bdec.eval(&zoo.store, &[z.clone()])?;
    Ok((0..xs.len())
        .map(|r| DecodedBrdf {
            brdf: BrdfParams {
                diffuse_albedo: v3(
                    out.get(r, 0).as_f64(),
                    out.get(r, 1).as_f64(),
                    out.get(r, 2).as_f64(),
                ),
                roughness: out.get(r, 3).as_f64(),
            },
            z: (0..z.cols()).map(|c| z.get(r, c).as_f64()).collect(),
        })
        .collect())
}

pub fn specular_albedo<T: Real>(zoo: &Zoo<T>, xs: &[Vec3], wrs: &[Vec3]) -> Result<Vec<f64>> {
    let out = zoo.salb.eval(&zoo.store, &[tensor3(xs), tensor3(wrs)])?;
    Ok((0..xs.len()).map(|r| out.get(r, 0).as_f64()).collect())
}

/// M_v sampled per (point, lobe-axis) pair, batched through the net.
pub fn visibility_lobes<T: Real>(zoo: &Zoo<T>, xs: &[Vec3], axes: &[Vec3]) -> Result<Vec<f64>> {
    let k = axes.len();
    let mut out = Vec::with_capacity(xs.len() * k);
    for chunk in xs.chunks(256) {
        let mut px = Vec::with_capacity(chunk.len() * k);
        let mut pw = Vec::with_capacity(chunk.len() * k);
        for &x in chunk {
            for &w in axes {
                px.push(x);
                pw.push(w);
            }
        }
        let v = zoo.vis.eval(&zoo.store, &[tensor3::<T>(&px), tensor3::<T>(&pw)])?;
        for r in 0..px.len() {
            out.push(v.get(r, 0).as_f64());
        }
    }
    Ok(out)
}

fn tensor3<T: Real>(pts: &[Vec3]) -> Tensor<T> {
    let mut d = Vec::with_capacity(pts.len() * 3);
    for p in pts {
        d.push(T::of_f64(p.x));
        d.push(T::of_f64(p.y));
        d.push(T::of_f64(p.z));
    }
    Tensor::from_vec(pts.len(), 3, d)
}

// ---------------------------------------------------------------------------
// training graph

#[derive(Clone, Copy, Debug)]
pub struct ShadeFlags {
    /// Indirect illumination terms (needs a stage-2 M_ind).
    pub si: bool,
    /// Per-lobe visibility on direct terms (needs a stage-2 M_v).
    pub vi: bool,
    /// Specular-albedo correction net.
    pub sai: bool,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ShadePoint {
    pub x: Vec3,
    pub n: Vec3,
    pub wo: Vec3,
    pub gt: Vec3,
}

struct LobeNodes {
    axes: NodeId, // N×3K unit
    lam: NodeId,  // N×K
    amp: NodeId,  // N×3K
}

fn env_lobe_nodes<T: Real>(tp: &mut Tape<T>, pnodes: &[NodeId], env: &EnvLight, nr: usize) -> LobeNodes {
    let norms = tp.block_norm(pnodes[env.axes], AXIS_EPS);
    let ones = tp.constant(Tensor::filled(1, env.k, T::one()));
    let recip = tp.div(ones, norms);
    let unit = tp.block_mul_k(pnodes[env.axes], recip);
    let sp = tp.softplus(pnodes[env.lam], 1.0);
    let lam = tp.add_const(sp, LAMBDA_FLOOR);
    let amp = tp.softplus(pnodes[env.amp], 1.0);
    LobeNodes {
        axes: tp.repeat_row(unit, nr),
        lam: tp.repeat_row(lam, nr),
        amp: tp.repeat_row(amp, nr),
    }
}

fn ind_lobe_nodes<T: Real>(tp: &mut Tape<T>, zoo: &Zoo<T>, pnodes: &[NodeId], xt: Tensor<T>) -> LobeNodes {
    let k = INDIRECT_LOBES;
    let nr = xt.rows();
    let tr = zoo.ind.forward(tp, pnodes, &[TapeIn::Raw(xt)]);
    let mut ax = Vec::with_capacity(k);
    let mut lm = Vec::with_capacity(k);
    let mut am = Vec::with_capacity(k);
    for kk in 0..k {
        ax.push(tp.slice_cols(tr.out, kk * 7, 3));
        lm.push(tp.slice_cols(tr.out, kk * 7 + 3, 1));
        am.push(tp.slice_cols(tr.out, kk * 7 + 4, 3));
    }
    let axes_raw = tp.concat_cols(&ax);
    let lam_raw = tp.concat_cols(&lm);
    let amp_raw = tp.concat_cols(&am);
    let norms = tp.block_norm(axes_raw, AXIS_EPS);
    let ones = tp.constant(Tensor::filled(nr, k, T::one()));
    let recip = tp.div(ones, norms);
    let axes = tp.block_mul_k(axes_raw, recip);
    let sp = tp.softplus(lam_raw, 1.0);
    let lam = tp.add_const(sp, LAMBDA_FLOOR);
    let amp = tp.softplus(amp_raw, 1.0);
    LobeNodes { axes, lam, amp }
}

/// Σ_k μ_k · w_k · Irr(λ_k, ξ_k·n) per channel.
fn diffuse_sum<T: Real>(tp: &mut Tape<T>, lobes: &LobeNodes, vis: Option<NodeId>, n_const: NodeId) -> NodeId {
    let cosang = tp.block_dot(lobes.axes, n_const);
    let irr = tp.sg_irradiance(lobes.lam, cosang);
    let wk = match vis {
        Some(v) => tp.mul(irr, v),
        None => irr,
    };
    let scaled = tp.block_mul_k(lobes.amp, wk);
    tp.block_sum_k(scaled)
}

/// Σ_k μ_k · w_k · e^{λ_m − λ_s − λ_k} (2π/λ_m)(1 − e^{−2λ_m}) per channel:
/// the closed-form inner product of each lobe against a unit-amplitude
/// warped GGX lobe (axis ω_r, sharpness λ_s).
fn spec_sum<T: Real>(
    tp: &mut Tape<T>,
    lobes: &LobeNodes,
    vis: Option<NodeId>,
    wr: &Tensor<T>,
    lam_s: NodeId,
    k: usize,
) -> NodeId {
    let nr = wr.rows();
    let scaled_axes = tp.block_mul_k(lobes.axes, lobes.lam); // λ_k ξ_k
    let wrc = tp.constant(wr.clone());
    let spec_scaled = tp.mul_col(wrc, lam_s); // λ_s ω_r
    let tiled = tp.concat_cols(&vec![spec_scaled; k]);
    let sum = tp.add(scaled_axes, tiled);
    let lam_m = tp.block_norm(sum, AXIS_EPS); // N×K
    let ls_b = tp.broadcast_col(lam_s, k);
    let d1 = tp.sub(lam_m, ls_b);
    let d2 = tp.sub(d1, lobes.lam);
    let e = tp.exp(d2);
    let two_pi = tp.constant(Tensor::filled(nr, k, T::of_f64(2.0 * PI)));
    let q = tp.div(two_pi, lam_m);
    let em2 = tp.scale_const(lam_m, -2.0);
    let em2 = tp.exp(em2);
    let nem = tp.neg(em2);
    let om = tp.add_const(nem, 1.0);
    let norm = tp.mul(q, om);
    let mut wk = tp.mul(e, norm);
    if let Some(v) = vis {
        wk = tp.mul(wk, v);
    }
    let scaled = tp.block_mul_k(lobes.amp, wk);
    tp.block_sum_k(scaled)
}

pub(crate) struct ShadeGraph {
    pub display: NodeId,
    #[allow(dead_code)] // inspected by tests
    pub linear: NodeId,
    pub z: NodeId,
}

/// Assemble the full differentiable shading graph for a batch of surface
/// points.  `sa` is the specular-albedo node (None ⇔ s_a ≡ 1, the w/o-SAI
/// configuration); `vis_cache` holds per-(point, lobe) M_v values when the
/// VI flag is on.
pub(crate) fn build_shade_graph<T: Real>(
    tp: &mut Tape<T>,
    zoo: &Zoo<T>,
    pnodes: &[NodeId],
    env: &EnvLight,
    pts: &[ShadePoint],
    flags: &ShadeFlags,
    sa: Option<NodeId>,
    vis_cache: Option<&Tensor<T>>,
) -> ShadeGraph {
    let nr = pts.len();
    let xs: Vec<Vec3> = pts.iter().map(|p| p.x).collect();
    let ns: Vec<Vec3> = pts.iter().map(|p| p.n).collect();
    let wrs: Vec<Vec3> = pts.iter().map(|p| p.wo.reflect(p.n)).collect();
    let cos: Vec<f64> = pts.iter().map(|p| p.n.dot(p.wo)).collect();
    let xt = tensor3::<T>(&xs);

    let enc = zoo.benc.forward(tp, pnodes, &[TapeIn::Raw(xt.clone())]);
    let dec = zoo.bdec.forward(tp, pnodes, &[TapeIn::Node(enc.out)]);
    let albedo = tp.slice_cols(dec.out, 0, 3);
    let rough = tp.slice_cols(dec.out, 3, 1);

    // warped GGX lobe parameters from the decoded roughness
    let r2 = tp.square(rough);
    let alpha = tp.clamp(r2, 1e-4, 1.0);
    let a2 = tp.square(alpha);
    let cos_c = tp.constant(Tensor::from_vec(nr, 1, cos.iter().map(|&c| T::of_f64(c)).collect()));
    let den = tp.mul(a2, cos_c);
    let half = tp.constant(Tensor::filled(nr, 1, T::of_f64(0.5)));
    let lam_s = tp.div(half, den); // (2/α²)/(4 cos_o)
    let pi_a2 = tp.scale_const(a2, PI);
    let ones = tp.constant(Tensor::filled(nr, 1, T::one()));
    let d_peak = tp.div(ones, pi_a2);
    // Smith G1² at the lobe axis: 2c/(c + √(α²(1−c²) + c²)), squared
    let omc2 = tp.constant(Tensor::from_vec(nr, 1, cos.iter().map(|&c| T::of_f64(1.0 - c * c)).collect()));
    let c2 = tp.constant(Tensor::from_vec(nr, 1, cos.iter().map(|&c| T::of_f64(c * c)).collect()));
    let t1 = tp.mul(a2, omc2);
    let t2 = tp.add(t1, c2);
    let root = tp.sqrt(t2);
    let cps = tp.add(cos_c, root);
    let two_c = tp.scale_const(cos_c, 2.0);
    let g1 = tp.div(two_c, cps);
    let g = tp.square(g1);
    // Fresnel and the 1/(4cos²) denominator are view-only constants
    let f4 = tp.constant(Tensor::from_vec(
        nr,
        1,
        cos.iter().map(|&c| T::of_f64(fresnel_schlick(c, F0) / (4.0 * c * c))).collect(),
    ));
    let amp0 = tp.mul(d_peak, g);
    let amp1 = tp.mul(amp0, f4);
    let amp_s = match sa {
        Some(s) => tp.mul(amp1, s),
        None => amp1,
    };

    let n_const = tp.constant(tensor3::<T>(&ns));
    let wr_t = tensor3::<T>(&wrs);
    let vis_node = vis_cache.map(|t| tp.constant(t.clone()));

    let env_nodes = env_lobe_nodes(tp, pnodes, env, nr);
    let dsum = diffuse_sum(tp, &env_nodes, vis_node, n_const);
    let a_pi = tp.scale_const(albedo, 1.0 / PI);
    let l_dif = tp.mul(a_pi, dsum);
    let ssum = spec_sum(tp, &env_nodes, vis_node, &wr_t, lam_s, env.k);
    let s0 = tp.mul_col(ssum, amp_s);
    let l_spc = tp.mul_col(s0, cos_c);
    let mut total = tp.add(l_dif, l_spc);

    if flags.si {
        let ind = ind_lobe_nodes(tp, zoo, pnodes, xt);
        let idsum = diffuse_sum(tp, &ind, None, n_const);
        let idif = tp.mul(a_pi, idsum);
        let issum = spec_sum(tp, &ind, None, &wr_t, lam_s, INDIRECT_LOBES);
        let is0 = tp.mul_col(issum, amp_s);
        let ispc = tp.mul_col(is0, cos_c);
        let both = tp.add(idif, ispc);
        total = tp.add(total, both);
    }

    let display = tp.tonemap(total);
    ShadeGraph { display, linear: total, z: enc.out }
}

// ---------------------------------------------------------------------------
// training

#[derive(Clone, Copy, Debug)]
pub struct Stage3Cfg {
    pub iters: u64,
    pub batch_rays: usize,
    pub sample: SampleCfg,
    pub flags: ShadeFlags,
    /// Fine-tune M_ind jointly (only meaningful with `flags.si`).
    pub finetune_ind: bool,
    /// Freeze the environment at the supplied ground-truth mixture.
    pub fixed_env: bool,
    pub env_lobes: usize,
    pub ckpt_every: u64,
    pub seed: u64,
}

impl Stage3Cfg {
    pub fn desk(seed: u64) -> Stage3Cfg {
        Stage3Cfg {
            iters: 8000,
            batch_rays: 512,
            sample: SampleCfg::desk(),
            flags: ShadeFlags { si: true, vi: true, sai: true },
            finetune_ind: true,
            fixed_env: false,
            env_lobes: ENV_LOBES,
            ckpt_every: 1000,
            seed,
        }
    }
}

fn stage3_trainable(cfg: &Stage3Cfg) -> impl Fn(&str) -> bool + '_ {
    move |n: &str| {
        n.starts_with("benc.")
            || n.starts_with("bdec.")
            || (cfg.flags.sai && n.starts_with("salb."))
            || (!cfg.fixed_env && n.starts_with("env."))
            || (cfg.flags.si && cfg.finetune_ind && n.starts_with("ind."))
    }
}

/// Surface-hit rays for one iteration: crossing point, frozen normal, view
/// direction and GT display color.  Back-facing crossings are dropped.
fn gather_shade_points<T: Real>(
    zoo: &Zoo<T>,
    data: &SceneDataset,
    train: &[usize],
    cfg: &Stage3Cfg,
    iter: u64,
) -> Result<Vec<ShadePoint>> {
    let mut rng = stream(cfg.seed, &[tag("s3-batch"), iter]);
    let (rays, gts) = crate::render::draw_ray_batch(data, train, cfg.batch_rays, &mut rng);
    let ts = sample_batch(zoo, &rays, &cfg.sample, &mut rng)?;
    let n = cfg.sample.total();
    let mut pts = Vec::with_capacity(rays.len() * n);
    for (ri, ray) in rays.iter().enumerate() {
        for i in 0..n {
            pts.push(ray.origin + ray.dir * ts[ri * n + i]);
        }
    }
    let s = zoo.sdf_value(&tensor3(&pts))?;
    let mut hits = Vec::new();
    let mut meta = Vec::new();
    for (ri, ray) in rays.iter().enumerate() {
        let sv: Vec<f64> = (0..n).map(|i| s.get(ri * n + i, 0).as_f64()).collect();
        let Some(cr) = find_crossing(&sv) else { continue };
        let p1 = ray.origin + ray.dir * ts[ri * n + cr.prev];
        let p2 = ray.origin + ray.dir * ts[ri * n + cr.next];
        if let Ok(x) = interpolate_surface_point(p1, p2, sv[cr.prev], sv[cr.next]) {
            hits.push(x);
            meta.push((ray.dir * -1.0, gts[ri]));
        }
    }
    if hits.is_empty() {
        return Ok(Vec::new());
    }
    let (_, _, g) = zoo.sdf_eval(&tensor3(&hits))?;
    let mut out = Vec::with_capacity(hits.len());
    for (i, &x) in hits.iter().enumerate() {
        let grad = v3(g.get(i, 0).as_f64(), g.get(i, 1).as_f64(), g.get(i, 2).as_f64());
        let len = grad.norm();
        if len < 1e-9 {
            continue;
        }
        let nrm = grad / len;
        let (wo, gt) = meta[i];
        if nrm.dot(wo) <= 1e-4 {
            continue; // back-facing or grazing
        }
        out.push(ShadePoint { x, n: nrm, wo, gt });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Stage3Report {
    pub final_rgb_l1: f64,
    pub final_latent_l1: f64,
    pub env: SgMixture,
}

/// Train stage 3.  The zoo must hold frozen stage-1 geometry (and stage-2
/// nets when VI/SI are on); `gt_env` is required in fixed-env mode.  Writes
/// `stage3.ckpt` and `loss_stage3.csv`; resumes bit-exactly.
pub fn train_stage3<T: Real>(
    zoo: &mut Zoo<T>,
    data: &SceneDataset,
    cfg: &Stage3Cfg,
    gt_env: Option<&SgMixture>,
    out_dir: &Path,
    resume: bool,
) -> Result<Stage3Report> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let env = if cfg.fixed_env {
        let gt = gt_env.ok_or_else(|| Error::Config("fixed-env mode needs a ground-truth environment".into()))?;
        EnvLight::install_fixed(&mut zoo.store, gt)?
    } else {
        EnvLight::install(&mut zoo.store, cfg.env_lobes)?
    };

    let ckpt_path = out_dir.join(STAGE3_CKPT);
    let csv_path = out_dir.join(STAGE3_LOSS);
    let train = data.train_indices();
    if train.is_empty() {
        return Err(Error::Config("no training views in dataset".into()));
    }

    let mut adam = Adam::new(&zoo.store);
    let mut log = CsvLog::new("iter,L_rgb,L_z,lr");
    let mut start = 0u64;
    if resume && ckpt_path.exists() {
        let ck = Checkpoint::load(&ckpt_path)?;
        if ck.stage != 3 {
            return Err(Error::Checkpoint(format!("expected stage 3, found stage {}", ck.stage)));
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

    let trainable = stage3_trainable(cfg);
    let mut last_good = start;
    let mut final_rgb = f64::NAN;
    let mut final_z = f64::NAN;
    for iter in start..cfg.iters {
        let pts = gather_shade_points(zoo, data, &train, cfg, iter)?;
        if pts.is_empty() {
            log.push(format!("{iter},nan,nan,{:.6e}", lr_schedule(iter + 1, cfg.iters)));
            eprintln!("stage 3 iter {iter}: batch produced no surface hits, skipping step");
            continue;
        }
        // per-lobe visibility under the current env axes, frozen for the step
        let vis_cache = if cfg.flags.vi {
            let axes: Vec<Vec3> = env.decode(&zoo.store).lobes().iter().map(|l| l.xi).collect();
            let xs: Vec<Vec3> = pts.iter().map(|p| p.x).collect();
            let vals = visibility_lobes(zoo, &xs, &axes)?;
            Some(Tensor::from_vec(pts.len(), env.k, vals.into_iter().map(T::of_f64).collect()))
        } else {
            None
        };

        let mut tp = Tape::new();
        let pnodes = zoo.store.nodes_on(&mut tp, &trainable);
        let sa = if cfg.flags.sai {
            let xs: Vec<Vec3> = pts.iter().map(|p| p.x).collect();
            let wrs: Vec<Vec3> = pts.iter().map(|p| p.wo.reflect(p.n)).collect();
            let tr = zoo.salb.forward(&mut tp, &pnodes, &[TapeIn::Raw(tensor3(&xs)), TapeIn::Raw(tensor3(&wrs))]);
            Some(tr.out)
        } else {
            None
        };
        let graph = build_shade_graph(&mut tp, zoo, &pnodes, &env, &pts, &cfg.flags, sa, vis_cache.as_ref());

        let gt = tp.constant(tensor3::<T>(&pts.iter().map(|p| p.gt).collect::<Vec<_>>()));
        let d = tp.sub(graph.display, gt);
        let ad = tp.abs(d);
        let lrgb = tp.mean_all(ad);
        let az = tp.abs(graph.z);
        let zrow = tp.row_sum(az);
        let lz = tp.mean_all(zrow);
        let lzw = tp.scale_const(lz, LATENT_L1_WEIGHT);
        let loss = tp.add(lrgb, lzw);

        let lv = tp.val(lrgb).get(0, 0).as_f64();
        let zv = tp.val(lz).get(0, 0).as_f64();
        if !tp.val(loss).get(0, 0).as_f64().is_finite() {
            return Err(Error::NonFinite {
                what: "stage3 loss".into(),
                detail: format!("iter {iter}: L_rgb={lv:e} L_z={zv:e}; last good checkpoint at iter {last_good}"),
            });
        }
        let lr = lr_schedule(iter + 1, cfg.iters);
        let mut grads = tp.backward(loss);
        adam.update(&mut zoo.store, &mut grads, &pnodes, lr);
        log.push(format!("{iter},{lv:.6e},{zv:.6e},{lr:.6e}"));
        final_rgb = lv;
        final_z = zv;

        let done = iter + 1;
        if done % cfg.ckpt_every == 0 || done == cfg.iters {
            zoo.store.check_finite(&zoo.store.ids().collect::<Vec<_>>())?;
            Checkpoint::capture(3, done, cfg.seed, &zoo.store, Some(&adam)).save(&ckpt_path)?;
            log.save(&csv_path)?;
            last_good = done;
        }
    }
    if start >= cfg.iters {
        log.save(&csv_path)?;
    }
    Ok(Stage3Report { final_rgb_l1: final_rgb, final_latent_l1: final_z, env: env.decode(&zoo.store) })
}

// ---------------------------------------------------------------------------
// evaluation renders

pub struct Stage3Render {
    /// Tone-mapped full shading (env color where no crossing).
    pub render: FloatImage,
    /// Decoded diffuse albedo (linear, 3ch).
    pub albedo: FloatImage,
    /// Decoded roughness (1ch).
    pub roughness: FloatImage,
    /// Specular albedo s_a (1ch; all ones without SAI).
    pub spec_albedo: FloatImage,
    /// 1 where a surface crossing was shaded.
    pub mask: FloatImage,
}

/// Render one view through the factored model with frozen parameters.
pub fn render_stage3<T: Real>(
    zoo: &Zoo<T>,
    env: &SgMixture,
    cam: &Camera,
    scfg: &SampleCfg,
    flags: &ShadeFlags,
    seed: u64,
) -> Result<Stage3Render> {
    let (w, h) = (cam.width, cam.height);
    let mut out = Stage3Render {
        render: FloatImage::new(w, h, 3),
        albedo: FloatImage::new(w, h, 3),
        roughness: FloatImage::new(w, h, 1),
        spec_albedo: FloatImage::new(w, h, 1),
        mask: FloatImage::new(w, h, 1),
    };
    let mut rng = stream(seed, &[tag("s3-render")]);
    let n = scfg.total();
    let env_axes: Vec<Vec3> = env.lobes().iter().map(|l| l.xi).collect();

    let mut pix = Vec::with_capacity(w * h);
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
            let bg = tonemap_rgb(env.eval(ray.dir));
            let p = out.render.pixel_mut(px, py);
            p[0] = bg.x as f32;
            p[1] = bg.y as f32;
            p[2] = bg.z as f32;
            if !ray.background {
                rays.push(ray);
                live.push((px, py));
            }
        }
        if rays.is_empty() {
            continue;
        }
        let ts = sample_batch(zoo, &rays, scfg, &mut rng)?;
        let mut samples = Vec::with_capacity(rays.len() * n);
        for (ri, ray) in rays.iter().enumerate() {
            for i in 0..n {
                samples.push(ray.origin + ray.dir * ts[ri * n + i]);
            }
        }
        let s = zoo.sdf_value(&tensor3(&samples))?;
        let mut hit_pts = Vec::new();
        let mut hit_pix = Vec::new();
        let mut hit_wo = Vec::new();
        for (ri, ray) in rays.iter().enumerate() {
            let sv: Vec<f64> = (0..n).map(|i| s.get(ri * n + i, 0).as_f64()).collect();
            let Some(cr) = find_crossing(&sv) else { continue };
            let p1 = ray.origin + ray.dir * ts[ri * n + cr.prev];
            let p2 = ray.origin + ray.dir * ts[ri * n + cr.next];
            if let Ok(x) = interpolate_surface_point(p1, p2, sv[cr.prev], sv[cr.next]) {
                hit_pts.push(x);
                hit_pix.push(live[ri]);
                hit_wo.push(ray.dir * -1.0);
            }
        }
        if hit_pts.is_empty() {
            continue;
        }
        let (_, _, g) = zoo.sdf_eval(&tensor3(&hit_pts))?;
        let brdfs = decode_brdf(zoo, &hit_pts)?;
        let normals: Vec<Vec3> = (0..hit_pts.len())
            .map(|r| {
                let gr = v3(g.get(r, 0).as_f64(), g.get(r, 1).as_f64(), g.get(r, 2).as_f64());
                gr / gr.norm().max(1e-9)
            })
            .collect();
        let wrs: Vec<Vec3> = hit_wo.iter().zip(&normals).map(|(&wo, &nn)| wo.reflect(nn)).collect();
        let sas = if flags.sai {
            specular_albedo(zoo, &hit_pts, &wrs)?
        } else {
            vec![1.0; hit_pts.len()]
        };
        let vis = if flags.vi {
            visibility_lobes(zoo, &hit_pts, &env_axes)?
        } else {
            vec![1.0; hit_pts.len() * env_axes.len()]
        };
        let k = env_axes.len();
        for (i, &(px, py)) in hit_pix.iter().enumerate() {
            let nn = normals[i];
            let wo = hit_wo[i];
            let brdf = &brdfs[i].brdf;
            let spec_scale = Vec3::splat(sas[i]);
            let mut li = 0usize;
            let (dif, spc) = shade_direct(nn, wo, brdf, spec_scale, env, |_| {
                let v = vis[i * k + li];
                li += 1;
                v
            });
            let mut total = dif + spc;
            if flags.si {
                let ind = indirect_mixture_host(zoo, hit_pts[i])?;
                let (idif, ispc) = shade_indirect(nn, wo, brdf, spec_scale, &ind);
                total += idif + ispc;
            }
            let c = tonemap_rgb(total);
            let p = out.render.pixel_mut(px, py);
            p[0] = c.x as f32;
            p[1] = c.y as f32;
            p[2] = c.z as f32;
            let p = out.albedo.pixel_mut(px, py);
            p[0] = brdf.diffuse_albedo.x as f32;
            p[1] = brdf.diffuse_albedo.y as f32;
            p[2] = brdf.diffuse_albedo.z as f32;
            out.roughness.pixel_mut(px, py)[0] = brdf.roughness as f32;
            out.spec_albedo.pixel_mut(px, py)[0] = sas[i] as f32;
            out.mask.pixel_mut(px, py)[0] = 1.0;
        }
    }
    Ok(out)
}

fn indirect_mixture_host<T: Real>(zoo: &Zoo<T>, x: Vec3) -> Result<SgMixture> {
    let out = zoo.ind.eval(&zoo.store, &[tensor3(&[x])])?;
    let raw: Vec<f64> = (0..INDIRECT_LOBES * 7).map(|c| out.get(0, c).as_f64()).collect();
    Ok(crate::distill::decode_indirect(&raw))
}

// ---------------------------------------------------------------------------
// environment export

/// Write the mixture as text plus an equirectangular PFM (latitude from +y).
pub fn export_env(env: &SgMixture, txt_path: &Path, pfm_path: &Path, width: usize, height: usize) -> Result<()> {
    std::fs::write(txt_path, env.to_text()).map_err(|e| Error::io(txt_path, e))?;
    let mut img = FloatImage::new(width, height, 3);
    for y in 0..height {
        let theta = PI * (y as f64 + 0.5) / height as f64;
        for x in 0..width {
            let phi = 2.0 * PI * (x as f64 + 0.5) / width as f64 - PI;
            let d = v3(theta.sin() * phi.cos(), theta.cos(), theta.sin() * phi.sin());
            let c = env.eval(d);
            let p = img.pixel_mut(x, y);
            p[0] = c.x as f32;
            p[1] = c.y as f32;
            p[2] = c.z as f32;
        }
    }
    write_pfm(pfm_path, &img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::ZooCfg;
    use crate::scene::{default_env, preset, make_synthetic, SynthSpec};
    use crate::testutil::{fitted_zoo, tempdir};

    #[test]
    fn env_install_defaults_roundtrip() {
        let mut store = ParamStore::<f32>::new();
        let env = EnvLight::install(&mut store, ENV_LOBES).unwrap();
        let m = env.decode(&store);
        assert_eq!(m.count(), ENV_LOBES);
        for l in m.lobes() {
            assert!((l.xi.norm() - 1.0).abs() < 1e-5);
            assert!((l.lambda - ENV_LAMBDA_INIT).abs() < 1e-3, "λ = {}", l.lambda);
            for c in [l.mu.x, l.mu.y, l.mu.z] {
                assert!((c - ENV_AMP_INIT).abs() < 1e-4, "μ = {c}");
            }
        }
        // install again → same handles, no duplicates
        let env2 = EnvLight::install(&mut store, ENV_LOBES).unwrap();
        assert_eq!(env2.axes, env.axes);
        assert!(EnvLight::install(&mut store, 64).is_err());
    }

    #[test]
    fn env_install_fixed_reproduces_gt() {
        let gt = default_env();
        let mut store = ParamStore::<f32>::new();
        let env = EnvLight::install_fixed(&mut store, &gt).unwrap();
        let m = env.decode(&store);
        assert_eq!(m.count(), gt.count());
        for (a, b) in m.lobes().iter().zip(gt.lobes()) {
            assert!((a.xi - b.xi).norm() < 1e-5);
            assert!((a.lambda - b.lambda).abs() / b.lambda < 1e-4);
            assert!((a.mu - b.mu).norm() / b.mu.norm().max(1e-9) < 1e-4);
        }
    }

    #[test]
    fn shading_is_linear_in_env_amplitude() {
        let env = default_env();
        let doubled = SgMixture::new(
            env.lobes().iter().map(|l| SphericalGaussian { xi: l.xi, lambda: l.lambda, mu: l.mu * 2.0 }).collect(),
        );
        let n = v3(0.0, 0.0, 1.0);
        let wo = v3(0.3, -0.2, 0.9).normalized();
        let brdf = BrdfParams::new(v3(0.6, 0.4, 0.3), 0.25);
        let (d1, s1) = shade_direct(n, wo, &brdf, Vec3::splat(0.5), &env, |_| 1.0);
        let (d2, s2) = shade_direct(n, wo, &brdf, Vec3::splat(0.5), &doubled, |_| 1.0);
        assert!((d2 - d1 * 2.0).norm() < 1e-12 * d1.norm().max(1.0));
        assert!((s2 - s1 * 2.0).norm() < 1e-12 * s1.norm().max(1.0));
        // half visibility halves both terms
        let (d3, s3) = shade_direct(n, wo, &brdf, Vec3::splat(0.5), &env, |_| 0.5);
        assert!((d3 * 2.0 - d1).norm() < 1e-12);
        assert!((s3 * 2.0 - s1).norm() < 1e-12);
    }

    #[test]
    fn mirror_lobe_dominates_off_axis_lobe() {
        let n = v3(0.0, 0.0, 1.0);
        let wo = v3(0.0, -0.5, 1.0).normalized();
        let wr = wo.reflect(n);
        let brdf = BrdfParams::new(v3(0.5, 0.5, 0.5), 0.05);
        let aligned = SgMixture::new(vec![SphericalGaussian::grey(wr, 20.0, 1.0)]);
        // same lobe rotated 60° away from the mirror direction
        let (t, _) = wr.onb();
        let off_axis = (wr * 0.5 + t * (3.0f64.sqrt() / 2.0)).normalized();
        let off = SgMixture::new(vec![SphericalGaussian::grey(off_axis, 20.0, 1.0)]);
        let (_, s_on) = shade_direct(n, wo, &brdf, Vec3::ONE, &aligned, |_| 1.0);
        let (_, s_off) = shade_direct(n, wo, &brdf, Vec3::ONE, &off, |_| 1.0);
        assert!(
            s_on.x >= 10.0 * s_off.x,
            "mirror {} vs off-axis {}",
            s_on.x,
            s_off.x
        );
    }

    #[test]
    fn grazing_view_zeroes_specular() {
        let n = v3(0.0, 0.0, 1.0);
        let wo = v3(1.0, 0.0, 0.0); // orthogonal to n
        let brdf = BrdfParams::new(v3(0.5, 0.5, 0.5), 0.3);
        let (d, s) = shade_direct(n, wo, &brdf, Vec3::ONE, &default_env(), |_| 1.0);
        assert_eq!(s, Vec3::ZERO);
        assert!(d.x > 0.0); // diffuse unaffected
    }

    #[test]
    fn diffuse_matches_spherical_quadrature() {
        let env = SgMixture::new(vec![SphericalGaussian::grey(v3(0.3, 0.8, 0.52).normalized(), 6.0, 1.3)]);
        let n = v3(0.0, 1.0, 0.0);
        let brdf = BrdfParams::new(v3(0.8, 0.8, 0.8), 1.0);
        let (dif, _) = shade_direct(n, v3(0.0, 1.0, 0.0), &brdf, Vec3::ZERO, &env, |_| 1.0);
        let mut q = 0.0;
        let cnt = 200_000;
        for w in fibonacci_sphere(cnt) {
            let c = w.dot(n);
            if c > 0.0 {
                q += env.eval(w).x * c;
            }
        }
        q *= 4.0 * PI / cnt as f64;
        let want = 0.8 / PI * q;
        let rel = (dif.x - want).abs() / want;
        assert!(rel < 0.02, "SG diffuse {} vs quadrature {} (rel {rel:.4})", dif.x, want);
    }

    /// The training tape must reproduce the scalar shading path.
    #[test]
    fn tape_shading_matches_scalar() {
        let mut zoo = Zoo::<f64>::build(ZooCfg { width: 16, feat: 8, dec_width: 16 }, 11);
        let env = EnvLight::install_fixed(&mut zoo.store, &default_env()).unwrap();
        let pts = vec![
            ShadePoint {
                x: v3(0.1, 0.2, -0.4),
                n: v3(0.0, 0.0, -1.0),
                wo: v3(0.2, 0.1, -0.95).normalized(),
                gt: Vec3::ZERO,
            },
            ShadePoint {
                x: v3(-0.3, 0.0, 0.2),
                n: v3(0.6, 0.64, 0.48).normalized(),
                wo: v3(0.5, 0.7, 0.5).normalized(),
                gt: Vec3::ZERO,
            },
        ];
        let flags = ShadeFlags { si: true, vi: true, sai: true };

        let env_mix = env.decode(&zoo.store);
        let axes: Vec<Vec3> = env_mix.lobes().iter().map(|l| l.xi).collect();
        let xs: Vec<Vec3> = pts.iter().map(|p| p.x).collect();
        let vis_vals = visibility_lobes(&zoo, &xs, &axes).unwrap();
        let vis_t = Tensor::from_vec(pts.len(), env.k, vis_vals.clone());

        let mut tp = Tape::new();
        let pnodes = zoo.store.nodes_on(&mut tp, |_| false);
        let wrs: Vec<Vec3> = pts.iter().map(|p| p.wo.reflect(p.n)).collect();
        let tr = zoo.salb.forward(&mut tp, &pnodes, &[TapeIn::Raw(tensor3(&xs)), TapeIn::Raw(tensor3(&wrs))]);
        let graph = build_shade_graph(&mut tp, &zoo, &pnodes, &env, &pts, &flags, Some(tr.out), Some(&vis_t));

        let sas = specular_albedo(&zoo, &xs, &wrs).unwrap();
        let brdfs = decode_brdf(&zoo, &xs).unwrap();
        for (i, p) in pts.iter().enumerate() {
            let mut li = 0usize;
            let (dif, spc) = shade_direct(p.n, p.wo, &brdfs[i].brdf, Vec3::splat(sas[i]), &env_mix, |_| {
                let v = vis_vals[i * env.k + li];
                li += 1;
                v
            });
            let ind = indirect_mixture_host(&zoo, p.x).unwrap();
            let (idif, ispc) = shade_indirect(p.n, p.wo, &brdfs[i].brdf, Vec3::splat(sas[i]), &ind);
            let want = dif + spc + idif + ispc;
            for (c, wv) in [want.x, want.y, want.z].into_iter().enumerate() {
                let tv = tp.val(graph.linear).get(i, c);
                assert!(
                    (tv - wv).abs() <= 1e-6 * wv.abs().max(1e-6),
                    "point {i} ch {c}: tape {tv} scalar {wv}"
                );
            }
        }
    }

    /// s_a ≡ 1 with the correction node removed must be *bit*-identical to
    /// the w/o-SAI flag.
    #[test]
    fn sai_off_equals_unit_specular_albedo() {
        let mut zoo = Zoo::<f32>::build(ZooCfg { width: 16, feat: 8, dec_width: 16 }, 13);
        let env = EnvLight::install_fixed(&mut zoo.store, &default_env()).unwrap();
        let pts = vec![ShadePoint {
            x: v3(0.2, -0.1, 0.3),
            n: v3(0.0, 1.0, 0.0),
            wo: v3(0.1, 0.9, 0.2).normalized(),
            gt: Vec3::ZERO,
        }];
        let flags = ShadeFlags { si: true, vi: false, sai: false };

        let mut tp = Tape::new();
        let pnodes = zoo.store.nodes_on(&mut tp, |_| false);
        let without = build_shade_graph(&mut tp, &zoo, &pnodes, &env, &pts, &flags, None, None);
        let ones = tp.constant(Tensor::filled(1, 1, 1.0f32));
        let with_unit = build_shade_graph(&mut tp, &zoo, &pnodes, &env, &pts, &flags, Some(ones), None);
        assert_eq!(
            tp.val(without.display).data(),
            tp.val(with_unit.display).data(),
            "w/o-SAI flag differs from s_a ≡ 1"
        );
    }

    #[test]
    fn stage3_short_training_resumes_bit_exact() {
        let dir = tempdir("mat-train");
        let spec = SynthSpec {
            scene: "glossy-sphere".into(),
            train_views: 3,
            test_views: 1,
            width: 16,
            height: 16,
            spp: 4,
            seed: 21,
        };
        let data = make_synthetic(&spec, &dir.join("data")).unwrap();
        let gt_env = data.gt.as_ref().unwrap().scene.env.clone();
        let scene = preset("glossy-sphere").unwrap();

        let cfg = Stage3Cfg {
            iters: 6,
            batch_rays: 32,
            sample: SampleCfg { n_uniform: 12, rounds: 1, per_round: 4 },
            flags: ShadeFlags { si: false, vi: false, sai: true },
            finetune_ind: false,
            fixed_env: true,
            env_lobes: ENV_LOBES,
            ckpt_every: 3,
            seed: 7,
        };
        let base = crate::testutil::fitted_zoo(&scene);
        let mut zoo_a = base.clone();
        train_stage3(&mut zoo_a, &data, &cfg, Some(&gt_env), &dir.join("a"), false).unwrap();
        let mut zoo_b = base.clone();
        let mut cfg_b = cfg;
        cfg_b.iters = 3;
        train_stage3(&mut zoo_b, &data, &cfg_b, Some(&gt_env), &dir.join("b"), false).unwrap();
        let mut zoo_b2 = base.clone();
        train_stage3(&mut zoo_b2, &data, &cfg, Some(&gt_env), &dir.join("b"), true).unwrap();

        let ca = std::fs::read(dir.join("a").join(STAGE3_CKPT)).unwrap();
        let cb = std::fs::read(dir.join("b").join(STAGE3_CKPT)).unwrap();
        assert_eq!(ca, cb, "resumed checkpoint differs");
        let la = std::fs::read_to_string(dir.join("a").join(STAGE3_LOSS)).unwrap();
        let lb = std::fs::read_to_string(dir.join("b").join(STAGE3_LOSS)).unwrap();
        assert_eq!(la, lb, "resumed loss log differs");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn render_outputs_are_deterministic_and_bounded() {
        let scene = preset("glossy-sphere").unwrap();
        let zoo = fitted_zoo(&scene);
        let env = default_env();
        let cam = Camera::look_at(v3(0.0, 0.0, -2.5), Vec3::ZERO, 16, 16, 28.0);
        let scfg = SampleCfg { n_uniform: 16, rounds: 1, per_round: 4 };
        let flags = ShadeFlags { si: false, vi: false, sai: false };
        let a = render_stage3(&zoo, &env, &cam, &scfg, &flags, 5).unwrap();
        let b = render_stage3(&zoo, &env, &cam, &scfg, &flags, 5).unwrap();
        assert_eq!(a.render.data, b.render.data);
        let hits: f32 = a.mask.data.iter().sum();
        assert!(hits > 8.0, "expected some surface hits, got {hits}");
        for &v in &a.render.data {
            assert!((0.0..=1.0 + 1e-5).contains(&(v as f64)), "display value {v}");
        }
        for &v in &a.spec_albedo.data {
            assert!(v == 0.0 || v == 1.0); // flag off ⇒ ones at hits
        }
    }

    #[test]
    fn env_export_roundtrips() {
        let dir = tempdir("env-export");
        let env = default_env();
        let txt = dir.join("env_sg.txt");
        let pfm = dir.join("env.pfm");
        export_env(&env, &txt, &pfm, 32, 16).unwrap();
        let back = SgMixture::from_text(&std::fs::read_to_string(&txt).unwrap()).unwrap();
        assert_eq!(back.count(), env.count());
        let img = crate::imageio::read_pfm(&pfm).unwrap();
        assert_eq!((img.width, img.height), (32, 16));
        assert!(img.data.iter().all(|v| v.is_finite()));
        std::fs::remove_dir_all(&dir).ok();
    }
}
