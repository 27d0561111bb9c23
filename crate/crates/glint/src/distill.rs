//! Stage 2 — distill continuous light visibility and SG-parameterized
//! indirect illumination out of the frozen stage-1 field.
//!
//! Ground truth is manufactured from the field itself: visibility targets are
//! 1 − Σw along secondary rays, indirect targets are the stage-1 color
//! network queried at sphere-traced secondary hits.  Both are pure functions
//! of the checkpoint and a seed, so sample caches rebuild bit-exactly.

use crate::autodiff::{Real, Tape, Tensor};
use crate::ckpt::Checkpoint;
use crate::err::{Error, Result};
use crate::imageio::CsvLog;
use crate::nets::{TapeIn, Zoo, INDIRECT_LOBES};
use crate::optim::{lr_schedule, Adam};
use crate::render::{find_crossing, interpolate_surface_point, quadrature_weights, sample_batch, tonemap_inv, SampleCfg};
use crate::rng::{stream, tag, Stream};
use crate::scene::{sphere_bounds, Ray, SceneDataset, SCENE_RADIUS};
use crate::sg::{SgMixture, SphericalGaussian};
use crate::vec3::{v3, Vec3};
use rand::Rng;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const STAGE2_CKPT: &str = "stage2.ckpt";
pub const STAGE2_VIS_LOSS: &str = "loss_stage2_vis.csv";
pub const STAGE2_IND_LOSS: &str = "loss_stage2_ind.csv";
pub const VIS_CACHE: &str = "vis_samples.bin";
pub const IND_CACHE: &str = "ind_samples.bin";

/// Secondary rays start this far along ω to clear the surface.
pub const SECONDARY_OFFSET: f64 = 1e-3;
const TRACE_STEPS: usize = 128;
const TRACE_TOL: f64 = 1e-4;

// ---------------------------------------------------------------------------
// surface-point harvest

#[derive(Clone, Copy, Debug)]
pub struct SurfacePoint {
    pub x: Vec3,
    pub n: Vec3,
}

fn reservoir_push(res: &mut Vec<SurfacePoint>, seen: &mut u64, cap: usize, p: SurfacePoint, rng: &mut Stream) {
    *seen += 1;
    if res.len() < cap {
        res.push(p);
    } else {
        let j = rng.gen_range(0..*seen);
        if (j as usize) < cap {
            res[j as usize] = p;
        }
    }
}

/// Collect surface crossings by re-rendering every training view against the
/// frozen field; reservoir-sampled down to `cap` points.
pub fn harvest_surface_points<T: Real>(
    zoo: &Zoo<T>,
    data: &SceneDataset,
    scfg: &SampleCfg,
    cap: usize,
    seed: u64,
) -> Result<Vec<SurfacePoint>> {
    let mut res = Vec::new();
    let mut seen = 0u64;
    let mut rng = stream(seed, &[tag("s2-harvest")]);
    let n = scfg.total();
    for &vi in &data.train_indices() {
        let cam = &data.views[vi].camera;
        let mut rays = Vec::new();
        for py in 0..cam.height {
            for px in 0..cam.width {
                let ray = cam.ray_for_pixel(px, py);
                if !ray.background {
                    rays.push(ray);
                }
            }
        }
        for chunk in rays.chunks(512) {
            let ts = sample_batch(zoo, chunk, scfg, &mut rng)?;
            let mut pts = Vec::with_capacity(chunk.len() * n);
            for (ri, ray) in chunk.iter().enumerate() {
                for i in 0..n {
                    pts.push(ray.origin + ray.dir * ts[ri * n + i]);
                }
            }
            let s = zoo.sdf_value(&tensor3(&pts))?;
            let mut hits = Vec::new();
            for (ri, ray) in chunk.iter().enumerate() {
                let sv: Vec<f64> = (0..n).map(|i| s.get(ri * n + i, 0).as_f64()).collect();
                let Some(cr) = find_crossing(&sv) else { continue };
                let p1 = ray.origin + ray.dir * ts[ri * n + cr.prev];
                let p2 = ray.origin + ray.dir * ts[ri * n + cr.next];
                if let Ok(x) = interpolate_surface_point(p1, p2, sv[cr.prev], sv[cr.next]) {
                    hits.push(x);
                }
            }
            if hits.is_empty() {
                continue;
            }
            let (_, _, g) = zoo.sdf_eval(&tensor3(&hits))?;
            for (i, &x) in hits.iter().enumerate() {
                let grad = v3(g.get(i, 0).as_f64(), g.get(i, 1).as_f64(), g.get(i, 2).as_f64());
                let len = grad.norm();
                if len < 1e-9 {
                    continue;
                }
                reservoir_push(&mut res, &mut seen, cap, SurfacePoint { x, n: grad / len }, &mut rng);
            }
        }
    }
    Ok(res)
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
// visibility ground truth

/// 1 − Σw for a bundle of precomputed weights (split out so the trivial
/// all-zero case is directly testable).
pub fn visibility_from_weights(w: &[f64]) -> f64 {
    (1.0 - w.iter().sum::<f64>()).clamp(0.0, 1.0)
}

/// Batched v^gt: one secondary ray per (point, direction) pair, quadrature
/// weights under the learned κ.
pub fn visibility_gt_batch<T: Real>(
    zoo: &Zoo<T>,
    origins: &[Vec3],
    dirs: &[Vec3],
    scfg: &SampleCfg,
    rng: &mut Stream,
) -> Result<Vec<f64>> {
    assert_eq!(origins.len(), dirs.len());
    let kappa = zoo.kappa();
    let n = scfg.total();
    let mut out = Vec::with_capacity(origins.len());
    let rays: Vec<Ray> = origins
        .iter()
        .zip(dirs)
        .map(|(&x, &w)| {
            let o = x + w * SECONDARY_OFFSET;
            let (_, t1, miss) = sphere_bounds(o, w, SCENE_RADIUS);
            let t_far = if miss { SECONDARY_OFFSET * 2.0 } else { t1 };
            Ray { origin: o, dir: w, t_near: 1e-4, t_far: t_far.max(2e-4), background: false }
        })
        .collect();
    for chunk_start in (0..rays.len()).step_by(512) {
        let chunk = &rays[chunk_start..(chunk_start + 512).min(rays.len())];
        let ts = sample_batch(zoo, chunk, scfg, rng)?;
        let mut pts = Vec::with_capacity(chunk.len() * n);
        for (ri, ray) in chunk.iter().enumerate() {
            for i in 0..n {
                pts.push(ray.origin + ray.dir * ts[ri * n + i]);
            }
        }
        let s = zoo.sdf_value(&tensor3(&pts))?;
        for ri in 0..chunk.len() {
            let sv: Vec<f64> = (0..n).map(|i| s.get(ri * n + i, 0).as_f64()).collect();
            let w = quadrature_weights(&sv, kappa);
            out.push(visibility_from_weights(&w));
        }
    }
    Ok(out)
}

/// Single-ray convenience wrapper.
pub fn visibility_gt<T: Real>(zoo: &Zoo<T>, x: Vec3, w: Vec3, scfg: &SampleCfg, seed: u64) -> Result<f64> {
    let mut rng = stream(seed, &[tag("s2-visgt")]);
    Ok(visibility_gt_batch(zoo, &[x], &[w], scfg, &mut rng)?[0])
}

// ---------------------------------------------------------------------------
// indirect ground truth

/// Lockstep sphere tracing of many rays through the SDF net: per step one
/// batched evaluation over the still-active rays.  Returns the hit point per
/// ray, or None on escape / step exhaustion.
pub fn trace_field_batch<T: Real>(
    zoo: &Zoo<T>,
    origins: &[Vec3],
    dirs: &[Vec3],
) -> Result<Vec<Option<Vec3>>> {
    assert_eq!(origins.len(), dirs.len());
    let mut out: Vec<Option<Vec3>> = vec![None; origins.len()];
    let mut t = vec![0.0f64; origins.len()];
    let mut t_max = Vec::with_capacity(origins.len());
    let mut active: Vec<usize> = Vec::new();
    for (i, (&o, &d)) in origins.iter().zip(dirs).enumerate() {
        let (_, t1, miss) = sphere_bounds(o, d, SCENE_RADIUS);
        t_max.push(if miss { 0.0 } else { t1 });
        if !miss {
            active.push(i);
        }
    }
    for _ in 0..TRACE_STEPS {
        if active.is_empty() {
            break;
        }
        let pts: Vec<Vec3> = active.iter().map(|&i| origins[i] + dirs[i] * t[i]).collect();
        let s = zoo.sdf_value(&tensor3(&pts))?;
        let mut next = Vec::with_capacity(active.len());
        for (k, &i) in active.iter().enumerate() {
            let sv = s.get(k, 0).as_f64();
            if sv.abs() < TRACE_TOL {
                out[i] = Some(pts[k]);
                continue;
            }
            t[i] += sv;
            if t[i] > t_max[i] || t[i] < 0.0 {
                continue; // escaped
            }
            next.push(i);
        }
        active = next;
    }
    Ok(out)
}

/// Pseudo-GT indirect radiance: sphere-trace from x along ω; on a hit, query
/// the stage-1 color net there and return linear radiance.  None on escape.
pub fn indirect_gt_batch<T: Real>(
    zoo: &Zoo<T>,
    points: &[SurfacePoint],
    dirs: &[Vec3],
) -> Result<Vec<Option<Vec3>>> {
    let origins: Vec<Vec3> = points.iter().zip(dirs).map(|(p, &w)| p.x + w * SECONDARY_OFFSET).collect();
    let hits = trace_field_batch(zoo, &origins, dirs)?;
    let mut hit_pts = Vec::new();
    let mut hit_dirs = Vec::new();
    let mut hit_idx = Vec::new();
    for (i, h) in hits.iter().enumerate() {
        if let Some(x2) = h {
            hit_pts.push(*x2);
            hit_dirs.push(dirs[i]);
            hit_idx.push(i);
        }
    }
    let mut out: Vec<Option<Vec3>> = vec![None; points.len()];
    if hit_pts.is_empty() {
        return Ok(out);
    }
    let xt = tensor3::<T>(&hit_pts);
    let (_, feat, g) = zoo.sdf_eval(&xt)?;
    let mut normals = Vec::with_capacity(hit_pts.len());
    for r in 0..hit_pts.len() {
        let grad = v3(g.get(r, 0).as_f64(), g.get(r, 1).as_f64(), g.get(r, 2).as_f64());
        let len = grad.norm().max(1e-9);
        normals.push(grad / len);
    }
    let c = zoo.col.eval(&zoo.store, &[xt, tensor3(&normals), tensor3(&hit_dirs), feat])?;
    for (r, &i) in hit_idx.iter().enumerate() {
        let disp = v3(c.get(r, 0).as_f64(), c.get(r, 1).as_f64(), c.get(r, 2).as_f64());
        out[i] = Some(v3(tonemap_inv(disp.x), tonemap_inv(disp.y), tonemap_inv(disp.z)));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// sample records and caches

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillRecord {
    pub x: Vec3,
    pub w: Vec3,
    /// Visibility target in .x, or linear indirect radiance.
    pub target: Vec3,
    /// Indirect records: whether the secondary ray hit anything.
    pub hit: bool,
}

const CACHE_MAGIC: &[u8; 8] = b"GLDSMP01";

pub fn save_records(path: &Path, recs: &[DistillRecord]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    w.write_all(CACHE_MAGIC).map_err(io)?;
    w.write_all(&1u32.to_le_bytes()).map_err(io)?;
    w.write_all(&(recs.len() as u64).to_le_bytes()).map_err(io)?;
    for r in recs {
        for v in [r.x.x, r.x.y, r.x.z, r.w.x, r.w.y, r.w.z, r.target.x, r.target.y, r.target.z] {
            w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
        }
        w.write_all(&[r.hit as u8]).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_records(path: &Path) -> Result<Vec<DistillRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CACHE_MAGIC {
        return Err(Error::parse("sample cache", path, "bad magic"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(io)?;
    if u32::from_le_bytes(b4) != 1 {
        return Err(Error::parse("sample cache", path, "unsupported version"));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(io)?;
    let count = u64::from_le_bytes(b8) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut vals = [0f32; 9];
        for v in &mut vals {
            r.read_exact(&mut b4).map_err(io)?;
            *v = f32::from_le_bytes(b4);
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag).map_err(io)?;
        out.push(DistillRecord {
            x: v3(vals[0] as f64, vals[1] as f64, vals[2] as f64),
            w: v3(vals[3] as f64, vals[4] as f64, vals[5] as f64),
            target: v3(vals[6] as f64, vals[7] as f64, vals[8] as f64),
            hit: flag[0] != 0,
        });
    }
    Ok(out)
}

fn hemisphere_dirs(n: Vec3, count: usize, rng: &mut Stream) -> Vec<Vec3> {
    (0..count)
        .map(|_| {
            let w = crate::rng::unit_sphere(rng);
            if w.dot(n) < 0.0 {
                w * -1.0
            } else {
                w
            }
        })
        .collect()
}

/// Build both sample sets over the same per-point direction sets.
pub fn build_samples<T: Real>(
    zoo: &Zoo<T>,
    pts: &[SurfacePoint],
    dirs_per_point: usize,
    scfg: &SampleCfg,
    seed: u64,
) -> Result<(Vec<DistillRecord>, Vec<DistillRecord>)> {
    let mut all_pts = Vec::with_capacity(pts.len() * dirs_per_point);
    let mut all_dirs = Vec::with_capacity(pts.len() * dirs_per_point);
    for (i, p) in pts.iter().enumerate() {
        let mut rng = stream(seed, &[tag("s2-dirs"), i as u64]);
        for w in hemisphere_dirs(p.n, dirs_per_point, &mut rng) {
            all_pts.push(*p);
            all_dirs.push(w);
        }
    }
    let origins: Vec<Vec3> = all_pts.iter().map(|p| p.x).collect();
    let mut rng = stream(seed, &[tag("s2-visgt")]);
    let vgt = visibility_gt_batch(zoo, &origins, &all_dirs, scfg, &mut rng)?;
    let igt = indirect_gt_batch(zoo, &all_pts, &all_dirs)?;

    let mut vis = Vec::with_capacity(all_pts.len());
    let mut ind = Vec::with_capacity(all_pts.len());
    for i in 0..all_pts.len() {
        vis.push(DistillRecord {
            x: all_pts[i].x,
            w: all_dirs[i],
            target: v3(vgt[i], 0.0, 0.0),
            hit: false,
        });
        ind.push(DistillRecord {
            x: all_pts[i].x,
            w: all_dirs[i],
            target: igt[i].unwrap_or(Vec3::ZERO),
            hit: igt[i].is_some(),
        });
    }
    Ok((vis, ind))
}

// ---------------------------------------------------------------------------
// indirect SG decode

/// Decode one raw 168-vector into 24 SG lobes: axes normalized, sharpness and
/// amplitudes made positive by softplus (sharpness floored at 1e−2).
pub fn decode_indirect(raw: &[f64]) -> SgMixture {
    assert_eq!(raw.len(), INDIRECT_LOBES * 7);
    let sp = |x: f64| {
        if x > 30.0 {
            x
        } else {
            (1.0 + x.exp()).ln()
        }
    };
    let lobes = (0..INDIRECT_LOBES)
        .map(|k| {
            let b = &raw[k * 7..(k + 1) * 7];
            let axis = v3(b[0], b[1], b[2]);
            let len = (axis.norm2() + 1e-9).sqrt();
            SphericalGaussian {
                xi: axis / len,
                lambda: sp(b[3]) + 1e-2,
                mu: v3(sp(b[4]), sp(b[5]), sp(b[6])),
            }
        })
        .collect();
    SgMixture::new(lobes)
}

/// Decoded indirect radiance at `x` along `w` (inference path).
pub fn eval_indirect<T: Real>(zoo: &Zoo<T>, x: Vec3, w: Vec3) -> Result<Vec3> {
    let out = zoo.ind.eval(&zoo.store, &[tensor3(&[x])])?;
    let raw: Vec<f64> = (0..INDIRECT_LOBES * 7).map(|c| out.get(0, c).as_f64()).collect();
    Ok(decode_indirect(&raw).eval(w))
}

// ---------------------------------------------------------------------------
// training

#[derive(Clone, Copy, Debug)]
pub struct Stage2Cfg {
    pub iters_vis: u64,
    pub iters_ind: u64,
    pub batch: usize,
    /// Surface points to harvest (reservoir cap applies on top).
    pub points: usize,
    pub dirs_per_point: usize,
    pub point_cap: usize,
    pub sample: SampleCfg,
    pub seed: u64,
}

impl Stage2Cfg {
    pub fn desk(seed: u64) -> Stage2Cfg {
        Stage2Cfg {
            iters_vis: 8000,
            iters_ind: 8000,
            batch: 1024,
            points: 2000,
            dirs_per_point: 128,
            point_cap: 200_000,
            sample: SampleCfg::desk(),
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Stage2Report {
    pub vis_holdout_mae: f64,
    pub ind_holdout_l1: Option<f64>,
    pub ind_trained: bool,
    pub n_points: usize,
    pub n_hits: usize,
}

fn shuffle_split(records: &mut [DistillRecord], rng: &mut Stream) -> usize {
    for i in (1..records.len()).rev() {
        let j = rng.gen_range(0..=i as u64) as usize;
        records.swap(i, j);
    }
    // last tenth is held out
    records.len() - records.len() / 10
}

fn batch_tensors<T: Real>(recs: &[DistillRecord], idx: &[usize]) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let xs: Vec<Vec3> = idx.iter().map(|&i| recs[i].x).collect();
    let ws: Vec<Vec3> = idx.iter().map(|&i| recs[i].w).collect();
    let ts: Vec<Vec3> = idx.iter().map(|&i| recs[i].target).collect();
    (tensor3(&xs), tensor3(&ws), tensor3(&ts))
}

/// L1 regression of M_v onto the cached targets.  Returns held-out MAE.
pub fn train_visibility<T: Real>(
    zoo: &mut Zoo<T>,
    records: &[DistillRecord],
    cfg: &Stage2Cfg,
    out_dir: &Path,
) -> Result<f64> {
    let mut recs = records.to_vec();
    let mut rng = stream(cfg.seed, &[tag("s2-vis-split")]);
    let split = shuffle_split(&mut recs, &mut rng);
    let (train, held) = recs.split_at(split);
    if train.is_empty() {
        return Err(Error::Config("no visibility samples".into()));
    }

    let mut adam = Adam::new(&zoo.store);
    let mut log = CsvLog::new("iter,L1,lr");
    let mut first_window = None;
    for iter in 0..cfg.iters_vis {
        let mut rng = stream(cfg.seed, &[tag("s2-vis"), iter]);
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.gen_range(0..train.len())).collect();
        let (xt, wt, tt) = batch_tensors::<T>(train, &idx);
        let mut tgt = Tensor::<T>::zeros(idx.len(), 1);
        {
            let td = tgt.data_mut();
            for r in 0..idx.len() {
                td[r] = tt.get(r, 0);
            }
        }

        let mut tp = Tape::new();
        let pnodes = zoo.store.nodes_on(&mut tp, |n| n.starts_with("vis."));
        let tr = zoo.vis.forward(&mut tp, &pnodes, &[TapeIn::Raw(xt), TapeIn::Raw(wt)]);
        let tnode = tp.constant(tgt);
        let d = tp.sub(tr.out, tnode);
        let a = tp.abs(d);
        let loss = tp.mean_all(a);
        let lv = tp.val(loss).get(0, 0).as_f64();
        if !lv.is_finite() {
            return Err(Error::NonFinite { what: "visibility loss".into(), detail: format!("iter {iter}") });
        }
        if iter < 100 {
            let w = first_window.get_or_insert(0.0);
            *w += lv / 100.0;
        }
        if iter == 5000 {
            if let Some(initial) = first_window {
                if lv > initial {
                    return Err(Error::Contract {
                        op: "train_visibility",
                        detail: format!("diverged: loss {lv:.4} at iter 5000 exceeds initial {initial:.4}"),
                    });
                }
            }
        }
        let lr = lr_schedule(iter + 1, cfg.iters_vis);
        let mut grads = tp.backward(loss);
        adam.update(&mut zoo.store, &mut grads, &pnodes, lr);
        log.push(format!("{iter},{lv:.6e},{lr:.6e}"));
    }
    log.save(&out_dir.join(STAGE2_VIS_LOSS))?;

    // held-out MAE
    let idx: Vec<usize> = (0..held.len()).collect();
    let (xt, wt, tt) = batch_tensors::<T>(held, &idx);
    let pred = zoo.vis.eval(&zoo.store, &[xt, wt])?;
    let mae = (0..held.len())
        .map(|r| (pred.get(r, 0).as_f64() - tt.get(r, 0).as_f64()).abs())
        .sum::<f64>()
        / held.len().max(1) as f64;
    Ok(mae)
}

/// L1 regression of the decoded 24-lobe mixture onto hit-only indirect
/// targets.  Returns None (skipped) when fewer than 100 hits exist.
pub fn train_indirect<T: Real>(
    zoo: &mut Zoo<T>,
    records: &[DistillRecord],
    cfg: &Stage2Cfg,
    out_dir: &Path,
) -> Result<Option<f64>> {
    let mut recs: Vec<DistillRecord> = records.iter().copied().filter(|r| r.hit).collect();
    if recs.len() < 100 {
        eprintln!(
            "stage 2: only {} indirect hits — skipping M_ind training (negligible interreflection)",
            recs.len()
        );
        return Ok(None);
    }
    let mut rng = stream(cfg.seed, &[tag("s2-ind-split")]);
    let split = shuffle_split(&mut recs, &mut rng);
    let (train, held) = recs.split_at(split);

    let mut adam = Adam::new(&zoo.store);
    let mut log = CsvLog::new("iter,L1,lr");
    for iter in 0..cfg.iters_ind {
        let mut rng = stream(cfg.seed, &[tag("s2-ind"), iter]);
        let idx: Vec<usize> = (0..cfg.batch.min(train.len())).map(|_| rng.gen_range(0..train.len())).collect();
        let (xt, wt, tt) = batch_tensors::<T>(train, &idx);

        let mut tp = Tape::new();
        let pnodes = zoo.store.nodes_on(&mut tp, |n| n.starts_with("ind."));
        let pred = indirect_mixture_at(&mut tp, zoo, &pnodes, xt, &wt);
        let tnode = tp.constant(tt);
        let d = tp.sub(pred, tnode);
        let a = tp.abs(d);
        let loss = tp.mean_all(a);
        let lv = tp.val(loss).get(0, 0).as_f64();
        if !lv.is_finite() {
            return Err(Error::NonFinite { what: "indirect loss".into(), detail: format!("iter {iter}") });
        }
        let lr = lr_schedule(iter + 1, cfg.iters_ind);
        let mut grads = tp.backward(loss);
        adam.update(&mut zoo.store, &mut grads, &pnodes, lr);
        log.push(format!("{iter},{lv:.6e},{lr:.6e}"));
    }
    log.save(&out_dir.join(STAGE2_IND_LOSS))?;

    let mut err = 0.0;
    for chunk in held.chunks(1024) {
        let idx: Vec<usize> = (0..chunk.len()).collect();
        let (xt, _, _) = batch_tensors::<T>(chunk, &idx);
        let out = zoo.ind.eval(&zoo.store, &[xt])?;
        for (r, rec) in chunk.iter().enumerate() {
            let raw: Vec<f64> = (0..INDIRECT_LOBES * 7).map(|c| out.get(r, c).as_f64()).collect();
            let pred = decode_indirect(&raw).eval(rec.w);
            let d = pred - rec.target;
            err += (d.x.abs() + d.y.abs() + d.z.abs()) / 3.0;
        }
    }
    Ok(Some(err / held.len().max(1) as f64))
}

/// Tape decode+eval of the indirect mixture at per-row directions; mirrors
/// `decode_indirect` exactly (cross-checked in tests).
fn indirect_mixture_at<T: Real>(
    tp: &mut Tape<T>,
    zoo: &Zoo<T>,
    pnodes: &[crate::autodiff::NodeId],
    x: Tensor<T>,
    dirs: &Tensor<T>,
) -> crate::autodiff::NodeId {
    let k = INDIRECT_LOBES;
    let tr = zoo.ind.forward(tp, pnodes, &[TapeIn::Raw(x)]);
    // raw layout per lobe: [axis xyz, sharpness, amp rgb]
    let mut ax_cols = Vec::with_capacity(k);
    let mut lam_cols = Vec::with_capacity(k);
    let mut amp_cols = Vec::with_capacity(k);
    for kk in 0..k {
        ax_cols.push(tp.slice_cols(tr.out, kk * 7, 3));
        lam_cols.push(tp.slice_cols(tr.out, kk * 7 + 3, 1));
        amp_cols.push(tp.slice_cols(tr.out, kk * 7 + 4, 3));
    }
    let axes = tp.concat_cols(&ax_cols); // N×3K
    let lam_raw = tp.concat_cols(&lam_cols); // N×K
    let amps_raw = tp.concat_cols(&amp_cols); // N×3K

    let sp_lam = tp.softplus(lam_raw, 1.0);
    let lam = tp.add_const(sp_lam, 1e-2);
    let amps = tp.softplus(amps_raw, 1.0);

    let norms = tp.block_norm(axes, 1e-9); // N×K
    let dnode = tp.constant(dirs.clone());
    let dots = tp.block_dot(axes, dnode); // N×K (unnormalized)
    let cosang = tp.div(dots, norms);
    let cm1 = tp.add_const(cosang, -1.0);
    let ex = tp.mul(lam, cm1);
    let g = tp.exp(ex); // N×K
    let scaled = tp.block_mul_k(amps, g); // N×3K
    tp.block_sum_k(scaled) // N×3
}

/// Full stage 2 over a frozen stage-1 zoo: harvest, caches, both trainings,
/// final checkpoint.  Caches are reused when `reuse_cache` and present.
pub fn train_stage2<T: Real>(
    zoo: &mut Zoo<T>,
    data: &SceneDataset,
    cfg: &Stage2Cfg,
    out_dir: &Path,
    reuse_cache: bool,
) -> Result<Stage2Report> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let vis_path = out_dir.join(VIS_CACHE);
    let ind_path = out_dir.join(IND_CACHE);

    let (vis_recs, ind_recs, n_points) = if reuse_cache && vis_path.exists() && ind_path.exists() {
        let v = load_records(&vis_path)?;
        let i = load_records(&ind_path)?;
        let np = v.len() / cfg.dirs_per_point.max(1);
        (v, i, np)
    } else {
        let mut pts = harvest_surface_points(zoo, data, &cfg.sample, cfg.point_cap, cfg.seed)?;
        if pts.len() > cfg.points {
            // deterministic thinning: keep a stride-spread subset
            let stride = pts.len() as f64 / cfg.points as f64;
            pts = (0..cfg.points).map(|i| pts[(i as f64 * stride) as usize]).collect();
        }
        if pts.is_empty() {
            return Err(Error::Contract {
                op: "train_stage2",
                detail: "no surface crossings found in any training view".into(),
            });
        }
        let (v, i) = build_samples(zoo, &pts, cfg.dirs_per_point, &cfg.sample, cfg.seed)?;
        save_records(&vis_path, &v)?;
        save_records(&ind_path, &i)?;
        (v, i, pts.len())
    };

    let vis_holdout_mae = train_visibility(zoo, &vis_recs, cfg, out_dir)?;
    let n_hits = ind_recs.iter().filter(|r| r.hit).count();
    let ind_holdout_l1 = train_indirect(zoo, &ind_recs, cfg, out_dir)?;

    zoo.store.check_finite(&zoo.store.ids().collect::<Vec<_>>())?;
    Checkpoint::capture(2, cfg.iters_vis + cfg.iters_ind, cfg.seed, &zoo.store, None)
        .save(&out_dir.join(STAGE2_CKPT))?;
    Ok(Stage2Report {
        vis_holdout_mae,
        ind_holdout_l1,
        ind_trained: ind_holdout_l1.is_some(),
        n_points,
        n_hits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::ZooCfg;
    use crate::scene::preset;
    use crate::testutil::fitted_zoo;

    #[test]
    fn zero_weights_mean_full_visibility() {
        assert_eq!(visibility_from_weights(&[]), 1.0);
        assert_eq!(visibility_from_weights(&[0.0, 0.0]), 1.0);
        assert!((visibility_from_weights(&[0.3, 0.3]) - 0.4).abs() < 1e-12);
        assert_eq!(visibility_from_weights(&[0.8, 0.4]), 0.0); // clamped
    }

    #[test]
    fn visibility_gt_open_sky_and_occluded() {
        let scene = preset("two-sphere-occlusion").unwrap();
        let zoo = fitted_zoo(&scene);
        // point on the left sphere's outboard side, normal −x
        let x = v3(-0.42 - 0.35, 0.0, 0.0);
        let up = visibility_gt(&zoo, x, v3(-1.0, 0.0, 0.0), &SampleCfg::desk(), 3).unwrap();
        assert!(up >= 0.95, "open sky visibility {up}");
        // inboard point aimed at the second sphere
        let x = v3(-0.42 + 0.35, 0.0, 0.0);
        let through = visibility_gt(&zoo, x, v3(1.0, 0.0, 0.0), &SampleCfg::desk(), 3).unwrap();
        assert!(through <= 0.05, "occluded visibility {through}");
    }

    #[test]
    fn traced_field_hits_match_analytic_sphere() {
        let scene = preset("glossy-sphere").unwrap();
        let zoo = fitted_zoo(&scene);
        let o = v3(0.0, 0.0, -0.9);
        let d = v3(0.0, 0.0, 1.0);
        let hit = trace_field_batch(&zoo, &[o], &[d]).unwrap()[0];
        let x = hit.expect("ray toward the sphere must hit");
        // analytic first intersection at z = −0.5
        assert!((x.z - (-0.5)).abs() < 0.02, "hit at {x:?}");
        // ray pointing away escapes
        let miss = trace_field_batch(&zoo, &[v3(0.0, 0.0, -0.9)], &[v3(0.0, 0.0, -1.0)]).unwrap()[0];
        assert!(miss.is_none());
    }

    #[test]
    fn indirect_gt_tangent_fuzz_is_total() {
        let scene = preset("two-sphere-occlusion").unwrap();
        let zoo = fitted_zoo(&scene);
        let mut rng = stream(17, &[tag("fuzz")]);
        let pts: Vec<SurfacePoint> = (0..32)
            .map(|_| {
                let d = crate::rng::unit_sphere(&mut rng);
                let c = if rng.gen::<bool>() { v3(-0.42, 0.0, 0.0) } else { v3(0.42, 0.0, 0.0) };
                SurfacePoint { x: c + d * 0.35, n: d }
            })
            .collect();
        // tangent directions: orthogonal to n
        let dirs: Vec<Vec3> = pts
            .iter()
            .map(|p| {
                let (t, _) = p.n.onb();
                t
            })
            .collect();
        let out = indirect_gt_batch(&zoo, &pts, &dirs).unwrap();
        assert_eq!(out.len(), pts.len()); // no panic, every slot decided
    }

    #[test]
    fn record_cache_roundtrip_and_determinism() {
        let recs = vec![
            DistillRecord { x: v3(0.1, -0.2, 0.3), w: v3(0.0, 0.0, 1.0), target: v3(0.9, 0.0, 0.0), hit: false },
            DistillRecord { x: v3(-0.4, 0.5, -0.6), w: v3(1.0, 0.0, 0.0), target: v3(0.1, 0.2, 0.3), hit: true },
        ];
        let dir = std::env::temp_dir().join(format!("glint-cache-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("t.bin");
        save_records(&p, &recs).unwrap();
        let back = load_records(&p).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in recs.iter().zip(&back) {
            assert!((a.x - b.x).norm() < 1e-6);
            assert!((a.target - b.target).norm() < 1e-6);
            assert_eq!(a.hit, b.hit);
        }
        // bad magic rejected
        std::fs::write(dir.join("bad.bin"), b"NOTMAGIC\x01\x00\x00\x00").unwrap();
        assert!(load_records(&dir.join("bad.bin")).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn decode_indirect_properties() {
        let mut raw = vec![0.0; INDIRECT_LOBES * 7];
        // zero amplitudes → black (softplus(−40) ≈ 0)
        for k in 0..INDIRECT_LOBES {
            raw[k * 7] = 1.0; // axis +x
            raw[k * 7 + 3] = 2.0;
            for t in 0..3 {
                raw[k * 7 + 4 + t] = -40.0;
            }
        }
        let m = decode_indirect(&raw);
        assert!(m.eval(v3(1.0, 0.0, 0.0)).norm() < 1e-12);
        for l in m.lobes() {
            assert!(l.lambda > 0.0);
            assert!((l.xi.norm() - 1.0).abs() < 1e-4);
        }

        // single dominant lobe aligned with ω ≈ its amplitude
        raw[4] = 10.0; // lobe 0 red amp, softplus(10) ≈ 10
        raw[3] = 5.0; // sharpness
        let m = decode_indirect(&raw);
        let v = m.eval(v3(1.0, 0.0, 0.0));
        assert!((v.x - 10.0).abs() / 10.0 < 0.01, "aligned eval {v:?}");

        // order invariance: swap two lobes
        let mut raw2 = raw.clone();
        raw2.copy_within(0..7, 7 * 5);
        raw2[..7].copy_from_slice(&raw[7 * 5..7 * 6]);
        let m2 = decode_indirect(&raw2);
        let w = v3(0.3, -0.5, 0.9).normalized();
        assert!((m.eval(w) - m2.eval(w)).norm() < 1e-9);
    }

    #[test]
    fn tape_decode_matches_host_decode() {
        let zoo = Zoo::<f32>::build(ZooCfg { width: 16, feat: 8, dec_width: 16 }, 8);
        let xs = vec![v3(0.1, 0.2, -0.3), v3(-0.5, 0.0, 0.4)];
        let ws = vec![v3(0.0, 0.0, 1.0), v3(1.0, 0.0, 0.0)];
        let mut tp = Tape::new();
        let pnodes = zoo.store.nodes_on(&mut tp, |_| false);
        let pred = indirect_mixture_at(&mut tp, &zoo, &pnodes, tensor3(&xs), &tensor3(&ws));
        let out = zoo.ind.eval(&zoo.store, &[tensor3(&xs)]).unwrap();
        for r in 0..2 {
            let raw: Vec<f64> = (0..INDIRECT_LOBES * 7).map(|c| out.get(r, c) as f64).collect();
            let host = decode_indirect(&raw).eval(ws[r]);
            for (c, hv) in [host.x, host.y, host.z].into_iter().enumerate() {
                let tv = tp.val(pred).get(r, c) as f64;
                assert!(
                    (tv - hv).abs() <= 1e-4 * hv.abs().max(1.0),
                    "row {r} ch {c}: tape {tv} host {hv}"
                );
            }
        }
    }

    #[test]
    fn visibility_training_fits_constant_target() {
        let mut zoo = Zoo::<f32>::build(ZooCfg { width: 16, feat: 8, dec_width: 16 }, 2);
        let mut rng = stream(5, &[tag("const")]);
        let recs: Vec<DistillRecord> = (0..2000)
            .map(|_| DistillRecord {
                x: crate::rng::unit_sphere(&mut rng) * 0.5,
                w: crate::rng::unit_sphere(&mut rng),
                target: v3(1.0, 0.0, 0.0),
                hit: false,
            })
            .collect();
        let dir = std::env::temp_dir().join(format!("glint-vistrain-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        // 5000 iters: the warm-up schedule only reaches peak lr there
        let cfg = Stage2Cfg { iters_vis: 5000, batch: 256, ..Stage2Cfg::desk(5) };
        let mae = train_visibility(&mut zoo, &recs, &cfg, &dir).unwrap();
        assert!(mae <= 0.02, "constant-target MAE {mae}");
        // loss strictly decreased start → end
        let log = CsvLog::load(&dir.join(STAGE2_VIS_LOSS)).unwrap();
        let first: f64 = log.rows[0].split(',').nth(1).unwrap().parse().unwrap();
        let last: f64 = log.rows.last().unwrap().split(',').nth(1).unwrap().parse().unwrap();
        assert!(last < first, "no improvement: {first} → {last}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn indirect_training_skips_without_hits() {
        let mut zoo = Zoo::<f32>::build(ZooCfg { width: 16, feat: 8, dec_width: 16 }, 3);
        let recs: Vec<DistillRecord> = (0..500)
            .map(|i| DistillRecord {
                x: v3(i as f64 * 1e-3, 0.0, 0.0),
                w: v3(0.0, 0.0, 1.0),
                target: Vec3::ZERO,
                hit: i < 50, // under the 100-hit threshold
            })
            .collect();
        let dir = std::env::temp_dir().join(format!("glint-indskip-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let cfg = Stage2Cfg::desk(3);
        let out = train_indirect(&mut zoo, &recs, &cfg, &dir).unwrap();
        assert!(out.is_none());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn sample_build_is_bit_deterministic() {
        let scene = preset("glossy-sphere").unwrap();
        let zoo = fitted_zoo(&scene);
        let pts = vec![
            SurfacePoint { x: v3(0.0, 0.0, -0.5), n: v3(0.0, 0.0, -1.0) },
            SurfacePoint { x: v3(0.5, 0.0, 0.0), n: v3(1.0, 0.0, 0.0) },
        ];
        let scfg = SampleCfg { n_uniform: 16, rounds: 1, per_round: 4 };
        let (v1, i1) = build_samples(&zoo, &pts, 8, &scfg, 42).unwrap();
        let (v2, i2) = build_samples(&zoo, &pts, 8, &scfg, 42).unwrap();
        assert_eq!(v1.len(), v2.len());
        for (a, b) in v1.iter().zip(&v2).chain(i1.iter().zip(&i2)) {
            assert_eq!(a.x, b.x);
            assert_eq!(a.w, b.w);
            assert_eq!(a.target, b.target);
            assert_eq!(a.hit, b.hit);
        }
    }
}
