//! Evaluation metrics: Chamfer distance and masked PSNR.
//!
//! Nearest-neighbor queries are exact (k-d tree with branch-and-bound that
//! only prunes subtrees provably farther than the current best); approximate
//! structures are deliberately not used here.

use crate::err::{Error, Result};
use crate::imageio::FloatImage;
use crate::mesh::Mesh;
use crate::vec3::Vec3;

pub const PSNR_CAP: f64 = 99.0;

/// k-d tree over a fixed point set (median split on the widest axis).
struct KdTree<'a> {
    pts: &'a [Vec3],
    order: Vec<u32>,
    axis: Vec<u8>,
}

fn coord(p: Vec3, a: u8) -> f64 {
    match a {
        0 => p.x,
        1 => p.y,
        _ => p.z,
    }
}

impl<'a> KdTree<'a> {
    fn build(pts: &'a [Vec3]) -> KdTree<'a> {
        let mut t = KdTree {
            pts,
            order: (0..pts.len() as u32).collect(),
            axis: vec![0; pts.len()],
        };
        t.split(0, pts.len());
        t
    }

    fn split(&mut self, lo: usize, hi: usize) {
        if hi - lo <= 1 {
            return;
        }
        let mut min = Vec3::splat(f64::INFINITY);
        let mut max = Vec3::splat(f64::NEG_INFINITY);
        for &i in &self.order[lo..hi] {
            min = min.min(self.pts[i as usize]);
            max = max.max(self.pts[i as usize]);
        }
        let ext = max - min;
        let a = if ext.x >= ext.y && ext.x >= ext.z {
            0u8
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        let mid = (hi - lo) / 2;
        self.order[lo..hi].select_nth_unstable_by(mid, |&i, &j| {
            coord(self.pts[i as usize], a).total_cmp(&coord(self.pts[j as usize], a))
        });
        self.axis[lo + mid] = a;
        self.split(lo, lo + mid);
        self.split(lo + mid + 1, hi);
    }

    /// Exact nearest distance from `q` to the set.
    fn nearest(&self, q: Vec3) -> f64 {
        let mut best = f64::INFINITY;
        self.descend(q, 0, self.order.len(), &mut best);
        best.sqrt()
    }

    fn descend(&self, q: Vec3, lo: usize, hi: usize, best: &mut f64) {
        if hi <= lo {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let p = self.pts[self.order[mid] as usize];
        let d = (p - q).norm2();
        if d < *best {
            *best = d;
        }
        let delta = coord(q, self.axis[mid]) - coord(p, self.axis[mid]);
        let (near, far) = if delta < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.descend(q, near.0, near.1, best);
        if delta * delta < *best {
            self.descend(q, far.0, far.1, best);
        }
    }
}

/// Mean exact nearest-neighbor distance from each point of `a` to the set `b`.
pub fn mean_nearest(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("chamfer", "empty point set"));
    }
    let tree = KdTree::build(b);
    let sum: f64 = a.iter().map(|&p| tree.nearest(p)).sum();
    Ok(sum / a.len() as f64)
}

/// Symmetric Chamfer distance between two point sets: the mean of the two
/// directed mean-NN distances.
pub fn chamfer_points(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    Ok(0.5 * (mean_nearest(a, b)? + mean_nearest(b, a)?))
}

/// Chamfer between meshes via `n` area-weighted surface samples each way.
/// Sampling seeds derive from mesh content, so `chamfer(a,b) == chamfer(b,a)`
/// and identical meshes compare at exactly zero.
pub fn chamfer(a: &Mesh, b: &Mesh, n: usize) -> Result<f64> {
    if a.tris.is_empty() || b.tris.is_empty() || n == 0 {
        return Err(Error::contract("chamfer", "empty mesh or zero samples"));
    }
    let sa = a.sample_surface(n, a.content_seed());
    let sb = b.sample_surface(n, b.content_seed());
    chamfer_points(&sa, &sb)
}

/// PSNR over masked pixels, peak 1.0, capped at 99 dB.  `mask` is a 1-channel
/// image; a pixel contributes when its mask value is > 0.5.
pub fn psnr(a: &FloatImage, b: &FloatImage, mask: Option<&FloatImage>) -> Result<f64> {
    if a.width != b.width || a.height != b.height || a.channels != b.channels {
        return Err(Error::contract(
            "psnr",
            format!(
                "image shapes differ: {}x{}x{} vs {}x{}x{}",
                a.width, a.height, a.channels, b.width, b.height, b.channels
            ),
        ));
    }
    if let Some(m) = mask {
        if m.width != a.width || m.height != a.height || m.channels != 1 {
            return Err(Error::contract("psnr", "mask shape mismatch"));
        }
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for y in 0..a.height {
        for x in 0..a.width {
            if let Some(m) = mask {
                if m.pixel(x, y)[0] <= 0.5 {
                    continue;
                }
            }
            let (pa, pb) = (a.pixel(x, y), b.pixel(x, y));
            for c in 0..a.channels {
                let d = pa[c] as f64 - pb[c] as f64;
                sum += d * d;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::contract("psnr", "empty mask: no pixels to compare"));
    }
    let mse = sum / (count * a.channels) as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

/// Mean absolute error over all pixels/channels (used for map comparisons).
pub fn mae(a: &FloatImage, b: &FloatImage) -> Result<f64> {
    if a.width != b.width || a.height != b.height || a.channels != b.channels {
        return Err(Error::contract("mae", "image shapes differ"));
    }
    let n = a.data.len().max(1);
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum::<f64>()
        / n as f64)
}
