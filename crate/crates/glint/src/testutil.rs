//! Shared test-only helpers: a quick supervised SDF fit gives later-stage
//! tests a plausible frozen field without running stage 1.

use crate::autodiff::{Tape, Tensor};
use crate::nets::{TapeIn, Zoo, ZooCfg};
use crate::optim::Adam;
use crate::rng::{stream, tag};
use crate::scene::AnalyticScene;
use crate::vec3::Vec3;
use rand::Rng;

pub fn tensor3(pts: &[Vec3]) -> Tensor<f32> {
    let mut d = Vec::with_capacity(pts.len() * 3);
    for p in pts {
        d.push(p.x as f32);
        d.push(p.y as f32);
        d.push(p.z as f32);
    }
    Tensor::from_vec(pts.len(), 3, d)
}

/// L1-regress the SDF net onto analytic distances over the unit ball.
pub fn fit_sdf(zoo: &mut Zoo<f32>, scene: &AnalyticScene, iters: u64) {
    let mut adam = Adam::new(&zoo.store);
    for iter in 0..iters {
        let mut rng = stream(900 + iter, &[tag("fit")]);
        let pts: Vec<Vec3> = (0..512)
            .map(|_| {
                let r: f64 = rng.gen::<f64>();
                crate::rng::unit_sphere(&mut rng) * r.powf(1.0 / 3.0)
            })
            .collect();
        let mut gt = Tensor::<f32>::zeros(pts.len(), 1);
        {
            let gd = gt.data_mut();
            for (i, p) in pts.iter().enumerate() {
                gd[i] = scene.sdf(*p) as f32;
            }
        }
        let mut tp = Tape::new();
        let pnodes = zoo.store.nodes_on(&mut tp, |n| n.starts_with("sdf."));
        let tr = zoo.sdf.forward(&mut tp, &pnodes, &[TapeIn::Raw(tensor3(&pts))]);
        let s = tp.slice_cols(tr.out, 0, 1);
        let gtn = tp.constant(gt);
        let d = tp.sub(s, gtn);
        let a = tp.abs(d);
        let loss = tp.mean_all(a);
        let mut grads = tp.backward(loss);
        adam.update(&mut zoo.store, &mut grads, &pnodes, 1e-3);
    }
}

pub fn fitted_zoo(scene: &AnalyticScene) -> Zoo<f32> {
    let mut zoo = Zoo::build(ZooCfg { width: 32, feat: 8, dec_width: 16 }, 4);
    fit_sdf(&mut zoo, scene, 600);
    zoo
}

pub fn tempdir(tag_: &str) -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("glint-{tag_}-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}

/// A 12×12, 3-train/1-test glossy-sphere dataset rendered once per process
/// and shared by every test that needs real files on disk.
pub fn tiny_dataset() -> &'static std::path::Path {
    use std::sync::OnceLock;
    static DIR: OnceLock<std::path::PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempdir("tiny-data").join("glossy");
        let spec = crate::scene::SynthSpec {
            train_views: 3,
            test_views: 1,
            width: 12,
            height: 12,
            spp: 8,
            ..crate::scene::SynthSpec::new("glossy-sphere", 5)
        };
        crate::scene::make_synthetic(&spec, &dir).unwrap();
        dir
    })
}
