//! Adam with the pipeline's fixed learning-rate schedule: linear warm-up from
//! zero to 5e-4 over the first 5000 iterations, then cosine decay to a floor
//! of 2.5e-5 at the final iteration.

use crate::autodiff::{Grads, NodeId, Real, Tensor};
use crate::nets::ParamStore;

pub const LR_PEAK: f64 = 5e-4;
pub const LR_FLOOR: f64 = 2.5e-5;
pub const WARMUP_ITERS: u64 = 5000;

pub fn lr_schedule(iter: u64, total: u64) -> f64 {
    if iter <= WARMUP_ITERS {
        return LR_PEAK * iter as f64 / WARMUP_ITERS as f64;
    }
    if total <= WARMUP_ITERS {
        return LR_PEAK;
    }
    let t = (iter - WARMUP_ITERS) as f64 / (total - WARMUP_ITERS) as f64;
    LR_FLOOR + (LR_PEAK - LR_FLOOR) * 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
}

pub struct Adam<T: Real> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Adam<T> {
        let m = store.ids().map(|i| {
            let t = store.tensor(i);
            Tensor::zeros(t.rows(), t.cols())
        });
        let v = store.ids().map(|i| {
            let t = store.tensor(i);
            Tensor::zeros(t.rows(), t.cols())
        });
        Adam {
            m: m.collect(),
            v: v.collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update over the whole store.  `nodes` is the store-aligned node
    /// list used to build the tape; parameters without gradients (frozen or
    /// unreached) are left untouched, moments included.
    pub fn update(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &mut Grads<T>,
        nodes: &[NodeId],
        lr: f64,
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of_f64(self.beta1), T::of_f64(self.beta2));
        let (nb1, nb2) = (T::of_f64(1.0 - self.beta1), T::of_f64(1.0 - self.beta2));
        let scale = T::of_f64(lr / bc1);
        let eps = T::of_f64(self.eps * bc2.sqrt());
        let sq_bc2 = T::of_f64(bc2.sqrt());
        for (i, &node) in nodes.iter().enumerate() {
            let Some(g) = grads.take(node) else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            {
                let md = m.data_mut();
                for (mv, &gv) in md.iter_mut().zip(g.data()) {
                    *mv = b1 * *mv + nb1 * gv;
                }
            }
            {
                let vd = v.data_mut();
                for (vv, &gv) in vd.iter_mut().zip(g.data()) {
                    *vv = b2 * *vv + nb2 * gv * gv;
                }
            }
            let p = store.tensor_mut(i);
            let pd = p.data_mut();
            // p -= lr/bc1 · m / (√(v/bc2) + ε)  =  lr/bc1 · m·√bc2 / (√v + ε·√bc2)
            for ((pv, &mv), &vv) in pd.iter_mut().zip(m.data()).zip(v.data()) {
                *pv -= scale * mv * sq_bc2 / (vv.sqrt() + eps);
            }
        }
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    pub fn restore_moments(&mut self, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>, step: u64) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.m = m;
        self.v = v;
        self.step = step;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn schedule_pinned_points() {
        assert_eq!(lr_schedule(0, 20_000), 0.0);
        assert!((lr_schedule(5000, 20_000) - 5e-4).abs() < 1e-12);
        assert!((lr_schedule(20_000, 20_000) - 2.5e-5).abs() < 1e-12);
        // midpoint of the cosine span sits midway between peak and floor
        let mid = lr_schedule(12_500, 20_000);
        assert!((mid - 0.5 * (5e-4 + 2.5e-5)).abs() < 1e-9);
        // monotone decay after warmup
        let mut prev = lr_schedule(5000, 20_000);
        for it in (5001..=20_000).step_by(457) {
            let cur = lr_schedule(it, 20_000);
            assert!(cur <= prev);
            prev = cur;
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = ParamStore::<f64>::new();
        store.add("p", Tensor::from_vec(1, 3, vec![1.0, -2.0, 3.0]));
        let before = store.tensor(0).clone();
        let mut adam = Adam::new(&store);
        let mut tp = Tape::new();
        let nodes = store.nodes_on(&mut tp, |_| true);
        let z = tp.scale_const(nodes[0], 0.0);
        let loss = tp.sum_all(z);
        let mut grads = tp.backward(loss);
        adam.update(&mut store, &mut grads, &nodes, 1e-2);
        // gradient is exactly zero → m=v=0 → update is 0/(0+ε)=0
        assert_eq!(store.tensor(0), &before);
    }

    #[test]
    fn first_step_magnitude_is_lr_scaled() {
        // with constant gradient g, step 1 moves each weight by lr·g/(|g|+ε') ≈ lr·sign(g)
        let mut store = ParamStore::<f64>::new();
        store.add("p", Tensor::from_vec(1, 2, vec![0.5, -0.5]));
        let mut adam = Adam::new(&store);
        let mut tp = Tape::new();
        let nodes = store.nodes_on(&mut tp, |_| true);
        let s = tp.scale_const(nodes[0], 3.0);
        let loss = tp.sum_all(s); // dL/dp = 3 for both entries
        let mut grads = tp.backward(loss);
        let lr = 1e-3;
        adam.update(&mut store, &mut grads, &nodes, lr);
        let p = store.tensor(0);
        assert!((p.get(0, 0) - (0.5 - lr)).abs() < 1e-8);
        assert!((p.get(0, 1) - (-0.5 - lr)).abs() < 1e-8);
    }

    #[test]
    fn deterministic_across_reruns() {
        let run = || {
            let mut store = ParamStore::<f32>::new();
            store.add("w", Tensor::from_vec(2, 2, vec![0.1, 0.2, -0.3, 0.4]));
            let mut adam = Adam::new(&store);
            for it in 0..50 {
                let mut tp = Tape::new();
                let nodes = store.nodes_on(&mut tp, |_| true);
                let sq = tp.square(nodes[0]);
                let loss = tp.sum_all(sq);
                let mut grads = tp.backward(loss);
                adam.update(&mut store, &mut grads, &nodes, lr_schedule(it + 1, 50));
            }
            store.tensor(0).clone()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }
}
