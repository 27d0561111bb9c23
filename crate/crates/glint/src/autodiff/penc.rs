use super::real::Real;
use super::tensor::Tensor;

/// Sinusoidal positional encoding: per input component x, optionally the raw
/// value followed by sin(2^k π x), cos(2^k π x) for k = 0..levels.
/// Column layout: [raw (dim)] [sin_0 (dim)] [cos_0 (dim)] ... [cos_{L-1} (dim)].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PosEnc {
    pub dim: usize,
    pub levels: usize,
    pub include_input: bool,
}

impl PosEnc {
    pub fn new(dim: usize, levels: usize) -> PosEnc {
        PosEnc { dim, levels, include_input: true }
    }

    /// Identity encoding (raw columns only).
    pub fn identity(dim: usize) -> PosEnc {
        PosEnc { dim, levels: 0, include_input: true }
    }

    pub fn encoded_dim(&self) -> usize {
        self.dim * (self.include_input as usize + 2 * self.levels)
    }

    fn freq(&self, k: usize) -> f64 {
        std::f64::consts::PI * (1u64 << k) as f64
    }

    pub fn encode<T: Real>(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.cols(), self.dim, "positional encoding input dim");
        let n = x.rows();
        let mut out = Tensor::zeros(n, self.encoded_dim());
        let ec = out.cols();
        let od = out.data_mut();
        for r in 0..n {
            let xin = x.row(r);
            let mut c = 0;
            if self.include_input {
                od[r * ec..r * ec + self.dim].copy_from_slice(xin);
                c += self.dim;
            }
            for k in 0..self.levels {
                let a = T::of_f64(self.freq(k));
                for j in 0..self.dim {
                    od[r * ec + c + j] = (a * xin[j]).sin();
                    od[r * ec + c + self.dim + j] = (a * xin[j]).cos();
                }
                c += 2 * self.dim;
            }
        }
        out
    }

    /// g[n,j] = Σ_e delta[n,e] · ∂enc_e/∂x_j  — maps encoded-space gradients
    /// back to input space.
    pub fn apply_jacobian_t<T: Real>(&self, x: &Tensor<T>, delta: &Tensor<T>) -> Tensor<T> {
        assert_eq!(delta.cols(), self.encoded_dim());
        assert_eq!(x.rows(), delta.rows());
        let n = x.rows();
        let mut out = Tensor::zeros(n, self.dim);
        let od = out.data_mut();
        for r in 0..n {
            let xin = x.row(r);
            let drow = delta.row(r);
            let g = &mut od[r * self.dim..(r + 1) * self.dim];
            let mut c = 0;
            if self.include_input {
                for j in 0..self.dim {
                    g[j] += drow[j];
                }
                c += self.dim;
            }
            for k in 0..self.levels {
                let a = T::of_f64(self.freq(k));
                for j in 0..self.dim {
                    let (s, co) = (a * xin[j]).sin_cos();
                    g[j] += drow[c + j] * a * co - drow[c + self.dim + j] * a * s;
                }
                c += 2 * self.dim;
            }
        }
        out
    }

    /// delta[n,e] += g[n,j] · ∂enc_e/∂x_j — the transpose of
    /// `apply_jacobian_t`; used in the backward pass of the tape op.
    pub fn apply_jacobian<T: Real>(&self, x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
        assert_eq!(g.cols(), self.dim);
        assert_eq!(x.rows(), g.rows());
        let n = x.rows();
        let mut out = Tensor::zeros(n, self.encoded_dim());
        let ec = out.cols();
        let od = out.data_mut();
        for r in 0..n {
            let xin = x.row(r);
            let grow = g.row(r);
            let drow = &mut od[r * ec..(r + 1) * ec];
            let mut c = 0;
            if self.include_input {
                drow[..self.dim].copy_from_slice(grow);
                c += self.dim;
            }
            for k in 0..self.levels {
                let a = T::of_f64(self.freq(k));
                for j in 0..self.dim {
                    let (s, co) = (a * xin[j]).sin_cos();
                    drow[c + j] = grow[j] * a * co;
                    drow[c + self.dim + j] = -grow[j] * a * s;
                }
                c += 2 * self.dim;
            }
        }
        out
    }
}
