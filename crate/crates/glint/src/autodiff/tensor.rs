use super::real::Real;
use std::sync::Arc;

/// Dense row-major 2-D tensor with copy-on-write storage.  Cloning is O(1);
/// the tape clones values freely.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Arc<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Tensor<T> {
        Tensor { rows, cols, data: Arc::new(vec![T::zero(); rows * cols]) }
    }

    pub fn filled(rows: usize, cols: usize, v: T) -> Tensor<T> {
        Tensor { rows, cols, data: Arc::new(vec![v; rows * cols]) }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Tensor<T> {
        assert_eq!(data.len(), rows * cols, "tensor shape/data mismatch");
        Tensor { rows, cols, data: Arc::new(data) }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Tensor<T> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor { rows, cols, data: Arc::new(data) }
    }

    pub fn scalar(v: T) -> Tensor<T> {
        Tensor::from_vec(1, 1, vec![v])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        let idx = r * self.cols + c;
        self.data_mut()[idx] = v;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn zip_map(&self, o: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        assert_eq!(self.shape(), o.shape(), "elementwise shape mismatch");
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: Arc::new(self.data.iter().zip(o.data.iter()).map(|(&a, &b)| f(a, b)).collect()),
        }
    }

    /// self += other * scale
    pub fn add_scaled(&mut self, o: &Tensor<T>, scale: T) {
        assert_eq!(self.shape(), o.shape(), "add_scaled shape mismatch");
        let dst = self.data_mut();
        for (d, &s) in dst.iter_mut().zip(o.data.iter()) {
            *d += s * scale;
        }
    }

    pub fn scale_in_place(&mut self, s: T) {
        for v in self.data_mut() {
            *v *= s;
        }
    }

    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &v in self.data.iter() {
            acc += v;
        }
        acc
    }

    pub fn has_non_finite(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor::<f64>::from_vec(self.rows, self.cols, self.data.iter().map(|v| v.as_f64()).collect())
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor::<f32>::from_vec(
            self.rows,
            self.cols,
            self.data.iter().map(|v| v.as_f64() as f32).collect(),
        )
    }
}

/// c = a(m×k) · b(k×n)
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.cols(), b.rows(), "matmul inner dim mismatch");
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut c = Tensor::zeros(m, n);
    unsafe {
        T::gemm(
            m, k, n,
            T::one(),
            a.data().as_ptr(), k as isize, 1,
            b.data().as_ptr(), n as isize, 1,
            T::zero(),
            c.data_mut().as_mut_ptr(), n as isize, 1,
        );
    }
    c
}

/// c = a(m×k) · b(n×k)ᵀ
pub fn matmul_bt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.cols(), b.cols(), "matmul_bt inner dim mismatch");
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let mut c = Tensor::zeros(m, n);
    unsafe {
        T::gemm(
            m, k, n,
            T::one(),
            a.data().as_ptr(), k as isize, 1,
            b.data().as_ptr(), 1, k as isize,
            T::zero(),
            c.data_mut().as_mut_ptr(), n as isize, 1,
        );
    }
    c
}

/// c = a(k×m)ᵀ · b(k×n)
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.rows(), b.rows(), "matmul_tn inner dim mismatch");
    let (m, k, n) = (a.cols(), a.rows(), b.cols());
    let mut c = Tensor::zeros(m, n);
    unsafe {
        T::gemm(
            m, k, n,
            T::one(),
            a.data().as_ptr(), 1, a.cols() as isize,
            b.data().as_ptr(), n as isize, 1,
            T::zero(),
            c.data_mut().as_mut_ptr(), n as isize, 1,
        );
    }
    c
}
