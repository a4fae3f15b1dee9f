/// Dense row-major matrix of `f64`. Scalars are `1x1`, row vectors `1xn`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "tensor data length {} does not match shape {rows}x{cols}",
            data.len()
        );
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor::new(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(1, 1, vec![value])
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(1, n, data)
    }

    pub fn column(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(n, 1, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[[f64; 3]]) -> Self {
        Tensor::new(rows.len(), 3, rows.iter().flatten().copied().collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a `1x1` tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Reinterprets the data with a new shape of equal size.
    pub fn reshaped(mut self, rows: usize, cols: usize) -> Tensor {
        assert_eq!(rows * cols, self.data.len(), "reshape must preserve size");
        self.rows = rows;
        self.cols = cols;
        self
    }
}

/// `C (+)= alpha * op(A) * op(B)` with optional transposes, row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    alpha: f64,
    a: &[f64],
    a_shape: (usize, usize),
    trans_a: bool,
    b: &[f64],
    b_shape: (usize, usize),
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (m, k) = if trans_a { (a_shape.1, a_shape.0) } else { a_shape };
    let (kb, n) = if trans_b { (b_shape.1, b_shape.0) } else { b_shape };
    debug_assert_eq!(k, kb);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a {
        (1, a_shape.1 as isize)
    } else {
        (a_shape.1 as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b_shape.1 as isize)
    } else {
        (b_shape.1 as isize, 1)
    };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    // SAFETY: strides describe in-bounds row-major views of `a`, `b`, `c`,
    // whose lengths are checked against the shapes above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
