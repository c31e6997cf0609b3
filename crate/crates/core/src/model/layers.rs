//! Dense building blocks with explicit forward caches and backward passes.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{acc_tn, gemm_into, matmul, Mat, Scalar};

pub(crate) fn normal_mat<T: Scalar, R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Mat<T> {
    let dist = Normal::new(0.0, std).unwrap();
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| T::lit(dist.sample(rng))).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `in x out`
    pub w: Mat<T>,
    /// `1 x out`
    pub b: Mat<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        Self { w: normal_mat(input, output, (1.0 / input as f64).sqrt(), rng), b: Mat::zeros(1, output) }
    }

    pub fn zeros_like(&self) -> Self {
        Self { w: self.w.zeros_like(), b: self.b.zeros_like() }
    }

    pub fn forward(&self, x: &Mat<T>) -> Mat<T> {
        let mut y = Mat::zeros(x.rows, self.w.cols);
        for r in 0..x.rows {
            y.row_mut(r).copy_from_slice(&self.b.data);
        }
        gemm_into(&mut y, x, false, &self.w, false, T::one(), T::one());
        y
    }

    /// Accumulates parameter gradients into `g` and returns `dx`.
    pub fn backward(&self, x: &Mat<T>, dy: &Mat<T>, g: &mut Self) -> Mat<T> {
        acc_tn(&mut g.w, x, dy);
        for r in 0..dy.rows {
            for (gb, &d) in g.b.data.iter_mut().zip(dy.row(r)) {
                *gb += d;
            }
        }
        let mut dx = Mat::zeros(dy.rows, self.w.rows);
        gemm_into(&mut dx, dy, false, &self.w, true, T::one(), T::zero());
        dx
    }

    pub fn params(&self) -> Vec<&Mat<T>> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat<T>> {
        vec![&mut self.w, &mut self.b]
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Mat<T>,
    pub beta: Mat<T>,
}

#[derive(Debug, Clone)]
pub struct LnCache<T> {
    xhat: Mat<T>,
    rstd: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self { gamma: Mat::from_vec(1, dim, vec![T::one(); dim]), beta: Mat::zeros(1, dim) }
    }

    pub fn zeros_like(&self) -> Self {
        Self { gamma: self.gamma.zeros_like(), beta: self.beta.zeros_like() }
    }

    pub fn forward(&self, x: &Mat<T>) -> (Mat<T>, LnCache<T>) {
        let d = x.cols;
        let dn = T::from_usize(d).unwrap();
        let mut xhat = Mat::zeros(x.rows, d);
        let mut y = Mat::zeros(x.rows, d);
        let mut rstd = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + T::lit(LN_EPS)).sqrt();
            rstd.push(rs);
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat.data[r * d + c] = h;
                y.data[r * d + c] = h * self.gamma.data[c] + self.beta.data[c];
            }
        }
        (y, LnCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LnCache<T>, dy: &Mat<T>, g: &mut Self) -> Mat<T> {
        let d = dy.cols;
        let dn = T::from_usize(d).unwrap();
        let mut dx = Mat::zeros(dy.rows, d);
        let mut dxhat = vec![T::zero(); d];
        for r in 0..dy.rows {
            let dyr = dy.row(r);
            let xh = cache.xhat.row(r);
            let mut sum = T::zero();
            let mut sum_xh = T::zero();
            for c in 0..d {
                g.gamma.data[c] += dyr[c] * xh[c];
                g.beta.data[c] += dyr[c];
                dxhat[c] = dyr[c] * self.gamma.data[c];
                sum += dxhat[c];
                sum_xh += dxhat[c] * xh[c];
            }
            let k = cache.rstd[r] / dn;
            let out = dx.row_mut(r);
            for c in 0..d {
                out[c] = k * (dn * dxhat[c] - sum - xh[c] * sum_xh);
            }
        }
        dx
    }

    pub fn params(&self) -> Vec<&Mat<T>> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<T: Scalar>(x: &Mat<T>) -> Mat<T> {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    let data = x.data.iter().map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh())).collect();
    Mat::from_vec(x.rows, x.cols, data)
}

pub fn gelu_backward<T: Scalar>(x: &Mat<T>, dy: &Mat<T>) -> Mat<T> {
    let (c, a, half, three) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5), T::lit(3.0));
    let data = x
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&v, &g)| {
            let t = (c * (v + a * v * v * v)).tanh();
            let d = half * (T::one() + t) + half * v * (T::one() - t * t) * c * (T::one() + three * a * v * v);
            g * d
        })
        .collect();
    Mat::from_vec(x.rows, x.cols, data)
}

/// Inverted dropout; `None` rate or no rng means identity.
pub struct Dropper<'a, R: Rng> {
    pub rate: f64,
    pub rng: Option<&'a mut R>,
}

impl<R: Rng> Dropper<'_, R> {
    pub fn apply<T: Scalar>(&mut self, x: &mut Mat<T>) -> Option<Vec<T>> {
        let rng = self.rng.as_mut()?;
        if self.rate <= 0.0 {
            return None;
        }
        let keep = T::lit(1.0 / (1.0 - self.rate));
        let mask: Vec<T> =
            (0..x.len()).map(|_| if rng.gen::<f64>() < self.rate { T::zero() } else { keep }).collect();
        for (v, &m) in x.data.iter_mut().zip(&mask) {
            *v *= m;
        }
        Some(mask)
    }
}

pub fn dropout_backward<T: Scalar>(mask: &Option<Vec<T>>, dy: &Mat<T>) -> Mat<T> {
    match mask {
        None => dy.clone(),
        Some(m) => Mat::from_vec(dy.rows, dy.cols, dy.data.iter().zip(m).map(|(&g, &k)| g * k).collect()),
    }
}

/// Fully connected map with one tanh hidden layer followed by L2 normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead<T> {
    pub hidden: Linear<T>,
    pub out: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct ProjCache<T> {
    x: Mat<T>,
    act: Mat<T>,
    z: Mat<T>,
    y: Mat<T>,
}

impl<T: Scalar> ProjectionHead<T> {
    pub fn new<R: Rng>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        let hidden = Linear::new(input, hidden, rng);
        let mut out = Linear::new(hidden.w.cols, output, rng);
        // Non-zero output bias keeps the normalized output defined at zero input.
        out.b = normal_mat(1, output, 0.1, rng);
        Self { hidden, out }
    }

    pub fn zeros_like(&self) -> Self {
        Self { hidden: self.hidden.zeros_like(), out: self.out.zeros_like() }
    }

    /// Rows of `x` mapped to unit-norm rows.
    pub fn forward(&self, x: &Mat<T>) -> (Mat<T>, ProjCache<T>) {
        let h = self.hidden.forward(x);
        let act = Mat::from_vec(h.rows, h.cols, h.data.iter().map(|v| v.tanh()).collect());
        let z = self.out.forward(&act);
        let mut y = z.clone();
        for r in 0..y.rows {
            let row = y.row_mut(r);
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        (y.clone(), ProjCache { x: x.clone(), act, z, y })
    }

    pub fn backward(&self, cache: &ProjCache<T>, dy: &Mat<T>, g: &mut Self) -> Mat<T> {
        let mut dz = Mat::zeros(dy.rows, dy.cols);
        for r in 0..dy.rows {
            let y = cache.y.row(r);
            let n = cache.z.row(r).iter().map(|&v| v * v).sum::<T>().sqrt();
            let dot: T = y.iter().zip(dy.row(r)).map(|(&a, &b)| a * b).sum();
            for (c, d) in dz.row_mut(r).iter_mut().enumerate() {
                *d = (dy.at(r, c) - y[c] * dot) / n;
            }
        }
        let dact = self.out.backward(&cache.act, &dz, &mut g.out);
        let dh = Mat::from_vec(
            dact.rows,
            dact.cols,
            dact.data.iter().zip(&cache.act.data).map(|(&d, &a)| d * (T::one() - a * a)).collect(),
        );
        self.hidden.backward(&cache.x, &dh, &mut g.hidden)
    }

    pub fn params(&self) -> Vec<&Mat<T>> {
        let mut v = self.hidden.params();
        v.extend(self.out.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat<T>> {
        let mut v = self.hidden.params_mut();
        v.extend(self.out.params_mut());
        v
    }
}

/// Sinusoidal position table, `len x dim`.
pub fn sinusoidal<T: Scalar>(len: usize, dim: usize) -> Mat<T> {
    let mut m = Mat::zeros(len, dim);
    for p in 0..len {
        for i in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = p as f64 * freq;
            m.data[p * dim + i] = T::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    m
}

/// `x * w` where `w` is shared with other layers; used by the tied LM head.
pub fn project_rows<T: Scalar>(x: &Mat<T>, w_t: &Mat<T>) -> Mat<T> {
    matmul(x, w_t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn numeric<F: Fn(&Mat<f64>) -> f64>(f: F, x: &Mat<f64>) -> Vec<f64> {
        let eps = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut a = x.clone();
                let mut b = x.clone();
                a.data[i] += eps;
                b.data[i] -= eps;
                (f(&a) - f(&b)) / (2.0 * eps)
            })
            .collect()
    }

    fn weights(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat<f64> {
        normal_mat(rows, cols, 1.0, rng)
    }

    fn close(a: &[f64], b: &[f64]) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-6 * (1.0 + x.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn layer_norm_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ln = LayerNorm::<f64>::new(5);
        ln.gamma = weights(1, 5, &mut rng);
        let x = weights(3, 5, &mut rng);
        let w = weights(3, 5, &mut rng);
        let f = |x: &Mat<f64>| ln.forward(x).0.data.iter().zip(&w.data).map(|(a, b)| a * b).sum::<f64>();
        let (_, cache) = ln.forward(&x);
        let mut g = ln.zeros_like();
        let dx = ln.backward(&cache, &w, &mut g);
        close(&dx.data, &numeric(f, &x));
    }

    #[test]
    fn gelu_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = weights(2, 4, &mut rng);
        let w = weights(2, 4, &mut rng);
        let f = |x: &Mat<f64>| gelu(x).data.iter().zip(&w.data).map(|(a, b)| a * b).sum::<f64>();
        close(&gelu_backward(&x, &w).data, &numeric(f, &x));
    }

    #[test]
    fn projection_outputs_unit_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = ProjectionHead::<f64>::new(6, 6, 4, &mut rng);
        let x = weights(3, 6, &mut rng);
        let (y, _) = head.forward(&x);
        for r in 0..3 {
            let n: f64 = y.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let (y0, _) = head.forward(&Mat::zeros(1, 6));
        let n: f64 = y0.row(0).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn projection_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let head = ProjectionHead::<f64>::new(5, 7, 3, &mut rng);
        let x = weights(2, 5, &mut rng);
        let w = weights(2, 3, &mut rng);
        let f = |x: &Mat<f64>| head.forward(x).0.data.iter().zip(&w.data).map(|(a, b)| a * b).sum::<f64>();
        let (_, cache) = head.forward(&x);
        let mut g = head.zeros_like();
        let dx = head.backward(&cache, &w, &mut g);
        close(&dx.data, &numeric(f, &x));
    }
}
