//! Multi-head scaled dot-product attention with key padding and causal masks.

use rand::Rng;

use super::layers::Linear;
use super::tensor::{gemm_into, matmul, matmul_nt, softmax_backward_row, softmax_in_place, Mat, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention<T> {
    pub heads: usize,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct AttnCache<T> {
    xq: Mat<T>,
    xkv: Mat<T>,
    q: Mat<T>,
    k: Mat<T>,
    v: Mat<T>,
    probs: Vec<Mat<T>>,
    ctx: Mat<T>,
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn new<R: Rng>(dim: usize, heads: usize, rng: &mut R) -> Self {
        assert_eq!(dim % heads, 0, "model width must divide into heads");
        Self {
            heads,
            q: Linear::new(dim, dim, rng),
            k: Linear::new(dim, dim, rng),
            v: Linear::new(dim, dim, rng),
            o: Linear::new(dim, dim, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            heads: self.heads,
            q: self.q.zeros_like(),
            k: self.k.zeros_like(),
            v: self.v.zeros_like(),
            o: self.o.zeros_like(),
        }
    }

    /// `key_keep[j] == false` hides key `j`; `causal` hides keys after the query.
    pub fn forward(&self, xq: &Mat<T>, xkv: &Mat<T>, key_keep: Option<&[bool]>, causal: bool) -> (Mat<T>, AttnCache<T>) {
        let q = self.q.forward(xq);
        let k = self.k.forward(xkv);
        let v = self.v.forward(xkv);
        let dim = q.cols;
        let dh = dim / self.heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut ctx = Mat::zeros(xq.rows, dim);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.cols_slice(h * dh, dh);
            let kh = k.cols_slice(h * dh, dh);
            let vh = v.cols_slice(h * dh, dh);
            let mut s = matmul_nt(&qh, &kh);
            for i in 0..s.rows {
                let row = s.row_mut(i);
                for (j, x) in row.iter_mut().enumerate() {
                    let hidden = key_keep.is_some_and(|m| !m[j]) || (causal && j > i);
                    *x = if hidden { T::neg_infinity() } else { *x * scale };
                }
                softmax_in_place(row);
            }
            ctx.set_cols(h * dh, &matmul(&s, &vh), false);
            probs.push(s);
        }
        let out = self.o.forward(&ctx);
        (out, AttnCache { xq: xq.clone(), xkv: xkv.clone(), q, k, v, probs, ctx })
    }

    /// Returns `(d xq, d xkv)`.
    pub fn backward(&self, cache: &AttnCache<T>, dout: &Mat<T>, g: &mut Self) -> (Mat<T>, Mat<T>) {
        let dctx = self.o.backward(&cache.ctx, dout, &mut g.o);
        let dim = cache.q.cols;
        let dh = dim / self.heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut dq = Mat::zeros(cache.q.rows, dim);
        let mut dk = Mat::zeros(cache.k.rows, dim);
        let mut dv = Mat::zeros(cache.v.rows, dim);
        for h in 0..self.heads {
            let p = &cache.probs[h];
            let dch = dctx.cols_slice(h * dh, dh);
            let vh = cache.v.cols_slice(h * dh, dh);
            let qh = cache.q.cols_slice(h * dh, dh);
            let kh = cache.k.cols_slice(h * dh, dh);
            let dp = matmul_nt(&dch, &vh);
            let mut dvh = Mat::zeros(vh.rows, dh);
            gemm_into(&mut dvh, p, true, &dch, false, T::one(), T::zero());
            let mut ds = Mat::zeros(p.rows, p.cols);
            for i in 0..p.rows {
                softmax_backward_row(p.row(i), dp.row(i), ds.row_mut(i));
            }
            ds.scale(scale);
            let dqh = matmul(&ds, &kh);
            let mut dkh = Mat::zeros(kh.rows, dh);
            gemm_into(&mut dkh, &ds, true, &qh, false, T::one(), T::zero());
            dq.set_cols(h * dh, &dqh, false);
            dk.set_cols(h * dh, &dkh, false);
            dv.set_cols(h * dh, &dvh, false);
        }
        let dxq = self.q.backward(&cache.xq, &dq, &mut g.q);
        let mut dxkv = self.k.backward(&cache.xkv, &dk, &mut g.k);
        dxkv.add_assign(&self.v.backward(&cache.xkv, &dv, &mut g.v));
        (dxq, dxkv)
    }

    pub fn params(&self) -> Vec<&Mat<T>> {
        [&self.q, &self.k, &self.v, &self.o].into_iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat<T>> {
        let mut v = self.q.params_mut();
        v.extend(self.k.params_mut());
        v.extend(self.v.params_mut());
        v.extend(self.o.params_mut());
        v
    }
}
