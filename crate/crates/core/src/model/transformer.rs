//! Residual transformer stacks assembled from norm-wrapped sublayers.

use rand::Rng;

use super::attention::{AttnCache, MultiHeadAttention};
use super::layers::{dropout_backward, gelu, gelu_backward, Dropper, LayerNorm, Linear, LnCache};
use super::tensor::{Mat, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub enum SublayerOp<T> {
    SelfAttn { attn: MultiHeadAttention<T>, causal: bool },
    CrossAttn(MultiHeadAttention<T>),
    Ffn { up: Linear<T>, down: Linear<T> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sublayer<T> {
    pub norm: LayerNorm<T>,
    pub op: SublayerOp<T>,
}

enum OpCache<T> {
    Attn(AttnCache<T>),
    Ffn { input: Mat<T>, pre: Mat<T>, act: Mat<T> },
}

pub struct SublayerCache<T> {
    ln: LnCache<T>,
    op: OpCache<T>,
    drop: Option<Vec<T>>,
}

/// Inputs shared by every sublayer of a stack for one sequence.
pub struct StackCtx<'a, T> {
    pub self_keep: Option<&'a [bool]>,
    pub memory: Option<&'a Mat<T>>,
    pub memory_keep: Option<&'a [bool]>,
}

impl<T: Scalar> Sublayer<T> {
    fn zeros_like(&self) -> Self {
        let op = match &self.op {
            SublayerOp::SelfAttn { attn, causal } => SublayerOp::SelfAttn { attn: attn.zeros_like(), causal: *causal },
            SublayerOp::CrossAttn(a) => SublayerOp::CrossAttn(a.zeros_like()),
            SublayerOp::Ffn { up, down } => SublayerOp::Ffn { up: up.zeros_like(), down: down.zeros_like() },
        };
        Self { norm: self.norm.zeros_like(), op }
    }

    fn apply_op(&self, x: &Mat<T>, ctx: &StackCtx<'_, T>) -> (Mat<T>, OpCache<T>) {
        match &self.op {
            SublayerOp::SelfAttn { attn, causal } => {
                let (y, c) = attn.forward(x, x, ctx.self_keep, *causal);
                (y, OpCache::Attn(c))
            }
            SublayerOp::CrossAttn(attn) => {
                let mem = ctx.memory.expect("cross attention needs encoder memory");
                let (y, c) = attn.forward(x, mem, ctx.memory_keep, false);
                (y, OpCache::Attn(c))
            }
            SublayerOp::Ffn { up, down } => {
                let pre = up.forward(x);
                let act = gelu(&pre);
                let y = down.forward(&act);
                (y, OpCache::Ffn { input: x.clone(), pre, act })
            }
        }
    }

    /// Returns the gradient w.r.t. the op input and accumulates memory gradient.
    fn op_backward(&self, cache: &OpCache<T>, dy: &Mat<T>, g: &mut Self, d_memory: Option<&mut Mat<T>>) -> Mat<T> {
        match (&self.op, &mut g.op, cache) {
            (SublayerOp::SelfAttn { attn, .. }, SublayerOp::SelfAttn { attn: ga, .. }, OpCache::Attn(c)) => {
                let (mut dq, dkv) = attn.backward(c, dy, ga);
                dq.add_assign(&dkv);
                dq
            }
            (SublayerOp::CrossAttn(attn), SublayerOp::CrossAttn(ga), OpCache::Attn(c)) => {
                let (dq, dkv) = attn.backward(c, dy, ga);
                d_memory.expect("memory gradient buffer").add_assign(&dkv);
                dq
            }
            (SublayerOp::Ffn { up, down }, SublayerOp::Ffn { up: gu, down: gd }, OpCache::Ffn { input, pre, act }) => {
                let dact = down.backward(act, dy, gd);
                let dpre = gelu_backward(pre, &dact);
                up.backward(input, &dpre, gu)
            }
            _ => unreachable!("gradient buffer does not mirror the sublayer"),
        }
    }

    fn forward<R: Rng>(&self, x: &Mat<T>, ctx: &StackCtx<'_, T>, pre_norm: bool, dropper: &mut Dropper<'_, R>) -> (Mat<T>, SublayerCache<T>) {
        if pre_norm {
            let (a, ln) = self.norm.forward(x);
            let (mut y, op) = self.apply_op(&a, ctx);
            let drop = dropper.apply(&mut y);
            y.add_assign(x);
            (y, SublayerCache { ln, op, drop })
        } else {
            let (mut y, op) = self.apply_op(x, ctx);
            let drop = dropper.apply(&mut y);
            y.add_assign(x);
            let (out, ln) = self.norm.forward(&y);
            (out, SublayerCache { ln, op, drop })
        }
    }

    fn backward(&self, cache: &SublayerCache<T>, dout: &Mat<T>, pre_norm: bool, g: &mut Self, d_memory: Option<&mut Mat<T>>) -> Mat<T> {
        if pre_norm {
            let dy = dropout_backward(&cache.drop, dout);
            let da = self.op_backward(&cache.op, &dy, g, d_memory);
            let mut dx = self.norm.backward(&cache.ln, &da, &mut g.norm);
            dx.add_assign(dout);
            dx
        } else {
            let dsum = self.norm.backward(&cache.ln, dout, &mut g.norm);
            let dy = dropout_backward(&cache.drop, &dsum);
            let mut dx = self.op_backward(&cache.op, &dy, g, d_memory);
            dx.add_assign(&dsum);
            dx
        }
    }

    pub fn params(&self) -> Vec<&Mat<T>> {
        let mut v = self.norm.params();
        match &self.op {
            SublayerOp::SelfAttn { attn, .. } | SublayerOp::CrossAttn(attn) => v.extend(attn.params()),
            SublayerOp::Ffn { up, down } => {
                v.extend(up.params());
                v.extend(down.params());
            }
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat<T>> {
        let mut v = self.norm.params_mut();
        match &mut self.op {
            SublayerOp::SelfAttn { attn, .. } | SublayerOp::CrossAttn(attn) => v.extend(attn.params_mut()),
            SublayerOp::Ffn { up, down } => {
                v.extend(up.params_mut());
                v.extend(down.params_mut());
            }
        }
        v
    }
}

/// A stack of sublayers plus one extra norm: applied at the output in the
/// pre-norm arrangement and to the embedded input in the post-norm one.
#[derive(Debug, Clone, PartialEq)]
pub struct Stack<T> {
    pub sublayers: Vec<Sublayer<T>>,
    pub norm: LayerNorm<T>,
}

pub struct StackCache<T> {
    subs: Vec<SublayerCache<T>>,
    ln: LnCache<T>,
}

impl<T: Scalar> Stack<T> {
    pub fn encoder<R: Rng>(layers: usize, dim: usize, heads: usize, ffn: usize, rng: &mut R) -> Self {
        let mut sublayers = Vec::new();
        for _ in 0..layers {
            sublayers.push(Sublayer {
                norm: LayerNorm::new(dim),
                op: SublayerOp::SelfAttn { attn: MultiHeadAttention::new(dim, heads, rng), causal: false },
            });
            sublayers.push(ffn_sublayer(dim, ffn, rng));
        }
        Self { sublayers, norm: LayerNorm::new(dim) }
    }

    pub fn decoder<R: Rng>(layers: usize, dim: usize, heads: usize, ffn: usize, rng: &mut R) -> Self {
        let mut sublayers = Vec::new();
        for _ in 0..layers {
            sublayers.push(Sublayer {
                norm: LayerNorm::new(dim),
                op: SublayerOp::SelfAttn { attn: MultiHeadAttention::new(dim, heads, rng), causal: true },
            });
            sublayers.push(Sublayer {
                norm: LayerNorm::new(dim),
                op: SublayerOp::CrossAttn(MultiHeadAttention::new(dim, heads, rng)),
            });
            sublayers.push(ffn_sublayer(dim, ffn, rng));
        }
        Self { sublayers, norm: LayerNorm::new(dim) }
    }

    pub fn zeros_like(&self) -> Self {
        Self { sublayers: self.sublayers.iter().map(Sublayer::zeros_like).collect(), norm: self.norm.zeros_like() }
    }

    pub fn forward<R: Rng>(&self, x: &Mat<T>, ctx: &StackCtx<'_, T>, pre_norm: bool, dropper: &mut Dropper<'_, R>) -> (Mat<T>, StackCache<T>) {
        let mut subs = Vec::with_capacity(self.sublayers.len());
        if pre_norm {
            let mut h = x.clone();
            for s in &self.sublayers {
                let (y, c) = s.forward(&h, ctx, true, dropper);
                subs.push(c);
                h = y;
            }
            let (out, ln) = self.norm.forward(&h);
            (out, StackCache { subs, ln })
        } else {
            let (mut h, ln) = self.norm.forward(x);
            for s in &self.sublayers {
                let (y, c) = s.forward(&h, ctx, false, dropper);
                subs.push(c);
                h = y;
            }
            (h, StackCache { subs, ln })
        }
    }

    pub fn backward(&self, cache: &StackCache<T>, dout: &Mat<T>, pre_norm: bool, g: &mut Self, mut d_memory: Option<&mut Mat<T>>) -> Mat<T> {
        if pre_norm {
            let mut dh = self.norm.backward(&cache.ln, dout, &mut g.norm);
            for ((s, c), gs) in self.sublayers.iter().zip(&cache.subs).zip(g.sublayers.iter_mut()).rev() {
                dh = s.backward(c, &dh, true, gs, d_memory.as_deref_mut());
            }
            dh
        } else {
            let mut dh = dout.clone();
            for ((s, c), gs) in self.sublayers.iter().zip(&cache.subs).zip(g.sublayers.iter_mut()).rev() {
                dh = s.backward(c, &dh, false, gs, d_memory.as_deref_mut());
            }
            self.norm.backward(&cache.ln, &dh, &mut g.norm)
        }
    }

    pub fn params(&self) -> Vec<&Mat<T>> {
        let mut v: Vec<&Mat<T>> = self.sublayers.iter().flat_map(|s| s.params()).collect();
        v.extend(self.norm.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat<T>> {
        let mut v: Vec<&mut Mat<T>> = self.sublayers.iter_mut().flat_map(|s| s.params_mut()).collect();
        v.extend(self.norm.params_mut());
        v
    }
}

fn ffn_sublayer<T: Scalar, R: Rng>(dim: usize, ffn: usize, rng: &mut R) -> Sublayer<T> {
    Sublayer { norm: LayerNorm::new(dim), op: SublayerOp::Ffn { up: Linear::new(dim, ffn, rng), down: Linear::new(ffn, dim, rng) } }
}
