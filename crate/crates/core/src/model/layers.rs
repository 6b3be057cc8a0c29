use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Ctx, ParamId, ParamStore, Scalar, Tensor, TensorError, Var};

type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn normal_init<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<f32> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (std * z) as f32
        })
        .collect();
    Tensor::new(shape, data).expect("init shape")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore<f32>,
        rng: &mut R,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Self {
        let std = (1.0 / din as f64).sqrt();
        Self {
            w: store.add(format!("{name}.w"), normal_init(rng, &[din, dout], std)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[dout])),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.p(self.w), ctx.p(self.b));
        ctx.g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore<f32>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.p(self.gain), ctx.p(self.bias));
        ctx.g.layer_norm(x, g, b)
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct Mha {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Mha {
    pub fn new<R: Rng>(
        store: &mut ParamStore<f32>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            o: Linear::new(store, rng, &format!("{name}.o"), dim, dim),
            heads,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<T>,
        x: Var,
        memory: Var,
        key_lens: &[usize],
        causal: bool,
    ) -> Result<Var> {
        let q = self.q.forward(ctx, x)?;
        let k = self.k.forward(ctx, memory)?;
        let v = self.v.forward(ctx, memory)?;
        let a = ctx.g.attention(q, k, v, self.heads, key_lens, causal)?;
        self.o.forward(ctx, a)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(
        store: &mut ParamStore<f32>,
        rng: &mut R,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        Self {
            up: Linear::new(store, rng, &format!("{name}.up"), dim, hidden),
            down: Linear::new(store, rng, &format!("{name}.down"), hidden, dim),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let h = self.up.forward(ctx, x)?;
        let h = ctx.g.gelu(h);
        self.down.forward(ctx, h)
    }
}

/// Pre-LN block: `x + Attn(LN(x))`, optional `x + CrossAttn(LN(x), mem)`,
/// then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln_self: LayerNorm,
    pub self_attn: Mha,
    pub cross: Option<(LayerNorm, Mha)>,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl Block {
    pub fn new<R: Rng>(
        store: &mut ParamStore<f32>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        with_cross: bool,
    ) -> Self {
        let ln_self = LayerNorm::new(store, &format!("{name}.ln_self"), dim);
        let self_attn = Mha::new(store, rng, &format!("{name}.self_attn"), dim, heads);
        let cross = with_cross.then(|| {
            (
                LayerNorm::new(store, &format!("{name}.ln_cross"), dim),
                Mha::new(store, rng, &format!("{name}.cross_attn"), dim, heads),
            )
        });
        let ln_ff = LayerNorm::new(store, &format!("{name}.ln_ff"), dim);
        let ff = FeedForward::new(store, rng, &format!("{name}.ff"), dim, hidden);
        Self {
            ln_self,
            self_attn,
            cross,
            ln_ff,
            ff,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<T>,
        x: Var,
        lens: &[usize],
        causal: bool,
        memory: Option<(Var, &[usize])>,
    ) -> Result<Var> {
        let h = self.ln_self.forward(ctx, x)?;
        let h = self.self_attn.forward(ctx, h, h, lens, causal)?;
        let mut x = ctx.g.add(x, h)?;
        if let (Some((ln, attn)), Some((mem, mem_lens))) = (&self.cross, memory) {
            let h = ln.forward(ctx, x)?;
            let h = attn.forward(ctx, h, mem, mem_lens, false)?;
            x = ctx.g.add(x, h)?;
        }
        let h = self.ln_ff.forward(ctx, x)?;
        let h = self.ff.forward(ctx, h)?;
        ctx.g.add(x, h)
    }
}

/// Sinusoidal position table `[len, dim]`.
pub fn positions<T: Scalar>(len: usize, dim: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * dim);
    for t in 0..len {
        for i in 0..dim {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
            let angle = t as f64 * freq;
            data.push(T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(&[len, dim], data).expect("position shape")
}
