//! Multi-head attention, the attention block `LayerNorm(FF(att) + z1)`, and
//! progressive multi-round stacking.

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::training::{Init, Initializer};

/// Variance epsilon used by every layer norm in the model.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Dropout state threaded through a forward pass. `eval()` disables it.
pub struct DropoutCtx {
    rate: f64,
    rng: Option<rand_chacha::ChaCha8Rng>,
}

impl DropoutCtx {
    pub fn eval() -> Self {
        DropoutCtx { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, seed: u64) -> Self {
        use rand::SeedableRng;
        DropoutCtx {
            rate,
            rng: Some(rand_chacha::ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn apply(&mut self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        match self.rng.as_mut() {
            Some(rng) => g.dropout(x, self.rate, true, rng),
            None => Ok(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadParams {
    pub heads: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl MultiHeadParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        init: &mut Initializer,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "width {d} is not divisible into {heads} heads"
            )));
        }
        let mut mk = |name: &str| store.add(format!("{prefix}.{name}"), init.make(d, d, Init::Glorot));
        Ok(MultiHeadParams {
            heads,
            wq: mk("wq")?,
            wk: mk("wk")?,
            wv: mk("wv")?,
            wo: mk("wo")?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForwardParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForwardParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        inner: usize,
        init: &mut Initializer,
    ) -> Result<Self> {
        Ok(FeedForwardParams {
            w1: store.add(format!("{prefix}.w1"), init.make(d, inner, Init::Glorot))?,
            b1: store.add(format!("{prefix}.b1"), init.make(1, inner, Init::Zeros))?,
            w2: store.add(format!("{prefix}.w2"), init.make(inner, d, Init::Glorot))?,
            b2: store.add(format!("{prefix}.b2"), init.make(1, d, Init::Zeros))?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlockParams {
    pub attention: MultiHeadParams,
    pub ff: FeedForwardParams,
    pub gain: ParamId,
    pub bias: ParamId,
}

impl AttentionBlockParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        ff_inner: usize,
        init: &mut Initializer,
    ) -> Result<Self> {
        Ok(AttentionBlockParams {
            attention: MultiHeadParams::register(store, &format!("{prefix}.att"), d, heads, init)?,
            ff: FeedForwardParams::register(store, &format!("{prefix}.ff"), d, ff_inner, init)?,
            gain: store.add(format!("{prefix}.ln.gain"), init.make(1, d, Init::Ones))?,
            bias: store.add(format!("{prefix}.ln.bias"), init.make(1, d, Init::Zeros))?,
        })
    }
}

/// Which keys each query may see.
#[derive(Clone, Copy, Debug, Default)]
pub struct KeyMask<'a> {
    /// `false` marks a padded key position.
    pub keep: Option<&'a [bool]>,
    /// Query `i` only sees keys `0..=i`.
    pub causal: bool,
}

impl<'a> KeyMask<'a> {
    pub fn none() -> Self {
        KeyMask::default()
    }

    pub fn keys(keep: &'a [bool]) -> Self {
        KeyMask {
            keep: Some(keep),
            causal: false,
        }
    }

    fn matrix(&self, l1: usize, l2: usize) -> Result<Option<Vec<bool>>> {
        if let Some(k) = self.keep {
            if k.len() != l2 {
                return Err(Error::shape("key mask", [l1, l2], [1, k.len()]));
            }
        }
        if self.keep.is_none() && !self.causal {
            return Ok(None);
        }
        if self.causal && l1 != l2 {
            return Err(Error::shape("causal attention", [l1, l2], [l2, l2]));
        }
        let mut m = vec![true; l1 * l2];
        for i in 0..l1 {
            for j in 0..l2 {
                let pad_ok = self.keep.map_or(true, |k| k[j]);
                let causal_ok = !self.causal || j <= i;
                m[i * l2 + j] = pad_ok && causal_ok;
            }
        }
        Ok(Some(m))
    }
}

/// Output of [`multi_head_attention_traced`]: the attended rows plus each
/// head's `L1 × L2` weight matrix.
pub struct AttentionTrace {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention from `z1` onto `z2` with `h` heads.
pub fn multi_head_attention<'p>(
    g: &mut Graph<'p>,
    store: &'p ParamStore,
    params: &MultiHeadParams,
    z1: Var,
    z2: Var,
    mask: KeyMask<'_>,
) -> Result<Var> {
    multi_head_attention_traced(g, store, params, z1, z2, mask).map(|t| t.output)
}

pub fn multi_head_attention_traced<'p>(
    g: &mut Graph<'p>,
    store: &'p ParamStore,
    params: &MultiHeadParams,
    z1: Var,
    z2: Var,
    mask: KeyMask<'_>,
) -> Result<AttentionTrace> {
    let [l1, d] = g.shape(z1);
    let [l2, d2] = g.shape(z2);
    if d != d2 {
        return Err(Error::shape("multi_head_attention", [l1, d], [l2, d2]));
    }
    let h = params.heads;
    if h == 0 || d % h != 0 {
        return Err(Error::Config(format!("width {d} is not divisible into {h} heads")));
    }
    let dk = d / h;
    let keep = mask.matrix(l1, l2)?;

    let (wq, wk, wv, wo) = (
        g.param(store, params.wq),
        g.param(store, params.wk),
        g.param(store, params.wv),
        g.param(store, params.wo),
    );
    let q = g.matmul(z1, wq)?;
    let k = g.matmul(z2, wk)?;
    let v = g.matmul(z2, wv)?;
    let scale = 1.0 / (dk as f64).sqrt();

    let mut heads = Vec::with_capacity(h);
    let mut weights = Vec::with_capacity(h);
    for head in 0..h {
        let (qh, kh, vh) = if h == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, head * dk, dk)?,
                g.slice_cols(k, head * dk, dk)?,
                g.slice_cols(v, head * dk, dk)?,
            )
        };
        let scores = g.matmul_t(qh, kh)?;
        let scores = g.scale(scores, scale);
        let w = g.softmax_rows(scores, keep.as_deref())?;
        heads.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    let joined = if h == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let output = g.matmul(joined, wo)?;
    Ok(AttentionTrace { output, weights })
}

/// Two affine maps with a rectifier between.
pub fn feed_forward<'p>(
    g: &mut Graph<'p>,
    store: &'p ParamStore,
    params: &FeedForwardParams,
    x: Var,
) -> Result<Var> {
    let (w1, b1, w2, b2) = (
        g.param(store, params.w1),
        g.param(store, params.b1),
        g.param(store, params.w2),
        g.param(store, params.b2),
    );
    let hidden = g.matmul(x, w1)?;
    let hidden = g.add_row(hidden, b1)?;
    let hidden = g.relu(hidden);
    let out = g.matmul(hidden, w2)?;
    g.add_row(out, b2)
}

/// `LayerNorm(FF(MultiHeadAtt(z1, z2)) + z1)`; the residual comes from `z1`.
pub fn attention_block<'p>(
    g: &mut Graph<'p>,
    store: &'p ParamStore,
    params: &AttentionBlockParams,
    z1: Var,
    z2: Var,
    mask: KeyMask<'_>,
    dropout: &mut DropoutCtx,
) -> Result<Var> {
    let att = multi_head_attention(g, store, &params.attention, z1, z2, mask)?;
    let ff = feed_forward(g, store, &params.ff, att)?;
    let ff = dropout.apply(g, ff)?;
    let sum = g.add(ff, z1)?;
    let (gain, bias) = (g.param(store, params.gain), g.param(store, params.bias));
    g.layer_norm(sum, gain, bias, LAYER_NORM_EPS)
}

/// Applies `step(round, input)` `n_rounds` times, feeding each output into
/// the next round.
pub fn progressive_rounds<F>(initial: Var, n_rounds: usize, mut step: F) -> Result<Var>
where
    F: FnMut(usize, Var) -> Result<Var>,
{
    if n_rounds == 0 {
        return Err(Error::InvalidArgument("n_rounds must be at least 1".into()));
    }
    (0..n_rounds).try_fold(initial, |z, r| step(r, z))
}

/// Sinusoidal position table, `len × d`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(len, d, data).expect("positive dimensions")
}
