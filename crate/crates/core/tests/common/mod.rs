#![allow(dead_code)]

use mtn::attention::{attention_block, multi_head_attention, AttentionBlockParams, DropoutCtx, KeyMask, MultiHeadParams};
use mtn::data::{EncodedExample, END, START};
use mtn::model::{Modality, ModelConfig, ModelInput, Mtn};
use mtn::pointer::{
    generation_distribution, mix_distributions, mixture_scores, pointer_distribution, scatter_to_vocab, MaskedSeq,
    PointerSource, PointerVocab,
};
use mtn::training::{generation_loss, joint_loss, qae_losses, Initializer};
use mtn::{Graph, ParamStore, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(rows, cols, data).unwrap()
}

/// Random keep mask with at least one `true`.
pub fn random_keep(rng: &mut impl Rng, n: usize) -> Vec<bool> {
    let mut keep: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
    let i = rng.gen_range(0..n);
    keep[i] = true;
    keep
}

/// Overwrites every parameter with uniform noise so no gradient is
/// trivially zero or one.
pub fn randomize_store(store: &mut ParamStore, rng: &mut impl Rng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
}

/// Reduces `out` to a scalar with fixed random weights, so every output
/// entry carries a distinct upstream gradient.
fn probe<'p>(g: &mut Graph<'p>, out: Var) -> Result<Var> {
    let [m, n] = g.shape(out);
    let weights = random_tensor(&mut rng(0xfeed ^ (m * 131 + n) as u64), m, n, -1.0, 1.0);
    let w = g.constant(weights);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`; zero when both gradients vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Largest per-tensor relative error between the tape gradient and central
/// differences, over every input and every parameter in `store`.
pub fn gradient_error<F>(store: &ParamStore, inputs: &[Tensor], build: F) -> Result<f64>
where
    F: for<'p> Fn(&mut Graph<'p>, &'p ParamStore, &[Var]) -> Result<Var>,
{
    gradient_error_with(store, |s| s, |s| s, inputs, build)
}

/// [`gradient_error`] over any owner of a parameter store, such as a model.
pub fn gradient_error_with<H, F>(
    holder: &H,
    store_of: fn(&H) -> &ParamStore,
    store_mut_of: fn(&mut H) -> &mut ParamStore,
    inputs: &[Tensor],
    build: F,
) -> Result<f64>
where
    H: Clone,
    F: for<'p> Fn(&mut Graph<'p>, &'p H, &[Var]) -> Result<Var>,
{
    let eval = |holder: &H, inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), false)).collect();
        let out = build(&mut g, holder, &vars)?;
        let loss = probe(&mut g, out)?;
        Ok(g.value(loss)[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let out = build(&mut g, holder, &vars)?;
    let loss = probe(&mut g, out)?;
    let grads = g.backward(loss)?;
    let bound = g.bound_params();

    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.data().len()]);
        let mut numeric = vec![0.0; t.data().len()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let mut shifted = inputs.to_vec();
            shifted[i].data_mut()[k] += FD_STEP;
            let up = eval(holder, &shifted)?;
            shifted[i].data_mut()[k] -= 2.0 * FD_STEP;
            let down = eval(holder, &shifted)?;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }

    let mut scratch = holder.clone();
    let ids: Vec<_> = store_of(holder).ids().collect();
    for id in ids {
        let len = store_of(holder).get(id).data().len();
        let analytic = bound
            .iter()
            .find(|(pid, _)| *pid == id)
            .and_then(|(_, v)| grads.get(*v))
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; len]);
        let mut numeric = vec![0.0; len];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let orig = store_of(holder).get(id).data()[k];
            store_mut_of(&mut scratch).get_mut(id).data_mut()[k] = orig + FD_STEP;
            let up = eval(&scratch, inputs)?;
            store_mut_of(&mut scratch).get_mut(id).data_mut()[k] = orig - FD_STEP;
            let down = eval(&scratch, inputs)?;
            store_mut_of(&mut scratch).get_mut(id).data_mut()[k] = orig;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn no_params() -> ParamStore {
    ParamStore::new()
}

/// Gradient check for one op on the random instance `seed`.
pub type OpCase = fn(u64) -> Result<f64>;

pub fn op_cases() -> Vec<(&'static str, OpCase)> {
    vec![
        ("matmul", case_matmul),
        ("matmul_t", case_matmul_t),
        ("add", case_add),
        ("add_row", case_add_row),
        ("mul", case_mul),
        ("sum", case_sum),
        ("scale", case_scale),
        ("relu", case_relu),
        ("softmax_rows", case_softmax),
        ("softmax_rows_masked", case_softmax_masked),
        ("layer_norm", case_layer_norm),
        ("embedding", case_embedding),
        ("dropout", case_dropout),
        ("concat_cols", case_concat),
        ("slice_cols", case_slice),
        ("mean_rows", case_mean_rows),
        ("broadcast_rows", case_broadcast),
        ("scatter_cols", case_scatter),
        ("weighted_sum", case_weighted_sum),
        ("weighted_nll", case_weighted_nll),
        ("multi_head_attention", case_mha),
        ("attention_block", case_block),
        ("pointer_distribution", case_pointer),
        ("generation_distribution", case_generation),
        ("mixture_scores", case_mixture_scores),
        ("mix_distributions", case_mix),
        ("joint_loss", case_joint_loss),
    ]
}

fn dims(r: &mut impl Rng) -> (usize, usize, usize) {
    (r.gen_range(1..6), r.gen_range(1..6), r.gen_range(1..6))
}

fn case_matmul(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (m, k, n) = dims(r);
    let inputs = [random_tensor(r, m, k, -1.0, 1.0), random_tensor(r, k, n, -1.0, 1.0)];
    gradient_error(&no_params(), &inputs, |g, _, v| g.matmul(v[0], v[1]))
}

fn case_matmul_t(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (m, k, n) = dims(r);
    let inputs = [random_tensor(r, m, k, -1.0, 1.0), random_tensor(r, n, k, -1.0, 1.0)];
    gradient_error(&no_params(), &inputs, |g, _, v| g.matmul_t(v[0], v[1]))
}

fn case_add(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (m, n, _) = dims(r);
    let inputs = [random_tensor(r, m, n, -1.0, 1.0), random_tensor(r, m, n, -1.0, 1.0)];
    gradient_error(&no_params(), &inputs, |g, _, v| g.add(v[0], v[1]))
}

fn case_add_row(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (m, n, _) = dims(r);
    let inputs = [random_tensor(r, m, n, -1.0, 1.0), random_tensor(r, 1, n, -1.0, 1.0)];
    gradient_error(&no_params(), &inputs, |g, _, v| g.add_row(v[0], v[1]))
}

fn case_mul(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (m, n, _) = dims(r);
    let inputs = [random_tensor(r, m, n, -1.0, 1.0), random_tensor(r, m, n, -1.0, 1.0)];
    gradient_error(&no_params(), &inputs, |g, _, v| g.mul(v[0], v[1]))
}

fn case_sum(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (m, n, _) = dims(r);
    let inputs = [random_tensor(r, m, n, -1.0, 1.0)];
    gradient_error(&no_params(), &inputs, |g, _, v| Ok(g.sum(v[0])))
}

fn case_scale(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (m, n, _) = dims(r);
    let c = r.gen_range(-3.0..3.0);
    let inputs = [random_tensor(r, m, n, -1.0, 1.0)];
    gradient_error(&no_params(), &inputs, move |g, _, v| Ok(g.scale(v[0], c)))
}

fn case_relu(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (m, n, _) = dims(r);
    // keep entries away from the kink so central differences are valid
    let mut x = random_tensor(r, m, n, 0.1, 1.0);
    for v in x.data_mut() {
        if r.gen_bool(0.5) {
            *v = -*v;
        }
    }
    gradient_error(&no_params(), &[x], |g, _, v| Ok(g.relu(v[0])))
}

fn case_softmax(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (m, n, _) = dims(r);
    let inputs = [random_tensor(r, m, n, -2.0, 2.0)];
    gradient_error(&no_params(), &inputs, |g, _, v| g.softmax_rows(v[0], None))
}

fn case_softmax_masked(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (m, n, _) = dims(r);
    let keep: Vec<bool> = (0..m).flat_map(|_| random_keep(r, n)).collect();
    let inputs = [random_tensor(r, m, n, -2.0, 2.0)];
    gradient_error(&no_params(), &inputs, move |g, _, v| g.softmax_rows(v[0], Some(&keep)))
}

fn case_layer_norm(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let m = r.gen_range(1..5);
    // at d = 2 the normalized row is ±1 and its input gradient is O(eps)
    let d = r.gen_range(3..9);
    let inputs = [
        random_tensor(r, m, d, -2.0, 2.0),
        random_tensor(r, 1, d, 0.5, 1.5),
        random_tensor(r, 1, d, -0.5, 0.5),
    ];
    gradient_error(&no_params(), &inputs, |g, _, v| g.layer_norm(v[0], v[1], v[2], 1e-6))
}

fn case_embedding(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (v, d) = (r.gen_range(2..8), r.gen_range(1..5));
    let ids: Vec<usize> = (0..r.gen_range(1..7)).map(|_| r.gen_range(0..v)).collect();
    let inputs = [random_tensor(r, v, d, -1.0, 1.0)];
    gradient_error(&no_params(), &inputs, move |g, _, x| g.embedding(x[0], &ids))
}

fn case_dropout(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (m, n, _) = dims(r);
    let inputs = [random_tensor(r, m, n, -1.0, 1.0)];
    gradient_error(&no_params(), &inputs, move |g, _, v| g.dropout(v[0], 0.3, true, &mut rng(seed ^ 0xd0)))
}

fn case_concat(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let m = r.gen_range(1..5);
    let inputs: Vec<Tensor> = (0..r.gen_range(1..4))
        .map(|_| {
            let c = r.gen_range(1..4);
            random_tensor(r, m, c, -1.0, 1.0)
        })
        .collect();
    gradient_error(&no_params(), &inputs, |g, _, v| g.concat_cols(v))
}

fn case_slice(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (m, n) = (r.gen_range(1..5), r.gen_range(2..8));
    let start = r.gen_range(0..n);
    let len = r.gen_range(1..=n - start);
    let inputs = [random_tensor(r, m, n, -1.0, 1.0)];
    gradient_error(&no_params(), &inputs, move |g, _, v| g.slice_cols(v[0], start, len))
}

fn case_mean_rows(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (m, n, _) = dims(r);
    let keep = random_keep(r, m);
    let inputs = [random_tensor(r, m, n, -1.0, 1.0)];
    gradient_error(&no_params(), &inputs, move |g, _, v| g.mean_rows(v[0], Some(&keep)))
}

fn case_broadcast(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (m, n, _) = dims(r);
    let inputs = [random_tensor(r, 1, n, -1.0, 1.0)];
    gradient_error(&no_params(), &inputs, move |g, _, v| g.broadcast_rows(v[0], m))
}

fn case_scatter(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (m, l) = (r.gen_range(1..5), r.gen_range(1..7));
    let vocab = r.gen_range(2..8);
    let ids: Vec<usize> = (0..l).map(|_| r.gen_range(0..vocab)).collect();
    let inputs = [random_tensor(r, m, l, 0.0, 1.0)];
    gradient_error(&no_params(), &inputs, move |g, _, v| scatter_to_vocab(g, v[0], &ids, vocab))
}

fn case_weighted_sum(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (m, n, _) = dims(r);
    let k = r.gen_range(1..5);
    let mut inputs = vec![random_tensor(r, m, k, 0.0, 1.0)];
    inputs.extend((0..k).map(|_| random_tensor(r, m, n, 0.0, 1.0)));
    gradient_error(&no_params(), &inputs, |g, _, v| g.weighted_sum(v[0], &v[1..]))
}

fn case_weighted_nll(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (m, n, _) = dims(r);
    let coeffs: Vec<(usize, usize, f64)> = (0..r.gen_range(1..8))
        .map(|_| (r.gen_range(0..m), r.gen_range(0..n), r.gen_range(0.0..1.0)))
        .collect();
    let inputs = [random_tensor(r, m, n, 0.05, 1.0)];
    gradient_error(&no_params(), &inputs, move |g, _, v| g.weighted_nll(v[0], coeffs.clone(), 1e-12))
}

fn case_mha(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let heads = r.gen_range(1..3);
    let d = heads * r.gen_range(1..4);
    let (l1, l2) = (r.gen_range(1..5), r.gen_range(1..5));
    let mut store = ParamStore::new();
    let params = MultiHeadParams::register(&mut store, "mha", d, heads, &mut Initializer::new(seed))?;
    randomize_store(&mut store, r, 0.8);
    let mut keep = random_keep(r, l2);
    let causal = l1 == l2 && r.gen_bool(0.5);
    if causal {
        keep[0] = true;
    }
    let inputs = [random_tensor(r, l1, d, -1.0, 1.0), random_tensor(r, l2, d, -1.0, 1.0)];
    gradient_error(&store, &inputs, move |g, s, v| {
        let mask = KeyMask {
            keep: Some(&keep),
            causal,
        };
        multi_head_attention(g, s, &params, v[0], v[1], mask)
    })
}

fn case_block(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (d, heads, ff) = (8, 2, 6);
    let (l1, l2) = (3, r.gen_range(1..5));
    let mut store = ParamStore::new();
    let params = AttentionBlockParams::register(&mut store, "blk", d, heads, ff, &mut Initializer::new(seed))?;
    randomize_store(&mut store, r, 0.8);
    let keep = random_keep(r, l2);
    let inputs = [random_tensor(r, l1, d, -1.0, 1.0), random_tensor(r, l2, d, -1.0, 1.0)];
    gradient_error(&store, &inputs, move |g, s, v| {
        attention_block(g, s, &params, v[0], v[1], KeyMask::keys(&keep), &mut DropoutCtx::eval())
    })
}

fn case_pointer(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (ly, lx, d) = dims(r);
    let keep = random_keep(r, lx);
    let inputs = [random_tensor(r, ly, d, -1.0, 1.0), random_tensor(r, lx, d, -1.0, 1.0)];
    gradient_error(&no_params(), &inputs, move |g, _, v| pointer_distribution(g, v[0], v[1], &keep))
}

fn case_generation(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (ly, d, vocab) = dims(r);
    let inputs = [random_tensor(r, ly, d, -1.0, 1.0), random_tensor(r, d, vocab, -1.0, 1.0)];
    gradient_error(&no_params(), &inputs, |g, _, v| generation_distribution(g, v[0], v[1]))
}

fn case_mixture_scores(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (ly, d) = (r.gen_range(1..4), r.gen_range(1..4));
    let lens = [r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5)];
    let keeps: Vec<Vec<bool>> = lens.iter().map(|&l| random_keep(r, l)).collect();
    let k = r.gen_range(2..5);
    let inputs = [
        random_tensor(r, lens[0], d, -1.0, 1.0),
        random_tensor(r, lens[1], d, -1.0, 1.0),
        random_tensor(r, lens[2], d, -1.0, 1.0),
        random_tensor(r, ly, d, -1.0, 1.0),
        random_tensor(r, ly, d, -1.0, 1.0),
        random_tensor(r, 5 * d, k, -1.0, 1.0),
    ];
    gradient_error(&no_params(), &inputs, move |g, _, v| {
        let seq = |i: usize| MaskedSeq {
            z: v[i],
            keep: &keeps[i],
        };
        mixture_scores(g, seq(0), seq(1), seq(2), v[3], v[4], v[5])
    })
}

fn case_mix(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (ly, vocab) = (r.gen_range(1..4), r.gen_range(2..7));
    let enabled: Vec<bool> = (0..3).map(|_| r.gen_bool(0.6)).collect();
    let k = enabled.iter().filter(|&&e| e).count() + 1;
    let mut inputs = vec![random_tensor(r, ly, k, 0.0, 1.0), random_tensor(r, ly, vocab, 0.0, 1.0)];
    inputs.extend((0..3).map(|_| random_tensor(r, ly, vocab, 0.0, 1.0)));
    gradient_error(&no_params(), &inputs, move |g, _, v| {
        let pick = |i: usize| enabled[i].then_some(v[2 + i]);
        let pointers = PointerVocab {
            history: pick(0),
            query: pick(1),
            summary: pick(2),
        };
        mix_distributions(g, pointers, v[1], v[0])
    })
}

/// The joint loss node against a hand sum of its weighted components.
fn case_joint_loss(seed: u64) -> Result<f64> {
    let r = &mut rng(seed);
    let (alpha, beta) = (r.gen_range(0.0..2.0), r.gen_range(0.0..2.0));
    let (ly, vocab) = (r.gen_range(1..4), r.gen_range(3..7));
    let targets: Vec<usize> = (0..ly).map(|_| r.gen_range(1..vocab)).collect();
    let lq = r.gen_range(1..4);
    let query: Vec<usize> = (0..lq).map(|_| r.gen_range(1..vocab)).collect();
    let inputs = [
        random_tensor(r, ly, vocab, -1.0, 1.0),
        random_tensor(r, lq, vocab, -1.0, 1.0),
        random_tensor(r, lq, vocab, -1.0, 1.0),
    ];
    gradient_error(&no_params(), &inputs, move |g, _, v| {
        let p = g.softmax_rows(v[0], None)?;
        let pv = g.softmax_rows(v[1], None)?;
        let pa = g.softmax_rows(v[2], None)?;
        let l_gen = generation_loss(g, p, &targets, 0.1)?;
        let (l_vis, l_aud) = qae_losses(g, Some(pv), Some(pa), &query)?;
        joint_loss(g, l_gen, l_vis, l_aud, alpha, beta)
    })
}

/// The micro configuration used for end-to-end checks.
pub fn micro_config(sources: Vec<PointerSource>, features: Vec<Modality>) -> ModelConfig {
    ModelConfig {
        d: 8,
        rounds: 1,
        heads: 2,
        vocab_size: 12,
        ff_inner: 16,
        dropout: 0.0,
        pointer_sources: sources,
        features,
        ..ModelConfig::default()
    }
    .normalized()
}

/// Random turn over a `vocab`-word vocabulary with `frames` feature rows.
pub fn random_input(r: &mut impl Rng, config: &ModelConfig, frames: usize) -> ModelInput {
    let v = config.vocab_size;
    let mut words = |n: usize| -> Vec<usize> { (0..n).map(|_| r.gen_range(3..v)).collect() };
    let history = words(4);
    let query = words(3);
    let summary = words(5);
    let mut feat = |cols: usize| random_tensor(r, frames, cols, -1.0, 1.0);
    let visual = config.uses(Modality::Visual).then(|| feat(config.d_vis));
    let audio = config.uses(Modality::Audio).then(|| feat(config.d_aud));
    ModelInput {
        history,
        query,
        summary,
        visual,
        audio,
    }
}

/// Random answer as `(decoder_input, target)`.
pub fn random_answer(r: &mut impl Rng, vocab: usize, len: usize) -> (Vec<usize>, Vec<usize>) {
    let words: Vec<usize> = (0..len).map(|_| r.gen_range(3..vocab)).collect();
    let mut dec = vec![START];
    dec.extend(&words);
    let mut tgt = words;
    tgt.push(END);
    (dec, tgt)
}

/// Joint training loss of one example built from public pieces.
pub fn example_joint_loss<'p>(
    model: &'p Mtn,
    g: &mut Graph<'p>,
    input: &ModelInput,
    decoder_input: &[usize],
    target: &[usize],
    eps: f64,
) -> Result<Var> {
    let out = model.forward(g, input, decoder_input, &mut DropoutCtx::eval())?;
    let l_gen = generation_loss(g, out.output.p_vocab, target, eps)?;
    let (l_vis, l_aud) = qae_losses(g, out.qae_vis, out.qae_aud, &input.query)?;
    joint_loss(g, l_gen, l_vis, l_aud, 1.0, 1.0)
}

/// End-to-end gradient check of the micro model with every pointer source
/// and both modalities, on the scalar joint loss.
pub fn end_to_end_gradient_error(seed: u64) -> Result<f64> {
    let config = micro_config(PointerSource::ALL.to_vec(), vec![Modality::Visual, Modality::Audio]);
    let mut model = Mtn::init(config.clone(), seed)?;
    let r = &mut rng(seed ^ 0xe2e);
    randomize_store(model.store_mut(), r, 0.5);
    let input = random_input(r, &config, 3);
    let (dec, tgt) = random_answer(r, config.vocab_size, 3);
    gradient_error_with(&model, Mtn::store, Mtn::store_mut, &[], move |g, m, _| {
        example_joint_loss(m, g, &input, &dec, &tgt, 0.1)
    })
}

/// Random encoded example for decoding tests.
pub fn random_example(r: &mut impl Rng, config: &ModelConfig, frames: usize) -> EncodedExample {
    let input = random_input(r, config, frames);
    let (decoder_input, target) = random_answer(r, config.vocab_size, 3);
    EncodedExample {
        history: input.history,
        query: input.query,
        summary: input.summary,
        decoder_input,
        target,
        visual: input.visual,
        audio: input.audio,
    }
}
