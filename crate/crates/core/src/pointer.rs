//! Pointer distributions over several source texts, their projection onto
//! the vocabulary, the generation head, and the learned convex mixture.
//!
//! Mixture columns are always ordered history, query, summary, generation.
//! A disabled pointer source has no column at all, so the remaining scores
//! are still a softmax and the mixture stays convex.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Text inputs a pointer can copy from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointerSource {
    History,
    Query,
    Summary,
}

impl PointerSource {
    pub const ALL: [PointerSource; 3] = [PointerSource::History, PointerSource::Query, PointerSource::Summary];

    pub fn name(self) -> &'static str {
        match self {
            PointerSource::History => "history",
            PointerSource::Query => "query",
            PointerSource::Summary => "summary",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "history" | "his" => Ok(PointerSource::History),
            "query" | "que" => Ok(PointerSource::Query),
            "summary" | "cap" | "caption" => Ok(PointerSource::Summary),
            other => Err(Error::Config(format!("unknown pointer source {other:?}"))),
        }
    }
}

/// Row-stochastic `L × |V|` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct VocabDistribution {
    probs: Tensor,
}

impl VocabDistribution {
    /// Wraps `probs` after checking every row sums to one within `tol`.
    pub fn new(probs: Tensor, tol: f64) -> Result<Self> {
        if let Some(r) = first_non_stochastic_row(&probs, tol) {
            return Err(Error::InvalidArgument(format!("row {r} is not a probability distribution")));
        }
        Ok(VocabDistribution { probs })
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.probs.row(i)
    }
}

/// Index of the first row that has a negative entry or does not sum to one.
pub fn first_non_stochastic_row(t: &Tensor, tol: f64) -> Option<usize> {
    (0..t.rows()).find(|&i| {
        let row = t.row(i);
        row.iter().any(|&p| !(0.0..=1.0 + tol).contains(&p)) || (row.iter().sum::<f64>() - 1.0).abs() > tol
    })
}

/// `Softmax(z_dec · z_xᵀ)` with padded source positions removed.
pub fn pointer_distribution(g: &mut Graph<'_>, z_dec: Var, z_x: Var, keep: &[bool]) -> Result<Var> {
    let [ly, _] = g.shape(z_dec);
    let [lx, _] = g.shape(z_x);
    if keep.len() != lx {
        return Err(Error::shape("pointer mask", [lx, 1], [keep.len(), 1]));
    }
    if !keep.iter().any(|&k| k) {
        return Err(Error::InvalidArgument("pointer source is entirely padding".into()));
    }
    let logits = g.matmul_t(z_dec, z_x)?;
    let mask: Vec<bool> = (0..ly).flat_map(|_| keep.iter().copied()).collect();
    g.softmax_rows(logits, Some(&mask))
}

/// Moves pointer mass from source positions onto the ids they carry.
pub fn scatter_to_vocab(g: &mut Graph<'_>, ptr: Var, source_ids: &[usize], vocab: usize) -> Result<Var> {
    g.scatter_cols(ptr, source_ids, vocab)
}

/// `Softmax(z_dec · W_gen)`.
pub fn generation_distribution(g: &mut Graph<'_>, z_dec: Var, w_gen: Var) -> Result<Var> {
    let logits = g.matmul(z_dec, w_gen)?;
    g.softmax_rows(logits, None)
}

/// A source text representation together with its padding mask.
#[derive(Clone, Copy, Debug)]
pub struct MaskedSeq<'a> {
    pub z: Var,
    pub keep: &'a [bool],
}

/// `Softmax([mean(his) ⊕ mean(que) ⊕ mean(cap) ⊕ z_res ⊕ z_dec] · W_ctx)`.
///
/// Each source is mean-pooled over its unpadded positions and repeated to
/// `L_Y` rows. The result has one column per column of `w_ctx`.
pub fn mixture_scores(
    g: &mut Graph<'_>,
    history: MaskedSeq<'_>,
    query: MaskedSeq<'_>,
    summary: MaskedSeq<'_>,
    z_res: Var,
    z_dec: Var,
    w_ctx: Var,
) -> Result<Var> {
    let [ly, d] = g.shape(z_dec);
    if g.shape(z_res) != [ly, d] {
        return Err(Error::shape("mixture_scores", [ly, d], g.shape(z_res)));
    }
    let mut parts = Vec::with_capacity(5);
    for src in [history, query, summary] {
        let w = g.shape(src.z)[1];
        if w != d {
            return Err(Error::shape("mixture_scores", [ly, d], g.shape(src.z)));
        }
        let pooled = g.mean_rows(src.z, Some(src.keep))?;
        parts.push(g.broadcast_rows(pooled, ly)?);
    }
    parts.push(z_res);
    parts.push(z_dec);
    let ctx = g.concat_cols(&parts)?;
    let logits = g.matmul(ctx, w_ctx)?;
    g.softmax_rows(logits, None)
}

/// Vocabulary distributions from whichever pointer sources are enabled.
#[derive(Clone, Copy, Debug, Default)]
pub struct PointerVocab {
    pub history: Option<Var>,
    pub query: Option<Var>,
    pub summary: Option<Var>,
}

impl PointerVocab {
    /// Enabled components in mixture-column order.
    pub fn columns(&self) -> Vec<Var> {
        [self.history, self.query, self.summary].into_iter().flatten().collect()
    }
}

/// Per-position convex combination of the enabled pointer distributions and
/// the generation distribution, weighted by the columns of `scores`.
pub fn mix_distributions(g: &mut Graph<'_>, pointers: PointerVocab, p_gen: Var, scores: Var) -> Result<Var> {
    let mut parts = pointers.columns();
    parts.push(p_gen);
    let k = g.shape(scores)[1];
    if k != parts.len() {
        return Err(Error::InvalidArgument(format!(
            "{k} mixture scores for {} distributions",
            parts.len()
        )));
    }
    g.weighted_sum(scores, &parts)
}
