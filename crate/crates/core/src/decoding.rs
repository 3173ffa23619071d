//! Beam search, greedy decoding, and ensembles that sum the members'
//! vocabulary distributions.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::attention::DropoutCtx;
use crate::data::{detokenize, EncodedExample, Vocab, END, START};
use crate::error::{Error, Result};
use crate::model::{EncoderOutputs, ModelInput, Mtn};
use crate::tensor::Graph;

/// Next-token distributions for a growing prefix.
pub trait StepModel {
    fn vocab_size(&self) -> usize;

    /// Distribution over the token following `prefix` (which starts with `<s>`).
    fn next_distribution(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
}

/// One model with its encoder pass done once; every step re-runs the
/// decoder over the whole prefix.
pub struct Session<'m> {
    model: &'m Mtn,
    graph: Graph<'m>,
    encoder: EncoderOutputs,
    mark: usize,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m Mtn, input: &ModelInput) -> Result<Self> {
        let mut graph = Graph::new();
        let encoder = model.encode(&mut graph, input, &mut DropoutCtx::eval())?;
        let mark = graph.len();
        Ok(Session {
            model,
            graph,
            encoder,
            mark,
        })
    }
}

impl StepModel for Session<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn next_distribution(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        self.graph.truncate(self.mark);
        let (_, _, out) = self
            .model
            .decode_prefix(&mut self.graph, &self.encoder, prefix, &mut DropoutCtx::eval())?;
        Ok(self.graph.row(out.p_vocab, prefix.len() - 1).to_vec())
    }
}

/// Elementwise sum of the members' rows divided by its total.
pub fn ensemble_rows(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = rows
        .first()
        .ok_or_else(|| Error::InvalidArgument("ensemble of no models".into()))?;
    let mut sum = first.clone();
    for r in &rows[1..] {
        if r.len() != sum.len() {
            return Err(Error::shape("ensemble", [1, sum.len()], [1, r.len()]));
        }
        for (s, v) in sum.iter_mut().zip(r) {
            *s += v;
        }
    }
    let total: f64 = sum.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateRow { row: 0 });
    }
    for s in &mut sum {
        *s /= total;
    }
    Ok(sum)
}

/// Several step models combined with [`ensemble_rows`].
pub struct Ensemble<S> {
    members: Vec<S>,
}

impl<S: StepModel> Ensemble<S> {
    pub fn new(members: Vec<S>) -> Result<Self> {
        let v = members
            .first()
            .ok_or_else(|| Error::InvalidArgument("ensemble of no models".into()))?
            .vocab_size();
        if members.iter().any(|m| m.vocab_size() != v) {
            return Err(Error::InvalidArgument("ensemble members disagree on vocabulary size".into()));
        }
        Ok(Ensemble { members })
    }
}

impl<S: StepModel> StepModel for Ensemble<S> {
    fn vocab_size(&self) -> usize {
        self.members[0].vocab_size()
    }

    fn next_distribution(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let rows = self
            .members
            .iter_mut()
            .map(|m| m.next_distribution(prefix))
            .collect::<Result<Vec<_>>>()?;
        ensemble_rows(&rows)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub length_penalty: f64,
    /// Maximum number of generated tokens, `</s>` included.
    pub max_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_size: 5,
            length_penalty: 1.0,
            max_len: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// Starts with `<s>`.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    /// Generated tokens, `<s>` excluded.
    pub fn generated(&self) -> &[usize] {
        &self.tokens[1..]
    }

    /// `log_prob / len^penalty` over the generated tokens.
    pub fn score(&self, length_penalty: f64) -> f64 {
        let len = self.generated().len().max(1) as f64;
        self.log_prob / len.powf(length_penalty)
    }

    /// Output tokens without `</s>`.
    pub fn output(&self) -> &[usize] {
        let g = self.generated();
        match g.last() {
            Some(&END) => &g[..g.len() - 1],
            _ => g,
        }
    }
}

fn rank(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

/// Beam search that prunes on raw log-probability and picks the final
/// hypothesis by [`BeamHypothesis::score`]. Ties prefer the
/// lexicographically smaller token sequence.
///
/// A hypothesis that hits `max_len` without `</s>` is returned with
/// `finished == false`.
pub fn beam_search<S: StepModel + ?Sized>(model: &mut S, cfg: BeamConfig) -> Result<BeamHypothesis> {
    if cfg.beam_size == 0 || cfg.max_len == 0 {
        return Err(Error::InvalidArgument("beam_size and max_len must be at least 1".into()));
    }
    let mut beams = vec![BeamHypothesis {
        tokens: vec![START],
        log_prob: 0.0,
        finished: false,
    }];
    for _ in 0..cfg.max_len {
        if beams.iter().all(|b| b.finished) {
            break;
        }
        let mut pool: Vec<BeamHypothesis> = Vec::new();
        for b in &beams {
            if b.finished {
                pool.push(b.clone());
                continue;
            }
            let p = model.next_distribution(&b.tokens)?;
            for (w, &pw) in p.iter().enumerate() {
                if pw <= 0.0 {
                    continue;
                }
                let mut tokens = b.tokens.clone();
                tokens.push(w);
                pool.push(BeamHypothesis {
                    tokens,
                    log_prob: b.log_prob + pw.ln(),
                    finished: w == END,
                });
            }
        }
        if pool.is_empty() {
            return Err(Error::DegenerateRow { row: 0 });
        }
        pool.sort_by(|a, b| rank((a.log_prob, &a.tokens), (b.log_prob, &b.tokens)));
        pool.truncate(cfg.beam_size);
        beams = pool;
    }
    beams.sort_by(|a, b| {
        rank(
            (a.score(cfg.length_penalty), &a.tokens),
            (b.score(cfg.length_penalty), &b.tokens),
        )
    });
    Ok(beams.swap_remove(0))
}

/// Argmax decoding; the lowest id wins ties.
pub fn greedy<S: StepModel + ?Sized>(model: &mut S, max_len: usize) -> Result<BeamHypothesis> {
    let mut h = BeamHypothesis {
        tokens: vec![START],
        log_prob: 0.0,
        finished: false,
    };
    while h.generated().len() < max_len && !h.finished {
        let p = model.next_distribution(&h.tokens)?;
        let w = crate::training::argmax(&p);
        h.log_prob += p[w].ln();
        h.tokens.push(w);
        h.finished = w == END;
    }
    Ok(h)
}

/// Beam search for one example over one model or an ensemble.
pub fn decode_example(models: &[&Mtn], example: &EncodedExample, cfg: BeamConfig) -> Result<BeamHypothesis> {
    let input = example.model_input();
    let sessions = models
        .iter()
        .map(|m| Session::new(m, &input))
        .collect::<Result<Vec<_>>>()?;
    let mut ensemble = Ensemble::new(sessions)?;
    beam_search(&mut ensemble, cfg)
}

/// One line of a generation output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratedTurn {
    pub dialog_id: String,
    pub turn: usize,
    pub text: String,
    /// The search stopped at `max_len` before emitting `</s>`.
    #[serde(default)]
    pub truncated: bool,
}

/// Detokenized response for one example.
pub fn generate(models: &[&Mtn], vocab: &Vocab, example: &EncodedExample, cfg: BeamConfig) -> Result<(String, bool)> {
    let h = decode_example(models, example, cfg)?;
    Ok((detokenize(&vocab.decode(h.output())), !h.finished))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Returns the same row at every step.
    struct Fixed(Vec<f64>);

    impl StepModel for Fixed {
        fn vocab_size(&self) -> usize {
            self.0.len()
        }
        fn next_distribution(&mut self, _: &[usize]) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }

    /// Emits `seq` one-hot, then `</s>`.
    struct Scripted(Vec<usize>, usize);

    impl StepModel for Scripted {
        fn vocab_size(&self) -> usize {
            self.1
        }
        fn next_distribution(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
            let mut p = vec![0.0; self.1];
            p[*self.0.get(prefix.len() - 1).unwrap_or(&END)] = 1.0;
            Ok(p)
        }
    }

    #[test]
    fn ensemble_hand_arithmetic() {
        let out = ensemble_rows(&[vec![0.8, 0.2], vec![0.2, 0.8]]).unwrap();
        assert_eq!(out, [0.5, 0.5]);
        let p = vec![0.1, 0.6, 0.3];
        assert_eq!(ensemble_rows(&[p.clone(), p.clone()]).unwrap(), ensemble_rows(&[p.clone()]).unwrap());
        assert!(ensemble_rows(&[]).is_err());
    }

    #[test]
    fn scripted_sequence_for_any_beam() {
        for beam_size in 1..6 {
            let mut m = Scripted(vec![5, 3, 7], 8);
            let h = beam_search(
                &mut m,
                BeamConfig {
                    beam_size,
                    length_penalty: 1.0,
                    max_len: 10,
                },
            )
            .unwrap();
            assert_eq!(h.output(), [5, 3, 7]);
            assert!(h.finished);
            assert_eq!(h.log_prob, 0.0);
        }
    }

    #[test]
    fn truncation_is_flagged() {
        let mut m = Fixed(vec![0.0, 0.0, 0.1, 0.9]);
        let h = beam_search(
            &mut m,
            BeamConfig {
                beam_size: 1,
                length_penalty: 1.0,
                max_len: 3,
            },
        )
        .unwrap();
        assert_eq!(h.generated(), [3, 3, 3]);
        assert!(!h.finished);
        assert_eq!(greedy(&mut m, 3).unwrap(), h);
    }

    #[test]
    fn length_penalty_prefers_longer_when_per_token_better() {
        // </s> now: ln 0.5 ≈ -0.69; token 3 then </s>: ln 0.5 + ln 0.9 ≈ -0.80, or -0.40 per token
        struct Two;
        impl StepModel for Two {
            fn vocab_size(&self) -> usize {
                4
            }
            fn next_distribution(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
                Ok(if prefix.len() == 1 {
                    vec![0.0, 0.0, 0.5, 0.5]
                } else {
                    vec![0.0, 0.0, 0.9, 0.1]
                })
            }
        }
        let cfg = BeamConfig {
            beam_size: 2,
            length_penalty: 1.0,
            max_len: 5,
        };
        assert_eq!(beam_search(&mut Two, cfg).unwrap().generated(), [3, END]);
        let raw = BeamConfig {
            length_penalty: 0.0,
            ..cfg
        };
        assert_eq!(beam_search(&mut Two, raw).unwrap().generated(), [END]);
    }
}
