//! Tokenization, vocabularies, dialog and feature files, batching, and the
//! synthetic copy-task corpus.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelInput, Modality};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;
pub const SEP: usize = 4;

/// Surface forms of the reserved ids, in id order.
pub const RESERVED: [&str; 5] = ["<pad>", "<s>", "</s>", "<unk>", "<sep>"];

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace() && !c.is_ascii())
}

/// Lowercases and splits on whitespace; every punctuation character becomes
/// its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_whitespace() {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
        } else if is_punct(c) {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            out.push(c.to_string());
        } else {
            word.push(c);
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ")
}

/// Dense token ↔ id map whose first five entries are [`RESERVED`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::format("vocabulary", "must start with the reserved tokens"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::format("vocabulary", format!("bad token {t:?} at id {i}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::format("vocabulary", format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Tokens seen at least `min_count` times, most frequent first, ties
    /// broken alphabetically.
    pub fn build<'a>(token_streams: impl IntoIterator<Item = &'a [String]>, min_count: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for stream in token_streams {
            for t in stream {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut words: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !RESERVED.contains(t))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Vocab::from_tokens(tokens).expect("built vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Id of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Surface tokens of `ids`, dropping pad, start and end markers.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | START | END))
            .map(|&i| self.token(i).to_string())
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Vocab::from_tokens(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
    }
}

/// Per-clip video features, `frames × dim`, stored in single precision.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub frames: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

const FEAT_MAGIC: &[u8; 8] = b"MTNFEAT1";

impl FeatureMatrix {
    pub fn new(frames: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if frames == 0 || dim == 0 || values.len() != frames * dim {
            return Err(Error::format(
                "feature matrix",
                format!("{} values for {frames}x{dim}", values.len()),
            ));
        }
        Ok(FeatureMatrix { frames, dim, values })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.frames, self.dim, self.values.iter().map(|&v| v as f64).collect())
            .expect("validated at construction")
    }

    /// `"MTNFEAT1"`, `u32` frames, `u32` dim, then `frames·dim` `f32`
    /// values, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.values.len());
        out.extend_from_slice(FEAT_MAGIC);
        out.extend_from_slice(&(self.frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: String| Error::format("feature file", d);
        if bytes.len() < 16 {
            return Err(bad(format!("header truncated at {} bytes", bytes.len())));
        }
        if &bytes[..8] != FEAT_MAGIC {
            return Err(bad("bad magic, expected MTNFEAT1".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
        let (frames, dim) = (word(8), word(12));
        let expected = frames
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| bad(format!("{frames}x{dim} overflows")))?;
        let payload = &bytes[16..];
        if payload.len() != expected {
            return Err(bad(format!(
                "{frames}x{dim} needs {expected} payload bytes, found {}",
                payload.len()
            )));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        FeatureMatrix::new(frames, dim, values).map_err(|_| bad(format!("empty matrix {frames}x{dim}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        FeatureMatrix::from_bytes(&bytes)
    }
}

/// One line of a dialog file. Feature paths are relative to the file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogRecord {
    pub dialog_id: String,
    /// Counts from 1.
    pub turn: usize,
    /// Earlier utterances, alternating question and answer.
    #[serde(default)]
    pub history: Vec<String>,
    pub query: String,
    pub summary: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<String>,
}

/// A dialog turn with its features loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct DialogExample {
    pub dialog_id: String,
    pub turn: usize,
    pub history: Vec<String>,
    pub query: String,
    pub summary: String,
    pub answer: String,
    pub visual: Option<FeatureMatrix>,
    pub audio: Option<FeatureMatrix>,
}

impl DialogExample {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::format("dialog example", format!("{} turn {}: {d}", self.dialog_id, self.turn)));
        if self.turn == 0 {
            return bad("turn must be at least 1".into());
        }
        if tokenize(&self.query).is_empty() {
            return bad("empty query".into());
        }
        if let (Some(v), Some(a)) = (&self.visual, &self.audio) {
            if v.frames != a.frames {
                return bad(format!("{} visual frames but {} audio frames", v.frames, a.frames));
            }
        }
        Ok(())
    }

    /// Every token of the text fields, for vocabulary building.
    pub fn all_tokens(&self) -> Vec<String> {
        let mut out = Vec::new();
        for h in &self.history {
            out.extend(tokenize(h));
        }
        for s in [&self.query, &self.summary, &self.answer] {
            out.extend(tokenize(s));
        }
        out
    }
}

fn parse_lines<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line)
            .map_err(|e| Error::format("dialog file", format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Reads a JSON-lines dialog file and the feature files it references.
pub fn load_dialogs(path: impl AsRef<Path>) -> Result<Vec<DialogExample>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records: Vec<DialogRecord> = parse_lines(path, &text)?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let load = |rel: &Option<String>| -> Result<Option<FeatureMatrix>> {
        rel.as_ref().map(|r| FeatureMatrix::load(dir.join(r))).transpose()
    };
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let ex = DialogExample {
            visual: load(&r.visual)?,
            audio: load(&r.audio)?,
            dialog_id: r.dialog_id,
            turn: r.turn,
            history: r.history,
            query: r.query,
            summary: r.summary,
            answer: r.answer,
        };
        ex.validate()?;
        out.push(ex);
    }
    Ok(out)
}

/// Writes `examples` as `<dir>/<name>.jsonl`, with features under
/// `<dir>/features/<name>/`.
pub fn save_dialogs(dir: impl AsRef<Path>, name: &str, examples: &[DialogExample]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let feat_dir = dir.join("features").join(name);
    std::fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let path = dir.join(format!("{name}.jsonl"));
    let mut buf = Vec::new();
    for ex in examples {
        let write_feat = |m: Modality, f: &Option<FeatureMatrix>| -> Result<Option<String>> {
            let Some(f) = f else { return Ok(None) };
            let rel = format!("features/{name}/{}_{}.{}.feat", ex.dialog_id, ex.turn, m.name());
            f.save(dir.join(&rel))?;
            Ok(Some(rel))
        };
        let rec = DialogRecord {
            visual: write_feat(Modality::Visual, &ex.visual)?,
            audio: write_feat(Modality::Audio, &ex.audio)?,
            dialog_id: ex.dialog_id.clone(),
            turn: ex.turn,
            history: ex.history.clone(),
            query: ex.query.clone(),
            summary: ex.summary.clone(),
            answer: ex.answer.clone(),
        };
        serde_json::to_writer(&mut buf, &rec)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Token ids of one example as the model consumes them.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedExample {
    /// `<sep>` before every utterance; a lone `<sep>` when there is no history.
    pub history: Vec<usize>,
    pub query: Vec<usize>,
    /// The summary, or a lone `<sep>` when it is empty.
    pub summary: Vec<usize>,
    /// `<s>` followed by the answer.
    pub decoder_input: Vec<usize>,
    /// The answer followed by `</s>`.
    pub target: Vec<usize>,
    pub visual: Option<Tensor>,
    pub audio: Option<Tensor>,
}

impl EncodedExample {
    pub fn new(ex: &DialogExample, vocab: &Vocab, features: &[Modality]) -> Result<Self> {
        let mut history = Vec::new();
        for h in &ex.history {
            history.push(SEP);
            history.extend(vocab.encode(&tokenize(h)));
        }
        if history.is_empty() {
            history.push(SEP);
        }
        let query = vocab.encode(&tokenize(&ex.query));
        if query.is_empty() {
            return Err(Error::InvalidArgument(format!("{} turn {}: empty query", ex.dialog_id, ex.turn)));
        }
        let mut summary = vocab.encode(&tokenize(&ex.summary));
        if summary.is_empty() {
            summary.push(SEP);
        }
        let answer = vocab.encode(&tokenize(&ex.answer));
        let mut decoder_input = vec![START];
        decoder_input.extend(&answer);
        let mut target = answer;
        target.push(END);
        let pick = |m: Modality, f: &Option<FeatureMatrix>| -> Result<Option<Tensor>> {
            if !features.contains(&m) {
                return Ok(None);
            }
            f.as_ref().map(FeatureMatrix::to_tensor).map(Some).ok_or_else(|| {
                Error::InvalidArgument(format!("{} turn {}: missing {} features", ex.dialog_id, ex.turn, m.name()))
            })
        };
        Ok(EncodedExample {
            history,
            query,
            summary,
            decoder_input,
            target,
            visual: pick(Modality::Visual, &ex.visual)?,
            audio: pick(Modality::Audio, &ex.audio)?,
        })
    }

    pub fn model_input(&self) -> ModelInput {
        ModelInput {
            history: self.history.clone(),
            query: self.query.clone(),
            summary: self.summary.clone(),
            visual: self.visual.clone(),
            audio: self.audio.clone(),
        }
    }
}

pub fn encode_all(examples: &[DialogExample], vocab: &Vocab, features: &[Modality]) -> Result<Vec<EncodedExample>> {
    examples.iter().map(|e| EncodedExample::new(e, vocab, features)).collect()
}

/// Splits `order` into consecutive chunks of `batch_size`; the last may be short.
pub fn make_batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Shuffles `0..n` with `seed` and batches it.
pub fn shuffled_batches(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    make_batches(&order, batch_size)
}

/// Right-padded id matrix with its mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Padded {
    pub ids: Vec<Vec<usize>>,
    /// `true` at real tokens.
    pub mask: Vec<Vec<bool>>,
}

impl Padded {
    pub fn new(seqs: &[&[usize]], pad_id: usize) -> Self {
        let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len());
        let mut mask = Vec::with_capacity(seqs.len());
        for s in seqs {
            let mut row = s.to_vec();
            row.resize(width, pad_id);
            ids.push(row);
            mask.push((0..width).map(|j| j < s.len()).collect());
        }
        Padded { ids, mask }
    }

    pub fn width(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }
}

/// One batch of examples, each text field padded to the batch maximum.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub history: Padded,
    pub query: Padded,
    pub summary: Padded,
    pub decoder_input: Padded,
    pub target: Padded,
}

impl Batch {
    pub fn new(corpus: &[EncodedExample], indices: &[usize], pad_id: usize) -> Self {
        let field = |f: fn(&EncodedExample) -> &[usize]| {
            let seqs: Vec<&[usize]> = indices.iter().map(|&i| f(&corpus[i])).collect();
            Padded::new(&seqs, pad_id)
        };
        Batch {
            indices: indices.to_vec(),
            history: field(|e| &e.history),
            query: field(|e| &e.query),
            summary: field(|e| &e.summary),
            decoder_input: field(|e| &e.decoder_input),
            target: field(|e| &e.target),
        }
    }

    /// Row `k` as model input, padding included.
    pub fn input(&self, corpus: &[EncodedExample], k: usize) -> ModelInput {
        let ex = &corpus[self.indices[k]];
        ModelInput {
            history: self.history.ids[k].clone(),
            query: self.query.ids[k].clone(),
            summary: self.summary.ids[k].clone(),
            visual: ex.visual.clone(),
            audio: ex.audio.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerMode {
    /// Answer repeats the summary.
    Summary,
    /// Answer repeats the listed query tokens.
    Query,
    /// Each example picks one of the two.
    Mixed,
}

impl AnswerMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "summary" => Ok(AnswerMode::Summary),
            "query" => Ok(AnswerMode::Query),
            "mixed" => Ok(AnswerMode::Mixed),
            other => Err(Error::Config(format!("unknown answer mode {other:?}"))),
        }
    }
}

/// Shape of a synthetic copy corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_examples: usize,
    /// Size of the vocabulary a corpus this large would produce, reserved tokens included.
    pub vocab_size: usize,
    pub answer_mode: AnswerMode,
    pub features: Vec<Modality>,
    pub d_vis: usize,
    pub d_aud: usize,
    pub summary_len: usize,
    /// Query items after the command word.
    pub query_items: usize,
}

impl SynthSpec {
    pub fn new(seed: u64, n_examples: usize, vocab_size: usize, answer_mode: AnswerMode) -> Self {
        SynthSpec {
            seed,
            n_examples,
            vocab_size,
            answer_mode,
            features: vec![Modality::Visual],
            d_vis: 2048,
            d_aud: 128,
            summary_len: 6,
            query_items: 4,
        }
    }
}

/// Command words of the synthetic task; the rest of the vocabulary is content.
pub const SYNTH_COMMANDS: [&str; 3] = ["recall", "repeat", "and"];

fn synth_content_words(vocab_size: usize) -> Result<Vec<String>> {
    let n = vocab_size
        .checked_sub(RESERVED.len() + SYNTH_COMMANDS.len())
        .filter(|&n| n >= 16)
        .ok_or_else(|| Error::Config(format!("synthetic vocabulary {vocab_size} is too small")))?;
    Ok((0..n).map(|i| format!("t{i}")).collect())
}

fn synth_features(rng: &mut ChaCha8Rng, frames: usize, dim: usize) -> FeatureMatrix {
    let values = (0..frames * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    FeatureMatrix::new(frames, dim, values).expect("positive shape")
}

/// Deterministic copy-task corpus.
///
/// Each dialog turn has a summary of distinct content words and a query of
/// the form `<command> x1 .. xk` where some `xi` come from the summary and
/// the rest are distractors. `recall` asks for the summary verbatim;
/// `repeat` asks for the query items. Every answer token therefore occurs
/// in the summary or the query. The history holds one or two earlier
/// synthetic turns of the same dialog.
pub fn synth_copy_corpus(spec: &SynthSpec) -> Result<Vec<DialogExample>> {
    let words = synth_content_words(spec.vocab_size)?;
    let need = spec.summary_len + spec.query_items;
    if spec.summary_len == 0 || spec.query_items < 2 || need > words.len() {
        return Err(Error::Config(format!(
            "summary_len {} and query_items {} do not fit {} content words",
            spec.summary_len,
            spec.query_items,
            words.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.n_examples);
    let mut dialog = 0usize;
    while out.len() < spec.n_examples {
        let turns = rng.gen_range(2..=3).min(spec.n_examples - out.len() + 1);
        let frames = rng.gen_range(2..=8);
        let visual = spec
            .features
            .contains(&Modality::Visual)
            .then(|| synth_features(&mut rng, frames, spec.d_vis));
        let audio = spec
            .features
            .contains(&Modality::Audio)
            .then(|| synth_features(&mut rng, frames, spec.d_aud));
        let mut history: Vec<String> = Vec::new();
        for turn in 1..=turns {
            let picked: Vec<&String> = words.choose_multiple(&mut rng, need).collect();
            let summary_words = &picked[..spec.summary_len];
            let distract = &picked[spec.summary_len..];
            let from_summary = rng.gen_range(1..spec.query_items);
            let mut items: Vec<&String> = summary_words.choose_multiple(&mut rng, from_summary).copied().collect();
            items.extend(distract.iter().take(spec.query_items - from_summary));
            items.shuffle(&mut rng);
            let recall = match spec.answer_mode {
                AnswerMode::Summary => true,
                AnswerMode::Query => false,
                AnswerMode::Mixed => rng.gen_bool(0.5),
            };
            let command = if recall { SYNTH_COMMANDS[0] } else { SYNTH_COMMANDS[1] };
            let query = format!("{command} {}", detokenize(&items));
            let answer = if recall {
                detokenize(summary_words)
            } else {
                detokenize(&items)
            };
            let summary = detokenize(summary_words);
            if turn > 1 {
                out.push(DialogExample {
                    dialog_id: format!("synth{dialog:05}"),
                    turn: turn - 1,
                    history: history.clone(),
                    query: query.clone(),
                    summary,
                    answer: answer.clone(),
                    visual: visual.clone(),
                    audio: audio.clone(),
                });
                if out.len() == spec.n_examples {
                    break;
                }
            }
            history.push(query);
            history.push(format!("{answer} {} {}", SYNTH_COMMANDS[2], words[rng.gen_range(0..words.len())]));
        }
        dialog += 1;
    }
    Ok(out)
}

/// Per-split example counts.
pub fn summarize_counts(splits: &[(&str, &[DialogExample])]) -> BTreeMap<String, usize> {
    splits.iter().map(|(n, e)| (n.to_string(), e.len())).collect()
}

/// Distinct tokens over a corpus, reserved tokens excluded.
pub fn distinct_tokens(examples: &[DialogExample]) -> HashSet<String> {
    examples.iter().flat_map(DialogExample::all_tokens).collect()
}
