//! Run configuration and the command implementations behind the `mtn` binary.
//!
//! Settings resolve in three layers: built-in desk defaults, then the TOML
//! file given by `--config`, then command-line flags.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{
    encode_all, load_dialogs, save_dialogs, synth_copy_corpus, tokenize, AnswerMode, DialogExample, SynthSpec, Vocab,
};
use crate::decoding::{generate, BeamConfig, GeneratedTurn};
use crate::metrics::{evaluate_corpus, format_table, EvalPair, MetricReport};
use crate::model::{Checkpoint, ModelConfig, Modality, Mtn};
use crate::pointer::PointerSource;
use crate::training::{log_tsv, train, EpochControl, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d: usize,
    pub rounds: usize,
    pub heads: usize,
    pub d_vis: usize,
    pub d_aud: usize,
    pub ff_inner: usize,
    pub dropout: f64,
    pub pointer_sources: Vec<PointerSource>,
    pub features: Vec<Modality>,
    pub tie_rounds: bool,
}

impl ModelSection {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d: self.d,
            rounds: self.rounds,
            heads: self.heads,
            vocab_size,
            d_vis: self.d_vis,
            d_aud: self.d_aud,
            ff_inner: self.ff_inner,
            dropout: self.dropout,
            pointer_sources: self.pointer_sources.clone(),
            features: self.features.clone(),
            tie_rounds: self.tie_rounds,
        }
        .normalized()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub warmup_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lr_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSection {
    pub beam_size: usize,
    pub length_penalty: f64,
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub vocab_size: usize,
    pub answer_mode: AnswerMode,
    pub summary_len: usize,
    pub query_items: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Vocabulary frequency cutoff.
    pub min_count: usize,
}

/// Every tunable setting of every command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub train: TrainSection,
    pub decode: DecodeSection,
    pub synth: SynthSection,
    pub data: DataSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::desk(0);
        let t = TrainConfig::desk();
        let b = BeamConfig::default();
        RunConfig {
            seed: 0,
            model: ModelSection {
                d: m.d,
                rounds: m.rounds,
                heads: m.heads,
                d_vis: m.d_vis,
                d_aud: m.d_aud,
                ff_inner: m.ff_inner,
                dropout: m.dropout,
                pointer_sources: m.pointer_sources,
                features: m.features,
                tie_rounds: m.tie_rounds,
            },
            train: TrainSection {
                warmup_steps: t.warmup_steps,
                epochs: t.epochs,
                batch_size: t.batch_size,
                label_smoothing: t.label_smoothing,
                alpha: t.alpha,
                beta: t.beta,
                lr_scale: t.lr_scale,
            },
            decode: DecodeSection {
                beam_size: b.beam_size,
                length_penalty: b.length_penalty,
                max_len: b.max_len,
            },
            synth: SynthSection {
                n_train: 2000,
                n_valid: 200,
                n_test: 200,
                vocab_size: 100,
                answer_mode: AnswerMode::Mixed,
                summary_len: 6,
                query_items: 4,
            },
            data: DataSection { min_count: 1 },
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value, path: &str) -> anyhow::Result<()> {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &key)?,
                    None => bail!("unknown configuration key `{key}`"),
                }
            }
            Ok(())
        }
        (toml::Value::Table(_), _) => bail!("configuration key `{path}` must be a table"),
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with the TOML document `text`.
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let over: toml::Value = toml::from_str(text).context("invalid TOML")?;
        let mut base = toml::Value::try_from(RunConfig::default()).context("serializing defaults")?;
        merge(&mut base, over, "")?;
        let cfg: RunConfig = base.try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.model_config(RESERVED_PLUS_ONE)?;
        self.train_config().validate()?;
        self.beam().and(Ok(()))
    }

    pub fn model_config(&self, vocab_size: usize) -> anyhow::Result<ModelConfig> {
        let cfg = self.model.model_config(vocab_size);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            warmup_steps: t.warmup_steps,
            epochs: t.epochs,
            batch_size: t.batch_size,
            label_smoothing: t.label_smoothing,
            alpha: t.alpha,
            beta: t.beta,
            lr_scale: t.lr_scale,
            seed: self.seed,
        }
    }

    pub fn beam(&self) -> anyhow::Result<BeamConfig> {
        let d = &self.decode;
        if d.beam_size == 0 || d.max_len == 0 {
            bail!("beam_size and max_len must be at least 1");
        }
        Ok(BeamConfig {
            beam_size: d.beam_size,
            length_penalty: d.length_penalty,
            max_len: d.max_len,
        })
    }

    pub fn synth_spec(&self, seed: u64, n: usize) -> SynthSpec {
        let s = &self.synth;
        SynthSpec {
            seed,
            n_examples: n,
            vocab_size: s.vocab_size,
            answer_mode: s.answer_mode,
            features: self.model.features.clone(),
            d_vis: self.model.d_vis,
            d_aud: self.model.d_aud,
            summary_len: s.summary_len,
            query_items: s.query_items,
        }
    }
}

/// Smallest vocabulary that passes model validation.
const RESERVED_PLUS_ONE: usize = crate::data::RESERVED.len() + 1;

/// Parses `none` or a comma list of pointer sources.
pub fn parse_pointer_sources(s: &str) -> crate::Result<Vec<PointerSource>> {
    parse_list(s, PointerSource::parse)
}

/// Parses `none` or a comma list of feature types.
pub fn parse_features(s: &str) -> crate::Result<Vec<Modality>> {
    parse_list(s, Modality::parse)
}

fn parse_list<T: Ord>(s: &str, one: impl Fn(&str) -> crate::Result<T>) -> crate::Result<Vec<T>> {
    if s.trim().eq_ignore_ascii_case("none") {
        return Ok(Vec::new());
    }
    let mut out = s.split(',').map(one).collect::<crate::Result<Vec<_>>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

#[derive(Debug, Parser)]
#[command(name = "mtn", version, about = "Multimodal transformer dialog generation with pointer-generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonFlags {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Comma list from summary, query, history, or "none".
    #[arg(long, global = true)]
    pub pointer_sources: Option<String>,
    /// Comma list from visual, audio, or "none".
    #[arg(long, global = true)]
    pub features: Option<String>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub beam_size: Option<usize>,
    #[arg(long, global = true)]
    pub length_penalty: Option<f64>,
    #[arg(long, global = true)]
    pub max_len: Option<usize>,
}

impl CommonFlags {
    /// Defaults, then the config file, then these flags.
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = &self.pointer_sources {
            cfg.model.pointer_sources = parse_pointer_sources(p)?;
        }
        if let Some(f) = &self.features {
            cfg.model.features = parse_features(f)?;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(b) = self.beam_size {
            cfg.decode.beam_size = b;
        }
        if let Some(l) = self.length_penalty {
            cfg.decode.length_penalty = l;
        }
        if let Some(m) = self.max_len {
            cfg.decode.max_len = m;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic copy-task corpus (train/valid/test splits).
    SynthData {
        #[command(flatten)]
        common: CommonFlags,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write its checkpoint and epoch log.
    Train {
        #[command(flatten)]
        common: CommonFlags,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: Option<PathBuf>,
        /// Output directory for model.ckpt and train_log.tsv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode responses with one checkpoint or an ensemble.
    Generate {
        #[command(flatten)]
        common: CommonFlags,
        /// Comma list of checkpoint files.
        #[arg(long, value_delimiter = ',', required = true)]
        checkpoints: Vec<PathBuf>,
        /// Dialog file to answer.
        #[arg(long)]
        input: PathBuf,
        /// Output JSON-lines file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score generated responses against a dialog file's answers.
    Evaluate {
        #[command(flatten)]
        common: CommonFlags,
        /// Generation output.
        #[arg(long)]
        hyps: PathBuf,
        /// Dialog file with reference answers.
        #[arg(long)]
        refs: PathBuf,
        /// Output directory for report.txt and report.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train, decode and score all seven pointer-source variants.
    Ablate {
        #[command(flatten)]
        common: CommonFlags,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: Option<PathBuf>,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> anyhow::Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    dispatch(cli.command)
}

pub fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::SynthData { common, out } => {
            let counts = cmd_synth_data(&common.resolve()?, &out)?;
            println!("{counts}");
        }
        Command::Train {
            common,
            train,
            valid,
            out,
        } => {
            let summary = cmd_train(&common.resolve()?, &train, valid.as_deref(), &out)?;
            println!("{summary}");
        }
        Command::Generate {
            common,
            checkpoints,
            input,
            out,
        } => {
            let n = cmd_generate(&common.resolve()?, &checkpoints, &input, &out)?;
            println!("wrote {n} responses to {}", out.display());
        }
        Command::Evaluate { common, hyps, refs, out } => {
            common.resolve()?;
            let report = cmd_evaluate(&hyps, &refs, out.as_deref())?;
            print!("{}", format_table("Model", &[("model".into(), report)]));
        }
        Command::Ablate {
            common,
            train,
            valid,
            test,
            out,
        } => {
            let table = cmd_ablate(&common.resolve()?, &train, valid.as_deref(), &test, &out)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Writes `train.jsonl`, `valid.jsonl` and `test.jsonl` under `out`.
/// The splits use seeds `seed`, `seed + 1` and `seed + 2`.
pub fn cmd_synth_data(cfg: &RunConfig, out: &Path) -> anyhow::Result<String> {
    create_dir(out)?;
    let s = &cfg.synth;
    let mut line = String::new();
    for (i, (name, n)) in [("train", s.n_train), ("valid", s.n_valid), ("test", s.n_test)]
        .into_iter()
        .enumerate()
    {
        let corpus = synth_copy_corpus(&cfg.synth_spec(cfg.seed.wrapping_add(i as u64), n))?;
        save_dialogs(out, name, &corpus)?;
        write!(line, "{}{name}={}", if i == 0 { "" } else { " " }, corpus.len()).unwrap();
    }
    Ok(line)
}

/// Vocabulary over the training split.
pub fn vocab_for(train: &[DialogExample], min_count: usize) -> Vocab {
    let streams: Vec<Vec<String>> = train.iter().map(DialogExample::all_tokens).collect();
    Vocab::build(streams.iter().map(Vec::as_slice), min_count)
}

/// Result of [`train_from_examples`].
pub struct TrainedModel {
    pub checkpoint: Checkpoint,
    pub log_tsv: String,
    pub best_epoch: usize,
}

pub fn train_from_examples(
    cfg: &RunConfig,
    train_set: &[DialogExample],
    valid: &[DialogExample],
) -> anyhow::Result<TrainedModel> {
    let vocab = vocab_for(train_set, cfg.data.min_count);
    let model_cfg = cfg.model_config(vocab.len())?;
    let tr = encode_all(train_set, &vocab, &model_cfg.features)?;
    let va = encode_all(valid, &vocab, &model_cfg.features)?;
    let model = Mtn::init(model_cfg, cfg.seed)?;
    let outcome = train(model, &tr, &va, &cfg.train_config(), |_, _| Ok(EpochControl::Continue))?;
    Ok(TrainedModel {
        checkpoint: Checkpoint {
            model: outcome.best,
            vocab,
        },
        log_tsv: log_tsv(&outcome.log),
        best_epoch: outcome.best_epoch,
    })
}

/// Trains on `train` and writes `model.ckpt` and `train_log.tsv` under `out`.
pub fn cmd_train(cfg: &RunConfig, train: &Path, valid: Option<&Path>, out: &Path) -> anyhow::Result<String> {
    let train_set = load_dialogs(train)?;
    let valid_set = match valid {
        Some(v) => load_dialogs(v)?,
        None => Vec::new(),
    };
    create_dir(out)?;
    let trained = train_from_examples(cfg, &train_set, &valid_set)?;
    trained.checkpoint.save(out.join("model.ckpt"))?;
    write_file(&out.join("train_log.tsv"), &trained.log_tsv)?;
    Ok(format!(
        "trained {} examples, best epoch {}, checkpoint {}",
        train_set.len(),
        trained.best_epoch,
        out.join("model.ckpt").display()
    ))
}

/// Decodes every example with the given checkpoints ensembled.
pub fn generate_turns(
    checkpoints: &[Checkpoint],
    examples: &[DialogExample],
    beam: BeamConfig,
) -> anyhow::Result<Vec<GeneratedTurn>> {
    let first = checkpoints.first().context("no checkpoints given")?;
    if checkpoints.iter().any(|c| c.vocab != first.vocab) {
        bail!("ensembled checkpoints must share one vocabulary");
    }
    let features: Vec<Modality> = {
        let mut f: Vec<Modality> = checkpoints.iter().flat_map(|c| c.model.config().features.clone()).collect();
        f.sort();
        f.dedup();
        f
    };
    let models: Vec<&Mtn> = checkpoints.iter().map(|c| &c.model).collect();
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        let enc = crate::data::EncodedExample::new(ex, &first.vocab, &features)?;
        let (text, truncated) = generate(&models, &first.vocab, &enc, beam)?;
        out.push(GeneratedTurn {
            dialog_id: ex.dialog_id.clone(),
            turn: ex.turn,
            text,
            truncated,
        });
    }
    Ok(out)
}

pub fn turns_to_jsonl(turns: &[GeneratedTurn]) -> String {
    let mut s = String::new();
    for t in turns {
        s.push_str(&serde_json::to_string(t).expect("generated turn serializes"));
        s.push('\n');
    }
    s
}

pub fn cmd_generate(cfg: &RunConfig, checkpoints: &[PathBuf], input: &Path, out: &Path) -> anyhow::Result<usize> {
    let cks = checkpoints
        .iter()
        .map(|p| Checkpoint::load(p).map_err(anyhow::Error::from))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let examples = load_dialogs(input)?;
    let turns = generate_turns(&cks, &examples, cfg.beam()?)?;
    write_file(out, turns_to_jsonl(&turns))?;
    Ok(turns.len())
}

/// Pairs generated turns with reference answers by dialog id and turn.
pub fn eval_pairs(turns: &[GeneratedTurn], refs: &[DialogExample]) -> anyhow::Result<Vec<EvalPair>> {
    let mut by_key: std::collections::HashMap<(&str, usize), Vec<Vec<String>>> = Default::default();
    for r in refs {
        by_key
            .entry((r.dialog_id.as_str(), r.turn))
            .or_default()
            .push(tokenize(&r.answer));
    }
    turns
        .iter()
        .map(|t| {
            let refs = by_key
                .get(&(t.dialog_id.as_str(), t.turn))
                .with_context(|| format!("no reference for {} turn {}", t.dialog_id, t.turn))?;
            Ok(EvalPair::new(tokenize(&t.text), refs.clone())?)
        })
        .collect()
}

pub fn read_turns(path: &Path) -> anyhow::Result<Vec<GeneratedTurn>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), n + 1)))
        .collect()
}

pub fn report_json(report: &MetricReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

pub fn cmd_evaluate(hyps: &Path, refs: &Path, out: Option<&Path>) -> anyhow::Result<MetricReport> {
    let turns = read_turns(hyps)?;
    let refs = load_dialogs(refs)?;
    let report = evaluate_corpus(&eval_pairs(&turns, &refs)?)?;
    if let Some(dir) = out {
        create_dir(dir)?;
        write_file(&dir.join("report.txt"), format_table("Model", &[("model".into(), report.clone())]))?;
        write_file(&dir.join("report.json"), report_json(&report))?;
    }
    Ok(report)
}

/// The seven pointer-source variants in table order.
pub fn ablation_variants() -> [(&'static str, Vec<PointerSource>); 7] {
    use PointerSource::{History, Query, Summary};
    [
        ("Summary+Query", vec![Summary, Query]),
        ("History+Query", vec![History, Query]),
        ("Summary+History+Query", vec![Summary, History, Query]),
        ("Summary", vec![Summary]),
        ("Query", vec![Query]),
        ("History", vec![History]),
        ("None", vec![]),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub report: MetricReport,
}

/// Trains every variant from the same seed, decodes `test`, and scores it.
/// Per-variant checkpoints, logs and responses go to `out/<variant>/`.
pub fn ablate_examples(
    cfg: &RunConfig,
    train_set: &[DialogExample],
    valid: &[DialogExample],
    test: &[DialogExample],
    out: &Path,
) -> anyhow::Result<Vec<AblationRow>> {
    create_dir(out)?;
    let mut rows = Vec::new();
    for (name, sources) in ablation_variants() {
        let mut vcfg = cfg.clone();
        vcfg.model.pointer_sources = sources;
        let trained = train_from_examples(&vcfg, train_set, valid)?;
        let turns = generate_turns(std::slice::from_ref(&trained.checkpoint), test, vcfg.beam()?)?;
        let report = evaluate_corpus(&eval_pairs(&turns, test)?)?;
        let dir = out.join(name.to_ascii_lowercase().replace('+', "_"));
        create_dir(&dir)?;
        trained.checkpoint.save(dir.join("model.ckpt"))?;
        write_file(&dir.join("train_log.tsv"), &trained.log_tsv)?;
        write_file(&dir.join("responses.jsonl"), turns_to_jsonl(&turns))?;
        rows.push(AblationRow {
            variant: name.to_string(),
            report,
        });
    }
    let table = ablation_table(&rows);
    write_file(&out.join("ablation.txt"), &table)?;
    let mut json = serde_json::to_string_pretty(&rows)?;
    json.push('\n');
    write_file(&out.join("ablation.json"), json)?;
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let labelled: Vec<(String, MetricReport)> = rows.iter().map(|r| (r.variant.clone(), r.report.clone())).collect();
    format_table("Pointer sources", &labelled)
}

pub fn cmd_ablate(
    cfg: &RunConfig,
    train: &Path,
    valid: Option<&Path>,
    test: &Path,
    out: &Path,
) -> anyhow::Result<String> {
    let train_set = load_dialogs(train)?;
    let valid_set = match valid {
        Some(v) => load_dialogs(v)?,
        None => Vec::new(),
    };
    let test_set = load_dialogs(test)?;
    let rows = ablate_examples(cfg, &train_set, &valid_set, &test_set, out)?;
    Ok(ablation_table(&rows))
}
