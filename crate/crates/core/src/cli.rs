//! Subcommands behind the `ratlab` binary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Meta};
use crate::data::corpus::write_atomic;
use crate::data::{
    audit, encode_records, load_annotated, synth_generate, write_corpus, Encoding, Example, Schema,
    SynthSpec, Vocab, NEGATIVE_THRESHOLD, POSITIVE_THRESHOLD, SENTENCE_DELIMITER,
};
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::eval::{self, decode_layers, layer_similarity, Metrics};
use crate::model::{Model, ModelKind, ModelSpec};
use crate::rnp::{self, RnpConfig};
use crate::tensor::{ParamStore, Real};
use crate::train::{train_classifier_epoch, EpochMetrics, Optimizer, TrainConfig};
use crate::yofo::{self, DecayMode, GateConfig, LengthConfiguration, LossMode};

#[derive(Debug, Parser)]
#[command(
    name = "ratlab",
    version,
    about = "Train and inspect token-skimming rationale models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted-rationale corpus.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
    },
    /// Train a model described by a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the run directory's checkpoint; only `train.epochs` may
        /// differ from the frozen config.
        #[arg(long)]
        resume: bool,
    },
    /// Print the metrics record of a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Map tokens missing from the model vocabulary to [UNK].
        #[arg(long)]
        allow_unknown: bool,
    },
    /// Print per-layer kept tokens for the first examples of a corpus.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        allow_unknown: bool,
    },
    /// Write similarity and retention curves.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        allow_unknown: bool,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train: PathBuf,
    /// Evaluated after every epoch; the training data when absent.
    #[serde(default)]
    pub dev: Option<PathBuf>,
    #[serde(default = "default_delimiters")]
    pub delimiters: Vec<String>,
    #[serde(default = "default_pos")]
    pub positive_threshold: f64,
    #[serde(default = "default_neg")]
    pub negative_threshold: f64,
}

fn default_delimiters() -> Vec<String> {
    vec![SENTENCE_DELIMITER.to_string()]
}

fn default_pos() -> f64 {
    POSITIVE_THRESHOLD
}

fn default_neg() -> f64 {
    NEGATIVE_THRESHOLD
}

/// Architecture without the vocabulary size, which comes from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSection {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_dropout() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthSection {
    /// Defaults to `round(9 N / 12)`.
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub d: usize,
    pub s: f64,
    #[serde(default = "default_mode")]
    pub mode: DecayMode,
}

fn default_mode() -> DecayMode {
    DecayMode::Cliff
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub kind: ModelKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub model: ArchSection,
    pub length: LengthSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub gate: GateConfig,
    #[serde(default)]
    pub rnp: RnpConfig,
    /// Skewing factor `k` of the pretraining rule `(#samples / 500) * k`;
    /// 0 disables skewing.
    #[serde(default)]
    pub skew_k: usize,
    /// Whether every epoch ends with an evaluation pass.
    #[serde(default = "default_true")]
    pub eval_each_epoch: bool,
}

fn default_true() -> bool {
    true
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks everything that does not need the data, and folds the kind
    /// into the loss mode.
    pub fn resolve(mut self) -> Result<Self> {
        match (self.kind.loss_mode(), self.train.loss_mode) {
            (Some(LossMode::Layerwise), LossMode::FinalLayer) => {
                return Err(Error::Config(
                    "kind `yofo` trains the layerwise loss; use kind `yofo_final`".into(),
                ));
            }
            (Some(mode), _) => self.train.loss_mode = mode,
            (None, _) => {}
        }
        self.train.seed = self.seed;
        self.train.validate().map_err(config_error)?;
        if self.skew_k > 0 && matches!(self.kind, ModelKind::Plain) {
            return Err(Error::Config(
                "skewing needs a model with a selection stage".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.length.s) {
            return Err(Error::Config(format!(
                "length target s = {} outside [0, 1]",
                self.length.s
            )));
        }
        if matches!(self.kind, ModelKind::Rnp | ModelKind::RnpShared) && self.rnp.target.is_none() {
            self.rnp.target = Some(self.length.s);
        }
        self.length_configuration()?;
        Ok(self)
    }

    pub fn length_configuration(&self) -> Result<LengthConfiguration> {
        let n = self.model.layers;
        let l = &self.length;
        let k = l.k.unwrap_or(((9 * n) as f64 / 12.0).round() as usize);
        yofo::make_length_config(k, l.d, l.s, l.mode, n).map_err(config_error)
    }

    pub fn model_spec(&self, vocab_size: usize) -> ModelSpec {
        let a = &self.model;
        ModelSpec {
            kind: self.kind,
            model: ModelConfig {
                layers: a.layers,
                heads: a.heads,
                d_model: a.d_model,
                d_ff: a.d_ff,
                vocab_size,
                max_len: a.max_len,
                dropout: a.dropout,
            },
            gate: self.gate.clone(),
            rnp: RnpConfig {
                shared: self.kind == ModelKind::RnpShared,
                ..self.rnp.clone()
            },
        }
    }
}

fn config_error(e: Error) -> Error {
    match e {
        Error::Parameter(m) => Error::Config(m),
        other => other,
    }
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    #[serde(flatten)]
    pub train: EpochMetrics,
    /// `"dev"` or `"train"`: the split the rationale metrics were computed on.
    pub split: String,
    #[serde(flatten)]
    pub eval: Option<Metrics>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FROZEN_CONFIG_FILE: &str = "config.frozen.toml";

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn cmd_synth(spec_path: &Path, out: &Path, n: usize) -> Result<String> {
    let spec = SynthSpec::from_toml(&read_text(spec_path)?)?;
    let records = synth_generate(&spec, n)?;
    write_corpus(out, &records)?;
    let a = audit(&records);
    serde_json::to_string(&serde_json::json!({
        "examples": a.examples,
        "out_of_span_cues": a.out_of_span_cues,
        "contradicting_cues": a.contradicting_cues,
        "distractors": a.distractors,
        "distractors_in_span": a.distractors_in_span,
        "distractors_agreeing": a.distractors_agreeing,
        "distractor_agreement_rate": a.agreement_rate(),
        "rho": spec.rho,
    }))
    .map_err(|e| Error::Data(e.to_string()))
}

struct Corpus {
    vocab: Vocab,
    train: Vec<Example>,
    dev: Option<Vec<Example>>,
    delimiters: Vec<usize>,
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let schema = Schema {
        pos_thresh: cfg.data.positive_threshold,
        neg_thresh: cfg.data.negative_threshold,
    };
    let mut vocab = Vocab::new();
    for d in &cfg.data.delimiters {
        vocab.insert(d);
    }
    let train = encode_records(
        &load_annotated(&cfg.data.train, &schema)?,
        &mut vocab,
        Encoding::Grow,
    )?;
    let dev = match &cfg.data.dev {
        Some(p) => Some(encode_records(
            &load_annotated(p, &schema)?,
            &mut vocab,
            Encoding::Grow,
        )?),
        None => None,
    };
    let limit = cfg.model.max_len;
    for (i, ex) in train.iter().chain(dev.iter().flatten()).enumerate() {
        if ex.tokens.len() + 1 > limit {
            return Err(Error::Data(format!(
                "example {} has {} tokens; max_len {} leaves room for {}",
                i + 1,
                ex.tokens.len(),
                limit,
                limit.saturating_sub(1)
            )));
        }
    }
    let delimiters = vocab.delimiter_ids(&cfg.data.delimiters);
    Ok(Corpus {
        vocab,
        train,
        dev,
        delimiters,
    })
}

/// Trains per `config_path`, writing the frozen config, a checkpoint after
/// every epoch and one metrics record per epoch into the run directory.
/// Returns the run directory.
pub fn cmd_train(
    config_path: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
    resume: bool,
) -> Result<PathBuf> {
    let mut cfg = RunConfig::from_toml(&read_text(config_path)?)?;
    if let Some(o) = out {
        cfg.out_dir = o.to_path_buf();
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let cfg = cfg.resolve()?;
    let corpus = load_corpus(&cfg)?;
    let spec = cfg.model_spec(corpus.vocab.len());
    spec.model.validate().map_err(config_error)?;
    match cfg.precision {
        Precision::F64 => train_run::<f64>(&cfg, &spec, &corpus, resume)?,
        Precision::F32 => train_run::<f32>(&cfg, &spec, &corpus, resume)?,
    }
    Ok(cfg.out_dir)
}

fn frozen_text(cfg: &RunConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))
}

fn train_run<T: Real>(
    cfg: &RunConfig,
    spec: &ModelSpec,
    corpus: &Corpus,
    resume: bool,
) -> Result<()> {
    let dir = &cfg.out_dir;
    let frozen = frozen_text(cfg)?;
    let ck_path = dir.join(CHECKPOINT_FILE);
    let metrics_path = dir.join(METRICS_FILE);
    let frozen_path = dir.join(FROZEN_CONFIG_FILE);
    let length = cfg.length_configuration()?;

    let mut store = ParamStore::<T>::new();
    let model = Model::build(spec, &mut store, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let mut opt = Optimizer::new(cfg.train.adamw(), &store);
    let (mut epoch, mut step, mut lines) = (0usize, 0u64, Vec::new());

    if resume {
        let mut previous = RunConfig::from_toml(&read_text(&frozen_path)?)?;
        previous.train.epochs = cfg.train.epochs;
        if previous != *cfg {
            return Err(Error::Config(format!(
                "{} differs from the requested config in more than the epoch count",
                frozen_path.display()
            )));
        }
        write_atomic(&frozen_path, frozen.as_bytes())?;
        let ck = checkpoint::load::<T>(&ck_path)?;
        ck.model()?;
        if ck.header.spec != *spec || ck.vocab()? != corpus.vocab {
            return Err(Error::Checkpoint(
                "checkpoint does not belong to this run".into(),
            ));
        }
        store = ck.store;
        if let Some(adam) = ck.optimizer {
            opt.adam = adam;
        }
        epoch = ck.header.epoch;
        step = ck.header.step;
        if metrics_path.exists() {
            for line in read_text(&metrics_path)?
                .lines()
                .filter(|l| !l.trim().is_empty())
            {
                let rec: MetricsRecord = serde_json::from_str(line)
                    .map_err(|e| Error::Data(format!("{}: {e}", metrics_path.display())))?;
                if rec.train.epoch < epoch {
                    lines.push(line.to_string());
                }
            }
        }
    } else {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&frozen_path, frozen.as_bytes())?;
        if cfg.skew_k > 0 {
            let steps = yofo::train::skew_steps(corpus.train.len(), cfg.skew_k);
            step += match &model {
                Model::Yofo(m) => yofo::train::skew_pretrain(
                    m,
                    &mut store,
                    &corpus.train,
                    steps,
                    &cfg.train,
                    &corpus.delimiters,
                )?,
                Model::Rnp(m) => rnp::skew_pretrain(
                    m,
                    &mut store,
                    &corpus.train,
                    steps,
                    &cfg.train,
                    &corpus.delimiters,
                )?,
                Model::Plain(_) => 0,
            };
        }
        write_atomic(&metrics_path, b"")?;
    }

    let meta = |epoch: usize, step: u64| Meta {
        spec,
        length: &length,
        train: &cfg.train,
        vocab: &corpus.vocab,
        epoch,
        step,
    };
    checkpoint::save(&ck_path, &meta(epoch, step), &store, Some(&opt.adam))?;

    let (eval_data, split) = match &corpus.dev {
        Some(d) => (d.as_slice(), "dev"),
        None => (corpus.train.as_slice(), "train"),
    };
    while epoch < cfg.train.epochs {
        let m = match &model {
            Model::Yofo(y) => yofo::train::train_epoch(
                y,
                &mut store,
                &mut opt,
                &corpus.train,
                &cfg.train,
                &length,
                epoch,
                &mut step,
            )?,
            Model::Rnp(r) => rnp::train_rnp_epoch(
                r,
                &mut store,
                &mut opt,
                &corpus.train,
                &cfg.train,
                epoch,
                &mut step,
            )?,
            Model::Plain(c) => train_classifier_epoch(
                c,
                &mut store,
                &mut opt,
                &corpus.train,
                &cfg.train,
                epoch,
                &mut step,
            )?,
        };
        let eval = if cfg.eval_each_epoch {
            Some(eval::evaluate(eval_data, |t| model.infer(&store, t))?.0)
        } else {
            None
        };
        let record = MetricsRecord {
            train: m,
            split: split.to_string(),
            eval,
        };
        lines.push(serde_json::to_string(&record).map_err(|e| Error::Data(e.to_string()))?);
        epoch += 1;
        checkpoint::save(&ck_path, &meta(epoch, step), &store, Some(&opt.adam))?;
        let mut text = lines.join("\n");
        text.push('\n');
        write_atomic(&metrics_path, text.as_bytes())?;
    }
    Ok(())
}

struct Loaded {
    model: Model,
    store: ParamStore<f64>,
    vocab: Vocab,
    data: Vec<Example>,
}

fn load_for_eval(checkpoint_path: &Path, data: &Path, allow_unknown: bool) -> Result<Loaded> {
    let ck = checkpoint::load::<f64>(checkpoint_path)?;
    let model = ck.model()?;
    let mut vocab = ck.vocab()?;
    let mode = if allow_unknown {
        Encoding::Unknown
    } else {
        Encoding::Strict
    };
    let records = load_annotated(data, &Schema::default())?;
    let data = encode_records(&records, &mut vocab, mode)?;
    let limit = ck.header.spec.model.max_len;
    if let Some((i, ex)) = data
        .iter()
        .enumerate()
        .find(|(_, e)| e.tokens.len() + 1 > limit)
    {
        return Err(Error::Data(format!(
            "example {} has {} tokens, beyond the model's max_len {limit}",
            i + 1,
            ex.tokens.len()
        )));
    }
    Ok(Loaded {
        model,
        store: ck.store,
        vocab,
        data,
    })
}

pub fn cmd_eval(checkpoint_path: &Path, data: &Path, allow_unknown: bool) -> Result<String> {
    let l = load_for_eval(checkpoint_path, data, allow_unknown)?;
    let (m, _) = eval::evaluate(&l.data, |t| l.model.infer(&l.store, t))?;
    serde_json::to_string(&m).map_err(|e| Error::Data(e.to_string()))
}

pub fn cmd_decode(
    checkpoint_path: &Path,
    data: &Path,
    k: usize,
    allow_unknown: bool,
) -> Result<String> {
    let l = load_for_eval(checkpoint_path, data, allow_unknown)?;
    let mut out = String::new();
    for (i, ex) in l.data.iter().take(k).enumerate() {
        let r = l.model.infer(&l.store, &ex.tokens)?;
        let _ = writeln!(
            out,
            "example {}  label {}  prediction {}",
            i + 1,
            ex.label,
            r.prediction
        );
        let _ = writeln!(out, "  text: {}", l.vocab.decode(&ex.tokens).join(" "));
        if let Some(gold) = &ex.gold_rationale {
            let g: Vec<usize> = gold.indices().into_iter().map(|j| ex.tokens[j]).collect();
            let _ = writeln!(out, "  gold: {}", l.vocab.decode(&g).join(" "));
        }
        for layer in decode_layers(&ex.tokens, &r, &l.vocab)? {
            let tag = if layer.rationale { " (rationale)" } else { "" };
            let _ = writeln!(
                out,
                "  layer {}{tag}: {}",
                layer.layer,
                layer.tokens.join(" ")
            );
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    /// Length N.
    pub intra: Vec<f64>,
    /// Length N; entry `i` compares layer `i + 1` with layer `i`, the
    /// embedding output being layer 0.
    pub inter: Vec<f64>,
    pub layer_retention: Vec<f64>,
    pub layer_f1: Vec<f64>,
}

/// Writes `curves.json` and `curves.csv` into `out` and returns the curves.
pub fn cmd_analyze(
    checkpoint_path: &Path,
    data: &Path,
    out: &Path,
    allow_unknown: bool,
) -> Result<Curves> {
    let l = load_for_eval(checkpoint_path, data, allow_unknown)?;
    let sim = layer_similarity(l.model.classifier(), &l.store, &l.data)?;
    let (m, _) = eval::evaluate(&l.data, |t| l.model.infer(&l.store, t))?;
    let curves = Curves {
        intra: sim.intra,
        inter: sim.inter,
        layer_retention: m.layer_retention,
        layer_f1: m.layer_f1,
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let json = serde_json::to_vec_pretty(&curves).map_err(|e| Error::Data(e.to_string()))?;
    write_atomic(&out.join("curves.json"), &json)?;
    let mut csv = String::from("layer,intra,inter,retention,f1\n");
    for i in 0..curves.intra.len() {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            i + 1,
            curves.intra[i],
            curves.inter[i],
            curves.layer_retention[i],
            curves.layer_f1[i]
        );
    }
    write_atomic(&out.join("curves.csv"), csv.as_bytes())?;
    Ok(curves)
}

/// Runs one parsed command, printing its report to stdout.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out, n } => println!("{}", cmd_synth(&spec, &out, n)?),
        Command::Train {
            config,
            out,
            seed,
            resume,
        } => {
            let dir = cmd_train(&config, out.as_deref(), seed, resume)?;
            println!("{}", dir.display());
        }
        Command::Eval {
            checkpoint,
            data,
            allow_unknown,
        } => println!("{}", cmd_eval(&checkpoint, &data, allow_unknown)?),
        Command::Decode {
            checkpoint,
            data,
            k,
            allow_unknown,
        } => print!("{}", cmd_decode(&checkpoint, &data, k, allow_unknown)?),
        Command::Analyze {
            checkpoint,
            data,
            out,
            allow_unknown,
        } => {
            let c = cmd_analyze(&checkpoint, &data, &out, allow_unknown)?;
            println!(
                "{}",
                serde_json::to_string(&c).map_err(|e| Error::Data(e.to_string()))?
            );
        }
    }
    Ok(())
}
