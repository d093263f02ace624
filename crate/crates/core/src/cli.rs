//! The batch command-line pipeline.
//!
//! Every subcommand is a pure function of its input files and flags and
//! returns a [`Report`]: a human-readable table (percentages to 2
//! decimals) followed by `key=value` lines at full precision.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::dataio::{
    load_attributes, load_definitions, load_embeddings, load_model, load_split, read_feature_file,
    save_model, synth_generate, write_attributes, write_definitions, write_embeddings,
    write_feature_file, write_split, FeatureSet, SavedModel, SynthConfig,
};
use crate::error::{Error, Result};
use crate::gradcheck::{run_gradchecks, GradcheckConfig, DEFAULT_TOLERANCE};
use crate::numkernel::AdamConfig;
use crate::schema::{
    attribute_accuracy, build_schema, encode_lookup, majority_baseline, AccuracyReport,
    AttributeSchema, EffectsScope, VerbLabels,
};
use crate::textattr::{
    pretrain_definition_encoder, train_attr_model, AttrModel, EncoderKind, PretrainConfig,
    TextInputs, TrainConfig,
};
use crate::zeroshot::{
    dap_train, devise_train, eszl_select, eszl_solve, evaluate, train_zeroshot, BaselineConfig,
    CandidateSet, ConstantScorer, HeadKind, ProductEnsemble, Scorer, ZeroShotConfig, ZeroShotEval,
    ESZL_GRID,
};

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "verbattr",
    version,
    about = "Verb attributes from text and zero-shot activity classification"
)]
pub struct RunConfig {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Train an attribute model on the training verbs and evaluate it on the test verbs.
    TrainAttributes(TrainAttributesArgs),
    /// Evaluate a saved attribute model on the test verbs.
    EvalAttributes(EvalAttributesArgs),
    /// Pretrain a BGRU definition encoder on (definition, word) pairs.
    PretrainDictionary(PretrainArgs),
    /// Train a zero-shot head (attr, emb, joint) or baseline (dap, eszl, devise).
    TrainZeroshot(TrainZeroshotArgs),
    /// Evaluate a zero-shot model on unseen test classes.
    EvalZeroshot(EvalZeroshotArgs),
    /// Write a seeded synthetic dataset.
    Synth(SynthArgs),
    /// Check every hand-derived gradient against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct CommonArgs {
    /// Attribute schema file; the bundled schema when omitted.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the key-value report to this file.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TextInputArgs {
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub definitions: Option<PathBuf>,
    /// Gold attribute CSV.
    #[arg(long)]
    pub attributes: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    /// Score Effects attributes only where their transitivity holds.
    #[arg(long)]
    pub conditional_effects: bool,
    /// Write predicted attributes for the val and test verbs here.
    #[arg(long)]
    pub pred_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainAttributesArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub inputs: TextInputArgs,
    /// emb, bow, nbow, bgru, or a definition encoder plus `+emb`.
    #[arg(long, default_value = "emb")]
    pub encoder: String,
    /// Pretrained BGRU encoder model file.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub model_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalAttributesArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub inputs: TextInputArgs,
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub definitions: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Restrict the dictionary to the training verbs of this split.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub eps: f64,
    #[arg(long, default_value_t = 300)]
    pub hidden: usize,
    #[arg(long)]
    pub model_out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainZeroshotArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Training feature file; its verb list is the training label set.
    #[arg(long)]
    pub features: PathBuf,
    /// Validation features, used to pick ESZL's γ and λ.
    #[arg(long)]
    pub val_features: Option<PathBuf>,
    /// attr, emb, joint, dap, eszl or devise.
    #[arg(long, default_value = "joint")]
    pub head: String,
    /// Attribute CSV used for class signatures.
    #[arg(long)]
    pub gold_attrs: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub l2: f64,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long = "lambda")]
    pub lambda: Option<f64>,
    /// Divide DAP class scores by attribute priors.
    #[arg(long)]
    pub dap_prior: bool,
    #[arg(long)]
    pub model_out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalZeroshotArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Test feature file; its verb list is the candidate set.
    #[arg(long)]
    pub features: PathBuf,
    /// Saved zero-shot model; omit with `--head constant` for the random baseline.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Only `constant` is meaningful here (a model-free scorer).
    #[arg(long)]
    pub head: Option<String>,
    /// Gold attribute CSV for class signatures.
    #[arg(long)]
    pub gold_attrs: Option<PathBuf>,
    /// Predicted attribute CSV for class signatures.
    #[arg(long)]
    pub pred_attrs: Option<PathBuf>,
    /// Multiply the class distributions obtained with predicted and gold signatures.
    #[arg(long)]
    pub ensemble_product: bool,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub topk: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub classes: usize,
    #[arg(long, default_value_t = 8)]
    pub test_classes: usize,
    #[arg(long, default_value_t = 0)]
    pub val_classes: usize,
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long, default_value_t = 64)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 48)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Allow repeated class signatures.
    #[arg(long)]
    pub allow_duplicates: bool,
    #[arg(long, default_value_t = 4)]
    pub max_definitions: usize,
    #[arg(long, default_value_t = 0.6)]
    pub definition_signal: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    /// Test hook: corrupt the analytic gradient of `encoder/head`.
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

/// A report: a human table plus ordered key-value pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub table: String,
    pub values: Vec<(String, String)>,
}

impl Report {
    fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.values.push((key.into(), value.to_string()));
    }

    pub fn key_values(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{}={}\n", k, v))
            .collect()
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        format!("{}\n{}", self.table, self.key_values())
    }
}

/// The result of one subcommand; `ok` is false when a check failed.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub report: Report,
    pub ok: bool,
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn config_hash<T: Serialize>(args: &T) -> String {
    let json = serde_json::to_string(args).expect("serializable args");
    let digest = Sha256::digest(json.as_bytes());
    digest[..8].iter().map(|b| format!("{:02x}", b)).collect()
}

/// Hash of the hyperparameters only; paths are left out so that the same
/// run in another directory reports the same hash.
fn hyper_hash(value: &serde_json::Value) -> String {
    fn strip(v: &serde_json::Value) -> serde_json::Value {
        match v {
            serde_json::Value::Object(m) => serde_json::Value::Object(
                m.iter()
                    .filter(|(_, v)| !v.is_string() || !looks_like_path(v.as_str().unwrap_or("")))
                    .map(|(k, v)| (k.clone(), strip(v)))
                    .collect(),
            ),
            other => other.clone(),
        }
    }
    fn looks_like_path(s: &str) -> bool {
        s.contains('/') || s.contains('\\') || s.contains('.')
    }
    config_hash(&strip(value))
}

fn load_schema(common: &CommonArgs) -> Result<AttributeSchema> {
    match &common.schema {
        Some(p) => AttributeSchema::from_file(p),
        None => Ok(build_schema()),
    }
}

fn metadata<T: Serialize>(report: &mut Report, command: &str, common: &CommonArgs, args: &T) {
    report.push("command", command);
    report.push("seed", common.seed);
    let value = serde_json::to_value(args).expect("serializable args");
    report.push("config_hash", hyper_hash(&value));
}

fn accuracy_table(schema: &AttributeSchema, rows: &[(&str, &AccuracyReport)]) -> String {
    let mut header = vec!["model".to_string()];
    header.extend(schema.groups().iter().cloned());
    header.push("acc-macro".into());
    header.push("acc-micro".into());
    let mut lines = vec![header];
    for (name, r) in rows {
        let mut line = vec![name.to_string()];
        line.extend(r.per_group.iter().map(|&a| pct(a)));
        line.push(pct(r.macro_avg));
        line.push(pct(r.micro_avg));
        lines.push(line);
    }
    format_table(&lines)
}

fn format_table(lines: &[Vec<String>]) -> String {
    let n = lines.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..n)
        .map(|c| {
            lines
                .iter()
                .filter_map(|l| l.get(c))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for (i, l) in lines.iter().enumerate() {
        let cells: Vec<String> = l
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if c == 0 {
                    format!("{:<w$}", s, w = widths[c])
                } else {
                    format!("{:>w$}", s, w = widths[c])
                }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            let total: usize = widths.iter().sum::<usize>() + 2 * (n.saturating_sub(1));
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}

fn push_accuracy(report: &mut Report, prefix: &str, r: &AccuracyReport) {
    for (name, a) in r.attribute_names.iter().zip(&r.per_attribute) {
        report.push(format!("{prefix}.attr.{name}"), a);
    }
    for (name, a) in r.group_names.iter().zip(&r.per_group) {
        report.push(format!("{prefix}.group.{name}"), a);
    }
    report.push(format!("{prefix}.macro"), r.macro_avg);
    report.push(format!("{prefix}.micro"), r.micro_avg);
}

struct TextData {
    gold: VerbLabels,
    split: crate::dataio::Split,
    embeddings: Option<crate::textattr::EmbeddingTable>,
    definitions: Option<crate::textattr::DefinitionCorpus>,
}

fn load_text_data(a: &TextInputArgs, schema: &AttributeSchema) -> Result<TextData> {
    let gold = load_attributes(&a.attributes, schema)?;
    let universe: BTreeSet<String> = gold.keys().cloned().collect();
    let split = load_split(&a.split, Some(&universe))?;
    if split.train.is_empty() || split.test.is_empty() {
        return Err(Error::Config("split needs training and test verbs".into()));
    }
    let embeddings = a
        .embeddings
        .as_deref()
        .map(|p| load_embeddings(p, None))
        .transpose()?;
    let definitions = a.definitions.as_deref().map(load_definitions).transpose()?;
    Ok(TextData {
        gold,
        split,
        embeddings,
        definitions,
    })
}

fn subset(labels: &VerbLabels, verbs: &[String]) -> Result<VerbLabels> {
    verbs
        .iter()
        .map(|v| {
            labels
                .get(v)
                .map(|l| (v.clone(), l.clone()))
                .ok_or_else(|| Error::MissingLabels(v.clone()))
        })
        .collect()
}

fn attribute_report(
    model: &AttrModel,
    data: &TextData,
    a: &TextInputArgs,
    schema: &AttributeSchema,
    report: &mut Report,
) -> Result<()> {
    let inputs = TextInputs {
        embeddings: data.embeddings.as_ref(),
        definitions: data.definitions.as_ref(),
    };
    let scope = if a.conditional_effects {
        EffectsScope::Conditional
    } else {
        EffectsScope::Unconditional
    };
    let test_gold = subset(&data.gold, &data.split.test)?;
    let pred = model.predict_all(&inputs, &data.split.test)?;
    let acc = attribute_accuracy(&pred, &test_gold, schema, scope)?;

    let train_gold = subset(&data.gold, &data.split.train)?;
    let majority = majority_baseline(train_gold.values(), schema)?;
    let maj_pred: VerbLabels = data
        .split
        .test
        .iter()
        .map(|v| (v.clone(), majority.clone()))
        .collect();
    let maj = attribute_accuracy(&maj_pred, &test_gold, schema, scope)?;

    let name = model.kind.to_string();
    report.table = accuracy_table(schema, &[("most frequent class", &maj), (&name, &acc)]);
    report.push("encoder", &name);
    report.push("test_verbs", data.split.test.len());
    push_accuracy(report, "majority", &maj);
    push_accuracy(report, "model", &acc);

    if let Some(out) = &a.pred_out {
        let verbs: Vec<String> = data
            .split
            .val
            .iter()
            .chain(&data.split.test)
            .cloned()
            .collect();
        let all = model.predict_all(&inputs, &verbs)?;
        write_attributes(&all, schema, out)?;
    }
    Ok(())
}

fn cmd_train_attributes(a: &TrainAttributesArgs) -> Result<Outcome> {
    let schema = load_schema(&a.common)?;
    let kind: EncoderKind = a.encoder.parse()?;
    let data = load_text_data(&a.inputs, &schema)?;
    let pretrained = match &a.pretrained {
        Some(p) => match load_model(p, &schema)? {
            SavedModel::Encoder(b) => Some(b),
            other => {
                return Err(Error::Config(format!(
                    "{} holds a {} model, not an encoder",
                    p.display(),
                    other.kind()
                )))
            }
        },
        None => None,
    };
    let mut config = if pretrained.is_some() {
        TrainConfig::finetune()
    } else {
        TrainConfig::default()
    };
    config.seed = a.common.seed;
    if let Some(x) = a.epochs {
        config.epochs = x;
    }
    if let Some(x) = a.batch {
        config.batch_size = x;
    }
    if let Some(x) = a.lr {
        config.adam.lr = x;
    }
    if let Some(x) = a.eps {
        config.adam.eps = x;
    }
    if let Some(x) = a.l2 {
        config.l2 = x;
    }
    if let Some(x) = a.dropout {
        config.dropout = x;
    }
    if let Some(x) = a.hidden {
        config.hidden = x;
    }
    let inputs = TextInputs {
        embeddings: data.embeddings.as_ref(),
        definitions: data.definitions.as_ref(),
    };
    let (model, log) = train_attr_model(
        kind,
        &data.split.train,
        &inputs,
        &data.gold,
        &schema,
        &config,
        pretrained.as_ref(),
    )?;
    let mut report = Report::default();
    metadata(&mut report, "train-attributes", &a.common, a);
    report.push("initial_loss", log.initial_loss);
    if let Some(l) = log.epoch_losses.last() {
        report.push("final_loss", l);
    }
    attribute_report(&model, &data, &a.inputs, &schema, &mut report)?;
    if let Some(out) = &a.model_out {
        save_model(&SavedModel::Attributes(model), &schema, out)?;
    }
    Ok(Outcome { report, ok: true })
}

fn cmd_eval_attributes(a: &EvalAttributesArgs) -> Result<Outcome> {
    let schema = load_schema(&a.common)?;
    let model = match load_model(&a.model, &schema)? {
        SavedModel::Attributes(m) => m,
        other => {
            return Err(Error::Config(format!(
                "{} holds a {} model, not an attribute model",
                a.model.display(),
                other.kind()
            )))
        }
    };
    model.check_schema(&schema)?;
    let data = load_text_data(&a.inputs, &schema)?;
    let mut report = Report::default();
    metadata(&mut report, "eval-attributes", &a.common, a);
    attribute_report(&model, &data, &a.inputs, &schema, &mut report)?;
    Ok(Outcome { report, ok: true })
}

fn cmd_pretrain(a: &PretrainArgs) -> Result<Outcome> {
    let schema = load_schema(&a.common)?;
    let corpus = load_definitions(&a.definitions)?;
    let table = load_embeddings(&a.embeddings, None)?;
    let allowed: Option<BTreeSet<String>> = a
        .split
        .as_deref()
        .map(|p| load_split(p, None).map(|s| s.train.into_iter().collect()))
        .transpose()?;
    let mut pairs = Vec::new();
    let mut skipped = 0usize;
    for (verb, defs) in corpus.iter() {
        if allowed.as_ref().is_some_and(|s| !s.contains(verb)) {
            continue;
        }
        if !table.contains(verb) {
            skipped += defs.len();
            continue;
        }
        for d in defs {
            pairs.push((d.clone(), verb.to_string()));
        }
    }
    if skipped > 0 {
        log::warn!(
            "{} definitions skipped: defined word has no embedding",
            skipped
        );
    }
    let config = PretrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        adam: AdamConfig {
            lr: a.lr,
            eps: a.eps,
            ..AdamConfig::default()
        },
        seed: a.common.seed,
        hidden: a.hidden,
        ..PretrainConfig::default()
    };
    let (encoder, losses) = pretrain_definition_encoder(&pairs, &table, &config)?;
    save_model(&SavedModel::Encoder(encoder), &schema, &a.model_out)?;

    let mut report = Report::default();
    metadata(&mut report, "pretrain-dictionary", &a.common, a);
    report.push("pairs", pairs.len());
    report.push("skipped", skipped);
    let mut lines = vec![vec!["epoch".to_string(), "ranking loss".to_string()]];
    for (i, l) in losses.iter().enumerate() {
        lines.push(vec![(i + 1).to_string(), format!("{:.4}", l)]);
        report.push(format!("loss.{}", i + 1), l);
    }
    report.table = format_table(&lines);
    Ok(Outcome { report, ok: true })
}

fn signature_source(path: Option<&Path>, schema: &AttributeSchema) -> Result<Option<VerbLabels>> {
    path.map(|p| load_attributes(p, schema)).transpose()
}

fn candidates(
    verbs: &[String],
    labels: Option<&VerbLabels>,
    schema: &AttributeSchema,
    embeddings: Option<&crate::textattr::EmbeddingTable>,
) -> Result<CandidateSet> {
    let lookup = labels
        .map(|l| encode_lookup(verbs, l, schema))
        .transpose()?;
    CandidateSet::new(verbs, lookup.as_ref(), embeddings)
}

fn cmd_train_zeroshot(a: &TrainZeroshotArgs) -> Result<Outcome> {
    let schema = load_schema(&a.common)?;
    let train = read_feature_file(&a.features)?;
    let gold = signature_source(a.gold_attrs.as_deref(), &schema)?;
    let table = a
        .embeddings
        .as_deref()
        .map(|p| load_embeddings(p, None))
        .transpose()?;
    let adam = AdamConfig {
        lr: a.lr,
        eps: a.eps,
        ..AdamConfig::default()
    };
    let need_attrs = matches!(a.head.as_str(), "attr" | "joint" | "dap" | "eszl");
    let need_emb = matches!(a.head.as_str(), "emb" | "joint" | "devise");
    if need_attrs && gold.is_none() {
        return Err(Error::Config(format!(
            "head `{}` needs --gold-attrs",
            a.head
        )));
    }
    if need_emb && table.is_none() {
        return Err(Error::Config(format!(
            "head `{}` needs --embeddings",
            a.head
        )));
    }
    let cands = candidates(
        &train.verbs,
        gold.as_ref().filter(|_| need_attrs),
        &schema,
        table.as_ref().filter(|_| need_emb),
    )?;
    let baseline = BaselineConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        adam,
        l2: a.l2,
        seed: a.common.seed,
    };
    let mut report = Report::default();
    metadata(&mut report, "train-zeroshot", &a.common, a);
    report.push("head", &a.head);
    report.push("train_items", train.len());
    report.push("train_classes", train.verbs.len());
    let (model, losses): (SavedModel, Vec<f64>) = match a.head.as_str() {
        "attr" | "emb" | "joint" => {
            let config = ZeroShotConfig {
                kind: a.head.parse::<HeadKind>()?,
                epochs: a.epochs,
                batch_size: a.batch,
                adam,
                l2: a.l2,
                seed: a.common.seed,
            };
            let (head, losses) = train_zeroshot(&train, &cands, &config)?;
            (SavedModel::ZeroShot(head), losses)
        }
        "dap" => {
            let (m, losses) = dap_train(&train, &cands, &baseline, a.dap_prior)?;
            (SavedModel::Dap(m), losses)
        }
        "devise" => {
            let (m, losses) = devise_train(&train, &cands, &baseline)?;
            (SavedModel::Devise(m), losses)
        }
        "eszl" => {
            let m =
                match (a.gamma, a.lambda, &a.val_features) {
                    (Some(g), Some(l), _) => eszl_solve(&train, &cands, g, l)?,
                    (None, None, Some(vp)) => {
                        let val = read_feature_file(vp)?;
                        let vc = candidates(&val.verbs, gold.as_ref(), &schema, None)?;
                        let (m, acc) = eszl_select(&train, &cands, &val, &vc, &ESZL_GRID)?;
                        report.push("val_top1", acc);
                        m
                    }
                    _ => return Err(Error::Config(
                        "eszl needs both --gamma and --lambda, or --val-features for grid search"
                            .into(),
                    )),
                };
            report.push("gamma", m.gamma);
            report.push("lambda", m.lambda);
            (SavedModel::Eszl(m), Vec::new())
        }
        other => return Err(Error::Config(format!("unknown head `{}`", other))),
    };
    let mut lines = vec![vec!["epoch".to_string(), "loss".to_string()]];
    for (i, l) in losses.iter().enumerate() {
        lines.push(vec![(i + 1).to_string(), format!("{:.4}", l)]);
        report.push(format!("loss.{}", i + 1), l);
    }
    if let SavedModel::Eszl(m) = &model {
        lines = vec![
            vec!["gamma".to_string(), "lambda".to_string()],
            vec![format!("{:e}", m.gamma), format!("{:e}", m.lambda)],
        ];
    }
    report.table = format_table(&lines);
    save_model(&model, &schema, &a.model_out)?;
    Ok(Outcome { report, ok: true })
}

fn saved_scorer(model: &SavedModel) -> Result<&dyn Scorer> {
    Ok(match model {
        SavedModel::ZeroShot(h) => h,
        SavedModel::Dap(m) => m,
        SavedModel::Eszl(m) => m,
        SavedModel::Devise(m) => m,
        other => {
            return Err(Error::Config(format!(
                "a {} model cannot score images",
                other.kind()
            )))
        }
    })
}

fn zeroshot_table(name: &str, k: usize, e: &ZeroShotEval) -> String {
    let lines = vec![
        vec![
            "model".to_string(),
            "top-1".to_string(),
            format!("top-{}", k),
        ],
        vec![name.to_string(), pct(e.topk[0].1), pct(e.topk[1].1)],
    ];
    format_table(&lines)
}

fn cmd_eval_zeroshot(a: &EvalZeroshotArgs) -> Result<Outcome> {
    let schema = load_schema(&a.common)?;
    let test = read_feature_file(&a.features)?;
    if a.topk == 0 || a.topk > test.verbs.len() {
        return Err(Error::Config(format!(
            "--topk {} with {} candidates",
            a.topk,
            test.verbs.len()
        )));
    }
    let gold = signature_source(a.gold_attrs.as_deref(), &schema)?;
    let pred = signature_source(a.pred_attrs.as_deref(), &schema)?;
    let table = a
        .embeddings
        .as_deref()
        .map(|p| load_embeddings(p, None))
        .transpose()?;
    let model = a
        .model
        .as_deref()
        .map(|p| load_model(p, &schema))
        .transpose()?;
    let ks = [1, a.topk];

    let (name, eval) = match (&model, a.head.as_deref()) {
        (None, Some("constant")) => {
            let cands = CandidateSet::from_parts(test.verbs.clone(), None, None)?;
            (
                "random".to_string(),
                evaluate(&ConstantScorer, &test, &cands, &ks)?,
            )
        }
        (None, _) => {
            return Err(Error::Config(
                "--model is required unless --head constant".into(),
            ))
        }
        (Some(m), _) => {
            let scorer = saved_scorer(m)?;
            let uses_attrs = match m {
                SavedModel::ZeroShot(h) => h.kind.uses_attributes(),
                SavedModel::Dap(_) | SavedModel::Eszl(_) => true,
                _ => false,
            };
            let emb = table.as_ref();
            if a.ensemble_product {
                let (Some(g), Some(p)) = (&gold, &pred) else {
                    return Err(Error::Config(
                        "--ensemble-product needs --gold-attrs and --pred-attrs".into(),
                    ));
                };
                let cg = candidates(&test.verbs, Some(g), &schema, emb)?;
                let cp = candidates(&test.verbs, Some(p), &schema, emb)?;
                let ens = ProductEnsemble {
                    sources: vec![(scorer, &cp), (scorer, &cg)],
                };
                (
                    "atts(P)*atts(G)".to_string(),
                    evaluate(&ens, &test, &cg, &ks)?,
                )
            } else {
                let (labels, tag) = match (&pred, &gold) {
                    (Some(p), _) => (Some(p), "P"),
                    (None, Some(g)) => (Some(g), "G"),
                    (None, None) if uses_attrs => {
                        return Err(Error::Config(
                            "attribute-based model needs --gold-attrs or --pred-attrs".into(),
                        ))
                    }
                    (None, None) => (None, ""),
                };
                let cands = candidates(&test.verbs, labels.filter(|_| uses_attrs), &schema, emb)?;
                let base = match m {
                    SavedModel::ZeroShot(h) => h.kind.to_string(),
                    other => other.kind().to_string(),
                };
                let name = if uses_attrs {
                    format!("{}:atts({})", base, tag)
                } else {
                    base
                };
                (name, evaluate(scorer, &test, &cands, &ks)?)
            }
        }
    };
    let mut report = Report::default();
    metadata(&mut report, "eval-zeroshot", &a.common, a);
    report.table = zeroshot_table(&name, a.topk, &eval);
    report.push("model", &name);
    report.push("candidates", test.verbs.len());
    report.push("test_items", test.len());
    report.push("top1", eval.topk[0].1);
    report.push(format!("top{}", a.topk), eval.topk[1].1);
    report.push("hubness.top_share", eval.hubness.top_share);
    report.push("hubness.skewness", eval.hubness.skewness);
    for (v, c) in test.verbs.iter().zip(&eval.hubness.counts) {
        report.push(format!("hubness.count.{}", v), c);
    }
    Ok(Outcome { report, ok: true })
}

fn write_features(set: &FeatureSet, path: &Path) -> Result<()> {
    write_feature_file(set, path)
}

fn cmd_synth(a: &SynthArgs) -> Result<Outcome> {
    let schema = load_schema(&a.common)?;
    let cfg = SynthConfig {
        n_classes: a.classes,
        n_test_classes: a.test_classes,
        n_val_classes: a.val_classes,
        instances_per_class: a.instances,
        feature_dim: a.feature_dim,
        embed_dim: a.embed_dim,
        noise: a.noise,
        seed: a.common.seed,
        distinct_signatures: !a.allow_duplicates,
        max_definitions: a.max_definitions,
        definition_signal: a.definition_signal,
        ..SynthConfig::default()
    };
    let data = synth_generate(&cfg, &schema)?;
    let dir = &a.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_attributes(&data.labels, &schema, &dir.join("attributes.csv"))?;
    write_definitions(&data.definitions, &dir.join("definitions.tsv"))?;
    write_embeddings(&data.embeddings, &dir.join("embeddings.txt"))?;
    write_split(&data.split, &dir.join("split.txt"))?;
    write_features(&data.train_features, &dir.join("train.feat"))?;
    write_features(&data.val_features, &dir.join("val.feat"))?;
    write_features(&data.test_features, &dir.join("test.feat"))?;

    let mut report = Report::default();
    metadata(&mut report, "synth", &a.common, a);
    let rows = [
        ("train", data.split.train.len(), data.train_features.len()),
        ("val", data.split.val.len(), data.val_features.len()),
        ("test", data.split.test.len(), data.test_features.len()),
    ];
    let mut lines = vec![vec![
        "split".to_string(),
        "classes".to_string(),
        "items".to_string(),
    ]];
    for (name, c, n) in rows {
        lines.push(vec![name.to_string(), c.to_string(), n.to_string()]);
        report.push(format!("{}.classes", name), c);
        report.push(format!("{}.items", name), n);
    }
    report.push("definitions", data.definitions.n_definitions());
    report.push("embeddings", data.embeddings.len());
    report.table = format_table(&lines);
    Ok(Outcome { report, ok: true })
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<Outcome> {
    let rows = run_gradchecks(&GradcheckConfig {
        seed: a.common.seed,
        tolerance: a.tolerance,
        corrupt: a.corrupt.clone(),
    })?;
    let mut report = Report::default();
    metadata(&mut report, "gradcheck", &a.common, a);
    let mut lines = vec![vec![
        "encoder".to_string(),
        "head".to_string(),
        "max rel err".to_string(),
        "status".to_string(),
    ]];
    for r in &rows {
        lines.push(vec![
            r.encoder.clone(),
            r.head.clone(),
            format!("{:.2e}", r.max_rel_error),
            if r.passed { "pass" } else { "FAIL" }.to_string(),
        ]);
        report.push(format!("{}.max_rel_error", r.component()), r.max_rel_error);
        report.push(format!("{}.passed", r.component()), r.passed);
    }
    let ok = rows.iter().all(|r| r.passed);
    report.push("all_passed", ok);
    report.table = format_table(&lines);
    Ok(Outcome { report, ok })
}

fn common(cmd: &Command) -> &CommonArgs {
    match cmd {
        Command::TrainAttributes(a) => &a.common,
        Command::EvalAttributes(a) => &a.common,
        Command::PretrainDictionary(a) => &a.common,
        Command::TrainZeroshot(a) => &a.common,
        Command::EvalZeroshot(a) => &a.common,
        Command::Synth(a) => &a.common,
        Command::Gradcheck(a) => &a.common,
    }
}

/// Runs one subcommand and writes the key-value report file if requested.
pub fn run(config: &RunConfig) -> Result<Outcome> {
    let outcome = match &config.command {
        Command::TrainAttributes(a) => cmd_train_attributes(a),
        Command::EvalAttributes(a) => cmd_eval_attributes(a),
        Command::PretrainDictionary(a) => cmd_pretrain(a),
        Command::TrainZeroshot(a) => cmd_train_zeroshot(a),
        Command::EvalZeroshot(a) => cmd_eval_zeroshot(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }?;
    if let Some(path) = &common(&config.command).report {
        fs::write(path, outcome.report.key_values()).map_err(|e| Error::io(path, e))?;
    }
    Ok(outcome)
}

/// Parses `args`, runs, prints the report, and returns the exit code:
/// 0 on success, 1 when a check failed, 2 on errors.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let config = match RunConfig::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&config) {
        Ok(outcome) => {
            let mut out = String::new();
            let _ = write!(out, "{}", outcome.report.render());
            print!("{}", out);
            if outcome.ok {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {}", e);
            2
        }
    }
}
