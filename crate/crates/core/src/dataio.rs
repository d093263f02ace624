//! File formats, dataset splits, the seeded PRNG, synthetic data, and model
//! files.
//!
//! Formats:
//!
//! * feature file (little-endian): magic `VAFT`, `u32` version = 1, `u32`
//!   item count, `u32` width F, then per item a `u32` label index followed by
//!   F `f32` values. Label indices name verbs listed one per line in the
//!   sibling file `<path>.verbs`.
//! * split file: `[train]`, `[val]`, `[test]` section headers, one verb
//!   template per line.
//! * attribute file: CSV with header `verb,<attr1>,...,<attrK>`; categorical
//!   values are 0-based indices, binary values 0/1.
//! * definition file: TSV `verb_template<TAB>definition text`; row order is
//!   definition rank.
//! * embedding file: `token v1 v2 ... vD` per line.
//! * model file: JSON with `format`, `version` = 1, `schema_fingerprint`,
//!   and the model payload.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Tensor2;
use crate::schema::{binarize, Arity, AttributeSchema, LabelVector, VerbLabels};
use crate::textattr::{tokenize, AttrModel, Bgru, DefinitionCorpus, EmbeddingTable};
use crate::zeroshot::{DapModel, DeviseModel, EszlModel, ZeroShotHead};

pub const FEATURE_MAGIC: &[u8; 4] = b"VAFT";
pub const FEATURE_VERSION: u32 = 1;
pub const MODEL_FORMAT: &str = "verbattr-model";
pub const MODEL_VERSION: u32 = 1;

/// splitmix64 output function, used to derive independent stream seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// xoshiro256** seeded from a `u64` through splitmix64.
#[derive(Clone, Debug)]
pub struct Prng {
    seed: u64,
    inner: Xoshiro256StarStar,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Prng {
            seed,
            inner: Xoshiro256StarStar::seed_from_u64(seed),
        }
    }

    /// An independent stream for worker or purpose `stream`.
    pub fn derive(&self, stream: u64) -> Prng {
        Prng::new(splitmix64(self.seed ^ splitmix64(stream)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` (multiply-shift), `n > 0`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub verbs: Vec<String>,
    pub labels: Vec<usize>,
    pub features: Tensor2,
}

impl FeatureSet {
    pub fn new(verbs: Vec<String>, labels: Vec<usize>, features: Tensor2) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::Shape(format!(
                "{} labels for {} feature rows",
                labels.len(),
                features.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= verbs.len()) {
            return Err(Error::OutOfRange(format!(
                "label {} with {} verbs",
                bad,
                verbs.len()
            )));
        }
        Ok(FeatureSet {
            verbs,
            labels,
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn verb_of(&self, i: usize) -> &str {
        &self.verbs[self.labels[i]]
    }
}

fn verbs_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".verbs");
    PathBuf::from(s)
}

pub fn write_feature_file(set: &FeatureSet, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + set.len() * (4 + 4 * set.width()));
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(set.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(set.width() as u32).to_le_bytes());
    for i in 0..set.len() {
        buf.extend_from_slice(&(set.labels[i] as u32).to_le_bytes());
        for &v in set.feature(i) {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))?;
    let vp = verbs_path(path);
    let mut text = String::new();
    for v in &set.verbs {
        text.push_str(v);
        text.push('\n');
    }
    fs::write(&vp, text).map_err(|e| Error::io(vp, e))
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn read_feature_file(path: &Path) -> Result<FeatureSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::BadMagic { path: path.into() });
    }
    if bytes.len() < 16 {
        return Err(Error::Truncated {
            path: path.into(),
            msg: format!("{}-byte header", bytes.len()),
        });
    }
    let version = read_u32(&bytes, 4);
    if version != FEATURE_VERSION {
        return Err(Error::Version {
            path: path.into(),
            version,
        });
    }
    let n = read_u32(&bytes, 8) as usize;
    let width = read_u32(&bytes, 12) as usize;
    if width == 0 {
        return Err(Error::DimensionMismatch {
            path: path.into(),
            msg: "feature width 0".into(),
        });
    }
    let record = 4 + 4 * width;
    let expected = 16 + n * record;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.into(),
            msg: format!("expected {} bytes, found {}", expected, bytes.len()),
        });
    }
    if bytes.len() > expected {
        return Err(Error::DimensionMismatch {
            path: path.into(),
            msg: format!(
                "{} trailing bytes after {} items of width {}",
                bytes.len() - expected,
                n,
                width
            ),
        });
    }
    let vp = verbs_path(path);
    let verbs: Vec<String> = fs::read_to_string(&vp)
        .map_err(|e| Error::io(&vp, e))?
        .lines()
        .map(|l| l.trim_end_matches('\r').to_string())
        .filter(|l| !l.is_empty())
        .collect();
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * width);
    for i in 0..n {
        let at = 16 + i * record;
        let label = read_u32(&bytes, at) as usize;
        if label >= verbs.len() {
            return Err(Error::DimensionMismatch {
                path: path.into(),
                msg: format!("item {} has label {} but {} verbs", i, label, verbs.len()),
            });
        }
        labels.push(label);
        for j in 0..width {
            let o = at + 4 + 4 * j;
            data.push(f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64);
        }
    }
    FeatureSet::new(verbs, labels, Tensor2::from_vec(n, width, data)?)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn new(train: Vec<String>, val: Vec<String>, test: Vec<String>) -> Result<Self> {
        let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
        for (name, list) in [("train", &train), ("val", &val), ("test", &test)] {
            for v in list {
                if let Some(prev) = seen.insert(v, name) {
                    return Err(Error::Config(format!(
                        "verb `{}` appears in both [{}] and [{}]",
                        v, prev, name
                    )));
                }
            }
        }
        Ok(Split { train, val, test })
    }

    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

pub fn load_split(path: &Path, universe: Option<&BTreeSet<String>>) -> Result<Split> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut sections: [Vec<String>; 3] = Default::default();
    let mut seen: BTreeMap<String, &str> = BTreeMap::new();
    let mut current: Option<usize> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let section = match line {
            "[train]" => Some(0),
            "[val]" => Some(1),
            "[test]" => Some(2),
            _ => None,
        };
        if let Some(s) = section {
            current = Some(s);
            continue;
        }
        let Some(s) = current else {
            return Err(Error::parse(path, i + 1, "verb before any section header"));
        };
        let name = ["train", "val", "test"][s];
        if let Some(u) = universe {
            if !u.contains(line) {
                return Err(Error::parse(
                    path,
                    i + 1,
                    format!("unknown verb `{}`", line),
                ));
            }
        }
        if let Some(prev) = seen.insert(line.to_string(), name) {
            return Err(Error::parse(
                path,
                i + 1,
                format!("verb `{}` already listed in [{}]", line, prev),
            ));
        }
        sections[s].push(line.to_string());
    }
    let [train, val, test] = sections;
    Ok(Split { train, val, test })
}

pub fn write_split(split: &Split, path: &Path) -> Result<()> {
    let mut s = String::new();
    for (name, list) in [
        ("train", &split.train),
        ("val", &split.val),
        ("test", &split.test),
    ] {
        s.push_str(&format!("[{}]\n", name));
        for v in list {
            s.push_str(v);
            s.push('\n');
        }
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn load_attributes(path: &Path, schema: &AttributeSchema) -> Result<VerbLabels> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = VerbLabels::new();
    let mut header_seen = false;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != schema.len() + 1 {
            return Err(Error::parse(
                path,
                line_no,
                format!(
                    "expected {} columns, found {}",
                    schema.len() + 1,
                    cols.len()
                ),
            ));
        }
        if !header_seen {
            header_seen = true;
            let names: Vec<&str> = schema
                .attributes()
                .iter()
                .map(|a| a.name.as_str())
                .collect();
            if cols[0] != "verb" || cols[1..] != names[..] {
                return Err(Error::parse(
                    path,
                    line_no,
                    "header does not match the schema",
                ));
            }
            continue;
        }
        let mut labels = Vec::with_capacity(schema.len());
        for (a, raw) in schema.attributes().iter().zip(&cols[1..]) {
            let v: usize = raw.parse().map_err(|_| {
                Error::parse(
                    path,
                    line_no,
                    format!("non-numeric value `{}` for `{}`", raw, a.name),
                )
            })?;
            if v >= a.arity.n_values() {
                return Err(Error::parse(
                    path,
                    line_no,
                    format!(
                        "value {} for `{}` exceeds arity {}",
                        v,
                        a.name,
                        a.arity.n_values()
                    ),
                ));
            }
            labels.push(v);
        }
        if out
            .insert(cols[0].to_string(), LabelVector(labels))
            .is_some()
        {
            return Err(Error::parse(
                path,
                line_no,
                format!("duplicate verb `{}`", cols[0]),
            ));
        }
    }
    Ok(out)
}

pub fn write_attributes(labels: &VerbLabels, schema: &AttributeSchema, path: &Path) -> Result<()> {
    let mut s = String::from("verb");
    for a in schema.attributes() {
        s.push(',');
        s.push_str(&a.name);
    }
    s.push('\n');
    for (verb, lv) in labels {
        schema.validate(lv)?;
        s.push_str(verb);
        for v in &lv.0 {
            s.push(',');
            s.push_str(&v.to_string());
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn load_definitions(path: &Path) -> Result<DefinitionCorpus> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut corpus = DefinitionCorpus::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let Some((verb, text)) = line.split_once('\t') else {
            return Err(Error::parse(path, i + 1, "expected `verb<TAB>definition`"));
        };
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::parse(path, i + 1, "empty definition"));
        }
        corpus.push(verb.trim(), tokens);
    }
    Ok(corpus)
}

pub fn write_definitions(corpus: &DefinitionCorpus, path: &Path) -> Result<()> {
    let mut s = String::new();
    for (verb, defs) in corpus.iter() {
        for d in defs {
            s.push_str(verb);
            s.push('\t');
            s.push_str(&d.join(" "));
            s.push('\n');
        }
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads a text embedding file. The dimension is taken from the first row
/// unless `expected_dim` is given.
pub fn load_embeddings(path: &Path, expected_dim: Option<usize>) -> Result<EmbeddingTable> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut table: Option<EmbeddingTable> = expected_dim.map(EmbeddingTable::new);
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values: Vec<f64> = parts
            .map(|p| {
                p.parse::<f64>()
                    .map_err(|_| Error::parse(path, line_no, format!("non-numeric value `{}`", p)))
            })
            .collect::<Result<_>>()?;
        let t = table.get_or_insert_with(|| EmbeddingTable::new(values.len()));
        if values.len() != t.dim() || values.is_empty() {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected {} values, found {}", t.dim(), values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(path, line_no, "non-finite value"));
        }
        t.insert(token, &values)
            .map_err(|e| Error::parse(path, line_no, e.to_string()))?;
    }
    table.ok_or_else(|| Error::parse(path, 0, "no embeddings"))
}

pub fn write_embeddings(table: &EmbeddingTable, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (token, v) in table.iter() {
        let mut line = String::from(token);
        for x in v {
            line.push(' ');
            line.push_str(&format!("{}", x));
        }
        writeln!(w, "{}", line).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_classes: usize,
    /// Classes held out as unseen test labels; taken from the end.
    pub n_test_classes: usize,
    pub n_val_classes: usize,
    pub instances_per_class: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub noise: f64,
    pub seed: u64,
    pub distinct_signatures: bool,
    pub max_definitions: usize,
    /// Probability that a definition mentions each attribute's value.
    pub definition_signal: f64,
    pub filler_tokens: usize,
    pub pool_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_classes: 40,
            n_test_classes: 8,
            n_val_classes: 0,
            instances_per_class: 20,
            feature_dim: 64,
            embed_dim: 48,
            noise: 0.0,
            seed: 0,
            distinct_signatures: true,
            max_definitions: 4,
            definition_signal: 0.6,
            filler_tokens: 4,
            pool_size: 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub verbs: Vec<String>,
    pub labels: VerbLabels,
    pub definitions: DefinitionCorpus,
    pub embeddings: EmbeddingTable,
    pub train_features: FeatureSet,
    pub val_features: FeatureSet,
    pub test_features: FeatureSet,
    pub split: Split,
    /// Noise-free class prototype per verb, in `verbs` order.
    pub prototypes: Tensor2,
}

fn random_labels(schema: &AttributeSchema, rng: &mut Prng) -> LabelVector {
    LabelVector(
        schema
            .attributes()
            .iter()
            .map(|a| rng.below(a.arity.n_values()))
            .collect(),
    )
}

fn label_from_index(schema: &AttributeSchema, mut idx: u128) -> LabelVector {
    LabelVector(
        schema
            .attributes()
            .iter()
            .map(|a| {
                let n = a.arity.n_values() as u128;
                let v = idx % n;
                idx /= n;
                v as usize
            })
            .collect(),
    )
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut Prng) -> Tensor2 {
    let data = (0..rows * cols).map(|_| scale * rng.normal()).collect();
    Tensor2::from_vec(rows, cols, data).expect("shape")
}

/// Seeded synthetic verbs, attributes, definitions, embeddings and image
/// features in which every modality carries attribute signal.
pub fn synth_generate(cfg: &SynthConfig, schema: &AttributeSchema) -> Result<SynthData> {
    if cfg.n_classes < 2 {
        return Err(Error::Config("need at least 2 classes".into()));
    }
    if cfg.feature_dim == 0 || cfg.embed_dim == 0 {
        return Err(Error::Config("widths must be at least 1".into()));
    }
    if !(cfg.noise >= 0.0) {
        return Err(Error::Config("noise must be non-negative".into()));
    }
    if cfg.n_test_classes + cfg.n_val_classes >= cfg.n_classes {
        return Err(Error::Config("no training classes left".into()));
    }
    if cfg.distinct_signatures && (cfg.n_classes as u128) > schema.signature_space() {
        return Err(Error::Infeasible(format!(
            "{} distinct signatures requested, only {} exist",
            cfg.n_classes,
            schema.signature_space()
        )));
    }
    let root = Prng::new(cfg.seed);
    let mut sig_rng = root.derive(1);
    let mut proj_rng = root.derive(2);
    let mut feat_rng = root.derive(3);
    let mut emb_rng = root.derive(4);
    let mut text_rng = root.derive(5);

    let width = schema.binarized_width();
    let verbs: Vec<String> = (0..cfg.n_classes)
        .map(|i| format!("verb{:04}", i))
        .collect();

    let space = schema.signature_space();
    let signatures: Vec<LabelVector> =
        if cfg.distinct_signatures && space <= 4 * cfg.n_classes as u128 {
            // small space: shuffle the full enumeration
            let mut all: Vec<u128> = (0..space).collect();
            sig_rng.shuffle(&mut all);
            all[..cfg.n_classes]
                .iter()
                .map(|&i| label_from_index(schema, i))
                .collect()
        } else {
            let mut seen = BTreeSet::new();
            let mut out = Vec::with_capacity(cfg.n_classes);
            while out.len() < cfg.n_classes {
                let lv = random_labels(schema, &mut sig_rng);
                if cfg.distinct_signatures && !seen.insert(lv.clone()) {
                    continue;
                }
                out.push(lv);
            }
            out
        };
    let mut labels = VerbLabels::new();
    for (v, lv) in verbs.iter().zip(&signatures) {
        labels.insert(v.clone(), lv.clone());
    }

    let scale = 1.0 / (width as f64).sqrt();
    let feat_proj = gaussian_matrix(cfg.feature_dim, width, scale, &mut proj_rng);
    let emb_proj = gaussian_matrix(cfg.embed_dim, width, scale, &mut proj_rng);

    let mut prototypes = Tensor2::zeros(cfg.n_classes, cfg.feature_dim);
    let mut embeddings = EmbeddingTable::new(cfg.embed_dim);
    for (c, lv) in signatures.iter().enumerate() {
        let s = binarize(schema, lv)?;
        let proto = feat_proj.view().matvec(&s);
        for (dst, x) in prototypes.row_mut(c).iter_mut().zip(proto) {
            *dst = x as f32 as f64;
        }
        let mut e = emb_proj.view().matvec(&s);
        for x in e.iter_mut() {
            *x += cfg.noise * emb_rng.normal();
        }
        embeddings.insert(&verbs[c], &e)?;
    }

    // token pools: one pool per (attribute, value), embedded along that
    // value's signature column so averaged definitions stay informative
    let offsets = schema.offsets();
    let mut pools: Vec<Vec<Vec<String>>> = Vec::with_capacity(schema.len());
    for (k, a) in schema.attributes().iter().enumerate() {
        let mut per_value = Vec::with_capacity(a.arity.n_values());
        for v in 0..a.arity.n_values() {
            let mut direction = vec![0.0; width];
            match a.arity {
                Arity::Binary => direction[offsets[k]] = if v == 1 { 1.0 } else { -1.0 },
                Arity::Categorical(_) => direction[offsets[k] + v] = 1.0,
            }
            let base = emb_proj.view().matvec(&direction);
            let mut tokens = Vec::with_capacity(cfg.pool_size);
            for j in 0..cfg.pool_size.max(1) {
                let tok = format!("a{}v{}w{}", k, v, j);
                let e: Vec<f64> = base.iter().map(|b| b + 0.1 * emb_rng.normal()).collect();
                embeddings.insert(&tok, &e)?;
                tokens.push(tok);
            }
            per_value.push(tokens);
        }
        pools.push(per_value);
    }
    let n_fillers = 4 * cfg.filler_tokens.max(1);
    let fillers: Vec<String> = (0..n_fillers).map(|j| format!("filler{}", j)).collect();
    for f in &fillers {
        let e: Vec<f64> = (0..cfg.embed_dim)
            .map(|_| emb_rng.normal() * scale)
            .collect();
        embeddings.insert(f, &e)?;
    }

    let mut definitions = DefinitionCorpus::new();
    for (verb, lv) in verbs.iter().zip(&signatures) {
        let n_defs = 1 + text_rng.below(cfg.max_definitions.max(1));
        for _ in 0..n_defs {
            let mut tokens = Vec::new();
            for (k, &v) in lv.0.iter().enumerate() {
                if text_rng.bernoulli(cfg.definition_signal) {
                    let pool = &pools[k][v];
                    tokens.push(pool[text_rng.below(pool.len())].clone());
                }
            }
            for _ in 0..cfg.filler_tokens {
                tokens.push(fillers[text_rng.below(fillers.len())].clone());
            }
            if tokens.is_empty() {
                tokens.push(fillers[text_rng.below(fillers.len())].clone());
            }
            text_rng.shuffle(&mut tokens);
            definitions.push(verb, tokens);
        }
    }

    let n_train = cfg.n_classes - cfg.n_test_classes - cfg.n_val_classes;
    let split = Split::new(
        verbs[..n_train].to_vec(),
        verbs[n_train..n_train + cfg.n_val_classes].to_vec(),
        verbs[n_train + cfg.n_val_classes..].to_vec(),
    )?;
    let mut make_set = |range: std::ops::Range<usize>| -> Result<FeatureSet> {
        let set_verbs = verbs[range.clone()].to_vec();
        let n = range.len() * cfg.instances_per_class;
        let mut data = Vec::with_capacity(n * cfg.feature_dim);
        let mut set_labels = Vec::with_capacity(n);
        for (local, c) in range.enumerate() {
            for _ in 0..cfg.instances_per_class {
                set_labels.push(local);
                for &p in prototypes.row(c) {
                    let x = if cfg.noise == 0.0 {
                        p
                    } else {
                        p + cfg.noise * feat_rng.normal()
                    };
                    // stored at file precision so written sets read back equal
                    data.push(x as f32 as f64);
                }
            }
        }
        FeatureSet::new(
            set_verbs,
            set_labels,
            Tensor2::from_vec(n, cfg.feature_dim, data)?,
        )
    };
    let train_features = make_set(0..n_train)?;
    let val_features = make_set(n_train..n_train + cfg.n_val_classes)?;
    let test_features = make_set(n_train + cfg.n_val_classes..cfg.n_classes)?;

    Ok(SynthData {
        verbs,
        labels,
        definitions,
        embeddings,
        train_features,
        val_features,
        test_features,
        split,
        prototypes,
    })
}

/// Every model kind that can be written to a model file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "params", rename_all = "snake_case")]
pub enum SavedModel {
    Attributes(AttrModel),
    Encoder(Bgru),
    ZeroShot(ZeroShotHead),
    Dap(DapModel),
    Eszl(EszlModel),
    Devise(DeviseModel),
}

impl SavedModel {
    pub fn kind(&self) -> &'static str {
        match self {
            SavedModel::Attributes(_) => "attributes",
            SavedModel::Encoder(_) => "encoder",
            SavedModel::ZeroShot(_) => "zero_shot",
            SavedModel::Dap(_) => "dap",
            SavedModel::Eszl(_) => "eszl",
            SavedModel::Devise(_) => "devise",
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile<M> {
    format: String,
    version: u32,
    schema_fingerprint: String,
    model: M,
}

pub fn save_model(model: &SavedModel, schema: &AttributeSchema, path: &Path) -> Result<()> {
    let file = ModelFile {
        format: MODEL_FORMAT.to_string(),
        version: MODEL_VERSION,
        schema_fingerprint: schema.fingerprint(),
        model,
    };
    let text = serde_json::to_string(&file).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Deserialize)]
struct ModelHeader {
    format: String,
    version: u32,
    schema_fingerprint: String,
}

pub fn load_model(path: &Path, schema: &AttributeSchema) -> Result<SavedModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let json = |e| Error::Json {
        path: path.into(),
        source: e,
    };
    let header: ModelHeader = serde_json::from_str(&text).map_err(json)?;
    if header.format != MODEL_FORMAT {
        return Err(Error::BadMagic { path: path.into() });
    }
    if header.version != MODEL_VERSION {
        return Err(Error::Version {
            path: path.into(),
            version: header.version,
        });
    }
    let expected = schema.fingerprint();
    if header.schema_fingerprint != expected {
        return Err(Error::Fingerprint {
            model: header.schema_fingerprint,
            schema: expected,
        });
    }
    let file: ModelFile<SavedModel> = serde_json::from_str(&text).map_err(json)?;
    Ok(file.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::build_schema;
    use tempfile::tempdir;

    /// Reference splitmix64 + xoshiro256** written from the published
    /// algorithms, independent of the crate-backed `Prng`.
    struct RefXoshiro([u64; 4]);

    impl RefXoshiro {
        fn new(seed: u64) -> Self {
            let mut x = seed;
            let mut s = [0u64; 4];
            for slot in s.iter_mut() {
                x = x.wrapping_add(0x9e3779b97f4a7c15);
                let mut z = x;
                z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
                z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
                *slot = z ^ (z >> 31);
            }
            RefXoshiro(s)
        }

        fn next(&mut self) -> u64 {
            let s = &mut self.0;
            let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
            let t = s[1] << 17;
            s[2] ^= s[0];
            s[3] ^= s[1];
            s[1] ^= s[2];
            s[0] ^= s[3];
            s[2] ^= t;
            s[3] = s[3].rotate_left(45);
            result
        }
    }

    pub(crate) const GOLDEN_SEED_42: [u64; 10] = [
        0x1578_0b2e_0c2e_c716,
        0x6104_d986_6d11_3a7e,
        0xae17_5332_39e4_99a1,
        0xecb8_ad47_03b3_60a1,
        0xfde6_dc7f_e2ec_5e64,
        0xc50d_a531_0179_5238,
        0xb821_5485_5a65_ddb2,
        0xd99a_2743_ebe6_0087,
        0xc2e9_6e72_6e97_647e,
        0x9556_615f_775f_bc3d,
    ];

    #[test]
    fn prng_matches_reference_algorithm() {
        let mut a = Prng::new(42);
        let mut b = RefXoshiro::new(42);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next());
        }
    }

    #[test]
    fn prng_golden_sequence() {
        let mut a = Prng::new(42);
        let got: Vec<u64> = (0..10).map(|_| a.next_u64()).collect();
        assert_eq!(got, GOLDEN_SEED_42);
    }

    #[test]
    fn prng_helpers_in_range() {
        let mut r = Prng::new(7);
        for _ in 0..1000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
            assert!(r.below(3) < 3);
        }
        let mut xs: Vec<u32> = (0..20).collect();
        r.shuffle(&mut xs);
        let mut sorted = xs.clone();
        sorted.sort();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
        assert_ne!(r.derive(1).next_u64(), r.derive(2).next_u64());
    }

    fn toy_set() -> FeatureSet {
        FeatureSet::new(
            vec!["run".into(), "put up".into()],
            vec![1, 0],
            Tensor2::from_vec(2, 3, vec![0.5, -1.25, 3.0, 1e-3, 0.0, -7.5]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn feature_file_round_trip_and_size() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("f.bin");
        let set = toy_set();
        write_feature_file(&set, &p).unwrap();
        assert_eq!(
            fs::metadata(&p).unwrap().len(),
            4 + 4 + 4 + 4 + 2 * (4 + 12)
        );
        let back = read_feature_file(&p).unwrap();
        assert_eq!(back.verbs, set.verbs);
        assert_eq!(back.labels, set.labels);
        for (a, b) in back.features.as_slice().iter().zip(set.features.as_slice()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn feature_file_errors() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("f.bin");
        write_feature_file(&toy_set(), &p).unwrap();
        let bytes = fs::read(&p).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&p, &bad).unwrap();
        let e = read_feature_file(&p).unwrap_err();
        assert!(matches!(e, Error::BadMagic { .. }));
        assert!(e.to_string().contains("bad magic"));

        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            read_feature_file(&p),
            Err(Error::Truncated { .. })
        ));

        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0, 0, 0, 0]);
        fs::write(&p, &extra).unwrap();
        assert!(matches!(
            read_feature_file(&p),
            Err(Error::DimensionMismatch { .. })
        ));

        let mut badlabel = bytes.clone();
        badlabel[16] = 9;
        fs::write(&p, &badlabel).unwrap();
        assert!(matches!(
            read_feature_file(&p),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    fn names(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    #[test]
    fn split_full_scale_counts() {
        let dir = tempdir().unwrap();
        for (tr, va, te) in [(1313, 81, 316), (379, 29, 96)] {
            let split = Split::new(names("a", tr), names("b", va), names("c", te)).unwrap();
            let p = dir.path().join("s.txt");
            write_split(&split, &p).unwrap();
            let universe: BTreeSet<String> = split.all().cloned().collect();
            let back = load_split(&p, Some(&universe)).unwrap();
            assert_eq!(back, split);
            assert_eq!(
                (back.train.len(), back.val.len(), back.test.len()),
                (tr, va, te)
            );
        }
    }

    #[test]
    fn split_rejects_overlap_and_unknown() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("s.txt");
        fs::write(&p, "[train]\nrun\n[val]\nwalk\n[test]\nrun\n").unwrap();
        let e = load_split(&p, None).unwrap_err();
        assert!(e.to_string().contains("run"), "{e}");
        assert!(matches!(e, Error::Parse { line: 6, .. }));
        fs::write(&p, "[train]\nrun\nfly\n").unwrap();
        let universe: BTreeSet<String> = ["run".to_string()].into();
        let e = load_split(&p, Some(&universe)).unwrap_err();
        assert!(e.to_string().contains("fly"));
        assert!(Split::new(names("a", 2), names("a", 1), vec![]).is_err());
    }

    #[test]
    fn attribute_file_errors_name_lines() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.csv");
        let s = build_schema();
        let header = std::iter::once("verb".to_string())
            .chain(s.attributes().iter().map(|a| a.name.clone()))
            .collect::<Vec<_>>()
            .join(",");
        let mut row = vec!["0"; 24];
        row[1] = "7";
        fs::write(&p, format!("{}\nrun,{}\n", header, row.join(","))).unwrap();
        let e = load_attributes(&p, &s).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        assert!(e.to_string().contains("arity"));

        row[1] = "x";
        fs::write(&p, format!("{}\nrun,{}\n", header, row.join(","))).unwrap();
        assert!(load_attributes(&p, &s)
            .unwrap_err()
            .to_string()
            .contains("non-numeric"));

        fs::write(&p, format!("{}\nrun,0,0\n", header)).unwrap();
        assert!(matches!(
            load_attributes(&p, &s),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn embedding_file_errors() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("e.txt");
        fs::write(&p, "run 1 2 3\nwalk 1 2\n").unwrap();
        let e = load_embeddings(&p, None).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        fs::write(&p, "run 1 2 3\n").unwrap();
        assert!(load_embeddings(&p, Some(4)).is_err());
        fs::write(&p, "run 1 2 x\n").unwrap();
        assert!(load_embeddings(&p, None).is_err());
    }

    #[test]
    fn toy_dataset_round_trip() {
        let dir = tempdir().unwrap();
        let s = build_schema();
        let cfg = SynthConfig {
            n_classes: 5,
            n_test_classes: 1,
            n_val_classes: 1,
            instances_per_class: 2,
            feature_dim: 4,
            embed_dim: 3,
            noise: 0.3,
            ..SynthConfig::default()
        };
        let d = synth_generate(&cfg, &s).unwrap();

        let ap = dir.path().join("a.csv");
        write_attributes(&d.labels, &s, &ap).unwrap();
        assert_eq!(load_attributes(&ap, &s).unwrap(), d.labels);

        let dp = dir.path().join("d.tsv");
        write_definitions(&d.definitions, &dp).unwrap();
        assert_eq!(load_definitions(&dp).unwrap(), d.definitions);

        let ep = dir.path().join("e.txt");
        write_embeddings(&d.embeddings, &ep).unwrap();
        let back = load_embeddings(&ep, Some(3)).unwrap();
        assert_eq!(back, d.embeddings);
    }

    #[test]
    fn definitions_file_order_is_rank() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("d.tsv");
        fs::write(
            &p,
            "run\tTo move swiftly, on foot.\nrun\tTo flee\nwalk\tgo on foot\n",
        )
        .unwrap();
        let c = load_definitions(&p).unwrap();
        assert_eq!(
            c.first("run").unwrap(),
            &["to", "move", "swiftly", "on", "foot"]
        );
        assert_eq!(c.definitions("run").unwrap().len(), 2);
        fs::write(&p, "run\t...\n").unwrap();
        assert!(matches!(
            load_definitions(&p),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn synth_zero_noise_features_equal_prototypes() {
        let s = build_schema();
        let d = synth_generate(&SynthConfig::default(), &s).unwrap();
        let n_train = d.split.train.len();
        for i in 0..d.train_features.len() {
            assert_eq!(
                d.train_features.feature(i),
                d.prototypes.row(d.train_features.labels[i])
            );
        }
        for i in 0..d.test_features.len() {
            assert_eq!(
                d.test_features.feature(i),
                d.prototypes.row(n_train + d.test_features.labels[i])
            );
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let s = build_schema();
        let cfg = SynthConfig {
            noise: 0.5,
            seed: 9,
            ..SynthConfig::default()
        };
        let a = synth_generate(&cfg, &s).unwrap();
        let b = synth_generate(&cfg, &s).unwrap();
        assert_eq!(a.train_features, b.train_features);
        assert_eq!(a.test_features, b.test_features);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.definitions, b.definitions);
        assert_eq!(a.embeddings, b.embeddings);
        let c = synth_generate(&SynthConfig { seed: 10, ..cfg }, &s).unwrap();
        assert_ne!(a.train_features, c.train_features);
    }

    #[test]
    fn synth_distinct_signatures_exhaust_small_space() {
        let s =
            AttributeSchema::parse("g\ta\tbinary\ng\tb\tbinary\ng\tc\tbinary\n", Path::new("s"))
                .unwrap();
        let cfg = SynthConfig {
            n_classes: 8,
            n_test_classes: 2,
            ..SynthConfig::default()
        };
        let d = synth_generate(&cfg, &s).unwrap();
        let mut all: BTreeSet<Vec<usize>> = BTreeSet::new();
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    all.insert(vec![a, b, c]);
                }
            }
        }
        let got: BTreeSet<Vec<usize>> = d.labels.values().map(|l| l.0.clone()).collect();
        assert_eq!(got, all);
        let e = synth_generate(
            &SynthConfig {
                n_classes: 9,
                ..cfg
            },
            &s,
        )
        .unwrap_err();
        assert!(matches!(e, Error::Infeasible(_)));
    }
}
