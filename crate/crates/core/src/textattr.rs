//! Predicting verb attributes from text.
//!
//! A verb is encoded from its word embedding, from one of its dictionary
//! definitions, or from both concatenated (definition first). Each attribute
//! then gets a linear head: a sigmoid over one logit for binary attributes,
//! a softmax over `d_k` logits for categorical ones.
//!
//! Definition encoders:
//!
//! * BoW: set-valued indicator over a frequency vocabulary (5000 words)
//! * NBoW: mean of the token embeddings, zero vectors for unknown tokens
//! * BGRU: bidirectional GRU; the encoding is the last forward state
//!   concatenated with the last backward state (width `2H`)
//!
//! The BGRU can be pretrained to map definitions onto the embedding of the
//! word they define with a cosine ranking loss, after which its token
//! embeddings are frozen and the attribute heads are trained on top.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::dataio::Prng;
use crate::error::{Error, Result};
use crate::numkernel::{
    adam_step, add_outer, binary_cross_entropy_with_grad, cosine, cosine_grad_wrt_second,
    cross_entropy_with_grad, sigmoid, softmax_unchecked, AdamConfig, AdamState, BlockId,
    ParamStore,
};
use crate::schema::{Arity, AttributeSchema, LabelVector, VerbLabels};

pub const DEFAULT_BOW_VOCAB: usize = 5000;
pub const DEFAULT_TOKEN_VOCAB: usize = 30_000;
pub const DEFAULT_HIDDEN: usize = 300;
pub const DEFAULT_MAX_LEN: usize = 32;
pub const RANKING_MARGIN: f64 = 0.1;
pub const UNK: &str = "<unk>";

/// Lowercases, drops punctuation, and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// Fixed-width word vectors. Lookups of absent tokens through
/// [`EmbeddingTable::lookup`] return zeros and bump a miss counter.
#[derive(Debug, Default)]
pub struct EmbeddingTable {
    dim: usize,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f64>,
    misses: AtomicUsize,
}

impl Clone for EmbeddingTable {
    fn clone(&self) -> Self {
        EmbeddingTable {
            dim: self.dim,
            tokens: self.tokens.clone(),
            index: self.index.clone(),
            data: self.data.clone(),
            misses: AtomicUsize::new(self.misses()),
        }
    }
}

impl PartialEq for EmbeddingTable {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.tokens == other.tokens && self.data == other.data
    }
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            ..Default::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Inserts or replaces a vector.
    pub fn insert(&mut self, token: &str, vector: &[f64]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Shape(format!(
                "embedding for `{}` has {} values, table dimension is {}",
                token,
                vector.len(),
                self.dim
            )));
        }
        match self.index.get(token) {
            Some(&i) => self.data[i * self.dim..(i + 1) * self.dim].copy_from_slice(vector),
            None => {
                self.index.insert(token.to_string(), self.tokens.len());
                self.tokens.push(token.to_string());
                self.data.extend_from_slice(vector);
            }
        }
        Ok(())
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.index
            .get(token)
            .map(|&i| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn lookup(&self, token: &str) -> Vec<f64> {
        match self.get(token) {
            Some(v) => v.to_vec(),
            None => {
                self.misses.fetch_add(1, Ordering::Relaxed);
                vec![0.0; self.dim]
            }
        }
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.tokens
            .iter()
            .enumerate()
            .map(move |(i, t)| (t.as_str(), &self.data[i * self.dim..(i + 1) * self.dim]))
    }
}

/// Definitions per verb template, in rank order (first = most relevant).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefinitionCorpus {
    entries: BTreeMap<String, Vec<Vec<String>>>,
}

impl DefinitionCorpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, verb: &str, tokens: Vec<String>) {
        self.entries
            .entry(verb.to_string())
            .or_default()
            .push(tokens);
    }

    pub fn definitions(&self, verb: &str) -> Option<&[Vec<String>]> {
        self.entries.get(verb).map(Vec::as_slice)
    }

    pub fn first(&self, verb: &str) -> Option<&[String]> {
        self.entries
            .get(verb)
            .and_then(|d| d.first())
            .map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[Vec<String>])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_definitions(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }
}

/// Embedding of a verb template. Multi-token templates ("put up") use the
/// mean of their known token vectors.
pub fn encode_emb(verb: &str, table: &EmbeddingTable) -> Result<Vec<f64>> {
    if let Some(v) = table.get(verb) {
        return Ok(v.to_vec());
    }
    let mut sum = vec![0.0; table.dim()];
    let mut n = 0;
    for tok in verb.split_whitespace() {
        if let Some(v) = table.get(tok) {
            sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::MissingEmbedding(verb.to_string()));
    }
    sum.iter_mut().for_each(|s| *s /= n as f64);
    Ok(sum)
}

/// Frequency-ranked word list; ties broken alphabetically.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocab { words, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Vocab {
    /// The `size` most frequent tokens across all definitions of `verbs`.
    pub fn build<'a, I>(corpus: &DefinitionCorpus, verbs: I, size: usize) -> Vocab
    where
        I: IntoIterator<Item = &'a String>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for v in verbs {
            for def in corpus.definitions(v).unwrap_or(&[]) {
                for t in def {
                    *counts.entry(t.as_str()).or_default() += 1;
                }
            }
        }
        Vocab::from_counts(counts, size, &[])
    }

    fn from_counts(counts: HashMap<&str, usize>, size: usize, reserved: &[&str]) -> Vocab {
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !reserved.contains(w))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut words: Vec<String> = reserved.iter().map(|s| s.to_string()).collect();
        words.extend(
            ranked
                .into_iter()
                .take(size.saturating_sub(reserved.len()))
                .map(|(w, _)| w.to_string()),
        );
        Vocab::from(words)
    }

    /// Token vocabulary with `<unk>` at index 0, counting `size` in total.
    pub fn build_with_unk<'a, I>(token_lists: I, size: usize) -> Vocab
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for def in token_lists {
            for t in def {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        Vocab::from_counts(counts, size.max(1), &[UNK])
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Index or 0 (`<unk>`), for vocabularies built with [`Vocab::build_with_unk`].
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.get(token).unwrap_or(0)
    }
}

/// `f_i = [word i occurs in the definition]`.
pub fn encode_bow(tokens: &[String], vocab: &Vocab) -> Vec<f64> {
    let mut out = vec![0.0; vocab.len()];
    for t in tokens {
        if let Some(i) = vocab.get(t) {
            out[i] = 1.0;
        }
    }
    out
}

/// Mean token embedding; unknown tokens contribute zero vectors.
pub fn encode_nbow(tokens: &[String], table: &EmbeddingTable) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(Error::Empty("definition".into()));
    }
    let mut out = vec![0.0; table.dim()];
    for t in tokens {
        for (o, x) in out.iter_mut().zip(table.lookup(t)) {
            *o += x;
        }
    }
    let n = tokens.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// Concatenation in the given order.
pub fn fuse(encodings: &[&[f64]]) -> Vec<f64> {
    encodings.iter().flat_map(|e| e.iter().copied()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GruLayout {
    pub w_r: BlockId,
    pub u_r: BlockId,
    pub w_z: BlockId,
    pub u_z: BlockId,
    pub w_h: BlockId,
    pub u_h: BlockId,
}

struct GruStep {
    token: usize,
    x: Vec<f64>,
    h_prev: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    h_tilde: Vec<f64>,
}

impl GruLayout {
    fn register(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize) -> Self {
        GruLayout {
            w_r: store.add(&format!("{prefix}.w_r"), hidden, input, true),
            u_r: store.add(&format!("{prefix}.u_r"), hidden, hidden, true),
            w_z: store.add(&format!("{prefix}.w_z"), hidden, input, true),
            u_z: store.add(&format!("{prefix}.u_z"), hidden, hidden, true),
            w_h: store.add(&format!("{prefix}.w_h"), hidden, input, true),
            u_h: store.add(&format!("{prefix}.u_h"), hidden, hidden, true),
        }
    }

    fn blocks(&self) -> [BlockId; 6] {
        [self.w_r, self.u_r, self.w_z, self.u_z, self.w_h, self.u_h]
    }

    fn step(&self, p: &ParamStore, token: usize, x: Vec<f64>, h: &[f64]) -> (Vec<f64>, GruStep) {
        let mut a_r = p.mat(self.w_r).matvec(&x);
        p.mat(self.u_r).matvec_acc(h, &mut a_r);
        let r: Vec<f64> = a_r.into_iter().map(sigmoid).collect();
        let mut a_z = p.mat(self.w_z).matvec(&x);
        p.mat(self.u_z).matvec_acc(h, &mut a_z);
        let z: Vec<f64> = a_z.into_iter().map(sigmoid).collect();
        let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
        let mut a_h = p.mat(self.w_h).matvec(&x);
        p.mat(self.u_h).matvec_acc(&rh, &mut a_h);
        let h_tilde: Vec<f64> = a_h.into_iter().map(f64::tanh).collect();
        let h_new = (0..h.len())
            .map(|i| (1.0 - z[i]) * h[i] + z[i] * h_tilde[i])
            .collect();
        (
            h_new,
            GruStep {
                token,
                x,
                h_prev: h.to_vec(),
                r,
                z,
                h_tilde,
            },
        )
    }

    /// Backpropagates one step. Returns the gradient for the previous hidden
    /// state and adds the input gradient into `dx`.
    fn step_backward(
        &self,
        p: &ParamStore,
        s: &GruStep,
        dh_out: &[f64],
        grads: &mut ParamStore,
        dx: &mut [f64],
    ) -> Vec<f64> {
        let n = dh_out.len();
        let h = &s.h_prev;
        let mut dh: Vec<f64> = (0..n).map(|i| dh_out[i] * (1.0 - s.z[i])).collect();
        let da_h: Vec<f64> = (0..n)
            .map(|i| dh_out[i] * s.z[i] * (1.0 - s.h_tilde[i] * s.h_tilde[i]))
            .collect();
        let da_z: Vec<f64> = (0..n)
            .map(|i| dh_out[i] * (s.h_tilde[i] - h[i]) * s.z[i] * (1.0 - s.z[i]))
            .collect();
        let rh: Vec<f64> = s.r.iter().zip(h).map(|(a, b)| a * b).collect();
        add_outer(grads.slice_mut(self.w_h), &da_h, &s.x);
        add_outer(grads.slice_mut(self.u_h), &da_h, &rh);
        let drh = p.mat(self.u_h).matvec_t(&da_h);
        let da_r: Vec<f64> = (0..n)
            .map(|i| drh[i] * h[i] * s.r[i] * (1.0 - s.r[i]))
            .collect();
        for i in 0..n {
            dh[i] += drh[i] * s.r[i];
        }
        p.mat(self.w_h).matvec_t_acc(&da_h, dx);

        add_outer(grads.slice_mut(self.w_z), &da_z, &s.x);
        add_outer(grads.slice_mut(self.u_z), &da_z, h);
        p.mat(self.u_z).matvec_t_acc(&da_z, &mut dh);
        p.mat(self.w_z).matvec_t_acc(&da_z, dx);

        add_outer(grads.slice_mut(self.w_r), &da_r, &s.x);
        add_outer(grads.slice_mut(self.u_r), &da_r, h);
        p.mat(self.u_r).matvec_t_acc(&da_r, &mut dh);
        p.mat(self.w_r).matvec_t_acc(&da_r, dx);
        dh
    }
}

/// Where a bidirectional GRU lives inside a [`ParamStore`], plus its token
/// vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BgruLayout {
    pub vocab: Vocab,
    pub embed_dim: usize,
    pub hidden: usize,
    pub max_len: usize,
    pub embeddings: BlockId,
    pub forward: GruLayout,
    pub backward: GruLayout,
}

/// Intermediate values of one BGRU pass, kept for backpropagation.
pub struct BgruCache {
    forward: Vec<GruStep>,
    backward: Vec<GruStep>,
    pub output: Vec<f64>,
}

impl BgruLayout {
    pub fn register(
        store: &mut ParamStore,
        vocab: Vocab,
        embed_dim: usize,
        hidden: usize,
        max_len: usize,
    ) -> Self {
        let embeddings = store.add("bgru.embeddings", vocab.len(), embed_dim, false);
        let forward = GruLayout::register(store, "bgru.fwd", embed_dim, hidden);
        let backward = GruLayout::register(store, "bgru.bwd", embed_dim, hidden);
        BgruLayout {
            vocab,
            embed_dim,
            hidden,
            max_len,
            embeddings,
            forward,
            backward,
        }
    }

    pub fn output_width(&self) -> usize {
        2 * self.hidden
    }

    fn gru_blocks(&self) -> impl Iterator<Item = BlockId> {
        self.forward
            .blocks()
            .into_iter()
            .chain(self.backward.blocks())
    }

    /// Random gate weights; token rows copied from `table` where the token
    /// is known, small Gaussians otherwise.
    pub fn init(&self, store: &mut ParamStore, table: Option<&EmbeddingTable>, rng: &mut Prng) {
        let scale = 1.0 / ((self.embed_dim + self.hidden) as f64).sqrt();
        for b in self.gru_blocks() {
            store.init_normal(b, scale, rng);
        }
        let dim = self.embed_dim;
        let emb = store.slice_mut(self.embeddings);
        for (i, word) in self.vocab.words().iter().enumerate() {
            let row = &mut emb[i * dim..(i + 1) * dim];
            match table.and_then(|t| t.get(word)) {
                Some(v) if v.len() == dim => row.copy_from_slice(v),
                _ => row.iter_mut().for_each(|x| *x = 0.1 * rng.normal()),
            }
        }
    }

    pub fn token_ids(&self, tokens: &[String]) -> Result<Vec<usize>> {
        if tokens.is_empty() {
            return Err(Error::Empty("definition".into()));
        }
        Ok(tokens
            .iter()
            .take(self.max_len)
            .map(|t| self.vocab.id_or_unk(t))
            .collect())
    }

    pub fn forward(&self, p: &ParamStore, tokens: &[String]) -> Result<BgruCache> {
        let ids = self.token_ids(tokens)?;
        let emb = p.mat(self.embeddings);
        let run = |gru: &GruLayout, order: &mut dyn Iterator<Item = &usize>| {
            let mut h = vec![0.0; self.hidden];
            let mut steps = Vec::with_capacity(ids.len());
            for &id in order {
                let (h_new, s) = gru.step(p, id, emb.row(id).to_vec(), &h);
                h = h_new;
                steps.push(s);
            }
            (h, steps)
        };
        let (h_fwd, forward) = run(&self.forward, &mut ids.iter());
        let (h_bwd, backward) = run(&self.backward, &mut ids.iter().rev());
        let mut output = h_fwd;
        output.extend(h_bwd);
        Ok(BgruCache {
            forward,
            backward,
            output,
        })
    }

    pub fn backward(
        &self,
        p: &ParamStore,
        cache: &BgruCache,
        d_out: &[f64],
        grads: &mut ParamStore,
    ) {
        let hdim = self.hidden;
        let train_emb = p.spec(self.embeddings).trainable;
        for (gru, steps, d_last) in [
            (&self.forward, &cache.forward, &d_out[..hdim]),
            (&self.backward, &cache.backward, &d_out[hdim..]),
        ] {
            let mut dh = d_last.to_vec();
            for s in steps.iter().rev() {
                let mut dx = vec![0.0; self.embed_dim];
                dh = gru.step_backward(p, s, &dh, grads, &mut dx);
                if train_emb {
                    let g = grads.slice_mut(self.embeddings);
                    let row = &mut g[s.token * self.embed_dim..(s.token + 1) * self.embed_dim];
                    row.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
                }
            }
        }
    }
}

/// A standalone (pretrained) BGRU encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bgru {
    pub layout: BgruLayout,
    pub params: ParamStore,
}

impl Bgru {
    pub fn new(vocab: Vocab, embed_dim: usize, hidden: usize, max_len: usize) -> Self {
        let mut params = ParamStore::new();
        let layout = BgruLayout::register(&mut params, vocab, embed_dim, hidden, max_len);
        Bgru { layout, params }
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Vec<f64>> {
        Ok(self.layout.forward(&self.params, tokens)?.output)
    }

    /// Copies this encoder's blocks into `store` under `layout`, matching
    /// block names.
    fn copy_into(&self, layout: &BgruLayout, store: &mut ParamStore) -> Result<()> {
        let pairs = [(self.layout.embeddings, layout.embeddings)]
            .into_iter()
            .chain(self.layout.gru_blocks().zip(layout.gru_blocks()));
        for (src, dst) in pairs {
            let s = self.params.slice(src);
            let d = store.slice_mut(dst);
            if s.len() != d.len() {
                return Err(Error::Shape("pretrained encoder shape".into()));
            }
            d.copy_from_slice(s);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DefinitionEncoder {
    Bow,
    Nbow,
    Bgru,
}

/// Which definition encoder to use, if any, and whether to append the word embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderKind {
    pub definition: Option<DefinitionEncoder>,
    pub embedding: bool,
}

impl EncoderKind {
    pub const EMB: EncoderKind = EncoderKind {
        definition: None,
        embedding: true,
    };
    pub const BOW: EncoderKind = EncoderKind {
        definition: Some(DefinitionEncoder::Bow),
        embedding: false,
    };
    pub const NBOW: EncoderKind = EncoderKind {
        definition: Some(DefinitionEncoder::Nbow),
        embedding: false,
    };
    pub const BGRU: EncoderKind = EncoderKind {
        definition: Some(DefinitionEncoder::Bgru),
        embedding: false,
    };

    pub fn with_embedding(self) -> EncoderKind {
        EncoderKind {
            embedding: true,
            ..self
        }
    }

    /// All seven encoder configurations.
    pub fn all() -> Vec<EncoderKind> {
        let defs = [
            DefinitionEncoder::Bow,
            DefinitionEncoder::Nbow,
            DefinitionEncoder::Bgru,
        ];
        let mut out = vec![EncoderKind::EMB];
        for d in defs {
            let k = EncoderKind {
                definition: Some(d),
                embedding: false,
            };
            out.push(k);
        }
        for d in defs {
            out.push(EncoderKind {
                definition: Some(d),
                embedding: true,
            });
        }
        out
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let def = match self.definition {
            Some(DefinitionEncoder::Bow) => Some("bow"),
            Some(DefinitionEncoder::Nbow) => Some("nbow"),
            Some(DefinitionEncoder::Bgru) => Some("bgru"),
            None => None,
        };
        match (def, self.embedding) {
            (Some(d), true) => write!(f, "{}+emb", d),
            (Some(d), false) => write!(f, "{}", d),
            (None, _) => write!(f, "emb"),
        }
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut kind = EncoderKind {
            definition: None,
            embedding: false,
        };
        for part in s.to_ascii_lowercase().split('+') {
            match part.trim() {
                "emb" | "glove" => kind.embedding = true,
                "bow" => kind.definition = Some(DefinitionEncoder::Bow),
                "nbow" => kind.definition = Some(DefinitionEncoder::Nbow),
                "bgru" => kind.definition = Some(DefinitionEncoder::Bgru),
                other => return Err(Error::Config(format!("unknown encoder `{}`", other))),
            }
        }
        if kind.definition.is_none() && !kind.embedding {
            return Err(Error::Config(format!("empty encoder `{}`", s)));
        }
        Ok(kind)
    }
}

/// Embedding table and definitions available to an encoder.
#[derive(Clone, Copy, Default)]
pub struct TextInputs<'a> {
    pub embeddings: Option<&'a EmbeddingTable>,
    pub definitions: Option<&'a DefinitionCorpus>,
}

/// One training or evaluation instance: a verb and optionally the rank of
/// the definition used.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Instance {
    pub verb: String,
    pub definition: Option<usize>,
}

/// Per attribute, a probability for each label value (binary: `[1-p, p]`).
pub type AttributeDistributions = Vec<Vec<f64>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Head {
    pub weight: BlockId,
    pub bias: BlockId,
    pub arity: Arity,
}

/// Encoder parameters plus one linear head per attribute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttrModel {
    pub kind: EncoderKind,
    pub schema_fingerprint: String,
    pub bow: Option<Vocab>,
    pub bgru: Option<BgruLayout>,
    pub emb_dim: usize,
    pub dropout: f64,
    pub params: ParamStore,
    pub heads: Vec<Head>,
}

/// An encoded input and the BGRU cache when one was used.
pub struct Encoded {
    pub vector: Vec<f64>,
    pub bgru: Option<BgruCache>,
}

impl AttrModel {
    /// Builds an untrained model with zeroed heads.
    pub fn new(
        kind: EncoderKind,
        schema: &AttributeSchema,
        bow: Option<Vocab>,
        bgru: Option<(Vocab, usize, usize, usize)>,
        emb_dim: usize,
    ) -> Result<Self> {
        let mut params = ParamStore::new();
        let bow = match kind.definition {
            Some(DefinitionEncoder::Bow) => {
                Some(bow.ok_or_else(|| Error::Config("BoW encoder needs a vocabulary".into()))?)
            }
            _ => None,
        };
        let bgru = match kind.definition {
            Some(DefinitionEncoder::Bgru) => {
                let (vocab, e, h, max_len) =
                    bgru.ok_or_else(|| Error::Config("BGRU encoder needs a layout".into()))?;
                Some(BgruLayout::register(&mut params, vocab, e, h, max_len))
            }
            _ => None,
        };
        let mut model = AttrModel {
            kind,
            schema_fingerprint: schema.fingerprint(),
            bow,
            bgru,
            emb_dim,
            dropout: 0.0,
            params,
            heads: Vec::new(),
        };
        let d = model.encoding_width();
        if d == 0 {
            return Err(Error::Config("encoder has zero width".into()));
        }
        for a in schema.attributes() {
            let rows = a.arity.width();
            let weight = model
                .params
                .add(&format!("head.{}.w", a.name), rows, d, true);
            let bias = model
                .params
                .add(&format!("head.{}.b", a.name), rows, 1, false);
            model.heads.push(Head {
                weight,
                bias,
                arity: a.arity,
            });
        }
        Ok(model)
    }

    pub fn definition_width(&self) -> usize {
        match self.kind.definition {
            Some(DefinitionEncoder::Bow) => self.bow.as_ref().map_or(0, Vocab::len),
            Some(DefinitionEncoder::Nbow) => self.emb_dim,
            Some(DefinitionEncoder::Bgru) => self.bgru.as_ref().map_or(0, BgruLayout::output_width),
            None => 0,
        }
    }

    /// Width `d` of the head input.
    pub fn encoding_width(&self) -> usize {
        self.definition_width() + if self.kind.embedding { self.emb_dim } else { 0 }
    }

    pub fn uses_definitions(&self) -> bool {
        self.kind.definition.is_some()
    }

    pub fn check_schema(&self, schema: &AttributeSchema) -> Result<()> {
        let fp = schema.fingerprint();
        if fp != self.schema_fingerprint {
            return Err(Error::Fingerprint {
                model: self.schema_fingerprint.clone(),
                schema: fp,
            });
        }
        Ok(())
    }

    fn definition_tokens<'a>(
        &self,
        inputs: &TextInputs<'a>,
        inst: &Instance,
    ) -> Result<&'a [String]> {
        let corpus = inputs
            .definitions
            .ok_or_else(|| Error::Config(format!("encoder {} needs definitions", self.kind)))?;
        let defs = corpus
            .definitions(&inst.verb)
            .filter(|d| !d.is_empty())
            .ok_or_else(|| Error::NoDefinitions {
                verb: inst.verb.clone(),
            })?;
        let idx = inst.definition.unwrap_or(0);
        defs.get(idx)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::OutOfRange(format!("definition {} of `{}`", idx, inst.verb)))
    }

    /// Definition-only encoders that have no trainable parameters.
    pub fn encode_definition(&self, inputs: &TextInputs, tokens: &[String]) -> Result<Encoded> {
        match self.kind.definition {
            Some(DefinitionEncoder::Bow) => Ok(Encoded {
                vector: encode_bow(tokens, self.bow.as_ref().expect("bow vocab")),
                bgru: None,
            }),
            Some(DefinitionEncoder::Nbow) => {
                let table = inputs
                    .embeddings
                    .ok_or_else(|| Error::Config("NBoW needs embeddings".into()))?;
                Ok(Encoded {
                    vector: encode_nbow(tokens, table)?,
                    bgru: None,
                })
            }
            Some(DefinitionEncoder::Bgru) => {
                let cache = self.encode_bgru(tokens)?;
                Ok(Encoded {
                    vector: cache.output.clone(),
                    bgru: Some(cache),
                })
            }
            None => Ok(Encoded {
                vector: Vec::new(),
                bgru: None,
            }),
        }
    }

    pub fn encode_bgru(&self, tokens: &[String]) -> Result<BgruCache> {
        let layout = self
            .bgru
            .as_ref()
            .ok_or_else(|| Error::Config("model has no BGRU".into()))?;
        layout.forward(&self.params, tokens)
    }

    pub fn encode(&self, inputs: &TextInputs, inst: &Instance) -> Result<Encoded> {
        let mut enc = if self.uses_definitions() {
            let tokens = self.definition_tokens(inputs, inst)?;
            self.encode_definition(inputs, tokens)?
        } else {
            Encoded {
                vector: Vec::new(),
                bgru: None,
            }
        };
        if self.kind.embedding {
            let table = inputs
                .embeddings
                .ok_or_else(|| Error::Config("embedding encoder needs embeddings".into()))?;
            let e = encode_emb(&inst.verb, table)?;
            enc.vector = fuse(&[&enc.vector, &e]);
        }
        Ok(enc)
    }

    /// Head logits for every attribute.
    pub fn logits(&self, encoding: &[f64]) -> Result<Vec<Vec<f64>>> {
        if encoding.len() != self.encoding_width() {
            return Err(Error::Shape(format!(
                "encoding of width {}, heads expect {}",
                encoding.len(),
                self.encoding_width()
            )));
        }
        Ok(self
            .heads
            .iter()
            .map(|h| {
                let mut z = self.params.mat(h.weight).matvec(encoding);
                z.iter_mut()
                    .zip(self.params.slice(h.bias))
                    .for_each(|(a, b)| *a += b);
                z
            })
            .collect())
    }

    pub fn predict_attributes(&self, encoding: &[f64]) -> Result<AttributeDistributions> {
        Ok(self
            .logits(encoding)?
            .into_iter()
            .zip(&self.heads)
            .map(|(z, h)| match h.arity {
                Arity::Binary => {
                    let p = sigmoid(z[0]);
                    vec![1.0 - p, p]
                }
                Arity::Categorical(_) => softmax_unchecked(&z),
            })
            .collect())
    }

    /// Labels for a verb from its first definition and/or embedding.
    pub fn predict_labels(&self, inputs: &TextInputs, verb: &str) -> Result<LabelVector> {
        let inst = Instance {
            verb: verb.to_string(),
            definition: self.uses_definitions().then_some(0),
        };
        let enc = self.encode(inputs, &inst)?;
        Ok(hard_labels(&self.predict_attributes(&enc.vector)?))
    }

    pub fn predict_all(&self, inputs: &TextInputs, verbs: &[String]) -> Result<VerbLabels> {
        verbs
            .iter()
            .map(|v| Ok((v.clone(), self.predict_labels(inputs, v)?)))
            .collect()
    }

    /// Summed attribute cross-entropy for one encoded instance, with the
    /// gradient with respect to the heads and the encoding.
    fn head_loss_grad(
        &self,
        encoding: &[f64],
        gold: &LabelVector,
        grads: &mut ParamStore,
        scale: f64,
    ) -> Result<(f64, Vec<f64>)> {
        let logits = self.logits(encoding)?;
        let mut loss = 0.0;
        let mut d_enc = vec![0.0; encoding.len()];
        for ((h, z), &y) in self.heads.iter().zip(&logits).zip(&gold.0) {
            let dz: Vec<f64> = match h.arity {
                Arity::Binary => {
                    let (l, g) = binary_cross_entropy_with_grad(z[0], y as u8)?;
                    loss += l;
                    vec![g * scale]
                }
                Arity::Categorical(_) => {
                    let (l, mut g) = cross_entropy_with_grad(z, y)?;
                    loss += l;
                    g.iter_mut().for_each(|x| *x *= scale);
                    g
                }
            };
            add_outer(grads.slice_mut(h.weight), &dz, encoding);
            grads
                .slice_mut(h.bias)
                .iter_mut()
                .zip(&dz)
                .for_each(|(a, b)| *a += b);
            self.params.mat(h.weight).matvec_t_acc(&dz, &mut d_enc);
        }
        Ok((loss, d_enc))
    }

    /// Mean loss over `batch` plus L2 penalty, and its gradient. `masks`
    /// optionally holds a dropout mask per instance for the BGRU block.
    pub fn loss_and_grad(
        &self,
        batch: &[(Encoded, &LabelVector)],
        masks: Option<&[Vec<f64>]>,
        l2: f64,
    ) -> Result<(f64, ParamStore)> {
        let mut grads = self.params.zeros_like();
        if batch.is_empty() {
            return Ok((0.0, grads));
        }
        let scale = 1.0 / batch.len() as f64;
        let def_w = self.definition_width();
        let mut total = 0.0;
        for (i, (enc, gold)) in batch.iter().enumerate() {
            let mut x = enc.vector.clone();
            if let (Some(m), Some(_)) = (masks, &enc.bgru) {
                x[..def_w].iter_mut().zip(&m[i]).for_each(|(a, b)| *a *= b);
            }
            let (loss, mut d_enc) = self.head_loss_grad(&x, gold, &mut grads, scale)?;
            total += loss * scale;
            if let (Some(cache), Some(layout)) = (&enc.bgru, &self.bgru) {
                if let Some(m) = masks {
                    d_enc[..def_w]
                        .iter_mut()
                        .zip(&m[i])
                        .for_each(|(a, b)| *a *= b);
                }
                layout.backward(&self.params, cache, &d_enc[..def_w], &mut grads);
            }
        }
        total += self.params.apply_regularisation(&mut grads, l2);
        Ok((total, grads))
    }

    /// Mean unregularised loss over instances, dropout off.
    pub fn dataset_loss(
        &self,
        inputs: &TextInputs,
        instances: &[Instance],
        gold: &VerbLabels,
    ) -> Result<f64> {
        let mut sink = self.params.zeros_like();
        let mut total = 0.0;
        for inst in instances {
            let enc = self.encode(inputs, inst)?;
            let g = gold
                .get(&inst.verb)
                .ok_or_else(|| Error::MissingLabels(inst.verb.clone()))?;
            total += self.head_loss_grad(&enc.vector, g, &mut sink, 0.0)?.0;
        }
        Ok(total / instances.len().max(1) as f64)
    }
}

/// argmax per attribute, ties to the lowest index (so binary p = 0.5 → 0).
pub fn hard_labels(dists: &AttributeDistributions) -> LabelVector {
    LabelVector(dists.iter().map(|d| crate::numkernel::argmax(d)).collect())
}

/// Every train verb contributes exactly `M` instances, `M` being the largest
/// definition count; shorter lists keep all their definitions and are padded
/// by uniform draws (with replacement) from their own definitions.
pub fn oversample_definitions(
    corpus: &DefinitionCorpus,
    verbs: &[String],
    rng: &mut Prng,
) -> Result<Vec<Instance>> {
    let counts: Vec<usize> = verbs
        .iter()
        .map(|v| match corpus.definitions(v) {
            Some(d) if !d.is_empty() => Ok(d.len()),
            _ => Err(Error::NoDefinitions { verb: v.clone() }),
        })
        .collect::<Result<_>>()?;
    let m = counts.iter().copied().max().unwrap_or(0);
    let mut out = Vec::with_capacity(m * verbs.len());
    for (v, &n) in verbs.iter().zip(&counts) {
        for d in 0..n {
            out.push(Instance {
                verb: v.clone(),
                definition: Some(d),
            });
        }
        for _ in n..m {
            out.push(Instance {
                verb: v.clone(),
                definition: Some(rng.below(n)),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub l2: f64,
    /// Dropout rate on the BGRU block of the encoding (training only).
    pub dropout: f64,
    pub seed: u64,
    pub hidden: usize,
    /// Token embedding width when no embedding table is available.
    pub token_dim: usize,
    pub bow_vocab: usize,
    pub token_vocab: usize,
    pub max_len: usize,
    pub freeze_token_embeddings: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            adam: AdamConfig {
                lr: 1e-4,
                ..AdamConfig::default()
            },
            l2: 1e-4,
            dropout: 0.5,
            seed: 0,
            hidden: DEFAULT_HIDDEN,
            token_dim: 300,
            bow_vocab: DEFAULT_BOW_VOCAB,
            token_vocab: DEFAULT_TOKEN_VOCAB,
            max_len: DEFAULT_MAX_LEN,
            freeze_token_embeddings: true,
        }
    }
}

impl TrainConfig {
    /// Settings used when finetuning on top of a pretrained encoder:
    /// batch 32 and Adam ε = 1.
    pub fn finetune() -> Self {
        TrainConfig {
            batch_size: 32,
            adam: AdamConfig {
                lr: 1e-4,
                eps: 1.0,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub initial_loss: f64,
    /// Dataset loss (dropout off) after each epoch.
    pub epoch_losses: Vec<f64>,
}

fn training_instances(
    kind: EncoderKind,
    verbs: &[String],
    inputs: &TextInputs,
    rng: &mut Prng,
) -> Result<Vec<Instance>> {
    if kind.definition.is_some() {
        let corpus = inputs
            .definitions
            .ok_or_else(|| Error::Config(format!("encoder {} needs definitions", kind)))?;
        oversample_definitions(corpus, verbs, rng)
    } else {
        Ok(verbs
            .iter()
            .map(|v| Instance {
                verb: v.clone(),
                definition: None,
            })
            .collect())
    }
}

/// Builds an untrained model for `kind` with vocabularies taken from the
/// training verbs' definitions.
pub fn build_attr_model(
    kind: EncoderKind,
    train_verbs: &[String],
    inputs: &TextInputs,
    schema: &AttributeSchema,
    config: &TrainConfig,
    pretrained: Option<&Bgru>,
    rng: &mut Prng,
) -> Result<AttrModel> {
    let emb_dim = inputs.embeddings.map_or(0, EmbeddingTable::dim);
    if (kind.embedding || kind.definition == Some(DefinitionEncoder::Nbow)) && emb_dim == 0 {
        return Err(Error::Config(format!("encoder {} needs embeddings", kind)));
    }
    let bow = match (kind.definition, inputs.definitions) {
        (Some(DefinitionEncoder::Bow), Some(c)) => {
            Some(Vocab::build(c, train_verbs, config.bow_vocab))
        }
        _ => None,
    };
    let bgru = match (kind.definition, pretrained) {
        (Some(DefinitionEncoder::Bgru), Some(p)) => Some((
            p.layout.vocab.clone(),
            p.layout.embed_dim,
            p.layout.hidden,
            p.layout.max_len,
        )),
        (Some(DefinitionEncoder::Bgru), None) => {
            let corpus = inputs
                .definitions
                .ok_or_else(|| Error::Config("BGRU needs definitions".into()))?;
            let lists = train_verbs
                .iter()
                .filter_map(|v| corpus.definitions(v))
                .flatten()
                .map(Vec::as_slice);
            let vocab = Vocab::build_with_unk(lists, config.token_vocab);
            let e = if emb_dim > 0 {
                emb_dim
            } else {
                config.token_dim
            };
            Some((vocab, e, config.hidden, config.max_len))
        }
        _ => None,
    };
    let mut model = AttrModel::new(kind, schema, bow, bgru, emb_dim)?;
    model.dropout = config.dropout;
    if let Some(layout) = model.bgru.clone() {
        match pretrained {
            Some(p) => p.copy_into(&layout, &mut model.params)?,
            None => layout.init(&mut model.params, inputs.embeddings, rng),
        }
        model
            .params
            .set_trainable(layout.embeddings, !config.freeze_token_embeddings);
    }
    Ok(model)
}

/// Trains encoder and heads by minimising the summed attribute
/// cross-entropy over `train_verbs` with Adam mini-batches.
pub fn train_attr_model(
    kind: EncoderKind,
    train_verbs: &[String],
    inputs: &TextInputs,
    gold: &VerbLabels,
    schema: &AttributeSchema,
    config: &TrainConfig,
    pretrained: Option<&Bgru>,
) -> Result<(AttrModel, TrainLog)> {
    if train_verbs.is_empty() {
        return Err(Error::Empty("training verbs".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    for v in train_verbs {
        let lv = gold.get(v).ok_or_else(|| Error::MissingLabels(v.clone()))?;
        schema.validate(lv)?;
    }
    let root = Prng::new(config.seed);
    let mut init_rng = root.derive(11);
    let mut sample_rng = root.derive(12);
    let mut order_rng = root.derive(13);
    let mut dropout_rng = root.derive(14);

    let mut model = build_attr_model(
        kind,
        train_verbs,
        inputs,
        schema,
        config,
        pretrained,
        &mut init_rng,
    )?;
    let instances = training_instances(kind, train_verbs, inputs, &mut sample_rng)?;
    let has_bgru = model.bgru.is_some();

    // parameter-free encoders: encode once
    let fixed: Option<Vec<Vec<f64>>> = if has_bgru {
        None
    } else {
        Some(
            instances
                .iter()
                .map(|i| Ok(model.encode(inputs, i)?.vector))
                .collect::<Result<_>>()?,
        )
    };
    let labels: Vec<&LabelVector> = instances.iter().map(|i| &gold[&i.verb]).collect();

    let mut log = TrainLog {
        initial_loss: model.dataset_loss(inputs, &instances, gold)?,
        epoch_losses: Vec::with_capacity(config.epochs),
    };
    let mut adam = AdamState::new(model.params.len(), config.adam);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let def_w = model.definition_width();
    for _ in 0..config.epochs {
        order_rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(Encoded, &LabelVector)> = chunk
                .iter()
                .map(|&i| {
                    let enc = match &fixed {
                        Some(f) => Encoded {
                            vector: f[i].clone(),
                            bgru: None,
                        },
                        None => model.encode(inputs, &instances[i])?,
                    };
                    Ok((enc, labels[i]))
                })
                .collect::<Result<_>>()?;
            let masks: Option<Vec<Vec<f64>>> = (has_bgru && config.dropout > 0.0).then(|| {
                let keep = 1.0 - config.dropout;
                chunk
                    .iter()
                    .map(|_| {
                        (0..def_w)
                            .map(|_| {
                                if dropout_rng.bernoulli(keep) {
                                    1.0 / keep
                                } else {
                                    0.0
                                }
                            })
                            .collect()
                    })
                    .collect()
            });
            let (_, grads) = model.loss_and_grad(&batch, masks.as_deref(), config.l2)?;
            adam_step(model.params.as_mut_slice(), grads.as_slice(), &mut adam)?;
        }
        log.epoch_losses
            .push(model.dataset_loss(inputs, &instances, gold)?);
    }
    if !model.params.is_finite() {
        return Err(Error::NonFinite("trained attribute model".into()));
    }
    Ok((model, log))
}

/// `max{0, margin - cos(w, ŵ) + cos(w, w̃)}`
pub fn ranking_loss(
    target: &[f64],
    predicted: &[f64],
    negative: &[f64],
    margin: f64,
) -> Result<f64> {
    Ok((margin - cosine(target, predicted)? + cosine(target, negative)?).max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub margin: f64,
    pub seed: u64,
    pub hidden: usize,
    pub token_vocab: usize,
    pub max_len: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 10,
            batch_size: 64,
            adam: AdamConfig {
                lr: 1e-4,
                eps: 1e-8,
                ..AdamConfig::default()
            },
            margin: RANKING_MARGIN,
            seed: 0,
            hidden: DEFAULT_HIDDEN,
            token_vocab: DEFAULT_TOKEN_VOCAB,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

/// A BGRU plus the temporary `W^emb` projection used only while
/// pretraining.
pub struct PretrainModel {
    pub bgru: BgruLayout,
    pub projection: BlockId,
    pub params: ParamStore,
}

impl PretrainModel {
    pub fn new(
        vocab: Vocab,
        embed_dim: usize,
        hidden: usize,
        max_len: usize,
        target_dim: usize,
    ) -> Self {
        let mut params = ParamStore::new();
        let bgru = BgruLayout::register(&mut params, vocab, embed_dim, hidden, max_len);
        let projection = params.add("pretrain.w_emb", target_dim, 2 * hidden, true);
        PretrainModel {
            bgru,
            projection,
            params,
        }
    }

    /// Mean ranking loss over `(tokens, target, negative)` triples and its
    /// gradient.
    pub fn loss_and_grad(
        &self,
        batch: &[(&[String], &[f64], &[f64])],
        margin: f64,
    ) -> Result<(f64, ParamStore)> {
        let mut grads = self.params.zeros_like();
        let scale = 1.0 / batch.len().max(1) as f64;
        let mut total = 0.0;
        for &(tokens, target, negative) in batch {
            let cache = self.bgru.forward(&self.params, tokens)?;
            let proj = self.params.mat(self.projection);
            let predicted = proj.matvec(&cache.output);
            let neg_cos = cosine(target, negative)?;
            let (pos_cos, d_pred) = match cosine_grad_wrt_second(target, &predicted) {
                Ok(v) => v,
                // ŵ = 0: cosine taken as 0, no gradient
                Err(Error::ZeroNorm) => (0.0, vec![0.0; predicted.len()]),
                Err(e) => return Err(e),
            };
            let loss = margin - pos_cos + neg_cos;
            if loss <= 0.0 {
                continue;
            }
            total += loss * scale;
            let d_pred: Vec<f64> = d_pred.iter().map(|g| -g * scale).collect();
            add_outer(grads.slice_mut(self.projection), &d_pred, &cache.output);
            let d_out = proj.matvec_t(&d_pred);
            self.bgru.backward(&self.params, &cache, &d_out, &mut grads);
        }
        Ok((total, grads))
    }

    /// Drops the projection and returns the encoder alone.
    pub fn into_encoder(self) -> Bgru {
        let mut enc = Bgru::new(
            self.bgru.vocab.clone(),
            self.bgru.embed_dim,
            self.bgru.hidden,
            self.bgru.max_len,
        );
        let src = Bgru {
            layout: self.bgru,
            params: self.params,
        };
        let layout = enc.layout.clone();
        src.copy_into(&layout, &mut enc.params)
            .expect("same layout");
        enc
    }
}

/// Pretrains a BGRU to predict each defined word's embedding from its
/// definition with the cosine ranking loss. Negatives are re-drawn every
/// epoch from the other dictionary words.
pub fn pretrain_definition_encoder(
    pairs: &[(Vec<String>, String)],
    table: &EmbeddingTable,
    config: &PretrainConfig,
) -> Result<(Bgru, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::Empty("dictionary".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut words: Vec<&str> = pairs.iter().map(|(_, w)| w.as_str()).collect();
    words.sort_unstable();
    words.dedup();
    if words.len() < 2 {
        return Err(Error::Config(
            "ranking loss needs at least two dictionary words".into(),
        ));
    }
    let targets: Vec<Vec<f64>> = pairs
        .iter()
        .map(|(_, w)| {
            table
                .get(w)
                .map(<[f64]>::to_vec)
                .ok_or_else(|| Error::MissingEmbedding(w.clone()))
        })
        .collect::<Result<_>>()?;
    let root = Prng::new(config.seed);
    let mut init_rng = root.derive(21);
    let mut order_rng = root.derive(22);
    let mut neg_rng = root.derive(23);

    let vocab = Vocab::build_with_unk(pairs.iter().map(|(d, _)| d.as_slice()), config.token_vocab);
    let mut model = PretrainModel::new(
        vocab,
        table.dim(),
        config.hidden,
        config.max_len,
        table.dim(),
    );
    model
        .bgru
        .init(&mut model.params, Some(table), &mut init_rng);
    let scale = 1.0 / (2.0 * config.hidden as f64).sqrt();
    model
        .params
        .init_normal(model.projection, scale, &mut init_rng);

    let mut adam = AdamState::new(model.params.len(), config.adam);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order_rng.shuffle(&mut order);
        let negatives: Vec<&[f64]> = pairs
            .iter()
            .map(|(_, w)| loop {
                let cand = words[neg_rng.below(words.len())];
                if cand != w {
                    break table.get(cand).expect("dictionary word has embedding");
                }
            })
            .collect();
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(&[String], &[f64], &[f64])> = chunk
                .iter()
                .map(|&i| (pairs[i].0.as_slice(), targets[i].as_slice(), negatives[i]))
                .collect();
            let (loss, grads) = model.loss_and_grad(&batch, config.margin)?;
            epoch_loss += loss * chunk.len() as f64;
            adam_step(model.params.as_mut_slice(), grads.as_slice(), &mut adam)?;
        }
        losses.push(epoch_loss / pairs.len() as f64);
    }
    if !model.params.is_finite() {
        return Err(Error::NonFinite("pretrained encoder".into()));
    }
    Ok((model.into_encoder(), losses))
}
