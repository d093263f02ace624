//! Zero-shot activity classification over precomputed image features.
//!
//! An image feature `g` is scored against a candidate set of verbs. The
//! attribute pivot projects `g` into attribute space with one map per
//! attribute and matches the candidates' ±1 signatures; the embedding pivot
//! projects `g` into word-embedding space and takes dot products with the
//! candidates' embeddings; the joint head adds both logit vectors.
//!
//! Baselines: DAP (independent attribute classifiers, probabilities
//! multiplied over a class signature), ESZL (closed-form bilinear ridge) and
//! DeVISE (margin ranking into the embedding space).

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataio::{FeatureSet, Prng};
use crate::error::{Error, Result};
use crate::numkernel::{
    adam_step, add_outer, cross_entropy_with_grad, log_sigmoid, log_softmax, sigmoid, softmax,
    AdamConfig, AdamState, BlockId, ParamStore, Tensor2,
};
use crate::schema::{AttributeSchema, LookupTable};
use crate::textattr::{encode_emb, EmbeddingTable};

pub const DEVISE_MARGIN: f64 = 0.1;

/// The ESZL regularisation grid, 10⁻³ … 10³.
pub const ESZL_GRID: [f64; 7] = [1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Attr,
    Emb,
    Joint,
}

impl HeadKind {
    pub fn uses_attributes(self) -> bool {
        matches!(self, HeadKind::Attr | HeadKind::Joint)
    }

    pub fn uses_embeddings(self) -> bool {
        matches!(self, HeadKind::Emb | HeadKind::Joint)
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Attr => "attr",
            HeadKind::Emb => "emb",
            HeadKind::Joint => "joint",
        })
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attr" => Ok(HeadKind::Attr),
            "emb" => Ok(HeadKind::Emb),
            "joint" => Ok(HeadKind::Joint),
            _ => Err(Error::Config(format!("unknown zero-shot head `{}`", s))),
        }
    }
}

/// Ordered candidate verbs with their signatures and/or embedding rows.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    verbs: Vec<String>,
    lookup: Option<LookupTable>,
    /// Binarized signatures, one row per candidate.
    signatures: Option<Tensor2>,
    embeddings: Option<Tensor2>,
}

impl CandidateSet {
    /// Restricts `lookup` and/or `table` to `verbs`, in that order.
    pub fn new(
        verbs: &[String],
        lookup: Option<&LookupTable>,
        table: Option<&EmbeddingTable>,
    ) -> Result<Self> {
        if verbs.is_empty() {
            return Err(Error::Empty("candidate set".into()));
        }
        let lookup = lookup.map(|l| l.restrict(verbs)).transpose()?;
        let embeddings = table
            .map(|t| {
                let rows: Vec<Vec<f64>> = verbs
                    .iter()
                    .map(|v| encode_emb(v, t))
                    .collect::<Result<_>>()?;
                Tensor2::from_rows(&rows)
            })
            .transpose()?;
        Self::from_parts(verbs.to_vec(), lookup, embeddings)
    }

    pub fn from_parts(
        verbs: Vec<String>,
        lookup: Option<LookupTable>,
        embeddings: Option<Tensor2>,
    ) -> Result<Self> {
        if verbs.is_empty() {
            return Err(Error::Empty("candidate set".into()));
        }
        if let Some(l) = &lookup {
            if l.verbs() != verbs.as_slice() {
                return Err(Error::CandidateMismatch(
                    "lookup table rows differ from the candidate verbs".into(),
                ));
            }
        }
        if let Some(e) = &embeddings {
            if e.rows() != verbs.len() {
                return Err(Error::CandidateMismatch(format!(
                    "{} embedding rows for {} candidates",
                    e.rows(),
                    verbs.len()
                )));
            }
        }
        let signatures = lookup
            .as_ref()
            .map(|l| {
                let rows: Vec<Vec<f64>> = (0..l.len()).map(|r| l.signature(r)).collect();
                Tensor2::from_rows(&rows)
            })
            .transpose()?;
        Ok(CandidateSet {
            verbs,
            lookup,
            signatures,
            embeddings,
        })
    }

    pub fn verbs(&self) -> &[String] {
        &self.verbs
    }

    pub fn len(&self) -> usize {
        self.verbs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.verbs.is_empty()
    }

    pub fn lookup(&self) -> Option<&LookupTable> {
        self.lookup.as_ref()
    }

    pub fn signatures(&self) -> Result<&Tensor2> {
        self.signatures
            .as_ref()
            .ok_or_else(|| Error::Config("candidate set has no attribute signatures".into()))
    }

    pub fn embeddings(&self) -> Result<&Tensor2> {
        self.embeddings
            .as_ref()
            .ok_or_else(|| Error::Config("candidate set has no class embeddings".into()))
    }

    pub fn index_of(&self, verb: &str) -> Option<usize> {
        self.verbs.iter().position(|v| v == verb)
    }

    /// Candidate index for every item of `set`.
    pub fn targets(&self, set: &FeatureSet) -> Result<Vec<usize>> {
        let map: Vec<usize> = set
            .verbs
            .iter()
            .map(|v| {
                self.index_of(v).ok_or_else(|| {
                    Error::CandidateMismatch(format!("label `{}` is not a candidate", v))
                })
            })
            .collect::<Result<_>>()?;
        Ok(set.labels.iter().map(|&l| map[l]).collect())
    }
}

/// Attribute maps (rows grouped per attribute, `W^(k)` stacked into one
/// 40 × F block) and/or the embedding map `W^emb` (D × F).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotHead {
    pub kind: HeadKind,
    pub feature_dim: usize,
    pub attr_width: usize,
    pub emb_dim: usize,
    pub attr: Option<BlockId>,
    pub emb: Option<BlockId>,
    pub params: ParamStore,
}

fn check_width(g: &[f64], expected: usize) -> Result<()> {
    if g.len() != expected {
        return Err(Error::Shape(format!(
            "feature of width {}, head expects {}",
            g.len(),
            expected
        )));
    }
    Ok(())
}

impl ZeroShotHead {
    /// A zero-initialised head.
    pub fn new(kind: HeadKind, feature_dim: usize, attr_width: usize, emb_dim: usize) -> Self {
        let mut params = ParamStore::new();
        let attr = kind
            .uses_attributes()
            .then(|| params.add("zs.attr", attr_width, feature_dim, true));
        let emb = kind
            .uses_embeddings()
            .then(|| params.add("zs.emb", emb_dim, feature_dim, true));
        ZeroShotHead {
            kind,
            feature_dim,
            attr_width,
            emb_dim,
            attr,
            emb,
            params,
        }
    }

    fn attr_block(&self) -> Result<BlockId> {
        self.attr
            .ok_or_else(|| Error::Config(format!("{} head has no attribute branch", self.kind)))
    }

    fn emb_block(&self) -> Result<BlockId> {
        self.emb
            .ok_or_else(|| Error::Config(format!("{} head has no embedding branch", self.kind)))
    }

    /// `W^(k) g` for all attributes, concatenated.
    pub fn project_attributes(&self, g: &[f64]) -> Result<Vec<f64>> {
        check_width(g, self.feature_dim)?;
        Ok(self.params.mat(self.attr_block()?).matvec(g))
    }

    /// `W^emb g`.
    pub fn project_embedding(&self, g: &[f64]) -> Result<Vec<f64>> {
        check_width(g, self.feature_dim)?;
        Ok(self.params.mat(self.emb_block()?).matvec(g))
    }

    pub fn attr_logits(&self, g: &[f64], cands: &CandidateSet) -> Result<Vec<f64>> {
        let s = cands.signatures()?;
        if s.cols() != self.attr_width {
            return Err(Error::Shape(format!(
                "signatures of width {}, head maps to {}",
                s.cols(),
                self.attr_width
            )));
        }
        Ok(s.view().matvec(&self.project_attributes(g)?))
    }

    pub fn emb_logits(&self, g: &[f64], cands: &CandidateSet) -> Result<Vec<f64>> {
        let e = cands.embeddings()?;
        if e.cols() != self.emb_dim {
            return Err(Error::Shape(format!(
                "class embeddings of width {}, head maps to {}",
                e.cols(),
                self.emb_dim
            )));
        }
        Ok(e.view().matvec(&self.project_embedding(g)?))
    }

    pub fn joint_logits(&self, g: &[f64], cands: &CandidateSet) -> Result<Vec<f64>> {
        let a = self.attr_logits(g, cands)?;
        let e = self.emb_logits(g, cands)?;
        Ok(a.iter().zip(&e).map(|(x, y)| x + y).collect())
    }

    /// Logits of this head's own kind.
    pub fn logits(&self, g: &[f64], cands: &CandidateSet) -> Result<Vec<f64>> {
        match self.kind {
            HeadKind::Attr => self.attr_logits(g, cands),
            HeadKind::Emb => self.emb_logits(g, cands),
            HeadKind::Joint => self.joint_logits(g, cands),
        }
    }

    /// Mean training loss over `items` (feature, candidate index) plus the
    /// L2 penalty, with its gradient. The joint head sums the three
    /// cross-entropies of the attribute, embedding and summed logits.
    pub fn loss_and_grad(
        &self,
        items: &[(&[f64], usize)],
        cands: &CandidateSet,
        l2: f64,
    ) -> Result<(f64, ParamStore)> {
        let mut grads = self.params.zeros_like();
        let scale = 1.0 / items.len().max(1) as f64;
        let mut total = 0.0;
        for &(g, y) in items {
            let a = self
                .kind
                .uses_attributes()
                .then(|| self.attr_logits(g, cands))
                .transpose()?;
            let e = self
                .kind
                .uses_embeddings()
                .then(|| self.emb_logits(g, cands))
                .transpose()?;
            let (loss, da, de) = match (&a, &e) {
                (Some(a), None) => {
                    let (l, d) = cross_entropy_with_grad(a, y)?;
                    (l, Some(d), None)
                }
                (None, Some(e)) => {
                    let (l, d) = cross_entropy_with_grad(e, y)?;
                    (l, None, Some(d))
                }
                (Some(a), Some(e)) => {
                    let j: Vec<f64> = a.iter().zip(e).map(|(x, y)| x + y).collect();
                    let (la, ga) = cross_entropy_with_grad(a, y)?;
                    let (le, ge) = cross_entropy_with_grad(e, y)?;
                    let (lj, gj) = cross_entropy_with_grad(&j, y)?;
                    let da = ga.iter().zip(&gj).map(|(p, q)| p + q).collect();
                    let de = ge.iter().zip(&gj).map(|(p, q)| p + q).collect();
                    (la + le + lj, Some(da), Some(de))
                }
                (None, None) => unreachable!("head has at least one branch"),
            };
            total += loss * scale;
            if let Some(mut d) = da {
                d.iter_mut().for_each(|x| *x *= scale);
                let dp = cands.signatures()?.view().matvec_t(&d);
                add_outer(grads.slice_mut(self.attr_block()?), &dp, g);
            }
            if let Some(mut d) = de {
                d.iter_mut().for_each(|x| *x *= scale);
                let dq = cands.embeddings()?.view().matvec_t(&d);
                add_outer(grads.slice_mut(self.emb_block()?), &dq, g);
            }
        }
        total += self.params.apply_regularisation(&mut grads, l2);
        Ok((total, grads))
    }
}

/// Free-function forms of the three scoring rules.
pub fn attr_logits(g: &[f64], lookup: &LookupTable, head: &ZeroShotHead) -> Result<Vec<f64>> {
    let cands = CandidateSet::from_parts(lookup.verbs().to_vec(), Some(lookup.clone()), None)?;
    head.attr_logits(g, &cands)
}

pub fn emb_logits(g: &[f64], a_emb: &Tensor2, head: &ZeroShotHead) -> Result<Vec<f64>> {
    if a_emb.rows() == 0 {
        return Err(Error::Empty("candidate set".into()));
    }
    if a_emb.cols() != head.emb_dim {
        return Err(Error::Shape("class embedding width".into()));
    }
    Ok(a_emb.view().matvec(&head.project_embedding(g)?))
}

pub fn joint_logits(
    g: &[f64],
    lookup: &LookupTable,
    a_emb: &Tensor2,
    head: &ZeroShotHead,
) -> Result<Vec<f64>> {
    if lookup.len() != a_emb.rows() {
        return Err(Error::CandidateMismatch(format!(
            "{} signature rows, {} embedding rows",
            lookup.len(),
            a_emb.rows()
        )));
    }
    let a = attr_logits(g, lookup, head)?;
    let e = emb_logits(g, a_emb, head)?;
    Ok(a.iter().zip(&e).map(|(x, y)| x + y).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotConfig {
    pub kind: HeadKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ZeroShotConfig {
    fn default() -> Self {
        ZeroShotConfig {
            kind: HeadKind::Joint,
            epochs: 50,
            batch_size: 32,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            l2: 1e-4,
            seed: 0,
        }
    }
}

fn check_training_set(train: &FeatureSet) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Empty("training features".into()));
    }
    if !train.features.is_finite() {
        return Err(Error::NonFinite("training features".into()));
    }
    Ok(())
}

/// Minibatch Adam over shuffled items; `step` returns (loss, grads) for a
/// batch of item indices. Returns the mean loss of every epoch.
fn run_adam<F>(
    params: &mut ParamStore,
    n_items: usize,
    epochs: usize,
    batch_size: usize,
    adam: AdamConfig,
    seed: u64,
    mut step: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&ParamStore, &[usize]) -> Result<(f64, ParamStore)>,
{
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut rng = Prng::new(seed).derive(31);
    let mut state = AdamState::new(params.len(), adam);
    let mut order: Vec<usize> = (0..n_items).collect();
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        rng.shuffle(&mut order);
        let mut epoch = 0.0;
        for chunk in order.chunks(batch_size) {
            let (loss, grads) = step(params, chunk)?;
            epoch += loss * chunk.len() as f64;
            adam_step(params.as_mut_slice(), grads.as_slice(), &mut state)?;
        }
        losses.push(epoch / n_items as f64);
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("trained parameters".into()));
    }
    Ok(losses)
}

/// Trains a zero-shot head on `train` against the training candidates.
pub fn train_zeroshot(
    train: &FeatureSet,
    cands: &CandidateSet,
    config: &ZeroShotConfig,
) -> Result<(ZeroShotHead, Vec<f64>)> {
    check_training_set(train)?;
    let targets = cands.targets(train)?;
    let attr_width = match config.kind.uses_attributes() {
        true => cands.signatures()?.cols(),
        false => 0,
    };
    let emb_dim = match config.kind.uses_embeddings() {
        true => cands.embeddings()?.cols(),
        false => 0,
    };
    let mut head = ZeroShotHead::new(config.kind, train.width(), attr_width, emb_dim);
    let mut params = head.params.clone();
    let losses = run_adam(
        &mut params,
        train.len(),
        config.epochs,
        config.batch_size,
        config.adam,
        config.seed,
        |p, batch| {
            head.params.assign(p.as_slice())?;
            let items: Vec<(&[f64], usize)> = batch
                .iter()
                .map(|&i| (train.feature(i), targets[i]))
                .collect();
            head.loss_and_grad(&items, cands, config.l2)
        },
    )?;
    head.params = params;
    Ok((head, losses))
}

/// Indices of the `k` highest scores, best first; ties go to the lower
/// index.
pub fn predict_topk(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::OutOfRange(format!(
            "top-{} over {} candidates",
            k,
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("scores".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Renormalised element-wise product of distributions over one candidate
/// set.
pub fn prob_product_ensemble(dists: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = dists
        .first()
        .ok_or_else(|| Error::Empty("ensemble sources".into()))?;
    if dists.iter().any(|d| d.len() != first.len()) {
        return Err(Error::CandidateMismatch(
            "ensemble sources score different candidate sets".into(),
        ));
    }
    let mut prod = vec![1.0; first.len()];
    for d in dists {
        prod.iter_mut().zip(d).for_each(|(p, x)| *p *= x);
    }
    let z: f64 = prod.iter().sum();
    if !(z > 0.0) || !z.is_finite() {
        // underflow: fall back to log space
        return product_via_logs(dists);
    }
    Ok(prod.into_iter().map(|p| p / z).collect())
}

/// The same ensemble as softmax of the summed log-probabilities.
pub fn product_via_logs(dists: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = dists
        .first()
        .ok_or_else(|| Error::Empty("ensemble sources".into()))?;
    let mut sum = vec![0.0; first.len()];
    for d in dists {
        if d.len() != sum.len() {
            return Err(Error::CandidateMismatch(
                "ensemble sources score different candidate sets".into(),
            ));
        }
        sum.iter_mut().zip(d).for_each(|(s, p)| *s += p.ln());
    }
    if sum.iter().all(|s| *s == f64::NEG_INFINITY) {
        return Err(Error::NonFinite(
            "ensemble has no supported candidate".into(),
        ));
    }
    let max = sum.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = sum.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / z).collect())
}

/// Anything that scores a candidate set for an image feature. Higher is
/// better; scores need not be normalised.
pub trait Scorer {
    fn scores(&self, g: &[f64], cands: &CandidateSet) -> Result<Vec<f64>>;

    fn distribution(&self, g: &[f64], cands: &CandidateSet) -> Result<Vec<f64>> {
        softmax(&self.scores(g, cands)?)
    }
}

impl Scorer for ZeroShotHead {
    fn scores(&self, g: &[f64], cands: &CandidateSet) -> Result<Vec<f64>> {
        self.logits(g, cands)
    }
}

/// Identical scores for every candidate.
#[derive(Clone, Copy, Debug, Default)]
pub struct ConstantScorer;

impl Scorer for ConstantScorer {
    fn scores(&self, _g: &[f64], cands: &CandidateSet) -> Result<Vec<f64>> {
        if cands.is_empty() {
            return Err(Error::Empty("candidate set".into()));
        }
        Ok(vec![0.0; cands.len()])
    }
}

/// Product of the distributions of several scorers, each with its own view
/// of the same candidate verbs. Scores are the ensemble's log-probabilities.
pub struct ProductEnsemble<'a> {
    pub sources: Vec<(&'a dyn Scorer, &'a CandidateSet)>,
}

impl Scorer for ProductEnsemble<'_> {
    fn scores(&self, g: &[f64], cands: &CandidateSet) -> Result<Vec<f64>> {
        if self.sources.len() < 2 {
            return Err(Error::Config(
                "product ensemble needs two or more sources".into(),
            ));
        }
        let mut logs = vec![0.0; cands.len()];
        for (s, c) in &self.sources {
            if c.verbs() != cands.verbs() {
                return Err(Error::CandidateMismatch(
                    "ensemble source candidates differ".into(),
                ));
            }
            let lp = log_softmax(&s.scores(g, c)?)?;
            logs.iter_mut().zip(lp).for_each(|(a, b)| *a += b);
        }
        Ok(logs)
    }
}

/// DeVISE: a linear map into the (fixed) class embedding space trained with
/// a margin ranking loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviseModel {
    pub map: Tensor2,
    pub margin: f64,
}

impl DeviseModel {
    pub fn new(emb_dim: usize, feature_dim: usize) -> Self {
        DeviseModel {
            map: Tensor2::zeros(emb_dim, feature_dim),
            margin: DEVISE_MARGIN,
        }
    }

    pub fn project(&self, g: &[f64]) -> Result<Vec<f64>> {
        check_width(g, self.map.cols())?;
        Ok(self.map.view().matvec(g))
    }

    /// `Σ_{v'≠v} max{0, margin + (w_v' − w_v)·W g}` and `∂/∂W`.
    pub fn loss_and_grad(
        &self,
        g: &[f64],
        target: usize,
        class_emb: &Tensor2,
    ) -> Result<(f64, Tensor2)> {
        if class_emb.cols() != self.map.rows() {
            return Err(Error::Shape("class embedding width".into()));
        }
        let q = self.project(g)?;
        let s = class_emb.view().matvec(&q);
        let mut loss = 0.0;
        let mut dq = vec![0.0; q.len()];
        let wv = class_emb.row(target);
        for (c, &sc) in s.iter().enumerate() {
            if c == target {
                continue;
            }
            let m = self.margin + sc - s[target];
            if m > 0.0 {
                loss += m;
                for ((d, a), b) in dq.iter_mut().zip(class_emb.row(c)).zip(wv) {
                    *d += a - b;
                }
            }
        }
        let mut grad = Tensor2::zeros(self.map.rows(), self.map.cols());
        add_outer(grad.as_mut_slice(), &dq, g);
        Ok((loss, grad))
    }
}

impl Scorer for DeviseModel {
    fn scores(&self, g: &[f64], cands: &CandidateSet) -> Result<Vec<f64>> {
        let e = cands.embeddings()?;
        if e.cols() != self.map.rows() {
            return Err(Error::Shape("class embedding width".into()));
        }
        Ok(e.view().matvec(&self.project(g)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub l2: f64,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            epochs: 50,
            batch_size: 32,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            l2: 1e-4,
            seed: 0,
        }
    }
}

pub fn devise_train(
    train: &FeatureSet,
    cands: &CandidateSet,
    config: &BaselineConfig,
) -> Result<(DeviseModel, Vec<f64>)> {
    check_training_set(train)?;
    let targets = cands.targets(train)?;
    let emb = cands.embeddings()?;
    let mut model = DeviseModel::new(emb.cols(), train.width());
    let mut params = ParamStore::new();
    let block = params.add("devise.w", emb.cols(), train.width(), true);
    let losses = run_adam(
        &mut params,
        train.len(),
        config.epochs,
        config.batch_size,
        config.adam,
        config.seed,
        |p, batch| {
            model.map.as_mut_slice().copy_from_slice(p.slice(block));
            let mut grads = p.zeros_like();
            let scale = 1.0 / batch.len() as f64;
            let mut total = 0.0;
            for &i in batch {
                let (l, g) = model.loss_and_grad(train.feature(i), targets[i], emb)?;
                total += l * scale;
                grads
                    .slice_mut(block)
                    .iter_mut()
                    .zip(g.as_slice())
                    .for_each(|(a, b)| *a += b * scale);
            }
            total += p.apply_regularisation(&mut grads, config.l2);
            Ok((total, grads))
        },
    )?;
    model
        .map
        .as_mut_slice()
        .copy_from_slice(params.slice(block));
    Ok((model, losses))
}

/// Direct attribute prediction: one logistic classifier per binarized
/// attribute column; a class scores the product of the probabilities of
/// its signature entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DapModel {
    pub weights: Tensor2,
    pub bias: Vec<f64>,
    /// Fixed probabilities for attributes that never vary in training.
    pub constant: Vec<Option<f64>>,
    /// Fraction of training classes with each attribute on.
    pub prior: Vec<f64>,
    pub prior_normalized: bool,
}

/// `Π_j p_j^{[s_j=+1]} (1 − p_j)^{[s_j=−1]}`
pub fn dap_class_score(probs: &[f64], signature: &[f64]) -> f64 {
    probs
        .iter()
        .zip(signature)
        .map(|(&p, &s)| if s > 0.0 { p } else { 1.0 - p })
        .product()
}

impl DapModel {
    /// Probability that each binarized attribute is on.
    pub fn attribute_probs(&self, g: &[f64]) -> Result<Vec<f64>> {
        check_width(g, self.weights.cols())?;
        Ok((0..self.weights.rows())
            .map(|j| match self.constant[j] {
                Some(p) => p,
                None => sigmoid(crate::numkernel::dot(self.weights.row(j), g) + self.bias[j]),
            })
            .collect())
    }

    /// Log of the (optionally prior-normalized) probability product per
    /// candidate.
    pub fn log_scores(&self, g: &[f64], cands: &CandidateSet) -> Result<Vec<f64>> {
        let s = cands.signatures()?;
        if s.cols() != self.weights.rows() {
            return Err(Error::Shape("signature width".into()));
        }
        let probs = self.attribute_probs(g)?;
        let logit: Vec<f64> = probs.iter().map(|p| (p / (1.0 - p)).ln()).collect();
        Ok((0..s.rows())
            .map(|r| {
                s.row(r)
                    .iter()
                    .enumerate()
                    .map(|(j, &sj)| {
                        let on = sj > 0.0;
                        let lp = match self.constant[j] {
                            Some(p) => {
                                if on {
                                    p.ln()
                                } else {
                                    (1.0 - p).ln()
                                }
                            }
                            None => {
                                let z = if on { logit[j] } else { -logit[j] };
                                log_sigmoid(z)
                            }
                        };
                        let prior = if !self.prior_normalized {
                            0.0
                        } else if on {
                            self.prior[j].ln()
                        } else {
                            (1.0 - self.prior[j]).ln()
                        };
                        lp - prior
                    })
                    .sum()
            })
            .collect())
    }

    /// Class distribution over the candidates.
    pub fn predict(&self, g: &[f64], cands: &CandidateSet) -> Result<Vec<f64>> {
        softmax(&self.log_scores(g, cands)?)
    }
}

impl Scorer for DapModel {
    fn scores(&self, g: &[f64], cands: &CandidateSet) -> Result<Vec<f64>> {
        self.log_scores(g, cands)
    }
}

pub fn dap_train(
    train: &FeatureSet,
    cands: &CandidateSet,
    config: &BaselineConfig,
    prior_normalized: bool,
) -> Result<(DapModel, Vec<f64>)> {
    check_training_set(train)?;
    let targets = cands.targets(train)?;
    let sig = cands.signatures()?;
    let n_attr = sig.cols();
    let f = train.width();
    let n = train.len() as f64;

    // per binarized attribute: positive rate over images and over classes
    let mut pos_images = vec![0usize; n_attr];
    for &t in &targets {
        for (j, &s) in sig.row(t).iter().enumerate() {
            if s > 0.0 {
                pos_images[j] += 1;
            }
        }
    }
    let mut seen = vec![false; cands.len()];
    targets.iter().for_each(|&t| seen[t] = true);
    let train_classes: Vec<usize> = (0..cands.len()).filter(|&c| seen[c]).collect();
    let nc = train_classes.len() as f64;
    let prior: Vec<f64> = (0..n_attr)
        .map(|j| {
            let on = train_classes
                .iter()
                .filter(|&&c| sig.get(c, j) > 0.0)
                .count() as f64;
            (on + 1.0) / (nc + 2.0)
        })
        .collect();
    let constant: Vec<Option<f64>> = (0..n_attr)
        .map(|j| {
            let k = pos_images[j];
            if k == 0 || k == train.len() {
                log::warn!(
                    "attribute column {} never varies in training; using a constant rate",
                    j
                );
                Some((k as f64 + 1.0) / (n + 2.0))
            } else {
                None
            }
        })
        .collect();

    let mut params = ParamStore::new();
    let w = params.add("dap.w", n_attr, f, true);
    let b = params.add("dap.b", n_attr, 1, false);
    let losses = run_adam(
        &mut params,
        train.len(),
        config.epochs,
        config.batch_size,
        config.adam,
        config.seed,
        |p, batch| {
            let mut grads = p.zeros_like();
            let scale = 1.0 / batch.len() as f64;
            let mut total = 0.0;
            let wm = p.mat(w);
            let bias = p.slice(b);
            for &i in batch {
                let g = train.feature(i);
                let mut dz = vec![0.0; n_attr];
                for j in 0..n_attr {
                    if constant[j].is_some() {
                        continue;
                    }
                    let y = u8::from(sig.get(targets[i], j) > 0.0);
                    let (l, d) = crate::numkernel::binary_cross_entropy_with_grad(
                        crate::numkernel::dot(wm.row(j), g) + bias[j],
                        y,
                    )?;
                    total += l * scale;
                    dz[j] = d * scale;
                }
                add_outer(grads.slice_mut(w), &dz, g);
                grads
                    .slice_mut(b)
                    .iter_mut()
                    .zip(&dz)
                    .for_each(|(a, d)| *a += d);
            }
            total += p.apply_regularisation(&mut grads, config.l2);
            Ok((total, grads))
        },
    )?;
    let model = DapModel {
        weights: Tensor2::from_vec(n_attr, f, params.slice(w).to_vec())?,
        bias: params.slice(b).to_vec(),
        constant,
        prior,
        prior_normalized,
    };
    Ok((model, losses))
}

/// Closed-form bilinear model: `score(v') = gᵀ V s_v'`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EszlModel {
    /// F × A
    pub v: Tensor2,
    pub gamma: f64,
    pub lambda: f64,
}

impl Scorer for EszlModel {
    fn scores(&self, g: &[f64], cands: &CandidateSet) -> Result<Vec<f64>> {
        check_width(g, self.v.rows())?;
        let s = cands.signatures()?;
        if s.cols() != self.v.cols() {
            return Err(Error::Shape("signature width".into()));
        }
        let gv = self.v.view().matvec_t(g);
        Ok(s.view().matvec(&gv))
    }
}

fn to_dmatrix(t: &Tensor2) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.as_slice())
}

fn from_dmatrix(m: &DMatrix<f64>) -> Tensor2 {
    let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
    Tensor2::from_rows(&rows).expect("rectangular")
}

/// Inverse of a symmetric positive definite matrix, refusing (numerically)
/// singular ones.
fn spd_inverse(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let max_diag = m.diagonal().iter().cloned().fold(0.0_f64, f64::max);
    let chol = m.cholesky().ok_or_else(|| {
        Error::Singular(format!("{} is singular; use a positive regulariser", what))
    })?;
    let l = chol.l();
    let min_pivot = l
        .diagonal()
        .iter()
        .map(|d| d * d)
        .fold(f64::INFINITY, f64::min);
    if !(min_pivot > 1e-12 * max_diag.max(f64::MIN_POSITIVE)) {
        return Err(Error::Singular(format!(
            "{} is singular; use a positive regulariser",
            what
        )));
    }
    Ok(chol.inverse())
}

/// The problem matrices: G (F × N, features as columns), Y (N × Z one-hot)
/// and S (A × Z, signatures as columns).
pub struct EszlProblem {
    pub g: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub s: DMatrix<f64>,
}

impl EszlProblem {
    pub fn new(train: &FeatureSet, cands: &CandidateSet) -> Result<Self> {
        check_training_set(train)?;
        let targets = cands.targets(train)?;
        let g = to_dmatrix(&train.features).transpose();
        let mut y = DMatrix::zeros(train.len(), cands.len());
        for (i, &t) in targets.iter().enumerate() {
            y[(i, t)] = 1.0;
        }
        let s = to_dmatrix(cands.signatures()?).transpose();
        Ok(EszlProblem { g, y, s })
    }

    pub fn solve(&self, gamma: f64, lambda: f64) -> Result<DMatrix<f64>> {
        if gamma < 0.0 || lambda < 0.0 {
            return Err(Error::Config("regularisers must be non-negative".into()));
        }
        let f = self.g.nrows();
        let a = self.s.nrows();
        let left = spd_inverse(
            &self.g * self.g.transpose() + DMatrix::identity(f, f) * gamma,
            "G Gᵀ + γI",
        )?;
        let right = spd_inverse(
            &self.s * self.s.transpose() + DMatrix::identity(a, a) * lambda,
            "S Sᵀ + λI",
        )?;
        Ok(left * (&self.g * &self.y * self.s.transpose()) * right)
    }

    /// `‖GᵀVS − Y‖² + γ‖VS‖² + λ‖GᵀV‖² + γλ‖V‖²`
    pub fn objective(&self, v: &DMatrix<f64>, gamma: f64, lambda: f64) -> f64 {
        let r = self.g.transpose() * v * &self.s - &self.y;
        r.norm_squared()
            + gamma * (v * &self.s).norm_squared()
            + lambda * (self.g.transpose() * v).norm_squared()
            + gamma * lambda * v.norm_squared()
    }

    /// `2[(GGᵀ + γI) V (SSᵀ + λI) − G Y Sᵀ]`
    pub fn gradient(&self, v: &DMatrix<f64>, gamma: f64, lambda: f64) -> DMatrix<f64> {
        let f = self.g.nrows();
        let a = self.s.nrows();
        let left = &self.g * self.g.transpose() + DMatrix::identity(f, f) * gamma;
        let right = &self.s * self.s.transpose() + DMatrix::identity(a, a) * lambda;
        (left * v * right - &self.g * &self.y * self.s.transpose()) * 2.0
    }
}

pub fn eszl_solve(
    train: &FeatureSet,
    cands: &CandidateSet,
    gamma: f64,
    lambda: f64,
) -> Result<EszlModel> {
    let p = EszlProblem::new(train, cands)?;
    let v = p.solve(gamma, lambda)?;
    Ok(EszlModel {
        v: from_dmatrix(&v),
        gamma,
        lambda,
    })
}

/// Picks (γ, λ) from `grid`² by top-1 accuracy on the validation set; ties
/// keep the earlier grid point.
pub fn eszl_select(
    train: &FeatureSet,
    train_cands: &CandidateSet,
    val: &FeatureSet,
    val_cands: &CandidateSet,
    grid: &[f64],
) -> Result<(EszlModel, f64)> {
    if val.is_empty() {
        return Err(Error::Empty("validation features".into()));
    }
    let p = EszlProblem::new(train, train_cands)?;
    let mut best: Option<(EszlModel, f64)> = None;
    for &gamma in grid {
        for &lambda in grid {
            let model = EszlModel {
                v: from_dmatrix(&p.solve(gamma, lambda)?),
                gamma,
                lambda,
            };
            let acc = evaluate(&model, val, val_cands, &[1])?.topk[0].1;
            if best.as_ref().is_none_or(|(_, b)| acc > *b) {
                best = Some((model, acc));
            }
        }
    }
    best.ok_or_else(|| Error::Empty("ESZL grid".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HubnessStats {
    pub counts: Vec<usize>,
    pub top_share: f64,
    pub skewness: f64,
}

/// Prediction counts per candidate, the largest share, and the skewness
/// `m3 / m2^1.5` of the counts (0 when all counts are equal).
pub fn hubness_stats(predictions: &[usize], n_candidates: usize) -> Result<HubnessStats> {
    if predictions.is_empty() || n_candidates == 0 {
        return Err(Error::Empty("predictions".into()));
    }
    let mut counts = vec![0usize; n_candidates];
    for &p in predictions {
        *counts
            .get_mut(p)
            .ok_or_else(|| Error::OutOfRange(format!("prediction {}", p)))? += 1;
    }
    let n = n_candidates as f64;
    let mean = predictions.len() as f64 / n;
    let (m2, m3) = counts.iter().fold((0.0, 0.0), |(a, b), &c| {
        let d = c as f64 - mean;
        (a + d * d / n, b + d * d * d / n)
    });
    let skewness = if m2 > 0.0 { m3 / m2.powf(1.5) } else { 0.0 };
    let max = *counts.iter().max().expect("nonempty");
    Ok(HubnessStats {
        top_share: max as f64 / predictions.len() as f64,
        counts,
        skewness,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotEval {
    /// (k, accuracy in [0, 1])
    pub topk: Vec<(usize, f64)>,
    pub predictions: Vec<usize>,
    pub hubness: HubnessStats,
}

/// Top-k accuracies of `scorer` over `test` against `cands`.
pub fn evaluate(
    scorer: &dyn Scorer,
    test: &FeatureSet,
    cands: &CandidateSet,
    ks: &[usize],
) -> Result<ZeroShotEval> {
    if test.is_empty() {
        return Err(Error::Empty("test features".into()));
    }
    let targets = cands.targets(test)?;
    let kmax = ks.iter().copied().max().unwrap_or(1).min(cands.len());
    let mut hits = vec![0usize; ks.len()];
    let mut predictions = Vec::with_capacity(test.len());
    for (i, &t) in targets.iter().enumerate() {
        let ranked = predict_topk(&scorer.scores(test.feature(i), cands)?, kmax)?;
        predictions.push(ranked[0]);
        for (h, &k) in hits.iter_mut().zip(ks) {
            if ranked[..k.min(kmax)].contains(&t) {
                *h += 1;
            }
        }
    }
    let n = test.len() as f64;
    Ok(ZeroShotEval {
        topk: ks
            .iter()
            .zip(&hits)
            .map(|(&k, &h)| (k, h as f64 / n))
            .collect(),
        hubness: hubness_stats(&predictions, cands.len())?,
        predictions,
    })
}

/// Binarized signature width of `schema`; the attribute branch output.
pub fn attr_width(schema: &AttributeSchema) -> usize {
    schema.binarized_width()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::{grad_check, GradCheckOptions};
    use crate::schema::{encode_lookup, LabelVector, VerbLabels};
    use std::path::Path;

    fn one_binary_schema() -> AttributeSchema {
        AttributeSchema::parse("g\ta\tbinary\n", Path::new("s")).unwrap()
    }

    fn verbs(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("v{}", i)).collect()
    }

    fn lookup_for(schema: &AttributeSchema, labels: &[Vec<usize>]) -> LookupTable {
        let vs = verbs(labels.len());
        let mut gold = VerbLabels::new();
        for (v, l) in vs.iter().zip(labels) {
            gold.insert(v.clone(), LabelVector(l.clone()));
        }
        encode_lookup(&vs, &gold, schema).unwrap()
    }

    #[test]
    fn attr_logits_hand_case() {
        let schema = one_binary_schema();
        let lookup = lookup_for(&schema, &[vec![1], vec![0]]);
        let mut head = ZeroShotHead::new(HeadKind::Attr, 1, 1, 0);
        head.params.slice_mut(head.attr.unwrap())[0] = 0.3;
        let l = attr_logits(&[1.0], &lookup, &head).unwrap();
        assert_eq!(l, vec![0.3, -0.3]);
        let p = softmax(&l).unwrap();
        assert!((p[0] - 0.645656306).abs() < 1e-8);
        assert!((p[1] - 0.354343694).abs() < 1e-8);
    }

    #[test]
    fn identical_signatures_identical_logits_and_sign_flip() {
        let schema =
            AttributeSchema::parse("g\ta\tbinary\ng\tb\t3\tx,y,z\n", Path::new("s")).unwrap();
        let lookup = lookup_for(&schema, &[vec![1, 2], vec![1, 2], vec![0, 1]]);
        let cands = CandidateSet::from_parts(verbs(3), Some(lookup.clone()), None).unwrap();
        let mut head = ZeroShotHead::new(HeadKind::Attr, 3, 4, 0);
        head.params
            .as_mut_slice()
            .iter_mut()
            .enumerate()
            .for_each(|(i, x)| *x = (i as f64 * 0.37).sin());
        let g = [0.2, -1.0, 0.5];
        let l = head.attr_logits(&g, &cands).unwrap();
        assert_eq!(l[0], l[1]);
        let flipped = Tensor2::from_vec(
            3,
            4,
            cands
                .signatures()
                .unwrap()
                .as_slice()
                .iter()
                .map(|x| -x)
                .collect(),
        )
        .unwrap();
        let neg = flipped.view().matvec(&head.project_attributes(&g).unwrap());
        for (a, b) in l.iter().zip(&neg) {
            assert_eq!(*a, -b);
        }
    }

    #[test]
    fn emb_logits_cases() {
        let head = ZeroShotHead::new(HeadKind::Emb, 2, 0, 3);
        let e = Tensor2::from_rows(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(emb_logits(&[1.0, 1.0], &e, &head).unwrap(), vec![0.0, 0.0]);

        let mut head = ZeroShotHead::new(HeadKind::Emb, 2, 0, 3);
        let w = [0.5, -1.0, 2.0, 0.25, -0.75, 1.5];
        head.params.slice_mut(head.emb.unwrap()).copy_from_slice(&w);
        let g = [0.3, -0.7];
        let rows = [[0.1, 0.2, 0.3], [-1.0, 0.5, 2.0], [0.0, 0.0, 1.0]];
        let e = Tensor2::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        let q = [
            w[0] * g[0] + w[1] * g[1],
            w[2] * g[0] + w[3] * g[1],
            w[4] * g[0] + w[5] * g[1],
        ];
        let l = emb_logits(&g, &e, &head).unwrap();
        for (r, li) in rows.iter().zip(&l) {
            let expect = r[0] * q[0] + r[1] * q[1] + r[2] * q[2];
            assert!((li - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn joint_argmax_can_differ_from_both_branches() {
        // attr logits [2, 0, 1.5], emb logits [0, 2, 1.5]: joint [2, 2, 3]
        let schema = one_binary_schema();
        let lookup = lookup_for(&schema, &[vec![1], vec![0], vec![1]]);
        let e = Tensor2::from_rows(&[vec![0.0], vec![2.0], vec![1.5]]).unwrap();
        let mut head = ZeroShotHead::new(HeadKind::Joint, 1, 1, 1);
        head.params.slice_mut(head.attr.unwrap())[0] = 1.0;
        head.params.slice_mut(head.emb.unwrap())[0] = 1.0;
        // signatures give ±1, so scale attr branch via the feature and
        // compare argmaxes only
        let cands =
            CandidateSet::from_parts(verbs(3), Some(lookup.clone()), Some(e.clone())).unwrap();
        let g = [1.0];
        let a = head.attr_logits(&g, &cands).unwrap();
        let m = head.emb_logits(&g, &cands).unwrap();
        let j = joint_logits(&g, &lookup, &e, &head).unwrap();
        assert_eq!(j, a.iter().zip(&m).map(|(x, y)| x + y).collect::<Vec<_>>());
        let am = |v: &[f64]| predict_topk(v, 1).unwrap()[0];
        // a = [1, -1, 1] → 0; m = [0, 2, 1.5] → 1; j = [1, 1, 2.5] → 2
        assert_eq!((am(&a), am(&m), am(&j)), (0, 1, 2));
    }

    #[test]
    fn topk_tie_break_and_shift() {
        assert_eq!(predict_topk(&[0.0; 10], 5).unwrap(), vec![0, 1, 2, 3, 4]);
        let s = [0.5, 2.0, -1.0, 2.0];
        assert_eq!(predict_topk(&s, 4).unwrap(), vec![1, 3, 0, 2]);
        let shifted: Vec<f64> = s.iter().map(|x| x + 7.5).collect();
        assert_eq!(predict_topk(&shifted, 4).unwrap(), vec![1, 3, 0, 2]);
        assert!(predict_topk(&s, 0).is_err());
        assert!(predict_topk(&s, 5).is_err());
    }

    #[test]
    fn product_ensemble_cases() {
        let p = prob_product_ensemble(&[vec![0.6, 0.4], vec![0.5, 0.5]]).unwrap();
        assert!((p[0] - 0.6).abs() < 1e-15 && (p[1] - 0.4).abs() < 1e-15);
        let q = prob_product_ensemble(&[vec![0.6, 0.4], vec![0.3, 0.7]]).unwrap();
        assert!((q[0] - 0.18 / 0.46).abs() < 1e-15);
        assert!((q[1] - 0.28 / 0.46).abs() < 1e-15);
        let r = product_via_logs(&[vec![0.6, 0.4], vec![0.3, 0.7]]).unwrap();
        assert!((q[0] - r[0]).abs() < 1e-12);
        assert!(prob_product_ensemble(&[vec![0.5, 0.5], vec![1.0]]).is_err());
    }

    #[test]
    fn dap_enumeration_example() {
        let probs = [0.8, 0.6];
        assert!((dap_class_score(&probs, &[1.0, 1.0]) - 0.48).abs() < 1e-15);
        assert!((dap_class_score(&probs, &[1.0, -1.0]) - 0.32).abs() < 1e-15);
    }

    #[test]
    fn hubness_cases() {
        let h = hubness_stats(&[2, 2, 2, 2], 4).unwrap();
        assert_eq!(h.top_share, 1.0);
        let u = hubness_stats(&[0, 1, 2, 3, 0, 1, 2, 3], 4).unwrap();
        assert_eq!(u.top_share, 0.25);
        assert_eq!(u.skewness, 0.0);
        // counts [5,1,1,1]: mean 2, deviations [3,-1,-1,-1]
        let preds: Vec<usize> = [0, 0, 0, 0, 0, 1, 2, 3].to_vec();
        let s = hubness_stats(&preds, 4).unwrap();
        let m2 = (9.0 + 1.0 + 1.0 + 1.0) / 4.0;
        let m3 = (27.0 - 1.0 - 1.0 - 1.0) / 4.0;
        assert!((s.skewness - m3 / f64::powf(m2, 1.5)).abs() < 1e-15);
        assert!((s.skewness - 1.1547005383792517).abs() < 1e-12);
    }

    fn toy_problem() -> (FeatureSet, CandidateSet) {
        let schema =
            AttributeSchema::parse("g\ta\tbinary\ng\tb\t3\tx,y,z\n", Path::new("s")).unwrap();
        let lookup = lookup_for(&schema, &[vec![1, 0], vec![0, 2], vec![1, 1]]);
        let e = Tensor2::from_rows(&[vec![0.5, -0.2], vec![-0.3, 0.8], vec![0.1, 0.4]]).unwrap();
        let cands = CandidateSet::from_parts(verbs(3), Some(lookup), Some(e)).unwrap();
        let feats = Tensor2::from_rows(&[
            vec![0.3, -0.2, 0.9],
            vec![-0.5, 0.4, 0.1],
            vec![0.7, 0.7, -0.3],
            vec![0.2, -0.9, 0.5],
        ])
        .unwrap();
        let set = FeatureSet::new(verbs(3), vec![0, 1, 2, 1], feats).unwrap();
        (set, cands)
    }

    #[test]
    fn three_term_loss_gradients() {
        let (set, cands) = toy_problem();
        let targets = cands.targets(&set).unwrap();
        for kind in [HeadKind::Attr, HeadKind::Emb, HeadKind::Joint] {
            let mut head = ZeroShotHead::new(kind, 3, 4, 2);
            let mut rng = Prng::new(4);
            let p: Vec<f64> = (0..head.params.len()).map(|_| rng.normal()).collect();
            let r = grad_check(
                |theta| {
                    head.params.assign(theta).unwrap();
                    let items: Vec<(&[f64], usize)> = (0..set.len())
                        .map(|i| (set.feature(i), targets[i]))
                        .collect();
                    let (l, g) = head.loss_and_grad(&items, &cands, 1e-3).unwrap();
                    (l, g.as_slice().to_vec())
                },
                &p,
                GradCheckOptions::default(),
            );
            assert!(r.max_rel_error < 1e-4, "{kind}: {r:?}");
        }
    }

    #[test]
    fn single_class_training_is_degenerate_but_finite() {
        let schema = one_binary_schema();
        let lookup = lookup_for(&schema, &[vec![1]]);
        let cands = CandidateSet::from_parts(verbs(1), Some(lookup), None).unwrap();
        let set = FeatureSet::new(
            verbs(1),
            vec![0, 0],
            Tensor2::from_rows(&[vec![1.0], vec![2.0]]).unwrap(),
        )
        .unwrap();
        let cfg = ZeroShotConfig {
            kind: HeadKind::Attr,
            epochs: 3,
            ..Default::default()
        };
        let (head, losses) = train_zeroshot(&set, &cands, &cfg).unwrap();
        assert!(losses.iter().all(|&l| l == 0.0));
        assert!(head.params.is_finite());
    }

    #[test]
    fn labels_outside_candidates_rejected() {
        let (set, _) = toy_problem();
        let schema = one_binary_schema();
        let lookup = lookup_for(&schema, &[vec![1], vec![0]]);
        let cands = CandidateSet::from_parts(verbs(2), Some(lookup), None).unwrap();
        let err = train_zeroshot(&set, &cands, &ZeroShotConfig::default()).unwrap_err();
        assert!(err.to_string().contains("v2"));
    }

    #[test]
    fn devise_cases() {
        let (set, cands) = toy_problem();
        let e = cands.embeddings().unwrap().clone();
        let m = DeviseModel::new(2, 3);
        let (l, _) = m.loss_and_grad(set.feature(0), 0, &e).unwrap();
        assert!((l - 0.1 * 2.0).abs() < 1e-15);

        // projected feature equal to a scaled true embedding wins by margin
        let mut m = DeviseModel::new(2, 2);
        m.map = Tensor2::identity(2);
        let far = Tensor2::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        let (l, g) = m.loss_and_grad(&[5.0, 0.0], 0, &far).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn devise_gradients_away_from_kinks() {
        let (set, cands) = toy_problem();
        let e = cands.embeddings().unwrap().clone();
        let targets = cands.targets(&set).unwrap();
        let mut m = DeviseModel::new(2, 3);
        let mut rng = Prng::new(9);
        let p: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let r = grad_check(
            |theta| {
                m.map.as_mut_slice().copy_from_slice(theta);
                let mut loss = 0.0;
                let mut grad = vec![0.0; 6];
                for i in 0..set.len() {
                    let (l, g) = m.loss_and_grad(set.feature(i), targets[i], &e).unwrap();
                    loss += l;
                    grad.iter_mut().zip(g.as_slice()).for_each(|(a, b)| *a += b);
                }
                (loss, grad)
            },
            &p,
            GradCheckOptions {
                skip_kinks: true,
                ..Default::default()
            },
        );
        assert!(r.checked > 0);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn dap_matches_brute_force() {
        let (set, cands) = toy_problem();
        let (m, _) = dap_train(
            &set,
            &cands,
            &BaselineConfig {
                epochs: 5,
                ..Default::default()
            },
            false,
        )
        .unwrap();
        let g = set.feature(2);
        let probs = m.attribute_probs(g).unwrap();
        let sig = cands.signatures().unwrap();
        let brute: Vec<f64> = (0..3)
            .map(|r| dap_class_score(&probs, sig.row(r)))
            .collect();
        let z: f64 = brute.iter().sum();
        let pred = m.predict(g, &cands).unwrap();
        for (a, b) in pred.iter().zip(&brute) {
            assert!((a - b / z).abs() < 1e-12);
        }
    }

    #[test]
    fn dap_uniform_probabilities_give_uniform_classes() {
        let (_, cands) = toy_problem();
        let m = DapModel {
            weights: Tensor2::zeros(4, 3),
            bias: vec![0.0; 4],
            constant: vec![None; 4],
            prior: vec![0.5; 4],
            prior_normalized: false,
        };
        let p = m.predict(&[1.0, 2.0, 3.0], &cands).unwrap();
        for x in p {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn eszl_two_by_two_by_hand() {
        // G = [[1,2],[3,4]] (features as columns), Y = I, S = [[1,-1]]
        let schema = one_binary_schema();
        let lookup = lookup_for(&schema, &[vec![1], vec![0]]);
        let cands = CandidateSet::from_parts(verbs(2), Some(lookup), None).unwrap();
        let feats = Tensor2::from_rows(&[vec![1.0, 3.0], vec![2.0, 4.0]]).unwrap();
        let set = FeatureSet::new(verbs(2), vec![0, 1], feats).unwrap();
        let (gamma, lambda) = (0.5, 2.0);
        let m = eszl_solve(&set, &cands, gamma, lambda).unwrap();

        // GGᵀ + γI = [[5.5, 11],[11, 25.5]]; its inverse by the 2×2 formula
        let (a, b, d) = (5.5, 11.0, 25.5);
        let det = a * d - b * b;
        let inv = [[d / det, -b / det], [-b / det, a / det]];
        // G Y Sᵀ = G [1, -1]ᵀ = [1-2, 3-4] = [-1, -1]; (SSᵀ + λ)⁻¹ = 1/4
        let rhs = [-1.0, -1.0];
        let v0 = (inv[0][0] * rhs[0] + inv[0][1] * rhs[1]) / 4.0;
        let v1 = (inv[1][0] * rhs[0] + inv[1][1] * rhs[1]) / 4.0;
        assert!((m.v.get(0, 0) - v0).abs() < 1e-10);
        assert!((m.v.get(1, 0) - v1).abs() < 1e-10);
    }

    #[test]
    fn eszl_stationary_and_shrinks() {
        let (set, cands) = toy_problem();
        let p = EszlProblem::new(&set, &cands).unwrap();
        let v = p.solve(0.1, 0.3).unwrap();
        assert!(p.gradient(&v, 0.1, 0.3).norm() < 1e-8);
        let mut last = f64::INFINITY;
        for r in [1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3] {
            let n = p.solve(r, r).unwrap().norm();
            assert!(n < last);
            last = n;
        }
    }

    #[test]
    fn eszl_singular_gram_rejected() {
        // width 3 features from 2 items: GGᵀ has rank 2
        let schema = one_binary_schema();
        let lookup = lookup_for(&schema, &[vec![1], vec![0]]);
        let cands = CandidateSet::from_parts(verbs(2), Some(lookup), None).unwrap();
        let feats = Tensor2::from_rows(&[vec![1.0, 0.0, 2.0], vec![0.0, 1.0, 1.0]]).unwrap();
        let set = FeatureSet::new(verbs(2), vec![0, 1], feats).unwrap();
        let err = eszl_solve(&set, &cands, 0.0, 1.0).unwrap_err();
        assert!(matches!(err, Error::Singular(_)));
        assert!(eszl_solve(&set, &cands, 1e-3, 1.0).is_ok());
    }
}
