//! Finite-difference checks of every hand-derived gradient at toy shapes.

use std::path::Path;

use serde::Serialize;

use crate::dataio::{FeatureSet, Prng};
use crate::error::Result;
use crate::numkernel::{grad_check, GradCheckOptions, Tensor2};
use crate::schema::{encode_lookup, AttributeSchema, LabelVector, VerbLabels};
use crate::textattr::{
    AttrModel, DefinitionCorpus, EmbeddingTable, Encoded, EncoderKind, Instance, PretrainModel,
    TextInputs, Vocab,
};
use crate::zeroshot::{CandidateSet, DeviseModel, HeadKind, ZeroShotHead};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckRow {
    pub encoder: String,
    pub head: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub passed: bool,
}

impl GradcheckRow {
    pub fn component(&self) -> String {
        format!("{}/{}", self.encoder, self.head)
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub tolerance: f64,
    /// Test hook: scales the analytic gradient of the named component
    /// (`encoder/head`) so its check must fail.
    pub corrupt: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            tolerance: DEFAULT_TOLERANCE,
            corrupt: None,
        }
    }
}

fn toy_schema() -> AttributeSchema {
    AttributeSchema::parse(
        "g1\tbin\tbinary\ng2\tcat\t3\tx,y,z\ng2\tother\tbinary\n",
        Path::new("<toy schema>"),
    )
    .expect("toy schema")
}

struct ToyText {
    schema: AttributeSchema,
    table: EmbeddingTable,
    corpus: DefinitionCorpus,
    gold: VerbLabels,
    verbs: Vec<String>,
}

fn toy_text(rng: &mut Prng) -> ToyText {
    let schema = toy_schema();
    let words = ["alpha", "beta", "gamma", "delta", "run", "jump", "sit"];
    let mut table = EmbeddingTable::new(5);
    for w in words {
        let v: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        table.insert(w, &v).expect("dim");
    }
    let verbs: Vec<String> = ["run", "jump", "sit"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let defs = [
        "alpha beta gamma",
        "delta alpha unknown",
        "gamma gamma beta",
    ];
    let mut corpus = DefinitionCorpus::new();
    let mut gold = VerbLabels::new();
    for (i, (v, d)) in verbs.iter().zip(defs).enumerate() {
        corpus.push(v, d.split(' ').map(str::to_string).collect());
        gold.insert(v.clone(), LabelVector(vec![i % 2, i % 3, (i + 1) % 2]));
    }
    ToyText {
        schema,
        table,
        corpus,
        gold,
        verbs,
    }
}

fn check<F>(mut f: F, params: &[f64], skip_kinks: bool, corrupt: bool) -> (f64, usize)
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let r = grad_check(
        |theta| {
            let (l, mut g) = f(theta);
            if corrupt {
                g.iter_mut().for_each(|x| *x *= 1.1);
            }
            (l, g)
        },
        params,
        GradCheckOptions {
            skip_kinks,
            ..Default::default()
        },
    );
    (r.max_rel_error, r.checked)
}

fn attr_head_check(
    kind: EncoderKind,
    toy: &ToyText,
    rng: &mut Prng,
    corrupt: bool,
) -> Result<(f64, usize)> {
    let inputs = TextInputs {
        embeddings: Some(&toy.table),
        definitions: Some(&toy.corpus),
    };
    let bow = Vocab::build(&toy.corpus, &toy.verbs, 6);
    let bgru_vocab = Vocab::build_with_unk(
        toy.corpus.iter().flat_map(|(_, d)| d).map(Vec::as_slice),
        10,
    );
    let mut model = AttrModel::new(
        kind,
        &toy.schema,
        Some(bow),
        Some((bgru_vocab, 5, 5, 32)),
        toy.table.dim(),
    )?;
    let n = model.params.len();
    let theta: Vec<f64> = (0..n).map(|_| 0.5 * rng.normal()).collect();
    if let Some(layout) = &model.bgru {
        model.params.set_trainable(layout.embeddings, true);
    }
    let instances: Vec<Instance> = toy
        .verbs
        .iter()
        .map(|v| Instance {
            verb: v.clone(),
            definition: kind.definition.map(|_| 0),
        })
        .collect();
    let mut err = None;
    let out = check(
        |p| {
            model.params.assign(p).expect("len");
            let batch: Result<Vec<(Encoded, &LabelVector)>> = instances
                .iter()
                .map(|i| Ok((model.encode(&inputs, i)?, &toy.gold[&i.verb])))
                .collect();
            match batch.and_then(|b| model.loss_and_grad(&b, None, 1e-3)) {
                Ok((l, g)) => (l, g.as_slice().to_vec()),
                Err(e) => {
                    err.get_or_insert(e);
                    (0.0, vec![0.0; n])
                }
            }
        },
        &theta,
        false,
        corrupt,
    );
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

fn pretrain_check(rng: &mut Prng, corrupt: bool) -> Result<(f64, usize)> {
    let vocab = Vocab::build_with_unk([["a", "b", "c"].map(String::from).as_slice()], 10);
    let mut m = PretrainModel::new(vocab, 3, 5, 32, 4);
    m.params.set_trainable(m.bgru.embeddings, true);
    let theta: Vec<f64> = (0..m.params.len()).map(|_| 0.5 * rng.normal()).collect();
    let d1: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
    let d2: Vec<String> = ["c", "x"].map(String::from).to_vec();
    let t: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..4).map(|_| rng.normal()).collect())
        .collect();
    let mut err = None;
    let n = m.params.len();
    let out = check(
        |p| {
            m.params.assign(p).expect("len");
            let batch = [
                (d1.as_slice(), &t[0][..], &t[1][..]),
                (d2.as_slice(), &t[2][..], &t[3][..]),
            ];
            // a wide margin keeps the hinge active everywhere
            match m.loss_and_grad(&batch, 5.0) {
                Ok((l, g)) => (l, g.as_slice().to_vec()),
                Err(e) => {
                    err.get_or_insert(e);
                    (0.0, vec![0.0; n])
                }
            }
        },
        &theta,
        false,
        corrupt,
    );
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

fn toy_features(rng: &mut Prng) -> Result<(FeatureSet, CandidateSet)> {
    let schema = toy_schema();
    let verbs: Vec<String> = (0..4).map(|i| format!("c{}", i)).collect();
    let mut gold = VerbLabels::new();
    for (i, v) in verbs.iter().enumerate() {
        gold.insert(v.clone(), LabelVector(vec![i % 2, i % 3, (i / 2) % 2]));
    }
    let lookup = encode_lookup(&verbs, &gold, &schema)?;
    let emb_rows: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..3).map(|_| rng.normal()).collect())
        .collect();
    let cands = CandidateSet::from_parts(
        verbs.clone(),
        Some(lookup),
        Some(Tensor2::from_rows(&emb_rows)?),
    )?;
    let feats: Vec<Vec<f64>> = (0..6)
        .map(|_| (0..4).map(|_| rng.normal()).collect())
        .collect();
    let set = FeatureSet::new(verbs, vec![0, 1, 2, 3, 1, 2], Tensor2::from_rows(&feats)?)?;
    Ok((set, cands))
}

fn zeroshot_check(kind: HeadKind, rng: &mut Prng, corrupt: bool) -> Result<(f64, usize)> {
    let (set, cands) = toy_features(rng)?;
    let targets = cands.targets(&set)?;
    let mut head = ZeroShotHead::new(kind, set.width(), cands.signatures()?.cols(), 3);
    let theta: Vec<f64> = (0..head.params.len()).map(|_| rng.normal()).collect();
    let items: Vec<(&[f64], usize)> = (0..set.len())
        .map(|i| (set.feature(i), targets[i]))
        .collect();
    let n = theta.len();
    let mut err = None;
    let out = check(
        |p| {
            head.params.assign(p).expect("len");
            match head.loss_and_grad(&items, &cands, 1e-3) {
                Ok((l, g)) => (l, g.as_slice().to_vec()),
                Err(e) => {
                    err.get_or_insert(e);
                    (0.0, vec![0.0; n])
                }
            }
        },
        &theta,
        false,
        corrupt,
    );
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

fn devise_check(rng: &mut Prng, corrupt: bool) -> Result<(f64, usize)> {
    let (set, cands) = toy_features(rng)?;
    let targets = cands.targets(&set)?;
    let emb = cands.embeddings()?.clone();
    let mut m = DeviseModel::new(emb.cols(), set.width());
    let theta: Vec<f64> = (0..m.map.as_slice().len()).map(|_| rng.normal()).collect();
    let n = theta.len();
    let mut err = None;
    let out = check(
        |p| {
            m.map.as_mut_slice().copy_from_slice(p);
            let mut loss = 0.0;
            let mut grad = vec![0.0; n];
            for i in 0..set.len() {
                match m.loss_and_grad(set.feature(i), targets[i], &emb) {
                    Ok((l, g)) => {
                        loss += l;
                        grad.iter_mut().zip(g.as_slice()).for_each(|(a, b)| *a += b);
                    }
                    Err(e) => {
                        err.get_or_insert(e);
                    }
                }
            }
            (loss, grad)
        },
        &theta,
        true,
        corrupt,
    );
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Runs every check and returns one row per (encoder, head) pair.
pub fn run_gradchecks(config: &GradcheckConfig) -> Result<Vec<GradcheckRow>> {
    let root = Prng::new(config.seed);
    let mut rows = Vec::new();
    let mut push = |encoder: &str, head: &str, res: (f64, usize)| {
        rows.push(GradcheckRow {
            encoder: encoder.to_string(),
            head: head.to_string(),
            max_rel_error: res.0,
            checked: res.1,
            passed: res.0 <= config.tolerance && res.1 > 0,
        });
    };
    let corrupt =
        |enc: &str, head: &str| config.corrupt.as_deref() == Some(&format!("{enc}/{head}"));

    let mut rng = root.derive(1);
    let toy = toy_text(&mut rng);
    for kind in EncoderKind::all() {
        let enc = kind.to_string();
        let res = attr_head_check(kind, &toy, &mut rng, corrupt(&enc, "attributes"))?;
        push(&enc, "attributes", res);
    }
    let res = pretrain_check(&mut root.derive(2), corrupt("bgru", "ranking"))?;
    push("bgru", "ranking", res);
    for kind in [HeadKind::Attr, HeadKind::Emb, HeadKind::Joint] {
        let head = kind.to_string();
        let res = zeroshot_check(kind, &mut root.derive(3), corrupt("features", &head))?;
        push("features", &head, res);
    }
    let res = devise_check(&mut root.derive(4), corrupt("features", "devise"))?;
    push("features", "devise", res);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_components_pass() {
        let rows = run_gradchecks(&GradcheckConfig::default()).unwrap();
        assert_eq!(rows.len(), 12);
        for r in &rows {
            assert!(r.passed, "{} rel err {}", r.component(), r.max_rel_error);
        }
    }

    #[test]
    fn corruption_is_reported() {
        let cfg = GradcheckConfig {
            corrupt: Some("nbow/attributes".into()),
            ..Default::default()
        };
        let rows = run_gradchecks(&cfg).unwrap();
        let failed: Vec<String> = rows
            .iter()
            .filter(|r| !r.passed)
            .map(GradcheckRow::component)
            .collect();
        assert_eq!(failed, vec!["nbow/attributes".to_string()]);
    }
}
