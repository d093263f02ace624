//! Python bindings: schema handling, metrics, the zero-shot scoring helpers,
//! saved-model inference and the CLI pipeline.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::Parser;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use verbattr::cli::RunConfig;
use verbattr::dataio::{self, Prng, SavedModel};
use verbattr::schema::{self, AttributeSchema, EffectsScope, LabelVector, VerbLabels};
use verbattr::textattr::{DefinitionCorpus, EmbeddingTable, TextInputs};
use verbattr::zeroshot::{self, CandidateSet, Scorer};
use verbattr::{numkernel, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// The verb attribute schema.
#[pyclass(name = "Schema", module = "verbattr_py", frozen)]
struct PySchema {
    inner: AttributeSchema,
}

#[pymethods]
impl PySchema {
    /// The bundled schema, or the one in `path`.
    #[new]
    #[pyo3(signature = (path=None))]
    fn new(path: Option<PathBuf>) -> PyResult<Self> {
        let inner = match path {
            Some(p) => AttributeSchema::from_file(&p).map_err(to_py)?,
            None => schema::build_schema(),
        };
        Ok(PySchema { inner })
    }

    fn attributes(&self) -> Vec<String> {
        self.inner
            .attributes()
            .iter()
            .map(|a| a.name.clone())
            .collect()
    }

    fn groups(&self) -> Vec<String> {
        self.inner.groups().to_vec()
    }

    fn group_sizes(&self) -> Vec<usize> {
        self.inner.group_sizes()
    }

    fn binarized_width(&self) -> usize {
        self.inner.binarized_width()
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    /// ±1 signature row for a label vector.
    fn binarize(&self, labels: Vec<usize>) -> PyResult<Vec<f64>> {
        schema::binarize(&self.inner, &LabelVector(labels)).map_err(to_py)
    }

    fn debinarize(&self, row: Vec<f64>) -> PyResult<Vec<usize>> {
        schema::debinarize(&self.inner, &row)
            .map(|l| l.0)
            .map_err(to_py)
    }

    /// Per-group, macro and micro accuracy of `pred` against `gold`.
    #[pyo3(signature = (pred, gold, conditional_effects=false))]
    fn accuracy(
        &self,
        pred: BTreeMap<String, Vec<usize>>,
        gold: BTreeMap<String, Vec<usize>>,
        conditional_effects: bool,
    ) -> PyResult<BTreeMap<String, f64>> {
        let wrap = |m: BTreeMap<String, Vec<usize>>| -> VerbLabels {
            m.into_iter().map(|(k, v)| (k, LabelVector(v))).collect()
        };
        let scope = if conditional_effects {
            EffectsScope::Conditional
        } else {
            EffectsScope::Unconditional
        };
        let r = schema::attribute_accuracy(&wrap(pred), &wrap(gold), &self.inner, scope)
            .map_err(to_py)?;
        let mut out: BTreeMap<String, f64> = r
            .group_names
            .iter()
            .cloned()
            .zip(r.per_group.iter().copied())
            .collect();
        out.insert("macro".into(), r.macro_avg);
        out.insert("micro".into(), r.micro_avg);
        Ok(out)
    }

    /// Reads an attribute CSV into a dict of label vectors.
    fn load_attributes(&self, path: PathBuf) -> PyResult<BTreeMap<String, Vec<usize>>> {
        let labels = dataio::load_attributes(&path, &self.inner).map_err(to_py)?;
        Ok(labels.into_iter().map(|(k, v)| (k, v.0)).collect())
    }
}

/// A saved model loaded for inference.
#[pyclass(name = "Model", module = "verbattr_py")]
struct PyModel {
    inner: SavedModel,
    schema: AttributeSchema,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf, schema: &PySchema) -> PyResult<Self> {
        let inner = dataio::load_model(&path, &schema.inner).map_err(to_py)?;
        Ok(PyModel {
            inner,
            schema: schema.inner.clone(),
        })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind()
    }

    /// Attribute labels predicted for each verb (attribute models only).
    #[pyo3(signature = (verbs, embeddings=None, definitions=None))]
    fn predict_attributes(
        &self,
        verbs: Vec<String>,
        embeddings: Option<PathBuf>,
        definitions: Option<PathBuf>,
    ) -> PyResult<BTreeMap<String, Vec<usize>>> {
        let SavedModel::Attributes(model) = &self.inner else {
            return Err(PyValueError::new_err("not an attribute model"));
        };
        let table: Option<EmbeddingTable> = embeddings
            .map(|p| dataio::load_embeddings(&p, None))
            .transpose()
            .map_err(to_py)?;
        let corpus: Option<DefinitionCorpus> = definitions
            .map(|p| dataio::load_definitions(&p))
            .transpose()
            .map_err(to_py)?;
        let inputs = TextInputs {
            embeddings: table.as_ref(),
            definitions: corpus.as_ref(),
        };
        let pred = model.predict_all(&inputs, &verbs).map_err(to_py)?;
        Ok(pred.into_iter().map(|(k, v)| (k, v.0)).collect())
    }

    /// Class scores for one image feature over candidate classes given by
    /// their ±1 attribute signatures and/or embeddings.
    #[pyo3(signature = (feature, signatures=None, embeddings=None))]
    fn scores(
        &self,
        feature: Vec<f64>,
        signatures: Option<Vec<Vec<f64>>>,
        embeddings: Option<Vec<Vec<f64>>>,
    ) -> PyResult<Vec<f64>> {
        let scorer: &dyn Scorer = match &self.inner {
            SavedModel::ZeroShot(h) => h,
            SavedModel::Dap(m) => m,
            SavedModel::Eszl(m) => m,
            SavedModel::Devise(m) => m,
            other => {
                return Err(PyValueError::new_err(format!(
                    "a {} model cannot score images",
                    other.kind()
                )))
            }
        };
        let n = signatures
            .as_ref()
            .map(Vec::len)
            .or(embeddings.as_ref().map(Vec::len))
            .ok_or_else(|| PyValueError::new_err("give signatures or embeddings"))?;
        let verbs: Vec<String> = (0..n).map(|i| format!("c{}", i)).collect();
        let lookup = signatures
            .map(|rows| {
                let labels: VerbLabels = rows
                    .iter()
                    .zip(&verbs)
                    .map(|(r, v)| schema::debinarize(&self.schema, r).map(|l| (v.clone(), l)))
                    .collect::<verbattr::Result<_>>()?;
                schema::encode_lookup(&verbs, &labels, &self.schema)
            })
            .transpose()
            .map_err(to_py)?;
        let emb = embeddings
            .map(|rows| numkernel::Tensor2::from_rows(&rows))
            .transpose()
            .map_err(to_py)?;
        let cands = CandidateSet::from_parts(verbs, lookup, emb).map_err(to_py)?;
        scorer.scores(&feature, &cands).map_err(to_py)
    }
}

/// Indices of the `k` highest scores, best first; ties go to the lower index.
#[pyfunction]
fn predict_topk(scores: Vec<f64>, k: usize) -> PyResult<Vec<usize>> {
    zeroshot::predict_topk(&scores, k).map_err(to_py)
}

/// Normalised elementwise product of class distributions.
#[pyfunction]
fn prob_product_ensemble(dists: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    zeroshot::prob_product_ensemble(&dists).map_err(to_py)
}

#[pyfunction]
fn softmax(v: Vec<f64>) -> PyResult<Vec<f64>> {
    numkernel::softmax(&v).map_err(to_py)
}

/// Prediction counts, top share and skewness of the counts.
#[pyfunction]
fn hubness(predictions: Vec<usize>, n_candidates: usize) -> PyResult<(Vec<usize>, f64, f64)> {
    let h = zeroshot::hubness_stats(&predictions, n_candidates).map_err(to_py)?;
    Ok((h.counts, h.top_share, h.skewness))
}

/// `n` draws from the seeded xoshiro256** stream.
#[pyfunction]
fn prng_u64(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = Prng::new(seed);
    (0..n).map(|_| rng.next_u64()).collect()
}

/// Reads a feature file: (verbs, labels, rows).
#[pyfunction]
fn load_features(path: PathBuf) -> PyResult<(Vec<String>, Vec<usize>, Vec<Vec<f64>>)> {
    let set = dataio::read_feature_file(&path).map_err(to_py)?;
    let rows = (0..set.len()).map(|i| set.feature(i).to_vec()).collect();
    Ok((set.verbs, set.labels, rows))
}

/// Runs the command-line pipeline with `args` (without the program name)
/// and returns (exit code, key-value report).
#[pyfunction]
fn run(args: Vec<String>) -> PyResult<(i32, BTreeMap<String, String>)> {
    let argv = std::iter::once("verbattr".to_string()).chain(args);
    let config =
        RunConfig::try_parse_from(argv).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let outcome = verbattr::cli::run(&config).map_err(to_py)?;
    let code = if outcome.ok { 0 } else { 1 };
    Ok((code, outcome.report.values.into_iter().collect()))
}

#[pymodule]
pub fn verbattr_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchema>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(predict_topk, m)?)?;
    m.add_function(wrap_pyfunction!(prob_product_ensemble, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(hubness, m)?)?;
    m.add_function(wrap_pyfunction!(prng_u64, m)?)?;
    m.add_function(wrap_pyfunction!(load_features, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
