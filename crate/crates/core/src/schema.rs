//! The verb-attribute taxonomy, ±1 class-signature lookup tables, and the
//! attribute-level accuracy metrics.
//!
//! The taxonomy is data: [`build_schema`] parses the canonical schema file
//! bundled with the crate, and [`AttributeSchema::parse`] accepts any file in
//! the same format:
//!
//! ```text
//! group<TAB>name<TAB>arity<TAB>value1,value2,...
//! ```
//!
//! `arity` is either `binary` or the number of categorical values (≥ 2).
//! Lines starting with `#` are comments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numkernel::Tensor2;

const CANONICAL_SCHEMA: &str = include_str!("../data/schema.tsv");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arity {
    Binary,
    Categorical(usize),
}

impl Arity {
    /// Number of distinct label values.
    pub fn n_values(self) -> usize {
        match self {
            Arity::Binary => 2,
            Arity::Categorical(d) => d,
        }
    }

    /// Columns this attribute occupies in a lookup table / binarized row.
    pub fn width(self) -> usize {
        match self {
            Arity::Binary => 1,
            Arity::Categorical(d) => d,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub group: String,
    pub arity: Arity,
    pub values: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSchema {
    attributes: Vec<AttributeSpec>,
    groups: Vec<String>,
    group_of: Vec<usize>,
}

/// Whether an Effects attribute is scored for every verb or only for verbs
/// whose gold transitivity makes it applicable.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum EffectsScope {
    #[default]
    Unconditional,
    Conditional,
}

/// The bundled 24-attribute taxonomy.
pub fn build_schema() -> AttributeSchema {
    AttributeSchema::parse(CANONICAL_SCHEMA, Path::new("<bundled schema>"))
        .expect("bundled schema parses")
}

impl AttributeSchema {
    pub fn new(attributes: Vec<AttributeSpec>) -> Result<Self> {
        if attributes.is_empty() {
            return Err(Error::Empty("schema has no attributes".into()));
        }
        let mut groups: Vec<String> = Vec::new();
        let mut group_of = Vec::with_capacity(attributes.len());
        for (i, a) in attributes.iter().enumerate() {
            if attributes[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::InvalidLabel(format!(
                    "duplicate attribute name `{}`",
                    a.name
                )));
            }
            if a.values.len() != a.arity.n_values() {
                return Err(Error::InvalidLabel(format!(
                    "attribute `{}` has {} value names for arity {}",
                    a.name,
                    a.values.len(),
                    a.arity.n_values()
                )));
            }
            if let Arity::Categorical(d) = a.arity {
                if d < 2 {
                    return Err(Error::InvalidLabel(format!(
                        "attribute `{}` has categorical arity {}",
                        a.name, d
                    )));
                }
            }
            let g = match groups.iter().position(|g| *g == a.group) {
                Some(g) => g,
                None => {
                    groups.push(a.group.clone());
                    groups.len() - 1
                }
            };
            group_of.push(g);
        }
        Ok(AttributeSchema {
            attributes,
            groups,
            group_of,
        })
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut attrs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 && cols.len() != 3 {
                return Err(Error::parse(
                    origin,
                    line_no,
                    format!("expected 4 tab-separated columns, found {}", cols.len()),
                ));
            }
            let arity = match cols[2].trim() {
                "binary" => Arity::Binary,
                s => match s.parse::<usize>() {
                    Ok(d) if d >= 2 => Arity::Categorical(d),
                    _ => return Err(Error::parse(origin, line_no, format!("bad arity `{}`", s))),
                },
            };
            let values: Vec<String> = match cols.get(3).map(|s| s.trim()) {
                Some(v) if !v.is_empty() => v.split(',').map(|s| s.trim().to_string()).collect(),
                _ if arity == Arity::Binary => vec!["no".into(), "yes".into()],
                _ => return Err(Error::parse(origin, line_no, "missing value names")),
            };
            if values.len() != arity.n_values() {
                return Err(Error::parse(
                    origin,
                    line_no,
                    format!(
                        "{} value names for arity {}",
                        values.len(),
                        arity.n_values()
                    ),
                ));
            }
            attrs.push(AttributeSpec {
                group: cols[0].trim().to_string(),
                name: cols[1].trim().to_string(),
                arity,
                values,
            });
        }
        AttributeSchema::new(attrs).map_err(|e| Error::parse(origin, 0, e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        AttributeSchema::parse(&text, path)
    }

    /// Canonical text form; the fingerprint is computed over this.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for a in &self.attributes {
            let arity = match a.arity {
                Arity::Binary => "binary".to_string(),
                Arity::Categorical(d) => d.to_string(),
            };
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}",
                a.group,
                a.name,
                arity,
                a.values.join(",")
            );
        }
        s
    }

    /// First 16 hex digits of the SHA-256 of the canonical text.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest[..8].iter().map(|b| format!("{:02x}", b)).collect()
    }

    pub fn attributes(&self) -> &[AttributeSpec] {
        &self.attributes
    }

    pub fn attribute(&self, k: usize) -> &AttributeSpec {
        &self.attributes[k]
    }

    /// Number of attributes, K.
    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    pub fn group_index(&self, k: usize) -> usize {
        self.group_of[k]
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.groups.len()];
        for &g in &self.group_of {
            sizes[g] += 1;
        }
        sizes
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    /// Σ_k (d_k if categorical else 1).
    pub fn binarized_width(&self) -> usize {
        self.attributes.iter().map(|a| a.arity.width()).sum()
    }

    /// Column offset of each attribute in the binarized layout.
    pub fn offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.attributes
            .iter()
            .map(|a| {
                let o = off;
                off += a.arity.width();
                o
            })
            .collect()
    }

    /// Total number of distinct label vectors.
    pub fn signature_space(&self) -> u128 {
        self.attributes
            .iter()
            .try_fold(1u128, |acc, a| acc.checked_mul(a.arity.n_values() as u128))
            .unwrap_or(u128::MAX)
    }

    /// For an Effects attribute such as `transitive_object_3`, the
    /// transitivity attribute (`transitive_object`) that gates it.
    pub fn gate_of(&self, k: usize) -> Option<usize> {
        let a = &self.attributes[k];
        if a.group != "effects" {
            return None;
        }
        let base = a.name.trim_end_matches(|c: char| c.is_ascii_digit());
        let base = base.strip_suffix('_')?;
        self.attributes
            .iter()
            .position(|b| b.group == "transitivity" && b.name == base && b.arity == Arity::Binary)
    }

    pub fn validate(&self, labels: &LabelVector) -> Result<()> {
        if labels.0.len() != self.len() {
            return Err(Error::InvalidLabel(format!(
                "{} labels for {} attributes",
                labels.0.len(),
                self.len()
            )));
        }
        for (k, (&v, a)) in labels.0.iter().zip(&self.attributes).enumerate() {
            if v >= a.arity.n_values() {
                return Err(Error::InvalidLabel(format!(
                    "attribute {} (`{}`) value {} exceeds arity {}",
                    k,
                    a.name,
                    v,
                    a.arity.n_values()
                )));
            }
        }
        Ok(())
    }
}

/// Per-attribute value indices; binary attributes use 0/1.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabelVector(pub Vec<usize>);

pub type VerbLabels = BTreeMap<String, LabelVector>;

/// Expands labels into the ±1 one-vs-rest layout (width 40 for the bundled
/// schema).
pub fn binarize(schema: &AttributeSchema, labels: &LabelVector) -> Result<Vec<f64>> {
    schema.validate(labels)?;
    let mut out = Vec::with_capacity(schema.binarized_width());
    for (a, &v) in schema.attributes().iter().zip(&labels.0) {
        match a.arity {
            Arity::Binary => out.push(if v == 1 { 1.0 } else { -1.0 }),
            Arity::Categorical(d) => out.extend((0..d).map(|i| if i == v { 1.0 } else { -1.0 })),
        }
    }
    Ok(out)
}

/// Inverse of [`binarize`]: categorical blocks must hold exactly one +1.
pub fn debinarize(schema: &AttributeSchema, row: &[f64]) -> Result<LabelVector> {
    if row.len() != schema.binarized_width() {
        return Err(Error::Shape(format!(
            "binarized row of width {}, schema needs {}",
            row.len(),
            schema.binarized_width()
        )));
    }
    let mut labels = Vec::with_capacity(schema.len());
    let mut off = 0;
    for a in schema.attributes() {
        let block = &row[off..off + a.arity.width()];
        let v = match a.arity {
            Arity::Binary => usize::from(block[0] > 0.0),
            Arity::Categorical(_) => {
                let hot: Vec<usize> = (0..block.len()).filter(|&i| block[i] > 0.0).collect();
                if hot.len() != 1 {
                    return Err(Error::InvalidLabel(format!(
                        "attribute `{}` block has {} positive entries",
                        a.name,
                        hot.len()
                    )));
                }
                hot[0]
            }
        };
        labels.push(v);
        off += a.arity.width();
    }
    Ok(LabelVector(labels))
}

/// Per-attribute ±1 signature matrices A^(k) over an ordered verb list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LookupTable {
    verbs: Vec<String>,
    blocks: Vec<Tensor2>,
}

pub fn encode_lookup(
    verbs: &[String],
    labels: &VerbLabels,
    schema: &AttributeSchema,
) -> Result<LookupTable> {
    let mut blocks: Vec<Tensor2> = schema
        .attributes()
        .iter()
        .map(|a| Tensor2::zeros(verbs.len(), a.arity.width()))
        .collect();
    for (r, verb) in verbs.iter().enumerate() {
        let lv = labels
            .get(verb)
            .ok_or_else(|| Error::MissingLabels(verb.clone()))?;
        schema.validate(lv)?;
        for ((block, a), &v) in blocks.iter_mut().zip(schema.attributes()).zip(&lv.0) {
            match a.arity {
                Arity::Binary => block.set(r, 0, if v == 1 { 1.0 } else { -1.0 }),
                Arity::Categorical(d) => {
                    for i in 0..d {
                        block.set(r, i, if i == v { 1.0 } else { -1.0 });
                    }
                }
            }
        }
    }
    let table = LookupTable {
        verbs: verbs.to_vec(),
        blocks,
    };
    for (a, b) in table.collisions() {
        log::warn!(
            "verbs `{}` and `{}` share an attribute signature",
            table.verbs[a],
            table.verbs[b]
        );
    }
    Ok(table)
}

impl LookupTable {
    pub fn verbs(&self) -> &[String] {
        &self.verbs
    }

    pub fn len(&self) -> usize {
        self.verbs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.verbs.is_empty()
    }

    pub fn blocks(&self) -> &[Tensor2] {
        &self.blocks
    }

    pub fn block(&self, k: usize) -> &Tensor2 {
        &self.blocks[k]
    }

    /// Concatenated ±1 row for one verb (the binarized signature).
    pub fn signature(&self, row: usize) -> Vec<f64> {
        self.blocks
            .iter()
            .flat_map(|b| b.row(row).iter().copied())
            .collect()
    }

    /// Reads the +1 positions of a row back into labels.
    pub fn decode_row(&self, schema: &AttributeSchema, row: usize) -> Result<LabelVector> {
        debinarize(schema, &self.signature(row))
    }

    /// Pairs of rows with identical signatures.
    pub fn collisions(&self) -> Vec<(usize, usize)> {
        let mut seen: BTreeMap<Vec<u64>, usize> = BTreeMap::new();
        let mut out = Vec::new();
        for r in 0..self.len() {
            let key: Vec<u64> = self.signature(r).iter().map(|v| v.to_bits()).collect();
            match seen.get(&key) {
                Some(&first) => out.push((first, r)),
                None => {
                    seen.insert(key, r);
                }
            }
        }
        out
    }

    /// The sub-table for `verbs`, in that order.
    pub fn restrict(&self, verbs: &[String]) -> Result<LookupTable> {
        let rows: Vec<usize> = verbs
            .iter()
            .map(|v| {
                self.verbs
                    .iter()
                    .position(|w| w == v)
                    .ok_or_else(|| Error::UnknownVerb(v.clone()))
            })
            .collect::<Result<_>>()?;
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let data: Vec<f64> = rows
                    .iter()
                    .flat_map(|&r| b.row(r).iter().copied())
                    .collect();
                Tensor2::from_vec(rows.len(), b.cols(), data)
            })
            .collect::<Result<_>>()?;
        Ok(LookupTable {
            verbs: verbs.to_vec(),
            blocks,
        })
    }
}

/// Accuracies as fractions in [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub attribute_names: Vec<String>,
    pub per_attribute: Vec<f64>,
    pub group_names: Vec<String>,
    pub per_group: Vec<f64>,
    pub macro_avg: f64,
    pub micro_avg: f64,
}

/// Macro (unweighted mean over groups) and micro (group accuracies weighted
/// by group size, i.e. the mean over attributes).
pub fn aggregate_groups(group_acc: &[f64], sizes: &[usize]) -> Result<(f64, f64)> {
    if group_acc.len() != sizes.len() || group_acc.is_empty() {
        return Err(Error::Shape(format!(
            "{} group accuracies for {} group sizes",
            group_acc.len(),
            sizes.len()
        )));
    }
    let macro_avg = group_acc.iter().sum::<f64>() / group_acc.len() as f64;
    let total: usize = sizes.iter().sum();
    let micro_avg = group_acc
        .iter()
        .zip(sizes)
        .map(|(a, &s)| a * s as f64)
        .sum::<f64>()
        / total as f64;
    Ok((macro_avg, micro_avg))
}

pub fn attribute_accuracy(
    pred: &VerbLabels,
    gold: &VerbLabels,
    schema: &AttributeSchema,
    scope: EffectsScope,
) -> Result<AccuracyReport> {
    if pred.len() != gold.len() || pred.keys().zip(gold.keys()).any(|(a, b)| a != b) {
        let missing = gold
            .keys()
            .find(|v| !pred.contains_key(*v))
            .or_else(|| pred.keys().find(|v| !gold.contains_key(*v)));
        return Err(Error::CandidateMismatch(format!(
            "predicted and gold verb sets differ (e.g. `{}`)",
            missing.map(String::as_str).unwrap_or("?")
        )));
    }
    if gold.is_empty() {
        return Err(Error::Empty("no verbs to score".into()));
    }
    for lv in pred.values().chain(gold.values()) {
        schema.validate(lv)?;
    }
    let k = schema.len();
    let mut per_attribute = Vec::with_capacity(k);
    for a in 0..k {
        let gate = match scope {
            EffectsScope::Conditional => schema.gate_of(a),
            EffectsScope::Unconditional => None,
        };
        let mut hits = 0usize;
        let mut total = 0usize;
        for (verb, g) in gold {
            if let Some(t) = gate {
                if g.0[t] != 1 {
                    continue;
                }
            }
            total += 1;
            if pred[verb].0[a] == g.0[a] {
                hits += 1;
            }
        }
        // an attribute with no eligible verbs is vacuously correct
        per_attribute.push(if total == 0 {
            1.0
        } else {
            hits as f64 / total as f64
        });
    }
    let sizes = schema.group_sizes();
    let mut per_group = vec![0.0; sizes.len()];
    for (a, acc) in per_attribute.iter().enumerate() {
        per_group[schema.group_index(a)] += acc;
    }
    for (g, s) in per_group.iter_mut().zip(&sizes) {
        *g /= *s as f64;
    }
    let macro_avg = per_group.iter().sum::<f64>() / per_group.len() as f64;
    let micro_avg = per_attribute.iter().sum::<f64>() / k as f64;
    Ok(AccuracyReport {
        attribute_names: schema.attributes().iter().map(|a| a.name.clone()).collect(),
        per_attribute,
        group_names: schema.groups().to_vec(),
        per_group,
        macro_avg,
        micro_avg,
    })
}

/// Per attribute, the modal training value; ties go to the lowest index.
pub fn majority_baseline<'a, I>(train: I, schema: &AttributeSchema) -> Result<LabelVector>
where
    I: IntoIterator<Item = &'a LabelVector>,
{
    let mut counts: Vec<Vec<usize>> = schema
        .attributes()
        .iter()
        .map(|a| vec![0; a.arity.n_values()])
        .collect();
    let mut n = 0;
    for lv in train {
        schema.validate(lv)?;
        for (c, &v) in counts.iter_mut().zip(&lv.0) {
            c[v] += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty(
            "majority baseline needs training labels".into(),
        ));
    }
    Ok(LabelVector(
        counts
            .iter()
            .map(|c| {
                let mut best = 0;
                for (i, &x) in c.iter().enumerate() {
                    if x > c[best] {
                        best = i;
                    }
                }
                best
            })
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_schema() -> AttributeSchema {
        AttributeSchema::parse(
            "g1\tcolor\t3\tred,green,blue\ng2\tbig\tbinary\tno,yes\ng2\tloud\tbinary\n",
            Path::new("tiny"),
        )
        .unwrap()
    }

    #[test]
    fn bundled_schema_shape() {
        let s = build_schema();
        assert_eq!(s.len(), 24);
        assert_eq!(s.groups().len(), 7);
        assert_eq!(s.group_sizes(), vec![1, 1, 1, 1, 3, 12, 5]);
        assert_eq!(s.binarized_width(), 40);
        assert_eq!(s.groups()[0], "aspect");
        assert_eq!(s.groups()[6], "body");
    }

    #[test]
    fn schema_text_round_trip() {
        let s = build_schema();
        let again = AttributeSchema::parse(&s.to_text(), Path::new("x")).unwrap();
        assert_eq!(s, again);
        assert_eq!(s.fingerprint(), again.fingerprint());
        assert_eq!(s.fingerprint().len(), 16);
    }

    #[test]
    fn schema_rejects_bad_lines() {
        let e = AttributeSchema::parse("g\ta\t5\tx,y\n", Path::new("s")).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }), "{e}");
        let e = AttributeSchema::parse("# c\ng\ta\tternary\tx\n", Path::new("s")).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        assert!(AttributeSchema::parse("g\ta\tbinary\ng\ta\tbinary\n", Path::new("s")).is_err());
    }

    #[test]
    fn gates_for_effects() {
        let s = build_schema();
        let g = s
            .gate_of(s.index_of("transitive_object_3").unwrap())
            .unwrap();
        assert_eq!(s.attribute(g).name, "transitive_object");
        let g = s.gate_of(s.index_of("intransitive_1").unwrap()).unwrap();
        assert_eq!(s.attribute(g).name, "intransitive");
        assert_eq!(s.gate_of(s.index_of("arms").unwrap()), None);
    }

    #[test]
    fn binarize_duration_minutes() {
        let s = build_schema();
        let mut labels = LabelVector(vec![0; 24]);
        labels.0[1] = 2;
        let row = binarize(&s, &labels).unwrap();
        assert_eq!(&row[5..10], &[-1.0, -1.0, 1.0, -1.0, -1.0]);
        // all binary attributes zero -> all -1
        assert!(row[20..].iter().all(|&x| x == -1.0));
        assert_eq!(row.len(), 40);
    }

    #[test]
    fn binarize_rejects_bad_labels() {
        let s = build_schema();
        let mut labels = LabelVector(vec![0; 24]);
        labels.0[1] = 7;
        assert!(binarize(&s, &labels).is_err());
        assert!(binarize(&s, &LabelVector(vec![0; 3])).is_err());
    }

    #[test]
    fn lookup_single_binary() {
        let s = AttributeSchema::parse("g\ta\tbinary\n", Path::new("s")).unwrap();
        let mut labels = VerbLabels::new();
        labels.insert("run".into(), LabelVector(vec![1]));
        let t = encode_lookup(&["run".to_string()], &labels, &s).unwrap();
        assert_eq!(t.block(0).as_slice(), &[1.0]);
    }

    #[test]
    fn lookup_missing_verb_is_named() {
        let s = tiny_schema();
        let e = encode_lookup(&["walk".to_string()], &VerbLabels::new(), &s).unwrap_err();
        assert!(e.to_string().contains("walk"));
    }

    #[test]
    fn lookup_collisions_detected() {
        let s = tiny_schema();
        let mut labels = VerbLabels::new();
        labels.insert("a".into(), LabelVector(vec![1, 0, 1]));
        labels.insert("b".into(), LabelVector(vec![1, 0, 1]));
        labels.insert("c".into(), LabelVector(vec![2, 0, 1]));
        let verbs: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let t = encode_lookup(&verbs, &labels, &s).unwrap();
        assert_eq!(t.block(0).row(0), t.block(0).row(1));
        assert_eq!(t.collisions(), vec![(0, 1)]);
    }

    #[test]
    fn lookup_matches_binarize_for_full_schema() {
        let s = build_schema();
        let mut labels = VerbLabels::new();
        let verbs: Vec<String> = vec!["x".into(), "y".into(), "z".into()];
        for (i, v) in verbs.iter().enumerate() {
            let lv: Vec<usize> = s
                .attributes()
                .iter()
                .enumerate()
                .map(|(k, a)| (i * 7 + k * 3) % a.arity.n_values())
                .collect();
            labels.insert(v.clone(), LabelVector(lv));
        }
        let t = encode_lookup(&verbs, &labels, &s).unwrap();
        let widths: Vec<usize> = t.blocks().iter().map(|b| b.cols()).collect();
        assert_eq!(&widths[..4], &[5, 5, 5, 5]);
        assert!(widths[4..].iter().all(|&w| w == 1));
        assert_eq!(widths.len(), 24);
        for (r, v) in verbs.iter().enumerate() {
            assert_eq!(t.signature(r), binarize(&s, &labels[v]).unwrap());
            assert_eq!(&t.decode_row(&s, r).unwrap(), &labels[v]);
        }
        let sub = t.restrict(&["z".to_string(), "x".to_string()]).unwrap();
        assert_eq!(sub.signature(0), t.signature(2));
        assert!(t.restrict(&["nope".to_string()]).is_err());
    }

    #[test]
    fn majority_row_reconstruction() {
        // published "most frequent class" group accuracies, in schema group order
        // (aspect, duration, motion, social, transitivity, effects, body).
        let acc = [43.67, 76.58, 35.13, 42.41, 69.73, 84.97, 76.84];
        let (ma, mi) = aggregate_groups(&acc, &[1, 1, 1, 1, 3, 12, 5]).unwrap();
        assert_eq!(format!("{:.2}", ma), "61.33");
        assert_eq!(format!("{:.2}", mi), "75.45");
    }

    #[test]
    fn accuracy_perfect_and_single_error() {
        let s = build_schema();
        let mut gold = VerbLabels::new();
        gold.insert("v".into(), LabelVector(vec![0; 24]));
        let r = attribute_accuracy(&gold, &gold, &s, EffectsScope::Unconditional).unwrap();
        assert!(r.per_attribute.iter().all(|&a| a == 1.0));
        assert_eq!(r.macro_avg, 1.0);
        assert_eq!(r.micro_avg, 1.0);

        let mut pred = gold.clone();
        let k = s.index_of("transitive_person_2").unwrap();
        pred.get_mut("v").unwrap().0[k] = 1;
        let r = attribute_accuracy(&pred, &gold, &s, EffectsScope::Unconditional).unwrap();
        assert!((r.per_group[5] - 11.0 / 12.0).abs() < 1e-15);
        assert!((r.micro_avg - 23.0 / 24.0).abs() < 1e-15);
        let (ma, mi) = aggregate_groups(&r.per_group, &s.group_sizes()).unwrap();
        assert!((ma - r.macro_avg).abs() < 1e-15);
        assert!((mi - r.micro_avg).abs() < 1e-15);
    }

    #[test]
    fn accuracy_conditional_effects_skips_ungated_verbs() {
        let s = build_schema();
        let mut gold = VerbLabels::new();
        // transitive_person = 0, so transitive_person_* are not scored
        gold.insert("v".into(), LabelVector(vec![0; 24]));
        let mut pred = gold.clone();
        let k = s.index_of("transitive_person_2").unwrap();
        pred.get_mut("v").unwrap().0[k] = 1;
        let r = attribute_accuracy(&pred, &gold, &s, EffectsScope::Conditional).unwrap();
        assert_eq!(r.per_attribute[k], 1.0);
        let r = attribute_accuracy(&pred, &gold, &s, EffectsScope::Unconditional).unwrap();
        assert_eq!(r.per_attribute[k], 0.0);
    }

    #[test]
    fn accuracy_verb_mismatch() {
        let s = tiny_schema();
        let mut a = VerbLabels::new();
        a.insert("x".into(), LabelVector(vec![0, 0, 0]));
        let mut b = VerbLabels::new();
        b.insert("y".into(), LabelVector(vec![0, 0, 0]));
        assert!(attribute_accuracy(&a, &b, &s, EffectsScope::Unconditional).is_err());
    }

    #[test]
    fn majority_cases() {
        let s = AttributeSchema::parse("g\ta\tbinary\ng\tb\t3\tx,y,z\n", Path::new("s")).unwrap();
        let train: Vec<LabelVector> = [[1, 0], [1, 1], [1, 2], [0, 0], [0, 1], [0, 2]]
            .iter()
            .map(|r| LabelVector(r.to_vec()))
            .collect();
        // first attribute tied 3/3 -> 0; second tied 2/2/2 -> 0
        assert_eq!(
            majority_baseline(&train, &s).unwrap(),
            LabelVector(vec![0, 0])
        );
        let train: Vec<LabelVector> = [[1, 2], [1, 2], [1, 0], [0, 0], [0, 2]]
            .iter()
            .map(|r| LabelVector(r.to_vec()))
            .collect();
        assert_eq!(
            majority_baseline(&train, &s).unwrap(),
            LabelVector(vec![1, 2])
        );
        assert!(majority_baseline(&Vec::<LabelVector>::new(), &s).is_err());
    }

    fn arb_labels() -> impl Strategy<Value = LabelVector> {
        let s = build_schema();
        let strategies: Vec<_> = s
            .attributes()
            .iter()
            .map(|a| 0..a.arity.n_values())
            .collect();
        strategies.prop_map(LabelVector)
    }

    proptest! {
        #[test]
        fn binarize_round_trips(lv in arb_labels()) {
            let s = build_schema();
            let row = binarize(&s, &lv).unwrap();
            prop_assert_eq!(row.len(), 40);
            prop_assert_eq!(debinarize(&s, &row).unwrap(), lv);
        }

        #[test]
        fn micro_is_size_weighted_group_mean(rows in prop::collection::vec((arb_labels(), arb_labels()), 1..12)) {
            let s = build_schema();
            let mut pred = VerbLabels::new();
            let mut gold = VerbLabels::new();
            for (i, (p, g)) in rows.into_iter().enumerate() {
                pred.insert(format!("v{i}"), p);
                gold.insert(format!("v{i}"), g);
            }
            let r = attribute_accuracy(&pred, &gold, &s, EffectsScope::Unconditional).unwrap();
            let (_, mi) = aggregate_groups(&r.per_group, &s.group_sizes()).unwrap();
            prop_assert!((mi - r.micro_avg).abs() < 1e-12);
        }
    }
}
