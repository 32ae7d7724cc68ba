//! Metadata schema and encoding.
//!
//! A schema is an ordered list of fields, each a categorical (one-hot
//! encoded in declared class order) or a continuous scalar (min-max
//! normalized to `[0, 1]`). Encoding concatenates the fields in schema
//! order into one fixed-length vector. The dummy transform produces the
//! all-zeros vector of the same width; the swap transform relabels one
//! categorical field through a permutation of its classes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FieldSpec {
    Categorical {
        name: String,
        classes: Vec<String>,
    },
    Continuous {
        name: String,
        min: f64,
        max: f64,
    },
}

impl FieldSpec {
    pub fn name(&self) -> &str {
        match self {
            FieldSpec::Categorical { name, .. } | FieldSpec::Continuous { name, .. } => name,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            FieldSpec::Categorical { classes, .. } => classes.len(),
            FieldSpec::Continuous { .. } => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataSchema {
    fields: Vec<FieldSpec>,
}

impl MetadataSchema {
    pub fn new(fields: Vec<FieldSpec>) -> Result<Self> {
        if fields.is_empty() {
            return Err(Error::Metadata("schema has no fields".into()));
        }
        let mut names = std::collections::HashSet::new();
        for field in &fields {
            if !names.insert(field.name().to_string()) {
                return Err(Error::Metadata(format!(
                    "duplicate field name {:?}",
                    field.name()
                )));
            }
            match field {
                FieldSpec::Categorical { name, classes } => {
                    if classes.is_empty() {
                        return Err(Error::Metadata(format!("field {name:?} has no classes")));
                    }
                    let mut seen = std::collections::HashSet::new();
                    for class in classes {
                        if !seen.insert(class) {
                            return Err(Error::Metadata(format!(
                                "field {name:?} has duplicate class {class:?}"
                            )));
                        }
                    }
                }
                FieldSpec::Continuous { name, min, max } => {
                    if !(min < max) {
                        return Err(Error::Metadata(format!(
                            "field {name:?} requires min < max, got [{min}, {max}]"
                        )));
                    }
                }
            }
        }
        Ok(MetadataSchema { fields })
    }

    /// Single categorical field, a common case for the presets.
    pub fn single_categorical(name: &str, classes: &[&str]) -> Result<Self> {
        Self::new(vec![FieldSpec::Categorical {
            name: name.to_string(),
            classes: classes.iter().map(|c| c.to_string()).collect(),
        }])
    }

    pub fn fields(&self) -> &[FieldSpec] {
        &self.fields
    }

    pub fn total_dim(&self) -> usize {
        self.fields.iter().map(FieldSpec::width).sum()
    }

    pub fn field(&self, name: &str) -> Option<&FieldSpec> {
        self.fields.iter().find(|f| f.name() == name)
    }

    /// First categorical field, the default target for swap permutations.
    pub fn first_categorical(&self) -> Option<&FieldSpec> {
        self.fields
            .iter()
            .find(|f| matches!(f, FieldSpec::Categorical { .. }))
    }

    /// Encode a record into a `[total_dim]` vector: one-hots in declared
    /// class order, continuous scalars min-max normalized, fields
    /// concatenated in schema order. Out-of-range scalars clamp with a
    /// logged warning; NaN is an error.
    pub fn encode<S: Scalar>(&self, record: &MetadataRecord) -> Result<Tensor<S>> {
        if record.values.len() != self.fields.len() {
            return Err(Error::Metadata(format!(
                "record has {} values for a {}-field schema",
                record.values.len(),
                self.fields.len()
            )));
        }
        let mut out = Vec::with_capacity(self.total_dim());
        for (field, value) in self.fields.iter().zip(&record.values) {
            match (field, value) {
                (FieldSpec::Categorical { name, classes }, FieldValue::Class(class)) => {
                    let idx = classes.iter().position(|c| c == class).ok_or_else(|| {
                        Error::Metadata(format!("unknown class {class:?} for field {name:?}"))
                    })?;
                    out.extend((0..classes.len()).map(|i| {
                        if i == idx {
                            S::one()
                        } else {
                            S::zero()
                        }
                    }));
                }
                (FieldSpec::Continuous { name, min, max }, FieldValue::Scalar(v)) => {
                    if v.is_nan() {
                        return Err(Error::Metadata(format!("NaN scalar for field {name:?}")));
                    }
                    let clamped = v.clamp(*min, *max);
                    if clamped != *v {
                        log::warn!(
                            "field {name:?}: value {v} outside [{min}, {max}], clamped to {clamped}"
                        );
                    }
                    out.push(S::from_f64((clamped - min) / (max - min)));
                }
                (field, value) => {
                    return Err(Error::Metadata(format!(
                        "value {value:?} does not match field {:?}",
                        field.name()
                    )));
                }
            }
        }
        Ok(Tensor::from_vec(vec![self.total_dim()], out))
    }

    /// The all-zeros vector of schema width ("dummy" metadata).
    pub fn dummy<S: Scalar>(&self) -> Tensor<S> {
        Tensor::zeros(&[self.total_dim()])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldValue {
    Class(String),
    Scalar(f64),
}

/// One metadata record, values aligned positionally with the schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataRecord {
    pub values: Vec<FieldValue>,
}

impl MetadataRecord {
    pub fn new(values: Vec<FieldValue>) -> Self {
        MetadataRecord { values }
    }

    pub fn class(class: &str) -> Self {
        MetadataRecord {
            values: vec![FieldValue::Class(class.to_string())],
        }
    }

    pub fn scalar(v: f64) -> Self {
        MetadataRecord {
            values: vec![FieldValue::Scalar(v)],
        }
    }
}

/// Permutation of one categorical field's classes. Classes not mentioned
/// map to themselves; targets must be valid classes and distinct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Permutation {
    pub field: String,
    pub mapping: Vec<(String, String)>,
}

impl Permutation {
    pub fn identity(field: &str) -> Self {
        Permutation {
            field: field.to_string(),
            mapping: Vec::new(),
        }
    }

    /// Parse the CLI form `from:to,from:to,...`.
    pub fn parse(field: &str, spec: &str) -> Result<Self> {
        let mut mapping = Vec::new();
        for pair in spec.split(',').filter(|p| !p.is_empty()) {
            let (from, to) = pair.split_once(':').ok_or_else(|| {
                Error::Metadata(format!("bad permutation entry {pair:?}, expected from:to"))
            })?;
            mapping.push((from.trim().to_string(), to.trim().to_string()));
        }
        Ok(Permutation {
            field: field.to_string(),
            mapping,
        })
    }

    fn validate(&self, schema: &MetadataSchema) -> Result<Vec<String>> {
        let field = schema.field(&self.field).ok_or_else(|| {
            Error::Metadata(format!("permutation field {:?} not in schema", self.field))
        })?;
        let FieldSpec::Categorical { classes, .. } = field else {
            return Err(Error::Metadata(format!(
                "permutation field {:?} is not categorical",
                self.field
            )));
        };
        if self.mapping.len() > classes.len() {
            return Err(Error::Metadata(format!(
                "permutation has {} entries for {} classes",
                self.mapping.len(),
                classes.len()
            )));
        }
        let mut froms = std::collections::HashSet::new();
        let mut tos = std::collections::HashSet::new();
        for (from, to) in &self.mapping {
            if !classes.contains(from) || !classes.contains(to) {
                return Err(Error::Metadata(format!(
                    "permutation entry {from:?} -> {to:?} references unknown class"
                )));
            }
            if !froms.insert(from) || !tos.insert(to) {
                return Err(Error::Metadata(
                    "permutation maps a class twice".to_string(),
                ));
            }
        }
        // Unmentioned classes map to themselves; that must not collide
        // with an explicit target.
        for class in classes {
            if !froms.contains(class) && tos.contains(class) {
                return Err(Error::Metadata(format!(
                    "permutation is not a bijection: {class:?} is a target but also fixed"
                )));
            }
        }
        Ok(classes.clone())
    }

    pub fn apply_class(&self, class: &str) -> String {
        self.mapping
            .iter()
            .find(|(from, _)| from == class)
            .map(|(_, to)| to.clone())
            .unwrap_or_else(|| class.to_string())
    }
}

/// Relabel `record`'s class for the permutation's field.
pub fn swap(
    schema: &MetadataSchema,
    record: &MetadataRecord,
    permutation: &Permutation,
) -> Result<MetadataRecord> {
    permutation.validate(schema)?;
    let mut values = record.values.clone();
    for (field, value) in schema.fields.iter().zip(values.iter_mut()) {
        if field.name() == permutation.field {
            if let FieldValue::Class(class) = value {
                *class = permutation.apply_class(class);
            }
        }
    }
    Ok(MetadataRecord { values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seven_class_schema() -> MetadataSchema {
        MetadataSchema::single_categorical("domain", &["a", "b", "c", "d", "e", "f", "g"])
            .unwrap()
    }

    #[test]
    fn one_hot_encodes_class_index_two() {
        let schema = seven_class_schema();
        let v: Tensor<f32> = schema.encode(&MetadataRecord::class("c")).unwrap();
        assert_eq!(v.data(), &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn continuous_normalizes_linearly() {
        let schema = MetadataSchema::new(vec![FieldSpec::Continuous {
            name: "size".into(),
            min: 0.0,
            max: 100.0,
        }])
        .unwrap();
        let v: Tensor<f64> = schema.encode(&MetadataRecord::scalar(25.0)).unwrap();
        assert_eq!(v.data(), &[0.25]);
    }

    #[test]
    fn mixed_schema_concatenates_in_order() {
        let schema = MetadataSchema::new(vec![
            FieldSpec::Categorical {
                name: "cat".into(),
                classes: vec!["a".into(), "b".into(), "c".into()],
            },
            FieldSpec::Continuous {
                name: "v".into(),
                min: 0.0,
                max: 100.0,
            },
        ])
        .unwrap();
        let record = MetadataRecord::new(vec![
            FieldValue::Class("b".into()),
            FieldValue::Scalar(50.0),
        ]);
        let v: Tensor<f64> = schema.encode(&record).unwrap();
        assert_eq!(v.data(), &[0.0, 1.0, 0.0, 0.5]);
    }

    #[test]
    fn dummy_is_all_zeros_of_schema_width() {
        let schema = seven_class_schema();
        let v: Tensor<f32> = schema.dummy();
        assert_eq!(v.data(), &[0.0; 7]);
        // encode != dummy for any valid categorical record.
        for class in ["a", "b", "c", "d", "e", "f", "g"] {
            let e: Tensor<f32> = schema.encode(&MetadataRecord::class(class)).unwrap();
            assert_ne!(e.data(), v.data());
        }
    }

    #[test]
    fn unknown_class_and_nan_are_errors() {
        let schema = seven_class_schema();
        assert!(schema.encode::<f32>(&MetadataRecord::class("z")).is_err());

        let cont = MetadataSchema::new(vec![FieldSpec::Continuous {
            name: "v".into(),
            min: 0.0,
            max: 1.0,
        }])
        .unwrap();
        assert!(cont
            .encode::<f32>(&MetadataRecord::scalar(f64::NAN))
            .is_err());
    }

    #[test]
    fn out_of_range_scalar_clamps() {
        let schema = MetadataSchema::new(vec![FieldSpec::Continuous {
            name: "v".into(),
            min: 0.0,
            max: 10.0,
        }])
        .unwrap();
        let v: Tensor<f64> = schema.encode(&MetadataRecord::scalar(25.0)).unwrap();
        assert_eq!(v.data(), &[1.0]);
        let v: Tensor<f64> = schema.encode(&MetadataRecord::scalar(-5.0)).unwrap();
        assert_eq!(v.data(), &[0.0]);
    }

    #[test]
    fn identity_permutation_keeps_record() {
        let schema = seven_class_schema();
        let record = MetadataRecord::class("d");
        let swapped = swap(&schema, &record, &Permutation::identity("domain")).unwrap();
        assert_eq!(swapped, record);
    }

    #[test]
    fn transposition_swaps_and_is_an_involution() {
        let schema = MetadataSchema::single_categorical("task", &["nuclei", "anomaly"]).unwrap();
        let perm = Permutation::parse("task", "nuclei:anomaly,anomaly:nuclei").unwrap();
        let record = MetadataRecord::class("nuclei");
        let once = swap(&schema, &record, &perm).unwrap();
        assert_eq!(once, MetadataRecord::class("anomaly"));
        let twice = swap(&schema, &once, &perm).unwrap();
        assert_eq!(twice, record);
    }

    #[test]
    fn non_bijective_permutation_is_rejected() {
        let schema = MetadataSchema::single_categorical("task", &["a", "b", "c"]).unwrap();
        // b maps onto a while a stays fixed.
        let perm = Permutation::parse("task", "b:a").unwrap();
        assert!(swap(&schema, &MetadataRecord::class("b"), &perm).is_err());
        // Too many entries for the class count.
        let perm = Permutation::parse("task", "a:b,b:c,c:a,a:c").unwrap();
        assert!(swap(&schema, &MetadataRecord::class("a"), &perm).is_err());
    }

    proptest! {
        #[test]
        fn one_hot_part_has_single_one(idx in 0usize..7) {
            let schema = seven_class_schema();
            let classes = ["a", "b", "c", "d", "e", "f", "g"];
            let v: Tensor<f64> = schema.encode(&MetadataRecord::class(classes[idx])).unwrap();
            let l1: f64 = v.data().iter().map(|x| x.abs()).sum();
            prop_assert_eq!(l1, 1.0);
            prop_assert_eq!(v.data().iter().filter(|&&x| x == 1.0).count(), 1);
        }

        #[test]
        fn encode_is_injective_on_distinct_records(a in 0usize..7, b in 0usize..7) {
            let schema = seven_class_schema();
            let classes = ["a", "b", "c", "d", "e", "f", "g"];
            let va: Tensor<f64> = schema.encode(&MetadataRecord::class(classes[a])).unwrap();
            let vb: Tensor<f64> = schema.encode(&MetadataRecord::class(classes[b])).unwrap();
            prop_assert_eq!(a == b, va.data() == vb.data());
        }

        #[test]
        fn continuous_encoding_is_monotone_and_bounded(x in 0.0f64..50.0, y in 0.0f64..50.0) {
            let schema = MetadataSchema::new(vec![FieldSpec::Continuous {
                name: "v".into(), min: 0.0, max: 50.0,
            }]).unwrap();
            let ex: Tensor<f64> = schema.encode(&MetadataRecord::scalar(x)).unwrap();
            let ey: Tensor<f64> = schema.encode(&MetadataRecord::scalar(y)).unwrap();
            prop_assert!((0.0..=1.0).contains(&ex.data()[0]));
            if x < y {
                prop_assert!(ex.data()[0] <= ey.data()[0]);
            }
        }
    }
}
