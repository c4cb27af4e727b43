//! Field schema, embedding lookup and field-wise normalization.
//!
//! A record with `f` fields becomes one row of width `f × k`: field `i`
//! occupies columns `[i·k, (i+1)·k)`. Categorical fields look up a row of
//! their `vocab × k` table; numerical fields scale a single learned
//! `k`-vector by the raw value.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::{NormKind, NormLayer, NormSpec};
use crate::numerics::{Matrix, Param, RngStream};

pub const DEFAULT_EMBEDDING_DIM: usize = 10;
pub const DEFAULT_EMBEDDING_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Categorical,
    Numerical,
}

impl FromStr for FieldKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "categorical" | "cat" | "c" => Ok(FieldKind::Categorical),
            "numerical" | "num" | "n" | "continuous" => Ok(FieldKind::Numerical),
            other => Err(Error::Data(format!("unknown field kind `{other}` (expected categorical or numerical)"))),
        }
    }
}

impl FieldKind {
    pub fn name(self) -> &'static str {
        match self {
            FieldKind::Categorical => "categorical",
            FieldKind::Numerical => "numerical",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSchema {
    pub name: String,
    pub kind: FieldKind,
    /// Number of embedding rows, including the reserved OOV row 0.
    /// Unused (0) for numerical fields.
    pub vocab_size: usize,
    pub field_index: usize,
}

/// The ordered input layout. Fields are kept sorted by `field_index`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    fields: Vec<FieldSchema>,
}

impl Schema {
    pub fn new(mut fields: Vec<FieldSchema>) -> Result<Self> {
        if fields.is_empty() {
            return Err(Error::Data("schema has no fields".into()));
        }
        fields.sort_by_key(|f| f.field_index);
        for (i, f) in fields.iter().enumerate() {
            if f.field_index != i {
                return Err(Error::Data(format!(
                    "field indices must be a permutation of 0..{}; `{}` has index {}",
                    fields.len(),
                    f.name,
                    f.field_index
                )));
            }
            if f.kind == FieldKind::Categorical && f.vocab_size == 0 {
                return Err(Error::Data(format!("categorical field `{}` needs a vocabulary of at least 1", f.name)));
            }
        }
        let mut names: Vec<&str> = fields.iter().map(|f| f.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Data(format!("duplicate field name `{}`", w[0])));
        }
        Ok(Schema { fields })
    }

    /// Builds a schema from `(name, kind, vocab_size)` triples in field order.
    pub fn from_fields<S: Into<String>>(fields: impl IntoIterator<Item = (S, FieldKind, usize)>) -> Result<Self> {
        let fields = fields
            .into_iter()
            .enumerate()
            .map(|(i, (name, kind, vocab_size))| FieldSchema {
                name: name.into(),
                kind,
                vocab_size: if kind == FieldKind::Numerical { 0 } else { vocab_size },
                field_index: i,
            })
            .collect();
        Schema::new(fields)
    }

    pub fn fields(&self) -> &[FieldSchema] {
        &self.fields
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn field(&self, i: usize) -> &FieldSchema {
        &self.fields[i]
    }

    pub fn count(&self, kind: FieldKind) -> usize {
        self.fields.iter().filter(|f| f.kind == kind).count()
    }
}

/// One encoded field value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FeatureValue {
    Id(usize),
    Value(f64),
}

/// Encoded records, row-major over fields, with 0/1 labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    num_fields: usize,
    values: Vec<FeatureValue>,
    labels: Vec<f64>,
}

impl Batch {
    pub fn new(num_fields: usize, values: Vec<FeatureValue>, labels: Vec<f64>) -> Result<Self> {
        if num_fields == 0 || values.len() != labels.len() * num_fields {
            return Err(Error::Data(format!(
                "{} values for {} labels and {num_fields} fields",
                values.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|l| **l != 0.0 && **l != 1.0) {
            return Err(Error::Data(format!("label {l} is not 0 or 1")));
        }
        Ok(Batch { num_fields, values, labels })
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn num_fields(&self) -> usize {
        self.num_fields
    }

    pub fn row(&self, r: usize) -> &[FeatureValue] {
        &self.values[r * self.num_fields..(r + 1) * self.num_fields]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn values(&self) -> &[FeatureValue] {
        &self.values
    }

    /// Rows `idx` gathered into a new batch.
    pub fn select(&self, idx: &[usize]) -> Batch {
        let mut values = Vec::with_capacity(idx.len() * self.num_fields);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            values.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch { num_fields: self.num_fields, values, labels }
    }

    pub fn conforms_to(&self, schema: &Schema) -> Result<()> {
        if self.num_fields != schema.len() {
            return Err(Error::Data(format!("records have {} fields, schema has {}", self.num_fields, schema.len())));
        }
        for r in 0..self.rows() {
            for (v, f) in self.row(r).iter().zip(schema.fields()) {
                match (v, f.kind) {
                    (FeatureValue::Id(id), FieldKind::Categorical) if *id < f.vocab_size => {}
                    (FeatureValue::Id(id), FieldKind::Categorical) => {
                        return Err(Error::Data(format!(
                            "row {r}: id {id} out of range for field `{}` (vocabulary {})",
                            f.name, f.vocab_size
                        )))
                    }
                    (FeatureValue::Value(x), FieldKind::Numerical) if x.is_finite() => {}
                    (FeatureValue::Value(x), FieldKind::Numerical) => {
                        return Err(Error::Data(format!("row {r}: non-finite value {x} in field `{}`", f.name)))
                    }
                    _ => {
                        return Err(Error::Data(format!("row {r}: value kind does not match field `{}` ({})", f.name, f.kind.name())))
                    }
                }
            }
        }
        Ok(())
    }
}

/// Numerical-field embedding: the field vector scaled by the raw value.
pub fn embed_numerical(e: &[f64], x: f64) -> Result<Vec<f64>> {
    if !x.is_finite() {
        return Err(Error::Data(format!("numerical value {x} is not finite")));
    }
    let out: Vec<f64> = e.iter().map(|v| v * x).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embed_numerical"));
    }
    Ok(out)
}

/// One parameter block per field: `vocab × k` for categorical fields,
/// `1 × k` for numerical ones.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    k: usize,
    kinds: Vec<FieldKind>,
    blocks: Vec<Param>,
    cache: Option<Batch>,
}

impl EmbeddingTable {
    /// Gaussian init, mean 0, standard deviation `std`.
    pub fn new(schema: &Schema, k: usize, std: f64, rng: &mut RngStream) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidSpec("embedding dimension must be at least 1".into()));
        }
        let blocks = schema
            .fields()
            .iter()
            .map(|f| {
                let rows = match f.kind {
                    FieldKind::Categorical => f.vocab_size,
                    FieldKind::Numerical => 1,
                };
                Param::new(rng.gaussian_matrix(rows, k, std))
            })
            .collect();
        let kinds = schema.fields().iter().map(|f| f.kind).collect();
        Ok(EmbeddingTable { k, kinds, blocks, cache: None })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn blocks(&self) -> &[Param] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Param] {
        &mut self.blocks
    }

    /// Concatenated embeddings, one row per record.
    pub fn embed(&self, batch: &Batch) -> Result<Matrix> {
        if batch.num_fields() != self.blocks.len() {
            return Err(Error::Data(format!(
                "records have {} fields, table has {}",
                batch.num_fields(),
                self.blocks.len()
            )));
        }
        let k = self.k;
        let width = self.blocks.len() * k;
        let mut out = Matrix::zeros(batch.rows(), width);
        for r in 0..batch.rows() {
            let dst = out.row_mut(r);
            for (i, (value, block)) in batch.row(r).iter().zip(&self.blocks).enumerate() {
                let span = &mut dst[i * k..(i + 1) * k];
                match *value {
                    FeatureValue::Id(id) => {
                        if self.kinds[i] != FieldKind::Categorical || id >= block.value.rows() {
                            return Err(Error::Data(format!("id {id} is not valid for field {i}")));
                        }
                        span.copy_from_slice(block.value.row(id));
                    }
                    FeatureValue::Value(x) => {
                        if self.kinds[i] != FieldKind::Numerical {
                            return Err(Error::Data(format!("numerical value given for categorical field {i}")));
                        }
                        span.copy_from_slice(&embed_numerical(block.value.row(0), x)?)
                    }
                }
            }
        }
        Ok(out)
    }

    /// Like [`embed`](Self::embed) but keeps the batch for [`backward`](Self::backward).
    pub fn forward(&mut self, batch: &Batch) -> Result<Matrix> {
        let out = self.embed(batch)?;
        self.cache = Some(batch.clone());
        Ok(out)
    }

    /// Accumulates `grad` (the gradient w.r.t. the embedding output) into the
    /// block gradients. Rows not referenced by the batch are left untouched.
    pub fn backward(&mut self, grad: &Matrix) -> Result<()> {
        let batch = self.cache.take().ok_or(Error::MissingCache("embedding table"))?;
        embedding_backward(grad, &batch, self)
    }

    pub fn params(&self) -> Vec<&Param> {
        self.blocks.iter().collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.blocks.iter_mut().collect()
    }

    pub fn zero_grad(&mut self) {
        self.blocks.iter_mut().for_each(Param::zero_grad);
    }

    pub(crate) fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Chain rule through the lookup: categorical rows receive the summed slice
/// gradients of every record that referenced them; numerical vectors receive
/// `Σ_records grad_slice · x`.
pub fn embedding_backward(grad: &Matrix, batch: &Batch, table: &mut EmbeddingTable) -> Result<()> {
    let k = table.k;
    if grad.rows() != batch.rows() || grad.cols() != table.blocks.len() * k {
        return Err(Error::dim(
            "embedding_backward",
            format!("{:?} for {} rows x {} fields", grad.shape(), batch.rows(), table.blocks.len()),
        ));
    }
    for r in 0..batch.rows() {
        let g = grad.row(r);
        for (i, (value, block)) in batch.row(r).iter().zip(table.blocks.iter_mut()).enumerate() {
            let slice = &g[i * k..(i + 1) * k];
            match *value {
                FeatureValue::Id(id) => {
                    for (dst, s) in block.grad.row_mut(id).iter_mut().zip(slice) {
                        *dst += s;
                    }
                }
                FeatureValue::Value(x) => {
                    for (dst, s) in block.grad.row_mut(0).iter_mut().zip(slice) {
                        *dst += s * x;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Normalization choice per field kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldNormPlan {
    pub numerical: NormSpec,
    pub categorical: NormSpec,
}

impl FieldNormPlan {
    pub fn none() -> Self {
        FieldNormPlan { numerical: NormSpec::none(), categorical: NormSpec::none() }
    }

    pub fn uniform(spec: NormSpec) -> Self {
        FieldNormPlan { numerical: spec, categorical: spec }
    }

    pub fn for_kind(&self, kind: FieldKind) -> NormSpec {
        match kind {
            FieldKind::Categorical => self.categorical,
            FieldKind::Numerical => self.numerical,
        }
    }
}

/// Field-wise normalization: one width-`k` [`NormLayer`] per field, so gain
/// and bias are shared by every record within a field. LayerNorm-style kinds
/// treat each field's `k` values as the layer; BatchNorm normalizes each
/// field slice across the batch.
#[derive(Debug, Clone)]
pub struct FieldNorm {
    plan: FieldNormPlan,
    k: usize,
    layers: Vec<NormLayer>,
}

impl FieldNorm {
    pub fn new(plan: FieldNormPlan, schema: &Schema, k: usize) -> Result<Self> {
        let layers = schema
            .fields()
            .iter()
            .map(|f| NormLayer::new(plan.for_kind(f.kind), k))
            .collect::<Result<_>>()?;
        Ok(FieldNorm { plan, k, layers })
    }

    pub fn plan(&self) -> &FieldNormPlan {
        &self.plan
    }

    pub fn layers(&self) -> &[NormLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [NormLayer] {
        &mut self.layers
    }

    fn is_identity(&self) -> bool {
        self.layers.iter().all(|l| l.kind() == NormKind::None)
    }

    fn check_width(&self, v: &Matrix) -> Result<()> {
        if v.cols() != self.layers.len() * self.k {
            return Err(Error::dim(
                "normalize_fields",
                format!("{} cols for {} fields of width {}", v.cols(), self.layers.len(), self.k),
            ));
        }
        Ok(())
    }

    pub fn forward(&mut self, v: &Matrix, training: bool) -> Result<Matrix> {
        self.check_width(v)?;
        let k = self.k;
        let mut out = v.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if layer.kind() == NormKind::None {
                continue;
            }
            let slice = v.slice_cols(i * k, (i + 1) * k)?;
            out.write_cols(i * k, &layer.forward(&slice, training)?)?;
        }
        Ok(out)
    }

    /// Eval-mode forward without touching caches or running statistics.
    pub fn infer(&self, v: &Matrix) -> Result<Matrix> {
        self.check_width(v)?;
        if self.is_identity() {
            return Ok(v.clone());
        }
        let k = self.k;
        let mut out = v.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.kind() != NormKind::None {
                let slice = v.slice_cols(i * k, (i + 1) * k)?;
                out.write_cols(i * k, &layer.infer(&slice)?)?;
            }
        }
        Ok(out)
    }

    /// Gradient w.r.t. the un-normalized embeddings; affine gradients are
    /// accumulated into each field's gain/bias.
    pub fn backward(&mut self, grad: &Matrix) -> Result<Matrix> {
        self.check_width(grad)?;
        let k = self.k;
        let mut out = grad.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if layer.kind() == NormKind::None {
                continue;
            }
            let slice = grad.slice_cols(i * k, (i + 1) * k)?;
            out.write_cols(i * k, &layer.backward_accumulate(&slice)?)?;
        }
        Ok(out)
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// Field-wise normalization of a concatenated embedding matrix.
pub fn normalize_fields(v: &Matrix, norms: &mut FieldNorm, training: bool) -> Result<Matrix> {
    norms.forward(v, training)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norm::{vo_ln, NormKind};
    use crate::testutil::{max_rel_err, numeric_gradient};

    fn two_field_schema() -> Schema {
        Schema::from_fields([("c", FieldKind::Categorical, 3), ("n", FieldKind::Numerical, 0)]).unwrap()
    }

    fn random_batch(schema: &Schema, rows: usize, rng: &mut RngStream) -> Batch {
        let mut values = Vec::new();
        for _ in 0..rows {
            for f in schema.fields() {
                values.push(match f.kind {
                    FieldKind::Categorical => FeatureValue::Id((rng.next_u64() % f.vocab_size as u64) as usize),
                    FieldKind::Numerical => FeatureValue::Value(rng.uniform(-2.0, 2.0)),
                });
            }
        }
        let labels = (0..rows).map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 }).collect();
        Batch::new(schema.len(), values, labels).unwrap()
    }

    fn random_schema(rng: &mut RngStream, fields: usize) -> Schema {
        Schema::from_fields((0..fields).map(|i| {
            if rng.bernoulli(0.6) {
                (format!("f{i}"), FieldKind::Categorical, 2 + (rng.next_u64() % 6) as usize)
            } else {
                (format!("f{i}"), FieldKind::Numerical, 0)
            }
        }))
        .unwrap()
    }

    #[test]
    fn embed_numerical_cases() {
        let out = embed_numerical(&[0.1, 0.2], 3.0).unwrap();
        assert!((out[0] - 0.3).abs() < 1e-15 && (out[1] - 0.6).abs() < 1e-15);
        assert_eq!(embed_numerical(&[0.1, 0.2], 0.0).unwrap(), vec![0.0, 0.0]);
        assert_eq!(embed_numerical(&[0.1, 0.2], 1.0).unwrap(), vec![0.1, 0.2]);
        assert!(embed_numerical(&[0.1], f64::NAN).is_err());
    }

    #[test]
    fn schema_validation() {
        assert!(Schema::from_fields([("a", FieldKind::Categorical, 0)]).is_err());
        assert!(Schema::from_fields([("a", FieldKind::Numerical, 0), ("a", FieldKind::Numerical, 0)]).is_err());
        let bad = vec![FieldSchema { name: "x".into(), kind: FieldKind::Numerical, vocab_size: 0, field_index: 1 }];
        assert!(Schema::new(bad).is_err());
    }

    #[test]
    fn embed_batch_layout() {
        let schema = two_field_schema();
        let mut rng = RngStream::new(1);
        let mut table = EmbeddingTable::new(&schema, 2, 0.01, &mut rng).unwrap();
        table.blocks[0].value = Matrix::from_rows(&[[0.0, 0.0], [1.0, 2.0], [3.0, 4.0]]).unwrap();
        table.blocks[1].value = Matrix::from_rows(&[[5.0, 6.0]]).unwrap();
        let batch = Batch::new(
            2,
            vec![FeatureValue::Id(2), FeatureValue::Value(2.0), FeatureValue::Id(2), FeatureValue::Value(2.0)],
            vec![1.0, 0.0],
        )
        .unwrap();
        let out = table.embed(&batch).unwrap();
        assert_eq!(out.row(0), &[3.0, 4.0, 10.0, 12.0]);
        assert_eq!(out.row(0), out.row(1));
    }

    #[test]
    fn embed_batch_matches_per_field_lookup() {
        let mut rng = RngStream::new(2);
        for _ in 0..10 {
            let f = 1 + (rng.next_u64() % 5) as usize;
            let schema = random_schema(&mut rng, f);
            let table = EmbeddingTable::new(&schema, 3, 1.0, &mut rng).unwrap();
            let batch = random_batch(&schema, 6, &mut rng);
            let out = table.embed(&batch).unwrap();
            for r in 0..6 {
                for i in 0..f {
                    let expected: Vec<f64> = match batch.row(r)[i] {
                        FeatureValue::Id(id) => (0..3).map(|c| table.blocks[i].value.get(id, c)).collect(),
                        FeatureValue::Value(x) => (0..3).map(|c| table.blocks[i].value.get(0, c) * x).collect(),
                    };
                    assert_eq!(&out.row(r)[i * 3..(i + 1) * 3], expected.as_slice());
                }
            }
        }
    }

    #[test]
    fn out_of_range_id_is_a_data_error() {
        let schema = two_field_schema();
        let batch = Batch::new(2, vec![FeatureValue::Id(7), FeatureValue::Value(1.0)], vec![0.0]).unwrap();
        assert!(matches!(batch.conforms_to(&schema), Err(Error::Data(_))));
        let table = EmbeddingTable::new(&schema, 2, 0.01, &mut RngStream::new(0)).unwrap();
        assert!(matches!(table.embed(&batch), Err(Error::Data(_))));
    }

    #[test]
    fn none_plan_is_identity() {
        let schema = two_field_schema();
        let mut norms = FieldNorm::new(FieldNormPlan::none(), &schema, 2).unwrap();
        let v = RngStream::new(3).gaussian_matrix(4, 4, 1.0);
        assert_eq!(normalize_fields(&v, &mut norms, true).unwrap(), v);
        assert_eq!(norms.infer(&v).unwrap(), v);
    }

    #[test]
    fn single_field_vo_ln() {
        let schema = Schema::from_fields([("n", FieldKind::Numerical, 0)]).unwrap();
        let mut norms = FieldNorm::new(FieldNormPlan::uniform(NormSpec::new(NormKind::VarianceOnlyLn)), &schema, 2).unwrap();
        let out = norms.forward(&Matrix::from_rows(&[[2.0, 0.0]]).unwrap(), true).unwrap();
        assert!((out.get(0, 0) - 2.0).abs() < 1e-7 && out.get(0, 1) == 0.0);
    }

    #[test]
    fn mixed_plan_matches_slice_oracle() {
        let schema = Schema::from_fields([
            ("c0", FieldKind::Categorical, 4),
            ("n0", FieldKind::Numerical, 0),
            ("c1", FieldKind::Categorical, 4),
        ])
        .unwrap();
        let plan = FieldNormPlan {
            numerical: NormSpec::new(NormKind::VarianceOnlyLn),
            categorical: NormSpec::new(NormKind::BatchNorm),
        };
        let mut norms = FieldNorm::new(plan, &schema, 3).unwrap();
        let v = RngStream::new(5).gaussian_matrix(5, 9, 1.0);
        let out = norms.forward(&v, true).unwrap();
        for i in 0..3 {
            let slice = v.slice_cols(i * 3, i * 3 + 3).unwrap();
            let expected = if i == 1 {
                vo_ln(&slice, 1e-8).unwrap()
            } else {
                NormLayer::new(NormSpec::new(NormKind::BatchNorm), 3).unwrap().forward(&slice, true).unwrap()
            };
            assert_eq!(out.slice_cols(i * 3, i * 3 + 3).unwrap(), expected);
        }
    }

    #[test]
    fn ln_plans_are_field_local() {
        let mut rng = RngStream::new(8);
        let schema = random_schema(&mut rng, 4);
        for kind in [NormKind::LayerNorm, NormKind::SimpleLn, NormKind::VarianceOnlyLn, NormKind::GroupNorm] {
            let norms = FieldNorm::new(FieldNormPlan::uniform(NormSpec::new(kind)), &schema, 4).unwrap();
            let v = rng.gaussian_matrix(3, 16, 1.0);
            let base = norms.infer(&v).unwrap();
            let mut bumped = v.clone();
            bumped.set(1, 5, v.get(1, 5) + 0.7);
            let moved = norms.infer(&bumped).unwrap();
            for r in 0..3 {
                for c in 0..16 {
                    if r != 1 || !(4..8).contains(&c) {
                        assert_eq!(base.get(r, c), moved.get(r, c));
                    }
                }
            }
        }
    }

    #[test]
    fn ln_slices_have_unit_moments() {
        let mut rng = RngStream::new(9);
        let schema = random_schema(&mut rng, 3);
        let norms = FieldNorm::new(FieldNormPlan::uniform(NormSpec::new(NormKind::LayerNorm)), &schema, 5).unwrap();
        let out = norms.infer(&rng.gaussian_matrix(4, 15, 1.0)).unwrap();
        for i in 0..3 {
            let (m, v) = out.slice_cols(i * 5, i * 5 + 5).unwrap().row_mean_var();
            for r in 0..4 {
                assert!(m[r].abs() <= 1e-9 && (v[r] - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn untouched_rows_get_zero_gradient_and_duplicates_sum() {
        let schema = Schema::from_fields([("c", FieldKind::Categorical, 5)]).unwrap();
        let mut table = EmbeddingTable::new(&schema, 2, 0.01, &mut RngStream::new(1)).unwrap();
        let batch = Batch::new(1, vec![FeatureValue::Id(3), FeatureValue::Id(1), FeatureValue::Id(3)], vec![0.0, 1.0, 0.0]).unwrap();
        table.forward(&batch).unwrap();
        let grad = Matrix::from_rows(&[[1.0, 2.0], [0.5, 0.5], [10.0, 20.0]]).unwrap();
        table.backward(&grad).unwrap();
        let g = &table.blocks[0].grad;
        assert_eq!(g.row(0), &[0.0, 0.0]);
        assert_eq!(g.row(2), &[0.0, 0.0]);
        assert_eq!(g.row(4), &[0.0, 0.0]);
        assert_eq!(g.row(1), &[0.5, 0.5]);
        // split-batch oracle: the two halves accumulate to the same total
        let mut split = EmbeddingTable::new(&schema, 2, 0.01, &mut RngStream::new(1)).unwrap();
        embedding_backward(&grad.slice_cols(0, 2).unwrap(), &batch, &mut split).unwrap();
        let first = Batch::new(1, vec![FeatureValue::Id(3)], vec![0.0]).unwrap();
        let mut one = EmbeddingTable::new(&schema, 2, 0.01, &mut RngStream::new(1)).unwrap();
        embedding_backward(&Matrix::from_rows(&[[1.0, 2.0]]).unwrap(), &first, &mut one).unwrap();
        embedding_backward(&Matrix::from_rows(&[[10.0, 20.0]]).unwrap(), &first, &mut one).unwrap();
        assert_eq!(g.row(3), one.blocks[0].grad.row(3));
        assert_eq!(g.row(3), &[11.0, 22.0]);
        assert!(matches!(table.backward(&grad), Err(Error::MissingCache(_))));
    }

    #[test]
    fn numerical_gradient_is_grad_times_x() {
        let schema = Schema::from_fields([("n", FieldKind::Numerical, 0)]).unwrap();
        let mut table = EmbeddingTable::new(&schema, 3, 0.5, &mut RngStream::new(4)).unwrap();
        let batch = Batch::new(1, vec![FeatureValue::Value(1.7)], vec![1.0]).unwrap();
        let w = [0.3, -1.2, 2.0];
        table.forward(&batch).unwrap();
        table.backward(&Matrix::from_rows(&[w]).unwrap()).unwrap();
        let e = table.blocks[0].value.clone();
        let numeric = numeric_gradient(e.as_slice(), 1e-5, |p| {
            let mut t = table.clone();
            t.blocks[0].value = Matrix::row_vector(p.to_vec()).unwrap();
            t.embed(&batch).unwrap().as_slice().iter().zip(&w).map(|(a, b)| a * b).sum()
        });
        assert!(max_rel_err(table.blocks[0].grad.as_slice(), &numeric) <= 1e-6);
        assert_eq!(table.blocks[0].grad.as_slice(), &[0.3 * 1.7, -1.2 * 1.7, 2.0 * 1.7]);
    }

    #[test]
    fn end_to_end_embedding_gradients_for_every_kind() {
        let mut rng = RngStream::new(21);
        let schema = Schema::from_fields([
            ("c0", FieldKind::Categorical, 3),
            ("n0", FieldKind::Numerical, 0),
            ("c1", FieldKind::Categorical, 2),
        ])
        .unwrap();
        let k = 4;
        for kind in NormKind::ALL {
            let plan = FieldNormPlan::uniform(NormSpec::new(kind));
            let batch = random_batch(&schema, 5, &mut rng);
            let mut table = EmbeddingTable::new(&schema, k, 1.0, &mut rng).unwrap();
            let mut norms = FieldNorm::new(plan, &schema, k).unwrap();
            let w = rng.gaussian_matrix(5, 3 * k, 1.0);
            let loss = |table: &EmbeddingTable, norms: &FieldNorm| -> f64 {
                let mut n = norms.clone();
                let v = table.embed(&batch).unwrap();
                n.forward(&v, true).unwrap().mul(&w).unwrap().as_slice().iter().sum()
            };
            let v = table.forward(&batch).unwrap();
            norms.forward(&v, true).unwrap();
            let gv = norms.backward(&w).unwrap();
            table.backward(&gv).unwrap();
            for b in 0..3 {
                let numeric = numeric_gradient(table.blocks[b].value.as_slice(), 1e-5, |p| {
                    let mut t = table.clone();
                    t.blocks[b].value = Matrix::new(t.blocks[b].value.rows(), k, p.to_vec()).unwrap();
                    loss(&t, &norms)
                });
                let err = max_rel_err(table.blocks[b].grad.as_slice(), &numeric);
                assert!(err <= 1e-6, "{kind} block {b}: {err}");
            }
        }
    }
}
