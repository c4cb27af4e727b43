use crate::error::{Error, Result};
use crate::features::{Batch, FeatureValue, FieldKind, Schema};
use crate::numerics::{Matrix, Param};

/// Factorization-machine scorer of DeepFM: first-order weights plus
/// `½ Σ_d [(Σ_i v_id)² - Σ_i v_id²]` over the field embeddings. It reads the
/// embeddings before any normalization.
#[derive(Debug, Clone)]
pub struct FmBranch {
    k: usize,
    /// Per field: `vocab × 1` for categorical fields, `1 × 1` for numerical.
    pub first_order: Vec<Param>,
    cache: Option<(Batch, Matrix)>,
}

impl FmBranch {
    pub fn new(schema: &Schema, k: usize) -> Self {
        let first_order = schema
            .fields()
            .iter()
            .map(|f| match f.kind {
                FieldKind::Categorical => Param::new(Matrix::zeros(f.vocab_size, 1)),
                FieldKind::Numerical => Param::new(Matrix::zeros(1, 1)),
            })
            .collect();
        FmBranch { k, first_order, cache: None }
    }

    /// First-order plus pairwise term for every row of `embeddings`.
    pub fn logits(&self, batch: &Batch, embeddings: &Matrix) -> Result<Vec<f64>> {
        let f = self.first_order.len();
        if embeddings.cols() != f * self.k || embeddings.rows() != batch.rows() {
            return Err(Error::dim("fm", format!("{:?} embeddings for {} rows x {f} fields", embeddings.shape(), batch.rows())));
        }
        let k = self.k;
        let mut out = Vec::with_capacity(batch.rows());
        for r in 0..batch.rows() {
            let mut linear = 0.0;
            for (w, v) in self.first_order.iter().zip(batch.row(r)) {
                linear += match *v {
                    FeatureValue::Id(id) => w.value.get(id, 0),
                    FeatureValue::Value(x) => w.value.get(0, 0) * x,
                };
            }
            let row = embeddings.row(r);
            let mut pairwise = 0.0;
            for d in 0..k {
                let (mut sum, mut sq) = (0.0, 0.0);
                for i in 0..f {
                    let v = row[i * k + d];
                    sum += v;
                    sq += v * v;
                }
                pairwise += sum * sum - sq;
            }
            out.push(linear + 0.5 * pairwise);
        }
        Ok(out)
    }

    pub fn forward(&mut self, batch: &Batch, embeddings: &Matrix) -> Result<Vec<f64>> {
        let out = self.logits(batch, embeddings)?;
        self.cache = Some((batch.clone(), embeddings.clone()));
        Ok(out)
    }

    /// Accumulates first-order gradients; returns the gradient w.r.t. the
    /// embeddings: `∂/∂v_id = (Σ_j v_jd) - v_id`.
    pub fn backward(&mut self, grad_logits: &[f64]) -> Result<Matrix> {
        let (batch, emb) = self.cache.take().ok_or(Error::MissingCache("FM branch"))?;
        if grad_logits.len() != batch.rows() {
            return Err(Error::dim("fm backward", format!("{} grads for {} rows", grad_logits.len(), batch.rows())));
        }
        let (k, f) = (self.k, self.first_order.len());
        let mut grad = Matrix::zeros(emb.rows(), emb.cols());
        for (r, &g) in grad_logits.iter().enumerate() {
            for (w, v) in self.first_order.iter_mut().zip(batch.row(r)) {
                match *v {
                    FeatureValue::Id(id) => w.grad.as_mut_slice()[id] += g,
                    FeatureValue::Value(x) => w.grad.as_mut_slice()[0] += g * x,
                }
            }
            let row = emb.row(r);
            let out = grad.row_mut(r);
            for d in 0..k {
                let sum: f64 = (0..f).map(|i| row[i * k + d]).sum();
                for i in 0..f {
                    out[i * k + d] = g * (sum - row[i * k + d]);
                }
            }
        }
        grad.ensure_finite("fm backward")?;
        Ok(grad)
    }

    pub fn params(&self) -> Vec<&Param> {
        self.first_order.iter().collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.first_order.iter_mut().collect()
    }
}
