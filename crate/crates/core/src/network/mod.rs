//! Model assembly: embedding table, field-wise normalization, MLP stack and
//! the optional FM branch, with a hand-written backward pass.

mod checkpoint;
mod fm;
mod mlp;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use fm::FmBranch;
pub use mlp::{Activation, MlpLayer, MlpLayerSpec, Placement};

use crate::error::{Error, Result};
use crate::features::{Batch, EmbeddingTable, FieldKind, FieldNorm, FieldNormPlan, Schema, DEFAULT_EMBEDDING_DIM, DEFAULT_EMBEDDING_STD};
use crate::norm::{NormKind, NormSpec, DEFAULT_EPS, DEFAULT_GROUPS, DEFAULT_MOMENTUM};
use crate::numerics::{Matrix, Param, RngStream};
use crate::probe::Probe;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Dnn,
    DeepFm,
    NormDnn,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Dnn => "dnn",
            ModelKind::DeepFm => "deepfm",
            ModelKind::NormDnn => "normdnn",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dnn" => Ok(ModelKind::Dnn),
            "deepfm" => Ok(ModelKind::DeepFm),
            "normdnn" => Ok(ModelKind::NormDnn),
            other => Err(Error::InvalidSpec(format!("unknown model `{other}` (allowed: dnn, deepfm, normdnn)"))),
        }
    }
}

/// Norm used on numerical-field embeddings by the NormDNN recipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NumericalNormChoice {
    VarianceOnlyLn,
    LayerNorm,
}

impl NumericalNormChoice {
    pub fn kind(self) -> NormKind {
        match self {
            NumericalNormChoice::VarianceOnlyLn => NormKind::VarianceOnlyLn,
            NumericalNormChoice::LayerNorm => NormKind::LayerNorm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub embedding_dim: usize,
    /// Hidden layer widths; the width-1 output layer is added on top.
    pub hidden: Vec<usize>,
    pub numerical_norm: NormKind,
    pub categorical_norm: NormKind,
    pub mlp_norm: NormKind,
    pub placement: Placement,
    pub groups: usize,
    pub eps: f64,
    pub momentum: f64,
    pub embedding_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Dnn,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            hidden: vec![400, 400, 400],
            numerical_norm: NormKind::None,
            categorical_norm: NormKind::None,
            mlp_norm: NormKind::None,
            placement: Placement::Before,
            groups: DEFAULT_GROUPS,
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
            embedding_std: DEFAULT_EMBEDDING_STD,
        }
    }
}

impl ModelConfig {
    pub fn new(kind: ModelKind) -> Self {
        ModelConfig { kind, ..Default::default() }
    }

    /// Parses the body of a `[model]` table; missing keys take defaults.
    pub fn from_toml(text: &str) -> Result<ModelConfig> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config("model", e.message().to_string()))?;
        for key in ["numerical_norm", "categorical_norm", "mlp_norm"] {
            if let Some(name) = table.get(key).and_then(|v| v.as_str()) {
                if name.parse::<NormKind>().is_err() {
                    return Err(Error::config(
                        format!("model.{key}"),
                        format!("unknown normalization `{name}` (allowed: {})", NormKind::allowed_names()),
                    ));
                }
            }
        }
        let c: ModelConfig = table.try_into().map_err(|e: toml::de::Error| Error::config("model", e.message().to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// The NormDNN kind fixes the recipe: BatchNorm on categorical fields,
    /// VO-LN before the activation in every hidden layer, and VO-LN on
    /// numerical fields unless LayerNorm was asked for.
    pub fn resolved(&self) -> ModelConfig {
        let mut c = self.clone();
        if c.kind == ModelKind::NormDnn {
            if c.numerical_norm != NormKind::LayerNorm {
                c.numerical_norm = NormKind::VarianceOnlyLn;
            }
            c.categorical_norm = NormKind::BatchNorm;
            c.mlp_norm = NormKind::VarianceOnlyLn;
            c.placement = Placement::Before;
        }
        c
    }

    fn spec(&self, kind: NormKind) -> NormSpec {
        NormSpec::new(kind).with_eps(self.eps).with_groups(self.groups).with_momentum(self.momentum)
    }

    pub fn field_plan(&self) -> FieldNormPlan {
        FieldNormPlan { numerical: self.spec(self.numerical_norm), categorical: self.spec(self.categorical_norm) }
    }

    pub fn uses_batch_norm(&self) -> bool {
        let c = self.resolved();
        [c.numerical_norm, c.categorical_norm, c.mlp_norm].contains(&NormKind::BatchNorm)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::config("model.embedding_dim", "must be at least 1"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("model.hidden", "layer widths must be positive"));
        }
        if !(self.embedding_std >= 0.0 && self.embedding_std.is_finite()) {
            return Err(Error::config("model.embedding_std", "must be finite and non-negative"));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::config("model.eps", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("model.momentum", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Result of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub mlp_logits: Vec<f64>,
    pub fm_logits: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    schema: Schema,
    pub table: EmbeddingTable,
    pub field_norm: FieldNorm,
    /// Hidden layers followed by the output layer.
    pub layers: Vec<MlpLayer>,
    pub fm: Option<FmBranch>,
    freeze_embeddings: bool,
    probe: Option<Probe>,
}

impl Model {
    /// Builds a freshly initialised model. The config is resolved first, so
    /// a NormDNN config yields its fixed recipe.
    pub fn build(config: &ModelConfig, schema: &Schema, seed: u64) -> Result<Model> {
        config.validate()?;
        let config = config.resolved();
        let k = config.embedding_dim;
        let root = RngStream::new(seed);
        let table = EmbeddingTable::new(schema, k, config.embedding_std, &mut root.fork(0))?;
        let field_norm = FieldNorm::new(config.field_plan(), schema, k)?;
        let mut layers = Vec::with_capacity(config.hidden.len() + 1);
        let mut width = schema.len() * k;
        for (i, &out) in config.hidden.iter().enumerate() {
            let spec = MlpLayerSpec::hidden(width, out, config.spec(config.mlp_norm), config.placement);
            layers.push(MlpLayer::new(spec, &mut root.fork(1 + i as u64))?);
            width = out;
        }
        layers.push(MlpLayer::new(MlpLayerSpec::output(width), &mut root.fork(1 + config.hidden.len() as u64))?);
        let fm = (config.kind == ModelKind::DeepFm).then(|| FmBranch::new(schema, k));
        Ok(Model { config, schema: schema.clone(), table, field_norm, layers, fm, freeze_embeddings: false, probe: None })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn hidden_layers(&self) -> &[MlpLayer] {
        &self.layers[..self.layers.len() - 1]
    }

    /// When set, no gradient reaches the embedding table.
    pub fn set_freeze_embeddings(&mut self, freeze: bool) {
        self.freeze_embeddings = freeze;
    }

    pub fn embeddings_frozen(&self) -> bool {
        self.freeze_embeddings
    }

    /// Every probe site this model exposes.
    pub fn probe_sites(&self) -> Vec<String> {
        let mut sites = vec!["emb".to_string(), "emb_norm".to_string()];
        for i in 0..self.config.hidden.len() {
            sites.push(format!("mlp{i}_pre"));
            sites.push(format!("mlp{i}_post"));
        }
        sites
    }

    /// Starts recording statistics at `sites` on every [`Model::forward`].
    pub fn attach_probe(&mut self, sites: &[String]) -> Result<()> {
        let valid = self.probe_sites();
        if let Some(bad) = sites.iter().find(|s| !valid.contains(s)) {
            return Err(Error::UnknownSite { site: bad.clone(), valid: valid.join(", ") });
        }
        self.probe = Some(Probe::new(sites.to_vec()));
        Ok(())
    }

    pub fn probe(&self) -> Option<&Probe> {
        self.probe.as_ref()
    }

    pub fn detach_probe(&mut self) -> Option<Probe> {
        self.probe.take()
    }

    fn record(&mut self, site: &str, x: &Matrix, segment: usize) {
        if let Some(p) = self.probe.as_mut() {
            p.record(site, x, segment);
        }
    }

    /// Forward pass that primes every cache. In training mode BatchNorm uses
    /// batch statistics and updates its running averages.
    pub fn forward(&mut self, batch: &Batch, training: bool) -> Result<ForwardOutput> {
        let k = self.config.embedding_dim;
        let emb = self.table.forward(batch)?;
        self.record("emb", &emb, k);
        let mut h = self.field_norm.forward(&emb, training)?;
        self.record("emb_norm", &h, k);
        let hidden = self.layers.len() - 1;
        for i in 0..hidden {
            h = self.layers[i].forward(&h, training)?;
            if self.probe.is_some() {
                let pre = self.layers[i].pre_activation().cloned().unwrap_or_else(|| h.clone());
                let width = h.cols();
                self.record(&format!("mlp{i}_pre"), &pre, width);
                self.record(&format!("mlp{i}_post"), &h, width);
            }
        }
        let mlp_logits = self.layers[hidden].forward(&h, training)?.into_vec();
        let fm_logits = match self.fm.as_mut() {
            Some(fm) => Some(fm.forward(batch, &emb)?),
            None => None,
        };
        if let Some(p) = self.probe.as_mut() {
            p.advance();
        }
        Ok(finish(mlp_logits, fm_logits))
    }

    /// Eval-mode forward that touches neither caches nor running statistics.
    pub fn predict(&self, batch: &Batch) -> Result<ForwardOutput> {
        let emb = self.table.embed(batch)?;
        let mut h = self.field_norm.infer(&emb)?;
        for layer in &self.layers {
            h = layer.infer(&h)?;
        }
        let fm_logits = match self.fm.as_ref() {
            Some(fm) => Some(fm.logits(batch, &emb)?),
            None => None,
        };
        Ok(finish(h.into_vec(), fm_logits))
    }

    /// Back-propagates `grad_logits` (one per row of the last forward) and
    /// accumulates into every parameter gradient.
    pub fn backward(&mut self, grad_logits: &[f64]) -> Result<()> {
        let mut g = Matrix::new(grad_logits.len(), 1, grad_logits.to_vec())?;
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        let mut g_emb = self.field_norm.backward(&g)?;
        if let Some(fm) = self.fm.as_mut() {
            g_emb.add_assign(&fm.backward(grad_logits)?)?;
        }
        if self.freeze_embeddings {
            self.table.clear_cache();
            Ok(())
        } else {
            self.table.backward(&g_emb)
        }
    }

    /// Trainable parameters in graph order: embedding blocks, field norms,
    /// then weight, bias and norm of each MLP layer, then FM weights.
    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.table.params();
        p.extend(self.field_norm.params());
        for layer in &self.layers {
            p.extend(layer.params());
        }
        if let Some(fm) = &self.fm {
            p.extend(fm.params());
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.table.params_mut();
        p.extend(self.field_norm.params_mut());
        for layer in &mut self.layers {
            p.extend(layer.params_mut());
        }
        if let Some(fm) = &mut self.fm {
            p.extend(fm.params_mut());
        }
        p
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub(crate) fn norm_layers_mut(&mut self) -> Vec<&mut crate::norm::NormLayer> {
        let mut out: Vec<&mut crate::norm::NormLayer> = self.field_norm.layers_mut().iter_mut().collect();
        out.extend(self.layers.iter_mut().map(|l| &mut l.norm));
        out
    }
}

fn finish(mlp_logits: Vec<f64>, fm_logits: Option<Vec<f64>>) -> ForwardOutput {
    let logits: Vec<f64> = match &fm_logits {
        Some(fm) => mlp_logits.iter().zip(fm).map(|(a, b)| a + b).collect(),
        None => mlp_logits.clone(),
    };
    let probabilities = logits.iter().map(|l| crate::numerics::sigmoid(*l)).collect();
    ForwardOutput { logits, probabilities, mlp_logits, fm_logits }
}

/// NormDNN: categorical fields under BatchNorm, numerical fields under the
/// chosen norm, VO-LN before the activation of every hidden layer.
pub fn build_norm_dnn(schema: &Schema, k: usize, hidden: &[usize], numerical: NumericalNormChoice, seed: u64) -> Result<Model> {
    let config = ModelConfig {
        kind: ModelKind::NormDnn,
        embedding_dim: k,
        hidden: hidden.to_vec(),
        numerical_norm: numerical.kind(),
        ..Default::default()
    };
    Model::build(&config, schema, seed)
}

/// Number of fields of each kind under the model's field plan, keyed by norm.
pub fn field_norm_counts(model: &Model) -> Vec<(FieldKind, NormKind, usize)> {
    let plan = model.field_norm.plan();
    [FieldKind::Numerical, FieldKind::Categorical]
        .into_iter()
        .map(|kind| (kind, plan.for_kind(kind).kind, model.schema.count(kind)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureValue;
    use crate::testutil::{extrapolated_difference, rel_err};

    fn toy_schema() -> Schema {
        Schema::from_fields([
            ("c0", FieldKind::Categorical, 5),
            ("n0", FieldKind::Numerical, 0),
            ("c1", FieldKind::Categorical, 4),
            ("n1", FieldKind::Numerical, 0),
        ])
        .unwrap()
    }

    fn toy_batch(schema: &Schema, rows: usize, rng: &mut RngStream) -> Batch {
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..rows {
            for f in schema.fields() {
                values.push(match f.kind {
                    FieldKind::Categorical => FeatureValue::Id((rng.next_u64() % f.vocab_size as u64) as usize),
                    FieldKind::Numerical => FeatureValue::Value(rng.gaussian(0.0, 1.0)),
                });
            }
            labels.push(if rng.bernoulli(0.5) { 1.0 } else { 0.0 });
        }
        Batch::new(schema.len(), values, labels).unwrap()
    }

    fn toy_config(kind: ModelKind, emb: NormKind, mlp: NormKind) -> ModelConfig {
        ModelConfig {
            kind,
            embedding_dim: 4,
            hidden: vec![8, 6],
            numerical_norm: emb,
            categorical_norm: emb,
            mlp_norm: mlp,
            embedding_std: 0.5,
            ..Default::default()
        }
    }

    /// Max relative error between backward and central differences of
    /// `Σ c_r · logit_r` over every parameter entry.
    fn full_stack_check(config: &ModelConfig, seed: u64) -> f64 {
        let schema = toy_schema();
        let mut model = Model::build(config, &schema, seed).unwrap();
        let mut rng = RngStream::new(1000 + seed);
        let batch = toy_batch(&schema, 6, &mut rng);
        let weights: Vec<f64> = (0..batch.rows()).map(|_| rng.gaussian(0.0, 1.0)).collect();
        // Zero biases can leave a dead row exactly on the ReLU kink.
        for layer in model.layers.iter_mut() {
            for v in layer.bias.value.as_mut_slice() {
                *v = rng.gaussian(0.0, 0.1);
            }
        }
        // Move FM weights off zero so their gradient path is exercised.
        if let Some(fm) = model.fm.as_mut() {
            for p in fm.params_mut() {
                for v in p.value.as_mut_slice() {
                    *v = rng.gaussian(0.0, 0.5);
                }
            }
        }
        model.zero_grad();
        model.forward(&batch, true).unwrap();
        model.backward(&weights).unwrap();
        let analytic: Vec<Vec<f64>> = model.params().iter().map(|p| p.grad.as_slice().to_vec()).collect();
        let loss = |m: &mut Model| -> f64 {
            let out = m.forward(&batch, true).unwrap();
            out.logits.iter().zip(&weights).map(|(l, c)| l * c).sum()
        };
        let step = 1e-5;
        let mut worst: f64 = 0.0;
        for (pi, grads) in analytic.iter().enumerate() {
            for j in 0..grads.len() {
                let orig = model.params()[pi].value.as_slice()[j];
                let numeric = extrapolated_difference(step, |d| {
                    model.params_mut()[pi].value.as_mut_slice()[j] = orig + d;
                    loss(&mut model)
                });
                model.params_mut()[pi].value.as_mut_slice()[j] = orig;
                worst = worst.max(rel_err(grads[j], numeric));
            }
        }
        worst
    }

    #[test]
    fn full_stack_gradients_every_template() {
        let mut templates = vec![
            toy_config(ModelKind::Dnn, NormKind::None, NormKind::None),
            toy_config(ModelKind::DeepFm, NormKind::None, NormKind::None),
            toy_config(ModelKind::DeepFm, NormKind::VarianceOnlyLn, NormKind::LayerNorm),
            toy_config(ModelKind::NormDnn, NormKind::None, NormKind::None),
        ];
        for kind in NormKind::ALL {
            templates.push(toy_config(ModelKind::Dnn, kind, kind));
        }
        let mut after = toy_config(ModelKind::Dnn, NormKind::LayerNorm, NormKind::VarianceOnlyLn);
        after.placement = Placement::After;
        templates.push(after);
        for config in &templates {
            for seed in 0..10 {
                let err = full_stack_check(config, seed);
                assert!(err <= 1e-5, "{:?}/{:?}/{:?} seed {seed}: {err}", config.kind, config.categorical_norm, config.mlp_norm);
            }
        }
    }

    #[test]
    fn zero_parameters_give_half() {
        let schema = toy_schema();
        for kind in [ModelKind::Dnn, ModelKind::DeepFm, ModelKind::NormDnn] {
            let mut model = Model::build(&toy_config(kind, NormKind::None, NormKind::None), &schema, 1).unwrap();
            for p in model.params_mut() {
                p.value = Matrix::zeros(p.value.rows(), p.value.cols());
            }
            let batch = toy_batch(&schema, 5, &mut RngStream::new(2));
            for p in model.forward(&batch, true).unwrap().probabilities {
                assert_eq!(p, 0.5);
            }
        }
    }

    #[test]
    fn fm_off_equals_mlp_path() {
        let schema = toy_schema();
        let mut model = Model::build(&toy_config(ModelKind::Dnn, NormKind::LayerNorm, NormKind::None), &schema, 3).unwrap();
        let out = model.forward(&toy_batch(&schema, 4, &mut RngStream::new(4)), true).unwrap();
        assert!(out.fm_logits.is_none());
        assert_eq!(out.logits, out.mlp_logits);
    }

    #[test]
    fn fm_pairwise_matches_pair_loop() {
        let schema = Schema::from_fields([("a", FieldKind::Categorical, 3), ("b", FieldKind::Numerical, 0)]).unwrap();
        let mut config = ModelConfig::new(ModelKind::DeepFm);
        config.embedding_dim = 1;
        config.hidden = vec![2];
        let mut model = Model::build(&config, &schema, 5).unwrap();
        model.table.blocks_mut()[0].value = Matrix::from_rows(&[[0.0], [0.7], [-1.3]]).unwrap();
        model.table.blocks_mut()[1].value = Matrix::from_rows(&[[2.5]]).unwrap();
        let batch = Batch::new(2, vec![FeatureValue::Id(2), FeatureValue::Value(0.4)], vec![1.0]).unwrap();
        let fm = model.forward(&batch, true).unwrap().fm_logits.unwrap();
        let v = [-1.3, 2.5 * 0.4];
        let mut brute = 0.0;
        for i in 0..v.len() {
            for j in i + 1..v.len() {
                brute += v[i] * v[j];
            }
        }
        assert!((fm[0] - brute).abs() < 1e-15);
    }

    #[test]
    fn fm_branch_ignores_field_norm() {
        let schema = toy_schema();
        let batch = toy_batch(&schema, 6, &mut RngStream::new(7));
        let plain = Model::build(&toy_config(ModelKind::DeepFm, NormKind::None, NormKind::None), &schema, 9).unwrap();
        let mut normed = plain.clone();
        normed.field_norm = FieldNorm::new(FieldNormPlan::uniform(NormSpec::new(NormKind::VarianceOnlyLn)), &schema, 4).unwrap();
        let a = plain.predict(&batch).unwrap();
        let b = normed.predict(&batch).unwrap();
        assert_eq!(a.fm_logits, b.fm_logits);
        assert_ne!(a.mlp_logits, b.mlp_logits);
    }

    #[test]
    fn zero_grad_logits_give_zero_gradients() {
        let schema = toy_schema();
        let mut model = Model::build(&toy_config(ModelKind::NormDnn, NormKind::None, NormKind::None), &schema, 11).unwrap();
        let batch = toy_batch(&schema, 4, &mut RngStream::new(12));
        model.forward(&batch, true).unwrap();
        model.backward(&[0.0; 4]).unwrap();
        assert!(model.params().iter().all(|p| p.grad.as_slice().iter().all(|g| *g == 0.0)));
        assert!(matches!(model.backward(&[0.0; 4]), Err(Error::MissingCache(_))));
    }

    #[test]
    fn frozen_embeddings_only_drop_table_gradients() {
        let schema = toy_schema();
        let batch = toy_batch(&schema, 5, &mut RngStream::new(13));
        let grads = [0.3, -0.2, 0.1, 0.5, -0.4];
        let run = |freeze: bool| {
            let mut m = Model::build(&toy_config(ModelKind::Dnn, NormKind::VarianceOnlyLn, NormKind::VarianceOnlyLn), &schema, 14).unwrap();
            m.set_freeze_embeddings(freeze);
            m.forward(&batch, true).unwrap();
            m.backward(&grads).unwrap();
            m
        };
        let full = run(false);
        let frozen = run(true);
        let tables = full.table.params().len();
        for (i, (a, b)) in full.params().iter().zip(frozen.params()).enumerate() {
            if i < tables {
                assert!(b.grad.as_slice().iter().all(|g| *g == 0.0));
                assert!(a.grad.as_slice().iter().any(|g| *g != 0.0));
            } else {
                assert_eq!(a.grad, b.grad);
            }
        }
    }

    #[test]
    fn norm_dnn_recipe() {
        let criteo = Schema::from_fields(
            (0..13)
                .map(|i| (format!("I{i}"), FieldKind::Numerical, 0))
                .chain((0..26).map(|i| (format!("C{i}"), FieldKind::Categorical, 10))),
        )
        .unwrap();
        let model = build_norm_dnn(&criteo, 4, &[8, 8], NumericalNormChoice::VarianceOnlyLn, 0).unwrap();
        let counts = field_norm_counts(&model);
        assert!(counts.contains(&(FieldKind::Numerical, NormKind::VarianceOnlyLn, 13)));
        assert!(counts.contains(&(FieldKind::Categorical, NormKind::BatchNorm, 26)));
        for layer in model.hidden_layers() {
            assert_eq!(layer.spec().norm.kind, NormKind::VarianceOnlyLn);
            assert_eq!(layer.spec().placement, Placement::Before);
        }
        let out = model.layers.last().unwrap().spec();
        assert_eq!((out.activation, out.norm.kind), (Activation::Identity, NormKind::None));

        let avazu = Schema::from_fields((0..5).map(|i| (format!("C{i}"), FieldKind::Categorical, 10))).unwrap();
        let model = build_norm_dnn(&avazu, 4, &[8], NumericalNormChoice::LayerNorm, 0).unwrap();
        assert!(model.field_norm.layers().iter().all(|l| l.kind() == NormKind::BatchNorm));
    }

    #[test]
    fn probes_do_not_change_outputs() {
        let schema = toy_schema();
        let batch = toy_batch(&schema, 6, &mut RngStream::new(15));
        let mut a = Model::build(&toy_config(ModelKind::NormDnn, NormKind::None, NormKind::None), &schema, 16).unwrap();
        let mut b = a.clone();
        b.attach_probe(&b.probe_sites()).unwrap();
        assert_eq!(a.forward(&batch, true).unwrap(), b.forward(&batch, true).unwrap());
        assert_eq!(b.probe().unwrap().records().len(), 6);
        let err = b.attach_probe(&["mlp9_pre".to_string()]).unwrap_err();
        assert!(err.to_string().contains("mlp1_post"));
    }

    #[test]
    fn predict_matches_eval_forward() {
        let schema = toy_schema();
        let batch = toy_batch(&schema, 6, &mut RngStream::new(17));
        let mut model = Model::build(&toy_config(ModelKind::NormDnn, NormKind::None, NormKind::None), &schema, 18).unwrap();
        model.forward(&batch, true).unwrap();
        let eval = model.predict(&batch).unwrap();
        assert_eq!(model.forward(&batch, false).unwrap(), eval);
    }
}
