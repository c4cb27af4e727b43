use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::{NormKind, NormLayer, NormSpec};
use crate::numerics::{Matrix, Param, RngStream};

/// Where a hidden layer's normalization sits relative to its activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    /// `act(norm(W x))`
    #[serde(alias = "before_activation")]
    Before,
    /// `norm(act(W x))`
    #[serde(alias = "after_activation")]
    After,
    #[serde(alias = "no_norm")]
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlpLayerSpec {
    pub in_width: usize,
    pub out_width: usize,
    pub norm: NormSpec,
    pub placement: Placement,
    pub activation: Activation,
}

impl MlpLayerSpec {
    pub fn hidden(in_width: usize, out_width: usize, norm: NormSpec, placement: Placement) -> Self {
        let placement = if norm.kind == NormKind::None { Placement::None } else { placement };
        let norm = if placement == Placement::None { NormSpec::none() } else { norm };
        MlpLayerSpec { in_width, out_width, norm, placement, activation: Activation::Relu }
    }

    /// The final linear layer feeding the sigmoid.
    pub fn output(in_width: usize) -> Self {
        MlpLayerSpec {
            in_width,
            out_width: 1,
            norm: NormSpec::none(),
            placement: Placement::None,
            activation: Activation::Identity,
        }
    }
}

#[derive(Debug, Clone)]
struct MlpCache {
    input: Matrix,
    pre_activation: Matrix,
}

/// Affine transform, optional normalization and activation.
#[derive(Debug, Clone)]
pub struct MlpLayer {
    spec: MlpLayerSpec,
    pub weight: Param,
    pub bias: Param,
    pub norm: NormLayer,
    cache: Option<MlpCache>,
}

impl MlpLayer {
    /// Weights uniform in ±sqrt(6 / (fan_in + fan_out)), zero bias.
    pub fn new(spec: MlpLayerSpec, rng: &mut RngStream) -> Result<Self> {
        if spec.in_width == 0 || spec.out_width == 0 {
            return Err(Error::InvalidSpec("MLP layer widths must be positive".into()));
        }
        let limit = (6.0 / (spec.in_width + spec.out_width) as f64).sqrt();
        let norm_spec = if spec.placement == Placement::None { NormSpec::none() } else { spec.norm };
        Ok(MlpLayer {
            spec,
            weight: Param::new(rng.uniform_matrix(spec.in_width, spec.out_width, -limit, limit)),
            bias: Param::new(Matrix::zeros(1, spec.out_width)),
            norm: NormLayer::new(norm_spec, spec.out_width)?,
            cache: None,
        })
    }

    pub fn spec(&self) -> &MlpLayerSpec {
        &self.spec
    }

    fn affine(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.spec.in_width {
            return Err(Error::dim("mlp_layer_forward", format!("{} cols for in_width {}", x.cols(), self.spec.in_width)));
        }
        x.matmul(&self.weight.value)?.add_row_broadcast(self.bias.value.as_slice())
    }

    fn activate(&self, x: &Matrix) -> Matrix {
        match self.spec.activation {
            Activation::Relu => x.relu(),
            Activation::Identity => x.clone(),
        }
    }

    pub fn forward(&mut self, x: &Matrix, training: bool) -> Result<Matrix> {
        let z = self.affine(x)?;
        let (pre, out) = match self.spec.placement {
            Placement::Before => {
                let n = self.norm.forward(&z, training)?;
                let a = self.activate(&n);
                (n, a)
            }
            Placement::After => {
                let a = self.activate(&z);
                let out = self.norm.forward(&a, training)?;
                (z, out)
            }
            Placement::None => {
                let a = self.activate(&z);
                (z, a)
            }
        };
        self.cache = Some(MlpCache { input: x.clone(), pre_activation: pre });
        Ok(out)
    }

    /// Eval-mode forward that leaves the layer untouched.
    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        let z = self.affine(x)?;
        match self.spec.placement {
            Placement::Before => Ok(self.activate(&self.norm.infer(&z)?)),
            Placement::After => self.norm.infer(&self.activate(&z)),
            Placement::None => Ok(self.activate(&z)),
        }
    }

    /// Input of the activation from the last forward.
    pub fn pre_activation(&self) -> Option<&Matrix> {
        self.cache.as_ref().map(|c| &c.pre_activation)
    }

    fn activation_grad(&self, grad: &Matrix, pre: &Matrix) -> Result<Matrix> {
        match self.spec.activation {
            Activation::Identity => Ok(grad.clone()),
            Activation::Relu => {
                let mut g = grad.clone();
                for (v, p) in g.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    if *p <= 0.0 {
                        *v = 0.0;
                    }
                }
                Ok(g)
            }
        }
    }

    /// Accumulates weight/bias/norm gradients and returns the input gradient.
    pub fn backward(&mut self, grad_out: &Matrix) -> Result<Matrix> {
        let cache = self.cache.take().ok_or(Error::MissingCache("MLP layer"))?;
        if grad_out.shape() != cache.pre_activation.shape() {
            return Err(Error::dim("mlp backward", format!("{:?} vs {:?}", grad_out.shape(), cache.pre_activation.shape())));
        }
        let grad_z = match self.spec.placement {
            Placement::Before => {
                let g = self.activation_grad(grad_out, &cache.pre_activation)?;
                self.norm.backward_accumulate(&g)?
            }
            Placement::After => {
                let g = self.norm.backward_accumulate(grad_out)?;
                self.activation_grad(&g, &cache.pre_activation)?
            }
            Placement::None => self.activation_grad(grad_out, &cache.pre_activation)?,
        };
        let grad_w = cache.input.t_matmul(&grad_z)?;
        self.weight.grad.add_assign(&grad_w)?;
        self.bias.accumulate(&grad_z.col_sums())?;
        grad_z.matmul_t(&self.weight.value)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = vec![&self.weight, &self.bias];
        p.extend(self.norm.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = vec![&mut self.weight, &mut self.bias];
        p.extend(self.norm.params_mut());
        p
    }
}
