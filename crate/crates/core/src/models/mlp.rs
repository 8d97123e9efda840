use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};
use crate::numcore::{Graph, NumError, Tensor, Var};
use crate::rng;

/// Layer widths of a fully connected network, input first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub dims: Vec<usize>,
    /// Apply ReLU after the last layer as well as the hidden ones.
    #[serde(default)]
    pub final_activation: bool,
    /// Scale every output row to unit ℓ2 norm.
    #[serde(default)]
    pub normalize_output: bool,
}

impl ArchConfig {
    pub fn new(dims: Vec<usize>, final_activation: bool) -> Self {
        Self {
            dims,
            final_activation,
            normalize_output: false,
        }
    }

    pub fn normalized(self) -> Self {
        Self {
            normalize_output: true,
            ..self
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 {
            return Err(Error::Invalid(format!(
                "architecture needs at least an input and an output width, got {:?}",
                self.dims
            )));
        }
        if self.dims.contains(&0) {
            return Err(Error::Invalid(format!(
                "architecture widths must be positive, got {:?}",
                self.dims
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// A plain MLP: `x·W + b` per layer, ReLU between layers, optionally
/// followed by row-wise ℓ2 normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub arch: ArchConfig,
    pub params: ParamStore,
}

/// Parameters of an [`Mlp`] placed into a graph.
pub struct BoundMlp<'g> {
    layers: Vec<(Var<'g>, Var<'g>)>,
    final_activation: bool,
    normalize_output: bool,
}

impl<'g> BoundMlp<'g> {
    /// Wraps handles already in the graph, given as (weight, bias) pairs in
    /// layer order.
    pub fn from_vars(vars: &[Var<'g>], final_activation: bool) -> Self {
        assert!(
            !vars.is_empty() && vars.len() % 2 == 0,
            "expected weight/bias pairs"
        );
        Self {
            layers: vars.chunks(2).map(|c| (c[0], c[1])).collect(),
            final_activation,
            normalize_output: false,
        }
    }

    pub fn with_normalized_output(self, normalize_output: bool) -> Self {
        Self {
            normalize_output,
            ..self
        }
    }

    pub fn forward(&self, x: Var<'g>) -> Result<Var<'g>, NumError> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(*w)?.add(*b)?;
            if i < last || self.final_activation {
                h = h.relu()?;
            }
        }
        if self.normalize_output {
            h = h.normalize_rows()?;
        }
        Ok(h)
    }

    /// Parameter handles in store order (weight, bias per layer).
    pub fn vars(&self) -> Vec<Var<'g>> {
        self.layers.iter().flat_map(|(w, b)| [*w, *b]).collect()
    }
}

pub(crate) fn layer_names(i: usize) -> (String, String) {
    (format!("layer{i}.weight"), format!("layer{i}.bias"))
}

impl Mlp {
    /// Glorot-uniform weights, zero biases; a function of `(arch, seed)` only.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut r = rng::stream(seed, &[rng::tag::INIT]);
        let mut params = ParamStore::new();
        for (i, w) in arch.dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| r.random_range(-bound..bound))
                .collect();
            let (wn, bn) = layer_names(i);
            params.insert(wn, Tensor::new(vec![fan_in, fan_out], data)?)?;
            params.insert(bn, Tensor::zeros(&[fan_out]))?;
        }
        Ok(Self {
            arch: arch.clone(),
            params,
        })
    }

    /// Checks that `params` has exactly the layout `arch` implies.
    pub fn from_parts(arch: ArchConfig, params: ParamStore) -> Result<Self> {
        arch.validate()?;
        let expected = Self::init(&arch, 0)?;
        expected.params.check_compatible(&params)?;
        Ok(Self { arch, params })
    }

    fn bind_with<'g>(&self, g: &'g Graph, trainable: bool) -> BoundMlp<'g> {
        let ts: Vec<&Tensor> = self.params.tensors().collect();
        let leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        BoundMlp {
            layers: ts.chunks(2).map(|c| (leaf(c[0]), leaf(c[1]))).collect(),
            final_activation: self.arch.final_activation,
            normalize_output: self.arch.normalize_output,
        }
    }

    /// Binds parameters as gradient-tracked leaves.
    pub fn bind<'g>(&self, g: &'g Graph) -> BoundMlp<'g> {
        self.bind_with(g, true)
    }

    /// Binds parameters as constants (frozen model).
    pub fn bind_frozen<'g>(&self, g: &'g Graph) -> BoundMlp<'g> {
        self.bind_with(g, false)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.shape()[1] != self.arch.input_dim() {
            return Err(NumError::ShapeMismatch {
                op: "forward",
                left: x.shape().to_vec(),
                right: vec![self.arch.input_dim()],
            }
            .into());
        }
        Ok(())
    }

    /// Gradient-free forward pass on a `[B, input]` batch.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let g = Graph::new();
        let out = self.bind_frozen(&g).forward(g.constant(x.clone()))?;
        Ok((*out.value()).clone())
    }

    /// Overwrites parameters with `values`, in store order.
    pub fn set_params(&mut self, values: Vec<Tensor>) {
        for (t, v) in self.params.tensors_mut().zip(values) {
            debug_assert_eq!(t.shape(), v.shape());
            *t = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_and_layout() {
        let arch = ArchConfig::new(vec![8, 4, 2], false);
        let m = Mlp::init(&arch, 3).unwrap();
        assert_eq!(m.params.count(), 46);
        assert_eq!(arch.param_count(), 46);
        let names: Vec<&str> = m.params.names().collect();
        assert_eq!(names, ["layer0.weight", "layer0.bias", "layer1.weight", "layer1.bias"]);
        let bound = (6.0f64 / 12.0).sqrt();
        assert!(m.params.get("layer0.weight").unwrap().max_abs() <= bound);
        assert_eq!(m.params.get("layer1.bias").unwrap().max_abs(), 0.0);
    }

    #[test]
    fn seeding() {
        let arch = ArchConfig::new(vec![8, 4, 2], false);
        assert_eq!(Mlp::init(&arch, 1).unwrap(), Mlp::init(&arch, 1).unwrap());
        assert_ne!(Mlp::init(&arch, 1).unwrap(), Mlp::init(&arch, 2).unwrap());
    }

    #[test]
    fn forward_shapes() {
        let arch = ArchConfig::new(vec![3, 5, 2], false);
        let m = Mlp::init(&arch, 0).unwrap();
        let x = Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, 0.1, 0.2, 0.3]).unwrap();
        let y = m.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert_eq!(y.row(0), y.row(1));
        assert_eq!(m.forward(&Tensor::zeros(&[0, 3])).unwrap().shape(), &[0, 2]);
        assert!(m.forward(&Tensor::zeros(&[1, 4])).is_err());
    }

    #[test]
    fn rejects_bad_arch() {
        assert!(Mlp::init(&ArchConfig::new(vec![3], false), 0).is_err());
        assert!(Mlp::init(&ArchConfig::new(vec![3, 0, 2], false), 0).is_err());
    }
}
