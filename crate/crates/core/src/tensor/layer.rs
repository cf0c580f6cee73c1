use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Gradients, Real, Tape, Tensor, Var};
use crate::{Error, Result};

/// One layer of the fixed vocabulary the networks are built from.
///
/// Convolutions always use symmetric zero padding of `kernel / 2`, so a
/// stride-1 convolution preserves spatial size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
    },
    MaxPool2,
    Upsample2,
    Relu,
    Sigmoid,
    Softmax2,
    GlobalAvgPool,
    GradReverse {
        scale: f64,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

fn one() -> usize {
    1
}

impl LayerSpec {
    pub fn conv3x3(in_channels: usize, out_channels: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel: 3,
            stride: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                if kernel % 2 == 0 {
                    return Err(Error::Config(format!("conv2d kernel must be odd, got {kernel}")));
                }
                if in_channels == 0 || out_channels == 0 || stride == 0 {
                    return Err(Error::Config("conv2d channels and stride must be positive".into()));
                }
            }
            LayerSpec::GradReverse { scale } if !(scale > 0.0 && scale.is_finite()) => {
                return Err(Error::Config(format!("grad-reverse scale must be > 0, got {scale}")));
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } if in_features == 0 || out_features == 0 => {
                return Err(Error::Config("linear features must be positive".into()));
            }
            _ => {}
        }
        Ok(())
    }

    /// Parameter shapes (weight then bias) with their initialization fans.
    fn params(&self) -> Vec<(&'static str, Vec<usize>, usize, usize)> {
        match *self {
            LayerSpec::Conv2d {
                in_channels: ci,
                out_channels: co,
                kernel: k,
                ..
            } => vec![
                ("weight", vec![co, ci, k, k], ci * k * k, co * k * k),
                ("bias", vec![co], 0, 0),
            ],
            LayerSpec::Linear {
                in_features: i,
                out_features: o,
            } => vec![("weight", vec![o, i], i, o), ("bias", vec![o], 0, 0)],
            _ => Vec::new(),
        }
    }

    /// Records this layer on the tape. `params` are the layer's own
    /// parameters in the order of [`LayerSpec::params`].
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &[Var], input: Var) -> Result<Var> {
        match *self {
            LayerSpec::Conv2d { kernel, stride, .. } => {
                tape.conv2d(input, params[0], Some(params[1]), stride, kernel / 2)
            }
            LayerSpec::MaxPool2 => tape.maxpool2(input),
            LayerSpec::Upsample2 => tape.upsample2(input),
            LayerSpec::Relu => tape.relu(input),
            LayerSpec::Sigmoid => tape.sigmoid(input),
            LayerSpec::Softmax2 => tape.softmax2(input),
            LayerSpec::GlobalAvgPool => tape.global_avg_pool(input),
            LayerSpec::GradReverse { scale } => tape.grad_reverse(input, T::of(scale)),
            LayerSpec::Linear { .. } => tape.linear(input, params[0], Some(params[1])),
        }
    }
}

/// Named parameter tensors of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    /// Places every parameter on the tape as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<Bound> {
        let vars = self
            .values
            .iter()
            .map(|v| tape.variable(v.clone()))
            .collect::<Result<_>>()?;
        Ok(Bound(vars))
    }

    /// Replaces values from `(name, tensor)` pairs, requiring an exact match
    /// of names and shapes.
    pub fn load(&mut self, arrays: Vec<(String, Tensor<T>)>) -> Result<()> {
        if arrays.len() != self.values.len() {
            return Err(Error::Malformed {
                what: "checkpoint".into(),
                detail: format!("expected {} arrays, found {}", self.values.len(), arrays.len()),
            });
        }
        for ((name, value), (want_name, slot)) in arrays.into_iter().zip(self.names.iter().zip(&mut self.values)) {
            if &name != want_name || value.shape() != slot.shape() {
                return Err(Error::Malformed {
                    what: "checkpoint".into(),
                    detail: format!(
                        "array {name} {:?} does not match {want_name} {:?}",
                        value.shape(),
                        slot.shape()
                    ),
                });
            }
            *slot = value;
        }
        Ok(())
    }
}

/// Tape handles for every parameter of a [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Gradients for each bound parameter (zeros where none flowed).
    pub fn grads<T: Real>(&self, grads: &Gradients<T>, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        self.0
            .iter()
            .zip(store.values())
            .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
            .collect()
    }
}

/// A chain of layers whose parameters live in a shared [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Sequential {
    layers: Vec<LayerSpec>,
    offsets: Vec<usize>,
}

impl Sequential {
    /// Appends freshly initialized parameters for `layers` to `store`.
    ///
    /// Weights are drawn uniformly from `[-a, a]` with
    /// `a = sqrt(6 / (fan_in + fan_out))`; biases start at zero.
    pub fn new<T: Real>(
        prefix: &str,
        layers: Vec<LayerSpec>,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut offsets = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            layer.validate()?;
            offsets.push(store.len());
            for (pname, shape, fan_in, fan_out) in layer.params() {
                let value = if fan_in + fan_out == 0 {
                    Tensor::zeros(shape)
                } else {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    Tensor::from_fn(shape, |_| T::of(rng.random_range(-a..a)))
                };
                store.push(format!("{prefix}.{i}.{pname}"), value);
            }
        }
        Ok(Sequential { layers, offsets })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, input: Var) -> Result<Var> {
        let mut x = input;
        for (layer, &off) in self.layers.iter().zip(&self.offsets) {
            let n = layer.params().len();
            x = layer.forward(tape, &bound.vars()[off..off + n], x)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn invalid_specs_rejected() {
        assert!(LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 1,
            kernel: 2,
            stride: 1
        }
        .validate()
        .is_err());
        assert!(LayerSpec::GradReverse { scale: 0.0 }.validate().is_err());
        assert!(LayerSpec::GradReverse { scale: 1.0 }.validate().is_ok());
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let build = |seed| {
            let mut store = ParamStore::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Sequential::new("net", vec![LayerSpec::conv3x3(4, 8), LayerSpec::Relu], &mut store, &mut rng).unwrap();
            store
        };
        let a = build(1);
        assert_eq!(a, build(1));
        assert_ne!(a, build(2));
        let bound = (6.0f32 / (36.0 + 72.0)).sqrt();
        assert!(a.values()[0].data().iter().all(|v| v.abs() <= bound));
        assert!(a.values()[1].data().iter().all(|&v| v == 0.0));
        assert_eq!(a.names(), &["net.0.weight", "net.0.bias"]);
    }

    #[test]
    fn layer_spec_json_shape() {
        let s: LayerSpec = serde_json::from_str(r#"{"kind":"grad-reverse","scale":0.5}"#).unwrap();
        assert_eq!(s, LayerSpec::GradReverse { scale: 0.5 });
        let c: LayerSpec = serde_json::from_str(r#"{"kind":"conv2d","in_channels":1,"out_channels":2,"kernel":3}"#).unwrap();
        assert_eq!(c, LayerSpec::conv3x3(1, 2));
    }
}
