use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Bound, Graph, ParamSet, Tensor, Var};

/// Fully connected stack: `tanh` on hidden layers, linear output.
///
/// Layer `i` owns `{prefix}.{i}.weight` (`in x out`) and `{prefix}.{i}.bias`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    prefix: String,
    sizes: Vec<usize>,
}

impl Mlp {
    /// `sizes` lists layer widths from input to output.
    pub fn new(prefix: impl Into<String>, sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!(
                "layer sizes {sizes:?} need an input and an output width, all nonzero"
            )));
        }
        Ok(Mlp {
            prefix: prefix.into(),
            sizes,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty")
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.{layer}.weight", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.{layer}.bias", self.prefix)
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet, rng: &mut R) -> Result<()> {
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let values = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            params.insert(self.weight_name(l), Tensor::matrix(fan_in, fan_out, values)?)?;
            params.insert(self.bias_name(l), Tensor::vector(vec![0.0; fan_out]))?;
        }
        Ok(())
    }

    fn check_layer(&self, params_shape: (&[usize], &[usize]), layer: usize) -> Result<()> {
        let (w, b) = params_shape;
        let expected = [self.sizes[layer], self.sizes[layer + 1]];
        if w != expected {
            return Err(Error::shape(format!("layer {layer} weight ({})", self.weight_name(layer)), &expected, w));
        }
        if b.iter().product::<usize>() != expected[1] {
            return Err(Error::shape(format!("layer {layer} bias ({})", self.bias_name(layer)), &expected[1..], b));
        }
        Ok(())
    }

    /// Records the forward pass of a `rows x input_dim` batch.
    pub fn forward(&self, graph: &mut Graph, bound: &Bound, input: Var) -> Result<Var> {
        let mut h = input;
        for l in 0..self.layers() {
            let w = bound.var(&self.weight_name(l))?;
            let b = bound.var(&self.bias_name(l))?;
            self.check_layer((graph.value(w).shape(), graph.value(b).shape()), l)?;
            let width = graph.value(h).cols();
            if width != self.sizes[l] {
                return Err(Error::shape(format!("layer {l} input"), &[self.sizes[l]], &[width]));
            }
            let z = graph.matmul(h, w)?;
            let z = graph.add_bias(z, b)?;
            h = if l + 1 < self.layers() { graph.tanh(z) } else { z };
        }
        Ok(h)
    }
}

/// Evaluates `mlp` on `input` without keeping the tape around.
pub fn mlp_forward(params: &ParamSet, input: &Tensor, mlp: &Mlp) -> Result<Tensor> {
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph);
    let x = graph.leaf(input.clone());
    let out = mlp.forward(&mut graph, &bound, x)?;
    Ok(graph.value(out).clone())
}
