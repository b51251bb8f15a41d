use rand::Rng;

use super::tape::{affine_kernel, silu, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Nonlinearity applied after every hidden layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Identity,
}

impl Activation {
    pub fn code(self) -> u32 {
        match self {
            Activation::Silu => 0,
            Activation::Identity => 1,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Activation::Silu),
            1 => Ok(Activation::Identity),
            other => Err(Error::format(format!("unknown activation code {other}"))),
        }
    }
}

/// Fully connected layer, `y = x · weight + bias` with `weight` of shape `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Multi-layer perceptron over the last dimension of its input.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpNet {
    widths: Vec<usize>,
    layers: Vec<Linear>,
    activation: Activation,
}

/// Tape handles for every parameter of an [`MlpNet`], in layer order
/// `(weight, bias)`.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub params: Vec<(Var, Var)>,
}

impl BoundMlp {
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.params.iter().flat_map(|&(w, b)| [w, b])
    }
}

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 {
        return Err(Error::param("an MLP needs at least input and output widths"));
    }
    if widths.iter().any(|&w| w == 0) {
        return Err(Error::param(format!("zero layer width in {widths:?}")));
    }
    Ok(())
}

impl MlpNet {
    /// Uniform fan-in initialisation, `U(-1/√fan_in, 1/√fan_in)` for weights and biases.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        check_widths(widths)?;
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                let bias = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
                Linear {
                    weight: Tensor::from_parts(vec![fan_in, fan_out], weight),
                    bias: Tensor::from_parts(vec![fan_out], bias),
                }
            })
            .collect();
        Ok(Self {
            widths: widths.to_vec(),
            layers,
            activation,
        })
    }

    pub fn zeros(widths: &[usize], activation: Activation) -> Result<Self> {
        check_widths(widths)?;
        let layers = widths
            .windows(2)
            .map(|w| Linear {
                weight: Tensor::zeros(&[w[0], w[1]]),
                bias: Tensor::zeros(&[w[1]]),
            })
            .collect();
        Ok(Self {
            widths: widths.to_vec(),
            layers,
            activation,
        })
    }

    /// Rebuilds a network from explicit layers, validating that shapes compose.
    pub fn from_layers(layers: Vec<Linear>, activation: Activation) -> Result<Self> {
        let mut widths = Vec::with_capacity(layers.len() + 1);
        for (i, l) in layers.iter().enumerate() {
            let s = l.weight.shape();
            if s.len() != 2 || l.bias.len() != s[1] {
                return Err(Error::dim(format!("layer {i} has inconsistent weight/bias shapes")));
            }
            if let Some(&prev) = widths.last() {
                if prev != s[0] {
                    return Err(Error::dim(format!("layer {i} input {} != previous output {prev}", s[0])));
                }
            } else {
                widths.push(s[0]);
            }
            widths.push(s[1]);
        }
        check_widths(&widths)?;
        Ok(Self {
            widths,
            layers,
            activation,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    fn activate(&self, t: &mut Tensor) {
        if self.activation == Activation::Silu {
            for v in t.data_mut() {
                *v = silu(*v);
            }
        }
    }

    /// Plain forward pass over an `[n, input_width]` matrix (or a single row).
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        if input.cols() != self.input_width() {
            return Err(Error::dim(format!(
                "input width {} != network input {}",
                input.cols(),
                self.input_width()
            )));
        }
        let mut h = input.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = affine_kernel(&h, &layer.weight, &layer.bias)?;
            if i < last {
                self.activate(&mut h);
            }
        }
        if !h.is_finite() {
            return Err(Error::Domain("non-finite network output".into()));
        }
        let mut shape = input.shape().to_vec();
        if shape.is_empty() {
            shape.push(self.output_width());
        } else {
            *shape.last_mut().unwrap() = self.output_width();
        }
        h.reshape(shape)
    }

    /// Places the parameters on `tape`, tracked when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        let params = self
            .layers
            .iter()
            .map(|l| {
                let mut w = l.weight.clone();
                let mut b = l.bias.clone();
                w.set_requires_grad(trainable);
                b.set_requires_grad(trainable);
                (tape.leaf(w), tape.leaf(b))
            })
            .collect();
        BoundMlp { params }
    }

    /// Recorded forward pass; `x` must be an `[n, input_width]` matrix.
    pub fn forward_tape(&self, tape: &mut Tape, bound: &BoundMlp, x: Var) -> Result<Var> {
        let mut h = x;
        let last = bound.params.len() - 1;
        for (i, &(w, b)) in bound.params.iter().enumerate() {
            h = tape.affine(h, w, b)?;
            if i < last && self.activation == Activation::Silu {
                h = tape.silu(h);
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Straight-line oracle: explicit triple loops, no shared kernels.
    fn naive_forward(net: &MlpNet, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let last = net.layers().len() - 1;
        for (li, layer) in net.layers().iter().enumerate() {
            let (fan_in, fan_out) = (layer.weight.shape()[0], layer.weight.shape()[1]);
            let mut out = vec![0.0; fan_out];
            for (j, o) in out.iter_mut().enumerate() {
                let mut s = layer.bias.data()[j];
                for i in 0..fan_in {
                    s += h[i] * layer.weight.data()[i * fan_out + j];
                }
                *o = if li < last { s / (1.0 + (-s).exp()) } else { s };
            }
            h = out;
        }
        h
    }

    #[test]
    fn identity_linear_layer() {
        let layer = Linear {
            weight: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: Tensor::zeros(&[2]),
        };
        let net = MlpNet::from_layers(vec![layer], Activation::Silu).unwrap();
        let x = Tensor::new(vec![1, 2], vec![0.3, -1.7]).unwrap();
        assert_eq!(net.forward(&x).unwrap().data(), x.data());
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = MlpNet::zeros(&[3, 8, 2], Activation::Silu).unwrap();
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -4.0, 5.0, 6.0]).unwrap();
        assert!(net.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn seeded_2_16_2_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let net = MlpNet::new(&[2, 16, 2], Activation::Silu, &mut rng).unwrap();
        let x = Tensor::new(vec![1, 2], vec![0.7, -1.3]).unwrap();
        let got = net.forward(&x).unwrap();
        let want = naive_forward(&net, x.data());
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let net = MlpNet::zeros(&[3, 2], Activation::Silu).unwrap();
        let x = Tensor::zeros(&[1, 2]);
        assert!(matches!(net.forward(&x), Err(Error::Dimension(_))));
    }

    #[test]
    fn param_count_follows_widths() {
        let net = MlpNet::zeros(&[34, 128, 128, 128, 2], Activation::Silu).unwrap();
        assert_eq!(net.param_count(), 34 * 128 + 128 + 2 * (128 * 128 + 128) + 128 * 2 + 2);
        let total: usize = net.parameters().iter().map(|p| p.len()).sum();
        assert_eq!(total, net.param_count());
    }

    #[test]
    fn taped_forward_is_bitwise_plain_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = MlpNet::new(&[5, 32, 32, 3], Activation::Silu, &mut rng).unwrap();
        let data: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = Tensor::new(vec![4, 5], data).unwrap();
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        let out = net.forward_tape(&mut tape, &bound, xv).unwrap();
        assert_eq!(tape.value(out).data(), net.forward(&x).unwrap().data());
    }

    #[test]
    fn forward_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = MlpNet::new(&[4, 16, 4], Activation::Silu, &mut rng).unwrap();
        let x = Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 / 7.0).collect()).unwrap();
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
