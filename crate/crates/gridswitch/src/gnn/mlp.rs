//! Dense perceptrons with recorded activations for reverse mode.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Negative slope of the leaky rectifier used throughout the model.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Shape and activation plan of one perceptron. Hidden layers always
/// pass through the leaky rectifier; the output layer is linear unless
/// `output_leaky` is set (the latent dynamics squash their output, the
/// encoders, messages and decoders do not).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub output_leaky: bool,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize, output_leaky: bool) -> Self {
        assert!(
            input >= 1 && output >= 1 && hidden.iter().all(|&h| h >= 1),
            "every layer needs at least one unit"
        );
        MlpSpec {
            input,
            hidden: hidden.to_vec(),
            output,
            output_leaky,
        }
    }

    /// Per-layer (fan_in, fan_out) pairs.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let widths: Vec<usize> = std::iter::once(self.input)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(self.output))
            .collect();
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn n_params(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(i, o)| o * i + o)
            .sum()
    }
}

fn leaky(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

/// Rectifier derivative recovered from the activated value: the slope
/// is positive, so the output carries the pre-activation's sign.
fn leaky_grad(activated: f64) -> f64 {
    if activated >= 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Row-major weight matrices and bias vectors, one pair per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

/// Activations of one forward call: the input, then every layer's
/// post-activation output. Enough to replay the call backwards; the
/// rectifier derivative is recovered from the stored outputs.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    layers: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.layers.last().expect("trace holds at least the input")
    }
}

/// Parameter gradients in the same shape as the perceptron.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl Mlp {
    /// Fan-in scaled uniform weights, zero biases.
    pub fn init<R: Rng>(spec: MlpSpec, rng: &mut R) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (fan_in, fan_out) in spec.layer_dims() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            weights.push(
                (0..fan_out * fan_in)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect(),
            );
            biases.push(vec![0.0; fan_out]);
        }
        Mlp {
            spec,
            weights,
            biases,
        }
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            weights: self.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.spec.n_params()
    }

    /// Forward pass recording the activations of every layer.
    pub fn forward(&self, x: &[f64]) -> MlpTrace {
        assert_eq!(x.len(), self.spec.input, "input width mismatch");
        let n_layers = self.weights.len();
        let mut layers = Vec::with_capacity(n_layers + 1);
        layers.push(x.to_vec());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let input = &layers[l];
            let activated = l + 1 < n_layers || self.spec.output_leaky;
            let out: Vec<f64> = b
                .iter()
                .enumerate()
                .map(|(o, &bias)| {
                    let pre = bias
                        + w[o * input.len()..(o + 1) * input.len()]
                            .iter()
                            .zip(input)
                            .map(|(wi, xi)| wi * xi)
                            .sum::<f64>();
                    if activated {
                        leaky(pre)
                    } else {
                        pre
                    }
                })
                .collect();
            layers.push(out);
        }
        MlpTrace { layers }
    }

    /// Reverse pass for one recorded call: accumulates parameter
    /// gradients into `grads` and returns the gradient at the input.
    pub fn backward(&self, trace: &MlpTrace, upstream: &[f64], grads: &mut MlpGrads) -> Vec<f64> {
        let n_layers = self.weights.len();
        assert_eq!(trace.layers.len(), n_layers + 1, "trace layer mismatch");
        assert_eq!(upstream.len(), self.spec.output, "upstream width mismatch");
        let mut delta = upstream.to_vec();
        for l in (0..n_layers).rev() {
            let activated = l + 1 < n_layers || self.spec.output_leaky;
            if activated {
                for (d, &a) in delta.iter_mut().zip(&trace.layers[l + 1]) {
                    *d *= leaky_grad(a);
                }
            }
            let input = &trace.layers[l];
            let w = &self.weights[l];
            for (o, &d) in delta.iter().enumerate() {
                grads.biases[l][o] += d;
                for (i, &xi) in input.iter().enumerate() {
                    grads.weights[l][o * input.len() + i] += d * xi;
                }
            }
            let mut down = vec![0.0; input.len()];
            for (o, &d) in delta.iter().enumerate() {
                for (i, slot) in down.iter_mut().enumerate() {
                    *slot += w[o * input.len() + i] * d;
                }
            }
            delta = down;
        }
        delta
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
    }

    /// Consume this perceptron's parameters from the front of `src`.
    pub fn read_flat(&mut self, src: &mut &[f64]) {
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let (head, rest) = src.split_at(w.len());
            w.copy_from_slice(head);
            *src = rest;
            let (head, rest) = src.split_at(b.len());
            b.copy_from_slice(head);
            *src = rest;
        }
    }

    /// Zero the last layer so the perceptron maps everything to zero.
    pub fn zero_output_layer(&mut self) {
        if let (Some(w), Some(b)) = (self.weights.last_mut(), self.biases.last_mut()) {
            w.fill(0.0);
            b.fill(0.0);
        }
    }
}

impl MlpGrads {
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_linear_layer_is_an_affine_map() {
        let mut mlp = Mlp::init(MlpSpec::new(2, &[], 2, false), &mut ChaCha8Rng::seed_from_u64(0));
        mlp.weights[0] = vec![1.0, 2.0, -3.0, 0.5];
        mlp.biases[0] = vec![0.25, -1.0];
        let out = mlp.forward(&[2.0, -1.5]).output().to_vec();
        assert_eq!(out, vec![1.0 * 2.0 + 2.0 * -1.5 + 0.25, -3.0 * 2.0 + 0.5 * -1.5 - 1.0]);
    }

    #[test]
    fn leaky_output_bends_negative_preactivations() {
        let mut mlp = Mlp::init(MlpSpec::new(1, &[], 1, true), &mut ChaCha8Rng::seed_from_u64(0));
        mlp.weights[0] = vec![1.0];
        mlp.biases[0] = vec![0.0];
        assert_eq!(mlp.forward(&[3.0]).output(), &[3.0]);
        assert_eq!(mlp.forward(&[-3.0]).output(), &[-3.0 * LEAKY_SLOPE]);
    }

    #[test]
    fn init_scales_with_fan_in_and_zeroes_biases() {
        let mlp = Mlp::init(
            MlpSpec::new(16, &[4], 2, false),
            &mut ChaCha8Rng::seed_from_u64(9),
        );
        assert!(mlp.weights[0].iter().all(|w| w.abs() < 1.0 / 4.0));
        assert!(mlp.weights[1].iter().all(|w| w.abs() < 1.0 / 2.0));
        assert!(mlp.biases.iter().all(|b| b.iter().all(|&x| x == 0.0)));
        assert_eq!(mlp.n_params(), 16 * 4 + 4 + 4 * 2 + 2);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for output_leaky in [false, true] {
            let mut mlp = Mlp::init(MlpSpec::new(3, &[5, 4], 2, output_leaky), &mut rng);
            // Random biases keep pre-activations away from the kink.
            for b in &mut mlp.biases {
                for x in b.iter_mut() {
                    *x = rng.gen_range(-0.5..0.5);
                }
            }
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let upstream: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut grads = mlp.zero_grads();
            let trace = mlp.forward(&x);
            let input_grad = mlp.backward(&trace, &upstream, &mut grads);

            let loss = |m: &Mlp, x: &[f64]| -> f64 {
                m.forward(x)
                    .output()
                    .iter()
                    .zip(&upstream)
                    .map(|(o, u)| o * u)
                    .sum()
            };
            let h = 1e-6;
            let mut flat = Vec::new();
            mlp.write_flat(&mut flat);
            let mut flat_grads = Vec::new();
            grads.write_flat(&mut flat_grads);
            for i in 0..flat.len() {
                let mut plus = flat.clone();
                let mut minus = flat.clone();
                plus[i] += h;
                minus[i] -= h;
                let mut mp = mlp.clone();
                let mut mm = mlp.clone();
                mp.read_flat(&mut plus.as_slice());
                mm.read_flat(&mut minus.as_slice());
                let fd = (loss(&mp, &x) - loss(&mm, &x)) / (2.0 * h);
                assert!(
                    (fd - flat_grads[i]).abs() < 1e-6 + 1e-6 * fd.abs(),
                    "param {i}: fd {fd}, grad {}",
                    flat_grads[i]
                );
            }
            for i in 0..x.len() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (loss(&mlp, &xp) - loss(&mlp, &xm)) / (2.0 * h);
                assert!((fd - input_grad[i]).abs() < 1e-6 + 1e-6 * fd.abs());
            }
        }
    }

    #[test]
    fn flat_round_trip_preserves_parameters() {
        let mlp = Mlp::init(
            MlpSpec::new(4, &[3], 2, false),
            &mut ChaCha8Rng::seed_from_u64(5),
        );
        let mut flat = Vec::new();
        mlp.write_flat(&mut flat);
        assert_eq!(flat.len(), mlp.n_params());
        let mut other = Mlp::init(
            MlpSpec::new(4, &[3], 2, false),
            &mut ChaCha8Rng::seed_from_u64(6),
        );
        other.read_flat(&mut flat.as_slice());
        assert_eq!(other, mlp);
    }
}
