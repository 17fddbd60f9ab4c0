//! Coordinate MLPs with sinusoidal input encoding.
//!
//! Networks are evaluated two ways: a detached [`Mlp::forward`] for code that
//! only needs values (samplers, grid evaluation, sphere tracing), and
//! [`BoundMlp::forward`] which records the computation on a [`Tape`]. For
//! scalar fields, [`BoundMlp::input_gradient`] emits the spatial gradient as
//! further tape ops, so losses that consume the gradient (eikonal, the query
//! moving step) differentiate through it with ordinary reverse mode.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{GraphError, NodeId, Tape};
use super::tensor::Tensor;

pub const PI: f64 = std::f64::consts::PI;

/// Sinusoidal encoding: optionally the raw input, then per octave k
/// sin(2^k pi x) and cos(2^k pi x) applied componentwise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncodingSpec {
    pub octaves: usize,
    pub include_input: bool,
}

impl EncodingSpec {
    pub fn new(octaves: usize, include_input: bool) -> Self {
        EncodingSpec {
            octaves,
            include_input,
        }
    }

    /// Identity encoding (raw coordinates only).
    pub fn raw() -> Self {
        EncodingSpec {
            octaves: 0,
            include_input: true,
        }
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        input_dim * (2 * self.octaves + usize::from(self.include_input))
    }

    /// Encode a batch of points (detached).
    pub fn encode(&self, x: &Tensor) -> Tensor {
        let (rows, d) = x.shape();
        let mut out = Tensor::zeros(rows, self.output_dim(d));
        if self.include_input {
            for r in 0..rows {
                out.row_mut(r)[..d].copy_from_slice(x.row(r));
            }
        }
        let base = if self.include_input { d } else { 0 };
        for k in 0..self.octaves {
            let freq = (1u64 << k) as f64 * PI;
            let args: Vec<f64> = x.data().iter().map(|&v| freq * v).collect();
            let s = super::fast_math::sin_map(&args);
            let c = super::fast_math::cos_map(&args);
            let off = base + 2 * d * k;
            for r in 0..rows {
                let dst = out.row_mut(r);
                dst[off..off + d].copy_from_slice(&s[r * d..(r + 1) * d]);
                dst[off + d..off + 2 * d].copy_from_slice(&c[r * d..(r + 1) * d]);
            }
        }
        out
    }

    /// Encode on the tape, keeping the per-octave sin/cos nodes for the
    /// input-gradient chain.
    pub fn encode_graph(&self, tape: &mut Tape, x: NodeId) -> Result<EncodeTrace, GraphError> {
        let mut parts = Vec::new();
        if self.include_input {
            parts.push(x);
        }
        let mut sin_nodes = Vec::with_capacity(self.octaves);
        let mut cos_nodes = Vec::with_capacity(self.octaves);
        for k in 0..self.octaves {
            let freq = (1u64 << k) as f64 * PI;
            let scaled = tape.scale(x, freq)?;
            let s = tape.sin(scaled)?;
            let c = tape.cos(scaled)?;
            parts.push(s);
            parts.push(c);
            sin_nodes.push(s);
            cos_nodes.push(c);
        }
        let encoded = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_cols(&parts)?
        };
        Ok(EncodeTrace {
            encoded,
            sin_nodes,
            cos_nodes,
        })
    }
}

pub struct EncodeTrace {
    pub encoded: NodeId,
    sin_nodes: Vec<NodeId>,
    cos_nodes: Vec<NodeId>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    /// ln(1 + exp(beta x)) / beta
    Softplus(f64),
    Sigmoid,
    None,
}

#[derive(Clone, Debug)]
pub struct Layer {
    /// [in x out]
    pub weight: Tensor,
    /// [1 x out]
    pub bias: Tensor,
    pub activation: Activation,
}

/// A fully connected coordinate network.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub encoding: EncodingSpec,
    pub input_dim: usize,
    pub layers: Vec<Layer>,
}

impl Mlp {
    /// He-style random initialization. `dims` lists hidden widths; the output
    /// layer is appended with `out_dim` units and `out_activation`.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        encoding: EncodingSpec,
        hidden_activation: Activation,
        out_activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let mut layers = Vec::new();
        let mut prev = encoding.output_dim(input_dim);
        for &width in hidden {
            layers.push(Layer {
                weight: random_weight(prev, width, rng),
                bias: Tensor::zeros(1, width),
                activation: hidden_activation,
            });
            prev = width;
        }
        layers.push(Layer {
            weight: random_weight(prev, out_dim, rng),
            bias: Tensor::zeros(1, out_dim),
            activation: out_activation,
        });
        Mlp {
            encoding,
            input_dim,
            layers,
        }
    }

    /// Arrange weights so the initial scalar field approximates
    /// `|x| - radius`: random hidden layers with variance-preserving scale,
    /// a constant-positive output layer with bias `-radius`, and first-layer
    /// weights zeroed on every encoded channel so only the raw coordinates
    /// drive the initial response. A short seeded least-squares refinement
    /// against the exact sphere tightens the approximation.
    pub fn geometric_sphere(
        input_dim: usize,
        hidden: &[usize],
        encoding: EncodingSpec,
        beta: f64,
        radius: f64,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(
            encoding.include_input,
            "geometric initialization needs the raw coordinates in the encoding"
        );
        let mut layers = Vec::new();
        let enc_dim = encoding.output_dim(input_dim);
        let mut prev = enc_dim;
        for (i, &width) in hidden.iter().enumerate() {
            let normal = Normal::new(0.0, (2.0 / prev as f64).sqrt()).unwrap();
            let mut weight = Tensor::zeros(prev, width);
            for r in 0..prev {
                for c in 0..width {
                    // Encoded channels start silent; raw coordinates pass.
                    let v = if i == 0 && r >= input_dim {
                        0.0
                    } else {
                        normal.sample(rng)
                    };
                    weight.set(r, c, v);
                }
            }
            layers.push(Layer {
                weight,
                bias: Tensor::zeros(1, width),
                activation: Activation::Softplus(beta),
            });
            prev = width;
        }
        let scale = (PI / prev as f64).sqrt();
        let normal = Normal::new(scale, scale * 0.05).unwrap();
        let mut out_w = Tensor::zeros(prev, 1);
        for r in 0..prev {
            out_w.set(r, 0, normal.sample(rng));
        }
        let mut out_b = Tensor::zeros(1, 1);
        out_b.set(0, 0, -radius);
        layers.push(Layer {
            weight: out_w,
            bias: out_b,
            activation: Activation::None,
        });
        let mut mlp = Mlp {
            encoding,
            input_dim,
            layers,
        };
        mlp.refine_to_sphere(radius, rng);
        mlp
    }

    /// A few Adam steps fitting `|x| - radius` on points in the unit ball.
    fn refine_to_sphere(&mut self, radius: f64, rng: &mut impl Rng) {
        use super::optim::{Adam, LrSchedule};
        let batch = 512;
        let steps = 500;
        let mut adam = Adam::new(
            self.params().iter().map(|p| p.shape()).collect(),
            LrSchedule::cosine(2e-3, 20, steps as u64),
        );
        for _ in 0..steps {
            let mut pts = Vec::with_capacity(batch);
            for _ in 0..batch {
                // Rejection-sample the ball of radius 1.2.
                loop {
                    let p = [
                        rng.gen_range(-1.2..1.2),
                        rng.gen_range(-1.2..1.2),
                        rng.gen_range(-1.2..1.2),
                    ];
                    if p[0] * p[0] + p[1] * p[1] + p[2] * p[2] <= 1.44 {
                        pts.push(p);
                        break;
                    }
                }
            }
            let x = Tensor::from_points(&pts);
            let target = Tensor::from_vec(
                batch,
                1,
                pts.iter()
                    .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - radius)
                    .collect(),
            );
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape);
            let xin = tape.constant(x);
            let (out, _) = bound.forward(&mut tape, xin).expect("sphere fit forward");
            let t = tape.constant(target);
            let diff = tape.sub(out, t).expect("shape");
            let sq = tape.square(diff).expect("shape");
            let loss = tape.mean(sq).expect("shape");
            let grads = tape.backward(loss).expect("sphere fit backward");
            let grad_tensors = bound.param_gradients(&tape, &grads);
            adam.step(&mut self.params_mut(), &grad_tensors)
                .expect("sphere fit step");
        }
    }

    /// Detached forward pass.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut h = self.encoding.encode(x);
        for layer in &self.layers {
            let mut z = h.matmul(&layer.weight);
            for r in 0..z.rows() {
                let dst = z.row_mut(r);
                let b = layer.bias.row(0);
                for j in 0..dst.len() {
                    dst[j] += b[j];
                }
            }
            h = match layer.activation {
                Activation::Softplus(beta) => Tensor::from_vec(
                    z.rows(),
                    z.cols(),
                    super::fast_math::softplus_map(z.data(), beta),
                ),
                Activation::Sigmoid => {
                    Tensor::from_vec(z.rows(), z.cols(), super::fast_math::sigmoid_map(z.data()))
                }
                Activation::None => z,
            };
        }
        h
    }

    /// Convenience scalar evaluation of a single point.
    pub fn forward_point(&self, p: [f64; 3]) -> f64 {
        debug_assert_eq!(self.input_dim, 3);
        let x = Tensor::from_points(&[p]);
        self.forward(&x).get(0, 0)
    }

    /// Bind parameters as tape inputs so gradients can reach them.
    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        let mut activations = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            weights.push(tape.input(layer.weight.clone()));
            biases.push(tape.input(layer.bias.clone()));
            activations.push(layer.activation);
        }
        BoundMlp {
            weights,
            biases,
            activations,
            encoding: self.encoding,
            input_dim: self.input_dim,
        }
    }

    /// Parameter tensors in a fixed order (w0, b0, w1, b1, ...).
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for layer in &self.layers {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for layer in &mut self.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }
}

fn random_weight(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / rows as f64).sqrt()).unwrap();
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        *v = normal.sample(rng);
    }
    t
}

/// An [`Mlp`] whose parameters live on a tape.
pub struct BoundMlp {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
    activations: Vec<Activation>,
    encoding: EncodingSpec,
    input_dim: usize,
}

/// Intermediate nodes kept by [`BoundMlp::forward`] for the gradient chain.
pub struct MlpTrace {
    enc: EncodeTrace,
    /// Pre-activation of each layer.
    pre: Vec<NodeId>,
    /// Post-activation of each layer.
    post: Vec<NodeId>,
    batch: usize,
}

impl BoundMlp {
    /// Forward pass recorded on the tape. `x` is [B x input_dim].
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<(NodeId, MlpTrace), GraphError> {
        let batch = tape.shape(x).0;
        let enc = self.encoding.encode_graph(tape, x)?;
        let mut h = enc.encoded;
        let mut pre = Vec::with_capacity(self.weights.len());
        let mut post = Vec::with_capacity(self.weights.len());
        for i in 0..self.weights.len() {
            let zw = tape.matmul(h, self.weights[i])?;
            let z = tape.add_row(zw, self.biases[i])?;
            pre.push(z);
            h = match self.activations[i] {
                Activation::Softplus(beta) => tape.softplus(z, beta)?,
                Activation::Sigmoid => tape.sigmoid(z)?,
                Activation::None => z,
            };
            post.push(h);
        }
        Ok((
            h,
            MlpTrace {
                enc,
                pre,
                post,
                batch,
            },
        ))
    }

    /// Gradient of a scalar-output network with respect to its input points,
    /// emitted as tape ops: [B x input_dim]. Differentiable in the parameters.
    pub fn input_gradient(&self, tape: &mut Tape, trace: &MlpTrace) -> Result<NodeId, GraphError> {
        let last = self.weights.len() - 1;
        assert_eq!(
            tape.shape(self.weights[last]).1,
            1,
            "input_gradient needs a scalar output head"
        );
        // dy/dh_last = W_last^T, broadcast to the batch.
        let ones = tape.constant(Tensor::filled(trace.batch, 1, 1.0));
        let w_t = tape.transpose(self.weights[last])?;
        let mut g = tape.matmul(ones, w_t)?;
        if !matches!(self.activations[last], Activation::None) {
            g = self.chain_activation(tape, g, trace, last)?;
        }
        for i in (0..last).rev() {
            let gz = self.chain_activation(tape, g, trace, i)?;
            let w_t = tape.transpose(self.weights[i])?;
            g = tape.matmul(gz, w_t)?;
        }
        // g is now the gradient w.r.t. the encoded input; chain through the
        // encoding back to the raw coordinates.
        self.chain_encoding(tape, g, trace)
    }

    fn chain_activation(
        &self,
        tape: &mut Tape,
        g: NodeId,
        trace: &MlpTrace,
        layer: usize,
    ) -> Result<NodeId, GraphError> {
        match self.activations[layer] {
            Activation::Softplus(beta) => {
                let scaled = tape.scale(trace.pre[layer], beta)?;
                let sig = tape.sigmoid(scaled)?;
                tape.mul(g, sig)
            }
            Activation::Sigmoid => {
                let h = trace.post[layer];
                let neg = tape.neg(h)?;
                let one_minus = tape.add_const(neg, 1.0)?;
                let deriv = tape.mul(h, one_minus)?;
                tape.mul(g, deriv)
            }
            Activation::None => Ok(g),
        }
    }

    fn chain_encoding(
        &self,
        tape: &mut Tape,
        g_enc: NodeId,
        trace: &MlpTrace,
    ) -> Result<NodeId, GraphError> {
        let d = self.input_dim;
        let mut offset = 0;
        let mut acc: Option<NodeId> = None;
        if self.encoding.include_input {
            acc = Some(tape.slice_cols(g_enc, 0, d)?);
            offset = d;
        }
        for k in 0..self.encoding.octaves {
            let freq = (1u64 << k) as f64 * PI;
            let g_sin = tape.slice_cols(g_enc, offset, offset + d)?;
            let g_cos = tape.slice_cols(g_enc, offset + d, offset + 2 * d)?;
            offset += 2 * d;
            // d sin(fx)/dx = f cos(fx); d cos(fx)/dx = -f sin(fx)
            let via_sin = tape.mul(g_sin, trace.enc.cos_nodes[k])?;
            let via_cos = tape.mul(g_cos, trace.enc.sin_nodes[k])?;
            let diff = tape.sub(via_sin, via_cos)?;
            let term = tape.scale(diff, freq)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
        }
        acc.ok_or(GraphError::ShapeMismatch {
            node: tape.len(),
            op: "input_gradient",
            detail: "encoding produces no channels".into(),
        })
    }

    /// Collect parameter gradients from a backward pass, aligned with
    /// [`Mlp::params`] order. Missing gradients come back as zeros.
    pub fn param_gradients(
        &self,
        tape: &Tape,
        grads: &super::graph::Gradients,
    ) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(self.weights.len() * 2);
        for i in 0..self.weights.len() {
            let (r, c) = tape.shape(self.weights[i]);
            out.push(grads.get_or_zeros(self.weights[i], r, c));
            let (r, c) = tape.shape(self.biases[i]);
            out.push(grads.get_or_zeros(self.biases[i], r, c));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::graph::numeric_gradient;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn encoding_zero_input() {
        let spec = EncodingSpec::new(3, false);
        let x = Tensor::from_points(&[[0.0, 0.0, 0.0]]);
        let e = spec.encode(&x);
        assert_eq!(e.cols(), 18);
        for k in 0..3 {
            for j in 0..3 {
                assert_eq!(e.get(0, k * 6 + j), 0.0); // sin
                assert_eq!(e.get(0, k * 6 + 3 + j), 1.0); // cos
            }
        }
    }

    #[test]
    fn encoding_raw_identity() {
        let spec = EncodingSpec::new(0, true);
        let x = Tensor::from_points(&[[0.3, -0.7, 0.1]]);
        let e = spec.encode(&x);
        assert_eq!(e.shape(), (1, 3));
        assert_eq!(e.data(), x.data());
    }

    #[test]
    fn encoding_first_sin_channel() {
        let spec = EncodingSpec::new(1, false);
        let x = Tensor::from_points(&[[0.5, 0.0, 0.0]]);
        let e = spec.encode(&x);
        assert!((e.get(0, 0) - 1.0).abs() < 1e-12); // sin(pi/2)
    }

    #[test]
    fn encode_graph_matches_detached() {
        let spec = EncodingSpec::new(4, true);
        let x = Tensor::from_points(&[[0.2, -0.5, 0.9], [0.0, 0.4, -1.0]]);
        let detached = spec.encode(&x);
        let mut tape = Tape::new();
        let xn = tape.input(x);
        let trace = spec.encode_graph(&mut tape, xn).unwrap();
        assert_eq!(tape.value(trace.encoded).data(), detached.data());
    }

    #[test]
    fn zero_weight_mlp_returns_last_bias() {
        let mut rng = StdRng::seed_from_u64(0);
        let mut mlp = Mlp::new(
            3,
            &[8, 8],
            2,
            EncodingSpec::raw(),
            Activation::Softplus(100.0),
            Activation::None,
            &mut rng,
        );
        for layer in &mut mlp.layers {
            layer.weight = Tensor::zeros(layer.weight.rows(), layer.weight.cols());
        }
        mlp.layers[2].bias = Tensor::from_vec(1, 2, vec![0.25, -0.75]);
        // Softplus of zero pre-activations feeds the final zero weights, so
        // any input collapses to the output bias.
        let y = mlp.forward(&Tensor::from_points(&[[0.1, 0.2, 0.3]]));
        assert_eq!(y.data(), &[0.25, -0.75]);
        let y2 = mlp.forward(&Tensor::from_points(&[[-0.9, 0.0, 0.5]]));
        assert_eq!(y2.data(), &[0.25, -0.75]);
    }

    #[test]
    fn graph_forward_matches_detached() {
        let mut rng = StdRng::seed_from_u64(3);
        let mlp = Mlp::new(
            3,
            &[16, 16],
            1,
            EncodingSpec::new(2, true),
            Activation::Softplus(100.0),
            Activation::None,
            &mut rng,
        );
        let x = Tensor::from_points(&[[0.1, -0.4, 0.8], [0.0, 0.0, 0.0], [-0.9, 0.3, 0.2]]);
        let detached = mlp.forward(&x);
        let mut tape = Tape::new();
        let bound = mlp.bind(&mut tape);
        let xn = tape.constant(x);
        let (y, _) = bound.forward(&mut tape, xn).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(detached.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        // Sum of MLP outputs over 5 random inputs; every parameter checked
        // against central differences.
        let mut rng = StdRng::seed_from_u64(11);
        let mlp = Mlp::new(
            3,
            &[8, 8],
            1,
            EncodingSpec::new(2, true),
            Activation::Softplus(10.0),
            Activation::None,
            &mut rng,
        );
        let x = Tensor::from_vec(
            5,
            3,
            (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let mut tape = Tape::new();
        let bound = mlp.bind(&mut tape);
        let xn = tape.constant(x);
        let (y, _) = bound.forward(&mut tape, xn).unwrap();
        let root = tape.sum(y).unwrap();
        let grads = tape.backward(root).unwrap();
        for i in 0..bound.weights.len() {
            for &pid in [bound.weights[i], bound.biases[i]].iter() {
                let (r, c) = tape.shape(pid);
                let ad = grads.get_or_zeros(pid, r, c);
                let fd = numeric_gradient(&mut tape, root, pid, 1e-4).unwrap();
                for j in 0..ad.len() {
                    let (a, f) = (ad.data()[j], fd.data()[j]);
                    assert!(
                        (a - f).abs() <= 1e-4 * a.abs().max(f.abs()).max(1e-3),
                        "layer {i} param entry {j}: ad={a} fd={f}"
                    );
                }
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(19);
        let mlp = Mlp::new(
            3,
            &[16, 16, 16],
            1,
            EncodingSpec::new(3, true),
            Activation::Softplus(10.0),
            Activation::None,
            &mut rng,
        );
        let xv = Tensor::from_vec(4, 3, (0..12).map(|_| rng.gen_range(-0.9..0.9)).collect());
        let mut tape = Tape::new();
        let bound = mlp.bind(&mut tape);
        let xn = tape.input(xv.clone());
        let (_, trace) = bound.forward(&mut tape, xn).unwrap();
        let g = bound.input_gradient(&mut tape, &trace).unwrap();
        // Validate the emitted gradient against finite differences of the
        // detached forward.
        let analytic = tape.value(g).clone();
        let h = 1e-5;
        for r in 0..4 {
            for c in 0..3 {
                let mut plus = xv.clone();
                plus.data_mut()[r * 3 + c] += h;
                let mut minus = xv.clone();
                minus.data_mut()[r * 3 + c] -= h;
                let fp = mlp.forward(&plus).get(r, 0);
                let fm = mlp.forward(&minus).get(r, 0);
                let fd = (fp - fm) / (2.0 * h);
                let a = analytic.get(r, c);
                assert!(
                    (a - fd).abs() <= 1e-4 * a.abs().max(fd.abs()).max(1e-3),
                    "row {r} col {c}: analytic={a} fd={fd}"
                );
            }
        }
    }

    #[test]
    fn geometric_sphere_initialization() {
        let mut rng = StdRng::seed_from_u64(5);
        let mlp = Mlp::geometric_sphere(
            3,
            &[64, 64, 64, 64],
            EncodingSpec::new(6, true),
            100.0,
            0.5,
            &mut rng,
        );
        // Center value close to -radius. A smooth softplus net rounds the
        // cone apex of |x|, so the center carries the largest residual.
        let center = mlp.forward_point([0.0, 0.0, 0.0]);
        assert!(
            (center + 0.5).abs() < 0.15,
            "f(0) = {center}, expected about -0.5"
        );
        // Near zero on the radius-0.5 sphere, positive well outside.
        let mut worst: f64 = 0.0;
        for i in 0..32 {
            let theta = i as f64 * 0.7;
            let phi = i as f64 * 0.37;
            let dir = [
                theta.sin() * phi.cos(),
                theta.sin() * phi.sin(),
                theta.cos(),
            ];
            worst = worst.max(mlp.forward_point([0.5 * dir[0], 0.5 * dir[1], 0.5 * dir[2]]).abs());
            assert!(
                mlp.forward_point([1.1 * dir[0], 1.1 * dir[1], 1.1 * dir[2]]) > 0.2,
                "field not positive outside the init sphere"
            );
        }
        assert!(worst < 0.05, "max |f| on init sphere = {worst}");
    }
}
