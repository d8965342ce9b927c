//! Compact convolutional classifiers exposing intermediate features z and
//! class logits from one shared forward pass.

use crate::error::{AgatError, Result};
use crate::graph::{Graph, GradientMap, NodeId};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchId {
    MnistCnn,
    ShapesCnn,
    CifarCnn,
}

impl ArchId {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mnist-cnn" => Ok(ArchId::MnistCnn),
            "shapes-cnn" => Ok(ArchId::ShapesCnn),
            "cifar-cnn" => Ok(ArchId::CifarCnn),
            other => Err(AgatError::Config(format!(
                "unknown architecture id '{}'",
                other
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ArchId::MnistCnn => "mnist-cnn",
            ArchId::ShapesCnn => "shapes-cnn",
            ArchId::CifarCnn => "cifar-cnn",
        }
    }
}

#[derive(Debug, Clone)]
enum Layer {
    Conv {
        name: &'static str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        pool: bool,
    },
    Fc {
        name: &'static str,
        in_d: usize,
        out_d: usize,
        relu: bool,
    },
}

fn layers_of(arch: ArchId) -> (Vec<Layer>, [usize; 3], usize, usize) {
    use Layer::*;
    match arch {
        // two conv layers kernel 5 stride 1 with pooling, three FC layers;
        // z is the 64-dim penultimate activation
        ArchId::MnistCnn => (
            vec![
                Conv { name: "conv1", in_c: 1, out_c: 8, k: 5, stride: 1, pad: 0, pool: true },
                Conv { name: "conv2", in_c: 8, out_c: 16, k: 5, stride: 1, pad: 0, pool: true },
                Fc { name: "fc1", in_d: 16 * 4 * 4, out_d: 128, relu: true },
                Fc { name: "fc2", in_d: 128, out_d: 64, relu: true },
                Fc { name: "fc3", in_d: 64, out_d: 10, relu: false },
            ],
            [1, 28, 28],
            10,
            64,
        ),
        // four conv layers kernel 3 stride 2, two FC layers
        ArchId::ShapesCnn => (
            vec![
                Conv { name: "conv1", in_c: 3, out_c: 8, k: 3, stride: 2, pad: 1, pool: false },
                Conv { name: "conv2", in_c: 8, out_c: 16, k: 3, stride: 2, pad: 1, pool: false },
                Conv { name: "conv3", in_c: 16, out_c: 32, k: 3, stride: 2, pad: 1, pool: false },
                Conv { name: "conv4", in_c: 32, out_c: 32, k: 3, stride: 2, pad: 1, pool: false },
                Fc { name: "fc1", in_d: 32 * 4 * 4, out_d: 64, relu: true },
                Fc { name: "fc2", in_d: 64, out_d: 8, relu: false },
            ],
            [3, 64, 64],
            8,
            64,
        ),
        // three conv+pool stages then FC->128 and the head
        ArchId::CifarCnn => (
            vec![
                Conv { name: "conv1", in_c: 3, out_c: 8, k: 3, stride: 1, pad: 1, pool: true },
                Conv { name: "conv2", in_c: 8, out_c: 16, k: 3, stride: 1, pad: 1, pool: true },
                Conv { name: "conv3", in_c: 16, out_c: 32, k: 3, stride: 1, pad: 1, pool: true },
                Fc { name: "fc1", in_d: 32 * 4 * 4, out_d: 128, relu: true },
                Fc { name: "fc2", in_d: 128, out_d: 10, relu: false },
            ],
            [3, 32, 32],
            10,
            128,
        ),
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Nodes of one forward build: features, logits, and the parameter leaves in
/// `params()` order (empty when the forward ran with frozen parameters).
pub struct ForwardNodes {
    pub z: NodeId,
    pub logits: NodeId,
    pub params: Vec<NodeId>,
}

#[derive(Debug, Clone)]
pub struct Classifier {
    arch: ArchId,
    layers: Vec<Layer>,
    params: Vec<Param>,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub input_shape: [usize; 3],
}

impl Classifier {
    /// Initialize parameters with the fan-in-scaled uniform rule
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) from the seeded generator, then
    /// verify that no parameter tensor is disconnected from the output.
    pub fn build(arch: ArchId, seed: u64) -> Result<Self> {
        let (layers, input_shape, num_classes, feature_dim) = layers_of(arch);
        let mut rng = Rng::new(seed);
        let mut params = Vec::new();
        for layer in &layers {
            match *layer {
                Layer::Conv { name, in_c, out_c, k, .. } => {
                    let fan_in = in_c * k * k;
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    params.push(Param {
                        name: format!("{}.weight", name),
                        value: rand_uniform(&mut rng, &[out_c, in_c, k, k], bound),
                    });
                    params.push(Param {
                        name: format!("{}.bias", name),
                        value: rand_uniform(&mut rng, &[out_c], bound),
                    });
                }
                Layer::Fc { name, in_d, out_d, .. } => {
                    let bound = 1.0 / (in_d as f64).sqrt();
                    params.push(Param {
                        name: format!("{}.weight", name),
                        value: rand_uniform(&mut rng, &[in_d, out_d], bound),
                    });
                    params.push(Param {
                        name: format!("{}.bias", name),
                        value: rand_uniform(&mut rng, &[out_d], bound),
                    });
                }
            }
        }
        let model = Classifier {
            arch,
            layers,
            params,
            num_classes,
            feature_dim,
            input_shape,
        };
        model.check_live_gradients(&mut rng)?;
        Ok(model)
    }

    /// Every parameter tensor must receive some gradient on a random batch;
    /// anything else means a dead subgraph.
    fn check_live_gradients(&self, rng: &mut Rng) -> Result<()> {
        let [c, h, w] = self.input_shape;
        let x = Tensor::new(
            vec![2, c, h, w],
            (0..2 * c * h * w).map(|_| rng.uniform()).collect(),
        )?;
        let mut g = Graph::new();
        let xn = g.constant(x);
        let fwd = self.forward(&mut g, xn, true)?;
        let loss = g.sq_norm(fwd.logits)?;
        let grads = g.backward(loss)?;
        for (i, p) in self.params.iter().enumerate() {
            let gmax = grads
                .grad(fwd.params[i])
                .data()
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            if gmax == 0.0 {
                return Err(AgatError::Train(format!(
                    "parameter {} receives zero gradient at build time",
                    p.name
                )));
            }
        }
        Ok(())
    }

    pub fn arch(&self) -> ArchId {
        self.arch
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn set_param(&mut self, i: usize, value: Tensor) {
        self.params[i].value = value;
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// FNV over every parameter tensor in declaration order.
    pub fn param_hash(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for p in &self.params {
            h ^= p.value.fnv1a();
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    /// Build the forward pass on `g`. With `trainable` the parameters are
    /// bound as requires-gradient leaves (returned in `params`); otherwise
    /// they are constants.
    pub fn forward(&self, g: &mut Graph, x: NodeId, trainable: bool) -> Result<ForwardNodes> {
        let shape = g.value(x).shape().to_vec();
        let [c, h, w] = self.input_shape;
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(AgatError::shape(
                "forward",
                format!(
                    "{} expects [B,{},{},{}], got {:?}",
                    self.arch.name(),
                    c,
                    h,
                    w,
                    shape
                ),
            ));
        }
        let batch = shape[0];
        let mut param_nodes = Vec::with_capacity(self.params.len());
        for p in &self.params {
            param_nodes.push(g.leaf(p.value.clone(), trainable, &p.name));
        }

        let mut cur = x;
        let mut pi = 0;
        let mut flattened = false;
        let mut z = None;
        for (li, layer) in self.layers.iter().enumerate() {
            match *layer {
                Layer::Conv { stride, pad, pool, .. } => {
                    let wn = param_nodes[pi];
                    let bn = param_nodes[pi + 1];
                    pi += 2;
                    cur = g.conv2d(cur, wn, bn, stride, pad)?;
                    cur = g.relu(cur)?;
                    if pool {
                        cur = g.max_pool2(cur)?;
                    }
                }
                Layer::Fc { in_d, relu, .. } => {
                    if !flattened {
                        cur = g.reshape(cur, vec![batch, in_d])?;
                        flattened = true;
                    }
                    let wn = param_nodes[pi];
                    let bn = param_nodes[pi + 1];
                    pi += 2;
                    cur = g.matmul(cur, wn)?;
                    cur = g.add_bias(cur, bn)?;
                    if relu {
                        cur = g.relu(cur)?;
                    }
                    if li + 2 == self.layers.len() {
                        z = Some(cur);
                    }
                }
            }
        }
        Ok(ForwardNodes {
            z: z.expect("architectures always have a penultimate FC"),
            logits: cur,
            params: if trainable { param_nodes } else { Vec::new() },
        })
    }

    /// Frozen forward returning plain (z, logits).
    pub fn forward_tensors(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let fwd = self.forward(&mut g, xn, false)?;
        Ok((g.value(fwd.z).clone(), g.value(fwd.logits).clone()))
    }

    /// Softmax of the logits; rows sum to one.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        let (_, logits) = self.forward_tensors(x)?;
        Ok(crate::ops::softmax(&logits))
    }

    /// Parameter tensors keyed by their stable names (checkpoint payload).
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Restore parameters from named tensors; every parameter must be
    /// present with its exact shape.
    pub fn load_named_tensors(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        for p in &mut self.params {
            let found = tensors
                .iter()
                .find(|(n, _)| n == &p.name)
                .ok_or_else(|| {
                    AgatError::Data(format!("checkpoint is missing tensor '{}'", p.name))
                })?;
            if found.1.shape() != p.value.shape() {
                return Err(AgatError::Data(format!(
                    "checkpoint tensor '{}' has shape {:?}, architecture {} wants {:?}",
                    p.name,
                    found.1.shape(),
                    self.arch.name(),
                    p.value.shape()
                )));
            }
            p.value = found.1.clone();
        }
        Ok(())
    }

    /// One SGD step: theta <- theta - eta * grad, exactly.
    pub fn apply_sgd(&mut self, nodes: &[NodeId], grads: &GradientMap, eta: f64) {
        for (p, &n) in self.params.iter_mut().zip(nodes) {
            let g = grads.grad(n);
            for (v, gv) in p.value.data_mut().iter_mut().zip(g.data()) {
                *v -= eta * gv;
            }
        }
    }
}

fn rand_uniform(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.range(-bound, bound)).collect(),
    )
    .unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mnist_cnn_shapes_and_param_count() {
        let m = Classifier::build(ArchId::MnistCnn, 1).unwrap();
        // counted from the layer list: conv1 208, conv2 3216, fc1 32896,
        // fc2 8256, fc3 650
        assert_eq!(m.param_count(), 45226);
        let x = Tensor::zeros(&[2, 1, 28, 28]);
        let (z, logits) = m.forward_tensors(&x).unwrap();
        assert_eq!(z.shape(), &[2, 64]);
        assert_eq!(logits.shape(), &[2, 10]);
        // all-zero input still yields finite logits
        logits.check_finite("logits").unwrap();
    }

    #[test]
    fn shapes_and_cifar_contracts() {
        let m = Classifier::build(ArchId::ShapesCnn, 2).unwrap();
        let (z, logits) = m.forward_tensors(&Tensor::zeros(&[1, 3, 64, 64])).unwrap();
        assert_eq!(z.shape(), &[1, 64]);
        assert_eq!(logits.shape(), &[1, 8]);

        let m = Classifier::build(ArchId::CifarCnn, 2).unwrap();
        let (z, logits) = m.forward_tensors(&Tensor::zeros(&[1, 3, 32, 32])).unwrap();
        assert_eq!(z.shape(), &[1, 128]);
        assert_eq!(logits.shape(), &[1, 10]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Classifier::build(ArchId::MnistCnn, 42).unwrap();
        let b = Classifier::build(ArchId::MnistCnn, 42).unwrap();
        assert_eq!(a.param_hash(), b.param_hash());
        let c = Classifier::build(ArchId::MnistCnn, 43).unwrap();
        assert_ne!(a.param_hash(), c.param_hash());
    }

    #[test]
    fn head_applied_to_z_reproduces_logits_exactly() {
        let m = Classifier::build(ArchId::MnistCnn, 7).unwrap();
        let mut rng = Rng::new(3);
        let x = Tensor::new(
            vec![2, 1, 28, 28],
            (0..2 * 784).map(|_| rng.uniform()).collect(),
        )
        .unwrap();
        let (z, logits) = m.forward_tensors(&x).unwrap();
        // head = last fc: z @ W + b
        let w = &m.params()[m.params().len() - 2].value;
        let b = &m.params()[m.params().len() - 1].value;
        let head = crate::ops::matmul(&z, w);
        for bi in 0..2 {
            for k in 0..10 {
                let manual = head.data()[bi * 10 + k] + b.data()[k];
                assert_eq!(manual, logits.data()[bi * 10 + k]);
            }
        }
    }

    #[test]
    fn predict_proba_rows_sum_to_one_and_argmax_matches() {
        let m = Classifier::build(ArchId::MnistCnn, 7).unwrap();
        let mut rng = Rng::new(4);
        let x = Tensor::new(
            vec![3, 1, 28, 28],
            (0..3 * 784).map(|_| rng.uniform()).collect(),
        )
        .unwrap();
        let p = m.predict_proba(&x).unwrap();
        let (_, logits) = m.forward_tensors(&x).unwrap();
        for bi in 0..3 {
            let row = &p.data()[bi * 10..(bi + 1) * 10];
            let lrow = &logits.data()[bi * 10..(bi + 1) * 10];
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            let am = |v: &[f64]| {
                v.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            };
            assert_eq!(am(row), am(lrow));
        }
    }

    #[test]
    fn unknown_arch_and_bad_input_shape_error() {
        assert!(ArchId::parse("vgg-99").is_err());
        let m = Classifier::build(ArchId::MnistCnn, 7).unwrap();
        assert!(m.forward_tensors(&Tensor::zeros(&[1, 3, 28, 28])).is_err());
    }
}
