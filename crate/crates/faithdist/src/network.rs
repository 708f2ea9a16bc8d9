//! Fully-connected ReLU networks: forward semantics, prediction rule,
//! architecture presets and the on-disk JSON model format.
//!
//! A network applies affine layers with a ReLU after every layer except the
//! last; logits are the raw output of the final affine layer and class
//! confidences are obtained by a temperature softmax over them.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{affine, relu, softmax_t, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardNetwork {
    layers: Vec<Layer>,
}

impl FeedForwardNetwork {
    /// Validates the layer dimension chain: each layer's input width must
    /// equal the previous layer's output width.
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Validation("network needs at least one layer".into()));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.weight.shape().len() != 2 {
                return Err(Error::Validation(format!("layer {k}: weight is not a matrix")));
            }
            if layer.bias.len() != layer.weight.rows() {
                return Err(Error::Validation(format!(
                    "layer {k}: bias has {} entries but weight has {} rows",
                    layer.bias.len(),
                    layer.weight.rows()
                )));
            }
            if k > 0 && layer.weight.cols() != layers[k - 1].weight.rows() {
                return Err(Error::Validation(format!(
                    "layer {k} expects {} inputs but layer {} emits {}",
                    layer.weight.cols(),
                    k - 1,
                    layers[k - 1].weight.rows()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn class_count(&self) -> usize {
        self.layers.last().unwrap().weight.rows()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Raw logits `g(x)`: affine/ReLU alternation, no ReLU on the last layer.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let z = affine(&layer.weight, &h, &layer.bias)?;
            h = if k + 1 < self.layers.len() { relu(&z) } else { z };
        }
        Ok(h)
    }

    /// Softmax confidences at the given temperature.
    pub fn confidences(&self, x: &Tensor, temperature: f64) -> Result<Tensor> {
        softmax_t(&self.logits(x)?, temperature)
    }

    /// Argmax class; ties break to the lowest index.
    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(self.logits(x)?.argmax())
    }

    /// Records the weights as (untracked) tape inputs and returns handles for
    /// the forward pass. Used when only the input gradient is needed.
    pub fn constants_on(&self, tape: &mut Tape) -> NetworkVars {
        let layers = self
            .layers
            .iter()
            .map(|l| (tape.input(l.weight.clone()), tape.input(l.bias.clone())))
            .collect();
        NetworkVars { layers }
    }

    /// Forward pass on a tape from previously recorded weight handles.
    pub fn forward_on(&self, tape: &mut Tape, vars: &NetworkVars, x: Var) -> Result<Var> {
        let mut h = x;
        for (k, &(w, b)) in vars.layers.iter().enumerate() {
            let z = tape.affine(w, h, b)?;
            h = if k + 1 < self.layers.len() { tape.relu(z) } else { z };
        }
        Ok(h)
    }

    /// He-style uniform initialisation from a seeded generator.
    pub fn init(widths: &ArchPreset, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = widths.layer_dims();
        let mut layers = Vec::new();
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / fan_in as f64).sqrt();
            let weight: Vec<f64> =
                (0..fan_out * fan_in).map(|_| rng.gen_range(-limit..limit)).collect();
            layers.push(Layer {
                weight: Tensor::matrix(fan_out, fan_in, weight)?,
                bias: Tensor::zeros(vec![fan_out]),
            });
        }
        Self::new(layers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = ModelFile::from(self);
        fs::write(path, serde_json::to_string_pretty(&doc)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let doc: ModelFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            offset: 0,
            detail: format!("model file {}: {e}", path.display()),
        })?;
        doc.try_into()
    }
}

/// Weight handles for a network recorded on a tape, layer by layer.
#[derive(Debug, Clone)]
pub struct NetworkVars {
    pub layers: Vec<(Var, Var)>,
}

/// Named layer-width presets, including the output layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchPreset {
    pub input_dim: usize,
    /// Hidden widths followed by the class count.
    pub widths: Vec<usize>,
}

impl ArchPreset {
    pub fn new(input_dim: usize, widths: Vec<usize>) -> Self {
        Self { input_dim, widths }
    }

    /// Full dimension chain `d_0, d_1, ..., d_L`.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend_from_slice(&self.widths);
        dims
    }

    /// Looks up a named preset from the experiment recipes.
    pub fn named(name: &str) -> Result<Self> {
        match name {
            "mnist-teacher" => Ok(Self::new(784, vec![30, 30, 30, 30, 30, 10])),
            "mnist-student" => Ok(Self::new(784, vec![20, 20, 20, 20, 10])),
            "fmnist-teacher" => Ok(Self::new(784, vec![64, 32, 32, 32, 32, 16, 10])),
            "fmnist-student" => Ok(Self::new(784, vec![30, 30, 30, 30, 10])),
            "synthetic2d-teacher" => Ok(Self::new(2, vec![16, 16, 2])),
            "synthetic2d-student" => Ok(Self::new(2, vec![8, 8, 2])),
            other => Err(Error::InvalidParameter(format!("unknown architecture preset `{other}`"))),
        }
    }
}

/// A validated teacher/student pair with matching input and class dims.
#[derive(Debug, Clone)]
pub struct TeacherStudentPair {
    pub teacher: FeedForwardNetwork,
    pub student: FeedForwardNetwork,
}

impl TeacherStudentPair {
    pub fn new(teacher: FeedForwardNetwork, student: FeedForwardNetwork) -> Result<Self> {
        if teacher.input_dim() != student.input_dim() {
            return Err(Error::Validation(format!(
                "teacher input dim {} != student input dim {}",
                teacher.input_dim(),
                student.input_dim()
            )));
        }
        if teacher.class_count() != student.class_count() {
            return Err(Error::Validation(format!(
                "teacher class count {} != student class count {}",
                teacher.class_count(),
                student.class_count()
            )));
        }
        Ok(Self { teacher, student })
    }

    pub fn input_dim(&self) -> usize {
        self.teacher.input_dim()
    }

    pub fn class_count(&self) -> usize {
        self.teacher.class_count()
    }
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    layers: Vec<LayerFile>,
    meta: serde_json::Map<String, serde_json::Value>,
}

impl From<&FeedForwardNetwork> for ModelFile {
    fn from(net: &FeedForwardNetwork) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|l| LayerFile {
                rows: l.weight.rows(),
                cols: l.weight.cols(),
                weights: l.weight.data().to_vec(),
                bias: l.bias.data().to_vec(),
            })
            .collect();
        let mut meta = serde_json::Map::new();
        meta.insert("format".into(), "faithdist-model-v1".into());
        meta.insert("input_dim".into(), net.input_dim().into());
        meta.insert("class_count".into(), net.class_count().into());
        ModelFile { layers, meta }
    }
}

impl TryFrom<ModelFile> for FeedForwardNetwork {
    type Error = Error;

    fn try_from(doc: ModelFile) -> Result<Self> {
        let mut layers = Vec::new();
        for (k, l) in doc.layers.into_iter().enumerate() {
            let weight = Tensor::matrix(l.rows, l.cols, l.weights).map_err(|e| Error::Parse {
                offset: 0,
                detail: format!("layer {k}: {e}"),
            })?;
            let bias = Tensor::vector(l.bias).map_err(|e| Error::Parse {
                offset: 0,
                detail: format!("layer {k}: {e}"),
            })?;
            layers.push(Layer { weight, bias });
        }
        FeedForwardNetwork::new(layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn identity_net() -> FeedForwardNetwork {
        FeedForwardNetwork::new(vec![Layer {
            weight: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: Tensor::zeros(vec![2]),
        }])
        .unwrap()
    }

    fn random_net(dims: &[usize], seed: u64) -> FeedForwardNetwork {
        FeedForwardNetwork::init(
            &ArchPreset::new(dims[0], dims[1..].to_vec()),
            seed,
        )
        .unwrap()
    }

    #[test]
    fn single_layer_has_no_final_relu() {
        let net = identity_net();
        let out = net.logits(&Tensor::vector(vec![1.0, -1.0]).unwrap()).unwrap();
        assert_eq!(out.data(), &[1.0, -1.0]);
    }

    #[test]
    fn relu_kills_negative_hidden_unit() {
        let net = FeedForwardNetwork::new(vec![
            Layer {
                weight: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
                bias: Tensor::zeros(vec![2]),
            },
            Layer {
                weight: Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap(),
                bias: Tensor::zeros(vec![1]),
            },
        ])
        .unwrap();
        let out = net.logits(&Tensor::vector(vec![1.0, -1.0]).unwrap()).unwrap();
        assert_eq!(out.data(), &[1.0]);
    }

    #[test]
    fn zero_weight_net_emits_final_bias() {
        let net = FeedForwardNetwork::new(vec![Layer {
            weight: Tensor::matrix(2, 2, vec![0.0; 4]).unwrap(),
            bias: Tensor::vector(vec![0.25, -0.75]).unwrap(),
        }])
        .unwrap();
        let out = net.logits(&Tensor::vector(vec![5.0, 6.0]).unwrap()).unwrap();
        assert_eq!(out.data(), &[0.25, -0.75]);
    }

    #[test]
    fn confidences_closed_form() {
        let net = identity_net();
        let x = Tensor::vector(vec![3.0_f64.ln(), 0.0]).unwrap();
        let conf = net.confidences(&x, 1.0).unwrap();
        assert_relative_eq!(conf.get(0), 0.75, max_relative = 1e-12);
        assert_relative_eq!(conf.get(1), 0.25, max_relative = 1e-12);
    }

    #[test]
    fn high_temperature_approaches_uniform() {
        let net = identity_net();
        let x = Tensor::vector(vec![1.0, -1.0]).unwrap();
        let conf = net.confidences(&x, 1e3).unwrap();
        for &v in conf.data() {
            assert!((v - 0.5).abs() < 1e-3);
        }
    }

    #[test]
    fn predict_ties_break_low() {
        let net = identity_net();
        assert_eq!(net.predict(&Tensor::vector(vec![0.5, 0.5]).unwrap()).unwrap(), 0);
        assert_eq!(net.predict(&Tensor::vector(vec![0.1, 0.7]).unwrap()).unwrap(), 1);
    }

    #[test]
    fn predict_invariant_to_temperature() {
        let net = random_net(&[3, 5, 4], 7);
        let x = Tensor::vector(vec![0.2, -0.4, 0.9]).unwrap();
        let base = net.predict(&x).unwrap();
        for t in [1e-3, 0.5, 1.0, 10.0, 1e3] {
            assert_eq!(net.confidences(&x, t).unwrap().argmax(), base);
        }
    }

    #[test]
    fn predict_invariant_to_logit_shift() {
        let mut net = random_net(&[3, 5, 4], 11);
        let x = Tensor::vector(vec![0.3, 0.1, -0.2]).unwrap();
        let base = net.predict(&x).unwrap();
        let last = net.layers_mut().last_mut().unwrap();
        let shifted = last.bias.map(|v| v + 10.0);
        last.bias = shifted;
        assert_eq!(net.predict(&x).unwrap(), base);
    }

    #[test]
    fn logits_piecewise_linear_in_x() {
        // Directional finite differences stay constant away from ReLU kinks.
        let net = random_net(&[2, 6, 6, 3], 3);
        let x = Tensor::vector(vec![0.37, -0.21]).unwrap();
        let v = [0.6, -0.8];
        let eval = |t: f64| {
            let p = Tensor::vector(vec![x.get(0) + t * v[0], x.get(1) + t * v[1]]).unwrap();
            net.logits(&p).unwrap().get(0)
        };
        let h = 1e-7;
        let d1 = (eval(h) - eval(-h)) / (2.0 * h);
        let d2 = (eval(2.0 * h) - eval(-2.0 * h)) / (4.0 * h);
        assert_relative_eq!(d1, d2, max_relative = 1e-6);
    }

    #[test]
    fn save_load_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        let net = random_net(&[4, 8, 8, 3], 42);
        net.save(&path).unwrap();
        let loaded = FeedForwardNetwork::load(&path).unwrap();
        assert_eq!(net, loaded);

        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
        for _ in 0..100 {
            let x = Tensor::vector(
                (0..4).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect(),
            )
            .unwrap();
            assert_eq!(net.logits(&x).unwrap(), loaded.logits(&x).unwrap());
        }
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        let net = random_net(&[2, 3, 2], 1);
        net.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(FeedForwardNetwork::load(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn dimension_chain_break_is_a_validation_error() {
        let layers = vec![
            Layer {
                weight: Tensor::matrix(20, 10, vec![0.0; 200]).unwrap(),
                bias: Tensor::zeros(vec![20]),
            },
            Layer {
                weight: Tensor::matrix(5, 30, vec![0.0; 150]).unwrap(),
                bias: Tensor::zeros(vec![5]),
            },
        ];
        let err = FeedForwardNetwork::new(layers).unwrap_err();
        assert!(err.to_string().contains("expects 30 inputs"));
    }

    #[test]
    fn presets_resolve() {
        let t = ArchPreset::named("mnist-teacher").unwrap();
        assert_eq!(t.layer_dims(), vec![784, 30, 30, 30, 30, 30, 10]);
        let s = ArchPreset::named("fmnist-student").unwrap();
        assert_eq!(s.layer_dims(), vec![784, 30, 30, 30, 30, 10]);
        assert!(ArchPreset::named("bogus").is_err());
    }

    #[test]
    fn pair_validates_dimensions() {
        let t = random_net(&[3, 4, 2], 0);
        let s = random_net(&[3, 5, 2], 1);
        assert!(TeacherStudentPair::new(t.clone(), s).is_ok());
        let bad = random_net(&[4, 4, 2], 2);
        assert!(TeacherStudentPair::new(t, bad).is_err());
    }
}
