use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CmtError, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Numerator of the init bound `sqrt(INIT_GAIN / fan_in)`.
pub const INIT_GAIN: f64 = 6.0;

/// Architecture hyper-parameters of the toy detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub num_classes: usize,
    pub in_channels: usize,
    /// Output channels of each backbone stage; its length is the number of
    /// feature levels.
    pub widths: Vec<usize>,
    pub head_channels: usize,
    /// Backbone level read by the head (level `j` has stride `2^(j+1)`).
    pub head_level: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            num_classes: 3,
            in_channels: 3,
            widths: vec![16, 32, 64, 64],
            head_channels: 64,
            head_level: 2,
        }
    }
}

impl DetectorConfig {
    pub fn num_levels(&self) -> usize {
        self.widths.len()
    }

    pub fn level_stride(level: usize) -> usize {
        1 << (level + 1)
    }

    pub fn head_stride(&self) -> usize {
        Self::level_stride(self.head_level)
    }

    pub fn background_class(&self) -> usize {
        self.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.head_level >= self.widths.len() {
            return Err(CmtError::ConfigInvalid(
                "head_level must index a backbone stage".into(),
            ));
        }
        if self.num_classes == 0 || self.widths.contains(&0) || self.head_channels == 0 {
            return Err(CmtError::ConfigInvalid(
                "detector widths must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Name and shape of every weight tensor.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = Vec::new();
        let mut c_in = self.in_channels;
        for (s, &c_out) in self.widths.iter().enumerate() {
            shapes.push((
                format!("backbone.{s}.conv1.weight"),
                vec![c_out, c_in, 3, 3],
            ));
            shapes.push((format!("backbone.{s}.conv1.bias"), vec![c_out]));
            shapes.push((
                format!("backbone.{s}.conv2.weight"),
                vec![c_out, c_out, 3, 3],
            ));
            shapes.push((format!("backbone.{s}.conv2.bias"), vec![c_out]));
            c_in = c_out;
        }
        let feat = self.widths[self.head_level];
        let hc = self.head_channels;
        shapes.push(("head.conv1.weight".into(), vec![hc, feat, 3, 3]));
        shapes.push(("head.conv1.bias".into(), vec![hc]));
        shapes.push(("head.conv2.weight".into(), vec![hc, hc, 3, 3]));
        shapes.push(("head.conv2.bias".into(), vec![hc]));
        shapes.push((
            "head.cls.weight".into(),
            vec![self.num_classes + 1, hc, 1, 1],
        ));
        shapes.push(("head.cls.bias".into(), vec![self.num_classes + 1]));
        shapes.push(("head.reg.weight".into(), vec![4, hc, 1, 1]));
        shapes.push(("head.reg.bias".into(), vec![4]));
        shapes
    }
}

/// Full weight set of one detector, keyed by stable names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    tensors: BTreeMap<String, Tensor>,
}

impl DetectorParams {
    /// He-uniform init: weights uniform in `[-s, s]` with
    /// `s = sqrt(INIT_GAIN / fan_in)`, biases zero.
    pub fn init(cfg: &DetectorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape) in cfg.param_shapes() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (INIT_GAIN / fan_in as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
            };
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(DetectorParams { tensors })
    }

    pub fn zeros(cfg: &DetectorConfig) -> Self {
        let tensors = cfg
            .param_shapes()
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(s)))
            .collect();
        DetectorParams { tensors }
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        DetectorParams { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Checks that both sets share names and shapes.
    pub fn check_compatible(&self, other: &DetectorParams) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(CmtError::ShapeMismatch(format!(
                "parameter sets hold {} and {} tensors",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for (name, t) in &self.tensors {
            match other.tensors.get(name) {
                Some(o) if o.shape() == t.shape() => {}
                Some(o) => {
                    return Err(CmtError::ShapeMismatch(format!(
                        "{name}: {:?} vs {:?}",
                        t.shape(),
                        o.shape()
                    )))
                }
                None => return Err(CmtError::ShapeMismatch(format!("{name} missing"))),
            }
        }
        Ok(())
    }

    /// Euclidean distance over all scalars.
    pub fn distance(&self, other: &DetectorParams) -> f64 {
        self.tensors
            .iter()
            .map(|(n, t)| {
                let o = &other.tensors[n];
                t.data()
                    .iter()
                    .zip(o.data())
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Registers every tensor on `tape`, as trainable leaves on a recording
    /// tape and as constants otherwise.
    pub fn bind<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|(n, t)| {
                let v = if tape.is_recording() {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (n.clone(), v)
            })
            .collect();
        ParamVars { vars }
    }

    /// Plain gradient step `θ ← θ − η·g`.
    pub fn sgd_step(&mut self, grads: &BTreeMap<String, Tensor>, lr: f64) {
        for (name, t) in &mut self.tensors {
            if let Some(g) = grads.get(name) {
                for (w, d) in t.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * d;
                }
            }
        }
    }
}

/// Detector weights bound to a tape.
pub struct ParamVars<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> ParamVars<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| CmtError::ShapeMismatch(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'t>)> {
        self.vars.iter()
    }

    /// Swaps in a different var for one weight.
    pub fn replace(&mut self, name: &str, var: Var<'t>) {
        self.vars.insert(name.to_string(), var);
    }

    /// Collects gradients for every bound weight (zeros when unreached).
    pub fn gradients(&self, grads: &crate::numerics::Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(n, v)| (n.clone(), grads.tensor(*v)))
            .collect()
    }
}
