use std::collections::BTreeMap;

use exa_tensor::{Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, CLASSES, HEAD_FIELDS};
use crate::error::{Error, Result};

/// Prior probability of a heatmap peak at initialization.
const HEATMAP_PRIOR: f64 = 0.1;
/// Initial log box size in input pixels.
const LOG_SIZE_PRIOR: f64 = 2.5;

/// Named f32 parameters in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
    index: BTreeMap<String, usize>,
}

/// Parameter shapes of a configuration, in storage order.
pub fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d;
    let f = cfg.ffn;
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    let mut add = |name: String, shape: Vec<usize>| out.push((name, shape));
    let mut c_in = 3;
    for (i, &c) in cfg.stem_channels.iter().chain(std::iter::once(&d)).enumerate() {
        add(format!("stem.{i}.w"), vec![c, c_in, 3, 3]);
        add(format!("stem.{i}.b"), vec![c]);
        add(format!("stem.{i}.ln.g"), vec![c]);
        add(format!("stem.{i}.ln.b"), vec![c]);
        c_in = c;
    }
    let attn_block = |add: &mut dyn FnMut(String, Vec<usize>), p: &str| {
        add(format!("{p}.ln1.g"), vec![d]);
        add(format!("{p}.ln1.b"), vec![d]);
        for m in ["q", "k", "v", "o"] {
            add(format!("{p}.w{m}"), vec![d, d]);
            add(format!("{p}.b{m}"), vec![d]);
        }
        add(format!("{p}.ln2.g"), vec![d]);
        add(format!("{p}.ln2.b"), vec![d]);
        add(format!("{p}.w1"), vec![d, f]);
        add(format!("{p}.b1"), vec![f]);
        add(format!("{p}.w2"), vec![f, d]);
        add(format!("{p}.b2"), vec![d]);
    };
    for l in 0..cfg.encoder_layers {
        attn_block(&mut add, &format!("enc.{l}"));
    }
    add("enc.ln.g".into(), vec![d]);
    add("enc.ln.b".into(), vec![d]);
    add("dec.init.w".into(), vec![d, d]);
    add("dec.init.b".into(), vec![d]);
    let stages = cfg.scales.len();
    for (i, &s) in cfg.scales.iter().enumerate() {
        for l in 0..cfg.decoder_layers {
            attn_block(&mut add, &format!("dec.{i}.{l}"));
        }
        if i + 1 < stages {
            add(format!("dec.{i}.score.w"), vec![d, 1]);
            add(format!("dec.{i}.score.b"), vec![1]);
            add(format!("dec.{i}.child.w"), vec![d, d]);
        }
        if s > 1 {
            add(format!("dec.{i}.up.w"), vec![d, d, s, s]);
        }
    }
    for h in ["in", "out"] {
        add(format!("head.{h}.ln.g"), vec![d]);
        add(format!("head.{h}.ln.b"), vec![d]);
        add(format!("head.{h}.w1"), vec![d, d]);
        add(format!("head.{h}.b1"), vec![d]);
        add(format!("head.{h}.w2"), vec![d, CLASSES * HEAD_FIELDS]);
        add(format!("head.{h}.b2"), vec![CLASSES * HEAD_FIELDS]);
    }
    out
}

impl Params {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in layout(cfg) {
            let t = init_tensor(&name, &shape, &mut rng);
            names.push(name);
            tensors.push(t);
        }
        Ok(Self::from_parts(names, tensors))
    }

    fn from_parts(names: Vec<String>, tensors: Vec<Tensor<f32>>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Params { names, tensors, index }
    }

    /// Rebuilds parameters from named records, which must match the
    /// configuration's layout exactly; extra records are ignored.
    pub fn from_records(cfg: &ModelConfig, records: &[(String, Tensor<f32>)]) -> Result<Self> {
        let by_name: BTreeMap<&str, &Tensor<f32>> = records.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in layout(cfg) {
            let t = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, configuration expects {shape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            tensors.push((*t).clone());
        }
        Ok(Self::from_parts(names, tensors))
    }

    pub fn records(&self) -> Vec<(String, Tensor<f32>)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> &Tensor<f32> {
        &self.tensors[self.index[name]]
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn load<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                let v = t.cast::<T>();
                if trainable {
                    tape.param(v)
                } else {
                    tape.constant(v)
                }
            })
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }
}

/// Parameters as tape variables.
pub struct Bound {
    pub vars: Vec<Var>,
    index: BTreeMap<String, usize>,
}

impl Bound {
    pub fn from_vars(params: &Params, vars: Vec<Var>) -> Self {
        Bound {
            vars,
            index: params.index.clone(),
        }
    }

    pub fn get(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter {name}"),
        }
    }
}

fn init_tensor(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let numel: usize = shape.iter().product();
    let leaf = name.rsplit('.').next().unwrap_or("");
    if name.ends_with(".g") {
        return Tensor::ones(shape.to_vec());
    }
    if name.starts_with("head.") && leaf == "b2" {
        let prior = (HEATMAP_PRIOR / (1.0 - HEATMAP_PRIOR)).ln() as f32;
        return Tensor::from_fn(shape.to_vec(), |i| match i % HEAD_FIELDS {
            0 => prior,
            3 | 4 => LOG_SIZE_PRIOR as f32,
            _ => 0.0,
        });
    }
    if shape.len() == 1 {
        return Tensor::zeros(shape.to_vec());
    }
    // variance 1/fan_in; transposed-conv weights are [c_in, c_out, k, k]
    let fan_in = match (shape.len(), name.ends_with("up.w")) {
        (4, true) => shape[0],
        (4, false) => shape[1] * shape[2] * shape[3],
        _ => shape[0],
    };
    let a = (3.0 / fan_in as f64).sqrt();
    let data = (0..numel).map(|_| rng.gen_range(-a..a) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}
