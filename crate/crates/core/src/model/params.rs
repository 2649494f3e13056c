use std::collections::HashMap;
use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::signature::Standardizer;

pub(crate) const GATES: [&str; 4] = ["z", "r", "c", "o"];
pub(crate) const PEEPHOLES: [&str; 3] = ["z", "r", "o"];

/// Name, shape and fan-in of one parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub is_bias: bool,
}

/// Every parameter the configured network uses, in a fixed order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, fan_in: usize, is_bias: bool| {
        out.push(ParamSpec {
            name,
            shape,
            fan_in,
            is_bias,
        })
    };
    let sizes = cfg.spatial_sizes();
    for (l, s) in cfg.encoder_specs().iter().enumerate() {
        push(
            format!("enc{}.w", l + 1),
            vec![s.k, s.k, s.in_ch, s.out_ch],
            s.k * s.k * s.in_ch,
            false,
        );
        push(format!("enc{}.b", l + 1), vec![s.out_ch], 1, true);
    }
    for (l, s) in cfg.encoder_specs().iter().enumerate() {
        if !cfg.mode.recurrent(l) {
            continue;
        }
        let (k, d, side) = (s.k, s.out_ch, sizes[l + 1]);
        for src in ["x", "h"] {
            for gate in GATES {
                push(
                    format!("lstm{}.w_{src}{gate}", l + 1),
                    vec![k, k, d, d],
                    k * k * d,
                    false,
                );
            }
        }
        for gate in PEEPHOLES {
            push(
                format!("lstm{}.w_c{gate}", l + 1),
                vec![side, side, d],
                1,
                false,
            );
        }
        for gate in GATES {
            push(format!("lstm{}.b_{gate}", l + 1), vec![d], 1, true);
        }
    }
    for (l, s) in cfg.decoder_specs().iter().enumerate().rev() {
        // transposed-conv kernels are stored as k x k x C_out x C_in
        push(
            format!("dec{}.w", l + 1),
            vec![s.k, s.k, s.out_ch, s.in_ch],
            s.k * s.k * s.in_ch,
            false,
        );
        push(format!("dec{}.b", l + 1), vec![s.out_ch], 1, true);
    }
    out
}

/// All trainable arrays plus the input standardization they were trained with.
#[derive(Clone, Debug)]
pub struct ModelParams {
    config: ModelConfig,
    names: Vec<String>,
    values: Vec<Arc<Array>>,
    index: HashMap<String, usize>,
    pub standardizer: Standardizer,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.names == other.names
            && self.standardizer == other.standardizer
            && self.values.iter().zip(&other.values).all(|(a, b)| a == b)
    }
}

impl ModelParams {
    /// Kernels ~ N(0, 1/fan_in), biases zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let specs = param_specs(config);
        let mut names = Vec::with_capacity(specs.len());
        let mut values = Vec::with_capacity(specs.len());
        for spec in specs {
            let arr = if spec.is_bias {
                Array::zeros(&spec.shape)
            } else {
                let dist = Normal::new(0.0, 1.0 / (spec.fan_in as f64).sqrt())
                    .map_err(|e| Error::Config(e.to_string()))?;
                Array::from_fn(&spec.shape, |_| dist.sample(&mut rng))
            };
            names.push(spec.name);
            values.push(Arc::new(arr));
        }
        Self::from_parts(
            config.clone(),
            names,
            values,
            Standardizer::identity(config.n),
        )
    }

    pub fn from_parts(
        config: ModelConfig,
        names: Vec<String>,
        values: Vec<Arc<Array>>,
        standardizer: Standardizer,
    ) -> Result<Self> {
        let specs = param_specs(&config);
        if specs.len() != names.len() || names.len() != values.len() {
            return Err(Error::Incompatible(format!(
                "expected {} parameter arrays, got {}",
                specs.len(),
                names.len()
            )));
        }
        for ((spec, name), value) in specs.iter().zip(&names).zip(&values) {
            if &spec.name != name || spec.shape != value.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter {name} {:?} does not match expected {} {:?}",
                    value.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        if standardizer.mean.len() != config.n {
            return Err(Error::Incompatible(format!(
                "standardizer has {} series, config has n={}",
                standardizer.mean.len(),
                config.n
            )));
        }
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(Self {
            config,
            names,
            values,
            index,
            standardizer,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Arc<Array>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Arc<Array>] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("model has no parameter {name}")))
    }

    pub fn get(&self, name: &str) -> Result<&Arc<Array>> {
        Ok(&self.values[self.id(name)?])
    }

    /// Replace every array, e.g. with a perturbed copy during gradient checks.
    pub fn with_values(&self, values: Vec<Arc<Array>>) -> Self {
        Self {
            values,
            ..self.clone()
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            h.update(name.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.to_le_bytes());
            }
        }
        for x in self.standardizer.mean.iter().chain(&self.standardizer.std) {
            h.update(x.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
