use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named, optionally frozen model weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    /// Dotted path such as `layers.2.cross_attn.w_q`.
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            trainable: true,
        });
        id
    }

    pub fn add_normal<R: Rng>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) -> usize {
        let numel = shape.iter().product();
        let data = if std == 0.0 {
            vec![0.0; numel]
        } else {
            let dist = Normal::new(0.0, std).expect("finite std");
            (0..numel).map(|_| dist.sample(rng)).collect()
        };
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape matches"))
    }

    pub fn add_const(&mut self, name: &str, shape: &[usize], value: f64) -> usize {
        self.add(name, Tensor::full(shape, value))
    }

    pub fn as_slice(&self) -> &[Parameter] {
        &self.params
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: usize) -> &Parameter {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Parameter {
        &mut self.params[id]
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn by_name(&self, name: &str) -> Result<&Parameter> {
        Ok(&self.params[self.id(name)?])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        let id = self.id(name)?;
        Ok(&mut self.params[id])
    }

    /// Total number of scalar weights.
    pub fn census(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.value.zero_grad());
    }

    /// Adds `grad` into the gradient slot of parameter `id`.
    pub fn accumulate_grad(&mut self, id: usize, grad: &[f64]) {
        let value = &mut self.params[id].value;
        match &mut value.grad {
            Some(g) => g.iter_mut().zip(grad).for_each(|(g, d)| *g += d),
            None => value.grad = Some(grad.to_vec()),
        }
    }

    /// Order-sensitive fingerprint of the bit patterns of the selected
    /// parameters.
    pub fn fingerprint<F: Fn(&Parameter) -> bool>(&self, select: F) -> u64 {
        // FNV-1a over names and raw bits
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for p in self.params.iter().filter(|p| select(p)) {
            feed(p.name.as_bytes());
            for v in p.value.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}
