use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Non-trainable state such as batchnorm running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

impl BufferId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor together with its gradient accumulator and the
/// RMSprop state that belongs to it.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub group: u32,
    pub value: Tensor,
    pub grad: Tensor,
    pub cache: Tensor,
    pub momentum: Tensor,
    pub frozen: bool,
}

impl Parameter {
    fn new(name: &str, group: u32, value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Parameter {
            name: name.to_string(),
            group,
            grad: Tensor::zeros(&shape),
            cache: Tensor::zeros(&shape),
            momentum: Tensor::zeros(&shape),
            value,
            frozen: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Buffer {
    pub name: String,
    pub value: Tensor,
}

/// Owns every parameter and buffer of a model, in declaration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    buffers: Vec<Buffer>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, group: u32, value: Tensor) -> ParamId {
        self.params.push(Parameter::new(name, group, value));
        ParamId(self.params.len() - 1)
    }

    /// Gaussian init with std `sqrt(gain / fan_in)`.
    pub fn add_normal<R: Rng>(
        &mut self,
        name: &str,
        group: u32,
        shape: &[usize],
        fan_in: usize,
        gain: f64,
        rng: &mut R,
    ) -> ParamId {
        let std = (gain / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("std is finite");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        self.add(name, group, Tensor::from_vec(shape, data).expect("sized"))
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> BufferId {
        self.buffers.push(Buffer {
            name: name.to_string(),
            value,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0].value
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer] {
        &mut self.buffers
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Freeze every parameter whose group is not in `trainable`.
    pub fn set_trainable_groups(&mut self, trainable: &[u32]) {
        for p in &mut self.params {
            p.frozen = !trainable.contains(&p.group);
        }
    }

    pub fn unfreeze_all(&mut self) {
        for p in &mut self.params {
            p.frozen = false;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds gradients collected by a graph into the parameter accumulators.
    pub fn accumulate(&mut self, grads: &[Option<Vec<f64>>]) {
        for (p, g) in self.params.iter_mut().zip(grads) {
            if let Some(g) = g {
                for (a, b) in p.grad.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}
