use std::collections::HashMap;

use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Handle to one parameter tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
}

/// Named parameters plus their gradient buffers. Layers keep [`ParamId`]s;
/// forward passes read values and backward passes accumulate into grads.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

/// Initial value of a freshly registered parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, resampled outside two std.
    TruncNormal(f32),
    /// Uniform on `[-bound, bound]`.
    Uniform(f32),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut impl Rng) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter name {name}");
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::TruncNormal(std) => {
                let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
                (0..n)
                    .map(|_| loop {
                        let z = normal.sample(rng);
                        if z.abs() <= 2.0 {
                            break z * std;
                        }
                    })
                    .collect()
            }
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
        };
        let value = ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches length");
        let id = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            grad: ArrayD::zeros(value.raw_dim()),
            value,
        });
        self.by_name.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f32> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f32> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &ArrayD<f32> {
        &self.params[id.0].grad
    }

    pub fn v1(&self, id: ParamId) -> ArrayView1<'_, f32> {
        self.value(id).view().into_dimensionality().expect("1-d parameter")
    }

    pub fn v2(&self, id: ParamId) -> ArrayView2<'_, f32> {
        self.value(id).view().into_dimensionality().expect("2-d parameter")
    }

    pub fn g1(&mut self, id: ParamId) -> ArrayViewMut1<'_, f32> {
        self.params[id.0].grad.view_mut().into_dimensionality().expect("1-d parameter")
    }

    pub fn g2(&mut self, id: ParamId) -> ArrayViewMut2<'_, f32> {
        self.params[id.0].grad.view_mut().into_dimensionality().expect("2-d parameter")
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Euclidean norm over every gradient entry.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|&g| (g as f64) * (g as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }
}
