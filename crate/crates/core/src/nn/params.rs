use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use super::{NnError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Named, ordered collection of model parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
    init: Init,
}

/// Uniform(-0.05, 0.05) weight initialisation bound.
pub const INIT_RANGE: f64 = 0.05;

/// How `add_uniform` picks its bound.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Fixed bound [`INIT_RANGE`] for every weight.
    #[default]
    Uniform,
    /// `sqrt(6 / fan_in)`, with fan-in the first dimension of a matrix and
    /// `channels·k·k` for a conv kernel. Keeps activations from shrinking
    /// layer by layer in deep stacks.
    FanIn,
}

impl Init {
    pub fn bound(self, shape: &[usize]) -> f64 {
        match self {
            Init::Uniform => INIT_RANGE,
            Init::FanIn => {
                let fan_in: usize = match shape.len() {
                    0 | 1 => 1,
                    2 => shape[0],
                    _ => shape[1..].iter().product(),
                };
                (6.0 / fan_in.max(1) as f64).sqrt()
            }
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_init(init: Init) -> Self {
        Self {
            init,
            ..Self::default()
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            trainable: true,
        });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn add_uniform<R: Rng>(&mut self, name: &str, shape: &[usize], rng: &mut R) -> ParamId {
        let bound = self.init.bound(shape);
        self.add_uniform_bound(name, shape, bound, rng)
    }

    pub fn add_uniform_bound<R: Rng>(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut R) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::full(shape, 1.0))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Replace every value from `other`, which must have the same names and shapes.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<(), NnError> {
        if other.len() != self.len() {
            return Err(NnError::Format(format!(
                "parameter count mismatch: {} vs {}",
                other.len(),
                self.len()
            )));
        }
        for p in &mut self.params {
            let id = other
                .id(&p.name)
                .ok_or_else(|| NnError::Format(format!("missing parameter {}", p.name)))?;
            let src = &other.get(id).value;
            if src.shape() != p.value.shape() {
                return Err(NnError::Format(format!(
                    "shape mismatch for {}: {:?} vs {:?}",
                    p.name,
                    src.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.clone();
        }
        Ok(())
    }
}

/// Gradient for one parameter: dense, or a sparse set of rows for lookup tables.
#[derive(Clone, Debug, PartialEq)]
pub enum Grad {
    Dense(Tensor),
    Rows {
        cols: usize,
        rows: BTreeMap<usize, Vec<f64>>,
    },
}

impl Grad {
    fn add(&mut self, other: &Grad) {
        match (self, other) {
            (Grad::Dense(a), Grad::Dense(b)) => a.add_assign(b),
            (Grad::Rows { rows: a, .. }, Grad::Rows { rows: b, .. }) => {
                for (r, v) in b {
                    let slot = a.entry(*r).or_insert_with(|| vec![0.0; v.len()]);
                    for (x, y) in slot.iter_mut().zip(v) {
                        *x += y;
                    }
                }
            }
            (Grad::Dense(a), Grad::Rows { cols, rows }) => {
                for (r, v) in rows {
                    let dst = &mut a.data_mut()[r * cols..(r + 1) * cols];
                    for (x, y) in dst.iter_mut().zip(v) {
                        *x += y;
                    }
                }
            }
            (slot @ Grad::Rows { .. }, Grad::Dense(b)) => {
                let mut dense = b.clone();
                if let Grad::Rows { cols, rows } = slot {
                    for (r, v) in rows.iter() {
                        let dst = &mut dense.data_mut()[r * *cols..(r + 1) * *cols];
                        for (x, y) in dst.iter_mut().zip(v) {
                            *x += y;
                        }
                    }
                }
                *slot = Grad::Dense(dense);
            }
        }
    }

    fn scale(&mut self, s: f64) {
        match self {
            Grad::Dense(t) => t.scale_assign(s),
            Grad::Rows { rows, .. } => rows.values_mut().flatten().for_each(|v| *v *= s),
        }
    }

    fn sum_sq(&self) -> f64 {
        match self {
            Grad::Dense(t) => t.data().iter().map(|v| v * v).sum(),
            Grad::Rows { rows, .. } => rows.values().flatten().map(|v| v * v).sum(),
        }
    }

    /// Materialise as a dense tensor of the given shape.
    pub fn to_dense(&self, shape: &[usize]) -> Tensor {
        match self {
            Grad::Dense(t) => t.clone(),
            Grad::Rows { cols, rows } => {
                let mut t = Tensor::zeros(shape);
                for (r, v) in rows {
                    t.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(v);
                }
                t
            }
        }
    }

    /// Value at a flat index of the dense layout.
    pub fn at(&self, flat: usize) -> f64 {
        match self {
            Grad::Dense(t) => t.data()[flat],
            Grad::Rows { cols, rows } => rows
                .get(&(flat / cols))
                .map_or(0.0, |r| r[flat % cols]),
        }
    }
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    slots: Vec<Option<Grad>>,
}

impl Gradients {
    pub fn new(n_params: usize) -> Self {
        Self {
            slots: vec![None; n_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Grad> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.iter().all(Option::is_none)
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: Grad) {
        match &mut self.slots[id.0] {
            Some(g) => g.add(&grad),
            slot @ None => *slot = Some(grad),
        }
    }

    pub(crate) fn accumulate_dense(&mut self, id: ParamId, grad: &Tensor) {
        match &mut self.slots[id.0] {
            Some(Grad::Dense(t)) => t.add_assign(grad),
            Some(g) => g.add(&Grad::Dense(grad.clone())),
            slot @ None => *slot = Some(Grad::Dense(grad.clone())),
        }
    }

    pub(crate) fn accumulate_row(&mut self, id: ParamId, cols: usize, row: usize, values: &[f64]) {
        let slot = self.slots[id.0].get_or_insert_with(|| Grad::Rows {
            cols,
            rows: BTreeMap::new(),
        });
        match slot {
            Grad::Rows { rows, .. } => {
                let dst = rows.entry(row).or_insert_with(|| vec![0.0; cols]);
                for (x, y) in dst.iter_mut().zip(values) {
                    *x += y;
                }
            }
            Grad::Dense(t) => {
                let dst = &mut t.data_mut()[row * cols..(row + 1) * cols];
                for (x, y) in dst.iter_mut().zip(values) {
                    *x += y;
                }
            }
        }
    }

    /// Elementwise sum, in order; used to reduce per-example gradients.
    pub fn merge(&mut self, other: &Gradients) {
        if self.slots.len() < other.slots.len() {
            self.slots.resize(other.slots.len(), None);
        }
        for (i, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g.clone());
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.slots.iter_mut().flatten().for_each(|g| g.scale(s));
    }

    pub fn global_norm(&self) -> f64 {
        self.slots.iter().flatten().map(Grad::sum_sq).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().flatten().all(|g| match g {
            Grad::Dense(t) => t.all_finite(),
            Grad::Rows { rows, .. } => rows.values().flatten().all(|v| v.is_finite()),
        })
    }
}
