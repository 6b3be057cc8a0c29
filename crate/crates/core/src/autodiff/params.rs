use super::{Graph, Scalar, Tensor, TensorError, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Named parameter tensors. Student and teacher are two stores registered
/// by the same model description, so their layouts are identical.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// True when both stores have the same names and shapes in the same order.
    pub fn same_layout(&self, other: &ParamStore<T>) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }
}

/// Gradient accumulators aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads<T> {
    pub values: Vec<Vec<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            values: store
                .params
                .iter()
                .map(|p| vec![T::ZERO; p.value.numel()])
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.values[id.0]
    }

    pub fn global_norm(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .map(|g| g.f64() * g.f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().flatten().all(|g| g.is_finite())
    }
}

/// Forward-pass context: a fresh [`Graph`] plus lazily bound parameter
/// leaves. Each parameter is bound at most once per graph, so every use of
/// a shared weight feeds the same leaf and its gradient is the sum over uses.
pub struct Ctx<'a, T> {
    pub g: Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    /// Context whose parameters receive gradients.
    pub fn train(store: &'a ParamStore<T>) -> Self {
        Self::with_mode(store, true)
    }

    /// Context for gradient-free forwards (teacher, evaluation).
    pub fn frozen(store: &'a ParamStore<T>) -> Self {
        Self::with_mode(store, false)
    }

    fn with_mode(store: &'a ParamStore<T>, trainable: bool) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
            trainable,
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.trainable {
            self.g.param(value)
        } else {
            self.g.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Graph leaf bound to `id`, if the forward pass touched it.
    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.g.constant(value)
    }

    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        self.g.backward(loss)
    }

    /// Adds this graph's parameter gradients into `grads`.
    pub fn accumulate_into(&self, grads: &mut Grads<T>) {
        for (i, b) in self.bound.iter().enumerate() {
            if let Some(v) = b {
                if let Some(g) = self.g.grad(*v) {
                    for (acc, &x) in grads.values[i].iter_mut().zip(g.data()) {
                        *acc += x;
                    }
                }
            }
        }
    }
}
