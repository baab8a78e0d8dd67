use super::{Array, Result, Scalar, TensorError};

/// Index of a parameter matrix inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Named parameter matrices in a fixed declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Array<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Array<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array<T>] {
        &mut self.values
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(Array::len).sum()
    }

    /// Zero arrays shaped like every parameter.
    pub fn zeros_like(&self) -> Vec<Array<T>> {
        self.values
            .iter()
            .map(|v| Array::zeros(v.rows(), v.cols()))
            .collect()
    }

    /// Flattened copy of all values in declaration order.
    pub fn flatten(&self) -> Vec<T> {
        self.values.iter().flat_map(|v| v.data().iter().copied()).collect()
    }

    /// Overwrites all values from a flat slice in declaration order.
    pub fn assign_flat(&mut self, flat: &[T]) -> Result<()> {
        let total: usize = self.values.iter().map(Array::len).sum();
        if flat.len() != total {
            return Err(TensorError::BadData { len: flat.len(), shape: [total, 1] });
        }
        let mut at = 0;
        for v in &mut self.values {
            let n = v.len();
            v.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Maps a flat coordinate to (param, offset).
    pub fn locate(&self, mut flat: usize) -> Option<(ParamId, usize)> {
        for (i, v) in self.values.iter().enumerate() {
            if flat < v.len() {
                return Some((ParamId(i), flat));
            }
            flat -= v.len();
        }
        None
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Array::cast).collect(),
        }
    }
}
