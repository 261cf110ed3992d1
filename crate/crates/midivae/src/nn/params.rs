//! Named parameter storage shared between the model, the optimizer and the
//! checkpoint container.
//!
//! Parameters are registered once, in a deterministic order, and referenced
//! by dense index thereafter; optimizer state lines up with the same
//! indices. Values are `Rc`-shared with graphs so binding a parameter into a
//! forward pass never copies it.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Mat, NodeId};

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Rc<Mat>>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Mat) -> usize {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "parameter `{name}` registered twice"
        );
        self.names.push(name.clone());
        self.values.push(Rc::new(value));
        let id = self.values.len() - 1;
        self.index.insert(name, id);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn value(&self, id: usize) -> &Mat {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Mat {
        Rc::make_mut(&mut self.values[id])
    }

    pub fn set(&mut self, id: usize, value: Mat) {
        assert_eq!(self.values[id].shape(), value.shape(), "shape change for {}", self.names[id]);
        self.values[id] = Rc::new(value);
    }

    /// Bind a parameter into a graph as a trainable leaf.
    pub fn bind(&self, graph: &mut Graph, id: usize) -> NodeId {
        graph.param(id, self.values[id].clone())
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &str, &Mat)> {
        self.names
            .iter()
            .enumerate()
            .map(move |(i, n)| (i, n.as_str(), &*self.values[i]))
    }

    /// Total scalar count across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Gradients accumulated per parameter index (e.g. across a batch).
/// Ordered storage keeps every reduction deterministic.
#[derive(Debug, Default)]
pub struct ParamGrads {
    grads: BTreeMap<usize, Mat>,
}

impl ParamGrads {
    pub fn new() -> Self {
        ParamGrads::default()
    }

    /// Fold in one backward pass, scaled by `scale`.
    pub fn accumulate(&mut self, grads: Vec<(usize, Mat)>, scale: f64) {
        for (id, mut g) in grads {
            if scale != 1.0 {
                g.mapv_inplace(|x| x * scale);
            }
            match self.grads.get_mut(&id) {
                Some(acc) => *acc += &g,
                None => {
                    self.grads.insert(id, g);
                }
            }
        }
    }

    pub fn get(&self, id: usize) -> Option<&Mat> {
        self.grads.get(&id)
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.grads.keys().copied().collect()
    }

    /// Global L2 norm across all gradients.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Scale every gradient in place.
    pub fn scale(&mut self, k: f64) {
        for g in self.grads.values_mut() {
            g.mapv_inplace(|x| x * k);
        }
    }
}

/// Glorot-uniform weight initialization.
pub fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// Small-scale normal-ish initialization for embeddings and queries.
pub fn embedding_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

pub fn zeros(rows: usize, cols: usize) -> Mat {
    Mat::zeros((rows, cols))
}

pub fn ones(rows: usize, cols: usize) -> Mat {
    Mat::ones((rows, cols))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_bind_and_mutate() {
        let mut params = ParamSet::new();
        let id = params.register("w", Mat::ones((2, 3)));
        assert_eq!(params.id("w"), Some(id));
        assert_eq!(params.scalar_count(), 6);

        let mut g = Graph::new();
        let node = params.bind(&mut g, id);
        assert_eq!(g.value(node)[[0, 0]], 1.0);

        params.value_mut(id)[[0, 0]] = 5.0;
        assert_eq!(params.value(id)[[0, 0]], 5.0);
        // the graph keeps the value it was built with
        assert_eq!(g.value(node)[[0, 0]], 1.0);
    }

    #[test]
    fn grads_accumulate_and_clip() {
        let mut grads = ParamGrads::new();
        grads.accumulate(vec![(0, Mat::from_elem((1, 2), 3.0))], 1.0);
        grads.accumulate(vec![(0, Mat::from_elem((1, 2), 1.0))], 0.5);
        assert_eq!(grads.get(0).unwrap(), &Mat::from_elem((1, 2), 3.5));
        let norm = grads.global_norm();
        assert!((norm - (2.0f64 * 3.5 * 3.5).sqrt()).abs() < 1e-12);
        grads.scale(1.0 / norm);
        assert!((grads.global_norm() - 1.0).abs() < 1e-12);
    }
}
