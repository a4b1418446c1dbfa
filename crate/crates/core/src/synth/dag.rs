//! Random causal DAGs whose children apply a nonlinearity to a weighted sum of parents.

use serde::{Deserialize, Serialize};

use super::kernel::{KernelSpec, MeanSpec};
use super::SynthConfig;
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Tanh,
    Sin,
    Softplus,
    /// `x · σ(x)`
    Silu,
}

impl Activation {
    pub const ALL: [Activation; 5] = [
        Self::Identity,
        Self::Tanh,
        Self::Sin,
        Self::Softplus,
        Self::Silu,
    ];

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Self::Identity => x,
            Self::Tanh => x.tanh(),
            Self::Sin => x.sin(),
            Self::Softplus => {
                if x > 30.0 {
                    x
                } else {
                    x.exp().ln_1p()
                }
            }
            Self::Silu => x / (1.0 + (-x).exp()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RootSpec {
    pub kernel: KernelSpec,
    pub mean: MeanSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DagNode {
    /// `(parent id, edge weight)`; empty for roots.
    pub parents: Vec<(usize, f64)>,
    pub bias: f64,
    pub activation: Activation,
    pub root: Option<RootSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DagSpec {
    pub nodes: Vec<DagNode>,
    pub observed: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PropagateError {
    RootCount { expected: usize, got: usize },
    Cycle,
    NonFinite { node: usize },
}

impl DagSpec {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Root ids in ascending order.
    pub fn roots(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&v| self.nodes[v].parents.is_empty())
            .collect()
    }

    /// Kahn's algorithm; `None` when the parent lists contain a cycle.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let n = self.nodes.len();
        let mut indegree: Vec<usize> = self.nodes.iter().map(|v| v.parents.len()).collect();
        let mut children = vec![Vec::new(); n];
        for (v, node) in self.nodes.iter().enumerate() {
            for &(u, _) in &node.parents {
                if u >= n {
                    return None;
                }
                children[u].push(v);
            }
        }
        let mut ready: Vec<usize> = (0..n).filter(|&v| indegree[v] == 0).rev().collect();
        let mut order = Vec::with_capacity(n);
        while let Some(v) = ready.pop() {
            order.push(v);
            for &c in &children[v] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.push(c);
                }
            }
        }
        (order.len() == n).then_some(order)
    }

    /// Samples a DAG with a node count uniform in `[2, max_nodes]`.
    pub fn sample(rng: &mut Rng, max_nodes: usize, cfg: &SynthConfig) -> Self {
        let n = rng::int_in(rng, 2, max_nodes.max(2));
        Self::sample_with_nodes(rng, n, cfg)
    }

    /// Samples a DAG with exactly `n >= 2` nodes.
    ///
    /// Node ids are shuffled into a random generation order; the first `r`
    /// nodes in that order are roots (`r` uniform in `[1, max(1, n/3)]`) and
    /// every later node draws 1..=`max_parents` parents among nodes generated
    /// before it, which makes the graph acyclic by construction.
    pub fn sample_with_nodes(rng: &mut Rng, n: usize, cfg: &SynthConfig) -> Self {
        let n = n.max(2);
        let mut order: Vec<usize> = (0..n).collect();
        rng::shuffle(rng, &mut order);
        let n_roots = rng::int_in(rng, 1, (n / 3).max(1));
        let mut nodes: Vec<Option<DagNode>> = vec![None; n];
        for (pos, &id) in order.iter().enumerate() {
            let node = if pos < n_roots {
                DagNode {
                    parents: vec![],
                    bias: 0.0,
                    activation: Activation::Identity,
                    root: Some(RootSpec {
                        kernel: KernelSpec::sample(rng, cfg),
                        mean: MeanSpec::sample(rng, cfg),
                    }),
                }
            } else {
                let k = rng::int_in(rng, 1, cfg.max_parents.min(pos).max(1));
                let mut pool: Vec<usize> = order[..pos].to_vec();
                rng::shuffle(rng, &mut pool);
                let mut parents: Vec<(usize, f64)> =
                    pool[..k].iter().map(|&u| (u, rng::normal(rng))).collect();
                parents.sort_by_key(|p| p.0);
                DagNode {
                    parents,
                    bias: rng::normal(rng),
                    activation: Activation::ALL[rng::int_in(rng, 0, Activation::ALL.len() - 1)],
                    root: None,
                }
            };
            nodes[id] = Some(node);
        }
        let n_obs = rng::int_in(rng, 1, n);
        let mut ids: Vec<usize> = (0..n).collect();
        rng::shuffle(rng, &mut ids);
        let mut observed = ids[..n_obs].to_vec();
        observed.sort_unstable();
        Self {
            nodes: nodes.into_iter().map(Option::unwrap).collect(),
            observed,
        }
    }

    /// Evaluates every node given one series per root (in [`DagSpec::roots`] order).
    pub fn propagate(&self, root_samples: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, PropagateError> {
        let roots = self.roots();
        if roots.len() != root_samples.len() {
            return Err(PropagateError::RootCount {
                expected: roots.len(),
                got: root_samples.len(),
            });
        }
        let order = self.topological_order().ok_or(PropagateError::Cycle)?;
        let len = root_samples.first().map_or(0, Vec::len);
        let mut values: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        for (r, s) in roots.iter().zip(root_samples) {
            values[*r] = Some(s.clone());
        }
        for v in order {
            if values[v].is_some() {
                continue;
            }
            let node = &self.nodes[v];
            let mut acc = vec![node.bias; len];
            for &(u, w) in &node.parents {
                let parent = values[u].as_ref().expect("parents precede children");
                acc.iter_mut().zip(parent).for_each(|(a, p)| *a += w * p);
            }
            acc.iter_mut().for_each(|a| *a = node.activation.apply(*a));
            if acc.iter().any(|a| !a.is_finite()) {
                return Err(PropagateError::NonFinite { node: v });
            }
            values[v] = Some(acc);
        }
        Ok(values.into_iter().map(Option::unwrap).collect())
    }
}
