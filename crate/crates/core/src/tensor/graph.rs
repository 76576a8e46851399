use std::sync::{Arc, Mutex, MutexGuard};

use super::ops::{self, Op};
use super::Tensor;
use crate::error::{Error, Result};

/// Append-only record of operations for one differentiation scope.
///
/// Create one per training step. Cloning is cheap and yields a handle to the
/// same record.
#[derive(Clone, Default)]
pub struct Graph {
    inner: Arc<Mutex<GraphInner>>,
}

#[derive(Default)]
struct GraphInner {
    nodes: Vec<Node>,
    generation: u64,
}

/// Value captured at record time, detached from the graph handle to avoid a
/// reference cycle.
#[derive(Clone)]
pub(crate) struct Saved {
    shape: Vec<usize>,
    data: Arc<[f64]>,
    id: Option<usize>,
}

struct Node {
    op: Op,
    inputs: Vec<Saved>,
    output: Saved,
    #[allow(dead_code)]
    generation: u64,
}

#[derive(Clone)]
pub(crate) struct NodeRef {
    pub(crate) graph: Graph,
    pub(crate) id: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Attaches a copy of `value` as a differentiable leaf.
    pub fn leaf(&self, value: &Tensor) -> Tensor {
        let saved = Saved {
            shape: value.shape().to_vec(),
            data: Arc::clone(value.data_arc()),
            id: None,
        };
        let id = self.push(Op::Leaf, Vec::new(), saved);
        Tensor::from_parts(
            value.shape().to_vec(),
            Arc::clone(value.data_arc()),
            Some(NodeRef {
                graph: self.clone(),
                id,
            }),
        )
    }

    pub fn len(&self) -> usize {
        self.lock().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of completed or in-flight backward passes over this graph.
    /// Nodes recorded by a backward pass carry the generation it ran under.
    pub fn generation(&self) -> u64 {
        self.lock().generation
    }

    pub fn same_as(&self, other: &Graph) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    fn lock(&self) -> MutexGuard<'_, GraphInner> {
        self.inner.lock().expect("graph mutex poisoned")
    }

    fn push(&self, op: Op, inputs: Vec<Saved>, mut output: Saved) -> usize {
        let mut inner = self.lock();
        let id = inner.nodes.len();
        output.id = Some(id);
        let generation = inner.generation;
        inner.nodes.push(Node {
            op,
            inputs,
            output,
            generation,
        });
        id
    }

    fn snapshot(&self, id: usize) -> (Op, Vec<Saved>, Saved) {
        let inner = self.lock();
        let node = &inner.nodes[id];
        (node.op.clone(), node.inputs.clone(), node.output.clone())
    }

    fn revive(&self, saved: &Saved, attached: bool) -> Tensor {
        let node = match (attached, saved.id) {
            (true, Some(id)) => Some(NodeRef {
                graph: self.clone(),
                id,
            }),
            _ => None,
        };
        Tensor::from_parts(saved.shape.clone(), Arc::clone(&saved.data), node)
    }
}

/// Produces the output tensor of an op, recording it when any input is attached.
pub(crate) fn record(
    op: Op,
    inputs: &[&Tensor],
    shape: Vec<usize>,
    data: Vec<f64>,
) -> Result<Tensor> {
    let mut graph: Option<&Graph> = None;
    for t in inputs {
        if let Some(node) = t.node() {
            match graph {
                None => graph = Some(&node.graph),
                Some(g) if g.same_as(&node.graph) => {}
                Some(_) => return Err(Error::GraphMismatch),
            }
        }
    }
    let data: Arc<[f64]> = data.into();
    let Some(graph) = graph else {
        return Ok(Tensor::from_parts(shape, data, None));
    };
    let saved_inputs = inputs
        .iter()
        .map(|t| Saved {
            shape: t.shape().to_vec(),
            data: Arc::clone(t.data_arc()),
            id: t.node().map(|n| n.id),
        })
        .collect();
    let output = Saved {
        shape: shape.clone(),
        data: Arc::clone(&data),
        id: None,
    };
    let id = graph.push(op, saved_inputs, output);
    Ok(Tensor::from_parts(
        shape,
        data,
        Some(NodeRef {
            graph: graph.clone(),
            id,
        }),
    ))
}

/// Gradients of a scalar `loss` with respect to each tensor in `wrt`.
///
/// With `create_graph` set, the backward computation is itself recorded and
/// the returned gradients stay attached, so they can be differentiated again.
/// A `wrt` tensor that the loss does not depend on structurally is an error;
/// a dependent tensor whose gradient vanishes gets zeros.
pub fn grad(loss: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    if loss.numel() != 1 {
        return Err(Error::NotScalar(loss.shape().to_vec()));
    }
    let Some(loss_node) = loss.node() else {
        return Err(Error::Unreachable(0));
    };
    let graph = loss_node.graph.clone();
    let mut targets = Vec::with_capacity(wrt.len());
    for (i, t) in wrt.iter().enumerate() {
        match t.node() {
            Some(n) if n.graph.same_as(&graph) => targets.push(n.id),
            Some(_) => return Err(Error::GraphMismatch),
            None => return Err(Error::Unreachable(i)),
        }
    }

    let n = loss_node.id + 1;
    let (ancestor, needs) = {
        let inner = graph.lock();
        let mut ancestor = vec![false; n];
        ancestor[n - 1] = true;
        for id in (0..n).rev() {
            if ancestor[id] {
                for input in &inner.nodes[id].inputs {
                    if let Some(j) = input.id {
                        ancestor[j] = true;
                    }
                }
            }
        }
        let mut depends = vec![false; n];
        for &t in &targets {
            if t < n {
                depends[t] = true;
            }
        }
        for id in 0..n {
            if !depends[id] {
                depends[id] = inner.nodes[id]
                    .inputs
                    .iter()
                    .any(|s| s.id.is_some_and(|j| depends[j]));
            }
        }
        let needs: Vec<bool> = ancestor
            .iter()
            .zip(&depends)
            .map(|(a, d)| *a && *d)
            .collect();
        (ancestor, needs)
    };
    for (i, &t) in targets.iter().enumerate() {
        if t >= n || !ancestor[t] {
            return Err(Error::Unreachable(i));
        }
    }

    graph.lock().generation += 1;

    let mut is_target = vec![false; n];
    for &t in &targets {
        is_target[t] = true;
    }
    let mut found: Vec<Option<Tensor>> = vec![None; n];
    let mut pending: Vec<Option<Tensor>> = vec![None; n];
    pending[n - 1] = Some(Tensor::full(loss.shape(), 1.0));

    for id in (0..n).rev() {
        if !needs[id] {
            continue;
        }
        let Some(g) = pending[id].take() else {
            continue;
        };
        if is_target[id] {
            found[id] = Some(g.clone());
        }
        let (op, inputs, output) = graph.snapshot(id);
        if matches!(op, Op::Leaf) {
            continue;
        }
        let input_needs: Vec<bool> = inputs
            .iter()
            .map(|s| s.id.is_some_and(|j| needs[j]))
            .collect();
        if !input_needs.iter().any(|b| *b) {
            continue;
        }
        let ids: Vec<Option<usize>> = inputs.iter().map(|s| s.id).collect();
        let inputs: Vec<Tensor> = inputs
            .iter()
            .map(|s| graph.revive(s, create_graph))
            .collect();
        let output = graph.revive(&output, create_graph);
        let g = if create_graph { g } else { g.detach() };
        let input_grads = ops::backward(&op, &inputs, &output, &g, &input_needs)?;
        for ((j, gi), need) in ids.into_iter().zip(input_grads).zip(input_needs) {
            let (Some(j), Some(gi), true) = (j, gi, need) else {
                continue;
            };
            pending[j] = Some(match pending[j].take() {
                Some(acc) => ops::add(&acc, &gi)?,
                None => gi,
            });
        }
    }

    Ok(targets
        .iter()
        .zip(wrt)
        .map(|(&t, w)| found[t].clone().unwrap_or_else(|| Tensor::zeros(w.shape())))
        .collect())
}
