use std::collections::{HashMap, HashSet};

use crate::error::{Result, TensorError};
use crate::ops::elementwise;
use crate::tensor::{with_grad_mode, Tensor};

/// Gradients returned by [`grad`], one per requested tensor and in the same order.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Tensor>,
    create_graph: bool,
}

impl Gradients {
    /// Whether the gradients were recorded as differentiable graph nodes.
    pub fn has_graph(&self) -> bool {
        self.create_graph
    }

    pub fn as_slice(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn into_vec(self) -> Vec<Tensor> {
        self.grads
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl std::ops::Index<usize> for Gradients {
    type Output = Tensor;
    fn index(&self, i: usize) -> &Tensor {
        &self.grads[i]
    }
}

/// Reverse-mode gradient of the scalar `loss` with respect to each tensor in `wrt`.
///
/// Tensors that `loss` does not depend on get a zero gradient of matching
/// shape. With `create_graph`, the backward pass is itself recorded, so the
/// returned gradients can be differentiated again.
pub fn grad(loss: &Tensor, wrt: &[Tensor], create_graph: bool) -> Result<Gradients> {
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss(loss.shape().to_vec()));
    }
    let targets: HashMap<usize, usize> = wrt.iter().enumerate().map(|(i, t)| (t.id(), i)).collect();
    let order = topo_order(loss, &targets);

    let mut found: Vec<Option<Tensor>> = vec![None; wrt.len()];
    if !order.is_empty() {
        with_grad_mode(create_graph, || {
            let mut pending: HashMap<usize, Tensor> = HashMap::new();
            pending.insert(loss.id(), Tensor::ones(loss.shape()));
            for node in order.iter().rev() {
                let Some(g) = pending.remove(&node.id()) else {
                    continue;
                };
                if let Some(&slot) = targets.get(&node.id()) {
                    found[slot] = Some(g.clone());
                }
                let Some(gf) = node.0.grad_fn.as_ref() else {
                    continue;
                };
                let needs: Vec<bool> = gf.inputs.iter().map(|t| order_contains(&order, t)).collect();
                if !needs.iter().any(|&b| b) {
                    continue;
                }
                let input_grads = gf.rule.backward(&gf.inputs, &g, &needs);
                for ((input, ig), need) in gf.inputs.iter().zip(input_grads).zip(&needs) {
                    let (Some(ig), true) = (ig, *need) else {
                        continue;
                    };
                    debug_assert_eq!(ig.shape(), input.shape(), "{}", gf.rule.name());
                    let acc = match pending.remove(&input.id()) {
                        Some(prev) => elementwise::add(&prev, &ig),
                        None => ig,
                    };
                    pending.insert(input.id(), acc);
                }
            }
        });
    }
    // Repeated entries in `wrt` share one slot in `targets`.
    for (i, t) in wrt.iter().enumerate() {
        if found[i].is_none() {
            if let Some(&slot) = targets.get(&t.id()) {
                found[i] = found[slot].clone();
            }
        }
    }
    let grads = wrt
        .iter()
        .zip(found)
        .map(|(t, g)| g.unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok(Gradients { grads, create_graph })
}

fn order_contains(order: &TopoOrder, t: &Tensor) -> bool {
    order.relevant.contains(&t.id())
}

/// Nodes that require grad, lie on a path from `loss` back to some target,
/// in topological order (inputs before outputs).
struct TopoOrder {
    nodes: Vec<Tensor>,
    relevant: HashSet<usize>,
}

impl TopoOrder {
    fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
    fn iter(&self) -> std::slice::Iter<'_, Tensor> {
        self.nodes.iter()
    }
}

fn topo_order(loss: &Tensor, targets: &HashMap<usize, usize>) -> TopoOrder {
    let mut nodes = Vec::new();
    let mut relevant = HashSet::new();
    if !loss.requires_grad() {
        return TopoOrder { nodes, relevant };
    }
    // Iterative post-order DFS; `visited` marks nodes already expanded.
    let mut visited: HashSet<usize> = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(loss.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            let reaches_target = targets.contains_key(&t.id())
                || t.0
                    .grad_fn
                    .as_ref()
                    .is_some_and(|gf| gf.inputs.iter().any(|i| relevant.contains(&i.id())));
            if reaches_target {
                relevant.insert(t.id());
                nodes.push(t);
            }
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(gf) = t.0.grad_fn.as_ref() {
            for input in gf.inputs.iter().rev() {
                if input.requires_grad() && !visited.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    TopoOrder { nodes, relevant }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: &[f64]) -> Tensor {
        Tensor::new(&[v.len()], v.to_vec()).unwrap().leaf_with_grad(true)
    }

    #[test]
    fn quadratic() {
        let theta = param(&[1.0, -2.0]);
        let loss = theta.mul(&theta).unwrap().sum();
        let g = grad(&loss, &[theta], false).unwrap();
        assert_eq!(g[0].data(), &[2.0, -4.0]);
        assert!(!g.has_graph());
        assert!(g[0].is_leaf());
    }

    #[test]
    fn unreachable_parameter_gets_zeros() {
        let a = param(&[1.0]);
        let b = Tensor::zeros(&[2, 3]).leaf_with_grad(true);
        let loss = a.scale(3.0).sum();
        let g = grad(&loss, &[a, b], false).unwrap();
        assert_eq!(g[0].data(), &[3.0]);
        assert_eq!(g[1].shape(), &[2, 3]);
        assert!(g[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let a = param(&[1.0, 2.0]);
        assert!(matches!(grad(&a, std::slice::from_ref(&a), false), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn shared_subexpression_counted_once_per_path() {
        // y = s * s with s = a + a; dy/da = 2 s * 2 = 8a.
        let a = param(&[1.5]);
        let s = a.add(&a).unwrap();
        let y = s.mul(&s).unwrap().sum();
        let g = grad(&y, &[a], false).unwrap();
        assert_eq!(g[0].data(), &[12.0]);
    }

    #[test]
    fn second_order_through_unrolled_step() {
        // theta1 = theta0 - eta * d/dtheta (theta^2 / 2); L = theta1^2 / 2.
        let theta0 = param(&[2.0]);
        let inner = theta0.mul(&theta0).unwrap().sum().scale(0.5);
        let g = grad(&inner, std::slice::from_ref(&theta0), true).unwrap();
        assert!(g.has_graph());
        let theta1 = theta0.sub_scaled(&g[0], 0.1).unwrap();
        let outer = theta1.mul(&theta1).unwrap().sum().scale(0.5);
        let meta = grad(&outer, &[theta0], false).unwrap();
        assert!((meta[0].item() - 1.62).abs() < 1e-12);
    }

    #[test]
    fn gradient_wrt_intermediate() {
        let a = param(&[3.0]);
        let b = a.scale(2.0);
        let loss = b.mul(&b).unwrap().sum();
        let g = grad(&loss, &[b.clone(), a], false).unwrap();
        assert_eq!(g[0].data(), &[12.0]);
        assert_eq!(g[1].data(), &[24.0]);
    }

    #[test]
    fn duplicate_wrt_entries() {
        let a = param(&[3.0]);
        let loss = a.mul(&a).unwrap().sum();
        let g = grad(&loss, &[a.clone(), a], false).unwrap();
        assert_eq!(g[0].data(), &[6.0]);
        assert_eq!(g[1].data(), &[6.0]);
    }
}
