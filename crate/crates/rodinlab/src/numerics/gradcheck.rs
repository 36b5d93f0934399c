//! Central finite-difference gradient checking against the tape's backward
//! pass. Exposed as library surface so integration suites can drive the same
//! checker over composed models.

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use super::Real;

/// Step used throughout the test suites.
pub const FD_STEP: Real = 1e-5;

/// |a - b| / max(|a|, |b|, floor). The floor keeps near-zero gradients from
/// amplifying finite-difference noise into spurious relative error.
pub fn rel_err(a: Real, b: Real, floor: Real) -> Real {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Estimate d(loss)/d(param) by central differences, re-running `build` on
/// perturbed copies of `params`, and compare against the analytic backward
/// pass. Returns the worst relative error over every parameter element.
///
/// `build` must register its parameters in order via `Graph::param` from the
/// given tensors and return a scalar loss node.
pub fn max_grad_rel_err(
    params: &[Tensor],
    h: Real,
    build: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId,
) -> Real {
    let mut g = Graph::checked();
    let ids: Vec<NodeId> = params
        .iter()
        .map(|t| g.param(t.clone()).expect("param"))
        .collect();
    let loss = build(&mut g, &ids);
    let mut grads = g.backward(loss).expect("backward");
    let analytic: Vec<Tensor> = ids
        .iter()
        .map(|&id| {
            grads
                .take(id)
                .unwrap_or_else(|| Tensor::zeros(g.value(id).shape()))
        })
        .collect();

    let eval = |ps: &[Tensor]| -> Real {
        let mut g = Graph::fast();
        let ids: Vec<NodeId> = ps
            .iter()
            .map(|t| g.param(t.clone()).expect("param"))
            .collect();
        let loss = build(&mut g, &ids);
        g.value(loss).item()
    };

    let mut ps: Vec<Tensor> = params.to_vec();
    let mut worst: Real = 0.0;
    for pi in 0..ps.len() {
        for ei in 0..ps[pi].len() {
            let orig = ps[pi].data()[ei];
            ps[pi].data_mut()[ei] = orig + h;
            let up = eval(&ps);
            ps[pi].data_mut()[ei] = orig - h;
            let dn = eval(&ps);
            ps[pi].data_mut()[ei] = orig;
            let fd = (up - dn) / (2.0 * h);
            worst = worst.max(rel_err(analytic[pi].data()[ei], fd, 1e-3));
        }
    }
    worst
}
