use super::graph::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Compares the reverse-mode gradient of a scalar graph function with central
/// differences and returns the largest per-coordinate relative error
/// `|ad − cd| / (|cd| + 1e-12)`.
///
/// `build` receives a fresh graph and the input node and must return a
/// single-element output node.
pub fn finite_diff_check<T, F>(build: F, point: &Tensor<T>, h: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, NodeId) -> Result<NodeId>,
{
    if !(h > T::zero()) {
        return Err(Error::InvalidArgument(
            "finite difference step must be positive".into(),
        ));
    }
    let mut g = Graph::new();
    let x = g.input(point.clone())?;
    let y = build(&mut g, x)?;
    let gx = g.grad(y, &[x])?[0];
    let ad = g.value(gx).clone();

    let mut worst = T::zero();
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + h;
        let fp = g.forward_node(y, &[(x, probe.clone())])?.item()?;
        probe.data_mut()[i] = x0 - h;
        let fm = g.forward_node(y, &[(x, probe.clone())])?.item()?;
        probe.data_mut()[i] = x0;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_diff_check",
            });
        }
        let cd = (fp - fm) / (h + h);
        let rel = (ad.data()[i] - cd).abs() / (cd.abs() + T::lit(1e-12));
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Central-difference gradient of an arbitrary scalar function.
pub fn central_difference<T: Scalar>(
    f: impl Fn(&[T]) -> Result<T>,
    x: &[T],
    h: T,
) -> Result<Vec<T>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let x0 = x[i];
        probe[i] = x0 + h;
        let fp = f(&probe)?;
        probe[i] = x0 - h;
        let fm = f(&probe)?;
        probe[i] = x0;
        out.push((fp - fm) / (h + h));
    }
    Ok(out)
}
