//! Dense reverse-mode automatic differentiation.
//!
//! A [`Graph`] records tensor operations as they are evaluated. Gradients are
//! built by [`Graph::grad`] out of the same operations, so the result of a
//! backward pass is itself differentiable (double backpropagation), which is
//! what the gradient-norm training objective relies on.
//!
//! ```
//! use mrlab::autodiff::Graph;
//! use mrlab::Tensor64;
//!
//! let mut g = Graph::new();
//! let x = g.input(Tensor64::scalar(3.0)).unwrap();
//! let y = g.square(x).unwrap();
//! let dy = g.grad(y, &[x]).unwrap()[0];
//! assert_eq!(g.value(dy).item().unwrap(), 6.0);
//! ```

mod backward;
mod check;
mod graph;

pub use check::{central_difference, finite_diff_check};
pub(crate) use graph::apply_unary;
pub use graph::{softmax, Graph, NodeId, Unary};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type G = Graph<f64>;

    fn col(v: &[f64]) -> Tensor<f64> {
        Tensor::column(v.to_vec())
    }

    // ½ xᵀ A x for a column x.
    fn quad(g: &mut G, a: &Tensor<f64>, x: NodeId) -> NodeId {
        let a = g.constant(a.clone()).unwrap();
        let ax = g.matmul(a, x).unwrap();
        let xt = g.transpose(x).unwrap();
        let q = g.matmul(xt, ax).unwrap();
        g.scale(q, 0.5).unwrap()
    }

    fn diag21() -> Tensor<f64> {
        Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 1.0]).unwrap()
    }

    #[test]
    fn forward_examples() {
        let mut g = G::new();
        let x = g.input(Tensor::scalar(3.0)).unwrap();
        let y = g.square(x).unwrap();
        assert_eq!(g.value(y).item().unwrap(), 9.0);

        let z = g.input(Tensor::scalar(0.0)).unwrap();
        let sp = g.unary(Unary::Softplus, z).unwrap();
        assert!((g.value(sp).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);

        let x = g.input(col(&[1.0, 1.0])).unwrap();
        let q = quad(&mut g, &diag21(), x);
        assert_eq!(g.value(q).item().unwrap(), 1.5);
    }

    #[test]
    fn grad_examples() {
        let mut g = G::new();
        let x = g.input(Tensor::scalar(3.0)).unwrap();
        let y = g.square(x).unwrap();
        let d = g.grad(y, &[x]).unwrap()[0];
        assert_eq!(g.value(d).item().unwrap(), 6.0);

        let mut g = G::new();
        let x = g.input(col(&[1.0, 1.0])).unwrap();
        let q = quad(&mut g, &diag21(), x);
        let d = g.grad(q, &[x]).unwrap()[0];
        assert_eq!(g.value(d).data(), &[2.0, 1.0]);
    }

    #[test]
    fn gradient_of_gradient_norm_matches_central_differences() {
        // Oracle: ‖∇f‖² = ‖Ax‖² in closed form, differentiated numerically.
        let closed = |x: &[f64]| Ok((2.0 * x[0]).powi(2) + x[1].powi(2));
        let oracle = central_difference(closed, &[1.0, 1.0], 1e-5).unwrap();
        assert!((oracle[0] - 8.0).abs() < 1e-6 && (oracle[1] - 2.0).abs() < 1e-6);

        let mut g = G::new();
        let x = g.input(col(&[1.0, 1.0])).unwrap();
        let q = quad(&mut g, &diag21(), x);
        let gx = g.grad(q, &[x]).unwrap()[0];
        let n2 = g.norm_sq(gx).unwrap();
        let ggx = g.grad(n2, &[x]).unwrap()[0];
        for (a, o) in g.value(ggx).data().iter().zip(&oracle) {
            assert!((a - o).abs() < 1e-6, "{a} vs {o}");
        }
    }

    #[test]
    fn finite_diff_check_examples() {
        let err = finite_diff_check(|g, x| g.square(x), &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");

        let w = Tensor::row(vec![0.7, -1.3, 2.0]);
        let lin = |g: &mut G, x: NodeId| {
            let w = g.constant(w.clone())?;
            let p = g.matmul(w, x)?;
            g.sum(p)
        };
        let err = finite_diff_check(lin, &col(&[0.3, -2.0, 5.0]), 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");

        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, -0.5, 3.0]).unwrap();
        let norm_ax = |g: &mut G, x: NodeId| {
            let a = g.constant(a.clone())?;
            let ax = g.matmul(a, x)?;
            g.norm_sq(ax)
        };
        let err = finite_diff_check(norm_ax, &col(&[1.0, 1.0]), 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn finite_diff_check_rejects_bad_step() {
        let r = finite_diff_check(|g, x| g.square(x), &Tensor::scalar(1.0), 0.0);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    // Every op, composed into a scalar, against central differences at 100 points.
    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let unaries = [Unary::Softplus, Unary::Sigmoid, Unary::Tanh, Unary::Exp];
        let m = Tensor::matrix(3, 2, vec![0.4, -0.2, 0.1, 0.9, -0.7, 0.3]).unwrap();
        for trial in 0..100 {
            let p: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let point = Tensor::matrix(2, 3, p).unwrap();
            let f = unaries[trial % unaries.len()];
            let build = |g: &mut G, x: NodeId| {
                let mc = g.constant(m.clone())?;
                let h = g.matmul(x, mc)?; // 2x2
                let a = g.unary(f, h)?;
                let row = g.constant(Tensor::row(vec![0.5, -0.25]))?;
                let b = g.add_row(a, row)?;
                let s = g.softmax_rows(b)?;
                let l = g.logsumexp_rows(b)?;
                let lb = g.broadcast_cols(l, 2)?;
                let prod = g.mul(s, lb)?;
                let t = g.transpose(prod)?;
                let sr = g.sum_rows(t)?;
                let br = g.broadcast_rows(sr, 3)?;
                let sc = g.sum_cols(br)?;
                let d = g.sub(sc, sc)?;
                let e = g.add(sc, d)?;
                let n = g.neg(e)?;
                let sq = g.square(n)?;
                let shifted = g.add_scalar(sq, 2.0)?;
                let lg = g.unary(Unary::Log, shifted)?;
                let r = g.unary(Unary::Recip, shifted)?;
                let mix = g.add(lg, r)?;
                g.mean(mix)
            };
            let err = finite_diff_check(build, &point, 1e-5).unwrap();
            assert!(err < 1e-5, "trial {trial} ({f:?}): {err}");
        }
    }

    #[test]
    fn relu_has_zero_second_derivative() {
        let mut g = G::new();
        let x = g.input(Tensor::row(vec![0.5, -0.5, 2.0])).unwrap();
        let r = g.unary(Unary::Relu, x).unwrap();
        let s = g.norm_sq(r).unwrap();
        let d = g.grad(s, &[x]).unwrap()[0];
        assert_eq!(g.value(d).data(), &[1.0, 0.0, 4.0]);
        let w = g.constant(Tensor::row(vec![1.0, 1.0, 1.0])).unwrap();
        let wd = g.mul(d, w).unwrap();
        let t = g.sum(wd).unwrap();
        let dd = g.grad(t, &[x]).unwrap()[0];
        // d/dx of 2·relu(x) is 2·step(x); the Step factor itself is not differentiated.
        assert_eq!(g.value(dd).data(), &[2.0, 0.0, 2.0]);
    }

    #[test]
    fn grad_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let p = Tensor::column((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let (alpha, beta) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let mut g = G::new();
            let x = g.input(p).unwrap();
            let f = {
                let t = g.unary(Unary::Tanh, x).unwrap();
                g.norm_sq(t).unwrap()
            };
            let h = {
                let s = g.unary(Unary::Softplus, x).unwrap();
                g.sum(s).unwrap()
            };
            let af = g.scale(f, alpha).unwrap();
            let bh = g.scale(h, beta).unwrap();
            let comb = g.add(af, bh).unwrap();
            let gc = g.grad(comb, &[x]).unwrap()[0];
            let gf = g.grad(f, &[x]).unwrap()[0];
            let gh = g.grad(h, &[x]).unwrap()[0];
            for i in 0..4 {
                let want = alpha * g.value(gf).data()[i] + beta * g.value(gh).data()[i];
                assert!((g.value(gc).data()[i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn second_order_quadratic_identity() {
        // f = ½ xᵀ A x with symmetric A; ∇‖∇f‖² = 2AᵀAx.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let b: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut a = vec![0.0; 9];
            for i in 0..3 {
                for j in 0..3 {
                    a[i * 3 + j] = b[i * 3 + j] + b[j * 3 + i];
                }
            }
            let a = Tensor::matrix(3, 3, a).unwrap();
            let xv = Tensor::column((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let want = a
                .transpose()
                .matmul(&a)
                .unwrap()
                .matmul(&xv)
                .unwrap()
                .map(|v| 2.0 * v);
            let mut g = G::new();
            let x = g.input(xv).unwrap();
            let q = quad(&mut g, &a, x);
            let gx = g.grad(q, &[x]).unwrap()[0];
            let n2 = g.norm_sq(gx).unwrap();
            let ggx = g.grad(n2, &[x]).unwrap()[0];
            for (u, v) in g.value(ggx).data().iter().zip(want.data()) {
                assert!((u - v).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn replay_is_bit_identical_and_tracks_new_inputs() {
        let mut g = G::new();
        let x = g.input(Tensor::row(vec![0.3, -0.2])).unwrap();
        let t = g.unary(Unary::Tanh, x).unwrap();
        let s = g.norm_sq(t).unwrap();
        let first = g.forward_node(s, &[]).unwrap();
        let second = g.forward_node(s, &[]).unwrap();
        assert_eq!(first.data()[0].to_bits(), second.data()[0].to_bits());
        assert_eq!(first.data()[0].to_bits(), g.value(s).data()[0].to_bits());
        let moved = g
            .forward_node(s, &[(x, Tensor::row(vec![0.0, 0.0]))])
            .unwrap();
        assert_eq!(moved.item().unwrap(), 0.0);
    }

    #[test]
    fn error_paths() {
        let mut g = G::new();
        let x = g.input(Tensor::row(vec![1.0, 2.0])).unwrap();
        let y = g.input(Tensor::row(vec![1.0, 2.0, 3.0])).unwrap();
        assert!(matches!(g.add(x, y), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(
            g.grad(x, &[x]),
            Err(Error::NonScalarOutput { .. })
        ));
        let s = g.sum(x).unwrap();
        assert!(matches!(g.grad(s, &[y]), Err(Error::Disconnected { .. })));
        let z = g.grad_or_zeros(s, &[y]).unwrap()[0];
        assert_eq!(g.value(z).data(), &[0.0, 0.0, 0.0]);
        let neg = g.neg(x).unwrap();
        assert!(matches!(
            g.unary(Unary::Log, neg),
            Err(Error::NonFinite { .. })
        ));
        assert!(matches!(
            g.forward(&[(x, Tensor::row(vec![1.0]))]),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(g.input(Tensor::scalar(f64::NAN)).is_err());
    }

    #[test]
    fn works_in_single_precision() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::scalar(3.0f32)).unwrap();
        let y = g.square(x).unwrap();
        let d = g.grad(y, &[x]).unwrap()[0];
        assert_eq!(g.value(d).item().unwrap(), 6.0f32);
    }
}
