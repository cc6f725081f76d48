//! Dense tensors and a reverse-mode tape over the operations the network uses.

pub mod checkpoint;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use params::{Graph, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let a = t.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let i = t.constant(Tensor::eye(2));
        let ia = t.matmul(i, a).unwrap();
        assert_eq!(t.value(ia), t.value(a));
        let col = t.constant(mat(&[&[0.0], &[1.0]]));
        let p = t.matmul(a, col).unwrap();
        assert_eq!(t.value(p).data(), &[2.0, 4.0]);
        assert!(t.matmul(col, col).is_err());
    }

    #[test]
    fn identity_associativity_is_bitwise() {
        let mut t = Tape::new();
        let a = t.constant(mat(&[&[0.1, 0.7, -0.3], &[1.9, -2.2, 0.4]]));
        let b = t.constant(mat(&[&[0.5, 1.1], &[-0.6, 0.3], &[2.5, 0.01]]));
        let i = t.constant(Tensor::eye(3));
        let ai = t.matmul(a, i).unwrap();
        let lhs = t.matmul(ai, b).unwrap();
        let rhs = t.matmul(a, b).unwrap();
        assert_eq!(t.value(lhs).data(), t.value(rhs).data());
    }

    #[test]
    fn elementwise_examples() {
        let mut t = Tape::new();
        let f = t.constant(Tensor::vector(vec![1.5, -2.0, 0.25]));
        let one = t.constant(Tensor::scalar(1.0));
        let m = t.mul(f, one).unwrap();
        assert_eq!(t.value(m), t.value(f));
        let z = t.constant(Tensor::scalar(0.0));
        let e = t.exp(z).unwrap();
        assert_eq!(t.value(e).item(), 1.0);
        let s = t.sigmoid(z).unwrap();
        assert_eq!(t.value(s).item(), 0.5);
        let bad = t.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(t.add(f, bad).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![3.3, 3.3]));
        let s = t.softmax(x).unwrap();
        assert_eq!(t.value(s).data(), &[0.5, 0.5]);
        let x = t.constant(Tensor::vector(vec![0.0, 3f64.ln()]));
        let s = t.softmax(x).unwrap();
        assert!((t.value(s).data()[0] - 0.25).abs() < 1e-15);
        assert!((t.value(s).data()[1] - 0.75).abs() < 1e-15);
        let empty = t.constant(Tensor::vector(vec![]));
        assert!(matches!(t.softmax(empty), Err(crate::Error::Domain(_))));
    }

    #[test]
    fn spatial_examples() {
        let mut t = Tape::new();
        let x = t.constant(
            Tensor::new(vec![2, 4, 4], (0..32).map(|v| f64::from(v) * 0.5).collect()).unwrap(),
        );
        let mut k = Tensor::zeros(&[2, 2, 3, 3]);
        k.set(&[0, 0, 1, 1], 1.0);
        k.set(&[1, 1, 1, 1], 1.0);
        let k = t.constant(k);
        let y = t.conv2d(x, k, None, 1, 1).unwrap();
        assert_eq!(t.value(y), t.value(x));

        let c = t.constant(Tensor::full(&[3, 6, 6], 2.5));
        let p = t.avgpool2x2(c).unwrap();
        assert_eq!(t.value(p).shape(), &[3, 3, 3]);
        assert!(t.value(p).data().iter().all(|&v| v == 2.5));
        let u = t.upsample2x(p).unwrap();
        assert_eq!(t.value(u).shape(), &[3, 6, 6]);
        assert!(t.value(u).data().iter().all(|&v| v == 2.5));

        let big = t.constant(Tensor::zeros(&[2, 2, 5, 5]));
        assert!(t.conv2d(x, big, None, 1, 0).is_err());
    }

    #[test]
    fn odd_pooling_replicates_high_side() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 3, 1], vec![1.0, 2.0, 7.0]).unwrap());
        let p = t.avgpool2x2(x).unwrap();
        assert_eq!(t.value(p).shape(), &[1, 2, 1]);
        assert_eq!(t.value(p).data(), &[1.5, 7.0]);
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::vector(vec![0.3, -1.2, 4.0]));
        let s = t.sum(w).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let w = t.leaf(Tensor::vector(vec![0.3, -1.2, 4.0]));
        let sq = t.mul(w, w).unwrap();
        let s = t.sum(sq).unwrap();
        let half = t.scale(s, 0.5).unwrap();
        let g = t.backward(half).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[0.3, -1.2, 4.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let e = t.exp(w).unwrap();
        assert!(matches!(t.backward(e), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn leaf_used_twice_accumulates() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::scalar(3.0));
        let a = t.mul(w, w).unwrap();
        let b = t.add(a, w).unwrap();
        let g = t.backward(b).unwrap();
        assert_eq!(g.get(w).unwrap().item(), 7.0);
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(1000.0));
        assert!(matches!(t.exp(x), Err(crate::Error::NonFinite(_))));
        let z = t.constant(Tensor::scalar(0.0));
        assert!(t.recip(z).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::scalar(2.0));
        let w = t.leaf(Tensor::scalar(5.0));
        let y = t.mul(c, w).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(w).unwrap().item(), 2.0);
    }
}
