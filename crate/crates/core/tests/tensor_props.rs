use fogda_core::tensor::{Tape, Tensor};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n = shape.iter().product::<usize>();
    prop::collection::vec(-10.0f64..10.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn conv_forward(x: &Tensor, k: &Tensor, b: &Tensor) -> Tensor {
    let mut tape = Tape::inference();
    let (x, k, b) = (tape.leaf(x.clone()), tape.leaf(k.clone()), tape.leaf(b.clone()));
    let y = tape.conv2d(x, k, b, 1, 1).unwrap();
    let y = tape.sigmoid(y);
    tape.value(y).clone()
}

proptest! {
    #[test]
    fn forward_is_bitwise_deterministic(x in tensor(vec![1, 2, 6, 6]), k in tensor(vec![3, 2, 3, 3]), b in tensor(vec![3])) {
        let a = conv_forward(&x, &k, &b);
        let c = conv_forward(&x, &k, &b);
        prop_assert!(a.data().iter().zip(c.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn grl_forward_is_bitwise_identity(x in tensor(vec![2, 3, 4]), coeff in -5.0f64..5.0) {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let y = tape.grl(v, coeff);
        prop_assert!(tape.value(y).data().iter().zip(x.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn fan_out_accumulation_is_order_independent(x in tensor(vec![2, 5])) {
        // x feeds three consumers; summing them in two orders must agree
        let grad = |order: [usize; 3]| {
            let mut tape = Tape::new();
            let v = tape.leaf(x.clone());
            let branches = [tape.sigmoid(v), tape.scale(v, 3.0), tape.exp(v)];
            let means: Vec<_> = branches.iter().map(|&b| tape.mean(b)).collect();
            let terms: Vec<_> = order.iter().map(|&i| (means[i], 1.0 + i as f64)).collect();
            let loss = tape.weighted_sum(&terms).unwrap();
            tape.backward(loss).unwrap().wrt(v)
        };
        let a = grad([0, 1, 2]);
        let b = grad([2, 0, 1]);
        prop_assert!(a.max_abs_diff(&b) <= 1e-12);
    }
}
