use ndtensor::{Graph, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-30.0f64..30.0, rows * cols)
        .prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in (1usize..6, 1usize..9).prop_flat_map(|(r, c)| matrix(r, c))) {
        let mut g = Graph::new();
        let v = g.constant(x);
        let y = g.softmax(v).unwrap();
        let t = g.value(y);
        let n = t.shape()[1];
        for row in t.data().chunks(n) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardised(x in (1usize..5, 2usize..17).prop_flat_map(|(r, c)| matrix(r, c))) {
        let n = x.shape()[1];
        // The epsilon shrinks the variance by eps/(var+eps); keep that below 1e-6.
        prop_assume!(x.data().chunks(n).all(|row| {
            let mu = row.iter().sum::<f64>() / n as f64;
            row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64 > 10.0
        }));
        let mut g = Graph::new();
        let v = g.constant(x);
        let gain = g.constant(Tensor::filled(&[n], 1.0));
        let bias = g.constant(Tensor::zeros(&[n]));
        let y = g.layer_norm(v, gain, bias).unwrap();
        for row in g.value(y).data().chunks(n) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64;
            prop_assert!(mu.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6, "var {}", var);
        }
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot(
        logits in prop::collection::vec(-10.0f64..10.0, 2..8),
        pick in 0usize..8,
    ) {
        let target = pick % logits.len();
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(logits.clone()));
        let l = g.cross_entropy(x, &[target]).unwrap();
        g.backward(l).unwrap();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|v| (v - max).exp()).sum();
        for (i, gi) in g.grad(x).unwrap().iter().enumerate() {
            let p = (logits[i] - max).exp() / z - if i == target { 1.0 } else { 0.0 };
            prop_assert!((gi - p).abs() < 1e-10);
        }
    }
}
