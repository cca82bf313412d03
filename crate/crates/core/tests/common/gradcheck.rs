use statrefine::tensor::{Graph, Tensor, Var};

/// Checks autodiff gradients of `build` against central finite differences
/// for every element of every input.
pub fn check_gradients(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> f64 {
    check_gradients_step(inputs, build, 1e-3)
}

pub fn check_gradients_step(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
    h: f64,
) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).unwrap();
    let eval = |ins: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        let l = build(&mut g, &vars);
        g.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for (which, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[which]).expect("gradient present");
        assert_eq!(analytic.shape(), t.shape());
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2);
            worst = worst.max(rel);
        }
    }
    worst
}
