use ndtensor::{finite_difference_check, Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduce any tensor to a scalar with fixed random weights so that every
/// output coordinate influences the check.
fn readout(g: &mut Graph<'static>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, g.shape(x));
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

fn check(
    name: &str,
    f: impl Fn(&mut Graph<'static>, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    tol: f64,
) {
    let report = finite_difference_check(f, inputs, STEP, tol).unwrap();
    assert!(report.passed(), "{name}: {report:?}");
}

#[test]
fn softmax_after_matmul_4x4() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [random(&mut rng, &[4, 4]), random(&mut rng, &[4, 4])];
    check(
        "softmax∘matmul",
        |g, x| {
            let m = g.matmul(x[0], x[1])?;
            let s = g.softmax(m)?;
            readout(g, s, 9)
        },
        &inputs,
        1e-6,
    );
}

#[test]
fn layer_norm_length_8() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = [
        random(&mut rng, &[8]),
        random(&mut rng, &[8]),
        random(&mut rng, &[8]),
    ];
    check(
        "layer_norm",
        |g, x| {
            let y = g.layer_norm(x[0], x[1], x[2])?;
            readout(g, y, 4)
        },
        &inputs,
        1e-5,
    );
}

#[test]
fn every_primitive_passes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 2]);
    let v = random(&mut rng, &[4]);
    let tol = 1e-6;

    check("matmul", |g, x| { let y = g.matmul(x[0], x[1])?; readout(g, y, 1) }, &[a.clone(), b.clone()], tol);
    check("matvec", |g, x| { let y = g.matmul(x[0], x[1])?; readout(g, y, 1) }, &[a.clone(), v.clone()], tol);
    check("vecmat", |g, x| { let y = g.matmul(x[0], x[1])?; readout(g, y, 1) }, &[v.clone(), b.clone()], tol);
    check("transpose", |g, x| { let y = g.transpose(x[0])?; readout(g, y, 2) }, &[a.clone()], tol);
    check("add", |g, x| { let y = g.add(x[0], x[1])?; readout(g, y, 3) }, &[a.clone(), a.clone()], tol);
    check("add_bias", |g, x| { let y = g.add_bias(x[0], x[1])?; readout(g, y, 3) }, &[a.clone(), v.clone()], tol);
    check("mul", |g, x| { let y = g.mul(x[0], x[1])?; readout(g, y, 3) }, &[a.clone(), random(&mut rng, &[3, 4])], tol);
    check("scale", |g, x| { let y = g.scale(x[0], -2.5); readout(g, y, 3) }, &[a.clone()], tol);
    check("mean0", |g, x| { let y = g.mean(x[0], 0)?; readout(g, y, 4) }, &[a.clone()], tol);
    check("mean1", |g, x| { let y = g.mean(x[0], 1)?; readout(g, y, 4) }, &[a.clone()], tol);
    check("mean_vec", |g, x| g.mean(x[0], 0), &[v.clone()], tol);
    check("softmax_rows", |g, x| { let y = g.softmax(x[0])?; readout(g, y, 5) }, &[a.clone()], tol);
    check("tanh", |g, x| { let y = g.tanh(x[0]); readout(g, y, 6) }, &[a.clone()], tol);
    check("selu", |g, x| { let y = g.selu(x[0]); readout(g, y, 6) }, &[a.clone()], tol);
    check("gelu", |g, x| { let y = g.gelu(x[0]); readout(g, y, 6) }, &[a.clone()], tol);
    check(
        "layer_norm_rows",
        |g, x| { let y = g.layer_norm(x[0], x[1], x[2])?; readout(g, y, 7) },
        &[a.clone(), v.clone(), random(&mut rng, &[4])],
        1e-5,
    );
    check("cross_entropy", |g, x| g.cross_entropy(x[0], &[1, 3, 0]), &[a.clone()], tol);
    check("cross_entropy_vec", |g, x| g.cross_entropy(x[0], &[2]), &[v.clone()], tol);
    check("concat", |g, x| { let y = g.concat(&[x[0], x[1], x[0]])?; readout(g, y, 8) }, &[a.clone(), a.clone()], tol);
    check("concat_scalars", |g, x| {
        let d = g.matmul(x[0], x[0])?;
        let e = g.sum(x[0]);
        let y = g.concat(&[d, e, d])?;
        readout(g, y, 8)
    }, &[v.clone()], tol);
    check("stack", |g, x| { let y = g.stack(&[x[0], x[1], x[0]])?; readout(g, y, 9) }, &[v.clone(), random(&mut rng, &[4])], tol);
    check("rows", |g, x| { let y = g.rows(x[0], &[2, 0, 2])?; readout(g, y, 10) }, &[a.clone()], tol);
    check("slice_cols", |g, x| { let y = g.slice_cols(x[0], 1, 3)?; readout(g, y, 11) }, &[a.clone()], tol);
    check("reshape", |g, x| { let y = g.reshape(x[0], vec![2, 6])?; readout(g, y, 12) }, &[a.clone()], tol);
}

#[test]
fn dropout_gradient_uses_the_same_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random(&mut rng, &[5, 3]);
    check(
        "dropout",
        |g, x| {
            let mut r = ChaCha8Rng::seed_from_u64(77);
            let y = g.dropout(x[0], 0.3, &mut r)?;
            readout(g, y, 13)
        },
        &[a],
        1e-6,
    );
}

#[test]
fn shared_subexpression_graph() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&mut rng, &[3, 3]);
    check(
        "shared",
        |g, x| {
            let t = g.tanh(x[0]);
            let m = g.matmul(t, x[0])?;
            let s = g.add(m, t)?;
            let n = g.selu(s);
            readout(g, n, 14)
        },
        &[a],
        1e-6,
    );
}
