use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::volume::Dims;

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Builds `sum(probe * f(inputs))` and compares every input gradient against
/// central differences.
fn check(inputs: Vec<Tensor<f64>>, tol: f64, f: impl Fn(&Graph<f64>, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let probe_shape = {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        g.shape(f(&g, &vars))
    };
    let probe = rand_tensor(&probe_shape, -1.0, 1.0, &mut rng);
    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let y = g.value(f(&g, &vars));
        y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    };
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let y = f(&g, &vars);
    let p = g.constant(probe.clone());
    let l = g.sum(g.mul(y, p));
    let grads = g.backward(l);
    let h = 1e-6;
    for (which, t) in inputs.iter().enumerate() {
        let an = grads.wrt(vars[which]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for i in 0..t.len() {
            let mut ins = inputs.clone();
            ins[which].data_mut()[i] += h;
            let fp = eval(&ins);
            ins[which].data_mut()[i] -= 2.0 * h;
            let fm = eval(&ins);
            let fd = (fp - fm) / (2.0 * h);
            let a = an.data()[i];
            assert!(
                (fd - a).abs() <= tol * (1.0 + fd.abs()),
                "input {which} index {i}: numeric {fd} analytic {a}"
            );
        }
    }
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&[3, 4], -2.0, 2.0, &mut rng);
    let b = rand_tensor(&[3, 4], -2.0, 2.0, &mut rng);
    check(vec![a.clone(), b.clone()], 1e-6, |g, v| g.mul(v[0], v[1]));
    check(vec![a.clone(), b.clone()], 1e-6, |g, v| g.lincomb(&[(v[0], 0.5), (v[1], -2.0)]));
    check(vec![a.clone()], 1e-6, |g, v| g.sigmoid(v[0]));
    check(vec![a.clone()], 1e-6, |g, v| g.gelu(v[0]));
    check(vec![a.clone()], 1e-6, |g, v| g.leaky_relu(v[0], 0.2));
}

#[test]
fn linear_and_layout_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&[6, 4], -1.0, 1.0, &mut rng);
    let w = rand_tensor(&[4, 5], -1.0, 1.0, &mut rng);
    let b = rand_tensor(&[5], -1.0, 1.0, &mut rng);
    check(vec![x.clone(), w, b], 1e-6, |g, v| g.linear(v[0], v[1], Some(v[2])));
    let y = rand_tensor(&[6, 3], -1.0, 1.0, &mut rng);
    check(vec![x.clone(), y.clone()], 1e-6, |g, v| g.concat_cols(&[v[0], v[1]]));
    let table = rand_tensor(&[8, 4], -1.0, 1.0, &mut rng);
    check(vec![x.clone(), table], 1e-6, |g, v| g.add_rows(v[0], v[1], 2, 4));
    let z = rand_tensor(&[4, 4], -1.0, 1.0, &mut rng);
    check(vec![x.clone(), z], 1e-6, |g, v| {
        let s = g.stack_sequences(v[0], v[1], 2);
        let t = g.slice_sequence(s, 2, 1, 3);
        g.gelu(t)
    });
    let grid = rand_tensor(&[2, 3, 2, 2, 1], -1.0, 1.0, &mut rng);
    check(vec![grid.clone()], 1e-6, |g, v| {
        let t = g.grid_to_tokens(v[0]);
        let t = g.gelu(t);
        g.tokens_to_grid(t, 2, Dims::new(1, 2, 2))
    });
    let other = rand_tensor(&[2, 2, 2, 2, 1], -1.0, 1.0, &mut rng);
    check(vec![grid.clone(), other], 1e-6, |g, v| {
        let c = g.concat_channels(&[v[0], v[1]]);
        let s = g.slice_channels(c, 2, 2);
        g.sigmoid(s)
    });
    check(vec![grid.clone()], 1e-6, |g, v| g.global_avg_pool(v[0]));
    check(vec![grid], 1e-6, |g, v| g.upsample_nearest(v[0], Dims::new(3, 4, 3)));
}

#[test]
fn normalization_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[2, 3, 2, 2, 2], -1.0, 1.0, &mut rng);
    let gam = rand_tensor(&[3], 0.5, 1.5, &mut rng);
    let bet = rand_tensor(&[3], -1.0, 1.0, &mut rng);
    check(vec![x.clone(), gam.clone(), bet.clone()], 1e-5, |g, v| {
        g.batch_norm(v[0], v[1], v[2], None).0
    });
    let rm = rand_tensor(&[3], -0.2, 0.2, &mut rng);
    let rv = rand_tensor(&[3], 0.5, 1.5, &mut rng);
    check(vec![x, gam, bet], 1e-6, move |g, v| {
        g.batch_norm(v[0], v[1], v[2], Some((&rm, &rv))).0
    });
    let t = rand_tensor(&[5, 6], -1.0, 1.0, &mut rng);
    let lg = rand_tensor(&[6], 0.5, 1.5, &mut rng);
    let lb = rand_tensor(&[6], -1.0, 1.0, &mut rng);
    check(vec![t, lg, lb], 1e-5, |g, v| g.layer_norm(v[0], v[1], v[2]));
}

#[test]
fn attention_gradients_and_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = rand_tensor(&[6, 4], -1.0, 1.0, &mut rng);
    let k = rand_tensor(&[6, 4], -1.0, 1.0, &mut rng);
    let v = rand_tensor(&[6, 4], -1.0, 1.0, &mut rng);
    check(vec![q.clone(), k.clone(), v.clone()], 1e-6, |g, x| {
        g.attention(x[0], x[1], x[2], 2, 2, 0.7).0
    });
    let g = Graph::new();
    let (_, probs) = g.attention(g.constant(q), g.constant(k), g.constant(v), 2, 2, 0.7);
    for row in probs.data().chunks_exact(3) {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn spatial_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dims = Dims::new(4, 3, 3);
    let src = rand_tensor(&dims.shape(2, 2), -1.0, 1.0, &mut rng);
    let disp = rand_tensor(&dims.shape(2, 3), -0.9, 0.9, &mut rng);
    check(vec![src, disp.clone()], 1e-5, |g, v| g.warp_linear(v[0], v[1]));
    let p = rand_tensor(&[2, 12], -0.3, 0.3, &mut rng);
    check(vec![p], 1e-6, move |g, v| g.affine_displacement(v[0], dims));
    let vel = disp.map(|x| x * 0.5);
    check(vec![vel], 1e-5, |g, v| g.exponentiate(v[0], 3));
}

#[test]
fn loss_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let dims = Dims::new(4, 4, 3);
    let f = rand_tensor(&dims.shape(2, 1), 0.0, 1.0, &mut rng);
    let w = rand_tensor(&dims.shape(2, 1), 0.0, 1.0, &mut rng);
    check(vec![f.clone(), w.clone()], 1e-5, |g, v| g.lncc(v[0], v[1], 3, 1e-5));
    let u = rand_tensor(&dims.shape(2, 3), -1.0, 1.0, &mut rng);
    check(vec![u], 1e-6, |g, v| g.smoothness(v[0]));
    let fm = f.map(|x| if x > 0.5 { 1.0 } else { 0.0 });
    let fm2 = fm.clone();
    check(vec![w], 1e-6, move |g, v| {
        let c = g.constant(fm2.clone());
        g.soft_dice(c, v[0], 1e-5)
    });
}

#[test]
fn graph_exponentiate_matches_field_exponentiate() {
    use crate::field::{exponentiate, FieldKind, VectorField};
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let dims = Dims::new(6, 5, 4);
    let data: Vec<f32> = (0..3 * dims.len()).map(|_| rng.random_range(-1.5..1.5)).collect();
    let v = VectorField::new(dims, FieldKind::Velocity, data.clone()).unwrap();
    let expected = exponentiate(&v, 7);
    let g = Graph::<f32>::new();
    let t = g.constant(Tensor::from_vec(&dims.shape(1, 3), data).unwrap());
    let u = g.exponentiate(t, 7);
    assert_eq!(g.value(u).data(), expected.data());
}
