use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svfreg::field::{affine_to_displacement, exponentiate, sample_trilinear, AffineParams, FieldKind, VectorField};
use svfreg::losses::lncc;
use svfreg::metrics::{assd, surface};
use svfreg::volume::{Dims, SegMask, Volume};
use svfreg_oracles::{oracle_assd, oracle_expm, oracle_lncc, oracle_surface, oracle_trilinear};

fn random_data(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random::<f32>()).collect()
}

#[test]
fn lncc_matches_oracle_on_anisotropic_grids() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (dims, n) in [(Dims::new(6, 5, 4), 3), (Dims::new(7, 3, 5), 5), (Dims::new(4, 4, 4), 7)] {
        let f = random_data(&mut rng, dims.len());
        let w = random_data(&mut rng, dims.len());
        let got = lncc(
            &Volume::new(dims, [1.0; 3], f.clone()).unwrap(),
            &Volume::new(dims, [1.0; 3], w.clone()).unwrap(),
            n,
            1e-5,
        )
        .unwrap();
        let as64 = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        let want = oracle_lncc(&as64(&f), &as64(&w), dims.as_array(), n, 1e-5).unwrap();
        assert!((got - want).abs() < 1e-9, "{dims} n={n}: {got} vs {want}");
    }
}

#[test]
fn surface_and_assd_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dims = Dims::new(9, 7, 5);
    for spacing in [[1.0, 1.0, 1.0], [0.5, 2.0, 1.5]] {
        let a: Vec<bool> = (0..dims.len()).map(|_| rng.random_bool(0.4)).collect();
        let b: Vec<bool> = (0..dims.len()).map(|_| rng.random_bool(0.3)).collect();
        let ma = SegMask::new(dims, spacing, a.clone()).unwrap();
        let mb = SegMask::new(dims, spacing, b.clone()).unwrap();
        let s = surface(&ma);
        let mut from_oracle = vec![false; dims.len()];
        for [x, y, z] in oracle_surface(&a, dims.as_array()) {
            from_oracle[dims.index(x, y, z)] = true;
        }
        assert_eq!(s, from_oracle);
        assert_eq!(assd(&ma, &mb).unwrap(), oracle_assd(&a, &b, dims.as_array(), spacing).unwrap());
    }
}

#[test]
fn trilinear_sampling_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dims = Dims::new(5, 4, 6);
    let v = random_data(&mut rng, dims.len());
    let v64: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    for _ in 0..200 {
        let p = [
            rng.random_range(-2.0..7.0),
            rng.random_range(-2.0..6.0),
            rng.random_range(-2.0..8.0),
        ];
        let got = sample_trilinear(&v, dims, p[0], p[1], p[2]);
        let want = oracle_trilinear(&v64, dims.as_array(), p).unwrap();
        assert!((got - want).abs() < 1e-6, "{p:?}: {got} vs {want}");
    }
}

#[test]
fn exponential_of_linear_field_matches_matrix_exponential() {
    let dims = Dims::new(20, 20, 20);
    let m = [[0.0, -0.05, 0.0], [0.05, 0.0, 0.0], [0.0, 0.0, 0.02]];
    let c = 9.5;
    let v = VectorField::from_fn(dims, FieldKind::Velocity, |x, y, z| {
        let p = [x as f64 - c, y as f64 - c, z as f64 - c];
        [0, 1, 2].map(|r| (m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2]) as f32)
    })
    .unwrap();
    let u = exponentiate(&v, 7);
    let e = oracle_expm(m).unwrap();
    for (x, y, z) in [(8, 9, 10), (6, 12, 7), (13, 13, 13)] {
        let p = [x as f64 - c, y as f64 - c, z as f64 - c];
        let got = u.at(x, y, z);
        for r in 0..3 {
            let want: f64 = (0..3).map(|k| (e[r][k] - (r == k) as u8 as f64) * p[k]).sum();
            assert!((got[r] as f64 - want).abs() < 1e-3, "({x},{y},{z})[{r}]: {} vs {want}", got[r]);
        }
    }
}

#[test]
fn identity_affine_gives_zero_displacement() {
    let u = affine_to_displacement(&AffineParams::default(), Dims::new(4, 5, 6));
    assert!(u.data().iter().all(|&v| v == 0.0));
}
