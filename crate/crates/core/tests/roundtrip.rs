use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use svfreg::checkpoint::Checkpoint;
use svfreg::field::{FieldKind, VectorField};
use svfreg::networks::{Model, NetConfig};
use svfreg::params::normal_tensor;
use svfreg::training::{Adam, TrainConfig};
use svfreg::volume::{load_mask, load_volume, save_mask, save_volume, Dims, SegMask, Volume};

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn volumes_masks_and_fields_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let dims = Dims::new(5, 3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let data = normal_tensor::<f32, _>(&[dims.len()], 100.0, &mut rng).into_data();
    let v = Volume::new(dims, [0.7, 1.0, 3.25], data).unwrap();
    save_volume(&v, dir.path().join("v.volr")).unwrap();
    let back = load_volume(dir.path().join("v.volr")).unwrap();
    assert_eq!(bits(back.data()), bits(v.data()));
    assert_eq!(back.spacing(), v.spacing());

    let m = SegMask::new(dims, [1.0; 3], (0..dims.len()).map(|i| i % 3 == 0).collect()).unwrap();
    save_mask(&m, dir.path().join("m.volr")).unwrap();
    assert_eq!(load_mask(dir.path().join("m.volr")).unwrap(), m);

    let u = VectorField::new(
        dims,
        FieldKind::Velocity,
        (0..3 * dims.len()).map(|i| i as f32 * 0.1 - 2.0).collect(),
    )
    .unwrap();
    u.save(dir.path().join("u.volr"), [1.0; 3]).unwrap();
    let ub = VectorField::load(dir.path().join("u.volr"), FieldKind::Velocity).unwrap();
    assert_eq!(bits(ub.data()), bits(u.data()));
}

#[test]
fn loading_a_missing_volume_fails() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_volume(dir.path().join("absent.volr")).is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = TrainConfig::default();
    config.network = NetConfig::small(Dims::new(16, 16, 8));
    let (_, params) = Model::init::<f32>(&config.network, 5).unwrap();
    let mut adam = Adam::new(&params, 1e-3);
    adam.t = 3;
    let ck = Checkpoint {
        step: 3,
        config: config.clone(),
        params,
        optimizer: Some(adam),
    };
    ck.save(dir.path()).unwrap();
    let (model, back) = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(model.config, config.network);
    assert_eq!(back.step, 3);
    assert_eq!(back.config, config);
    assert_eq!(back.params.len(), ck.params.len());
    for (a, b) in ck.params.entries().iter().zip(back.params.entries()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.trainable, b.trainable);
        assert_eq!(bits(a.value.data()), bits(b.value.data()));
    }
    let (o, p) = (ck.optimizer.unwrap(), back.optimizer.unwrap());
    assert_eq!(o.t, p.t);
    assert_eq!(o.learning_rate, p.learning_rate);
}
