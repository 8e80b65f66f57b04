use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tab2vox::nn::{Tape, Tensor};
use tab2vox::supernet3d::*;

fn ramp(shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap()
}

#[test]
fn skip_only_cell_doubles_its_input() {
    let x = ramp(&[2, 3, 3, 2, 2]);
    let skip = |from| GenoEdge { from, op: OpKind::SkipConnect };
    let mut store = ParamStore::<f64>::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let discrete = Cell::discrete(&[[skip(0), skip(1)]], 3, false, &mut store, &mut rng).unwrap();
    let mixed = Cell::mixed(1, 3, false, &[OpKind::SkipConnect], &mut store, &mut rng).unwrap();
    let arch = ArchParams::<f64>::zeros(&[OpKind::SkipConnect], 1);

    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&store, true, false);
    let s = tape.constant(x.clone());
    let av = arch.vars(&mut tape, false);
    let a = discrete.forward(&mut tape, &mut ctx, s, s, &[]).unwrap();
    let b = mixed.forward(&mut tape, &mut ctx, s, s, &av.normal).unwrap();
    for out in [a, b] {
        let got = tape.value(out);
        assert_eq!(got.shape(), x.shape());
        for (g, v) in got.data().iter().zip(x.data()) {
            assert!((g - 2.0 * v).abs() < 1e-12);
        }
    }
}

#[test]
fn reduction_cell_halves_with_ceiling() {
    let mut store = ParamStore::<f64>::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cell = Cell::mixed(2, 2, true, &OpKind::ALL, &mut store, &mut rng).unwrap();
    let arch = ArchParams::<f64>::zeros(&OpKind::ALL, 2);
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&store, true, false);
    let s = tape.constant(ramp(&[2, 2, 5, 3, 1]));
    let av = arch.vars(&mut tape, false);
    let out = cell.forward(&mut tape, &mut ctx, s, s, &av.reduce).unwrap();
    assert_eq!(tape.value(out).shape(), &[2, 4, 3, 2, 1]);
    assert_eq!(cell.out_channels(), 4);
}

#[test]
fn seven_samples_give_seven_predictions() {
    let config = SupernetConfig::default();
    let net = Network::<f64>::supernet(&config, [3, 4, 3, 2]).unwrap();
    let arch = ArchParams::zeros(&config.ops, config.nodes);
    let x = ramp(&[7, 3, 4, 3, 2]);
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&net.store, true, false);
    let xv = tape.constant(x.clone());
    let av = arch.vars(&mut tape, false);
    let out = net.forward(&mut tape, &mut ctx, xv, Some(&av)).unwrap();
    assert_eq!(tape.value(out).shape(), &[7, 1]);
    assert!(tape.value(out).is_finite());
    assert!(net.predict(&x, Some(&arch)).unwrap().iter().all(|v| v.is_finite()));
}

#[test]
fn supernet_rejects_wrong_voxel_shape() {
    let config = SupernetConfig::default();
    let net = Network::<f64>::supernet(&config, [3, 4, 3, 2]).unwrap();
    let arch = ArchParams::zeros(&config.ops, config.nodes);
    let err = net.predict(&ramp(&[1, 3, 4, 2, 2]), Some(&arch)).unwrap_err();
    assert!(matches!(err, tab2vox::Error::ShapeMismatch(_)));
}

#[test]
fn derived_network_runs_on_a_derived_genotype() {
    let config = SupernetConfig::default();
    let mut arch = ArchParams::<f64>::zeros(&config.ops, config.nodes);
    for (e, row) in arch.normal.iter_mut().enumerate() {
        let k = (e + 3) % row.len();
        row[k] = 1.0;
    }
    let g = derive_genotype(&arch);
    g.validate().unwrap();
    let net = Network::<f64>::derived(&config, [2, 3, 2, 2], &g).unwrap();
    assert!(!net.is_supernet());
    assert_eq!(net.predict(&ramp(&[4, 2, 3, 2, 2]), None).unwrap().len(), 4);
}
