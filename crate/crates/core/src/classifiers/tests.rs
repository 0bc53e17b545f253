use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::aasist::frames_view;
use super::*;

fn rand_image(seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn((3, 256, 256), |_| rng.gen_range(0.0..1.0))
}

#[test]
fn fusion_identities() {
    let o = rand_image(1);
    let r = rand_image(2);
    let zero = Array3::zeros((3, 256, 256));
    assert_eq!(fuse(&o, &zero, FusionMode::Add).unwrap(), o);
    assert!(fuse(&o, &o, FusionMode::Sub).unwrap().iter().all(|&v| v == 0.0));
    let only = fuse(&o, &r, FusionMode::OnlyRec).unwrap();
    assert!(only.iter().zip(r.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    let diff = fuse(&o, &r, FusionMode::Add).unwrap() - fuse(&o, &r, FusionMode::Sub).unwrap();
    let err = (&diff - &(&r * 2.0)).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(err < 1e-12);
    assert!(fuse(&o, &Array3::zeros((3, 8, 8)), FusionMode::Add).is_err());
}

#[test]
fn fusion_modes_parse() {
    for m in [FusionMode::OnlyRec, FusionMode::Add, FusionMode::Sub] {
        assert_eq!(m.to_string().parse::<FusionMode>().unwrap(), m);
    }
    assert!("mul".parse::<FusionMode>().is_err());
    for k in [ClassifierKind::Lcnn, ClassifierKind::Resnet18, ClassifierKind::Aasist] {
        assert_eq!(k.to_string().parse::<ClassifierKind>().unwrap(), k);
    }
}

#[test]
fn frame_view_places_channel_major_features_per_time_step() {
    let (c, q, t) = (3, 4, 5);
    let data: Vec<f32> = (0..c * q * t).map(|i| i as f32).collect();
    let mut g = Graph::new(false);
    let x = g.input(Tensor::new(&[1, c, q, t], data.clone()));
    let f = frames_view(&mut g, x);
    assert_eq!(g.shape(f), &[1, t, c * q]);
    let out = g.value(f).data();
    for ci in 0..c {
        for qi in 0..q {
            for ti in 0..t {
                assert_eq!(out[ti * c * q + ci * q + qi], data[(ci * q + qi) * t + ti]);
            }
        }
    }
}

#[test]
fn classifiers_share_one_contract() {
    let x = rand_image(3);
    let y = rand_image(4);
    for kind in [ClassifierKind::Lcnn, ClassifierKind::Resnet18, ClassifierKind::Aasist] {
        let cfg = ClassifierConfig {
            kind,
            width: 4,
            seed: 1,
        };
        let m = ClassifierModel::new(&cfg).unwrap();
        let a = m.forward(&x).unwrap();
        assert!(a.logits.iter().all(|v| v.is_finite()), "{kind}");
        assert_eq!(a.score, a.logits[0] - a.logits[1]);
        assert_eq!(a, m.forward(&x).unwrap(), "{kind} not deterministic");
        assert_ne!(a, m.forward(&y).unwrap(), "{kind} ignores its input");
        assert!(m.forward(&Array3::zeros((3, 128, 256))).is_err());
        assert_eq!(ClassifierConfig::from_map(&cfg.to_map()).unwrap(), cfg);
    }
}

#[test]
fn training_graph_backpropagates_into_every_classifier() {
    let x = rand_image(5);
    for kind in [ClassifierKind::Lcnn, ClassifierKind::Resnet18, ClassifierKind::Aasist] {
        let mut store = ParamStore::new();
        let net = Classifier::new(&ClassifierConfig { kind, width: 4, seed: 2 }, &mut store).unwrap();
        let mut g = Graph::new(true);
        let data: Vec<f32> = x.iter().chain(x.iter()).map(|&v| v as f32).collect();
        let input = g.input(Tensor::new(&[2, 3, 256, 256], data));
        let logits = net.forward(&mut g, &store, input);
        let loss = g.cross_entropy(logits, &[0, 1], &[1.0, 1.0]);
        let grads = g.backward(loss);
        let pg = g.param_grads(&grads);
        assert!(pg.iter().any(|(_, t)| t.data().iter().any(|&v| v != 0.0)), "{kind}");
        assert!(pg.iter().all(|(_, t)| t.all_finite()), "{kind}");
    }
}
