use criterion::{black_box, criterion_group, criterion_main, Criterion};
use recolor_bench::{activation_and_palette, image, scores, waveform};
use recolor_core::classifiers::{ClassifierConfig, ClassifierKind, ClassifierModel};
use recolor_core::eval::compute_eer;
use recolor_core::features::featurize;
use recolor_core::recolor::{quantize_test, quantize_train, QuantPath, RecolorConfig, RecolorModel};

fn features(c: &mut Criterion) {
    let w = waveform(1);
    c.bench_function("featurize_65600", |b| b.iter(|| featurize(black_box(&w)).unwrap()));
}

fn quantize(c: &mut Criterion) {
    let (a, p) = activation_and_palette(16, 2);
    c.bench_function("quantize_train_k16", |b| b.iter(|| quantize_train(black_box(&a), &p, 0.01).unwrap()));
    c.bench_function("quantize_test_k16", |b| b.iter(|| quantize_test(black_box(&a), &p).unwrap()));
}

fn eer(c: &mut Criterion) {
    let s = scores(5000, 3);
    c.bench_function("compute_eer_10k", |b| b.iter(|| compute_eer(black_box(&s)).unwrap()));
}

fn models(c: &mut Criterion) {
    let x = image(4);
    let recolor = RecolorModel::new(&RecolorConfig::default()).unwrap();
    let mut g = c.benchmark_group("inference");
    g.sample_size(10);
    g.bench_function("recolor_test_path", |b| b.iter(|| recolor.forward(black_box(&x), QuantPath::Test)));
    for kind in [ClassifierKind::Lcnn, ClassifierKind::Resnet18, ClassifierKind::Aasist] {
        let m = ClassifierModel::new(&ClassifierConfig::new(kind)).unwrap();
        g.bench_function(format!("{kind}_forward"), |b| b.iter(|| m.forward(black_box(&x.channels)).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, features, quantize, eer, models);
criterion_main!(benches);
