use criterion::{black_box, criterion_group, criterion_main, Criterion};
use qp_core::autograd::roi_align_forward;
use qp_core::detector::{hungarian, BoxSet};
use qp_core::pipeline::key_detect;
use qp_core::propagation::{nonkey_detect, PropagationState, PropagationVariant};
use qp_core::synthdata::{generate_video, DegradationSpec, GenConfig};
use qp_core::temporal_memory::MemoryStore;
use qp_core::{Config, QueryPropModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn heads(c: &mut Criterion) {
    let cfg = Config::desk();
    let model = QueryPropModel::new(&cfg);
    let video = generate_video(&GenConfig::from_data(&cfg.data, DegradationSpec::none()), 1).unwrap();
    let image = video.frames[0].to_tensor();
    let fm = model.detector.extract_features(&model.store, &image).unwrap();

    c.bench_function("backbone", |b| b.iter(|| model.detector.extract_features(&model.store, black_box(&image)).unwrap()));

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    c.bench_function("key_head_empty_memory", |b| {
        b.iter(|| {
            let mut mem = MemoryStore::new(&cfg.memory);
            key_detect(&model, black_box(&fm), &mut mem, true, &mut rng)
        })
    });

    // memory filled by earlier key frames
    let mut mem = MemoryStore::new(&cfg.memory);
    for _ in 0..8 {
        key_detect(&model, &fm, &mut mem, true, &mut rng);
    }
    c.bench_function("key_head_full_memory", |b| {
        b.iter(|| {
            let mut m = mem.clone();
            key_detect(&model, black_box(&fm), &mut m, true, &mut rng)
        })
    });

    let (_, boxes, q, _) = key_detect(&model, &fm, &mut MemoryStore::new(&cfg.memory), false, &mut rng);
    let state = PropagationState::from_key(q, boxes.0.clone(), fm.clone());
    for v in [PropagationVariant::D, PropagationVariant::C2] {
        c.bench_function(&format!("nonkey_head_{v}"), |b| {
            b.iter(|| nonkey_detect(&model.store, &model.detector, model.head(v), black_box(&fm), &state))
        });
    }

    let BoxSet(bx) = boxes;
    c.bench_function("roi_align", |b| b.iter(|| roi_align_forward(black_box(&fm.data), &bx, &model.detector.roi)));
}

fn matcher(c: &mut Criterion) {
    let cost: Vec<Vec<f64>> = (0..20).map(|i| (0..100).map(|j| ((i * 7919 + j * 104729) % 1000) as f64 / 1000.0).collect()).collect();
    c.bench_function("hungarian_20x100", |b| b.iter(|| hungarian(black_box(&cost))));
}

criterion_group!(benches, heads, matcher);
criterion_main!(benches);
