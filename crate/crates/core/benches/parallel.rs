//! Rayon data-parallel entry points against the always-sequential fallback.
//!
//! The parallel paths go through `exec::map_indexed` (rayon under the
//! `parallel` feature, plain iteration otherwise); the `seq` variants pin
//! the reference path. Outputs are bitwise identical either way, so these
//! benches measure wall time only. Build with `--no-default-features` to
//! bench the compiled-out fallback.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use boxrefine::embed::{EmbedConfig, EmbedNet};
use boxrefine::exec;
use boxrefine::grid::Grid2D;
use boxrefine::harness;
use boxrefine::rng::Rng;
use boxrefine::roi;
use boxrefine::synth::{SceneSet, Split, SynthConfig};

fn scene_cfg() -> SynthConfig {
    SynthConfig {
        n_scenes: 16,
        n_ids: 4,
        ..SynthConfig::default()
    }
}

fn bench_synth(c: &mut Criterion) {
    // Scene rendering fans out per scene inside `synth`; rerun this bench
    // with `--no-default-features` to time the sequential fallback (output
    // is bitwise identical, so the comparison is wall time only).
    let cfg = scene_cfg();
    let rng = Rng::new(3);
    let mut group = c.benchmark_group("synth_16_scenes");
    group.sample_size(10);
    group.bench_function("default_features", |b| {
        b.iter(|| boxrefine::synth::synth(black_box(&cfg), &rng).unwrap())
    });
    group.finish();
}

fn gallery_crops(set: &SceneSet, net: &EmbedNet) -> Vec<Grid2D> {
    set.split_annotations(Split::Gallery)
        .iter()
        .chain(set.split_annotations(Split::Train).iter())
        .map(|(si, ann)| {
            roi::crop_box(&set.scenes[*si].image, &ann.bbox, net.cfg.crop_h, net.cfg.crop_w)
                .unwrap()
                .v
        })
        .collect()
}

fn bench_embed_batch(c: &mut Criterion) {
    let (set, _) = boxrefine::synth::synth(&scene_cfg(), &Rng::new(5)).unwrap();
    let net = EmbedNet::init(EmbedConfig::new(4), &mut Rng::new(7));
    let crops = gallery_crops(&set, &net);
    let mut group = c.benchmark_group(format!("embed_forward_{}_crops", crops.len()));
    group.bench_function("par", |b| {
        b.iter(|| {
            let out = exec::map_indexed(crops.len(), |i| {
                net.forward(black_box(&crops[i])).unwrap().0
            });
            black_box(out.len())
        })
    });
    group.bench_function("seq", |b| {
        b.iter(|| {
            let out = exec::map_indexed_seq(crops.len(), |i| {
                net.forward(black_box(&crops[i])).unwrap().0
            });
            black_box(out.len())
        })
    });
    group.finish();
}

fn bench_gradcheck_cases(c: &mut Criterion) {
    let mut group = c.benchmark_group("roi_gradcheck_10_pairs");
    group.sample_size(10);
    // `roi_gradcheck` fans its cases out through `exec::map_indexed`; the
    // sequential twin recomputes the same cases one at a time.
    group.bench_function("par", |b| {
        b.iter(|| black_box(harness::roi_gradcheck(11, 10).worst))
    });
    group.bench_function("seq", |b| {
        b.iter(|| {
            let worst = (0..10)
                .map(|i| harness::roi_gradcheck(11 ^ (i as u64) << 32, 1).worst)
                .fold(0.0f64, f64::max);
            black_box(worst)
        })
    });
    group.finish();
}

criterion_group!(benches, bench_synth, bench_embed_batch, bench_gradcheck_cases);
criterion_main!(benches);
