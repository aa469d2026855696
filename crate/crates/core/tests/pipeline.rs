use std::path::Path;
use std::sync::Arc;

use motif_search::build::{BUILD_FILE, INDEX_FILE, MANIFEST_FILE, WHITENING_FILE};
use motif_search::eval::benchmark::{generate_benchmark, Benchmark, BenchmarkSpec, JitterSpec};
use motif_search::eval::harness::{bench_build_config, build_benchmark_engine};
use motif_search::features::{FeaturePipeline, FeatureSource, PreprocessConfig};
use motif_search::{
    build_to_dir, iou, load_engine, BuildConfig, BuildOutcome, DirSource, Error, Rect,
};

fn bench(seed: u64) -> Benchmark {
    generate_benchmark(&BenchmarkSpec {
        seed,
        num_images: 10,
        image_size: (128, 128),
        num_motifs: 2,
        instances_per_motif: 3,
        scale_range: (40.0, 56.0),
        style_jitter: JitterSpec::default(),
        num_distractors: 2,
    })
    .unwrap()
}

fn config(root: &Path) -> BuildConfig {
    BuildConfig {
        dataset_root: root.to_path_buf(),
        preprocess: PreprocessConfig {
            min_side: 256,
            pad: 8,
        },
        ..bench_build_config(11)
    }
}

fn artifact_bytes(dir: &Path) -> Vec<Vec<u8>> {
    [MANIFEST_FILE, WHITENING_FILE, INDEX_FILE]
        .iter()
        .map(|f| std::fs::read(dir.join(f)).unwrap())
        .collect()
}

#[test]
fn build_is_deterministic_and_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("images");
    bench(1).write_to_dir(&data).unwrap();
    let cfg = config(&data);

    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(matches!(
        build_to_dir(&cfg, &a, &|_| {}).unwrap(),
        BuildOutcome::Built(_)
    ));
    assert!(matches!(
        build_to_dir(&cfg, &b, &|_| {}).unwrap(),
        BuildOutcome::Built(_)
    ));
    assert_eq!(artifact_bytes(&a), artifact_bytes(&b));

    let modified = std::fs::metadata(a.join(INDEX_FILE))
        .unwrap()
        .modified()
        .unwrap();
    assert_eq!(
        build_to_dir(&cfg, &a, &|_| {}).unwrap(),
        BuildOutcome::UpToDate
    );
    assert_eq!(
        std::fs::metadata(a.join(INDEX_FILE))
            .unwrap()
            .modified()
            .unwrap(),
        modified
    );

    // a changed seed invalidates the build
    let reseeded = BuildConfig {
        seed: 12,
        ..cfg.clone()
    };
    assert!(matches!(
        build_to_dir(&reseeded, &a, &|_| {}).unwrap(),
        BuildOutcome::Built(_)
    ));
}

#[test]
fn preflight_errors_write_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("images");
    bench(2).write_to_dir(&data).unwrap();
    let out = tmp.path().join("out");

    let mut bad_m = config(&data);
    bad_m.index.m = Some(5);
    assert!(matches!(
        build_to_dir(&bad_m, &out, &|_| {}),
        Err(Error::InvalidArgument(_))
    ));

    let too_wide = BuildConfig {
        descriptor_dim: 80,
        ..config(&data)
    };
    assert!(matches!(
        build_to_dir(&too_wide, &out, &|_| {}),
        Err(Error::InvalidArgument(_))
    ));

    let mut no_probe = config(&data);
    no_probe.index.n_probe = 0;
    assert!(build_to_dir(&no_probe, &out, &|_| {}).is_err());
    assert!(!out.exists());
}

#[test]
fn loaded_engine_matches_in_memory_engine() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("images");
    let b = bench(3);
    b.write_to_dir(&data).unwrap();
    let cfg = config(&data);
    let out = tmp.path().join("out");
    build_to_dir(&cfg, &out, &|_| {}).unwrap();
    let before = artifact_bytes(&out);

    let loaded = load_engine(&out, None).unwrap();
    let source = DirSource::new(&data);
    let manifest = source.scan(cfg.descriptor_dim).unwrap();
    let (memory, _) = {
        let art = motif_search::build_artifacts(&cfg, manifest, Arc::new(source.clone()), &|_| {})
            .unwrap();
        let stats = art.stats.clone();
        (art.into_engine(&cfg, Arc::new(source)), stats)
    };
    for q in b.annotations.annotations.iter().take(3) {
        let x = loaded.retrieve(q.image_id, &q.rect, 10).unwrap();
        let y = memory.retrieve(q.image_id, &q.rect, 10).unwrap();
        assert_eq!(x.full, y.full);
        assert_eq!(x.single_pass, y.single_pass);
        assert_eq!(x.no_voting, y.no_voting);
    }
    assert_eq!(before, artifact_bytes(&out));
}

#[test]
fn mixed_or_damaged_artifacts_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("images");
    bench(4).write_to_dir(&data).unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    build_to_dir(&config(&data), &a, &|_| {}).unwrap();
    build_to_dir(
        &BuildConfig {
            seed: 99,
            ..config(&data)
        },
        &b,
        &|_| {},
    )
    .unwrap();

    std::fs::copy(b.join(MANIFEST_FILE), a.join(MANIFEST_FILE)).unwrap();
    assert!(matches!(load_engine(&a, None), Err(Error::Corrupt { .. })));

    let bytes = std::fs::read(b.join(INDEX_FILE)).unwrap();
    std::fs::write(b.join(INDEX_FILE), &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_engine(&b, None), Err(Error::Corrupt { .. })));

    std::fs::remove_file(b.join(BUILD_FILE)).unwrap();
    assert!(matches!(load_engine(&b, None), Err(Error::Io(_))));
}

#[test]
fn planted_copy_is_found_with_its_box() {
    let b = generate_benchmark(&BenchmarkSpec {
        seed: 21,
        num_images: 12,
        image_size: (128, 128),
        num_motifs: 2,
        instances_per_motif: 3,
        scale_range: (44.0, 56.0),
        style_jitter: JitterSpec::disabled(),
        num_distractors: 2,
    })
    .unwrap();
    let cfg = BuildConfig {
        preprocess: PreprocessConfig {
            min_side: 256,
            pad: 8,
        },
        ..bench_build_config(5)
    };
    let (engine, _) = build_benchmark_engine(&b, &cfg, &|_| {}).unwrap();
    let anns = &b.annotations.annotations;
    let mut hits = 0;
    for q in anns {
        let out = engine.retrieve(q.image_id, &q.rect, 10).unwrap();
        assert!(out.full.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(out.candidates_considered <= cfg.voting.top_t_images);
        // the query region itself comes back from its own image
        let own = out
            .full
            .iter()
            .find(|r| r.image_id == q.image_id)
            .expect("query image retrieved");
        assert!(iou(&own.rect, &q.rect) >= 0.5, "{own:?} vs {q:?}");
        let top = out.full.iter().find(|r| r.image_id != q.image_id).unwrap();
        let twin = anns
            .iter()
            .filter(|a| a.class_id == q.class_id && a.image_id == top.image_id)
            .any(|a| iou(&a.rect, &top.rect) >= 0.3);
        hits += twin as usize;
    }
    assert!(
        hits * 10 >= anns.len() * 8,
        "{hits}/{} queries found a twin first",
        anns.len()
    );
}

#[test]
fn ingested_feature_maps_build_and_query() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("images");
    let maps = tmp.path().join("maps");
    let b = bench(6);
    b.write_to_dir(&data).unwrap();
    std::fs::create_dir_all(&maps).unwrap();
    let pre = PreprocessConfig {
        min_side: 256,
        pad: 8,
    };
    let pipeline = FeaturePipeline::toy(pre);
    for (id, img) in b.images.iter().enumerate() {
        let f =
            std::fs::File::create(motif_search::engine::ingested_path(&maps, id as u32)).unwrap();
        pipeline
            .base_map(img)
            .unwrap()
            .write_to(std::io::BufWriter::new(f))
            .unwrap();
    }
    let cfg = BuildConfig {
        feature_source: FeatureSource::Ingested { dir: maps.clone() },
        ..config(&data)
    };
    let out = tmp.path().join("out");
    build_to_dir(&cfg, &out, &|_| {}).unwrap();
    let engine = load_engine(&out, None).unwrap();
    let q = b.annotations.annotations[0];
    let res = engine.retrieve(q.image_id, &q.rect, 5).unwrap();
    assert!(!res.full.is_empty());

    let outside = Rect::new(100.0, 100.0, 60.0, 60.0).unwrap();
    assert!(matches!(
        engine.retrieve(0, &outside, 5),
        Err(Error::InvalidArgument(_))
    ));
    let tiny = Rect::new(0.0, 0.0, 8.0, 30.0).unwrap();
    assert!(matches!(
        engine.retrieve(0, &tiny, 5),
        Err(Error::QueryTooSmall(_))
    ));
    assert!(matches!(
        engine.retrieve(500, &tiny, 5),
        Err(Error::UnknownImage(500))
    ));
}
