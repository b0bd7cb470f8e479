use proptest::prelude::*;

use super::*;
use crate::ontology::presets::preset;

fn small_params() -> SynthParams {
    SynthParams {
        scenes_per_task: 3,
        eval_scenes: 48,
        ..SynthParams::default()
    }
}

#[test]
fn class_model_geometry() {
    let seq = preset("cs_ex1").unwrap();
    let onto = seq.ontology();
    let m = build_class_model(onto, 8, 8.0, 1.0, 0.25, 5).unwrap();
    assert_eq!(m, build_class_model(onto, 8, 8.0, 1.0, 0.25, 5).unwrap());
    assert_eq!(m.atoms(), onto.atoms());
    let atoms = onto.atoms();
    for &a in &atoms {
        for &b in &atoms {
            if a < b && onto.root_of(a) != onto.root_of(b) {
                assert!(distance(m.mean(a).unwrap(), m.mean(b).unwrap()) >= 8.0 - 2.0 - 1e-9);
            }
        }
    }
    // Atoms below a root sit on a sphere of radius 1 around the root's anchor.
    let road = onto.id("road").unwrap();
    let sidewalk = onto.id("sidewalk").unwrap();
    let sky = onto.id("sky").unwrap();
    let d = distance(m.mean(road).unwrap(), m.mean(sidewalk).unwrap());
    assert!((1.0 - 1e-9..=2.0 + 1e-9).contains(&d));
    let norm = m.mean(sky).unwrap().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((norm - 8.0).abs() < 1e-9);
}

#[test]
fn zero_radius_collapses_children() {
    let seq = preset("cs_ex1").unwrap();
    let onto = seq.ontology();
    let m = build_class_model(onto, 4, 8.0, 0.0, 0.25, 5).unwrap();
    let road = m.mean(onto.id("road").unwrap()).unwrap();
    let sidewalk = m.mean(onto.id("sidewalk").unwrap()).unwrap();
    assert_eq!(road, sidewalk);
}

#[test]
fn crowded_anchors_are_inseparable() {
    // Eight roots at pairwise angle >= 60 degrees do not fit in the plane.
    let seq = preset("cs_ex1").unwrap();
    assert!(matches!(
        build_class_model(seq.ontology(), 2, 8.0, 1.0, 0.25, 1),
        Err(Error::Inseparable(_))
    ));
    assert!(build_class_model(seq.ontology(), 8, 1.0, 2.0, 0.25, 1).is_err());
}

#[test]
fn noiseless_scene_reproduces_means() {
    let seq = preset("voc_ex1").unwrap();
    let m = build_class_model(seq.ontology(), 6, 8.0, 1.0, 0.0, 2).unwrap();
    let spec = SceneSpec {
        height: 12,
        width: 10,
        regions: 4,
        min_side: 2,
        seed: 9,
    };
    let s = generate_scene(&m, &spec).unwrap();
    for r in 0..12 {
        for c in 0..10 {
            assert_eq!(s.features.pixel(r, c), m.mean(s.finest.get(r, c)).unwrap());
        }
    }
    assert_eq!(s, generate_scene(&m, &spec).unwrap());
}

#[test]
fn single_region_scene_has_one_class() {
    let seq = preset("cs_ex1").unwrap();
    let m = build_class_model(seq.ontology(), 4, 8.0, 1.0, 0.25, 2).unwrap();
    let spec = SceneSpec {
        height: 5,
        width: 7,
        regions: 1,
        min_side: 1,
        seed: 3,
    };
    let s = generate_scene(&m, &spec).unwrap();
    let first = s.finest.labels()[0];
    assert!(s.finest.labels().iter().all(|&c| c == first));
}

#[test]
fn pixel_means_follow_the_law_of_large_numbers() {
    let seq = preset("cs_ex1").unwrap();
    let m = build_class_model(seq.ontology(), 4, 8.0, 1.0, 0.5, 2).unwrap();
    let spec = SceneSpec {
        height: 100,
        width: 100,
        regions: 1,
        min_side: 1,
        seed: 4,
    };
    let s = generate_scene(&m, &spec).unwrap();
    let c = s.finest.labels()[0];
    let n = 10_000.0;
    let bound = 3.0 * 0.5 / f64::sqrt(n);
    for (j, &mu) in m.mean(c).unwrap().iter().enumerate() {
        let mean = s.features.data().iter().skip(j).step_by(4).sum::<f64>() / n;
        assert!((mean - mu).abs() < bound, "dim {j}: {mean} vs {mu}");
    }
}

#[test]
fn impossible_partition_is_reported() {
    let spec = SceneSpec {
        height: 4,
        width: 4,
        regions: 5,
        min_side: 2,
        seed: 0,
    };
    let mut rng = Xoshiro256StarStar::seed_from_u64(0);
    assert!(matches!(partition(&spec, &mut rng), Err(Error::Unsatisfiable(_))));
}

#[test]
fn benchmark_respects_projection_and_coverage() {
    let seq = preset("cs_ex2").unwrap();
    let params = small_params();
    let (_, bench) = generate_benchmark(&seq, &params, 17, Execution::Parallel).unwrap();
    assert_eq!(bench.tasks.len(), 7);
    let atoms = seq.ontology().atoms();
    for t in 0..7 {
        assert_eq!(bench.tasks[t].len(), 3);
        let set = bench.task_pixels(&seq, t).unwrap();
        let introduced = &seq.task(t).unwrap().introduced;
        assert!(set.labels.iter().all(|c| c.is_background() || introduced.contains(c)));
        // The task bias makes current classes common.
        let current = set.labels.iter().filter(|c| !c.is_background()).count();
        assert!(current > 0, "task {t}");
        for s in &bench.tasks[t] {
            assert!(s.finest.labels().iter().all(|c| atoms.contains(c)));
        }
    }
    let eval = bench.eval_pixels(&seq).unwrap();
    for c in seq.evaluated_classes_at(6).unwrap() {
        assert!(eval.labels.iter().filter(|&&l| l == c).count() >= MIN_EVAL_PIXELS);
    }
    let (_, again) = generate_benchmark(&seq, &params, 17, Execution::Sequential).unwrap();
    assert_eq!(bench, again);
    let (_, other) = generate_benchmark(&seq, &params, 18, Execution::Sequential).unwrap();
    assert_ne!(bench, other);
}

#[test]
fn too_few_eval_scenes_fail_after_retries() {
    let seq = preset("cs_ex2").unwrap();
    let params = SynthParams {
        eval_scenes: 1,
        ..small_params()
    };
    assert!(matches!(
        generate_benchmark(&seq, &params, 1, Execution::Sequential),
        Err(Error::Unsatisfiable(_))
    ));
}

#[test]
fn nearest_mean_recovers_the_root() {
    let seq = preset("cs_ex1").unwrap();
    let onto = seq.ontology();
    let params = SynthParams {
        sigma: 0.25,
        child_radius: 1.0,
        anchor_sep: 8.0,
        ..small_params()
    };
    let (model, bench) = generate_benchmark(&seq, &params, 3, Execution::Sequential).unwrap();
    let roots = onto.roots();
    // Nearest atom mean, scored at root level.
    let atoms = onto.atoms();
    let mut correct = 0usize;
    let mut total = 0usize;
    for s in bench.tasks.iter().flatten() {
        for (i, &truth) in s.finest.labels().iter().enumerate() {
            let x = &s.features.data()[i * params.d_in..(i + 1) * params.d_in];
            let nearest = atoms
                .iter()
                .min_by(|a, b| {
                    distance(model.mean(**a).unwrap(), x).total_cmp(&distance(model.mean(**b).unwrap(), x))
                })
                .unwrap();
            total += 1;
            if onto.root_of(*nearest) == onto.root_of(truth) {
                correct += 1;
            }
        }
    }
    assert!(roots.len() > 1);
    assert!(correct as f64 >= 0.99 * total as f64, "{correct}/{total}");
}

#[test]
fn feature_grid_round_trips() {
    let g = FeatureGrid::new(2, 3, 2, (0..12).map(|i| i as f64 * 0.1 - 0.3).collect()).unwrap();
    let bytes = g.to_bytes();
    assert_eq!(&bytes[..4], b"CLFG");
    assert_eq!(bytes.len(), 20 + 12 * 8);
    assert_eq!(FeatureGrid::from_bytes(&bytes).unwrap(), g);
    assert!(FeatureGrid::from_bytes(&bytes[..30]).is_err());
    assert!(FeatureGrid::new(2, 3, 2, vec![0.0; 11]).is_err());
    assert!(FeatureGrid::new(1, 1, 1, vec![f64::NAN]).is_err());
}

#[test]
fn datasets_round_trip_through_files() {
    let seq = preset("voc_ex1").unwrap();
    let params = SynthParams {
        scenes_per_task: 2,
        eval_scenes: 60,
        ..SynthParams::default()
    };
    let (_, bench) = generate_benchmark(&seq, &params, 8, Execution::Parallel).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let written = write_dataset(dir.path(), &seq, &bench).unwrap();
    assert!(written.iter().all(|p| dir.path().join(p).is_file()));
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.benchmark, bench);
    assert_eq!(loaded.sequence, seq);

    // Task-1 labels outside C_1 are rejected with the task index.
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("task_1.json")).unwrap()).unwrap();
    let path = dir.path().join(&manifest.scenes[0].labels);
    let mut grid = LabelGrid::read(&path).unwrap();
    grid.set(0, 0, seq.ontology().id("animals").unwrap());
    grid.write(&path).unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Data(ref m) if m.starts_with("task 1")), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partitions_tile_the_grid(
        h in 1usize..40,
        w in 1usize..40,
        regions in 1usize..12,
        min_side in 1usize..4,
        seed in any::<u64>(),
    ) {
        let spec = SceneSpec { height: h, width: w, regions, min_side, seed };
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        match partition(&spec, &mut rng) {
            Ok(rects) => {
                prop_assert_eq!(rects.len(), regions);
                let mut cover = vec![0u8; h * w];
                for r in &rects {
                    prop_assert!(r.rows >= min_side && r.cols >= min_side);
                    for row in r.top..r.top + r.rows {
                        for col in r.left..r.left + r.cols {
                            cover[row * w + col] += 1;
                        }
                    }
                }
                prop_assert!(cover.iter().all(|&c| c == 1));
            }
            Err(e) => prop_assert!(matches!(e, Error::Unsatisfiable(_))),
        }
    }
}
