use clothfit::estimator::Multipliers;
use clothfit::io::{read_labels, read_target_dir, write_target_dir};
use clothfit::scenarios::*;

fn w(s: f64, m: f64) -> Multipliers<f64> {
    Multipliers { w_stiff: s, w_mass: m }
}

const CORNERS: [(f64, f64); 4] = [(0.1, 0.1), (0.1, 10.0), (10.0, 0.1), (10.0, 10.0)];

fn cross_losses(spec: &ScenarioSpec) -> Vec<Vec<f64>> {
    CORNERS
        .iter()
        .map(|&(s, m)| {
            let t = generate_target(spec, w(s, m), 1, Augmentation::default()).unwrap();
            CORNERS
                .iter()
                .map(|&(s2, m2)| evaluate_alignment(spec, w(s2, m2), &t, 7).unwrap())
                .collect()
        })
        .collect()
}

#[test]
fn lift_corners_are_pairwise_separated() {
    let l = cross_losses(&make_lift());
    for i in 0..4 {
        assert!(l[i][i] < 5e-4, "self loss {} at {:?}", l[i][i], CORNERS[i]);
        for j in 0..4 {
            if i != j {
                assert!(l[i][j] > 5e-4, "{:?} vs {:?}: {}", CORNERS[i], CORNERS[j], l[i][j]);
            }
        }
    }
}

// Fold and band-stretch separate only some corner pairs by the 5e-4 margin;
// each corner's target is still explained best by its own parameters.
#[test]
fn fold_and_band_prefer_the_true_corner() {
    for spec in [make_fold(), make_band_stretch()] {
        let l = cross_losses(&spec);
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!(l[i][i] < l[i][j], "{}: {:?} vs {:?}: {:?}", spec.name, CORNERS[i], CORNERS[j], l[i]);
                }
            }
        }
    }
}

#[test]
fn regeneration_is_bitwise_identical() {
    let aug = Augmentation { noise_sigma_m: 0.002, dropout_fraction: 0.2 };
    for spec in [make_lift(), make_fold(), make_band_stretch()] {
        let a = generate_target::<f64>(&spec, w(3.0, 0.7), 42, aug).unwrap();
        let b = generate_target::<f64>(&spec, w(3.0, 0.7), 42, aug).unwrap();
        assert_eq!(a, b);
        let c = generate_target::<f64>(&spec, w(3.0, 0.7), 43, aug).unwrap();
        assert_ne!(a.frames, c.frames);
    }
}

#[test]
fn target_layout() {
    let spec = make_band_stretch();
    let t = generate_target::<f64>(&spec, w(1.0, 1.0), 5, Augmentation::default()).unwrap();
    assert_eq!(t.frames.len(), spec.horizon_frames + 1);
    assert_eq!(t.meta.obstacle_points, 1000);
    for f in &t.frames {
        assert_eq!(f.len(), spec.points_per_frame + 1000);
    }
    // static obstacle points repeat in every frame
    assert_eq!(t.frames[0][spec.points_per_frame..], t.frames[9][spec.points_per_frame..]);

    let lift = make_lift();
    let t = generate_target::<f64>(&lift, w(1.0, 1.0), 5, Augmentation::default()).unwrap();
    assert!(t.frames[0].iter().all(|p| p.z().abs() < 1e-12));
}

#[test]
fn evaluation_is_reproducible_and_self_consistent() {
    let spec = make_lift();
    let t = generate_target::<f64>(&spec, w(2.5, 6.0), 3, Augmentation::default()).unwrap();
    let truth = evaluate_alignment(&spec, w(2.5, 6.0), &t, 99).unwrap();
    assert_eq!(truth, evaluate_alignment(&spec, w(2.5, 6.0), &t, 99).unwrap());
    assert!(truth < 5e-4);
    assert!(evaluate_alignment(&spec, w(10.0, 0.1), &t, 99).unwrap() > truth);
    assert!(evaluate_alignment(&spec, w(11.0, 1.0), &t, 99).is_err());
}

#[test]
fn target_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = make_fold();
    let t = generate_target::<f64>(&spec, w(4.0, 2.0), 8, Augmentation { noise_sigma_m: 0.001, dropout_fraction: 0.0 }).unwrap();
    write_target_dir(dir.path(), &t).unwrap();
    let back = read_target_dir::<f64>(dir.path()).unwrap();
    assert_eq!(back.meta, t.meta);
    for (a, b) in back.frames.iter().zip(&t.frames) {
        assert_eq!(a.len(), b.len());
        for (p, q) in a.iter().zip(b) {
            assert!((*p - *q).max_abs() <= 1e-8 * (1.0 + q.max_abs()));
        }
    }
}

#[test]
fn small_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let dspec = DatasetSpec {
        train: 2,
        test: 1,
        param_range: [0.5, 4.0],
        augmentation: Augmentation::default(),
        seed: 17,
        max_retries: 2,
    };
    let labels = generate_dataset(&make_lift().downscaled(4, 10).unwrap(), &dspec, dir.path()).unwrap();
    assert_eq!(labels.len(), 3);
    assert_eq!(read_labels(&dir.path().join("labels.csv")).unwrap(), labels);
    assert_eq!(labels.iter().filter(|l| l.split == "train").count(), 2);
    for l in &labels {
        assert!((0.5..=4.0).contains(&l.w_stiff) && (0.5..=4.0).contains(&l.w_mass));
        assert!(dir.path().join(&l.id).join("manifest.json").exists());
    }
}

#[test]
fn custom_config_round_trips_through_json() {
    let spec = make_band_stretch();
    let text = serde_json::to_string_pretty(&spec).unwrap();
    let back: ScenarioSpec = serde_json::from_str(&text).unwrap();
    assert_eq!(back, spec);
    let bad = text.replacen("\"horizon_frames\"", "\"horizon\"", 1);
    assert!(serde_json::from_str::<ScenarioSpec>(&bad).is_err());
}
