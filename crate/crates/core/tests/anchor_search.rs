use lesionkit::anchor_opt::{
    coverage_objective, de_optimize, decode_genome, maximize_with, sphere_self_test, AnchorConfig, AnchorGenome,
    DeSettings, ObjectiveMode, DEFAULT_SIZES, GENOME_BOUNDS,
};
use lesionkit::geometry::{AnchorPlacement, BBox};
use lesionkit::synthetic::LesionBoxModel;
use proptest::prelude::*;

fn reported_optimum() -> AnchorConfig {
    decode_genome(&AnchorGenome::from_array([0.425, 0.540, 0.680, 1.78, 3.27]), &DEFAULT_SIZES).unwrap()
}

fn objective(cfg: &AnchorConfig, corpus: &[BBox]) -> f64 {
    coverage_objective(cfg, corpus, ObjectiveMode::MeanIou, AnchorPlacement::Centered).unwrap()
}

#[test]
fn sphere_reaches_origin() {
    let settings = DeSettings { max_generations: 150, seed: 42, ..DeSettings::default() };
    let f = sphere_self_test(&settings).unwrap();
    assert!(f.abs() < 1e-6, "{f}");
}

#[test]
fn search_beats_default_on_lesion_sized_boxes() {
    let corpus = LesionBoxModel::default().sample(400, 1);
    let settings = DeSettings { seed: 5, ..DeSettings::default() };
    let search = de_optimize(&corpus, &DEFAULT_SIZES, &settings).unwrap();
    search.genome.check_bounds().unwrap();
    for w in search.trace.windows(2) {
        assert!(w[1] >= w[0]);
    }
    let default = objective(&AnchorConfig::retinanet_default(), &corpus);
    assert!(search.objective > default, "{} vs {default}", search.objective);
    assert!(objective(&reported_optimum(), &corpus) > default);
    assert_eq!(objective(&search.config, &corpus), search.objective);
}

#[test]
fn every_generation_stays_in_bounds_and_reruns_match() {
    let corpus = LesionBoxModel::default().sample(100, 2);
    let settings = DeSettings { max_generations: 30, seed: 9, ..DeSettings::default() };
    let f = |x: &[f64]| {
        let cfg = decode_genome(&AnchorGenome::from_array(x.try_into().unwrap()), &DEFAULT_SIZES).unwrap();
        objective(&cfg, &corpus)
    };
    let mut generations = 0;
    let report = maximize_with(f, &GENOME_BOUNDS, &settings, |_, pop| {
        generations += 1;
        for member in pop {
            for (v, (lo, hi)) in member.iter().zip(GENOME_BOUNDS) {
                assert!((lo..=hi).contains(v), "{v} outside [{lo}, {hi}]");
            }
        }
    })
    .unwrap();
    assert_eq!(generations, 31);
    assert_eq!(report.trace.len(), 31);
    let again = maximize_with(f, &GENOME_BOUNDS, &settings, |_, _| {}).unwrap();
    assert_eq!(report, again);
}

/// Boxes under 30 px, or at least 3:1 elongated. Each such box is covered at
/// least as well by the reported optimum as by the default.
fn small_or_elongated() -> impl Strategy<Value = Vec<BBox>> {
    let small = (2.0f64..30.0, 1.0f64..6.0);
    let elongated = (2.0f64..256.0, 3.0f64..6.0);
    let side = prop_oneof![small, elongated];
    prop::collection::vec((side, any::<bool>()), 1..40).prop_map(|sides| {
        sides
            .into_iter()
            .map(|((long, aspect), tall)| {
                let short = (long / aspect).max(1.0);
                let (w, h) = if tall { (short, long) } else { (long, short) };
                BBox::from_center(256.0, 256.0, w, h).unwrap()
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn reported_optimum_beats_default_on_small_or_elongated(corpus in small_or_elongated()) {
        let ours = objective(&reported_optimum(), &corpus);
        let default = objective(&AnchorConfig::retinanet_default(), &corpus);
        prop_assert!(ours >= default, "{} < {}", ours, default);
    }

    #[test]
    fn decoded_ratios_are_reciprocal_pairs(g in prop::array::uniform5(0.0f64..1.0)) {
        let x: Vec<f64> = g.iter().zip(GENOME_BOUNDS).map(|(t, (lo, hi))| lo + t * (hi - lo)).collect();
        let cfg = decode_genome(&AnchorGenome::from_array(x.try_into().unwrap()), &DEFAULT_SIZES).unwrap();
        prop_assert_eq!(cfg.scales.len(), 3);
        prop_assert_eq!(cfg.ratios.len(), 5);
        prop_assert!(cfg.ratios.contains(&1.0));
        for i in 0..5 {
            prop_assert!((cfg.ratios[i] * cfg.ratios[4 - i] - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn mid_sized_near_two_to_one_favors_default() {
    let corpus = [BBox::from_center(256.0, 256.0, 58.0, 26.0).unwrap()];
    assert!(objective(&reported_optimum(), &corpus) < objective(&AnchorConfig::retinanet_default(), &corpus));
}
