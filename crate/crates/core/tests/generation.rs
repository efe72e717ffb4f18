use std::collections::HashSet;

use dig_core::curriculum::{stage_dataset, DataConfig, KRule, Split, StageSpec};
use dig_core::render::{
    differing_pixels, render_pair, silhouette, silhouette_box, Camera, Dims, RenderError,
};
use dig_core::scene::{make_pair, ModKind, PairParams};
use dig_core::seed;
use rayon::prelude::*;

#[test]
fn difference_count_is_uniform() {
    let params = PairParams::default();
    let mut counts = [0usize; 5];
    for s in 0..10_000u64 {
        counts[make_pair(seed::derive(77, &[s]), 4, None, &params)
            .unwrap()
            .k] += 1;
    }
    for (k, &c) in counts.iter().enumerate().skip(1) {
        let freq = c as f64 / 10_000.0;
        assert!((freq - 0.25).abs() <= 0.03, "k={k}: {freq}");
    }
}

#[test]
fn differing_pixels_are_covered_and_every_box_is_visible() {
    let dims = Dims::default();
    let camera = Camera::for_dims(dims);
    let params = PairParams::default();
    let rendered: usize = (0..400u64)
        .into_par_iter()
        .map(|s| {
            let pair = make_pair(seed::derive(5, &[s]), 4, None, &params).unwrap();
            let r = match render_pair(&pair, &camera, dims) {
                Ok(r) => r,
                Err(
                    RenderError::InvisibleDifference { .. } | RenderError::DegenerateBox { .. },
                ) => return 0,
                Err(e) => panic!("{e}"),
            };
            let boxes = &r.annotation.boxes;
            assert_eq!(boxes.len(), pair.k);
            let diff = differing_pixels(&r.image_a, &r.image_b);
            for &(x, y) in &diff {
                assert!(
                    boxes.iter().any(|b| b.contains_pixel(x, y)),
                    "{} ({x},{y})",
                    pair.pair_id
                );
            }
            for b in boxes {
                assert!(b.within(dims));
                assert!(
                    diff.iter().any(|&(x, y)| b.contains_pixel(x, y)),
                    "{}",
                    pair.pair_id
                );
            }
            1
        })
        .sum();
    assert!(rendered > 300);
}

#[test]
fn boxes_are_tight_around_the_edited_silhouettes() {
    let dims = Dims::default();
    let camera = Camera::for_dims(dims);
    let params = PairParams::default();
    for s in 0..50u64 {
        let pair = make_pair(seed::derive(6, &[s]), 3, None, &params).unwrap();
        let Ok(r) = render_pair(&pair, &camera, dims) else {
            continue;
        };
        for (m, b) in pair.mods.iter().zip(&r.annotation.boxes) {
            let mut px: Vec<(u32, u32)> = Vec::new();
            for o in m.before.iter().chain(m.after.iter()) {
                px.extend(silhouette(o, &camera, dims));
            }
            let xs = px.iter().map(|p| p.0);
            let ys = px.iter().map(|p| p.1);
            let (x0, x1) = (xs.clone().min().unwrap(), xs.max().unwrap());
            let (y0, y1) = (ys.clone().min().unwrap(), ys.max().unwrap());
            assert_eq!(
                b.to_array(),
                [x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64]
            );
            if m.kind == ModKind::Remove {
                assert_eq!(
                    Some(*b),
                    silhouette_box(m.before.as_ref().unwrap(), &camera, dims)
                );
            }
        }
    }
}

#[test]
fn single_color_change_yields_one_box_holding_all_changes() {
    let dims = Dims::default();
    let camera = Camera::for_dims(dims);
    let params = PairParams::default();
    let mut seen = 0;
    for s in 0..400u64 {
        let pair = make_pair(seed::derive(8, &[s]), 1, Some(1), &params).unwrap();
        if pair.mods[0].kind != ModKind::ColorChange {
            continue;
        }
        let Ok(r) = render_pair(&pair, &camera, dims) else {
            continue;
        };
        assert_eq!(r.annotation.boxes.len(), 1);
        let b = r.annotation.boxes[0];
        assert!(differing_pixels(&r.image_a, &r.image_b)
            .iter()
            .all(|&(x, y)| b.contains_pixel(x, y)));
        seen += 1;
    }
    assert!(seen >= 20, "only {seen} color changes");
}

#[test]
fn mixed_dataset_spans_all_counts() {
    let stage = StageSpec {
        name: "digmix".into(),
        k_rule: KRule::Uniform { n_max: 4 },
        count_hint_given: false,
        n_pairs: 4000,
        n_updates: 0,
        eval_pairs: 0,
    };
    let data = stage_dataset(&stage, 11, Split::Train, &DataConfig::default()).unwrap();
    assert_eq!(data.len(), 4000);
    let mut counts = [0usize; 5];
    for s in &data {
        counts[s.annotation().boxes.len()] += 1;
        assert_eq!(s.count_hint, 0);
    }
    for k in 1..=4 {
        assert!(counts[k] as f64 / 4000.0 >= 0.15, "{counts:?}");
    }
    let ids: HashSet<_> = data.iter().map(|s| s.pair.pair_id.clone()).collect();
    assert_eq!(ids.len(), data.len());
}
