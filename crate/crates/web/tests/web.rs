use lxfuse_web::{costs, degrade_pixels, neighborhood};

fn ramp(w: usize, h: usize) -> Vec<u8> {
    (0..w * h)
        .flat_map(|i| [(i * 5) as u8, (i * 3) as u8, (255 - i) as u8, 200])
        .collect()
}

#[test]
fn clean_degrade_returns_the_input() {
    let px = ramp(6, 5);
    assert_eq!(degrade_pixels(&px, 6, 5, "fog", "clean", 0.8).unwrap(), px);
}

#[test]
fn darkness_scales_color_and_keeps_alpha() {
    let px = ramp(6, 5);
    let out = degrade_pixels(&px, 6, 5, "darkness", "highest", 0.8).unwrap();
    for (o, p) in out.chunks_exact(4).zip(px.chunks_exact(4)) {
        assert_eq!(o[3], p[3]);
        for c in 0..3 {
            assert!((f64::from(o[c]) - (0.1 * f64::from(p[c])).round()).abs() <= 1.0);
        }
    }
}

#[test]
fn degrade_rejects_bad_input() {
    assert!(degrade_pixels(&[0; 7], 2, 1, "fog", "low", 0.8).is_err());
    assert!(degrade_pixels(&ramp(2, 2), 2, 2, "snow", "low", 0.8).is_err());
    assert!(degrade_pixels(&ramp(2, 2), 2, 2, "fog", "extreme", 0.8).is_err());
}

#[test]
fn neighborhood_sizes() {
    for (r, n) in [(1.0, 5), (2.0, 13), (3.0, 29)] {
        assert_eq!(neighborhood(24, 24, r, 12, 12).unwrap().len(), n);
    }
    assert_eq!(neighborhood(24, 24, 1.0, 0, 0).unwrap(), vec![0, 1, 24]);
    assert!(neighborhood(4, 4, 1.0, 4, 0).is_err());
}

#[test]
fn cost_explorer_at_full_scale() {
    let c = costs(1024, 24, &[1.0, 2.0, 3.0], 4, 0).unwrap();
    assert_eq!(c.total_params, 58_756_096);
    assert_eq!(c.visual_ratio, 4.0);
    assert!(c.overhead_percent < 1.0);
    assert_eq!(c.pairs_per_block.len(), 3);
    assert!(costs(1024, 24, &[2.0, 1.0], 4, 0).is_err(), "radii must not decrease");
}
