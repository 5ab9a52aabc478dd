use tcam_web::Demo;

#[test]
fn pooling_grows_coverage_and_boxes_stay_inside() {
    let d = Demo::build(3, 4).unwrap();
    let t = 9;
    let fg = |n| d.pooled(t, n).unwrap().values.iter().filter(|&&v| v > 0.5).count();
    assert!(fg(3) >= fg(0));
    let (b, i) = d.locate_box(t, 2, 0.4).unwrap();
    let b = b.unwrap();
    assert!(b.x_max <= 96 && b.y_max <= 96);
    assert!((0.0..=1.0).contains(&i));
}

#[test]
fn samples_land_in_their_regions() {
    let d = Demo::build(1, 3).unwrap();
    let cam = d.pooled(5, 1).unwrap();
    let split = tcam::pseudo::split_regions(&cam).unwrap();
    let fg = split.foreground_mask();
    let pairs = d.sample_pairs(5, 1, 200, 7).unwrap();
    assert_eq!(pairs.len(), 200);
    for (f, b) in pairs {
        assert!(fg[[f / 96, f % 96]]);
        assert!(!fg[[b / 96, b % 96]]);
    }
    assert_eq!(d.sample_pairs(5, 1, 20, 7).unwrap(), d.sample_pairs(5, 1, 20, 7).unwrap());
}

#[test]
fn rejects_speed_that_leaves_the_frame() {
    assert!(Demo::build(0, 20).is_err());
    assert!(Demo::build(0, 7).is_ok());
}
