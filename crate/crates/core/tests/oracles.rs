mod common;

use common::criteria::*;

#[test]
fn cam_tmp_matches_pixel_loop() {
    oracle_cam_tmp().unwrap();
}

#[test]
fn otsu_matches_exhaustive_search() {
    oracle_otsu().unwrap();
}

#[test]
fn iou_and_box_match_enumeration() {
    oracle_iou_and_box().unwrap();
}

#[test]
fn crf_matches_double_loop() {
    oracle_crf().unwrap();
}
