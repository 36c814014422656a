mod oracles;

fn ok(r: oracles::Outcome) {
    if let Err(e) = r {
        panic!("{e}");
    }
}

#[test]
fn iou_equals_pixel_count_on_integer_boxes() {
    ok(oracles::iou_matches_raster(500, 1));
}

#[test]
fn delta_encoding_round_trips() {
    ok(oracles::delta_round_trip(10_000, 2));
}

#[test]
fn point_distances_round_trip_exactly() {
    ok(oracles::point_distance_round_trip(10_000, 3));
}

#[test]
fn ellipse_clicks_are_inside_and_centered() {
    ok(oracles::ellipse_sampler(100_000, 4));
}

#[test]
fn roi_align_matches_sampled_bilinear_oracle() {
    ok(oracles::roi_align_oracle(300, 5));
}
