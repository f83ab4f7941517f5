mod common;

#[test]
fn seven_inner_steps_match_plain_sgd() {
    let d = common::inner_loop_deviation();
    assert!(d < 1e-10, "max deviation {d:e}");
}

#[test]
fn first_order_outer_update_matches_hand_derivation() {
    let d = common::outer_update_deviation();
    assert!(d < 1e-8, "max deviation {d:e}");
}
