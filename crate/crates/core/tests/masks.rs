mod common;

use common::masks;

#[test]
fn crafted_masks_match_goldens() {
    for case in masks::cases() {
        masks::check_case(&case).unwrap();
    }
}

#[test]
fn hand_drawn_expectations_are_consistent() {
    // the keep-two case drops exactly the smallest rectangle
    let cases = masks::cases();
    let keep = cases.iter().find(|c| c.name == "keep_two_largest").unwrap();
    let dropped = keep.input.data().iter().filter(|&&v| v).count()
        - keep.expected.as_ref().unwrap().data().iter().filter(|&&v| v).count();
    assert_eq!(dropped, 36);
}
