mod common;

#[test]
fn quantizer_matches_exhaustive_search() {
    let (n, bad) = common::quantizer_oracle(2000, 3);
    assert_eq!(bad, 0, "{bad} of {n} instances disagree");
}
