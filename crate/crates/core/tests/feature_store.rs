mod common;

use common::store;

#[test]
fn ten_thousand_records_round_trip_at_512() {
    let dir = tempfile::tempdir().unwrap();
    store::round_trip(dir.path(), 10_000, 512).unwrap();
}

#[test]
fn ten_thousand_records_round_trip_at_768() {
    let dir = tempfile::tempdir().unwrap();
    store::round_trip(dir.path(), 10_000, 768).unwrap();
}

#[test]
fn damaged_shards_raise_specific_errors() {
    let dir = tempfile::tempdir().unwrap();
    store::corruption(dir.path()).unwrap();
}
