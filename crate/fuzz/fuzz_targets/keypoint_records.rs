#![no_main]

use labelsynth::keypoints::{parse_keypoint_records, write_keypoint_records};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_keypoint_records(text) {
        let written = write_keypoint_records(&records);
        let again = parse_keypoint_records(&written).expect("written records parse");
        assert_eq!(write_keypoint_records(&again), written);
    }
});
