#![no_main]

use labelsynth::metrics::{parse_metric_records, write_metric_records};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_metric_records(text) {
        let written = write_metric_records(&records);
        let again = parse_metric_records(&written).expect("written records parse");
        assert_eq!(write_metric_records(&again), written);
    }
});
