#![no_main]

use labelsynth::uncertainty::{parse_uncertainty_log, write_uncertainty_log};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(entries) = parse_uncertainty_log(text) {
        let written = write_uncertainty_log(&entries);
        let again = parse_uncertainty_log(&written).expect("written log parses");
        assert_eq!(write_uncertainty_log(&again), written);
    }
});
