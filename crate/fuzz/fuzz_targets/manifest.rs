#![no_main]

use labelsynth::factory::DatasetManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = DatasetManifest::from_json(text) {
        let json = m.to_json();
        let again = DatasetManifest::from_json(&json).expect("written manifest parses");
        assert_eq!(again.to_json(), json);
        let _ = m.kept_ids();
    }
});
