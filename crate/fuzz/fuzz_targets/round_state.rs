#![no_main]

use labelsynth::annotation::RoundState;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(state) = RoundState::from_json(text) {
        let json = state.to_json();
        let again = RoundState::from_json(&json).expect("written round state parses");
        assert_eq!(again.to_json(), json);
    }
});
