#![no_main]

use labelsynth::backbone::{decode_feature_dump, encode_feature_dump};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(sample) = decode_feature_dump(data) {
        let bytes = encode_feature_dump(&sample);
        let again = decode_feature_dump(&bytes).expect("re-encoded dump decodes");
        assert_eq!(encode_feature_dump(&again), bytes);
    }
});
