#![no_main]

use labelsynth_cli::config::parse_file;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(file) = parse_file(text) {
        if let Some(spec) = &file.backbone {
            // Opening validates; dumps may point anywhere, so only small toys.
            if let labelsynth::backbone::BackboneSpec::Toy(cfg) = spec {
                if cfg.side() <= 256 && cfg.resolutions.len() <= 8 {
                    let _ = spec.open();
                }
            }
        }
    }
});
