#![no_main]

use labelsynth::raster::{LabelMask, RgbImage};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = RgbImage::from_png(data) {
        let bytes = img.to_png().expect("decoded image encodes");
        assert_eq!(RgbImage::from_png(&bytes).expect("re-encoded image decodes"), img);
    }
    if let Ok(mask) = LabelMask::from_png(data) {
        let _ = mask.out_of_schema(5);
    }
});
