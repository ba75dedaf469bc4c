#![no_main]

use labelsynth::annotation::{rasterize, record_keypoints, AnnotationRecord};
use labelsynth::interpreter::LabelSchema;
use labelsynth::selection::BandParams;
use libfuzzer_sys::fuzz_target;

// Annotation submissions and selection updates as the service receives them.
fuzz_target!(|data: &[u8]| {
    let _ = serde_json::from_slice::<BandParams>(data);
    let Ok(record) = serde_json::from_slice::<AnnotationRecord>(data) else { return };
    let seg = LabelSchema::segmentation(["background", "body", "part"]).unwrap();
    let kp = LabelSchema::keypoints(["head", "tail"]).unwrap();
    for (h, w) in [(32, 32), (5, 7)] {
        if let Ok(mask) = rasterize(&record, h, w, &seg) {
            assert_eq!((mask.width, mask.height), (w, h));
            assert_eq!(mask.out_of_schema(seg.num_labels()), 0);
        }
        if let Ok(points) = record_keypoints(&record, h, w, &kp) {
            assert_eq!(points.len(), 2);
        }
    }
});
