#![no_main]

use diffsr::model::ModelConfig;
use diffsr::train::FeatureExtractor;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = ModelConfig::from_descriptor(text);
        let _ = FeatureExtractor::from_descriptor(text);
    }
});
