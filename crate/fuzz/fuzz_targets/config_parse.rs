#![no_main]

use diffsr_cli::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let mut cfg = RunConfig::default();
        if cfg.apply_text(text).is_ok() {
            let _ = cfg.train_config();
            let _ = cfg.sampler_config();
            let _ = cfg.schedule();
        }
    }
});
