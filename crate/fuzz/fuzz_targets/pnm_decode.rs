#![no_main]

use diffsr::image::decode_pnm;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = decode_pnm(data);
});
