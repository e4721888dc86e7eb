#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| motionmask_fuzz::checks::mask_png(data));
