#![no_main]

use libfuzzer_sys::fuzz_target;
use ridership_core::ingest::{parse_ridership_reader, RidershipSchema};

fuzz_target!(|data: &[u8]| {
    let _ = parse_ridership_reader(data, &RidershipSchema::default());
});
