#![no_main]

use libfuzzer_sys::fuzz_target;
use ridership_core::ingest::parse_service_weather_reader;

fuzz_target!(|data: &[u8]| {
    let _ = parse_service_weather_reader(data);
});
