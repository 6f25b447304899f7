#![no_main]

use libfuzzer_sys::fuzz_target;
use ridership_core::ingest::{parse_weather_reader, CategoryAliases, WeatherCategory};

fuzz_target!(|data: &[u8]| {
    let mut aliases = CategoryAliases::new();
    aliases.insert("晴れ", WeatherCategory::Sunny);
    aliases.insert("雨", WeatherCategory::Rain);
    let _ = parse_weather_reader(data, &aliases);
});
