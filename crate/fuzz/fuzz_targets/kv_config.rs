#![no_main]

use libfuzzer_sys::fuzz_target;
use ridership_core::config::{KvConfig, RouteConfig};
use ridership_core::synth::SynthConfig;
use ridership_core::tuning::{HyperParams, SearchSpace};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(kv) = text.parse::<KvConfig>() else { return };
    // the text form must parse back to the same entries
    assert_eq!(kv.to_text().parse::<KvConfig>().as_ref(), Ok(&kv));
    let _ = RouteConfig::from_kv(&kv);
    let _ = SearchSpace::from_kv(&kv);
    let _ = SynthConfig::from_kv(&kv);
    if let Ok(hp) = HyperParams::from_kv(&kv, HyperParams::joint_best()) {
        let _ = hp.validate();
    }
});
