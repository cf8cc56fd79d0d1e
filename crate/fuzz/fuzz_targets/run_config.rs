#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(config) = spatial_dlm::io::parse_run_config(text, Path::new(".")) {
            // Accepted configurations have already passed validation.
            assert!(config.mcmc.burn_in < config.mcmc.iterations);
            assert!(config.mcmc.thin >= 1);
            assert!(config.harmonic.period > 0.0);
        }
    }
});
