#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(recipe) = spatial_dlm::io::parse_recipe(text) {
            // A recipe that parses must be dimensionally coherent.
            assert_eq!(recipe.params.n_zones(), recipe.geometry.n_zones());
            assert_eq!(recipe.grid.gap_scales().len(), recipe.grid.len());
        }
    }
});
