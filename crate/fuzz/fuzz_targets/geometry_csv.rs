#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(geometry) = spatial_dlm::io::parse_geometry_csv(data) {
        // Accepted geometries satisfy the distance-matrix invariants.
        let d = geometry.distances();
        let n = geometry.n_zones();
        assert_eq!(d.nrows(), n);
        assert_eq!(d.ncols(), n);
        for i in 0..n {
            assert_eq!(d[(i, i)], 0.0);
            for j in 0..n {
                assert!(d[(i, j)] >= 0.0);
                assert_eq!(d[(i, j)], d[(j, i)]);
            }
        }
    }
});
