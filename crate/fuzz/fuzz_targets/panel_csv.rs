#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Parsing must never panic; on success the panel invariants hold and
    // the writer round-trips what the reader produced.
    if let Ok(ingest) = spatial_dlm::io::parse_panel_csv(data) {
        assert_eq!(ingest.panel.n_zones(), ingest.zone_ids.len());
        let mut buf = Vec::new();
        spatial_dlm::io::write_panel_csv(&ingest.panel, &ingest.zone_ids, &mut buf)
            .expect("writing a parsed panel succeeds");
        let again = spatial_dlm::io::parse_panel_csv(buf.as_slice()).expect("round trip re-parses");
        assert_eq!(again.panel, ingest.panel);
    }
});
