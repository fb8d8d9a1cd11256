#![no_main]

use libfuzzer_sys::fuzz_target;

// The mesh parser must reject arbitrary input with an error, never panic.
// Accepted meshes must survive a serialize/parse round trip.
fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(mesh) = pbcell::geometry::CellMesh::parse(text) {
            let again = pbcell::geometry::CellMesh::parse(&mesh.serialize())
                .expect("serialized mesh must reparse");
            assert_eq!(again.n_nodes(), mesh.n_nodes());
        }
    }
});
