#![no_main]

use libfuzzer_sys::fuzz_target;

use pbcell::fem::Field;
use pbcell::geometry::CellMesh;

// The field parser must reject arbitrary input with an error, never panic.
fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let mesh = CellMesh::build_slab(1.0, 4, 1.0).unwrap();
        if let Ok(field) = Field::parse(text, &mesh) {
            let again = Field::parse(&field.serialize(), &mesh)
                .expect("serialized field must reparse");
            assert_eq!(again.values.len(), field.values.len());
        }
    }
});
