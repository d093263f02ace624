use pyo3::ffi::c_str;
use pyo3::prelude::*;
use pyo3::types::PyDict;

#[test]
fn module_runs_from_an_embedded_interpreter() {
    use verbattr_py::verbattr_py;
    pyo3::append_to_inittab!(verbattr_py);
    Python::initialize();
    Python::attach(|py| {
        let module = py.import("verbattr_py").unwrap();
        let globals = PyDict::new(py);
        globals.set_item("va", module).unwrap();
        py.run(
            c_str!(
                r#"
schema = va.Schema()
assert schema.group_sizes() == [1, 1, 1, 1, 3, 12, 5]
row = schema.binarize([1] * 24)
assert schema.debinarize(row) == [1] * 24
assert va.predict_topk([0.0, 2.0, 2.0], 2) == [1, 2]
assert va.prng_u64(42, 1)[0] == 0x15780b2e0c2ec716
code, rep = va.run(["gradcheck"])
assert code == 0 and rep["all_passed"] == "true"
try:
    va.run(["synth"])
    raise AssertionError("missing flag accepted")
except ValueError:
    pass
"#
            ),
            Some(&globals),
            None,
        )
        .unwrap();
    });
}
