use pyo3::prelude::*;

#[pymodule]
fn ragblock_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
