use pyo3::prelude::*;
use pyo3::types::PyDict;
use realtalk_py::realtalk_module;

#[test]
fn module_runs_in_an_embedded_interpreter() {
    pyo3::append_to_inittab!(realtalk_module);
    Python::initialize();
    Python::attach(|py| {
        let locals = PyDict::new(py);
        py.run(
            cr#"
import realtalk as rt
assert rt.DEFAULT_DELTA == 0.15
assert len(rt.DELTA_SWEEP) == 7
cfg = rt.Config.from_json('{"delta": 0.3}')
assert cfg.delta == 0.3
try:
    rt.Config.from_json('{"deltaa": 0.3}')
    raise SystemExit("unknown key accepted")
except ValueError:
    pass
try:
    rt.infer(cfg, "bored")
    raise SystemExit("unknown emotion accepted")
except ValueError as e:
    assert "neutral" in str(e)
img = [0.5] * (12 * 12 * 3)
assert rt.psnr(img, img, 12, 12) == 99.0
zero = [[0.0] * rt.LANDMARK_DIM]
assert rt.lmd(zero, zero, "face") == 0.0
out = rt.apply_deformation(zero, [[1.0] * rt.LANDMARK_DIM], 0.5)
assert out[0][0] == 0.5
"#,
            None,
            Some(&locals),
        )
        .unwrap();
    });
}
