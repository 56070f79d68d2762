import numpy as np
import pytest

from pcad import kernels
from pcad.backbone import BackboneConfig

# small enough for finite differences, wide enough to exercise every layer
NARROW = dict(mlp1=(4, 5, 6), mid=7, out=9, align_point=(4, 5, 6), align_dense=(5, 4), seg_hidden=(5, 4))
# a quarter of the canonical widths: trains like the real network, runs in seconds
MEDIUM = dict(mlp1=(32, 64, 64), mid=128, out=256, align_point=(32, 64, 128), align_dense=(64, 32), seg_hidden=(64, 32))


@pytest.fixture
def narrow_cfg():
    return BackboneConfig(**NARROW)


@pytest.fixture(params=["compiled", "python"])
def backend(request, monkeypatch):
    """Run a test against each kernel implementation."""
    if request.param == "compiled":
        if kernels.compiled_backend is None:
            pytest.skip("compiled kernels not built")
        impl = kernels.compiled_backend
    else:
        impl = kernels.python_backend
    for name in ("max_pool", "bn_train", "bn_eval", "bn_backward", "adam_update"):
        monkeypatch.setattr(kernels, name, getattr(impl, name))
    return request.param



# acceptance criteria: one PASS/FAIL line each in the terminal summary --------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when not in ("setup", "call"):
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "seconds": 0.0, "detail": []})
    entry["seconds"] += report.duration
    entry["detail"] += [v for k, v in report.user_properties if k == "detail" and v not in entry["detail"]]
    if report.failed:
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status} ({e['seconds']:.1f} s) {e['title']}")
        for line in e["detail"]:
            terminalreporter.write_line(f"    {line}")
