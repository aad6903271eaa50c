import numpy as np
import pytest
import torch

from tetsplat.field import StructuredField
from tetsplat.scene import randomize_field
from tetsplat.tetmesh import build_uniform_grid


def make_field(seed=0, res=(2, 2, 2), sh_degree=2, n_split=4, n_masked=2, warp=True):
    """Random field with a warped map, a few splits and some masked leaves."""
    rng = np.random.default_rng(seed)
    fld = StructuredField(build_uniform_grid(([0, 0, 0], [1, 1, 1]), res), sh_degree=sh_degree)
    randomize_field(fld, rng)
    if warp:
        with torch.no_grad():
            fld.map.randomize_(torch.Generator().manual_seed(seed), out_scale=0.02)
    leaves = rng.choice(fld.mesh.n_tets, size=n_split, replace=False)
    fld.split(leaves)
    with torch.no_grad():
        fld.control_raw.normal_(0, 0.5, generator=torch.Generator().manual_seed(seed + 1))
    if n_masked:
        fld.masked[rng.choice(fld.forest.leaves, size=n_masked, replace=False)] = True
    return fld


@pytest.fixture
def field_factory():
    return make_field


# acceptance bookkeeping: one PASS/FAIL line per criterion in the terminal summary
ACCEPTANCE = {}


@pytest.fixture
def report(request):
    marker = request.node.get_closest_marker("acceptance")
    number = marker.args[0]

    def record(ok, detail):
        ACCEPTANCE[number] = (bool(ok), detail)
        print("criterion %d: %s  %s" % (number, "PASS" if ok else "FAIL", detail))
        return ok

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or rep.when != "call" or not rep.failed:
        return
    number = marker.args[0]
    ok, detail = ACCEPTANCE.get(number, (True, ""))
    if ok:
        msg = str(call.excinfo.value).strip().splitlines()
        ACCEPTANCE[number] = (False, "error: %s" % (msg[0] if msg else call.excinfo.typename))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line("criterion %2d: %s  %s" % (n, "PASS" if ok else "FAIL", detail))
