import numpy as np
import pytest

from asrmerge.checkpoint_io import Tensor, TensorMap


def random_tensormap(rng, n_tensors=None, max_rank=3, dtypes=("F32", "F16"), max_dim=5):
    """Random map whose values are exactly representable in their storage dtype."""
    n = rng.integers(1, 21) if n_tensors is None else n_tensors
    entries = {}
    while len(entries) < n:
        name = f"layer{rng.integers(0, 1000)}.w{rng.integers(0, 10)}"
        rank = rng.integers(0, max_rank + 1)
        shape = tuple(int(d) for d in rng.integers(0, max_dim + 1, size=rank))
        dtype = str(rng.choice(dtypes))
        np_dtype = np.float32 if dtype == "F32" else np.float16
        values = rng.normal(scale=3.0, size=shape).astype(np_dtype).astype(np.float64)
        entries[name] = Tensor(values, dtype)
    return TensorMap(entries)


def random_checkpoint(rng, names=("a.weight", "b.weight", "c.bias"), shapes=((3, 4), (4, 4), (4,))):
    return TensorMap.from_arrays({n: rng.normal(size=s) for n, s in zip(names, shapes)})


@pytest.fixture
def rng():
    return np.random.default_rng(20251016)


# one PASS/FAIL line per acceptance criterion in the terminal summary
_ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _ACCEPTANCE[number] = (title, "PASS" if rep.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, status = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {title}")
