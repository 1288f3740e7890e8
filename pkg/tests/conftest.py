import numpy as np
import pytest

from cxrnet import functional as F
from cxrnet.gradcheck import kink_margin
from cxrnet.tensor import Tensor

# inputs drawn at this scale keep float32 rounding of the forward pass well
# below the tolerance of a central difference at step 1e-3
INPUT_SCALE = 0.5
MIN_KINK_MARGIN = 0.01


def smooth_point(build, seed, attempts=400):
    """Draw ``(f, tensors)`` from ``build(rng)`` until the point is >= 0.01 away
    from every ReLU hinge and max-pool tie, so finite differences are valid."""
    for attempt in range(attempts):
        rng = np.random.default_rng([seed, attempt])
        f, tensors = build(rng)
        for t in tensors:
            t.requires_grad = True
        if kink_margin(f(*tensors)) >= MIN_KINK_MARGIN:
            return f, tensors
    raise RuntimeError(f"no smooth point found for seed {seed}")


def normal(rng, shape, scale=1.0):
    return Tensor((scale * rng.standard_normal(shape)).astype(np.float32))


def bottleneck_builder(stride, cin, mid):
    from cxrnet.models import Bottleneck

    def build(rng):
        block = Bottleneck("b", cin, mid, stride, rng)
        side = 4 if stride == 1 else 6  # >= 18 values per channel in every batch-norm after striding
        x = normal(rng, (2, cin, side, side), INPUT_SCALE)
        params = [p for u in block.units for p in u.parameters()]

        def f(x, *ps):
            return block(x, training=True)

        # batch statistics are used; running statistics are irrelevant here
        return f, [x] + params

    return build


# one line per acceptance criterion, printed after the run
VERDICTS: list[str] = []


def verdict(name: str, passed: bool | None, detail: str = "") -> None:
    tag = "SKIP" if passed is None else "PASS" if passed else "FAIL"
    line = f"{tag} {name}" + (f": {detail}" if detail else "")
    VERDICTS.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


__all__ = ["F", "INPUT_SCALE", "normal", "smooth_point", "bottleneck_builder", "verdict"]
