from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from poseopt.graph_ir import Graph, GraphInput, OpNode, conv_attrs

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "fixtures"

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def conv(nid, src, cin, cout, k=3, stride=1, dilation=1, groups=1, bias=True, padding=None,
         tag="Backbone"):
    return OpNode(nid, "Conv2d", conv_attrs(cin, cout, k, stride, dilation, groups, bias, padding),
                  (src,), tag)


def chain(*nodes, shape=(3, 16, 16), name="g"):
    """Graph over input ``x`` whose single output is the last node."""
    return Graph(name, (GraphInput("x", shape),), tuple(nodes), (nodes[-1].id,))


@pytest.fixture
def fixtures_dir():
    return FIXTURES


ACCEPTANCE_LINES: list[str] = []


def acceptance(number: int, ok: bool, detail: str) -> None:
    line = f"ACCEPTANCE {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
