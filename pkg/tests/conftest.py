import json
from pathlib import Path

import numpy as np
import pytest

from gsticp.models import Belief3, NodeKind, NodeState
from gsticp.netsim import Network

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


def make_network(anchors, agents, priors=None, prior_std=10.0, comm_range=1000.0, index=None):
    """Anchors get ids 0..A-1, agents follow; ``priors`` defaults to truth."""
    nodes = []
    for k, p in enumerate(anchors):
        nodes.append(NodeState(k, NodeKind.ANCHOR, p, Belief3.point(p)))
    for k, p in enumerate(agents):
        mean = p if priors is None else priors[k]
        nodes.append(NodeState(len(anchors) + k, NodeKind.AGENT, p, Belief3.isotropic(mean, prior_std)))
    return Network(nodes, comm_range, index)


@pytest.fixture
def tetra_anchors():
    return np.array([[0.0, 0.0, 0.0], [100.0, 0.0, 5.0], [0.0, 100.0, 40.0], [100.0, 100.0, 20.0]])


@pytest.fixture
def write_json(tmp_path):
    def _write(name, doc):
        p = tmp_path / name
        p.write_text(json.dumps(doc), encoding="utf-8")
        return p
    return _write


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
