import logging
import time
from types import SimpleNamespace

import pytest

from dbsynth.cli import run_abstract, run_check, run_simulate, run_synthesize
from dbsynth.network import Network, load_config


def build_run(name, out, **sim):
    net = Network(load_config(name))
    t0 = time.perf_counter()
    report = run_check(net)
    abstractions = run_abstract(net, out, report=report)
    controllers = run_synthesize(net, abstractions, out)
    build_seconds = time.perf_counter() - t0
    traj, elapsed = run_simulate(net, abstractions, controllers, out, **sim)
    return SimpleNamespace(net=net, out=out, report=report, abstractions=abstractions, controllers=controllers,
                           traj=traj, elapsed=elapsed, build_seconds=build_seconds)


@pytest.fixture(scope="session")
def n3_run(tmp_path_factory):
    logging.getLogger("dbsynth").setLevel(logging.ERROR)
    return build_run("paper_n3", tmp_path_factory.mktemp("n3"))
