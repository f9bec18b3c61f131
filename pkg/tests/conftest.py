import json
import os
from pathlib import Path

import pytest

from cissbench import experiment
from cissbench.config import ExperimentConfig

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    number, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed and not detail:
        detail = str(rep.longrepr).strip().splitlines()[-1][:160]
    _RESULTS[number] = (title, "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL"), detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        title, status, detail = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}: {title}" + (f" | {detail}" if detail else ""))


class Bench:
    """Trains and diagnoses reference-preset runs once per session.

    Runs land in ``$CISSBENCH_TEST_RUNS`` when set (so repeated sessions
    reuse finished runs), otherwise in a pytest temporary directory.
    """

    def __init__(self, root):
        self.root = Path(root)
        self._cache = {}

    def config(self, method="finetune", regime="disjoint", loss="ce", seed=0, **train):
        over = [f"output_dir={json.dumps(str(self.root))}", f"train.method={method}",
                f"tasks.regime={regime}", f"train.loss_kind={loss}"]
        over += [f"train.{k}={json.dumps(v)}" for k, v in train.items()]
        return ExperimentConfig.preset("voc15-5-mini", overrides=over, seed=seed)

    def run(self, method="finetune", regime="disjoint", loss="ce", seed=0, probes=(), **train):
        """Train (if needed), run ``probes`` and return the run's metrics plus probe JSON."""
        cfg = self.config(method, regime, loss, seed, **train)
        key = (cfg.hash(), tuple(sorted(probes)))
        if key not in self._cache:
            d, _ = experiment.cmd_train(cfg)
            if probes:
                experiment.cmd_diagnose(d, list(probes))
            out = json.loads((d / "metrics.json").read_text())
            for name in ("stitch", "bias", "cka"):
                p = d / f"{name}.json"
                if p.exists():
                    out[name] = json.loads(p.read_text())
            self._cache[key] = out
        return self._cache[key]

    def reference(self, seed=0, regime="disjoint"):
        cfg = self.config(regime=regime, seed=seed)
        stream = experiment.build_stream(cfg)
        return cfg, stream, experiment.cached_first_task(cfg, stream)


@pytest.fixture(scope="session")
def bench(tmp_path_factory):
    root = os.environ.get("CISSBENCH_TEST_RUNS") or tmp_path_factory.mktemp("bench")
    saved = os.environ.pop("CISSBENCH_OUT", None)
    yield Bench(root)
    if saved is not None:
        os.environ["CISSBENCH_OUT"] = saved
