"""Shared, session-scoped training runs.

Full training runs take minutes each on one core, so every map is trained
once per session and reused by the unit, CLI and acceptance tests.
"""

import json
import time
from pathlib import Path

import pytest

from einn import cli, inverse, models, net

SCHEFFER_SEEDS = (0, 7, 11)  # the first is the CLI default
ACCEPTANCE = {}  # criterion -> (ok, detail)


def record(criterion, ok, detail):
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}: {detail}")
SAMPLES = {"scheffer": 301, "may": 301, "abeta_ca": 301, "linear_toy": 51}


class Runs:
    def __init__(self, root: Path):
        self.root = root
        self.maps = {}
        self.cli = {}

    def train(self, model_id, seed=0):
        key = (model_id, seed)
        if key not in self.maps:
            if model_id == "scheffer":
                self.maps[key] = inverse.load_map(self.cli_train("scheffer", seed)["map"])
            else:
                spec = models.zoo_entry(model_id).spec
                grid = inverse.sample_candidates(spec.candidate_window, SAMPLES[model_id],
                                                 coordinate=spec.candidate_coordinate)
                self.maps[key] = inverse.train(spec, grid, net.TrainConfig(rng_seed=seed))
        return self.maps[key]

    def cli_train(self, model_id, seed, tag="a"):
        """`train` then `thresholds` through the command line; records exit codes and wall time."""
        key = (model_id, seed, tag)
        if key not in self.cli:
            out = self.root / f"{model_id}-{seed}-{tag}"
            out.mkdir()
            argv = ["train", "--model", model_id, "--samples", str(SAMPLES[model_id]), "--seed", str(seed),
                    "--out-dir", str(out)]
            if model_id == "scheffer":
                argv[3:3] = ["--range", "0:1.5"]
            t0 = time.perf_counter()
            train_code = cli.main(argv)
            map_path = out / f"{model_id}.map.json"
            report_path = out / "thresholds.json"
            thr_code = cli.main(["thresholds", str(map_path), "--out", str(report_path)])
            elapsed = time.perf_counter() - t0
            self.cli[key] = {"map": map_path, "train_code": train_code, "thresholds_code": thr_code,
                             "report_text": report_path.read_text(), "seconds": elapsed,
                             "report": json.loads(report_path.read_text())}
        return self.cli[key]


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    return Runs(tmp_path_factory.mktemp("runs"))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[criterion]
        terminalreporter.write_line(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}: {detail}")
