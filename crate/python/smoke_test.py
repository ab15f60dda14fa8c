"""Smoke test for the confdqn_py extension.

Build and install first:
    pip install maturin
    maturin develop --release -m crates/python/Cargo.toml
then run `python python/smoke_test.py` (or `pytest python/`).
"""

import json
import tempfile
from pathlib import Path

import confdqn_py as cd

TINY = """
version = 1
n_runs = 1

[sim]
n_patients = 150

[fqe]
iterations = 18
steps_per_iteration = 5
batch_size = 64
hidden = [8]
"""

AGENT = """
[agents.{name}]
hidden = [16]
max_steps = 60
batch_size = 32
sync_interval = 20
"""


def write_config(root: Path) -> Path:
    text = TINY + "".join(AGENT.format(name=n) for n in ["bc", "conformal_dqn", "cql", "ddqn"])
    path = root / "tiny.toml"
    path.write_text(text)
    return path


def test_codec_and_conformal_helpers():
    assert cd.N_ACTIONS == 343
    assert cd.encode_action(1, 2, 3) == 66
    assert cd.decode_action(66) == (1, 2, 3)
    assert all(cd.encode_action(*cd.decode_action(i)) == i for i in range(cd.N_ACTIONS))
    assert cd.conformal_threshold([0.1, 0.2, 0.3, 0.4], 0.5) == 0.3
    assert cd.confident_set([0.7, 0.2, 0.1], 0.8) == [0, 1]
    try:
        cd.decode_action(343)
    except cd.ConfdqnError:
        pass
    else:
        raise AssertionError("out-of-range index accepted")


def test_tiny_pipeline():
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        cfg = str(write_config(root))
        out = str(root / "out")
        manifest = json.loads(cd.gen_data(cfg, out))
        assert manifest["n_patients"] == 150
        lines = cd.train(cfg, out)
        assert len(lines) == 4 and lines[0].startswith("bc")
        [(run, n, alpha, tau)] = cd.calibrate(cfg, out)
        assert run == 0 and n > 0 and alpha == 0.15 and 0.0 <= tau <= 1.0
        [(_, _, alpha, _)] = cd.retune(0.3, cfg, out)
        assert alpha == 0.3
        report = json.loads(cd.evaluate(cfg, out))
        names = [p["policy"] for p in report["policies"]]
        assert names == ["bc", "conformal_dqn", "cql", "ddqn", "physician"]
        assert Path(cd.report(cfg, out)).read_text().startswith("#")


def test_missing_artifacts_carry_exit_code():
    with tempfile.TemporaryDirectory() as tmp:
        try:
            cd.evaluate(None, tmp)
        except cd.ConfdqnError as e:
            assert e.args[1] == 6
        else:
            raise AssertionError("evaluate without data succeeded")


if __name__ == "__main__":
    test_codec_and_conformal_helpers()
    test_missing_artifacts_carry_exit_code()
    test_tiny_pipeline()
    print("smoke test passed")
