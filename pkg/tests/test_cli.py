import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import lora_checkpoint, random_checkpoint
from graft.baselines import TiesConfig, ties_merge
from graft.cli import main
from graft.compatibility import ActivationTrace, analyze_trace
from graft.core import FOLD_ORDER_KEY, GateConfig, fuse_many
from graft.tensor_store import Checkpoint, Tensor, TensorRole, load_checkpoint, save_checkpoint


def _save(tmp_path, name, ckpt):
    path = tmp_path / name
    save_checkpoint(ckpt, path)
    return str(path)


def _sibling(ckpt, seed):
    r = np.random.default_rng(seed)
    return Checkpoint({n: Tensor(r.normal(size=t.shape), t.role) for n, t in ckpt.items()})


@pytest.fixture
def role_ckpt(rng):
    return random_checkpoint(rng, 4, roles=[TensorRole.ATTENTION, TensorRole.MLP])


def test_merge_self_is_resave(tmp_path, role_ckpt):
    base = _save(tmp_path, "base", role_ckpt)
    out = tmp_path / "out"
    assert main(["merge", base, base, "--out", str(out)]) == 0
    resave = tmp_path / "resave"
    save_checkpoint(load_checkpoint(base), resave)
    assert out.read_bytes() == resave.read_bytes()


def test_merge_attn_only_then_diff(tmp_path, role_ckpt, capsys):
    base = _save(tmp_path, "base", role_ckpt)
    graft = _save(tmp_path, "graft", _sibling(role_ckpt, 5))
    out = str(tmp_path / "out")
    assert main(["merge", base, graft, "--layers", "attn", "--out", out]) == 0
    printed = capsys.readouterr().out
    assert "w_global=" in printed and "mean_w_local=" in printed
    assert main(["diff", base, out]) == 0
    deltas = dict(line.split("\t") for line in capsys.readouterr().out.strip().splitlines())
    for name, tensor in role_ckpt.items():
        if tensor.role is TensorRole.MLP:
            assert float(deltas[name]) == 0.0
        else:
            assert float(deltas[name]) > 0.0


def test_merge_three_grafts_matches_fuse_many(tmp_path, role_ckpt):
    ckpts = [role_ckpt] + [_sibling(role_ckpt, s) for s in (1, 2, 3)]
    paths = [_save(tmp_path, f"e{i}", c) for i, c in enumerate(ckpts)]
    out = tmp_path / "out"
    assert main(["merge", *paths, "--out", str(out)]) == 0
    assert load_checkpoint(out) == fuse_many([load_checkpoint(p) for p in paths], GateConfig(), names=paths)
    assert json.loads(load_checkpoint(out).metadata[FOLD_ORDER_KEY]) == paths


def test_merge_block_and_lora(tmp_path, rng):
    lora = lora_checkpoint(rng)
    base = _save(tmp_path, "b", lora)
    graft = _save(tmp_path, "g", _sibling(lora, 8))
    out = str(tmp_path / "o")
    assert main(["merge", base, graft, "--lora", "--granularity", "block", "--block-size", "2", "--out", out]) == 0
    assert load_checkpoint(out)["embed"].data.tobytes() == lora["embed"].data.tobytes()


def test_merge_uses_config_file(tmp_path, role_ckpt):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"gate": {"layer_filter": "mlp", "gating": {"alpha": 0.0}}, "io": {"out": str(tmp_path / "o")}}))
    base = _save(tmp_path, "b", role_ckpt)
    graft = _save(tmp_path, "g", _sibling(role_ckpt, 2))
    assert main(["merge", base, graft, "--config", str(cfg)]) == 0
    out = load_checkpoint(tmp_path / "o")
    for name, tensor in role_ckpt.items():
        if tensor.role is TensorRole.ATTENTION:
            assert out[name] == tensor


@pytest.mark.parametrize(
    "config",
    [{"gate": {"bogus": 1}}, {"gate": {"a": 9.0}}, {"unknown": {}}, {"baseline": {"method": "fisher"}}, {"gate": {"bins": "ten"}}],
)
def test_bad_config_exit_2(tmp_path, role_ckpt, config):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(config))
    base = _save(tmp_path, "b", role_ckpt)
    assert main(["merge", base, base, "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_malformed_input_exit_1(tmp_path):
    bad = tmp_path / "bad"
    bad.write_bytes(b"GRAFTCK1\xff\xff\xff\xff\xff\xff\xff\xff")
    assert main(["merge", str(bad), str(bad), "--out", str(tmp_path / "o")]) == 1
    assert main(["inspect", str(bad)]) == 1
    assert main(["diff", str(bad), str(tmp_path / "missing")]) == 1


def test_merge_shape_mismatch_exit_1(tmp_path):
    a = _save(tmp_path, "a", Checkpoint.from_arrays({"w": np.zeros((2, 2))}))
    b = _save(tmp_path, "b", Checkpoint.from_arrays({"w": np.zeros((2, 3))}))
    assert main(["merge", a, b, "--out", str(tmp_path / "o")]) == 1


def test_inputs_not_mutated(tmp_path, role_ckpt):
    base = _save(tmp_path, "b", role_ckpt)
    graft = _save(tmp_path, "g", _sibling(role_ckpt, 4))
    before = [open(p, "rb").read() for p in (base, graft)]
    main(["merge", base, graft, "--out", str(tmp_path / "o")])
    main(["baseline", "dare", base, graft, "--out", str(tmp_path / "d")])
    assert [open(p, "rb").read() for p in (base, graft)] == before


# -- baseline ---------------------------------------------------------------------


def test_baseline_average_single(tmp_path, role_ckpt):
    path = _save(tmp_path, "e", role_ckpt)
    out = tmp_path / "o"
    assert main(["baseline", "average", path, path, "--out", str(out)]) == 0
    assert out.read_bytes() == open(path, "rb").read()


def test_baseline_dare_deterministic(tmp_path, role_ckpt):
    init = _save(tmp_path, "i", role_ckpt)
    e = _save(tmp_path, "e", _sibling(role_ckpt, 3))
    o1, o2 = tmp_path / "o1", tmp_path / "o2"
    assert main(["baseline", "--method", "dare", init, e, "--seed", "11", "--out", str(o1)]) == 0
    assert main(["baseline", "--method", "dare", init, e, "--seed", "11", "--out", str(o2)]) == 0
    assert o1.read_bytes() == o2.read_bytes()


def test_baseline_ties_worked_example(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"baseline": {"trim_fraction": 1.0}}))
    init = _save(tmp_path, "i", Checkpoint.from_arrays({"w": [[0.0, 0.0]]}))
    e1 = _save(tmp_path, "e1", Checkpoint.from_arrays({"w": [[0.5, -0.2]]}))
    e2 = _save(tmp_path, "e2", Checkpoint.from_arrays({"w": [[0.3, 0.4]]}))
    out = tmp_path / "o"
    assert main(["baseline", "ties", init, e1, e2, "--config", str(cfg), "--lambda", "1", "--out", str(out)]) == 0
    assert load_checkpoint(out)["w"].data.tolist() == np.array([[0.4, 0.4]], dtype=np.float32).tolist()
    expected = ties_merge(load_checkpoint(init), [load_checkpoint(e1), load_checkpoint(e2)], TiesConfig(1.0), 1.0)
    assert load_checkpoint(out) == expected


def test_baseline_unknown_method(tmp_path, role_ckpt):
    p = _save(tmp_path, "e", role_ckpt)
    assert main(["baseline", "fisher", p, p, "--out", str(tmp_path / "o")]) == 2


# -- analyze ----------------------------------------------------------------------------


def _trace_file(tmp_path, modules):
    path = tmp_path / "trace"
    save_checkpoint(ActivationTrace(modules).to_checkpoint(), path)
    return str(path)


def test_analyze_zero_trace(tmp_path, capsys):
    path = _trace_file(tmp_path, {"a": [np.zeros((2, 3))] * 2, "b": [np.zeros((1, 4))] * 2})
    assert main(["analyze", path]) == 0
    out = capsys.readouterr().out
    assert "compatibility 0.000" in out and "NotRecommended" in out
    assert main(["analyze", path, "--enforce"]) == 1


def test_analyze_matches_module(tmp_path, capsys, rng):
    modules = {f"m{i}": [rng.normal(size=(2, 3)) * (i + 1) for _ in range(3)] for i in range(3)}
    path = _trace_file(tmp_path, modules)
    assert main(["analyze", path]) == 0
    expected = analyze_trace(ActivationTrace.from_checkpoint(load_checkpoint(path))).score
    assert f"compatibility {expected:.3f}" in capsys.readouterr().out


def test_analyze_enforce_pass(tmp_path, capsys):
    modules = {
        "quiet": [np.zeros((1, 4))],
        "loud": [np.array([[3.0, -3.0, 3.0, -3.0]])],
        "mid": [np.array([[0.0, 1.0, 0.0, -1.0]])],
    }
    path = _trace_file(tmp_path, modules)
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"compat": {"threshold": 0.1}}))
    assert main(["analyze", path, "--config", str(cfg), "--enforce"]) == 0


def test_analyze_malformed_trace(tmp_path):
    path = _save(tmp_path, "t", Checkpoint.from_arrays({"m": np.zeros((2, 2))}))
    assert main(["analyze", path]) == 1


# -- bench / inspect ----------------------------------------------------------------------


MINIMAL = {
    "pairs": [
        {
            "name": "tiny",
            "a": {"task": {"kind": "regression-sin", "seed": 1, "size": 64}, "hidden": [4], "steps": 20},
            "b": {"task": {"kind": "regression-cos", "seed": 2, "size": 64}, "hidden": [4], "steps": 20},
        }
    ],
    "methods": ["graft-channel"],
}


def test_bench_minimal_deterministic(tmp_path):
    cfg = tmp_path / "bench.json"
    cfg.write_text(json.dumps(MINIMAL))
    for run in ("r1", "r2"):
        assert main(["bench", str(cfg), "--out", str(tmp_path / run)]) == 0
    for name in ("report.json", "report.csv"):
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()
    rows = (tmp_path / "r1" / "report.csv").read_text().strip().splitlines()
    assert len(rows) == 2
    report = json.loads((tmp_path / "r1" / "report.json").read_text())
    assert report["config"]["methods"] == ["graft-channel"]
    assert report["config"]["gate"]["a"] == 0.4


def test_bench_bad_config(tmp_path):
    cfg = tmp_path / "bench.json"
    cfg.write_text(json.dumps({**MINIMAL, "methods": ["magic"]}))
    assert main(["bench", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_inspect(tmp_path, capsys, role_ckpt):
    path = _save(tmp_path, "c", role_ckpt.with_metadata(note="x"))
    assert main(["inspect", path]) == 0
    header = json.loads(capsys.readouterr().out)
    assert header["__metadata__"] == {"note": "x"}
    assert header["t0"]["role"] == "attention"


def test_usage_error_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["merge"])
    assert exc.value.code == 2


def test_module_entry_point(tmp_path, role_ckpt):
    path = _save(tmp_path, "c", role_ckpt)
    proc = subprocess.run(
        [sys.executable, "-m", "graft", "inspect", path], capture_output=True, text=True, env={"GRAFT_LOG": "debug", "PATH": ""}
    )
    assert proc.returncode == 0, proc.stderr
    assert '"t0"' in proc.stdout


def test_shipped_bench_config_runs(tmp_path, capsys):
    from pathlib import Path

    cfg = Path(__file__).resolve().parents[1] / "configs" / "bench_small.json"
    assert main(["bench", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "report.csv").read_text().count("\n") == 5
