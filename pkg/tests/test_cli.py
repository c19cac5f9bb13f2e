import json
import subprocess
import sys
from pathlib import Path

import pytest

from hoi_forge import checkpoint, dataio
from hoi_forge.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_PARSE, EXIT_VERIFY, main

TINY = {"train": {"prior_steps": 20, "contact_steps": 20, "log_every": 10},
        "classifier": {"steps": 40}, "prior": {"T": 10}, "contact": {"T": 10}}
PROMPT = "lift mug with right hand"

PIPELINE = [
    ["synthgen", "--count", "24", "--out", "d.hoid"],
    ["train", "prior", "--data", "d.hoid", "--out", "ck/prior"],
    ["train", "contact", "--data", "d.hoid", "--out", "ck/contact"],
    ["train", "classifier", "--data", "d.hoid", "--out", "ck/clf"],
    ["sample", "--prior", "ck/prior", "--prompt", PROMPT, "--object", "mug", "--count", "3",
     "--out", "s.hoid", "--obj-export", "s.obj"],
    ["refine", "--prior", "ck/prior", "--contact", "ck/contact", "--prompt", PROMPT, "--object", "mug",
     "--count", "3", "--out", "r.hoid", "--trace"],
    ["evaluate", "--classifier", "ck/clf", "--generated", "r.hoid", "--reference", "d.hoid",
     "--out", "rep.json"],
    ["augment", "--data", "d.hoid", "--out", "a.hoid"],
    ["fdcheck", "--configs", "2"],
]


def run_cli(cwd, *args):
    cmd = [sys.executable, "-m", "hoi_forge", *args, "--seed", "5", "--threads", "1", "--config", "tiny.json"]
    return subprocess.run(cmd, cwd=cwd, capture_output=True, text=True)


def pipeline(d: Path):
    d.mkdir()
    (d / "tiny.json").write_text(json.dumps(TINY))
    outs = []
    for args in PIPELINE:
        p = run_cli(d, *args)
        assert p.returncode == EXIT_OK, (args, p.stdout, p.stderr)
        outs.append(p.stdout)
    return outs


@pytest.fixture(scope="module")
def twin_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    return base / "a", pipeline(base / "a"), base / "b", pipeline(base / "b")


def test_every_command_bitwise_reproducible(twin_runs):
    a, out_a, b, out_b = twin_runs
    assert out_a == out_b
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert len(files) > 20
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_outputs_round_trip(twin_runs):
    a = twin_runs[0]
    for name in ("d.hoid", "s.hoid", "r.hoid", "a.hoid"):
        buf = (a / name).read_bytes()
        assert dataio.dumps_dataset(dataio.loads_dataset(buf)) == buf
    for name in ("ck/prior.hoif", "ck/contact.hoif", "ck/clf.hoif", "a.hoid.objects.hoif"):
        buf = (a / name).read_bytes()
        assert checkpoint.dumps(checkpoint.loads(buf)) == buf


def test_sidecars_and_exports(twin_runs):
    a = twin_runs[0]
    meta = json.loads((a / "r.hoid.json").read_text())
    assert meta["command"] == "refine" and meta["config"]["seed"] == 5
    assert len(meta["fingerprint"]) > 0
    rep = json.loads((a / "rep.json").read_text())
    assert {"accuracy_top3", "fid", "diversity", "multimodality", "iv_cm3"} <= set(rep)
    assert sorted(p.name for p in a.glob("s_*.obj")) == ["s_0.obj", "s_1.obj", "s_2.obj"]
    trace = (a / "r.hoid.trace.txt").read_text().splitlines()
    assert trace[0].startswith("# guidance trace")
    # the 20-step contact model predicts no contacts, so only the header is traced
    assert len(meta["flagged"]) == 3
    assert len(trace) == 2 + sum(not f for f in meta["flagged"]) * 10


def test_fdcheck_exit_codes(tmp_path):
    assert main(["fdcheck", "--configs", "1", "--seed", "0"]) == EXIT_OK
    assert main(["fdcheck", "--configs", "1", "--seed", "0", "--tol", "1e-12"]) == EXIT_VERIFY


def test_missing_checkpoint_is_io_error(tmp_path):
    code = main(["sample", "--prior", str(tmp_path / "nope"), "--prompt", PROMPT, "--object", "mug",
                 "--out", str(tmp_path / "x.hoid"), "--seed", "1"])
    assert code == EXIT_IO


def test_corrupted_magic_rejected(twin_runs, tmp_path):
    a = twin_runs[0]
    bad = tmp_path / "bad.hoid"
    buf = bytearray((a / "d.hoid").read_bytes())
    buf[0] ^= 0xFF
    bad.write_bytes(bytes(buf))
    assert main(["augment", "--data", str(bad), "--out", str(tmp_path / "o.hoid"), "--seed", "1"]) == EXIT_IO
    for stem in ("prior",):
        src = (a / "ck" / f"{stem}.hoif").read_bytes()
        (tmp_path / f"{stem}.hoif").write_bytes(b"XXXX" + src[4:])
        (tmp_path / f"{stem}.json").write_bytes((a / "ck" / f"{stem}.json").read_bytes())
    code = main(["sample", "--prior", str(tmp_path / "prior"), "--prompt", PROMPT, "--object", "mug",
                 "--out", str(tmp_path / "x.hoid"), "--seed", "1"])
    assert code == EXIT_IO


def test_bad_prompt_and_object(twin_runs, tmp_path):
    ck = str(twin_runs[0] / "ck" / "prior")
    out = str(tmp_path / "x.hoid")
    assert main(["sample", "--prior", ck, "--prompt", "mug the hand", "--object", "mug",
                 "--out", out, "--seed", "1"]) == EXIT_PARSE
    assert main(["sample", "--prior", ck, "--prompt", PROMPT, "--object", "teapot",
                 "--out", out, "--seed", "1"]) == EXIT_PARSE


def test_config_errors(tmp_path):
    assert main(["synthgen", "--count", "2", "--out", str(tmp_path / "d.hoid")]) == EXIT_CONFIG
    cfg = tmp_path / "c.json"
    cfg.write_text("{not json")
    assert main(["synthgen", "--config", str(cfg), "--seed", "1"]) == EXIT_CONFIG
    cfg.write_text(json.dumps({"nonsense": 1}))
    assert main(["synthgen", "--config", str(cfg), "--seed", "1"]) == EXIT_CONFIG
    assert main(["frobnicate"]) == EXIT_PARSE
