import json
import os
import re
import subprocess
import sys
import tempfile

import pytest

from conftest import native
from retrograde import cli, corpus
from retrograde.addr_map import import_map
from retrograde.exec_director import TraceReport

HELLO = b"hello, world!\n\r"


def run_cli(*args, env=None):
    full_env = dict(os.environ)
    full_env.pop(cli.BACKEND_ENV, None)
    full_env.update(env or {})
    return subprocess.run([sys.executable, "-m", "retrograde", *args],
                          capture_output=True, env=full_env, timeout=60)


def test_map_command(tmp_path):
    out = tmp_path / "ref.map.json"
    proc = run_cli("map", corpus.path("refpayload"), "-o", str(out))
    assert proc.returncode == 0
    assert b"10 records" in proc.stderr
    amap = import_map(out.read_text())
    assert len(amap) == 10
    with open(corpus.path("refpayload.map.json")) as f:
        assert amap == import_map(f.read())


def test_map_to_stdout():
    proc = run_cli("map", corpus.path("rewrite_demo"))
    assert proc.returncode == 0
    assert len(json.loads(proc.stdout)["records"]) == 53


@pytest.mark.parametrize("content", [b"", b"\x7fELF", b"garbage bytes"])
def test_bad_payload_is_input_error(tmp_path, content):
    path = tmp_path / "bad.bin"
    path.write_bytes(content)
    for args in (["map", str(path)], ["run", str(path)]):
        proc = run_cli(*args)
        assert proc.returncode == cli.EXIT_INPUT
        assert proc.stdout == b""


def test_missing_payload():
    assert run_cli("run", "/nonexistent/payload").returncode == cli.EXIT_INPUT


def test_run_reverse_emits_exact_bytes():
    proc = run_cli("run", "--backend", "emu", "--mode", "reverse", corpus.path("refpayload"))
    assert proc.returncode == 0
    assert proc.stdout == HELLO


def test_run_forward_is_silent():
    proc = run_cli("run", "--backend", "emu", "--mode", "forward", corpus.path("refpayload"))
    assert proc.returncode == 0
    assert proc.stdout == b""


def test_run_quirk_flag():
    proc = run_cli("run", "--mode", "reverse", "--quirk-paper-indexing", corpus.path("refpayload"))
    assert proc.returncode == 0
    assert proc.stdout == b""


def test_run_rgf_image():
    proc = run_cli("run", "--mode", "reverse", corpus.path("refpayload.rgf"))
    assert proc.returncode == 0 and proc.stdout == HELLO


def test_backend_env_and_flag_precedence(monkeypatch):
    monkeypatch.setenv(cli.BACKEND_ENV, "bogus")
    assert cli._default_backend(None) == "bogus"
    assert cli._default_backend("emu") == "emu"
    proc = run_cli("run", "--mode", "reverse", corpus.path("refpayload"), env={cli.BACKEND_ENV: "bogus"})
    assert proc.returncode == cli.EXIT_INPUT
    proc = run_cli("run", "--backend", "emu", "--mode", "reverse", corpus.path("refpayload"),
                   env={cli.BACKEND_ENV: "bogus"})
    assert proc.returncode == 0 and proc.stdout == HELLO
    monkeypatch.delenv(cli.BACKEND_ENV)
    assert cli._default_backend(None) == "emu"


def test_report_file_is_deterministic(tmp_path):
    paths = [tmp_path / "a.jsonl", tmp_path / "b.jsonl"]
    for p in paths:
        proc = run_cli("run", "--mode", "reverse", "--report", str(p), corpus.path("refpayload"))
        assert proc.returncode == 0 and proc.stdout == HELLO
    assert paths[0].read_bytes() == paths[1].read_bytes()
    report = TraceReport.from_jsonl(paths[0].read_text())
    assert report.output == HELLO and report.exit == 0 and len(report.steps) == 9


def test_report_to_stdout_follows_output():
    proc = run_cli("run", "--mode", "reverse", "--report", "-", corpus.path("refpayload"))
    assert proc.stdout.startswith(HELLO)
    report = TraceReport.from_jsonl(proc.stdout[len(HELLO):].decode())
    assert report.output == HELLO


def test_no_report_by_default(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    proc = run_cli("run", "--mode", "reverse", corpus.path("refpayload"))
    assert proc.stdout == HELLO
    assert os.listdir(tmp_path) == []


def test_trace_rules():
    proc = run_cli("trace", corpus.path("rewrite_demo"))
    assert proc.returncode == 0 and proc.stdout == b"A" * 10
    proc = run_cli("trace", "--rules", "none", corpus.path("rewrite_demo"))
    assert proc.returncode == 0 and proc.stdout == b""


def test_map_mismatch_exit(tmp_path):
    shifted = json.loads(open(corpus.path("refpayload.map.json")).read())
    shifted["records"] = [dict(r, offset=r["offset"] + 1) for r in shifted["records"]]
    path = tmp_path / "shifted.json"
    path.write_text(json.dumps(shifted))
    proc = run_cli("run", "--mode", "reverse", "--map", str(path), corpus.path("refpayload"))
    assert proc.returncode == cli.EXIT_MAP_MISMATCH
    assert proc.stdout == b""


def test_bad_map_file_is_input_error(tmp_path):
    path = tmp_path / "empty.json"
    path.write_text('{"records": []}')
    proc = run_cli("run", "--map", str(path), corpus.path("refpayload"))
    assert proc.returncode == cli.EXIT_INPUT


def test_controller_stopped_exit(tmp_path):
    path = tmp_path / "nops.rgf"
    from retrograde.payload_image import dump_rgf
    path.write_bytes(dump_rgf(b"\x90\x90", 0x401000, 0, 2))
    proc = run_cli("run", "--mode", "reverse", str(path))
    assert proc.returncode == cli.EXIT_CONTROLLER_STOPPED


def test_killed_child_exit(tmp_path, capsys):
    from retrograde.payload_image import dump_rgf
    path = tmp_path / "bad.rgf"
    # nop, then a byte outside the decoder subset: the map comes from the sidecar
    path.write_bytes(dump_rgf(b"\x90\xff", 0x401000, 0, 2))
    (tmp_path / "bad.rgf.map.json").write_text(
        '{"base": 4198400, "records": [{"offset": 0, "length": 1}, {"offset": 1, "length": 1}]}')
    # reverse runs the illegal byte first; the delivered SIGILL kills the child
    assert cli.main(["run", "--mode", "reverse", str(path)]) == 128 + 4
    # forward stops on SIGILL at the second slot; retrying it delivers the signal
    assert cli.main(["run", "--mode", "forward", str(path)]) == 128 + 4


def test_sidecar_map_fallback(tmp_path, capsys):
    from retrograde.payload_image import dump_rgf
    path = tmp_path / "odd.rgf"
    path.write_bytes(dump_rgf(b"\x90\xff", 0x401000, 0, 2))
    assert cli.main(["run", str(path)]) == cli.EXIT_INPUT
    (tmp_path / "odd.rgf.map.json").write_text('{"records": [{"offset": 0, "length": 1}]}')
    assert cli.main(["--verbose", "run", str(path)]) == cli.EXIT_CONTROLLER_STOPPED
    assert "using" in capsys.readouterr().err


def test_native_unavailable_exit(monkeypatch, capsys):
    monkeypatch.setattr(cli, "native_supported", lambda: False)
    assert cli.main(["run", "--backend", "native", corpus.path("refpayload")]) == cli.EXIT_BACKEND
    assert cli.main(["trace", "--backend", "native", corpus.path("rewrite_demo")]) == cli.EXIT_BACKEND


def test_in_process_main(capsysbinary):
    assert cli.main(["run", "--mode", "reverse", corpus.path("refpayload")]) == 0
    assert capsysbinary.readouterr().out == HELLO


@native
def test_run_native_backend():
    proc = run_cli("run", "--backend", "native", "--mode", "reverse", corpus.path("refpayload"))
    assert proc.returncode == 0 and proc.stdout == HELLO
    proc = run_cli("trace", "--backend", "native", corpus.path("tracee_demo"))
    assert proc.returncode == 0 and proc.stdout == b"A" * 10


@native
def test_probe_command_untraced():
    proc = run_cli("probe")
    assert proc.returncode == 0 and proc.stdout == b"free\n"


def _snapshot(dirs):
    return {os.path.join(d, n) for d in dirs if os.path.isdir(d) for n in os.listdir(d)}


@native
def test_stage_command(tmp_path):
    dirs = [str(tmp_path), tempfile.gettempdir(), "/tmp", "/dev/shm", "/var/tmp"]
    before = _snapshot(dirs)
    proc = subprocess.run([sys.executable, "-m", "retrograde", "--verbose", "stage", corpus.path("probe_demo")],
                          capture_output=True, cwd=tmp_path, timeout=60)
    assert proc.returncode == 0
    assert proc.stdout == b"normal execution\n"
    assert re.search(rb"staged at /proc/[0-9]+/fd/[0-9]+", proc.stderr)
    assert _snapshot(dirs) == before


@native
def test_stage_flat_image():
    proc = run_cli("stage", corpus.path("refpayload.rgf"))
    # run forward natively: read(0) then exit(0)
    assert proc.returncode == 0 and proc.stdout == b""


@native
def test_stage_empty_payload(tmp_path):
    path = tmp_path / "empty"
    path.write_bytes(b"")
    assert run_cli("stage", str(path)).returncode == cli.EXIT_INPUT
