import os
import shutil
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from retrograde import corpus
from retrograde.payload_image import load_payload, native_supported

NATIVE = native_supported()

native = pytest.mark.skipif(not NATIVE, reason="native backend needs a Linux x86-64 host")
BACKENDS = ["emu", pytest.param("native", marks=native)]


def have(*tools):
    return all(shutil.which(t) for t in tools)


@pytest.fixture(scope="session")
def refpayload():
    return load_payload(corpus.read("refpayload"))


@pytest.fixture(scope="session")
def rewrite_demo():
    return load_payload(corpus.read("rewrite_demo"))


@pytest.fixture(scope="session")
def ref_flat():
    return load_payload(corpus.read("refpayload.rgf"))


# acceptance criteria register their verdicts here for the summary block
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        verdict, title, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {verdict:4s} {title}  [{detail}]")
