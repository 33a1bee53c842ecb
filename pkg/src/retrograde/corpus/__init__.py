"""Prebuilt benign payload corpus (regenerate with tools/build_corpus.py)."""
import os

CORPUS_DIR = os.path.dirname(os.path.abspath(__file__))

# Every payload is straight-line code inside the decoder subset.
PAYLOADS = ("refpayload", "refpayload.rgf", "rewrite_demo", "probe_demo", "tracee_demo")
ELF_PAYLOADS = tuple(p for p in PAYLOADS if not p.endswith(".rgf"))


def path(name):
    return os.path.join(CORPUS_DIR, name)


def read(name):
    with open(path(name), "rb") as f:
        return f.read()
