#!/usr/bin/env python3
"""Rebuild the payload corpus from its assembly listings.

Needs GNU as, ld, objcopy and objdump on PATH. For every listing this
writes the static ELF, the objdump disassembly (frozen for tests) and the
objdump-derived map JSON. The reference payload additionally gets a flat
RGF1 image linked as a single segment, with its own objdump-derived map.
"""
import os
import struct
import subprocess
import sys
import tempfile

HERE = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, os.path.join(HERE, "..", "src"))

from retrograde.addr_map import from_objdump, dump_map  # noqa: E402

CORPUS = os.path.normpath(os.path.join(HERE, "..", "src", "retrograde", "corpus"))
LISTINGS = ["refpayload", "rewrite_demo", "probe_demo", "tracee_demo"]
FLAT_BASE = 0x401000


def run(*cmd, cwd=None):
    return subprocess.run(cmd, check=True, capture_output=True, text=True, cwd=cwd).stdout


def section_address(elf_path, name):
    for line in run("objdump", "-h", elf_path).splitlines():
        parts = line.split()
        if len(parts) >= 4 and parts[1] == name:
            return int(parts[3], 16), int(parts[2], 16)
    raise SystemExit(f"{elf_path}: no {name} section")


def build(name, tmp):
    src = os.path.join(CORPUS, name + ".s")
    obj = os.path.join(tmp, name + ".o")
    out = os.path.join(CORPUS, name)
    run("as", "--64", "-o", obj, src)
    run("ld", "-static", "-nostdlib", "-o", out, obj)

    disasm = run("objdump", "-d", "-w", "-M", "intel", "--insn-width=15", name, cwd=CORPUS)
    with open(out + ".objdump.txt", "w") as f:
        f.write(disasm)
    text_addr, _ = section_address(out, ".text")
    with open(out + ".map.json", "w") as f:
        f.write(dump_map(from_objdump(disasm, text_addr)))
    return obj


def build_flat(obj, tmp):
    linked = os.path.join(tmp, "flat.elf")
    blob = os.path.join(tmp, "flat.bin")
    run("ld", "-N", "-static", "-nostdlib", f"-Ttext={FLAT_BASE:#x}", "-o", linked, obj)
    run("objcopy", "-O", "binary", linked, blob)
    text_addr, text_len = section_address(linked, ".text")
    disasm = run("objdump", "-d", "-w", "-M", "intel", "--insn-width=15", linked)
    with open(os.path.join(CORPUS, "refpayload.rgf.map.json"), "w") as f:
        f.write(dump_map(from_objdump(disasm, text_addr)))
    with open(blob, "rb") as f:
        body = f.read()
    header = b"RGF1" + struct.pack("<QQI", FLAT_BASE, 0, text_len)
    with open(os.path.join(CORPUS, "refpayload.rgf"), "wb") as f:
        f.write(header + body)


def main():
    with tempfile.TemporaryDirectory() as tmp:
        objs = {name: build(name, tmp) for name in LISTINGS}
        build_flat(objs["refpayload"], tmp)
    print("corpus rebuilt in", CORPUS)


if __name__ == "__main__":
    main()
