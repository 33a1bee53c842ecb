import os
import re
import struct
import subprocess
import tempfile

import pytest
from hypothesis import given, settings, strategies as st

from conftest import have, native
from retrograde import corpus
from retrograde.errors import (
    BadMagic,
    ImageError,
    Malformed,
    OutOfRange,
    StageFailed,
    Unsupported,
)
from retrograde.payload_image import (
    PayloadImage,
    Segment,
    build_elf,
    dump_rgf,
    load_flat,
    memfd_stage,
    page_base,
    parse_elf,
    parse_rgf,
    shellcode_run,
    unstage,
)

ELF_NAMES = corpus.ELF_PAYLOADS


def readelf_facts(path):
    """Entry, PT_LOAD (vaddr, filesz, memsz, flags) and .text (addr, size) per readelf."""
    header = subprocess.run(["readelf", "-hlSW", path], capture_output=True, text=True, check=True).stdout
    entry = int(re.search(r"Entry point address:\s+(0x[0-9a-f]+)", header).group(1), 16)
    loads = []
    for m in re.finditer(r"^\s+LOAD\s+(0x[0-9a-f]+) (0x[0-9a-f]+) 0x[0-9a-f]+ (0x[0-9a-f]+) (0x[0-9a-f]+) (.{3})",
                         header, re.M):
        loads.append((int(m.group(2), 16), int(m.group(3), 16), int(m.group(4), 16), m.group(5).strip()))
    text = re.search(r"\] \.text\s+PROGBITS\s+([0-9a-f]+) [0-9a-f]+ ([0-9a-f]+)", header)
    return entry, loads, (int(text.group(1), 16), int(text.group(2), 16))


def test_refpayload_frozen_fields(refpayload):
    # frozen from readelf -hlSW on the committed binary
    assert refpayload.format_tag == "elf64"
    assert refpayload.entry == 0x401000
    assert refpayload.text_range == (0x401000, 0x33)
    assert [(s.vaddr, len(s.data), s.perms) for s in refpayload.segments] == [
        (0x400000, 0xE8, "r--"), (0x401000, 0x33, "r-x"), (0x402000, 0xF, "rw-")]
    assert refpayload.segment_at(0x402000).data == b"hello, world!\n\r"


@pytest.mark.skipif(not have("readelf"), reason="readelf not installed")
@pytest.mark.parametrize("name", ELF_NAMES)
def test_parse_elf_matches_readelf(name):
    entry, loads, text = readelf_facts(corpus.path(name))
    img = parse_elf(corpus.read(name))
    assert img.entry == entry
    assert img.text_range == text
    assert [(s.vaddr, s.file_size, len(s.data)) for s in img.segments] == [l[:3] for l in loads]


@pytest.mark.parametrize("name", ELF_NAMES)
def test_segments_round_trip_file_bytes(name):
    raw = corpus.read(name)
    for seg in parse_elf(raw).segments:
        assert seg.data[:seg.file_size] == raw[seg.file_offset:seg.file_offset + seg.file_size]


def _one_load_image():
    # one PT_LOAD at 0x400000 covering two pages, entry in the second
    body = bytearray(0x2000)
    body[0x1000] = 0x90
    seg = Segment(0x400000, bytes(body), "r-x")
    return PayloadImage((seg,), 0x401000, (0x401000, 1), "elf64")


@pytest.mark.skipif(not have("readelf"), reason="readelf not installed")
def test_minimal_single_load_elf(tmp_path):
    data = build_elf(_one_load_image())
    path = tmp_path / "mini"
    path.write_bytes(data)
    entry, loads, text = readelf_facts(str(path))
    assert entry == 0x401000 and len(loads) == 1 and loads[0][0] == 0x400000
    img = parse_elf(data)
    assert len(img.segments) == 1
    assert img.entry == 0x401000
    assert img.text_range == text == (0x401000, 1)


def test_bad_magic():
    with pytest.raises(BadMagic):
        parse_elf(b"\x00\x00\x00\x00" + bytes(60))


def test_elf32_unsupported():
    ident = b"\x7fELF\x01\x01\x01" + bytes(9)
    hdr = ident + struct.pack("<HHIIIIIHHHHHH", 2, 3, 1, 0x8048000, 52, 0, 0, 52, 32, 0, 40, 0, 0)
    with pytest.raises(Unsupported):
        parse_elf(hdr)


@pytest.mark.parametrize("offset,value,exc", [
    (5, 2, Unsupported),        # big-endian
    (18, 0x28, Unsupported),    # e_machine = ARM
    (16, 3, Unsupported),       # ET_DYN
    (0x20, 0xFFFFFF, Malformed),  # e_phoff past the end
])
def test_header_field_checks(offset, value, exc):
    raw = bytearray(corpus.read("refpayload"))
    if offset in (5,):
        raw[offset] = value
    elif offset in (16, 18):
        raw[offset:offset + 2] = struct.pack("<H", value)
    else:
        raw[offset:offset + 8] = struct.pack("<Q", value)
    with pytest.raises(exc):
        parse_elf(bytes(raw))


def test_interp_segment_is_dynamic():
    raw = bytearray(corpus.read("refpayload"))
    raw[64:68] = struct.pack("<I", 3)  # first phdr becomes PT_INTERP
    with pytest.raises(Unsupported):
        parse_elf(bytes(raw))


def test_missing_text_section():
    raw = bytearray(corpus.read("refpayload"))
    idx = raw.find(b".text\0")
    raw[idx:idx + 5] = b".tuxt"
    with pytest.raises(Malformed):
        parse_elf(bytes(raw))


def test_bss_zero_filled():
    raw = bytearray(corpus.read("refpayload"))
    # grow the data segment's memsz by 0x100
    phoff = struct.unpack_from("<Q", raw, 0x20)[0]
    off = phoff + 2 * 56
    filesz, memsz = struct.unpack_from("<QQ", raw, off + 32)
    struct.pack_into("<Q", raw, off + 40, memsz + 0x100)
    seg = parse_elf(bytes(raw)).segments[2]
    assert len(seg.data) == filesz + 0x100
    assert seg.data[filesz:] == bytes(0x100)


@settings(max_examples=300, deadline=None)
@given(st.integers(min_value=0, max_value=len(corpus.read("refpayload")) - 1))
def test_truncation_always_errors(cut):
    raw = corpus.read("refpayload")[:cut]
    with pytest.raises(ImageError):
        parse_elf(raw)


def test_load_flat_direct():
    img = load_flat(bytes(32), 0x401000, 0, 32)
    assert img.entry == 0x401000
    assert img.text_range == (0x401000, 32)
    assert img.format_tag == "flat"
    assert img.segments[0].perms == "rwx"


def test_load_flat_out_of_range():
    with pytest.raises(OutOfRange):
        load_flat(bytes(4), 0x1000, 8, 1)
    with pytest.raises(OutOfRange):
        load_flat(bytes(4), 0x1000, 0, 5)


@given(st.binary(min_size=1, max_size=256), st.integers(min_value=0, max_value=2**40))
def test_load_flat_identity(blob, base):
    img = load_flat(blob, base, 0, len(blob))
    assert img.segments[0].data == blob
    assert img.segments[0].vaddr == base


def test_reference_flat_image(ref_flat):
    # sizes from objdump -h on the single-segment link of refpayload.s
    assert ref_flat.text_range == (0x401000, 51)
    assert len(ref_flat.segments[0].data) == 51 + 15
    assert ref_flat.segments[0].data[51:] == b"hello, world!\n\r"


def test_rgf_header_layout():
    blob = dump_rgf(b"\x90\xc3", 0x1000, 1, 1)
    assert len(blob) == 24 + 2
    assert blob[:4] == b"RGF1"
    img = parse_rgf(blob)
    assert img.entry == 0x1001 and img.text_range == (0x1001, 1)
    with pytest.raises(BadMagic):
        parse_rgf(b"RGF2" + blob[4:])


def test_build_elf_round_trip(ref_flat):
    back = parse_elf(build_elf(ref_flat))
    assert back.entry == ref_flat.entry
    assert back.text_range == ref_flat.text_range
    assert [s.data for s in back.segments] == [s.data for s in ref_flat.segments]


def test_page_alignment_arithmetic():
    for addr in (0x401234, 0x1000, 0x7FFF_FFFF_F001):
        assert page_base(addr, 4096) == addr - addr % 4096


def _fs_snapshot(*dirs):
    seen = set()
    for d in dirs:
        if os.path.isdir(d):
            seen.update(os.path.join(d, n) for n in os.listdir(d))
    return seen


@native
def test_memfd_stage_path_and_no_file(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    dirs = [str(tmp_path), tempfile.gettempdir(), "/tmp", "/dev/shm", "/var/tmp"]
    before = _fs_snapshot(*dirs)
    path = memfd_stage(corpus.read("refpayload"))
    try:
        assert re.fullmatch(r"/proc/[0-9]+/fd/[0-9]+", path)
        assert path.startswith(f"/proc/{os.getpid()}/fd/")
        with open(path, "rb") as f:
            assert f.read() == corpus.read("refpayload")
        assert subprocess.run([path]).returncode == 0
    finally:
        unstage(path)
    assert _fs_snapshot(*dirs) == before


@native
def test_memfd_stage_empty():
    with pytest.raises(StageFailed):
        memfd_stage(b"")


@native
def test_shellcode_return_constant():
    # `as`: mov rax, 7 ; ret  ->  48 c7 c0 07 00 00 00 c3
    assert shellcode_run(bytes.fromhex("48c7c007000000c3")) == 7
    # xor eax, eax ; ret
    assert shellcode_run(bytes.fromhex("31c0c3")) == 0
