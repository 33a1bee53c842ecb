"""Payload loading (ELF64 subset, flat blobs) and in-memory execution."""
from __future__ import annotations

import ctypes
import os
import platform
import struct
import sys
from dataclasses import dataclass, field
from typing import Optional, Tuple

from .errors import (
    BadMagic,
    Malformed,
    OutOfRange,
    ProtectFailed,
    StageFailed,
    Unsupported,
    UnsupportedPlatform,
)

ELF_MAGIC = b"\x7fELF"
ELFCLASS64 = 2
ELFDATA2LSB = 1
ET_EXEC = 2
EM_X86_64 = 62
PT_LOAD = 1
PT_DYNAMIC = 2
PT_INTERP = 3
PF_X, PF_W, PF_R = 1, 2, 4
SHT_PROGBITS = 1
SHT_STRTAB = 3
SHF_ALLOC, SHF_EXECINSTR = 0x2, 0x4

EHDR = struct.Struct("<16sHHIQQQIHHHHHH")
PHDR = struct.Struct("<IIQQQQQQ")
SHDR = struct.Struct("<IIQQQQIIQQ")

RGF_MAGIC = b"RGF1"
RGF_HEADER = struct.Struct("<4sQQI")

MFD_CLOEXEC = 1
SHM_NAME = "retrograde"

PROT_READ, PROT_WRITE, PROT_EXEC = 1, 2, 4


@dataclass(frozen=True)
class Segment:
    vaddr: int
    data: bytes
    perms: str = "rwx"
    file_offset: Optional[int] = field(default=None, compare=False)
    file_size: Optional[int] = field(default=None, compare=False)

    @property
    def end(self) -> int:
        return self.vaddr + len(self.data)

    @property
    def executable(self) -> bool:
        return "x" in self.perms

    def contains(self, addr: int, length: int = 1) -> bool:
        return self.vaddr <= addr and addr + length <= self.end


@dataclass(frozen=True)
class PayloadImage:
    segments: Tuple[Segment, ...]
    entry: int
    text_range: Tuple[int, int]
    format_tag: str
    raw: Optional[bytes] = field(default=None, repr=False, compare=False)

    @property
    def text_start(self) -> int:
        return self.text_range[0]

    def text_bytes(self) -> bytes:
        start, length = self.text_range
        seg = self.segment_at(start)
        if seg is None:
            return b""
        lo = start - seg.vaddr
        return seg.data[lo:lo + length]

    def segment_at(self, addr: int) -> Optional[Segment]:
        for seg in self.segments:
            if seg.contains(addr):
                return seg
        return None


def _perm_string(flags: int) -> str:
    return ("r" if flags & PF_R else "-") + ("w" if flags & PF_W else "-") + ("x" if flags & PF_X else "-")


def _check_layout(segments, entry, text_range):
    for a, b in zip(segments, segments[1:]):
        if a.end > b.vaddr:
            raise Malformed(f"segments overlap at {b.vaddr:#x}")
    if not any(s.executable and s.contains(entry) for s in segments):
        raise Malformed(f"entry {entry:#x} is not inside an executable segment")
    start, length = text_range
    if not any(s.executable and s.contains(start, max(length, 1)) for s in segments):
        raise Malformed(f"text range {start:#x}+{length} is not inside one executable segment")


def parse_elf(data: bytes) -> PayloadImage:
    """Parse a static little-endian x86-64 ELF64 executable.

    One segment is produced per PT_LOAD header (BSS zero-filled) and the text
    range comes from the section named ``.text``.
    """
    data = bytes(data)
    if data[:4] != ELF_MAGIC:
        raise BadMagic("not an ELF file")
    if len(data) < 6:
        raise Malformed("truncated ELF identification")
    if data[4] != ELFCLASS64:
        raise Unsupported(f"ELF class {data[4]} (only 64-bit is supported)")
    if data[5] != ELFDATA2LSB:
        raise Unsupported("big-endian ELF is not supported")
    if len(data) < EHDR.size:
        raise Malformed("truncated ELF header")

    (_, e_type, e_machine, _, e_entry, e_phoff, e_shoff, _, _,
     e_phentsize, e_phnum, e_shentsize, e_shnum, e_shstrndx) = EHDR.unpack_from(data)
    if e_machine != EM_X86_64:
        raise Unsupported(f"machine {e_machine} is not x86-64")
    if e_type != ET_EXEC:
        raise Unsupported(f"ELF type {e_type} (only static ET_EXEC is supported)")

    if e_phnum == 0:
        raise Malformed("no program headers")
    if e_phentsize != PHDR.size or e_phoff + e_phnum * PHDR.size > len(data):
        raise Malformed("program header table out of bounds")

    segments = []
    for i in range(e_phnum):
        p_type, p_flags, p_offset, p_vaddr, _, p_filesz, p_memsz, _ = PHDR.unpack_from(
            data, e_phoff + i * PHDR.size)
        if p_type in (PT_DYNAMIC, PT_INTERP):
            raise Unsupported("dynamically linked executables are not supported")
        if p_type != PT_LOAD:
            continue
        if p_offset + p_filesz > len(data) or p_memsz < p_filesz:
            raise Malformed(f"PT_LOAD {i} file window out of bounds")
        body = data[p_offset:p_offset + p_filesz] + bytes(p_memsz - p_filesz)
        segments.append(Segment(p_vaddr, body, _perm_string(p_flags), p_offset, p_filesz))
    if not segments:
        raise Malformed("no PT_LOAD segments")
    segments.sort(key=lambda s: s.vaddr)

    text = _find_section(data, e_shoff, e_shentsize, e_shnum, e_shstrndx, b".text")
    _check_layout(segments, e_entry, text)
    return PayloadImage(tuple(segments), e_entry, text, "elf64", raw=data)


def _find_section(data, shoff, shentsize, shnum, shstrndx, wanted):
    if shnum == 0:
        raise Malformed("missing .text section (no section headers)")
    if shentsize != SHDR.size or shoff + shnum * SHDR.size > len(data):
        raise Malformed("section header table out of bounds")
    if shstrndx >= shnum:
        raise Malformed("section name table index out of range")
    strtab = SHDR.unpack_from(data, shoff + shstrndx * SHDR.size)
    str_off, str_size = strtab[4], strtab[5]
    if str_off + str_size > len(data):
        raise Malformed("section name table out of bounds")
    names = data[str_off:str_off + str_size]
    for i in range(shnum):
        sh_name, _, _, sh_addr, _, sh_size, _, _, _, _ = SHDR.unpack_from(data, shoff + i * SHDR.size)
        if sh_name >= len(names):
            continue
        end = names.find(b"\0", sh_name)
        name = names[sh_name:end if end >= 0 else len(names)]
        if name == wanted:
            return (sh_addr, sh_size)
    raise Malformed("missing .text section")


def load_flat(data: bytes, base: int, entry_offset: int, text_len: int) -> PayloadImage:
    data = bytes(data)
    if entry_offset < 0 or text_len < 0 or entry_offset >= len(data) or entry_offset + text_len > len(data):
        raise OutOfRange(
            f"entry offset {entry_offset} with text length {text_len} exceeds {len(data)}-byte blob")
    seg = Segment(base, data, "rwx")
    return PayloadImage((seg,), base + entry_offset, (base + entry_offset, text_len), "flat")


def parse_rgf(data: bytes) -> PayloadImage:
    """Load a flat blob carrying the 24-byte RGF1 sidecar header."""
    if len(data) < RGF_HEADER.size or data[:4] != RGF_MAGIC:
        raise BadMagic("not an RGF1 flat image")
    _, base, entry_offset, text_len = RGF_HEADER.unpack_from(data)
    return load_flat(data[RGF_HEADER.size:], base, entry_offset, text_len)


def dump_rgf(blob: bytes, base: int, entry_offset: int, text_len: int) -> bytes:
    return RGF_HEADER.pack(RGF_MAGIC, base, entry_offset, text_len) + bytes(blob)


def load_payload(data: bytes) -> PayloadImage:
    """Dispatch on the leading magic: ELF or RGF1."""
    if data[:4] == RGF_MAGIC:
        return parse_rgf(data)
    return parse_elf(data)


def build_elf(image: PayloadImage) -> bytes:
    """Serialize an image as a static ELF64 executable.

    Used to launch flat blobs on the native backend; the output parses back
    to an equal image.
    """
    if image.raw is not None and image.format_tag == "elf64":
        return image.raw
    page = 0x1000
    phnum = len(image.segments)
    out = bytearray(EHDR.size + phnum * PHDR.size)
    placed = []
    for seg in image.segments:
        off = (len(out) + page - 1) // page * page + seg.vaddr % page
        out += bytes(off - len(out))
        out += seg.data
        placed.append(off)

    shstrtab = b"\0.text\0.shstrtab\0"
    shstr_off = len(out)
    out += shstrtab
    out += bytes(-len(out) % 8)
    shoff = len(out)

    text_addr, text_len = image.text_range
    for seg, off in zip(image.segments, placed):
        if seg.contains(text_addr, max(text_len, 1)):
            text_off = off + text_addr - seg.vaddr
            break
    else:
        raise Malformed("text range is not inside a segment")
    out += SHDR.pack(0, 0, 0, 0, 0, 0, 0, 0, 0, 0)
    out += SHDR.pack(1, SHT_PROGBITS, SHF_ALLOC | SHF_EXECINSTR, text_addr, text_off, text_len, 0, 0, 1, 0)
    out += SHDR.pack(7, SHT_STRTAB, 0, 0, shstr_off, len(shstrtab), 0, 0, 1, 0)

    ident = ELF_MAGIC + bytes([ELFCLASS64, ELFDATA2LSB, 1]) + bytes(9)
    EHDR.pack_into(out, 0, ident, ET_EXEC, EM_X86_64, 1, image.entry, EHDR.size, shoff, 0,
                   EHDR.size, PHDR.size, phnum, SHDR.size, 3, 2)
    for i, (seg, off) in enumerate(zip(image.segments, placed)):
        flags = (PF_R if "r" in seg.perms else 0) | (PF_W if "w" in seg.perms else 0) | \
                (PF_X if "x" in seg.perms else 0)
        PHDR.pack_into(out, EHDR.size + i * PHDR.size, PT_LOAD, flags, off, seg.vaddr, seg.vaddr,
                       len(seg.data), len(seg.data), page)
    return bytes(out)


# in-memory execution

def native_supported() -> bool:
    return sys.platform.startswith("linux") and platform.machine().lower() in ("x86_64", "amd64")


def _require_linux():
    if not sys.platform.startswith("linux") or not hasattr(os, "memfd_create"):
        raise UnsupportedPlatform("memory-backed descriptors need a Linux host")


def memfd_stage(image_bytes: bytes) -> str:
    """Write ``image_bytes`` to a memfd and return its ``/proc/<pid>/fd/<fd>`` path.

    The descriptor stays open for the life of the process (or until
    :func:`unstage`); nothing touches a filesystem.
    """
    _require_linux()
    if not image_bytes:
        raise StageFailed("nothing to stage")
    try:
        fd = os.memfd_create(SHM_NAME, MFD_CLOEXEC)
    except OSError as exc:
        raise StageFailed(f"memfd_create failed: {exc}") from exc
    try:
        view = memoryview(bytes(image_bytes))
        while view:
            n = os.write(fd, view)
            view = view[n:]
    except OSError as exc:
        os.close(fd)
        raise StageFailed(f"write to memfd failed: {exc}") from exc
    return "/proc/%d/fd/%d" % (os.getpid(), fd)


def unstage(path: str) -> None:
    fd = int(path.rsplit("/", 1)[1])
    try:
        os.close(fd)
    except OSError:
        pass


def page_base(addr: int, page_size: int) -> int:
    return addr & ~(page_size - 1)


_libc = None


def _get_libc():
    global _libc
    if _libc is None:
        _libc = ctypes.CDLL(None, use_errno=True)
        _libc.mprotect.argtypes = (ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int)
        _libc.mprotect.restype = ctypes.c_int
    return _libc


def shellcode_run(code: bytes) -> int:
    """Make ``code`` executable in place and call it as ``int (*)(void)``.

    The code must be self-contained and position independent. Runs inside the
    calling process: a crash in the code takes the interpreter down with it.
    """
    if not native_supported():
        raise UnsupportedPlatform("shellcode execution needs a Linux x86-64 host")
    libc = _get_libc()
    buf = ctypes.create_string_buffer(bytes(code), len(code))
    page_size = os.sysconf("SC_PAGESIZE")
    addr = ctypes.addressof(buf)
    aligned = page_base(addr, page_size)
    length = (addr - aligned) + len(code)
    if libc.mprotect(aligned, length, PROT_EXEC | PROT_WRITE | PROT_READ) != 0:
        err = ctypes.get_errno()
        raise ProtectFailed(f"mprotect failed: {os.strerror(err)}")
    try:
        fn = ctypes.CFUNCTYPE(ctypes.c_int)(addr)
        return fn()
    finally:
        libc.mprotect(aligned, length, PROT_WRITE | PROT_READ)
