"""Instruction address maps: subset decoder, linear sweep, JSON import/export."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from .errors import DecodeError, EmptyMap, NonMonotonic, ParseError, Truncated, UnknownOpcode

MAX_INSN_LEN = 15

REG64 = ("rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi",
         "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15")


@dataclass(frozen=True)
class Instruction:
    """One decoded instruction of the supported subset.

    ``op`` is one of ``nop``, ``syscall``, ``ret``, ``mov_imm32`` (REX.W C7 /0,
    immediate sign-extended) and ``mov_imm64`` (REX.W B8+r).
    """
    op: str
    length: int
    reg: Optional[str] = None
    imm: int = 0

    @property
    def text(self) -> str:
        if self.op == "mov_imm32":
            return f"mov {self.reg}, {self.imm:#x}"
        if self.op == "mov_imm64":
            return f"movabs {self.reg}, {self.imm:#x}"
        return self.op


def decode(code: bytes, at: int = 0) -> Instruction:
    n = len(code)
    if at < 0 or at >= n:
        raise Truncated("decode past end of buffer", at)
    b = code[at]
    if b == 0x90:
        return Instruction("nop", 1)
    if b == 0xC3:
        return Instruction("ret", 1)
    if b == 0x0F:
        if at + 1 >= n:
            raise Truncated("two-byte opcode cut short", at)
        if code[at + 1] == 0x05:
            return Instruction("syscall", 2)
        raise UnknownOpcode(f"opcode 0f {code[at + 1]:02x} outside the supported subset", at)
    if 0x48 <= b <= 0x4F:
        ext = 8 if b & 0x01 else 0
        if at + 1 >= n:
            raise Truncated("REX prefix without opcode", at)
        op = code[at + 1]
        if op == 0xC7:
            if at + 2 >= n:
                raise Truncated("missing ModRM byte", at)
            modrm = code[at + 2]
            if modrm >> 6 != 0b11 or (modrm >> 3) & 0b111 != 0:
                raise UnknownOpcode(f"ModRM {modrm:02x} form outside the supported subset", at)
            if at + 7 > n:
                raise Truncated("imm32 cut short", at)
            imm = int.from_bytes(code[at + 3:at + 7], "little", signed=True) & 0xFFFFFFFFFFFFFFFF
            return Instruction("mov_imm32", 7, REG64[ext | (modrm & 0b111)], imm)
        if 0xB8 <= op <= 0xBF:
            if at + 10 > n:
                raise Truncated("imm64 cut short", at)
            imm = int.from_bytes(code[at + 2:at + 10], "little")
            return Instruction("mov_imm64", 10, REG64[ext | (op - 0xB8)], imm)
        raise UnknownOpcode(f"opcode {b:02x} {op:02x} outside the supported subset", at)
    raise UnknownOpcode(f"opcode {b:02x} outside the supported subset", at)


def decode_length(code: bytes, at: int = 0) -> int:
    return decode(code, at).length


@dataclass(frozen=True)
class InstructionRecord:
    offset: int
    length: int
    text: Optional[str] = field(default=None, compare=False)


@dataclass(frozen=True)
class AddressMap:
    records: Tuple[InstructionRecord, ...]
    base: Optional[int] = None

    def __len__(self):
        return len(self.records)

    def offsets(self) -> List[int]:
        return [r.offset for r in self.records]


def build_map(image) -> AddressMap:
    """Linear sweep over the image's text range."""
    code = image.text_bytes()
    records = []
    at = 0
    while at < len(code):
        insn = decode(code, at)
        records.append(InstructionRecord(at, insn.length, insn.text))
        at += insn.length
    return AddressMap(tuple(records), image.text_start)


def _validate(records):
    if not records:
        raise EmptyMap("address map has no records")
    for prev, cur in zip(records, records[1:]):
        if cur.offset <= prev.offset:
            raise NonMonotonic(f"offset {cur.offset} does not follow {prev.offset}")


def _int_field(obj, key, required=True):
    if key not in obj:
        if required:
            raise ParseError(f"missing {key!r}")
        return None
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise ParseError(f"{key!r} must be a non-negative integer, got {value!r}")
    return value


def import_map(text: str) -> AddressMap:
    try:
        doc = json.loads(text)
    except (ValueError, TypeError) as exc:
        raise ParseError(f"invalid map JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("records"), list):
        raise ParseError("map must be an object with a 'records' array")
    base = _int_field(doc, "base", required=False)
    records = []
    for item in doc["records"]:
        if not isinstance(item, dict):
            raise ParseError(f"record {item!r} is not an object")
        offset = _int_field(item, "offset")
        length = _int_field(item, "length")
        if not 1 <= length <= MAX_INSN_LEN:
            raise ParseError(f"instruction length {length} outside 1..{MAX_INSN_LEN}")
        label = item.get("text")
        if label is not None and not isinstance(label, str):
            raise ParseError("'text' must be a string")
        records.append(InstructionRecord(offset, length, label))
    _validate(records)
    return AddressMap(tuple(records), base)


def dump_map(amap: AddressMap) -> str:
    doc = {}
    if amap.base is not None:
        doc["base"] = amap.base
    doc["records"] = []
    for r in amap.records:
        item = {"offset": r.offset, "length": r.length}
        if r.text is not None:
            item["text"] = r.text
        doc["records"].append(item)
    return json.dumps(doc, indent=1) + "\n"


def resolve(amap: AddressMap, base: int) -> List[int]:
    return [base + r.offset for r in amap.records]


_OBJDUMP_LINE = re.compile(r"^\s*([0-9a-fA-F]+):\t((?:[0-9a-fA-F]{2} ?)+)\s*(?:\t(.*))?$")


def from_objdump(listing: str, text_start: int) -> AddressMap:
    """Convert ``objdump -d`` output for the ``.text`` section into a map.

    Continuation lines (bytes with no mnemonic, emitted when objdump wraps a
    long instruction) are folded into the preceding record.
    """
    records: List[list] = []
    in_text = False
    for line in listing.splitlines():
        if line.startswith("Disassembly of section"):
            in_text = line.strip() == "Disassembly of section .text:"
            continue
        if not in_text:
            continue
        m = _OBJDUMP_LINE.match(line)
        if not m:
            continue
        addr = int(m.group(1), 16)
        nbytes = len(m.group(2).split())
        mnemonic = m.group(3)
        if mnemonic is None or not mnemonic.strip():
            if not records:
                raise ParseError(f"continuation line before any instruction: {line!r}")
            records[-1][1] += nbytes
            continue
        label = " ".join(mnemonic.split())
        records.append([addr - text_start, nbytes, label])
    out = [InstructionRecord(o, n, t) for o, n, t in records]
    _validate(out)
    return AddressMap(tuple(out), text_start)


__all__ = [
    "DecodeError", "Instruction", "InstructionRecord", "AddressMap", "decode", "decode_length",
    "build_map", "import_map", "dump_map", "resolve", "from_objdump", "REG64",
]
