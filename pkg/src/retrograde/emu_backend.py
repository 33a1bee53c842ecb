"""Deterministic in-process emulator for the decoder subset plus a tiny kernel model.

The kernel model knows read (0, instant EOF on fd 0), write (1, fds 1 and 2)
and exit (60); every other number returns -ENOSYS. Flags, rcx/r11 syscall
clobbers and timing are not modeled.
"""
from __future__ import annotations

import copy
import hashlib
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import List, Optional

from .addr_map import decode
from .debug_port import (
    MASK64,
    BackendError,
    DebugEvent,
    EventKind,
    RegisterFile,
    TraceeSession,
)
from .errors import (
    BadAddress,
    DecodeError,
    EmuFault,
    IllegalInstruction,
    LoadFault,
    MemFault,
    NotStopped,
)
from .payload_image import PayloadImage

STACK_TOP = 0x7FFFFFFFE000
STACK_SIZE = 64 * 1024

SYS_READ, SYS_WRITE, SYS_EXIT = 0, 1, 60
ENOSYS, EBADF, EFAULT = 38, 9, 14
SIGTRAP, SIGKILL = 5, 9


def _neg(errno):
    return (-errno) & MASK64


@dataclass
class Region:
    start: int
    data: bytearray
    perms: str

    @property
    def end(self):
        return self.start + len(self.data)


class Memory:
    """Mapped regions sorted by address; access outside them faults."""

    def __init__(self, regions: List[Region]):
        self.regions = sorted(regions, key=lambda r: r.start)
        self._starts = [r.start for r in self.regions]

    def _region(self, addr):
        i = bisect_right(self._starts, addr) - 1
        if i >= 0 and addr < self.regions[i].end:
            return self.regions[i]
        return None

    def mapped(self, addr: int, length: int) -> bool:
        return self.contiguous(addr, length) >= length

    def contiguous(self, addr: int, limit: int) -> int:
        """Number of mapped bytes starting at ``addr``, at most ``limit``."""
        got = 0
        while got < limit:
            reg = self._region(addr + got)
            if reg is None:
                break
            got = min(limit, reg.end - addr)
        return got

    def read(self, addr: int, length: int) -> bytes:
        out = bytearray()
        while len(out) < length:
            reg = self._region(addr + len(out))
            if reg is None:
                raise MemFault(f"read of unmapped address {addr + len(out):#x}")
            lo = addr + len(out) - reg.start
            out += reg.data[lo:lo + length - len(out)]
        return bytes(out)

    def write(self, addr: int, blob: bytes) -> None:
        if not self.mapped(addr, len(blob)):
            raise MemFault(f"write to unmapped address {addr:#x}")
        done = 0
        while done < len(blob):
            reg = self._region(addr + done)
            lo = addr + done - reg.start
            n = min(len(blob) - done, reg.end - (addr + done))
            reg.data[lo:lo + n] = blob[done:done + n]
            done += n

    def fetch(self, addr: int, limit: int = 15) -> bytes:
        reg = self._region(addr)
        if reg is None or "x" not in reg.perms:
            raise MemFault(f"instruction fetch from non-executable address {addr:#x}")
        lo = addr - reg.start
        return bytes(reg.data[lo:lo + limit])

    def digest(self, h) -> None:
        for reg in self.regions:
            h.update(reg.start.to_bytes(8, "little"))
            h.update(reg.data)


@dataclass
class EmuMachine:
    regs: RegisterFile
    memory: Memory
    captured_out: bytearray = field(default_factory=bytearray)
    status: str = "running"
    exit_value: Optional[int] = None

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for v in self.regs.as_tuple():
            h.update((v & MASK64).to_bytes(8, "little"))
        self.memory.digest(h)
        h.update(bytes(self.captured_out))
        h.update(self.status.encode())
        return h.hexdigest()


def new_machine(image: PayloadImage) -> EmuMachine:
    if image.text_range[1] == 0:
        raise LoadFault("image has an empty text range")
    regions = [Region(s.vaddr, bytearray(s.data), s.perms) for s in image.segments if s.data]
    regions.append(Region(STACK_TOP - STACK_SIZE, bytearray(STACK_SIZE), "rw-"))
    regions.sort(key=lambda r: r.start)
    for a, b in zip(regions, regions[1:]):
        if a.end > b.start:
            raise LoadFault(f"segment overlap at {b.start:#x}")
    regs = RegisterFile(rsp=STACK_TOP, rip=image.entry)
    return EmuMachine(regs, Memory(regions))


def _execute(m: EmuMachine, insn, addr: int) -> None:
    regs = m.regs
    nxt = (addr + insn.length) & MASK64
    if insn.op == "nop":
        regs.rip = nxt
    elif insn.op in ("mov_imm32", "mov_imm64"):
        setattr(regs, insn.reg, insn.imm)
        regs.rip = nxt
    elif insn.op == "ret":
        target = int.from_bytes(m.memory.read(regs.rsp, 8), "little")
        regs.rsp = (regs.rsp + 8) & MASK64
        regs.rip = target
    else:
        raise IllegalInstruction(f"cannot execute {insn.op}", addr)
    regs.pending_syscall = regs.rax


def _fetch(m: EmuMachine):
    addr = m.regs.rip
    code = m.memory.fetch(addr)
    try:
        return decode(code, 0), addr
    except DecodeError as exc:
        raise IllegalInstruction(f"illegal instruction at {addr:#x}: {exc}", addr) from exc


def emu_syscall(m: EmuMachine, number: Optional[int] = None) -> DebugEvent:
    """Apply the kernel effect of the syscall numbered ``number`` (default: rax).

    Returns ``exited(code)`` for exit, otherwise ``syscall_exit`` with rax
    holding the result.
    """
    regs = m.regs
    if number is None:
        number = regs.rax
    regs.pending_syscall = number
    if number == SYS_EXIT:
        m.status = "exited"
        m.exit_value = regs.rdi & 0xFFFFFFFF
        return DebugEvent(EventKind.EXITED, m.exit_value & 0xFF)
    if number == SYS_WRITE:
        fd, buf, count = regs.rdi, regs.rsi, regs.rdx
        if fd not in (1, 2):
            result = _neg(EBADF)
        elif count == 0:
            result = 0
        else:
            avail = m.memory.contiguous(buf, count)
            if avail == 0:
                result = _neg(EFAULT)
            else:
                m.captured_out += m.memory.read(buf, avail)
                result = avail
    elif number == SYS_READ:
        result = 0 if regs.rdi == 0 else _neg(EBADF)
    else:
        result = _neg(ENOSYS)
    regs.rax = result
    return DebugEvent(EventKind.SYSCALL_EXIT)


def emu_step(m: EmuMachine) -> DebugEvent:
    """Execute one instruction; a syscall runs its whole kernel effect."""
    if m.status != "running":
        raise BackendError("machine has exited")
    insn, addr = _fetch(m)
    if insn.op == "syscall":
        m.regs.rip = (addr + insn.length) & MASK64
        ev = emu_syscall(m)
        if ev.terminal:
            return ev
        return DebugEvent(EventKind.STEP_STOP)
    _execute(m, insn, addr)
    return DebugEvent(EventKind.STEP_STOP)


class EmuSession(TraceeSession):
    """The debug-session contract over an :class:`EmuMachine`.

    Faults become ``signal_stop`` events (SIGILL/SIGSEGV) and are delivered
    as ``killed`` on the next resume, like an unhandled native signal.
    """

    backend = "emu"
    _next_id = 1

    def __init__(self, machine: EmuMachine, argv):
        super().__init__()
        self.machine = machine
        self.argv = list(argv)
        self.child_id = EmuSession._next_id
        EmuSession._next_id += 1
        self._queued: Optional[DebugEvent] = DebugEvent(EventKind.SIGNAL_STOP, SIGTRAP)
        self._pending_signal = 0
        self._at_syscall_stop = False
        self.exit_kill = False
        self.last_fault: Optional[EmuFault] = None

    def wait_stop(self) -> DebugEvent:
        if self._queued is None:
            raise BackendError(f"wait_stop with no pending resume (session {self.state})")
        ev, self._queued = self._queued, None
        if self.state == "running":
            # the stop becomes visible only once collected, as with a real child
            self.state = "terminated" if ev.terminal else "stopped"
        return ev

    def _post(self, ev: DebugEvent):
        self._at_syscall_stop = ev.kind in (EventKind.SYSCALL_ENTER, EventKind.SYSCALL_EXIT)
        if ev.terminal:
            self.syscall_phase = "outside"
        self._queued = ev

    def _begin_resume(self) -> bool:
        """Common resume bookkeeping; False when a pending fatal signal killed the child."""
        self._require_stopped()
        if self._queued is not None:
            raise NotStopped("pending stop has not been collected with wait_stop")
        self.state = "running"
        if self._pending_signal:
            sig, self._pending_signal = self._pending_signal, 0
            self.machine.status = "killed"
            self._post(DebugEvent(EventKind.KILLED, sig))
            return False
        return True

    def _fault(self, exc: EmuFault):
        self.last_fault = exc
        self._pending_signal = exc.signal
        self._post(DebugEvent(EventKind.SIGNAL_STOP, exc.signal))

    def step(self):
        if not self._begin_resume():
            return
        m = self.machine
        try:
            if self.syscall_phase == "entered":
                # stepping out of a syscall-enter stop finishes the call
                self.syscall_phase = "outside"
                ev = emu_syscall(m, m.regs.pending_syscall)
                if not ev.terminal:
                    ev = DebugEvent(EventKind.STEP_STOP)
            else:
                ev = emu_step(m)
        except EmuFault as exc:
            self._fault(exc)
            return
        self._post(ev)

    def continue_to_syscall(self):
        if not self._begin_resume():
            return
        m = self.machine
        try:
            if self.syscall_phase == "entered":
                self.syscall_phase = "outside"
                self._post(emu_syscall(m, m.regs.pending_syscall))
                return
            while True:
                insn, addr = _fetch(m)
                if insn.op == "syscall":
                    m.regs.rip = (addr + insn.length) & MASK64
                    m.regs.pending_syscall = m.regs.rax
                    m.regs.rax = _neg(ENOSYS)
                    self.syscall_phase = "entered"
                    self._post(DebugEvent(EventKind.SYSCALL_ENTER))
                    return
                _execute(m, insn, addr)
        except EmuFault as exc:
            self._fault(exc)

    def cont(self):
        if not self._begin_resume():
            return
        m = self.machine
        try:
            if self.syscall_phase == "entered":
                self.syscall_phase = "outside"
                ev = emu_syscall(m, m.regs.pending_syscall)
                if ev.terminal:
                    self._post(ev)
                    return
            while True:
                ev = emu_step(m)
                if ev.terminal:
                    self._post(ev)
                    return
        except EmuFault as exc:
            self._fault(exc)

    def get_regs(self) -> RegisterFile:
        self._require_stopped()
        regs = self.machine.regs.copy()
        if not self._at_syscall_stop:
            regs.pending_syscall = regs.rax
        return regs

    def set_regs(self, regs: RegisterFile) -> None:
        self._require_stopped()
        new = regs.copy()
        for name, value in vars(new).items():
            setattr(new, name, value & MASK64)
        if not self._at_syscall_stop:
            new.pending_syscall = self.machine.regs.pending_syscall
        self.machine.regs = new

    def set_exit_kill(self) -> None:
        self._require_stopped()
        self.exit_kill = True

    def peek_text(self, addr: int) -> int:
        self._require_stopped()
        try:
            return int.from_bytes(self.machine.memory.read(addr, 8), "little")
        except MemFault as exc:
            raise BadAddress(f"cannot read {addr:#x}") from exc

    def poke_text(self, addr: int, value: int) -> None:
        self._require_stopped()
        try:
            self.machine.memory.write(addr, (value & MASK64).to_bytes(8, "little"))
        except MemFault as exc:
            raise BadAddress(f"cannot write {addr:#x}") from exc

    def output(self) -> bytes:
        return bytes(self.machine.captured_out)

    def kill(self) -> None:
        if self.state == "terminated":
            return
        self.machine.status = "killed"
        self.state = "terminated"
        self._queued = None

    def snapshot(self) -> EmuMachine:
        return copy.deepcopy(self.machine)


def emu_spawn(image: PayloadImage, argv=()) -> EmuSession:
    return EmuSession(new_machine(image), argv)
