"""Controller-side debug interface and the native ptrace backend.

Both backends implement :class:`TraceeSession`. The native backend binds to
the kernel's ptrace API through ctypes and is gated to Linux x86-64; every
ptrace request of a session runs on one dedicated thread, because the kernel
ties the tracer identity to the thread that forked the child.
"""
from __future__ import annotations

import ctypes
import dataclasses
import enum
import os
import signal
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence, Union

from .errors import (
    BackendError,
    BadAddress,
    ChildLost,
    NotStopped,
    SpawnFailed,
    StepFailed,
    TraceRefused,
    UnsupportedPlatform,
)
from .payload_image import PayloadImage, build_elf, memfd_stage, native_supported, unstage

PTRACE_TRACEME = 0
PTRACE_PEEKTEXT = 1
PTRACE_POKETEXT = 4
PTRACE_CONT = 7
PTRACE_SINGLESTEP = 9
PTRACE_GETREGS = 12
PTRACE_SETREGS = 13
PTRACE_SYSCALL = 24
PTRACE_SETOPTIONS = 0x4200
PTRACE_O_EXITKILL = 0x100000

GP_REGS = ("rax", "rbx", "rcx", "rdx", "rsi", "rdi", "rbp", "rsp",
           "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15")
SYSCALL_ARG_REGS = ("rdi", "rsi", "rdx", "r10", "r8", "r9")
MASK64 = (1 << 64) - 1


@dataclass
class RegisterFile:
    rax: int = 0
    rbx: int = 0
    rcx: int = 0
    rdx: int = 0
    rsi: int = 0
    rdi: int = 0
    rbp: int = 0
    rsp: int = 0
    r8: int = 0
    r9: int = 0
    r10: int = 0
    r11: int = 0
    r12: int = 0
    r13: int = 0
    r14: int = 0
    r15: int = 0
    rip: int = 0
    # syscall number captured at syscall-enter (the kernel's orig_rax)
    pending_syscall: int = 0

    def copy(self) -> "RegisterFile":
        return dataclasses.replace(self)

    def as_tuple(self):
        return dataclasses.astuple(self)

    def gp(self):
        return {name: getattr(self, name) for name in GP_REGS}


class EventKind(str, enum.Enum):
    SIGNAL_STOP = "signal_stop"
    SYSCALL_ENTER = "syscall_enter"
    SYSCALL_EXIT = "syscall_exit"
    STEP_STOP = "step_stop"
    EXITED = "exited"
    KILLED = "killed"


@dataclass(frozen=True)
class DebugEvent:
    kind: EventKind
    # signal number for signal_stop/killed, exit code for exited
    value: Optional[int] = None

    @property
    def terminal(self) -> bool:
        return self.kind in (EventKind.EXITED, EventKind.KILLED)

    def __str__(self):
        return self.kind.value if self.value is None else f"{self.kind.value}({self.value})"


class TraceeSession:
    """One traced child, owned by one controller.

    Resume calls (:meth:`step`, :meth:`continue_to_syscall`, :meth:`cont`)
    return immediately; the matching stop is collected with :meth:`wait_stop`.
    A freshly spawned session holds its exec-stop, so the first
    :meth:`wait_stop` returns ``signal_stop(SIGTRAP)`` without resuming.
    """

    backend = "abstract"

    def __init__(self):
        self.state = "stopped"
        self.syscall_phase = "outside"
        self.child_id = None

    # subclasses implement these
    def wait_stop(self) -> DebugEvent:
        raise NotImplementedError

    def get_regs(self) -> RegisterFile:
        raise NotImplementedError

    def set_regs(self, regs: RegisterFile) -> None:
        raise NotImplementedError

    def step(self) -> None:
        raise NotImplementedError

    def continue_to_syscall(self) -> None:
        raise NotImplementedError

    def cont(self) -> None:
        raise NotImplementedError

    def set_exit_kill(self) -> None:
        raise NotImplementedError

    def peek_text(self, addr: int) -> int:
        raise NotImplementedError

    def poke_text(self, addr: int, value: int) -> None:
        raise NotImplementedError

    def output(self) -> bytes:
        """Bytes the child wrote to stdout/stderr so far."""
        raise NotImplementedError

    def kill(self) -> None:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def _require_stopped(self):
        if self.state != "stopped":
            raise NotStopped(f"session is {self.state}")

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# native backend

class _UserRegs(ctypes.Structure):
    _fields_ = [(name, ctypes.c_ulonglong) for name in (
        "r15", "r14", "r13", "r12", "rbp", "rbx", "r11", "r10", "r9", "r8",
        "rax", "rcx", "rdx", "rsi", "rdi", "orig_rax", "rip", "cs", "eflags",
        "rsp", "ss", "fs_base", "gs_base", "ds", "es", "fs", "gs")]


_libc = None


def _ptrace_fn():
    global _libc
    if _libc is None:
        lib = ctypes.CDLL(None, use_errno=True)
        lib.ptrace.argtypes = (ctypes.c_long, ctypes.c_long, ctypes.c_void_p, ctypes.c_void_p)
        lib.ptrace.restype = ctypes.c_long
        _libc = lib
    return _libc.ptrace


def _ptrace(request, pid, addr=0, data=0):
    """Raw ptrace call; returns (result, errno)."""
    fn = _ptrace_fn()
    ctypes.set_errno(0)
    res = fn(request, pid, addr, data)
    return res, ctypes.get_errno()


def _require_native():
    if not native_supported():
        raise UnsupportedPlatform("the native backend needs a Linux x86-64 host")


def probe_self() -> str:
    """Try to mark this process as traced; "free" on success, "occupied" if a tracer holds the slot.

    On success the process stays self-marked, exactly like the classic guard,
    so a second probe in the same process reports "occupied".
    """
    _require_native()
    res, _ = _ptrace(PTRACE_TRACEME, 0, 1, 0)
    return "occupied" if res == -1 else "free"


def tracer_pid(pid: Union[int, str] = "self") -> int:
    with open(f"/proc/{pid}/status") as f:
        for line in f:
            if line.startswith("TracerPid:"):
                return int(line.split()[1])
    return 0


class NativeSession(TraceeSession):
    backend = "native"

    def __init__(self, path: str, argv: Sequence[str], staged: bool = False):
        super().__init__()
        self.path = path
        self._staged = staged
        self._pool = ThreadPoolExecutor(max_workers=1, thread_name_prefix="retrograde-tracer")
        self._queued: Optional[DebugEvent] = None
        self._last_resume = None
        self._deliver = 0
        self._at_syscall_stop = False
        self._out = bytearray()
        self._out_lock = threading.Lock()
        self._reader = None
        self._out_fd = -1
        try:
            self._call(self._spawn, list(argv))
        except BaseException:
            self._shutdown()
            raise

    # all ptrace traffic goes through the pinned thread
    def _call(self, fn, *args):
        return self._pool.submit(fn, *args).result()

    def _spawn(self, argv):
        out_r, out_w = os.pipe()
        err_r, err_w = os.pipe2(os.O_CLOEXEC)
        devnull = os.open(os.devnull, os.O_RDONLY)
        inherited = [int(fd) for fd in os.listdir("/proc/self/fd")]
        ptrace = _ptrace_fn()
        pid = os.fork()
        if pid == 0:  # child
            try:
                os.dup2(devnull, 0)
                os.dup2(out_w, 1)
                os.dup2(out_w, 2)
                for fd in inherited:
                    if fd > 2 and fd != err_w:
                        try:
                            os.close(fd)
                        except OSError:
                            pass
                ctypes.set_errno(0)
                if ptrace(PTRACE_TRACEME, 0, 0, 0) == -1:
                    os.write(err_w, b"T%d" % ctypes.get_errno())
                    os._exit(127)
                os.execve(self.path, argv or [self.path], {})
            except OSError as exc:
                os.write(err_w, b"E%d" % (exc.errno or 0))
            finally:
                os._exit(127)

        os.close(out_w)
        os.close(err_w)
        os.close(devnull)
        report = b""
        while True:
            chunk = os.read(err_r, 64)
            if not chunk:
                break
            report += chunk
        os.close(err_r)
        if report:
            os.close(out_r)
            os.waitpid(pid, 0)
            code = int(report[1:] or 0)
            if report[:1] == b"T":
                raise TraceRefused(f"trace-me refused in child: {os.strerror(code)}")
            raise SpawnFailed(f"cannot execute {self.path}: {os.strerror(code)}")

        self.child_id = pid
        self._out_fd = out_r
        self._reader = threading.Thread(target=self._drain, name="retrograde-output", daemon=True)
        self._reader.start()
        _, status = os.waitpid(pid, 0)
        self._queued = self._classify(status)

    def _drain(self):
        while True:
            try:
                chunk = os.read(self._out_fd, 65536)
            except OSError:
                break
            if not chunk:
                break
            with self._out_lock:
                self._out += chunk

    def _classify(self, status) -> DebugEvent:
        self._at_syscall_stop = False
        if os.WIFEXITED(status):
            self._terminate()
            return DebugEvent(EventKind.EXITED, os.WEXITSTATUS(status))
        if os.WIFSIGNALED(status):
            self._terminate()
            return DebugEvent(EventKind.KILLED, os.WTERMSIG(status))
        if not os.WIFSTOPPED(status):
            raise ChildLost(f"unexpected wait status {status:#x}")
        self.state = "stopped"
        sig = os.WSTOPSIG(status)
        if sig == signal.SIGTRAP | 0x80:
            sig = signal.SIGTRAP  # TRACESYSGOOD marking, if a caller enabled it
        if sig == signal.SIGTRAP and self._last_resume == "syscall":
            self._at_syscall_stop = True
            if self.syscall_phase == "outside":
                self.syscall_phase = "entered"
                return DebugEvent(EventKind.SYSCALL_ENTER)
            self.syscall_phase = "outside"
            return DebugEvent(EventKind.SYSCALL_EXIT)
        if sig == signal.SIGTRAP and self._last_resume == "step":
            self.syscall_phase = "outside"
            return DebugEvent(EventKind.STEP_STOP)
        if sig != signal.SIGTRAP:
            self._deliver = sig
        return DebugEvent(EventKind.SIGNAL_STOP, sig)

    def _terminate(self):
        self.state = "terminated"
        self.syscall_phase = "outside"
        if self._reader is not None:
            self._reader.join(timeout=5)

    def wait_stop(self) -> DebugEvent:
        if self._queued is not None:
            ev, self._queued = self._queued, None
            return ev
        if self.state != "running":
            raise BackendError(f"wait_stop with no pending resume (session {self.state})")
        return self._call(self._wait)

    def _wait(self):
        try:
            _, status = os.waitpid(self.child_id, 0)
        except ChildProcessError as exc:
            self._terminate()
            raise ChildLost(f"child {self.child_id} disappeared") from exc
        return self._classify(status)

    def _resume(self, request, kind):
        self._require_stopped()
        if self._queued is not None:
            raise NotStopped("pending stop has not been collected with wait_stop")
        sig, self._deliver = self._deliver, 0
        res, err = self._call(_ptrace, request, self.child_id, 0, sig)
        if res < 0:
            raise StepFailed(f"ptrace resume failed: {os.strerror(err)}")
        self._last_resume = kind
        self.state = "running"

    def step(self):
        self._resume(PTRACE_SINGLESTEP, "step")

    def continue_to_syscall(self):
        self._resume(PTRACE_SYSCALL, "syscall")

    def cont(self):
        self._resume(PTRACE_CONT, "cont")

    def _getregs_raw(self):
        raw = _UserRegs()
        res, err = _ptrace(PTRACE_GETREGS, self.child_id, 0, ctypes.addressof(raw))
        if res < 0:
            raise BackendError(f"PTRACE_GETREGS failed: {os.strerror(err)}")
        return raw

    def get_regs(self) -> RegisterFile:
        self._require_stopped()
        raw = self._call(self._getregs_raw)
        regs = RegisterFile(**{name: getattr(raw, name) for name in GP_REGS}, rip=raw.rip)
        regs.pending_syscall = raw.orig_rax if self._at_syscall_stop else raw.rax
        return regs

    def set_regs(self, regs: RegisterFile) -> None:
        self._require_stopped()
        self._call(self._setregs, regs)

    def _setregs(self, regs):
        raw = self._getregs_raw()
        for name in GP_REGS:
            setattr(raw, name, getattr(regs, name) & MASK64)
        raw.rip = regs.rip & MASK64
        if self._at_syscall_stop:
            raw.orig_rax = regs.pending_syscall & MASK64
        res, err = _ptrace(PTRACE_SETREGS, self.child_id, 0, ctypes.addressof(raw))
        if res < 0:
            raise BackendError(f"PTRACE_SETREGS failed: {os.strerror(err)}")

    def set_exit_kill(self) -> None:
        self._require_stopped()
        res, err = self._call(_ptrace, PTRACE_SETOPTIONS, self.child_id, 0, PTRACE_O_EXITKILL)
        if res < 0:
            raise BackendError(f"PTRACE_SETOPTIONS failed: {os.strerror(err)}")

    def peek_text(self, addr: int) -> int:
        self._require_stopped()
        res, err = self._call(_ptrace, PTRACE_PEEKTEXT, self.child_id, addr, 0)
        if res == -1 and err:
            raise BadAddress(f"cannot read {addr:#x}: {os.strerror(err)}")
        return res & MASK64

    def poke_text(self, addr: int, value: int) -> None:
        self._require_stopped()
        res, err = self._call(_ptrace, PTRACE_POKETEXT, self.child_id, addr, value & MASK64)
        if res < 0:
            raise BadAddress(f"cannot write {addr:#x}: {os.strerror(err)}")

    def output(self) -> bytes:
        with self._out_lock:
            return bytes(self._out)

    def kill(self) -> None:
        if self.state == "terminated" or self.child_id is None:
            return
        self._queued = None
        self._call(self._kill)

    def _kill(self):
        try:
            os.kill(self.child_id, signal.SIGKILL)
        except ProcessLookupError:
            pass
        while True:
            try:
                _, status = os.waitpid(self.child_id, 0)
            except ChildProcessError:
                self._terminate()
                return
            if os.WIFEXITED(status) or os.WIFSIGNALED(status):
                self._terminate()
                return

    def _shutdown(self):
        if self._staged:
            unstage(self.path)
            self._staged = False
        self._pool.shutdown(wait=True)

    def close(self) -> None:
        if self._pool is None:
            return
        try:
            self.kill()
        finally:
            if self._out_fd >= 0:
                if self._reader is not None:
                    self._reader.join(timeout=5)
                os.close(self._out_fd)
                self._out_fd = -1
            self._shutdown()
            self._pool = None


def spawn_traced(target: Union[PayloadImage, str], argv: Optional[Sequence[str]] = None) -> NativeSession:
    """Fork, trace-me, exec. Images are staged through a memfd, never the disk."""
    _require_native()
    if isinstance(target, PayloadImage):
        path = memfd_stage(build_elf(target))
        return NativeSession(path, argv or [path], staged=True)
    if not os.path.exists(target):
        raise SpawnFailed(f"no such payload: {target}")
    return NativeSession(target, argv or [target])


def open_session(image: PayloadImage, backend: str = "emu", argv=None) -> TraceeSession:
    if backend == "native":
        return spawn_traced(image, argv)
    if backend == "emu":
        from .emu_backend import emu_spawn
        return emu_spawn(image, argv or [])
    raise ValueError(f"unknown backend {backend!r}")
