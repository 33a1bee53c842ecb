"""The two controller loops: syscall rewriting and direction-controlled stepping.

Reverse mode re-executes instructions in reverse static order by
overwriting the instruction pointer before every single-step. It does not
undo any instruction's effect; it is not state-restoring reverse debugging.
"""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

from .debug_port import SYSCALL_ARG_REGS, EventKind, TraceeSession
from .errors import BackendError, Exhausted, MapMismatch

SYS_CUSTOM_WRITE = 10000
SYS_WRITE = 1


@dataclass(frozen=True)
class RewriteRule:
    match_number: int
    replacement_number: int
    # 1-based argument slot -> slot whose old value it receives
    arg_permutation: Dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        slots = set(self.arg_permutation)
        if slots != set(self.arg_permutation.values()):
            raise ValueError(f"argument permutation {self.arg_permutation} is not a bijection")
        if not slots <= set(range(1, len(SYSCALL_ARG_REGS) + 1)):
            raise ValueError(f"argument slots must be within 1..{len(SYSCALL_ARG_REGS)}")

    def apply(self, regs) -> None:
        old = {slot: getattr(regs, SYSCALL_ARG_REGS[slot - 1]) for slot in self.arg_permutation.values()}
        for dest, src in self.arg_permutation.items():
            setattr(regs, SYSCALL_ARG_REGS[dest - 1], old[src])
        regs.pending_syscall = self.replacement_number


# 10000 -> write, with the buffer/descriptor arguments swapped back
DEFAULT_RULES = (RewriteRule(SYS_CUSTOM_WRITE, SYS_WRITE, {1: 2, 2: 1}),)


@dataclass
class DirectionPolicy:
    mode: str
    addresses: Sequence[int]
    start_index: int = 0
    end_index: Optional[int] = None
    quirk_paper_indexing: bool = False

    def __post_init__(self):
        if self.mode not in ("forward", "reverse"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not self.addresses:
            raise ValueError("policy needs at least one address")
        if self.end_index is None:
            self.end_index = len(self.addresses) - 1
        if not 0 <= self.start_index <= self.end_index < len(self.addresses):
            raise ValueError(f"indices {self.start_index}..{self.end_index} out of bounds")

    @property
    def window(self) -> int:
        return self.end_index - self.start_index + 1


def next_index(policy: DirectionPolicy, counter: int) -> int:
    """Index of the instruction to run at step ``counter`` (1-based).

    With ``quirk_paper_indexing`` the reverse walk uses the original
    listing's ``end - counter - 1`` arithmetic, which skips the last two
    slots of the window.
    """
    if counter < 1:
        raise ValueError("counter starts at 1")
    if policy.mode == "forward":
        return min(policy.start_index + counter - 1, policy.end_index)
    if policy.quirk_paper_indexing:
        idx = policy.end_index - counter - 1
    else:
        idx = policy.end_index - (counter - 1)
    if idx < policy.start_index:
        raise Exhausted(f"reverse walk passed start index at step {counter}")
    return idx


@dataclass(frozen=True)
class StepRecord:
    n: int
    pre_rip: int
    post_rip: Optional[int]
    event: str
    rewrite: bool = False
    # not serialized: syscall number at syscall stops and rax at syscall-exit
    syscall: Optional[int] = field(default=None, compare=False)
    result: Optional[int] = field(default=None, compare=False)

    def to_json(self):
        return {"n": self.n, "pre_rip": self.pre_rip, "post_rip": self.post_rip,
                "event": self.event, "rewrite": self.rewrite}


@dataclass
class TraceReport:
    steps: List[StepRecord] = field(default_factory=list)
    output: bytes = b""
    exit_code: Optional[int] = None
    killed_signal: Optional[int] = None
    controller_stopped: bool = False

    @property
    def exit(self):
        if self.controller_stopped:
            return "controller-stopped"
        if self.killed_signal is not None:
            return f"killed:{self.killed_signal}"
        return self.exit_code

    @property
    def rewrites(self) -> int:
        return sum(1 for s in self.steps if s.rewrite)

    def pre_rips(self) -> List[int]:
        return [s.pre_rip for s in self.steps]

    def executed_rips(self) -> List[int]:
        """Addresses of the instructions actually run, skipping signal stops."""
        return [s.pre_rip for s in self.steps if s.event != EventKind.SIGNAL_STOP.value]

    def to_jsonl(self) -> str:
        lines = [json.dumps(s.to_json()) for s in self.steps]
        lines.append(json.dumps({"exit": self.exit,
                                 "output_b64": base64.b64encode(self.output).decode("ascii")}))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "TraceReport":
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        if not rows or "exit" not in rows[-1]:
            raise ValueError("report has no final exit record")
        final = rows.pop()
        report = cls(steps=[StepRecord(r["n"], r["pre_rip"], r["post_rip"], r["event"], r["rewrite"])
                            for r in rows],
                     output=base64.b64decode(final["output_b64"]))
        ex = final["exit"]
        if ex == "controller-stopped":
            report.controller_stopped = True
        elif isinstance(ex, str) and ex.startswith("killed:"):
            report.killed_signal = int(ex.split(":", 1)[1])
        else:
            report.exit_code = ex
        return report


def _finish(report: TraceReport, session: TraceeSession, ev=None) -> TraceReport:
    if ev is not None and ev.kind == EventKind.EXITED:
        report.exit_code = ev.value
    elif ev is not None and ev.kind == EventKind.KILLED:
        report.killed_signal = ev.value
    report.output = session.output()
    return report


def _is_syscall_stop(ev) -> bool:
    return ev.kind in (EventKind.SYSCALL_ENTER, EventKind.SYSCALL_EXIT)


def _attach_partial(exc, report, session):
    report.output = session.output()
    exc.report = report
    return exc


def run_rewriter(session: TraceeSession, rules: Sequence[RewriteRule] = DEFAULT_RULES) -> TraceReport:
    """Drive the child syscall-to-syscall, rewriting matched calls at syscall-enter."""
    report = TraceReport()
    by_number = {r.match_number: r for r in rules}
    try:
        ev = session.wait_stop()
        if ev.terminal:
            return _finish(report, session, ev)
        session.set_exit_kill()
        n = 0
        while True:
            session.continue_to_syscall()
            ev = session.wait_stop()
            if ev.terminal:
                return _finish(report, session, ev)
            n += 1
            regs = session.get_regs()
            rewrite = False
            result = None
            syscall = regs.pending_syscall if _is_syscall_stop(ev) else None
            if ev.kind == EventKind.SYSCALL_ENTER:
                rule = by_number.get(regs.pending_syscall)
                if rule is not None:
                    rule.apply(regs)
                    session.set_regs(regs)
                    rewrite = True
            elif ev.kind == EventKind.SYSCALL_EXIT:
                result = regs.rax
            report.steps.append(StepRecord(n, regs.rip, regs.rip, ev.kind.value, rewrite, syscall, result))
    except BackendError as exc:
        raise _attach_partial(exc, report, session)


def run_directed(session: TraceeSession, policy: DirectionPolicy) -> TraceReport:
    """Single-step the child in forward or reverse instruction order.

    Forward runs without touching rip. Reverse installs the next address
    before every step, walking the window from its end towards its start.
    A window exhausted before the child exits ends with the child killed and
    the report marked controller-stopped.
    """
    report = TraceReport()
    addresses = list(policy.addresses)
    try:
        ev = session.wait_stop()
        if ev.terminal:
            return _finish(report, session, ev)
        regs = session.get_regs()
        if regs.rip not in set(addresses):
            session.kill()
            raise MapMismatch(f"first stop at {regs.rip:#x} is not a mapped instruction "
                              f"(map starts at {addresses[0]:#x})", _finish(report, session))
        session.set_exit_kill()
        counter = 0
        retry = False
        while True:
            if not retry:
                counter += 1
            regs = session.get_regs()
            if policy.mode == "reverse":
                try:
                    idx = next_index(policy, counter)
                except Exhausted:
                    break
                regs.rip = addresses[idx]
                session.set_regs(regs)
            elif counter > policy.window:
                break
            pre = regs.rip
            session.step()
            ev = session.wait_stop()
            n = len(report.steps) + 1
            if ev.terminal:
                report.steps.append(StepRecord(n, pre, None, ev.kind.value))
                return _finish(report, session, ev)
            post = session.get_regs().rip
            report.steps.append(StepRecord(n, pre, post, ev.kind.value))
            # a signal stop executed nothing; the same slot is stepped again
            retry = ev.kind == EventKind.SIGNAL_STOP
    except BackendError as exc:
        raise _attach_partial(exc, report, session)
    session.kill()
    report.controller_stopped = True
    return _finish(report, session)
