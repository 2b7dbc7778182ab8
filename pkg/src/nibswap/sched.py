"""Cooperative, step-controlled scheduler for generator tasks.

Apps, the update coordinator and test drivers are generators that yield
``None`` (reschedule me), ``Recv(mailbox, timeout)``, ``Sleep(delay)`` or a
``Task`` to join.  The scheduler resumes one runnable task per :meth:`step`:
in spawn/FIFO order by default, or uniformly at random from a seeded RNG so
tests can explore interleavings.  Time is virtual and only advances when no
task is runnable.
"""
from __future__ import annotations

import logging
import random
import threading
from collections import deque
from dataclasses import dataclass

from .errors import Disconnected

log = logging.getLogger(__name__)


class _Timeout:
    def __repr__(self):
        return "TIMEOUT"

    def __bool__(self):
        return False


TIMEOUT = _Timeout()


class Mailbox:
    """FIFO message queue usable from scheduler tasks (``Recv``) and from threads (``get``)."""

    def __init__(self, name: str = ""):
        self.name = name
        self._items = deque()
        self._cond = threading.Condition()
        self._waiters = []
        self.closed = False

    def put(self, item) -> None:
        with self._cond:
            if self.closed:
                return
            self._items.append(item)
            self._cond.notify_all()
            waiters, self._waiters = self._waiters, []
        for sched, task in waiters:
            sched._wake(task, self)

    def get(self, timeout=None):
        """Blocks until an item arrives; raises ``Disconnected`` once closed and empty."""
        with self._cond:
            ok = self._cond.wait_for(lambda: self._items or self.closed, timeout)
            if self._items:
                return self._items.popleft()
            if self.closed:
                raise Disconnected(self.name)
            if not ok:
                raise TimeoutError(self.name)

    def get_nowait(self):
        with self._cond:
            if not self._items:
                raise IndexError("mailbox empty")
            return self._items.popleft()

    def close(self) -> None:
        with self._cond:
            self.closed = True
            self._cond.notify_all()

    def drain(self) -> list:
        with self._cond:
            out = list(self._items)
            self._items.clear()
            return out

    def __len__(self):
        return len(self._items)

    def __bool__(self):
        return True


@dataclass
class Recv:
    mailbox: Mailbox
    timeout: float | None = None


@dataclass
class Sleep:
    delay: float


class Task:
    def __init__(self, gen, name):
        self.gen = gen
        self.name = name
        self.done = False
        self.killed = False
        self.result = None
        self.error = None
        self.waiting = None
        self.deadline = None
        self._joiners = []

    def __repr__(self):
        state = "done" if self.done else ("waiting" if self.waiting else "ready")
        return f"<Task {self.name} {state}>"


class Scheduler:
    def __init__(self, seed=None):
        self.rng = random.Random(seed) if seed is not None else None
        self.now = 0.0
        self.tasks = []
        self._ready = deque()
        self._running = None
        self.steps = 0
        self.observers = []

    @property
    def in_task(self) -> bool:
        return self._running is not None

    def spawn(self, gen, name: str = "task") -> Task:
        task = Task(gen, name)
        self.tasks.append(task)
        self._ready.append(task)
        return task

    def kill(self, task: Task) -> None:
        if task.done:
            return
        task.killed = True
        if task is not self._running:
            try:
                task.gen.close()
            except Exception as exc:  # a task's cleanup failing must not take the scheduler down
                log.warning("error while killing %s: %r", task.name, exc)
        self._finish(task)

    def _finish(self, task, result=None, error=None):
        task.done = True
        task.result = result
        task.error = error
        task.waiting = None
        if task in self._ready:
            self._ready.remove(task)
        if task in self.tasks:
            self.tasks.remove(task)
        joiners, task._joiners = task._joiners, []
        for j in joiners:
            self._wake(j, task)

    def _wake(self, task, source):
        if task.done or task in self._ready:
            return
        if task.waiting is not None and getattr(task.waiting, "mailbox", task.waiting) is source:
            self._ready.append(task)

    def _resume_value(self, task):
        w = task.waiting
        if w is None:
            return True, None
        if isinstance(w, Recv):
            if len(w.mailbox):
                return True, w.mailbox.get_nowait()
            if w.mailbox.closed:
                return True, TIMEOUT
            if self._due(task):
                return True, TIMEOUT
            return False, None
        if isinstance(w, Sleep):
            return self._due(task), None
        if isinstance(w, Task):
            return w.done, w.result
        raise TypeError(w)

    def _pick(self):
        if not self._ready:
            return None
        if self.rng is None:
            return self._ready.popleft()
        i = self.rng.randrange(len(self._ready))
        task = self._ready[i]
        del self._ready[i]
        return task

    def step(self, advance_time: bool = True) -> bool:
        """Runs one task until its next yield.  Returns False when nothing can run."""
        while True:
            task = self._pick()
            if task is None:
                if advance_time and self._advance():
                    continue
                return False
            ok, value = self._resume_value(task)
            if ok:
                break
        self._running = task
        task.waiting = None
        task.deadline = None
        try:
            instr = task.gen.send(value)
        except StopIteration as stop:
            self._running = None
            self._finish(task, result=stop.value)
        except Exception as exc:
            self._running = None
            log.debug("task %s failed: %r", task.name, exc)
            self._finish(task, error=exc)
        else:
            self._running = None
            if task.killed:
                try:
                    task.gen.close()
                except Exception:
                    pass
            else:
                self._park(task, instr)
        self.steps += 1
        for obs in list(self.observers):
            obs(task)
        return True

    def _park(self, task, instr):
        if instr is None:
            self._ready.append(task)
            return
        task.waiting = instr
        if isinstance(instr, Recv):
            if instr.timeout is not None:
                task.deadline = self.now + max(instr.timeout, 0.0)
            if len(instr.mailbox) or instr.mailbox.closed or self._due(task):
                self._ready.append(task)
            else:
                instr.mailbox._waiters.append((self, task))
        elif isinstance(instr, Sleep):
            task.deadline = self.now + max(instr.delay, 0.0)
            if self._due(task):
                self._ready.append(task)
        elif isinstance(instr, Task):
            if instr.done:
                self._ready.append(task)
            else:
                instr._joiners.append(task)
        else:
            raise TypeError(f"task {task.name} yielded {instr!r}")

    def _due(self, task) -> bool:
        return task.deadline is not None and task.deadline <= self.now + 1e-9

    def advance_to(self, t: float) -> None:
        """Moves virtual time forward (never back) and wakes tasks whose deadline passed."""
        self.now = max(self.now, t)
        for task in self.tasks:
            if not task.done and self._due(task) and task not in self._ready:
                self._ready.append(task)

    def _advance(self) -> bool:
        pending = [t for t in self.tasks if not t.done and t.deadline is not None]
        if not pending:
            return False
        t_next = min(t.deadline for t in pending)
        self.now = max(self.now, t_next)
        for t in pending:
            if t.deadline <= self.now and t not in self._ready:
                self._ready.append(t)
        return True

    def run_until_idle(self, max_steps: int = 1_000_000) -> int:
        """Steps until no task is runnable without advancing virtual time."""
        n = 0
        while n < max_steps and self.step(advance_time=False):
            n += 1
        if n >= max_steps:
            raise RuntimeError("scheduler did not go idle (livelock?)")
        return n

    def run_until(self, predicate, max_steps: int = 1_000_000) -> bool:
        n = 0
        while not predicate():
            if n >= max_steps or not self.step():
                return predicate()
            n += 1
        return True

    def run_until_done(self, task: Task, max_steps: int = 1_000_000):
        self.run_until(lambda: task.done, max_steps)
        if not task.done:
            raise RuntimeError(f"task {task.name} did not finish")
        return task.result
