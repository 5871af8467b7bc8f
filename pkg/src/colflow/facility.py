"""Self-hosted local facility: data server, scheduler, and workers.

Children are separate interpreter processes running the command-line
entrypoints, so every byte and timing crosses real process and socket
boundaries. Each child announces itself with one stdout line ending in
its bound address; stderr goes to per-process log files.
"""

from __future__ import annotations

import os
import subprocess
import sys
import threading
import time

from .cluster.client import shutdown_cluster


class FacilityError(Exception):
    pass


def _await_line(proc: subprocess.Popen, timeout: float, what: str) -> str:
    """First stdout line of a child, or FacilityError on timeout/exit."""
    box: dict[str, str] = {}

    def read() -> None:
        box["line"] = proc.stdout.readline()

    t = threading.Thread(target=read, daemon=True)
    t.start()
    t.join(timeout)
    line = box.get("line", "")
    if not line:
        proc.kill()
        raise FacilityError(f"{what} did not announce itself within {timeout}s")
    return line.strip()


def _drain(proc: subprocess.Popen) -> None:
    # keep reading so the child never blocks on a full stdout pipe
    def pump() -> None:
        for _ in proc.stdout:
            pass

    threading.Thread(target=pump, daemon=True).start()


def _address_of(line: str, what: str) -> str:
    address = line.rsplit(" ", 1)[-1]
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise FacilityError(f"{what} announced no usable address: {line!r}")
    return address


class MiniFacility:
    """One data server, one scheduler, and n workers on localhost."""

    def __init__(
        self,
        data_root: str,
        log_dir: str,
        n_workers: int = 4,
        slots: int = 1,
        startup_timeout: float = 30.0,
    ):
        if n_workers < 1:
            raise FacilityError("need at least one worker")
        self.data_root = os.path.abspath(data_root)
        self.log_dir = os.path.abspath(log_dir)
        self.n_workers = n_workers
        self.slots = slots
        self.startup_timeout = startup_timeout
        self.data_address = ""
        self.scheduler_address = ""
        self.data_proc: subprocess.Popen | None = None
        self.scheduler_proc: subprocess.Popen | None = None
        self.worker_procs: list[subprocess.Popen] = []
        self._logs: list = []

    def _spawn(self, args: list[str], log_name: str) -> subprocess.Popen:
        os.makedirs(self.log_dir, exist_ok=True)
        log = open(os.path.join(self.log_dir, log_name), "w")
        self._logs.append(log)
        return subprocess.Popen(
            [sys.executable, "-m", "colflow.cli", *args],
            stdout=subprocess.PIPE,
            stderr=log,
            text=True,
        )

    def start(self) -> "MiniFacility":
        try:
            self._start()
        except BaseException:
            self.stop()
            raise
        return self

    def _start(self) -> None:
        self.data_proc = self._spawn(
            ["serve-data", "--root", self.data_root, "--listen", "127.0.0.1:0"],
            "data-server.log",
        )
        line = _await_line(self.data_proc, self.startup_timeout, "data server")
        self.data_address = _address_of(line, "data server")
        _drain(self.data_proc)

        self.scheduler_proc = self._spawn(
            ["scheduler", "--listen", "127.0.0.1:0"], "scheduler.log"
        )
        line = _await_line(self.scheduler_proc, self.startup_timeout, "scheduler")
        self.scheduler_address = _address_of(line, "scheduler")
        _drain(self.scheduler_proc)

        for k in range(self.n_workers):
            proc = self._spawn(
                [
                    "worker",
                    "--scheduler",
                    self.scheduler_address,
                    "--slots",
                    str(self.slots),
                    "--data",
                    self.data_address,
                    "--name",
                    f"w{k}",
                ],
                f"worker-{k}.log",
            )
            _await_line(proc, self.startup_timeout, f"worker w{k}")
            _drain(proc)
            self.worker_procs.append(proc)
        # registrations are already in flight once every worker has printed;
        # the scheduler additionally grants submits a startup grace period
        time.sleep(0.2)

    def stop(self) -> None:
        if self.scheduler_address:
            shutdown_cluster(self.scheduler_address)
        deadline = time.monotonic() + 10.0
        for proc in [self.scheduler_proc, *self.worker_procs]:
            if proc is None or proc.poll() is not None:
                continue
            try:
                proc.wait(timeout=max(0.1, deadline - time.monotonic()))
            except subprocess.TimeoutExpired:
                proc.terminate()
        if self.data_proc is not None and self.data_proc.poll() is None:
            self.data_proc.terminate()
        for proc in [self.data_proc, self.scheduler_proc, *self.worker_procs]:
            if proc is None or proc.poll() is not None:
                continue
            try:
                proc.wait(timeout=5.0)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait(timeout=5.0)
        for log in self._logs:
            try:
                log.close()
            except OSError:
                pass
        self._logs.clear()
        self.scheduler_address = ""
        self.data_address = ""

    def __enter__(self) -> "MiniFacility":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
