from .client import ClusterError, RunResult, run_distributed, shutdown_cluster, submit_run
from .planner import TaskSpec, plan_partitions
from .scheduler import Scheduler, serve_scheduler
from .worker import Worker, worker_main

__all__ = [
    "ClusterError",
    "RunResult",
    "Scheduler",
    "TaskSpec",
    "Worker",
    "plan_partitions",
    "run_distributed",
    "serve_scheduler",
    "shutdown_cluster",
    "submit_run",
    "worker_main",
]
