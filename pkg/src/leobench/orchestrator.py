"""Central coordinator for the measurement testbed.

Control is pull-based: agents dial in over a reliable byte stream carrying
one JSON object per line, and the orchestrator never dials an agent. Four
message types exist on the wire (SUBMIT, HEARTBEAT, COMPLETE, QUERY); node
registration is a static table fixed at construction, not a protocol step.

Scheduling state is a table of experiments plus per-node queues of
(seq, experiment) deliveries. A delivery rides on every heartbeat response
until the agent acknowledges its seq in a later heartbeat, so a lost
response costs one heartbeat interval, never a lost run; agents dedup by
seq, giving exactly-once execution over an at-least-once channel.

Every mutating call appends a numbered entry to a JSONL log before it is
applied; a periodic snapshot records the log high-water mark so restart
replays only the tail. Replaying the whole log from an empty state must
reconstruct identical tables, and tests hold the API to that.
"""

from __future__ import annotations

import json
import socket
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .clocks import WallClock
from .triggers import TriggerBinding, TriggerSyntaxError, UnknownMetric

EXPERIMENT_KINDS = ("PING", "HPING", "TRACEROUTE", "BULK_FLOW", "CUSTOM")
OVERHEAD_CLASSES = ("OVERHEAD", "NO_OVERHEAD")
# orchestrator-side view of a run; agents report the same names
RUN_STATES = ("SCHEDULED", "RUNNING", "COMPLETED", "FAILED", "KILLED", "PREEMPTED")
TERMINAL_STATES = ("COMPLETED", "FAILED", "KILLED", "PREEMPTED")

HEALTHY = "HEALTHY"
STALE = "STALE"
DOWN = "DOWN"


class OrchestratorError(Exception):
    pass


class BadSpec(OrchestratorError):
    """Structurally invalid experiment description."""


class BadTrigger(OrchestratorError):
    """Trigger expression failed to parse at submission time."""


class ConflictError(OrchestratorError):
    """Submission would double-book overhead load on some node."""

    def __init__(self, clashing_ids):
        self.clashing_ids = sorted(clashing_ids)
        super().__init__(f"conflicts with experiments: {', '.join(self.clashing_ids)}")


class UnknownNode(OrchestratorError):
    pass


class UnknownRun(OrchestratorError):
    pass


class DuplicateExperiment(OrchestratorError):
    pass


def _check_windows(windows) -> tuple[tuple[int, int], ...]:
    out = []
    for w in windows:
        if len(w) != 2:
            raise BadSpec(f"window must be [start, end]: {w!r}")
        start, end = int(w[0]), int(w[1])
        if start >= end:
            raise BadSpec(f"empty window [{start}, {end})")
        out.append((start, end))
    if not out:
        raise BadSpec("schedule.windows is empty")
    return tuple(out)


@dataclass(frozen=True)
class ExperimentSpec:
    """One experiment: what to run, where, and when.

    The schedule is either fixed half-open windows (epoch ms) or a trigger
    binding, never both. Clients must be registered nodes; servers may be
    arbitrary endpoints.
    """

    id: str
    kind: str
    overhead: str
    clients: tuple[str, ...]
    servers: tuple[str, ...] = ()
    windows: tuple[tuple[int, int], ...] | None = None
    trigger: dict | None = None
    params: dict = field(default_factory=dict)
    artifact_ref: str | None = None

    def __post_init__(self):
        if not self.id or not isinstance(self.id, str):
            raise BadSpec("experiment id must be a non-empty string")
        if self.kind not in EXPERIMENT_KINDS:
            raise BadSpec(f"unknown kind {self.kind!r}")
        if self.overhead not in OVERHEAD_CLASSES:
            raise BadSpec(f"unknown overhead class {self.overhead!r}")
        if not self.clients:
            raise BadSpec("at least one client node required")
        if (self.windows is None) == (self.trigger is None):
            raise BadSpec("schedule needs exactly one of windows or trigger")
        if self.windows is not None:
            object.__setattr__(self, "windows", _check_windows(self.windows))
        if self.trigger is not None:
            self.binding()  # parse now so bad expressions fail at submit
        object.__setattr__(self, "clients", tuple(self.clients))
        object.__setattr__(self, "servers", tuple(self.servers))

    def binding(self) -> TriggerBinding | None:
        if self.trigger is None:
            return None
        try:
            return TriggerBinding.from_spec(self.trigger, self.id)
        except (TriggerSyntaxError, UnknownMetric, KeyError, ValueError, TypeError) as exc:
            raise BadTrigger(f"{self.id}: {exc}") from exc

    def to_json(self) -> dict:
        schedule = ({"windows": [list(w) for w in self.windows]}
                    if self.windows is not None else {"trigger": dict(self.trigger)})
        out = {
            "id": self.id,
            "kind": self.kind,
            "overhead": self.overhead,
            "clients": list(self.clients),
            "servers": list(self.servers),
            "schedule": schedule,
            "params": dict(self.params),
        }
        if self.artifact_ref is not None:
            out["artifact_ref"] = self.artifact_ref
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentSpec":
        missing = [k for k in ("id", "kind", "overhead", "clients", "schedule")
                   if k not in obj]
        if missing:
            raise BadSpec(f"spec missing keys: {missing}")
        schedule = obj["schedule"]
        if not isinstance(schedule, dict):
            raise BadSpec("schedule must be an object")
        return cls(
            id=obj["id"],
            kind=obj["kind"],
            overhead=obj["overhead"],
            clients=tuple(obj["clients"]),
            servers=tuple(obj.get("servers", ())),
            windows=schedule.get("windows"),
            trigger=schedule.get("trigger"),
            params=dict(obj.get("params", {})),
            artifact_ref=obj.get("artifact_ref"),
        )


def windows_overlap(a: tuple[int, int], b: tuple[int, int]) -> bool:
    """Half-open overlap; [0, 60) and [60, 120) merely touch."""
    return a[0] < b[1] and b[0] < a[1]


@dataclass
class NodeRecord:
    node_id: str
    last_heartbeat_ms: int | None = None

    def health(self, now_ms: int, interval_ms: float) -> str:
        if self.last_heartbeat_ms is None:
            return DOWN
        missed = (now_ms - self.last_heartbeat_ms) / interval_ms
        if missed < 3:
            return HEALTHY
        if missed <= 10:
            return STALE
        return DOWN


@dataclass
class RunRecord:
    experiment_id: str
    node_id: str
    state: str = "SCHEDULED"
    requeues: int = 0
    manifest: dict | None = None


def _error(kind: str, message: str, **extra) -> dict:
    return {"ok": False, "error": {"kind": kind, "message": message, **extra}}


class Orchestrator:
    """Single-process coordinator; all entry points are thread-safe."""

    def __init__(self, node_ids, clock=None,
                 heartbeat_interval_s: float = 10.0,
                 log_path=None, snapshot_path=None, snapshot_every: int = 100,
                 max_requeues: int = 1):
        self.clock = clock if clock is not None else WallClock()
        self.heartbeat_interval_s = float(heartbeat_interval_s)
        self.max_requeues = int(max_requeues)
        self.snapshot_every = int(snapshot_every)
        self._lock = threading.RLock()
        self._nodes: dict[str, NodeRecord] = {
            nid: NodeRecord(nid) for nid in node_ids}
        self._specs: dict[str, ExperimentSpec] = {}
        self._runs: dict[tuple[str, str], RunRecord] = {}
        self._pending: dict[str, list[dict]] = {nid: [] for nid in node_ids}
        self._next_seq: dict[str, int] = {nid: 1 for nid in node_ids}
        self._seen_completions: set[tuple] = set()
        self._log_n = 0
        self._log_path = Path(log_path) if log_path else None
        self._snapshot_path = (Path(snapshot_path) if snapshot_path
                               else (self._log_path.with_suffix(".snap.json")
                                     if self._log_path else None))
        self._log_file = (open(self._log_path, "a", buffering=1)
                          if self._log_path else None)

    # --- submission -------------------------------------------------------

    def submit_experiment(self, spec) -> str:
        if isinstance(spec, dict):
            spec = ExperimentSpec.from_json(spec)
        with self._lock:
            if spec.id in self._specs:
                raise DuplicateExperiment(f"experiment id {spec.id!r} already exists")
            for nid in spec.clients:
                if nid not in self._nodes:
                    raise UnknownNode(f"unknown client node {nid!r}")
            clashing = self._find_conflicts(spec)
            if clashing:
                raise ConflictError(clashing)
            self._append_log({"op": "submit", "spec": spec.to_json()})
            self._apply_submit(spec)
            self._maybe_snapshot()
        return spec.id

    def _occupied_nodes(self, spec: ExperimentSpec) -> set[str]:
        # servers carrying overhead traffic matter too, but only ones we manage
        return set(spec.clients) | {s for s in spec.servers if s in self._nodes}

    def _find_conflicts(self, spec: ExperimentSpec) -> list[str]:
        """OVERHEAD experiments may not overlap in time on a shared node.

        NO_OVERHEAD runs never conflict with anything, and trigger-bound
        experiments have no static windows to check; agents arbitrate those
        at fire time.
        """
        if spec.overhead != "OVERHEAD" or spec.windows is None:
            return []
        mine = self._occupied_nodes(spec)
        clashing = []
        for other in self._specs.values():
            if other.overhead != "OVERHEAD" or other.windows is None:
                continue
            if not (mine & self._occupied_nodes(other)):
                continue
            if any(windows_overlap(a, b) for a in spec.windows for b in other.windows):
                clashing.append(other.id)
        return clashing

    def _apply_submit(self, spec: ExperimentSpec) -> None:
        self._specs[spec.id] = spec
        for nid in spec.clients:
            self._runs[(spec.id, nid)] = RunRecord(spec.id, nid)
            self._enqueue(nid, spec.id)

    def _enqueue(self, node_id: str, experiment_id: str) -> None:
        seq = self._next_seq[node_id]
        self._next_seq[node_id] = seq + 1
        self._pending[node_id].append({"seq": seq, "experiment_id": experiment_id})

    # --- heartbeats -------------------------------------------------------

    def heartbeat(self, node_id: str, ts_ms: int | None = None,
                  acks=(), runs=()) -> list[dict]:
        """Record liveness, absorb the agent's report, return undelivered
        schedules. Each schedule rides along until its seq is acked."""
        with self._lock:
            if node_id not in self._nodes:
                raise UnknownNode(f"unknown node {node_id!r}")
            if ts_ms is None:
                ts_ms = self.clock.now_ms()
            entry = {"op": "heartbeat", "node_id": node_id, "ts_ms": int(ts_ms),
                     "acks": [int(a) for a in acks],
                     "runs": [dict(r) for r in runs]}
            self._append_log(entry)
            self._apply_heartbeat(entry)
            self._maybe_snapshot()
            return [{"seq": p["seq"],
                     "spec": self._specs[p["experiment_id"]].to_json()}
                    for p in self._pending[node_id]]

    def _apply_heartbeat(self, entry: dict) -> None:
        node = self._nodes[entry["node_id"]]
        node.last_heartbeat_ms = entry["ts_ms"]
        if entry["acks"]:
            acked = set(entry["acks"])
            queue = self._pending[entry["node_id"]]
            queue[:] = [p for p in queue if p["seq"] not in acked]
        for report in entry["runs"]:
            rec = self._runs.get((report.get("experiment_id"), entry["node_id"]))
            if rec is not None and report.get("state") == "RUNNING" \
                    and rec.state == "SCHEDULED":
                rec.state = "RUNNING"

    # --- completions ------------------------------------------------------

    def record_completion(self, experiment_id: str, node_id: str,
                          manifest: dict) -> dict:
        """Absorb a terminal run report. Retried uploads are deduplicated;
        a PREEMPTED run is re-enqueued once before it sticks as terminal."""
        with self._lock:
            rec = self._runs.get((experiment_id, node_id))
            if rec is None:
                raise UnknownRun(f"no run of {experiment_id!r} on {node_id!r}")
            state = manifest.get("state", "COMPLETED")
            if state not in TERMINAL_STATES:
                raise BadSpec(f"completion state must be terminal, got {state!r}")
            key = (experiment_id, node_id, manifest.get("run_start_ms"), state)
            if key in self._seen_completions:
                return {"duplicate": True, "requeued": False}
            self._append_log({"op": "complete", "experiment_id": experiment_id,
                              "node_id": node_id, "manifest": dict(manifest)})
            result = self._apply_complete(experiment_id, node_id, manifest)
            self._maybe_snapshot()
            return result

    def _apply_complete(self, experiment_id: str, node_id: str,
                        manifest: dict) -> dict:
        state = manifest.get("state", "COMPLETED")
        key = (experiment_id, node_id, manifest.get("run_start_ms"), state)
        self._seen_completions.add(key)
        rec = self._runs[(experiment_id, node_id)]
        rec.manifest = dict(manifest)
        requeued = False
        if state == "PREEMPTED" and rec.requeues < self.max_requeues:
            rec.requeues += 1
            rec.state = "SCHEDULED"
            self._enqueue(node_id, experiment_id)
            requeued = True
        else:
            rec.state = state
        return {"duplicate": False, "requeued": requeued}

    # --- queries ----------------------------------------------------------

    def query(self, experiment_id: str | None = None):
        with self._lock:
            if experiment_id is not None:
                if experiment_id not in self._specs:
                    raise UnknownRun(f"unknown experiment {experiment_id!r}")
                return self._experiment_view(experiment_id)
            return [self._experiment_view(eid) for eid in sorted(self._specs)]

    def _experiment_view(self, eid: str) -> dict:
        spec = self._specs[eid]
        runs = [{"node_id": nid, "state": rec.state, "requeues": rec.requeues}
                for (e, nid), rec in sorted(self._runs.items()) if e == eid]
        return {"id": eid, "kind": spec.kind, "overhead": spec.overhead,
                "runs": runs}

    def node_health(self, now_ms: int | None = None) -> dict[str, str]:
        with self._lock:
            if now_ms is None:
                now_ms = self.clock.now_ms()
            interval_ms = self.heartbeat_interval_s * 1000.0
            return {nid: rec.health(now_ms, interval_ms)
                    for nid, rec in self._nodes.items()}

    def pending_for(self, node_id: str) -> list[dict]:
        with self._lock:
            return [dict(p) for p in self._pending[node_id]]

    # --- persistence ------------------------------------------------------

    def _append_log(self, entry: dict) -> None:
        self._log_n += 1
        entry = {"n": self._log_n, **entry}
        if self._log_file is not None:
            self._log_file.write(json.dumps(entry, sort_keys=True) + "\n")

    def _maybe_snapshot(self) -> None:
        # only after the logged entry has been applied, so the snapshot's
        # high-water mark never outruns its captured state
        if self._log_file is not None and self.snapshot_every \
                and self._log_n % self.snapshot_every == 0:
            self.write_snapshot()

    def write_snapshot(self) -> None:
        if self._snapshot_path is None:
            return
        payload = {"log_n": self._log_n, "state": self.to_state()}
        tmp = self._snapshot_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(payload, sort_keys=True))
        tmp.replace(self._snapshot_path)

    def to_state(self) -> dict:
        """Canonical JSON-friendly dump of every table, for snapshots and
        replay-identity checks."""
        with self._lock:
            return {
                "specs": {eid: s.to_json() for eid, s in sorted(self._specs.items())},
                "runs": [{"experiment_id": e, "node_id": n, "state": r.state,
                          "requeues": r.requeues, "manifest": r.manifest}
                         for (e, n), r in sorted(self._runs.items())],
                "pending": {nid: [[p["seq"], p["experiment_id"]] for p in q]
                            for nid, q in sorted(self._pending.items())},
                "next_seq": dict(sorted(self._next_seq.items())),
                "nodes": {nid: rec.last_heartbeat_ms
                          for nid, rec in sorted(self._nodes.items())},
                "completions": sorted(list(k) for k in self._seen_completions),
            }

    def _load_state(self, state: dict) -> None:
        self._specs = {eid: ExperimentSpec.from_json(s)
                       for eid, s in state["specs"].items()}
        self._runs = {}
        for r in state["runs"]:
            self._runs[(r["experiment_id"], r["node_id"])] = RunRecord(
                r["experiment_id"], r["node_id"], r["state"], r["requeues"],
                r["manifest"])
        for nid, q in state["pending"].items():
            self._pending[nid] = [{"seq": s, "experiment_id": e} for s, e in q]
        self._next_seq.update(state["next_seq"])
        for nid, hb in state["nodes"].items():
            if nid in self._nodes:
                self._nodes[nid].last_heartbeat_ms = hb
        self._seen_completions = {tuple(k) for k in state["completions"]}

    def _apply(self, entry: dict) -> None:
        op = entry["op"]
        if op == "submit":
            self._apply_submit(ExperimentSpec.from_json(entry["spec"]))
        elif op == "heartbeat":
            self._apply_heartbeat(entry)
        elif op == "complete":
            self._apply_complete(entry["experiment_id"], entry["node_id"],
                                 entry["manifest"])
        else:
            raise ValueError(f"unknown log op {op!r}")

    @classmethod
    def restore(cls, node_ids, log_path, snapshot_path=None,
                **kwargs) -> "Orchestrator":
        """Rebuild from snapshot plus log tail (or the whole log). The
        returned instance keeps appending to the same log."""
        orch = cls(node_ids, log_path=None, snapshot_path=None, **kwargs)
        log_path = Path(log_path)
        snap = (Path(snapshot_path) if snapshot_path
                else log_path.with_suffix(".snap.json"))
        if snap.exists():
            payload = json.loads(snap.read_text())
            orch._load_state(payload["state"])
            orch._log_n = payload["log_n"]
        if log_path.exists():
            with open(log_path) as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    entry = json.loads(line)
                    if entry["n"] <= orch._log_n:
                        continue
                    orch._apply(entry)
                    orch._log_n = entry["n"]
        orch._log_path = log_path
        orch._snapshot_path = snap
        orch._log_file = open(log_path, "a", buffering=1)
        return orch

    def close(self) -> None:
        if self._log_file is not None:
            self._log_file.close()
            self._log_file = None

    # --- wire protocol ----------------------------------------------------

    def handle_message(self, msg: dict) -> dict:
        """Dispatch one decoded wire message; never raises."""
        try:
            mtype = msg.get("type")
            if mtype == "SUBMIT":
                eid = self.submit_experiment(msg["spec"])
                return {"ok": True, "experiment_id": eid}
            if mtype == "HEARTBEAT":
                schedules = self.heartbeat(
                    msg["node_id"], ts_ms=msg.get("ts_ms"),
                    acks=msg.get("acks", ()), runs=msg.get("runs", ()))
                return {"ok": True, "schedules": schedules}
            if mtype == "COMPLETE":
                res = self.record_completion(
                    msg["experiment_id"], msg["node_id"], msg["manifest"])
                return {"ok": True, **res}
            if mtype == "QUERY":
                return {"ok": True, "result": self.query(msg.get("experiment_id"))}
            return _error("BadMessage", f"unknown message type {mtype!r}")
        except ConflictError as exc:
            return _error("ConflictError", str(exc),
                          clashing_ids=exc.clashing_ids)
        except BadTrigger as exc:
            return _error("BadTrigger", str(exc))
        except BadSpec as exc:
            return _error("BadSpec", str(exc))
        except UnknownNode as exc:
            return _error("UnknownNode", str(exc))
        except UnknownRun as exc:
            return _error("UnknownRun", str(exc))
        except DuplicateExperiment as exc:
            return _error("DuplicateExperiment", str(exc))
        except (KeyError, TypeError, ValueError) as exc:
            return _error("BadMessage", f"{type(exc).__name__}: {exc}")

    def serve(self, host: str = "127.0.0.1", port: int = 0):
        """Listen for line-delimited JSON requests; one response line each.
        Returns (server_socket, thread); the caller owns shutdown."""
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        srv.bind((host, port))
        srv.listen(16)

        def client_loop(conn):
            with conn, conn.makefile("rw", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        msg = json.loads(line)
                    except json.JSONDecodeError as exc:
                        resp = _error("BadMessage", f"invalid JSON: {exc}")
                    else:
                        resp = self.handle_message(msg)
                    fh.write(json.dumps(resp) + "\n")
                    fh.flush()

        def accept_loop():
            while True:
                try:
                    conn, _ = srv.accept()
                except OSError:
                    return
                threading.Thread(target=client_loop, args=(conn,),
                                 daemon=True).start()

        thread = threading.Thread(target=accept_loop, daemon=True)
        thread.start()
        return srv, thread


class LocalClient:
    """In-process stand-in for OrchestratorClient, same call surface."""

    def __init__(self, orchestrator: Orchestrator):
        self._orch = orchestrator

    def call(self, msg: dict) -> dict:
        return self._orch.handle_message(msg)


class OrchestratorClient:
    """One short-lived TCP connection per request."""

    def __init__(self, host: str, port: int, timeout_s: float = 10.0):
        self.host = host
        self.port = int(port)
        self.timeout_s = float(timeout_s)

    def call(self, msg: dict) -> dict:
        with socket.create_connection((self.host, self.port),
                                      timeout=self.timeout_s) as conn:
            with conn.makefile("rw", encoding="utf-8") as fh:
                fh.write(json.dumps(msg) + "\n")
                fh.flush()
                line = fh.readline()
        if not line:
            raise ConnectionError("orchestrator closed the connection")
        return json.loads(line)


def submit(client, spec_json: dict) -> dict:
    return client.call({"type": "SUBMIT", "spec": spec_json})


def query(client, experiment_id: str | None = None) -> dict:
    msg = {"type": "QUERY"}
    if experiment_id is not None:
        msg["experiment_id"] = experiment_id
    return client.call(msg)
