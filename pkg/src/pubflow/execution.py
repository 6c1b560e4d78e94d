"""Kernel execution, the run workspace, and the data/resource policies.

Datasets are little-endian float64 arrays in a 16-byte-header container:
4 magic bytes "PFLW", 4 pad bytes, then the element count as an unsigned
64-bit little-endian integer, then the raw array.  Checksums are 64-bit
FNV-1a over the full container bytes, rendered as 16 hex digits wherever
they appear in JSON.

The workspace is one directory per run: one data file per dataset id plus
a JSON sidecar {dataset_id, acquisition_params, checksum, stage}.  The DLC
policy reacts to a transmission failure by dropping the local copy,
removing its metadata, and reacquiring from the recorded acquisition
parameters; a reacquired dataset must hash identically (all producers are
deterministic).

The EM policy reconciles logical against physical accelerator counts and
picks a scheduling flavour; it is a pure function, published on the EM
channel by whoever ran it.
"""

from __future__ import annotations

import os
import struct
import subprocess
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Optional
from urllib.parse import quote, unquote

import numpy as np

from .errors import InvalidStage, MissingInput, SchemaError
from .model import KernelSpec

DATASET_MAGIC = b"PFLW"
_HEADER = struct.Struct("<4s4xQ")

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a over a byte string."""
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def checksum_hex(data: bytes) -> str:
    return format(fnv1a64(data), "016x")


def encode_dataset(values) -> bytes:
    """Serialize a 1-D float sequence into the container format."""
    arr = np.asarray(values, dtype="<f8")
    if arr.ndim != 1:
        raise SchemaError("datasets are one-dimensional arrays")
    return _HEADER.pack(DATASET_MAGIC, arr.size) + arr.tobytes()


def decode_dataset(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise SchemaError("dataset shorter than its header")
    magic, count = _HEADER.unpack_from(data)
    if magic != DATASET_MAGIC:
        raise SchemaError(f"bad dataset magic {magic!r}")
    body = data[_HEADER.size:]
    if len(body) != 8 * count:
        raise SchemaError(
            f"dataset length {len(body)} does not match count {count}")
    return np.frombuffer(body, dtype="<f8").copy()


# ------------------------------------------------------------- workspace

class DatasetStage(str, Enum):
    READY = "ready"
    DROPPED = "dropped"
    ACQUIRING = "acquiring"


@dataclass(frozen=True)
class DatasetRecord:
    dataset_id: str
    acquisition_params: dict
    checksum: Optional[str]
    stage: DatasetStage


# Acquirers regenerate dataset bytes from recorded parameters.
AcquirerFn = Callable[..., bytes]
ACQUIRERS: dict[str, AcquirerFn] = {}


def register_acquirer(name: str) -> Callable[[AcquirerFn], AcquirerFn]:
    def deco(fn: AcquirerFn) -> AcquirerFn:
        ACQUIRERS[name] = fn
        return fn
    return deco


class Workspace:
    """Per-run dataset store backed by one directory."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _data_path(self, dataset_id: str) -> Path:
        return self.root / (quote(dataset_id, safe="") + ".dat")

    def _meta_path(self, dataset_id: str) -> Path:
        return self.root / (quote(dataset_id, safe="") + ".meta.json")

    def put(self, dataset_id: str, data: bytes,
            acquisition_params: Optional[dict] = None) -> DatasetRecord:
        record = DatasetRecord(
            dataset_id=dataset_id,
            acquisition_params=dict(acquisition_params or {}),
            checksum=checksum_hex(data),
            stage=DatasetStage.READY,
        )
        self._data_path(dataset_id).write_bytes(data)
        self._write_meta(record)
        return record

    def _write_meta(self, record: DatasetRecord) -> None:
        import json
        meta = {
            "dataset_id": record.dataset_id,
            "acquisition_params": record.acquisition_params,
            "checksum": record.checksum,
            "stage": record.stage.value,
        }
        self._meta_path(record.dataset_id).write_text(
            json.dumps(meta, indent=2) + "\n", encoding="utf-8")

    def record(self, dataset_id: str) -> Optional[DatasetRecord]:
        import json
        path = self._meta_path(dataset_id)
        if not path.exists():
            return None
        meta = json.loads(path.read_text(encoding="utf-8"))
        return DatasetRecord(
            dataset_id=meta["dataset_id"],
            acquisition_params=meta.get("acquisition_params", {}),
            checksum=meta.get("checksum"),
            stage=DatasetStage(meta["stage"]),
        )

    def has_ready(self, dataset_id: str) -> bool:
        record = self.record(dataset_id)
        return record is not None and record.stage is DatasetStage.READY \
            and self._data_path(dataset_id).exists()

    def get(self, dataset_id: str) -> bytes:
        if not self.has_ready(dataset_id):
            raise MissingInput(f"dataset {dataset_id!r} is not ready")
        return self._data_path(dataset_id).read_bytes()

    def size(self, dataset_id: str) -> int:
        if not self.has_ready(dataset_id):
            return 0
        return self._data_path(dataset_id).stat().st_size

    def sizes(self) -> dict[str, int]:
        out = {}
        for meta in sorted(self.root.glob("*.meta.json")):
            dataset_id = unquote(meta.name[:-len(".meta.json")])
            if self.has_ready(dataset_id):
                out[dataset_id] = self.size(dataset_id)
        return out

    def checksum(self, dataset_id: str) -> Optional[str]:
        record = self.record(dataset_id)
        return record.checksum if record else None

    # -- staged transitions used by the DLC policy ------------------------

    def drop(self, dataset_id: str) -> DatasetRecord:
        record = self.record(dataset_id)
        if record is None or record.stage is not DatasetStage.READY:
            raise InvalidStage(
                f"cannot drop {dataset_id!r}: not a ready dataset")
        self._data_path(dataset_id).unlink(missing_ok=True)
        record = replace(record, stage=DatasetStage.DROPPED)
        self._write_meta(record)
        return record

    def remove_metadata(self, dataset_id: str) -> DatasetRecord:
        record = self.record(dataset_id)
        if record is None or record.stage is not DatasetStage.DROPPED:
            raise InvalidStage(
                f"cannot remove metadata of {dataset_id!r}: not dropped")
        # the record itself survives (we need the acquisition params);
        # the published checksum is forgotten with the payload
        record = replace(record, checksum=None, stage=DatasetStage.ACQUIRING)
        self._write_meta(record)
        return record

    def reacquire(self, dataset_id: str) -> DatasetRecord:
        record = self.record(dataset_id)
        if record is None or record.stage is not DatasetStage.ACQUIRING:
            raise InvalidStage(
                f"cannot reacquire {dataset_id!r}: not acquiring")
        params = dict(record.acquisition_params)
        name = params.pop("acquirer", None)
        if name is None or name not in ACQUIRERS:
            raise SchemaError(
                f"dataset {dataset_id!r} has no registered acquirer "
                f"({name!r})")
        data = ACQUIRERS[name](**params)
        return self.put(dataset_id, data,
                        acquisition_params=record.acquisition_params)


DLC_EVENTS = ("transmission_failure",)


def dlc_apply(workspace: Workspace, dataset_id: str,
              event: str = "transmission_failure") -> list[tuple[str, str]]:
    """Run the data-lifecycle policy for one dataset.

    Returns the ordered action list actually applied:
    drop -> remove_metadata -> reacquire.  The reacquired copy must hash
    identically to the original (producers are deterministic); callers
    can compare DatasetRecord checksums to verify.
    """
    if event not in DLC_EVENTS:
        raise SchemaError(f"unrecognized DLC event {event!r}")
    record = workspace.record(dataset_id)
    if record is None or record.stage is not DatasetStage.READY:
        raise InvalidStage(
            f"DLC policy needs a ready dataset, {dataset_id!r} is not")
    actions = [("drop", dataset_id)]
    workspace.drop(dataset_id)
    actions.append(("remove_metadata", dataset_id))
    workspace.remove_metadata(dataset_id)
    actions.append(("reacquire", dataset_id))
    workspace.reacquire(dataset_id)
    return actions


# ------------------------------------------------------------ EM policy

class SchedulingPolicy(str, Enum):
    DATA_AWARE = "data_aware"
    IN_MEMORY = "in_memory"


@dataclass(frozen=True)
class EMConfig:
    logical_gpus: int = 0
    physical_gpus: int = 0
    scheduling_policy: SchedulingPolicy = SchedulingPolicy.IN_MEMORY
    performance_model_available: bool = False

    def to_payload(self) -> dict:
        return {
            "logical_gpus": self.logical_gpus,
            "physical_gpus": self.physical_gpus,
            "scheduling_policy": self.scheduling_policy.value,
            "performance_model_available": self.performance_model_available,
        }


def em_negotiate(probe: EMConfig) -> EMConfig:
    """Reconcile a probed execution-model configuration.

    Logical device count is clamped to the physical count, and the
    scheduling policy follows the performance model: data-aware when one
    is available, in-memory otherwise.  Idempotent.
    """
    logical = min(probe.logical_gpus, probe.physical_gpus)
    policy = (SchedulingPolicy.DATA_AWARE
              if probe.performance_model_available
              else SchedulingPolicy.IN_MEMORY)
    return EMConfig(
        logical_gpus=logical,
        physical_gpus=probe.physical_gpus,
        scheduling_policy=policy,
        performance_model_available=probe.performance_model_available,
    )


def probe_environment(physical_gpus: int = 0,
                      env: Optional[Mapping[str, str]] = None) -> EMConfig:
    """Build a probe from the process environment (live-mode seam).

    PUBFLOW_GPU_DEVICES gives the logical device count the deployment
    claims; the physical count comes from the caller's hardware inventory.
    """
    env = os.environ if env is None else env
    try:
        logical = int(env.get("PUBFLOW_GPU_DEVICES", "0"))
    except ValueError:
        logical = 0
    return EMConfig(
        logical_gpus=max(0, logical),
        physical_gpus=max(0, physical_gpus),
        performance_model_available=(
            env.get("PUBFLOW_PERFORMANCE_MODEL", "") != ""),
    )


# --------------------------------------------------------- kernel running

@dataclass(frozen=True)
class TaskResult:
    exit_status: int
    outputs: dict[str, str]  # dataset id -> checksum hex
    elapsed: float
    error: Optional[str] = None


KernelFn = Callable[[KernelSpec, Workspace, EMConfig], Mapping[str, bytes]]
KERNELS: dict[str, KernelFn] = {}


def register_kernel(name: str) -> Callable[[KernelFn], KernelFn]:
    def deco(fn: KernelFn) -> KernelFn:
        KERNELS[name] = fn
        return fn
    return deco


def execute_kernel(spec: KernelSpec, workspace: Workspace,
                   em: EMConfig = EMConfig(),
                   speed: float = 1.0) -> TaskResult:
    """Run a registered kernel against the workspace.

    Missing inputs raise MissingInput (the data-policy trigger).  A kernel
    that raises or fails to produce its declared outputs is encoded as a
    nonzero exit status in the result, never an exception.
    """
    elapsed = spec.declared_duration / speed
    for dataset_id in spec.inputs:
        if not workspace.has_ready(dataset_id):
            raise MissingInput(f"input {dataset_id!r} is not ready")
    fn = KERNELS.get(spec.name)
    if fn is None:
        return TaskResult(exit_status=127, outputs={}, elapsed=elapsed,
                          error=f"kernel {spec.name!r} is not registered")
    try:
        produced = fn(spec, workspace, em)
    except MissingInput:
        raise
    except Exception as exc:  # kernel panic: encoded, not propagated
        return TaskResult(exit_status=1, outputs={}, elapsed=elapsed,
                          error=f"{type(exc).__name__}: {exc}")
    outputs: dict[str, str] = {}
    for dataset_id in spec.outputs:
        if dataset_id not in produced:
            return TaskResult(
                exit_status=1, outputs={}, elapsed=elapsed,
                error=f"kernel did not produce declared output {dataset_id!r}")
        record = workspace.put(dataset_id, produced[dataset_id])
        outputs[dataset_id] = record.checksum or ""
    return TaskResult(exit_status=0, outputs=outputs, elapsed=elapsed)


@register_kernel("noop")
def _kernel_noop(spec: KernelSpec, workspace: Workspace,
                 em: EMConfig) -> Mapping[str, bytes]:
    """Does nothing; may still declare constant outputs via params.

    params["values"] maps dataset id to a list of numbers; outputs not
    listed there become empty datasets.
    """
    values = spec.params.get("values", {})
    out = {}
    for dataset_id in spec.outputs:
        data = values.get(dataset_id, []) if isinstance(values, Mapping) \
            else values
        out[dataset_id] = encode_dataset([float(v) for v in data])
    return out


@register_kernel("shell")
def _kernel_shell(spec: KernelSpec, workspace: Workspace,
                  em: EMConfig) -> Mapping[str, bytes]:
    """Subprocess adapter for live deployments; not used in simulation.

    params: argv (list of strings).  Declared outputs must be written by
    the command into the workspace directory under their encoded names.
    """
    argv = spec.params.get("argv")
    if not isinstance(argv, list) or not argv:
        raise SchemaError("shell kernel needs a non-empty argv param")
    proc = subprocess.run([str(a) for a in argv], cwd=workspace.root,
                          capture_output=True)
    if proc.returncode != 0:
        raise RuntimeError(
            f"command exited {proc.returncode}: {proc.stderr.decode()[:200]}")
    out = {}
    for dataset_id in spec.outputs:
        path = workspace.root / (quote(dataset_id, safe="") + ".dat")
        if not path.exists():
            raise RuntimeError(f"command did not write {dataset_id!r}")
        out[dataset_id] = path.read_bytes()
    return out
