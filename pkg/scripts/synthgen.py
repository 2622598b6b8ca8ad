"""
Synthetic workload generator
Mimics a camera uplink application: capture a raw frame, write it as JPEG,
optionally upload it over FTP (flow 1; flow 2 skips the upload), then log
over HTTP. Attack variants splice extra behaviour into the same stages.

Every trace is a pure function of (spec, attack, index, flow).
"""

import math
from enum import Enum
from typing import Optional

from pydantic import BaseModel, Field, model_validator

try:
    import trace_model
except ImportError:
    # Fallback if running from root
    from scripts import trace_model

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15

CORRUPT_JPEG_BYTES = 15000
SHELL_STARTUP = ("execve", "brk", "access", "open", "fstat", "mmap", "close", "getuid")

FLOW_FTP = 1
FLOW_NO_FTP = 2


def mix64(z: int) -> int:
    """SplitMix64 output function (variant 13 finalizer)."""
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """
    state <- state + 0x9E3779B97F4A7C15 (mod 2^64); output = mix64(state).
    Small, portable and identical on every platform.
    """

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return mix64(self.state)

    def next_float(self) -> float:
        # 53 high bits -> [0, 1)
        return (self.next_u64() >> 11) / float(1 << 53)

    def next_int(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] by rejection (no modulo bias)."""
        span = hi - lo + 1
        limit = (1 << 64) - ((1 << 64) % span)
        while True:
            r = self.next_u64()
            if r < limit:
                return lo + r % span


def substream(seed: int, index: int) -> SplitMix64:
    """Independent generator for trace `index` of a corpus seeded with `seed`."""
    return SplitMix64(mix64((seed + (index + 1) * GOLDEN_GAMMA) & MASK64))


class AttackKind(str, Enum):
    NONE = "none"
    HTTP_LEAK = "http_leak"
    FTP_LEAK = "ftp_leak"
    DATA_CORRUPT = "data_corrupt"
    SHELLCODE = "shellcode"


class WorkloadSpec(BaseModel):
    seed: int = Field(default=7, ge=0, le=MASK64)
    raw_image_bytes: int = Field(default=2_600_000, ge=1)
    jpeg_min: int = Field(default=27_000, ge=1)
    jpeg_max: int = Field(default=97_000, ge=1)
    ftp_skip_prob: float = Field(default=0.5, ge=0.0, le=1.0)
    write_chunk: int = Field(default=4096, ge=1)
    read_chunk: int = Field(default=61_440, ge=1)
    camera_chunk: int = Field(default=28_672, ge=1)
    jpeg_first_flush: int = Field(default=24_576, ge=1)
    jpeg_flush: int = Field(default=25_600, ge=1)
    writes_per_flush: int = Field(default=3, ge=1)

    @model_validator(mode="after")
    def _check_jpeg_range(self):
        if self.jpeg_min > self.jpeg_max:
            raise ValueError("jpeg_min must not exceed jpeg_max")
        return self


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def _capture_stage(spec):
    reads = math.ceil(spec.raw_image_bytes / spec.camera_chunk)
    return ["write", "futex", "rt_sigreturn", "stat", "open"] + ["read"] * reads + ["close", "write"]


def jpeg_flushes(spec: WorkloadSpec, jpeg_bytes: int) -> int:
    """Encoder buffer flushes: one for the first block, then one per full or partial flush block."""
    rest = max(0, jpeg_bytes - spec.jpeg_first_flush)
    return 1 + math.ceil(rest / spec.jpeg_flush)


def jpeg_writes(spec: WorkloadSpec, jpeg_bytes: int) -> int:
    return spec.writes_per_flush * jpeg_flushes(spec, jpeg_bytes)


def _jpeg_stage(spec, jpeg_bytes):
    writes = jpeg_writes(spec, jpeg_bytes)
    return ["brk", "write", "stat", "open", "fstat", "mmap"] + ["write"] * writes + ["close", "munmap", "write"]


def _ftp_transfer(spec, jpeg_bytes):
    # One file read per read_chunk block, each sent as write_chunk socket writes
    calls = []
    for start in range(0, jpeg_bytes, spec.read_chunk):
        block = min(spec.read_chunk, jpeg_bytes - start)
        calls += ["read"] + ["write"] * math.ceil(block / spec.write_chunk)
    return calls


def _ftp_stage(spec, jpeg_bytes):
    # 12-line server banner, anonymous USER
    login = ["socket", "connect"] + ["read"] * 12 + ["write", "read"]
    # STOR on a fresh data connection
    prepare = ["stat", "open", "fstat", "mmap", "socket", "connect", "stat", "write", "read"]
    teardown = ["close", "read", "read", "close", "close", "munmap", "write"]
    return login + prepare + _ftp_transfer(spec, jpeg_bytes) + teardown


def _http_stage():
    return ["write", "socket", "connect", "brk", "write", "sendto", "close", "write"]


def _finish_stage():
    return ["stat", "write", "write", "write", "futex"]


def gen_trace(spec: WorkloadSpec, attack: AttackKind = AttackKind.NONE, index: int = 0,
              flow: Optional[int] = None) -> trace_model.ExecutionTrace:
    attack = AttackKind(attack)
    rng = substream(spec.seed, index)
    # Both draws are always taken so forcing a flow leaves the image size unchanged
    drawn_flow = FLOW_NO_FTP if rng.next_float() < spec.ftp_skip_prob else FLOW_FTP
    jpeg_bytes = rng.next_int(spec.jpeg_min, spec.jpeg_max)
    if flow is not None and flow not in (FLOW_FTP, FLOW_NO_FTP):
        raise ValueError(f"flow must be 1 or 2, got {flow}")
    flow = flow or drawn_flow
    if attack is AttackKind.DATA_CORRUPT:
        jpeg_bytes = CORRUPT_JPEG_BYTES

    calls = _capture_stage(spec) + _jpeg_stage(spec, jpeg_bytes)
    closed = True
    if attack is AttackKind.SHELLCODE:
        # Hijacked control flow never reaches the end marker
        calls += list(SHELL_STARTUP)
        closed = False
    else:
        if flow == FLOW_FTP:
            calls += _ftp_stage(spec, jpeg_bytes)
        if attack is AttackKind.FTP_LEAK:
            calls += _ftp_stage(spec, jpeg_bytes)
        calls += _http_stage()
        if attack is AttackKind.HTTP_LEAK:
            calls += _http_stage()
        calls += _finish_stage()

    source_id = f"synth:{spec.seed}:{index}:flow{flow}:{attack.value}"
    return trace_model.ExecutionTrace.from_calls(calls, source_id, closed=closed)


def gen_corpus(spec: WorkloadSpec, n: int, attack: AttackKind = AttackKind.NONE,
               flow: Optional[int] = None):
    if n < 0:
        raise ValueError(f"corpus size must be >= 0, got {n}")
    return [gen_trace(spec, attack, i, flow) for i in range(n)]


def flow_of(trace: trace_model.ExecutionTrace) -> Optional[int]:
    """Flow recorded in a generated trace's source_id."""
    for part in trace.source_id.split(":"):
        if part.startswith("flow") and part[4:].isdigit():
            return int(part[4:])
    return None
