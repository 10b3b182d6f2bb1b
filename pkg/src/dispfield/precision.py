"""Global precision and determinism controls.

The package runs in one of two precisions: float32 for training and
float64 for verification work. The active dtype is process-global state
set through `set_precision` (or temporarily through the `using_precision`
context manager) so that every module allocates consistently without
threading a dtype argument through every call.

Deterministic mode exists because bitwise reproducibility is a tested
contract: two fits from the same seed must produce byte-identical
checkpoints, and evaluating a network on a grid must match a loop of
single-point evaluations bit for bit. Two mechanisms make that true on
CPU: the thread count is pinned to one (BLAS reductions reorder across
threads), and every evaluation batch is padded to a fixed row block
before the matmul. Padding matters because small batches dispatch to a
different kernel (gemv for one row) whose reduction order differs from
the batched gemm path; once all batches are a multiple of the block, the
per-row results are identical regardless of how the batch was split.
"""

from __future__ import annotations

import contextlib

import torch

from .errors import ConfigError

_PRECISIONS = {"float32": torch.float32, "float64": torch.float64}

_state = {
    "dtype": torch.float32,
    "deterministic": False,
}

# Rows per evaluation block in deterministic mode. Measured on CPU: blocks
# of >= 16 rows are bitwise-stable against any larger batch in both
# supported dtypes; 32 leaves headroom.
PAD_BLOCK = 32


def set_precision(name):
    """Set the process-global dtype. `name` is "float32" or "float64"."""
    if name not in _PRECISIONS:
        raise ConfigError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")
    _state["dtype"] = _PRECISIONS[name]


def get_dtype():
    """The torch dtype all modules should allocate in."""
    return _state["dtype"]


def precision_name():
    return "float64" if _state["dtype"] == torch.float64 else "float32"


def set_deterministic(enabled=True):
    """Enable or disable deterministic evaluation.

    Enabling pins torch to a single thread. Disabling does not restore
    the previous thread count; set it explicitly if you need to.
    """
    _state["deterministic"] = bool(enabled)
    if enabled:
        torch.set_num_threads(1)


def is_deterministic():
    return _state["deterministic"]


@contextlib.contextmanager
def using_precision(name):
    """Temporarily switch the global dtype."""
    if name not in _PRECISIONS:
        raise ConfigError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")
    prev = _state["dtype"]
    _state["dtype"] = _PRECISIONS[name]
    try:
        yield
    finally:
        _state["dtype"] = prev


def pad_rows(x, block=None):
    """Pad a 2d tensor with zero rows to a multiple of `block`.

    Returns (padded, valid_rows). A no-op (same tensor) when already
    aligned. Used by deterministic evaluation so every matmul sees the
    batched kernel; the pad rows are discarded after the call.
    """
    if block is None:
        block = PAD_BLOCK
    n = x.shape[0]
    rem = n % block
    if rem == 0 and n > 0:
        return x, n
    pad = block - rem if rem else block
    filler = torch.zeros((pad, *x.shape[1:]), dtype=x.dtype, device=x.device)
    return torch.cat([x, filler], dim=0), n


def eval_chunked(fn, points, chunk=65536):
    """Evaluate `fn` over `points` in chunks, concatenating results.

    In deterministic mode each chunk is padded to the row block so the
    result is bitwise-identical no matter the chunk size, including a
    chunk size of one. `fn` must map (n, d) -> tensor with leading dim n.
    """
    n = points.shape[0]
    if n == 0:
        return fn(points)
    outs = []
    for start in range(0, n, chunk):
        part = points[start:start + chunk]
        if _state["deterministic"]:
            padded, valid = pad_rows(part)
            outs.append(fn(padded)[:valid])
        else:
            outs.append(fn(part))
    return torch.cat(outs, dim=0)
