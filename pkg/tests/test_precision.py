import pytest
import torch

from dispfield import precision
from dispfield.errors import ConfigError


def test_default_dtype_is_float32():
    assert precision.get_dtype() == torch.float32
    assert precision.precision_name() == "float32"


def test_set_precision_switches_dtype():
    precision.set_precision("float64")
    assert precision.get_dtype() == torch.float64
    assert precision.precision_name() == "float64"


def test_unknown_precision_rejected():
    with pytest.raises(ConfigError):
        precision.set_precision("float16")


def test_using_precision_restores_previous():
    with precision.using_precision("float64"):
        assert precision.get_dtype() == torch.float64
    assert precision.get_dtype() == torch.float32


def test_pad_rows_alignment():
    x = torch.ones(5, 3)
    padded, n = precision.pad_rows(x, block=4)
    assert n == 5
    assert padded.shape == (8, 3)
    assert torch.equal(padded[:5], x)
    assert torch.all(padded[5:] == 0)
    aligned = torch.ones(8, 3)
    same, n2 = precision.pad_rows(aligned, block=4)
    assert same is aligned and n2 == 8


def test_deterministic_mode_pins_threads():
    precision.set_deterministic(True)
    assert precision.is_deterministic()
    assert torch.get_num_threads() == 1


def test_eval_chunked_bitwise_stable_under_chunking():
    """In deterministic mode the chunk size must not change a single bit,
    down to chunks of one point."""
    precision.set_deterministic(True)
    lin = torch.nn.Linear(3, 17)
    fn = lambda p: torch.sin(7.0 * lin(p))
    pts = torch.randn(101, 3)
    full = precision.eval_chunked(fn, pts, chunk=101)
    for chunk in (1, 7, 32, 100):
        out = precision.eval_chunked(fn, pts, chunk=chunk)
        assert torch.equal(out, full), f"chunk={chunk} changed bits"


def test_eval_chunked_concatenates_without_determinism():
    pts = torch.randn(10, 3)
    out = precision.eval_chunked(lambda p: p * 2, pts, chunk=3)
    assert torch.equal(out, pts * 2)
