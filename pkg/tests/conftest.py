from __future__ import annotations

import math
import random
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from treevault import (
    DenseArray,
    MemoryBackend,
    Mesh,
    PartitionSpec,
    Scalar,
    Sharding,
    SimulatedRuntime,
    Text,
)

DTYPES = ["f32", "f64", "i32", "i64", "u8", "bool"]


def random_array(rng: random.Random, dtype: str, shape) -> DenseArray:
    nprng = np.random.default_rng(rng.getrandbits(32))
    if dtype in ("f32", "f64"):
        data = nprng.standard_normal(shape)
    elif dtype == "bool":
        data = nprng.integers(0, 2, shape)
    elif dtype == "u8":
        data = nprng.integers(0, 256, shape)
    else:
        data = nprng.integers(-1000, 1000, shape)
    return DenseArray(dtype, np.asarray(data))


def random_leaf(rng: random.Random):
    kind = rng.choice(["array", "array", "scalar", "text"])
    if kind == "text":
        return Text("".join(rng.choice("abcxyz01") for _ in range(rng.randint(0, 6))))
    dtype = rng.choice(DTYPES)
    if kind == "scalar":
        if dtype == "bool":
            return Scalar("bool", rng.random() < 0.5)
        if dtype in ("f32", "f64"):
            return Scalar(dtype, rng.uniform(-10, 10))
        return Scalar(dtype, rng.randint(0, 100))
    rank = rng.randint(0, 3)
    shape = tuple(rng.randint(1, 4) for _ in range(rank))
    return random_array(rng, dtype, shape)


def random_tree(
    rng: random.Random,
    depth: int = 3,
    *,
    allow_empty: bool = True,
    allow_tuple: bool = True,
    key_pool=("alpha", "b2", "w", "opt", "m", "x9", "zz"),
):
    """Random nested tree; keys drawn from a non-numeric pool."""
    if depth == 0 or rng.random() < 0.3:
        return random_leaf(rng)
    kind = rng.choice(["dict", "dict", "list"] + (["tuple"] if allow_tuple else []))
    n = rng.randint(0 if allow_empty else 1, 4)
    if kind == "dict":
        keys = rng.sample(key_pool, min(n, len(key_pool)))
        return {
            k: random_tree(rng, depth - 1, allow_empty=allow_empty, allow_tuple=allow_tuple)
            for k in keys
        }
    items = [
        random_tree(rng, depth - 1, allow_empty=allow_empty, allow_tuple=allow_tuple)
        for _ in range(n)
    ]
    return tuple(items) if kind == "tuple" else items


def simple_mesh(devices: int, processes: int, name: str = "data") -> Mesh:
    return Mesh.create([(name, devices)], process_count=processes)


def sharded(mesh: Mesh, shape, *axes) -> Sharding:
    entries = tuple(axes) + (None,) * (len(shape) - len(axes))
    return Sharding(mesh, PartitionSpec(entries), tuple(shape))


@pytest.fixture
def backend():
    return MemoryBackend()


@pytest.fixture
def rename_backend():
    return MemoryBackend(supports_atomic_rename=True)


def make_runtime(backend, processes=4, **kwargs):
    kwargs.setdefault("barrier_timeout", 10.0)
    return SimulatedRuntime(processes, backend, **kwargs)
