import numpy as np
import pytest

from roo.schema import FeatureMeta, FeatureRegistry, RequestSample

# Small hand registry used across unit tests.
RO_D1, RO_D2 = 1, 2
RO_L1, RO_L2 = 10, 11
NRO_D1 = 20
NRO_L1 = 30


def small_registry() -> FeatureRegistry:
    meta = FeatureMeta()
    return FeatureRegistry(
        ro_dense={RO_D1: meta, RO_D2: meta},
        ro_idlist={RO_L1: meta, RO_L2: meta},
        nro_dense={NRO_D1: meta},
        nro_idlist={NRO_L1: meta},
    )


@pytest.fixture
def registry() -> FeatureRegistry:
    return small_registry()


def f32(x: float) -> float:
    return float(np.float32(x))


def make_sample(
    request_id: int = 1,
    user_id: int = 5,
    items: tuple = (7, 9, 13),
    conversions: tuple | None = None,
) -> RequestSample:
    """Aligned sample over the small registry."""
    k = len(items)
    if conversions is None:
        conversions = tuple([] for _ in items)
    return RequestSample(
        request_id=request_id,
        user_id=user_id,
        items=list(items),
        conversions=[list(c) for c in conversions],
        ro_dense={RO_D1: 0.5, RO_D2: 1.25},
        ro_idlist={RO_L1: [3, 1, 2], RO_L2: [8]},
        nro_dense={NRO_D1: [float(i + 1) for i in range(k)]},
        nro_idlist={NRO_L1: [[100 + i, 200 + i] for i in range(k)]},
    )


def random_sample(rng: np.random.Generator, request_id: int, k: int | None = None) -> RequestSample:
    """Random aligned sample over the small registry; floats f32-exact."""
    if k is None:
        k = int(rng.integers(1, 6))
    items = [int(x) for x in rng.choice(np.arange(1, 10_000), size=k, replace=False)]
    conversions = [
        sorted({int(x) for x in rng.integers(1, 5, size=rng.integers(0, 3))})
        for _ in range(k)
    ]
    return RequestSample(
        request_id=request_id,
        user_id=int(rng.integers(1, 100)),
        items=items,
        conversions=conversions,
        ro_dense={RO_D1: f32(rng.random()), RO_D2: f32(rng.random())},
        ro_idlist={
            RO_L1: [int(x) for x in rng.integers(1, 1000, size=rng.integers(0, 8))],
            RO_L2: [int(x) for x in rng.integers(1, 1000, size=rng.integers(1, 4))],
        },
        nro_dense={NRO_D1: [f32(rng.random()) for _ in range(k)]},
        nro_idlist={
            NRO_L1: [[int(x) for x in rng.integers(1, 1000, size=2)] for _ in range(k)]
        },
    )
