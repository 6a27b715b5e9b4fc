import time

import numpy as np
import pytest

from masklift.lifting import LiftingConfig, lift_masks
from masklift.synth import make_blob_scene, render_reference_masks, scene_views

ACCEPTANCE_RESULTS: dict[int, list[tuple[bool, str]]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS.setdefault(criterion, []).append((bool(ok), detail))


def acceptance_lines() -> list[str]:
    lines = []
    for c in sorted(ACCEPTANCE_RESULTS):
        parts = ACCEPTANCE_RESULTS[c]
        ok = all(p for p, _ in parts)
        lines.append(f"criterion {c:2d}: {'PASS' if ok else 'FAIL'}  " + "; ".join(d for _, d in parts))
    return lines


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_lines():
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def blob_scene():
    return make_blob_scene(n_objects=3, dims=(64, 64, 64), n_views=24, seed=7, image_size=128)


@pytest.fixture(scope="session")
def blob_masks(blob_scene):
    return render_reference_masks(blob_scene)


@pytest.fixture(scope="session")
def timed_lift(blob_scene, blob_masks):
    """Default-config lift of the blob scene and its wall time in seconds."""
    t0 = time.perf_counter()
    field = lift_masks(blob_scene.density, scene_views(blob_scene, blob_masks), blob_scene.intrinsics,
                       LiftingConfig())
    return field, time.perf_counter() - t0


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
