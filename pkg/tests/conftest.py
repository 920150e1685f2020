from __future__ import annotations

import numpy as np
import pytest

from vibefm.datamodel import DomainTag, Segment, default_modalities


@pytest.fixture(scope="session")
def specs():
    return default_modalities()


def make_streams(specs, seconds: float, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    return {
        name: rng.standard_normal(
            (spec.channels, int(round(seconds * spec.sample_rate_hz)))
        ).astype(np.float32)
        for name, spec in specs.items()
    }


def make_segment(specs, seed: int = 0, label: int | None = 0) -> Segment:
    rng = np.random.default_rng(seed)
    waveforms = {
        name: rng.standard_normal((spec.channels, spec.samples_per_segment)).astype(
            np.float32
        )
        for name, spec in specs.items()
    }
    return Segment(
        waveforms=waveforms,
        label=label,
        domain_tag=DomainTag.SYNTH_A,
        run_id="r000",
        start_time_s=0.0,
    )
