import numpy as np
import pytest

from blockpred.coredata import LinkStatus, Sample, Scenario, TimeOfDay


def make_scenario(labels, scenario_id="s", rate=10.0, power=None, m=64):
    """Scenario with synthetic image refs; images are not materialized."""
    samples = [
        Sample(
            scenario_id=scenario_id,
            seq_index=i,
            timestamp=i / rate,
            image_ref=f"frames/frame_{i:05d}.png",
            link_status=LinkStatus(int(b)),
            power_vector=tuple(power[i]) if power is not None else None,
        )
        for i, b in enumerate(labels)
    ]
    return Scenario(
        scenario_id=scenario_id,
        samples=samples,
        sample_rate_hz=rate,
        time_of_day=TimeOfDay.DAY,
        M=m,
    )


def random_labels(rng, n, p_blocked=0.3):
    return (rng.random(n) < p_blocked).astype(int).tolist()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
