import os

# Pin BLAS threading before numpy loads anywhere: the arrays are tiny and
# thread dispatch dominates otherwise (also keeps timings stable).
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

import phaselab as pl


@pytest.fixture(scope="session")
def table4():
    return pl.build_phase_table(4)


@pytest.fixture(scope="session")
def group4(table4):
    return pl.symmetry_group(table4)


def random_state(table, rng, max_count: int = 40) -> pl.TrafficState:
    """A valid random observation: counts in [0, n], bits from a random phase."""
    counts = rng.integers(0, max_count + 1, size=table.n_movements)
    phase = int(rng.integers(table.n_phases))
    bits = np.array(table.phases[phase].bits, dtype=np.int64)
    return pl.TrafficState(counts=counts, signal_bits=bits, phase_index=phase)
