import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from quantnas import space
from quantnas.hw_search import Specification

settings.register_profile(
    "ci",
    derandomize=True,
    max_examples=100,
    database=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("ci")


def make_network(layer_tuples, input_spec=None):
    """Build a ChildNetwork from (n, fh, fw, sh, sw, ps, ai, af, wi, wf) tuples."""
    input_spec = input_spec or space.NetworkInput()
    layers = tuple(
        space.Layer(space.LayerArch(*t[:6]), space.LayerQuant(*t[6:]))
        for t in layer_tuples
    )
    shapes = space.infer_shapes([l.arch for l in layers], input_spec)
    return space.ChildNetwork(layers=layers, input=input_spec, shapes=shapes)


def random_small_instance(rng: np.random.Generator):
    """A brute-forceable instance: L <= 3, channels <= 8, spatial <= 8."""
    num_layers = int(rng.integers(1, 4))
    tuples = []
    for _ in range(num_layers):
        tuples.append((
            int(rng.integers(1, 9)), int(rng.integers(1, 4)), int(rng.integers(1, 4)),
            int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 3)),
            int(rng.integers(0, 4)), int(rng.integers(0, 5)),
            int(rng.integers(0, 4)), int(rng.integers(0, 5)),
        ))
    input_spec = space.NetworkInput(
        channels=int(rng.integers(1, 9)), rows=int(rng.integers(1, 9)), cols=int(rng.integers(1, 9)),
        ai0=int(rng.integers(0, 4)), af0=int(rng.integers(0, 5)),
    )
    network = make_network(tuples, input_spec)
    spec = Specification(
        max_luts=int(rng.integers(1, 4000)),
        min_fps=float(rng.uniform(100.0, 4e6)),
        clock_hz=1e8,
    )
    return network, spec


def random_table1_network(rng: np.random.Generator, config: space.SpaceConfig):
    vocabs = config.vocab_sizes()
    tokens = [int(rng.integers(0, v)) for _ in range(config.num_layers) for v in vocabs]
    return space.decode_actions(tokens, config)


@pytest.fixture
def table1_space():
    return space.SpaceConfig()
