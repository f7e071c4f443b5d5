import os

# Must happen before numpy loads its BLAS: small GEMMs dominate this
# workload and a threaded pool on few cores slows them down.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import numpy as np
import pytest

from c2sdg.dataio import (BenchmarkSpec, DomainSpec, default_benchmark_spec,
                          save_samples, synth_benchmark)


@pytest.fixture(scope="session")
def tiny_dataset_root(tmp_path_factory):
    """A small 2-domain dataset on disk (32x32, 8 train / 4 test each)."""
    root = tmp_path_factory.mktemp("tiny_ds")
    spec = BenchmarkSpec(size=32, train_per_domain=8, test_per_domain=4, domains=[
        DomainSpec("src", gamma=1.0, noise_sigma=0.02, blur_sigma=0.3,
                   texture_freq=3.0, texture_amp=0.05),
        DomainSpec("tgt", gamma=1.9, color_cast=(0.8, 1.0, 1.2), noise_sigma=0.08,
                   blur_sigma=0.8, texture_freq=8.0, texture_amp=0.1),
    ])
    bench = synth_benchmark(spec, seed=11)
    for splits in bench.values():
        save_samples(root / "train", splits["train"])
        save_samples(root / "test", splits["test"])
    return root


@pytest.fixture(scope="session")
def desk_benchmark_root(tmp_path_factory):
    """The full 4-domain 64x64 benchmark used by the acceptance experiments."""
    root = tmp_path_factory.mktemp("desk_bench")
    bench = synth_benchmark(default_benchmark_spec(), seed=7)
    for splits in bench.values():
        save_samples(root / "train", splits["train"])
        save_samples(root / "test", splits["test"])
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
