import os
import sys
from pathlib import Path

# single-threaded BLAS: reproducible reductions and, at these matrix sizes,
# faster than the threaded path (must be set before numpy loads)
for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

# make the shared test helpers importable from every test module
sys.path.insert(0, str(Path(__file__).parent))

import pytest


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """3 subjects x 4 clips, 3 classes, with a filled flow cache."""
    from featref.dataset import SynthSpec, generate_synthetic
    from featref.trainer import FlowCache

    root = tmp_path_factory.mktemp("small_corpus")
    spec = SynthSpec(n_subjects=3, clips_per_subject=4, n_classes=3,
                     frame_size=48, frames_per_clip=8, noise_sigma=0.01, seed=21)
    samples = generate_synthetic(spec, root / "data")
    cache = FlowCache(root / "flows")
    cache.ensure(samples)
    return {"root": root, "samples": samples, "cache": cache, "spec": spec}
