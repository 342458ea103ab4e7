import numpy as np

from crowdcl.dataset import AnnotatedSample, DatasetManifest


def make_manifest(counts, size=(32, 32), ids=None, seed=0):
    rng = np.random.default_rng(seed)
    h, w = size
    samples = []
    for k, c in enumerate(counts):
        heads = np.column_stack([rng.uniform(0, w, c), rng.uniform(0, h, c)])
        sid = ids[k] if ids else f"s{k}"
        samples.append(AnnotatedSample(sid, rng.uniform(0, 1, (h, w, 3)), heads, "synthetic"))
    return DatasetManifest("handmade", "train", samples)
