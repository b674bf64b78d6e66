import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from latent_steer.featurebank import BankMeta, FeatureBank, HeadId, SegmentRecord  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

FIXTURES = Path(__file__).parent / "fixtures"


def make_bank(features: dict, labels, context=None, d_model=3, videos=None,
              n_layers=2, n_heads=2, seg_len=4, class_names=None) -> FeatureBank:
    """Small hand-made bank. ``features`` maps (layer, head) -> rows."""
    labels = list(labels)
    n = len(labels)
    d_head = np.asarray(next(iter(features.values()))).shape[1] if features else 1
    meta = BankMeta(d_model=d_model, d_head=d_head, n_layers=n_layers,
                    n_heads_per_layer=n_heads, segment_len_frames=seg_len, frames_sampled=2)
    videos = videos or ["v0"] * n
    counters: dict[str, int] = {}
    records = []
    for i, (vid, y) in enumerate(zip(videos, labels)):
        t = counters.get(vid, 0)
        counters[vid] = t + 1
        cls = class_names[i] if class_names else None
        records.append(SegmentRecord(vid, t, t * seg_len, (t + 1) * seg_len, y, cls))
    if context is None:
        context = np.zeros((n, d_model))
    return FeatureBank(meta, tuple(records), np.asarray(context, float),
                       {HeadId(*h): np.asarray(v, float) for h, v in features.items()})


@pytest.fixture
def tiny_meta():
    return BankMeta(d_model=8, d_head=4, n_layers=3, n_heads_per_layer=3,
                    segment_len_frames=6, frames_sampled=2)
