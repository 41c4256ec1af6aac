import copy
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from stereo_selftrain.config import load_config
from stereo_selftrain.experiment import run_grid, synthetic_splits
from stereo_selftrain.training import pretrain

torch.set_num_threads(1)


def bilinear_oracle(img, out_h, out_w):
    """Corner-aligned bilinear resampling written as explicit loops."""
    img = np.asarray(img, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    in_h, in_w, c = img.shape
    out = np.zeros((out_h, out_w, c))
    for i in range(out_h):
        sy = i * (in_h - 1) / (out_h - 1) if out_h > 1 else 0.0
        y0 = min(int(np.floor(sy)), in_h - 1)
        y1 = min(y0 + 1, in_h - 1)
        fy = sy - y0
        for j in range(out_w):
            sx = j * (in_w - 1) / (out_w - 1) if out_w > 1 else 0.0
            x0 = min(int(np.floor(sx)), in_w - 1)
            x1 = min(x0 + 1, in_w - 1)
            fx = sx - x0
            for ch in range(c):
                top = img[y0, x0, ch] * (1 - fx) + img[y0, x1, ch] * fx
                bot = img[y1, x0, ch] * (1 - fx) + img[y1, x1, ch] * fx
                out[i, j, ch] = top * (1 - fy) + bot * fy
    return out[..., 0] if squeeze else out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ROOT = Path(__file__).resolve().parents[1]
DESK_CONFIG = ROOT / "configs" / "desk.yaml"


@pytest.fixture(scope="session")
def desk_grid(request):
    """The desk-scale ablation grid of configs/desk.yaml, run once per session.

    Keeps the pretrained model and the data splits of every seed for the
    analyses that need them.
    """
    config, _ = load_config(DESK_CONFIG)
    d = config.data
    pretrained, splits_cache, pretrain_seconds = {}, {}, {}
    capture = request.config.pluginmanager.getplugin("capturemanager")

    def say(message):
        with capture.global_and_fixture_disabled():
            print(f"\n[desk grid] {message}", end="", flush=True)

    def splits_for_seed(seed):
        if seed not in splits_cache:
            splits_cache[seed] = synthetic_splits(d.source.build(), d.target.build(), seed,
                                                  d.n_labeled, d.n_unlabeled, d.n_eval)
        return splits_cache[seed]

    def pretrained_for_seed(seed, splits):
        t = time.perf_counter()
        cfg = copy.copy(config.train)
        cfg.seed = seed
        pretrained[seed] = pretrain(splits.labeled, config.model, cfg)
        pretrain_seconds[seed] = time.perf_counter() - t
        return pretrained[seed]

    started = time.perf_counter()
    result = run_grid(splits_for_seed, config.model, config.train, config.ablate.cells, config.ablate.seeds,
                      log=say, pretrained_for_seed=pretrained_for_seed)
    say(f"finished in {(time.perf_counter() - started) / 60:.1f} min\n")
    return {"config": config, "result": result, "pretrained": pretrained, "splits": splits_cache,
            "pretrain_seconds": pretrain_seconds, "total_seconds": time.perf_counter() - started}
