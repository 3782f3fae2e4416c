"""Reproducible toy training runs with an on-disk cache.

The acceptance checks and the examples in the README need trained models.
Training them is deterministic for fixed seeds, so the results are cached
under a key derived from every setting that influences them.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass

from . import basecodec as bc
from . import core, enhancement, synthetic

log = logging.getLogger(__name__)

TRAIN_SEED = 0
VAL_SEED = 7


@dataclass(frozen=True)
class ToySettings:
    n_train: int = 6
    n_val: int = 2
    grid: int = 64
    region: int = 32
    seed: int = 0
    epochs_first: int = 30
    epochs_next: int = 10
    lr: float = bc.BASE_LR
    rq_lr: float = 1e-3
    batch: int = 4
    rq_epochs: int = 500

    def key(self, what: str) -> str:
        fields = asdict(self)
        if what.startswith("base"):
            # predictor settings do not affect the base models
            fields = {k: v for k, v in fields.items() if not k.startswith("rq_")}
        blob = json.dumps({"what": what, **fields}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def train_clouds(self):
        return synthetic.toy_corpus(self.n_train, self.grid, TRAIN_SEED + self.seed)

    def val_clouds(self):
        return synthetic.toy_corpus(self.n_val, self.grid, VAL_SEED + self.seed)

    def train_blocks(self):
        return [b.tensor.coords for pc in self.train_clouds() for b in core.split_blocks(pc, self.region)]


def default_cache_dir() -> str:
    return os.environ.get("SRQH_CACHE", os.path.join(os.path.expanduser("~"), ".cache", "srqh"))


def _write_history(path, rows):
    if not rows:
        return
    keys = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


def base_models(settings: ToySettings, mode: str = "sequential", cache_dir: str | None = None) -> bc.BaseModels:
    """Train (or load from cache) the five base models in ``mode``."""
    cache_dir = default_cache_dir() if cache_dir is None else cache_dir
    os.makedirs(cache_dir, exist_ok=True)
    path = os.path.join(cache_dir, f"base_{mode}_{settings.key('base-' + mode)}.tnps")
    if os.path.exists(path):
        return bc.BaseModels.load(path)
    history = []
    t0 = time.process_time()
    models = bc.train_sequential(settings.train_blocks(), settings.epochs_first, settings.epochs_next,
                                 settings.seed, mode, settings.lr, settings.batch, history=history)
    models.meta["cpu_seconds"] = time.process_time() - t0
    models.save(path)
    _write_history(path[:-5] + "_log.csv", history)
    log.info("trained %s base models in %.0f s CPU", mode, models.meta["cpu_seconds"])
    return models


def rqulpe_models(settings: ToySettings, models: bc.BaseModels,
                  cache_dir: str | None = None) -> enhancement.RQuLPEModels:
    """Train (or load from cache) both predictors on latents of the sequential models."""
    cache_dir = default_cache_dir() if cache_dir is None else cache_dir
    os.makedirs(cache_dir, exist_ok=True)
    digest = hashlib.sha256(models.to_bytes()).hexdigest()[:8]
    path = os.path.join(cache_dir, f"rqulpe_{settings.key('rqulpe')}_{digest}.tnps")
    if os.path.exists(path):
        return enhancement.RQuLPEModels.load(path)
    train, val = settings.train_clouds(), settings.val_clouds()
    bank = enhancement.build_latent_bank(models, train + val, settings.region)
    tr = [k for k in bank.keys if k[0] < len(train)]
    va = [k for k in bank.keys if k[0] >= len(train)]
    history = []
    rq = enhancement.train_rqulpe(bank, tr, va, settings.seed, settings.rq_epochs, settings.rq_lr,
                                  settings.batch, history)
    rq.save(path)
    _write_history(path[:-5] + "_log.csv", history)
    return rq
