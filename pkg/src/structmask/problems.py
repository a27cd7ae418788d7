"""Experiment families: which masks are learned, how they form an operator,
which solver reconstructs, and where the signals come from."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from . import diffgraph as dg
from .config import ExperimentConfig
from .data import SyntheticSpec, gen_sparse, load_idx_images
from .errors import ConfigError
from .gumbel import Partition
from .operators import DenseOperator, MaskedCirculantOperator, SuperPixelOperator
from .solvers import SolverConfig, run_solver
from .transforms import Transform


class Problem:
    """Everything about an experiment that does not change during training."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.kind = cfg.experiment
        self.solver = SolverConfig(kind=cfg.solver, iterations=cfg.iterations, sparsity=cfg.s,
                                   step=cfg.step, threshold=cfg.lista_threshold,
                                   nnlad_sigma=cfg.nnlad_sigma, nnlad_tau=cfg.nnlad_tau)
        self.transform = Transform(cfg.transform, cfg.height, cfg.width) if cfg.image_mode else None
        m, n, d = cfg.m, cfg.n, cfg.d
        if self.kind == "expander":
            self.partitions = {"phi": Partition.columns(m, n, d)}
        elif self.kind == "single_pixel_circulant":
            self.partitions = {"generator": Partition.whole((n,), d), "rows": Partition.whole((n,), m)}
        elif self.kind == "single_pixel_superpixel":
            self.partitions = {"centers": Partition.rows(m, n, d)}
        else:
            self.partitions = {"phi": Partition.rows(m, n, d)}

    @property
    def names(self) -> list[str]:
        return list(self.partitions)

    def build_operator(self, masks: dict, scale: float):
        cfg = self.cfg
        if self.kind == "single_pixel_circulant":
            return MaskedCirculantOperator(masks["generator"], masks["rows"], scale, full_rows=True)
        if self.kind == "single_pixel_superpixel":
            return SuperPixelOperator(masks["centers"], cfg.superpixel, cfg.height, cfg.width, scale)
        return DenseOperator(masks["phi"], scale)

    def measured_rows(self, op) -> np.ndarray | None:
        """Boolean row selector when the operator carries unmeasured zero rows."""
        if isinstance(op, MaskedCirculantOperator) and op.full_rows:
            return op.rows.value > 0.5
        return None

    def solve(self, op, y, params=None, iterations: int | None = None):
        return run_solver(self.solver, op, y, self.transform, params, iterations)

    # mask files -------------------------------------------------------------

    def pack_masks(self, masks: dict) -> np.ndarray:
        arrays = [np.asarray(dg._raw(masks[k])) for k in self.names]
        if len(arrays) == 1:
            return arrays[0].astype(np.uint8)
        return np.stack(arrays).astype(np.uint8)

    def unpack_masks(self, packed: np.ndarray) -> dict:
        packed = np.asarray(packed, dtype=np.float64)
        masks = {self.names[0]: packed} if len(self.names) == 1 else dict(zip(self.names, packed))
        for k, p in self.partitions.items():
            if masks[k].shape != p.shape or not p.check(masks[k]):
                raise ConfigError(f"mask {k!r} does not satisfy the {self.kind} structure")
        return masks


class SyntheticSource:
    def __init__(self, spec: SyntheticSpec, per_epoch: int):
        self.spec, self.per_epoch = spec, per_epoch

    def epoch(self, batch_size: int, rng: np.random.Generator):
        left = self.per_epoch
        while left > 0:
            b = min(batch_size, left)
            left -= b
            yield gen_sparse(self.spec, b, rng)

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        return gen_sparse(self.spec, count, rng)


class ImageSource:
    def __init__(self, images: np.ndarray):
        self.images = images

    @property
    def per_epoch(self) -> int:
        return self.images.shape[0]

    def epoch(self, batch_size: int, rng: np.random.Generator):
        order = rng.permutation(self.images.shape[0])
        for i in range(0, order.size, batch_size):
            yield self.images[order[i:i + batch_size]]

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        return self.images[rng.choice(self.images.shape[0], size=min(count, self.images.shape[0]), replace=False)]


def make_data(cfg: ExperimentConfig, test_rng: np.random.Generator):
    """Return ``(train_source, test_set)``; test rows are signals."""
    if cfg.image_mode:
        images = load_idx_images(Path(cfg.images))
        if images.shape[1] != cfg.n:
            raise ConfigError(f"images: files hold {images.shape[1]} pixels per image, config says n={cfg.n}")
        if cfg.test_size >= images.shape[0]:
            raise ConfigError(f"test_size: only {images.shape[0]} images available")
        test = images[-cfg.test_size:]
        pool = images[:-cfg.test_size]
        train = pool[:cfg.train_count] if cfg.train_count else pool
        return ImageSource(train), test
    spec = SyntheticSpec(cfg.n, cfg.s, cfg.sparsity_mode, cfg.amplitude)
    return SyntheticSource(spec, cfg.samples_per_epoch), gen_sparse(spec, cfg.test_size, test_rng)
