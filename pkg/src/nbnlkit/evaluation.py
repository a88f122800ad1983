"""Model fitting, accuracy reports, per-class splits and the domain-adaptation runner."""
from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .core import (Dataset, FeatureBag, InvalidInputError, InvalidParameterError,
                   PrototypeTensor, StandardizationStats, cap_norm,
                   fit_standardizer, standardize, worker_count)
from .i2c import NbnnModel, build_support, nbnl_predict, nbnn_predict
from .ml3 import parse_q
from .stoml3 import init_trainer, train

log = logging.getLogger("nbnlkit.eval")

METHODS = ("nbnn", "nbnl", "stoml3")


@dataclass
class EvalReport:
    accuracy: float
    per_class: np.ndarray
    confusion: np.ndarray
    predictions: list = field(default_factory=list)

    def format(self) -> str:
        """``accuracy=<f>`` followed by a 1-based confusion table (rows: truth)."""
        c = self.confusion.shape[0]
        width = max(5, len(str(int(self.confusion.max(initial=0)))) + 1)
        lines = [f"accuracy={self.accuracy:.6f}"]
        lines.append("true\\pred" + "".join(f"{j + 1:>{width}}" for j in range(c)) + "   class_acc")
        for i in range(c):
            row = "".join(f"{int(v):>{width}}" for v in self.confusion[i])
            acc = self.per_class[i]
            lines.append(f"{i + 1:>9}" + row + ("         nan" if math.isnan(acc) else f"{acc:>12.4f}"))
        return "\n".join(lines)


def evaluate(predict: Callable[[FeatureBag], int], test: Dataset,
             threads: Optional[int] = None) -> EvalReport:
    """Apply ``predict`` to every bag; results are gathered in bag order."""
    labels = test.labels()
    threads = threads or worker_count()
    if threads > 1 and test.m > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            preds = list(pool.map(predict, test.bags))
    else:
        preds = [predict(b) for b in test.bags]
    c = test.c
    conf = np.zeros((c, c), dtype=np.int64)
    for y, p in zip(labels, preds):
        if not 0 <= p < c:
            raise InvalidInputError(f"predictor returned class {p + 1} outside 1..{c}")
        conf[y, p] += 1
    totals = conf.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(totals > 0, np.diag(conf) / np.maximum(totals, 1), np.nan)
    accuracy = float(np.trace(conf)) / max(test.m, 1)
    return EvalReport(accuracy, per_class, conf, preds)


def split_dataset(dataset: Dataset, per_class_train: int, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Sample ``per_class_train`` bags of every class for training, the rest for testing.

    Both halves keep the original bag order.
    """
    labels = dataset.labels()
    rng = np.random.default_rng(seed)
    train_idx = []
    for y in range(dataset.c):
        members = np.flatnonzero(labels == y)
        if members.size < per_class_train:
            raise InvalidInputError(
                f"class {y + 1} has {members.size} bags, fewer than the {per_class_train} requested")
        if members.size == per_class_train and per_class_train > 0:
            warnings.warn(f"all bags of class {y + 1} go to training; it is absent from the test set",
                          RuntimeWarning, stacklevel=2)
        train_idx.extend(rng.choice(members, size=per_class_train, replace=False).tolist())
    mask = np.zeros(dataset.m, dtype=bool)
    mask[train_idx] = True
    pick = lambda m: Dataset(tuple(b for b, keep in zip(dataset.bags, m) if keep), dataset.d, dataset.c)
    return pick(mask), pick(~mask)


# ---------------------------------------------------------------------------
# fitted models


@dataclass
class ML3Model:
    W: PrototypeTensor
    stats: Optional[StandardizationStats] = None

    def transform(self, X: np.ndarray) -> np.ndarray:
        return prepare(X, self.stats)

    def predictor(self, q: float = math.inf) -> Callable[[FeatureBag], int]:
        q = parse_q(q)
        return lambda bag: nbnl_predict(self.W, self.transform(bag.patches), q)


@dataclass
class NbnnClassifier:
    model: NbnnModel
    stats: Optional[StandardizationStats] = None

    def predictor(self, q: float = math.inf) -> Callable[[FeatureBag], int]:
        return lambda bag: nbnn_predict(self.model, prepare(bag.patches, self.stats))


Model = Union[ML3Model, NbnnClassifier]


def prepare(X: np.ndarray, stats: Optional[StandardizationStats]) -> np.ndarray:
    """Model input transform: optional standardization, then projection into the unit ball."""
    if stats is not None:
        X = standardize(stats, X)
    return cap_norm(X)


def fit_model(train_set: Dataset, method: str = "stoml3", *, k: int = 10, lam: float = 1.0,
              q: float = 2.0, epochs: int = 5, batch: int = 2500, seed: int = 0,
              init_scale: float = 0.01, standardize_inputs: bool = False,
              use_kdtree: bool = False) -> Model:
    """Fit NBNN supports or STOML3 prototypes on a labeled bag dataset.

    ``nbnl`` and ``stoml3`` both train prototypes with the stochastic trainer.
    """
    if method not in METHODS:
        raise InvalidParameterError(f"unknown method {method!r}; expected one of {METHODS}")
    stats = fit_standardizer(train_set) if standardize_inputs else None
    prepared = train_set.map_patches(lambda X: prepare(X, stats))
    if method == "nbnn":
        return NbnnClassifier(build_support(prepared, use_kdtree=use_kdtree), stats)
    state = init_trainer(prepared.d, k, train_set.c, lam=lam, q=q, init_scale=init_scale, seed=seed)
    report = train(prepared, epochs=epochs, batch_size=batch, shuffle_seed=seed, state=state)
    return ML3Model(report.W, stats)


def da_run(source: Dataset, target: Dataset, labeled_target_per_class: int = 0,
           method: str = "stoml3", hyperparams: Optional[dict] = None, seed: int = 0,
           predict_q: float = math.inf) -> tuple[EvalReport, Dataset, Dataset]:
    """Train on source (plus a few labeled target bags per class), test on the remaining target.

    Returns the report together with the training and test sets used.
    """
    if source.d != target.d:
        raise InvalidInputError(f"source dimension {source.d} differs from target dimension {target.d}")
    if source.c != target.c:
        raise InvalidInputError(f"source has {source.c} classes, target has {target.c}")
    if labeled_target_per_class < 0:
        raise InvalidParameterError("labeled_target_per_class must be >= 0")
    if labeled_target_per_class:
        moved, test = split_dataset(target, labeled_target_per_class, seed)
        train_set = Dataset(source.bags + moved.bags, source.d, source.c)
    else:
        train_set, test = source, target
    log.info("da: train=%d bags test=%d bags method=%s", train_set.m, test.m, method)
    model = fit_model(train_set, method, seed=seed, **(hyperparams or {}))
    return evaluate(model.predictor(predict_q), test), train_set, test
