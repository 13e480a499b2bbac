"""Three-class LVO classifier and its evaluation protocol.

Masks are summarized by fractional occupancy on a coarse ``pool**3`` cell
lattice and classified by multinomial softmax regression. Evaluation
follows a k-fold cross-validation where each cycle uses three folds for
training, one for model selection by validation loss and one for testing.
Test and validation folds are never augmented.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.special import logsumexp
from scipy.stats import rankdata

from .errors import (
    DegenerateTrainSet,
    DimMismatch,
    FoldLeakage,
    InsufficientCases,
    InvalidParam,
    SingleClass,
)
from .maskgrid import VoxelMask, read_vmsk
from .manifest import LABELS, Manifest
from .parallel import pmap

CLASSES = LABELS  # index 0 none, 1 left, 2 right
REDUCTIONS = ("lvo", "left", "right")
REGIMES = ("none", "deformed", "deformed_mirrored")
# longer schedules for smaller training sets
REGIME_EPOCHS = {"none": 200, "deformed": 100, "deformed_mirrored": 50}
REGIME_ORIGINS = {
    "none": ("original",),
    "deformed": ("original", "deformed"),
    "deformed_mirrored": ("original", "deformed", "mirrored", "mirrored_deformed"),
}


# -- features ------------------------------------------------------------------


def _pool_matrix(dim: int, pool: int) -> np.ndarray:
    """Overlap of voxel ``[i, i+1)`` with cell ``[k d/P, (k+1) d/P)``, per cell length."""
    edges = np.arange(pool + 1) * (dim / pool)
    lo = np.maximum(edges[:-1, None], np.arange(dim)[None, :])
    hi = np.minimum(edges[1:, None], np.arange(dim)[None, :] + 1)
    return np.clip(hi - lo, 0.0, None) / (dim / pool)


def extract_features(mask: VoxelMask, pool: int = 8) -> np.ndarray:
    """Foreground fraction in each of ``pool**3`` equal boxes, then a bias of 1.

    Cells are flattened x-fastest, like voxels. Boxes have fractional
    borders so the lattice is exactly mirror symmetric for any dims.
    """
    if int(pool) != pool or pool < 1:
        raise InvalidParam(f"pool must be a positive integer, got {pool}")
    ax, ay, az = (_pool_matrix(d, pool) for d in mask.dims)
    vol = mask.voxels.astype(np.float64)
    t = np.tensordot(ax, vol, axes=(1, 0))        # (P, Y, Z)
    t = np.tensordot(ay, t, axes=(1, 1))          # (Py, Px, Z)
    t = np.tensordot(az, t, axes=(1, 2))          # (Pz, Py, Px)
    cells = np.clip(t.ravel(order="C"), 0.0, 1.0)  # x-fastest
    return np.append(cells, 1.0)


def mirror_feature_permutation(pool: int) -> np.ndarray:
    """Index map sending cell ``(i, j, k)`` to ``(pool-1-i, j, k)``; bias stays last."""
    idx = np.arange(pool**3).reshape(pool, pool, pool)  # [k, j, i]
    return np.append(idx[:, :, ::-1].ravel(), pool**3)


# -- softmax regression --------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    l2: float = 1e-3
    epochs: int = 100
    seed: int = 0
    optimizer: str = "adam"  # or "sgd": plain full-batch gradient descent
    init_scale: float = 0.01


@dataclass(eq=False)
class SoftmaxModel:
    weights: np.ndarray  # (3, P**3 + 1)
    pool: int = 8
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {"weights": self.weights.tolist(), "pool": self.pool, "meta": self.meta}
        return json.dumps(doc, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "SoftmaxModel":
        doc = json.loads(text)
        w = np.asarray(doc["weights"], dtype=np.float64)
        pool = int(doc["pool"])
        if w.shape != (3, pool**3 + 1):
            raise DimMismatch(f"weights shape {w.shape} does not match pool {pool}")
        return cls(w, pool, doc.get("meta", {}))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss_and_grad(weights, X, y, l2: float = 0.0):
    """Mean cross-entropy plus ``l2/2 * ||W||^2`` (bias column excluded)."""
    logits = X @ weights.T
    logp = logits - logsumexp(logits, axis=1, keepdims=True)
    n = X.shape[0]
    reg = weights.copy()
    reg[:, -1] = 0.0
    loss = -logp[np.arange(n), y].mean() + 0.5 * l2 * np.sum(reg * reg)
    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    grad = delta.T @ X / n + l2 * reg
    return loss, grad


def _check_xy(X, y, d=None):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise DimMismatch(f"features {X.shape} and labels {y.shape} disagree")
    if d is not None and X.shape[1] != d:
        raise DimMismatch(f"feature length {X.shape[1]}, expected {d}")
    return X, y


def train_softmax(X_train, y_train, X_val, y_val, config: TrainConfig, pool: Optional[int] = None) -> SoftmaxModel:
    """Full-batch training; returns the weights of the epoch with lowest validation loss."""
    X, y = _check_xy(X_train, y_train)
    Xv, yv = _check_xy(X_val, y_val, X.shape[1])
    missing = set(range(3)) - set(np.unique(y).tolist())
    if missing:
        raise DegenerateTrainSet(f"no training examples for {[CLASSES[m] for m in sorted(missing)]}")
    if config.epochs < 1:
        raise InvalidParam("epochs must be >= 1")
    rng = np.random.default_rng(config.seed)
    W = rng.normal(0.0, config.init_scale, size=(3, X.shape[1]))
    m = np.zeros_like(W)
    v = np.zeros_like(W)
    b1, b2, eps = 0.9, 0.999, 1e-8
    best = (np.inf, 0, W.copy())
    train_hist, val_hist = [], []
    for epoch in range(1, config.epochs + 1):
        _, g = loss_and_grad(W, X, y, config.l2)
        if config.optimizer == "adam":
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            step = (m / (1 - b1**epoch)) / (np.sqrt(v / (1 - b2**epoch)) + eps)
            W = W - config.learning_rate * step
        elif config.optimizer == "sgd":
            W = W - config.learning_rate * g
        else:
            raise InvalidParam(f"unknown optimizer {config.optimizer!r}")
        train_hist.append(float(loss_and_grad(W, X, y, config.l2)[0]))
        val_loss = float(loss_and_grad(W, Xv, yv, 0.0)[0])
        val_hist.append(val_loss)
        if val_loss < best[0]:
            best = (val_loss, epoch, W.copy())
    if pool is None:
        pool = round((X.shape[1] - 1) ** (1 / 3))
    meta = {
        **asdict(config),
        "best_epoch": best[1],
        "best_val_loss": best[0],
        "train_loss": train_hist,
        "val_loss": val_hist,
    }
    return SoftmaxModel(best[2], pool, meta)


def predict_proba(model: SoftmaxModel, features) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != model.weights.shape[1]:
        raise DimMismatch(f"feature length {X.shape[1]}, model expects {model.weights.shape[1]}")
    p = softmax(X @ model.weights.T)
    return p[0] if single else p


# -- ROC analysis --------------------------------------------------------------


@dataclass(frozen=True)
class RocResult:
    auc: float
    reduction: str = "lvo"
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None
    n_bootstrap: int = 0

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "n_bootstrap": self.n_bootstrap,
        }


def reduce_scores(probs, labels, reduction: str):
    """Binary scores/positives for one reduction of the 3-class problem."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray([CLASSES.index(l) if isinstance(l, str) else int(l) for l in labels])
    if reduction == "lvo":
        return probs[:, 1] + probs[:, 2], labels != 0
    if reduction == "left":
        return probs[:, 1], labels == 1
    if reduction == "right":
        return probs[:, 2], labels == 2
    raise InvalidParam(f"unknown reduction {reduction!r}")


def _split(scores, positives):
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    if s.shape != pos.shape or s.ndim != 1:
        raise DimMismatch("scores and positives must be equal-length vectors")
    if pos.all() or not pos.any():
        raise SingleClass("need at least one positive and one negative case")
    return s, pos


def roc_auc(scores, positives) -> float:
    """Mann-Whitney AUC; ties count one half."""
    s, pos = _split(scores, positives)
    ranks = rankdata(s)  # mid-ranks are half-integers: the sums stay exact
    n_pos = int(pos.sum())
    n_neg = s.size - n_pos
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def roc_curve(scores, positives):
    """ROC operating points ``(fpr, tpr, thresholds)``, thresholds descending."""
    s, pos = _split(scores, positives)
    thr = np.unique(s)[::-1]
    tpr = np.array([np.sum(pos & (s >= t)) for t in thr]) / pos.sum()
    fpr = np.array([np.sum(~pos & (s >= t)) for t in thr]) / (~pos).sum()
    return np.r_[0.0, fpr], np.r_[0.0, tpr], np.r_[np.inf, thr]


def bootstrap_ci(
    scores,
    positives,
    n: int = 2000,
    alpha: float = 0.05,
    seed: int = 0,
    reduction: str = "lvo",
) -> RocResult:
    """Percentile bootstrap over cases; single-class resamples are redrawn."""
    s, pos = _split(scores, positives)
    if n < 1:
        raise InvalidParam("n must be >= 1")
    m = s.size
    ip, ineg = np.flatnonzero(pos), np.flatnonzero(~pos)
    sp, sn = s[ip][:, None], s[ineg][None, :]
    win = (sp > sn) + 0.5 * (sp == sn)
    rng = np.random.default_rng(seed)
    aucs = []
    have = 0
    while have < n:
        draw = rng.integers(m, size=(n - have, m))
        counts = np.bincount(
            (draw + m * np.arange(draw.shape[0])[:, None]).ravel(), minlength=draw.shape[0] * m
        ).reshape(-1, m).astype(np.float64)
        cp, cn = counts[:, ip], counts[:, ineg]
        npos, nneg = cp.sum(1), cn.sum(1)
        ok = (npos > 0) & (nneg > 0)
        cp, cn = cp[ok], cn[ok]
        aucs.append(np.einsum("bi,ij,bj->b", cp, win, cn) / (npos[ok] * nneg[ok]))
        have += int(ok.sum())
    aucs = np.concatenate(aucs)[:n]
    lo, hi = np.percentile(aucs, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return RocResult(roc_auc(s, pos), reduction, float(lo), float(hi), n)


def evaluate_probs(probs, labels, n_bootstrap: int = 2000, seed: int = 0) -> Dict[str, RocResult]:
    """AUC with bootstrap CI for each reduction present in the labels."""
    out = {}
    for k, red in enumerate(REDUCTIONS):
        s, pos = reduce_scores(probs, labels, red)
        if pos.all() or not pos.any():
            out[red] = None
            continue
        if n_bootstrap > 0:
            out[red] = bootstrap_ci(s, pos, n_bootstrap, seed=seed + k, reduction=red)
        else:
            out[red] = RocResult(roc_auc(s, pos), red)
    return out


# -- cross-validation -----------------------------------------------------------


def assign_folds(case_ids: Sequence[str], labels: Sequence[str], folds: int = 5, seed: int = 0) -> Dict[str, int]:
    """Stratified fold assignment of original cases."""
    per_class: Dict[str, List[str]] = {}
    for cid, lab in sorted(zip(case_ids, labels)):
        per_class.setdefault(lab, []).append(cid)
    rng = np.random.default_rng(seed)
    plan, offset = {}, 0
    for lab in CLASSES:
        ids = per_class.get(lab, [])
        order = rng.permutation(len(ids))
        for j, i in enumerate(order):
            plan[ids[i]] = (offset + j) % folds
        offset += len(ids)
    return plan


def cycle_folds(cycle: int, folds: int):
    """``(train folds, validation fold, test fold)`` for one cycle."""
    test = cycle
    val = (cycle + 1) % folds
    return [f for f in range(folds) if f not in (test, val)], val, test


def check_no_leakage(manifest: Manifest, plan: Dict[str, int]) -> None:
    """Every variant must share its parent's fold (structurally: fold is inherited)."""
    ids = manifest.by_id()
    for r in manifest:
        if r.parent is None:
            continue
        root = r
        while root.parent is not None:
            root = ids[root.parent]
        if root.id not in plan:
            raise FoldLeakage(f"variant {r.id} has parent {root.id} outside the fold plan")


def _root_id(ids, r) -> str:
    while r.parent is not None:
        r = ids[r.parent]
    return r.id


def _assert_disjoint(roots, *masks):
    groups = [set(roots[m].tolist()) for m in masks]
    for i in range(len(groups)):
        for j in range(i + 1, len(groups)):
            shared = groups[i] & groups[j]
            if shared:
                raise FoldLeakage(f"case family {sorted(shared)[0]} leaks across splits")


def _load_features(job):
    path, pool = job
    return extract_features(read_vmsk(path), pool)


def crossval(
    manifest: Manifest,
    regime: str = "deformed_mirrored",
    folds: int = 5,
    pool: int = 8,
    seed: int = 0,
    config: Optional[TrainConfig] = None,
    epoch_scale: float = 1.0,
    n_bootstrap: int = 2000,
    workers: Optional[int] = None,
) -> dict:
    """Run all cycles and return the Table-1-shaped metrics report."""
    if regime not in REGIMES:
        raise InvalidParam(f"regime must be one of {REGIMES}, got {regime!r}")
    if folds < 3:
        raise InvalidParam("need at least 3 folds for a train/val/test split")
    originals = manifest.originals()
    counts = {lab: sum(r.label == lab for r in originals) for lab in CLASSES}
    short = {k: v for k, v in counts.items() if v < folds}
    if short:
        raise InsufficientCases(f"need >= {folds} original cases per class, have {counts}")
    plan = assign_folds([r.id for r in originals], [r.label for r in originals], folds, seed)
    check_no_leakage(manifest, plan)
    ids = manifest.by_id()

    def fold_of(r):
        while r.parent is not None:
            r = ids[r.parent]
        return plan[r.id]

    allowed = REGIME_ORIGINS[regime]
    used = [r for r in manifest if r.origin in allowed]
    feats = pmap(_load_features, [(str(manifest.resolve(r.path)), pool) for r in used], workers)
    X_all = np.asarray(feats)
    y_all = np.array([CLASSES.index(r.label) for r in used])
    fold_all = np.array([fold_of(r) for r in used])
    root_all = np.array([_root_id(ids, r) for r in used])
    is_orig = np.array([r.origin == "original" for r in used])

    base = config or TrainConfig()
    epochs = max(1, int(round(REGIME_EPOCHS[regime] * epoch_scale)))
    fold_reports, pooled_p, pooled_y, pooled_ids = [], [], [], []
    for c in range(folds):
        train_f, val_f, test_f = cycle_folds(c, folds)
        tr = np.isin(fold_all, train_f)
        va = (fold_all == val_f) & is_orig
        te = (fold_all == test_f) & is_orig
        _assert_disjoint(root_all, tr, va, te)
        cfg = TrainConfig(**{**asdict(base), "epochs": epochs, "seed": int(seed) * 1000 + c})
        model = train_softmax(X_all[tr], y_all[tr], X_all[va], y_all[va], cfg, pool)
        probs = predict_proba(model, X_all[te])
        res = evaluate_probs(probs, y_all[te], n_bootstrap, seed=int(seed) * 1000 + 10 * c)
        fold_reports.append(
            {
                "fold": c,
                "n_train": int(tr.sum()),
                "n_val": int(va.sum()),
                "n_test": int(te.sum()),
                "best_epoch": model.meta["best_epoch"],
                "auc": {k: (v.to_dict() if v else None) for k, v in res.items()},
            }
        )
        pooled_p.append(probs)
        pooled_y.append(y_all[te])
        pooled_ids.extend(r.id for r, t in zip(used, te) if t)
    P = np.concatenate(pooled_p)
    Y = np.concatenate(pooled_y)
    pooled = evaluate_probs(P, Y, n_bootstrap, seed=int(seed) * 1000 + 999)
    return {
        "regime": regime,
        "folds": fold_reports,
        "pooled": {k: (v.to_dict() if v else None) for k, v in pooled.items()},
        "epochs": epochs,
        "config": {k: v for k, v in asdict(base).items() if k not in ("seed", "epochs")},
        "seed": int(seed),
        "leakage_check": "passed",
        "fold_plan": {k: plan[k] for k in sorted(plan)},
    }
