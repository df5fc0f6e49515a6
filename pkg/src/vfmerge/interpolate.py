"""Parameter-space merging baselines: linear interpolation and uniform
averaging, plus the learning-forgetting tradeoff sweep.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint
from .errors import MergeError
from .metrics import write_csv


@dataclass
class InterpolationSpec:
    """(1 - alpha) * a + alpha * b over identically-shaped checkpoints."""

    alpha: float
    checkpoint_a: Checkpoint
    checkpoint_b: Checkpoint


def _check_manifests(a: Checkpoint, b: Checkpoint) -> None:
    names_a, names_b = set(a.tensors), set(b.tensors)
    if names_a != names_b:
        raise MergeError(
            f"manifest mismatch: only in a {sorted(names_a - names_b)}, "
            f"only in b {sorted(names_b - names_a)}"
        )
    bad = [
        name
        for name in sorted(names_a)
        if a.tensors[name].shape != b.tensors[name].shape
        or a.tensors[name].dtype != b.tensors[name].dtype
    ]
    if bad:
        raise MergeError(f"shape/dtype mismatch for tensors: {bad}")


def interpolate_checkpoints(spec: InterpolationSpec) -> Checkpoint:
    """Elementwise linear interpolation; endpoints are bit-exact copies.

    Integer-typed tensors (e.g. step counters) are copied from a, never
    interpolated.
    """
    a, b, alpha = spec.checkpoint_a, spec.checkpoint_b, spec.alpha
    _check_manifests(a, b)
    tensors = {}
    for name, ta in a.tensors.items():
        tb = b.tensors[name]
        if alpha == 0.0:
            tensors[name] = ta.copy()
        elif alpha == 1.0:
            tensors[name] = tb.copy()
        elif np.issubdtype(ta.dtype, np.integer):
            tensors[name] = ta.copy()
        else:
            mixed = (1.0 - alpha) * ta.astype(np.float64) + alpha * tb.astype(np.float64)
            tensors[name] = mixed.astype(ta.dtype)
    metadata = dict(a.metadata)
    metadata.update({"stage": "interpolated", "alpha": alpha})
    return Checkpoint(tensors=tensors, metadata=metadata)


def uniform_average(checkpoints: list[Checkpoint]) -> Checkpoint:
    """N-way elementwise mean (the checkpoint-soup baseline)."""
    if not checkpoints:
        raise MergeError("need at least one checkpoint to average")
    first = checkpoints[0]
    for other in checkpoints[1:]:
        _check_manifests(first, other)
    tensors = {}
    for name, t0 in first.tensors.items():
        if np.issubdtype(t0.dtype, np.integer):
            tensors[name] = t0.copy()
            continue
        acc = np.zeros(t0.shape, dtype=np.float64)
        for ckpt in checkpoints:
            acc += ckpt.tensors[name].astype(np.float64)
        tensors[name] = (acc / len(checkpoints)).astype(t0.dtype)
    metadata = dict(first.metadata)
    metadata.update({"stage": "uniform_average", "n_models": len(checkpoints)})
    return Checkpoint(tensors=tensors, metadata=metadata)


def wiseft_sweep(
    a: Checkpoint,
    b: Checkpoint,
    alphas,
    evaluators: dict,
    csv_path=None,
    plot_path=None,
) -> list[dict]:
    """Interpolate over alphas and run every named evaluator on each mix.

    Returns one row per alpha: {"alpha", <metric columns>, "status"}. An
    evaluator failure marks that row failed and the sweep continues.
    """
    rows = []
    for alpha in alphas:
        row: dict = {"alpha": float(alpha)}
        try:
            mixed = interpolate_checkpoints(InterpolationSpec(float(alpha), a, b))
            for name, fn in evaluators.items():
                row[name] = fn(mixed)
            row["status"] = "ok"
        except Exception as exc:  # keep sweeping past a bad row
            for name in evaluators:
                row.setdefault(name, float("nan"))
            row["status"] = f"failed: {exc}"
        rows.append(row)
    if csv_path is not None:
        fields = ["alpha", *evaluators.keys(), "status"]
        write_csv(csv_path, rows, fields)
    if plot_path is not None:
        plot_tradeoff(rows, list(evaluators.keys()), plot_path)
    return rows


def plot_tradeoff(rows: list[dict], metrics: list[str], path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    alphas = [r["alpha"] for r in rows]
    for metric in metrics:
        ax.plot(alphas, [r.get(metric, float("nan")) for r in rows], marker="o", label=metric)
    ax.set_xlabel("alpha")
    ax.set_ylabel("metric")
    ax.set_title("weight interpolation tradeoff")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
