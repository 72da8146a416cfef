"""Diagnostics for routing and representation geometry.

* representation collapse ``RC = Tr(Sigma_W pinv(Sigma_B))`` over labelled hidden states
* routing-fluctuation ratio between two parameter snapshots
* inter-run consistency of expert loads (mean Pearson correlation matrix)
* numerical checks of the closed-form SMoE Jacobian and of the span of its
  routing-path gradient
* CSV export of routed token representations
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tn
from .data import mask_tokens
from .model import Model, encode, mlm_logits
from .moe import (
    NonDifferentiableError,
    SMoELayer,
    init_smoe,
    jacobian_analytic,
    routing_grad_component,
    routing_grad_general,
    smoe_forward,
    top2_margin,
)
from .routing import RouterConfig
from .tensor import Rng, Tensor
from .training import Checkpoint, TrainLog

LABEL_SEMANTICS = ("assigned_expert", "latent_cluster")


# ---------------------------------------------------------------------------
# representation collapse


@dataclass
class LabeledPoints:
    points: np.ndarray  # [M, d]
    labels: np.ndarray  # [M]
    label_semantics: str = "assigned_expert"

    def __post_init__(self):
        self.points = np.asarray(self.points.data if isinstance(self.points, Tensor) else self.points, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.points.ndim != 2 or self.points.shape[0] != self.labels.shape[0]:
            raise ValueError("points must be [M, d] with one label per row")
        if self.label_semantics not in LABEL_SEMANTICS:
            raise ValueError(f"label_semantics must be one of {LABEL_SEMANTICS}")


@dataclass
class CollapseReport:
    rc: float
    rank_sigma_b: int
    per_class_counts: dict[int, int]
    degenerate: bool = False


def covariances(lp: LabeledPoints) -> tuple[np.ndarray, np.ndarray]:
    """Within-class and between-class scatter, both normalised by the point count."""
    X, y = lp.points, lp.labels
    if X.shape[0] == 0:
        raise ValueError("no points")
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("need at least two classes")
    M, d = X.shape
    mu = X.mean(axis=0)
    sw = np.zeros((d, d))
    sb = np.zeros((d, d))
    for c in classes:
        Xc = X[y == c]
        mc = Xc.mean(axis=0)
        D = Xc - mc
        sw += D.T @ D
        diff = mc - mu
        sb += Xc.shape[0] * np.outer(diff, diff)
    return sw / M, sb / M


def jacobi_eigh(S: np.ndarray, tol: float = 1e-15, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, V)`` with ``S = V diag(w) V^T``.
    """
    A = np.array(S, dtype=float)
    n = A.shape[0]
    V = np.eye(n)
    scale = max(np.abs(A).max(), np.finfo(float).tiny)
    for _ in range(max_sweeps):
        off = float(np.linalg.norm(A - np.diag(np.diag(A))))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                # rotate rows/columns p and q
                Ap, Aq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * Ap - s * Aq
                A[:, q] = s * Ap + c * Aq
                Ap, Aq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * Ap - s * Aq
                A[q, :] = s * Ap + c * Aq
                A[p, q] = A[q, p] = 0.0
                Vp, Vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * Vp - s * Vq
                V[:, q] = s * Vp + c * Vq
    return np.diag(A).copy(), V


def pseudo_inverse(S, tol: float = 1e-10, symmetry_tol: float = 1e-10) -> np.ndarray:
    """Moore-Penrose inverse of a symmetric PSD matrix.

    Eigenvalues at or below ``tol * lambda_max`` are treated as zero.
    """
    S = np.asarray(S.data if isinstance(S, Tensor) else S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError("pseudo_inverse needs a square matrix")
    if np.abs(S - S.T).max(initial=0.0) > symmetry_tol * max(1.0, np.abs(S).max(initial=0.0)):
        raise ValueError("pseudo_inverse needs a symmetric matrix")
    w, V = jacobi_eigh((S + S.T) / 2.0)
    cutoff = tol * max(w.max(initial=0.0), 0.0)
    inv = np.zeros_like(w)
    keep = w > cutoff
    inv[keep] = 1.0 / w[keep]
    return (V * inv) @ V.T


def numerical_rank(S: np.ndarray, tol: float = 1e-10) -> int:
    w, _ = jacobi_eigh(S)
    top = w.max(initial=0.0)
    return int((w > tol * top).sum()) if top > 0 else 0


def rc_metric(lp: LabeledPoints, tol: float = 1e-10) -> CollapseReport:
    """``Tr(Sigma_W pinv(Sigma_B))``; larger means less collapsed."""
    sw, sb = covariances(lp)
    labels, counts = np.unique(lp.labels, return_counts=True)
    per_class = {int(k): int(v) for k, v in zip(labels, counts)}
    if not np.any(sb):
        return CollapseReport(rc=0.0, rank_sigma_b=0, per_class_counts=per_class, degenerate=True)
    rc = float(np.trace(sw @ pseudo_inverse(sb, tol)))
    return CollapseReport(rc=max(rc, 0.0), rank_sigma_b=numerical_rank(sb, tol), per_class_counts=per_class)


def routed_states(model: Model, tokens) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Router inputs, selected experts and normalised projections, inference mode."""
    with tn.no_grad():
        enc = encode(tokens, model)
    proj = None if enc.outcome.projected is None else enc.outcome.projected.data
    return enc.pre_smoe_hidden.data, np.asarray(enc.outcome.selected), proj


def model_rc(model: Model, tokens, clusters=None, label_semantics: str = "assigned_expert") -> CollapseReport:
    hidden, selected, _ = routed_states(model, tokens)
    if label_semantics == "latent_cluster":
        if clusters is None:
            raise ValueError("latent_cluster labels need per-sequence cluster ids")
        T = np.atleast_2d(tokens).shape[1]
        labels = np.repeat(np.asarray(clusters, dtype=np.int64), T)
    else:
        labels = selected
    return rc_metric(LabeledPoints(hidden, labels, label_semantics))


# ---------------------------------------------------------------------------
# routing fluctuation


@dataclass
class FluctuationReport:
    step_pairs: list[tuple[int, int, float]] = field(default_factory=list)

    def mean(self, from_step: int = 0) -> float:
        vals = [r for a, b, r in self.step_pairs if b >= from_step]
        return float(np.mean(vals)) if vals else float("nan")


def rf_ratio(cp_a: Checkpoint, cp_b: Checkpoint, eval_tokens) -> float:
    """Fraction of evaluation tokens whose selected expert differs between snapshots."""
    if cp_a.digest != cp_b.digest:
        raise ValueError(f"config mismatch between checkpoints ({cp_a.digest} vs {cp_b.digest})")
    _, sel_a, _ = routed_states(cp_a.model(), eval_tokens)
    _, sel_b, _ = routed_states(cp_b.model(), eval_tokens)
    return float(np.mean(sel_a != sel_b))


def rf_series(checkpoints: Sequence[Checkpoint], eval_tokens) -> FluctuationReport:
    """RF ratio between each checkpoint and the one before it."""
    report = FluctuationReport()
    prev = None
    for cp in checkpoints:
        _, sel, _ = routed_states(cp.model(), eval_tokens)
        if prev is not None:
            if prev[0].digest != cp.digest:
                raise ValueError("config mismatch between checkpoints")
            report.step_pairs.append((prev[0].step, cp.step, float(np.mean(prev[1] != sel))))
        prev = (cp, sel)
    return report


# ---------------------------------------------------------------------------
# inter-run consistency


@dataclass
class ConsistencyReport:
    window: int
    loads: np.ndarray  # [m, N]
    pcc: np.ndarray  # [m, m]
    ic: float
    ic_offdiag: float


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("undefined correlation for a constant vector")
    r = float(xc @ yc) / (math.sqrt(sxx) * math.sqrt(syy))
    return min(1.0, max(-1.0, r))


def inter_run_consistency(loads, window: int = 0) -> ConsistencyReport:
    """Mean of the full ``m x m`` Pearson matrix (diagonal included) of load vectors."""
    L = np.asarray(loads, dtype=float)
    if L.ndim != 2 or L.shape[0] < 2:
        raise ValueError("need at least two load vectors")
    for i, row in enumerate(L):
        if np.all(row == row[0]):
            raise ValueError(f"undefined correlation: load vector of run {i} is constant")
    m = L.shape[0]
    pcc = np.eye(m)
    for i in range(m):
        for j in range(i + 1, m):
            pcc[i, j] = pcc[j, i] = pearson(L[i], L[j])
    off = (pcc.sum() - m) / (m * (m - 1))
    return ConsistencyReport(window=window, loads=L, pcc=pcc, ic=float(pcc.mean()), ic_offdiag=float(off))


def ic_series(logs: Sequence[TrainLog], window: int = 100) -> list[ConsistencyReport]:
    """IC per block of ``window`` steps, loads summed within each block."""
    if len(logs) < 2:
        raise ValueError("need logs from at least two runs")
    loads = [log.loads() for log in logs]
    n_steps = min(x.shape[0] for x in loads)
    reports = []
    for w in range(n_steps // window):
        block = [x[w * window : (w + 1) * window].sum(axis=0) for x in loads]
        reports.append(inter_run_consistency(block, window=w))
    return reports


# ---------------------------------------------------------------------------
# Jacobian and span verification


@dataclass
class JacobianTrial:
    trial: int
    margin: float
    max_abs_error: float
    passed: bool


@dataclass
class JacobianReport:
    trials: list[JacobianTrial]
    tolerance: float
    resampled: int = 0

    @property
    def passed(self) -> bool:
        return all(t.passed for t in self.trials)

    @property
    def max_error(self) -> float:
        return max((t.max_abs_error for t in self.trials), default=0.0)


def fd_jacobian(layer: SMoELayer, h: np.ndarray, step: float) -> np.ndarray:
    """Central-difference Jacobian of the autodiff SMoE forward at one token."""
    d = h.size
    J = np.empty((d, d))
    with tn.no_grad():
        for i in range(d):
            e = np.zeros(d)
            e[i] = step
            up, _ = smoe_forward(Tensor((h + e)[None, :]), layer)
            down, _ = smoe_forward(Tensor((h - e)[None, :]), layer)
            J[:, i] = (up.data[0] - down.data[0]) / (2.0 * step)
    return J


def random_layer(d: int, N: int, seed: int, d_ff: int | None = None, sublayers: int = 3,
                 activation: str = "gelu", config: RouterConfig | None = None) -> SMoELayer:
    """SMoE layer with random weights and biases, dot-product softmax router by default."""
    cfg = config or RouterConfig(variant="baseline", gating="softmax", num_experts=N)
    rng = Rng(seed, ("verify-layer",))
    layer = init_smoe(cfg, d, d_ff or 4 * d, sublayers, activation, rng)
    for i, expert in enumerate(layer.experts):
        for j, (_, b1, _, b2) in enumerate(expert.blocks):
            b1.data = rng.child("b1", i, j).normal(b1.shape, 0.1)
            b2.data = rng.child("b2", i, j).normal(b2.shape, 0.1)
    return layer


def verify_jacobian(d: int = 6, N: int = 3, trials: int = 20, tol: float = 1e-5, seed: int = 0,
                    margin: float = 1e-6, layer: SMoELayer | None = None) -> JacobianReport:
    """Compare ``J1 + J2`` against finite differences at random off-boundary tokens."""
    layer = layer or random_layer(d, N, seed)
    d = layer.router.E.shape[1]
    rng = Rng(seed, ("verify-points",))
    e_scale = float(np.linalg.norm(layer.router.E.data, axis=1).max())
    out: list[JacobianTrial] = []
    resampled = 0
    attempt = 0
    while len(out) < trials:
        h = rng.child(attempt).normal(d)
        attempt += 1
        try:
            J1, J2 = jacobian_analytic(h, layer, margin)
        except NonDifferentiableError:
            resampled += 1
            continue
        gap = top2_margin(h, layer)
        step = min(1e-5, 0.1 * gap / (2.0 * max(e_scale, 1e-12))) if math.isfinite(gap) else 1e-5
        err = float(np.abs(J1 + J2 - fd_jacobian(layer, h, step)).max())
        out.append(JacobianTrial(len(out), gap, err, err < tol))
    return JacobianReport(out, tol, resampled)


@dataclass
class SpanReport:
    variant: str
    max_residual: float
    rank: int
    bound: int
    tokens: int
    skipped: int
    extension: bool = False
    global_residual: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_residual < 1e-10 and self.rank <= self.bound


def _residual(v: np.ndarray, basis: np.ndarray) -> float:
    """Relative norm of ``v`` outside the column span of ``basis``."""
    U, s, _ = np.linalg.svd(basis, full_matrices=False)
    r = int((s > s.max(initial=0.0) * 1e-12).sum()) if s.size else 0
    Q = U[:, :r]
    rest = v - Q @ (Q.T @ v)
    return float(np.linalg.norm(rest) / np.linalg.norm(v))


def upstream_gradients(model: Model, tokens, seed: int = 0, mask_rate: float = 0.15):
    """Backpropagate a masked-LM loss and return router inputs and ``dL/dH'`` per token."""
    tokens = np.atleast_2d(tokens)
    batch = mask_tokens(tokens, Rng(seed, ("span-mask",)), mask_rate, vocab_size=model.config.vocab_size)
    model.zero_grad()
    enc = encode(batch.input_ids, model)
    loss = tn.cross_entropy(mlm_logits(enc.hidden, model), batch.target_ids, batch.mask_flags)
    tn.backward(loss)
    upstream = enc.smoe_output.grad
    model.zero_grad()
    return enc.pre_smoe_hidden.data, upstream


def span_residual(model: Model, tokens, seed: int = 0, margin: float = 1e-6,
                  upstream: np.ndarray | None = None, hidden: np.ndarray | None = None) -> SpanReport:
    """Worst relative residual of routing-path gradients outside the expert-embedding span.

    For the dot-product scorer the span is ``span{e_1..e_N}``. With projection
    and normalisation (reported as an extension) each token is checked against
    its own direction basis and the stack against the column space of ``W``.
    """
    if hidden is None or upstream is None:
        hidden, upstream = upstream_gradients(model, tokens, seed)
    return span_check(model.smoe, hidden, upstream, margin)


def span_check(layer: SMoELayer, hidden: np.ndarray, upstream: np.ndarray, margin: float = 1e-6) -> SpanReport:
    cfg = layer.config
    plain = cfg.gating == "softmax" and not cfg.use_projection and not cfg.use_l2
    E = layer.router.E.data
    comps = []
    worst = 0.0
    worst_global = 0.0
    skipped = 0
    for h, u in zip(hidden, upstream):
        if plain:
            try:
                c = routing_grad_component(h, layer, u, margin)
            except NonDifferentiableError:
                skipped += 1
                continue
            basis = E.T
        else:
            c, basis = routing_grad_general(h, layer, u)
        if not np.any(c):
            skipped += 1
            continue
        worst = max(worst, _residual(c, basis))
        if cfg.use_projection:
            worst_global = max(worst_global, _residual(c, layer.router.W.data))
        comps.append(c)
    rank = int(np.linalg.matrix_rank(np.array(comps))) if comps else 0
    bound = cfg.d_e if cfg.use_projection else cfg.num_experts
    return SpanReport(
        variant=cfg.variant,
        max_residual=worst,
        rank=rank,
        bound=bound,
        tokens=len(hidden),
        skipped=skipped,
        extension=not plain,
        global_residual=worst_global,
    )


# ---------------------------------------------------------------------------
# export


def export_embeddings(model: Model, tokens, path) -> int:
    """Write ``token_id, expert_id, x_0..x_{D-1}`` per token; returns the row count.

    The vector is the router input for the dot-product scorer and the
    normalised projection when the router projects or normalises.
    """
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    hidden, selected, proj = routed_states(model, tokens)
    vecs = hidden if proj is None else proj
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["token_id", "expert_id"] + [f"x{i}" for i in range(vecs.shape[1])])
        for tok, k, v in zip(tokens.reshape(-1), selected, vecs):
            w.writerow([int(tok), int(k)] + [repr(float(x)) for x in v])
    return int(vecs.shape[0])


def read_embeddings(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    arr = np.array([[float(x) for x in r] for r in rows])
    return arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), arr[:, 2:]
