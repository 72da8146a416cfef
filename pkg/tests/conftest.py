from dataclasses import dataclass

import numpy as np
import pytest

from spheremoe import tensor as tn
from spheremoe.config import load_run_config
from spheremoe.tensor import Rng, Tensor


def gradcheck(fn, inputs, h=1e-5, tol=1e-6):
    """Backprop ``fn(*inputs)`` and compare every input gradient with central differences."""
    for x in inputs:
        x.grad = None
    tn.backward(fn(*inputs))
    analytic = [x.grad.copy() for x in inputs]
    worst = 0.0
    for x, g in zip(inputs, analytic):
        with tn.no_grad():
            fd = tn.finite_diff_grad(lambda _: fn(*inputs), x, h).data
        worst = max(worst, tn.rel_error(g, fd))
    assert worst < tol, f"relative error {worst:.3e}"
    return worst


def op_cases(rng):
    """name -> (input arrays, scalar function) for every differentiable op."""
    A = rng.normal(size=(3, 4))
    B = rng.normal(size=(3, 4))
    row = rng.normal(size=(4,))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    away = A + np.sign(A) * 0.2  # keeps relu off its kink
    w = rng.normal(size=(3, 4))
    wt = Tensor(w)

    def proj(y):
        return tn.sum(tn.mul(y, wt)) if y.shape == w.shape else tn.sum(tn.mul(y, Tensor(np.cos(np.arange(y.data.size)).reshape(y.shape))))

    ids = np.array([2, 0, 2, 1])
    M = rng.normal(size=(4, 5))
    batched = rng.normal(size=(2, 3, 4))
    targets = np.array([1, 3, 0])
    return {
        "matmul": ([A, M], lambda a, m: proj(tn.matmul(a, m))),
        "matmul_batched": ([batched, M], lambda a, m: proj(tn.matmul(a, m))),
        "cross_entropy": ([A], lambda a: tn.cross_entropy(a, targets, np.array([True, False, True]))),
        "add_broadcast": ([A, row], lambda a, b: proj(tn.add(a, b))),
        "sub": ([A, B], lambda a, b: proj(tn.sub(a, b))),
        "mul_broadcast": ([A, row], lambda a, b: proj(tn.mul(a, b))),
        "div": ([A, pos], lambda a, b: proj(tn.div(a, b))),
        "scale": ([A], lambda a: proj(tn.scale(a, -2.5))),
        "exp": ([A], lambda a: proj(tn.exp(a))),
        "log": ([pos], lambda a: proj(tn.log(a))),
        "square": ([A], lambda a: proj(tn.square(a))),
        "sqrt": ([pos], lambda a: proj(tn.sqrt(a))),
        "relu": ([away], lambda a: proj(tn.relu(a))),
        "gelu": ([A], lambda a: proj(tn.gelu(a))),
        "sigmoid": ([A], lambda a: proj(tn.sigmoid(a))),
        "tanh": ([A], lambda a: proj(tn.tanh(a))),
        "transpose": ([A], lambda a: proj(tn.transpose(a))),
        "reshape": ([A], lambda a: proj(tn.reshape(a, (2, 6)))),
        "concat": ([A, B], lambda a, b: proj(tn.concat([a, b], axis=0))),
        "index_select": ([A], lambda a: proj(tn.index_select(a, ids[:3], axis=0))),
        "embedding": ([A], lambda a: proj(tn.embedding(a, ids.reshape(2, 2)))),
        "pick": ([A], lambda a: proj(tn.pick(a, np.array([3, 0, 1])))),
        "sum_axis": ([A], lambda a: proj(tn.sum(a, axis=0))),
        "mean_keepdims": ([A], lambda a: proj(tn.mean(a, axis=1, keepdims=True))),
        "softmax": ([A], lambda a: proj(tn.softmax(a, dim=-1))),
        "log_softmax": ([A], lambda a: proj(tn.log_softmax(a, dim=0))),
        "l2_normalize": ([A], lambda a: proj(tn.l2_normalize(a, dim=-1))),
        "layer_norm": ([A, row + 1.5, row], lambda a, g, b: proj(tn.layer_norm(a, g, b))),
        "dropout": ([A], lambda a: proj(tn.dropout(a, 0.3, Rng(7)))),
    }


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_OVERRIDES = [
    "model.vocab_size=40", "model.hidden=16", "model.layers=2", "model.heads=2", "model.d_ff=32",
    "model.max_seq_len=12", "model.num_expert_sublayers=2", "router.num_experts=4",
    "data.vocab_size=40", "data.num_clusters=4", "data.tokens_per_cluster=6", "data.sequences=96",
    "data.seq_len=12", "train.steps=30", "train.batch_size=8", "train.warmup_steps=3",
    "train.checkpoint_every=10", "train.lr_max=1e-3", "analysis.rf_eval_tokens=96",
]


@pytest.fixture
def tiny_run():
    """A run config small enough for a training step in a few milliseconds."""
    return load_run_config(preset="desk", overrides=TINY_OVERRIDES)


@dataclass
class ModelGradcheck:
    errors: dict  # name -> relative error, tensors with a nonzero analytic gradient
    zeros: dict  # name -> (finite-difference norm, roundoff bound), structurally zero gradients

    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    def zeros_ok(self) -> bool:
        return all(fd <= bound for fd, bound in self.zeros.values())


def model_gradcheck(variant, gating, per_tensor=None, h=1e-5, seed=0, alpha=0.5):
    """Backprop vs central differences for the full model loss (task + alpha * balance)
    at V=50, d=16, L=2, N=4.

    ``per_tensor=None`` differences every coordinate; otherwise a seeded sample
    of that many coordinates per tensor. Tensors whose analytic gradient is
    zero (attention key biases: softmax cancels a per-query constant) have no
    meaningful relative error; for those the finite-difference norm must stay
    below the roundoff level ``sqrt(n) * 100 * eps * |loss| / h``.
    """
    from spheremoe.model import Model, ModelConfig, encode, mlm_logits
    from spheremoe.objective import balance_loss, total_loss
    from spheremoe.routing import RouterConfig

    cfg = ModelConfig(
        vocab_size=50, hidden=16, layers=2, heads=2, d_ff=32, max_seq_len=8, num_expert_sublayers=1,
        expert_d_ff=16, router=RouterConfig(variant=variant, gating=gating, num_experts=4),
    )
    model = Model(cfg, seed=seed)
    r = np.random.default_rng(seed)
    ids = r.integers(2, 50, size=(2, 6))
    ids[1, -1] = 0  # one pad position exercises the attention mask
    targets = r.integers(2, 50, size=12)
    mask = r.random(12) < 0.5
    mask[0] = True

    def loss():
        enc = encode(ids, model)
        task = tn.cross_entropy(mlm_logits(enc.hidden, model), targets, mask)
        bal = balance_loss(enc.outcome.scores, enc.outcome.selected, cfg.router.balance_tau)
        return total_loss(task, bal, alpha), enc.outcome.selected

    model.zero_grad()
    value, selected = loss()
    tn.backward(value)
    roundoff = 100 * np.finfo(float).eps * abs(value.item()) / h
    report = ModelGradcheck({}, {})
    for name, p in model.named_parameters().items():
        idx = np.arange(p.data.size)
        if per_tensor is not None and idx.size > per_tensor:
            idx = np.sort(r.choice(idx.size, per_tensor, replace=False))

        def f(_):
            v, sel = loss()
            if not np.array_equal(sel, selected):
                raise AssertionError(f"finite step on {name} changed a routing decision")
            return v

        with tn.no_grad():
            fd = tn.finite_diff_entries(f, p, idx, h)
        analytic = p.grad.reshape(-1)[idx]
        if np.linalg.norm(p.grad) <= 1e-14:
            report.zeros[name] = (float(np.linalg.norm(fd)), float(np.sqrt(idx.size) * roundoff))
        else:
            report.errors[name] = tn.rel_error(analytic, fd)
    return report


# acceptance lines collected by test_acceptance.py and echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
