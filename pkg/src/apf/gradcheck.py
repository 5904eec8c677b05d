"""Finite-difference verification of every differentiable operation.

Each case builds a scalar loss from seeded random inputs, computes analytic
gradients by backpropagation, and compares them against central differences.
The error reported is max|a - n| / max(1, max|a|, max|n|), a scale-aware
relative error that stays meaningful when true gradients contain zeros.

The same suites back both the test suite and the ``gradcheck`` CLI command.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as tc
from .tensor import Tensor

BOUND = 1e-4
STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    worst: float

    @property
    def ok(self) -> bool:
        return self.worst < BOUND


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(1.0, float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def _fd_coords(f: Callable[[], Tensor], leaf: Tensor, coords: np.ndarray, h: float) -> np.ndarray:
    flat = leaf.data.reshape(-1)
    out = np.zeros(coords.size)
    for j, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + h
        fp = f().item()
        flat[i] = orig - h
        fm = f().item()
        flat[i] = orig
        out[j] = (fp - fm) / (2.0 * h)
    return out


def check_gradients(
    f: Callable[[], Tensor],
    leaves: Sequence[tuple[str, Tensor]],
    h: float = STEP,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    mutate: Callable[[np.ndarray], np.ndarray] | None = None,
) -> float:
    """Worst relative error between analytic and finite-difference gradients.

    ``max_coords`` caps how many coordinates per leaf get the (expensive)
    central-difference treatment; coordinates are chosen by ``rng``.
    ``mutate`` is a test hook applied to analytic gradients before comparison.
    """
    for _, leaf in leaves:
        leaf.grad = None
    loss = f()
    tc.backward(loss)
    worst = 0.0
    for _, leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        if mutate is not None:
            analytic = mutate(analytic)
        n = leaf.data.size
        if max_coords is not None and n > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = np.arange(n)
        numeric = _fd_coords(f, leaf, coords, h)
        worst = max(worst, rel_error(analytic.reshape(-1)[coords], numeric))
    return worst


def _rand(rng: np.random.Generator, *shape: int, lo: float = -2.0, hi: float = 2.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def tensor_op_cases() -> dict[str, Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[tuple[str, Tensor]]]]]:
    """One gradient-check case per differentiable tensor operation."""

    def case_add(rng):
        a, b = _rand(rng, 3, 4), _rand(rng, 3, 4)
        return lambda: tc.tensor_sum(tc.mul(tc.add(a, b), tc.add(a, b))), [("a", a), ("b", b)]

    def case_sub(rng):
        a, b = _rand(rng, 3, 4), _rand(rng, 1, 4)
        return lambda: tc.tensor_sum(tc.pow_const(tc.add(tc.sub(a, b), 5.0), 2.0)), [("a", a), ("b", b)]

    def case_mul(rng):
        a, b = _rand(rng, 2, 5), _rand(rng, 2, 5)
        return lambda: tc.tensor_sum(tc.mul(a, b)), [("a", a), ("b", b)]

    def case_div(rng):
        a, b = _rand(rng, 2, 3), _rand(rng, 2, 3, lo=0.5, hi=2.0)
        return lambda: tc.tensor_sum(tc.div(a, b)), [("a", a), ("b", b)]

    def case_neg(rng):
        a = _rand(rng, 4)
        return lambda: tc.tensor_sum(tc.mul(tc.neg(a), a)), [("a", a)]

    def case_matmul(rng):
        a, b = _rand(rng, 3, 4), _rand(rng, 4, 2)
        return lambda: tc.tensor_sum(tc.matmul(a, b)), [("a", a), ("b", b)]

    def case_bmm(rng):
        a, b = _rand(rng, 2, 3, 4), _rand(rng, 2, 4, 3)
        return lambda: tc.tensor_sum(tc.bmm(a, b)), [("a", a), ("b", b)]

    def case_sum_axis(rng):
        a = _rand(rng, 3, 4, 2)
        return lambda: tc.tensor_sum(tc.pow_const(tc.add(tc.sum_axis(a, 1), 3.0), 2.0)), [("a", a)]

    def case_mean(rng):
        a = _rand(rng, 5, 3)
        return lambda: tc.mul(tc.mean(a), tc.mean(a)), [("a", a)]

    def case_transpose(rng):
        a = _rand(rng, 2, 3, 4)
        return lambda: tc.tensor_sum(tc.mul(tc.transpose(a, (2, 0, 1)), 1.5)), [("a", a)]

    def case_reshape(rng):
        a = _rand(rng, 3, 4)
        return lambda: tc.tensor_sum(tc.pow_const(tc.add(tc.reshape(a, (2, 6)), 4.0), 2.0)), [("a", a)]

    def case_concat(rng):
        a, b = _rand(rng, 2, 3), _rand(rng, 2, 2)
        return lambda: tc.tensor_sum(tc.pow_const(tc.add(tc.concat([a, b], axis=1), 3.0), 2.0)), [("a", a), ("b", b)]

    def case_take(rng):
        a = _rand(rng, 5, 3)
        idx = np.array([0, 2, 2, 4])
        return lambda: tc.tensor_sum(tc.pow_const(tc.add(tc.take(a, idx), 3.0), 2.0)), [("a", a)]

    def case_relu(rng):
        a = _rand(rng, 4, 4)
        # keep entries away from the kink
        a.data[np.abs(a.data) < 0.05] += 0.1
        return lambda: tc.tensor_sum(tc.relu(a)), [("a", a)]

    def case_gelu(rng):
        a = _rand(rng, 4, 4)
        return lambda: tc.tensor_sum(tc.gelu(a)), [("a", a)]

    def case_sigmoid(rng):
        a = _rand(rng, 4, 4)
        return lambda: tc.tensor_sum(tc.mul(tc.sigmoid(a), a)), [("a", a)]

    def case_softplus(rng):
        a = _rand(rng, 4, 4)
        return lambda: tc.tensor_sum(tc.softplus(a)), [("a", a)]

    def case_absolute(rng):
        a = _rand(rng, 4, 4)
        a.data[np.abs(a.data) < 0.05] += 0.1
        return lambda: tc.tensor_sum(tc.absolute(a)), [("a", a)]

    def case_pow_const(rng):
        a = _rand(rng, 3, 3, lo=0.2, hi=2.0)
        return lambda: tc.tensor_sum(tc.pow_const(a, 1.7)), [("a", a)]

    def case_clamp(rng):
        a = _rand(rng, 4, 4)
        a.data[np.abs(a.data - 1.0) < 0.05] += 0.1
        a.data[np.abs(a.data + 1.0) < 0.05] += 0.1
        return lambda: tc.tensor_sum(tc.pow_const(tc.add(tc.clamp(a, -1.0, 1.0), 2.0), 2.0)), [("a", a)]

    def case_minimum(rng):
        a, b = _rand(rng, 3, 4), _rand(rng, 3, 4)
        near = np.abs(a.data - b.data) < 0.05
        b.data[near] += 0.1
        return lambda: tc.tensor_sum(tc.minimum(a, b)), [("a", a), ("b", b)]

    def case_maximum(rng):
        a, b = _rand(rng, 3, 4), _rand(rng, 3, 4)
        near = np.abs(a.data - b.data) < 0.05
        b.data[near] += 0.1
        return lambda: tc.tensor_sum(tc.maximum(a, b)), [("a", a), ("b", b)]

    def case_softmax(rng):
        a = _rand(rng, 3, 5)
        w = _rand(rng, 3, 5)
        return lambda: tc.tensor_sum(tc.mul(tc.softmax_lastdim(a), w)), [("a", a), ("w", w)]

    def case_softmax_masked(rng):
        a = _rand(rng, 3, 5)
        w = _rand(rng, 3, 5)
        mask = rng.random((3, 5)) > 0.3
        mask[:, 0] = True
        return lambda: tc.tensor_sum(tc.mul(tc.softmax_lastdim(a, mask), w)), [("a", a), ("w", w)]

    def case_layer_norm(rng):
        a = _rand(rng, 3, 6)
        gamma = _rand(rng, 6, lo=0.5, hi=1.5)
        beta = _rand(rng, 6)
        return lambda: tc.tensor_sum(tc.pow_const(tc.add(tc.layer_norm(a, gamma, beta), 3.0), 2.0)), [
            ("a", a),
            ("gamma", gamma),
            ("beta", beta),
        ]

    def case_gather_time(rng):
        a = _rand(rng, 2, 6, 3)
        idx = rng.integers(0, 6, size=(6, 4))
        return lambda: tc.tensor_sum(tc.pow_const(tc.add(tc.gather_time(a, idx), 3.0), 2.0)), [("a", a)]

    def case_window_dots(rng):
        q = _rand(rng, 2, 5, 3)
        kw = _rand(rng, 2, 5, 4, 3)
        return lambda: tc.tensor_sum(tc.pow_const(tc.add(tc.window_dots(q, kw), 9.0), 2.0)), [("q", q), ("kw", kw)]

    def case_window_mix(rng):
        w = _rand(rng, 2, 5, 4)
        vw = _rand(rng, 2, 5, 4, 3)
        return lambda: tc.tensor_sum(tc.pow_const(tc.add(tc.window_mix(w, vw), 9.0), 2.0)), [("w", w), ("vw", vw)]

    def case_cosine_weights(rng):
        q = _rand(rng, 2, 7, 4)
        # keep queries well away from the zero vector (cosine kink)
        q.data += np.where(q.data >= 0, 0.3, -0.3)
        anchors = np.stack(
            [np.arange(7) - 2, np.arange(7), np.arange(7) + 2], axis=1
        )
        valid = (anchors >= 0) & (anchors < 7)
        w = _rand(rng, 2, 7, 3)
        return lambda: tc.tensor_sum(tc.mul(tc.cosine_weights(q, anchors, valid), w)), [("q", q), ("w", w)]

    def case_shift_time(rng):
        a = _rand(rng, 2, 6, 5)
        off = np.array([(d % 3) - 1 for d in range(5)])
        return lambda: tc.tensor_sum(tc.pow_const(tc.add(tc.shift_time(a, off), 3.0), 2.0)), [("a", a)]

    def case_shift_channels(rng):
        a = _rand(rng, 2, 6, 5)
        off = np.array([t % 3 for t in range(6)])
        return lambda: tc.tensor_sum(tc.pow_const(tc.add(tc.shift_channels(a, off), 3.0), 2.0)), [("a", a)]

    def case_shift_cols(rng):
        a = _rand(rng, 4, 6)
        return lambda: tc.tensor_sum(tc.pow_const(tc.add(tc.shift_cols(a, 2), 3.0), 2.0)), [("a", a)]

    cases = {
        "add": case_add,
        "sub": case_sub,
        "mul": case_mul,
        "div": case_div,
        "neg": case_neg,
        "matmul": case_matmul,
        "bmm": case_bmm,
        "sum_axis": case_sum_axis,
        "mean": case_mean,
        "transpose": case_transpose,
        "reshape": case_reshape,
        "concat": case_concat,
        "take": case_take,
        "relu": case_relu,
        "gelu": case_gelu,
        "sigmoid": case_sigmoid,
        "softplus": case_softplus,
        "absolute": case_absolute,
        "pow_const": case_pow_const,
        "clamp": case_clamp,
        "minimum": case_minimum,
        "maximum": case_maximum,
        "softmax_lastdim": case_softmax,
        "softmax_lastdim_masked": case_softmax_masked,
        "layer_norm": case_layer_norm,
        "gather_time": case_gather_time,
        "window_dots": case_window_dots,
        "window_mix": case_window_mix,
        "cosine_weights": case_cosine_weights,
        "shift_time": case_shift_time,
        "shift_channels": case_shift_channels,
        "shift_cols": case_shift_cols,
    }
    return cases


def suite_tensor_ops(seeds: int = 20, mutate=None) -> list[CheckResult]:
    results = []
    for name, builder in tensor_op_cases().items():
        worst = 0.0
        for seed in range(seeds):
            rng = np.random.default_rng(1000 + seed)
            f, leaves = builder(rng)
            worst = max(worst, check_gradients(f, leaves, mutate=mutate))
        results.append(CheckResult(f"tensor.{name}", worst))
    return results


def attention_cases():
    """Gradient checks through the full dual-branch attention block."""
    from . import attention as att

    def build(shift_mode, fusion_mode, cosine):
        def case(rng):
            cfg = att.AttentionConfig(
                model_dim=4,
                heads=2,
                window=3,
                shift_size=3,
                shift_mode=shift_mode,
                fusion_mode=fusion_mode,
                cosine_weighting=cosine,
            )
            e_in = _rand(rng, 4, 8, lo=-1.0, hi=1.0)
            weights = {}
            for prefix in ("q", "k", "v"):
                weights[f"w{prefix}"] = _rand(rng, 4, 4, lo=-0.7, hi=0.7)
                weights[f"b{prefix}"] = _rand(rng, 4, lo=-0.3, hi=0.3)
            fusion = att.FusionWeights(alpha=_rand(rng, 1, lo=0.2, hi=0.8))
            leaves = [("e_in", e_in)] + list(weights.items()) + [("alpha", fusion.alpha)]
            if fusion_mode == att.FusionMode.TWO_ALPHAS:
                fusion.alpha2 = _rand(rng, 1, lo=0.2, hi=0.8)
                leaves.append(("alpha2", fusion.alpha2))

            def f():
                out = att.dual_branch_attention(e_in, cfg, weights, fusion)
                return tc.tensor_sum(tc.pow_const(out, 2.0))

            return f, leaves

        return case

    gs, bs = att.ShiftMode.GENERAL, att.ShiftMode.BIDIRECTIONAL
    fm = att.FusionMode
    return {
        "bs_alpha_complement": build(bs, fm.ALPHA_COMPLEMENT, True),
        "gs_two_alphas": build(gs, fm.TWO_ALPHAS, True),
        "bs_fixed_1_1_plain": build(bs, fm.FIXED11, False),
        "gs_alpha_left": build(gs, fm.ALPHA_LEFT, True),
        "bs_alpha_right": build(bs, fm.ALPHA_RIGHT, True),
    }


def suite_attention(seeds: int = 5, mutate=None) -> list[CheckResult]:
    results = []
    for name, builder in attention_cases().items():
        worst = 0.0
        for seed in range(seeds):
            rng = np.random.default_rng(2000 + seed)
            f, leaves = builder(rng)
            worst = max(worst, check_gradients(f, leaves, mutate=mutate))
        results.append(CheckResult(f"attention.{name}", worst))
    return results


def model_cases():
    """End-to-end gradient check through the composed localization model."""
    from . import model as mdl

    def case(rng):
        cfg = mdl.ModelConfig(
            feature_dim=4,
            num_classes=3,
            model_dim=8,
            heads=2,
            enc_layers=2,
            dec_layers=2,
            num_queries=3,
            mlp_ratio=2,
            window=3,
            enc_shift=3,
            dec_shift=3,
        )
        params = mdl.init_params(cfg, rng)
        feats = _rand(rng, 4, 8, lo=-1.0, hi=1.0)
        leaves = [("features", feats)] + list(params.items())

        def f():
            out = mdl.model_forward(feats, params, cfg)
            return tc.add(
                tc.tensor_sum(tc.pow_const(out.logits, 2.0)),
                tc.tensor_sum(tc.pow_const(out.segments, 2.0)),
            )

        return f, leaves

    return {"composed_forward": case}


def matching_cases():
    """Gradient checks of the loss terms with the assignment held fixed.

    The match is recomputed outside the graph on every training step, so the
    differentiable object is the loss given an assignment; checking it with
    the match pinned avoids spurious finite-difference jumps at cost ties.
    """
    from . import matching as mt

    def case(rng):
        n_q = 4
        logits = _rand(rng, n_q, 3)
        starts = rng.uniform(0.0, 0.5, n_q)
        widths = rng.uniform(0.1, 0.4, n_q)
        segments = Tensor(np.stack([starts, starts + widths], axis=1), requires_grad=True)
        gt = np.array([[0.05, 0.95], [0.0, 0.6]])
        labels = np.array([0, 2])
        weights = mt.LossWeights()
        pred_idx, _ = mt.match(logits, segments, gt, labels, weights)

        def f():
            cls = mt.focal_loss(logits, pred_idx, labels, weights)
            l1, diou = mt.segment_losses(segments, pred_idx, gt)
            return tc.add(cls, tc.mul(tc.add(diou, l1), weights.reg_lambda / len(pred_idx)))

        return f, [("logits", logits), ("segments", segments)]

    return {"loss_fixed_match": case}


def suite_matching(seeds: int = 5, mutate=None) -> list[CheckResult]:
    results = []
    for name, builder in matching_cases().items():
        worst = 0.0
        for seed in range(seeds):
            rng = np.random.default_rng(4000 + seed)
            f, leaves = builder(rng)
            worst = max(worst, check_gradients(f, leaves, mutate=mutate))
        results.append(CheckResult(f"matching.{name}", worst))
    return results


def suite_model(seeds: int = 2, max_coords: int = 12, mutate=None) -> list[CheckResult]:
    results = []
    for name, builder in model_cases().items():
        worst = 0.0
        for seed in range(seeds):
            rng = np.random.default_rng(3000 + seed)
            f, leaves = builder(rng)
            worst = max(
                worst,
                check_gradients(f, leaves, max_coords=max_coords, rng=np.random.default_rng(7000 + seed), mutate=mutate),
            )
        results.append(CheckResult(f"model.{name}", worst))
    return results
