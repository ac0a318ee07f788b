"""Central finite-difference checks for every differentiable op and the full model.

All checks run in float64.  Non-scalar outputs are reduced with a fixed
random projection so a single backward pass covers every output element.
"""

from dataclasses import dataclass

import numpy as np

from . import attention as att
from . import autodiff as ad
from . import losses, ops
from .autodiff import Tape, Tensor, no_grad, parameter, shadow64
from .model import ModelConfig, build, forward
from .rng import Rng

TOLERANCE = 1e-3
STEP = 1e-3


@dataclass
class CheckResult:
    name: str
    max_error: float
    n_coords: int

    @property
    def passed(self):
        return self.max_error < TOLERANCE


def _project(out, weights):
    if out.shape == (1, 1, 1, 1):
        return out
    return ad.sum(ad.mul(out, weights))


def check(name, fn, arrays, rng, n_coords=20, h=STEP, skip=None, coords=None):
    """Compare backward() against central differences for ``fn(*tensors)``.

    ``n_coords`` coordinates are drawn per input; ``skip(i, flat_index, value)``
    may veto coordinates that sit too close to a kink.  ``coords`` overrides
    the sampling with explicit ``(input, flat_index)`` pairs.
    """
    with shadow64():
        tensors = [parameter(np.asarray(a, dtype=np.float64)) for a in arrays]
        with no_grad():
            probe = fn(*tensors)
        weights = Tensor(rng.split("projection").normal(size=probe.shape))
        with Tape() as tape:
            root = _project(fn(*tensors), weights)
        grads = tape.backward(root)

        def value(i, flat, delta):
            data = tensors[i].data.copy()
            data.reshape(-1)[flat] += delta
            trial = list(tensors)
            trial[i] = Tensor(data)
            with no_grad():
                return _project(fn(*trial), weights).item()

        if coords is None:
            coords = []
            pick = rng.split("coords")
            for i, t in enumerate(tensors):
                chosen = 0
                for flat in pick.split(i).permutation(t.size):
                    if chosen == n_coords:
                        break
                    if skip is not None and skip(i, int(flat), t.data.reshape(-1)[flat]):
                        continue
                    coords.append((i, int(flat)))
                    chosen += 1
        worst = 0.0
        for i, flat in coords:
            fd = (value(i, flat, h) - value(i, flat, -h)) / (2 * h)
            an = grads[tensors[i]].reshape(-1)[flat]
            worst = max(worst, abs(an - fd) / max(1.0, abs(fd)))
    return CheckResult(name, worst, len(coords))


def _separated(rng, shape, spacing=0.05):
    """Random values whose pairwise gaps are at least ``spacing`` (no max-pool ties)."""
    n = int(np.prod(shape))
    vals = (np.arange(n) - n / 2) * spacing
    return vals[rng.permutation(n)].reshape(shape)


def op_cases(seed=0):
    """``(name, fn, arrays, skip)`` for every registered differentiable op."""
    r = Rng(seed).split("cases")

    def u(key, shape, lo=-2.0, hi=2.0):
        return r.split(key).uniform(lo, hi, size=shape)

    shape = (2, 3, 4, 4)
    near = lambda pt: (lambda i, f, v: abs(v - pt) < 4 * STEP)  # noqa: E731
    near_either = lambda i, f, v: abs(v + 1) < 4 * STEP or abs(v - 1) < 4 * STEP  # noqa: E731
    gn = lambda x, g, b: ops.group_norm(x, ops.GroupNormParams(g, b, groups=8))  # noqa: E731
    db_cfg = ops.DropBlockConfig(0.3, 3)
    gate = lambda w: att.SpatialAttentionParams.from_weight(w)  # noqa: E731
    y_bin = (r.split("labels").random((1, 1, 6, 6)) < 0.3).astype(float)
    y_bin.reshape(-1)[:2] = (1, 0)
    y_sparse = np.zeros((1, 1, 6, 6))
    y_sparse[0, 0, 2, 3] = 1.0

    return [
        ("add", ad.add, [u("a", shape), u("b", shape)], None),
        ("sub", ad.sub, [u("a", shape), u("b", shape)], None),
        ("mul", ad.mul, [u("a", shape), u("b", shape)], None),
        ("scalar_mul", lambda a: ad.scalar_mul(a, -1.7), [u("a", shape)], None),
        ("add_scalar", lambda a: 2.5 - a + 0.5, [u("a", shape)], None),
        ("div", ad.div, [u("a", shape), u("b", shape, 0.5, 2.0)], None),
        ("clamp", lambda a: ad.clamp(a, -1.0, 1.0), [u("a", shape)], near_either),
        ("log", ad.log, [u("a", shape, 0.2, 2.0)], None),
        ("sqrt", ad.sqrt, [u("a", shape, 0.2, 2.0)], None),
        ("sum", lambda a: ad.reduce("sum", a, (1, 3)), [u("a", shape)], None),
        ("mean", lambda a: ad.reduce("mean", a, (0, 2)), [u("a", shape)], None),
        ("conv2d_3x3", lambda x, w, b: ops.conv2d(x, ops.ConvParams(w, b)),
         [u("x", (2, 3, 6, 5)), u("w", (4, 3, 3, 3)), u("b", (1, 4, 1, 1))], None),
        ("conv2d_7x7", lambda x, w: ops.conv2d(x, ops.ConvParams(w)),
         [u("x", (1, 2, 8, 8)), u("w", (1, 2, 7, 7))], None),
        ("conv2d_1x1", lambda x, w, b: ops.conv2d(x, ops.ConvParams(w, b)),
         [u("x", (2, 4, 3, 3)), u("w", (2, 4, 1, 1)), u("b", (1, 2, 1, 1))], None),
        ("conv2d_transpose", lambda x, w, b: ops.conv2d_transpose(x, ops.ConvParams(w, b, stride=2)),
         [u("x", (1, 3, 3, 4)), u("w", (2, 3, 3, 3)), u("b", (1, 2, 1, 1))], None),
        ("maxpool2", ops.maxpool2, [_separated(r.split("mp"), (2, 2, 4, 4))], None),
        ("group_norm", gn, [u("x", (2, 16, 3, 3)), u("g", (1, 16, 1, 1)), u("b", (1, 16, 1, 1))], None),
        ("sigmoid", ops.sigmoid, [u("a", shape, -4, 4)], None),
        ("silu", ops.silu, [u("a", shape, -4, 4)], None),
        ("relu", ops.relu, [u("a", shape)], near(0.0)),
        ("concat_channels", ops.concat_channels, [u("a", (1, 2, 3, 3)), u("b", (1, 3, 3, 3))], None),
        ("channel_mean", ops.channel_mean, [u("a", shape)], None),
        ("channel_max", ops.channel_max, [_separated(r.split("cm"), shape)], None),
        ("expand_channels", lambda m: ops.expand_channels(m, 5), [u("a", (2, 1, 4, 3))], None),
        ("zero_insert", ops.zero_insert, [u("a", (1, 2, 4, 3))], None),
        ("dropblock", lambda x: ops.dropblock(x, db_cfg, "train", Rng(seed).split("db")),
         [u("x", (2, 3, 8, 8))], None),
        ("sa_bottleneck", lambda f, w: att.sa_bottleneck(f, gate(w)),
         [_separated(r.split("saf"), (1, 4, 6, 6)), u("w", (1, 2, 7, 7), -0.3, 0.3)], None),
        ("csa", lambda fe, fd, w: att.csa(fe, fd, gate(w)),
         [u("fe", (1, 4, 6, 6)), u("fd", (1, 3, 6, 6)), u("w", (1, 2, 7, 7), -0.3, 0.3)], None),
        ("bce", lambda p: losses.bce(p, Tensor(y_bin)), [u("p", (1, 1, 6, 6), 0.05, 0.95)], None),
        ("mcc_loss", lambda p: losses.mcc_loss(p, Tensor(y_bin)), [u("p", (1, 1, 6, 6), 0.05, 0.95)], None),
        ("mcc_loss_near_degenerate", lambda p: losses.mcc_loss(p, Tensor(y_sparse)),
         [u("p", (1, 1, 6, 6), 1e-3, 2e-2)], None),
        ("total_loss", lambda p: losses.total_loss(p, Tensor(y_bin)), [u("p", (1, 1, 6, 6), 0.05, 0.95)], None),
    ]


def run_op_checks(seed=0, n_coords=20):
    rng = Rng(seed).split("gradcheck")
    return [check(name, fn, arrays, rng.split(name), n_coords=n_coords, skip=skip)
            for name, fn, arrays, skip in op_cases(seed)]


def model_check(skip_attention, seed=0, n_coords=20, size=16):
    """End-to-end check of ``total_loss(forward(x))`` w.r.t. model parameters.

    Samples ``n_coords`` coordinates across the flattened parameter vector
    plus one coordinate inside every parameter tensor.
    """
    cfg = ModelConfig(skip_attention=skip_attention)
    base = Rng(seed).split("model-check").split(skip_attention)
    params = build(cfg, base.split("init"))
    names = list(params)
    x = base.split("x").random((1, 3, size, size))
    y = (base.split("y").random((1, 1, size, size)) < 0.2).astype(np.float64)

    def fn(*tensors):
        store = params.astype(np.float64)
        for name, t in zip(names, tensors):
            store._tensors[name] = t
        p = forward(store, Tensor(x), mode="train", rng=base.split("dropblock"))
        return losses.total_loss(p, Tensor(y))

    sizes = [params[n].size for n in names]
    offsets = np.cumsum([0] + sizes)
    pick = base.split("coords")
    coords = []
    for flat in pick.choice(int(offsets[-1]), size=n_coords, replace=False):
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        coords.append((i, int(flat - offsets[i])))
    for i, n in enumerate(sizes):
        coords.append((i, int(pick.split(i).choice(n, size=1)[0])))
    return check(f"model[{skip_attention}]", fn, [params[n].data for n in names],
                 base.split("check"), coords=coords)


def run_suite(seed=0, include_model=True):
    results = run_op_checks(seed)
    if include_model:
        results += [model_check(mode, seed) for mode in ("none", "sa", "csa")]
    return results
