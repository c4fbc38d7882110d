"""Central finite-difference checks of every primitive and of whole blocks.

Runs in float64.  For each checked tensor a random sample of coordinates is
perturbed by +/-eps and the symmetric difference quotient is compared to the
tape gradient with ``|a - n| / max(|a|, |n|, 1e-8)``.

With ``freeze_gates`` (the default) the perturbed forwards replay the ReLU
masks and max-pool argmaxes of the unperturbed forward.  Inside a full block
thousands of batch-normalised pre-activations sit within eps of zero, so
plain differences straddle kinks at almost every coordinate.
"""

import contextlib
from dataclasses import dataclass

import numpy as np

from . import ops
from .block import FusionMode, GroupPlan, ResFRIBlock, ResFRIBlockConfig
from .layers import BatchNorm2d
from .tensor import Tensor, backward, no_grad

REL_FLOOR = 1e-8


@dataclass
class CheckResult:
    op: str
    max_rel_err: float
    worst: str
    coords: int


def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_FLOOR)


def check(name, loss_fn, tensors, rng, eps=1e-4, coords=20, freeze_gates=True):
    """Compare tape gradients of ``loss_fn()`` against central differences.

    ``tensors`` maps a label to a leaf Tensor read by ``loss_fn``.  Returns a
    CheckResult holding the worst relative error over all sampled coordinates.
    """
    for t in tensors.values():
        t.grad = None
    gates = []
    with ops.gate_recording(gates) if freeze_gates else contextlib.nullcontext():
        loss = loss_fn()
    backward(loss)
    replay = (lambda: ops.gate_replay(gates)) if freeze_gates else contextlib.nullcontext
    worst, where, total = 0.0, "", 0
    for label, t in tensors.items():
        flat = t.data.reshape(-1)
        grad = t.grad.reshape(-1)
        n = flat.size
        picks = np.arange(n) if n <= coords else np.sort(rng.choice(n, coords, replace=False))
        for idx in picks:
            orig = flat[idx]
            with no_grad(), replay():
                flat[idx] = orig + eps
                up = float(loss_fn().data)
            with no_grad(), replay():
                flat[idx] = orig - eps
                down = float(loss_fn().data)
            flat[idx] = orig
            err = relative_error(float(grad[idx]), (up - down) / (2 * eps))
            total += 1
            if err > worst or not where:
                worst, where = err, f"{label}[{int(idx)}]"
    return CheckResult(name, worst, where, total)


def _rand(rng, *shape, grad=True):
    return Tensor(rng.uniform(-1.0, 1.0, shape), requires_grad=grad)


def _projected(out_fn, rng):
    """Loss sum(out * R) for a fixed random R, so every output coordinate matters."""
    proj = {}

    def loss():
        out = out_fn()
        if "R" not in proj:
            proj["R"] = rng.standard_normal(out.shape)
        return ops.sum_all(ops.mul(out, Tensor(proj["R"])))

    return loss


def primitive_checks(rng, eps=1e-4, coords=20):
    results = []

    def run(name, out_fn, tensors):
        results.append(check(name, _projected(out_fn, rng), tensors, rng, eps, coords))

    for k in (1, 3, 5):
        for p in (0, 1, 2):
            for s in (1, 2):
                x, w, b = _rand(rng, 2, 3, 7, 7), _rand(rng, 4, 3, k, k), _rand(rng, 4)
                run(f"conv2d[k={k},p={p},s={s}]",
                    lambda x=x, w=w, b=b, p=p, s=s: ops.conv2d(x, w, b, s, p),
                    {"x": x, "weight": w, "bias": b})

    x = _rand(rng, 2, 3, 6, 6)
    run("avgpool2d[k=3,s=1,p=1]", lambda: ops.avgpool2d(x, 3, 1, 1), {"x": x})
    run("avgpool2d[k=2,s=2,p=0]", lambda: ops.avgpool2d(x, 2, 2, 0), {"x": x})
    run("maxpool2d[k=3,s=1,p=1]", lambda: ops.maxpool2d(x, 3, 1, 1), {"x": x})
    run("maxpool2d[k=2,s=2,p=0]", lambda: ops.maxpool2d(x, 2, 2, 0), {"x": x})

    bn = BatchNorm2d(3, dtype=np.float64)
    bn.gamma.data[:] = rng.uniform(0.5, 1.5, 3)
    bn.beta.data[:] = rng.uniform(-0.5, 0.5, 3)
    tensors = {"x": x, "gamma": bn.gamma, "beta": bn.beta}
    run("batchnorm2d[train]", lambda: bn(x), tensors)
    bn.eval()
    bn.running_var[:] = rng.uniform(0.5, 2.0, 3)
    run("batchnorm2d[eval]", lambda: bn(x), tensors)

    run("relu", lambda: ops.relu(x), {"x": x})
    y = _rand(rng, 2, 3, 6, 6)
    run("add", lambda: ops.add(x, y), {"a": x, "b": y})
    z = _rand(rng, 2, 5, 6, 6)
    run("concat_channels", lambda: ops.concat_channels([x, z]), {"a": x, "b": z})
    run("slice_channels", lambda: ops.slice_channels(z, 1, 4), {"x": z})
    run("global_avgpool", lambda: ops.global_avgpool(x), {"x": x})

    v, wl, bl = _rand(rng, 4, 6), _rand(rng, 5, 6), _rand(rng, 5)
    run("linear", lambda: ops.linear(v, wl, bl), {"x": v, "weight": wl, "bias": bl})

    logits = _rand(rng, 4, 10)
    labels = rng.integers(0, 10, 4)
    results.append(check("softmax_cross_entropy",
                         lambda: ops.softmax_cross_entropy(logits, labels),
                         {"logits": logits}, rng, eps, coords))
    target = rng.uniform(-1, 1, x.shape)
    results.append(check("mean_square", lambda: ops.mean_square(x, target), {"x": x},
                         rng, eps, coords))
    return results


BLOCK_VARIANTS = [
    (FusionMode.ADDITION, False),
    (FusionMode.CONCATENATION, False),
    (FusionMode.ADDITION, True),
    (FusionMode.CONCATENATION, True),
]


def block_check(fusion, split, rng, shape=(2, 64, 16, 16), eps=1e-4, coords=20, **toggles):
    cfg = ResFRIBlockConfig(shape[1], GroupPlan.inception(shape[1]), fusion, split=split,
                            **toggles)
    block = ResFRIBlock(cfg, rng=rng, dtype=np.float64)
    for _, p in block.named_parameters():
        # move BN affine terms off their init values so their grads are generic
        if p.ndim == 1:
            p.data += rng.uniform(-0.2, 0.2, p.shape)
    x = _rand(rng, *shape)
    target = rng.uniform(-1, 1, (shape[0], cfg.out_channels) + tuple(shape[2:]))
    tensors = {"x": x}
    tensors.update(dict(block.named_parameters()))
    name = ("split-" if split else "") + f"resfri-{FusionMode(fusion).value}"
    return check(name, lambda: ops.mean_square(block(x), target), tensors, rng, eps, coords)


def run_suite(seed=0, eps=1e-4, coords=20, blocks=True):
    rng = np.random.default_rng(seed)
    results = primitive_checks(rng, eps, coords)
    if blocks:
        for fusion, split in BLOCK_VARIANTS:
            results.append(block_check(fusion, split, rng, eps=eps, coords=coords))
    return results
