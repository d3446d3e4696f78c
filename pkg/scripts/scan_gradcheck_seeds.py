"""Dev utility: find well-conditioned gradcheck instances per variant/task.

Finite differences at eps=1e-6 in float64 carry a roundoff floor, so the
frozen acceptance instances must avoid coordinates whose true gradient sits
near that floor. This scans seeds and reports the first few that measure
comfortably under the 1e-5 bound.
"""

import sys
import time

import numpy as np

sys.path.insert(0, "tests")
sys.path.insert(0, "src")

from xfusion.fusion import FusionConfig, FusionModel, TaskSpec
from xfusion.encoding import ModalityConfig
from xfusion.tensor import (
    Tensor,
    backward,
    finite_diff_gradcheck,
    log_softmax,
    mean,
    mul,
    no_grad,
    pick_class,
    sub,
)


def mask(latent, dims):
    m = [False] * latent
    for d in dims:
        m[d] = True
    return tuple(m)


def modalities():
    return [
        ModalityConfig("m0", 5, mask(4, [0, 1]), is_spatial=True),
        ModalityConfig("m1", 5, mask(4, [2, 3])),
    ]


def build_case(variant, task_kind, seed):
    cfg = FusionConfig(
        tokens_per_modality=2,
        feature_dim=4,
        heads=2,
        scale=0.5,
        iterations=2,
        ffn_hidden=6,
        variant=variant,
        post_norm=True,
        positional_encoding=True,
    )
    task = TaskSpec("hpe", joints=3) if task_kind == "hpe" else TaskSpec("har", num_classes=3)
    model = FusionModel(modalities(), cfg, task, stub_dim=3, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    raws = {m.id: rng.normal(size=(2, m.raw_dim)) for m in model.modalities}
    if task_kind == "hpe":
        with no_grad():
            base, _ = model.forward(raws, [True, True])
        target = base.values + 0.05 * rng.normal(size=base.shape)

        def f(params):
            out, _ = model.forward(raws, [True, True])
            d = sub(out, Tensor(target))
            return mean(mul(d, d))

    else:
        labels = rng.integers(0, 3, size=2)

        def f(params):
            out, _ = model.forward(raws, [True, True])
            return mul(mean(pick_class(log_softmax(out, axis=-1), labels)), -1.0)

    return model, f


def rank(variant, task_kind, seed):
    model, f = build_case(variant, task_kind, seed)
    model.params.zero_grad()
    loss = f(model.params)
    backward(loss, model.params)
    fval = abs(loss.item())
    worst = 0.0
    for _, t in model.params.items():
        a = np.abs(t.grad).reshape(-1)
        nz = a[a > 0]
        if nz.size:
            noise = 2.2e-16 * max(fval, 1e-6) / 2e-6
            worst = max(worst, (noise / max(1e-12, 2 * nz.min())))
    return worst


def main():
    for variant in ("iterative-shared-block", "stacked-fresh-kv", "stacked-shared-kv", "transformer-only"):
        for task_kind in ("hpe", "har"):
            candidates = sorted(range(80), key=lambda s: rank(variant, task_kind, s))
            found = []
            t0 = time.time()
            for seed in candidates[:25]:
                model, f = build_case(variant, task_kind, seed)
                err = finite_diff_gradcheck(f, model.params, eps=1e-6)
                if err < 5e-6:
                    found.append((seed, err))
                    if len(found) >= 2:
                        break
            print(
                f"{variant:24s} {task_kind}: {[(s, f'{e:.2e}') for s, e in found]}"
                f"  ({time.time() - t0:.0f}s)",
                flush=True,
            )


if __name__ == "__main__":
    main()
