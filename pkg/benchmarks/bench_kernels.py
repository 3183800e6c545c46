"""Compare compiled kernels with their numpy twins, then one training step end to end.

    python3 benchmarks/bench_kernels.py [--repeat N]

The end-to-end step runs in two subprocesses, with and without
GAGE_DISABLE_NUMBA=1, since the kernel selection happens at import time.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from gage import kernels as K
from gage.attention import prefix_table

STEP_SNIPPET = """
import time, numpy as np
from gage.backbone import build_backbone, get_profile, RegressionHead
from gage.optim import Adam
from gage.tensor import Tensor
from gage import functional as F
from gage import kernels
cfg = get_profile("desk").backbone_config()
bb, head = build_backbone(cfg, 0), RegressionHead.create(cfg.feature_dim, 0)
opt = Adam(bb.parameters() + head.parameters())
x = Tensor(np.random.default_rng(0).normal(size=(16, 1, 96, 96)).astype(np.float32))
y = Tensor(np.zeros(16, np.float32))
def step():
    loss = F.mse_loss(head(bb.forward_features(x, True)[1]), y)
    opt.zero_grad(); loss.backward(); opt.step()
step()
t = time.perf_counter()
for _ in range({n}):
    step()
print(kernels.NUMBA_ENABLED, (time.perf_counter() - t) / {n})
"""


def cases():
    rng = np.random.default_rng(0)
    n, c, h, w, k = 16, 32, 48, 48, 3
    cols = rng.normal(size=(c * k * k, n * h * w)).astype(np.float32)
    yield "col2im 16x32x48x48 k3", (K._col2im_nb, K._col2im_np), (cols, n, c, h, w, k, k, 1, 1, h, w)
    x = rng.normal(size=(16, 16, 96, 96)).astype(np.float32)
    yield "maxpool fwd 3/2/1", (K._maxpool_fwd_nb, K._maxpool_fwd_np), (x, 3, 2, 1, 48, 48)
    _, arg = K._maxpool_fwd_np(x, 3, 2, 1, 48, 48)
    g = rng.normal(size=(16, 16, 48, 48)).astype(np.float32)
    yield "maxpool bwd", (K._maxpool_bwd_nb, K._maxpool_bwd_np), (g, arg, 96, 96)
    xb = rng.normal(size=(16, 32, 48, 48)).astype(np.float32)
    yield "bn stats", (K._bn_stats_nb, K._bn_stats_np), (xb,)
    m, v = K._bn_stats_np(xb)
    inv = (1 / np.sqrt(v + 1e-5)).astype(np.float32)
    ones, zeros = np.ones(32, np.float32), np.zeros(32, np.float32)
    yield "bn apply", (K._bn_apply_nb, K._bn_apply_np), (xb, m.astype(np.float32), inv, ones, zeros)
    xhat, _ = K._bn_apply_np(xb, m.astype(np.float32), inv, ones, zeros)
    yield "bn backward", (K._bn_backward_nb, K._bn_backward_np), (xb, xhat, ones, inv, True)
    bits = rng.random((12, 12)) < 0.4
    yield "box search 12x12", (K._box_search_nb, K._box_search_np), (prefix_table(bits), int(bits.sum() * 0.95),
                                                                    0, 11, 0, 11)
    img = rng.uniform(0, 255, size=(96, 96))
    yield "bilinear crop ->96", (K._crop_bilinear_nb, K._crop_bilinear_np), (img, 10, 12, 70, 60, 96)
    yield "splitmix 9216", (K._splitmix_block_nb, K._splitmix_block_np), (np.uint64(12345), 96 * 96)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=3, help="training steps per mode (0 skips)")
    args = ap.parse_args()
    if not K.NUMBA_ENABLED:
        sys.exit("numba is disabled or missing; nothing to compare")
    print(f"{'kernel':<24}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, (nb, npf), fargs in cases():
        nb(*fargs)  # compile outside the timing
        t_nb = min(timeit.repeat(lambda: nb(*fargs), number=1, repeat=args.repeat)) * 1e3
        t_np = min(timeit.repeat(lambda: npf(*fargs), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<24}{t_nb:>10.3f}{t_np:>10.3f}{t_np / t_nb:>8.1f}x")
    if args.steps:
        print("\ndesk resnet18 training step, batch 16")
        for flag in ("0", "1"):
            env = {**os.environ, "GAGE_DISABLE_NUMBA": flag}
            out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(n=args.steps)], env=env,
                                 capture_output=True, text=True, check=True).stdout.split()
            print(f"  numba={out[0]:<6} {float(out[1]):.3f} s/step")


if __name__ == "__main__":
    main()
