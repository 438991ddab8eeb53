"""Time the numba kernels against their numpy twins, then a full training step on each path.

    python benchmarks/bench_kernels.py [--repeat 20] [--skip-step]
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from ddmikit import _kernels as K

STEP_SNIPPET = """
import time, numpy as np
from ddmikit import _kernels
from ddmikit.autodiff import AdamW
from ddmikit.vae import D2CVAE, ImagePyramid, d2cvae_loss, multiscale_batch
rng = np.random.default_rng(0)
pyr = ImagePyramid(rng.uniform(-1, 1, (8, 3, 128, 128)).astype(np.float32), 64)
m = D2CVAE(seed=0)
opt = AdamW(list(m.named_parameters()))
def step():
    b = multiscale_batch(None, 64, rng, rho=64, pyramid=pyr, indices=rng.choice(8, 4, replace=False))
    opt.zero_grad()
    loss = d2cvae_loss(m, b, 1e-4, rng=rng)[0]
    loss.backward()
    opt.step()
step()
t = time.perf_counter()
for _ in range({n}):
    step()
print(_kernels.backend_name(), (time.perf_counter() - t) / {n})
"""


def bench(fn, repeat):
    fn()  # warm-up (jit compile)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_cases(rng):
    x = rng.standard_normal((4, 32, 66, 66)).astype(np.float32)
    cols = K.im2col_numpy(x, 3, 3, 1, 64, 64)
    nodes = rng.standard_normal((4 * 64 * 64, 64)).astype(np.float32)
    idx = rng.integers(0, nodes.shape[0], (16384, 4))
    w = rng.random((16384, 4)).astype(np.float32)
    g = rng.standard_normal((16384, 64)).astype(np.float32)
    shape = x.shape
    act = rng.standard_normal((16384, 64)).astype(np.float32)
    _, sig = K.silu_forward(act)
    return {
        "col2im 4x32x66x66 k3": (
            lambda: K._col2im_nb(cols, np.zeros(shape, np.float32), 3, 3, 1, 64, 64),
            lambda: K.col2im_numpy(cols, shape, 3, 3, 1, 64, 64),
        ),
        "gather4 16384x64": (lambda: K._gather4_nb(nodes, idx, w), lambda: K.gather4_numpy(nodes, idx, w)),
        "scatter4 16384x64": (
            lambda: K._scatter4_nb(g, idx, w, np.zeros_like(nodes)),
            lambda: K.scatter4_numpy(g, idx, w, nodes.shape[0]),
        ),
        "silu grad 16384x64": (
            lambda: K._silu_backward_nb(act, act, sig),
            lambda: K.silu_backward_numpy(act, act, sig),
        ),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=20)
    ap.add_argument("--skip-step", action="store_true")
    args = ap.parse_args()
    if not K.HAS_NUMBA:
        sys.exit("numba is not importable; nothing to compare")

    print(f"{'kernel':<24}{'numba ms':>10}{'numpy ms':>10}{'speed-up':>10}")
    for name, (nb, npy) in kernel_cases(np.random.default_rng(0)).items():
        np.testing.assert_allclose(nb(), npy(), rtol=1e-4, atol=1e-4)
        t_nb, t_np = bench(nb, args.repeat), bench(npy, args.repeat)
        print(f"{name:<24}{t_nb * 1e3:>10.2f}{t_np * 1e3:>10.2f}{t_np / t_nb:>9.1f}x")

    if args.skip_step:
        return
    print("\nfull stage-1 training step (batch 4, 64x64):")
    code = STEP_SNIPPET.format(n=args.steps)
    for flag in ("0", "1"):
        env = dict(os.environ, DDMIKIT_PURE_NUMPY=flag)
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        backend, sec = out.stdout.split()
        print(f"  {backend:<8}{float(sec) * 1e3:8.1f} ms/step")


if __name__ == "__main__":
    main()
