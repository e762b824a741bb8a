"""Numba versus numpy timing for the hot kernels, plus one end-to-end step.

Run ``python3 benchmarks/bench_kernels.py``. The kernel table times each
``*_np`` function against its compiled ``*_nb`` twin in this process; the
end-to-end rows run a training step and a fixed-point encode in two
subprocesses, one with ``FASTSTAMP_DISABLE_NUMBA=1``.
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from faststamp import kernels
from faststamp._jit import HAVE_NUMBA

_STEP = r"""
import json, time
import numpy as np
from faststamp.model import ModelConfig, init_params
from faststamp.quant import FixedSpec, fixed_encoder_forward, quantize_params
from faststamp.tensor import GradTape, Tensor, backward
from faststamp.train import LossWeights, total_loss
from faststamp.transforms import Transform

cfg = ModelConfig(image_size=(64, 64), message_length=16)
params = init_params(0, cfg)
rng = np.random.default_rng(0)
x = rng.random((8, 3, 64, 64)).astype(np.float32)
s = rng.integers(0, 2, (8, 16)).astype(np.float32)
ident = Transform("identity")

def step():
    with GradTape() as tape:
        loss, _ = total_loss(Tensor(x), s, params, ident, LossWeights(), rng)
    backward(tape, loss, wrt=list(params.tensors.values()))

q = quantize_params(params, FixedSpec.parse("Q6.10"))
xu = (x[:1] * 255).astype(np.uint8)
step(); fixed_encoder_forward(xu, s[:1], q)  # warm-up (compilation)
out = {}
for name, fn in (("train_step_b8", step), ("fixed_encode_1", lambda: fixed_encoder_forward(xu, s[:1], q))):
    t = time.perf_counter(); reps = 5
    for _ in range(reps):
        fn()
    out[name] = (time.perf_counter() - t) / reps
print(json.dumps(out))
"""


def _cases(n, c, h, ks, stride):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((n, c, h, h)).astype(np.float32)
    k = rng.standard_normal((c, ks, ks)).astype(np.float32)
    ho = kernels.out_size(h, stride)
    g = rng.standard_normal((n, c, ho, ho)).astype(np.float32)
    xi = rng.integers(-2**15, 2**15, (1, c, h, h))
    ki = rng.integers(-2**15, 2**15, (c, ks, ks))
    acc = rng.integers(-2**40, 2**40, (1, c, h, h))
    return {
        "dwconv_forward": ("dwconv_forward", (x, k, stride)),
        "dwconv_backward_input": ("dwconv_backward_input", (g, k, h, h, stride)),
        "dwconv_backward_kernel": ("dwconv_backward_kernel", (x, g, ks, stride)),
        "dwconv_int": (None, (xi, ki, stride)),
        "requantize": ("requantize", (acc, 10, -2**15, 2**15 - 1)),
    }


def _time(fn, args, repeat):
    fn(*args)
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def kernel_table(n=8, c=32, h=64, ks=3, stride=1, repeat=7):
    rows = []
    for name, (_, args) in _cases(n, c, h, ks, stride).items():
        np_fn = kernels.dwconv_forward_np if name == "dwconv_int" else getattr(kernels, name + "_np")
        nb_fn = getattr(kernels, name + "_nb")
        np.testing.assert_allclose(nb_fn(*args), np_fn(*args), rtol=1e-4, atol=1e-3)
        t_np, t_nb = _time(np_fn, args, repeat), _time(nb_fn, args, repeat)
        rows.append({"kernel": name, "numpy_ms": 1e3 * t_np, "numba_ms": 1e3 * t_nb, "speedup": t_np / t_nb})
    return rows


def end_to_end():
    res = {}
    for label, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, FASTSTAMP_DISABLE_NUMBA=flag)
        proc = subprocess.run([sys.executable, "-c", _STEP], env=env, capture_output=True, text=True, check=True)
        res[label] = json.loads(proc.stdout)
    return res


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--channels", type=int, default=32)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--skip-end-to-end", action="store_true")
    args = ap.parse_args(argv)
    if not HAVE_NUMBA:
        print("numba is disabled or missing; the *_nb kernels run as plain Python loops", file=sys.stderr)
    print(f"{'kernel':<24}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for r in kernel_table(args.batch, args.channels, args.size):
        print(f"{r['kernel']:<24}{r['numpy_ms']:>10.2f}{r['numba_ms']:>10.2f}{r['speedup']:>8.1f}x")
    if not args.skip_end_to_end:
        e2e = end_to_end()
        print()
        print(f"{'end to end':<24}{'numpy s':>10}{'numba s':>10}{'speedup':>9}")
        for name in e2e["numba"]:
            a, b = e2e["numpy"][name], e2e["numba"][name]
            print(f"{name:<24}{a:>10.3f}{b:>10.3f}{a / b:>8.1f}x")


if __name__ == "__main__":
    main()
