#!/usr/bin/env python3
"""What the learned-step quantizer does to values and to gradients.

A quantizer owns one positive scalar, the step size. Forward divides by the
step, clips to the integer range the bit width affords, rounds (ties away
from zero), and multiplies back. Training recovers useful gradients from
that staircase by treating round as identity inside the clip range: values
keep their upstream gradient where they landed strictly in range and get
zero where they saturated, while the step itself collects the rounding
residual in range and the clip bound outside it.
"""

import numpy as np

from bwrf.quantizer import Quantizer, quantize_forward
from bwrf.tensor import Tensor


def show(title, xs, ys):
    print(f"  {title}")
    print("    in : " + " ".join(f"{v:+7.3f}" for v in xs))
    print("    out: " + " ".join(f"{v:+7.3f}" for v in ys))


def main():
    print("== 3-bit signed lattice, step 0.25 ==")
    q = Quantizer(bits=3, signed=True, grad_scale_enabled=False)
    q.set_scale(0.25)
    levels = np.arange(q.qmin, q.qmax + 1) * q.scale.data.item()
    print(f"  integer range [{q.qmin}, {q.qmax}] -> representable values")
    print("    " + " ".join(f"{v:+.2f}" for v in levels))

    ramp = np.linspace(-1.3, 1.2, 9, dtype=np.float32)
    out = quantize_forward(Tensor(ramp), q)
    show("a ramp snaps to the lattice and saturates past the ends", ramp, out.data)

    print("\n== ties round away from zero ==")
    ties = np.array([-0.625, -0.125, 0.125, 0.375, 0.625], dtype=np.float32)
    out = quantize_forward(Tensor(ties), q)
    show("each input sits exactly between two levels", ties, out.data)

    print("\n== gradient through the staircase ==")
    v = Tensor(np.array([-2.0, -0.4, 0.1, 0.6, 3.0], dtype=np.float32),
               requires_grad=True)
    y = quantize_forward(v, q)
    y.sum().backward()
    print("  value   in range?  dL/dv   (upstream was 1 everywhere)")
    for vi, gi in zip(v.data, v.grad):
        mark = "yes" if q.qmin < vi / 0.25 < q.qmax else "no "
        print(f"  {vi:+5.1f}      {mark}     {gi:+.1f}")

    print("\n== the step's own gradient ==")
    print("  in range the step feels the rounding residual; at the rails it")
    print("  feels the clip bound, pushing the lattice to cover what saturates")
    for val in (0.30, 0.55, -3.0, 3.0):
        qq = Quantizer(bits=3, signed=True, grad_scale_enabled=False)
        qq.set_scale(0.25)
        quantize_forward(Tensor(np.array([val], np.float32)), qq).sum().backward()
        print(f"  v={val:+5.2f}  dL/dstep = {qq.scale.grad.item():+7.4f}")

    print("\n== disabled quantizer is an exact identity ==")
    q.enabled = False
    raw = np.array([-1.234567, 0.777], dtype=np.float32)
    out = quantize_forward(Tensor(raw), q)
    print(f"  {raw} -> {out.data}  (bit-equal: {np.array_equal(raw, out.data)})")


if __name__ == "__main__":
    main()
