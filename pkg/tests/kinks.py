"""Distance of a forward pass from the nearest (leaky-)ReLU kink.

Central differences are only meaningful where the function is smooth over
the probe step, so end-to-end checks pick instances with a clear margin.
"""

import contextlib

import torch.nn.functional as F

import blindinpaint.networks as networks
import blindinpaint.pcn as pcn


@contextlib.contextmanager
def _recording(sink):
    orig_lrelu, orig_relu = F.leaky_relu, F.relu

    def lrelu(z, *a, **k):
        sink.append(float(z.detach().abs().min()))
        return orig_lrelu(z, *a, **k)

    def relu(z, *a, **k):
        sink.append(float(z.detach().abs().min()))
        return orig_relu(z, *a, **k)

    mods = (networks.F, pcn.F)
    for m in mods:
        m.leaky_relu, m.relu = lrelu, relu
    try:
        yield
    finally:
        for m in mods:
            m.leaky_relu, m.relu = orig_lrelu, orig_relu


def kink_margin(fn, *args) -> float:
    seen: list[float] = []
    with _recording(seen):
        fn(*args)
    return min(seen) if seen else float("inf")
