"""Recurrence micro-benchmark: fused scan vs the unfused primitive
composition, on every available kernel backend. Relative numbers only."""

import time
from dataclasses import dataclass

import numpy as np

from . import backend
from . import recurrence as rec


@dataclass
class BenchRow:
    impl: str
    path: str
    b: int
    t: int
    n_heads: int
    k_dim: int
    v_dim: int
    tokens_per_s: float


def _median_time(fn, reps):
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return sorted(times)[len(times) // 2]


def make_inputs(b, t, n, k, v, seed=0):
    rng = np.random.default_rng(seed)
    return rec.RecurrenceInputs(
        q=rng.standard_normal((b, t, k)),
        k=rng.standard_normal((b, t, k)),
        v=rng.standard_normal((b, t, n, v)),
        f=rng.uniform(0.05, 0.95, (b, t, n)),
        h0=np.zeros((b, n, k, v)),
        w=rng.standard_normal((n, v, v)) * 0.3,
    )


def bench_recurrence(b, t, n, k, v, reps=5, seed=0, include_unfused=True):
    """Tokens/second (median of reps) for forward+backward per backend, and
    the unfused forward composition for scale."""
    inputs = make_inputs(b, t, n, k, v, seed)
    rows = []
    tokens = b * t

    impls = ["compiled", "python"] if backend.HAS_COMPILED else ["python"]
    for impl_name in impls:
        impl = backend.get_impl(impl_name)

        def fwd_bwd():
            h_full = backend.scan_forward_cached(inputs.q, inputs.k, inputs.v,
                                                 inputs.f, inputs.h0, inputs.w,
                                                 impl=impl)
            dy = np.ones((b, t, n, v))
            backend.scan_backward(inputs.q, inputs.k, inputs.v, inputs.f,
                                  inputs.h0, inputs.w, h_full, dy, 0.0, impl=impl)

        elapsed = _median_time(fwd_bwd, reps)
        rows.append(BenchRow(impl_name, "fused-fwd+bwd", b, t, n, k, v,
                             tokens / elapsed))

        def fwd_only():
            backend.scan_forward(inputs.q, inputs.k, inputs.v, inputs.f,
                                 inputs.h0, inputs.w, impl=impl)

        elapsed = _median_time(fwd_only, reps)
        rows.append(BenchRow(impl_name, "fused-fwd", b, t, n, k, v,
                             tokens / elapsed))

    if include_unfused:
        elapsed = _median_time(lambda: rec.unfused_forward(inputs), reps)
        rows.append(BenchRow(backend.BACKEND_NAME, "unfused-fwd", b, t, n, k, v,
                             tokens / elapsed))
    return rows


def rows_to_csv(rows):
    lines = ["impl,path,b,t,n_heads,k_dim,v_dim,tokens_per_s"]
    for r in rows:
        lines.append(f"{r.impl},{r.path},{r.b},{r.t},{r.n_heads},{r.k_dim},"
                     f"{r.v_dim},{r.tokens_per_s!r}")
    return "\n".join(lines) + "\n"
