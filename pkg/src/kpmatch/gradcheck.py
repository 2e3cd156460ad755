"""Central-difference gradient checking against the tape."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .errors import EvaluationError, NonFiniteError, ParameterError
from .tensor import Tape, Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    n_checked: int
    worst: tuple[str, tuple[int, ...]] | None
    n_skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __str__(self):
        verdict = "PASS" if self.passed else "FAIL"
        skipped = f", {self.n_skipped} kinked coords redrawn" if self.n_skipped else ""
        return f"{verdict} max_rel_error={self.max_rel_error:.3e} (tol {self.tol:g}, {self.n_checked} coords{skipped})"


def rel_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def grad_check(
    f: Callable,
    x,
    h: float = 1e-4,
    tol: float = 1e-4,
    num_samples: int | None = None,
    rng: np.random.Generator | None = None,
    skip_kinks: bool = False,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` with central differences.

    ``x`` is an array or a mapping of name -> array; ``f`` receives the same
    structure with arrays replaced by tensors and must return a one-element
    tensor.  With ``num_samples`` only that many coordinates (drawn uniformly
    over all inputs) are checked.

    With ``skip_kinks`` a coordinate whose +-h probes see different relu
    sign patterns is not differentiable within the step; it is replaced by
    another random coordinate and counted in ``n_skipped``.
    """
    if not h > 0:
        raise ParameterError("finite-difference step must be positive")
    single = not isinstance(x, Mapping)
    arrays = {"x": np.array(x, dtype=np.float64)} if single else {
        k: np.array(v, dtype=np.float64) for k, v in x.items()
    }

    def call(tensors):
        return f(tensors["x"] if single else dict(tensors))

    tape = Tape()
    leaves = {k: tape.leaf(v.copy(), name=k) for k, v in arrays.items()}
    out = call(leaves)
    if out.size != 1:
        raise ParameterError("grad_check needs a scalar-valued function")
    grads = tape.backward(output=out)
    analytic = {k: grads[leaf] for k, leaf in leaves.items()}

    coords = [(k, idx) for k, v in arrays.items() for idx in np.ndindex(v.shape)]
    target = len(coords)
    if num_samples is not None and num_samples < len(coords):
        rng = rng if rng is not None else np.random.default_rng(0)
        target = num_samples
        if skip_kinks:
            coords = [coords[i] for i in rng.permutation(len(coords))]
        else:
            pick = rng.choice(len(coords), size=num_samples, replace=False)
            coords = [coords[i] for i in sorted(pick)]

    def value(name, idx, delta):
        probe = dict(arrays)
        arr = arrays[name].copy()
        arr[idx] += delta
        probe[name] = arr
        tape = Tape() if skip_kinks else None
        try:
            wrapped = {k: (tape.leaf(a) if tape else Tensor(a)) for k, a in probe.items()}
            v = call(wrapped).item()
        except NonFiniteError as exc:
            raise EvaluationError(f"f is not finite near {name}{idx}") from exc
        if not np.isfinite(v):
            raise EvaluationError(f"f is not finite near {name}{idx}")
        signs = [e.inputs[0].data > 0 for e in tape.entries if e.op == "relu"] if tape else []
        return v, signs

    worst, worst_at, checked, skipped = 0.0, None, 0, 0
    for name, idx in coords:
        if checked == target:
            break
        (plus, s_plus), (minus, s_minus) = value(name, idx, h), value(name, idx, -h)
        if any(not np.array_equal(p, m) for p, m in zip(s_plus, s_minus)):
            skipped += 1
            continue
        numeric = (plus - minus) / (2.0 * h)
        err = rel_error(float(analytic[name][idx]), numeric)
        checked += 1
        if err > worst or worst_at is None:
            worst, worst_at = err, (name, idx)
    return GradCheckReport(worst, tol, checked, worst_at, skipped)
