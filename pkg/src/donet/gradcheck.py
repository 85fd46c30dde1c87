"""Central finite-difference gradient checker."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .tensor import backward, make_rng, no_grad


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    checked: int
    worst: tuple = None
    kinks: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    nonfinite: tuple = None

    def summary(self):
        status = "PASS" if self.passed else "FAIL"
        text = f"{status} max_rel_err={self.max_rel_err:.3e} checked={self.checked}"
        if self.kinks:
            text += f" kinks_excluded={len(self.kinks)}"
        if self.nonfinite is not None:
            text += f" nonfinite_at={self.nonfinite}"
        return text


def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def grad_check(scalar_fn, inputs, h=1e-5, tol=1e-4, samples=None, seed=0, kink_rtol=1e-3):
    """Compare autodiff gradients of ``scalar_fn()`` with central differences.

    ``inputs`` is a tensor or a list of tensors that ``scalar_fn`` closes
    over; they must be float64. ``samples`` limits the check to that many
    randomly chosen coordinates across all inputs. A coordinate whose
    check fails but whose one-sided slopes disagree by more than
    ``kink_rtol`` sits on a nondifferentiable point (relu at 0, a max-pool
    tie flipping) and is reported in ``kinks`` instead of failing the run.
    Coordinates are addressed as (input_index, flat_index).
    """
    if not isinstance(inputs, (list, tuple)):
        inputs = [inputs]
    for t in inputs:
        if t.dtype != np.float64:
            raise ContractError(f"grad_check needs float64 inputs, got {t.dtype}")
        if not t.requires_grad:
            raise ContractError("grad_check inputs must require grad")
        t.zero_grad()

    loss = scalar_fn()
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    sizes = [t.size for t in inputs]
    total = sum(sizes)
    if samples is None or samples >= total:
        flat = np.arange(total)
    else:
        flat = np.sort(make_rng(seed).choice(total, size=samples, replace=False))
    offsets = np.cumsum([0] + sizes)

    report = GradCheckReport(max_rel_err=0.0, passed=True, checked=0)
    with no_grad():
        f0 = scalar_fn().item()
        for g in flat:
            which = int(np.searchsorted(offsets, g, side="right") - 1)
            idx = int(g - offsets[which])
            view = inputs[which].data.reshape(-1)
            orig = view[idx]
            view[idx] = orig + h
            fp = scalar_fn().item()
            view[idx] = orig - h
            fm = scalar_fn().item()
            view[idx] = orig
            coord = (which, idx)
            if not (np.isfinite(fp) and np.isfinite(fm)):
                report.nonfinite = coord
                report.passed = False
                break
            numeric = (fp - fm) / (2 * h)
            ga = float(analytic[which].reshape(-1)[idx])
            err = relative_error(ga, numeric)
            report.checked += 1
            if err > tol:
                fwd, bwd = (fp - f0) / h, (f0 - fm) / h
                if abs(fwd - bwd) > kink_rtol * max(abs(fwd), abs(bwd), 1e-6):
                    report.kinks.append(coord)
                    continue
                report.failures.append((coord, ga, numeric, err))
            if err > report.max_rel_err:
                report.max_rel_err = err
                report.worst = coord
    if report.failures:
        report.passed = False
    return report
