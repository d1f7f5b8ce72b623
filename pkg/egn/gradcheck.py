"""
Finite-difference verification of the adjoints computed by `backward`.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from .errors import ContractError, DeterminismError
from .tensor import Tape, Tensor, backward

__all__ = ("GroupReport", "GradcheckReport", "gradcheck")

logger = logging.getLogger(__name__)


@dataclass
class GroupReport:
    """
    :param checked: Coordinates compared against finite differences.
    :param skipped: Coordinates left out because they sit on a kink.
    """

    name: str
    checked: int
    max_abs_error: float
    max_rel_error: float
    passed: bool
    skipped: int = 0


@dataclass
class GradcheckReport:
    rtol: float
    atol: float
    step: float
    groups: List[GroupReport] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.groups)

    @property
    def checked(self) -> int:
        return sum(g.checked for g in self.groups)

    @property
    def skipped(self) -> int:
        return sum(g.skipped for g in self.groups)

    @property
    def max_rel_error(self) -> float:
        return max((g.max_rel_error for g in self.groups), default=0.0)

    def to_dict(self) -> Dict[str, object]:
        return {
            "passed": self.passed,
            "rtol": self.rtol,
            "atol": self.atol,
            "step": self.step,
            "checked": self.checked,
            "skipped": self.skipped,
            "groups": [g.__dict__ for g in self.groups],
        }


def _sample_coordinates(
    sizes: Sequence[int], max_coords: int, rng: np.random.Generator
) -> List[np.ndarray]:
    """
    Choose flat coordinates per parameter: everything when it fits in the
    budget, otherwise a proportional sample with at least one per group.
    """
    total = sum(sizes)
    if total <= max_coords:
        return [np.arange(n) for n in sizes]

    chosen = []
    for n in sizes:
        quota = max(1, int(round(max_coords * n / total)))
        chosen.append(np.sort(rng.choice(n, size=min(n, quota), replace=False)))
    return chosen


def gradcheck(
    closure: Callable[[], Tensor],
    parameters: Sequence[Tuple[str, Tensor]],
    rtol: float = 1e-4,
    atol: float = 1e-6,
    max_coords: int = 2000,
    step: float = 1e-6,
    seed: int = 0,
) -> GradcheckReport:
    """
    Compare the gradient of `closure()` with central finite differences.

    A coordinate passes when ``|analytic - numeric| <= atol + rtol * |numeric|``.
    Coordinates whose one-sided slopes disagree by more than that error sit on
    a kink (a ReLU switching inside the step); they are skipped and counted.

    :param closure: Maps the current parameter values to a scalar tensor. It
        must be deterministic; it's evaluated twice up front to check that.
    :param parameters: (name, tensor) pairs. Each one is a group in the report.
    :param max_coords: Upper bound on the number of perturbed coordinates.
    """
    if not parameters:
        raise ContractError("gradcheck() needs at least one parameter.")

    first = closure().item()
    second = closure().item()
    if first != second:
        raise DeterminismError(f"Closure is not deterministic: {first!r} != {second!r}.")

    for _, p in parameters:
        p.grad = None
    with Tape():
        loss = closure()
        backward(loss)

    rng = np.random.default_rng(seed)
    coords = _sample_coordinates([p.size for _, p in parameters], max_coords, rng)
    report = GradcheckReport(rtol=rtol, atol=atol, step=step)

    for (name, p), flat_indices in zip(parameters, coords):
        analytic = np.zeros(p.size) if p.grad is None else p.grad.ravel()
        # Perturb in place through a flat view.
        p.data = np.ascontiguousarray(p.data)
        values = p.data.reshape(-1)
        max_abs = 0.0
        max_rel = 0.0
        ok = True
        skipped = 0

        for i in flat_indices:
            original = values[i]
            values[i] = original + step
            plus = closure().item()
            values[i] = original - step
            minus = closure().item()
            values[i] = original

            numeric = (plus - minus) / (2.0 * step)
            diff = abs(analytic[i] - numeric)
            one_sided_gap = abs((plus - first) - (first - minus)) / step
            if diff > atol + rtol * abs(numeric) and one_sided_gap > diff:
                skipped += 1
                continue
            scale = max(abs(numeric), abs(analytic[i]), atol)
            max_abs = max(max_abs, diff)
            max_rel = max(max_rel, diff / scale)
            if diff > atol + rtol * abs(numeric):
                ok = False

        report.groups.append(
            GroupReport(
                name=name,
                checked=len(flat_indices) - skipped,
                max_abs_error=float(max_abs),
                max_rel_error=float(max_rel),
                passed=ok,
                skipped=skipped,
            )
        )
        logger.debug(
            "gradcheck %s: %d coords checked, %d on kinks, max rel %.3e",
            name, len(flat_indices) - skipped, skipped, max_rel,
        )

    return report
