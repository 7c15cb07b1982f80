"""Independent oracles shared across test modules.

Each oracle deliberately takes a different route than the code under
test: the decode oracle is regex-based where the library hand-scans,
and the KL oracle integrates numerically where the library uses the
closed form.
"""

from __future__ import annotations

import math
import re

from scipy.integrate import quad

from fewner.corpus import Boundary

_RUN_OK = re.compile(r"(?:S|BI*E)+")
_UNIT = re.compile(r"S|BI*E")


def decode_bioes_oracle(labels) -> list[tuple[int, int]]:
    """Reference decoder: regex over the label-letter string.

    Each maximal non-O run that tiles exactly into S / B I* E units
    yields those units as spans; any other run becomes one whole-run
    span.
    """
    text = "".join(Boundary(l).name for l in labels)
    spans: list[tuple[int, int]] = []
    for run in re.finditer(r"[^O]+", text):
        if _RUN_OK.fullmatch(run.group()):
            for unit in _UNIT.finditer(run.group()):
                spans.append((run.start() + unit.start(), run.start() + unit.end() - 1))
        else:
            spans.append((run.start(), run.end() - 1))
    return spans


def kl_diag_gauss_quadrature(mean_a, var_a, mean_b, var_b) -> float:
    """KL(N(mean_a, var_a) || N(mean_b, var_b)) for diagonal Gaussians by
    per-dimension numerical quadrature of p log(p/q)."""

    def one_dim(ma: float, va: float, mb: float, vb: float) -> float:
        sa = math.sqrt(va)

        def integrand(x: float) -> float:
            log_p = -0.5 * math.log(2 * math.pi * va) - (x - ma) ** 2 / (2 * va)
            log_q = -0.5 * math.log(2 * math.pi * vb) - (x - mb) ** 2 / (2 * vb)
            return math.exp(log_p) * (log_p - log_q)

        value, _ = quad(integrand, ma - 12 * sa, ma + 12 * sa, limit=200)
        return value

    return sum(one_dim(float(ma), float(va), float(mb), float(vb))
               for ma, va, mb, vb in zip(mean_a, var_a, mean_b, var_b))
