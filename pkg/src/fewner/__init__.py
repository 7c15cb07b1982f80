"""Few-shot named entity recognition with a two-stage model and an
adversarial synonym-substitution harness.

Stage one detects span boundaries with a bank of boundary components and
an angular-margin objective; stage two types the detected spans with
prototype classification regularised by a contrastive facilitation term
and an information-bottleneck filter.  Everything runs in float64 on CPU
so gradient checks and rerun determinism hold exactly.
"""

DTYPE_NAME = "float64"

from . import corpus, attack, encoder, span_detect, entity_typing, meta  # noqa: E402,F401
