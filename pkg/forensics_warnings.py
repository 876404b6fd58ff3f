"""Warning categories for the forensics toolchain.

Placed at repository root for stable imports (works from tests/ and scripts).
"""


class ForensicsWarning(UserWarning):
    """Contract-level warning (promoted to error in the test suite)."""
    pass


class ForensicsInfoWarning(UserWarning):
    """Informational warning (should not fail tests)."""
    pass


class NumericalFloorWarning(ForensicsInfoWarning):
    """A std or denominator floor was applied to keep arithmetic finite."""
    pass


class LowConfidenceWarning(ForensicsInfoWarning):
    """A decomposed trigger reached less than 0.5 validation ASR."""
    pass
