"""Exception types shared across the toolkit.

Every error that callers are expected to catch lives here so that the CLI
can map any of them to a nonzero exit with a readable message.
"""


class ElmForestError(Exception):
    """Base class for all toolkit errors."""


# corpus ---------------------------------------------------------------

class CorpusTooSmall(ElmForestError):
    """Corpus has too few tokens for the requested holdout fraction."""


class SequenceTooLong(ElmForestError):
    """A sequence or context does not fit the configured sequence length."""


class TooFewDomains(ElmForestError):
    """Difficulty classification needs at least three domains."""


# tinylm ---------------------------------------------------------------

class TokenOutOfRange(ElmForestError):
    """A token id is outside the model vocabulary."""


class NonFiniteLoss(ElmForestError):
    """Training loss became NaN or infinite.

    ``last_checkpoint`` holds the most recent healthy checkpoint so a run
    can be resumed or inspected after divergence.
    """

    def __init__(self, message, last_checkpoint=None, step=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
        self.step = step


class StepOutOfRange(ElmForestError):
    """Learning-rate query outside [0, total_steps]."""


# budget ---------------------------------------------------------------

class ZeroFfn(ElmForestError):
    """FFN workload inputs must be positive."""


class MissingTier(ElmForestError):
    """A required difficulty tier has no assignment."""


class InconsistentScenario(ElmForestError):
    """Tier configs are incompatible with the requested scenario."""


class BudgetViolation(ElmForestError):
    """A plan's compute products deviate beyond the configured tolerance."""


# btm ------------------------------------------------------------------

class MissingSeed(ElmForestError):
    """No seed checkpoint available for the requested tier."""


class MissingTierExpert(ElmForestError):
    """Branching needs a previous-iteration expert that does not exist."""


class DuplicateTier(ElmForestError):
    """Two checkpoints claim the same tier in a merge."""


class LineageMismatch(ElmForestError):
    """A checkpoint's recorded parent is not the expected branch point."""


class IterationFailed(ElmForestError):
    """One or more expert jobs in an iteration failed.

    ``failures`` maps tier name to the underlying exception; sibling jobs
    are always run to completion before this is raised.
    """

    def __init__(self, message, failures=None):
        super().__init__(message)
        self.failures = failures or {}


# ensemble -------------------------------------------------------------

class DimensionMismatch(ElmForestError):
    """Prior vector length does not match the number of experts."""


class UnnormalizedExpert(ElmForestError):
    """An expert's log-probability row does not sum to one."""


class EmptyEval(ElmForestError):
    """Evaluation requested on an empty token sequence."""


# evalreport / cli -----------------------------------------------------

class DomainSetMismatch(ElmForestError):
    """Results being compared do not cover the same domains or setup."""


class ConfigInvalid(ElmForestError):
    """Experiment configuration failed validation."""


class MissingArtifact(ElmForestError):
    """A required file (seed, manifest, results) is not on disk."""
