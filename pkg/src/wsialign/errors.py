"""Exception hierarchy shared by every pipeline stage.

Each error carries an ``exit_code`` so the CLI can map failures onto its
documented process exit statuses without a lookup table.
"""


class WsiAlignError(Exception):
    exit_code = 3


class ConfigError(WsiAlignError):
    exit_code = 2


class DataError(WsiAlignError):
    exit_code = 3


class NumericError(WsiAlignError):
    exit_code = 4


# report_corpus
class NoPartIndicators(DataError):
    pass


class MalformedPart(DataError):
    pass


class EmptySlideList(DataError):
    pass


class OrphanSlide(DataError):
    pass


class EmptyStudy(DataError):
    pass


# slide_synth
class InvalidSpec(ConfigError):
    pass


# tiler
class ImageTooSmall(DataError):
    pass


# patch_embedder
class BadPatchShape(DataError):
    pass


class CorruptStore(DataError):
    pass


class VersionMismatch(DataError):
    pass


# qformer
class SeqTooLong(DataError):
    pass


class EmptyPatchSequence(DataError):
    pass


class AllNegativesMasked(NumericError):
    pass


class NonFiniteLoss(NumericError):
    def __init__(self, step, message="non-finite loss"):
        super().__init__(f"{message} at step {step}")
        self.step = step


# langgraft
class FrozenViolation(NumericError):
    pass


class UnparseableScore(DataError):
    pass


# retrieval_eval
class DuplicateId(DataError):
    pass


class DimMismatch(DataError):
    pass


class MissingGroundTruth(DataError):
    pass


class NoEvaluableQueries(DataError):
    pass


# task_eval
class EmptyClassSpec(DataError):
    pass


class SingleClassLabels(DataError):
    pass
