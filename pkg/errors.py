"""Exception hierarchy for the pruning toolkit.

Every failure the toolkit reports derives from `DominoError`; the CLI maps
these to exit code 2.
"""
from __future__ import annotations


class DominoError(Exception):
    exit_code = 2


# graph-ir

class GraphError(DominoError):
    pass


class CycleDetected(GraphError):
    pass


class ShapeMismatch(GraphError):
    def __init__(self, message: str, layers: tuple[str, ...] = ()):
        if layers:
            message = f"{message} (layers: {', '.join(layers)})"
        super().__init__(message)
        self.layers = tuple(layers)


class DanglingTensorRef(GraphError):
    pass


class JoinArityMismatch(GraphError):
    pass


class UnsupportedLayer(GraphError):
    pass


class UnsupportedActivation(GraphError):
    pass


# dependency / pruner

class PruneError(DominoError):
    pass


class AlreadyPruned(PruneError):
    pass


class OverlapWithPruned(PruneError):
    pass


class NothingLeftToPrune(PruneError):
    pass


class UnprunableChannel(PruneError):
    pass


# saliency / domino

class SaliencyError(DominoError):
    pass


class PrunedChannel(SaliencyError):
    pass


class MissingGradients(SaliencyError):
    pass


class MissingActivations(SaliencyError):
    pass


class ZeroCount(SaliencyError):
    pass


class IncompleteClosure(SaliencyError):
    pass


# engine

class EngineError(DominoError):
    pass


class EmptyDataset(EngineError):
    pass


# model-io

class ModelIOError(DominoError):
    pass


class ParseError(ModelIOError):
    pass


class ChecksumMismatch(ModelIOError):
    pass


class BadRecordSize(ModelIOError):
    pass


class MissingFile(ModelIOError):
    pass


class DatasetError(ModelIOError):
    pass


class IoError(ModelIOError):
    pass


# report

class ReportError(DominoError):
    pass


class EmptyTrace(ReportError):
    pass


class MissingBaseline(ReportError):
    pass


class MalformedTrace(ReportError):
    pass
