class GraspFlowError(Exception):
    pass


class GraspFlowWarning(Warning):
    pass


class ContractError(GraspFlowError):
    pass


class NumericError(GraspFlowError):

    def __init__(self, msg, term=None):
        super(NumericError, self).__init__(msg)
        self.term = term


class TapeError(GraspFlowError):
    pass


class FlowError(GraspFlowError):
    pass


class ShapeError(GraspFlowError):
    pass


class DataError(GraspFlowError):
    pass


class ConfigError(DataError):
    pass


class CheckpointVersionError(DataError):
    pass


class CheckpointCorruptError(DataError):
    pass


class EvaluatorError(GraspFlowError):
    pass


class UsageError(GraspFlowError):
    pass


class TrainingDiverged(NumericError):

    def __init__(self, msg, snapshot=None, iteration=-1, term=None):
        super(TrainingDiverged, self).__init__(msg, term=term)
        self.snapshot = snapshot
        self.iteration = iteration
