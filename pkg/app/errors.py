EXIT_OK = 0
EXIT_STAGE_FAILURE = 1
EXIT_DATA_ERROR = 2
EXIT_USAGE = 64


class CranberryError(Exception):
    exit_code = EXIT_DATA_ERROR

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class ImagingError(CranberryError):
    pass


class DatasetError(CranberryError):
    pass


class CalibrationError(CranberryError):
    pass


class SegmentationError(CranberryError):
    pass


class ClusteringError(CranberryError):
    pass


class TimelineError(CranberryError):
    pass


class SynthesisError(CranberryError):
    pass


class UsageError(CranberryError):
    exit_code = EXIT_USAGE


class StageError(CranberryError):
    exit_code = EXIT_STAGE_FAILURE

    def __init__(self, stage: str, detail: str):
        super().__init__(f"stage '{stage}' failed: {detail}")
        self.stage = stage
