# sdmcalibrate errors


class SdmError(Exception):
    """Base error of the package
    :param message: human readable description
    :param code: short machine readable code
    """

    code = "sdm_error"

    def __init__(self, message, code=None):
        super().__init__(message)
        self.message = message
        if code:
            self.code = code

    def as_dict(self):
        return {"error": self.code, "message": self.message}


class DatasetError(SdmError):
    """Malformed or inconsistent dataset
    :param line: 1-based line number of the offending record, if any
    """

    code = "dataset_error"

    def __init__(self, message, line=None, code=None):
        if line is not None:
            message = "line %s: %s" % (line, message)
        super().__init__(message, code)
        self.line = line

    def as_dict(self):
        data = super().as_dict()
        if self.line is not None:
            data["line"] = self.line
        return data


class ShapeError(SdmError):
    code = "shape_error"


class ArchiveError(SdmError):
    code = "archive_error"


class TrainingError(SdmError):
    code = "training_error"
