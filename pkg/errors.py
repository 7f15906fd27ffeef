"""Exception hierarchy; the CLI maps the two families to exit codes 1 and 2."""


class VulnRnnError(Exception):
    exit_code = 2


class UserError(VulnRnnError):
    exit_code = 1


class DataError(VulnRnnError):
    exit_code = 2


class ConfigError(UserError):
    pass


class MissingArtifactError(UserError):
    def __init__(self, stage, path):
        super().__init__(f"Missing artifact {path} - run the '{stage}' stage first")
        self.stage = stage
        self.path = path


class IrParseError(DataError):
    def __init__(self, message, line=None):
        where = "end-of-file" if line is None else f"line {line}"
        super().__init__(f"{message} (at {where})")
        self.line = line


class EmptyCorpusError(DataError):
    pass


class SplitError(DataError):
    pass


class ArtifactVersionError(DataError):
    pass


class ConfigHashMismatchError(DataError):
    pass


class TrainingError(DataError):
    pass
