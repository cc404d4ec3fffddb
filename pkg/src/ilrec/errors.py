"""Exception hierarchy. ``exit_code`` is what the CLI returns for each kind."""


class ILRecError(Exception):
    exit_code = 1


class ConfigError(ILRecError):
    exit_code = 1


class UsageError(ILRecError):
    exit_code = 1


class DataError(ILRecError):
    exit_code = 2


class PrerequisiteError(DataError):
    """A pipeline stage was asked to run before the artifact it needs exists."""


class NumericError(ILRecError):
    exit_code = 3


class ProviderError(ILRecError):
    exit_code = 4

    def __init__(self, message, retries=0):
        super().__init__(f"{message} (after {retries} retries)")
        self.retries = retries


class PartialCollectionError(ProviderError):
    def __init__(self, message, completed_users, retries=0):
        super().__init__(f"{message}; completed users: {list(completed_users)}", retries)
        self.completed_users = list(completed_users)
