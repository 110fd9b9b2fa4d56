"""Exception hierarchy. Every domain error derives from :class:`SdfError`,
which the command line maps to exit status 1."""


class SdfError(Exception):
    """Base class for all domain errors."""


class IoFailure(SdfError):
    pass


# manifest

class ManifestAlreadyExists(SdfError):
    pass


class ManifestNotFound(SdfError):
    pass


class ParseError(SdfError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class UnknownRemoteTag(ParseError):
    pass


class InvariantViolation(ParseError):
    pass


class AlreadyRegistered(SdfError):
    pass


class NotRegistered(SdfError):
    pass


class FileNotFound(SdfError):
    pass


class PathOutsideProject(SdfError):
    pass


class ScopeConflict(SdfError):
    pass


class DirectoryNotFound(SdfError):
    pass


# remotes

class UnknownService(SdfError):
    pass


class PermissionSetFailure(SdfError):
    pass


class RemoteError(SdfError):
    """Non-success response from a remote service."""

    def __init__(self, message, status=None, body=""):
        if status is not None:
            message = f"{message} (HTTP {status})"
        if body:
            message = f"{message}: {body[:200]}"
        super().__init__(message)
        self.status = status
        self.body = body


class AuthFailure(RemoteError):
    pass


class DepositNotFound(RemoteError):
    pass


class IntegrityMismatch(SdfError):
    def __init__(self, path, expected, actual):
        super().__init__(f"{path}: expected md5 {expected}, got {actual}")
        self.path = path
        self.expected = expected
        self.actual = actual


# transfer

class NoLinkedRemote(SdfError):
    pass


class PushBlockedByModifiedFile(SdfError):
    def __init__(self, paths):
        self.paths = sorted(paths)
        super().__init__(
            "refusing to push files that differ from their registered digest "
            "(re-register them with 'sdf add --update'): " + ", ".join(self.paths)
        )


class DownloadFailure(SdfError):
    pass


class DestinationExists(DownloadFailure):
    pass


class FilenameUnderivable(SdfError):
    pass


class MalformedRow(SdfError):
    def __init__(self, row, message):
        super().__init__(f"row {row}: {message}")
        self.row = row


class BindFailure(SdfError):
    pass
