"""Exception hierarchy shared across the package."""


class RefmixError(Exception):
    """Base class for all package errors."""


class ShapeError(RefmixError):
    """Tensor dimensions do not match an operation's contract."""


class ContractError(RefmixError):
    """A call violated an operation's preconditions (stale cache, bad lengths)."""


class LayoutError(RefmixError):
    """Invalid image layout (duplicate or non-contiguous image indices)."""


class ConfigError(RefmixError):
    """Invalid configuration; message lists every problem found."""


class InputError(RefmixError):
    """Caller-supplied value is unusable (empty instruction, bad flag)."""


class ManifestError(RefmixError):
    """Manifest file unreadable or structurally broken."""


class IntegrityError(RefmixError):
    """Cross-record consistency violated (unknown case id, dangling parent)."""


class BackendError(RefmixError):
    """A model backend (stub or HTTP) failed to produce a result."""


class TrainingError(RefmixError):
    """Training aborted (non-finite loss)."""
