"""Exception hierarchy shared by every pptfl module."""


class PPTError(Exception):
    """Base class for all simulator and library errors."""


class ParameterError(PPTError, ValueError):
    pass


class ConfigError(PPTError):
    pass


class ShapeError(PPTError):
    pass


class DegenerateRoundError(PPTError):
    """Total weight of a round is zero, so no global update exists."""


class OverflowRiskError(PPTError):
    """A fixed-point magnitude left the headroom below 2^(w-1)."""


class InsufficientSharedKeysError(PPTError):
    def __init__(self, pair, found, threshold):
        super().__init__(f"pair {pair} shares {found} keys, needs more than {threshold}")
        self.pair = pair
        self.found = found
        self.threshold = threshold


class PathKeyFailureError(PPTError):
    pass


class KeyEstablishmentRequiredError(PPTError):
    pass


class AuthenticationError(PPTError):
    pass


class ForgeryError(AuthenticationError):
    pass


class ReplayError(AuthenticationError):
    pass


class AbortRoundError(PPTError):
    pass


class RecipientDroppedError(PPTError):
    def __init__(self, client):
        super().__init__(f"client {client} did not answer")
        self.client = client


class AttackInfeasibleError(PPTError):
    pass
