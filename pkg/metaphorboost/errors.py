
class MetaphorBoostError(Exception):
    '''
    Base class of all errors raised by this package;
    :attr:`exit_code` is the process exit code used by the CLI
    '''

    exit_code: int = 1


class InputError(MetaphorBoostError):
    '''
    Invalid user input (files, manifests, flags, config values)
    '''

    exit_code = 2


class BackendError(MetaphorBoostError):
    '''
    Failure talking to (or understanding) an external model backend
    '''

    exit_code = 3


class InvariantError(MetaphorBoostError):
    '''
    Internal invariant violation, always indicates a bug
    '''

    exit_code = 4
