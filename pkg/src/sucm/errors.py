"""Exception hierarchy shared by all sucm modules.

Every error carries a short class name so the CLI can print a single
machine-parsable line (``error: <Name>: <message>``).
"""


class SucmError(Exception):
    """Base class for every error raised by this package."""


# taxonomy ---------------------------------------------------------------

class TaxonomyError(SucmError, ValueError):
    pass


class CycleDetected(TaxonomyError):
    pass


class MultipleRoots(TaxonomyError):
    pass


class MixedChildKinds(TaxonomyError):
    pass


class OrphanNode(TaxonomyError):
    pass


class DuplicateApp(TaxonomyError):
    pass


class DuplicateNode(TaxonomyError):
    pass


class UnknownApp(SucmError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class UnknownNode(SucmError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class UnknownUser(SucmError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


# hierarchical softmax ----------------------------------------------------

class EmptyAppList(SucmError, ValueError):
    pass


# model / training ---------------------------------------------------------

class RootHasNoChoice(SucmError, ValueError):
    pass


class EmptySubcategory(SucmError, ValueError):
    pass


class EmptyDataset(SucmError, ValueError):
    pass


class EmptyTrainingSet(EmptyDataset):
    pass


class NodeNotInCompetingSet(SucmError, ValueError):
    pass


class IndexOutOfPath(SucmError, IndexError):
    pass


class UserHasAdoptedEverything(SucmError, ValueError):
    pass


# evaluation ---------------------------------------------------------------

class EmptyTestSet(SucmError, ValueError):
    pass


class NoEvaluableUsers(SucmError, ValueError):
    pass


# dataio -------------------------------------------------------------------

class ParseError(SucmError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnknownAppInRecord(ParseError):
    pass


class EmptyAfterFiltering(EmptyDataset):
    pass


class SpecInfeasible(SucmError, ValueError):
    pass


class CorruptFile(SucmError, ValueError):
    pass


class VersionMismatch(SucmError, ValueError):
    pass
