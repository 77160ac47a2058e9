from typing import Optional


class NRulesError(Exception):
    """
    Base class for every error raised by the simulation engine and its command line.
    """


class SchemaError(NRulesError, ValueError):
    """
    A value does not fit the declared shape of a component, superposition or scenario.
    """


class DomainError(NRulesError, ValueError):
    """
    A numerical argument lies outside the domain of the operation (negative mass, zero modulus, ...).
    """


class RuleViolation(NRulesError):
    """
    An operation would break one of the four nRules (for instance a ready component emitting current).
    """


class StepSizeError(NRulesError, ValueError):
    """
    The step is too coarse for the per-step Bernoulli sampler.
    """


class ScenarioParseError(SchemaError):
    """
    A scenario file could not be turned into a ScenarioSpec.
    """

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        where = path or "<scenario>"
        if line is not None:
            where = f"{where}:{line}"
        super().__init__(f"{where}: {message}")


class ScenarioConflictError(ScenarioParseError):
    """
    Both lambda and t_half were given and they disagree.
    """
