"""Exception hierarchy; each family maps onto a CLI exit code."""


class CoevoError(Exception):
    exit_code = 1


class ValidationError(CoevoError, ValueError):
    """Bad configuration or malformed input. Carries the offending field name."""

    exit_code = 2

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class RegistryError(ValidationError, KeyError):
    def __init__(self, name, available):
        self.available = tuple(available)
        ValidationError.__init__(
            self, "coefficients.preset",
            f"unknown preset {name!r}; available: {', '.join(self.available)}")

    def __str__(self):
        return Exception.__str__(self)


class ResourceGuardError(CoevoError):
    exit_code = 3


class IntegrationError(CoevoError, FloatingPointError):
    """Non-finite value produced during time stepping."""

    exit_code = 4

    def __init__(self, step_index, entity, what="state"):
        self.step_index = step_index
        self.entity = entity
        super().__init__(f"non-finite {what} at step {step_index}, entity {entity}")
