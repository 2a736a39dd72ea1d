"""Exception types raised across the package."""


class SpeechLLMError(Exception):
    """Base class for all package errors."""


class ContractError(SpeechLLMError, ValueError):
    """An operation was called with arguments violating its contract (shapes, widths, ...)."""


class ConfigError(SpeechLLMError, ValueError):
    """Invalid or inconsistent configuration."""


class EmptyOutputError(SpeechLLMError, ValueError):
    """Input too short to produce any output frame."""


class CTCInfeasibleError(SpeechLLMError, ValueError):
    """Target cannot be aligned within the available frames (infinite CTC loss)."""


class TokenizationError(SpeechLLMError, ValueError):
    def __init__(self, char, text=None):
        self.char = char
        self.text = text
        super().__init__(f"character {char!r} is not in the vocabulary")


class UndefinedLossError(SpeechLLMError, ValueError):
    """Loss requested over an empty set of supervised positions."""


class UndefinedRateError(SpeechLLMError, ValueError):
    """Error rate requested against an empty reference."""


class ManifestParseError(SpeechLLMError, ValueError):
    def __init__(self, message, line_no=None, field=None):
        self.line_no = line_no
        self.field = field
        where = f"line {line_no}: " if line_no is not None else ""
        super().__init__(where + message)


class NonFiniteLossError(SpeechLLMError, FloatingPointError):
    def __init__(self, stage, step, value):
        self.stage = stage
        self.step = step
        self.value = value
        super().__init__(f"non-finite loss {value} at stage {stage}, step {step}")


class LoraStateError(SpeechLLMError, RuntimeError):
    """LoRA adapters missing or already installed."""
