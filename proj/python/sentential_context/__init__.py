from ._core import (
    ConfigError,
    Error,
    InputError,
    ablate,
    bleu,
    bootstrap_test,
    count_parameters,
    evaluate,
    gen_task,
    lexicon_forward,
    lexicon_inverse,
    probe,
    sentence_bleu,
    train,
    variants,
    version,
)

__all__ = [
    "ConfigError",
    "Error",
    "InputError",
    "ablate",
    "bleu",
    "bootstrap_test",
    "count_parameters",
    "evaluate",
    "gen_task",
    "lexicon_forward",
    "lexicon_inverse",
    "probe",
    "sentence_bleu",
    "train",
    "variants",
    "version",
]
