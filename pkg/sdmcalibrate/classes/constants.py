# sdmcalibrate constants

import math

import numpy as np

# float32 machine epsilon, used inside both logs of the log form
KEPS = float(np.finfo(np.float32).eps)

# base offset of the activation: (2 + q)
Q_RESCALE_OFFSET = 2

# q = e - 2 gives base e, i.e. the standard softmax
Q_SOFTMAX = math.e - 2

FORMAT_VERSION = 1

# seconds before a writer lock left by a killed process lapses
LOCK_EXPIRE = 600

# defaults for the exemplar adaptor and the training loop
DEFAULTS = {
    "alpha": 0.95,
    "j": 10,
    "m": 1000,
    "max_epochs": 50,
    "batch_size": 50,
    "lr": 1e-5,
    "rescaler_lr": 1e-4,
    "rescaler_max_epochs": 1000,
    "rescaler_patience": 10,
    "top_k": 3,
    "balance_tolerance": 0,
    "seed": 0,
}

# toy network defaults
NET_DEFAULTS = {
    "beta_min": 0.0,
    "beta_max": 0.1,
    "epochs": 5,
    "batch_size": 50,
    "lr": 1e-3,
    "cap_factor": 4,
}

# control tokens of the toy corpus
BOS = 0
MARKER = 1
EOS = 2
N_CONTROL_TOKENS = 3

ANSWER_LETTERS = ("A", "B", "C", "D")

# keys of the structured LLM response, in feature order
LLM_RESPONSE_KEYS = (
    "answer_letter",
    "confidence_in_answer_letter",
    "short_explanation_for_answer_confidence",
)

# stable key set of an emitted verdict
VERDICT_KEYS = (
    "id",
    "prediction",
    "admitted",
    "p_lower",
    "q",
    "d",
    "soft_qbin",
    "hard_qbin",
    "exemplar_ids",
)

ESTIMATE_VARIANTS = ("lower", "centroid", "upper")

REASONS = {
    "admitted": "ADMITTED",
    "no_region": "NO_HIGH_PROBABILITY_REGION",
    "ood": "OUT_OF_DISTRIBUTION",
    "below_region": "BELOW_MIN_VALID_QBIN",
    "below_psi": "BELOW_CLASS_THRESHOLD",
}


def reversed_dict(d):
    return {val: key for key, val in d.items()}


LETTER_INDEX = reversed_dict(dict(enumerate(ANSWER_LETTERS)))
REASON_KEYS = reversed_dict(REASONS)
