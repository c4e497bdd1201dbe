"""Built-in reference tasks used by the acceptance suite.

Settings were frozen from calibration runs over seeds 0-9; see README.
"""

from __future__ import annotations

from .config import ExperimentConfig, parse_config

# five clients on equal-curvature quadratics whose centres follow their label mix
SPSA_CONSENSUS = """
[task]
name = "quadratic"
num_examples = 200
num_classes = 10

[oracle]
dim = 3
curvature = 1.0
spread = 0.25

[optimizer]
name = "spsa"

[optimizer.spsa]
alpha = 0.01
lr = 0.05
momentum = 0.0
gamma_lr = 0.6

[partition]
strategy = "pathological"
classes_per_client = 2

[federation]
clients = 5
rounds = 1000
local_iters = 10
budget_per_client = 8000
"""

PGE_HIDDEN_PROMPT = """
[task]
name = "hidden-prompt"
num_examples = 200

[oracle]
vocab_size = 20
penalty = 1.0

[optimizer]
name = "pge"

[optimizer.pge]
sample_size = 10
prompt_length = 10
lr = 1e-3
floor = 1e-6

[federation]
clients = 5
rounds = 1000
local_iters = 10
budget_per_client = 8000
"""

BO_QUADRATIC = """
[task]
name = "quadratic"
num_examples = 200

[oracle]
dim = 1
center = 0.3
spread = 0.0

[optimizer]
name = "bo"

[optimizer.bo]
dim = 1
batch_size = 10
n_candidates = 200
lengthscale = 1.0
noise = 1e-3

[federation]
clients = 5
rounds = 30
local_iters = 1
budget_per_client = 8000
"""

TASKS = {
    "spsa-consensus": SPSA_CONSENSUS,
    "pge-hidden-prompt": PGE_HIDDEN_PROMPT,
    "bo-quadratic": BO_QUADRATIC,
}


def reference_config(name: str, seed: int = 0) -> ExperimentConfig:
    from dataclasses import replace

    return replace(parse_config(TASKS[name]), seed=seed)
