"""Query-unlearning defense against model extraction.

A protected classifier measures how sensitive each incoming query is,
answers benign traffic honestly, and falsifies the confidence vectors of
query streams that collectively probe enough of a class region to enable
extraction. The package also ships the attack harness, the query-budget
planner and the evaluation pipeline used to exercise the defense at desk
scale.
"""

__version__ = "0.1.0"

SEED_ENV_VAR = "QUEEN_SEED"
