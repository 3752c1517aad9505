"""Allow ``python -m parallel_cpt``."""

from .main import run

run()
