"""Run the command-line interface with `python -m glmm_rvb`."""

from .cli import main

raise SystemExit(main())
